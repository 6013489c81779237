"""Stage-1 training: conditional flow matching over future mask latents.

A training sample is a window of an episode: n conditioning frames of RGB
latents ("memory") followed by tau future frames of rendered-mask latents.
Future slots are blended with Gaussian noise along the linear path
z_s = (1-s) z0 + s z1 and the backbone is trained to output the constant path
velocity z1 - z0 on those slots.  Memory slots stay clean — they enter the
token stream as-is (plus a small training-time noise injection) and are
modulated at diffusion time 0, so the loss never reads them.

Sampling inverts the path with plain Euler steps from s=1 to s=0, holding
memory slots clean throughout.  The `rgb-target` ablation swaps the future
target from mask latents to RGB latents and changes nothing else.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensorkit as tk
from .backbone import BackboneConfig, ConditionContext, FeatureBank, forward
from .codec import CodecStats, PatchCodec, TokenSequence, decode_mask, denormalize, LatentGrid
from .errors import ContractError, VerificationError
from .optim import AdamW
from .tensorkit import Rng, Tensor


@dataclass
class DynamicsConfig:
    memory_frames: int = 4          # n conditioning frames
    future_frames: int = 5          # tau predicted frames
    views: int = 2
    caption_dropout: float = 0.06
    noise_injection: float = 0.1    # std of Gaussian added to memory latents while training
    loss_weight: str = "uniform"    # w(s) hook
    text_len: int = 4
    text_vocab: int = 32

    @property
    def total_frames(self) -> int:
        return self.memory_frames + self.future_frames


# w(s) registry; the objective uses uniform weighting unless configured otherwise.
LOSS_WEIGHTS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "uniform": lambda s: np.ones_like(s),
}


@dataclass
class LatentEpisode:
    """One demonstration, pre-encoded: normalized latents per view and frame."""

    rgb: np.ndarray     # (V, T, H', W', D)
    masks: np.ndarray   # (V, T, H', W', D)
    text: np.ndarray    # (L,) instruction token ids
    actions: np.ndarray | None = None   # (T, A) commands, needed for action training

    def __post_init__(self):
        if self.rgb.shape != self.masks.shape:
            raise ContractError(f"rgb/mask latent shapes differ: {self.rgb.shape} vs {self.masks.shape}")
        if self.actions is not None and self.actions.shape[0] != self.rgb.shape[1]:
            raise ContractError("need one action row per frame")

    @property
    def length(self) -> int:
        return self.rgb.shape[1]


@dataclass
class FlowBatch:
    memory: np.ndarray   # (B, V, n, H', W', D) RGB latents
    target: np.ndarray   # (B, V, tau, H', W', D) clean future latents
    text: np.ndarray     # (B, L) token ids
    s: np.ndarray        # (B,) diffusion times
    z1: np.ndarray       # noise, same shape as target

    def __post_init__(self):
        if self.z1.shape != self.target.shape:
            raise ContractError("noise draw must match target shape")
        if self.s.min() < 0.0 or self.s.max() > 1.0:
            raise ContractError("diffusion times must lie in [0, 1]")


def flow_interpolate(z0: np.ndarray, z1: np.ndarray, s) -> np.ndarray:
    """Linear path point z_s = (1-s) z0 + s z1; s scalar or one value per sample."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim:
        s = s.reshape(s.shape + (1,) * (z0.ndim - s.ndim))
    return (1.0 - s) * z0 + s * z1


def sample_flow_batch(episodes: list[LatentEpisode], dcfg: DynamicsConfig,
                      batch_size: int, rng: Rng, target_kind: str = "mask") -> FlowBatch:
    """Window sampler: random episode, random start, fresh (s, z1) per sample."""
    if target_kind not in ("mask", "rgb"):
        raise ContractError(f"target kind must be 'mask' or 'rgb', got {target_kind!r}")
    need = dcfg.total_frames
    usable = [e for e in episodes if e.length >= need]
    if not usable:
        raise ContractError(f"no episode has the required {need} frames")
    mem, tgt, txt = [], [], []
    for b in range(batch_size):
        ep = usable[int(rng.integers(0, len(usable)))]
        t0 = int(rng.integers(0, ep.length - need + 1))
        mem.append(ep.rgb[:, t0:t0 + dcfg.memory_frames])
        future = ep.masks if target_kind == "mask" else ep.rgb
        tgt.append(future[:, t0 + dcfg.memory_frames:t0 + need])
        txt.append(ep.text)
    target = np.stack(tgt)
    return FlowBatch(np.stack(mem), target, np.stack(txt),
                     rng.uniform(batch_size), rng.normal(target.shape))


def _frame_coords(dcfg: DynamicsConfig, grid: tuple[int, int]) -> np.ndarray:
    hp, wp = grid
    return np.stack(np.meshgrid(np.arange(dcfg.views), np.arange(dcfg.total_frames),
                                np.arange(hp), np.arange(wp), indexing="ij"),
                    axis=-1).reshape(-1, 4)


def build_conditioned_input(memory: np.ndarray, future: np.ndarray, s: np.ndarray,
                            dcfg: DynamicsConfig) -> tuple[TokenSequence, np.ndarray]:
    """Assemble the token stream: clean memory slots then (already noised) future slots.

    Returns the sequence plus the per-token diffusion time — zero on memory
    tokens, the sample's s on future tokens.
    """
    b, v, n, hp, wp, d = memory.shape
    if v != dcfg.views or n != dcfg.memory_frames or future.shape[2] != dcfg.future_frames:
        raise ContractError(
            f"slot layout {memory.shape[1:3]}+{future.shape[2]} does not match config "
            f"({dcfg.views}, {dcfg.memory_frames})+{dcfg.future_frames}")
    frames = np.concatenate([memory, future], axis=2)          # (B, V, n+tau, H', W', D)
    values = frames.reshape(b, -1, d)
    coords = np.broadcast_to(_frame_coords(dcfg, (hp, wp)), (b, values.shape[1], 4)).copy()
    memory_flag = np.broadcast_to(coords[..., 1] < n, (b, values.shape[1])).copy()
    s_tok = np.where(memory_flag, 0.0, np.asarray(s).reshape(b, 1))
    return TokenSequence(values, coords, memory_flag), s_tok


# -- model-specific parameters beyond the backbone ---------------------------------


def init_dynamics_params(bcfg: BackboneConfig, dcfg: DynamicsConfig, rng: Rng) -> dict[str, Tensor]:
    from .backbone import init_backbone_params

    p = init_backbone_params(bcfg, rng.split("backbone"))
    p["text_embed"] = Tensor(
        rng.split("text_embed").normal((dcfg.text_vocab, bcfg.text_width),
                                       scale=bcfg.text_width ** -0.5), requires_grad=True)
    p["null_text"] = Tensor(np.zeros((1, 1, bcfg.text_width)), requires_grad=True)
    # Zero-started velocity head: the model begins as the zero field.
    p["out_proj.w"] = Tensor(np.zeros((bcfg.width, bcfg.token_dim)), requires_grad=True)
    p["out_proj.b"] = Tensor(np.zeros(bcfg.token_dim), requires_grad=True)
    return p


def embed_text(params: dict[str, Tensor], ids: np.ndarray,
               drop: np.ndarray | None = None) -> Tensor:
    """Token-id lookup; rows flagged in `drop` are replaced by the learned null token."""
    emb = tk.embedding(params["text_embed"], np.asarray(ids, dtype=np.int64))
    if drop is None or not drop.any():
        return emb
    keep = (~drop).astype(np.float64)[:, None, None]
    return emb * keep + params["null_text"] * (1.0 - keep)


def velocity_head(params: dict[str, Tensor], bank: FeatureBank) -> Tensor:
    return bank.layers[-1] @ params["out_proj.w"] + params["out_proj.b"]


def mask_loss(params: dict[str, Tensor], batch: FlowBatch, bcfg: BackboneConfig,
              dcfg: DynamicsConfig, rng: Rng) -> Tensor:
    """Flow-matching loss over future slots only; rng drives the train-time noise."""
    memory = batch.memory
    if dcfg.noise_injection > 0:
        memory = memory + rng.split("mem-noise").normal(memory.shape, scale=dcfg.noise_injection)
    z_s = flow_interpolate(batch.target, batch.z1, batch.s)
    tokens, s_tok = build_conditioned_input(memory, z_s, batch.s, dcfg)

    drop = None
    if dcfg.caption_dropout > 0:
        drop = rng.split("caption").uniform(batch.text.shape[0]) < dcfg.caption_dropout
    ctx = ConditionContext(embed_text(params, batch.text, drop), s_tok)

    bank = forward(params, tokens, ctx, bcfg)
    v_pred = velocity_head(params, bank)

    fut_idx = np.flatnonzero(~tokens.memory[0])
    v_fut = v_pred[:, fut_idx]
    vel_target = (batch.z1 - batch.target).reshape(batch.target.shape[0], -1,
                                                   batch.target.shape[-1])
    w = LOSS_WEIGHTS[dcfg.loss_weight](batch.s)[:, None, None]
    return tk.tmean(tk.square(v_fut - Tensor(vel_target)) * w)


def euler_rollout(params: dict[str, Tensor] | None, memory: np.ndarray, text: np.ndarray,
                  bcfg: BackboneConfig | None, dcfg: DynamicsConfig, steps: int, rng: Rng,
                  velocity_fn: Callable[[np.ndarray, float], np.ndarray] | None = None,
                  z_init: np.ndarray | None = None,
                  keep_rows: np.ndarray | None = None) -> np.ndarray:
    """Integrate the learned field from noise (s=1) to a clean prediction (s=0).

    `velocity_fn(z, s) -> v` overrides the model, which lets tests drive the
    sampler with closed-form fields.  `z_init` overrides the initial draw
    (lockstep evaluation feeds per-episode noise).  `keep_rows` (B, S_kept)
    prunes each forward pass; it must retain every future slot, since those
    carry the state being integrated.
    """
    if steps < 1:
        raise ContractError(f"rollout needs at least 1 step, got {steps}")
    b, v, n, hp, wp, d = memory.shape
    shape = (b, v, dcfg.future_frames, hp, wp, d)
    z = rng.split("rollout-init").normal(shape) if z_init is None else z_init.copy()
    ds = 1.0 / steps
    with tk.no_grad():
        text_emb = None if velocity_fn is not None else embed_text(params, text)
        for k in range(steps):
            s_k = 1.0 - k * ds
            if velocity_fn is not None:
                vel = velocity_fn(z, s_k)
            else:
                tokens, s_tok = build_conditioned_input(memory, z.reshape(shape),
                                                        np.full(b, s_k), dcfg)
                if keep_rows is not None:
                    tokens = tokens.select(keep_rows)
                    s_tok = np.take_along_axis(s_tok, keep_rows, axis=1)
                    if tokens.memory.sum() != keep_rows.size - b * np.prod(shape[1:5]):
                        raise ContractError("keep_rows must retain every future slot")
                bank = forward(params, tokens, ConditionContext(text_emb, s_tok), bcfg)
                v_pred = velocity_head(params, bank).numpy()
                fut_rows = np.stack([np.flatnonzero(~m) for m in tokens.memory])
                vel = np.take_along_axis(v_pred, fut_rows[:, :, None], axis=1).reshape(shape)
            z = z - ds * vel
    return z


def rollout_to_masks(pred: np.ndarray, patch_codec: PatchCodec, stats: CodecStats,
                     palette: np.ndarray) -> np.ndarray:
    """Predicted normalized mask latents (B, V, T, H', W', D) -> class rasters."""
    b, v, t, hp, wp, d = pred.shape
    f = patch_codec.patch_size
    out = np.zeros((b, v, t, hp * f, wp * f), dtype=np.int64)
    for i in range(b):
        for j in range(v):
            grid = denormalize(LatentGrid(pred[i, j], normalized=True), stats)
            out[i, j] = decode_mask(patch_codec.decode(grid), palette)
    return out


# -- training loop -----------------------------------------------------------------


@dataclass
class StageConfig:
    steps: int
    batch_size: int
    val_fraction: float = 0.1
    val_every: int = 200
    checkpoint_every: int = 0     # 0 = only on completion


@dataclass
class TrainState:
    params: dict[str, Tensor]
    opt: AdamW

    @property
    def step(self) -> int:
        return self.opt.step_count


def split_episodes(episodes: list, val_fraction: float, seed: int) -> tuple[list, list]:
    """Deterministic train/validation partition."""
    perm = Rng(seed).split("val-split").permutation(len(episodes))
    n_val = int(round(val_fraction * len(episodes)))
    if n_val >= len(episodes):
        n_val = 0
    val = [episodes[i] for i in perm[:n_val]]
    train = [episodes[i] for i in perm[n_val:]]
    return train, val


class TrainLog:
    """Append-only CSV: step, stage, loss, lr, wallclock-ms."""

    COLUMNS = ["step", "stage", "loss", "lr", "wallclock-ms"]

    def __init__(self, path: Path | None):
        self.path = path
        if path is not None and not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", newline="") as fp:
                csv.writer(fp).writerow(self.COLUMNS)

    def row(self, step: int, stage: str, loss: float, lr: float, ms: float) -> None:
        if self.path is None:
            return
        with open(self.path, "a", newline="") as fp:
            csv.writer(fp).writerow([step, stage, f"{loss:.10g}", f"{lr:.10g}", f"{ms:.3f}"])


def _dump_batch(batch: FlowBatch, out_dir: Path | None, stage: str) -> str:
    if out_dir is None:
        return "(no output directory; batch not dumped)"
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"nan-batch-{stage}.bin"
    with open(path, "wb") as fp:
        tk.write_tensor_dict(fp, {"memory": batch.memory, "target": batch.target,
                                  "text": batch.text.astype(np.float64),
                                  "s": batch.s, "z1": batch.z1})
    return str(path)


def train_stage1(episodes: list[LatentEpisode], params: dict[str, Tensor], opt: AdamW,
                 bcfg: BackboneConfig, dcfg: DynamicsConfig, scfg: StageConfig, seed: int,
                 out_dir: Path | None = None, target_kind: str = "mask",
                 checkpoint_fn: Callable[[TrainState, int], None] | None = None) -> TrainState:
    """AdamW loop over flow-matching batches; resumable via the optimizer's counter.

    All randomness is keyed by (seed, step label), so a resumed run replays the
    exact batch and noise sequence of an uninterrupted one.
    """
    root = Rng(seed)
    train_eps, val_eps = split_episodes(episodes, scfg.val_fraction, seed)
    log = TrainLog(out_dir / "train-log.csv" if out_dir else None)
    state = TrainState(params, opt)
    for step in range(opt.step_count, scfg.steps):
        t0 = time.perf_counter()
        srng = root.split(f"stage1/step/{step}")
        batch = sample_flow_batch(train_eps, dcfg, scfg.batch_size, srng.split("batch"),
                                  target_kind)
        loss = mask_loss(params, batch, bcfg, dcfg, srng.split("noise"))
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            where = _dump_batch(batch, out_dir, "stage1")
            raise VerificationError(f"non-finite stage-1 loss at step {step}; batch dumped to {where}")
        opt.zero_grad()
        tk.backward(loss)
        lr, _ = opt.step()
        log.row(step, "stage1", loss_val, lr, (time.perf_counter() - t0) * 1e3)

        if val_eps and scfg.val_every and (step + 1) % scfg.val_every == 0:
            vrng = root.split(f"stage1/val/{step}")
            vbatch = sample_flow_batch(val_eps, dcfg, scfg.batch_size, vrng.split("batch"),
                                       target_kind)
            with tk.no_grad():
                vloss = mask_loss(params, vbatch, bcfg, dcfg, vrng.split("noise")).item()
            log.row(step, "stage1-val", vloss, lr, 0.0)
        if checkpoint_fn and scfg.checkpoint_every and (step + 1) % scfg.checkpoint_every == 0:
            checkpoint_fn(state, step + 1)
    if checkpoint_fn:
        checkpoint_fn(state, opt.step_count)
    return state
