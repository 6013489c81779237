"""Action-chunk diffusion head, its training stage, and the model variants.

The head is a transformer over H_a action tokens that mirrors the backbone
depth: its l-th block cross-attends to the l-th layer of the backbone's
feature bank, so features at every level of the mask-dynamics trunk are
available to the policy.  Denoising follows the score-matching convention:
the network phi is trained on noised chunks u + sigma*eps to predict
-eps/sigma, i.e. the score of the sigma-smoothed data distribution, with
weighting lambda(sigma) = sigma^2 keeping the objective bounded for all noise
levels.  Sampling integrates the probability-flow ODE du/dsigma = -sigma*phi
over a geometric sigma grid, with a final step straight to sigma = 0.

Variants:
  - full model ("mwm" / "rgb-target"): stage-2 gradients flow through the
    feature bank into the backbone;
  - "mwm-c2": backbone frozen, bank detached, only the head trains;
  - "mwm-c1": no head at all — an inverse-dynamics MLP reads consecutive
    predicted mask latents from an explicit rollout.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensorkit as tk
from .backbone import (
    BackboneConfig,
    ConditionContext,
    FeatureBank,
    forward,
    modulate,
    sinusoidal_embed,
)
from .codec import CodecStats, PatchCodec
from .dynamics import (
    DynamicsConfig,
    LatentEpisode,
    build_conditioned_input,
    embed_text,
    euler_rollout,
)
from .errors import ContractError, VerificationError
from .optim import AdamW
from .tensorkit import Rng, Tensor

VARIANTS = ("mwm", "mwm-c1", "mwm-c2", "rgb-target")


@dataclass
class PolicyConfig:
    layers: int = 4            # must equal backbone depth for layerwise coupling
    width: int = 64
    heads: int = 4
    horizon: int = 36          # H_a, actions denoised jointly per chunk
    action_dim: int = 3        # executed command part of u
    state_dim: int = 3         # proprioceptive part of u
    sigma_min: float = 0.02
    sigma_max: float = 5.0
    sampler_steps: int = 10
    rollout_features: bool = False  # feature bank from a full mask rollout instead of one pass
    idm_hidden: int = 64

    def __post_init__(self):
        if self.width % self.heads:
            raise ContractError(f"policy width {self.width} not divisible by {self.heads} heads")
        if self.sigma_min <= 0 or self.sigma_max <= self.sigma_min:
            raise ContractError("need 0 < sigma_min < sigma_max")

    @property
    def chunk_dim(self) -> int:
        return self.action_dim + self.state_dim


@dataclass
class ActionNormalizer:
    """Per-dimension affine map to zero mean / unit std under training data."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, episodes: list[LatentEpisode], floor: float = 1e-6) -> "ActionNormalizer":
        rows = np.concatenate([e.actions for e in episodes])
        return cls(rows.mean(axis=0), np.maximum(rows.std(axis=0), floor))

    def apply(self, u: np.ndarray) -> np.ndarray:
        return (u - self.mean) / self.std

    def invert(self, u: np.ndarray) -> np.ndarray:
        return u * self.std + self.mean


# -- parameters ---------------------------------------------------------------------


def init_policy_params(pcfg: PolicyConfig, bcfg: BackboneConfig, rng: Rng) -> dict[str, Tensor]:
    if pcfg.layers != bcfg.layers:
        raise ContractError(
            f"policy depth {pcfg.layers} must equal backbone depth {bcfg.layers}")
    from .backbone import init_attn_params, init_mod_params, linear_init

    p: dict[str, Tensor] = {}
    w = pcfg.width
    p["policy.in_proj.w"] = linear_init(rng.split("in"), pcfg.chunk_dim, w)
    p["policy.in_proj.b"] = Tensor(np.zeros(w), requires_grad=True)
    p["policy.pos"] = Tensor(rng.split("pos").normal((pcfg.horizon, w), scale=0.02),
                             requires_grad=True)
    p["policy.time.w1"] = linear_init(rng.split("t1"), w, w)
    p["policy.time.b1"] = Tensor(np.zeros(w), requires_grad=True)
    p["policy.time.w2"] = linear_init(rng.split("t2"), w, w)
    p["policy.time.b2"] = Tensor(np.zeros(w), requires_grad=True)
    for i in range(pcfg.layers):
        lr = rng.split(f"layer{i}")
        init_attn_params(lr.split("attn"), p, f"policy.blocks.{i}.attn", w, w, w)
        init_mod_params(p, f"policy.blocks.{i}.attn", w)
        init_attn_params(lr.split("bank"), p, f"policy.blocks.{i}.bank", w, bcfg.width, w)
        init_mod_params(p, f"policy.blocks.{i}.bank", w)
        p[f"policy.blocks.{i}.ffn.w1"] = linear_init(lr.split("f1"), w, 4 * w)
        p[f"policy.blocks.{i}.ffn.b1"] = Tensor(np.zeros(4 * w), requires_grad=True)
        p[f"policy.blocks.{i}.ffn.w2"] = linear_init(lr.split("f2"), 4 * w, w)
        p[f"policy.blocks.{i}.ffn.b2"] = Tensor(np.zeros(w), requires_grad=True)
        init_mod_params(p, f"policy.blocks.{i}.ffn", w)
    p["policy.out_proj.w"] = Tensor(np.zeros((w, pcfg.chunk_dim)), requires_grad=True)
    p["policy.out_proj.b"] = Tensor(np.zeros(pcfg.chunk_dim), requires_grad=True)
    return p


# -- forward ------------------------------------------------------------------------


def _noise_coord(sigma: np.ndarray, pcfg: PolicyConfig) -> np.ndarray:
    """Map sigma to [0, 1] log-linearly between sigma_min and sigma_max."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ContractError("noise level sigma must be positive")
    return np.log(sigma / pcfg.sigma_min) / np.log(pcfg.sigma_max / pcfg.sigma_min)


def policy_forward(params: dict[str, Tensor], u_noised, sigma: np.ndarray,
                   bank: FeatureBank, pcfg: PolicyConfig) -> Tensor:
    """Denoiser phi(u~, sigma, bank) -> tensor shaped like the chunk.

    The transformer itself predicts a bounded residual F, and phi is assembled
    from it around an identity skip: phi = (c_skip*u + c_out*F - u) / sigma^2
    with c_in = 1/sqrt(1+sigma^2), c_skip = 1/(1+sigma^2) and
    c_out = sigma/sqrt(1+sigma^2) (chunks are normalized to unit variance, so
    sigma_data = 1).  A raw score head would have to emit magnitudes spanning
    sigma_max/sigma_min across the noise range, which a shallow network cannot
    modulate; pre-scaling the input and post-scaling the output keeps both at
    O(1) everywhere while the returned phi is an ordinary score estimate.
    """
    if bank.depth != pcfg.layers:
        raise ContractError(f"bank depth {bank.depth} != policy depth {pcfg.layers}")
    u = u_noised if isinstance(u_noised, Tensor) else Tensor(u_noised)
    b, h_a, _ = u.shape
    if h_a != pcfg.horizon:
        raise ContractError(f"chunk horizon {h_a} != configured {pcfg.horizon}")

    s3 = np.asarray(sigma, dtype=np.float64)[:, None, None]
    c_in = 1.0 / np.sqrt(1.0 + s3 ** 2)

    x = (u * c_in) @ params["policy.in_proj.w"] + params["policy.in_proj.b"] + params["policy.pos"]
    coord = np.broadcast_to(_noise_coord(sigma, pcfg)[:, None], (b, h_a))
    se = Tensor(sinusoidal_embed(1000.0 * coord, pcfg.width))
    emb = tk.silu(se @ params["policy.time.w1"] + params["policy.time.b1"]) \
        @ params["policy.time.w2"] + params["policy.time.b2"]

    from .backbone import attention, ffn

    for i in range(pcfg.layers):
        pre = f"policy.blocks.{i}"
        m = modulate(x, emb, params[f"{pre}.attn.mod.w"], params[f"{pre}.attn.mod.b"])
        x = x + attention(params, f"{pre}.attn", m, kv=m, heads=pcfg.heads)
        x = x + attention(params, f"{pre}.bank",
                           modulate(x, emb, params[f"{pre}.bank.mod.w"], params[f"{pre}.bank.mod.b"]),
                           kv=bank.layers[i], heads=pcfg.heads)
        x = x + ffn(params, f"{pre}.ffn",
                     modulate(x, emb, params[f"{pre}.ffn.mod.w"], params[f"{pre}.ffn.mod.b"]))
    return x @ params["policy.out_proj.w"] + params["policy.out_proj.b"]


def action_loss(params: dict[str, Tensor], chunks: np.ndarray, bank: FeatureBank,
                pcfg: PolicyConfig, rng: Rng, sigma: np.ndarray | None = None,
                eps: np.ndarray | None = None) -> Tensor:
    """lambda(sigma) * ||phi(u + sigma*eps, sigma, bank) + eps/sigma||^2, mean over batch.

    The sigma^2 weighting cancels the 1/sigma^2 of the target energy, so a
    zero denoiser scores exactly ||eps||^2 regardless of the noise level —
    horizon * chunk_dim in expectation.
    """
    b = chunks.shape[0]
    if sigma is None:
        lo, hi = np.log(pcfg.sigma_min), np.log(pcfg.sigma_max)
        sigma = np.exp(rng.split("sigma").uniform(b, low=lo, high=hi))
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ContractError("noise level sigma must be positive")
    if eps is None:
        eps = rng.split("eps").normal(chunks.shape)
    s3 = sigma[:, None, None]
    pred = policy_forward(params, chunks + s3 * eps, sigma, bank, pcfg)
    resid = pred + Tensor(eps / s3)
    per_sample = tk.square(resid).sum(axis=(1, 2))
    return tk.tmean(per_sample * (sigma ** 2))


# -- sampling -----------------------------------------------------------------------


def sigma_grid(pcfg: PolicyConfig, steps: int | None = None) -> np.ndarray:
    """Geometric levels sigma_max -> sigma_min, then a final clamp level 0."""
    k = pcfg.sampler_steps if steps is None else steps
    if k < 1:
        raise ContractError(f"sampler needs >= 1 steps, got {k}")
    if k == 1:
        grid = np.array([pcfg.sigma_max])
    else:
        grid = pcfg.sigma_max * (pcfg.sigma_min / pcfg.sigma_max) ** (np.arange(k) / (k - 1))
    return np.append(grid, 0.0)


def sample_chunk(params: dict[str, Tensor] | None, bank: FeatureBank | None,
                 pcfg: PolicyConfig, rng: Rng, steps: int | None = None,
                 denoiser: Callable[[np.ndarray, float], np.ndarray] | None = None,
                 u_init: np.ndarray | None = None, batch: int = 1) -> np.ndarray:
    """Euler integration of du/dsigma = -sigma * phi from sigma_max down to 0.

    The last grid step targets sigma = 0 exactly: for the score of a Dirac
    distribution it lands on the data point regardless of accumulated error.
    `denoiser` overrides the model (closed-form oracles in tests); `u_init`
    overrides the initial draw (lockstep evaluation feeds per-episode noise).
    """
    grid = sigma_grid(pcfg, steps)
    if u_init is None:
        if bank is not None:
            batch = bank.layers[0].shape[0]
        u = grid[0] * rng.split("chunk-init").normal((batch, pcfg.horizon, pcfg.chunk_dim))
    else:
        u = grid[0] * u_init
    with tk.no_grad():
        for k in range(len(grid) - 1):
            s_k, s_next = grid[k], grid[k + 1]
            if denoiser is not None:
                phi = denoiser(u, s_k)
            else:
                phi = policy_forward(params, u, np.full(u.shape[0], s_k), bank, pcfg).numpy()
            u = u + (s_next - s_k) * (-s_k * phi)
    return u


# -- feature bank construction ---------------------------------------------------------


def compute_feature_bank(params: dict[str, Tensor], memory: np.ndarray, text: np.ndarray,
                         bcfg: BackboneConfig, dcfg: DynamicsConfig, pcfg: PolicyConfig,
                         rng: Rng, z_future: np.ndarray | None = None,
                         keep_rows: np.ndarray | None = None) -> FeatureBank:
    """One backbone pass whose hidden states condition the action head.

    Default: future slots carry pure noise at the top diffusion level, one
    forward pass.  With `rollout_features` the future slots instead carry a
    full Euler mask rollout and are treated as clean (time 0).  `keep_rows`
    prunes the tokens of this feature pass (the rollout, if any, runs on the
    full grid).
    """
    b, v, n, hp, wp, d = memory.shape
    shape = (b, v, dcfg.future_frames, hp, wp, d)
    if pcfg.rollout_features:
        future = euler_rollout(params, memory, text, bcfg, dcfg, pcfg.sampler_steps,
                               rng.split("feat-rollout"), z_init=z_future)
        s_future = 0.0
    else:
        future = z_future if z_future is not None else rng.split("feat-noise").normal(shape)
        s_future = 1.0
    tokens, s_tok = build_conditioned_input(memory, future, np.full(b, s_future), dcfg)
    if keep_rows is not None:
        tokens = tokens.select(keep_rows)
        s_tok = np.take_along_axis(s_tok, keep_rows, axis=1)
    ctx = ConditionContext(embed_text(params, text), s_tok)
    return forward(params, tokens, ctx, bcfg)


# -- inverse dynamics (variant C1) ---------------------------------------------------


def init_idm_params(input_dim: int, hidden: int, out_dim: int, rng: Rng) -> dict[str, Tensor]:
    from .backbone import linear_init

    return {
        "idm.w1": linear_init(rng.split("w1"), input_dim, hidden),
        "idm.b1": Tensor(np.zeros(hidden), requires_grad=True),
        "idm.w2": linear_init(rng.split("w2"), hidden, out_dim),
        "idm.b2": Tensor(np.zeros(out_dim), requires_grad=True),
    }


def idm_forward(params: dict[str, Tensor], pair: np.ndarray) -> Tensor:
    """(B, 2*F) concatenated consecutive mask encodings -> (B, action_dim)."""
    h = tk.silu(Tensor(pair) @ params["idm.w1"] + params["idm.b1"])
    return h @ params["idm.w2"] + params["idm.b2"]


def sample_idm_batch(episodes: list[LatentEpisode], action_dim: int, batch_size: int,
                     rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for _ in range(batch_size):
        ep = episodes[int(rng.integers(0, len(episodes)))]
        t = int(rng.integers(0, ep.length - 1))
        xs.append(np.concatenate([ep.masks[:, t].ravel(), ep.masks[:, t + 1].ravel()]))
        ys.append(ep.actions[t, :action_dim])
    return np.stack(xs), np.stack(ys)


def train_idm(episodes: list[LatentEpisode], pcfg: PolicyConfig, steps: int,
              batch_size: int, seed: int, lr: float = 1e-3) -> dict[str, Tensor]:
    """Squared-error regression from adjacent mask latents to the action between them."""
    root = Rng(seed)
    feat = episodes[0].masks[:, 0].size
    params = init_idm_params(2 * feat, pcfg.idm_hidden, pcfg.action_dim, root.split("idm-init"))
    from .optim import OptimConfig

    opt = AdamW(params, OptimConfig(lr=lr, warmup_steps=min(100, steps // 10 + 1),
                                    weight_decay=0.0))
    for step in range(steps):
        x, y = sample_idm_batch(episodes, pcfg.action_dim, batch_size,
                                root.split(f"idm/step/{step}"))
        loss = tk.tmean(tk.square(idm_forward(params, x) - Tensor(y)))
        opt.zero_grad()
        tk.backward(loss)
        opt.step()
    return params


def c1_actions(idm_params: dict[str, Tensor], rollout: np.ndarray,
               prev_mask: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    """Actions from consecutive predicted masks: one per rollout frame.

    Pair k uses frames (m_{t+k}, m_{t+k+1}).  The current-frame estimate m_t is
    the cached first frame of the previous control step's rollout; at episode
    start (no cache) the first pair falls back to the first two predicted
    frames.  Returns (actions (B, tau, action_dim), new cache (B, V, H', W', D)).
    """
    b, v, tau, hp, wp, d = rollout.shape
    frames = [rollout[:, :, k].reshape(b, -1) for k in range(tau)]
    adjacent = list(zip(frames[:-1], frames[1:]))          # tau - 1 predicted pairs
    if prev_mask is not None:
        pairs = [(prev_mask.reshape(b, -1), frames[0])] + adjacent
    elif tau >= 2:
        # No current-frame estimate yet: stand in with the first predicted pair.
        pairs = [adjacent[0]] + adjacent
    else:
        pairs = [(frames[0], frames[0])]                   # degenerate horizon: hold still
    with tk.no_grad():
        acts = [idm_forward(idm_params, np.concatenate([l, r], axis=1)).numpy()
                for l, r in pairs]
    return np.stack(acts, axis=1), rollout[:, :, 0]


# -- stage-2 training -----------------------------------------------------------------


@dataclass
class Stage2Batch:
    memory: np.ndarray   # (B, V, n, H', W', D)
    text: np.ndarray     # (B, L)
    chunks: np.ndarray   # (B, H_a, chunk_dim), normalized


def sample_stage2_batch(episodes: list[LatentEpisode], dcfg: DynamicsConfig,
                        pcfg: PolicyConfig, norm: ActionNormalizer, batch_size: int,
                        rng: Rng) -> Stage2Batch:
    """Memory window plus the action chunk starting at its last frame.

    Chunks reaching past the episode end repeat the final row, which matches
    an expert that has finished and holds still.
    """
    n = dcfg.memory_frames
    usable = [e for e in episodes if e.length >= n]
    if not usable:
        raise ContractError(f"no episode has the required {n} frames")
    mem, txt, chk = [], [], []
    for _ in range(batch_size):
        ep = usable[int(rng.integers(0, len(usable)))]
        t0 = int(rng.integers(0, ep.length - n + 1))
        mem.append(ep.rgb[:, t0:t0 + n])
        txt.append(ep.text)
        idx = np.minimum(t0 + n - 1 + np.arange(pcfg.horizon), ep.length - 1)
        chk.append(norm.apply(ep.actions[idx]))
    return Stage2Batch(np.stack(mem), np.stack(txt), np.stack(chk))


def train_stage2(episodes: list[LatentEpisode], params: dict[str, Tensor], opt: AdamW,
                 bcfg: BackboneConfig, dcfg: DynamicsConfig, pcfg: PolicyConfig,
                 scfg, norm: ActionNormalizer, seed: int, out_dir: Path | None = None,
                 freeze_backbone: bool = False,
                 checkpoint_fn: Callable | None = None):
    """Joint (or head-only, when frozen) optimization of the action objective.

    The caller controls which parameters the optimizer owns; freezing
    additionally detaches the feature bank so no backbone gradient is even
    computed.  Text dropout stays off in this stage.
    """
    from .dynamics import TrainLog, TrainState, split_episodes

    root = Rng(seed)
    train_eps, val_eps = split_episodes(episodes, scfg.val_fraction, seed)
    log = TrainLog(out_dir / "train-log.csv" if out_dir else None)
    state = TrainState(params, opt)
    last_batch: list[Stage2Batch] = []

    def batch_loss(eps_list, srng) -> Tensor:
        batch = sample_stage2_batch(eps_list, dcfg, pcfg, norm, scfg.batch_size,
                                    srng.split("batch"))
        last_batch[:] = [batch]
        bank = compute_feature_bank(params, batch.memory, batch.text, bcfg, dcfg, pcfg,
                                    srng.split("bank"))
        if freeze_backbone:
            bank = bank.detach()
        return action_loss(params, batch.chunks, bank, pcfg, srng.split("act"))

    for step in range(opt.step_count, scfg.steps):
        t0 = time.perf_counter()
        srng = root.split(f"stage2/step/{step}")
        loss = batch_loss(train_eps, srng)
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            where = "(no output directory; batch not dumped)"
            if out_dir is not None:
                out_dir.mkdir(parents=True, exist_ok=True)
                path = out_dir / "nan-batch-stage2.bin"
                batch = last_batch[0]
                with open(path, "wb") as fp:
                    tk.write_tensor_dict(fp, {"memory": batch.memory,
                                              "text": batch.text.astype(np.float64),
                                              "chunks": batch.chunks})
                where = str(path)
            raise VerificationError(
                f"non-finite stage-2 loss at step {step}; batch dumped to {where}")
        opt.zero_grad()
        tk.backward(loss)
        lr, _ = opt.step()
        log.row(step, "stage2", loss_val, lr, (time.perf_counter() - t0) * 1e3)

        if val_eps and scfg.val_every and (step + 1) % scfg.val_every == 0:
            with tk.no_grad():
                vloss = batch_loss(val_eps, root.split(f"stage2/val/{step}")).item()
            log.row(step, "stage2-val", vloss, lr, 0.0)
        if checkpoint_fn and scfg.checkpoint_every and (step + 1) % scfg.checkpoint_every == 0:
            checkpoint_fn(state, step + 1)
    if checkpoint_fn:
        checkpoint_fn(state, opt.step_count)
    return state


# -- closed-loop control ----------------------------------------------------------------


@dataclass
class ControllerBundle:
    """Everything needed to run the trained system against an environment."""

    params: dict[str, Tensor]
    bcfg: BackboneConfig
    dcfg: DynamicsConfig
    pcfg: PolicyConfig
    patch_codec: PatchCodec
    stats: CodecStats
    norm: ActionNormalizer
    variant: str = "mwm"
    idm_params: dict[str, Tensor] | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.variant == "mwm-c1" and self.idm_params is None:
            raise ContractError("variant mwm-c1 needs inverse-dynamics parameters")

    def encode_views(self, frames: np.ndarray) -> np.ndarray:
        """(..., V, T, H, W, 3) RGB -> normalized latents (..., V, T, H', W', D)."""
        lead = frames.shape[:-3]
        flat = frames.reshape(-1, *frames.shape[-3:])
        grid = self.patch_codec.encode(flat)
        z = (grid.values - self.stats.mean) / self.stats.std
        return z.reshape(*lead, *z.shape[1:])


class ControllerSession:
    """Per-episode control state: frame history and the C1 mask cache."""

    def __init__(self, bundle: ControllerBundle, text: np.ndarray, rng: Rng):
        self.bundle = bundle
        self.text = np.asarray(text, dtype=np.int64).reshape(1, -1)
        self.rng = rng
        self.history: list[np.ndarray] = []
        self.prev_mask: np.ndarray | None = None
        self.t = 0

    def act(self, views: np.ndarray) -> np.ndarray:
        """One replanning step: observe (V, H, W, 3), return the raw action to execute."""
        bd = self.bundle
        n = bd.dcfg.memory_frames
        self.history.append(views)
        if len(self.history) > n:
            self.history.pop(0)
        padded = [self.history[0]] * (n - len(self.history)) + self.history
        frames = np.stack(padded, axis=1)                      # (V, n, H, W, 3)
        memory = bd.encode_views(frames)[None]                 # (1, V, n, H', W', D)
        srng = self.rng.split(f"step/{self.t}")
        self.t += 1

        if bd.variant == "mwm-c1":
            rollout = euler_rollout(bd.params, memory, self.text, bd.bcfg, bd.dcfg,
                                    bd.pcfg.sampler_steps, srng.split("rollout"))
            actions, self.prev_mask = c1_actions(bd.idm_params, rollout, self.prev_mask)
            return actions[0, 0]

        bank = compute_feature_bank(bd.params, memory, self.text, bd.bcfg, bd.dcfg,
                                    bd.pcfg, srng.split("bank"))
        chunk = sample_chunk(bd.params, bank, bd.pcfg, srng.split("chunk"))
        return bd.norm.invert(chunk[0])[0, :bd.pcfg.action_dim]


def rhc_step(session: ControllerSession, env,
             action_override: Callable | None = None) -> dict:
    """Receding-horizon step: replan, execute the first action, report status.

    `env` must expose observe() -> (V, H, W, 3) RGB views, step(action) and
    the flags `done`/`success`.  `action_override(env)` substitutes the whole
    planner (scripted-expert plumbing checks).
    """
    if env.done:
        return {"done": True, "success": env.success, "action": None}
    views = env.observe()
    action = action_override(env) if action_override is not None else session.act(views)
    env.step(action)
    return {"done": env.done, "success": env.success, "action": action}
