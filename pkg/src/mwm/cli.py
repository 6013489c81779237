"""Run orchestration: TOML configs, binary checkpoints, and the `mwm` command.

The pipeline is gen-demos -> train-stage1 -> train-stage2 -> eval.  Every
artifact a run emits (demo manifest, checkpoints, logs, reports) embeds the
sha256 digest of the fully-resolved configuration, so artifacts from different
configurations refuse to combine instead of silently producing nonsense.

Exit codes: 0 success, 1 contract violation, 2 I/O failure, 3 verification
failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import struct
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:                     # Python 3.10
    import tomli as tomllib

from . import evalkit as ek
from . import tensorkit as tk
from . import toyworld as toy
from .backbone import BackboneConfig
from .codec import CodecStats, PatchCodec, make_palette
from .dynamics import (DynamicsConfig, LatentEpisode, StageConfig,
                       init_dynamics_params, train_stage1)
from .errors import ContractError, VerificationError
from .optim import AdamW, OptimConfig
from .policy import (VARIANTS, ActionNormalizer, ControllerBundle, PolicyConfig,
                     init_policy_params, train_idm, train_stage2)
from .tensorkit import Rng, Tensor

CHECKPOINT_MAGIC = b"MWM1"
CHECKPOINT_VERSION = 1

# Fully-resolved defaults at desk scale; the published-scale values sit in the
# comments of configs/paper_scale.toml.  A config file overrides keys, never
# adds them.
DEFAULTS: dict = {
    "variant": "mwm",
    "seed": 42,
    "output-dir": "runs/mwm",
    "env": {
        "resolution": 32,
        "demos-per-task": 50,
        "max-steps": 60,
    },
    "codec": {
        "spatial-compression": 8,
        "temporal-compression": 1,
        "channels": 192,
        "seed": 0,
    },
    "backbone": {
        "layers": 4,
        "hidden-dimension": 128,
        "attention-heads": 4,
        "cross-attn-dim": 64,
        "cross-view-period": 2,
        "rope-gamma": [0.267, 32.0, 32.0],
    },
    "dynamics": {
        "context-frames": 4,
        "horizon-latents": 5,
        "views": 2,
        "caption-dropout": 0.06,
        "conditioning-noise": 0.1,
    },
    "policy": {
        "layers": 4,
        "hidden-dimension": 64,
        "attention-heads": 4,
        "cross-attn-dim": 128,
        "horizon-actions": 36,
        "sigma-min": 0.02,
        "sigma-max": 5.0,
        "sampler-steps": 10,
        "rollout-features": False,
        "idm-hidden": 64,
    },
    "stage1": {
        "learning-rate": 3e-4,
        "batch-size": 16,
        "weight-decay": 1e-5,
        "warmup-steps": 200,
        "gradient-clip": 1.0,
        "precision": "float64",
        "vae": "frozen",
        "steps": 2000,
        "val-fraction": 0.1,
        "val-every": 200,
        "checkpoint-every": 0,
    },
    "stage2": {
        "learning-rate": 5e-5,
        "batch-size": 16,
        "weight-decay": 1e-5,
        "warmup-steps": 200,
        "gradient-clip": 1.0,
        "precision": "float64",
        "vae": "frozen",
        "steps": 2000,
        "val-fraction": 0.1,
        "val-every": 200,
        "checkpoint-every": 0,
    },
    "eval": {
        "episodes-per-cell": 100,
        "prune-ratios": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
        "light-gains": [0.4, 0.6, 1.4, 1.6],
        "resample-prune-per-step": True,
    },
}


def _merge(base: dict, override: dict, trail: str = "") -> dict:
    """Recursive override with typo protection: unknown keys are refused."""
    out = dict(base)
    for key, value in override.items():
        if key not in base:
            raise ContractError(f"unknown config key {trail}{key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ContractError(f"config key {trail}{key!r} must be a table")
            out[key] = _merge(base[key], value, f"{trail}{key}.")
        else:
            out[key] = value
    return out


@dataclass
class RunConfig:
    """One run, fully resolved: sub-configs plus the raw dict they came from."""

    raw: dict
    path: Path | None = None

    def __post_init__(self):
        raw = self.raw
        if raw["variant"] not in VARIANTS:
            raise ContractError(
                f"variant must be one of {VARIANTS}, got {raw['variant']!r}")
        for stage in ("stage1", "stage2"):
            if raw[stage]["precision"] != "float64":
                raise ContractError(f"[{stage}] precision: only float64 is supported")
            if raw[stage]["vae"] != "frozen":
                raise ContractError(f"[{stage}] vae: the patch codec is always frozen")
        if raw["codec"]["temporal-compression"] != 1:
            raise ContractError("temporal-compression other than 1 is not supported")
        if raw["env"]["resolution"] % raw["codec"]["spatial-compression"]:
            raise ContractError("resolution must be a multiple of spatial-compression")
        if raw["policy"]["cross-attn-dim"] != raw["backbone"]["hidden-dimension"]:
            raise ContractError(
                "[policy] cross-attn-dim must equal the backbone hidden-dimension "
                "(the action head reads the backbone's feature bank)")
        if raw["dynamics"]["views"] != len(toy.VIEW_NAMES):
            raise ContractError(f"the environment renders {len(toy.VIEW_NAMES)} views")

        self.variant: str = raw["variant"]
        self.seed: int = int(raw["seed"])
        self.resolution: int = int(raw["env"]["resolution"])
        self.demos_per_task: int = int(raw["env"]["demos-per-task"])
        self.max_steps: int = int(raw["env"]["max-steps"])
        bb, dy, po = raw["backbone"], raw["dynamics"], raw["policy"]
        self.bcfg = BackboneConfig(
            layers=bb["layers"], width=bb["hidden-dimension"],
            heads=bb["attention-heads"], token_dim=raw["codec"]["channels"],
            text_width=bb["cross-attn-dim"],
            cross_view_period=bb["cross-view-period"],
            rope_scale=tuple(bb["rope-gamma"]))
        self.dcfg = DynamicsConfig(
            memory_frames=dy["context-frames"], future_frames=dy["horizon-latents"],
            views=dy["views"], caption_dropout=dy["caption-dropout"],
            noise_injection=dy["conditioning-noise"],
            text_len=toy.TEXT_LEN, text_vocab=len(toy.VOCAB))
        self.pcfg = PolicyConfig(
            layers=po["layers"], width=po["hidden-dimension"],
            heads=po["attention-heads"], horizon=po["horizon-actions"],
            action_dim=3, state_dim=3, sigma_min=po["sigma-min"],
            sigma_max=po["sigma-max"], sampler_steps=po["sampler-steps"],
            rollout_features=po["rollout-features"], idm_hidden=po["idm-hidden"])
        self.opt1, self.scfg1 = self._stage(raw["stage1"])
        self.opt2, self.scfg2 = self._stage(raw["stage2"])
        ev = raw["eval"]
        self.ecfg = ek.EvalConfig(
            episodes_per_cell=ev["episodes-per-cell"], image_size=self.resolution,
            max_steps=self.max_steps, prune_ratios=tuple(ev["prune-ratios"]),
            light_gains=tuple(ev["light-gains"]),
            resample_prune_per_step=ev["resample-prune-per-step"])

    @staticmethod
    def _stage(sec: dict) -> tuple[OptimConfig, StageConfig]:
        opt = OptimConfig(lr=sec["learning-rate"], weight_decay=sec["weight-decay"],
                          warmup_steps=sec["warmup-steps"],
                          grad_clip=sec["gradient-clip"])
        scfg = StageConfig(steps=sec["steps"], batch_size=sec["batch-size"],
                           val_fraction=sec["val-fraction"], val_every=sec["val-every"],
                           checkpoint_every=sec["checkpoint-every"])
        return opt, scfg

    @property
    def digest(self) -> str:
        return hashlib.sha256(
            json.dumps(self.raw, sort_keys=True).encode()).hexdigest()

    def out_root(self) -> Path:
        return Path(os.environ.get("MWM_OUT") or self.raw["output-dir"])

    def make_codec(self) -> PatchCodec:
        return PatchCodec(self.raw["codec"]["spatial-compression"],
                          self.raw["codec"]["channels"], self.raw["codec"]["seed"])

    def target_kind(self) -> str:
        return "rgb" if self.variant == "rgb-target" else "mask"


def load_config(path: Path) -> RunConfig:
    with open(path, "rb") as fp:
        data = tomllib.load(fp)
    return RunConfig(_merge(DEFAULTS, data), Path(path))


# -- checkpoints ----------------------------------------------------------------


@dataclass
class Checkpoint:
    digest: str
    stage: str                    # "stage1" | "stage2"
    step: int
    params: dict[str, Tensor]
    opt_state: dict[str, np.ndarray]
    stats_rgb: CodecStats
    stats_mask: CodecStats
    palette: np.ndarray
    norm: ActionNormalizer | None = None


def _write_str(fp, text: str) -> None:
    data = text.encode("utf-8")
    fp.write(struct.pack("<I", len(data)))
    fp.write(data)


def _read_exact(fp, n: int) -> bytes:
    data = fp.read(n)
    if len(data) != n:
        raise ContractError("truncated checkpoint file")
    return data


def _read_str(fp) -> str:
    (n,) = struct.unpack("<I", _read_exact(fp, 4))
    return _read_exact(fp, n).decode("utf-8")


def save_checkpoint(path: Path, ckpt: Checkpoint) -> None:
    """Atomic write; byte-identical for identical inputs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors: dict[str, np.ndarray] = {f"param.{k}": t.data
                                      for k, t in ckpt.params.items()}
    tensors.update(ckpt.opt_state)
    tensors["codec.rgb.mean"] = ckpt.stats_rgb.mean
    tensors["codec.rgb.std"] = ckpt.stats_rgb.std
    tensors["codec.mask.mean"] = ckpt.stats_mask.mean
    tensors["codec.mask.std"] = ckpt.stats_mask.std
    tensors["palette"] = ckpt.palette.astype(np.float64)
    if ckpt.norm is not None:
        tensors["norm.mean"] = ckpt.norm.mean
        tensors["norm.std"] = ckpt.norm.std
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fp:
        fp.write(CHECKPOINT_MAGIC)
        fp.write(struct.pack("<I", CHECKPOINT_VERSION))
        _write_str(fp, ckpt.digest)
        _write_str(fp, ckpt.stage)
        fp.write(struct.pack("<Q", ckpt.step))
        tk.write_tensor_dict(fp, tensors)
    os.replace(tmp, path)


def load_checkpoint(path: Path) -> Checkpoint:
    with open(path, "rb") as fp:
        if fp.read(4) != CHECKPOINT_MAGIC:
            raise ContractError(f"{path} is not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fp, 4))
        if version != CHECKPOINT_VERSION:
            raise ContractError(f"unsupported checkpoint version {version}")
        digest = _read_str(fp)
        stage = _read_str(fp)
        (step,) = struct.unpack("<Q", _read_exact(fp, 8))
        tensors = tk.read_tensor_dict(fp)
    params = {k[len("param."):]: Tensor(v, requires_grad=True)
              for k, v in tensors.items() if k.startswith("param.")}
    opt_state = {k: v for k, v in tensors.items() if k.startswith("opt.")}
    norm = None
    if "norm.mean" in tensors:
        norm = ActionNormalizer(tensors["norm.mean"], tensors["norm.std"])
    return Checkpoint(digest, stage, int(step), params, opt_state,
                      CodecStats(tensors["codec.rgb.mean"], tensors["codec.rgb.std"]),
                      CodecStats(tensors["codec.mask.mean"], tensors["codec.mask.std"]),
                      tensors["palette"], norm)


def _check_digest(found: str, cfg: RunConfig, what: str, allow: bool) -> None:
    if found != cfg.digest:
        message = (f"{what} carries config digest {found[:12]}… but the current "
                   f"config hashes to {cfg.digest[:12]}…")
        if not allow:
            raise ContractError(message + " (pass --allow-digest-mismatch to override)")
        print(f"warning: {message}; continuing as requested", file=sys.stderr)


# -- dataset encoding --------------------------------------------------------------


def encode_dataset(records: list, codec: PatchCodec, palette: np.ndarray,
                   stats_rgb: CodecStats | None = None,
                   stats_mask: CodecStats | None = None,
                   ) -> tuple[list[LatentEpisode], CodecStats, CodecStats]:
    """Demo records -> normalized latent episodes with action-state chunk rows.

    Normalization moments are fit over the given records unless provided
    (stage 2 must reuse the stage-1 checkpoint's moments bit-exactly).
    """
    if not records:
        raise ContractError("cannot encode an empty dataset")
    raw_pairs = []
    for rec in records:
        rgb = np.stack([codec.encode(v).values for v in rec.rgb_views()])
        mask_frames = palette[rec.mask_views()]
        masks = np.stack([codec.encode(v).values for v in mask_frames])
        raw_pairs.append((rgb, masks))
    if stats_rgb is None:
        stats_rgb = CodecStats.fit(np.concatenate([p[0] for p in raw_pairs], axis=1))
    if stats_mask is None:
        stats_mask = CodecStats.fit(np.concatenate([p[1] for p in raw_pairs], axis=1))
    episodes = []
    for rec, (rgb, masks) in zip(records, raw_pairs):
        chunk_rows = np.concatenate([rec.actions, rec.states], axis=1)
        episodes.append(LatentEpisode(
            (rgb - stats_rgb.mean) / stats_rgb.std,
            (masks - stats_mask.mean) / stats_mask.std,
            rec.text_ids(), actions=chunk_rows))
    return episodes, stats_rgb, stats_mask


def _load_dataset(cfg: RunConfig, allow_mismatch: bool) -> list:
    demo_dir = cfg.out_root() / "demos"
    manifest = toy.load_manifest(demo_dir)
    _check_digest(manifest.get("config-digest", ""), cfg, "demo dataset",
                  allow_mismatch)
    return toy.load_split(demo_dir, "train")


def _write_config_copy(cfg: RunConfig) -> None:
    root = cfg.out_root()
    root.mkdir(parents=True, exist_ok=True)
    if cfg.path is None:
        return
    target = root / "config.toml"
    data = cfg.path.read_bytes()
    if not target.exists() or target.read_bytes() != data:
        target.write_bytes(data)


# -- subcommands -------------------------------------------------------------------


def cmd_gen_demos(args) -> int:
    cfg = load_config(args.config)
    _write_config_copy(cfg)
    demo_dir = cfg.out_root() / "demos"
    manifest = toy.generate_demos(demo_dir, count=cfg.demos_per_task, seed=cfg.seed,
                                  image_size=cfg.resolution, max_steps=cfg.max_steps)
    manifest["config-digest"] = cfg.digest
    with open(demo_dir / "manifest.json", "w") as fp:
        json.dump(manifest, fp, indent=1, sort_keys=True)
    print(f"wrote {len(manifest['splits']['train'])} episodes to {demo_dir}")
    return 0


def _checkpoint_writer(cfg: RunConfig, stage: str, final_step: int,
                       stats_rgb, stats_mask, palette, norm=None):
    """Training loops call this at each cadence point and once at completion;
    the configured terminal step gets the stable name the next stage looks for.
    Resumed runs finish at that same step, so they converge on the same file."""
    ckpt_dir = cfg.out_root() / "checkpoints"

    def write(state, step: int) -> None:
        name = f"{stage}.ckpt" if step == final_step else f"{stage}-step{step:06d}.ckpt"
        save_checkpoint(ckpt_dir / name, Checkpoint(
            cfg.digest, stage, step, state.params, state.opt.state_tensors(),
            stats_rgb, stats_mask, palette, norm))

    return write


def cmd_train_stage1(args) -> int:
    cfg = load_config(args.config)
    _write_config_copy(cfg)
    records = _load_dataset(cfg, args.allow_digest_mismatch)
    codec = cfg.make_codec()
    palette = make_palette(2 + len(toy.SCENE_OBJECTS))
    episodes, stats_rgb, stats_mask = encode_dataset(records, codec, palette)

    params = init_dynamics_params(cfg.bcfg, cfg.dcfg, Rng(cfg.seed).split("init/dynamics"))
    opt = AdamW(params, cfg.opt1)
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        _check_digest(ckpt.digest, cfg, f"checkpoint {args.resume}",
                      args.allow_digest_mismatch)
        if ckpt.stage != "stage1":
            raise ContractError(f"cannot resume stage1 from a {ckpt.stage} checkpoint")
        params = ckpt.params
        opt = AdamW(params, cfg.opt1)
        opt.load_state(ckpt.opt_state)
        stats_rgb, stats_mask = ckpt.stats_rgb, ckpt.stats_mask
        episodes, _, _ = encode_dataset(records, codec, palette, stats_rgb, stats_mask)

    writer = _checkpoint_writer(cfg, "stage1", cfg.scfg1.steps,
                                stats_rgb, stats_mask, palette)
    state = train_stage1(episodes, params, opt, cfg.bcfg, cfg.dcfg, cfg.scfg1,
                         cfg.seed, out_dir=cfg.out_root() / "logs",
                         target_kind=cfg.target_kind(), checkpoint_fn=writer)
    print(f"stage1 finished at step {state.step}; "
          f"checkpoint at {cfg.out_root() / 'checkpoints' / 'stage1.ckpt'}")
    return 0


def cmd_train_stage2(args) -> int:
    cfg = load_config(args.config)
    _write_config_copy(cfg)
    records = _load_dataset(cfg, args.allow_digest_mismatch)
    codec = cfg.make_codec()
    palette = make_palette(2 + len(toy.SCENE_OBJECTS))

    stage1_path = args.stage1 or cfg.out_root() / "checkpoints" / "stage1.ckpt"
    if args.from_scratch:
        params = init_dynamics_params(cfg.bcfg, cfg.dcfg,
                                      Rng(cfg.seed).split("init/dynamics"))
        episodes, stats_rgb, stats_mask = encode_dataset(records, codec, palette)
    else:
        if not Path(stage1_path).exists():
            raise ContractError(
                f"no stage-1 checkpoint at {stage1_path}; train stage 1 first "
                "or pass --from-scratch for the ablation")
        ckpt = load_checkpoint(stage1_path)
        _check_digest(ckpt.digest, cfg, f"checkpoint {stage1_path}",
                      args.allow_digest_mismatch)
        if ckpt.stage != "stage1":
            raise ContractError(f"stage 2 must start from a stage-1 checkpoint, "
                                f"got {ckpt.stage}")
        params = ckpt.params
        stats_rgb, stats_mask = ckpt.stats_rgb, ckpt.stats_mask
        episodes, _, _ = encode_dataset(records, codec, palette, stats_rgb, stats_mask)

    if cfg.variant == "mwm-c1":
        if args.resume:
            raise ContractError("inverse-dynamics training is not resumable; rerun it")
        idm = train_idm(episodes, cfg.pcfg, cfg.scfg2.steps, cfg.scfg2.batch_size,
                        cfg.seed, lr=cfg.opt2.lr)
        params.update(idm)
        save_checkpoint(cfg.out_root() / "checkpoints" / "stage2.ckpt", Checkpoint(
            cfg.digest, "stage2", cfg.scfg2.steps, params, {},
            stats_rgb, stats_mask, palette))
        print(f"inverse dynamics trained for {cfg.scfg2.steps} steps")
        return 0

    norm = ActionNormalizer.fit(episodes)
    params.update(init_policy_params(cfg.pcfg, cfg.bcfg, Rng(cfg.seed).split("init/policy")))
    freeze = cfg.variant == "mwm-c2"
    trainable = ({k: v for k, v in params.items() if k.startswith("policy.")}
                 if freeze else params)
    opt = AdamW(trainable, cfg.opt2)
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        _check_digest(ckpt.digest, cfg, f"checkpoint {args.resume}",
                      args.allow_digest_mismatch)
        if ckpt.stage != "stage2":
            raise ContractError(f"cannot resume stage2 from a {ckpt.stage} checkpoint")
        params = ckpt.params
        norm = ckpt.norm
        trainable = ({k: v for k, v in params.items() if k.startswith("policy.")}
                     if freeze else params)
        opt = AdamW(trainable, cfg.opt2)
        opt.load_state(ckpt.opt_state)

    writer = _checkpoint_writer(cfg, "stage2", cfg.scfg2.steps,
                                stats_rgb, stats_mask, palette, norm)
    state = train_stage2(episodes, params, opt, cfg.bcfg, cfg.dcfg, cfg.pcfg,
                         cfg.scfg2, norm, cfg.seed, out_dir=cfg.out_root() / "logs",
                         freeze_backbone=freeze, checkpoint_fn=writer)
    print(f"stage2 ({cfg.variant}) finished at step {state.step}")
    return 0


def build_bundle(cfg: RunConfig, ckpt: Checkpoint) -> ControllerBundle:
    """Checkpoint + config -> closed-loop controller; refuses mismatched pairs."""
    if ckpt.stage != "stage2":
        raise ContractError(f"evaluation needs a stage-2 checkpoint, got {ckpt.stage}")
    idm = None
    if cfg.variant == "mwm-c1":
        if "idm.w1" not in ckpt.params:
            raise ContractError("config says mwm-c1 but the checkpoint has no "
                                "inverse-dynamics parameters")
        idm = ckpt.params
    elif "policy.out_proj.w" not in ckpt.params:
        raise ContractError(f"config says {cfg.variant} but the checkpoint has no "
                            "action-head parameters")
    norm = ckpt.norm if ckpt.norm is not None else ActionNormalizer(
        np.zeros(cfg.pcfg.chunk_dim), np.ones(cfg.pcfg.chunk_dim))
    return ControllerBundle(ckpt.params, cfg.bcfg, cfg.dcfg, cfg.pcfg,
                            cfg.make_codec(), ckpt.stats_rgb, norm,
                            variant=cfg.variant, idm_params=idm)


SWEEPS = {"nominal": ek.run_nominal, "prune": ek.run_prune_sweep,
          "ood": ek.run_ood_sweep}


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    _write_config_copy(cfg)
    ckpt_path = args.checkpoint or cfg.out_root() / "checkpoints" / "stage2.ckpt"
    ckpt = load_checkpoint(ckpt_path)
    _check_digest(ckpt.digest, cfg, f"checkpoint {ckpt_path}",
                  args.allow_digest_mismatch)
    bundle = build_bundle(cfg, ckpt)

    cells = SWEEPS[args.sweep](bundle, cfg.ecfg, cfg.seed, width=args.workers)
    report_dir = cfg.out_root() / "reports"
    report_dir.mkdir(parents=True, exist_ok=True)
    csv_path = report_dir / f"eval-{args.sweep}.csv"
    ek.write_cells_csv(csv_path, cells, cfg.digest)
    ek.render_sweep_plot(report_dir / f"eval-{args.sweep}.svg", cells,
                         f"{cfg.variant}: {args.sweep} sweep", cfg.digest)
    report = ek.summarize(cells)
    ek.write_metrics_json(report_dir / f"metrics-{args.sweep}.json", report, cfg.digest)

    for cell in cells:
        lo, hi = cell.ci()
        print(f"{cell.family:8s} {cell.value:8s} {cell.task:24s} "
              f"sr {cell.sr:.3f}  [{lo:.3f}, {hi:.3f}]")
    for key in ("mean-nominal-sr", "npauc", "ood-sr", "retain"):
        if key in report and report[key] is not None:
            print(f"{key}: {report[key]:.4f}")
    print(f"reports under {report_dir}")
    return 0


def cmd_verify_metrics(args) -> int:
    checks = ek.verify_reference_metrics()
    width = max(len(c["name"]) for c in checks)
    for c in checks:
        flag = "ok  " if c["ok"] else "FAIL"
        print(f"{flag} {c['name']:{width}s} computed {c['computed']:.6f} "
              f"published {c['published']}")
    failed = [c["name"] for c in checks if not c["ok"]]
    if failed:
        raise VerificationError(f"reference metrics diverged: {', '.join(failed)}")
    return 0


def cmd_inspect_checkpoint(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    sizes = {k: v.data.size for k, v in ckpt.params.items()}
    groups: dict[str, int] = {}
    for name, size in sizes.items():
        groups[name.split(".")[0]] = groups.get(name.split(".")[0], 0) + size
    print(f"stage:   {ckpt.stage}")
    print(f"step:    {ckpt.step}")
    print(f"digest:  {ckpt.digest}")
    print(f"tensors: {len(ckpt.params)} parameters ({sum(sizes.values())} scalars), "
          f"{len(ckpt.opt_state)} optimizer slots")
    for group in sorted(groups):
        print(f"  {group:12s} {groups[group]:>10d}")
    print(f"palette: {len(ckpt.palette)} classes; "
          f"normalizer: {'yes' if ckpt.norm else 'no'}")
    return 0


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mwm",
        description="Mask world model: demos, two-stage training, evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", type=Path, required=True,
                       help="run configuration (TOML)")
        p.add_argument("--allow-digest-mismatch", action="store_true",
                       help="proceed when an artifact was made under another config")
        return p

    p = with_config(sub.add_parser("gen-demos", help="collect expert demonstrations"))
    p.set_defaults(fn=cmd_gen_demos)

    p = with_config(sub.add_parser("train-stage1", help="train the mask dynamics model"))
    p.add_argument("--resume", type=Path, help="stage-1 checkpoint to continue from")
    p.set_defaults(fn=cmd_train_stage1)

    p = with_config(sub.add_parser("train-stage2", help="train the action head"))
    p.add_argument("--stage1", type=Path, help="stage-1 checkpoint (default: run dir)")
    p.add_argument("--resume", type=Path, help="stage-2 checkpoint to continue from")
    p.add_argument("--from-scratch", action="store_true",
                   help="skip the stage-1 checkpoint (ablation)")
    p.set_defaults(fn=cmd_train_stage2)

    p = with_config(sub.add_parser("eval", help="closed-loop evaluation sweep"))
    p.add_argument("--checkpoint", type=Path, help="stage-2 checkpoint (default: run dir)")
    p.add_argument("--sweep", choices=sorted(SWEEPS), required=True)
    p.add_argument("--workers", type=int, default=0,
                   help="max episodes advanced together (0 = all at once)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("verify-metrics",
                       help="recompute the bundled reference tables' summary metrics")
    p.set_defaults(fn=cmd_verify_metrics)

    p = sub.add_parser("inspect-checkpoint", help="print a checkpoint summary")
    p.add_argument("checkpoint", type=Path)
    p.set_defaults(fn=cmd_inspect_checkpoint)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ContractError as err:
        print(f"contract error: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"io error: {err}", file=sys.stderr)
        return 2
    except VerificationError as err:
        print(f"verification failure: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
