"""Mask-dynamics transformer over multi-view spatiotemporal tokens.

Every block runs three residual sub-layers — self-attention, text
cross-attention, feed-forward — each behind a diffusion-time modulation
(rms-normalize, then scale by 1+alpha(s) and shift by beta(s), with alpha/beta
produced per layer and per sub-layer from a shared timestep embedding).  The
diffusion time is per token, which is how conditioning frames are kept "clean":
their tokens are simply modulated at time zero.

Self-attention is within-view except at layers whose index is a multiple of
the cross-view period, where one widened attention scope spans all views.
Positions enter through rotary embeddings over scaled (t, h, w) coordinates,
with the per-head channel pairs split 2:1:1 across the three axes.

The forward pass returns every layer's hidden states (a feature bank), which
downstream consumers read instead of a single final output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorkit as tk
from .codec import TokenSequence
from .errors import ContractError
from .tensorkit import Rng, Tensor


@dataclass
class BackboneConfig:
    layers: int = 4
    width: int = 128
    heads: int = 4
    token_dim: int = 192
    text_width: int = 64
    cross_view_period: int = 2
    rope_scale: tuple[float, float, float] = (0.267, 32.0, 32.0)
    rope_base: float = 10000.0
    ffn_mult: int = 4

    def __post_init__(self):
        if self.width % self.heads:
            raise ContractError(f"width {self.width} not divisible by {self.heads} heads")
        if self.head_dim % 2:
            raise ContractError(f"per-head dim {self.head_dim} must be even")
        if sum(self.rope_bands) * 2 != self.head_dim or min(self.rope_bands) < 1:
            raise ContractError(
                f"per-head dim {self.head_dim} cannot be split into even (t, h, w) bands; "
                "use a head dim divisible by 8")
        if self.cross_view_period < 1:
            raise ContractError("cross-view period must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def rope_bands(self) -> tuple[int, int, int]:
        """Rotation-pair counts per axis; time gets half, height/width a quarter each."""
        pairs = self.head_dim // 2
        return pairs - 2 * (pairs // 4), pairs // 4, pairs // 4


@dataclass
class ConditionContext:
    """Per-forward conditioning: text embeddings and per-token diffusion time."""

    text: Tensor                # (B, L, text_width)
    s: np.ndarray               # (B, S) in [0, 1]

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.float64)
        if self.s.size and (self.s.min() < 0.0 or self.s.max() > 1.0):
            raise ContractError(f"diffusion time outside [0,1]: [{self.s.min()}, {self.s.max()}]")


@dataclass
class FeatureBank:
    """All layers' hidden states for one forward pass, geometry attached."""

    layers: list[Tensor]        # each (B, S, width)
    coords: np.ndarray          # (B, S, 4)
    memory: np.ndarray          # (B, S)

    def __post_init__(self):
        shapes = {tuple(t.shape) for t in self.layers}
        if len(shapes) != 1:
            raise ContractError(f"feature bank layers disagree on shape: {sorted(shapes)}")

    @property
    def depth(self) -> int:
        return len(self.layers)

    def detach(self) -> "FeatureBank":
        return FeatureBank([t.detach() for t in self.layers], self.coords, self.memory)


# -- initialization ------------------------------------------------------------


def linear_init(rng: Rng, fan_in: int, fan_out: int) -> Tensor:
    return Tensor(rng.normal((fan_in, fan_out), scale=fan_in ** -0.5), requires_grad=True)


def init_attn_params(rng: Rng, params: dict, prefix: str, q_dim: int, kv_dim: int, width: int):
    params[f"{prefix}.wq"] = linear_init(rng.split("wq"), q_dim, width)
    params[f"{prefix}.wk"] = linear_init(rng.split("wk"), kv_dim, width)
    params[f"{prefix}.wv"] = linear_init(rng.split("wv"), kv_dim, width)
    params[f"{prefix}.wo"] = linear_init(rng.split("wo"), width, width)


def init_mod_params(params: dict, prefix: str, width: int):
    # Zero start: every sub-layer begins as plain rms-normalization.
    params[f"{prefix}.mod.w"] = Tensor(np.zeros((width, 2 * width)), requires_grad=True)
    params[f"{prefix}.mod.b"] = Tensor(np.zeros(2 * width), requires_grad=True)


def init_backbone_params(cfg: BackboneConfig, rng: Rng) -> dict[str, Tensor]:
    p: dict[str, Tensor] = {}
    w = cfg.width
    p["in_proj.w"] = linear_init(rng.split("in_proj"), cfg.token_dim, w)
    p["in_proj.b"] = Tensor(np.zeros(w), requires_grad=True)
    p["time.w1"] = linear_init(rng.split("time1"), w, w)
    p["time.b1"] = Tensor(np.zeros(w), requires_grad=True)
    p["time.w2"] = linear_init(rng.split("time2"), w, w)
    p["time.b2"] = Tensor(np.zeros(w), requires_grad=True)
    for i in range(cfg.layers):
        lr = rng.split(f"layer{i}")
        init_attn_params(lr.split("attn"), p, f"blocks.{i}.attn", w, w, w)
        init_mod_params(p, f"blocks.{i}.attn", w)
        init_attn_params(lr.split("text"), p, f"blocks.{i}.text", w, cfg.text_width, w)
        init_mod_params(p, f"blocks.{i}.text", w)
        p[f"blocks.{i}.ffn.w1"] = linear_init(lr.split("ffn1"), w, cfg.ffn_mult * w)
        p[f"blocks.{i}.ffn.b1"] = Tensor(np.zeros(cfg.ffn_mult * w), requires_grad=True)
        p[f"blocks.{i}.ffn.w2"] = linear_init(lr.split("ffn2"), cfg.ffn_mult * w, w)
        p[f"blocks.{i}.ffn.b2"] = Tensor(np.zeros(w), requires_grad=True)
        init_mod_params(p, f"blocks.{i}.ffn", w)
    return p


# -- timestep machinery -----------------------------------------------------------


def sinusoidal_embed(x: np.ndarray, dim: int) -> np.ndarray:
    """Standard sin/cos embedding with log-spaced frequencies over [1, 1/10000]."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = np.asarray(x, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.cos(ang), np.sin(ang)], axis=-1)


def timestep_embedding(params: dict[str, Tensor], s: np.ndarray, width: int,
                       prefix: str = "") -> Tensor:
    """Two-layer projection of the sinusoidal embedding of 1000*s."""
    se = Tensor(sinusoidal_embed(1000.0 * s, width))
    h = tk.silu(se @ params[f"{prefix}time.w1"] + params[f"{prefix}time.b1"])
    return h @ params[f"{prefix}time.w2"] + params[f"{prefix}time.b2"]


_UNIT_GAIN_CACHE: dict[int, Tensor] = {}


def modulate(x: Tensor, emb: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """rmsnorm(x) * (1 + alpha) + beta, with (alpha, beta) = silu(emb) @ w + b."""
    width = x.shape[-1]
    gain = _UNIT_GAIN_CACHE.setdefault(width, Tensor(np.ones(width)))
    ab = tk.silu(emb) @ w + b
    alpha, beta = ab[..., :width], ab[..., width:]
    return tk.rmsnorm(x, gain) * (alpha + 1.0) + beta


# -- rotary position encoding --------------------------------------------------------


def rope_phases(coords: np.ndarray, cfg: BackboneConfig) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables (B, 1, S, head_dim/2) from integer (view, t, h, w) coords."""
    bands = cfg.rope_bands
    axis_sel = np.repeat([0, 1, 2], bands)
    theta = np.concatenate([cfg.rope_base ** (-np.arange(m) / m) for m in bands])
    eff = coords[..., 1:4] * np.asarray(cfg.rope_scale)
    ang = eff[..., axis_sel] * theta
    return np.cos(ang)[:, None], np.sin(ang)[:, None]


def _rotate(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return tk.concat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def rope_apply(x: Tensor, coords: np.ndarray, cfg: BackboneConfig) -> Tensor:
    """Rotate per-head vectors (B, H, S, head_dim) by their token's scaled position."""
    if x.shape[-1] != cfg.head_dim:
        raise ContractError(f"rope expects head dim {cfg.head_dim}, got {x.shape[-1]}")
    cos, sin = rope_phases(coords, cfg)
    return _rotate(x, cos, sin)


# -- attention -----------------------------------------------------------------------


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, s, w = x.shape
    return tk.swapaxes(x.reshape(b, s, heads, w // heads), 1, 2)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, s, d = x.shape
    return tk.swapaxes(x, 1, 2).reshape(b, s, h * d)


def attention(params: dict, prefix: str, x: Tensor, kv: Tensor, heads: int,
               rope: tuple[np.ndarray, np.ndarray] | None = None,
               block_mask: np.ndarray | None = None) -> Tensor:
    q = _split_heads(x @ params[f"{prefix}.wq"], heads)
    k = _split_heads(kv @ params[f"{prefix}.wk"], heads)
    v = _split_heads(kv @ params[f"{prefix}.wv"], heads)
    if rope is not None:
        cos, sin = rope
        q, k = _rotate(q, cos, sin), _rotate(k, cos, sin)
    scores = (q @ tk.swapaxes(k, -1, -2)) * (q.shape[-1] ** -0.5)
    if block_mask is not None:
        scores = tk.masked_fill(scores, block_mask, -np.inf)
    return _merge_heads(tk.softmax_lastdim(scores) @ v) @ params[f"{prefix}.wo"]


def ffn(params: dict, prefix: str, x: Tensor) -> Tensor:
    h = tk.silu(x @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"])
    return h @ params[f"{prefix}.w2"] + params[f"{prefix}.b2"]


# -- forward -----------------------------------------------------------------------


def forward(params: dict[str, Tensor], tokens: TokenSequence, ctx: ConditionContext,
            cfg: BackboneConfig) -> FeatureBank:
    """Run all blocks; cache every block's output into the returned bank."""
    if tokens.values.shape[-1] != cfg.token_dim:
        raise ContractError(
            f"tokens carry {tokens.values.shape[-1]} channels, config says {cfg.token_dim}")
    if ctx.s.shape != tokens.values.shape[:2]:
        raise ContractError(f"diffusion time shape {ctx.s.shape} != token batch "
                            f"{tokens.values.shape[:2]}")

    x = Tensor(tokens.values) @ params["in_proj.w"] + params["in_proj.b"]
    emb = timestep_embedding(params, ctx.s, cfg.width)
    rope = rope_phases(tokens.coords, cfg)

    views = tokens.coords[..., 0]
    multi_view = bool((views != views[..., :1]).any())
    within_view = (views[:, None, :, None] != views[:, None, None, :]) if multi_view else None

    bank: list[Tensor] = []
    for i in range(cfg.layers):
        cross_view = i % cfg.cross_view_period == 0
        mask = None if cross_view or within_view is None else within_view
        pre = f"blocks.{i}"
        m = modulate(x, emb, params[f"{pre}.attn.mod.w"], params[f"{pre}.attn.mod.b"])
        x = x + attention(params, f"{pre}.attn", m, kv=m, heads=cfg.heads,
                           rope=rope, block_mask=mask)
        x = x + attention(params, f"{pre}.text",
                           modulate(x, emb, params[f"{pre}.text.mod.w"], params[f"{pre}.text.mod.b"]),
                           kv=ctx.text, heads=cfg.heads)
        x = x + ffn(params, f"{pre}.ffn",
                     modulate(x, emb, params[f"{pre}.ffn.mod.w"], params[f"{pre}.ffn.mod.b"]))
        bank.append(x)
    return FeatureBank(bank, tokens.coords, tokens.memory)


def prune_indices(s: int, r: float, rng: Rng, protect: np.ndarray | None = None) -> np.ndarray:
    """Sorted survivor indices for one sequence: drop floor(r * candidates).

    `protect` marks positions exempt from pruning (and from the drop count),
    e.g. slots a rollout must keep writable.
    """
    if not 0.0 <= r < 1.0:
        raise ContractError(f"prune ratio must lie in [0, 1), got {r}")
    candidates = np.arange(s) if protect is None else np.flatnonzero(~protect)
    n_drop = int(np.floor(r * candidates.size))
    if n_drop == 0:
        return np.arange(s)
    dropped = candidates[rng.choice(candidates.size, size=n_drop)]
    return np.setdiff1d(np.arange(s), dropped)


def prune_tokens(tokens: TokenSequence, r: float, rng: Rng,
                 protect: np.ndarray | None = None) -> TokenSequence:
    """Drop exactly floor(r * S) tokens uniformly at random, per batch element.

    Survivors keep their original coordinates, so positional phases are those
    of the unpruned grid.  r = 0 returns the input untouched without drawing
    from the stream.
    """
    if not 0.0 <= r < 1.0:
        raise ContractError(f"prune ratio must lie in [0, 1), got {r}")
    if r == 0.0:
        return tokens
    rows = [prune_indices(tokens.length, r,
                          rng, None if protect is None else protect[b])
            for b in range(tokens.batch)]
    return tokens.select(np.stack(rows))
