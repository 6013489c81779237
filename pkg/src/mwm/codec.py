"""Image/mask <-> latent-token conversion.

Discrete semantic masks are rendered to RGB through a fixed palette, so one
encoder serves both camera frames and mask frames.  The encoder itself is a
deterministic orthonormal patch projection: non-overlapping f_s x f_s patches,
flattened with their three color channels, multiplied by a seeded orthonormal
basis.  With D = 3*f_s**2 channels the map is a bijection and decode(encode(x))
is exact; with fewer channels it is a fixed lossy projection whose
reconstruction error can be measured with `reconstruction_error`.

Latents are normalized channel-wise by frozen statistics, temporally resampled
to a canonical frame count, and stacked across camera views into a flat token
sequence that carries integer (view, t, h, w) coordinates for every token.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError
from .tensorkit import Rng

# -- palette ------------------------------------------------------------------

_PALETTE_GRID = np.array(
    [[r, g, b] for r in (0.0, 0.5, 1.0) for g in (0.0, 0.5, 1.0) for b in (0.0, 0.5, 1.0)]
)


def make_palette(num_classes: int) -> np.ndarray:
    """Greedy farthest-point colors on the RGB cube; index 0 (background) is black.

    Deterministic in num_classes, and pairwise L2 distances stay >= 0.5, which
    leaves nearest-color decoding unambiguous under noise of amplitude < 0.25.
    """
    if not 1 <= num_classes <= len(_PALETTE_GRID):
        raise ContractError(f"palette supports 1..{len(_PALETTE_GRID)} classes, got {num_classes}")
    chosen = [np.zeros(3)]
    while len(chosen) < num_classes:
        dists = np.linalg.norm(_PALETTE_GRID[:, None, :] - np.array(chosen)[None, :, :], axis=-1)
        chosen.append(_PALETTE_GRID[int(np.argmax(dists.min(axis=1)))])
    return np.array(chosen)


def render_mask(mask: np.ndarray, palette: np.ndarray) -> np.ndarray:
    """Class-id raster (H, W) -> RGB image (H, W, 3), exact palette colors."""
    mask = np.asarray(mask)
    if not np.issubdtype(mask.dtype, np.integer):
        raise ContractError(f"mask must be integer class ids, got dtype {mask.dtype}")
    if mask.size and (mask.min() < 0 or mask.max() >= len(palette)):
        raise ContractError(
            f"mask class ids span [{mask.min()}, {mask.max()}] but palette has {len(palette)} entries")
    return palette[mask]


def decode_mask(image: np.ndarray, palette: np.ndarray) -> np.ndarray:
    """Nearest-palette-color classification; ties resolve to the lowest class id."""
    diff = image[..., None, :] - palette
    return np.argmin((diff * diff).sum(axis=-1), axis=-1)


# -- latent grids ----------------------------------------------------------------


@dataclass
class LatentGrid:
    """A (T, H', W', D) stack of per-frame latent grids plus processing flags."""

    values: np.ndarray
    normalized: bool = False
    resampled: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 4:
            raise ContractError(f"latent grid must be (T, H', W', D), got shape {self.values.shape}")

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[3]


@dataclass
class CodecStats:
    """Frozen per-channel normalization moments."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if np.any(self.std <= 0):
            raise ContractError("channel std must be strictly positive")

    @classmethod
    def fit(cls, latents: np.ndarray, floor: float = 1e-6) -> "CodecStats":
        """Moments over all leading axes of (..., D) latent samples."""
        flat = np.asarray(latents, dtype=np.float64).reshape(-1, latents.shape[-1])
        return cls(flat.mean(axis=0), np.maximum(flat.std(axis=0), floor))


class PatchCodec:
    """Orthonormal non-overlapping patch projection, seeded and fixed."""

    def __init__(self, patch_size: int, channels: int, seed: int = 0):
        full = 3 * patch_size * patch_size
        if not 1 <= channels <= full:
            raise ContractError(f"channels must lie in [1, {full}] for patch size {patch_size}")
        self.patch_size = patch_size
        self.channels = channels
        # QR of a square Gaussian draw gives an orthogonal matrix; the first
        # `channels` rows form the (possibly truncating) analysis operator.
        gauss = Rng(seed).split("codec/basis").normal((full, full))
        q, r = np.linalg.qr(gauss)
        q = q * np.sign(np.diag(r))  # sign fix makes the draw -> basis map unique
        self.basis = q.T[:channels]

    @property
    def lossless(self) -> bool:
        return self.channels == self.basis.shape[1]

    def encode(self, video: np.ndarray) -> LatentGrid:
        """(T, H, W, 3) or (H, W, 3) RGB in [0,1] -> raw latent grid."""
        video = np.asarray(video, dtype=np.float64)
        if video.ndim == 3:
            video = video[None]
        t, h, w, c = video.shape
        f = self.patch_size
        if c != 3:
            raise ContractError(f"expected 3 color channels, got {c}")
        if h % f or w % f:
            raise ContractError(f"image size {h}x{w} not divisible by patch size {f}")
        patches = (video.reshape(t, h // f, f, w // f, f, 3)
                        .transpose(0, 1, 3, 2, 4, 5)
                        .reshape(t, h // f, w // f, 3 * f * f))
        return LatentGrid(patches @ self.basis.T)

    def decode(self, grid: LatentGrid) -> np.ndarray:
        """Latent grid -> (T, H, W, 3); exact inverse when lossless."""
        if grid.normalized:
            raise ContractError("decode expects raw latents; denormalize first")
        t, hp, wp, d = grid.values.shape
        if d != self.channels:
            raise ContractError(f"grid has {d} channels, codec expects {self.channels}")
        f = self.patch_size
        patches = grid.values @ self.basis
        return (patches.reshape(t, hp, wp, f, f, 3)
                       .transpose(0, 1, 3, 2, 4, 5)
                       .reshape(t, hp * f, wp * f, 3))


def reconstruction_error(codec: PatchCodec, video: np.ndarray) -> float:
    """Max abs round-trip error; ~1e-13 in the lossless regime, larger when lossy."""
    video = np.asarray(video, dtype=np.float64)
    if video.ndim == 3:
        video = video[None]
    return float(np.abs(codec.decode(codec.encode(video)) - video).max())


def normalize(grid: LatentGrid, stats: CodecStats) -> LatentGrid:
    if grid.normalized:
        raise ContractError("grid is already normalized")
    return replace(grid, values=(grid.values - stats.mean) / stats.std, normalized=True)


def denormalize(grid: LatentGrid, stats: CodecStats) -> LatentGrid:
    if not grid.normalized:
        raise ContractError("grid is not normalized")
    return replace(grid, values=grid.values * stats.std + stats.mean, normalized=False)


# -- token sequences -----------------------------------------------------------


@dataclass
class TokenSequence:
    """Batched flat token sequence with integer (view, t, h, w) coordinates.

    `values` is (B, S, D); `coords` is (B, S, 4) and survives pruning unchanged
    so positional phases always use original grid positions.  `memory` marks
    tokens belonging to conditioning frames.  `keep` maps each surviving token
    back to its index in the unpruned sequence.
    """

    values: np.ndarray
    coords: np.ndarray
    memory: np.ndarray
    keep: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.coords = np.asarray(self.coords, dtype=np.int64)
        self.memory = np.asarray(self.memory, dtype=bool)
        b, s, _ = self.values.shape
        if self.coords.shape != (b, s, 4):
            raise ContractError(f"coords shape {self.coords.shape} != {(b, s, 4)}")
        if self.memory.shape != (b, s):
            raise ContractError(f"memory shape {self.memory.shape} != {(b, s)}")
        if self.keep is None:
            self.keep = np.broadcast_to(np.arange(s, dtype=np.int64), (b, s)).copy()
        packed = (self.coords * np.array([1 << 48, 1 << 32, 1 << 16, 1])).sum(axis=-1)
        for row in packed:
            if np.unique(row).size != s:
                raise ContractError("duplicate (view, t, h, w) coordinates in a sequence")

    @property
    def batch(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]

    def select(self, idx: np.ndarray) -> "TokenSequence":
        """Gather tokens per batch element; idx is (B, S_kept) into the current order."""
        rows = np.arange(self.batch)[:, None]
        return TokenSequence(self.values[rows, idx], self.coords[rows, idx],
                             self.memory[rows, idx], self.keep[rows, idx])

    @classmethod
    def stack(cls, seqs: list["TokenSequence"]) -> "TokenSequence":
        if not seqs:
            raise ContractError("cannot stack an empty sequence list")
        return cls(np.concatenate([s.values for s in seqs]),
                   np.concatenate([s.coords for s in seqs]),
                   np.concatenate([s.memory for s in seqs]),
                   np.concatenate([s.keep for s in seqs]))


def _resample_frames(values: np.ndarray, target_frames: int) -> np.ndarray:
    """Endpoint-aligned linear resampling along the leading (time) axis."""
    t = values.shape[0]
    if target_frames == t:
        return values
    if target_frames < 1:
        raise ContractError(f"target frame count must be >= 1, got {target_frames}")
    pos = (np.arange(target_frames) * (t - 1) / max(target_frames - 1, 1))
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, t - 1)
    frac = (pos - lo).reshape(-1, *([1] * (values.ndim - 1)))
    return values[lo] * (1.0 - frac) + values[hi] * frac


def interpolate_stack(views: list[LatentGrid], target_frames: int) -> TokenSequence:
    """Resample each view to `target_frames`, stack views, flatten to tokens.

    Token order is view-major, then (t, h, w) row-major, so token count is
    exactly V * target_frames * H' * W'.
    """
    if not views:
        raise ContractError("interpolate_stack needs at least one view")
    if any(not v.normalized for v in views):
        raise ContractError("all views must be normalized before stacking")
    shapes = {v.values.shape[1:] for v in views}
    if len(shapes) != 1:
        raise ContractError(f"views disagree on grid shape: {sorted(shapes)}")
    resampled = np.stack([_resample_frames(v.values, target_frames) for v in views])
    nv, t, hp, wp, d = resampled.shape
    coords = np.stack(np.meshgrid(np.arange(nv), np.arange(t), np.arange(hp), np.arange(wp),
                                  indexing="ij"), axis=-1).reshape(1, -1, 4)
    values = resampled.reshape(1, -1, d)
    return TokenSequence(values, coords, np.zeros((1, values.shape[1]), dtype=bool))
