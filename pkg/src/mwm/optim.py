"""AdamW with global-norm gradient clipping and linear-warmup-then-constant lr."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .tensorkit import Tensor


@dataclass
class OptimConfig:
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-5
    warmup_steps: int = 1000
    grad_clip: float = 1.0


def lr_at(cfg: OptimConfig, step: int) -> float:
    """Linear ramp over the first warmup_steps updates, constant afterwards."""
    if cfg.warmup_steps <= 0:
        return cfg.lr
    return cfg.lr * min(1.0, (step + 1) / cfg.warmup_steps)


def global_grad_norm(params: dict[str, Tensor]) -> float:
    # summed in name order so the value never depends on how the dict was built
    # (a dict reloaded from a checkpoint iterates differently than a fresh one)
    total = 0.0
    for k in sorted(params):
        if params[k].grad is not None:
            total += float((params[k].grad * params[k].grad).sum())
    return total ** 0.5


@dataclass
class AdamW:
    """Decoupled weight decay Adam over a named parameter dict.

    Moments are part of the training state: `state_tensors` exposes them (plus
    the step counter) for checkpointing, and `load_state` restores them so a
    resumed run continues bit-exactly.
    """

    params: dict[str, Tensor]
    cfg: OptimConfig = field(default_factory=OptimConfig)
    step_count: int = 0

    def __post_init__(self):
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> tuple[float, float]:
        """One update over all params with a populated .grad; returns (lr, grad-norm)."""
        norm = global_grad_norm(self.params)
        scale = 1.0
        if self.cfg.grad_clip > 0 and norm > self.cfg.grad_clip:
            scale = self.cfg.grad_clip / norm
        lr = lr_at(self.cfg, self.step_count)
        self.step_count += 1
        b1, b2 = self.cfg.betas
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * scale
            self._m[k] = b1 * self._m[k] + (1.0 - b1) * g
            self._v[k] = b2 * self._v[k] + (1.0 - b2) * g * g
            update = (self._m[k] / bc1) / (np.sqrt(self._v[k] / bc2) + self.cfg.eps)
            p.data -= lr * (update + self.cfg.weight_decay * p.data)
        return lr, norm

    # -- checkpoint participation ---------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {"opt.step": np.array(float(self.step_count))}
        for k in self.params:
            out[f"opt.m.{k}"] = self._m[k]
            out[f"opt.v.{k}"] = self._v[k]
        return out

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        if "opt.step" not in tensors:
            raise ContractError("optimizer state missing step counter")
        self.step_count = int(tensors["opt.step"])
        for k in self.params:
            m, v = tensors.get(f"opt.m.{k}"), tensors.get(f"opt.v.{k}")
            if m is None or v is None:
                raise ContractError(f"optimizer state missing moments for {k!r}")
            if m.shape != self.params[k].shape:
                raise ContractError(f"moment shape mismatch for {k!r}")
            self._m[k] = m.copy()
            self._v[k] = v.copy()
