"""Low-rank adapters: a frozen base weight plus a scaled trainable ``B @ A`` bypass."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import Rng


@dataclass
class LoraAdapter:
    A: np.ndarray  # (r, k)
    B: np.ndarray  # (d, r)
    W0: np.ndarray  # (d, k), frozen
    alpha: float

    @property
    def r(self) -> int:
        return self.A.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.r

    @property
    def n_trainable(self) -> int:
        return self.A.size + self.B.size


def lora_init(d: int, k: int, r: int, alpha: float, rng: Rng, W0: np.ndarray | None = None,
              std: float = 0.02) -> LoraAdapter:
    """Gaussian ``A`` and zero ``B``, so the adapter starts as an exact no-op."""
    if r < 1 or r > min(d, k):
        raise ValueError(f"rank {r} must lie in [1, min(d, k) = {min(d, k)}]")
    if W0 is None:
        W0 = np.zeros((d, k))
    if W0.shape != (d, k):
        raise ValueError(f"W0 shape {W0.shape} != ({d}, {k})")
    return LoraAdapter(A=rng.normal((r, k), std=std), B=np.zeros((d, r)), W0=W0, alpha=float(alpha))


def lora_forward(x, adapter: LoraAdapter) -> np.ndarray:
    """``h = W0 x + (alpha/r) B (A x)`` for a vector or a row batch ``(..., k)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != adapter.W0.shape[1]:
        raise ValueError(f"input width {x.shape[-1]} != {adapter.W0.shape[1]}")
    return x @ adapter.W0.T + adapter.scale * ((x @ adapter.A.T) @ adapter.B.T)


def lora_backward(x, upstream, adapter: LoraAdapter):
    """Gradients of :func:`lora_forward`: ``(grad_x, grad_A, grad_B)``; ``W0`` gets none."""
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(upstream, dtype=np.float64)
    x2 = x.reshape(-1, x.shape[-1])
    g2 = g.reshape(-1, g.shape[-1])
    s = adapter.scale
    u = x2 @ adapter.A.T
    gB = s * g2.T @ u
    gu = s * g2 @ adapter.B
    gA = gu.T @ x2
    gx = g2 @ adapter.W0 + gu @ adapter.A
    return gx.reshape(x.shape), gA, gB


def lora_grad_from_weight(adapter: LoraAdapter, grad_w: np.ndarray):
    """Map a gradient on the merged weight to ``(grad_A, grad_B)``."""
    s = adapter.scale
    return s * adapter.B.T @ grad_w, s * grad_w @ adapter.A.T


def lora_merge(adapter: LoraAdapter) -> np.ndarray:
    return adapter.W0 + adapter.scale * (adapter.B @ adapter.A)
