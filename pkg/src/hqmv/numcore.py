"""Dense float64 kernels, seeded randomness and finite-difference gradient checks.

Tensors are plain ``numpy.ndarray`` objects with ``dtype=float64``; every
differentiable module in the package exposes explicit forward/backward pairs
built on the helpers here.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import expit

DTYPE = np.float64

# Phi1 switches to its Taylor series below this magnitude.
_PHI1_TAYLOR = 1e-8
# Series coefficients (k+1)/(k+2)! of (s e^s - e^s + 1)/s^2, used near 0.
_DPHI1_COEF = np.array([(k + 1) / float(np.prod(np.arange(1, k + 3))) for k in range(9)])


class NonFiniteError(ValueError):
    """A tensor contained NaN or infinity."""


def as_tensor(x, name: str = "x") -> np.ndarray:
    """Convert to a contiguous float64 array and check it is finite."""
    arr = np.asarray(x, dtype=DTYPE)
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    check_finite(arr, name)
    return arr


def check_finite(x: np.ndarray, name: str = "x") -> None:
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(np.asarray(x)))[0]
        idx = tuple(int(i) for i in bad)
        raise NonFiniteError(f"{name} has a non-finite value at index {idx}")


def sigmoid(x) -> np.ndarray:
    return expit(np.asarray(x, dtype=DTYPE))


def silu(x) -> np.ndarray:
    """Elementwise ``x * sigmoid(x)``."""
    x = as_tensor(x)
    return x * sigmoid(x)


def silu_grad(x: np.ndarray) -> np.ndarray:
    """Derivative of :func:`silu`: ``s (1 + x (1 - s))`` with ``s = sigmoid(x)``."""
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def sigmoid_tanh(x, kind: str = "sigmoid") -> np.ndarray:
    x = as_tensor(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return np.tanh(x)
    raise ValueError(f"unknown activation kind {kind!r}")


def softplus(x) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    return np.logaddexp(0.0, x)


def softplus_inverse(y) -> np.ndarray:
    y = np.asarray(y, dtype=DTYPE)
    return y + np.log(-np.expm1(-y))


def phi1(z):
    """``(e^z - 1) / z`` with the removable singularity at 0 filled in.

    Accepts scalars or arrays. For ``|z| < 1e-8`` the value is the Taylor
    polynomial ``1 + z/2 + z^2/6``.
    """
    scalar = np.ndim(z) == 0
    z_arr = np.atleast_1d(np.asarray(z, dtype=DTYPE))
    small = np.abs(z_arr) < _PHI1_TAYLOR
    out = np.expm1(z_arr)
    np.divide(out, z_arr, out=out, where=~small)
    if small.any():
        zs = z_arr[small]
        out[small] = 1.0 + zs / 2.0 + zs * zs / 6.0
    if scalar:
        return float(out[0])
    return out


def dphi1(z, exp_z=None):
    """Derivative of :func:`phi1`, ``(z e^z - e^z + 1) / z^2``.

    ``exp_z`` may pass a precomputed ``exp(z)``. A series replaces the closed
    form for ``|z| < 0.1``, where it cancels.
    """
    scalar = np.ndim(z) == 0
    z_arr = np.atleast_1d(np.asarray(z, dtype=DTYPE))
    e = np.exp(z_arr) if exp_z is None else np.atleast_1d(np.asarray(exp_z, dtype=DTYPE))
    small = np.abs(z_arr) < 0.1
    out = z_arr * e - e + 1.0
    np.divide(out, z_arr * z_arr, out=out, where=~small)
    if small.any():
        zs = z_arr[small]
        acc = np.full_like(zs, _DPHI1_COEF[-1])
        for c in _DPHI1_COEF[-2::-1]:
            acc = acc * zs + c
        out[small] = acc
    if scalar:
        return float(out[0])
    return out


class Rng:
    """Seeded generator built on numpy's Philox counter-based bit generator.

    ``Rng(seed, *stream)`` derives an independent stream through
    ``numpy.random.SeedSequence([seed, *stream])``, so per-sample streams
    (``Rng(seed, index)``) give the same draws whether samples are generated
    serially or in parallel.
    """

    def __init__(self, seed: int, *stream: int):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        seq = np.random.SeedSequence([self.seed, *self.stream])
        self.gen = np.random.Generator(np.random.Philox(seq))

    def spawn(self, *stream: int) -> "Rng":
        return Rng(self.seed, *self.stream, *stream)

    def normal(self, size=None, std: float = 1.0) -> np.ndarray:
        return self.gen.normal(0.0, std, size=size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size=size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size=size)

    def random(self, size=None):
        return self.gen.random(size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)


@dataclass
class GradReport:
    param_name: str
    max_rel_err: float
    analytic: np.ndarray
    numeric: np.ndarray


def rel_err(analytic, numeric) -> float:
    """Tensor-level relative error: ``max|a-n| / max(max|a|, max|n|, 1e-12)``."""
    a = np.asarray(analytic, dtype=DTYPE)
    n = np.asarray(numeric, dtype=DTYPE)
    if a.size == 0:
        return 0.0
    denom = max(float(np.max(np.abs(a))), float(np.max(np.abs(n))), 1e-12)
    return float(np.max(np.abs(a - n))) / denom


def grad_check(
    f: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    analytic: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    names: Sequence[str] | None = None,
) -> list[GradReport]:
    """Compare analytic gradients against central finite differences.

    ``f`` is evaluated on ``params`` after each entry is perturbed in place by
    ``+-eps`` (and restored afterwards). Reports are sorted by ``max_rel_err``
    in descending order.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    reports = []
    for name in names if names is not None else list(params):
        p = params[name]
        numeric = np.zeros_like(p, dtype=DTYPE)
        flat = p.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(params)
            flat[i] = orig - eps
            fm = f(params)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"non-finite loss probing {name}[{i}]")
            num_flat[i] = (fp - fm) / (2.0 * eps)
        a = np.asarray(analytic[name], dtype=DTYPE).reshape(p.shape)
        reports.append(GradReport(name, rel_err(a, numeric), a.copy(), numeric))
    reports.sort(key=lambda r: r.max_rel_err, reverse=True)
    return reports
