"""Quantum context adapter: pool, reduce to qubit angles, run the circuit, gate residually.

Feature maps are ``(B, C, H, W)`` float arrays. The circuit runs once per
sample on the pooled features and the resulting channel gate is broadcast over
the spatial axes: ``X_out = X * (1 + lam * G)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import Rng, sigmoid
from .qsim import CircuitParams, circuit_forward, circuit_grad


@dataclass
class QcaParams:
    W_red: np.ndarray  # (n_q, C)
    W_exp: np.ndarray  # (C, n_q)
    circuit: CircuitParams
    lam: float = 0.0

    def __post_init__(self):
        n_q = self.circuit.n_qubits
        C = self.W_red.shape[1]
        if self.W_red.shape != (n_q, C) or self.W_exp.shape != (C, n_q):
            raise ValueError(
                f"W_red {self.W_red.shape} / W_exp {self.W_exp.shape} inconsistent with "
                f"{n_q} qubits and {C} channels"
            )

    @property
    def n_qubits(self) -> int:
        return self.circuit.n_qubits

    @classmethod
    def init(cls, C: int, rng: Rng, n_qubits: int = 4, n_layers: int = 2) -> "QcaParams":
        """Random reduction/expansion and circuit angles; ``lam`` starts at exactly 0."""
        return cls(
            W_red=rng.normal((n_qubits, C), std=1.0 / np.sqrt(C)),
            W_exp=rng.normal((C, n_qubits), std=1.0 / np.sqrt(n_qubits)),
            circuit=CircuitParams(n_qubits, n_layers,
                                  rng.uniform(0.0, 2 * np.pi, size=(n_layers, n_qubits, 3))),
            lam=0.0,
        )


def _check_map(X: np.ndarray, p: QcaParams) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4:
        raise ValueError(f"feature map must be (B, C, H, W), got shape {X.shape}")
    if X.shape[1] != p.W_red.shape[1]:
        raise ValueError(f"feature map has {X.shape[1]} channels, adapter expects {p.W_red.shape[1]}")
    return X


def gap(X) -> np.ndarray:
    """Global average pool ``(B, C, H, W) -> (B, C)``."""
    return np.asarray(X, dtype=np.float64).mean(axis=(2, 3))


def reduce_encode(v, W_red) -> np.ndarray:
    """Embedding angles ``(pi/2) tanh(v W_red^T)``, strictly inside ``(-pi/2, pi/2)``."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != W_red.shape[1]:
        raise ValueError(f"v width {v.shape[-1]} != W_red input width {W_red.shape[1]}")
    return (np.pi / 2) * np.tanh(v @ W_red.T)


def expand_gate(y_q, W_exp) -> np.ndarray:
    y_q = np.asarray(y_q, dtype=np.float64)
    if y_q.shape[-1] != W_exp.shape[1]:
        raise ValueError(f"y_q width {y_q.shape[-1]} != W_exp input width {W_exp.shape[1]}")
    return sigmoid(y_q @ W_exp.T)


def qca_forward(X, p: QcaParams, return_cache: bool = False):
    X = _check_map(X, p)
    v = gap(X)
    u = v @ p.W_red.T
    phi = (np.pi / 2) * np.tanh(u)
    y_q = circuit_forward(phi, p.circuit)
    G = expand_gate(y_q, p.W_exp)
    out = X * (1.0 + p.lam * G)[:, :, None, None]
    if return_cache:
        return out, dict(v=v, u=u, phi=phi, y_q=y_q, G=G)
    return out


def qca_backward(X, p: QcaParams, upstream, cache=None):
    """Reverse-mode gradients of :func:`qca_forward`.

    The circuit segment uses the parameter-shift Jacobians from
    :func:`hqmv.qsim.circuit_grad`. Returns ``(grad_X, grads)`` with keys
    ``W_red``, ``W_exp``, ``theta`` and ``lam``.
    """
    X = _check_map(X, p)
    g = np.asarray(upstream, dtype=np.float64)
    if cache is None:
        _, cache = qca_forward(X, p, return_cache=True)
    G, y_q, v, u, phi = cache["G"], cache["y_q"], cache["v"], cache["u"], cache["phi"]
    H, W = X.shape[2:]

    gX = g * (1.0 + p.lam * G)[:, :, None, None]
    xg = np.sum(g * X, axis=(2, 3))  # (B, C)
    glam = float(np.sum(xg * G))
    gG = p.lam * xg
    ga = gG * G * (1.0 - G)
    gW_exp = ga.T @ y_q
    gy = ga @ p.W_exp  # (B, n_q)

    jac_phi, jac_theta = circuit_grad(phi, p.circuit)
    gphi = np.einsum("bj,bji->bi", gy, jac_phi)
    gtheta = np.einsum("bj,bjp->p", gy, jac_theta).reshape(p.circuit.theta.shape)

    gu = gphi * (np.pi / 2) * (1.0 - np.tanh(u) ** 2)
    gW_red = gu.T @ v
    gv = gu @ p.W_red
    gX = gX + (gv / (H * W))[:, :, None, None]
    return gX, dict(W_red=gW_red, W_exp=gW_exp, theta=gtheta, lam=glam)


def gate_activation(X, p: QcaParams) -> np.ndarray:
    """Per-sample, per-channel gate magnitude ``|lam| * G``."""
    X = _check_map(X, p)
    G = expand_gate(circuit_forward(reduce_encode(gap(X), p.W_red), p.circuit), p.W_exp)
    return abs(p.lam) * G
