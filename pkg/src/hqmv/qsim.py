"""Exact statevector simulation of the adapter circuit.

Wire 0 is the most significant bit of the basis index, so ``|10>`` is index 2
on two qubits. Amplitude buffers may carry leading batch axes: a buffer of
shape ``(M, 2**n)`` holds M independent registers, and gate angles may be
scalars or length-M arrays. This is how the shifted evaluations of the
parameter-shift rule run as a single batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MAX_QUBITS = 12
SHIFT = np.pi / 2


@dataclass
class StateVector:
    n_qubits: int
    amps: np.ndarray

    def __post_init__(self):
        self.amps = np.asarray(self.amps, dtype=np.complex128)
        if self.amps.shape[-1] != 2**self.n_qubits:
            raise ValueError(f"expected {2**self.n_qubits} amplitudes, got {self.amps.shape[-1]}")

    def norm(self):
        return np.sqrt(np.sum(np.abs(self.amps) ** 2, axis=-1))

    def copy(self) -> "StateVector":
        return StateVector(self.n_qubits, self.amps.copy())


@dataclass
class CircuitParams:
    """Rotation angles ``theta[l, i, :]`` of the entangling layers."""

    n_qubits: int = 4
    n_layers: int = 2
    theta: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.theta is None:
            self.theta = np.zeros((self.n_layers, self.n_qubits, 3))
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.shape != (self.n_layers, self.n_qubits, 3):
            raise ValueError(
                f"theta shape {self.theta.shape} != ({self.n_layers}, {self.n_qubits}, 3)"
            )
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("theta must be finite")

    @property
    def n_params(self) -> int:
        return self.theta.size


def _check_n(n_qubits: int) -> None:
    if not 1 <= n_qubits <= MAX_QUBITS:
        raise ValueError(f"n_qubits must be in [1, {MAX_QUBITS}], got {n_qubits}")


def _check_wire(n_qubits: int, wire: int) -> None:
    if not 0 <= wire < n_qubits:
        raise ValueError(f"wire {wire} out of range for {n_qubits} qubits")


def zero_state(n_qubits: int, batch: int | None = None) -> StateVector:
    _check_n(n_qubits)
    shape = (2**n_qubits,) if batch is None else (batch, 2**n_qubits)
    amps = np.zeros(shape, dtype=np.complex128)
    amps[..., 0] = 1.0
    return StateVector(n_qubits, amps)


def _rotation_inplace(amps: np.ndarray, n: int, axis: str, wire: int, angle) -> None:
    # (batch, high bits, wire bit, low bits) view of the buffer
    lead = amps.shape[:-1]
    view = amps.reshape(lead + (2**wire, 2, 2 ** (n - wire - 1)))
    angle = np.asarray(angle, dtype=np.float64)
    # broadcast per-register angles against (high, low) block axes
    angle = angle.reshape(angle.shape + (1, 1))
    c = np.cos(angle / 2)
    s = np.sin(angle / 2)
    a0 = view[..., 0, :].copy()
    a1 = view[..., 1, :]
    if axis == "X":
        new0 = c * a0 - 1j * s * a1
        new1 = -1j * s * a0 + c * a1
    elif axis == "Y":
        new0 = c * a0 - s * a1
        new1 = s * a0 + c * a1
    elif axis == "Z":
        new0 = (c - 1j * s) * a0
        new1 = (c + 1j * s) * a1
    else:
        raise ValueError(f"unknown rotation axis {axis!r}")
    view[..., 0, :] = new0
    view[..., 1, :] = new1


def _cnot_inplace(amps: np.ndarray, n: int, control: int, target: int) -> None:
    lead = amps.shape[:-1]
    view = amps.reshape(lead + (2,) * n)
    k = len(lead)
    idx0 = [slice(None)] * (k + n)
    idx1 = [slice(None)] * (k + n)
    idx0[k + control] = 1
    idx1[k + control] = 1
    idx0[k + target] = 0
    idx1[k + target] = 1
    idx0, idx1 = tuple(idx0), tuple(idx1)
    tmp = view[idx0].copy()
    view[idx0] = view[idx1]
    view[idx1] = tmp


def apply_rotation(state: StateVector, axis: str, wire: int, angle) -> StateVector:
    """Apply ``exp(-i angle sigma_axis / 2)`` on ``wire``; returns a new state."""
    _check_wire(state.n_qubits, wire)
    out = state.copy()
    _rotation_inplace(out.amps, out.n_qubits, axis, wire, angle)
    return out


def apply_cnot(state: StateVector, control: int, target: int) -> StateVector:
    _check_wire(state.n_qubits, control)
    _check_wire(state.n_qubits, target)
    if control == target:
        raise ValueError("control and target must differ")
    out = state.copy()
    _cnot_inplace(out.amps, out.n_qubits, control, target)
    return out


def _layers_inplace(amps: np.ndarray, n: int, theta: np.ndarray) -> None:
    # theta: (..., L, n, 3) with optional leading batch axes matching amps
    for l in range(theta.shape[-3]):
        for i in range(n):
            _rotation_inplace(amps, n, "Z", i, theta[..., l, i, 0])
            _rotation_inplace(amps, n, "Y", i, theta[..., l, i, 1])
            _rotation_inplace(amps, n, "Z", i, theta[..., l, i, 2])
        if n > 1:
            for i in range(n):
                _cnot_inplace(amps, n, i, (i + 1) % n)


def entangling_layers(state: StateVector, params: CircuitParams) -> StateVector:
    """Per wire ``Rz Ry Rz`` rotations followed by a CNOT ring, once per layer.

    The composite rotation applies ``Rz(theta[l, i, 0])`` first, so its matrix
    is ``Rz(theta2) Ry(theta1) Rz(theta0)``.
    """
    if state.n_qubits != params.n_qubits:
        raise ValueError(f"state has {state.n_qubits} qubits, params expect {params.n_qubits}")
    out = state.copy()
    _layers_inplace(out.amps, out.n_qubits, params.theta)
    return out


def z_expectations(amps: np.ndarray, n: int) -> np.ndarray:
    """``<Z_i>`` for every wire, shape ``amps.shape[:-1] + (n,)``."""
    probs = np.abs(amps) ** 2
    lead = probs.shape[:-1]
    p = probs.reshape(lead + (2,) * n)
    k = len(lead)
    out = np.empty(lead + (n,))
    for i in range(n):
        axes = tuple(k + j for j in range(n) if j != i)
        marg = p.sum(axis=axes)
        out[..., i] = marg[..., 0] - marg[..., 1]
    return out


def _run(phi: np.ndarray, theta: np.ndarray, n: int) -> np.ndarray:
    lead = phi.shape[:-1]
    amps = np.zeros(lead + (2**n,), dtype=np.complex128)
    amps[..., 0] = 1.0
    for i in range(n):
        _rotation_inplace(amps, n, "X", i, phi[..., i])
    _layers_inplace(amps, n, theta)
    return z_expectations(amps, n)


def _check_phi(phi: np.ndarray, params: CircuitParams) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape[-1:] != (params.n_qubits,):
        raise ValueError(f"phi has trailing size {phi.shape[-1:]}, expected {params.n_qubits}")
    return phi


def circuit_forward(phi, params: CircuitParams) -> np.ndarray:
    """Pauli-Z expectations after angle embedding and the entangling layers.

    ``phi`` has shape ``(n_q,)`` or ``(B, n_q)``; the result has the same shape.
    """
    phi = _check_phi(phi, params)
    theta = np.broadcast_to(params.theta, phi.shape[:-1] + params.theta.shape)
    return _run(phi, theta, params.n_qubits)


def circuit_grad(phi, params: CircuitParams):
    """Parameter-shift Jacobians of :func:`circuit_forward`.

    Returns ``(d_phi, d_theta)`` where ``d_phi[..., j, i] = d y[j] / d phi[i]``
    and ``d_theta[..., j, p] = d y[j] / d theta.flat[p]``. All ``2 (n_q + P)``
    shifted circuits per input run as one batch.
    """
    phi = _check_phi(phi, params)
    n = params.n_qubits
    lead = phi.shape[:-1]
    n_phi, n_th = n, params.n_params
    n_shift = n_phi + n_th
    # rows (+shift per parameter, -shift per parameter)
    phis = np.broadcast_to(phi[..., None, :], lead + (2 * n_shift, n)).copy()
    thetas = np.broadcast_to(
        params.theta.reshape(-1), lead + (2 * n_shift, n_th)
    ).copy()
    for p in range(n_phi):
        phis[..., p, p] += SHIFT
        phis[..., n_shift + p, p] -= SHIFT
    for q in range(n_th):
        thetas[..., n_phi + q, q] += SHIFT
        thetas[..., n_shift + n_phi + q, q] -= SHIFT
    thetas = thetas.reshape(lead + (2 * n_shift,) + params.theta.shape)
    y = _run(phis, thetas, n)
    diff = 0.5 * (y[..., :n_shift, :] - y[..., n_shift:, :])
    # diff[..., p, j] -> jacobian[..., j, p]
    jac = np.swapaxes(diff, -1, -2)
    return jac[..., :n_phi], jac[..., n_phi:]
