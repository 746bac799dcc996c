"""End-to-end finite-difference check of the model's analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..metrics import focal_loss_from_logits
from ..numcore import GradReport, Rng, grad_check
from .model import HybridModel, ModelConfig, build_model

CLASSICAL_TOL = 1e-5
QUANTUM_TOL = 1e-4


def gradcheck_config(lora=None) -> ModelConfig:
    return ModelConfig(H=8, W=8, patch=2, D=8, n_blocks=2, N=4, use_qca=True, n_qubits=4, qca_layers=2,
                       lora=lora)


def tolerance(name: str) -> float:
    # anything reached through the adapter path gets the looser bound
    return QUANTUM_TOL if name.startswith("qca.") else CLASSICAL_TOL


@dataclass
class GradSuiteResult:
    name: str
    reports: list

    @property
    def failures(self) -> list[GradReport]:
        return [r for r in self.reports if not r.max_rel_err <= tolerance(r.param_name)]

    @property
    def ok(self) -> bool:
        return not self.failures


def _probe_model(cfg: ModelConfig, seed: int) -> HybridModel:
    model = build_model(cfg, Rng(seed))
    rng = Rng(seed, 0x6C)
    # move off the init point: lambda = 0 and lora_B = 0 would hide whole gradient paths
    if cfg.use_qca:
        model.params["qca.lam"][:] = 0.7
    model.params["stem.b"][:] = rng.normal(model.params["stem.b"].shape, std=0.1)
    model.params["head.b"][:] = rng.normal(model.params["head.b"].shape, std=0.1)
    for k in model.params:
        if k.endswith(".lora_B"):
            model.params[k][:] = rng.normal(model.params[k].shape, std=0.05)
    return model


def run_model_gradcheck(cfg: ModelConfig, seed: int = 0, batch: int = 2, gamma: float = 2.0,
                        eps: float = 1e-5, name: str = "hybrid") -> GradSuiteResult:
    """Focal loss on a random batch; every trainable tensor is compared to central differences."""
    model = _probe_model(cfg, seed)
    drng = Rng(seed, 0xDA)
    grids = drng.integers(0, 3, size=(batch, cfg.H, cfg.W))
    labels = (drng.random((batch, cfg.C)) < 0.3).astype(np.float64)
    _, grads = model.loss_and_grads(grids, labels, gamma=gamma)

    def f(_params):
        return focal_loss_from_logits(model.forward(grids), labels, gamma=gamma)[0]

    reports = grad_check(f, model.params, grads, eps=eps, names=model.trainable)
    return GradSuiteResult(name, reports)


def run_suite(full: bool = False, seed: int = 0) -> list[GradSuiteResult]:
    results = [run_model_gradcheck(gradcheck_config(), seed, name="hybrid")]
    if full:
        results.append(run_model_gradcheck(gradcheck_config(lora=(2, 4.0)), seed, name="hybrid+lora"))
        cfg = gradcheck_config()
        cfg.use_qca = False
        results.append(run_model_gradcheck(cfg, seed, name="classical"))
    return results
