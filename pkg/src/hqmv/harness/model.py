"""Tiny hybrid classifier: patch stem, Mamba blocks, optional adapter, pooled head."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from ..numcore import Rng, sigmoid
from ..peft import LoraAdapter, lora_grad_from_weight, lora_init, lora_merge
from ..qca import QcaParams, qca_backward, qca_forward, expand_gate, gap, reduce_encode
from ..qsim import CircuitParams, circuit_forward
from ..ssm import PARAM_NAMES, MambaBlockParams, mamba_block_backward, mamba_block_forward
from ..wafersynth import C as N_CLASSES

LORA_TARGETS = ("W_in", "W_proj", "W_out")


@dataclass
class ModelConfig:
    H: int = 26
    W: int = 26
    patch: int = 2
    D: int = 16
    n_blocks: int = 2
    N: int = 8
    K: int = 3
    use_qca: bool = True
    n_qubits: int = 4
    qca_layers: int = 2
    lora: Optional[tuple] = None  # (rank, alpha)
    C: int = N_CLASSES
    pos_embed: bool = True  # learned per-token offset after the stem

    def __post_init__(self):
        if self.H % self.patch or self.W % self.patch:
            raise ValueError(f"input {self.H}x{self.W} not divisible by patch {self.patch}")
        for name in ("H", "W", "patch", "D", "n_blocks", "N", "K", "n_qubits", "C"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.qca_layers < 0:
            raise ValueError("qca_layers must be >= 0")
        if self.lora is not None:
            self.lora = (int(self.lora[0]), float(self.lora[1]))

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.H // self.patch, self.W // self.patch

    @property
    def n_tokens(self) -> int:
        h, w = self.grid_shape
        return h * w

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lora"] = list(self.lora) if self.lora is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if d.get("lora") is not None:
            d["lora"] = tuple(d["lora"])
        return cls(**d)


def stem_features(grids: np.ndarray, patch: int) -> np.ndarray:
    """One-hot {0, 1, 2} cells averaged over non-overlapping patches: (B, L, 3) raster order."""
    grids = np.asarray(grids)
    B, H, W = grids.shape
    onehot = (grids[..., None] == np.arange(3)).astype(np.float64)
    h, w = H // patch, W // patch
    pooled = onehot.reshape(B, h, patch, w, patch, 3).mean(axis=(2, 4))
    return pooled.reshape(B, h * w, 3)


def tokens_to_map(tok: np.ndarray, h: int, w: int) -> np.ndarray:
    B, L, D = tok.shape
    return tok.reshape(B, h, w, D).transpose(0, 3, 1, 2)


def map_to_tokens(fm: np.ndarray) -> np.ndarray:
    B, D, h, w = fm.shape
    return fm.transpose(0, 2, 3, 1).reshape(B, h * w, D)


class HybridModel:
    """Parameters live in :attr:`params` (declaration order); LoRA bases are listed in :attr:`frozen`."""

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray]):
        self.cfg = cfg
        self.params = params
        self.frozen = set()
        if cfg.lora is not None:
            for i in range(cfg.n_blocks):
                self.frozen.update(f"blocks.{i}.{t}" for t in LORA_TARGETS)
            self.frozen.add("head.W")

    @property
    def trainable(self) -> list[str]:
        return [k for k in self.params if k not in self.frozen]

    def n_params(self, trainable_only: bool = False) -> int:
        names = self.trainable if trainable_only else list(self.params)
        return int(sum(self.params[k].size for k in names))

    # -- parameter views ---------------------------------------------------

    def _adapter(self, name: str) -> LoraAdapter:
        return LoraAdapter(A=self.params[name + ".lora_A"], B=self.params[name + ".lora_B"],
                           W0=self.params[name], alpha=self.cfg.lora[1])

    def _weight(self, name: str) -> np.ndarray:
        if self.cfg.lora is not None and name + ".lora_A" in self.params:
            return lora_merge(self._adapter(name))
        return self.params[name]

    def block_params(self, i: int) -> MambaBlockParams:
        pre = f"blocks.{i}."
        return MambaBlockParams(**{k: self._weight(pre + k) for k in PARAM_NAMES})

    def qca_params(self) -> QcaParams:
        cfg = self.cfg
        return QcaParams(
            W_red=self.params["qca.W_red"],
            W_exp=self.params["qca.W_exp"],
            circuit=CircuitParams(cfg.n_qubits, cfg.qca_layers, self.params["qca.theta"]),
            lam=float(self.params["qca.lam"][0]),
        )

    # -- forward / backward ------------------------------------------------

    def _embed(self, feats: np.ndarray) -> np.ndarray:
        X = feats @ self.params["stem.W"].T + self.params["stem.b"]
        if self.cfg.pos_embed:
            X = X + self.params["stem.pos"]
        return X

    def forward(self, grids, return_cache: bool = False):
        """Logits ``(B, C)`` for integer grids ``(B, H, W)``."""
        cfg = self.cfg
        grids = np.asarray(grids)
        if grids.ndim != 3 or grids.shape[1:] != (cfg.H, cfg.W):
            raise ValueError(f"expected grids of shape (B, {cfg.H}, {cfg.W}), got {grids.shape}")
        feats = stem_features(grids, cfg.patch)
        X = self._embed(feats)
        block_caches = []
        for i in range(cfg.n_blocks):
            p = self.block_params(i)
            X_in = X
            X, bc = mamba_block_forward(X_in, p, return_cache=True)
            block_caches.append((X_in, p, bc))
        qca_cache = None
        if cfg.use_qca:
            h, w = cfg.grid_shape
            fm = tokens_to_map(X, h, w)
            qp = self.qca_params()
            out_fm, qc = qca_forward(fm, qp, return_cache=True)
            qca_cache = (fm, qp, qc)
            X = map_to_tokens(out_fm)
        pooled = X.mean(axis=1)
        logits = pooled @ self._weight("head.W").T + self.params["head.b"]
        if return_cache:
            return logits, dict(feats=feats, blocks=block_caches, qca=qca_cache, pooled=pooled)
        return logits

    def predict_proba(self, grids) -> np.ndarray:
        return sigmoid(self.forward(grids))

    def backward(self, glogits: np.ndarray, cache: dict) -> dict[str, np.ndarray]:
        """Gradients for every trainable parameter given ``dloss/dlogits``."""
        cfg = self.cfg
        grads: dict[str, np.ndarray] = {}
        wgrads: dict[str, np.ndarray] = {}
        wgrads["head.W"] = glogits.T @ cache["pooled"]
        grads["head.b"] = glogits.sum(axis=0)
        gpooled = glogits @ self._weight("head.W")
        L = cfg.n_tokens
        gX = np.broadcast_to(gpooled[:, None, :] / L, (glogits.shape[0], L, cfg.D)).copy()
        if cfg.use_qca:
            fm, qp, qc = cache["qca"]
            h, w = cfg.grid_shape
            gfm, qg = qca_backward(fm, qp, tokens_to_map(gX, h, w), cache=qc)
            gX = map_to_tokens(gfm)
            grads["qca.W_red"] = qg["W_red"]
            grads["qca.W_exp"] = qg["W_exp"]
            grads["qca.theta"] = qg["theta"]
            grads["qca.lam"] = np.array([qg["lam"]])
        for i in reversed(range(cfg.n_blocks)):
            X_in, p, bc = cache["blocks"][i]
            gX, bg = mamba_block_backward(X_in, p, gX, cache=bc)
            for k, v in bg.items():
                wgrads[f"blocks.{i}.{k}"] = v
        grads["stem.W"] = np.einsum("bld,blk->dk", gX, cache["feats"])
        grads["stem.b"] = gX.sum(axis=(0, 1))
        if cfg.pos_embed:
            grads["stem.pos"] = gX.sum(axis=0)
        for name, gw in wgrads.items():
            if name in self.frozen:
                gA, gB = lora_grad_from_weight(self._adapter(name), gw)
                grads[name + ".lora_A"] = gA
                grads[name + ".lora_B"] = gB
            else:
                grads[name] = gw
        return {k: grads[k] for k in self.trainable}

    def loss_and_grads(self, grids, labels, gamma: float = 2.0, alpha=None, per_sample: bool = False):
        """Mean focal loss and its gradients; ``per_sample`` also returns each sample's loss."""
        from ..metrics import focal_loss_from_logits, focal_loss_per_sample

        logits, cache = self.forward(grids, return_cache=True)
        loss, glogits = focal_loss_from_logits(logits, labels, gamma=gamma, alpha=alpha)
        grads = self.backward(glogits, cache)
        if per_sample:
            return loss, grads, focal_loss_per_sample(sigmoid(logits), labels, gamma, alpha)
        return loss, grads

    # -- diagnostics -------------------------------------------------------

    def bottleneck(self, grids) -> np.ndarray:
        """Feature map ``(B, D, h, w)`` entering the adapter position."""
        cfg = self.cfg
        X = self._embed(stem_features(np.asarray(grids), cfg.patch))
        for i in range(cfg.n_blocks):
            X = mamba_block_forward(X, self.block_params(i))
        return tokens_to_map(X, *cfg.grid_shape)

    def gate_values(self, grids) -> np.ndarray:
        """Adapter gate ``G`` per sample and channel, ``(B, D)``."""
        if not self.cfg.use_qca:
            raise ValueError("model has no quantum context adapter")
        qp = self.qca_params()
        fm = self.bottleneck(grids)
        return expand_gate(circuit_forward(reduce_encode(gap(fm), qp.W_red), qp.circuit), qp.W_exp)


def build_model(cfg: ModelConfig, rng: Rng) -> HybridModel:
    """Initialize all parameters from sub-streams of ``rng``.

    Each component draws from its own stream, so a hybrid and a classical model
    built from the same seed share every classical parameter bitwise.
    """
    D, C = cfg.D, cfg.C
    params: dict[str, np.ndarray] = {}
    srng = rng.spawn(0)
    params["stem.W"] = srng.normal((D, 3), std=1.0)
    params["stem.b"] = np.zeros(D)
    if cfg.pos_embed:
        params["stem.pos"] = rng.spawn(5).normal((cfg.n_tokens, D), std=0.1)
    for i in range(cfg.n_blocks):
        bp = MambaBlockParams.init(D, cfg.N, rng.spawn(1, i), K=cfg.K)
        for k, v in bp.arrays().items():
            params[f"blocks.{i}.{k}"] = v
    if cfg.use_qca:
        qp = QcaParams.init(D, rng.spawn(3), n_qubits=cfg.n_qubits, n_layers=cfg.qca_layers)
        params["qca.W_red"] = qp.W_red
        params["qca.W_exp"] = qp.W_exp
        params["qca.theta"] = qp.circuit.theta
        params["qca.lam"] = np.zeros(1)
    params["head.W"] = rng.spawn(2).normal((C, D), std=1.0 / np.sqrt(D))
    params["head.b"] = np.zeros(C)
    if cfg.lora is not None:
        r, alpha = cfg.lora
        targets = [f"blocks.{i}.{t}" for i in range(cfg.n_blocks) for t in LORA_TARGETS] + ["head.W"]
        for j, name in enumerate(targets):
            W0 = params[name]
            ad = lora_init(W0.shape[0], W0.shape[1], min(r, *W0.shape), alpha, rng.spawn(4, j), W0=W0)
            params[name + ".lora_A"] = ad.A
            params[name + ".lora_B"] = ad.B
    return HybridModel(cfg, params)


def expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count (frozen LoRA bases included)."""
    D, N, K, C = cfg.D, cfg.N, cfg.K, cfg.C
    block = 2 * D * D + D * K + (1 + 2 * N) * D + D * N + D + D * D
    total = 3 * D + D + cfg.n_blocks * block + C * D + C
    if cfg.pos_embed:
        total += cfg.n_tokens * D
    if cfg.use_qca:
        total += 2 * cfg.n_qubits * D + 3 * cfg.qca_layers * cfg.n_qubits + 1
    if cfg.lora is not None:
        r = cfg.lora[0]
        shapes = [(2 * D, D), (1 + 2 * N, D), (D, D)] * cfg.n_blocks + [(C, D)]
        total += sum(min(r, d, k) * (d + k) for d, k in shapes)
    return total
