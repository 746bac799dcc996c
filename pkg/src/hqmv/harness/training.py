"""Adam training loop, evaluation and checkpoint I/O."""
from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..metrics import PredictionSet, focal_loss, macro_f1
from ..numcore import NonFiniteError, Rng, sigmoid
from ..wafersynth import CLASSES, WaferSample, stack
from .model import HybridModel, ModelConfig, build_model

log = logging.getLogger(__name__)

CKPT_MAGIC = b"HQMV"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    gamma: float = 2.0
    alpha: object = None
    seed: int = 42
    deterministic: bool = True
    schedule: str = "cosine"

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.schedule!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_macro_f1: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)

    def rows(self):
        for e in range(len(self.train_loss)):
            yield {"epoch": e + 1, "train_loss": self.train_loss[e], "val_loss": self.val_loss[e],
                   "val_macro_f1": self.val_macro_f1[e], "wall_time": self.wall_time[e]}

    def same_trajectory(self, other: "TrainHistory") -> bool:
        """Equality of every recorded quantity except wall time."""
        return (self.train_loss == other.train_loss and self.val_loss == other.val_loss
                and self.val_macro_f1 == other.val_macro_f1)


class DivergenceError(RuntimeError):
    pass


class Adam:
    def __init__(self, params: dict[str, np.ndarray], names: Sequence[str], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.names = list(names)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(params[k]) for k in self.names}
        self.v = {k: np.zeros_like(params[k]) for k in self.names}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k in self.names:
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            # in-place so views held elsewhere stay current
            self.params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def lr_at(tc: TrainConfig, step: int, total_steps: int) -> float:
    """Learning rate for optimizer step ``step`` (0-based) of ``total_steps``."""
    if tc.schedule == "constant":
        return tc.lr
    return 0.5 * tc.lr * (1.0 + np.cos(np.pi * step / total_steps))


def _scores(model: HybridModel, grids: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [sigmoid(model.forward(grids[i:i + batch_size])) for i in range(0, len(grids), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.cfg.C))


def evaluate(model: HybridModel, samples: Sequence[WaferSample], batch_size: int = 256) -> PredictionSet:
    """Sigmoid scores for every sample (no thresholding)."""
    if not samples:
        raise ValueError("empty evaluation set")
    grids, labels = stack(samples)
    return PredictionSet(_scores(model, grids, batch_size), labels, CLASSES)


def train(model: HybridModel, train_set: Sequence[WaferSample], val_set: Sequence[WaferSample],
          tc: TrainConfig, progress: bool = False) -> TrainHistory:
    """Mini-batch focal-loss training with Adam over the model's trainable parameters.

    The batch order of epoch ``e`` comes from ``Rng(seed, 0xDA7A, e)`` and so
    depends only on the seed and the training-set size.
    """
    if not train_set or not val_set:
        raise ValueError("training and validation sets must be non-empty")
    grids, labels = stack(train_set)
    vgrids, vlabels = stack(val_set)
    opt = Adam(model.params, model.trainable, tc.lr, tc.beta1, tc.beta2, tc.eps)
    hist = TrainHistory()
    n = len(grids)
    steps_per_epoch = -(-n // tc.batch_size)
    total_steps = max(tc.epochs * steps_per_epoch, 1)
    for epoch in range(tc.epochs):
        t0 = time.perf_counter()
        order = Rng(tc.seed, 0xDA7A, epoch).permutation(n)
        sample_loss = np.empty(n)
        for start in range(0, n, tc.batch_size):
            idx = order[start:start + tc.batch_size]
            try:
                loss, grads, per = model.loss_and_grads(grids[idx], labels[idx], tc.gamma, tc.alpha,
                                                        per_sample=True)
            except NonFiniteError as exc:
                raise DivergenceError(f"non-finite value in epoch {epoch + 1}: {exc}") from exc
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite training loss in epoch {epoch + 1}")
            sample_loss[idx] = per
            opt.lr = lr_at(tc, opt.t, total_steps)
            opt.step(grads)
        vscores = _scores(model, vgrids)
        vloss = focal_loss(vscores, vlabels, tc.gamma, tc.alpha)
        if not np.isfinite(vloss):
            raise DivergenceError(f"non-finite validation loss in epoch {epoch + 1}")
        vf1, _ = macro_f1(PredictionSet(vscores, vlabels, CLASSES))
        # exact sum in sample order, so the epoch loss does not depend on batch order
        train_loss = math.fsum(sample_loss) / n
        hist.train_loss.append(train_loss)
        hist.val_loss.append(vloss)
        hist.val_macro_f1.append(vf1)
        hist.wall_time.append(time.perf_counter() - t0)
        msg = (f"epoch {epoch + 1}/{tc.epochs} train {train_loss:.4f} val {vloss:.4f} "
               f"macroF1 {vf1:.4f} ({hist.wall_time[-1]:.1f}s)")
        log.info(msg)
        if progress:
            print(msg, flush=True)
    return hist


# --- checkpoints ----------------------------------------------------------

def save_checkpoint(path, model: HybridModel) -> None:
    """``HQMV`` | u16 version | u32 config length | config JSON | u32 tensor count | f64 tensors.

    Tensors follow the model's declaration order; their shapes are implied by
    the config.
    """
    cfg = json.dumps(model.cfg.to_dict(), sort_keys=True).encode()
    buf = bytearray(CKPT_MAGIC)
    buf += struct.pack("<HI", CKPT_VERSION, len(cfg))
    buf += cfg
    buf += struct.pack("<I", len(model.params))
    for v in model.params.values():
        buf += np.ascontiguousarray(v, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> HybridModel:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}")
    version, clen = struct.unpack_from("<HI", data, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 10
    cfg = ModelConfig.from_dict(json.loads(data[off:off + clen].decode()))
    off += clen
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    model = build_model(cfg, Rng(0))
    if count != len(model.params):
        raise ValueError(f"{path}: {count} tensors stored, config implies {len(model.params)}")
    for k, v in model.params.items():
        nbytes = v.size * 8
        if off + nbytes > len(data):
            raise ValueError(f"{path}: truncated while reading {k}")
        model.params[k] = np.frombuffer(data, dtype="<f8", count=v.size, offset=off).reshape(v.shape).copy()
        off += nbytes
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    return model
