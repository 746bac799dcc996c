"""Report assembly: metric tables as CSV, curves as CSV plus SVG, and the paired ablation."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..metrics import (
    PredictionSet,
    RiskCurve,
    calibration_suite,
    catastrophic_miss_rate,
    complexity_breakdown,
    expected_fp_cost,
    macro_f1,
    multilabel_suite,
    n_retained,
    selective_prediction,
)
from ..numcore import Rng
from ..wafersynth import CLASSES, WaferSample, stack
from .model import HybridModel, ModelConfig, build_model
from .training import TrainConfig, TrainHistory, evaluate, train

log = logging.getLogger(__name__)

CRITICAL_CLASS = "Near_Full"
COVERAGE_GRID = np.round(np.arange(1, 21) / 20, 10)
THRESHOLD_GRID = np.linspace(0.0, 1.0, 101)

# file name -> header; the row count of each is fixed by the config (see test suite)
SCHEMA = {
    "multilabel.csv": ["metric", "value"],
    "calibration.csv": ["metric", "value"],
    "bins.csv": ["bin", "lo", "hi", "count", "mean_confidence", "accuracy"],
    "complexity.csv": ["defects", "count", "subset_accuracy", "errors_per_wafer"],
    "selective.csv": ["coverage", "retained", "macro_f1"],
    "miss_rate.csv": ["threshold", "miss_rate"],
    "fp_cost.csv": ["threshold", "expected_fp_cost"],
    "gates.csv": ["class", "n_samples", "mean_abs_lambda_G"],
    "history.csv": ["epoch", "train_loss", "val_loss", "val_macro_f1", "wall_time"],
    "comparison.csv": ["metric", "classical", "hybrid"],
}


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else repr(float(v))
    return str(v)


def write_csv(path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            vals = [r[h] for h in header] if isinstance(r, dict) else list(r)
            if len(vals) != len(header):
                raise ValueError(f"{path}: row has {len(vals)} fields, header has {len(header)}")
            w.writerow([_fmt(v) for v in vals])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --- plotting -------------------------------------------------------------

def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "hqmv"
    return plt


def save_svg(fig, path) -> None:
    # fixed hashsalt and no date keep the bytes reproducible
    fig.savefig(path, format="svg", metadata={"Date": None})
    fig.clf()
    _plt().close(fig)


def plot_curves(path, curves: dict[str, RiskCurve], xlabel: str, ylabel: str, title: str) -> None:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, c in curves.items():
        ax.plot(c.grid, c.values, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    save_svg(fig, path)


def plot_reliability(path, bins_by_model: dict[str, list]) -> None:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(4.5, 4))
    ax.plot([0.5, 1], [0.5, 1], "k--", lw=0.8)
    for label, bins in bins_by_model.items():
        pts = [(b.mean_confidence, b.accuracy) for b in bins if b.count > 0]
        if pts:
            x, y = zip(*pts)
            ax.plot(x, y, "o-", label=label)
    ax.set_xlabel("confidence")
    ax.set_ylabel("accuracy")
    ax.set_title("Reliability")
    ax.legend()
    fig.tight_layout()
    save_svg(fig, path)


# --- report pieces --------------------------------------------------------

def multilabel_rows(ps: PredictionSet) -> list[tuple]:
    m = multilabel_suite(ps)
    rows = [(k, m[k]) for k in ("mAP", "hamming", "ranking_loss", "coverage_error", "kendall_tau",
                                "tau_skipped")]
    rows.append(("macro_f1", macro_f1(ps)[0]))
    rows += [(f"ap_{name}", m["ap_per_class"][name]) for name in ps.class_names]
    return rows


def gate_table(model: HybridModel, samples: Sequence[WaferSample], batch_size: int = 256) -> list[dict]:
    """Mean ``|lam| G`` per class: averaged over channels, then over the samples carrying the class."""
    grids, labels = stack(samples)
    G = np.concatenate([model.gate_values(grids[i:i + batch_size]) for i in range(0, len(grids), batch_size)])
    per_sample = abs(float(model.params["qca.lam"][0])) * G.mean(axis=1)
    rows = []
    for c, name in enumerate(CLASSES):
        sel = labels[:, c] > 0.5
        n = int(sel.sum())
        rows.append({"class": name, "n_samples": n,
                     "mean_abs_lambda_G": float(per_sample[sel].mean()) if n else float("nan")})
    return rows


def write_eval_report(out_dir, ps: PredictionSet, n_bins: int = 15) -> dict:
    """multilabel.csv, calibration.csv and bins.csv for one prediction set."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ml = multilabel_rows(ps)
    write_csv(out / "multilabel.csv", SCHEMA["multilabel.csv"], ml)
    cal = calibration_suite(ps, n_bins=n_bins)
    write_csv(out / "calibration.csv", SCHEMA["calibration.csv"], list(cal.as_dict().items()))
    write_csv(out / "bins.csv", SCHEMA["bins.csv"],
              [(i, b.lo, b.hi, b.count, b.mean_confidence, b.accuracy) for i, b in enumerate(cal.bins)])
    return {"multilabel": dict(ml), "calibration": cal}


def risk_curves(ps: PredictionSet, critical: str = CRITICAL_CLASS, fp_cost: float = 1.0):
    """Selective, critical-class miss-rate and FP-cost curves.

    A set without any critical positive gets an all-NaN miss curve (listed as
    skipped) rather than an error, so small smoke sets still report.
    """
    try:
        miss = catastrophic_miss_rate(ps, critical, THRESHOLD_GRID)
    except ValueError:
        name = ps.class_names[ps.class_index(critical)]
        log.warning("no %s positives; miss-rate curve left empty", name)
        miss = RiskCurve(f"miss_rate_{name}", THRESHOLD_GRID, np.full(len(THRESHOLD_GRID), np.nan), [name])
    return {
        "selective": selective_prediction(ps, COVERAGE_GRID),
        "miss_rate": miss,
        "fp_cost": expected_fp_cost(ps, fp_cost, THRESHOLD_GRID),
    }


def write_risk_report(out_dir, ps: PredictionSet, critical: str = CRITICAL_CLASS, fp_cost: float = 1.0,
                      plot: bool = True) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rc = risk_curves(ps, critical, fp_cost)
    sel = rc["selective"]
    write_csv(out / "selective.csv", SCHEMA["selective.csv"],
              [(q, n_retained(q, ps.N), v) for q, v in zip(sel.grid, sel.values)])
    write_csv(out / "miss_rate.csv", SCHEMA["miss_rate.csv"], zip(rc["miss_rate"].grid, rc["miss_rate"].values))
    write_csv(out / "fp_cost.csv", SCHEMA["fp_cost.csv"], zip(rc["fp_cost"].grid, rc["fp_cost"].values))
    if plot:
        plot_curves(out / "selective.svg", {"model": sel}, "coverage", "macro-F1", "Selective prediction")
        plot_curves(out / "miss_rate.svg", {"model": rc["miss_rate"]}, "threshold", "miss rate",
                    f"{critical} miss rate")
        plot_curves(out / "fp_cost.svg", {"model": rc["fp_cost"]}, "threshold", "cost per wafer",
                    "Expected false-positive cost")
    return rc


def write_history(path, hist: TrainHistory) -> None:
    write_csv(path, SCHEMA["history.csv"], list(hist.rows()))


def check_risk_invariants(rc: dict) -> list[str]:
    """Names of violated monotonicity invariants (empty when all hold)."""
    bad = []
    if np.any(np.diff(rc["miss_rate"].values) < 0):
        bad.append("miss rate must be nondecreasing in threshold")
    if np.any(np.diff(rc["fp_cost"].values) > 0):
        bad.append("FP cost must be nonincreasing in threshold")
    return bad


# --- ablation -------------------------------------------------------------

@dataclass
class ModelReport:
    name: str
    history: TrainHistory
    scores: PredictionSet
    multilabel: dict
    calibration: object
    complexity: list
    curves: dict
    gates: Optional[list] = None
    model: Optional[HybridModel] = None


@dataclass
class AblationResult:
    classical: ModelReport
    hybrid: ModelReport
    violations: list = field(default_factory=list)


def _run_one(name, cfg, train_set, val_set, test_set, tc, seed, out, fp_cost, progress) -> ModelReport:
    model = build_model(cfg, Rng(seed))
    hist = train(model, train_set, val_set, tc, progress=progress)
    ps = evaluate(model, test_set)
    d = out / name if out is not None else None
    if d is not None:
        rep = write_eval_report(d, ps)
        rc = write_risk_report(d, ps, fp_cost=fp_cost, plot=False)
        write_history(d / "history.csv", hist)
    else:
        rep = {"multilabel": dict(multilabel_rows(ps)), "calibration": calibration_suite(ps)}
        rc = risk_curves(ps, fp_cost=fp_cost)
    comp = complexity_breakdown(ps)
    gates = gate_table(model, test_set) if cfg.use_qca else None
    if d is not None:
        write_csv(d / "complexity.csv", SCHEMA["complexity.csv"], comp)
        if gates is not None:
            write_csv(d / "gates.csv", SCHEMA["gates.csv"], gates)
    return ModelReport(name, hist, ps, rep["multilabel"], rep["calibration"], comp, rc, gates, model)


def ablation_run(train_set, val_set, test_set, cfg: ModelConfig, tc: TrainConfig, seed: int = 42,
                 out_dir=None, fp_cost: float = 1.0, progress: bool = False) -> AblationResult:
    """Train classical and hybrid models that differ only in ``use_qca``, from the same seeds.

    Both runs see the same batch order (it depends on ``tc.seed`` alone). With
    ``out_dir`` every table is written under ``classical/`` and ``hybrid/``,
    plus ``comparison.csv`` and overlaid SVG curves at the top level.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    reps = {}
    for name, use_qca in (("classical", False), ("hybrid", True)):
        reps[name] = _run_one(name, replace(cfg, use_qca=use_qca), train_set, val_set, test_set, tc, seed,
                              out, fp_cost, progress)
    c, h = reps["classical"], reps["hybrid"]
    violations = [f"{r.name}: {v}" for r in (c, h) for v in check_risk_invariants(r.curves)]
    if out is not None:
        rows = [(k, c.multilabel[k], h.multilabel[k]) for k in c.multilabel]
        rows += [(k, getattr(c.calibration, k), getattr(h.calibration, k)) for k in c.calibration.as_dict()]
        write_csv(out / "comparison.csv", SCHEMA["comparison.csv"], rows)
        plot_reliability(out / "reliability.svg", {"classical": c.calibration.bins, "hybrid": h.calibration.bins})
        for key, xl, yl, title in (("selective", "coverage", "macro-F1", "Selective prediction"),
                                   ("miss_rate", "threshold", "miss rate", f"{CRITICAL_CLASS} miss rate"),
                                   ("fp_cost", "threshold", "cost per wafer", "Expected false-positive cost")):
            plot_curves(out / f"{key}.svg", {"classical": c.curves[key], "hybrid": h.curves[key]}, xl, yl, title)
    for v in violations:
        log.warning("risk curve invariant violated: %s", v)
    return AblationResult(c, h, violations)
