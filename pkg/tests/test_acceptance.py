"""The ten acceptance criteria, each at its stated tolerance, with one PASS/FAIL line apiece."""
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from acceptance_log import record
from hqmv.harness.gradsuite import run_suite, tolerance
from hqmv.harness.model import ModelConfig, build_model
from hqmv.harness.reports import SCHEMA, ablation_run, check_risk_invariants, read_csv
from hqmv.harness.training import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train
from hqmv.metrics import (
    EPS,
    average_precision,
    binary_cross_entropy,
    calibration_suite,
    catastrophic_miss_rate,
    expected_fp_cost,
    focal_loss,
    hamming_loss,
    macro_f1,
    multilabel_suite,
    selective_prediction,
)
from hqmv.numcore import Rng, phi1
from hqmv.peft import lora_forward, lora_init, lora_merge
from hqmv.qsim import CircuitParams, apply_cnot, apply_rotation, circuit_forward, circuit_grad, zero_state
from hqmv.ssm import MambaBlockParams, discretize, mamba_block_forward, selective_scan_chunked, selective_scan_seq
from hqmv.wafersynth import (
    ArchiveError,
    DatasetConfig,
    generate_dataset,
    load_archive,
    load_native,
    save_native,
    split_dataset,
    stack,
)
import oracles as bf

DATA = Path(__file__).parent / "data"
DESK_SPLIT = (3000, 600, 600)
DESK_TRAIN = TrainConfig(epochs=20, seed=42, deterministic=True)


def elapsed(t0):
    return time.perf_counter() - t0


# --- 1. quantum correctness -------------------------------------------------

def _fd_jacobians(phi, theta, n, eps=1e-6):
    L = theta.shape[0]

    def f(ph, th):
        return circuit_forward(ph, CircuitParams(n, L, th))

    jp = np.stack([(f(phi + eps * e, theta) - f(phi - eps * e, theta)) / (2 * eps) for e in np.eye(n)], axis=1)
    cols = []
    for q in range(theta.size):
        d = np.zeros(theta.size)
        d[q] = eps
        d = d.reshape(theta.shape)
        cols.append((f(phi, theta + d) - f(phi, theta - d)) / (2 * eps))
    jt = np.stack(cols, axis=1) if cols else np.zeros((n, 0))
    return jp, jt


def test_criterion_1_quantum_correctness():
    t0 = time.perf_counter()
    worst_fwd = worst_grad = 0.0
    for n in (1, 2, 3, 4):
        for L in (0, 1, 2, 3):
            for seed in range(5):
                rng = Rng(101, n, L, seed)
                phi = rng.uniform(-np.pi, np.pi, n)
                theta = rng.uniform(0, 2 * np.pi, (L, n, 3))
                got = circuit_forward(phi, CircuitParams(n, L, theta))
                worst_fwd = max(worst_fwd, float(np.max(np.abs(got - bf.dense_expectations(phi, theta, n)))))
                if seed < 2:
                    dphi, dth = circuit_grad(phi, CircuitParams(n, L, theta))
                    jp, jt = _fd_jacobians(phi, theta, n)
                    worst_grad = max(worst_grad, float(np.max(np.abs(dphi - jp))),
                                     float(np.max(np.abs(dth - jt))) if jt.size else 0.0)
    rng = Rng(102)
    s = zero_state(4)
    for _ in range(10_000):
        if rng.random() < 0.25:
            c, t = rng.gen.choice(4, 2, replace=False)
            s = apply_cnot(s, int(c), int(t))
        else:
            s = apply_rotation(s, "XYZ"[int(rng.integers(3))], int(rng.integers(4)), float(rng.uniform(-7, 7)))
    drift = abs(s.norm() - 1.0)
    dt = elapsed(t0)
    ok = worst_fwd <= 1e-12 and drift < 1e-12 and worst_grad <= 1e-6 and dt < 10
    record(1, ok, f"oracle err {worst_fwd:.1e}, norm drift {drift:.1e}, shift-vs-FD {worst_grad:.1e}, {dt:.1f}s")
    assert ok


# --- 2. embedding law ---------------------------------------------------------

def test_criterion_2_embedding_law():
    t0 = time.perf_counter()
    theta = np.linspace(-2 * np.pi, 2 * np.pi, 1000)
    z = circuit_forward(theta[:, None], CircuitParams(1, 0))[:, 0]
    err = float(np.max(np.abs(z - np.cos(theta))))
    dt = elapsed(t0)
    ok = err <= 1e-12 and dt < 1
    record(2, ok, f"max |<Z> - cos| {err:.1e} over 1000 angles, {dt:.3f}s")
    assert ok


# --- 3. SSM correctness -------------------------------------------------------

def test_criterion_3_ssm_correctness():
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(50):
        rng = Rng(303, i)
        L = 512 if i < 2 else int(rng.integers(1, 513))
        D, N = int(rng.integers(1, 17)), int(rng.integers(1, 17))
        chunk = int(rng.integers(1, 129))
        x = rng.normal((L, D))
        delta = np.exp(rng.uniform(np.log(1e-3), np.log(0.5), (L, D)))
        A = -np.exp(rng.normal((D, N), std=0.5))
        B, C = rng.normal((L, N)), rng.normal((L, N))
        seq = selective_scan_seq(x, delta, A, B, C)
        got = selective_scan_chunked(x, delta, A, B, C, chunk=chunk, method=("blocked", "segsum")[i % 2])
        worst = max(worst, float(np.max(np.abs(got - seq))))
    X = Rng(304).normal((2, 40, 6))
    identity = np.array_equal(mamba_block_forward(X, MambaBlockParams.zeros(6, 4)), X)
    # delta -> 0: a_d -> 1 and b_d / delta -> b, through phi1's Taylor branch
    limits = phi1(0.0) == 1.0
    for d in (1e-6, 1e-9, 1e-12, 1e-15):
        a_d, b_d = discretize(d, -3.0, 2.0)
        limits &= abs(a_d - 1.0) <= 3.0 * d * (1 + 1e-4) + 2.3e-16 and abs(b_d / d - 2.0) <= 1e-5
    a0, b0 = discretize(0.0, -3.0, 2.0)
    limits &= a0 == 1.0 and b0 == 0.0
    dt = elapsed(t0)
    ok = worst <= 1e-10 and identity and limits and dt < 10
    record(3, ok, f"chunked-vs-seq {worst:.1e} over 50 shapes (L<=512), zero block identity {identity}, "
                  f"delta->0 limits {limits}, {dt:.1f}s")
    assert ok


# --- 4. gradient suite --------------------------------------------------------

def test_criterion_4_gradient_suite():
    t0 = time.perf_counter()
    res = run_suite(full=False)[0]
    dt = elapsed(t0)
    classical = max(r.max_rel_err for r in res.reports if tolerance(r.param_name) == 1e-5)
    quantum = max(r.max_rel_err for r in res.reports if tolerance(r.param_name) == 1e-4)
    ok = res.ok and dt < 120 and len(res.reports) > 0
    record(4, ok, f"{len(res.reports)} tensors; classical max rel err {classical:.1e} (<=1e-5), "
                  f"adapter {quantum:.1e} (<=1e-4), {dt:.1f}s")
    assert ok, [(r.param_name, r.max_rel_err) for r in res.failures]


# --- 5. QCA identity at init --------------------------------------------------

def test_criterion_5_qca_identity_at_init():
    ds = generate_dataset(DatasetConfig(profile={("Center",): 4, ("Donut", "Scratch"): 4, (): 4}, seed=5))
    grids, labels = stack(ds)
    hy = build_model(ModelConfig(use_qca=True), Rng(42))
    cl = build_model(ModelConfig(use_qca=False), Rng(42))
    same_out = np.array_equal(hy.forward(grids), cl.forward(grids))
    same_loss = hy.loss_and_grads(grids, labels)[0] == cl.loss_and_grads(grids, labels)[0]
    same_scores = np.array_equal(evaluate(hy, ds).scores, evaluate(cl, ds).scores)
    ok = same_out and same_loss and same_scores and hy.params["qca.lam"][0] == 0.0
    record(5, ok, f"bitwise outputs {same_out}, losses {same_loss}, scores {same_scores}")
    assert ok


# --- 6. LoRA contract ---------------------------------------------------------

def test_criterion_6_lora_contract():
    rng = Rng(606)
    W0 = rng.normal((12, 10))
    ad = lora_init(12, 10, 4, 8.0, rng, W0=W0)
    x = rng.normal((5, 10))
    transparent = np.array_equal(lora_forward(x, ad), x @ W0.T)
    ad.B[:] = rng.normal(ad.B.shape)
    merge_err = float(np.max(np.abs(lora_forward(x, ad) - x @ lora_merge(ad).T)))
    ref_scale = lora_init(128, 128, 64, 128.0, rng).scale
    cfg = ModelConfig(H=16, W=16, D=8, N=4, n_blocks=2, lora=(2, 4.0))
    ds = generate_dataset(DatasetConfig(H=16, W=16, profile={("Center",): 20, ("Loc",): 20, (): 20}, seed=6))
    tr, va = split_dataset(ds, (48, 12), 6)
    model = build_model(cfg, Rng(6))
    base = build_model(replace(cfg, lora=None), Rng(6))
    init_same = np.array_equal(model.forward(stack(va)[0]), base.forward(stack(va)[0]))
    frozen = {k: model.params[k].copy() for k in model.frozen}
    train(model, tr, va, TrainConfig(epochs=3, batch_size=8))
    frozen_ok = all(np.array_equal(frozen[k], model.params[k]) for k in frozen)
    ok = transparent and init_same and merge_err <= 1e-12 and frozen_ok and ref_scale == 2.0
    record(6, ok, f"init transparency {transparent and init_same}, merge err {merge_err:.1e}, "
                  f"frozen base bitwise {frozen_ok} ({len(frozen)} tensors), alpha/r(64,128) = {ref_scale}")
    assert ok


# --- 7. metrics oracle equivalence --------------------------------------------

def _fixture(i):
    rng = Rng(2024, i)
    N, C = int(rng.integers(1, 9)), int(rng.integers(1, 5))
    S = rng.random((N, C))
    if i % 3 == 0:
        S = np.round(S * 4) / 4
    Y = (rng.random((N, C)) < 0.4).astype(float)
    return S, Y


def _close(a, b, tol=1e-12):
    a, b = float(a), float(b)
    if math.isnan(a) or math.isnan(b):
        return math.isnan(a) and math.isnan(b)
    return abs(a - b) <= tol


def test_criterion_7_metrics_oracles():
    from hqmv.metrics import PredictionSet

    t0 = time.perf_counter()
    bad = []
    grid = np.linspace(0, 1, 21)
    for i in range(200):
        S, Y = _fixture(i)
        ps = PredictionSet(S, Y, tuple(f"c{j}" for j in range(S.shape[1])))
        m = multilabel_suite(ps)
        checks = [("mAP", m["mAP"], bf.bf_map(S, Y)), ("hamming", m["hamming"], bf.bf_hamming(S, Y)),
                  ("ranking", m["ranking_loss"], bf.bf_ranking_loss(S, Y)),
                  ("coverage", m["coverage_error"], bf.bf_coverage(S, Y)),
                  ("kendall", m["kendall_tau"], bf.bf_kendall(S, Y))]
        for n_bins in (5, 15):
            got = calibration_suite(ps, n_bins=n_bins).as_dict()
            checks += [(f"cal.{k}", got[k], v) for k, v in bf.bf_calibration(S, Y, n_bins).items()]
        cov = [0.25, 0.5, 0.75, 1.0]
        checks += [("selective", a, b) for a, b in zip(selective_prediction(ps, cov).values,
                                                       bf.bf_selective(S, Y, cov))]
        for c in range(S.shape[1]):
            if Y[:, c].any():
                checks += [("miss", a, b) for a, b in zip(catastrophic_miss_rate(ps, c, grid).values,
                                                          bf.bf_miss_rate(S, Y, c, grid))]
            checks.append(("ap", average_precision(S[:, c], Y[:, c]), bf.bf_average_precision(S[:, c], Y[:, c])))
        checks += [("fp_cost", a, b) for a, b in zip(expected_fp_cost(ps, 2.0, grid).values,
                                                     bf.bf_fp_cost(S, Y, 2.0, grid))]
        checks.append(("focal", focal_loss(S, Y, 2.0), bf.bf_focal(S, Y, 2.0, 1.0, 1.0)))
        # gamma = 0, alpha = 1: cross-entropy of the positive labels; alpha unset: full BCE
        pos_ce = -np.mean(np.sum(Y * np.log(np.clip(S, EPS, 1 - EPS)), axis=1))
        checks.append(("focal.g0a1", focal_loss(S, Y, 0.0, alpha=1.0), pos_ce))
        checks.append(("focal.g0", focal_loss(S, Y, 0.0), binary_cross_entropy(S, Y)))
        bad += [(i, name, a, b) for name, a, b in checks if not _close(a, b)]
    v = focal_loss(np.array([[0.5]]), np.array([[1.0]]), gamma=2.0, alpha=1.0)
    dt = elapsed(t0)
    ok = not bad and abs(v - 0.173287) <= 5e-7 and dt < 30
    record(7, ok, f"200 fixtures, {len(bad)} mismatches, focal(p=0.5, gamma=2) = {v:.6f}, {dt:.1f}s")
    assert ok, bad[:5]


# --- 8/9. desk-scale run and paired ablation ----------------------------------

@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    """Default synthetic dataset, seed-42 split, and the paired classical/hybrid study on it."""
    t0 = time.perf_counter()
    ds = generate_dataset(DatasetConfig(seed=42))
    tr, va, te = split_dataset(ds, DESK_SPLIT, 42)
    out = tmp_path_factory.mktemp("ablation")
    res = ablation_run(tr, va, te, ModelConfig(), DESK_TRAIN, seed=42, out_dir=out)
    return dict(data=(tr, va, te), result=res, out=out, wall=elapsed(t0))


def test_criterion_8_desk_end_to_end(desk):
    tr, va, te = desk["data"]
    hyb = desk["result"].hybrid
    hist = hyb.history
    run_time = sum(hist.wall_time)
    f1, _ = macro_f1(hyb.scores)
    ham = hamming_loss(hyb.scores)
    # deterministic replay of the hybrid run from scratch
    t0 = time.perf_counter()
    replay = build_model(ModelConfig(), Rng(42))
    h2 = train(replay, tr, va, DESK_TRAIN)
    replay_time = elapsed(t0)
    same = h2.same_trajectory(hist) and np.array_equal(evaluate(replay, te).scores, hyb.scores.scores)
    ok = f1 >= 0.85 and ham <= 0.05 and same and run_time < 15 * 60
    record(8, ok, f"test macro-F1 {f1:.4f} (>=0.85), Hamming {ham:.4f} (<=0.05), bitwise replay {same}, "
                  f"{len(hist.train_loss)} epochs, train {run_time / 60:.1f} min, replay {replay_time / 60:.1f} min")
    assert ok


def test_criterion_9_directional_study(desk):
    res, out = desk["result"], desk["out"]
    problems = list(res.violations)
    for name in ("classical", "hybrid"):
        for fname in ("multilabel.csv", "calibration.csv", "bins.csv", "complexity.csv", "selective.csv",
                      "miss_rate.csv", "fp_cost.csv", "history.csv"):
            rows = read_csv(out / name / fname)
            if not rows or list(rows[0]) != SCHEMA[fname]:
                problems.append(f"{name}/{fname} header")
        comp = read_csv(out / name / "complexity.csv")
        if [int(r["defects"]) for r in comp] != [1, 2, 3, 4]:
            problems.append(f"{name} complexity levels")
    gates = read_csv(out / "hybrid" / "gates.csv")
    if len(gates) != 8 or list(gates[0]) != SCHEMA["gates.csv"]:
        problems.append("gate table")
    for svg in ("reliability.svg", "selective.svg", "miss_rate.svg", "fp_cost.svg"):
        if not (out / svg).exists():
            problems.append(svg)
    for r in (res.classical, res.hybrid):
        problems += [f"{r.name}: {v}" for v in check_risk_invariants(r.curves)]
    c, h = res.classical, res.hybrid
    ok = not problems
    record(9, ok, f"schema + monotonicity {'ok' if ok else problems}; mAP classical {c.multilabel['mAP']:.4f} "
                  f"vs hybrid {h.multilabel['mAP']:.4f}, MCE {c.calibration.mce:.4f} vs {h.calibration.mce:.4f}, "
                  f"|lambda| {abs(h.model.params['qca.lam'][0]):.3f}")
    assert ok


# --- 10. I/O round trips ------------------------------------------------------

def test_criterion_10_io_round_trips(tmp_path):
    ds = generate_dataset(DatasetConfig(profile={("Center",): 3, ("Edge_Ring", "Loc"): 3, (): 2}, seed=10))
    save_native(tmp_path / "a.wfr1", ds)
    back = load_native(tmp_path / "a.wfr1")
    save_native(tmp_path / "b.wfr1", back)
    native_ok = back == ds and (tmp_path / "a.wfr1").read_bytes() == (tmp_path / "b.wfr1").read_bytes()
    golden = load_native(DATA / "one_sample.wfr1")
    save_native(tmp_path / "g.wfr1", golden)
    native_ok &= (tmp_path / "g.wfr1").read_bytes() == (DATA / "one_sample.wfr1").read_bytes()

    model = build_model(ModelConfig(), Rng(10))
    model.params["qca.lam"][:] = 0.3
    save_checkpoint(tmp_path / "m.hqmv", model)
    ckpt_ok = np.array_equal(evaluate(load_checkpoint(tmp_path / "m.hqmv"), ds).scores, evaluate(model, ds).scores)

    arch = load_archive(DATA / "three_samples.npz")
    archive_ok = [s.kinds for s in arch] == [("Donut",), ("Edge_Loc", "Scratch"), ()]
    import io
    import struct
    import zipfile

    buf = io.BytesIO()
    np.save(buf, np.ones((1, 8, 8), np.uint8))
    raw = buf.getvalue()
    lab = io.BytesIO()
    np.save(lab, np.ones((1, 8), np.uint8))
    positioned = []
    for bad, off in ((b"\x93NUMPX" + raw[6:], 0), (raw[:6] + b"\x09\x00" + raw[8:], 6),
                     (raw[:8] + struct.pack("<H", 60000) + raw[10:], 10)):
        with zipfile.ZipFile(tmp_path / "bad.npz", "w") as zf:
            zf.writestr("arr_0.npy", bad)
            zf.writestr("arr_1.npy", lab.getvalue())
        try:
            load_archive(tmp_path / "bad.npz")
            positioned.append(False)
        except ArchiveError as e:
            positioned.append(e.record == "arr_0" and e.offset == off and f"@ byte {off}" in str(e))
    ok = native_ok and ckpt_ok and archive_ok and all(positioned)
    record(10, ok, f"WFR1 bitwise {native_ok}, checkpoint scores identical {ckpt_ok}, fixture archive {archive_ok}, "
                   f"malformed headers rejected at offsets {all(positioned)}")
    assert ok
