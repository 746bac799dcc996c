"""Command-line entry point: ``hqmv generate|train|eval|ablate|riskcurves|gradcheck``."""
from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path

from .numcore import Rng
from .wafersynth import (
    DatasetConfig,
    generate_dataset,
    load_archive,
    load_native,
    load_profile_csv,
    save_archive,
    save_native,
    split_dataset,
    write_manifest,
)

log = logging.getLogger("hqmv")

ARCHIVE_SUFFIXES = (".npz", ".zip")
CHECKPOINT_NAME = "model.hqmv"


def load_dataset(path):
    """WFR1 native file, or a zip-of-NPY archive for ``.npz``/``.zip`` paths."""
    path = Path(path)
    if path.suffix.lower() in ARCHIVE_SUFFIXES:
        return load_archive(path)
    return load_native(path)


def save_dataset(path, samples) -> None:
    path = Path(path)
    if path.suffix.lower() in ARCHIVE_SUFFIXES:
        save_archive(path, samples)
    else:
        save_native(path, samples)


def default_split(n: int) -> tuple[int, int, int]:
    """Train/val/test sizes: 3000/600/600 for the default dataset, 5:1:1 for small ones."""
    val = min(600, n // 7)
    train = min(3000, n - 2 * val)
    if train < 1 or val < 1:
        raise ValueError(f"dataset of {n} samples is too small to split")
    return train, val, val


def split_paths(out: Path) -> dict[str, Path]:
    return {part: out.with_name(f"{out.stem}.{part}{out.suffix}") for part in ("train", "val", "test")}


@contextlib.contextmanager
def thread_limit(deterministic: bool):
    """Cap BLAS/OpenMP pools at ``HQMV_THREADS`` workers; one worker in deterministic mode.

    A single worker fixes the reduction order inside matrix products, so
    results are bitwise stable across machines with different core counts.
    """
    env = os.environ.get("HQMV_THREADS")
    limit = 1 if deterministic else (int(env) if env else None)
    if limit is None:
        yield
        return
    if limit < 1:
        raise ValueError("HQMV_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=limit):
        yield


# --- subcommands ----------------------------------------------------------

def cmd_generate(args) -> int:
    profile = None if args.profile == "default" else load_profile_csv(args.profile)
    cfg = DatasetConfig(H=args.size[0], W=args.size[1], noise=args.noise, seed=args.seed,
                        **({} if profile is None else {"profile": profile}))
    samples = generate_dataset(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(out, samples)
    print(f"wrote {len(samples)} samples to {out}")
    if args.manifest:
        write_manifest(args.manifest, samples)
    if args.split:
        parts = split_dataset(samples, args.split, args.seed)
        for (name, path), part in zip(split_paths(out).items(), parts):
            save_dataset(path, part)
            print(f"wrote {len(part)} {name} samples to {path}")
    return 0


def cmd_train(args) -> int:
    from .harness.model import ModelConfig, build_model
    from .harness.reports import write_history
    from .harness.training import TrainConfig, save_checkpoint, train

    samples = load_dataset(args.data)
    if args.val:
        train_set, val_set, test_set = samples, load_dataset(args.val), []
    else:
        train_set, val_set, test_set = split_dataset(samples, default_split(len(samples)), args.seed)
    H, W = train_set[0].grid.shape
    cfg = ModelConfig(H=H, W=W, use_qca=args.hybrid, lora=tuple(args.lora) if args.lora else None)
    tc = TrainConfig(epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, seed=args.seed,
                     deterministic=args.deterministic)
    model = build_model(cfg, Rng(args.seed))
    with thread_limit(args.deterministic):
        hist = train(model, train_set, val_set, tc, progress=not args.quiet)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / CHECKPOINT_NAME, model)
    write_history(out / "history.csv", hist)
    if test_set:
        save_native(out / "test.wfr1", test_set)
    print(f"saved {out / CHECKPOINT_NAME} ({model.n_params(trainable_only=True)} trainable parameters)")
    return 0


def _load_model(model_dir):
    from .harness.training import load_checkpoint

    p = Path(model_dir)
    return load_checkpoint(p / CHECKPOINT_NAME if p.is_dir() else p)


def cmd_eval(args) -> int:
    from .harness.reports import write_eval_report
    from .harness.training import evaluate

    model = _load_model(args.model)
    with thread_limit(args.deterministic):
        ps = evaluate(model, load_dataset(args.data))
    rep = write_eval_report(args.report, ps)
    ml = rep["multilabel"]
    print(f"mAP {ml['mAP']:.4f}  macro-F1 {ml['macro_f1']:.4f}  hamming {ml['hamming']:.4f}  "
          f"ECE {rep['calibration'].ece:.4f}")
    return 0


def cmd_riskcurves(args) -> int:
    from .harness.reports import check_risk_invariants, write_risk_report
    from .harness.training import evaluate

    model = _load_model(args.model)
    with thread_limit(args.deterministic):
        ps = evaluate(model, load_dataset(args.data))
    rc = write_risk_report(args.report, ps, critical=args.critical, fp_cost=args.fp_cost)
    bad = check_risk_invariants(rc)
    for b in bad:
        print(f"invariant violated: {b}", file=sys.stderr)
    print(f"wrote risk curves to {args.report}")
    return 1 if bad else 0


def cmd_ablate(args) -> int:
    from .harness.model import ModelConfig
    from .harness.reports import ablation_run
    from .harness.training import TrainConfig

    samples = load_dataset(args.data)
    sizes = tuple(args.split) if args.split else default_split(len(samples))
    train_set, val_set, test_set = split_dataset(samples, sizes, args.seed)
    H, W = samples[0].grid.shape
    tc = TrainConfig(epochs=args.epochs, seed=args.seed, deterministic=args.deterministic)
    with thread_limit(args.deterministic):
        res = ablation_run(train_set, val_set, test_set, ModelConfig(H=H, W=W), tc, seed=args.seed,
                           out_dir=args.report, fp_cost=args.fp_cost, progress=not args.quiet)
    for r in (res.classical, res.hybrid):
        print(f"{r.name:9s} mAP {r.multilabel['mAP']:.4f}  macro-F1 {r.multilabel['macro_f1']:.4f}  "
              f"MCE {r.calibration.mce:.4f}")
    for v in res.violations:
        print(f"invariant violated: {v}", file=sys.stderr)
    return 1 if res.violations else 0


def cmd_gradcheck(args) -> int:
    from .harness.gradsuite import run_suite, tolerance

    ok = True
    for res in run_suite(full=args.full, seed=args.seed):
        worst = res.reports[0]
        status = "PASS" if res.ok else "FAIL"
        print(f"{status} {res.name}: {len(res.reports)} tensors, worst {worst.param_name} "
              f"rel err {worst.max_rel_err:.2e}")
        for r in res.failures:
            print(f"  {r.param_name}: {r.max_rel_err:.2e} > {tolerance(r.param_name):.0e}")
        ok &= res.ok
    return 0 if ok else 1


# --- parser ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hqmv", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--deterministic", action="store_true", help="single-threaded BLAS reductions")
        p.add_argument("--quiet", action="store_true", help="no per-epoch progress lines")

    p = sub.add_parser("generate", help="write a synthetic wafer-map dataset")
    p.add_argument("--out", required=True, help="output path (.wfr1 native, .npz archive)")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--size", type=int, nargs=2, default=(26, 26), metavar=("H", "W"))
    p.add_argument("--profile", default="default", help="'default' or a kinds,count CSV")
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--split", type=int, nargs=3, metavar=("TRAIN", "VAL", "TEST"),
                   help="also write shuffled train/val/test parts next to OUT")
    p.add_argument("--manifest", help="write a sample_id,label_bits,defect_count CSV")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model and save a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--val", help="validation file; default splits DATA")
    p.add_argument("--out", required=True, help="model directory")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--hybrid", dest="hybrid", action="store_true", default=True)
    mode.add_argument("--classical", dest="hybrid", action="store_false")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lora", type=float, nargs=2, metavar=("R", "ALPHA"))
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="multilabel and calibration reports")
    p.add_argument("--model", required=True, help="model directory or checkpoint file")
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="output directory")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="paired classical vs hybrid study")
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--fp-cost", type=float, default=1.0)
    p.add_argument("--split", type=int, nargs=3, metavar=("TRAIN", "VAL", "TEST"))
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("riskcurves", help="selective, miss-rate and FP-cost curves")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--critical", default="Near_Full")
    p.add_argument("--fp-cost", type=float, default=1.0)
    p.add_argument("--report", required=True)
    common(p)
    p.set_defaults(func=cmd_riskcurves)

    p = sub.add_parser("gradcheck", help="finite-difference check of model gradients")
    p.add_argument("--full", action="store_true", help="also check the LoRA and classical variants")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"hqmv {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
