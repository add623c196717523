"""Command-line entry point: ``mddlearn {train,benchmark,diversity,cache}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from .baselines import ModelRecord, predict, train_drr, train_kdrr, train_krr, train_rr
from .evaluation import (
    KINDS,
    GAMMA_GRID,
    LAMBDA_GRID,
    SIGMA_GRID,
    Grids,
    Method,
    ProtocolCounter,
    format_report_csv,
    format_report_json,
    rmse,
    run_benchmark,
)
from .linalg import KernelConfig
from .mdd import (
    SOLVER_MODES,
    DivergenceError,
    TrainConfig,
    diversity_linear,
    mdd_ls_train,
    mdd_rkhs_train,
    pairwise_sq_distances_linear,
    rkhs_sq_distances,
    write_trace_csv,
)

log = logging.getLogger("mddlearn")


class UsageError(Exception):
    pass


def _grid(text: str) -> tuple:
    try:
        vals = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}: expected comma-separated numbers") from None
    if not vals:
        raise argparse.ArgumentTypeError("grid is empty")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mddlearn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--data", required=True, type=Path, help="LIBSVM text or MDD1 binary cache")
        sp.add_argument("--m", type=int, default=5, help="number of workers / shards")
        sp.add_argument("--zeta", type=float, default=1e-6, help="MDD stopping threshold")
        sp.add_argument("--max-iters", type=int, default=100)
        sp.add_argument("--solver", choices=SOLVER_MODES, default="exact")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--standardize", action="store_true", help="scale features with training statistics")

    tr = sub.add_parser("train", help="fit one method and write model JSON (+ trace CSV for MDD)")
    common(tr)
    tr.add_argument("--method", required=True, choices=KINDS)
    tr.add_argument("--lambda", dest="lam", type=float, default=1e-3)
    tr.add_argument("--gamma", type=float, default=1e-2)
    tr.add_argument("--sigma", type=float, default=1.0)
    tr.add_argument("--test", type=Path, help="optional test set; prints RMSE")
    tr.add_argument("--output", type=Path, default=Path("."), help="output directory")
    tr.add_argument("--model-out", type=Path, help="model JSON path (default OUTPUT/model.json)")
    tr.add_argument("--trace-out", type=Path, help="trace CSV path (default OUTPUT/trace.csv)")

    bm = sub.add_parser("benchmark", help="repeated 70/30 splits with CV, as in the evaluation protocol")
    common(bm)
    bm.add_argument("--methods", default="rr,drr,mdd-ls",
                    help="comma list; 'drr' uses --m, 'drr-10' pins m=10")
    bm.add_argument("--trials", type=int, default=30)
    bm.add_argument("--train-fraction", type=float, default=0.7)
    bm.add_argument("--folds", type=int, default=5)
    bm.add_argument("--lambda-grid", type=_grid, default=LAMBDA_GRID)
    bm.add_argument("--gamma-grid", type=_grid, default=GAMMA_GRID)
    bm.add_argument("--sigma-grid", type=_grid, default=SIGMA_GRID)
    bm.add_argument("--output", type=Path, default=Path("report"),
                    help="prefix; writes PREFIX.csv and PREFIX.json")
    bm.add_argument("--dry-run", action="store_true", help="count protocol work without fitting")

    dv = sub.add_parser("diversity", help="empirical diversity of two or more saved models")
    dv.add_argument("models", nargs="+", type=Path)

    ca = sub.add_parser("cache", help="convert LIBSVM text to the MDD1 binary cache")
    ca.add_argument("source", type=Path)
    ca.add_argument("dest", type=Path)
    return p


def _validate(args):
    if getattr(args, "m", 1) < 1:
        raise UsageError("--m must be >= 1")
    if getattr(args, "max_iters", 1) < 1:
        raise UsageError("--max-iters must be >= 1")
    if getattr(args, "zeta", 1.0) <= 0:
        raise UsageError("--zeta must be positive")
    if args.command == "train":
        if args.lam <= 0:
            raise UsageError("--lambda must be positive")
        if args.gamma < 0:
            raise UsageError("--gamma must be nonnegative")
        if args.sigma <= 0:
            raise UsageError("--sigma must be positive")
        if args.method.startswith("mdd") and args.m < 2:
            raise UsageError("MDD requires m >= 2")
    if args.command == "benchmark":
        if args.trials < 1:
            raise UsageError("--trials must be >= 1")
        if not 0 < args.train_fraction < 1:
            raise UsageError("--train-fraction must lie in (0, 1)")
        if args.folds < 2:
            raise UsageError("--folds must be >= 2")
        if any(v <= 0 for v in args.lambda_grid + args.sigma_grid) or any(v < 0 for v in args.gamma_grid):
            raise UsageError("grids must hold positive lambda/sigma and nonnegative gamma")


def _load(path: Path) -> data_mod.Dataset:
    try:
        return data_mod.load_dataset(path)
    except FileNotFoundError:
        raise UsageError(f"cannot read dataset {path}") from None


def cmd_train(args) -> int:
    ds = _load(args.data)
    test = _load(args.test) if args.test else None
    if args.standardize:
        ds, scaled_test, _ = data_mod.standardize(ds, test if test is not None else ds)
        test = scaled_test if test is not None else None
    if test is not None and test.d != ds.d:
        # LIBSVM files drop trailing zero columns; pad the narrower one
        d = max(ds.d, test.d)
        ds, test = _pad(ds, d), _pad(test, d)
    method = args.method
    if method in ("drr", "kdrr") or method.startswith("mdd"):
        if args.m > ds.N:
            raise UsageError(f"--m {args.m} exceeds the {ds.N} training samples")
    cfg_k = KernelConfig(args.sigma)
    extra = {"m": args.m, "seed": args.seed}
    trace = None
    if method == "rr":
        rec = ModelRecord("rr", args.lam, train_rr(ds, args.lam), extra={})
    elif method == "krr":
        rec = ModelRecord("krr", args.lam, train_krr(ds, args.lam, cfg_k), extra={})
    else:
        part = data_mod.partition(ds, args.m, args.seed)
        if method == "drr":
            avg, shards = train_drr(ds, part, args.lam)
            rec = ModelRecord("drr", args.lam, avg, shards, extra)
        elif method == "kdrr":
            rec = ModelRecord("kdrr", args.lam, train_kdrr(ds, part, args.lam, cfg_k), extra=extra)
        else:
            cfg = TrainConfig(lam=args.lam, gamma=args.gamma, zeta=args.zeta, m=args.m,
                              max_iters=args.max_iters, solver_mode=args.solver)
            shards = data_mod.shard_arrays(ds, part)
            if method == "mdd-ls":
                res = mdd_ls_train(shards, cfg)
            else:
                res = mdd_rkhs_train(shards, cfg, cfg_k)
            extra.update(gamma=args.gamma, solver_mode=args.solver, rounds=res.rounds, status=res.status,
                         floats_comm=res.floats_comm, fallbacks=[list(e) for e in res.fallback_events])
            rec = ModelRecord(method, args.lam, res.model, res.shard_models, extra)
            trace = res.trace
            if res.status != "converged":
                log.warning("stopped after %d rounds without meeting zeta=%g", res.rounds, args.zeta)

    args.output.mkdir(parents=True, exist_ok=True)
    model_path = args.model_out or args.output / "model.json"
    rec.save(model_path)
    print(f"model written to {model_path}")
    if trace is not None:
        trace_path = args.trace_out or args.output / "trace.csv"
        write_trace_csv(trace, trace_path)
        print(f"trace written to {trace_path} ({len(trace)} rounds, {rec.extra['status']})")
    print(f"train RMSE {rmse(predict(rec.model, ds.features), ds.targets):.6g}")
    if test is not None:
        print(f"test RMSE {rmse(predict(rec.model, test.features), test.targets):.6g}")
    return 0


def _pad(ds, d):
    if ds.d == d:
        return ds
    X = np.zeros((ds.N, d))
    X[:, : ds.d] = ds.features
    return data_mod.Dataset(X, ds.targets)


def cmd_benchmark(args) -> int:
    try:
        methods = [Method.parse(s, args.m) for s in args.methods.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if not methods:
        raise UsageError("--methods is empty")
    grids = Grids(args.lambda_grid, args.gamma_grid, args.sigma_grid)
    counter = ProtocolCounter(dry_run=args.dry_run)
    if args.dry_run and not args.data.exists():
        raise UsageError(f"cannot read dataset {args.data}")
    ds = _load(args.data)
    reports = run_benchmark(ds, methods, args.trials, args.train_fraction, args.seed, args.folds, grids,
                            args.standardize, args.zeta, args.max_iters, args.solver, counter=counter,
                            progress=log.info)
    if args.dry_run:
        print(f"trials={counter.trials} folds_per_cv={args.folds} cv_runs={counter.folds // args.folds} "
              f"cells={counter.cells}")
        for label, sizes in counter.grid_sizes.items():
            print(f"  {label}: lambda={sizes['lambda']} gamma={sizes['gamma']} sigma={sizes['sigma']} "
                  f"cells={sizes['cells']}")
        return 0
    out = args.output
    out.parent.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out.with_name(out.name + ".csv"), out.with_name(out.name + ".json")
    csv_path.write_text(format_report_csv(reports))
    meta = {"trials": args.trials, "train_fraction": args.train_fraction, "folds": args.folds,
            "seed": args.seed, "standardize": args.standardize}
    json_path.write_text(format_report_json(reports, meta))
    for rep in reports:
        print(f"{rep.method:<12} rmse {rep.mean:.6g} +- {rep.std:.3g}  "
              f"fit {np.nanmean(rep.time_s) if any(map(math.isfinite, rep.time_s)) else float('nan'):.3g}s")
    print(f"report written to {csv_path} and {json_path}")
    failed = [r.method for r in reports if all(e is not None for e in r.errors)]
    return 1 if failed and len(failed) == len(reports) else 0


def cmd_diversity(args) -> int:
    if len(args.models) < 2:
        raise UsageError("diversity needs at least two models")
    try:
        recs = [ModelRecord.load(p) for p in args.models]
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot load model: {exc}") from None
    kinds = {r.is_kernel for r in recs}
    if len(kinds) > 1:
        raise UsageError("cannot mix linear and kernel models")
    if recs[0].is_kernel:
        sigmas = {r.model.kernel.sigma for r in recs}
        if len(sigmas) > 1:
            raise UsageError(f"kernel models use different bandwidths {sorted(sigmas)}")
        dims = {r.model.d for r in recs}
        if len(dims) > 1:
            raise UsageError(f"models have different feature dimensions {sorted(dims)}")
        expansions = []
        for r in recs:
            mm = r.model.m
            expansions.append((np.vstack([s.anchors for s in r.model.shards]),
                               np.concatenate([s.coeffs / mm for s in r.model.shards])))
        D = rkhs_sq_distances(expansions, recs[0].model.kernel)
    else:
        dims = {r.model.d for r in recs}
        if len(dims) > 1:
            raise UsageError(f"models have different feature dimensions {sorted(dims)}")
        D = pairwise_sq_distances_linear([r.model.w for r in recs])
    div = diversity_linear([r.model for r in recs]) if not recs[0].is_kernel else float(D.sum() / len(recs) ** 2)
    print(f"diversity {div:.12g}")
    print("pairwise squared distances:")
    for i, row in enumerate(D):
        print(f"  [{i}] " + " ".join(f"{v:.6g}" for v in row))
    return 0


def cmd_cache(args) -> int:
    ds = _load(args.source)
    data_mod.write_cache(ds, args.dest)
    print(f"wrote {ds.N} x {ds.d} dataset to {args.dest}")
    return 0


COMMANDS = {"train": cmd_train, "benchmark": cmd_benchmark, "diversity": cmd_diversity, "cache": cmd_cache}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _validate(args)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"mddlearn: error: {exc}", file=sys.stderr)
        return 2
    except data_mod.ParseError as exc:
        print(f"mddlearn: error: {exc}", file=sys.stderr)
        return 2
    except (DivergenceError, ArithmeticError, RuntimeError, ValueError, OSError, np.linalg.LinAlgError) as exc:
        print(f"mddlearn: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
