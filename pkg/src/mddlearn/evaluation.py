"""Metrics, grid-search cross-validation, repeated-split benchmarking and Welch's t-test."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
from scipy import special

from . import data as data_mod
from .baselines import (
    KRR_MAX_N,
    InfeasibleError,
    KernelShard,
    LinearModel,
    LocalSystem,
    ShardedKernelModel,
    average,
    kernel_system,
    predict,
)
from .data import Dataset
from .linalg import KernelConfig, kernel_matrix
from .mdd import DivergenceError, KernelProblem, TrainConfig, iterate_linear

log = logging.getLogger(__name__)

LAMBDA_GRID = tuple(10.0**i for i in range(-6, 4))
GAMMA_GRID = tuple(10.0**i for i in range(-6, 4))
SIGMA_GRID = tuple(2.0**i for i in range(-10, 11))

KINDS = ("rr", "drr", "krr", "kdrr", "mdd-ls", "mdd-rkhs")
_LABELS = {"rr": "RR", "drr": "DRR", "krr": "KRR", "kdrr": "KDRR", "mdd-ls": "MDD-LS", "mdd-rkhs": "MDD-RKHS"}
REPORT_HEADER = ["method", "trial", "rmse", "time_s", "floats_comm", "lambda", "gamma", "sigma"]


def rmse(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: {pred.shape[0]} predictions, {target.shape[0]} targets")
    if pred.size == 0:
        raise ValueError("rmse of an empty vector")
    diff = pred - target
    return math.sqrt(float(diff @ diff) / diff.size)


@dataclass(frozen=True)
class Method:
    kind: str
    m: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown method {self.kind!r}; choose from {', '.join(KINDS)}")
        if self.distributed and self.m < 1:
            raise ValueError("shard count must be >= 1")
        if self.kind.startswith("mdd") and self.m < 2:
            raise ValueError("MDD requires m >= 2")

    @property
    def distributed(self) -> bool:
        return self.kind not in ("rr", "krr")

    @property
    def kernel(self) -> bool:
        return self.kind in ("krr", "kdrr", "mdd-rkhs")

    @property
    def uses_gamma(self) -> bool:
        return self.kind.startswith("mdd")

    @property
    def label(self) -> str:
        base = _LABELS[self.kind]
        return f"{base}-{self.m}" if self.distributed else base

    @classmethod
    def parse(cls, text: str, default_m: int = 5) -> "Method":
        """``drr`` uses ``default_m``; ``drr-10`` pins ``m = 10``."""
        text = text.strip().lower()
        head, _, tail = text.rpartition("-")
        if head and tail.isdigit():
            return cls(head, int(tail))
        if text in ("rr", "krr"):
            return cls(text)
        return cls(text, default_m)


@dataclass(frozen=True)
class Grids:
    lambdas: tuple = LAMBDA_GRID
    gammas: tuple = GAMMA_GRID
    sigmas: tuple = SIGMA_GRID

    def __post_init__(self):
        for name in ("lambdas", "gammas", "sigmas"):
            if len(getattr(self, name)) == 0:
                raise ValueError(f"grid {name} is empty")

    def cells(self, method: Method) -> list[dict]:
        """Every hyperparameter combination the method searches, in evaluation order."""
        sig = self.sigmas if method.kernel else (None,)
        gam = self.gammas if method.uses_gamma else (None,)
        return [{"lambda": l, "gamma": g, "sigma": s} for s, l, g in itertools.product(sig, self.lambdas, gam)]


@dataclass
class ProtocolCounter:
    """Tallies protocol work; with ``dry_run`` set, no model is fitted."""

    dry_run: bool = False
    trials: int = 0
    splits: int = 0
    folds: int = 0
    cells: int = 0
    final_fits: int = 0
    grid_sizes: dict = field(default_factory=dict)


@dataclass
class FitOutcome:
    model: object
    floats_comm: int
    rounds: int = 0


def _fold_indices(N: int, k: int, seed: int) -> list[np.ndarray]:
    if k < 2:
        raise ValueError(f"need at least 2 folds, got {k}")
    if k > N:
        raise ValueError(f"cannot make {k} folds from {N} samples")
    perm = np.random.default_rng(seed).permutation(N)
    return [np.sort(f) for f in np.array_split(perm, k)]


def kfold_indices(N: int, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    folds = _fold_indices(N, k, seed)
    out = []
    for i, val in enumerate(folds):
        tr = np.concatenate([f for j, f in enumerate(folds) if j != i])
        out.append((tr, val))
    return out


def _mdd_cfg(method, lam, gamma, zeta, max_iters, solver_mode):
    return TrainConfig(lam=lam, gamma=gamma, zeta=zeta, m=method.m, max_iters=max_iters, solver_mode=solver_mode)


def _linear_shard_stats(shards):
    # lambda-independent pieces of each local system
    out = []
    for X, y in shards:
        n = X.shape[0]
        out.append(((X.T @ X) / n, (X.T @ y) / n))
    return out


def _linear_local(stats, lam):
    systems = []
    for G, c in stats:
        A = G.copy()
        A[np.diag_indices(A.shape[0])] += lam
        systems.append(LocalSystem.build(A, c))
    return systems


class _Evaluator:
    """Scores every grid cell for one (train, validation) pair, sharing work across cells.

    Gram/kernel blocks are built once per bandwidth and factored once per
    lambda; the gamma sweep reuses those factors.
    """

    def __init__(self, method: Method, train: Dataset, seed: int, zeta: float, max_iters: int,
                 solver_mode: str, krr_max_n: int = KRR_MAX_N):
        self.method = method
        self.train = train
        self.seed = seed
        self.zeta = zeta
        self.max_iters = max_iters
        self.solver_mode = solver_mode
        self.krr_max_n = krr_max_n
        if method.distributed:
            self.part = data_mod.partition(train, method.m, seed)
            self.shards = data_mod.shard_arrays(train, self.part)
        else:
            self.part = None
            self.shards = [(train.features, train.targets)]

    def fits(self, lambdas, gammas, sigmas):
        """Yield ``(params, FitOutcome or exception)`` in the same order as :meth:`Grids.cells`."""
        kind = self.method.kind
        if not self.method.kernel:
            stats = _linear_shard_stats(self.shards)
            for lam in lambdas:
                systems = _linear_local(stats, lam)
                if kind == "mdd-ls":
                    for g in gammas:
                        yield {"lambda": lam, "gamma": g, "sigma": None}, self._mdd_linear(systems, lam, g)
                else:
                    w = systems[0].w0 if kind == "rr" else average([s.w0 for s in systems])
                    comm = 0 if kind == "rr" else sum(s.w0.size for s in systems)
                    yield {"lambda": lam, "gamma": None, "sigma": None}, FitOutcome(LinearModel(w), comm)
            return
        if kind == "krr" and self.train.N > self.krr_max_n:
            err = InfeasibleError(f"global KRR on {self.train.N} samples exceeds the limit of {self.krr_max_n}")
            for s in sigmas:
                for lam in lambdas:
                    yield {"lambda": lam, "gamma": None, "sigma": s}, err
            return
        for s in sigmas:
            cfg = KernelConfig(s)
            if kind == "mdd-rkhs":
                problem = KernelProblem(self.shards, cfg)
                for lam in lambdas:
                    systems = problem.systems(lam)
                    for g in gammas:
                        yield {"lambda": lam, "gamma": g, "sigma": s}, self._mdd_kernel(problem, systems, lam, g)
                continue
            blocks = [kernel_matrix(X, X, cfg) for X, _ in self.shards]
            for lam in lambdas:
                shards = [KernelShard(X, kernel_system(K, y, lam).w0) for K, (X, y) in zip(blocks, self.shards)]
                comm = 0 if kind == "krr" else sum(sh.coeffs.size for sh in shards)
                yield {"lambda": lam, "gamma": None, "sigma": s}, FitOutcome(ShardedKernelModel(shards, cfg), comm)

    def _mdd_linear(self, systems, lam, gamma):
        try:
            res = iterate_linear(systems, _mdd_cfg(self.method, lam, gamma, self.zeta, self.max_iters, self.solver_mode), threads=1)
        except DivergenceError as exc:
            return exc
        return FitOutcome(res.model, res.floats_comm, res.rounds)

    def _mdd_kernel(self, problem, systems, lam, gamma):
        try:
            res = problem.iterate(systems, _mdd_cfg(self.method, lam, gamma, self.zeta, self.max_iters, self.solver_mode), threads=1)
        except DivergenceError as exc:
            return exc
        return FitOutcome(res.model, res.floats_comm, res.rounds)


class _KernelPredictor:
    """Caches query-to-anchor kernel blocks per bandwidth for repeated validation."""

    def __init__(self, X):
        self.X = X
        self._cache: dict = {}

    def __call__(self, model) -> np.ndarray:
        if isinstance(model, LinearModel):
            return self.X @ model.w
        key = model.kernel.sigma
        if key not in self._cache:
            self._cache = {key: [kernel_matrix(self.X, s.anchors, model.kernel) for s in model.shards]}
        blocks = self._cache[key]
        return average([K @ s.coeffs for K, s in zip(blocks, model.shards)])


def _sort_key(params: dict, score: float):
    return (score, params["lambda"], params["gamma"] or 0.0, params["sigma"] or 0.0)


@dataclass
class CVResult:
    best: dict
    best_score: float
    scores: list  # (params, mean held-out rmse) in evaluation order
    last_error: Optional[Exception] = None


def kfold_cv(train: Dataset, method: Method, grids: Grids = Grids(), k: int = 5, seed: int = 0,
             zeta: float = 1e-6, max_iters: int = 100, solver_mode: str = "exact",
             krr_max_n: int = KRR_MAX_N, counter: Optional[ProtocolCounter] = None) -> CVResult:
    """Exhaustive grid search minimizing mean held-out RMSE over ``k`` folds.

    Diverged or infeasible cells score ``+inf``. Ties go to the smaller
    lambda, then gamma, then sigma.
    """
    folds = kfold_indices(train.N, k, seed)
    cells = grids.cells(method)
    if counter is not None:
        counter.grid_sizes[method.label] = {
            "lambda": len(grids.lambdas),
            "gamma": len(grids.gammas) if method.uses_gamma else 0,
            "sigma": len(grids.sigmas) if method.kernel else 0,
            "cells": len(cells),
        }
    totals = np.zeros(len(cells))
    last_error = None
    for tr_idx, val_idx in folds:
        if counter is not None:
            counter.folds += 1
            counter.cells += len(cells)
            if counter.dry_run:
                continue
        fold_train, fold_val = train.subset(tr_idx), train.subset(val_idx)
        ev = _Evaluator(method, fold_train, seed, zeta, max_iters, solver_mode, krr_max_n)
        pred = _KernelPredictor(fold_val.features)
        for c, (params, out) in enumerate(ev.fits(grids.lambdas, grids.gammas, grids.sigmas)):
            if isinstance(out, Exception):
                totals[c] = math.inf
                last_error = out
                continue
            yhat = pred(out.model)
            totals[c] += rmse(yhat, fold_val.targets) if np.all(np.isfinite(yhat)) else math.inf
    if counter is not None and counter.dry_run:
        return CVResult(dict(cells[0]), math.nan, [])
    means = totals / k
    scores = list(zip(cells, means.tolist()))
    best_params, best_score = min(scores, key=lambda ps: _sort_key(*ps))
    return CVResult(dict(best_params), best_score, scores, last_error)


def fit_method(method: Method, train: Dataset, params: dict, seed: int, zeta: float = 1e-6,
               max_iters: int = 100, solver_mode: str = "exact", krr_max_n: int = KRR_MAX_N) -> FitOutcome:
    """Fit one method at fixed hyperparameters; shards come from ``partition(train, m, seed)``."""
    lam, gamma, sigma = params["lambda"], params.get("gamma"), params.get("sigma")
    ev = _Evaluator(method, train, seed, zeta, max_iters, solver_mode, krr_max_n)
    (_, out), = ev.fits([lam], [gamma if gamma is not None else 0.0], [sigma])
    if isinstance(out, Exception):
        raise out
    return out


@dataclass
class BenchmarkReport:
    method: str
    rmse: list = field(default_factory=list)
    time_s: list = field(default_factory=list)
    cv_time_s: list = field(default_factory=list)
    floats_comm: list = field(default_factory=list)
    params: list = field(default_factory=list)
    errors: list = field(default_factory=list)

    @property
    def trials(self) -> int:
        return len(self.rmse)

    def _ok(self) -> np.ndarray:
        r = np.asarray(self.rmse, dtype=np.float64)
        return r[np.isfinite(r)]

    @property
    def mean(self) -> float:
        ok = self._ok()
        return float(ok.mean()) if ok.size else math.nan

    @property
    def std(self) -> float:
        """Sample (ddof=1) standard deviation over successful trials; 0 for a single trial."""
        ok = self._ok()
        if ok.size == 0:
            return math.nan
        return float(ok.std(ddof=1)) if ok.size > 1 else 0.0

    def to_dict(self) -> dict:
        def clean(v):
            return None if isinstance(v, float) and not math.isfinite(v) else v

        return {
            "method": self.method,
            "trials": self.trials,
            "rmse": [clean(v) for v in self.rmse],
            "rmse_mean": clean(self.mean),
            "rmse_std": clean(self.std),
            "time_s": [clean(v) for v in self.time_s],
            "cv_time_s": [clean(v) for v in self.cv_time_s],
            "floats_comm": [clean(v) for v in self.floats_comm],
            "params": self.params,
            "errors": self.errors,
        }


def trial_seed(master_seed: int, trial: int) -> int:
    return int(np.random.SeedSequence([master_seed, trial]).generate_state(1)[0])


def run_benchmark(ds: Dataset, methods: Sequence[Method], trials: int = 30, train_fraction: float = 0.7,
                  seed: int = 0, k: int = 5, grids: Grids = Grids(), standardize: bool = False,
                  zeta: float = 1e-6, max_iters: int = 100, solver_mode: str = "exact",
                  krr_max_n: int = KRR_MAX_N, counter: Optional[ProtocolCounter] = None,
                  progress: Optional[Callable[[str], None]] = None) -> list[BenchmarkReport]:
    """Repeated random 70/30 splits; per trial and method: CV on train, refit, test RMSE."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    methods = list(methods)
    reports = [BenchmarkReport(m.label) for m in methods]
    for trial in range(trials):
        ts = trial_seed(seed, trial)
        if counter is not None:
            counter.trials += 1
            counter.splits += 1
        train, test = data_mod.split_train_test(ds, train_fraction, ts)
        if standardize:
            train, test, _ = data_mod.standardize(train, test)
        for method, rep in zip(methods, reports):
            t0 = time.perf_counter()
            try:
                cv = kfold_cv(train, method, grids, k, ts, zeta, max_iters, solver_mode, krr_max_n, counter)
                cv_time = time.perf_counter() - t0
                if counter is not None and counter.dry_run:
                    continue
                if not math.isfinite(cv.best_score):
                    if isinstance(cv.last_error, InfeasibleError):
                        raise cv.last_error
                    raise RuntimeError("every grid cell diverged or was infeasible")
                t1 = time.perf_counter()
                fit = fit_method(method, train, cv.best, ts, zeta, max_iters, solver_mode, krr_max_n)
                yhat = predict(fit.model, test.features)
                fit_time = time.perf_counter() - t1
                if counter is not None:
                    counter.final_fits += 1
                rep.rmse.append(rmse(yhat, test.targets))
                rep.time_s.append(fit_time)
                rep.cv_time_s.append(cv_time)
                rep.floats_comm.append(int(fit.floats_comm))
                rep.params.append(cv.best)
                rep.errors.append(None)
            except Exception as exc:  # recorded per trial, other methods continue
                log.warning("%s trial %d failed: %s", method.label, trial, exc)
                rep.rmse.append(math.nan)
                rep.time_s.append(math.nan)
                rep.cv_time_s.append(time.perf_counter() - t0)
                rep.floats_comm.append(0)
                rep.params.append({"lambda": None, "gamma": None, "sigma": None})
                rep.errors.append(f"{type(exc).__name__}: {exc}")
            if progress is not None and rep.rmse:
                progress(f"trial {trial + 1}/{trials} {method.label}: rmse={rep.rmse[-1]:.6g}")
    return reports


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_report_csv(reports: Sequence[BenchmarkReport], include_time: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = REPORT_HEADER if include_time else [h for h in REPORT_HEADER if h != "time_s"]
    w.writerow(header)
    for rep in reports:
        for t in range(rep.trials):
            p = rep.params[t]
            row = [rep.method, t, _fmt(rep.rmse[t]), f"{rep.time_s[t]:.6f}", rep.floats_comm[t],
                   _fmt(p["lambda"]), _fmt(p["gamma"]), _fmt(p["sigma"])]
            if not include_time:
                del row[3]
            w.writerow(row)
    return buf.getvalue()


def format_report_json(reports: Sequence[BenchmarkReport], meta: Optional[dict] = None) -> str:
    doc = {"reports": [r.to_dict() for r in reports]}
    if meta:
        doc["meta"] = meta
    return json.dumps(doc, indent=2, allow_nan=False)


class WelchResult(NamedTuple):
    t: float
    p: float
    significant: bool
    df: float


def t_sf_two_sided(t: float, df: float) -> float:
    """Two-sided tail probability ``P(|T| >= |t|)`` for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))


def welch_t_test(a, b, alpha: float = 0.05) -> WelchResult:
    """Two-sided Welch unequal-variance t-test with Welch-Satterthwaite degrees of freedom."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least 2 observations")
    na, nb = a.size, b.size
    va, vb = a.var(ddof=1) / na, b.var(ddof=1) / nb
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0.0:
        if diff == 0.0:
            return WelchResult(0.0, 1.0, False, float(na + nb - 2))
        return WelchResult(math.copysign(math.inf, diff), 0.0, True, float(na + nb - 2))
    t = diff / math.sqrt(se2)
    df = se2**2 / (va**2 / (na - 1) + vb**2 / (nb - 1))
    p = t_sf_two_sided(t, df)
    return WelchResult(float(t), p, p < alpha, float(df))
