"""Max-diversity distributed training in linear space and in an RKHS.

Every worker keeps its round-0 ridge solution ``w0_i`` and, each round,
moves away from the leave-one-out average of the other workers:
``w_i = w0_i - gamma * A_i^{-1} loo_i``. The ``gamma`` here is the
coefficient used by the iteration itself; as a penalty weight in the
local objective it corresponds to ``2 * gamma``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .baselines import (
    KernelShard,
    LinearModel,
    LocalSystem,
    ShardedKernelModel,
    average,
    kernel_system,
    linear_systems,
)
from .linalg import FastApplyUnavailable, KernelConfig, fast_inverse_apply, kernel_matrix, solve
from .paramserver import RoundEngine, run

SOLVER_MODES = ("exact", "fast-lemma4")
TRACE_HEADER = ["t", "consensus_delta", "diversity", "floats_pushed", "floats_pulled", "elapsed_s"]

# consecutive growing rounds of the consensus delta before giving up
DIVERGENCE_PATIENCE = 5


class DivergenceError(RuntimeError):
    def __init__(self, message: str, trace=None):
        self.trace = trace or []
        super().__init__(message)


@dataclass(frozen=True)
class TrainConfig:
    lam: float
    gamma: float
    zeta: float = 1e-6
    m: Optional[int] = None
    max_iters: int = 100
    solver_mode: str = "exact"
    sigma: Optional[float] = None

    def __post_init__(self):
        if not (self.lam > 0 and np.isfinite(self.lam)):
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if not (self.gamma >= 0 and np.isfinite(self.gamma)):
            raise ValueError(f"gamma must be nonnegative, got {self.gamma}")
        if not self.zeta > 0:
            raise ValueError(f"zeta must be positive, got {self.zeta}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.solver_mode not in SOLVER_MODES:
            raise ValueError(f"solver_mode must be one of {SOLVER_MODES}, got {self.solver_mode!r}")
        if self.m is not None and self.m < 2:
            raise ValueError("MDD requires m >= 2")
        if self.sigma is not None and not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


@dataclass(frozen=True)
class RoundTrace:
    t: int
    consensus_delta: float
    diversity: float
    floats_pushed: int
    floats_pulled: int
    elapsed_s: float
    fallbacks: tuple = ()


@dataclass
class MDDResult:
    model: object
    shard_models: Optional[list]
    trace: list
    status: str
    setup_floats: int
    history: Optional[list] = None

    @property
    def rounds(self) -> int:
        return len(self.trace)

    @property
    def floats_comm(self) -> int:
        """Every float moved: the initial push plus all per-round pulls and pushes."""
        if not self.trace:
            return self.setup_floats
        last = self.trace[-1]
        return self.setup_floats + last.floats_pushed + last.floats_pulled

    @property
    def fallback_events(self) -> list[tuple[int, int]]:
        return [(r.t, i) for r in self.trace for i in r.fallbacks]


def loo_average(mean, member, m: int) -> np.ndarray:
    """Average of the other ``m - 1`` members, recovered from the full mean."""
    if m < 2:
        raise ValueError("leave-one-out average needs m >= 2")
    return (m * np.asarray(mean, dtype=np.float64) - member) / (m - 1)


def diversity_linear(models: Sequence) -> float:
    """``(1/m^2) * sum_{i != j} ||w_i - w_j||^2`` (the bound's constant factor dropped)."""
    ws = [np.asarray(getattr(mdl, "w", mdl), dtype=np.float64) for mdl in models]
    m = len(ws)
    if m < 2:
        raise ValueError("diversity needs at least two models")
    return float(pairwise_sq_distances_linear(ws).sum() / m**2)


def pairwise_sq_distances_linear(ws: Sequence) -> np.ndarray:
    W = np.vstack([np.asarray(getattr(w, "w", w), dtype=np.float64) for w in ws])
    sq = np.einsum("ij,ij->i", W, W)
    D = sq[:, None] + sq[None, :] - 2.0 * (W @ W.T)
    np.fill_diagonal(D, 0.0)
    return np.maximum(D, 0.0)


def _rkhs_sq_distances(ws, ghat) -> np.ndarray:
    # ghat[i][j] = K_ij @ w_j, so w_i . ghat[i][j] = <f_i, f_j>
    m = len(ws)
    G = np.empty((m, m))
    for i in range(m):
        for j in range(m):
            G[i, j] = ws[i] @ ghat[i][j]
    diag = np.diag(G)
    D = diag[:, None] + diag[None, :] - G - G.T
    np.fill_diagonal(D, 0.0)
    return D


def rkhs_sq_distances(expansions: Sequence, cfg: KernelConfig) -> np.ndarray:
    """Squared RKHS distances between kernel expansions given as ``(anchors, coeffs)`` pairs."""
    ws = [np.asarray(c, dtype=np.float64) for _, c in expansions]
    ghat = [[kernel_matrix(a_i, a_j, cfg) @ ws[j] for j, (a_j, _) in enumerate(expansions)]
            for a_i, _ in expansions]
    return _rkhs_sq_distances(ws, ghat)


def diversity_rkhs(model: ShardedKernelModel) -> float:
    m = model.m
    if m < 2:
        raise ValueError("diversity needs at least two shards")
    D = rkhs_sq_distances([(s.anchors, s.coeffs) for s in model.shards], model.kernel)
    return float(D.sum() / m**2)


class _Workers:
    """Worker-side state shared by both iterations: round-0 solutions and factors."""

    def __init__(self, systems: Sequence[LocalSystem], gamma: float, solver_mode: str):
        self.systems = systems
        self.gamma = gamma
        self.fast = solver_mode == "fast-lemma4"
        self.fallbacks: set[int] = set()

    def direction(self, i: int, pulled: np.ndarray) -> np.ndarray:
        s = self.systems[i]
        if self.fast:
            try:
                return fast_inverse_apply(s.w0, s.b, pulled)
            except FastApplyUnavailable:
                self.fallbacks.add(i)
        return solve(s.factor, pulled)

    def __call__(self, i: int, pulled: np.ndarray) -> np.ndarray:
        return self.systems[i].w0 - self.gamma * self.direction(i, pulled)

    def drain(self) -> tuple:
        out = tuple(sorted(self.fallbacks))
        self.fallbacks.clear()
        return out


class _Server:
    """Serial server step shared by both iterations; subclasses define the aggregate."""

    def __init__(self, m: int, zeta: float, keep_history: bool):
        self.m = m
        self.zeta = zeta
        self.deltas: list[float] = []
        self.diversities: list[float] = []
        self.fallbacks: list[tuple] = []
        self.history = [] if keep_history else None
        self.rising = 0
        self.workers: Optional[_Workers] = None

    def _check(self, delta: float):
        if not np.isfinite(delta):
            raise DivergenceError("diverging (gamma too large): non-finite iterate")
        if self.deltas and delta > self.deltas[-1]:
            self.rising += 1
        else:
            self.rising = 0
        self.deltas.append(delta)
        if self.rising >= DIVERGENCE_PATIENCE:
            raise DivergenceError(
                f"diverging (gamma too large): consensus delta grew for {self.rising} rounds"
            )


class _LinearServer(_Server):
    def __init__(self, w0s, zeta, keep_history):
        super().__init__(len(w0s), zeta, keep_history)
        self.ws = list(w0s)
        self.wbar = average(self.ws)

    def pulls(self) -> list:
        return [loo_average(self.wbar, w, self.m) for w in self.ws]

    def __call__(self, pushes):
        prev = self.wbar
        self.ws = list(pushes)
        self.wbar = average(self.ws)
        delta = float(np.linalg.norm(self.wbar - prev))
        self.diversities.append(diversity_linear(self.ws))
        self.fallbacks.append(self.workers.drain())
        self._check(delta)
        if delta <= self.zeta:
            loos = None
            stop = True
        else:
            loos = self.pulls()
            stop = False
        if self.history is not None:
            self.history.append({"w": list(self.ws), "mean": self.wbar, "loo": loos})
        return loos, stop


class _KernelServer(_Server):
    def __init__(self, blocks, w0s, zeta, keep_history):
        super().__init__(len(w0s), zeta, keep_history)
        self.blocks = blocks
        self.ws = list(w0s)
        self._aggregate()

    def _aggregate(self):
        m = self.m
        self.ghat = [[self.blocks[i][j] @ self.ws[j] for j in range(m)] for i in range(m)]
        self.gbar = [average(row) for row in self.ghat]

    def pulls(self) -> list:
        return [loo_average(self.gbar[i], self.ghat[i][i], self.m) for i in range(self.m)]

    def __call__(self, pushes):
        prev = self.gbar
        self.ws = list(pushes)
        self._aggregate()
        delta = sum(float(np.linalg.norm(g - p)) for g, p in zip(self.gbar, prev)) / self.m
        self.diversities.append(float(_rkhs_sq_distances(self.ws, self.ghat).sum() / self.m**2))
        self.fallbacks.append(self.workers.drain())
        self._check(delta)
        if delta <= self.zeta:
            loos = None
            stop = True
        else:
            loos = self.pulls()
            stop = False
        if self.history is not None:
            self.history.append({"w": list(self.ws), "gbar": list(self.gbar), "ghat_self":
                                 [self.ghat[i][i] for i in range(self.m)], "loo": loos})
        return loos, stop


def _drive(server: _Server, workers: _Workers, cfg: TrainConfig, threads):
    server.workers = workers
    engine = RoundEngine(server.m, workers, server, threads=threads)
    try:
        _, stats = run(engine, server.pulls(), cfg.max_iters)
    except DivergenceError as exc:
        exc.trace = _trace(server, engine.trace)
        raise
    trace = _trace(server, stats)
    converged = bool(server.deltas) and server.deltas[-1] <= cfg.zeta
    return trace, "converged" if converged else "max_iters_reached"


def _trace(server: _Server, stats) -> list[RoundTrace]:
    return [
        RoundTrace(s.t, server.deltas[k], server.diversities[k], s.floats_pushed, s.floats_pulled,
                   s.elapsed_s, server.fallbacks[k])
        for k, s in enumerate(stats)
    ]


def _check_shards(shards, cfg: TrainConfig) -> int:
    m = len(shards)
    if m < 2:
        raise ValueError("MDD requires m >= 2")
    if cfg.m is not None and cfg.m != m:
        raise ValueError(f"config says m={cfg.m} but {m} shards were given")
    for i, (X, y) in enumerate(shards):
        if len(y) < 1:
            raise ValueError(f"shard {i} is empty")
    return m


def iterate_linear(systems: Sequence[LocalSystem], cfg: TrainConfig, threads=None,
                   keep_history: bool = False) -> MDDResult:
    """Run the linear iteration on prepared per-shard systems (factored once, reused across gamma)."""
    m = len(systems)
    if m < 2:
        raise ValueError("MDD requires m >= 2")
    w0s = [s.w0 for s in systems]
    server = _LinearServer(w0s, cfg.zeta, keep_history)
    workers = _Workers(systems, cfg.gamma, cfg.solver_mode)
    trace, status = _drive(server, workers, cfg, threads)
    shard_models = [LinearModel(w) for w in server.ws]
    setup = sum(w.size for w in w0s)
    return MDDResult(LinearModel(server.wbar), shard_models, trace, status, setup, server.history)


def mdd_ls_train(shards, cfg: TrainConfig, threads=None, keep_history: bool = False) -> MDDResult:
    """Linear-space max-diversity training.

    ``shards`` is a sequence of ``(X_i, y_i)`` with samples as rows of
    ``X_i``. The result's ``model`` is the average of the final per-shard
    weights and ``trace`` holds one :class:`RoundTrace` per round.
    """
    _check_shards(shards, cfg)
    return iterate_linear(linear_systems(shards, cfg.lam), cfg, threads, keep_history)


class KernelProblem:
    """Kernel blocks between all shard pairs for one bandwidth; factor per lambda on demand."""

    def __init__(self, shards, kernel: KernelConfig):
        self.shards = [(np.asarray(X, dtype=np.float64), np.asarray(y, dtype=np.float64)) for X, y in shards]
        self.kernel = kernel
        m = len(self.shards)
        blocks = [[None] * m for _ in range(m)]
        for i in range(m):
            Xi = self.shards[i][0]
            blocks[i][i] = kernel_matrix(Xi, Xi, kernel)
            for j in range(i + 1, m):
                blocks[i][j] = kernel_matrix(Xi, self.shards[j][0], kernel)
                blocks[j][i] = blocks[i][j].T
        self.blocks = blocks

    def systems(self, lam: float) -> list[LocalSystem]:
        return [kernel_system(self.blocks[i][i], y, lam) for i, (_, y) in enumerate(self.shards)]

    def iterate(self, systems, cfg: TrainConfig, threads=None, keep_history=False) -> MDDResult:
        m = len(systems)
        if m < 2:
            raise ValueError("MDD requires m >= 2")
        w0s = [s.w0 for s in systems]
        server = _KernelServer(self.blocks, w0s, cfg.zeta, keep_history)
        workers = _Workers(systems, cfg.gamma, cfg.solver_mode)
        trace, status = _drive(server, workers, cfg, threads)
        model = ShardedKernelModel(
            [KernelShard(X, w) for (X, _), w in zip(self.shards, server.ws)], self.kernel
        )
        setup = sum(w.size for w in w0s)
        return MDDResult(model, None, trace, status, setup, server.history)


def mdd_rkhs_train(shards, cfg: TrainConfig, kernel: Optional[KernelConfig] = None, threads=None,
                   keep_history: bool = False) -> MDDResult:
    """Kernel (RKHS) max-diversity training; the server keeps all cross-shard kernel blocks."""
    _check_shards(shards, cfg)
    if kernel is None:
        if cfg.sigma is None:
            raise ValueError("kernel bandwidth required: pass kernel or set cfg.sigma")
        kernel = KernelConfig(cfg.sigma)
    problem = KernelProblem(shards, kernel)
    return problem.iterate(problem.systems(cfg.lam), cfg, threads, keep_history)


def format_trace_csv(trace: Sequence[RoundTrace]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_HEADER)
    for r in trace:
        writer.writerow([r.t, repr(r.consensus_delta), repr(r.diversity), r.floats_pushed,
                         r.floats_pulled, f"{r.elapsed_s:.6f}"])
    return buf.getvalue()


def write_trace_csv(trace: Sequence[RoundTrace], path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(format_trace_csv(trace))
