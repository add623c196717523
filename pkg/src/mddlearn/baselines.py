"""Global and divide-and-conquer ridge / kernel ridge trainers (RR, DRR, KRR, KDRR)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .data import Dataset, Partition, shard_arrays
from .linalg import KernelConfig, SpdFactor, kernel_matrix, linear_gram, solve, spd_factorize

# Global KRR above this many training samples is reported infeasible.
KRR_MAX_N = 20000


class InfeasibleError(RuntimeError):
    pass


@dataclass
class LinearModel:
    w: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.w)):
            raise ValueError("linear model has non-finite weights")

    @property
    def d(self) -> int:
        return self.w.shape[0]


@dataclass
class KernelShard:
    anchors: np.ndarray
    coeffs: np.ndarray

    def __post_init__(self):
        self.anchors = np.asarray(self.anchors, dtype=np.float64)
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64).reshape(-1)
        if self.anchors.ndim != 2 or self.anchors.shape[0] != self.coeffs.shape[0]:
            raise ValueError(
                f"{self.coeffs.shape[0]} coefficients for anchors of shape {self.anchors.shape}"
            )


@dataclass
class ShardedKernelModel:
    shards: list
    kernel: KernelConfig

    @property
    def m(self) -> int:
        return len(self.shards)

    @property
    def d(self) -> int:
        return self.shards[0].anchors.shape[1]


@dataclass
class LocalSystem:
    """One worker's regularized system ``A w = b`` with its cached factor and solution."""

    A: np.ndarray
    b: np.ndarray
    factor: SpdFactor
    w0: np.ndarray

    @classmethod
    def build(cls, A, b) -> "LocalSystem":
        f = spd_factorize(A)
        return cls(A, b, f, solve(f, b))


def average(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Uniform mean, summed in index order so results are reproducible bit for bit."""
    acc = np.zeros_like(np.asarray(vectors[0], dtype=np.float64))
    for v in vectors:
        acc += v
    return acc / len(vectors)


def linear_systems(shards, lam: float) -> list[LocalSystem]:
    return [LocalSystem.build(*linear_gram(X.T, y, lam)) for X, y in shards]


def kernel_system(K: np.ndarray, y: np.ndarray, lam: float) -> LocalSystem:
    if not lam > 0:
        raise ValueError(f"ridge parameter must be positive, got {lam}")
    n = K.shape[0]
    if n < 1:
        raise ValueError("shard has no samples")
    A = K / n
    A[np.diag_indices(n)] += lam
    return LocalSystem.build(A, np.asarray(y, dtype=np.float64) / n)


def train_rr(ds: Dataset, lam: float) -> LinearModel:
    if ds.N == 0:
        raise ValueError("empty dataset")
    return LinearModel(linear_systems([(ds.features, ds.targets)], lam)[0].w0)


def train_drr(ds: Dataset, part: Partition, lam: float) -> tuple[LinearModel, list[LinearModel]]:
    systems = linear_systems(shard_arrays(ds, part), lam)
    locals_ = [LinearModel(s.w0) for s in systems]
    return LinearModel(average([s.w0 for s in systems])), locals_


def train_krr(ds: Dataset, lam: float, cfg: KernelConfig, max_n: int = KRR_MAX_N) -> ShardedKernelModel:
    if ds.N > max_n:
        raise InfeasibleError(f"global KRR on {ds.N} samples exceeds the limit of {max_n}")
    X = ds.features
    sys = kernel_system(kernel_matrix(X, X, cfg), ds.targets, lam)
    return ShardedKernelModel([KernelShard(X, sys.w0)], cfg)


def train_kdrr(ds: Dataset, part: Partition, lam: float, cfg: KernelConfig) -> ShardedKernelModel:
    shards = []
    for X, y in shard_arrays(ds, part):
        sys = kernel_system(kernel_matrix(X, X, cfg), y, lam)
        shards.append(KernelShard(X, sys.w0))
    return ShardedKernelModel(shards, cfg)


def predict(model: Union[LinearModel, ShardedKernelModel], X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != model.d:
        raise ValueError(f"model expects {model.d} features, got {X.shape[1]}")
    if isinstance(model, LinearModel):
        return X @ model.w
    parts = [kernel_matrix(X, s.anchors, model.kernel) @ s.coeffs for s in model.shards]
    return average(parts)


@dataclass
class ModelRecord:
    """A trained model plus the metadata written to model JSON.

    Linear kinds store one ``w`` per shard and predict with their average;
    kernel kinds store ``anchors`` and ``coeffs`` per shard.
    """

    kind: str
    lam: float
    model: Union[LinearModel, ShardedKernelModel]
    shard_models: Optional[list] = None
    extra: dict = field(default_factory=dict)

    @property
    def is_kernel(self) -> bool:
        return isinstance(self.model, ShardedKernelModel)

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "lambda": self.lam}
        if self.is_kernel:
            out["sigma"] = self.model.kernel.sigma
            out["shards"] = [
                {"anchors": s.anchors.tolist(), "coeffs": s.coeffs.tolist()} for s in self.model.shards
            ]
        else:
            ws = self.shard_models or [self.model]
            out["shards"] = [{"w": lm.w.tolist()} for lm in ws]
        out.update(self.extra)
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelRecord":
        try:
            kind = doc["kind"]
            lam = float(doc["lambda"])
            shards = doc["shards"]
        except KeyError as exc:
            raise ValueError(f"model JSON missing field {exc}") from None
        if not shards:
            raise ValueError("model JSON has no shards")
        extra = {k: v for k, v in doc.items() if k not in ("kind", "lambda", "sigma", "shards")}
        if "coeffs" in shards[0]:
            if "sigma" not in doc:
                raise ValueError("kernel model JSON missing field 'sigma'")
            model = ShardedKernelModel(
                [KernelShard(s["anchors"], s["coeffs"]) for s in shards], KernelConfig(float(doc["sigma"]))
            )
            return cls(kind, lam, model, None, extra)
        ws = [LinearModel(s["w"]) for s in shards]
        return cls(kind, lam, LinearModel(average([lm.w for lm in ws])), ws, extra)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "ModelRecord":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))
