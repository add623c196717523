"""Dataset ingestion: LIBSVM parsing, binary cache, splits, partitions, scaling."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

CACHE_MAGIC = b"MDD1"


class ParseError(ValueError):
    """Malformed LIBSVM input. ``line`` is 1-based (0 when not line specific)."""

    def __init__(self, message: str, line: int = 0):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        X = np.array(self.features, dtype=np.float64, order="C")
        y = np.array(self.targets, dtype=np.float64).reshape(-1)
        if X.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {X.shape}")
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"{X.shape[0]} feature rows but {y.shape[0]} targets")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("dataset contains NaN or Inf")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "targets", y)

    @property
    def N(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.features[idx], self.targets[idx])


@dataclass(frozen=True)
class Partition:
    shards: tuple
    seed: int

    @property
    def m(self) -> int:
        return len(self.shards)

    def sizes(self) -> list[int]:
        return [len(s) for s in self.shards]


def parse_libsvm(text: Union[bytes, str]) -> Dataset:
    """Parse ``label idx:val ...`` lines into a dense :class:`Dataset`.

    Indices are 1-based and must strictly increase within a line. Columns
    never mentioned are zero; ``d`` is the largest index seen.
    """
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"input is not UTF-8: {exc}") from exc

    labels: list[float] = []
    rows: list[tuple[list[int], list[float]]] = []
    d = 0
    for line_no, raw in enumerate(text.splitlines(), start=1):
        # trailing comments are common in LIBSVM dumps
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            label = float(parts[0])
        except ValueError:
            raise ParseError(f"invalid label {parts[0]!r}", line_no) from None
        cols: list[int] = []
        vals: list[float] = []
        prev = 0
        for tok in parts[1:]:
            idx_s, sep, val_s = tok.partition(":")
            if not sep:
                raise ParseError(f"token {tok!r} is not idx:val", line_no)
            try:
                idx = int(idx_s)
                val = float(val_s)
            except ValueError:
                raise ParseError(f"invalid token {tok!r}", line_no) from None
            if idx < 1:
                raise ParseError(f"index {idx} must be >= 1", line_no)
            if idx <= prev:
                raise ParseError(f"index {idx} does not increase (previous {prev})", line_no)
            if not np.isfinite(val):
                raise ParseError(f"non-finite value in {tok!r}", line_no)
            prev = idx
            cols.append(idx - 1)
            vals.append(val)
        if not np.isfinite(label):
            raise ParseError(f"non-finite label {parts[0]!r}", line_no)
        d = max(d, prev)
        labels.append(label)
        rows.append((cols, vals))

    if not rows:
        raise ParseError("empty input: no samples")

    X = np.zeros((len(rows), d))
    for r, (cols, vals) in enumerate(rows):
        X[r, cols] = vals
    return Dataset(X, np.array(labels))


def format_libsvm(ds: Dataset) -> str:
    """Serialize to LIBSVM text, omitting zero entries. Round-trips through
    :func:`parse_libsvm` except that trailing all-zero columns are lost."""
    out = io.StringIO()
    for x, y in zip(ds.features, ds.targets):
        toks = [repr(float(y))]
        toks.extend(f"{j + 1}:{float(v)!r}" for j, v in enumerate(x) if v != 0.0)
        out.write(" ".join(toks))
        out.write("\n")
    return out.getvalue()


def write_cache(ds: Dataset, path) -> None:
    """Flat binary cache: magic, N and d as int64 LE, row-major float64 features, targets."""
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<qq", ds.N, ds.d))
        fh.write(ds.features.astype("<f8").tobytes(order="C"))
        fh.write(ds.targets.astype("<f8").tobytes())


def read_cache(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != CACHE_MAGIC:
        raise ParseError(f"{path}: missing MDD1 magic")
    if len(raw) < 20:
        raise ParseError(f"{path}: truncated header")
    N, d = struct.unpack_from("<qq", raw, 4)
    expected = 20 + 8 * (N * d + N)
    if N < 1 or d < 0 or len(raw) != expected:
        raise ParseError(f"{path}: size {len(raw)} does not match N={N}, d={d}")
    body = np.frombuffer(raw, dtype="<f8", offset=20)
    return Dataset(body[: N * d].reshape(N, d).copy(), body[N * d :].copy())


def load_dataset(path) -> Dataset:
    """Read either a binary cache (detected by magic) or LIBSVM text."""
    raw = Path(path).read_bytes()
    if raw[:4] == CACHE_MAGIC:
        return read_cache(path)
    return parse_libsvm(raw)


def partition(ds_or_n, m: int, seed: int) -> Partition:
    """Random disjoint m-way partition: seeded permutation, then round-robin."""
    N = ds_or_n if isinstance(ds_or_n, (int, np.integer)) else ds_or_n.N
    if m < 1:
        raise ValueError(f"shard count m must be >= 1, got {m}")
    if m > N:
        raise ValueError(f"cannot split {N} samples into {m} shards")
    perm = np.random.default_rng(seed).permutation(N)
    return Partition(tuple(perm[i::m].copy() for i in range(m)), seed)


def split_indices(N: int, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    if N < 2:
        raise ValueError("need at least 2 samples to split")
    n_train = int(round(train_fraction * N))
    n_train = min(max(n_train, 1), N - 1)
    perm = np.random.default_rng(seed).permutation(N)
    return perm[:n_train], perm[n_train:]


def split_train_test(ds: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    tr, te = split_indices(ds.N, train_fraction, seed)
    return ds.subset(tr), ds.subset(te)


@dataclass(frozen=True)
class ScalingStats:
    mean: np.ndarray
    std: np.ndarray
    convention: str = field(default="population")

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "convention": self.convention}


def standardize(train: Dataset, test: Dataset) -> tuple[Dataset, Dataset, ScalingStats]:
    """Center and scale columns with the training set's population statistics.

    Zero-variance columns are only centered.
    """
    if train.N == 0:
        raise ValueError("cannot standardize an empty training set")
    mean = train.features.mean(axis=0)
    std = train.features.std(axis=0)
    scale = np.where(std > 0, std, 1.0)
    stats = ScalingStats(mean, std)
    return (
        Dataset((train.features - mean) / scale, train.targets),
        Dataset((test.features - mean) / scale, test.targets),
        stats,
    )


def shard_arrays(ds: Dataset, part: Partition) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-shard ``(X_i, y_i)`` with samples as rows."""
    out = []
    for idx in part.shards:
        if len(idx) == 0:
            raise ValueError("empty shard in partition")
        out.append((ds.features[idx], ds.targets[idx]))
    return out
