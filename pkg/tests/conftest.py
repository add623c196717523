import numpy as np
import pytest

from mddlearn.data import Dataset

_ACCEPTANCE_LINES: list[str] = []


def gaussian_elimination_solve(A, b):
    """Dense solve by Gaussian elimination with partial pivoting, in plain Python."""
    n = len(A)
    M = [list(map(float, A[i])) + [float(b[i])] for i in range(n)]
    for col in range(n):
        piv = max(range(col, n), key=lambda r: abs(M[r][col]))
        M[col], M[piv] = M[piv], M[col]
        for r in range(col + 1, n):
            f = M[r][col] / M[col][col]
            for c in range(col, n + 1):
                M[r][c] -= f * M[col][c]
    x = [0.0] * n
    for r in range(n - 1, -1, -1):
        s = M[r][n] - sum(M[r][c] * x[c] for c in range(r + 1, n))
        x[r] = s / M[r][r]
    return np.array(x)


def ridge_gd_oracle(X, y, lam, tol=1e-13, max_steps=200_000):
    """Minimize (1/N)||Xw - y||^2 + lam ||w||^2 by plain gradient descent."""
    N, d = X.shape
    # step from a power-iteration bound on the Hessian's top eigenvalue
    v = np.ones(d)
    for _ in range(500):
        v = X.T @ (X @ v) / N
        v /= np.linalg.norm(v)
    top = v @ (X.T @ (X @ v)) / N
    L = 2.0 * (top * 1.01 + lam)
    w = np.zeros(d)
    for _ in range(max_steps):
        g = 2.0 / N * (X.T @ (X @ w - y)) + 2.0 * lam * w
        if np.linalg.norm(g, np.inf) < tol:
            break
        w -= g / L
    return w


def random_spd(rng, n, cond_floor=0.1):
    B = rng.normal(size=(n, n))
    return B @ B.T + cond_floor * np.eye(n)


def synthetic_linear(seed, N=500, d=8, noise=0.5):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(N, d))
    w = rng.normal(size=d)
    return Dataset(X, X @ w + noise * rng.normal(size=N))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion, then assert."""

    def record(label, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] {label}" + (f" :: {detail}" if detail else "")
        _ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
