import numpy as np
import pytest

from mddlearn.paramserver import RoundEngine, WorkerError, run


class CountingPayload:
    """Mock payload whose np.size is instrumented."""

    def __init__(self, n):
        self.n = n

    def __array__(self, dtype=None, copy=None):
        return np.zeros(self.n)


def test_stop_after_first_round():
    calls = []
    engine = RoundEngine(3, lambda i, p: calls.append(i) or np.ones(4), lambda pushes: (None, True))
    _, trace = run(engine, [np.ones(4)] * 3, max_iters=10)
    assert sorted(calls) == [0, 1, 2]
    assert len(trace) == 1
    assert trace[0].floats_pushed == 12 and trace[0].floats_pulled == 12


@pytest.mark.parametrize("m, d, T", [(1, 3, 4), (4, 7, 5), (10, 1, 3)])
def test_counts_are_exact(m, d, T):
    rounds = {"n": 0}

    def server(pushes):
        rounds["n"] += 1
        return [np.zeros(d)] * m, rounds["n"] >= T

    engine = RoundEngine(m, lambda i, p: np.zeros(d), server)
    _, trace = run(engine, [np.zeros(d)] * m, max_iters=100)
    assert len(trace) == T
    assert trace[-1].floats_pushed == T * m * d
    assert trace[-1].floats_pulled == T * m * d
    assert [r.floats_pushed for r in trace] == [(t + 1) * m * d for t in range(T)]


def test_counts_match_mock_payload_sizes():
    sizes = [3, 5, 2]
    engine = RoundEngine(
        3,
        lambda i, p: CountingPayload(sizes[i] * 2),
        lambda pushes: ([CountingPayload(s) for s in sizes], False),
    )
    _, trace = run(engine, [CountingPayload(s) for s in sizes], max_iters=4)
    assert trace[-1].floats_pulled == 4 * sum(sizes)
    assert trace[-1].floats_pushed == 4 * 2 * sum(sizes)


def test_max_iters_caps_rounds():
    engine = RoundEngine(2, lambda i, p: p, lambda pushes: (pushes, False))
    _, trace = run(engine, [np.ones(1), np.ones(1)], max_iters=7)
    assert len(trace) == 7 and engine.rounds == 7


def test_echo_protocol_identity(rng):
    init = [rng.normal(size=5) for _ in range(4)]
    engine = RoundEngine(4, lambda i, p: p.copy(), lambda pushes: (pushes, False))
    final, _ = run(engine, init, max_iters=9)
    for a, b in zip(final, init):
        np.testing.assert_array_equal(a, b)


def test_worker_failure_names_worker():
    def worker(i, p):
        if i == 2:
            raise ZeroDivisionError("boom")
        return p

    engine = RoundEngine(4, worker, lambda pushes: (pushes, False))
    with pytest.raises(WorkerError) as err:
        run(engine, [np.ones(1)] * 4, max_iters=3)
    assert err.value.worker == 2


def test_scheduling_independence(rng):
    init = [rng.normal(size=6) for _ in range(5)]
    W = rng.normal(size=(6, 6)) * 0.2

    def make():
        def server(pushes):
            mean = sum(pushes) / len(pushes)
            return [mean + 0.01 * i for i in range(5)], False

        return RoundEngine(5, lambda i, p: np.tanh(W @ p + i), server)

    results = []
    for threads in (1, 5):
        engine = make()
        engine.threads = threads
        final, trace = run(engine, init, max_iters=20)
        results.append((final, [(r.t, r.floats_pushed, r.floats_pulled) for r in trace]))
    for a, b in zip(results[0][0], results[1][0]):
        np.testing.assert_array_equal(a, b)
    assert results[0][1] == results[1][1]


def test_rejects_wrong_pull_count():
    engine = RoundEngine(2, lambda i, p: p, lambda pushes: (pushes, False))
    with pytest.raises(ValueError):
        run(engine, [np.ones(1)], max_iters=1)
