import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from conftest import synthetic_linear
from mddlearn.data import Dataset
from mddlearn.evaluation import (
    GAMMA_GRID,
    LAMBDA_GRID,
    REPORT_HEADER,
    SIGMA_GRID,
    BenchmarkReport,
    Grids,
    Method,
    ProtocolCounter,
    fit_method,
    format_report_csv,
    format_report_json,
    kfold_cv,
    kfold_indices,
    rmse,
    run_benchmark,
    welch_t_test,
)


def t_two_sided_quadrature(t, df):
    """P(|T| >= |t|) by integrating the Student-t density with mpmath."""
    mpmath.mp.dps = 40
    nu = mpmath.mpf(df)
    c = mpmath.gamma((nu + 1) / 2) / (mpmath.sqrt(nu * mpmath.pi) * mpmath.gamma(nu / 2))
    pdf = lambda x: c * (1 + x * x / nu) ** (-(nu + 1) / 2)
    return float(2 * mpmath.quad(pdf, [abs(t), mpmath.inf]))


def test_rmse_examples(rng):
    assert rmse([1, 2], [1, 4]) == pytest.approx(1.4142136, abs=1e-7)
    assert rmse([3.0, -1.0], [3.0, -1.0]) == 0.0
    a, b = rng.normal(size=(2, 100))
    ref = math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)) / 100)
    assert abs(rmse(a, b) - ref) < 1e-12
    with pytest.raises(ValueError):
        rmse([1.0], [1.0, 2.0])


def test_default_grids():
    assert len(LAMBDA_GRID) == 10 and LAMBDA_GRID[0] == 1e-6 and LAMBDA_GRID[-1] == 1e3
    assert len(GAMMA_GRID) == 10 and GAMMA_GRID[0] == 1e-6 and GAMMA_GRID[-1] == 1e3
    assert len(SIGMA_GRID) == 21 and SIGMA_GRID[0] == 2.0**-10 and SIGMA_GRID[-1] == 2.0**10


def test_cells_per_method():
    g = Grids()
    assert len(g.cells(Method("rr"))) == 10
    assert len(g.cells(Method("mdd-ls", 5))) == 100
    assert len(g.cells(Method("krr"))) == 210
    assert len(g.cells(Method("mdd-rkhs", 5))) == 2100


def test_method_parse():
    assert Method.parse("drr", 5) == Method("drr", 5)
    assert Method.parse("mdd-ls-10", 5) == Method("mdd-ls", 10)
    assert Method.parse("rr", 5) == Method("rr")
    assert Method.parse("mdd-rkhs", 3).label == "MDD-RKHS-3"
    with pytest.raises(ValueError):
        Method.parse("lasso")
    with pytest.raises(ValueError):
        Method("mdd-ls", 1)


@given(st.integers(2, 200), st.data(), st.integers(0, 1000))
@settings(max_examples=80, deadline=None)
def test_kfold_disjoint_cover(N, data, seed):
    k = data.draw(st.integers(2, min(N, 10)))
    folds = kfold_indices(N, k, seed)
    vals = [v for _, v in folds]
    assert np.array_equal(np.sort(np.concatenate(vals)), np.arange(N))
    sizes = [len(v) for v in vals]
    assert max(sizes) - min(sizes) <= 1
    for tr, val in folds:
        assert len(np.intersect1d(tr, val)) == 0 and len(tr) + len(val) == N


def test_kfold_rejects_too_many_folds():
    with pytest.raises(ValueError):
        kfold_cv(Dataset(np.ones((3, 1)), np.ones(3)), Method("rr"), k=4)


def test_single_point_grid():
    ds = synthetic_linear(0, N=60, d=3)
    cv = kfold_cv(ds, Method("mdd-ls", 2), Grids((0.3,), (0.01,), (1.0,)), k=3, seed=0)
    assert cv.best == {"lambda": 0.3, "gamma": 0.01, "sigma": None}


def test_planted_lambda_selected(rng):
    # noiseless linear targets: a tiny ridge is far better than a heavy one on every fold
    X = rng.normal(size=(80, 4))
    ds = Dataset(X, X @ np.array([3.0, -2.0, 1.0, 0.5]))
    cv = kfold_cv(ds, Method("rr"), Grids(lambdas=(10.0, 1e-6, 1.0)), k=5, seed=1)
    assert cv.best["lambda"] == 1e-6
    assert cv.best_score < 1e-3


def test_tie_breaks_to_smaller_lambda():
    # zero targets: every lambda gives a zero model and identical scores
    ds = Dataset(np.random.default_rng(0).normal(size=(30, 2)), np.zeros(30))
    cv = kfold_cv(ds, Method("drr", 3), Grids(lambdas=(1.0, 0.01, 100.0)), k=3, seed=0)
    assert cv.best["lambda"] == 0.01


def test_diverged_cells_score_infinity():
    ds = synthetic_linear(1, N=60, d=2)
    cv = kfold_cv(ds, Method("mdd-ls", 3), Grids(lambdas=(1e-6,), gammas=(1e-3, 1e3)), k=3, seed=0)
    scores = dict((p["gamma"], s) for p, s in cv.scores)
    assert scores[1e3] == math.inf
    assert cv.best["gamma"] == 1e-3


def test_cv_kernel_methods_run(rng):
    X = rng.uniform(-2, 2, size=(60, 1))
    ds = Dataset(X, np.sin(2 * X[:, 0]) + 0.05 * rng.normal(size=60))
    g = Grids(lambdas=(1e-4, 1.0), gammas=(1e-3, 1e-1), sigmas=(0.5, 50.0))
    for method in (Method("krr"), Method("kdrr", 3), Method("mdd-rkhs", 3)):
        cv = kfold_cv(ds, method, g, k=3, seed=2)
        assert cv.best["sigma"] == 0.5
        assert cv.best_score < 0.5


def test_fit_method_matches_direct_trainers():
    from mddlearn.baselines import train_drr
    from mddlearn.data import partition

    ds = synthetic_linear(5, N=100, d=4)
    out = fit_method(Method("drr", 4), ds, {"lambda": 0.1, "gamma": None, "sigma": None}, seed=3)
    avg, _ = train_drr(ds, partition(ds, 4, 3), 0.1)
    np.testing.assert_allclose(out.model.w, avg.w, rtol=0, atol=1e-12)
    assert out.floats_comm == 4 * 4


def test_benchmark_smoke():
    ds = synthetic_linear(0, N=50, d=3)
    (rep,) = run_benchmark(ds, [Method("rr")], trials=1, seed=0)
    assert rep.trials == 1 and math.isfinite(rep.rmse[0]) and rep.time_s[0] > 0
    assert rep.std == 0.0


def test_benchmark_deterministic():
    ds = synthetic_linear(2, N=80, d=3)
    g = Grids(lambdas=(1e-3, 1.0), gammas=(1e-2, 1e-1))
    methods = [Method("rr"), Method("drr", 3), Method("mdd-ls", 3)]
    a = run_benchmark(ds, methods, trials=3, seed=7, grids=g)
    b = run_benchmark(ds, methods, trials=3, seed=7, grids=g)
    assert format_report_csv(a, include_time=False) == format_report_csv(b, include_time=False)
    c = run_benchmark(ds, methods, trials=3, seed=8, grids=g)
    assert format_report_csv(a, include_time=False) != format_report_csv(c, include_time=False)


def test_report_statistics_recomputable():
    ds = synthetic_linear(3, N=60, d=2)
    reps = run_benchmark(ds, [Method("rr"), Method("drr", 2)], trials=4, seed=1, grids=Grids(lambdas=(0.1, 1.0)))
    for rep in reps:
        r = np.array(rep.rmse)
        assert abs(rep.mean - r.mean()) <= 1e-12
        assert abs(rep.std - r.std(ddof=1)) <= 1e-12
        assert len(rep.time_s) == len(rep.params) == len(rep.floats_comm) == rep.trials


def test_benchmark_records_failures_per_trial():
    ds = synthetic_linear(1, N=40, d=2)
    reps = run_benchmark(ds, [Method("krr"), Method("rr")], trials=2, seed=0,
                         grids=Grids(lambdas=(0.1,), sigmas=(1.0,)), krr_max_n=10)
    krr, rr = reps
    assert all(math.isnan(v) for v in krr.rmse) and all("InfeasibleError" in e for e in krr.errors)
    assert all(math.isfinite(v) for v in rr.rmse)
    assert math.isnan(krr.mean)
    assert "null" in format_report_json(reps)


def test_report_csv_format():
    rep = BenchmarkReport("DRR-5", rmse=[0.5], time_s=[0.01], cv_time_s=[0.1], floats_comm=[30],
                          params=[{"lambda": 0.001, "gamma": None, "sigma": None}], errors=[None])
    lines = format_report_csv([rep]).splitlines()
    assert lines[0] == ",".join(REPORT_HEADER) == "method,trial,rmse,time_s,floats_comm,lambda,gamma,sigma"
    assert lines[1] == "DRR-5,0,0.5,0.010000,30,0.001,,"


def test_drr_not_better_than_rr_on_smooth_data():
    # small shards make local ridge fits noisy, so averaging loses to the global fit
    rng = np.random.default_rng(3)
    X = rng.normal(size=(150, 20))
    ds = Dataset(X, X @ rng.normal(size=20) + 0.5 * rng.normal(size=150))
    rr, drr = run_benchmark(ds, [Method("rr"), Method("drr", 5)], trials=30, seed=0,
                            grids=Grids(lambdas=(1e-3, 1e-2, 1e-1, 1.0)))
    assert drr.mean >= rr.mean


def test_welch_identical_samples():
    r = welch_t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert r.t == 0.0 and r.p == 1.0 and not r.significant


def test_welch_separated_samples(rng):
    a = 1e-6 * rng.normal(size=4)
    b = 1 + 1e-6 * rng.normal(size=4)
    assert welch_t_test(a, b).significant


def test_welch_zero_variance_cases():
    r = welch_t_test([2.0, 2.0], [2.0, 2.0, 2.0])
    assert (r.t, r.p, r.significant) == (0.0, 1.0, False)
    r = welch_t_test([1.0, 1.0], [2.0, 2.0])
    assert r.t == -math.inf and r.p == 0.0 and r.significant


def test_welch_p_vs_quadrature_oracle(rng):
    for _ in range(6):
        a = rng.normal(0, 1, size=int(rng.integers(3, 15)))
        b = rng.normal(0.7, 2, size=int(rng.integers(3, 15)))
        r = welch_t_test(a, b)
        assert abs(r.p - t_two_sided_quadrature(r.t, r.df)) < 1e-6
        ref = stats.ttest_ind(a, b, equal_var=False)
        assert abs(r.t - ref.statistic) < 1e-10 and abs(r.p - ref.pvalue) < 1e-10


def test_welch_swap_symmetry(rng):
    a, b = rng.normal(size=8), rng.normal(0.5, size=11)
    ab, ba = welch_t_test(a, b), welch_t_test(b, a)
    assert ab.t == -ba.t and ab.p == ba.p


def test_welch_needs_two_observations():
    with pytest.raises(ValueError):
        welch_t_test([1.0], [1.0, 2.0])


def test_dry_run_counts_without_fitting():
    ds = synthetic_linear(0, N=40, d=2)
    counter = ProtocolCounter(dry_run=True)
    reps = run_benchmark(ds, [Method("rr"), Method("mdd-rkhs", 5)], trials=30, counter=counter)
    assert counter.trials == 30 and counter.final_fits == 0
    assert counter.folds == 30 * 2 * 5
    assert counter.cells == 30 * 5 * (10 + 2100)
    assert all(r.trials == 0 for r in reps)


@pytest.mark.slow
def test_space_ga_protocol_on_synthetic_standin():
    """The space_ga protocol run end to end on a same-shaped synthetic set (machinery check)."""
    rng = np.random.default_rng(42)
    N, d = 3107, 6
    X = rng.normal(size=(N, d))
    y = X @ rng.normal(size=d) + 0.4 * np.tanh(X[:, 0] * X[:, 1]) + 0.5 * rng.normal(size=N)
    reps = run_benchmark(Dataset(X, y), [Method("rr"), Method("mdd-ls", 5), Method("drr", 5)], trials=30, seed=0)
    rr, mdd, drr = reps
    assert all(r.trials == 30 and all(e is None for e in r.errors) for r in reps)
    assert rr.mean <= drr.mean
    w = welch_t_test(mdd.rmse, drr.rmse)
    assert not (w.significant and w.t > 0)
