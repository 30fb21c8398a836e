import json

import numpy as np
import pytest

from weakcoupling.analysis import (
    DecayFit, DistanceReport, autocorrelation, convergence_study, empirical_distance,
    fit_decay_rate, jackknife, trajectory_correlations, truncation_lag)
from weakcoupling.coefficients import CoefficientTable
from weakcoupling.mesosim import HarmonicSource, MesoParams, meso_simulate
from weakcoupling.model import chain, harmonic_pair


def _ar1(phi, n, rng):
    z = rng.normal(size=n) * np.sqrt(1 - phi ** 2)
    x = np.empty(n)
    x[0] = rng.normal()
    for t in range(1, n):
        x[t] = phi * x[t - 1] + z[t]
    return x


def test_acf_iid_and_variance(rng):
    x = rng.normal(size=50000)
    acf = autocorrelation(x, 20)
    assert acf.values[0] == pytest.approx(np.var(x), rel=1e-12)
    assert np.all(np.abs(acf.values[1:]) <= 3 * acf.stderr[1:])
    with pytest.raises(ValueError):
        autocorrelation(x[:50], 20)


def test_acf_ar1(rng):
    x = _ar1(0.9, 200000, rng)
    acf = autocorrelation(x, 15)
    k = np.arange(16)
    assert np.all(np.abs(acf.values - 0.9 ** k) <= 3 * acf.stderr)


def test_trajectory_correlations_direct(rng):
    x = rng.normal(size=(3, 64))
    c = trajectory_correlations(x, 10)
    for k in range(11):
        direct = np.mean(x[:, : 64 - k] * x[:, k:], axis=1)
        assert np.allclose(c[:, k], direct)


def test_truncation_lag_synthetic():
    dt = 0.01
    t = np.arange(2000) * dt
    C = np.exp(-t)
    se = np.full_like(C, 1e-3)
    k, tau, found = truncation_lag(C, se, dt)
    assert found
    # |C| < 2e-3 from t = ln 500 on
    assert k * dt == pytest.approx(np.log(500), abs=2 * dt)
    assert tau == pytest.approx(1 - 2e-3, abs=0.02)
    _, _, found2 = truncation_lag(C[:300], se[:300], dt)
    assert not found2


def test_jackknife(rng):
    x = rng.normal(size=400)
    est, se = jackknife(x)
    assert est == pytest.approx(x.mean()) and se == pytest.approx(x.std(ddof=1) / 20)
    est_b, se_b = jackknife(x, np.mean, n_blocks=400)
    assert se_b == pytest.approx(se)
    est_c, se_c = jackknife(x, np.mean, n_blocks=20)
    assert est_c == pytest.approx(est) and 0.5 * se < se_c < 2 * se


def test_fit_exact_and_planted():
    t = np.arange(0, 5, 0.01)
    fit = fit_decay_rate(np.exp(-2 * t), (0.5, 3.0), dt=0.01)
    assert abs(fit.rate - 2) < 1e-10 and fit.accepted and fit.r2 > 0.999999
    for lam in (0.1, 0.7, 5.0):
        f = fit_decay_rate(3.0 * np.exp(-lam * t), (0.0, 1.0), dt=0.01)
        assert f.rate == pytest.approx(lam, rel=1e-2)
    env = fit_decay_rate(np.exp(-0.5 * t) * np.cos(4 * t), (0.2, 4.8), dt=0.01,
                         envelope=True)
    assert env.rate == pytest.approx(0.5, rel=0.02) and env.accepted
    with pytest.raises(ValueError):
        fit_decay_rate(np.cos(3 * t), (0.0, 2.0), dt=0.01)
    json.loads(fit.to_json())


def test_fit_poor_quality_flagged(rng):
    t = np.arange(0, 5, 0.01)
    noisy = np.exp(rng.normal(scale=2.0, size=len(t)))
    fit = fit_decay_rate(noisy, (0.0, 5.0), dt=0.01)
    assert not fit.accepted
    with pytest.raises(ValueError):
        DecayFit("x", 1.0, 1.0, 2.0, 1.0, 1.0, 0.0, 3, True)


def test_distance_examples(rng):
    x = rng.normal(size=1000)
    d = empirical_distance(x, x)
    assert d.w1 == 0 and d.ks == 0
    d = empirical_distance(np.zeros(10), np.ones(7), n_boot=20)
    assert d.w1 == 1 and d.ks == 1
    a = rng.normal(size=10 ** 5)
    b = rng.normal(size=10 ** 5) + 1
    d = empirical_distance(a, b, n_boot=50)
    assert abs(d.w1 - 1) <= 0.02 and d.w1_stderr > 0
    with pytest.raises(ValueError):
        empirical_distance([], [1.0])


def test_distance_metric_properties(rng):
    n = 10 ** 5
    for _ in range(3):
        mu, s = rng.normal(size=3), rng.uniform(0.5, 2, size=3)
        xs = [rng.normal(m, sd, size=n) for m, sd in zip(mu, s)]
        d = lambda u, v: empirical_distance(u, v, n_boot=0).w1  # noqa: E731
        assert d(xs[0], xs[1]) == pytest.approx(d(xs[1], xs[0]), abs=1e-12)
        assert d(xs[0], xs[2]) <= d(xs[0], xs[1]) + d(xs[1], xs[2]) + 1e-12


def test_meso_self_comparison():
    mp = MesoParams(1e-3, 0.5, 3, 500)
    e0 = np.ones((200, 2))
    a = meso_simulate(e0, mp, HarmonicSource(1.0), chain(2)).e[-1, :, 0]
    b = meso_simulate(e0, mp, HarmonicSource(1.0), chain(2)).e[-1, :, 0]
    d = empirical_distance(a, b, n_boot=10)
    assert d.w1 == 0 and d.ks == 0


def test_convergence_study_small(tmp_path):
    pp = harmonic_pair()
    kw = dict(n_paths=60, pp=pp, sigma=1.0, coeffs=HarmonicSource(1.0), n_boot=20,
              seed=4)
    rep = convergence_study([0.5], 0.2, **kw)
    assert len(rep.rows) == 1 and rep.rows[0]["n_micro"] == 60
    assert rep.rows[0]["W1"] >= 0 and rep.rows[0]["KS"] >= 0
    again = convergence_study([0.5], 0.2, **kw)
    assert again.rows == rep.rows
    rep.to_csv(tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "eps,W1,W1_err,KS,KS_err"
    json.loads(rep.to_json())
    with pytest.raises(ValueError):
        convergence_study([0.1, 0.2], 0.2, **kw)
    grid = np.array([0.0, 0.5, 1.0])
    tbl = CoefficientTable.from_function(grid, 1.0, lambda x, y: x * y, pp)
    kw["coeffs"] = tbl
    with pytest.raises(ValueError, match="hull"):
        convergence_study([0.5], 0.2, **kw)


def test_report_monotonicity_flag():
    rep = DistanceReport([0.4, 0.2], 1.0, rows=[{"W1": 0.3}, {"W1": 0.1}])
    assert rep.strictly_decreasing
    rep.rows[1]["W1"] = 0.3
    assert not rep.strictly_decreasing
