import numpy as np
import pytest
from scipy import stats

from weakcoupling.coefficients import CoefficientTable, harmonic_coefficients
from weakcoupling.mesosim import (
    HarmonicSource, MesoParams, TableSource, conditioned_cdf, meso_simulate, meso_step,
    stationarity_check)
from weakcoupling.model import Lattice, chain, harmonic_pair


class Zero:
    hull = None

    def evaluate(self, a1, a2):
        z = np.zeros(np.shape(a1))
        return z, z


def test_meso_step_examples():
    lat = chain(2)
    e, n = meso_step([2.0, 1.0], 0.01, HarmonicSource(1.0), lat, [0.0])
    assert np.allclose(e, [1.98, 1.02]) and n == 0
    e, _ = meso_step([0.3, 2.0], 0.5, Zero(), lat, [1.3])
    assert np.array_equal(e, [0.3, 2.0])
    with pytest.raises(ValueError):
        meso_step([-0.1, 1.0], 0.01, HarmonicSource(1.0), lat, [0.0])
    e, n = meso_step([0.01, 1.0], 0.01, HarmonicSource(1.0), lat, [-10.0])
    assert n == 1 and e[0] == 0.0 and e[1] == 1.01


def test_swap_equivariance(rng):
    # reversing a chain flips every edge orientation; negated noise
    # (B_ik = -B_ki) must give the mirrored path
    lat = chain(4)
    src = HarmonicSource(1.0)
    e = rng.uniform(0.2, 2.0, 4)
    f = e[::-1].copy()
    for _ in range(200):
        z = rng.normal(size=3)
        e, _ = meso_step(e, 1e-3, src, lat, z)
        f, _ = meso_step(f, 1e-3, src, lat, -z[::-1])
        assert np.allclose(f, e[::-1], rtol=0, atol=1e-13)


def test_exact_conservation_and_positivity():
    lat = chain(2)
    path = meso_simulate([1.3, 0.7], MesoParams(1e-3, 1000.0, 4, 1000),
                         HarmonicSource(1.0), lat)
    tot = path.e.sum(axis=2)
    assert np.max(np.abs(tot - 2.0)) / 2.0 <= 1e-12
    assert path.e.min() >= 0
    lat3 = Lattice((2, 2))
    p3 = meso_simulate([0.1, 3.0, 0.5, 0.0], MesoParams(1e-3, 50.0, 4, 100),
                       HarmonicSource(0.7), lat3)
    assert np.max(np.abs(p3.e.sum(2) - 3.6)) <= 3.6e-12
    assert p3.e.min() >= 0


def test_mean_and_short_time_variance():
    lat = chain(2)
    n = 10 ** 4
    path = meso_simulate(np.ones((n, 2)), MesoParams(1e-3, 0.5, 1, 10),
                         HarmonicSource(1.0), lat)
    e1 = path.e[-1, :, 0]
    assert abs(e1.mean() - 1.0) < 3 * e1.std() / np.sqrt(n)
    k = int(np.argmin(np.abs(path.t - 0.01)))
    var = path.e[k, :, 0].var()
    assert var == pytest.approx(2 * 1.0 * 0.01, rel=0.1)


def test_single_site_is_constant():
    path = meso_simulate([1.7], MesoParams(1e-2, 1.0, 0, 10), HarmonicSource(1.0), chain(1))
    assert np.all(path.e == 1.7)
    assert path.clamp_frequency == 0.0


def test_determinism_and_csv(tmp_path):
    lat = chain(3)
    mp = MesoParams(1e-3, 0.2, 9, 20)
    a = meso_simulate(np.tile([1.0, 0.5, 2.0], (6, 1)), mp, HarmonicSource(1.0), lat)
    b = meso_simulate(np.tile([1.0, 0.5, 2.0], (3, 1)), mp, HarmonicSource(1.0), lat,
                      path_ids=[3, 4, 5])
    assert np.array_equal(a.e[:, 3:], b.e)
    a.to_csv(tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "t,e_1,e_2,e_3"
    assert len(lines) == len(a.t) + 1


def test_table_source_matches_closed_form():
    grid = np.array([0.0, 0.25, 0.5, 1.0, 2.0, 3.0])
    tbl = CoefficientTable.from_function(grid, 1.0, lambda x, y: x * y, harmonic_pair())
    lat = chain(2)
    mp = MesoParams(1e-3, 0.5, 2, 50)
    a = meso_simulate(np.tile([1.2, 0.8], (50, 1)), mp, TableSource(tbl), lat)
    b = meso_simulate(np.tile([1.2, 0.8], (50, 1)), mp, HarmonicSource(1.0), lat)
    assert np.allclose(a.e, b.e, atol=1e-6)
    with pytest.raises(ValueError):
        meso_simulate([2.5, 1.0], mp, tbl, lat)
    # hull exit during the run
    small = CoefficientTable.from_function(grid[:4], 1.0, lambda x, y: x * y, harmonic_pair())
    with pytest.raises(ValueError, match="hull"):
        meso_simulate(np.tile([0.99, 0.99], (20, 1)), MesoParams(1e-3, 5.0, 2, 50), small, lat)


def test_harmonic_conditioned_cdf():
    cdf = conditioned_cdf(2.0, 2, harmonic_pair())
    x = np.linspace(0, 2, 11)
    assert np.allclose(cdf(x), stats.beta(2, 2).cdf(x / 2), atol=1e-6)
    cdf3 = conditioned_cdf(3.0, 3, harmonic_pair())
    assert np.allclose(cdf3(x), stats.beta(2, 4).cdf(x / 3), atol=1e-5)


def test_stationarity_beta_independence_and_degenerate():
    lat, pp = chain(2), harmonic_pair()
    kw = dict(n_samples=5000, n_paths=100, seed=3)
    a = stationarity_check(lat, HarmonicSource(1.0), pp, beta=0.5, **kw)
    b = stationarity_check(lat, HarmonicSource(1.0), pp, beta=3.0, **kw)
    assert a.ks == b.ks and a.mean == b.mean
    z = stationarity_check(lat, HarmonicSource(1.0), pp, total=0.0)
    assert z.ks == 0.0 and z.mean == 0.0


def test_stationarity_chain():
    rep = stationarity_check(chain(3), HarmonicSource(1.0), harmonic_pair(), total=3.0,
                             n_samples=20000, n_paths=400, seed=4)
    assert rep.ks < 0.03
    assert rep.burn_in == pytest.approx(5 * rep.relaxation_time, rel=0.05)


def test_params_validation():
    with pytest.raises(ValueError):
        MesoParams(h=0.1, T=0.01)
    with pytest.raises(ValueError):
        MesoParams(beta=0)
    with pytest.raises(ValueError):
        HarmonicSource(0.0)
