import numpy as np
import pytest
from scipy.special import lambertw

from weakcoupling.model import PhaseState, chain, harmonic_pair, site_energy, softened_pair
from weakcoupling.shell import (
    OMEGA_4, SphereCoord, check_integration_by_parts, log_z_derivative, partition_z,
    psi, psi_inv, rho, rho_cached, sample_product_shells, sample_shell, theta)


def rho_lambert(z, lam):
    """Closed form of the inverse of r/2 + lam (r - log(1 + r))."""
    b = (0.5 + lam) / lam
    w = lambertw(-b * np.exp(-b - z / lam), k=-1).real
    return -w / b - 1.0


@pytest.mark.parametrize("lam", [0.3, 1.0, 4.0])
def test_rho_matches_lambert_w(lam):
    pp = softened_pair(lam=lam)
    z = np.logspace(-6, 3, 80)
    r = rho(z, pp)
    # the closed form is well conditioned away from the branch point and underflow
    mid = (z > 0.05) & (z < 50 * lam)
    assert np.allclose(r[mid], rho_lambert(z[mid], lam), rtol=1e-9)
    assert np.allclose(r[z < 1e-4], 2 * z[z < 1e-4], rtol=1e-3)
    assert np.all(np.abs(pp.ubar_value(r) - z) <= 1e-12 * np.maximum(1, z))
    assert rho_cached(0.7, pp) == float(rho(0.7, pp))


def test_rho_harmonic_and_theta():
    pp = harmonic_pair()
    assert np.allclose(rho(np.array([0, 1.5]), pp), [0, 3])
    assert np.allclose(theta(np.array([0.0, 2.0]), pp), np.sqrt(2))
    soft = softened_pair()
    assert np.isclose(theta(0.0, soft), np.sqrt(2))
    assert np.isclose(theta(1e-9, soft), np.sqrt(2), rtol=1e-6)


def test_psi_examples(harm_half):
    sc = psi(np.array([1.0, 0]), np.zeros(2), harm_half)
    assert np.isclose(sc.r, np.sqrt(0.5))
    assert np.allclose(sc.xi, [1, 0]) and np.allclose(sc.eta, [0, 0])
    q, p = psi_inv(SphereCoord(np.sqrt(0.5), [1.0, 0], [0.0, 0]), harm_half)
    assert np.allclose(q, [1, 0]) and np.allclose(p, [0, 0])
    q, p = psi_inv(SphereCoord(0.0, [0.6, 0], [0.0, 0.8]), harm_half)
    assert np.all(q == 0) and np.all(p == 0)
    with pytest.raises(ValueError):
        psi(np.zeros(2), np.zeros(2), harm_half)
    with pytest.raises(ValueError):
        SphereCoord(1.0, [1.0, 0], [0.1, 0])


def test_psi_round_trip(pp, rng):
    q = rng.normal(size=(10000, 2)) * rng.exponential(size=(10000, 1))
    p = rng.normal(size=(10000, 2))
    q[:5] = 0
    sc = psi(q, p, pp)
    assert np.all(np.abs(np.sum(sc.xi ** 2, -1) + np.sum(sc.eta ** 2, -1) - 1) < 1e-12)
    q2, p2 = psi_inv(sc, pp)
    assert np.allclose(q2, q, atol=1e-10) and np.allclose(p2, p, atol=1e-10)


def test_psi_inv_energy(rng):
    pp = softened_pair()
    x = rng.normal(size=(1000, 4))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    r = rng.uniform(0, 3, 1000)
    q, p = psi_inv(SphereCoord(r, x[:, :2], x[:, 2:]), pp)
    e = site_energy(PhaseState(q[:, None], p[:, None]), 0, 0.0, pp, chain(1))
    assert np.allclose(e, r ** 2, atol=1e-10)


def test_sample_shell_basic(pp, rng):
    q, p = sample_shell(0.0, pp, rng)
    assert np.all(q == 0) and np.all(p == 0)
    with pytest.raises(ValueError):
        sample_shell(-1.0, pp, rng)
    (q, p), rate = sample_shell(1.3, pp, rng, size=5000, return_rate=True)
    e = 0.5 * np.sum(p ** 2, -1) + pp.u(q)
    assert np.allclose(e, 1.3, rtol=1e-10)
    assert rate >= pp.c ** -2


def test_harmonic_sampler_is_uniform_on_sphere(rng):
    pp = harmonic_pair()
    a, n = 1.0, 200000
    q, p = sample_shell(a, pp, rng, size=n)
    x = np.concatenate([q, p], axis=1) / np.sqrt(2 * a)
    assert np.allclose(np.sum(x ** 2, 1), 1)
    m = x.mean(0)
    assert np.all(np.abs(m) < 3 * np.sqrt(0.25 / n))
    sq = (x ** 2).mean(0)
    se = (x ** 2).std(0) / np.sqrt(n)
    assert np.all(np.abs(sq - 0.25) < 3 * se)


def test_product_shells_are_counter_based(pp):
    q1, p1 = sample_product_shells([1.0, 0.5], pp, 9, np.arange(10))
    q2, p2 = sample_product_shells([1.0, 0.5], pp, 9, np.arange(5, 10))
    assert np.array_equal(q1[5:], q2) and np.array_equal(p1[5:], p2)
    e = 0.5 * np.sum(p1 ** 2, -1) + pp.u(q1)
    assert np.allclose(e, [1.0, 0.5])
    q0, p0 = sample_product_shells([0.0], pp, 9, np.arange(3))
    assert np.all(q0 == 0) and np.all(p0 == 0)


def test_partition_z_harmonic():
    pp = harmonic_pair()
    z, se = partition_z(1.0, pp, n=10 ** 5)
    assert abs(z - 4 * np.pi ** 2) / (4 * np.pi ** 2) < 1e-3
    assert partition_z(0.0, pp) == (0.0, 0.0)


def test_partition_z_exact_softened():
    # the phase volume of {H <= a} is int_0^rho(a) 2 pi^2 (a - Ubar(s)) ds,
    # so Z(a) = 2 pi^2 rho(a)
    pp = softened_pair()
    for a in [0.1, 1.0, 5.0]:
        exact = 2 * np.pi ** 2 * rho(a, pp)
        zq, _ = partition_z(a, pp, method="quadrature")
        zm, se = partition_z(a, pp, n=10 ** 5, seed=3)
        assert abs(zq - exact) < 1e-10 * exact
        assert abs(zm - exact) < 3 * se
        assert 4 * OMEGA_4 / pp.c <= zq / a <= 4 * OMEGA_4 * pp.c


def test_partition_z_against_box_histogram():
    pp = softened_pair()
    a, d, n = 1.0, 0.05, 4 * 10 ** 6
    rng = np.random.default_rng(2)
    R = np.sqrt(rho(a + d, pp))
    P = np.sqrt(2 * (a + d))
    x = rng.uniform(-1, 1, size=(n, 4)) * np.array([R, R, P, P])
    h = 0.5 * np.sum(x[:, 2:] ** 2, 1) + pp.u(x[:, :2])
    inside = (h > a - d) & (h <= a + d)
    vol = (2 * R) ** 2 * (2 * P) ** 2
    frac = inside.mean()
    z_box = vol * frac / (2 * d)
    se_box = vol * np.sqrt(frac * (1 - frac) / n) / (2 * d)
    z, se = partition_z(a, pp, n=10 ** 6)
    # the centred difference has O(d^2) bias, far below the noise here
    assert abs(z - z_box) < 3 * np.hypot(se, se_box)


def test_log_z_derivative():
    assert log_z_derivative(2.0, harmonic_pair()) == 0.5
    pp = softened_pair()
    assert abs(1e-3 * log_z_derivative(1e-3, pp) - 1) < 1e-2
    for a in [0.2, 1.0, 3.0]:
        r = rho(a, pp)
        exact = 1.0 / (r * pp.ubar_prime(r))
        assert abs(log_z_derivative(a, pp) - exact) < 1e-6 * exact
    d = 1e-3
    fd = (np.log(partition_z(1 + d, pp, method="quadrature")[0])
          - np.log(partition_z(1 - d, pp, method="quadrature")[0])) / (2 * d)
    assert abs(fd - log_z_derivative(1.0, pp)) < 1e-5
    with pytest.raises(ValueError):
        log_z_derivative(0.0, pp)


def test_integration_by_parts_small():
    pp = harmonic_pair()
    res, se = check_integration_by_parts(1.0, lambda q, p: p[:, 0],
                                         lambda q: np.ones(len(q)), pp, n=10 ** 5,
                                         df=lambda q, p: np.ones(len(q)))
    assert abs(res) < 3 * se + 1e-12
