import numpy as np
import pytest

from weakcoupling.model import (
    Lattice, PhaseState, PotentialPair, chain, current, energy_vector, eval_potential,
    forces, harmonic_pair, site_energies, site_energy, softened_pair, total_hamiltonian)
from weakcoupling.microsim import verlet_step


def test_eval_potential_examples(harm_half):
    assert eval_potential(harm_half, "Ubar", 2.0) == 1.0
    assert np.allclose(eval_potential(harm_half, "gradU", np.array([1.0, 0.0])), [1, 0])
    soft = PotentialPair("softened", "harmonic_v", lam=1.0)
    assert abs(eval_potential(soft, "Ubar", 1.0) - 0.806853) < 1e-6
    assert abs(eval_potential(soft, "Ubar", 1.0) - (1.5 - np.log(2))) < 1e-15
    with pytest.raises(ValueError):
        eval_potential(soft, "W", 1.0)


def test_grad_u_formula(pp, rng):
    q = rng.normal(size=(50, 2))
    r = np.sum(q ** 2, -1)
    assert np.allclose(pp.grad_u(q), 2 * pp.ubar_prime(r)[:, None] * q)
    # central differences of U
    h = 1e-6
    for axis in range(2):
        e = np.zeros(2)
        e[axis] = h
        fd = (pp.u(q + e) - pp.u(q - e)) / (2 * h)
        assert np.allclose(fd, pp.grad_u(q)[:, axis], rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize("v", ["harmonic_v", "cosine_v"])
def test_coupling_structure(v, rng):
    pp = PotentialPair("softened", v, lam=0.5, kappa=1.0)
    q = rng.normal(size=(200, 2)) * 2
    assert np.allclose(pp.v_value(q), pp.v_value(-q))
    assert np.allclose(pp.grad_v(np.zeros(2)), 0)
    assert pp.v_value(np.zeros(2)) == 0
    g = pp.grad_v(q)
    assert np.all(np.sum(g ** 2, -1) <= pp.c * pp.u(q) * (1 + 1e-9))


def test_c_bounds(pp):
    r = np.concatenate([[0], np.logspace(-6, 6, 300)])
    d = pp.ubar_prime(r)
    assert d.min() >= 1 / pp.c and d.max() <= pp.c
    assert pp.ubar_value(0.0) == 0.0


def test_invalid_potentials():
    with pytest.raises(ValueError):
        PotentialPair("quartic")
    with pytest.raises(ValueError):
        PotentialPair("softened", lam=-1)
    with pytest.raises(ValueError):
        PotentialPair("harmonic", c=1.5)


def test_lattice_edges():
    lat = Lattice((3, 2))
    assert lat.N == 6
    e = lat.edges
    assert len(e) == 7
    assert np.all(e[:, 0] < e[:, 1])
    assert len({tuple(x) for x in e}) == len(e)
    for i in range(lat.N):
        assert len(lat.neighbors(i)) <= 4
        for k in lat.neighbors(i):
            assert lat.adjacent(i, k) and lat.adjacent(k, i)
    assert not chain(3).adjacent(0, 2)
    assert len(chain(1).edges) == 0


def test_phase_state_validation():
    with pytest.raises(ValueError):
        PhaseState(np.zeros((2, 2)), np.full((2, 2), np.nan))
    with pytest.raises(ValueError):
        PhaseState(np.zeros((2, 2)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        energy_vector([1.0, -0.1])


def test_site_energy_examples(harm_half):
    lat = chain(2)
    z = PhaseState.zeros(2)
    assert site_energy(z, 0, 0.3, harm_half, lat) == 0
    s = PhaseState(np.array([[1.0, 0], [0, 0]]), np.zeros((2, 2)))
    assert site_energy(s, 0, 0.0, harm_half, lat) == 0.5
    assert abs(site_energy(s, 0, 0.2, harm_half, lat) - 0.55) < 1e-15
    # sum of the site energies 0.55 + 0.05
    assert abs(total_hamiltonian(s, 0.2, harm_half, lat) - 0.6) < 1e-15
    assert total_hamiltonian(z, 0.2, harm_half, lat) == 0


def test_hamiltonian_is_sum_of_site_energies(pp, rng):
    lat = Lattice((3, 3))
    s = PhaseState(rng.normal(size=(20, 9, 2)), rng.normal(size=(20, 9, 2)))
    h = total_hamiltonian(s, 0.37, pp, lat)
    assert np.allclose(site_energies(s, 0.37, pp, lat).sum(-1), h, rtol=1e-12)


def test_current_examples(harm_half):
    lat = chain(2)
    s = PhaseState(np.array([[1.0, 0], [0, 0]]), np.array([[1.0, 0], [1.0, 0]]))
    assert current(s, 0, 1, harm_half, lat) == -1.0
    s2 = PhaseState(np.array([[0.3, 0.1], [0.3, 0.1]]), np.ones((2, 2)))
    assert current(s2, 0, 1, harm_half, lat) == 0
    s3 = PhaseState(np.array([[1.0, 0], [0, 2]]), np.array([[1.0, -2], [-1.0, 2]]))
    assert current(s3, 0, 1, harm_half, lat) == 0
    with pytest.raises(ValueError):
        current(PhaseState.zeros(3), 0, 2, harm_half, chain(3))


def test_current_antisymmetry(pp, rng):
    lat = chain(4)
    s = PhaseState(rng.normal(size=(100, 4, 2)), rng.normal(size=(100, 4, 2)))
    for i, k in lat.edges:
        assert np.allclose(current(s, i, k, pp, lat), -current(s, k, i, pp, lat),
                           atol=1e-15)


def test_forces_are_minus_gradient(pp, rng):
    lat = chain(3)
    q = rng.normal(size=(3, 2))
    s = PhaseState(q, np.zeros((3, 2)))
    f = forces(q, 0.4, pp, lat)
    h = 1e-6
    for i in range(3):
        for a in range(2):
            e = np.zeros((3, 2))
            e[i, a] = h
            up = total_hamiltonian(PhaseState(q + e, s.p), 0.4, pp, lat)
            dn = total_hamiltonian(PhaseState(q - e, s.p), 0.4, pp, lat)
            assert abs(-(up - dn) / (2 * h) - f[i, a]) < 1e-6


def _balance_error(h, pp):
    lat = chain(3)
    rng = np.random.default_rng(4)
    s = PhaseState(rng.normal(size=(3, 2)), rng.normal(size=(3, 2)))
    eps, T = 0.5, 2.0
    e0 = site_energy(s, 1, eps, pp, lat)

    def flux(st):
        return eps * (current(st, 1, 0, pp, lat) + current(st, 1, 2, pp, lat))

    integral = 0.0
    f_prev = flux(s)
    for _ in range(int(round(T / h))):
        s = verlet_step(s, h, eps, pp, lat)
        f_new = flux(s)
        integral += 0.5 * h * (f_prev + f_new)
        f_prev = f_new
    return abs(site_energy(s, 1, eps, pp, lat) - e0 - integral)


def test_energy_balance_second_order(pp):
    e1 = _balance_error(0.01, pp)
    e2 = _balance_error(0.005, pp)
    assert e1 < 1e-3
    assert e1 / e2 >= 3.5
