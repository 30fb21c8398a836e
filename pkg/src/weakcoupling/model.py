"""Potentials, lattice, phase-space states, energies and currents.

Each site carries an oscillator ``(q_i, p_i)`` in R^2 x R^2. The Hamiltonian
is

    H_eps = sum_i (|p_i|^2 / 2 + U(q_i)) + eps * sum_{edges {i,k}} V(q_i - q_k)

with ``U(q) = Ubar(|q|^2)``. Every undirected edge carries ``eps * V`` once
(the ordered-pair sum with its factor 1/2), and each site energy takes half
of it from each incident edge.

The energy current along an edge is oriented so that, along the exact
Hamiltonian flow, ``dE_i/dt = eps * sum_k j_{i,k}``::

    j_{i,k} = -(1/2) grad V(q_i - q_k) . (p_i + p_k)

All array functions accept leading batch dimensions: positions and momenta
have shape ``(..., N, 2)``.
"""

from dataclasses import dataclass
from functools import cached_property
import itertools

import numpy as np
import numba as nb

CURRENT_CONVENTION = "j_ik = -(1/2) gradV(q_i - q_k) . (p_i + p_k)"

UBAR_FAMILIES = {"harmonic": 0, "softened": 1}
V_FAMILIES = {"harmonic_v": 0, "cosine_v": 1}


@dataclass(frozen=True)
class PotentialPair:
    """Single-site potential ``Ubar`` and coupling ``V`` with their constant ``c``.

    Families
    --------
    ``harmonic``      Ubar(r) = r/2
    ``softened``      Ubar(r) = r/2 + lam * (r - log(1 + r)), Ubar' in [1/2, 1/2 + lam)
    ``harmonic_v``    V(q) = kappa/2 |q|^2
    ``cosine_v``      V(q) = kappa (1 - cos q1)(1 - cos q2)

    ``c`` defaults to the smallest constant compatible with both
    ``c^-1 <= Ubar' <= c`` and ``|grad V|^2 <= c U``; an explicit value is
    checked against both on a test grid.
    """

    ubar: str = "harmonic"
    v: str = "harmonic_v"
    lam: float = 1.0
    kappa: float = 1.0
    c: float = None

    def __post_init__(self):
        if self.ubar not in UBAR_FAMILIES:
            raise ValueError(f"unknown Ubar family {self.ubar!r}")
        if self.v not in V_FAMILIES:
            raise ValueError(f"unknown V family {self.v!r}")
        if self.ubar == "softened" and not self.lam > 0:
            raise ValueError("softened family needs lam > 0")
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        c_min = max(self._c_ubar(), self._c_coupling())
        if self.c is None:
            object.__setattr__(self, "c", c_min)
        self._check_bounds()

    # structural constants

    @property
    def ubar_prime_bounds(self):
        """``(inf, sup)`` of ``Ubar'`` on ``[0, inf)``."""
        if self.ubar == "harmonic":
            return 0.5, 0.5
        return 0.5, 0.5 + self.lam

    def _c_ubar(self):
        if self.ubar == "harmonic":
            return 2.0
        return max(2.0, 2.0 * self.lam + 1.0)

    def _c_coupling(self):
        if self.v == "harmonic_v":
            # |grad V|^2 / U = kappa^2 r / Ubar(r), largest as r -> 0
            return 2.0 * self.kappa ** 2
        x = _test_points()
        g = self.grad_v(x)
        u = self.u(x)
        ratio = np.einsum("...i,...i->...", g, g) / u
        return float(np.max(ratio)) * (1.0 + 1e-6)

    def _check_bounds(self):
        r = np.concatenate([[0.0], np.logspace(-8, 6, 400)])
        d = self.ubar_prime(r)
        c = self.c
        if d.min() < 1.0 / c * (1 - 1e-12) or d.max() > c * (1 + 1e-12):
            raise ValueError(f"Ubar' leaves [1/c, c] for c={c}")
        x = _test_points()
        g = self.grad_v(x)
        lhs = np.einsum("...i,...i->...", g, g)
        if np.any(lhs > c * self.u(x) * (1 + 1e-9)):
            raise ValueError(f"|grad V|^2 <= c U fails for c={c}")

    def codes(self):
        """Integer family codes and parameter array for compiled kernels."""
        params = np.array([self.lam, self.kappa], dtype=np.float64)
        return UBAR_FAMILIES[self.ubar], V_FAMILIES[self.v], params

    def describe(self):
        return {"ubar": self.ubar, "v": self.v, "lam": self.lam,
                "kappa": self.kappa, "c": self.c}

    # function evaluations (numpy, broadcasting)

    def ubar_value(self, r):
        r = np.asarray(r, dtype=float)
        if self.ubar == "harmonic":
            return 0.5 * r
        return 0.5 * r + self.lam * (r - np.log1p(r))

    def ubar_prime(self, r):
        r = np.asarray(r, dtype=float)
        if self.ubar == "harmonic":
            return np.full_like(r, 0.5)
        return 0.5 + self.lam * r / (1.0 + r)

    def u(self, q):
        q = np.asarray(q, dtype=float)
        return self.ubar_value(np.einsum("...i,...i->...", q, q))

    def grad_u(self, q):
        q = np.asarray(q, dtype=float)
        r = np.einsum("...i,...i->...", q, q)
        return 2.0 * self.ubar_prime(r)[..., None] * q

    def v_value(self, q):
        q = np.asarray(q, dtype=float)
        if self.v == "harmonic_v":
            return 0.5 * self.kappa * np.einsum("...i,...i->...", q, q)
        return self.kappa * (1.0 - np.cos(q[..., 0])) * (1.0 - np.cos(q[..., 1]))

    def grad_v(self, q):
        q = np.asarray(q, dtype=float)
        if self.v == "harmonic_v":
            return self.kappa * q
        x, y = q[..., 0], q[..., 1]
        gx = self.kappa * np.sin(x) * (1.0 - np.cos(y))
        gy = self.kappa * (1.0 - np.cos(x)) * np.sin(y)
        return np.stack([gx, gy], axis=-1)


def _test_points():
    rad = np.concatenate([np.logspace(-4, 2, 120)])
    ang = np.linspace(0.0, 2.0 * np.pi, 64, endpoint=False)
    rr, aa = np.meshgrid(rad, ang, indexing="ij")
    return np.stack([rr * np.cos(aa), rr * np.sin(aa)], axis=-1).reshape(-1, 2)


def harmonic_pair(kappa=2.0):
    """Harmonic ``Ubar`` with harmonic coupling ``V = kappa/2 |q|^2``.

    The default ``kappa = 2`` is the normalization under which the two-site
    closed forms ``gamma^2 = a1 a2 / sigma^2`` and
    ``alpha = 2 (a2 - a1) / sigma^2`` hold.
    """
    return PotentialPair("harmonic", "harmonic_v", kappa=kappa)


def softened_pair(lam=1.0, kappa=2.0):
    return PotentialPair("softened", "harmonic_v", lam=lam, kappa=kappa)


def eval_potential(pp, which, x):
    """Evaluate one of ``Ubar, UbarPrime, U, gradU, V, gradV`` at ``x``."""
    table = {
        "Ubar": pp.ubar_value,
        "UbarPrime": pp.ubar_prime,
        "U": pp.u,
        "gradU": pp.grad_u,
        "V": pp.v_value,
        "gradV": pp.grad_v,
    }
    try:
        fn = table[which]
    except KeyError:
        raise ValueError(f"unknown potential function {which!r}") from None
    return fn(x)


@dataclass(frozen=True)
class Lattice:
    """Box of ``Z^d`` (d = 1 or 2) with free boundary.

    Sites are indexed in lexicographic order of their coordinates; each
    undirected nearest-neighbour edge is stored once as ``(i, k)``, ``i < k``.
    """

    extents: tuple

    def __post_init__(self):
        ext = tuple(int(n) for n in np.atleast_1d(self.extents))
        if len(ext) not in (1, 2) or min(ext) < 1:
            raise ValueError("extents must have 1 or 2 positive entries")
        object.__setattr__(self, "extents", ext)

    @property
    def dim(self):
        return len(self.extents)

    @cached_property
    def sites(self):
        return list(itertools.product(*(range(n) for n in self.extents)))

    @property
    def N(self):
        return len(self.sites)

    @cached_property
    def edges(self):
        index = {s: n for n, s in enumerate(self.sites)}
        out = []
        for s in self.sites:
            for axis in range(self.dim):
                t = list(s)
                t[axis] += 1
                t = tuple(t)
                if t in index:
                    out.append((index[s], index[t]))
        out.sort()
        return np.array(out, dtype=np.int64).reshape(-1, 2)

    def adjacent(self, i, k):
        a, b = min(i, k), max(i, k)
        e = self.edges
        return bool(np.any((e[:, 0] == a) & (e[:, 1] == b)))

    def neighbors(self, i):
        e = self.edges
        return sorted(set(e[e[:, 0] == i, 1]) | set(e[e[:, 1] == i, 0]))

    def describe(self):
        return {"dim": self.dim, "extents": list(self.extents)}


def chain(n):
    return Lattice((n,))


@dataclass
class PhaseState:
    """Positions and momenta, arrays of shape ``(..., N, 2)``."""

    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        self.q = np.array(self.q, dtype=np.float64)
        self.p = np.array(self.p, dtype=np.float64)
        if self.q.shape != self.p.shape or self.q.ndim < 2 or self.q.shape[-1] != 2:
            raise ValueError("q and p must share a shape (..., N, 2)")
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.p))):
            raise ValueError("non-finite phase-space coordinates")

    @property
    def N(self):
        return self.q.shape[-2]

    def copy(self):
        return PhaseState(self.q.copy(), self.p.copy())

    @classmethod
    def zeros(cls, n, batch=()):
        shape = tuple(batch) + (n, 2)
        return cls(np.zeros(shape), np.zeros(shape))


def energy_vector(values):
    """Validate per-site energies; returns a float array."""
    e = np.array(values, dtype=np.float64)
    if not np.all(np.isfinite(e)) or np.any(e < 0):
        raise ValueError("energies must be finite and nonnegative")
    return e


def _dot(a, b):
    return np.einsum("...i,...i->...", a, b)


def site_energies(state, eps, pp, lat):
    """All site energies ``E_i^eps``, shape ``(..., N)``."""
    q, p = state.q, state.p
    e = 0.5 * _dot(p, p) + pp.u(q)
    if eps != 0.0 and len(lat.edges):
        i, k = lat.edges[:, 0], lat.edges[:, 1]
        half = 0.5 * eps * pp.v_value(q[..., i, :] - q[..., k, :])
        for col, (a, b) in enumerate(lat.edges):
            e[..., a] += half[..., col]
            e[..., b] += half[..., col]
    return e


def site_energy(state, i, eps, pp, lat):
    """``E_i^eps = |p_i|^2/2 + U(q_i) + eps/2 sum_{k~i} V(q_i - q_k)``."""
    if not 0 <= i < lat.N:
        raise IndexError(f"site {i} not in lattice")
    return site_energies(state, eps, pp, lat)[..., i]


def current(state, i, k, pp, lat):
    """Energy current ``j_{i,k}`` from site ``k`` into site ``i``."""
    if not lat.adjacent(i, k):
        raise ValueError(f"sites {i} and {k} are not nearest neighbours")
    q, p = state.q, state.p
    g = pp.grad_v(q[..., i, :] - q[..., k, :])
    return -0.5 * _dot(g, p[..., i, :] + p[..., k, :])


def total_hamiltonian(state, eps, pp, lat):
    q, p = state.q, state.p
    h = np.sum(0.5 * _dot(p, p) + pp.u(q), axis=-1)
    if eps != 0.0 and len(lat.edges):
        i, k = lat.edges[:, 0], lat.edges[:, 1]
        h = h + eps * np.sum(pp.v_value(q[..., i, :] - q[..., k, :]), axis=-1)
    return h


def forces(q, eps, pp, lat):
    """``-grad_q H_eps``."""
    f = -pp.grad_u(q)
    if eps != 0.0 and len(lat.edges):
        i, k = lat.edges[:, 0], lat.edges[:, 1]
        g = eps * pp.grad_v(q[..., i, :] - q[..., k, :])
        for col, (a, b) in enumerate(lat.edges):
            f[..., a, :] -= g[..., col, :]
            f[..., b, :] += g[..., col, :]
    return f


# compiled scalar versions for the kernels

@nb.njit(inline="always")
def ubar_nb(fam, par, r):
    if fam == 0:
        return 0.5 * r
    return 0.5 * r + par[0] * (r - np.log1p(r))


@nb.njit(inline="always")
def ubar_prime_nb(fam, par, r):
    if fam == 0:
        return 0.5
    return 0.5 + par[0] * r / (1.0 + r)


@nb.njit(inline="always")
def v_nb(fam, par, x, y):
    if fam == 0:
        return 0.5 * par[1] * (x * x + y * y)
    return par[1] * (1.0 - np.cos(x)) * (1.0 - np.cos(y))


@nb.njit(inline="always")
def grad_v_nb(fam, par, x, y):
    if fam == 0:
        return par[1] * x, par[1] * y
    return (par[1] * np.sin(x) * (1.0 - np.cos(y)),
            par[1] * (1.0 - np.cos(x)) * np.sin(y))
