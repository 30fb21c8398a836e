"""Single-site microcanonical geometry.

The map ``psi(q, p) = (r, xi, eta)`` sends a nonzero phase point to
``(0, inf) x S^3`` with ``r^2`` the site energy. Its inverse is

    q = r theta(r^2 |xi|^2) xi,   p = sqrt(2) r eta,

with ``rho`` the inverse of ``Ubar`` and ``theta(z) = sqrt(rho(z) / z)``.
In these coordinates the microcanonical law on the shell of energy ``a`` has
density proportional to ``1 / Ubar'(rho(a |xi|^2))`` against the uniform
measure on ``S^3``, and the density of states is

    Z(a) = 4 omega_4 a int_{S^3} [Ubar'(rho(a |xi|^2))]^-1 dsigma,

``omega_4 = pi^2 / 2``. Under the uniform law on ``S^3`` the quantity
``|xi|^2`` is uniform on ``[0, 1]``, which turns every sphere integral of a
function of ``|xi|^2`` into a one-dimensional one.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import _rng

OMEGA_4 = np.pi ** 2 / 2


class RootFindingError(RuntimeError):
    pass


def rho(z, pp, tol=1e-12, maxiter=100):
    """Inverse of ``Ubar`` by safeguarded Newton, vectorized.

    The bracket ``[z / sup Ubar', z / inf Ubar']`` follows from the
    derivative bounds and lies inside ``[z / c, c z]``.
    """
    z = np.asarray(z, dtype=float)
    if np.any(z < 0):
        raise ValueError("rho is defined for z >= 0")
    if pp.ubar == "harmonic":
        return 2.0 * z
    lo_d, hi_d = pp.ubar_prime_bounds
    lo = z / hi_d
    hi = z / lo_d
    r = 0.5 * (lo + hi)
    scale = np.maximum(1.0, z)
    for _ in range(maxiter):
        g = pp.ubar_value(r) - z
        done = np.abs(g) <= tol * scale
        if np.all(done):
            return r
        lo = np.where(g < 0, r, lo)
        hi = np.where(g > 0, r, hi)
        step = r - g / pp.ubar_prime(r)
        bad = (step <= lo) | (step >= hi)
        r = np.where(done, r, np.where(bad, 0.5 * (lo + hi), step))
    g = pp.ubar_value(r) - z
    if np.all(np.abs(g) <= tol * scale):
        return r
    raise RootFindingError("inverse of Ubar did not converge")


@lru_cache(maxsize=4096)
def rho_cached(z, pp):
    """Memoized scalar ``rho``."""
    return float(rho(float(z), pp))


def theta(z, pp):
    """``sqrt(rho(z) / z)``, continued by ``sqrt(1 / Ubar'(0))`` at 0."""
    z = np.asarray(z, dtype=float)
    safe = np.where(z > 0, z, 1.0)
    val = np.sqrt(rho(safe, pp) / safe)
    return np.where(z > 0, val, np.sqrt(1.0 / pp.ubar_prime(0.0)))


@dataclass
class SphereCoord:
    """``(r, xi, eta)`` with ``|xi|^2 + |eta|^2 = 1``; arrays broadcast over a batch."""

    r: np.ndarray
    xi: np.ndarray
    eta: np.ndarray

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=float)
        self.xi = np.asarray(self.xi, dtype=float)
        self.eta = np.asarray(self.eta, dtype=float)
        if np.any(self.r < 0):
            raise ValueError("r must be >= 0")
        norm = np.sum(self.xi ** 2, -1) + np.sum(self.eta ** 2, -1)
        if np.any(np.abs(norm - 1.0) > 1e-12):
            raise ValueError("(xi, eta) must lie on the unit 3-sphere")


def psi(q, p, pp):
    """Regularizing coordinates of a nonzero phase point."""
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    qq = np.sum(q ** 2, -1)
    pp2 = np.sum(p ** 2, -1)
    u = pp.ubar_value(qq)
    energy = 0.5 * pp2 + u
    if np.any(energy <= 0):
        raise ValueError("psi is undefined at the origin of phase space")
    r = np.sqrt(energy)
    qn = np.sqrt(np.where(qq > 0, qq, 1.0))
    xi = q * (np.sqrt(u) / (qn * r))[..., None]
    eta = p / np.sqrt(pp2 + 2.0 * u)[..., None]
    # renormalize away the last rounding of the two pieces
    norm = np.sqrt(np.sum(xi ** 2, -1) + np.sum(eta ** 2, -1))[..., None]
    return SphereCoord(r, xi / norm, eta / norm)


def psi_inv_arrays(r, xi, eta, pp):
    r = np.asarray(r, dtype=float)
    xi = np.asarray(xi, dtype=float)
    eta = np.asarray(eta, dtype=float)
    z = r ** 2 * np.sum(xi ** 2, -1)
    q = (r * theta(z, pp))[..., None] * xi
    p = np.sqrt(2.0) * r[..., None] * eta
    return q, p


def psi_inv(sc, pp):
    """Phase point with coordinates ``sc``; returns ``(q, p)``."""
    return psi_inv_arrays(sc.r, sc.xi, sc.eta, pp)


def _sphere_points(normals):
    return normals / np.linalg.norm(normals, axis=-1, keepdims=True)


def _accept_prob(a, s2, pp):
    lo_d, _ = pp.ubar_prime_bounds
    w = lo_d / pp.ubar_prime(rho(a * s2, pp))
    c = pp.c
    if np.any(w > 1.0 + 1e-12) or np.any(w < c ** -2 * (1 - 1e-12)):
        raise AssertionError("acceptance probability outside [c^-2, 1]")
    return w


def sample_shell(a, pp, rng, size=None, return_rate=False):
    """Exact draws from the microcanonical law of energy ``a``.

    Proposals are uniform on ``S^3`` (normalized 4-d Gaussians), accepted
    with probability ``inf Ubar' / Ubar'(rho(a |xi|^2))``, and mapped back by
    ``psi_inv(sqrt(a), xi, eta)``. ``rng`` is a ``numpy.random.Generator``.
    Returns ``(q, p)`` with shape ``(2,)`` each, or ``(size, 2)``.
    """
    if a < 0:
        raise ValueError("energy must be >= 0")
    n = 1 if size is None else int(size)
    if a == 0:
        q = np.zeros((n, 2))
        out = (q, q.copy())
        rate = 1.0
    else:
        pts = np.empty((0, 4))
        proposed = accepted = 0
        while len(pts) < n:
            lo_d, hi_d = pp.ubar_prime_bounds
            m = int(1.2 * (n - len(pts)) * hi_d / lo_d) + 16
            x = _sphere_points(rng.standard_normal((m, 4)))
            w = _accept_prob(a, np.sum(x[:, :2] ** 2, -1), pp)
            keep = rng.random(m) < w
            proposed += m
            accepted += int(keep.sum())
            pts = np.concatenate([pts, x[keep]])
        pts = pts[:n]
        rate = accepted / proposed
        out = psi_inv_arrays(np.full(n, np.sqrt(a)), pts[:, :2], pts[:, 2:], pp)
    if size is None:
        out = (out[0][0], out[1][0])
    return (out, rate) if return_rate else out


def sample_product_shells(energies, pp, seed, traj_ids, max_attempts=10000):
    """Counter-based draws from ``prod_i mu_{a_i}``, one per trajectory id.

    Returns ``(q, p)`` of shape ``(B, N, 2)``. Each (trajectory, site) pair
    owns a stream, so a draw depends only on its ids and the seed.
    """
    a = np.asarray(energies, dtype=float)
    if np.any(a < 0):
        raise ValueError("energies must be >= 0")
    traj_ids = np.asarray(traj_ids, dtype=np.int64)
    B, N = len(traj_ids), len(a)
    keys = _rng.stream_keys(seed, _rng.SHELL, traj_ids[:, None], np.arange(N)[None, :])
    pts = np.zeros((B, N, 4))
    todo = np.broadcast_to(a > 0, (B, N)).copy()
    aa = np.broadcast_to(a, (B, N))
    attempt = 0
    while np.any(todo):
        if attempt >= max_attempts:
            raise RuntimeError("shell sampler exceeded its attempt budget")
        k = keys[todo]
        g = np.stack(_rng.normal_pairs(k, 3 * attempt)
                     + _rng.normal_pairs(k, 3 * attempt + 1), axis=-1)
        x = _sphere_points(g)
        u = _rng.uniforms(k, 6 * attempt + 4)
        w = _accept_prob(aa[todo], np.sum(x[:, :2] ** 2, -1), pp)
        acc = u <= w
        idx = np.nonzero(todo)
        rows, cols = idx[0][acc], idx[1][acc]
        pts[rows, cols] = x[acc]
        todo[rows, cols] = False
        attempt += 1
    r = np.sqrt(np.broadcast_to(a, (B, N)))
    return psi_inv_arrays(r, pts[..., :2], pts[..., 2:], pp)


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(64)


def _inv_ubar_prime_integral(a, pp):
    """``I(a) = int_{S^3} 1/Ubar'(rho(a |xi|^2)) dsigma = int_0^1 ds / Ubar'(rho(a s))``."""
    s = 0.5 * (_GL_NODES + 1.0)
    vals = 1.0 / pp.ubar_prime(rho(a * s, pp))
    return 0.5 * float(np.dot(_GL_WEIGHTS, vals))


def partition_z(a, pp, n=10 ** 6, method="mc", seed=0):
    """Density of states ``Z(a)``; returns ``(estimate, stderr)``.

    ``method="mc"`` averages the weight over ``n`` uniform points of ``S^3``
    (counter-based stream from ``seed``); ``method="quadrature"`` integrates
    the same weight exactly in ``|xi|^2`` (Gauss-Legendre, stderr 0).
    """
    if a < 0:
        raise ValueError("energy must be >= 0")
    if a == 0:
        return 0.0, 0.0
    pref = 4.0 * OMEGA_4 * a
    if method == "quadrature":
        return pref * _inv_ubar_prime_integral(a, pp), 0.0
    if method != "mc":
        raise ValueError(f"unknown method {method!r}")
    keys = _rng.stream_keys(seed, _rng.SHELL, np.arange(int(n)), 0)
    g = np.stack(_rng.normal_pairs(keys, 0) + _rng.normal_pairs(keys, 1), axis=-1)
    x = _sphere_points(g)
    w = 1.0 / pp.ubar_prime(rho(a * np.sum(x[:, :2] ** 2, -1), pp))
    return pref * float(w.mean()), pref * float(w.std(ddof=1) / np.sqrt(len(w)))


def log_z_derivative(a, pp, delta=None):
    """``Z'(a) / Z(a) = 1/a + I'(a) / I(a)`` with ``I'`` by central differences."""
    if not a > 0:
        raise ValueError("log-derivative of Z needs a > 0")
    if pp.ubar == "harmonic":
        return 1.0 / a
    d = max(1e-3 * a, 1e-6) if delta is None else delta
    d = min(d, 0.5 * a)
    i0 = _inv_ubar_prime_integral(a, pp)
    ip = _inv_ubar_prime_integral(a + d, pp)
    im = _inv_ubar_prime_integral(a - d, pp)
    return 1.0 / a + (ip - im) / (2.0 * d * i0)


def _weighted_sphere(a, pp, x):
    s2 = np.sum(x[:, :2] ** 2, -1)
    w = 1.0 / pp.ubar_prime(rho(a * s2, pp))
    q, p = psi_inv_arrays(np.full(len(x), np.sqrt(a)), x[:, :2], x[:, 2:], pp)
    return q, p, w


def check_integration_by_parts(a, f, g, pp, n=10 ** 6, seed=0, df=None,
                               delta=None, n_batches=100):
    """Residual of ``mu_a(g d_{p1} f) = d_a mu_a(g p1 f) + (Z'/Z)(a) mu_a(g p1 f)``.

    ``f(q, p)`` and ``g(q)`` act on arrays of shape ``(n, 2)``; ``df`` is the
    derivative of ``f`` along the first momentum coordinate (central
    differences when omitted). All three shells ``a`` and ``a +- delta`` are
    evaluated on the same sphere points. Returns ``(residual, stderr)``
    with the stderr from batch means.
    """
    if not a > 0:
        raise ValueError("needs a > 0")
    d = max(1e-3 * a, 1e-6) if delta is None else delta
    if df is None:
        def df(q, p, _h=1e-6):
            e = np.zeros_like(p)
            e[:, 0] = _h
            return (f(q, p + e) - f(q, p - e)) / (2 * _h)
    keys = _rng.stream_keys(seed, _rng.SHELL, np.arange(int(n)), 1)
    gauss = np.stack(_rng.normal_pairs(keys, 0) + _rng.normal_pairs(keys, 1), axis=-1)
    x = _sphere_points(gauss)
    zlog = log_z_derivative(a, pp)

    def pieces(aa):
        q, p, w = _weighted_sphere(aa, pp, x)
        return w, g(q) * p[:, 0] * f(q, p), g(q) * df(q, p)

    w0, m0, l0 = pieces(a)
    wp, mp, _ = pieces(a + d)
    wm, mm, _ = pieces(a - d)

    def residual(sl):
        lhs = np.sum(w0[sl] * l0[sl]) / np.sum(w0[sl])
        mean0 = np.sum(w0[sl] * m0[sl]) / np.sum(w0[sl])
        deriv = (np.sum(wp[sl] * mp[sl]) / np.sum(wp[sl])
                 - np.sum(wm[sl] * mm[sl]) / np.sum(wm[sl])) / (2 * d)
        return lhs - deriv - zlog * mean0

    full = residual(slice(None))
    edges = np.linspace(0, len(x), n_batches + 1).astype(int)
    batch = np.array([residual(slice(lo, hi)) for lo, hi in zip(edges[:-1], edges[1:])])
    return float(full), float(batch.std(ddof=1) / np.sqrt(n_batches))
