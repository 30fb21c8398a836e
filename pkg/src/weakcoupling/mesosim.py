"""Conservative energy-exchange diffusion on the lattice.

Each undirected edge ``(i, k)`` carries one exchange per step,

    delta = alpha(e_i, e_k) h + sqrt(2 gamma2(e_i, e_k) h) z,
    e_i += delta,  e_k -= delta,

with ``z`` standard normal. Coefficients are evaluated at the energies at
the start of the step; the exchanges are then applied edge by edge, each
clamped to ``[-e_i, e_k]`` so no energy crosses 0. The total energy changes
only by rounding.
"""

from dataclasses import asdict, dataclass
import json

import numpy as np
import numba as nb
from scipy import stats

from . import _rng
from .coefficients import CoefficientTable, harmonic_coefficients, interpolate


class HarmonicSource:
    """Closed-form coefficients for the quadratic family."""

    def __init__(self, sigma, kappa=2.0):
        if not sigma > 0:
            raise ValueError("sigma must be > 0")
        self.sigma = float(sigma)
        self.kappa = float(kappa)
        self.hull = None

    def evaluate(self, a1, a2):
        return harmonic_coefficients(a1, a2, self.sigma, self.kappa)

    def kernel_args(self):
        g0 = self.kappa ** 2 / (4.0 * self.sigma ** 2)
        dummy = np.zeros((2, 2))
        return 0, g0, np.array([0.0, 1.0]), dummy, dummy

    def describe(self):
        return {"source": "harmonic", "sigma": self.sigma, "kappa": self.kappa}


class TableSource:
    """Coefficients interpolated from a ``CoefficientTable``."""

    def __init__(self, tbl: CoefficientTable):
        if not np.all(np.isfinite(tbl.G)) or not np.all(np.isfinite(tbl.alpha)):
            raise ValueError("table has failed cells")
        self.tbl = tbl
        self.hull = tbl.hull

    def evaluate(self, a1, a2):
        return interpolate(self.tbl, a1, a2)

    def kernel_args(self):
        return (1, 0.0, np.ascontiguousarray(self.tbl.grid),
                np.ascontiguousarray(self.tbl.G), np.ascontiguousarray(self.tbl.alpha))

    def describe(self):
        return {"source": "table", "sigma": self.tbl.sigma, "grid": list(self.tbl.grid)}


def as_source(coeffs):
    if isinstance(coeffs, CoefficientTable):
        return TableSource(coeffs)
    return coeffs


@dataclass(frozen=True)
class MesoParams:
    h: float = 1e-3
    T: float = 1.0
    seed: int = 0
    record_stride: int = 1
    beta: float = 1.0

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("h must be > 0")
        if not self.T >= self.h:
            raise ValueError("need h <= T")
        if not self.beta > 0:
            raise ValueError("beta must be > 0")
        if int(self.record_stride) < 1:
            raise ValueError("record_stride must be a positive integer")

    @property
    def nsteps(self):
        return int(round(self.T / self.h))


def meso_step(e, h, coeffs, lat, normals):
    """One step for a single configuration; returns ``(e_new, n_clamped)``.

    ``normals`` holds one standard normal per edge, in the order of
    ``lat.edges``.
    """
    e = np.array(e, dtype=float)
    if np.any(e < 0) or not np.all(np.isfinite(e)):
        raise ValueError("energies must be finite and >= 0")
    normals = np.asarray(normals, dtype=float)
    edges = lat.edges
    if len(normals) != len(edges):
        raise ValueError("one normal per edge expected")
    if len(edges) == 0:
        return e, 0
    src = as_source(coeffs)
    g2, al = src.evaluate(e[edges[:, 0]], e[edges[:, 1]])
    delta = np.asarray(al) * h + np.sqrt(2.0 * np.maximum(g2, 0.0) * h) * normals
    clamped = 0
    for (i, k), d in zip(edges, delta):
        lo, hi = -e[i], e[k]
        if d < lo or d > hi:
            d = lo if d < lo else hi
            clamped += 1
        e[i] += d
        e[k] -= d
    return e, clamped


@nb.njit(inline="always")
def _locate_nb(grid, x):
    m = len(grid)
    i = np.searchsorted(grid, x, side="right") - 1
    if i > m - 2:
        i = m - 2
    if i < 0:
        i = 0
    return i, (x - grid[i]) / (grid[i + 1] - grid[i])


@nb.njit(inline="always")
def _bilinear_nb(grid, M, x, y):
    i, u = _locate_nb(grid, x)
    k, w = _locate_nb(grid, y)
    return ((1 - u) * (1 - w) * M[i, k] + u * (1 - w) * M[i + 1, k]
            + (1 - u) * w * M[i, k + 1] + u * w * M[i + 1, k + 1])


@nb.njit(inline="always")
def _coeffs_nb(src, g0, grid, G, A, x, y):
    if src == 0:
        return g0 * x * y, 2.0 * g0 * (y - x)
    g2 = x * y * _bilinear_nb(grid, G, x, y)
    al = 0.5 * (_bilinear_nb(grid, A, x, y) - _bilinear_nb(grid, A, y, x))
    return g2, al


@nb.njit(parallel=True, cache=True)
def _meso_kernel(e, keys, edges, h, nsteps, stride, src, g0, grid, G, A,
                 out, clamps, status):
    P, N = e.shape
    E = edges.shape[0]
    lo, hi = grid[0], grid[-1]
    sq = np.sqrt(2.0 * h)
    for b in nb.prange(P):
        eb = e[b]
        delta = np.empty(E)
        for n in range(N):
            out[b, 0, n] = eb[n]
        rec = 1
        for step in range(nsteps):
            for ed in range(E):
                i = edges[ed, 0]
                k = edges[ed, 1]
                x = eb[i]
                y = eb[k]
                if src == 1 and (x < lo or x > hi or y < lo or y > hi):
                    status[b] = step + 1
                    break
                g2, al = _coeffs_nb(src, g0, grid, G, A, x, y)
                z = _rng.normal_pair_nb(keys[b, ed], step)[0]
                delta[ed] = al * h + sq * np.sqrt(max(g2, 0.0)) * z
            if status[b] != 0:
                break
            for ed in range(E):
                i = edges[ed, 0]
                k = edges[ed, 1]
                d = delta[ed]
                if d < -eb[i]:
                    d = -eb[i]
                    clamps[b] += 1
                elif d > eb[k]:
                    d = eb[k]
                    clamps[b] += 1
                eb[i] += d
                eb[k] -= d
            if (step + 1) % stride == 0:
                for n in range(N):
                    out[b, rec, n] = eb[n]
                rec += 1


def meso_keys(seed, path_ids, n_edges):
    path_ids = np.asarray(path_ids, dtype=np.int64)
    return _rng.stream_keys(seed, _rng.MESO, path_ids[:, None],
                            np.arange(max(n_edges, 1))[None, :])


@dataclass
class MesoPath:
    """``e`` has shape ``(n_records, P, N)``."""

    t: np.ndarray
    e: np.ndarray
    clamps: np.ndarray
    n_updates: int

    @property
    def clamp_frequency(self):
        return float(self.clamps.sum() / self.n_updates) if self.n_updates else 0.0

    def to_csv(self, path, member=0):
        with open(path, "w") as fh:
            N = self.e.shape[2]
            fh.write(",".join(["t"] + [f"e_{n + 1}" for n in range(N)]) + "\n")
            for t, row in zip(self.t, self.e[:, member, :]):
                fh.write(",".join(repr(float(v)) for v in (t, *row)) + "\n")


def meso_simulate(e0, params, coeffs, lat, path_ids=None, threads=None):
    """Euler-Maruyama paths from ``e0`` (shape ``(N,)`` or ``(P, N)``).

    Path ``p`` draws its increments from streams keyed by
    ``(seed, path_ids[p], edge)`` and indexed by the step number.
    """
    e = np.array(e0, dtype=np.float64)
    if e.ndim == 1:
        e = e[None, :]
    if e.shape[1] != lat.N:
        raise ValueError("initial energies do not match the lattice")
    if np.any(e < 0) or not np.all(np.isfinite(e)):
        raise ValueError("initial energies must be finite and >= 0")
    P = e.shape[0]
    path_ids = np.arange(P) if path_ids is None else np.asarray(path_ids, dtype=np.int64)
    if len(path_ids) != P:
        raise ValueError("one path id per initial condition expected")
    src = as_source(coeffs)
    hull = getattr(src, "hull", None)
    if hull is not None and (np.any(e < hull[0]) or np.any(e > hull[1])):
        raise ValueError(f"initial energies outside the coefficient hull {hull}")
    edges = np.ascontiguousarray(lat.edges.reshape(-1, 2))
    nsteps = params.nsteps
    stride = int(params.record_stride)
    n_rec = nsteps // stride + 1
    out = np.zeros((P, n_rec, lat.N))
    clamps = np.zeros(P, dtype=np.int64)
    status = np.zeros(P, dtype=np.int64)
    keys = meso_keys(params.seed, path_ids, len(edges))
    if threads is not None:
        nb.set_num_threads(int(threads))
    code, g0, grid, G, A = src.kernel_args()
    _meso_kernel(e, keys, edges, float(params.h), nsteps, stride, code, float(g0),
                 grid, G, A, out, clamps, status)
    if np.any(status):
        b = int(np.argmax(status != 0))
        raise ValueError(f"path {int(path_ids[b])} left the coefficient hull {hull} "
                         f"at step {int(status[b])}: energies {e[b]}")
    t = np.arange(n_rec) * stride * params.h
    return MesoPath(t, np.ascontiguousarray(out.transpose(1, 0, 2)), clamps,
                    P * nsteps * len(edges))


def conditioned_cdf(S, n_sites, pp, n_grid=4001):
    """CDF of ``e_1`` under the product of ``Z(a) da`` conditioned on ``sum e = S``."""
    from .shell import partition_z
    x = np.linspace(0.0, S, n_grid)
    z = np.array([partition_z(a, pp, method="quadrature")[0] for a in x])
    dx = x[1] - x[0]
    w = z.copy()
    for _ in range(n_sites - 2):
        w = np.convolve(w, z)[:n_grid] * dx
    dens = z * w[::-1]
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * dx)])
    cum /= cum[-1]
    return lambda v: np.interp(v, x, cum)


@dataclass
class StationarityReport:
    ks: float
    n_samples: int
    n_paths: int
    total: float
    burn_in: float
    spacing: float
    relaxation_time: float
    clamp_frequency: float
    ks_halves: float
    burn_in_ok: bool
    mean: float
    var: float
    beta: float

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def stationarity_check(lat, coeffs, pp, beta=1.0, total=2.0, n_samples=10 ** 5,
                       n_paths=1000, h=1e-3, seed=0, relaxation_time=None,
                       halves_tol=0.03, threads=None):
    """Long-run law of ``e_1`` at fixed total energy versus ``Z(e_1) W(S - e_1)``.

    ``W`` is the density of the total energy of the remaining sites. Paths
    start from the even split. Unless supplied, the relaxation time comes
    from a pilot run (fitted decay of the ``e_1`` autocorrelation); burn-in
    is five relaxation times and samples are one relaxation time apart.
    ``beta`` does not enter: the product weight ``exp(-beta S)`` is constant
    at fixed total.
    """
    from .analysis import fit_decay_rate, trajectory_correlations
    N = lat.N
    if N < 2:
        raise ValueError("stationarity needs at least two sites")
    if not total >= 0:
        raise ValueError("total energy must be >= 0")
    if total == 0:
        return StationarityReport(0.0, int(n_samples), int(n_paths), 0.0, 0.0, 0.0,
                                  0.0, 0.0, 0.0, True, 0.0, 0.0, float(beta))
    e0 = np.full(N, total / N)
    if relaxation_time is None:
        pilot_T = 2.0
        stride = max(1, int(round(0.01 / h)))
        mp = MesoParams(h, pilot_T, _rng.derive_seed(seed, 1), stride)
        pilot = meso_simulate(np.tile(e0, (200, 1)), mp, coeffs, lat, threads=threads)
        x = pilot.e[len(pilot.t) // 4:, :, 0].T - total / N
        dt = stride * h
        C = trajectory_correlations(x, x.shape[1] // 3).mean(0)
        # fit over the positive initial stretch; fall back to the 0.3 crossing
        cross = int(np.argmax(C < 0.3 * C[0])) if np.any(C < 0.3 * C[0]) else len(C) - 1
        relaxation_time = max(dt, cross * dt / np.log(1 / 0.3))
        try:
            fit = fit_decay_rate(C / C[0], (0.0, max(3, cross) * dt), dt=dt)
            if fit.accepted:
                relaxation_time = 1.0 / fit.rate
        except ValueError:
            pass
    spacing = float(relaxation_time)
    burn_in = 5.0 * spacing
    per_path = int(np.ceil(n_samples / n_paths))
    stride = max(1, int(round(spacing / h)))
    spacing = stride * h
    b_steps = max(1, int(round(burn_in / spacing)))
    mp = MesoParams(h, (b_steps + per_path) * stride * h, seed, stride)
    path = meso_simulate(np.tile(e0, (n_paths, 1)), mp, coeffs, lat, threads=threads)
    samples = path.e[b_steps + 1: b_steps + 1 + per_path, :, 0]
    flat = samples.ravel()[: int(n_samples)]
    cdf = conditioned_cdf(total, N, pp)
    ks = stats.kstest(flat, cdf).statistic
    first, second = samples[: per_path // 2].ravel(), samples[per_path // 2:].ravel()
    ks_halves = stats.ks_2samp(first, second).statistic
    return StationarityReport(float(ks), int(len(flat)), int(n_paths), float(total),
                              float(b_steps * stride * h), float(spacing),
                              float(relaxation_time), path.clamp_frequency,
                              float(ks_halves), bool(ks_halves <= halves_tol),
                              float(flat.mean()), float(flat.var()), float(beta))
