"""Mesoscopic exchange coefficients.

``gamma2(a1, a2)`` is the time integral of the equilibrium autocorrelation of
the edge current for two uncoupled sites on the shells ``a1``, ``a2``. The
drift follows from the fluctuation-dissipation identity

    alpha = (d/da1 - d/da2) gamma2 + (Z'/Z(a1) - Z'/Z(a2)) gamma2,

and tables are stored through ``G = gamma2 / (a1 a2)`` so that the
degeneracy on the axes is exact.
"""

from dataclasses import dataclass, field
import json
from pathlib import Path

import numpy as np

from . import _rng
from .analysis import jackknife, trajectory_correlations, truncation_lag, fit_decay_rate
from .model import CURRENT_CONVENTION, Lattice, PhaseState
from .microsim import SimParams, run_ensemble
from .shell import log_z_derivative, sample_product_shells


@dataclass(frozen=True)
class GKParams:
    n_traj: int = 10000
    T_max: float = 20.0
    h: float = 1e-3
    record_stride: int = 20
    max_lag_fraction: float = 0.6
    n_windows: int = 5
    tail_extrapolation: bool = False
    block: int = 2500
    threads: int = None

    def __post_init__(self):
        if self.n_traj < 2:
            raise ValueError("need at least two trajectories")
        if not self.h > 0 or not self.T_max > self.h:
            raise ValueError("need 0 < h < T_max")
        if not 0 < self.max_lag_fraction < 1:
            raise ValueError("max_lag_fraction must be in (0, 1)")

    @classmethod
    def for_sigma(cls, sigma, **kw):
        """Horizon ``20 max(1, sigma^-2)``: correlations relax at a rate ~ sigma^2."""
        kw.setdefault("T_max", 20.0 * max(1.0, sigma ** -2))
        return cls(**kw)


@dataclass
class GreenKuboEstimate:
    gamma2: float
    stderr: float
    t_star: float = 0.0
    tau: float = 0.0
    n_traj: int = 0
    warning: str = ""
    tail: float = 0.0


def green_kubo_gamma2(a1, a2, sigma, pp, gk=GKParams(), seed=0, direct=False):
    """Green-Kubo estimate of ``gamma2(a1, a2)``.

    Trajectories of the uncoupled pair start from ``mu_a1 x mu_a2``; the
    current ``j[0,1]`` is correlated over all time origins within each
    trajectory, the ensemble mean is integrated up to the adaptive lag
    ``T*``, and the stderr is a jackknife over trajectories. On the axes
    the value is exactly 0 unless ``direct=True`` asks for the estimate.
    """
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    if a1 < 0 or a2 < 0:
        raise ValueError("energies must be >= 0")
    if (a1 == 0 or a2 == 0) and not direct:
        return GreenKuboEstimate(0.0, 0.0)
    lat = Lattice((2,))
    n_rec = int(round(gk.T_max / gk.h)) // gk.record_stride + 1
    dt = gk.record_stride * gk.h
    max_lag = int(gk.max_lag_fraction * (n_rec - 1))
    params = SimParams(0.0, sigma, gk.h, gk.T_max, seed, gk.record_stride)
    acf = np.empty((gk.n_traj, max_lag + 1))
    for start in range(0, gk.n_traj, gk.block):
        ids = np.arange(start, min(start + gk.block, gk.n_traj))
        q, p = sample_product_shells([a1, a2], pp, seed, ids)
        _, _, out = run_ensemble(PhaseState(q, p), params, pp, lat, ["j[0,1]"],
                                 ids, gk.threads)
        acf[ids] = trajectory_correlations(out[:, :, 0], max_lag)
    C = acf.mean(axis=0)
    se = acf.std(axis=0, ddof=1) / np.sqrt(gk.n_traj)
    if C[0] <= 0:
        # zero current on both shells
        return GreenKuboEstimate(0.0, 0.0, 0.0, 0.0, gk.n_traj, "vanishing current")
    k_star, tau, found = truncation_lag(C, se, dt, gk.n_windows)
    warning = []
    if not found:
        warning.append("no truncation lag inside the recorded window")
    if gk.T_max < 10 * tau:
        warning.append(f"T_max below 10 correlation times (tau = {tau:.3g})")
    per_traj = np.trapezoid(acf[:, : k_star + 1], dx=dt, axis=1)
    est, err = jackknife(per_traj)
    tail = 0.0
    if gk.tail_extrapolation and k_star * dt > 2 * tau:
        try:
            fit = fit_decay_rate(C, (tau, k_star * dt), dt=dt, envelope=True)
            if fit.accepted:
                tail = float(C[k_star] / fit.rate)
        except ValueError:
            warning.append("tail fit failed")
    return GreenKuboEstimate(float(est + tail), float(err), float(k_star * dt),
                             float(tau), gk.n_traj, "; ".join(warning), tail)


def harmonic_coefficients(a1, a2, sigma, kappa=2.0):
    """Exact ``(gamma2, alpha)`` for the quadratic pinning and spring ``(kappa/2)|x|^2``.

    With the default ``kappa = 2`` these are ``a1 a2 / sigma^2`` and
    ``2 (a2 - a1) / sigma^2``.
    """
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    a1 = np.asarray(a1, dtype=float)
    a2 = np.asarray(a2, dtype=float)
    if np.any(a1 < 0) or np.any(a2 < 0):
        raise ValueError("energies must be >= 0")
    g0 = kappa ** 2 / (4.0 * sigma ** 2)
    g2, al = g0 * a1 * a2, 2.0 * g0 * (a2 - a1)
    if g2.ndim == 0:
        return float(g2), float(al)
    return g2, al


def _fill_axes(G):
    """Constant extension of ``G`` from the first positive grid value onto the axes."""
    G = G.copy()
    G[0, 1:] = G[1, 1:]
    G[1:, 0] = G[1:, 1]
    G[0, 0] = G[1, 1]
    return G


def _locate(grid, x):
    """Cell index and weight for bilinear interpolation; raises outside the hull."""
    x = np.asarray(x, dtype=float)
    if np.any(x < grid[0]) or np.any(x > grid[-1]) or np.any(~np.isfinite(x)):
        raise ValueError(f"query {x} outside the table hull [{grid[0]}, {grid[-1]}]")
    i = np.clip(np.searchsorted(grid, x, side="right") - 1, 0, len(grid) - 2)
    w = (x - grid[i]) / (grid[i + 1] - grid[i])
    return i, w


def _bilinear(grid, M, x, y):
    i, u = _locate(grid, x)
    k, w = _locate(grid, y)
    return ((1 - u) * (1 - w) * M[i, k] + u * (1 - w) * M[i + 1, k]
            + (1 - u) * w * M[i, k + 1] + u * w * M[i + 1, k + 1])


@dataclass
class CoefficientTable:
    """Coefficients on all ordered pairs of a sorted energy grid starting at 0."""

    sigma: float
    grid: np.ndarray
    gamma2: np.ndarray
    gamma2_stderr: np.ndarray
    G: np.ndarray
    alpha: np.ndarray
    alpha_stderr: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def hull(self):
        return float(self.grid[0]), float(self.grid[-1])

    @classmethod
    def from_cells(cls, grid, sigma, gamma2, gamma2_stderr, pp, meta=None):
        """Complete a table from ``gamma2`` estimates; ``alpha`` follows from the identity.

        ``gamma2`` must be symmetric; values on the axes are replaced by 0.
        """
        grid = np.asarray(grid, dtype=float)
        _check_grid(grid)
        g2 = np.array(gamma2, dtype=float)
        se = np.array(gamma2_stderr, dtype=float)
        g2[0, :] = g2[:, 0] = 0.0
        se[0, :] = se[:, 0] = 0.0
        aa = np.multiply.outer(grid, grid)
        G = np.zeros_like(g2)
        inner = aa > 0
        G[inner] = g2[inner] / aa[inner]
        G = _fill_axes(G)
        tbl = cls(float(sigma), grid, g2, se, G, np.zeros_like(g2), np.zeros_like(g2),
                  dict(meta or {}))
        M = len(grid)
        Gse = np.zeros_like(g2)
        Gse[inner] = se[inner] / aa[inner]
        Gse = _fill_axes(Gse)
        for i in range(M):
            for k in range(M):
                a, s = alpha_from_table(grid[i], grid[k], tbl, pp, _Gse=Gse)
                tbl.alpha[i, k], tbl.alpha_stderr[i, k] = a, s
        tbl.meta.setdefault("sign_convention", CURRENT_CONVENTION)
        tbl.meta.setdefault("potential", pp.describe())
        return tbl

    @classmethod
    def from_function(cls, grid, sigma, gamma2_fn, pp, meta=None):
        """Table of an exactly known ``gamma2`` (stderr 0)."""
        grid = np.asarray(grid, dtype=float)
        A1, A2 = np.meshgrid(grid, grid, indexing="ij")
        g2 = np.asarray(gamma2_fn(A1, A2), dtype=float)
        return cls.from_cells(grid, sigma, g2, np.zeros_like(g2), pp, meta)

    def save(self, path):
        """CSV ``a1,a2,gamma2,gamma2_stderr,G,alpha,alpha_stderr`` plus a JSON sidecar."""
        path = Path(path)
        with open(path, "w") as fh:
            fh.write("a1,a2,gamma2,gamma2_stderr,G,alpha,alpha_stderr\n")
            for i, a1 in enumerate(self.grid):
                for k, a2 in enumerate(self.grid):
                    vals = (a1, a2, self.gamma2[i, k], self.gamma2_stderr[i, k],
                            self.G[i, k], self.alpha[i, k], self.alpha_stderr[i, k])
                    fh.write(",".join(repr(float(v)) for v in vals) + "\n")
        side = {"sigma": self.sigma, "grid": [float(a) for a in self.grid],
                "meta": self.meta}
        path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        side = json.loads(path.with_suffix(".json").read_text())
        grid = np.array(side["grid"], dtype=float)
        M = len(grid)
        rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if rows.shape != (M * M, 7):
            raise ValueError("table CSV does not match its sidecar grid")
        cols = [rows[:, c].reshape(M, M) for c in range(2, 7)]
        return cls(float(side["sigma"]), grid, *cols, meta=side["meta"])

    def evaluate(self, a1, a2):
        return interpolate(self, a1, a2)


def _check_grid(grid):
    if grid.ndim != 1 or len(grid) < 2:
        raise ValueError("grid needs at least two points")
    if grid[0] != 0 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing and start at 0")


def interpolate(tbl, a1, a2):
    """``(gamma2, alpha)`` at ``(a1, a2)`` inside the hull.

    ``gamma2 = a1 a2 G`` with bilinear ``G``; ``alpha`` is interpolated
    bilinearly and antisymmetrized.
    """
    g = _bilinear(tbl.grid, tbl.G, a1, a2)
    g2 = np.asarray(a1) * np.asarray(a2) * g
    al = 0.5 * (_bilinear(tbl.grid, tbl.alpha, a1, a2)
                - _bilinear(tbl.grid, tbl.alpha, a2, a1))
    if np.ndim(g2) == 0:
        return float(g2), float(al)
    return g2, al


def _alpha_from_G(a1, a2, grid, G, pp):
    amax = grid[-1]
    if a1 == 0 and a2 == 0:
        return 0.0
    if a1 == 0:
        return 2.0 * a2 * _bilinear(grid, G, 0.0, a2)
    if a2 == 0:
        return -2.0 * a1 * _bilinear(grid, G, a1, 0.0)

    def f(x, y):
        return x * y * _bilinear(grid, G, x, y)

    d = 1e-2 * max(a1, a2)
    d_fwd = min(d, a2, amax - a1)
    d_bwd = min(d, a1, amax - a2)
    if d_fwd + d_bwd == 0:
        deriv = 0.0
    else:
        deriv = (f(a1 + d_fwd, a2 - d_fwd) - f(a1 - d_bwd, a2 + d_bwd)) / (d_fwd + d_bwd)
    zl = log_z_derivative(a1, pp) - log_z_derivative(a2, pp)
    return float(deriv + zl * f(a1, a2))


def alpha_from_table(a1, a2, tbl, pp, _Gse=None):
    """Drift from the fluctuation-dissipation identity; returns ``(alpha, stderr)``.

    The derivative term is a central difference along ``(1, -1)`` of the
    interpolant ``a1 a2 G`` (one-sided at the hull edge). On the axes the
    finite limit ``alpha(0, a) = 2 a G(0, a)`` is used. The stderr
    propagates the independent cell errors of ``G`` linearly.
    """
    a1, a2 = float(a1), float(a2)
    _locate(tbl.grid, a1)
    _locate(tbl.grid, a2)
    grid = tbl.grid
    base = _alpha_from_G(a1, a2, grid, tbl.G, pp)
    if _Gse is None:
        aa = np.multiply.outer(grid, grid)
        _Gse = np.zeros_like(tbl.G)
        _Gse[aa > 0] = tbl.gamma2_stderr[aa > 0] / aa[aa > 0]
        _Gse = _fill_axes(_Gse)
    M = len(grid)
    var = 0.0
    # alpha is linear in G; each independent cell (i <= k, both > 0) moves
    # its mirror and the axis copies with it
    for i in range(1, M):
        for k in range(i, M):
            if _Gse[i, k] == 0:
                continue
            unit = np.zeros((M, M))
            unit[i, k] = unit[k, i] = 1.0
            unit = _fill_axes(unit)
            var += (_alpha_from_G(a1, a2, grid, unit, pp) * _Gse[i, k]) ** 2
    return base, float(np.sqrt(var))


def default_grid():
    return np.concatenate([[0.0], 2.0 ** np.arange(-3, 4)])


def tabulate(grid, sigma, pp, gk=GKParams(), seed=0, progress=None):
    """Estimate ``gamma2`` on the cells ``0 < a1 <= a2`` and complete the table.

    Each cell has its own seed derived from the root seed and its indices.
    A cell whose estimate raises is stored as NaN and listed under
    ``meta["failed_cells"]``.
    """
    grid = np.asarray(grid, dtype=float)
    _check_grid(grid)
    M = len(grid)
    g2 = np.zeros((M, M))
    se = np.zeros((M, M))
    cells = {}
    failed = []
    for i in range(1, M):
        for k in range(i, M):
            s = _rng.derive_seed(seed, _rng.CELL, i, k)
            try:
                est = green_kubo_gamma2(grid[i], grid[k], sigma, pp, gk, s)
                g2[i, k] = g2[k, i] = est.gamma2
                se[i, k] = se[k, i] = est.stderr
                cells[f"{i},{k}"] = {"seed": s, "t_star": est.t_star, "tau": est.tau,
                                     "warning": est.warning, "tail": est.tail}
            except Exception as exc:  # noqa: BLE001 - recorded per cell
                g2[i, k] = g2[k, i] = np.nan
                se[i, k] = se[k, i] = np.nan
                failed.append({"cell": [i, k], "error": str(exc)})
            if progress is not None:
                progress(i, k)
    meta = {"root_seed": int(seed), "n_traj": gk.n_traj, "T_max": gk.T_max,
            "h": gk.h, "record_stride": gk.record_stride,
            "tail_extrapolation": gk.tail_extrapolation, "cells": cells,
            "failed_cells": failed}
    return CoefficientTable.from_cells(grid, sigma, g2, se, pp, meta)
