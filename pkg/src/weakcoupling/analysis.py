"""Statistical post-processing.

Autocorrelations with error bars, Green-Kubo truncation, exponential
decay-rate fits, distances between one-dimensional samples, and the
micro-versus-meso convergence study.
"""

from dataclasses import asdict, dataclass, field
import json

import numpy as np
from scipy import stats

from . import _rng


@dataclass
class ACF:
    lags: np.ndarray
    values: np.ndarray
    stderr: np.ndarray


def autocorrelation(series, max_lag, n_batches=20):
    """Biased autocovariance ``C(k) = n^-1 sum_s (x_s - m)(x_{s+k} - m)``.

    The standard error of each lag comes from batch means of the lagged
    products. ``C(0)`` is the (1/n) sample variance.
    """
    x = np.asarray(series, dtype=float)
    n = len(x)
    if max_lag < 0 or n < 5 * (max_lag + 1) or n < 2 * n_batches:
        raise ValueError("series too short for the requested lag")
    y = x - x.mean()
    lags = np.arange(max_lag + 1)
    vals = np.empty(max_lag + 1)
    errs = np.empty(max_lag + 1)
    for k in lags:
        prod = y[: n - k] * y[k:]
        vals[k] = prod.sum() / n
        chunks = np.array_split(prod, n_batches)
        means = np.array([c.mean() for c in chunks])
        errs[k] = means.std(ddof=1) / np.sqrt(n_batches) * (n - k) / n
    return ACF(lags, vals, errs)


def trajectory_correlations(x, max_lag):
    """Per-row lagged products averaged over all time origins.

    ``x`` has shape ``(B, n)`` and known mean zero, so no centring is done.
    Row ``b`` of the result is ``C_b(k) = (n - k)^-1 sum_s x_s x_{s+k}``.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[1]
    if max_lag >= n:
        raise ValueError("max_lag must be shorter than the series")
    size = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(x, size, axis=1)
    ac = np.fft.irfft(f * np.conj(f), size, axis=1)[:, : max_lag + 1]
    return ac / (n - np.arange(max_lag + 1))


def correlation_time(C, se, dt, factor=2.0):
    """``int_0^{t0} |C| dt / C(0)`` with ``t0`` the first lag inside the noise band."""
    inside = np.abs(C) < factor * se
    k0 = int(np.argmax(inside)) if np.any(inside) else len(C) - 1
    k0 = max(k0, 1)
    return float(np.trapezoid(np.abs(C[: k0 + 1]), dx=dt) / C[0]), k0


def truncation_lag(C, se, dt, n_windows=5, factor=2.0):
    """Smallest lag after which ``|C|`` stays below ``factor`` standard errors
    for ``n_windows`` correlation times.

    Returns ``(k_star, tau, found)``; when no such lag exists inside the
    available range, ``k_star`` is the last usable lag and ``found`` is False.
    """
    tau, k0 = correlation_time(C, se, dt, factor)
    width = max(1, int(np.ceil(n_windows * tau / dt)))
    quiet = np.abs(C) < factor * se
    # run length of consecutive quiet lags starting at each index
    run = np.zeros(len(C) + 1, dtype=int)
    for k in range(len(C) - 1, -1, -1):
        run[k] = run[k + 1] + 1 if quiet[k] else 0
    for k in range(k0, len(C) - width):
        if run[k] >= width:
            return k, tau, True
    return len(C) - 1, tau, False


def jackknife(values, estimator=np.mean, n_blocks=None):
    """Delete-one-block jackknife; returns ``(estimate, stderr)``."""
    values = np.asarray(values)
    n = len(values)
    nb_ = n if n_blocks is None else min(n_blocks, n)
    full = estimator(values)
    if nb_ == n and estimator is np.mean:
        return float(full), float(values.std(ddof=1) / np.sqrt(n))
    blocks = np.array_split(np.arange(n), nb_)
    reps = np.array([estimator(np.delete(values, b, axis=0)) for b in blocks])
    se = np.sqrt((nb_ - 1) / nb_ * np.sum((reps - reps.mean(0)) ** 2, axis=0))
    return full, se


@dataclass
class DecayFit:
    observable: str
    sigma: float
    rate: float
    t_lo: float
    t_hi: float
    r2: float
    stderr: float
    n_points: int
    accepted: bool
    envelope: bool = False

    def __post_init__(self):
        if not self.t_lo < self.t_hi:
            raise ValueError("fit window must have t_lo < t_hi")

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def fit_decay_rate(acf, window, dt=1.0, envelope=False, min_r2=0.9,
                   observable="", sigma=float("nan")):
    """Least-squares line through ``log C(t)`` on ``window = (t_lo, t_hi)``.

    With ``envelope=True`` only the local maxima of ``|C|`` inside the window
    enter the fit, which handles oscillating correlations. The rate is minus
    the slope; fits with ``R^2 < min_r2`` or a nonpositive rate come back
    with ``accepted=False``.
    """
    c = np.asarray(acf.values if isinstance(acf, ACF) else acf, dtype=float)
    t = np.arange(len(c)) * dt
    t_lo, t_hi = window
    sel = (t >= t_lo - 1e-12) & (t <= t_hi + 1e-12)
    idx = np.nonzero(sel)[0]
    if envelope:
        a = np.abs(c)
        peaks = [k for k in idx if 0 < k < len(c) - 1 and a[k] >= a[k - 1] and a[k] >= a[k + 1]]
        idx = np.array(peaks, dtype=int)
        y = a[idx] if len(idx) else np.array([])
    else:
        y = c[idx]
        if np.any(y <= 0):
            raise ValueError("autocorrelation not positive over the fit window")
    if len(idx) < 3:
        raise ValueError("fewer than three usable points in the fit window")
    if np.any(y <= 0):
        raise ValueError("autocorrelation envelope not positive over the fit window")
    tt = t[idx]
    res = stats.linregress(tt, np.log(y))
    rate = -res.slope
    r2 = res.rvalue ** 2
    return DecayFit(observable, float(sigma), float(rate), float(t_lo), float(t_hi),
                    float(r2), float(res.stderr), int(len(idx)),
                    bool(r2 >= min_r2 and rate > 0), envelope)


@dataclass
class Distance:
    w1: float
    ks: float
    w1_stderr: float
    ks_stderr: float


def empirical_distance(samples_a, samples_b, n_boot=200, seed=0):
    """1-Wasserstein and Kolmogorov-Smirnov distances with bootstrap errors."""
    a = np.asarray(samples_a, dtype=float).ravel()
    b = np.asarray(samples_b, dtype=float).ravel()
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both sample sets must be nonempty")
    w1 = stats.wasserstein_distance(a, b)
    ks = stats.ks_2samp(a, b).statistic
    if n_boot <= 1:
        return Distance(float(w1), float(ks), float("nan"), float("nan"))
    rng = np.random.Generator(np.random.Philox(key=_rng.derive_seed(seed, _rng.BOOTSTRAP)))
    w_reps = np.empty(n_boot)
    k_reps = np.empty(n_boot)
    for r in range(n_boot):
        ra = a[rng.integers(0, len(a), len(a))]
        rb = b[rng.integers(0, len(b), len(b))]
        w_reps[r] = stats.wasserstein_distance(ra, rb)
        k_reps[r] = stats.ks_2samp(ra, rb).statistic
    return Distance(float(w1), float(ks), float(w_reps.std(ddof=1)),
                    float(k_reps.std(ddof=1)))


@dataclass
class DistanceReport:
    eps: list
    t_macro: float
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def w1(self):
        return np.array([r["W1"] for r in self.rows])

    @property
    def strictly_decreasing(self):
        w = self.w1
        return bool(np.all(np.diff(w) < 0))

    def to_json(self):
        return json.dumps({"eps": list(self.eps), "t_macro": self.t_macro,
                           "rows": self.rows, "meta": self.meta},
                          indent=2, sort_keys=True)

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("eps,W1,W1_err,KS,KS_err\n")
            for r in self.rows:
                fh.write(",".join(repr(float(r[k])) for k in
                                  ("eps", "W1", "W1_err", "KS", "KS_err")) + "\n")


def convergence_study(eps_list, t_macro, n_paths, pp, sigma, coeffs, start=(1.0, 1.0),
                      h=1e-3, meso_h=1e-3, seed=0, threads=None, n_boot=200):
    """Distance between ``E_1^eps(eps^-2 t)`` and the mesoscopic ``e_1(t)``.

    For each ``eps`` the microscopic chain starts from the product of shells
    ``start``; the mesoscopic ensemble starts path by path from the
    microscopic initial energies ``E_i^eps(0)``, so both carry the same
    initial law and total energy.
    """
    from .microsim import SimParams, run_ensemble
    from .mesosim import MesoParams, meso_simulate
    from .model import Lattice, PhaseState
    from .shell import sample_product_shells

    eps_list = [float(e) for e in eps_list]
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps_list must be strictly decreasing")
    lat = Lattice((len(start),))
    ids = np.arange(int(n_paths))
    names = [f"E[{i}]" for i in range(lat.N)]
    report = DistanceReport(eps_list, float(t_macro))
    report.meta.update({"n_paths": int(n_paths), "sigma": float(sigma), "h": h,
                        "meso_h": meso_h, "seed": int(seed), "start": list(start),
                        "potential": pp.describe(), "marginal": "E[0] at t_macro"})
    for n, eps in enumerate(eps_list):
        s = _rng.derive_seed(seed, n)
        q, p = sample_product_shells(start, pp, s, ids)
        T = t_macro / eps ** 2
        nsteps = int(round(T / h))
        params = SimParams(eps, sigma, h, nsteps * h, s, nsteps)
        _, _, out = run_ensemble(PhaseState(q, p), params, pp, lat, names, ids, threads)
        e0 = np.maximum(out[:, 0, :], 0.0)
        micro = out[:, -1, 0]
        hull = getattr(coeffs, "hull", None)
        if hull is not None:
            visited = out[:, [0, -1], :]
            bad = visited[(visited < hull[0]) | (visited > hull[1])]
            if bad.size:
                raise ValueError(f"energies outside the coefficient table hull: {bad[:5]}")
        mp = MesoParams(meso_h, t_macro, s, int(round(t_macro / meso_h)))
        path = meso_simulate(e0, mp, coeffs, lat, threads=threads)
        meso = path.e[-1, :, 0]
        d = empirical_distance(micro, meso, n_boot=n_boot, seed=s)
        report.rows.append({"eps": eps, "n_micro": len(micro), "n_meso": len(meso),
                            "W1": d.w1, "W1_err": d.w1_stderr, "KS": d.ks,
                            "KS_err": d.ks_stderr,
                            "micro_mean": float(micro.mean()),
                            "meso_mean": float(meso.mean()),
                            "clamp_frequency": path.clamp_frequency})
    report.meta["strictly_decreasing"] = report.strictly_decreasing
    return report


def current_decay_rate(sigma, pp, a=1.0, n_traj=2000, T=None, h=1e-3, seed=0,
                       window=None, record_stride=None, threads=None,
                       observable="jpin[0]"):
    """Decay rate of the single-site current autocorrelation at noise ``sigma``.

    A single uncoupled oscillator starts on the shell of energy ``a`` and the
    current it would exchange with a neighbour pinned at the origin is
    recorded. Its correlation oscillates, so the envelope is fitted. The
    default horizon and window scale with ``sigma^-2``.
    """
    from .microsim import SimParams, run_ensemble
    from .model import Lattice, PhaseState
    from .shell import sample_product_shells

    scale = 1.0 / sigma ** 2
    T = 12.0 * scale + 5.0 if T is None else T
    window = (0.5 * scale, 6.0 * scale) if window is None else window
    if record_stride is None:
        record_stride = max(1, int(round(0.05 / h)))
    lat = Lattice((1,))
    ids = np.arange(int(n_traj))
    q, p = sample_product_shells([a], pp, seed, ids)
    params = SimParams(0.0, sigma, h, T, seed, record_stride)
    _, t, out = run_ensemble(PhaseState(q, p), params, pp, lat, [observable], ids, threads)
    x = out[:, :, 0]
    dt = t[1] - t[0]
    max_lag = min(x.shape[1] - 1, int(np.ceil(window[1] / dt)) + 2)
    C = trajectory_correlations(x, max_lag).mean(axis=0)
    fit = fit_decay_rate(C, window, dt=dt, envelope=True, observable=observable,
                         sigma=sigma)
    return fit, C, dt
