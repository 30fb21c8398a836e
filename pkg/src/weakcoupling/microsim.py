"""Time integration of the noisy oscillator lattice.

One step is a Strang splitting: half a noise step, one velocity-Verlet step
of the Hamiltonian flow of ``H_eps``, half a noise step. The noise rotates
each momentum ``p_i`` by an independent Gaussian angle, which samples the
heat kernel of ``sigma^2 X_i^2`` exactly and keeps every ``|p_i|`` fixed.

Ensembles run in a compiled kernel, one trajectory per loop iteration. The
trailing half rotation of a step and the leading half rotation of the next
are applied together unless an observation falls between them; random
angles come from counter-based streams keyed by (seed, trajectory, site)
and indexed by step.
"""

from dataclasses import dataclass
import re
import struct

import numpy as np
import numba as nb

from . import _rng
from .model import PhaseState, forces, grad_v_nb, ubar_nb, ubar_prime_nb, v_nb


class NumericalError(RuntimeError):
    """Raised when a trajectory leaves the finite numbers."""


@dataclass(frozen=True)
class SimParams:
    eps: float = 0.0
    sigma: float = 1.0
    h: float = 1e-3
    T: float = 1.0
    seed: int = 0
    record_stride: int = 1

    def __post_init__(self):
        if not self.eps >= 0:
            raise ValueError("eps must be >= 0")
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if not self.h > 0:
            raise ValueError("h must be > 0")
        if not self.T >= self.h:
            raise ValueError("need h <= T")
        if int(self.record_stride) < 1:
            raise ValueError("record_stride must be a positive integer")

    @property
    def nsteps(self):
        return int(round(self.T / self.h))


@dataclass
class ObservableSeries:
    """Samples of one observable; ``values`` has shape ``(n_t,)`` or ``(n_t, B)``."""

    name: str
    t: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if len(self.t) != len(self.values):
            raise ValueError("time grid and values differ in length")
        if len(self.t) > 1 and np.any(np.diff(self.t) <= 0):
            raise ValueError("time grid must be strictly increasing")

    def to_csv(self, path):
        vals = self.values
        if vals.ndim == 1:
            header = ["t", self.name]
            rows = zip(self.t, vals)
        else:
            header = ["t"] + [f"{self.name}_{b}" for b in range(vals.shape[1])]
            rows = ((t,) + tuple(v) for t, v in zip(self.t, vals))
        with open(path, "w", newline="") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(repr(float(x)) for x in row) + "\n")


# observable codes understood by the kernel
OBS_E, OBS_E0, OBS_J, OBS_H, OBS_JPIN, OBS_L, OBS_K = range(7)

_OBS_PATTERNS = [
    (re.compile(r"^E\[(\d+)\]$"), OBS_E),
    (re.compile(r"^E0\[(\d+)\]$"), OBS_E0),
    (re.compile(r"^j\[(\d+),(\d+)\]$"), OBS_J),
    (re.compile(r"^H$"), OBS_H),
    (re.compile(r"^jpin\[(\d+)\]$"), OBS_JPIN),
    (re.compile(r"^L\[(\d+)\]$"), OBS_L),
    (re.compile(r"^K\[(\d+)\]$"), OBS_K),
]


def parse_observers(names, lat):
    """Translate observer names into kernel codes.

    ``E[i]`` site energy, ``E0[i]`` uncoupled site energy, ``j[i,k]`` edge
    current, ``H`` total energy, ``jpin[i]`` current into site ``i`` from a
    neighbour pinned at the origin, ``L[i]`` angular momentum
    ``q_i x p_i``, ``K[i]`` kinetic energy.
    """
    codes = []
    for name in names:
        for pat, code in _OBS_PATTERNS:
            m = pat.match(name.replace(" ", ""))
            if m:
                args = [int(g) for g in m.groups()] + [0, 0]
                i, k = args[0], args[1]
                if code != OBS_H and not 0 <= i < lat.N:
                    raise ValueError(f"observer {name!r}: site out of range")
                if code == OBS_J and not lat.adjacent(i, k):
                    raise ValueError(f"observer {name!r}: sites not adjacent")
                codes.append((code, i, k))
                break
        else:
            raise ValueError(f"unknown observer {name!r}")
    return np.array(codes, dtype=np.int64).reshape(-1, 3)


@nb.njit(inline="always")
def _force(q, f, eps, ufam, vfam, par, edges):
    n = q.shape[0]
    for i in range(n):
        r = q[i, 0] * q[i, 0] + q[i, 1] * q[i, 1]
        d = 2.0 * ubar_prime_nb(ufam, par, r)
        f[i, 0] = -d * q[i, 0]
        f[i, 1] = -d * q[i, 1]
    if eps != 0.0:
        for e in range(edges.shape[0]):
            a = edges[e, 0]
            b = edges[e, 1]
            gx, gy = grad_v_nb(vfam, par, q[a, 0] - q[b, 0], q[a, 1] - q[b, 1])
            f[a, 0] -= eps * gx
            f[a, 1] -= eps * gy
            f[b, 0] += eps * gx
            f[b, 1] += eps * gy


@nb.njit(inline="always")
def _rotate(p, i, ang):
    c = np.cos(ang)
    s = np.sin(ang)
    x = p[i, 0]
    y = p[i, 1]
    p[i, 0] = c * x - s * y
    p[i, 1] = s * x + c * y


@nb.njit
def _observe(q, p, eps, ufam, vfam, par, edges, obs, row):
    n = q.shape[0]
    for m in range(obs.shape[0]):
        code = obs[m, 0]
        i = obs[m, 1]
        k = obs[m, 2]
        val = 0.0
        if code == 0 or code == 1:
            val = 0.5 * (p[i, 0] ** 2 + p[i, 1] ** 2) + ubar_nb(
                ufam, par, q[i, 0] ** 2 + q[i, 1] ** 2)
            if code == 0 and eps != 0.0:
                for e in range(edges.shape[0]):
                    a = edges[e, 0]
                    b = edges[e, 1]
                    if a == i or b == i:
                        val += 0.5 * eps * v_nb(vfam, par, q[a, 0] - q[b, 0],
                                                q[a, 1] - q[b, 1])
        elif code == 2:
            gx, gy = grad_v_nb(vfam, par, q[i, 0] - q[k, 0], q[i, 1] - q[k, 1])
            val = -0.5 * (gx * (p[i, 0] + p[k, 0]) + gy * (p[i, 1] + p[k, 1]))
        elif code == 3:
            for s in range(n):
                val += 0.5 * (p[s, 0] ** 2 + p[s, 1] ** 2) + ubar_nb(
                    ufam, par, q[s, 0] ** 2 + q[s, 1] ** 2)
            if eps != 0.0:
                for e in range(edges.shape[0]):
                    a = edges[e, 0]
                    b = edges[e, 1]
                    val += eps * v_nb(vfam, par, q[a, 0] - q[b, 0],
                                      q[a, 1] - q[b, 1])
        elif code == 4:
            gx, gy = grad_v_nb(vfam, par, q[i, 0], q[i, 1])
            val = -0.5 * (gx * p[i, 0] + gy * p[i, 1])
        elif code == 5:
            val = q[i, 0] * p[i, 1] - q[i, 1] * p[i, 0]
        else:
            val = 0.5 * (p[i, 0] ** 2 + p[i, 1] ** 2)
        row[m] = val


@nb.njit(parallel=True, cache=True)
def _micro_kernel(q, p, keys, eps, sigma, h, nsteps, stride, ufam, vfam, par,
                  edges, obs, out, status):
    nb_traj = q.shape[0]
    n = q.shape[1]
    sd = sigma * np.sqrt(h)
    noisy = sigma > 0.0
    for b in nb.prange(nb_traj):
        qb = q[b]
        pb = p[b]
        f = np.empty((n, 2))
        pending = np.zeros(n)
        _force(qb, f, eps, ufam, vfam, par, edges)
        _observe(qb, pb, eps, ufam, vfam, par, edges, obs, out[b, 0])
        rec = 1
        for step in range(nsteps):
            if noisy:
                for i in range(n):
                    z1, z2 = _rng.normal_pair_nb(keys[b, i], step)
                    _rotate(pb, i, pending[i] + sd * z1)
                    pending[i] = sd * z2
            for i in range(n):
                pb[i, 0] += 0.5 * h * f[i, 0]
                pb[i, 1] += 0.5 * h * f[i, 1]
                qb[i, 0] += h * pb[i, 0]
                qb[i, 1] += h * pb[i, 1]
            _force(qb, f, eps, ufam, vfam, par, edges)
            for i in range(n):
                pb[i, 0] += 0.5 * h * f[i, 0]
                pb[i, 1] += 0.5 * h * f[i, 1]
            if (step + 1) % stride == 0:
                for i in range(n):
                    _rotate(pb, i, pending[i])
                    pending[i] = 0.0
                ok = True
                for i in range(n):
                    if not (np.isfinite(qb[i, 0]) and np.isfinite(qb[i, 1])
                            and np.isfinite(pb[i, 0]) and np.isfinite(pb[i, 1])):
                        ok = False
                if not ok:
                    status[b] = step + 1
                    break
                _observe(qb, pb, eps, ufam, vfam, par, edges, obs, out[b, rec])
                rec += 1
        for i in range(n):
            _rotate(pb, i, pending[i])


def verlet_step(state, h, eps, pp, lat):
    """One velocity-Verlet step of the Hamiltonian flow of ``H_eps``."""
    q, p = state.q.copy(), state.p.copy()
    p += 0.5 * h * forces(q, eps, pp, lat)
    q += h * p
    p += 0.5 * h * forces(q, eps, pp, lat)
    return PhaseState(q, p)


def rotate_momenta(p, angles):
    c, s = np.cos(angles), np.sin(angles)
    x, y = p[..., 0], p[..., 1]
    return np.stack([c * x - s * y, s * x + c * y], axis=-1)


def noise_step(state, h, sigma, rng):
    """Rotate every momentum by an angle ~ N(0, 2 sigma^2 h).

    ``rng`` is a ``numpy.random.Generator``.
    """
    angles = rng.normal(0.0, sigma * np.sqrt(2.0 * h), size=state.p.shape[:-1])
    return PhaseState(state.q.copy(), rotate_momenta(state.p, angles))


def noise_keys(seed, traj_ids, n_sites):
    traj_ids = np.asarray(traj_ids, dtype=np.int64)
    return _rng.stream_keys(seed, _rng.NOISE, traj_ids[:, None],
                            np.arange(n_sites)[None, :])


def run_ensemble(state0, params, pp, lat, observers, traj_ids=None, threads=None):
    """Advance a batch of trajectories; returns ``(final_state, t, values)``.

    ``values`` has shape ``(B, n_records, n_observers)``. ``traj_ids`` label
    the random streams (default ``0..B-1``); a trajectory's path depends
    only on its own id, the seed and the parameters.
    """
    q = np.ascontiguousarray(state0.q, dtype=np.float64)
    p = np.ascontiguousarray(state0.p, dtype=np.float64)
    single = q.ndim == 2
    if single:
        q, p = q[None].copy(), p[None].copy()
    else:
        q, p = q.copy(), p.copy()
    if q.shape[1] != lat.N:
        raise ValueError("state size does not match lattice")
    B = q.shape[0]
    if traj_ids is None:
        traj_ids = np.arange(B)
    traj_ids = np.asarray(traj_ids, dtype=np.int64)
    if len(traj_ids) != B:
        raise ValueError("one trajectory id per batch member expected")
    obs = parse_observers(observers, lat)
    nsteps = params.nsteps
    stride = int(params.record_stride)
    n_rec = nsteps // stride + 1
    out = np.zeros((B, n_rec, len(obs)))
    status = np.zeros(B, dtype=np.int64)
    keys = noise_keys(params.seed, traj_ids, lat.N)
    ufam, vfam, par = pp.codes()
    if threads is not None:
        nb.set_num_threads(int(threads))
    _micro_kernel(q, p, keys, float(params.eps), float(params.sigma),
                  float(params.h), nsteps, stride, ufam, vfam, par,
                  np.ascontiguousarray(lat.edges), obs, out, status)
    if np.any(status):
        bad = int(np.argmax(status != 0))
        raise NumericalError(
            f"trajectory {int(traj_ids[bad])} became non-finite at step "
            f"{int(status[bad])}; reduce h (currently {params.h})")
    t = np.arange(n_rec) * stride * params.h
    final = PhaseState(q[0], p[0]) if single else PhaseState(q, p)
    return final, t, out[0] if single else out


def simulate(state0, params, pp, lat, observers, traj_ids=None, threads=None):
    """Integrate and record ``observers`` every ``record_stride`` steps.

    Returns a dict ``name -> ObservableSeries``; for a batched initial state
    the series values have one column per trajectory.
    """
    _, t, out = run_ensemble(state0, params, pp, lat, observers, traj_ids, threads)
    series = {}
    for m, name in enumerate(observers):
        vals = out[:, m] if out.ndim == 2 else out[:, :, m].T
        series[name] = ObservableSeries(name, t, np.ascontiguousarray(vals))
    return series


def rescaled_energy_path(state0, params, pp, lat, i, t_macro, threads=None):
    """``E_i^eps(eps^-2 t)`` on a uniform grid of macroscopic times ``[0, t_macro]``.

    ``params.T`` is ignored; the microscopic horizon is ``t_macro / eps^2``.
    """
    if not params.eps > 0:
        raise ValueError("rescaled energies need eps > 0")
    T_micro = t_macro / params.eps ** 2
    micro = SimParams(params.eps, params.sigma, params.h, T_micro, params.seed,
                      params.record_stride)
    name = f"E[{i}]"
    s = simulate(state0, micro, pp, lat, [name], threads=threads)[name]
    return ObservableSeries(name, s.t * params.eps ** 2, s.values)


def probe_stability(pp, h, energies=(0.1, 1.0, 10.0), T=10.0, tol=1e-3):
    """Short noiseless single-site runs; True when the relative energy error stays below ``tol``."""
    from .model import Lattice
    from .shell import psi_inv_arrays
    lat = Lattice((1,))
    a = np.asarray(energies, dtype=float)
    xi = np.tile([1.0, 0.0], (len(a), 1)) * np.sqrt(0.5)
    eta = np.tile([0.0, 1.0], (len(a), 1)) * np.sqrt(0.5)
    q, p = psi_inv_arrays(np.sqrt(a), xi, eta, pp)
    state = PhaseState(q[:, None, :], p[:, None, :])
    params = SimParams(0.0, 1.0, h, T, 0, max(1, int(round(T / h)) // 100))
    try:
        _, _, out = run_ensemble(state, params, pp, lat, ["E0[0]"])
    except NumericalError:
        return False
    err = np.max(np.abs(out[:, :, 0] - a[:, None])) / a.min()
    return bool(err < tol)


_CHECKPOINT_MAGIC = b"WCLCHK\x00\x00"
_CHECKPOINT_VERSION = 1


def save_checkpoint(path, state, lat):
    """Binary snapshot: magic, version, N, d, then q and p (little-endian f64)."""
    if state.q.ndim != 2:
        raise ValueError("checkpoints hold a single (unbatched) state")
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", _CHECKPOINT_VERSION))
        fh.write(struct.pack("<qq", state.N, lat.dim))
        fh.write(state.q.astype("<f8").tobytes())
        fh.write(state.p.astype("<f8").tobytes())


def load_checkpoint(path):
    """Returns ``(state, d)``."""
    with open(path, "rb") as fh:
        if fh.read(8) != _CHECKPOINT_MAGIC:
            raise ValueError("not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        n, d = struct.unpack("<qq", fh.read(16))
        q = np.frombuffer(fh.read(16 * n), dtype="<f8").reshape(n, 2)
        p = np.frombuffer(fh.read(16 * n), dtype="<f8").reshape(n, 2)
    return PhaseState(q.astype(np.float64), p.astype(np.float64)), d
