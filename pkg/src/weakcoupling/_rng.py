"""Counter-based random streams.

Every random number in the package is a pure function of
``(seed, stream, a, b, counter)``: a SplitMix64 finalizer is applied to a
key derived from ``(seed, stream, a, b)`` offset by the counter. ``a`` is
usually a trajectory or path id and ``b`` a site or edge index, so results do
not depend on how work is split between threads or processes.

The same arithmetic is provided twice: numpy versions for array work in
Python and numba scalar versions for use inside compiled kernels. The two
agree bit for bit (see ``tests/test_rng.py``).
"""

import numpy as np
import numba as nb

GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_MASK = (1 << 64) - 1

# stream tags
NOISE = 1
SHELL = 2
MESO = 3
BOOTSTRAP = 4
CELL = 5

_TWO_PI = 2.0 * np.pi
_INV53 = 2.0 ** -53


def _mix_int(z):
    z &= _MASK
    z = ((z ^ (z >> 30)) * _M1) & _MASK
    z = ((z ^ (z >> 27)) * _M2) & _MASK
    return z ^ (z >> 31)


def derive_seed(seed, *labels):
    """Derive a 64-bit child seed from ``seed`` and integer labels."""
    z = _mix_int(int(seed) * GOLDEN)
    for lab in labels:
        z = _mix_int(z + (int(lab) + 1) * GOLDEN)
    return z


def _mix_np(z):
    z = z ^ (z >> np.uint64(30))
    z = z * np.uint64(_M1)
    z = z ^ (z >> np.uint64(27))
    z = z * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def stream_keys(seed, stream, a, b):
    """Keys for the streams ``(seed, stream, a, b)``; ``a``, ``b`` broadcast."""
    base = np.uint64(derive_seed(seed, stream))
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    with np.errstate(over="ignore"):
        k = _mix_np(base + (a + np.uint64(1)) * np.uint64(GOLDEN))
        k = _mix_np(k + (b + np.uint64(1)) * np.uint64(GOLDEN))
    return k


def words(keys, counter):
    """64-bit outputs of the streams at integer ``counter`` (broadcasts)."""
    c = np.asarray(counter, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _mix_np(keys + (c + np.uint64(1)) * np.uint64(GOLDEN))


def uniforms(keys, counter):
    """Uniforms in (0, 1] with 53 random bits."""
    w = words(keys, counter)
    return ((w >> np.uint64(11)).astype(np.float64) + 1.0) * _INV53


def normal_pairs(keys, counter):
    """Two independent standard normals from words ``2c`` and ``2c+1``."""
    c = np.asarray(counter, dtype=np.uint64) * np.uint64(2)
    u1 = uniforms(keys, c)
    u2 = uniforms(keys, c + np.uint64(1))
    r = np.sqrt(-2.0 * np.log(u1))
    ang = _TWO_PI * u2
    return r * np.cos(ang), r * np.sin(ang)


@nb.njit(inline="always")
def mix_nb(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


@nb.njit(inline="always")
def key_nb(base, a, b):
    g = np.uint64(GOLDEN)
    k = mix_nb(base + (np.uint64(a) + np.uint64(1)) * g)
    return mix_nb(k + (np.uint64(b) + np.uint64(1)) * g)


@nb.njit(inline="always")
def uniform_nb(key, counter):
    w = mix_nb(key + (np.uint64(counter) + np.uint64(1)) * np.uint64(GOLDEN))
    return (np.float64(w >> np.uint64(11)) + 1.0) * _INV53


@nb.njit(inline="always")
def normal_pair_nb(key, counter):
    u1 = uniform_nb(key, 2 * counter)
    u2 = uniform_nb(key, 2 * counter + 1)
    r = np.sqrt(-2.0 * np.log(u1))
    ang = _TWO_PI * u2
    return r * np.cos(ang), r * np.sin(ang)
