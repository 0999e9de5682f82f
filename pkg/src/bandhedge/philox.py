"""Vectorized Philox4x64-10 block function.

Produces the same 64-bit words as :class:`numpy.random.Philox` for a given
(key, counter), but evaluates many counters at once so that each draw can be
addressed directly by its coordinates.
"""

from __future__ import annotations

import numba as nb
import numpy as np

_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = np.uint64(0x9E3779B97F4A7C15)
_W1 = np.uint64(0xBB67AE8584CAA73B)
_LO32 = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_S11 = np.uint64(11)


def _mulhilo(a: np.uint64, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a0, a1 = a & _LO32, a >> _S32
    b0, b1 = b & _LO32, b >> _S32
    p00 = a0 * b0
    p01 = a0 * b1
    p10 = a1 * b0
    p11 = a1 * b1
    mid = (p00 >> _S32) + (p01 & _LO32) + (p10 & _LO32)
    hi = p11 + (p01 >> _S32) + (p10 >> _S32) + (mid >> _S32)
    return hi, a * b


def philox4x64(counter: tuple, key: tuple[int, int], rounds: int = 10) -> tuple[np.ndarray, ...]:
    """Apply the Philox bijection to broadcastable counter words.

    ``counter`` is four arrays (or ints) of uint64 words, ``key`` two ints.
    Returns four uint64 arrays.
    """
    with np.errstate(over="ignore"):
        c0, c1, c2, c3 = np.broadcast_arrays(*(np.asarray(c, dtype=np.uint64) for c in counter))
        k0 = np.uint64(key[0] & 0xFFFFFFFFFFFFFFFF)
        k1 = np.uint64(key[1] & 0xFFFFFFFFFFFFFFFF)
        for r in range(rounds):
            if r:
                k0 = k0 + _W0
                k1 = k1 + _W1
            hi0, lo0 = _mulhilo(_M0, c0)
            hi1, lo1 = _mulhilo(_M1, c2)
            c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return c0, c1, c2, c3


def to_unit_open(x: np.ndarray) -> np.ndarray:
    """Map uint64 words to doubles strictly inside (0, 1)."""
    return ((x >> _S11).astype(np.float64) + 0.5) * 2.0**-53


def standard_normal(counter: tuple, key: tuple[int, int]) -> np.ndarray:
    """One standard normal per counter via Box-Muller on the first two words."""
    w0, w1, _, _ = philox4x64(counter, key)
    u1 = to_unit_open(w0)
    u2 = to_unit_open(w1)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


@nb.njit(cache=True)
def _mulhilo64(a, b):
    lo32 = np.uint64(0xFFFFFFFF)
    s32 = np.uint64(32)
    a0, a1 = a & lo32, a >> s32
    b0, b1 = b & lo32, b >> s32
    p00 = a0 * b0
    p01 = a0 * b1
    p10 = a1 * b0
    p11 = a1 * b1
    mid = (p00 >> s32) + (p01 & lo32) + (p10 & lo32)
    return p11 + (p01 >> s32) + (p10 >> s32) + (mid >> s32), a * b


@nb.njit(cache=True)
def _normal_grid(n_paths, n_steps, first_path, stream, k0_init, k1_init, out):
    m0 = np.uint64(0xD2E7470EE14C6C93)
    m1 = np.uint64(0xCA5A826395121157)
    w0 = np.uint64(0x9E3779B97F4A7C15)
    w1 = np.uint64(0xBB67AE8584CAA73B)
    s11 = np.uint64(11)
    scale = 2.0**-53
    for p in range(n_paths):
        for s in range(n_steps):
            c0 = np.uint64(s)
            c1 = first_path + np.uint64(p)
            c2 = stream
            c3 = np.uint64(0)
            k0 = k0_init
            k1 = k1_init
            for r in range(10):
                if r > 0:
                    k0 = k0 + w0
                    k1 = k1 + w1
                hi0, lo0 = _mulhilo64(m0, c0)
                hi1, lo1 = _mulhilo64(m1, c2)
                c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
            u1 = (np.float64(c0 >> s11) + 0.5) * scale
            u2 = (np.float64(c1 >> s11) + 0.5) * scale
            out[p, s] = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
    return out


def normal_grid(n_paths: int, n_steps: int, seed: int, stream: int = 0, first_path: int = 0) -> np.ndarray:
    """Compiled equivalent of ``standard_normal`` over the ``(path, step)`` grid.

    Counter words are ``(step, path, stream, 0)`` and the key is ``(seed, 0)``.
    """
    out = np.empty((n_paths, n_steps))
    mask = 0xFFFFFFFFFFFFFFFF
    return _normal_grid(
        n_paths,
        n_steps,
        np.uint64(first_path & mask),
        np.uint64(stream & mask),
        np.uint64(seed & mask),
        np.uint64(0),
        out,
    )
