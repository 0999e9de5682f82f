"""Driftless geometric Brownian motion on a uniform grid.

Each normal draw is addressed by ``(seed, stream, path, step)`` through a
counter-based generator, so path ``i`` depends on nothing but the seed, the
stream and ``i``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .philox import normal_grid

__all__ = ["MarketSpec", "PathSet", "generate_paths", "normal_draws", "dump_paths", "load_paths", "DEFAULT_MARKET"]

PATH_MAGIC = b"HBPATHS1"
_HEADER = struct.Struct("<8sQQQ")


@dataclass(frozen=True)
class MarketSpec:
    s0: float = 1.0
    sigma: float = 0.2
    maturity: float = 30 / 365
    n_steps: int = 30

    def __post_init__(self):
        if not self.s0 > 0:
            raise ValueError(f"s0 must be positive, got {self.s0}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not self.maturity > 0:
            raise ValueError(f"maturity must be positive, got {self.maturity}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be an integer >= 1, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return self.maturity / self.n_steps

    def times(self) -> np.ndarray:
        """Grid ``t_0 .. t_n``; the last entry is exactly the maturity."""
        t = np.arange(self.n_steps + 1) * self.dt
        t[-1] = self.maturity
        return t


DEFAULT_MARKET = MarketSpec()


@dataclass(frozen=True)
class PathSet:
    prices: np.ndarray
    seed: int
    market: MarketSpec
    stream: int = 0

    @property
    def n_paths(self) -> int:
        return self.prices.shape[0]

    def __len__(self) -> int:
        return self.n_paths


def normal_draws(n_paths: int, n_steps: int, seed: int, stream: int = 0, first_path: int = 0) -> np.ndarray:
    """Standard normals of shape ``(n_paths, n_steps)`` keyed by coordinates."""
    return normal_grid(n_paths, n_steps, seed, stream, first_path)


def generate_paths(
    spec: MarketSpec,
    n_paths: int,
    seed: int,
    *,
    stream: int = 0,
    euler: bool = False,
    zero_noise: bool = False,
) -> PathSet:
    """Simulate ``n_paths`` price paths with ``n_steps + 1`` columns.

    The default steps with the exact lognormal law
    ``S_{i+1} = S_i exp(sigma sqrt(dt) Z - sigma^2 dt / 2)``. ``euler=True``
    uses ``S_{i+1} = S_i (1 + sigma sqrt(dt) Z)`` instead, which can go
    negative for large draws. ``zero_noise`` forces every draw to zero.
    """
    if n_paths < 1:
        raise ValueError(f"n_paths must be >= 1, got {n_paths}")
    n, dt, sigma = spec.n_steps, spec.dt, spec.sigma
    if zero_noise:
        z = np.zeros((n_paths, n))
    else:
        z = normal_draws(n_paths, n, seed, stream)
    if euler:
        growth = 1.0 + sigma * np.sqrt(dt) * z
    else:
        growth = np.exp(sigma * np.sqrt(dt) * z - 0.5 * sigma * sigma * dt)
    prices = np.empty((n_paths, n + 1))
    prices[:, 0] = spec.s0
    np.cumprod(growth, axis=1, out=prices[:, 1:])
    prices[:, 1:] *= spec.s0
    return PathSet(prices, seed, spec, stream)


def dump_paths(paths: PathSet, file) -> None:
    """Write a little-endian float64 row-major matrix behind a 32-byte header."""
    header = _HEADER.pack(PATH_MAGIC, paths.n_paths, paths.market.n_steps, paths.seed & 0xFFFFFFFFFFFFFFFF)
    data = np.ascontiguousarray(paths.prices, dtype="<f8").tobytes()
    Path(file).write_bytes(header + data)


def load_paths(file, spec: MarketSpec | None = None) -> PathSet:
    raw = Path(file).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError("path file is shorter than its header")
    magic, n_paths, n_steps, seed = _HEADER.unpack_from(raw)
    if magic != PATH_MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {PATH_MAGIC!r}")
    expected = _HEADER.size + 8 * n_paths * (n_steps + 1)
    if len(raw) != expected:
        raise ValueError(f"path file holds {len(raw)} bytes, header implies {expected}")
    prices = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(n_paths, n_steps + 1).astype(np.float64)
    if spec is None:
        spec = MarketSpec(s0=float(prices[0, 0]), n_steps=int(n_steps))
    elif spec.n_steps != n_steps:
        raise ValueError(f"file has {n_steps} steps, spec expects {spec.n_steps}")
    return PathSet(prices, int(seed), spec)
