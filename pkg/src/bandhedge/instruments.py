"""Payoffs and Black-Scholes sensitivities for the hedged derivatives."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import ndtr

from .market import MarketSpec, generate_paths

__all__ = [
    "Kind",
    "Instrument",
    "european_call",
    "lookback_call",
    "payoff",
    "bs_delta",
    "bs_gamma",
    "LookbackGreeks",
    "lookback_delta_gamma",
]


class Kind(str, Enum):
    EUROPEAN_CALL = "european_call"
    LOOKBACK_CALL = "lookback_call_fixed_strike"


@dataclass(frozen=True)
class Instrument:
    kind: Kind
    strike: float

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if not self.strike > 0:
            raise ValueError(f"strike must be positive, got {self.strike}")

    @property
    def is_lookback(self) -> bool:
        return self.kind is Kind.LOOKBACK_CALL

    @property
    def short_name(self) -> str:
        return "lookback" if self.is_lookback else "european"


def european_call(strike: float = 1.0) -> Instrument:
    return Instrument(Kind.EUROPEAN_CALL, strike)


def lookback_call(strike: float = 1.03) -> Instrument:
    return Instrument(Kind.LOOKBACK_CALL, strike)


def payoff(instrument: Instrument, prices: np.ndarray) -> np.ndarray | float:
    """Payoff of one path (1-d) or of every row of a path matrix."""
    prices = np.asarray(prices, dtype=np.float64)
    if prices.shape[-1] == 0:
        raise ValueError("empty price path")
    if instrument.is_lookback:
        ref = prices.max(axis=-1)
    else:
        ref = prices[..., -1]
    out = np.maximum(ref - instrument.strike, 0.0)
    return float(out) if out.ndim == 0 else out


def _d1(s, strike, sigma, tau):
    return (np.log(s / strike) + 0.5 * sigma * sigma * tau) / (sigma * np.sqrt(tau))


def bs_delta(s, strike: float, sigma: float, tau):
    """Call delta ``N(d1)``; at expiry the indicator ``s > K`` with 1/2 at the money."""
    s, tau = np.broadcast_arrays(np.asarray(s, dtype=np.float64), np.asarray(tau, dtype=np.float64))
    if np.any(s <= 0):
        raise ValueError("price must be positive")
    if np.any(tau < 0):
        raise ValueError("time to maturity must be non-negative")
    live = tau > 0
    safe_tau = np.where(live, tau, 1.0)
    out = np.where(live, ndtr(_d1(s, strike, sigma, safe_tau)), np.where(s > strike, 1.0, np.where(s < strike, 0.0, 0.5)))
    return float(out) if out.ndim == 0 else out


def bs_gamma(s, strike: float, sigma: float, tau):
    """Call gamma ``phi(d1) / (s sigma sqrt(tau))``; undefined at expiry."""
    s, tau = np.broadcast_arrays(np.asarray(s, dtype=np.float64), np.asarray(tau, dtype=np.float64))
    if np.any(tau <= 0):
        raise ValueError("gamma is singular at tau = 0")
    d1 = _d1(s, strike, sigma, tau)
    out = np.exp(-0.5 * d1 * d1) / np.sqrt(2.0 * np.pi) / (s * sigma * np.sqrt(tau))
    return float(out) if out.ndim == 0 else out


class LookbackGreeks:
    """Finite-difference greeks of a discretely monitored lookback call.

    For ``n`` remaining monitoring steps the estimator draws ``n_samples``
    unit-start GBM paths once and keeps the sorted samples of their running
    maximum ``R`` (including the start, so ``R >= 1``). The price at spot
    ``s`` with realized maximum ``m`` is ``E[max(max(m, s R) - K, 0)]``.
    Sorting plus suffix sums makes each evaluation a binary search, and every
    bump reuses the same samples.
    """

    def __init__(self, strike: float, sigma: float, dt: float, n_samples: int = 1 << 17, seed: int = 0x1B):
        self.strike = strike
        self.sigma = sigma
        self.dt = dt
        self.n_samples = n_samples
        self.seed = seed
        self._maxima: np.ndarray | None = None
        self._cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def samples(self, n_remaining: int) -> np.ndarray:
        return self._table(n_remaining)[0]

    def _running_max(self, n_remaining: int) -> np.ndarray:
        # draws are keyed by (path, step), so a longer simulation extends a shorter one
        if self._maxima is None or self._maxima.shape[1] <= n_remaining:
            spec = MarketSpec(s0=1.0, sigma=self.sigma, maturity=self.dt * n_remaining, n_steps=n_remaining)
            prices = generate_paths(spec, self.n_samples, self.seed).prices
            self._maxima = np.maximum.accumulate(prices, axis=1)
        return self._maxima[:, n_remaining]

    def _table(self, n_remaining: int) -> tuple[np.ndarray, np.ndarray]:
        if n_remaining < 1:
            raise ValueError("lookback greeks need at least one remaining step (tau > 0)")
        hit = self._cache.get(n_remaining)
        if hit is None:
            r = np.sort(self._running_max(n_remaining))
            suffix = np.concatenate([np.cumsum(r[::-1])[::-1], [0.0]])
            hit = self._cache[n_remaining] = (r, suffix)
        return hit

    def steps_for(self, tau: float) -> int:
        n = int(round(tau / self.dt))
        if n < 1 or abs(n * self.dt - tau) > 1e-9 * max(1.0, tau):
            raise ValueError(f"tau={tau} is not a positive multiple of dt={self.dt}")
        return n

    def price(self, s, running_max, n_remaining: int):
        s, m = np.broadcast_arrays(np.asarray(s, dtype=np.float64), np.asarray(running_max, dtype=np.float64))
        r, suffix = self._table(n_remaining)
        n = r.size
        k = self.strike
        below = np.searchsorted(r, m / s, side="right")
        start = np.searchsorted(r, np.maximum(m, k) / s, side="right")
        total = below * np.maximum(m - k, 0.0) + s * suffix[start] - k * (n - start)
        return total / n

    def price_bruteforce(self, s: float, running_max: float, n_remaining: int) -> np.ndarray:
        """Per-sample payoffs; the mean is the price."""
        r = self.samples(n_remaining)
        return np.maximum(np.maximum(running_max, s * r) - self.strike, 0.0)

    def delta_gamma(self, s, running_max, n_remaining: int, bump: float = 1e-3):
        s = np.asarray(s, dtype=np.float64)
        h = bump * s
        up = self.price(s + h, running_max, n_remaining)
        mid = self.price(s, running_max, n_remaining)
        down = self.price(s - h, running_max, n_remaining)
        return (up - down) / (2 * h), (up - 2 * mid + down) / (h * h)

    def delta_stderr(self, s: float, running_max: float, n_remaining: int, bump: float = 1e-3) -> tuple[float, float]:
        """Delta and the standard error of its per-sample estimator."""
        h = bump * s
        d = (self.price_bruteforce(s + h, running_max, n_remaining) - self.price_bruteforce(s - h, running_max, n_remaining)) / (2 * h)
        return float(d.mean()), float(d.std(ddof=1) / np.sqrt(d.size))


_GREEKS: dict[tuple, LookbackGreeks] = {}


def lookback_delta_gamma(market: MarketSpec, instrument: Instrument, s, running_max, tau, *, n_samples: int = 1 << 17):
    """Delta and gamma of a lookback call at spot ``s`` and realized max ``running_max``.

    ``tau`` must lie on the market grid. Estimators are shared per
    ``(strike, sigma, dt, n_samples)``.
    """
    key = (instrument.strike, market.sigma, market.dt, n_samples)
    est = _GREEKS.get(key)
    if est is None:
        est = _GREEKS[key] = LookbackGreeks(instrument.strike, market.sigma, market.dt, n_samples)
    if np.ndim(tau) == 0:
        if tau <= 0:
            raise ValueError("lookback greeks are singular at tau = 0")
        return est.delta_gamma(s, running_max, est.steps_for(float(tau)))
    raise TypeError("tau must be a scalar; evaluate one time step at a time")
