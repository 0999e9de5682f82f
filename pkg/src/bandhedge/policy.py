"""Hedging strategies.

All strategies decide the position held over ``[t_i, t_{i+1})`` from what is
known at ``t_i``. The two networks share a plain ReLU MLP; they differ in what
they feed it and in how its outputs become a hedge ratio.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .instruments import Instrument, LookbackGreeks, bs_delta, bs_gamma
from .market import MarketSpec, PathSet

__all__ = [
    "MlpParams",
    "init_mlp",
    "mlp_forward",
    "HedgeContext",
    "build_features",
    "ntb_step",
    "ff_step",
    "ww_band",
    "Policy",
    "NoTransactionBandNet",
    "FeedForwardNet",
    "WhalleyWilmott",
    "DeltaHedge",
    "ConstantHedge",
    "BandViolation",
    "n_features",
    "HIDDEN",
]

HIDDEN = (32, 32, 32)
BAND_SLOPE = 0.01


class BandViolation(AssertionError):
    pass


@dataclass
class MlpParams:
    """Weights ``(d_in, d_out)`` and biases ``(d_out,)`` of each affine layer."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need matching, non-empty weight and bias lists")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} do not fit")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i} input {w.shape[0]} != previous output {self.weights[i - 1].shape[1]}")

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[1]

    def arrays(self) -> list[np.ndarray]:
        """Flat list ``[W0, b0, W1, b1, ...]``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> MlpParams:
        return cls(list(arrays[0::2]), list(arrays[1::2]))

    def copy(self) -> MlpParams:
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def attach(self, tape: Tape) -> list[Var]:
        return [tape.param(a) for a in self.arrays()]


def init_mlp(n_in: int, n_out: int, rng: np.random.Generator, hidden: Sequence[int] = HIDDEN) -> MlpParams:
    """He-uniform hidden layers, zero biases, and an all-zero output head."""
    widths = [n_in, *hidden, n_out]
    weights, biases = [], []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        if i == len(widths) - 2:
            weights.append(np.zeros((a, b)))
        else:
            bound = np.sqrt(6.0 / a)
            weights.append(rng.uniform(-bound, bound, size=(a, b)))
        biases.append(np.zeros(b))
    return MlpParams(weights, biases)


def mlp_forward(params: MlpParams | Sequence[Var], features, tape: Tape) -> Var:
    """``affine -> ReLU`` for each hidden layer, then an affine head."""
    layers = params.attach(tape) if isinstance(params, MlpParams) else list(params)
    x = features if isinstance(features, Var) else tape.data(features)
    n_layers = len(layers) // 2
    if x.value.ndim < 2 or x.value.shape[-1] != layers[0].value.shape[0]:
        raise ValueError(f"feature shape {x.value.shape} does not match input width {layers[0].value.shape[0]}")
    for i in range(n_layers):
        x = ad.affine(x, layers[2 * i], layers[2 * i + 1])
        if i < n_layers - 1:
            x = ad.relu(x)
    return x


def n_features(instrument: Instrument) -> int:
    return 4 if instrument.is_lookback else 3


@dataclass
class HedgeContext:
    """Everything a policy may look at, precomputed for ``n_steps`` decisions.

    ``features`` has shape ``(n_paths, n_steps, n_features)``; ``delta`` and
    ``gamma`` are the Black-Scholes sensitivities at each decision time.
    """

    prices: np.ndarray
    features: np.ndarray
    delta: np.ndarray
    cost: float
    market: MarketSpec
    instrument: Instrument
    _gamma: np.ndarray | None = field(default=None, repr=False)
    _greeks: LookbackGreeks | None = field(default=None, repr=False)

    @property
    def n_paths(self) -> int:
        return self.prices.shape[0]

    @property
    def n_steps(self) -> int:
        return self.prices.shape[1] - 1

    @property
    def gamma(self) -> np.ndarray:
        if self._gamma is None:
            self._gamma = _sensitivities(self.prices, self.market, self.instrument, self._greeks, want_gamma=True)[1]
        return self._gamma

    def subset(self, rows: slice) -> HedgeContext:
        return HedgeContext(
            self.prices[rows],
            self.features[rows],
            self.delta[rows],
            self.cost,
            self.market,
            self.instrument,
            None if self._gamma is None else self._gamma[rows],
            self._greeks,
        )


def build_features(instrument: Instrument, prices: np.ndarray, market: MarketSpec) -> np.ndarray:
    """Policy inputs at every decision time ``t_0 .. t_{n-1}``.

    Columns: log-moneyness, time to maturity, volatility, and for lookbacks the
    running maximum of the log-moneyness.
    """
    prices = np.atleast_2d(np.asarray(prices, dtype=np.float64))
    n = prices.shape[1] - 1
    if n < 1:
        raise ValueError("need at least one step to build features")
    logm = np.log(prices[:, :n] / instrument.strike)
    tau = np.broadcast_to(market.maturity - market.times()[:n], logm.shape)
    vol = np.full_like(logm, market.sigma)
    cols = [logm, tau, vol]
    if instrument.is_lookback:
        cols.append(np.maximum.accumulate(logm, axis=1))
    return np.stack(cols, axis=-1)


def _sensitivities(prices, market, instrument, greeks=None, want_gamma=False):
    n = prices.shape[1] - 1
    s = prices[:, :n]
    tau = market.maturity - market.times()[:n]
    if not instrument.is_lookback:
        delta = bs_delta(s, instrument.strike, market.sigma, tau[None, :])
        gamma = bs_gamma(s, instrument.strike, market.sigma, tau[None, :]) if want_gamma else None
        return np.asarray(delta), gamma
    if greeks is None:
        greeks = LookbackGreeks(instrument.strike, market.sigma, market.dt)
    running = np.maximum.accumulate(s, axis=1)
    delta = np.empty_like(s)
    gamma = np.empty_like(s) if want_gamma else None
    for i in range(n):
        d, g = greeks.delta_gamma(s[:, i], running[:, i], n - i)
        delta[:, i] = d
        if want_gamma:
            gamma[:, i] = g
    return delta, gamma


_LOOKBACK_ESTIMATORS: dict[tuple, LookbackGreeks] = {}


def make_context(paths: PathSet | np.ndarray, instrument: Instrument, cost: float, market: MarketSpec | None = None) -> HedgeContext:
    if isinstance(paths, PathSet):
        market, prices = paths.market, paths.prices
    else:
        prices = np.asarray(paths, dtype=np.float64)
        if market is None:
            raise ValueError("market spec required for a raw price matrix")
    greeks = None
    if instrument.is_lookback:
        key = (instrument.strike, market.sigma, market.dt)
        greeks = _LOOKBACK_ESTIMATORS.get(key)
        if greeks is None:
            greeks = _LOOKBACK_ESTIMATORS[key] = LookbackGreeks(*key)
    delta, _ = _sensitivities(prices, market, instrument, greeks)
    return HedgeContext(prices, build_features(instrument, prices, market), delta, cost, market, instrument, None, greeks)


def ntb_bands(params, features, center, tape: Tape) -> tuple[Var, Var]:
    """Band ``[center - LeakyReLU(out_1), center + LeakyReLU(out_0)]``."""
    out = mlp_forward(params, features, tape)
    if out.value.shape[-1] != 2:
        raise ValueError("band network needs two outputs")
    up = ad.leaky_relu(ad.column(out, 0), BAND_SLOPE)
    down = ad.leaky_relu(ad.column(out, 1), BAND_SLOPE)
    return center - down, center + up


def ntb_step(params, features, delta_prev, bs_delta_val, leak: float, tape: Tape) -> Var:
    """One band-network decision: clamp the current position into the band."""
    lo, hi = ntb_bands(params, features, bs_delta_val, tape)
    return ad.clamp(delta_prev, lo, hi, leak)


def ff_step(params, features, delta_prev, bs_delta_val, tape: Tape) -> Var:
    """One feed-forward decision ``delta_BS + tanh(NN(features, delta_prev))``."""
    x = ad.concat([features if isinstance(features, Var) else tape.data(features), delta_prev])
    out = mlp_forward(params, x, tape)
    if out.value.shape[-1] != 1:
        raise ValueError("feed-forward network needs one output")
    return ad.tanh(ad.column(out, 0)) + bs_delta_val


def ww_band(c, s, gamma, risk_aversion, bs_delta_val):
    """Asymptotic band ``delta -/+ (3 c s gamma^2 / (2 lambda))^(1/3)``."""
    if np.any(np.asarray(c) < 0) or np.any(np.asarray(s) <= 0) or risk_aversion <= 0:
        raise ValueError("need c >= 0, s > 0 and risk aversion > 0")
    half = np.cbrt(1.5 * c * s * np.square(gamma) / risk_aversion)
    return bs_delta_val - half, bs_delta_val + half


class Policy(Protocol):
    def positions(self, ctx: HedgeContext, tape: Tape, weights: list[Var] | None = None) -> list[Var]:
        """Positions ``h_0 .. h_{n-1}``; ``h_i`` is held over ``[t_i, t_{i+1})``."""
        ...


@dataclass
class NoTransactionBandNet:
    params: MlpParams
    leak: float = 0.01
    check_bands: bool = False
    kind: str = "ntb"

    def bands(self, ctx: HedgeContext, tape: Tape, weights=None) -> tuple[Var, Var]:
        """Bands for every path and decision time, shape ``(n_paths, n_steps)``."""
        return ntb_bands(weights or self.params, ctx.features, ctx.delta, tape)

    def positions(self, ctx, tape, weights=None):
        # bands never see the position, so all steps go through the network at once
        lo, hi = self.bands(ctx, tape, weights)
        held = tape.const(np.zeros(ctx.n_paths))
        out = []
        for i in range(ctx.n_steps):
            l_i, h_i = ad.column(lo, i), ad.column(hi, i)
            held = ad.clamp(held, l_i, h_i, self.leak)
            if self.check_bands:
                lv, hv, v = l_i.value, h_i.value, held.value
                ok = (lv > hv) | ((v >= lv) & (v <= hv))
                if not ok.all():
                    raise BandViolation(f"step {i}: {int((~ok).sum())} positions outside their band")
            out.append(held)
        return out


@dataclass
class FeedForwardNet:
    params: MlpParams
    kind: str = "ff"

    def positions(self, ctx, tape, weights=None):
        w = weights or self.params.attach(tape)
        held = tape.const(np.zeros(ctx.n_paths))
        out = []
        for i in range(ctx.n_steps):
            held = ff_step(w, ctx.features[:, i, :], held, ctx.delta[:, i], tape)
            out.append(held)
        return out


@dataclass
class WhalleyWilmott:
    risk_aversion: float = 1.0
    kind: str = "ww"

    def band_arrays(self, ctx: HedgeContext) -> tuple[np.ndarray, np.ndarray]:
        return ww_band(ctx.cost, ctx.prices[:, :-1], ctx.gamma, self.risk_aversion, ctx.delta)

    def positions(self, ctx, tape, weights=None):
        lo, hi = self.band_arrays(ctx)
        held = tape.const(np.zeros(ctx.n_paths))
        out = []
        for i in range(ctx.n_steps):
            held = ad.clamp(held, lo[:, i], hi[:, i])
            out.append(held)
        return out


@dataclass
class DeltaHedge:
    kind: str = "bs"

    def positions(self, ctx, tape, weights=None):
        return [tape.const(ctx.delta[:, i]) for i in range(ctx.n_steps)]


@dataclass
class ConstantHedge:
    """Hold ``value`` shares from ``t_0`` on; ``value=0`` never trades."""

    value: float = 0.0
    kind: str = "const"

    def positions(self, ctx, tape, weights=None):
        return [tape.const(np.full(ctx.n_paths, float(self.value))) for _ in range(ctx.n_steps)]
