"""Terminal wealth under proportional costs, risk measures, and pricing."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .instruments import Instrument, payoff
from .market import PathSet
from .policy import HedgeContext, make_context

__all__ = [
    "HedgeOutcome",
    "simulate_hedge",
    "evaluate_outcome",
    "entropic_risk",
    "OceResult",
    "oce",
    "exponential_utility",
    "Evaluation",
    "evaluate_policy",
    "indifference_price",
    "utility_report",
]


@dataclass
class HedgeOutcome:
    terminal_wealth: np.ndarray
    total_cost: np.ndarray
    delta_trajectory: np.ndarray | None = None
    wealth: Var | None = None
    weights: list[Var] | None = None


def _check_cost(cost: float) -> None:
    if not 0.0 <= cost < 1.0:
        raise ValueError(f"cost rate must lie in [0, 1), got {cost}")


def simulate_hedge(
    policy,
    instrument: Instrument,
    paths: PathSet | None,
    cost: float,
    tape: Tape | None = None,
    *,
    context: HedgeContext | None = None,
    include_payoff: bool = True,
    record_deltas: bool = False,
) -> HedgeOutcome:
    """Run ``policy`` along every path and return the terminal wealth.

    ``P = -Z + sum_i h_i (S_{i+1} - S_i) - c sum_i S_i |h_i - h_{i-1}|`` with
    ``h_{-1} = 0`` and no liquidation at maturity. With a tape, network
    weights are attached as parameters and ``outcome.wealth`` is
    differentiable; without one, values are computed by the same code on a
    throwaway tape.
    """
    _check_cost(cost)
    ctx = context if context is not None else make_context(paths, instrument, cost)
    if ctx.cost != cost:
        raise ValueError("context was built for a different cost rate")
    differentiable = tape is not None
    tape = tape if differentiable else Tape(grad=False)
    prices = ctx.prices
    tape.data(prices)
    weights = None
    if differentiable and hasattr(policy, "params"):
        weights = policy.params.attach(tape)
    held = policy.positions(ctx, tape, weights)
    if len(held) != ctx.n_steps:
        raise ValueError(f"policy produced {len(held)} positions for {ctx.n_steps} steps")

    ds = np.diff(prices, axis=1)
    z = payoff(instrument, prices) if include_payoff else np.zeros(ctx.n_paths)
    gains = None
    turnover = None
    prev = 0.0
    for i, h in enumerate(held):
        g = h * ds[:, i]
        gains = g if gains is None else gains + g
        t = ad.abs_(h - prev) * prices[:, i]
        turnover = t if turnover is None else turnover + t
        prev = h
    total_cost = turnover * cost
    wealth = gains - total_cost - z
    deltas = np.stack([h.value for h in held], axis=1) if record_deltas else None
    return HedgeOutcome(
        wealth.value.copy(),
        total_cost.value.copy(),
        deltas,
        wealth if differentiable else None,
        weights,
    )


def evaluate_outcome(
    policy, instrument: Instrument, paths: PathSet, cost: float, chunk_size: int = 8192, include_payoff: bool = True
) -> HedgeOutcome:
    """Value-only simulation in fixed-size chunks to bound memory."""
    _check_cost(cost)
    ctx = make_context(paths, instrument, cost)
    wealth, costs = [], []
    for start in range(0, ctx.n_paths, chunk_size):
        block = ctx.subset(slice(start, start + chunk_size))
        out = simulate_hedge(policy, instrument, None, cost, context=block, include_payoff=include_payoff)
        wealth.append(out.terminal_wealth)
        costs.append(out.total_cost)
    return HedgeOutcome(np.concatenate(wealth), np.concatenate(costs))


def entropic_risk(wealth, risk_aversion: float = 1.0):
    """``(1/lambda) log E[exp(-lambda X)]`` with a max shift against overflow.

    Accepts an array (returns a float) or a batched ``Var`` (returns a
    differentiable batch-of-one ``Var``).
    """
    if risk_aversion <= 0:
        raise ValueError("risk aversion must be positive")
    lam = risk_aversion
    if isinstance(wealth, Var):
        x = wealth.value
        if x.size == 0:
            raise ValueError("empty sample")
        m = float(np.max(-lam * x))
        inner = ad.reduce_mean(ad.exp(wealth * (-lam) - m))
        return (ad.log(inner) + m) * (1.0 / lam)
    x = np.asarray(wealth, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("empty sample")
    y = -lam * x
    m = float(y.max())
    return (m + math.log(float(np.mean(np.exp(y - m))))) / lam


def utility_report(wealth, risk_aversion: float = 1.0) -> tuple[float, float]:
    """``(utility, loss)`` with utility ``-E[exp(-lambda P)]`` and loss its negative."""
    x = np.asarray(wealth, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("empty sample")
    loss = float(np.mean(np.exp(-risk_aversion * x)))
    return -loss, loss


def exponential_utility(risk_aversion: float = 1.0, normalized: bool = True) -> Callable[[np.ndarray], np.ndarray]:
    """``(1 - exp(-lambda x)) / lambda`` when normalized, else ``-exp(-lambda x)``.

    Only the normalized form has the entropic risk measure as its optimized
    certainty equivalent; the raw form shifts it by ``(1 + log lambda) / lambda``.
    """
    lam = risk_aversion
    if normalized:
        return lambda x: -np.expm1(-lam * x) / lam
    return lambda x: -np.exp(-lam * x)


@dataclass(frozen=True)
class OceResult:
    value: float
    argmin: float
    at_boundary: bool

    def __float__(self) -> float:
        return self.value


def oce(wealth, utility: Callable[[np.ndarray], np.ndarray], bounds: tuple[float, float], tol: float = 1e-10) -> OceResult:
    """``inf_w {w - E[u(X + w)]}`` by golden-section search on ``bounds``.

    The objective is convex for concave ``u``. If the minimum sits on an edge
    of the bracket the result is flagged with ``at_boundary``.
    """
    x = np.asarray(wealth, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("empty sample")
    lo, hi = map(float, bounds)
    if not lo < hi:
        raise ValueError("bounds must satisfy lo < hi")

    def f(w: float) -> float:
        return w - float(np.mean(utility(x + w)))

    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while (b - a) > tol * max(1.0, abs(a) + abs(b)):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    w = 0.5 * (a + b)
    fw = f(w)
    span = hi - lo
    step = 1e-6 * span
    edge = None
    if w - lo < step:
        edge = lo
    elif hi - w < step:
        edge = hi
    flagged = False
    if edge is not None:
        inner = edge + (step if edge == lo else -step) * 10
        f_edge = f(edge)
        flagged = f_edge < f(inner)
        if flagged:
            w, fw = edge, f_edge
    return OceResult(fw, w, flagged)


@dataclass
class Evaluation:
    utility: float
    utility_stderr: float
    price: float
    price_stderr: float
    mean_cost: float
    sim_utilities: np.ndarray
    sim_prices: np.ndarray
    price_via_utility: float


def evaluate_policy(
    policy,
    instrument: Instrument,
    simulations: Sequence[PathSet],
    cost: float,
    risk_aversion: float = 1.0,
    chunk_size: int = 8192,
) -> Evaluation:
    """Pool several independent simulations and report utility and price.

    The pooled price is the entropic risk of all terminal wealth. Standard
    errors come from the spread of the per-simulation values.
    """
    if not simulations:
        raise ValueError("need at least one simulation")
    wealth, costs, utils, prices = [], [], [], []
    for paths in simulations:
        out = evaluate_outcome(policy, instrument, paths, cost, chunk_size)
        wealth.append(out.terminal_wealth)
        costs.append(out.total_cost)
        utils.append(utility_report(out.terminal_wealth, risk_aversion)[0])
        prices.append(entropic_risk(out.terminal_wealth, risk_aversion))
    pooled = np.concatenate(wealth)
    utility, _ = utility_report(pooled, risk_aversion)
    price = entropic_risk(pooled, risk_aversion)
    k = len(simulations)
    utils_a, prices_a = np.asarray(utils), np.asarray(prices)
    u_err = float(utils_a.std(ddof=1) / math.sqrt(k)) if k > 1 else 0.0
    p_err = float(prices_a.std(ddof=1) / math.sqrt(k)) if k > 1 else 0.0
    return Evaluation(
        utility,
        u_err,
        price,
        p_err,
        float(np.concatenate(costs).mean()),
        utils_a,
        prices_a,
        math.log(-utility) / risk_aversion,
    )


def indifference_price(
    policy,
    instrument: Instrument,
    simulations: Sequence[PathSet],
    cost: float,
    risk_aversion: float = 1.0,
) -> tuple[float, float]:
    """Price ``pi(-Z) - pi(0)`` with ``pi(0) = 0`` (driftless market, entropic risk).

    Returns ``(price, stderr)``.
    """
    ev = evaluate_policy(policy, instrument, simulations, cost, risk_aversion)
    return ev.price, ev.price_stderr
