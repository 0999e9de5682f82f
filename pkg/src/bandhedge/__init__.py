"""Deep hedging with no-transaction band networks under proportional costs."""

from .instruments import european_call, lookback_call, payoff
from .market import DEFAULT_MARKET, MarketSpec, PathSet, generate_paths
from .policy import ConstantHedge, DeltaHedge, FeedForwardNet, NoTransactionBandNet, WhalleyWilmott
from .risk import entropic_risk, evaluate_policy, indifference_price, simulate_hedge
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "MarketSpec",
    "PathSet",
    "DEFAULT_MARKET",
    "generate_paths",
    "european_call",
    "lookback_call",
    "payoff",
    "NoTransactionBandNet",
    "FeedForwardNet",
    "WhalleyWilmott",
    "DeltaHedge",
    "ConstantHedge",
    "simulate_hedge",
    "entropic_risk",
    "evaluate_policy",
    "indifference_price",
    "TrainConfig",
    "train",
]
