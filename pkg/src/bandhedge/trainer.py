"""Adam training of hedging networks against the exponential-utility loss."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .instruments import Instrument
from .market import MarketSpec, generate_paths
from .policy import (
    FeedForwardNet,
    MlpParams,
    NoTransactionBandNet,
    init_mlp,
    make_context,
    n_features,
)
from .risk import entropic_risk, evaluate_outcome, simulate_hedge

__all__ = [
    "TrainConfig",
    "DESK_SCALE",
    "AdamState",
    "adam_step",
    "NonFiniteGradient",
    "TrainingDiverged",
    "LearningHistory",
    "make_policy",
    "loss_and_grads",
    "validation_loss",
    "zero_liability_risk",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
    "default_workers",
    "TRAIN_STREAM",
    "VALIDATION_STREAM",
    "EVALUATION_STREAM",
]

log = logging.getLogger(__name__)

# stream namespaces keep training, validation and evaluation draws disjoint
TRAIN_STREAM = 0
VALIDATION_STREAM = 1 << 62
EVALUATION_STREAM = 1 << 63
_INIT_STREAM = 0xA5A5


def default_workers() -> int:
    return max(1, int(os.environ.get("BANDHEDGE_WORKERS", "1")))


@dataclass(frozen=True)
class TrainConfig:
    n_iterations: int = 1000
    paths_per_iteration: int = 50_000
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    risk_aversion: float = 1.0
    validation_every: int = 50
    validation_sims: int = 20
    validation_paths: int | None = None
    seed: int = 0
    chunk_size: int = 1024
    leak: float = 0.01
    debug_checks: bool = False
    divergence_limit: float = 1e6

    def __post_init__(self):
        if self.n_iterations < 0:
            raise ValueError("n_iterations must be >= 0")
        for name in ("paths_per_iteration", "learning_rate", "eps", "risk_aversion", "validation_every", "validation_sims", "chunk_size"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.leak < 0:
            raise ValueError("leak must be non-negative")

    @property
    def n_validation_paths(self) -> int:
        return self.validation_paths or self.paths_per_iteration

    def replace(self, **changes) -> TrainConfig:
        return TrainConfig(**{**asdict(self), **changes})

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


DESK_SCALE = dict(n_iterations=200, paths_per_iteration=5000, validation_every=50, validation_sims=4)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> AdamState:
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


class NonFiniteGradient(FloatingPointError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, history: LearningHistory):
        super().__init__(message)
        self.history = history


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``.

    Raises before touching anything if a gradient is not finite.
    """
    if not (len(params) == len(grads) == len(state.m)):
        raise ValueError("params, grads and state must have equal length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"parameter {i}: shape {p.shape} vs gradient {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in parameter {i} of shape {g.shape}")
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


@dataclass
class LearningHistory:
    method: str
    cost: float
    iterations: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)

    def append(self, iteration: int, loss: float) -> None:
        if self.iterations and iteration <= self.iterations[-1]:
            raise ValueError("iterations must be strictly increasing")
        self.iterations.append(iteration)
        self.losses.append(loss)

    def __len__(self) -> int:
        return len(self.iterations)

    def loss_at(self, iteration: int) -> float:
        return self.losses[self.iterations.index(iteration)]

    def utilities(self) -> list[float]:
        return [-x for x in self.losses]

    def to_csv(self, file) -> None:
        with open(file, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "validation_loss"])
            for it, loss in zip(self.iterations, self.losses):
                w.writerow([it, repr(loss)])

    @classmethod
    def from_csv(cls, file, method: str = "", cost: float = float("nan")) -> LearningHistory:
        hist = cls(method, cost)
        with open(file, newline="") as fh:
            for row in csv.DictReader(fh):
                hist.append(int(row["iteration"]), float(row["validation_loss"]))
        return hist


def make_policy(kind: str, params: MlpParams, leak: float = 0.01, check_bands: bool = False):
    if kind == "ntb":
        return NoTransactionBandNet(params, leak, check_bands)
    if kind == "ff":
        return FeedForwardNet(params)
    raise ValueError(f"unknown network kind {kind!r}")


def init_params(kind: str, instrument: Instrument, seed: int) -> MlpParams:
    rng = np.random.Generator(np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, _INIT_STREAM]))
    nf = n_features(instrument)
    if kind == "ntb":
        return init_mlp(nf, 2, rng)
    if kind == "ff":
        return init_mlp(nf + 1, 1, rng)
    raise ValueError(f"unknown network kind {kind!r}")


def _chunk_loss(policy, instrument, ctx, cost, risk_aversion, weight, include_payoff=True):
    tape = Tape()
    out = simulate_hedge(policy, instrument, None, cost, tape, context=ctx, include_payoff=include_payoff)
    loss = ad.reduce_sum(ad.exp(out.wealth * (-risk_aversion)), weight)
    adj = tape.backward(loss)
    return float(loss.value[0]), [adj[w.index] for w in out.weights]


def loss_and_grads(policy, instrument, paths, cost, risk_aversion=1.0, chunk_size=1024, workers=1, include_payoff=True):
    """Loss ``E[exp(-lambda P)]`` and its gradient wrt the policy weights.

    Paths are cut into fixed ``chunk_size`` blocks whose partial sums are
    added in block order, so the result does not depend on ``workers``.
    """
    ctx = make_context(paths, instrument, cost)
    n = ctx.n_paths
    blocks = [ctx.subset(slice(s, s + chunk_size)) for s in range(0, n, chunk_size)]

    def run(block):
        return _chunk_loss(policy, instrument, block, cost, risk_aversion, 1.0 / n, include_payoff)

    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, blocks))
    else:
        parts = [run(b) for b in blocks]
    loss = 0.0
    grads = [np.zeros_like(a) for a in policy.params.arrays()]
    for part_loss, part_grads in parts:
        loss += part_loss
        for g, pg in zip(grads, part_grads):
            g += pg
    return loss, grads


def validation_loss(policy, instrument, market, cost, config: TrainConfig, include_payoff: bool = True) -> float:
    """Mean of the per-simulation losses over fixed validation simulations."""
    losses = []
    for j in range(config.validation_sims):
        paths = generate_paths(market, config.n_validation_paths, config.seed, stream=VALIDATION_STREAM + j)
        out = evaluate_outcome(policy, instrument, paths, cost, include_payoff=include_payoff)
        losses.append(float(np.mean(np.exp(-config.risk_aversion * out.terminal_wealth))))
    return float(np.mean(losses))


def train(
    kind: str,
    instrument: Instrument,
    market: MarketSpec,
    cost: float,
    config: TrainConfig = TrainConfig(),
    *,
    workers: int | None = None,
    params: MlpParams | None = None,
    validate: bool = True,
    include_payoff: bool = True,
) -> tuple[MlpParams, LearningHistory]:
    """Train a band (``"ntb"``) or feed-forward (``"ff"``) network.

    Every iteration draws fresh paths keyed by ``(config.seed, iteration)``.
    The validation loss is recorded before the first update and then every
    ``validation_every`` iterations and at the end. ``include_payoff=False``
    trains against the zero liability instead.
    """
    if not 0.0 <= cost < 1.0:
        raise ValueError(f"cost rate must lie in [0, 1), got {cost}")
    workers = default_workers() if workers is None else workers
    params = init_params(kind, instrument, config.seed) if params is None else params.copy()
    policy = make_policy(kind, params, config.leak, config.debug_checks)
    arrays = params.arrays()
    state = AdamState.zeros_like(arrays)
    history = LearningHistory(kind, cost)

    def record(it):
        if not validate:
            return
        loss = validation_loss(policy, instrument, market, cost, config, include_payoff)
        history.append(it, loss)
        log.info("%s c=%.6g iter %d validation loss %.6f", kind, cost, it, loss)
        if not math.isfinite(loss) or loss > config.divergence_limit:
            raise TrainingDiverged(f"validation loss {loss} at iteration {it}", history)

    if config.n_iterations == 0:
        return params, history
    record(0)
    for it in range(config.n_iterations):
        paths = generate_paths(market, config.paths_per_iteration, config.seed, stream=TRAIN_STREAM + it)
        loss, grads = loss_and_grads(policy, instrument, paths, cost, config.risk_aversion, config.chunk_size, workers, include_payoff)
        if not math.isfinite(loss) or loss > config.divergence_limit:
            raise TrainingDiverged(f"training loss {loss} at iteration {it}", history)
        adam_step(arrays, grads, state, config.learning_rate, config.beta1, config.beta2, config.eps)
        done = it + 1
        if done % config.validation_every == 0 or done == config.n_iterations:
            record(done)
    return params, history


def zero_liability_risk(kind, instrument, market, cost, config: TrainConfig) -> tuple[float, float]:
    """Train against no liability and return ``(risk, stderr)`` on validation paths.

    In a driftless market the optimum is not to trade, so the learned risk
    should be non-negative and statistically indistinguishable from zero.
    """
    params, _ = train(kind, instrument, market, cost, config, validate=False, include_payoff=False, workers=1)
    policy = make_policy(kind, params, config.leak)
    risks = []
    for j in range(config.validation_sims):
        paths = generate_paths(market, config.n_validation_paths, config.seed, stream=VALIDATION_STREAM + j)
        wealth = evaluate_outcome(policy, instrument, paths, cost, include_payoff=False).terminal_wealth
        risks.append(entropic_risk(wealth, config.risk_aversion))
    r = np.asarray(risks)
    err = float(r.std(ddof=1) / math.sqrt(r.size)) if r.size > 1 else 0.0
    return float(r.mean()), err


# -- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"HBCKPT01"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<8sIIQ")


class CheckpointError(ValueError):
    pass


def save_checkpoint(file, kind: str, params: MlpParams, meta: dict | None = None) -> None:
    """Header, JSON metadata, then raw little-endian float64 arrays."""
    arrays = params.arrays()
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    header = {
        "format_version": CKPT_VERSION,
        "policy_kind": kind,
        "shapes": [list(a.shape) for a in arrays],
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    Path(file).write_bytes(_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, 0, len(blob)) + blob + payload)


def load_checkpoint(file, expected_kind: str | None = None, expected_shapes=None) -> tuple[str, MlpParams, dict]:
    """Return ``(kind, params, meta)``; any inconsistency raises ``CheckpointError``."""
    raw = Path(file).read_bytes()
    if len(raw) < _CKPT_HEADER.size:
        raise CheckpointError(f"checkpoint truncated: {len(raw)} bytes is shorter than the header")
    magic, version, _, n_meta = _CKPT_HEADER.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"not a checkpoint: magic {magic!r} != {CKPT_MAGIC!r}")
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} != supported {CKPT_VERSION}")
    start = _CKPT_HEADER.size
    if len(raw) < start + n_meta:
        raise CheckpointError("checkpoint truncated inside metadata")
    try:
        header = json.loads(raw[start : start + n_meta])
    except ValueError as exc:
        raise CheckpointError(f"corrupt checkpoint metadata: {exc}") from None
    payload = raw[start + n_meta :]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"checkpoint truncated: payload has {len(payload)} bytes, expected {header['payload_bytes']}")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError("checkpoint payload checksum mismatch")
    kind = header["policy_kind"]
    if expected_kind is not None and kind != expected_kind:
        raise CheckpointError(f"policy kind mismatch: checkpoint holds {kind!r}, expected {expected_kind!r}")
    shapes = [tuple(s) for s in header["shapes"]]
    if expected_shapes is not None and [tuple(s) for s in expected_shapes] != shapes:
        raise CheckpointError(f"shape mismatch: checkpoint {shapes} vs expected {[tuple(s) for s in expected_shapes]}")
    arrays, offset = [], 0
    for shape in shapes:
        size = int(np.prod(shape)) * 8
        arrays.append(np.frombuffer(payload, dtype="<f8", count=size // 8, offset=offset).reshape(shape).astype(np.float64))
        offset += size
    return kind, MlpParams.from_arrays(arrays), header["meta"]
