"""Sweeps over (instrument, method, cost, repeat) cells and their outputs."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .instruments import Instrument, bs_delta, bs_gamma, european_call, lookback_call
from .market import MarketSpec, generate_paths
from .policy import DeltaHedge, MlpParams, WhalleyWilmott, ntb_bands, ww_band
from .autodiff import Tape
from .risk import evaluate_policy
from .trainer import (
    DESK_SCALE,
    EVALUATION_STREAM,
    TrainConfig,
    default_workers,
    init_params,
    make_policy,
    save_checkpoint,
    train,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = [
    "METHODS",
    "TABLE_COLUMNS",
    "cost_grid",
    "ExperimentConfig",
    "ResultRow",
    "CellResult",
    "instrument_named",
    "evaluation_sims",
    "run_cell",
    "run_experiment",
    "summarize",
    "emit_tables",
    "read_table",
    "emit_scaling_fit",
    "emit_band_profile",
]

log = logging.getLogger(__name__)

METHODS = ("ntb", "ff", "ww", "bs")
NETWORKS = ("ntb", "ff")
TABLE_COLUMNS = ("cost", "method", "utility_mean", "utility_stderr", "price_mean", "price_stderr", "price_spread")


def cost_grid() -> list[float]:
    """``0`` followed by ``exp(k)`` for ``k = -10, -9.75, ..., -5``."""
    return [0.0] + [math.exp(-10.0 + 0.25 * j) for j in range(21)]


def instrument_named(name: str) -> Instrument:
    if name in ("european", "european_call"):
        return european_call()
    if name in ("lookback", "lookback_call", "lookback_call_fixed_strike"):
        return lookback_call()
    raise ValueError(f"unknown instrument {name!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    instruments: tuple[str, ...] = ("european", "lookback")
    methods: tuple[str, ...] = METHODS
    costs: tuple[float, ...] = tuple(cost_grid())
    train: TrainConfig = TrainConfig()
    market: MarketSpec = MarketSpec()
    n_repeats: int = 5
    eval_sims: int = 20
    eval_paths: int = 50_000
    seed: int = 0
    out_dir: str = "runs"
    desk_scale: bool = False

    def __post_init__(self):
        if self.n_repeats < 1:
            raise ValueError("n_repeats must be >= 1")
        if self.eval_sims < 1 or self.eval_paths < 1:
            raise ValueError("evaluation needs at least one simulation and one path")
        bad = [c for c in self.costs if not 0.0 <= c < 1.0]
        if bad:
            raise ValueError(f"cost rates must lie in [0, 1): {bad}")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}; choose from {METHODS}")
        for name in self.instruments:
            instrument_named(name)

    @classmethod
    def desk(cls, **changes) -> ExperimentConfig:
        """CI-sized preset: 5,000 paths x 200 iterations, 3 repeats."""
        base = dict(train=TrainConfig(**DESK_SCALE), n_repeats=3, eval_sims=4, eval_paths=50_000, desk_scale=True)
        return cls(**{**base, **changes})

    @classmethod
    def from_toml(cls, file=None, *, desk_scale: bool = False, **overrides) -> ExperimentConfig:
        """Read ``[experiment]``, ``[market]`` and ``[train]`` tables.

        Missing keys keep their defaults, so an empty file is the full
        protocol. ``desk_scale`` (or ``desk_scale = true`` in the file) swaps
        in the CI preset before the file's own values are applied.
        """
        data = {}
        if file is not None:
            with open(file, "rb") as fh:
                data = tomllib.load(fh)
        unknown = set(data) - {"experiment", "market", "train"}
        if unknown:
            raise ValueError(f"unknown config sections {sorted(unknown)}")
        exp = dict(data.get("experiment", {}))
        desk_scale = desk_scale or bool(exp.pop("desk_scale", False))
        base = cls.desk() if desk_scale else cls()
        train_cfg = base.train.replace(**data.get("train", {}))
        market = MarketSpec(**{**asdict(base.market), **data.get("market", {})})
        for key in ("instruments", "methods", "costs"):
            if key in exp:
                exp[key] = tuple(exp[key])
        exp.update(overrides)
        known = {f.name for f in fields(cls)}
        extra = set(exp) - known
        if extra:
            raise ValueError(f"unknown experiment keys {sorted(extra)}")
        merged = {f.name: getattr(base, f.name) for f in fields(cls)}
        merged.update(exp, train=train_cfg, market=market)
        return cls(**merged)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["instruments"] = list(self.instruments)
        d["methods"] = list(self.methods)
        d["costs"] = list(self.costs)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def run_dir(self) -> Path:
        return Path(self.out_dir) / f"run-{self.digest()}"


@dataclass(frozen=True)
class ResultRow:
    cost: float
    method: str
    utility_mean: float
    utility_stderr: float
    price_mean: float
    price_stderr: float
    price_spread: float

    def __post_init__(self):
        if self.utility_stderr < 0 or self.price_stderr < 0:
            raise ValueError("standard errors must be non-negative")


@dataclass
class CellResult:
    instrument: str
    method: str
    cost: float
    repeat: int
    utility: float = float("nan")
    utility_stderr: float = float("nan")
    price: float = float("nan")
    price_stderr: float = float("nan")
    price_via_utility: float = float("nan")
    mean_cost: float = float("nan")
    history: list[tuple[int, float]] = field(default_factory=list)
    params: MlpParams | None = None
    error: str | None = None

    @property
    def key(self) -> tuple:
        return (self.instrument, self.method, self.cost, self.repeat)


def evaluation_sims(config: ExperimentConfig, repeat: int):
    """Evaluation path sets for one repeat, shared by every method and cost."""
    seed = config.seed + repeat
    return [
        generate_paths(config.market, config.eval_paths, seed, stream=EVALUATION_STREAM + j)
        for j in range(config.eval_sims)
    ]


def run_cell(config: ExperimentConfig, instrument_name: str, method: str, cost: float, repeat: int) -> CellResult:
    """Train (networks) or build (closed-form) one policy, then evaluate it."""
    cell = CellResult(instrument_name, method, cost, repeat)
    instrument = instrument_named(instrument_name)
    lam = config.train.risk_aversion
    try:
        if method in NETWORKS:
            tc = config.train.replace(seed=config.seed + repeat)
            params, history = train(method, instrument, config.market, cost, tc, workers=1)
            cell.params = params
            cell.history = list(zip(history.iterations, history.losses))
            policy = make_policy(method, params, tc.leak)
        elif method == "ww":
            policy = WhalleyWilmott(lam)
        elif method == "bs":
            policy = DeltaHedge()
        else:
            raise ValueError(f"unknown method {method!r}")
        ev = evaluate_policy(policy, instrument, evaluation_sims(config, repeat), cost, lam)
        cell.utility, cell.utility_stderr = ev.utility, ev.utility_stderr
        cell.price, cell.price_stderr = ev.price, ev.price_stderr
        cell.price_via_utility = ev.price_via_utility
        cell.mean_cost = ev.mean_cost
    except Exception as exc:  # recorded per cell, the sweep goes on
        log.exception("cell %s failed", cell.key)
        cell.error = f"{type(exc).__name__}: {exc}"
    return cell


def _run_cell_args(args):
    return run_cell(*args)


def _baseline(config: ExperimentConfig, instrument_name: str, repeat: int) -> float:
    """``p(0)``: delta hedge at zero cost on the repeat's evaluation paths."""
    ev = evaluate_policy(DeltaHedge(), instrument_named(instrument_name), evaluation_sims(config, repeat), 0.0, config.train.risk_aversion)
    return ev.price


def summarize(cells: Sequence[CellResult], baselines: dict[tuple[str, int], float], instrument_name: str) -> list[ResultRow]:
    """One row per (method, cost): means and standard errors over repeats."""
    groups: dict[tuple[str, float], list[CellResult]] = {}
    for c in cells:
        if c.instrument == instrument_name and c.error is None:
            groups.setdefault((c.method, c.cost), []).append(c)
    rows = []
    for (method, cost), group in groups.items():
        group = sorted(group, key=lambda c: c.repeat)
        u = np.array([c.utility for c in group])
        p = np.array([c.price for c in group])
        spread = np.array([c.price - baselines[(instrument_name, c.repeat)] for c in group])
        if len(group) > 1:
            u_err = float(u.std(ddof=1) / math.sqrt(len(group)))
            p_err = float(p.std(ddof=1) / math.sqrt(len(group)))
        else:
            u_err, p_err = group[0].utility_stderr, group[0].price_stderr
        rows.append(ResultRow(cost, method, float(u.mean()), u_err, float(p.mean()), p_err, float(spread.mean())))
    order = {m: i for i, m in enumerate(METHODS)}
    rows.sort(key=lambda r: (r.cost, order.get(r.method, len(order))))
    return rows


def _cell_stem(cell: CellResult) -> str:
    return f"{cell.instrument}_{cell.method}_c{cell.cost:.6e}_r{cell.repeat}"


def run_experiment(config: ExperimentConfig, workers: int | None = None) -> dict:
    """Run every cell, write tables, histories, checkpoints and a manifest.

    Returns the manifest. ``manifest["failures"]`` lists cells that raised;
    the remaining cells are still reported.
    """
    workers = default_workers() if workers is None else workers
    run_dir = config.run_dir()
    jobs = [
        (config, inst, method, cost, r)
        for inst in config.instruments
        for method in config.methods
        for cost in config.costs
        for r in range(config.n_repeats)
    ]
    log.info("running %d cells into %s", len(jobs), run_dir)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_run_cell_args, jobs))
    else:
        cells = [run_cell(*job) for job in jobs]
    cells.sort(key=lambda c: (config.instruments.index(c.instrument), config.methods.index(c.method), c.cost, c.repeat))

    baselines, failures = {}, []
    for inst in config.instruments:
        for r in range(config.n_repeats):
            try:
                baselines[(inst, r)] = _baseline(config, inst, r)
            except Exception as exc:
                log.exception("baseline %s/%d failed", inst, r)
                baselines[(inst, r)] = float("nan")
                failures.append({"cell": [inst, "baseline", 0.0, r], "error": f"{type(exc).__name__}: {exc}"})
    (run_dir / "histories").mkdir(parents=True, exist_ok=True)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    files = []
    for cell in cells:
        if cell.params is None:
            continue
        stem = _cell_stem(cell)
        hist = run_dir / "histories" / f"{stem}.csv"
        with open(hist, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "validation_loss"])
            for it, loss in cell.history:
                w.writerow([it, repr(loss)])
        ckpt = run_dir / "checkpoints" / f"{stem}.ckpt"
        meta = {"instrument": cell.instrument, "cost": cell.cost, "repeat": cell.repeat, "config_digest": config.train.replace(seed=config.seed + cell.repeat).digest()}
        save_checkpoint(ckpt, cell.method, cell.params, meta)
        files += [hist, ckpt]

    tables = {}
    for inst in config.instruments:
        rows = summarize(cells, baselines, inst)
        if rows:
            files += emit_tables(rows, run_dir, stem=f"results_{inst}")
        tables[inst] = rows

    failures += [{"cell": list(c.key), "error": c.error} for c in cells if c.error]
    cell_records = [
        {k: getattr(c, k) for k in ("instrument", "method", "cost", "repeat", "utility", "utility_stderr", "price", "price_stderr", "price_via_utility", "mean_cost", "error")}
        for c in cells
    ]
    cells_file = run_dir / "cells.json"
    cells_file.write_text(json.dumps(cell_records, indent=1, allow_nan=True))
    files.append(cells_file)
    manifest = {
        "config": config.to_dict(),
        "config_digest": config.digest(),
        "baselines": {f"{k[0]}/{k[1]}": v for k, v in baselines.items()},
        "files": {str(p.relative_to(run_dir)): hashlib.sha256(p.read_bytes()).hexdigest() for p in files},
        "failures": failures,
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    manifest["run_dir"] = str(run_dir)
    manifest["tables"] = tables
    manifest["cells"] = cells
    return manifest


# -- outputs -----------------------------------------------------------------


def _format_row(row: ResultRow) -> list[str]:
    return [f"{row.cost:.6f}", row.method] + [f"{getattr(row, k):.6f}" for k in TABLE_COLUMNS[2:]]


def table_csv(rows: Iterable[ResultRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    for row in rows:
        w.writerow(_format_row(row))
    return buf.getvalue()


def emit_tables(rows: Sequence[ResultRow], out_dir, stem: str = "results", methods: Iterable[str] | None = None) -> list[Path]:
    """Write ``<stem>.csv`` (6 decimals) and ``<stem>.json`` (full precision).

    Raises before writing anything if no row survives the ``methods`` filter.
    """
    if methods is not None:
        keep = set(methods)
        rows = [r for r in rows if r.method in keep]
    if not rows:
        raise ValueError("no result rows to emit")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
    csv_path.write_text(table_csv(rows))
    json_path.write_text(json.dumps([asdict(r) for r in rows], indent=1))
    return [csv_path, json_path]


def read_table(file) -> list[ResultRow]:
    """Parse a results CSV or JSON back into rows."""
    path = Path(file)
    if path.suffix == ".json":
        return [ResultRow(**d) for d in json.loads(path.read_text())]
    with open(path, newline="") as fh:
        return [
            ResultRow(float(d["cost"]), d["method"], *(float(d[k]) for k in TABLE_COLUMNS[2:]))
            for d in csv.DictReader(fh)
        ]


def emit_scaling_fit(rows: Sequence[ResultRow], n_smallest: int = 8, min_points: int = 5) -> tuple[float, float]:
    """Slope and r^2 of ``log(spread)`` against ``log(c)``.

    Uses the ``n_smallest`` nonzero costs and drops nonpositive spreads.
    """
    methods = {r.method for r in rows}
    if len(methods) > 1:
        raise ValueError(f"rows mix methods {sorted(methods)}")
    nonzero = sorted((r for r in rows if r.cost > 0), key=lambda r: r.cost)[:n_smallest]
    usable = [r for r in nonzero if r.price_spread > 0]
    if len(usable) < min_points:
        raise ValueError(f"only {len(usable)} rows with positive spread; need {min_points}")
    x = np.log([r.cost for r in usable])
    y = np.log([r.price_spread for r in usable])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), r2


def emit_band_profile(
    kind: str,
    params: MlpParams,
    instrument: Instrument,
    market: MarketSpec,
    cost: float,
    tau: float = 15 / 365,
    grid: Sequence[float] | None = None,
    risk_aversion: float = 1.0,
    out_file=None,
) -> np.ndarray:
    """Band edges of a band network against the asymptotic band.

    Returns an array with columns ``log_moneyness, lo, hi, ww_lo, ww_hi,
    inverted`` and writes it as CSV when ``out_file`` is given. For lookbacks
    the running maximum is taken equal to the current price.
    """
    if kind != "ntb":
        raise ValueError(f"band profile needs an ntb checkpoint, got {kind!r}")
    if not 0 < tau <= market.maturity:
        raise ValueError("tau must lie in (0, maturity]")
    x = np.linspace(-0.1, 0.1, 101) if grid is None else np.asarray(grid, dtype=np.float64)
    s = instrument.strike * np.exp(x)
    if instrument.is_lookback:
        from .instruments import lookback_delta_gamma

        delta, gamma = lookback_delta_gamma(market, instrument, s, s, tau)
        feats = np.stack([x, np.full_like(x, tau), np.full_like(x, market.sigma), x], axis=-1)
    else:
        delta = bs_delta(s, instrument.strike, market.sigma, tau)
        gamma = bs_gamma(s, instrument.strike, market.sigma, tau)
        feats = np.stack([x, np.full_like(x, tau), np.full_like(x, market.sigma)], axis=-1)
    tape = Tape(grad=False)
    tape.data(feats)
    lo, hi = ntb_bands(params, feats, np.asarray(delta, dtype=np.float64), tape)
    ww_lo, ww_hi = ww_band(cost, s, gamma, risk_aversion, delta)
    table = np.column_stack([x, lo.value, hi.value, ww_lo, ww_hi, (lo.value > hi.value).astype(np.float64)])
    if out_file is not None:
        with open(out_file, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["log_moneyness", "lo", "hi", "ww_lo", "ww_hi", "inverted"])
            for row in table:
                w.writerow([repr(float(v)) for v in row[:5]] + [int(row[5])])
    return table


def zero_head_params(kind: str, instrument: Instrument, seed: int = 0) -> MlpParams:
    """Freshly initialised weights; the zero output layer makes the policy a delta hedge."""
    return init_params(kind, instrument, seed)
