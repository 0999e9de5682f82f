"""Command line entry point: ``bandhedge <verb> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from .experiment import (
    METHODS,
    ExperimentConfig,
    emit_band_profile,
    emit_scaling_fit,
    evaluation_sims,
    instrument_named,
    read_table,
    run_experiment,
)
from .policy import DeltaHedge, WhalleyWilmott
from .risk import evaluate_policy
from .trainer import load_checkpoint, make_policy, save_checkpoint, train

log = logging.getLogger("bandhedge")


def _config(args) -> ExperimentConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        overrides["out_dir"] = args.out
    cfg = ExperimentConfig.from_toml(args.config, desk_scale=args.desk_scale, **overrides)
    if getattr(args, "lr", None) is not None:
        cfg = replace(cfg, train=cfg.train.replace(learning_rate=args.lr))
    return cfg


def _cmd_train(args) -> int:
    cfg = _config(args)
    instrument = instrument_named(args.instrument)
    tc = cfg.train.replace(seed=cfg.seed)
    params, history = train(args.method, instrument, cfg.market, args.cost, tc)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{args.instrument}_{args.method}_c{args.cost:.6e}_s{cfg.seed}"
    ckpt = out / f"{stem}.ckpt"
    save_checkpoint(ckpt, args.method, params, {"instrument": args.instrument, "cost": args.cost, "config_digest": tc.digest()})
    history.to_csv(out / f"{stem}_history.csv")
    print(json.dumps({"checkpoint": str(ckpt), "final_validation_loss": history.losses[-1] if history.losses else None}))
    return 0


def _cmd_evaluate(args) -> int:
    cfg = _config(args)
    instrument = instrument_named(args.instrument)
    lam = cfg.train.risk_aversion
    if args.checkpoint:
        kind, params, _ = load_checkpoint(args.checkpoint)
        policy = make_policy(kind, params, cfg.train.leak)
    elif args.method == "ww":
        policy = WhalleyWilmott(lam)
    elif args.method == "bs":
        policy = DeltaHedge()
    else:
        print("error: networks need --checkpoint", file=sys.stderr)
        return 2
    ev = evaluate_policy(policy, instrument, evaluation_sims(cfg, 0), args.cost, lam)
    report = {k: v for k, v in asdict(ev).items() if not k.startswith("sim_")}
    report.update(cost=args.cost, method=getattr(policy, "kind", args.method))
    print(json.dumps(report))
    return 0


def _cmd_sweep(args) -> int:
    cfg = _config(args)
    if args.methods:
        cfg = replace(cfg, methods=tuple(args.methods.split(",")))
    if args.instruments:
        cfg = replace(cfg, instruments=tuple(args.instruments.split(",")))
    manifest = run_experiment(cfg)
    print(manifest["run_dir"])
    for failure in manifest["failures"]:
        print(f"failed cell {failure['cell']}: {failure['error']}", file=sys.stderr)
    return 1 if manifest["failures"] else 0


def _cmd_band_profile(args) -> int:
    cfg = _config(args)
    kind, params, meta = load_checkpoint(args.checkpoint)
    instrument = instrument_named(args.instrument or meta.get("instrument", "european"))
    cost = args.cost if args.cost is not None else float(meta.get("cost", 0.0))
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    emit_band_profile(kind, params, instrument, cfg.market, cost, args.tau, risk_aversion=cfg.train.risk_aversion, out_file=out)
    print(out)
    return 0


def _cmd_scaling_fit(args) -> int:
    rows = [r for r in read_table(args.table) if r.method == args.method]
    exponent, r2 = emit_scaling_fit(rows)
    print(json.dumps({"method": args.method, "exponent": exponent, "r2": r2}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bandhedge", description="Deep hedging under proportional transaction costs.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--config", help="TOML experiment file; omitted keys keep the full-scale defaults")
        p.add_argument("--desk-scale", action="store_true", help="5,000 paths x 200 iterations preset")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--lr", type=float, help="learning-rate override")

    p = sub.add_parser("train", help="train one network")
    common(p)
    p.add_argument("--method", choices=("ntb", "ff"), default="ntb")
    p.add_argument("--instrument", default="european")
    p.add_argument("--cost", type=float, required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="utility and price of a checkpoint or closed-form policy")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--method", choices=METHODS, default="bs")
    p.add_argument("--instrument", default="european")
    p.add_argument("--cost", type=float, required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("sweep", help="run the full (instrument, method, cost, repeat) grid")
    common(p)
    p.add_argument("--methods", help="comma separated subset of " + ",".join(METHODS))
    p.add_argument("--instruments", help="comma separated, e.g. european,lookback")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("band-profile", help="band edges of an ntb checkpoint on a log-moneyness grid")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--instrument")
    p.add_argument("--cost", type=float)
    p.add_argument("--tau", type=float, default=15 / 365)
    p.add_argument("--output", default="band_profile.csv")
    p.set_defaults(func=_cmd_band_profile)

    p = sub.add_parser("scaling-fit", help="log-log slope of the price spread")
    p.add_argument("table", help="results CSV or JSON")
    p.add_argument("--method", default="ww")
    p.set_defaults(func=_cmd_scaling_fit)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
