import json
import math
from dataclasses import replace

import numpy as np
import pytest

from bandhedge import experiment as ex
from bandhedge.cli import main
from bandhedge.experiment import (
    ExperimentConfig,
    ResultRow,
    cost_grid,
    emit_band_profile,
    emit_scaling_fit,
    emit_tables,
    read_table,
    run_experiment,
    table_csv,
)
from bandhedge.instruments import bs_delta, european_call
from bandhedge.market import DEFAULT_MARKET
from bandhedge.trainer import TrainConfig, init_params, save_checkpoint


def tiny(tmp_path, **changes):
    base = dict(
        instruments=("european",),
        methods=("ww", "bs"),
        n_repeats=1,
        eval_sims=2,
        eval_paths=2000,
        out_dir=str(tmp_path / "runs"),
    )
    return ExperimentConfig(**{**base, **changes})


def test_cost_grid():
    grid = cost_grid()
    assert len(grid) == 22
    assert grid[0] == 0.0
    assert grid[1] == pytest.approx(4.53999e-5, rel=1e-5)
    assert f"{grid[1]:.6f}" == "0.000045"
    assert grid[-1] == math.exp(-5.0)
    assert grid[14] == pytest.approx(0.001171, abs=5e-7)
    np.testing.assert_allclose(np.diff(np.log(grid[1:])), 0.25, rtol=1e-12)


def test_config_defaults_are_full_scale():
    cfg = ExperimentConfig.from_toml(None)
    assert cfg.train.n_iterations == 1000 and cfg.train.paths_per_iteration == 50_000
    assert cfg.n_repeats == 5 and len(cfg.costs) == 22 and cfg.methods == ("ntb", "ff", "ww", "bs")
    assert cfg.market == DEFAULT_MARKET


def test_config_from_toml(tmp_path):
    f = tmp_path / "exp.toml"
    f.write_text(
        """
[experiment]
methods = ["ww"]
costs = [0.0, 0.001]
n_repeats = 2

[train]
learning_rate = 0.01

[market]
sigma = 0.3
"""
    )
    cfg = ExperimentConfig.from_toml(f, desk_scale=True)
    assert cfg.methods == ("ww",) and cfg.costs == (0.0, 0.001) and cfg.n_repeats == 2
    assert cfg.train.learning_rate == 0.01 and cfg.train.n_iterations == 200
    assert cfg.market.sigma == 0.3 and cfg.desk_scale


@pytest.mark.parametrize(
    "text",
    ["[bogus]\nx = 1\n", "[experiment]\nnot_a_key = 1\n", "[experiment]\ncosts = [1.5]\n", "[experiment]\nn_repeats = 0\n"],
)
def test_bad_config_is_rejected(tmp_path, text):
    f = tmp_path / "bad.toml"
    f.write_text(text)
    with pytest.raises(ValueError):
        ExperimentConfig.from_toml(f)


def test_result_row_rejects_negative_stderr():
    with pytest.raises(ValueError):
        ResultRow(0.0, "bs", -1.0, -0.1, 0.02, 0.0, 0.0)


def row(cost=0.0, method="bs", price=0.022101, spread=0.0):
    return ResultRow(cost, method, -1.022347, 0.000004, price, 0.000004, spread)


def test_table_formatting_and_round_trip(tmp_path):
    files = emit_tables([row()], tmp_path, stem="t")
    text = files[0].read_text()
    assert text.splitlines()[0] == "cost,method,utility_mean,utility_stderr,price_mean,price_stderr,price_spread"
    assert text.splitlines()[1] == "0.000000,bs,-1.022347,0.000004,0.022101,0.000004,0.000000"
    assert table_csv(read_table(files[0])) == text
    back = read_table(files[1])
    assert back == [row()]


def test_empty_method_subset_writes_nothing(tmp_path):
    out = tmp_path / "none"
    with pytest.raises(ValueError):
        emit_tables([row()], out, methods=["ntb"])
    assert not out.exists()


def spread_rows(fn, method="ww"):
    return [ResultRow(c, method, -1.0, 0.0, 0.0, 0.0, fn(c)) for c in cost_grid()]


def test_scaling_fit_on_constructed_spreads():
    slope, r2 = emit_scaling_fit(spread_rows(lambda c: c ** (2 / 3)))
    assert slope == pytest.approx(2 / 3, abs=1e-9) and r2 == pytest.approx(1.0)
    slope, _ = emit_scaling_fit(spread_rows(lambda c: 3 * c))
    assert slope == pytest.approx(1.0, abs=1e-9)


def test_scaling_fit_uses_the_smallest_costs_only():
    # large costs follow a different law and must not leak into the fit
    rows = spread_rows(lambda c: c ** (2 / 3) if c < 3e-4 else 1.0)
    assert emit_scaling_fit(rows)[0] == pytest.approx(2 / 3, abs=1e-9)


def test_scaling_fit_needs_enough_positive_spreads():
    rows = spread_rows(lambda c: -1.0 if c < 1e-4 else c)
    with pytest.raises(ValueError):
        emit_scaling_fit(rows)
    with pytest.raises(ValueError):
        emit_scaling_fit(spread_rows(lambda c: c) + spread_rows(lambda c: c, method="bs"))


def test_band_profile_of_zero_head(tmp_path):
    params = init_params("ntb", european_call(), 0)
    out = tmp_path / "band.csv"
    table = emit_band_profile("ntb", params, european_call(), DEFAULT_MARKET, 1e-3, out_file=out)
    assert table.shape == (101, 6)
    tau = 15 / 365
    delta = bs_delta(np.exp(table[:, 0]), 1.0, 0.2, tau)
    np.testing.assert_array_equal(table[:, 1], delta)
    np.testing.assert_array_equal(table[:, 2], delta)
    assert np.all(table[:, 3] <= table[:, 4])
    lines = out.read_text().splitlines()
    assert lines[0] == "log_moneyness,lo,hi,ww_lo,ww_hi,inverted" and len(lines) == 102


def test_band_profile_rejects_ff():
    with pytest.raises(ValueError):
        emit_band_profile("ff", init_params("ff", european_call(), 0), european_call(), DEFAULT_MARKET, 1e-3)


def test_ww_sweep_over_default_grid(tmp_path):
    cfg = tiny(tmp_path, methods=("ww",))
    manifest = run_experiment(cfg, workers=1)
    rows = manifest["tables"]["european"]
    assert len(rows) == 22 and not manifest["failures"]
    assert rows[0].cost == 0.0 and rows[0].price_spread == 0.0
    run_dir = cfg.run_dir()
    assert (run_dir / "results_european.csv").exists() and (run_dir / "manifest.json").exists()


def test_sweep_is_reproducible_and_spreads_vanish_at_zero_cost(tmp_path):
    cfg = tiny(tmp_path, costs=(0.0, 1e-3), n_repeats=2)
    m1 = run_experiment(cfg, workers=1)
    first = (cfg.run_dir() / "manifest.json").read_bytes()
    m2 = run_experiment(cfg, workers=1)
    assert (cfg.run_dir() / "manifest.json").read_bytes() == first
    for r in m1["tables"]["european"]:
        if r.cost == 0.0:
            assert r.price_spread == 0.0
    for cell in m2["cells"]:
        assert abs(cell.price - cell.price_via_utility) < 1e-9


def test_networks_in_a_sweep_write_checkpoints_and_histories(tmp_path):
    train = TrainConfig(n_iterations=1, paths_per_iteration=300, validation_sims=1, validation_paths=200)
    cfg = tiny(tmp_path, methods=("ntb", "ff"), costs=(1e-3,), train=train)
    manifest = run_experiment(cfg, workers=1)
    files = json.loads((cfg.run_dir() / "manifest.json").read_text())["files"]
    assert sum(k.startswith("checkpoints/") for k in files) == 2
    assert sum(k.startswith("histories/") for k in files) == 2
    assert {r.method for r in manifest["tables"]["european"]} == {"ntb", "ff"}


def test_failed_cells_are_recorded_and_the_sweep_continues(tmp_path, monkeypatch):
    real = ex.evaluate_policy

    def flaky(policy, *args, **kwargs):
        if getattr(policy, "kind", "") == "ww":
            raise RuntimeError("boom")
        return real(policy, *args, **kwargs)

    monkeypatch.setattr(ex, "evaluate_policy", flaky)
    cfg = tiny(tmp_path, costs=(0.0, 1e-3))
    manifest = run_experiment(cfg, workers=1)
    assert len(manifest["failures"]) == 2
    assert {r.method for r in manifest["tables"]["european"]} == {"bs"}


# -- command line


def test_cli_sweep_and_scaling_fit(tmp_path, capsys):
    cfg = tmp_path / "exp.toml"
    cfg.write_text('[experiment]\ninstruments = ["european"]\nmethods = ["ww"]\nn_repeats = 1\neval_sims = 2\neval_paths = 4000\n')
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    run_dir = capsys.readouterr().out.strip().splitlines()[-1]
    assert main(["scaling-fit", f"{run_dir}/results_european.csv", "--method", "ww"]) == 0
    fit = json.loads(capsys.readouterr().out)
    assert 0.3 < fit["exponent"] < 1.0


def test_cli_sweep_exit_code_on_failure(tmp_path, monkeypatch, capsys):
    monkeypatch.setattr(ex, "evaluate_policy", lambda *a, **k: (_ for _ in ()).throw(RuntimeError("boom")))
    cfg = tmp_path / "exp.toml"
    cfg.write_text('[experiment]\ninstruments = ["european"]\nmethods = ["bs"]\ncosts = [0.001]\nn_repeats = 1\n')
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "boom" in capsys.readouterr().err


def test_cli_train_evaluate_band_profile(tmp_path, capsys):
    cfg = tmp_path / "exp.toml"
    cfg.write_text("[train]\nn_iterations = 2\npaths_per_iteration = 500\nvalidation_sims = 1\nvalidation_paths = 300\n[experiment]\neval_sims = 1\neval_paths = 1000\n")
    out = tmp_path / "o"
    assert main(["train", "--config", str(cfg), "--cost", "0.001", "--out", str(out), "--lr", "0.01"]) == 0
    ckpt = json.loads(capsys.readouterr().out)["checkpoint"]
    assert main(["evaluate", "--config", str(cfg), "--checkpoint", ckpt, "--cost", "0.001"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["method"] == "ntb" and report["utility"] < 0
    assert main(["evaluate", "--config", str(cfg), "--method", "ww", "--cost", "0.001"]) == 0
    capsys.readouterr()
    band = tmp_path / "band.csv"
    assert main(["band-profile", "--checkpoint", ckpt, "--output", str(band)]) == 0
    assert len(band.read_text().splitlines()) == 102


def test_cli_band_profile_rejects_ff_checkpoint(tmp_path, capsys):
    f = tmp_path / "ff.ckpt"
    save_checkpoint(f, "ff", init_params("ff", european_call(), 0))
    assert main(["band-profile", "--checkpoint", str(f), "--output", str(tmp_path / "b.csv")]) == 2
    assert "ntb" in capsys.readouterr().err


def test_cli_lr_override(tmp_path):
    from bandhedge.cli import _config, build_parser

    args = build_parser().parse_args(["sweep", "--desk-scale", "--lr", "0.0001", "--seed", "7"])
    cfg = _config(args)
    assert cfg.train.learning_rate == 1e-4 and cfg.seed == 7 and cfg.train.n_iterations == 200


def test_replace_keeps_validation():
    with pytest.raises(ValueError):
        replace(ExperimentConfig(), methods=("nope",))
