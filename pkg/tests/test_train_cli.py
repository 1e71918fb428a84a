import json

import numpy as np
import pytest
from scipy.stats import binom

from surge import cli
from surge.config import ConfigError, RunConfig, load_kv, parse_overrides, stream_seed
from surge.model import Surge
from surge.train import (
    ABLATIONS, DivergenceError, ablate, evaluate_split, format_table, grid_search, load_checkpoint,
    load_dataset, load_split_dir, train,
)

SMALL = RunConfig(synth_users=60, synth_items=40, synth_clusters=4, synth_seq_len=12, max_len=12,
                  pooled_len=3, dim=8, batch_size=50, max_epochs=2, patience=2)

SMALL_FLAGS = ["--synth-users", "60", "--synth-items", "40", "--synth-clusters", "4", "--synth-seq-len", "12",
               "--max-len", "12", "--pooled-len", "3", "--dim", "8", "--batch-size", "50", "--max-epochs", "1"]


@pytest.fixture(scope="module")
def small_ds():
    return load_dataset(SMALL)


# -- training ------------------------------------------------------------------------


def test_patience_zero_runs_one_epoch(small_ds):
    rep = train(SMALL.replace(patience=0, max_epochs=10), small_ds).report
    assert rep.epochs_run == 1 and rep.best_epoch == 1 and len(rep.train_loss) == 1


def test_same_seed_same_report(small_ds):
    a = train(SMALL, small_ds).report
    b = train(SMALL, small_ds).report
    assert a.to_json() == b.to_json()
    c = train(SMALL.replace(seed=1), small_ds).report
    assert c.digest() != a.digest()


def test_report_fields(small_ds, tmp_path):
    res = train(SMALL, small_ds, out_dir=tmp_path)
    rep = json.loads((tmp_path / "report.json").read_text())
    assert "epoch_seconds" not in rep
    assert len(json.loads((tmp_path / "timing.json").read_text())["epoch_seconds"]) == res.report.epochs_run
    assert rep["config_hash"] == SMALL.hash() and rep["dataset_hash"] == small_ds.digest()
    assert rep["param_count"] == sum(p.numel() for p in res.model.parameters())


def test_checkpoint_round_trip(small_ds, tmp_path):
    res = train(SMALL, small_ds, out_dir=tmp_path)
    model, cfg = load_checkpoint(tmp_path / "checkpoint.pt")
    assert cfg == res.config
    again = evaluate_split(model, small_ds.validation)
    for k, v in res.report.validation.items():
        assert abs(again[k] - v) <= 1e-7


def test_micro_dataset_beats_random_scorer():
    cfg = RunConfig(synth_users=200, synth_items=100, synth_clusters=5, synth_seq_len=30, max_len=30,
                    pooled_len=6, max_epochs=5, patience=5, batch_size=20, lr=2e-3)
    ds = load_dataset(cfg)
    rep = train(cfg, ds).report
    val = ds.validation
    # one positive and one negative per user: a random scorer's per-user AUC is
    # a fair coin, so its GAUC is Binomial(users, 1/2) / users
    users, counts = np.unique(val.user, return_counts=True)
    assert np.all(counts == 2) and np.all(np.bincount(np.searchsorted(users, val.user), weights=val.label) == 1)
    floor = binom.ppf(0.99, len(users), 0.5) / len(users)
    assert rep.validation["gauc"] > 0.5
    assert rep.validation["gauc"] > floor, (rep.validation["gauc"], floor)


def test_divergence_is_reported(small_ds, monkeypatch):
    monkeypatch.setattr(Surge, "objective", lambda self, out, *a: out.prob.sum() * float("nan"))
    with pytest.raises(DivergenceError) as info:
        train(SMALL, small_ds)
    assert info.value.epoch == 1 and info.value.batch == 0


def test_empty_training_split_rejected(small_ds):
    empty = type(small_ds)(small_ds.train.subset(slice(0, 0)), small_ds.validation, small_ds.test,
                           small_ds.item_vocab_size, small_ds.user_index, small_ds.item_index)
    with pytest.raises(ConfigError):
        train(SMALL, empty)


# -- grid and ablation ---------------------------------------------------------------------


def test_grid_cardinality_and_singleton(small_ds):
    cfg = SMALL.replace(max_epochs=1)
    best, runs = grid_search(cfg, {"l2": [1e-7, 1e-5, 1e-3], "pooled_len": [2, 3]}, small_ds)
    assert len(runs) == 6
    assert {(c.l2, c.pooled_len) for c, _ in runs} == {(a, b) for a in (1e-7, 1e-5, 1e-3) for b in (2, 3)}
    assert best.hash() in {c.hash() for c, _ in runs}
    best1, runs1 = grid_search(cfg, {"l2": [cfg.l2]}, small_ds)
    assert len(runs1) == 1 and runs1[0][1].to_json() == train(cfg, small_ds).report.to_json()
    with pytest.raises(ConfigError):
        grid_search(cfg, {"l2": []}, small_ds)


def test_grid_reg_values_follow_reg_m(small_ds):
    _, runs = grid_search(SMALL.replace(max_epochs=1), {"reg_m": [1e-7, 1e-3]}, small_ds)
    assert [(c.reg_m, c.reg_a, c.reg_p) for c, _ in runs] == [(1e-7,) * 3, (1e-3,) * 3]


def test_grid_recovers_planted_best():
    # only one learning rate can learn anything in five epochs
    cfg = RunConfig(synth_users=200, synth_items=100, synth_clusters=5, synth_seq_len=30, max_len=30,
                    pooled_len=6, max_epochs=5, patience=5, batch_size=20)
    best, runs = grid_search(cfg, {"lr": [1e-9, 2e-3, 1e-8]})
    assert best.lr == 2e-3


def test_ablation_table(small_ds):
    cfg = SMALL.replace(max_epochs=1)
    rows = ablate(cfg, small_ds)
    assert [r["variant"] for r in rows] == [v[1] for v in ABLATIONS]
    by = {r["variant"]: r for r in rows}
    full = train(cfg, small_ds).report
    assert by["w/ Fusion"]["auc"] == by["w/ Extraction"]["auc"] == by["AUGRU"]["auc"] == full.test["auc"]
    assert by["w/o Fusion"]["params"] < full.param_count
    assert by["w/o Extraction"]["params"] < full.param_count
    assert by["w/o Regularization"]["params"] == full.param_count
    table = format_table(rows)
    assert len(table.splitlines()) == len(ABLATIONS) + 1 and "w/o Readout" in table


# -- config ------------------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ConfigError):
        RunConfig(eps=1.5).validate()
    with pytest.raises(ConfigError):
        RunConfig(max_len=10, pooled_len=11).validate()
    with pytest.raises(ConfigError):
        RunConfig(reg_grid=()).validate()
    with pytest.raises(ConfigError):
        RunConfig(l2_grid=(1e-3, -1.0)).validate()
    assert RunConfig(regularization=False).reg_weights == (0.0, 0.0, 0.0)
    assert RunConfig(extraction=False).reg_weights == (0.0, 0.0, 0.0)


def test_hash_ignores_paths():
    assert RunConfig(data_dir="/a", out_dir="/b").hash() == RunConfig().hash()
    assert RunConfig(eps=0.3).hash() != RunConfig().hash()


def test_kv_file_and_overrides(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\neps = 0.4\nfusion = off  # trailing\nreg_grid = 1e-7, 1e-3\nhidden = none\n")
    assert load_kv(p) == {"eps": 0.4, "fusion": False, "reg_grid": (1e-7, 1e-3), "hidden": None}
    with pytest.raises(ConfigError):
        parse_overrides({"nope": "1"})
    with pytest.raises(ConfigError):
        parse_overrides({"fusion": "maybe"})


def test_seed_streams_are_distinct():
    assert stream_seed(0, "init") != stream_seed(0, "shuffle-1") != stream_seed(1, "init")
    assert stream_seed(3, "init") == stream_seed(3, "init")


# -- CLI ---------------------------------------------------------------------------------


def test_cli_synth_train_evaluate_report(tmp_path, capsys):
    data = tmp_path / "data"
    assert cli.main(["synth", "--out", str(data), *SMALL_FLAGS]) == 0
    assert load_split_dir(data).digest() == load_dataset(SMALL).digest()
    run = tmp_path / "run"
    assert cli.main(["train", "--out", str(run), "--data-dir", str(data), "--dump-debug", "2", *SMALL_FLAGS]) == 0
    rep = json.loads((run / "report.json").read_text())
    assert rep["epochs_run"] == 1
    for b in range(2):
        assert (run / "debug" / f"{b}.coef.txt").exists() and (run / "debug" / f"{b}.edges.txt").exists()
        assert np.loadtxt(run / "debug" / f"{b}.assign.txt").shape == (12, 3)
    capsys.readouterr()
    assert cli.main(["evaluate", "--checkpoint", str(run / "checkpoint.pt"), "--split", "validation",
                     "--out", str(run)]) == 0
    out = capsys.readouterr().out
    assert f"gauc={rep['validation']['gauc']:.6f}" in out and out.count("length_bucket=") == 5
    assert json.loads((run / "validation_metrics.json").read_text())["metrics"]["auc"] == pytest.approx(
        rep["validation"]["auc"], abs=1e-7)
    assert cli.main(["report", str(run / "report.json")]) == 0
    assert "test.mrr=" in capsys.readouterr().out


def test_cli_prepare(tmp_path, capsys):
    log = tmp_path / "log.tsv"
    rows = [f"u{u}\ti{(u + t) % 5}\t{10 * t + u}" for u in range(4) for t in range(6)]
    log.write_text("\n".join(rows + ["bad\trow"]) + "\n")
    out = tmp_path / "split"
    code = cli.main(["prepare", "--log", str(log), "--out", str(out), "--delimiter", "tab",
                     "--columns", "user,item,time", "--k-core", "2", "--max-len", "4",
                     "--train-end", "30", "--val-end", "45", "--behaviors", "all"])
    assert code == 0
    assert "malformed=1" in capsys.readouterr().out
    ds = load_split_dir(out)
    assert ds.max_len == 4 and len(ds.train) > 0


def test_cli_exit_codes(tmp_path, monkeypatch):
    assert cli.main(["train", "--out", str(tmp_path), "--eps", "2"]) == cli.EXIT_CONFIG
    assert cli.main(["train", "--out", str(tmp_path), "--dim", "forty"]) == cli.EXIT_CONFIG
    assert cli.main(["train", "--out", str(tmp_path), "--config", str(tmp_path / "missing.cfg")]) == cli.EXIT_CONFIG
    assert cli.main(["train", "--out", str(tmp_path), "--data-dir", str(tmp_path / "none")]) == cli.EXIT_DATA
    assert cli.main(["prepare", "--log", str(tmp_path / "none.csv"), "--out", str(tmp_path),
                     "--train-end", "1", "--val-end", "2"]) == cli.EXIT_DATA
    monkeypatch.delenv("SURGE_OUT_DIR", raising=False)
    assert cli.main(["synth", *SMALL_FLAGS]) == cli.EXIT_CONFIG
    monkeypatch.setattr(Surge, "objective", lambda self, out, *a: out.prob.sum() * float("nan"))
    assert cli.main(["train", "--out", str(tmp_path), *SMALL_FLAGS]) == cli.EXIT_DIVERGED


def test_cli_precedence(tmp_path, monkeypatch):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text(f"eps = 0.4\ndim = 6\ndata_dir = {tmp_path / 'from_file'}\n")
    monkeypatch.setenv("SURGE_DATA_DIR", str(tmp_path / "from_env"))
    monkeypatch.setenv("SURGE_OUT_DIR", str(tmp_path / "out_env"))
    args = cli.build_parser().parse_args(["train", "--config", str(cfg_file), "--dim", "10"])
    cfg = cli._run_config(args)
    assert (cfg.eps, cfg.dim, cfg.data_dir) == (0.4, 10, str(tmp_path / "from_env"))
    assert cli._out(args, cfg) == tmp_path / "out_env"
