import csv

import pytest

from amnesiac.harness import cli
from amnesiac.harness.config import ConfigError, ExperimentConfig, load_config, parse_selector, parse_text
from amnesiac.harness.experiment import (
    ReportError,
    attack_only,
    report,
    run_experiment,
    sweep_removal_fraction,
    train_only,
)
from amnesiac.nn import DivergenceError

BLOBS = {
    "dataset.name": "blobs",
    "dataset.classes": 4,
    "dataset.per_class": 60,
    "dataset.dim": 8,
    "train.epochs": 2,
    "train.batch_size": 16,
    "removal.selector": "class:1",
    "removal.epochs": 2,
}


def _cfg(method="amnesiac", **extra):
    return load_config(overrides={**BLOBS, "removal.method": method, **extra}, environ={})


def _rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# --------------------------------------------------------------------------
# configuration


def test_file_env_and_explicit_overrides_layer(tmp_path):
    path = tmp_path / "x.cfg"
    path.write_text("# comment\ndataset.name = blobs\nremoval.method = naive\ntrain.epochs = 4  # trailing\n")
    cfg = load_config(path, environ={})
    assert cfg.train.epochs == 4 and cfg.dataset.name == "blobs"
    env = {"AMNESIAC_TRAIN__EPOCHS": "6", "AMNESIAC_TRAIN__SHUFFLE": "false", "OTHER": "1"}
    cfg = load_config(path, environ=env)
    assert cfg.train.epochs == 6 and cfg.train.shuffle is False
    cfg = load_config(path, {"train.epochs": "7"}, environ=env)
    assert cfg.train.epochs == 7


def test_required_fields():
    with pytest.raises(ConfigError, match="dataset.name"):
        load_config(overrides={"removal.method": "naive"}, environ={})
    with pytest.raises(ConfigError, match="removal.method"):
        load_config(overrides={"dataset.name": "blobs"}, environ={})


@pytest.mark.parametrize(
    "key, value",
    [
        ("train.epochs", "two"),
        ("train.epochs", "0"),
        ("train.learning_rate", "-1"),
        ("train.bogus", "1"),
        ("nosuch.key", "1"),
        ("train", "1"),
        ("removal.method", "forget"),
        ("removal.selector", "class:x"),
        ("removal.selector", "random:0"),
        ("removal.journal_mode", "half"),
        ("attack.process_interval", "100"),
        ("sweep.fractions", "0,1.5"),
        ("train.shuffle", "maybe"),
    ],
)
def test_bad_values_name_the_field(key, value):
    with pytest.raises(ConfigError, match=key.split(".")[0]):
        _cfg(**{key: value})


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.cfg", environ={})


def test_malformed_line_reports_its_position():
    with pytest.raises(ConfigError, match="x.cfg:2"):
        parse_text("dataset.name = blobs\njust words\n", "x.cfg")


def test_selectors_parse():
    assert parse_selector("class:3") == ("class", 3)
    assert parse_selector("random:40") == ("random", 40)
    assert parse_selector("examples:1, 5,9") == ("examples", (1, 5, 9))
    with pytest.raises(ConfigError):
        parse_selector("everything")


def test_config_text_round_trips():
    cfg = _cfg(seed=4, **{"train.shuffle": "no"})
    again = load_config(overrides=parse_text(cfg.to_text()), environ={})
    assert again == cfg and isinstance(again, ExperimentConfig)


# --------------------------------------------------------------------------
# experiment pipeline


@pytest.mark.parametrize("method", ["naive", "unlearn", "amnesiac"])
def test_phases_and_files(tmp_path, method):
    out = tmp_path / method
    result = run_experiment(_cfg(method), out)
    rows = _rows(out / "metrics.csv")
    assert [r["phase"] for r in rows] == ["0", "0'", "1", "2"]
    assert {r["method"] for r in rows} == {method}
    names = {p.name for p in out.iterdir()}
    assert {"metrics.csv", "timings.csv", "config.txt", "summary.txt"} <= names
    assert ("journal.amnj" in names) == (method == "amnesiac")
    assert len(result.rows) == 4 and [t["phase"] for t in _rows(out / "timings.csv")] == ["0", "0'", "1", "2"]
    if method == "amnesiac":
        assert rows[1]["target_accuracy"] != rows[0]["target_accuracy"]
    else:
        assert rows[1]["target_accuracy"] == rows[0]["target_accuracy"]
    assert not list(tmp_path.glob(".*partial*"))


def test_metrics_are_byte_identical_across_runs(tmp_path):
    cfg = _cfg("amnesiac")
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    for name in ("metrics.csv", "config.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / "journal.amnj").read_bytes() == (tmp_path / "b" / "journal.amnj").read_bytes()


def test_seed_changes_the_run(tmp_path):
    run_experiment(_cfg("naive"), tmp_path / "a")
    run_experiment(_cfg("naive", seed=3), tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() != (tmp_path / "b" / "metrics.csv").read_bytes()


def test_failed_run_leaves_no_partial_output(tmp_path):
    out = tmp_path / "bad"
    with pytest.raises(DivergenceError):
        run_experiment(_cfg("amnesiac", **{"train.learning_rate": "1e30"}), out)
    assert list(tmp_path.iterdir()) == []


def test_watchlist_journal_still_removes(tmp_path):
    run_experiment(_cfg("amnesiac", **{"removal.journal_mode": "watchlist"}), tmp_path / "w")
    rows = _rows(tmp_path / "w" / "metrics.csv")
    assert rows[1]["target_accuracy"] != rows[0]["target_accuracy"]


def test_membership_pipeline_fills_recall(tmp_path):
    cfg = _cfg(
        "unlearn",
        **{"dataset.per_class": 150, "dataset.train_size": 150, "removal.selector": "random:10",
           "removal.epochs": 1, "attack.membership": "true", "attack.shadow_count": 2,
           "attack.shadow_epochs": 1, "attack.attack_epochs": 1},
    )
    run_experiment(cfg, tmp_path / "m")
    rows = _rows(tmp_path / "m" / "metrics.csv")
    assert all(0.0 <= float(r["membership_recall"]) <= 1.0 for r in rows)
    assert all(r["inversion_score"] == "" for r in rows)
    assert "Membership inference recall" in (tmp_path / "m" / "summary.txt").read_text()


def test_membership_needs_a_disjoint_pool():
    with pytest.raises(ConfigError, match="train_size"):
        run_experiment(_cfg("naive", **{"attack.membership": "true"}))
    with pytest.raises(ConfigError, match="pool_size"):
        run_experiment(_cfg("naive", **{"attack.membership": "true", "dataset.train_size": 150}))


def test_selector_must_leave_something(tmp_path):
    with pytest.raises(ConfigError, match="selector"):
        run_experiment(_cfg("naive", **{"removal.selector": "class:9"}), tmp_path / "x")


def test_train_then_attack(tmp_path):
    out = tmp_path / "t"
    train_only(_cfg("amnesiac"), out)
    assert {"model.npz", "journal.amnj", "metrics.csv"} <= {p.name for p in out.iterdir()}
    with pytest.raises(ConfigError):
        attack_only(_cfg("amnesiac"), out)
    with pytest.raises(ReportError):
        attack_only(_cfg("amnesiac", **{"attack.membership": "true"}), tmp_path / "none")


# --------------------------------------------------------------------------
# sweep


def test_sweep_fraction_zero_is_the_baseline(tmp_path):
    rows = sweep_removal_fraction(_cfg("amnesiac"), fractions=[0, 0.5, 1], runs=3, out=tmp_path / "s")
    assert rows[0]["mean_accuracy"] == rows[0]["baseline_accuracy"] == rows[0]["min_accuracy"]
    assert rows[0]["batches_removed"] == 0
    assert rows[2]["min_accuracy"] == rows[2]["max_accuracy"]  # every batch undone: the initial model
    assert len(_rows(tmp_path / "s" / "sweep_runs.csv")) == 9


def test_sweep_refuses_fractions_beyond_watchlist_coverage(tmp_path):
    cfg = _cfg("amnesiac", **{"removal.journal_mode": "watchlist", "removal.selector": "examples:0"})
    with pytest.raises(ConfigError, match="coverage"):
        sweep_removal_fraction(cfg, fractions=[0.5], runs=1, out=tmp_path / "s")


# --------------------------------------------------------------------------
# report and CLI


def test_report_collects_runs(tmp_path):
    for method in ("naive", "amnesiac"):
        run_experiment(_cfg(method), tmp_path / method)
    sweep_removal_fraction(_cfg("amnesiac"), fractions=[0, 0.1], runs=2, out=tmp_path / "sweep")
    text = report(tmp_path)
    assert "Naive Retraining (naive)" in text and "Amnesiac Unlearning (amnesiac)" in text
    assert "Removal-fraction sweep (sweep)" in text
    assert report(tmp_path) == text


def test_report_errors_on_empty_directories(tmp_path):
    with pytest.raises(ReportError, match="metrics.csv"):
        report(tmp_path)
    with pytest.raises(ReportError):
        report(tmp_path / "missing")
    (tmp_path / "metrics.csv").write_text("phase,method\n")
    with pytest.raises(ReportError, match="no rows"):
        report(tmp_path)


def _args(*extra):
    sets = [f"--set={k}={v}" for k, v in BLOBS.items()]
    return [*sets, *extra]


def test_cli_remove_and_report(tmp_path, capsys):
    out = str(tmp_path / "run")
    assert cli.main(["remove", *_args("--set=removal.method=naive", "--seed", "2", "--out", out)]) == 0
    assert "seed = 2" in (tmp_path / "run" / "config.txt").read_text()
    capsys.readouterr()
    assert cli.main(["report", "--out", out]) == 0
    assert "Naive Retraining" in capsys.readouterr().out


@pytest.mark.parametrize(
    "argv, code",
    [
        (["remove", "--set=dataset.name=blobs"], 2),
        (["remove", "--set=removal.method=naive", "--set=dataset.name=mnist", "--set=dataset.path=/nonexistent"], 3),
        (["remove", "--set=removal.method=naive", "--set=dataset.name=blobs", "--set=model.architecture=dense(1"], 2),
        (["remove", "--set=removal.method=naive", "--set=dataset.name=blobs", "--set=train.learning_rate=1e30"], 5),
        (["remove", "--set=removal.method=naive", "--set=dataset.name=blobs", "--set", "oops"], 2),
        (["attack", "--set=removal.method=naive", "--set=dataset.name=blobs", "--set=attack.inversion=true"], 3),
        (["report"], 2),
    ],
)
def test_cli_exit_codes(tmp_path, monkeypatch, argv, code):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("AMNESIAC_MNIST_DIR", raising=False)
    assert cli.main(argv) == code


def test_cli_usage_error_exits_with_two():
    with pytest.raises(SystemExit) as err:
        cli.main(["fly"])
    assert err.value.code == 2
