"""Train, remove, attack and report pipelines.

Every artifact is first written into a staging directory next to the
requested output directory and moved into place only when the whole run
succeeds, so a failed run never leaves half-written results behind.
"""

from __future__ import annotations

import csv
import io
import os
import shutil
import tempfile
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from amnesiac import attacks as atk
from amnesiac._rng import derive_seed, generator
from amnesiac.data import Dataset, Selector, load_mnist, split, synth_blobs
from amnesiac.harness.config import ConfigError, ExperimentConfig, parse_selector, sweep_fractions
from amnesiac.journal import Journal, Mode
from amnesiac.nn import Architecture, Model, ParamVector, TrainConfig, accuracy, init_model, train
from amnesiac.removal import amnesiac_unlearn, relabel, target_split

METRICS_COLUMNS = ("phase", "method", "target_accuracy", "non_target_accuracy", "membership_recall", "inversion_score")
TIMINGS_COLUMNS = ("phase", "wall_time_s", "epoch_time_s")
METHOD_TITLES = {"naive": "Naive Retraining", "unlearn": "Unlearning", "amnesiac": "Amnesiac Unlearning"}


class ReportError(FileNotFoundError):
    pass


# --------------------------------------------------------------------------
# data and model setup


@dataclass
class Prepared:
    target_data: Dataset  # what the target model trains on
    test: Dataset
    pool: Dataset | None  # adversary's shadow pool, disjoint from target_data
    oracle_data: Dataset  # the full training split, for the inversion oracle
    selector: Selector
    architecture: Architecture


def _seed(cfg: ExperimentConfig, value: int, name: str) -> int:
    return value if value >= 0 else derive_seed(cfg.seed, name)


def train_config(cfg: ExperimentConfig, epochs: int | None = None) -> TrainConfig:
    t = cfg.train
    return TrainConfig(t.epochs if epochs is None else epochs, t.batch_size, t.learning_rate,
                       _seed(cfg, t.seed, "train"), t.shuffle)


def prepare(cfg: ExperimentConfig) -> Prepared:
    d = cfg.dataset
    if d.name == "mnist":
        full_train, test = load_mnist(d.path or None, d.test_fraction)
    else:
        blobs = synth_blobs(d.classes, d.per_class, d.dim, d.spread, derive_seed(cfg.seed, "blobs"))
        test, full_train = split(blobs, d.test_fraction, derive_seed(cfg.seed, "test-split"), stratified=True)

    order = generator(cfg.seed, "target-subset").permutation(len(full_train))
    pool = None
    if d.train_size:
        if d.train_size >= len(full_train):
            raise ConfigError(f"dataset.train_size: {d.train_size} exceeds the {len(full_train)} training examples")
        target_data = full_train.take(np.sort(order[: d.train_size]))
    else:
        target_data = full_train
    if cfg.attack.membership:
        if not d.train_size:
            raise ConfigError("dataset.train_size: membership attacks need a target subset so the pool is disjoint")
        size = cfg.attack.pool_size or 2 * d.train_size
        rest = order[d.train_size :]
        if size > len(rest):
            raise ConfigError(f"attack.pool_size: {size} exceeds the {len(rest)} examples left for the adversary")
        pool = full_train.take(np.sort(rest[:size]))

    kind, arg = parse_selector(cfg.removal.selector)
    if kind == "class":
        if not 0 <= arg < full_train.class_count:
            raise ConfigError(f"removal.selector: class {arg} outside [0, {full_train.class_count})")
        selector = Selector.of_class(arg)
    elif kind == "random":
        if arg >= len(target_data):
            raise ConfigError(f"removal.selector: cannot pick {arg} of {len(target_data)} examples")
        picks = generator(cfg.seed, "selector").choice(len(target_data), arg, replace=False)
        selector = Selector.of_examples(target_data.ids[picks].tolist())
    else:
        missing = set(arg) - set(target_data.ids.tolist())
        if missing:
            raise ConfigError(f"removal.selector: ids not in the training data: {sorted(missing)[:10]}")
        selector = Selector.of_examples(arg)
    mask = selector.mask(target_data)
    if not mask.any() or mask.all():
        raise ConfigError("removal.selector: must match some but not all training examples")

    if cfg.model.architecture:
        arch = Architecture.parse(cfg.model.architecture)
    else:
        arch = Architecture.mlp(int(np.prod(target_data.feature_shape)), 128, target_data.class_count)
    if arch.output_dim != target_data.class_count:
        raise ConfigError(f"model.architecture: output width {arch.output_dim} != {target_data.class_count} classes")
    return Prepared(target_data, test, pool, full_train, selector, arch)


def save_model(model: Model, path) -> None:
    with open(path, "wb") as f:
        np.savez(f, architecture=np.array(str(model.architecture)), params=model.params.flat)


def load_model(path) -> Model:
    with np.load(path) as z:
        arch = Architecture.parse(str(z["architecture"]))
        return Model(arch, ParamVector(arch.layout(), z["params"].copy()))


# --------------------------------------------------------------------------
# attacks


@dataclass
class Adversary:
    """Everything the attacker built before any removal happened."""

    suite: atk.AttackSuite | None = None
    probes: Dataset | None = None
    oracle: Model | None = None
    inversion_class: int = -1


def build_adversary(cfg: ExperimentConfig, prep: Prepared) -> Adversary:
    a = cfg.attack
    adv = Adversary()
    if a.membership:
        shadows = atk.train_shadows(
            prep.pool,
            prep.architecture,
            atk.ShadowConfig(a.shadow_count, a.shadow_epochs or cfg.train.epochs, derive_seed(cfg.seed, "shadows"),
                             cfg.train.batch_size, cfg.train.learning_rate),
        )
        adv.suite = atk.train_attack_suite(
            atk.build_attack_dataset(shadows, prep.pool),
            epochs=a.attack_epochs,
            learning_rate=a.attack_learning_rate,
            seed=derive_seed(cfg.seed, "attack-models"),
        )
        adv.probes = prep.target_data.take(prep.selector.mask(prep.target_data))
    if a.inversion:
        target = a.inversion_class if a.inversion_class >= 0 else prep.selector.class_label
        if target is None:
            raise ConfigError("attack.inversion_class: required when the selector is not a class")
        adv.inversion_class = target
        adv.oracle = atk.train_oracle(prep.oracle_data, epochs=a.oracle_epochs, seed=derive_seed(cfg.seed, "oracle"))
    return adv


def _phase_file(phase: str) -> str:
    return phase.replace("'", "p")


def evaluate(model: Model, cfg: ExperimentConfig, prep: Prepared, adv: Adversary, phase: str, out: Path) -> dict:
    target, non_target = target_split(prep.selector, prep.target_data, prep.test)
    row = {
        "phase": phase,
        "method": cfg.removal.method,
        "target_accuracy": accuracy(model, target),
        "non_target_accuracy": accuracy(model, non_target),
        "membership_recall": None,
        "inversion_score": None,
    }
    if adv.suite is not None:
        row["membership_recall"] = atk.membership_recall(adv.suite, model, adv.probes, adv.probes.ids.tolist())
    if adv.oracle is not None:
        a = cfg.attack
        folder = out / "inversions"
        folder.mkdir(exist_ok=True)
        scores = []
        for run in range(a.inversion_runs):
            inv = atk.InversionConfig(adv.inversion_class, a.inversion_steps, a.inversion_step_size,
                                      a.process_interval, a.noise_scale, derive_seed(cfg.seed, "inversion", run))
            image = atk.invert_class(model, inv)
            name = f"phase-{_phase_file(phase)}-run{run}.pgm"
            atk.write_pgm(folder / name, image)
            score = atk.recognizability_score(adv.oracle, image, adv.inversion_class)
            scores.append(score)
            with open(folder / "manifest.csv", "a", newline="") as f:
                csv.writer(f, lineterminator="\n").writerow([name, phase, run, adv.inversion_class, _fmt(score)])
        row["inversion_score"] = float(np.mean(scores))
    return row


# --------------------------------------------------------------------------
# output handling


def _fmt(value) -> str:
    return "" if value is None else f"{value:.6f}"


def _write_csv(path: Path, columns, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([row[c] if isinstance(row[c], str) or isinstance(row[c], int) else _fmt(row[c]) for c in columns])
    path.write_text(buf.getvalue())


@contextmanager
def staged_output(out):
    """Yield a staging directory; on success move its contents into ``out``."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{out.name}.partial-", dir=out.parent))
    try:
        yield stage
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    out.mkdir(exist_ok=True)
    for item in sorted(stage.iterdir()):
        dest = out / item.name
        if dest.is_dir() and not dest.is_symlink():
            shutil.rmtree(dest)
        os.replace(item, dest)
    stage.rmdir()


# --------------------------------------------------------------------------
# pipelines


@dataclass
class RunResult:
    out: Path
    rows: list[dict] = field(default_factory=list)
    timings: list[dict] = field(default_factory=list)


def _train_target(cfg: ExperimentConfig, prep: Prepared):
    model = init_model(prep.architecture, _seed(cfg, cfg.model.seed, "model"))
    journal = None
    if cfg.removal.method == "amnesiac":
        if cfg.removal.journal_mode == "watchlist":
            watched = prep.selector.ids_in(prep.target_data).tolist()
            journal = Journal.for_model(model, run_id=f"seed-{cfg.seed}", mode=Mode.WATCHLIST, watched=watched)
        else:
            journal = Journal.for_model(model, run_id=f"seed-{cfg.seed}")
    report = train(model, prep.target_data, train_config(cfg), journal)
    return model, journal, report


def train_only(cfg: ExperimentConfig, out=None) -> RunResult:
    """Train the target model; write model.npz, the journal and a phase-0 row."""
    out = Path(out or cfg.out)
    prep = prepare(cfg)
    with staged_output(out) as stage:
        model, journal, report = _train_target(cfg, prep)
        save_model(model, stage / "model.npz")
        if journal is not None:
            journal.save(stage / "journal.amnj")
        row = evaluate(model, cfg, prep, Adversary(), "0", stage)
        timing = {"phase": "0", "wall_time_s": report.wall_time, "epoch_time_s": float(np.mean(report.epoch_times))}
        _write_csv(stage / "metrics.csv", METRICS_COLUMNS, [row])
        _write_csv(stage / "timings.csv", TIMINGS_COLUMNS, [timing])
        (stage / "config.txt").write_text(cfg.to_text())
    return RunResult(out, [row], [timing])


def attack_only(cfg: ExperimentConfig, out=None) -> RunResult:
    """Run the configured attacks against the model saved by ``train_only``."""
    out = Path(out or cfg.out)
    path = out / "model.npz"
    if not path.exists():
        raise ReportError(f"no trained model at {path}; run the train verb first")
    if not (cfg.attack.membership or cfg.attack.inversion):
        raise ConfigError("attack.membership / attack.inversion: enable at least one attack")
    prep = prepare(cfg)
    model = load_model(path)
    if str(model.architecture) != str(prep.architecture):
        raise ConfigError("model.architecture: differs from the saved model")
    with staged_output(out) as stage:
        row = evaluate(model, cfg, prep, build_adversary(cfg, prep), "0", stage)
        _write_csv(stage / "attack.csv", METRICS_COLUMNS, [row])
    return RunResult(out, [row])


def run_experiment(cfg: ExperimentConfig, out=None) -> RunResult:
    """Phases 0 (trained), 0' (removal applied) and 1..removal.epochs."""
    out = Path(out or cfg.out)
    prep = prepare(cfg)
    method = cfg.removal.method
    result = RunResult(out)
    with staged_output(out) as stage:
        model, journal, report = _train_target(cfg, prep)
        adv = build_adversary(cfg, prep)
        result.rows.append(evaluate(model, cfg, prep, adv, "0", stage))
        result.timings.append({"phase": "0", "wall_time_s": report.wall_time,
                               "epoch_time_s": float(np.mean(report.epoch_times))})

        kept = prep.target_data.take(~prep.selector.mask(prep.target_data))
        t0 = time.perf_counter()
        if method == "amnesiac":
            # the removal report times only lookup, summation and subtraction
            ids = prep.selector.ids_in(prep.target_data).tolist()
            model, removal = amnesiac_unlearn(model, journal, ids)
            removal_time = removal.wall_time
            retrain_data = kept
        else:
            if method == "unlearn":
                retrain_data = relabel(prep.target_data, prep.selector, cfg.removal.copies,
                                       seed=derive_seed(cfg.seed, "relabel"))
            else:
                retrain_data = kept
            removal_time = time.perf_counter() - t0
        result.timings.append({"phase": "0'", "wall_time_s": removal_time, "epoch_time_s": None})
        result.rows.append(evaluate(model, cfg, prep, adv, "0'", stage))

        one_epoch = train_config(cfg, epochs=1)
        for e in range(1, cfg.removal.epochs + 1):
            rep = train(model, retrain_data, one_epoch, first_epoch=cfg.train.epochs + e - 1)
            result.timings.append({"phase": str(e), "wall_time_s": rep.wall_time, "epoch_time_s": rep.epoch_times[0]})
            result.rows.append(evaluate(model, cfg, prep, adv, str(e), stage))

        if journal is not None:
            journal.save(stage / "journal.amnj")
        _write_csv(stage / "metrics.csv", METRICS_COLUMNS, result.rows)
        _write_csv(stage / "timings.csv", TIMINGS_COLUMNS, result.timings)
        (stage / "config.txt").write_text(cfg.to_text())
        (stage / "summary.txt").write_text(render_report([stage], [out.name]))
    return result


def sweep_removal_fraction(cfg: ExperimentConfig, fractions=None, runs: int | None = None, out=None) -> list[dict]:
    """Undo random batch subsets of growing size and record test accuracy.

    Writes sweep.csv (one row per fraction, mean over runs) and
    sweep_runs.csv (every cell). Fraction 0 is the trained model itself.
    """
    fractions = sweep_fractions(cfg) if fractions is None else [float(f) for f in fractions]
    runs = cfg.sweep.runs if runs is None else runs
    if runs < 1:
        raise ConfigError("sweep.runs: must be >= 1")
    if any(not 0.0 <= f <= 1.0 for f in fractions):
        raise ConfigError("sweep.fractions: values must lie in [0, 1]")
    out = Path(out or cfg.out)
    prep = prepare(cfg)
    model = init_model(prep.architecture, _seed(cfg, cfg.model.seed, "model"))
    watch = cfg.removal.journal_mode == "watchlist"
    journal = Journal.for_model(
        model,
        run_id=f"sweep-{cfg.seed}",
        mode=Mode.WATCHLIST if watch else Mode.FULL,
        watched=prep.selector.ids_in(prep.target_data).tolist() if watch else (),
    )
    train(model, prep.target_data, train_config(cfg), journal)
    stored, total = journal.stored_keys(), len(journal)
    coverage = len(stored) / total
    too_far = [f for f in fractions if f > coverage]
    if too_far:
        raise ConfigError(f"sweep.fractions: {too_far} exceed the recorded batch coverage {coverage:.4f}")

    baseline = accuracy(model, prep.test)
    cells, summary = [], []
    for f in fractions:
        count = int(round(f * total))
        accs = []
        for r in range(runs):
            if count == 0:
                acc = baseline
            else:
                rng = generator(cfg.seed, "sweep", repr(f), r)
                picks = rng.choice(len(stored), count, replace=False)
                undone = Model(model.architecture, model.params - journal.sum_deltas([stored[i] for i in picks]))
                acc = accuracy(undone, prep.test)
            accs.append(acc)
            cells.append({"fraction": f"{f:g}", "run": r, "batches_removed": count, "accuracy": acc})
        summary.append({"fraction": f"{f:g}", "runs": runs, "batches_removed": count,
                        "mean_accuracy": float(np.mean(accs)), "min_accuracy": min(accs),
                        "max_accuracy": max(accs), "baseline_accuracy": baseline})
    with staged_output(out) as stage:
        _write_csv(stage / "sweep.csv", ("fraction", "runs", "batches_removed", "mean_accuracy", "min_accuracy",
                                         "max_accuracy", "baseline_accuracy"), summary)
        _write_csv(stage / "sweep_runs.csv", ("fraction", "run", "batches_removed", "accuracy"), cells)
        (stage / "config.txt").write_text(cfg.to_text())
    return summary


# --------------------------------------------------------------------------
# report


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ReportError(f"{path} has no rows")
    return rows


def _table(headers, rows) -> str:
    widths = [max(len(str(h)), *(len(str(r[i])) for r in rows)) for i, h in enumerate(headers)]
    line = lambda cells: "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()
    return "\n".join([line(headers), line(["-" * w for w in widths]), *(line(r) for r in rows)])


def _phase_key(phase: str):
    return (0, 1) if phase == "0'" else (int(phase), 0)


def _run_dirs(root: Path) -> list[Path]:
    if not root.is_dir():
        raise ReportError(f"metrics directory {root} does not exist")
    found = [root] if (root / "metrics.csv").exists() or (root / "sweep.csv").exists() else []
    for sub in sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith(".")):
        if (sub / "metrics.csv").exists() or (sub / "sweep.csv").exists():
            found.append(sub)
    if not found:
        raise ReportError(f"no metrics found; looked for {root / 'metrics.csv'}, {root / 'sweep.csv'} "
                          f"and */metrics.csv, */sweep.csv under {root}")
    return found


def render_report(dirs, names=None) -> str:
    """Tables for the given run directories; ``names`` label them (default:
    the directory names)."""
    names = list(names) if names is not None else [Path(d).name for d in dirs]
    runs = []  # (name, metrics rows, timings rows)
    sweeps = []
    for d, name in zip(map(Path, dirs), names):
        if (d / "metrics.csv").exists():
            timings = _read_csv(d / "timings.csv") if (d / "timings.csv").exists() else []
            runs.append((name, _read_csv(d / "metrics.csv"), timings))
        if (d / "sweep.csv").exists():
            sweeps.append((name, _read_csv(d / "sweep.csv")))

    parts = []
    by_method: dict[str, list] = {}
    for name, rows, _ in runs:
        by_method.setdefault(rows[0]["method"], []).append((name, rows))
    recall_methods = [m for m in METHOD_TITLES if any(r["membership_recall"] for _, rows in by_method.get(m, [])
                                                      for r in rows)]
    if recall_methods:
        phases = sorted({r["phase"] for m in recall_methods for _, rows in by_method[m] for r in rows}, key=_phase_key)
        lookup = {(m, r["phase"]): r["membership_recall"] for m in recall_methods
                  for _, rows in by_method[m][:1] for r in rows}
        table = [[p, *(lookup.get((m, p)) or "-" for m in recall_methods)] for p in phases]
        parts.append("Membership inference recall\n\n" + _table(["Epoch", *(METHOD_TITLES[m] for m in recall_methods)],
                                                               table))
    for name, rows, timings in runs:
        headers = ["Epoch", "Target acc", "Non-target acc"]
        inv = any(r["inversion_score"] for r in rows)
        if inv:
            headers.append("Inversion score")
        body = []
        for r in rows:
            cells = [r["phase"], r["target_accuracy"], r["non_target_accuracy"]]
            if inv:
                cells.append(r["inversion_score"] or "-")
            body.append(cells)
        block = f"{METHOD_TITLES[rows[0]['method']]} ({name})\n\n" + _table(headers, body)
        if timings:
            block += "\n\nWall time (s)\n\n" + _table(
                ["Epoch", "Wall", "SGD epoch"],
                [[t["phase"], f"{float(t['wall_time_s']):.4f}",
                  f"{float(t['epoch_time_s']):.4f}" if t["epoch_time_s"] else "-"] for t in timings],
            )
        parts.append(block)
    for name, rows in sweeps:
        parts.append(f"Removal-fraction sweep ({name})\n\n" + _table(
            ["Fraction", "Batches", "Mean acc", "Min", "Max", "Runs"],
            [[r["fraction"], r["batches_removed"], r["mean_accuracy"], r["min_accuracy"], r["max_accuracy"], r["runs"]]
             for r in rows],
        ))
    return "\n\n\n".join(parts) + "\n"


def report(metrics_dir) -> str:
    """Render recall, accuracy and sweep tables for every run under ``metrics_dir``."""
    return render_report(_run_dirs(Path(metrics_dir)))
