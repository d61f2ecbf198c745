"""Experiment configuration: a flat ``section.key = value`` text file.

Lines starting with ``#`` are comments. Every key may be overridden from the
environment as ``AMNESIAC_<SECTION>__<KEY>`` (e.g. ``AMNESIAC_TRAIN__EPOCHS=3``).
Only ``dataset.name`` and ``removal.method`` are required.
"""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

ENV_PREFIX = "AMNESIAC_"


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass(frozen=True)
class DatasetSpec:
    name: str = ""  # mnist | blobs
    path: str = ""  # IDX directory for mnist (searched when empty)
    train_size: int = 0  # examples used to train the target; 0 = all
    classes: int = 10  # blobs only
    per_class: int = 300
    dim: int = 20
    spread: float = 0.5
    test_fraction: float = 0.2


@dataclass(frozen=True)
class ModelSpec:
    architecture: str = ""  # empty = mlp(input, 128, classes)
    seed: int = -1  # -1 = derived from the global seed


@dataclass(frozen=True)
class TrainSpec:
    epochs: int = 2
    batch_size: int = 32
    learning_rate: float = 0.1
    seed: int = -1
    shuffle: bool = True


@dataclass(frozen=True)
class RemovalSpec:
    method: str = ""  # naive | unlearn | amnesiac
    selector: str = "class:3"  # class:<c> | examples:<id,id,...> | random:<n>
    epochs: int = 5  # post-removal epochs (phases 1..epochs)
    copies: int = 3  # relabelled copies per example (unlearn, example selectors)
    journal_mode: str = "full"  # full | watchlist


@dataclass(frozen=True)
class AttackSpec:
    membership: bool = False
    pool_size: int = 0  # adversary pool, disjoint from the target's data; 0 = 2 * train_size
    shadow_count: int = 16
    shadow_epochs: int = 0  # 0 = train.epochs
    attack_epochs: int = 60
    attack_learning_rate: float = 0.1
    inversion: bool = False
    inversion_class: int = -1  # -1 = the removed class
    inversion_runs: int = 5
    inversion_steps: int = 5000
    inversion_step_size: float = 1.0
    process_interval: int = 500
    noise_scale: float = 0.1
    oracle_epochs: int = 5


@dataclass(frozen=True)
class SweepSpec:
    fractions: str = "0,0.01,0.05,0.1,0.2"
    runs: int = 10


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainSpec = field(default_factory=TrainSpec)
    removal: RemovalSpec = field(default_factory=RemovalSpec)
    attack: AttackSpec = field(default_factory=AttackSpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    seed: int = 0
    out: str = "out"

    def replace(self, **changes) -> ExperimentConfig:
        """``cfg.replace(**{"train.epochs": 3, "seed": 1})``."""
        values = {k: v for k, v in changes.items()}
        return _build(values, base=self)

    def to_text(self) -> str:
        lines = []
        for name, value in _flatten(self):
            lines.append(f"{name} = {_render(value)}")
        return "\n".join(lines) + "\n"


def _sections():
    return {f.name: f for f in fields(ExperimentConfig)}


def _flatten(cfg: ExperimentConfig):
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            for sub in fields(value):
                yield f"{f.name}.{sub.name}", getattr(value, sub.name)
        else:
            yield f.name, value


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _coerce(key: str, raw, typ):
    if not isinstance(raw, str):
        if typ is float and isinstance(raw, int) and not isinstance(raw, bool):
            return float(raw)
        if isinstance(raw, typ):
            return raw
        raw = str(raw)
    text = raw.strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text, 0)
        if typ is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {typ.__name__}") from None


def _build(values: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    base = base or ExperimentConfig()
    sections = _sections()
    hints = typing.get_type_hints(ExperimentConfig)
    per_section: dict[str, dict] = {}
    top: dict = {}
    for key, raw in values.items():
        head, _, tail = key.partition(".")
        if head not in sections:
            raise ConfigError(f"{key}: unknown section {head!r}")
        if tail:
            spec_type = hints[head]
            if not dataclasses.is_dataclass(spec_type):
                raise ConfigError(f"{key}: {head!r} is not a section")
            sub_hints = typing.get_type_hints(spec_type)
            if tail not in sub_hints:
                raise ConfigError(f"{key}: unknown key")
            per_section.setdefault(head, {})[tail] = _coerce(key, raw, sub_hints[tail])
        else:
            if dataclasses.is_dataclass(hints[head]):
                raise ConfigError(f"{key}: a section needs a key, e.g. {key}.<name>")
            top[head] = _coerce(key, raw, hints[head])
    out = {}
    for name in sections:
        current = getattr(base, name)
        if name in per_section:
            out[name] = dataclasses.replace(current, **per_section[name])
        elif name in top:
            out[name] = top[name]
        else:
            out[name] = current
    cfg = ExperimentConfig(**out)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    d, t, r, a = cfg.dataset, cfg.train, cfg.removal, cfg.attack
    checks = [
        (d.name in ("mnist", "blobs"), "dataset.name", "must be 'mnist' or 'blobs'"),
        (d.train_size >= 0, "dataset.train_size", "must be >= 0"),
        (0 < d.test_fraction < 1, "dataset.test_fraction", "must lie in (0, 1)"),
        (t.epochs >= 1, "train.epochs", "must be >= 1"),
        (t.batch_size >= 1, "train.batch_size", "must be >= 1"),
        (t.learning_rate > 0, "train.learning_rate", "must be > 0"),
        (r.method in ("naive", "unlearn", "amnesiac"), "removal.method", "must be naive, unlearn or amnesiac"),
        (r.epochs >= 0, "removal.epochs", "must be >= 0"),
        (r.copies >= 1, "removal.copies", "must be >= 1"),
        (r.journal_mode in ("full", "watchlist"), "removal.journal_mode", "must be full or watchlist"),
        (a.shadow_count >= 2, "attack.shadow_count", "must be >= 2"),
        (a.inversion_runs >= 1, "attack.inversion_runs", "must be >= 1"),
        (500 <= a.process_interval <= 1000, "attack.process_interval", "must lie in [500, 1000]"),
        (cfg.sweep.runs >= 1, "sweep.runs", "must be >= 1"),
    ]
    for ok, key, msg in checks:
        if not ok:
            raise ConfigError(f"{key}: {msg}")
    parse_selector(r.selector)
    sweep_fractions(cfg)


def parse_selector(text: str):
    kind, _, arg = text.partition(":")
    kind = kind.strip()
    try:
        if kind == "class":
            return ("class", int(arg))
        if kind == "random":
            n = int(arg)
            if n < 1:
                raise ValueError
            return ("random", n)
        if kind == "examples":
            ids = tuple(int(x) for x in arg.split(",") if x.strip())
            if not ids:
                raise ValueError
            return ("examples", ids)
    except ValueError:
        pass
    raise ConfigError(f"removal.selector: cannot parse {text!r} (class:<c> | examples:<ids> | random:<n>)")


def sweep_fractions(cfg: ExperimentConfig) -> list[float]:
    try:
        values = [float(x) for x in cfg.sweep.fractions.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"sweep.fractions: cannot parse {cfg.sweep.fractions!r}") from None
    if not values or any(not 0.0 <= v <= 1.0 for v in values):
        raise ConfigError("sweep.fractions: values must lie in [0, 1]")
    return values


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{n}: empty key")
        values[key] = value
    return values


def env_overrides(environ=None) -> dict[str, str]:
    environ = os.environ if environ is None else environ
    out = {}
    for name, value in environ.items():
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX) :].lower().replace("__", ".")
            out[key] = value
    return out


def load_config(path=None, overrides: dict | None = None, environ=None) -> ExperimentConfig:
    """File values, then environment overrides, then explicit ``overrides``."""
    values: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        values.update(parse_text(p.read_text(), str(p)))
    values.update(env_overrides(environ))
    values.update(overrides or {})
    for required in ("dataset.name", "removal.method"):
        if not values.get(required):
            raise ConfigError(f"{required}: required")
    return _build(values)
