"""Data removal: naive retraining, relabel unlearning, amnesiac unlearning."""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass

import numpy as np

from amnesiac._rng import generator
from amnesiac.data import Dataset, Selector
from amnesiac.journal import FingerprintMismatchError, Journal
from amnesiac.nn import Architecture, Model, TrainConfig, accuracy, init_model, train

SensitiveSelector = Selector

DEFAULT_COPIES = 3


class RemovalError(ValueError):
    pass


class Method(str, enum.Enum):
    NAIVE = "naive"
    UNLEARN = "unlearn"
    AMNESIAC = "amnesiac"


@dataclass
class RemovalReport:
    method: Method
    wall_time: float
    epochs_used: int
    pre_target_accuracy: float | None = None
    post_target_accuracy: float | None = None
    pre_non_target_accuracy: float | None = None
    post_non_target_accuracy: float | None = None
    removed_batches: int = 0


def target_split(selector: Selector, train_data: Dataset, eval_data: Dataset | None):
    """(target set, non-target set) used to score a removal.

    Class removal is scored on held-out data of that class versus the rest;
    example removal on the removed examples themselves versus held-out data
    (or the remaining training data when none is given).
    """
    if selector.class_label is not None:
        data = eval_data if eval_data is not None else train_data
        m = selector.mask(data)
        return data.take(m), data.take(~m)
    m = selector.mask(train_data)
    rest = eval_data if eval_data is not None else train_data.take(~m)
    return train_data.take(m), rest


def _acc(model: Model, data: Dataset | None) -> float | None:
    if data is None or len(data) == 0:
        return None
    return accuracy(model, data)


def _score(model, target, non_target):
    return _acc(model, target), _acc(model, non_target)


def _require_nonempty(selector: Selector, dataset: Dataset) -> np.ndarray:
    mask = selector.mask(dataset)
    if not mask.any():
        raise RemovalError("selector matches no examples")
    if mask.all():
        raise RemovalError("selector covers the entire dataset")
    return mask


def naive_retrain(
    dataset: Dataset,
    selector: Selector,
    architecture: Architecture,
    config: TrainConfig,
    *,
    model: Model | None = None,
    eval_data: Dataset | None = None,
    first_epoch: int = 0,
) -> tuple[Model, RemovalReport]:
    """Train on D \\ S for ``config.epochs`` epochs.

    Without ``model`` this is retraining from scratch (fresh init from
    ``config.seed``). With ``model`` training continues from a copy of it,
    i.e. the baseline relies on catastrophic interference to forget S.
    """
    mask = _require_nonempty(selector, dataset)
    kept = dataset.take(~mask)
    target, non_target = target_split(selector, dataset, eval_data)
    if model is None:
        out = init_model(architecture, config.seed)
        pre = (None, None)
    else:
        if str(model.architecture) != str(architecture):
            raise FingerprintMismatchError("model architecture differs from the requested one")
        out = model.copy()
        pre = _score(out, target, non_target)
    t0 = time.perf_counter()
    train(out, kept, config, first_epoch=first_epoch)
    wall = time.perf_counter() - t0
    post = _score(out, target, non_target)
    return out, RemovalReport(Method.NAIVE, wall, config.epochs, pre[0], post[0], pre[1], post[1])


def relabel(dataset: Dataset, selector: Selector, copies_k: int = DEFAULT_COPIES, seed: int = 0) -> Dataset:
    """Give sensitive examples uniformly random incorrect labels.

    Class selectors relabel in place (ids and features unchanged). Example
    selectors drop the originals and append ``copies_k`` relabelled copies of
    each, with fresh ids whose ``origin_ids`` point back at the original.
    """
    if dataset.class_count < 2:
        raise RemovalError("relabelling needs at least two classes")
    mask = selector.mask(dataset)
    rng = generator(seed, "relabel")

    def wrong(true_labels: np.ndarray) -> np.ndarray:
        # uniform over the other class_count - 1 labels
        shift = rng.integers(1, dataset.class_count, size=len(true_labels))
        return (true_labels + shift) % dataset.class_count

    if selector.class_label is not None:
        labels = dataset.labels.copy()
        labels[mask] = wrong(labels[mask])
        return dataset.with_labels(labels)

    if copies_k < 1:
        raise RemovalError("copies_k must be at least 1")
    idx = np.flatnonzero(mask)
    rep = np.repeat(idx, copies_k)
    start = dataset.next_id()
    copies = Dataset(
        np.arange(start, start + len(rep), dtype=np.uint64),
        dataset.features[rep],
        wrong(dataset.labels[rep]),
        dataset.class_count,
        dataset.origin_ids[rep],
    )
    return dataset.take(~mask).concat(copies)


def unlearn(
    model: Model,
    dataset: Dataset,
    selector: Selector,
    epochs: int,
    config: TrainConfig,
    *,
    copies_k: int = DEFAULT_COPIES,
    eval_data: Dataset | None = None,
    first_epoch: int = 0,
    relabelled: Dataset | None = None,
) -> tuple[Model, RemovalReport]:
    """Train a copy of ``model`` for ``epochs`` epochs on the relabelled data.

    Pass ``relabelled`` to continue on a dataset already produced by
    ``relabel`` (keeps labels stable across repeated calls).
    """
    if epochs < 0:
        raise RemovalError("epochs must be non-negative")
    if relabelled is None:
        _require_nonempty(selector, dataset)
        relabelled = relabel(dataset, selector, copies_k, seed=config.seed)
    target, non_target = target_split(selector, dataset, eval_data)
    out = model.copy()
    pre = _score(out, target, non_target)
    t0 = time.perf_counter()
    if epochs:
        train(out, relabelled, _with_epochs(config, epochs), first_epoch=first_epoch)
    wall = time.perf_counter() - t0
    post = _score(out, target, non_target) if epochs else pre
    return out, RemovalReport(Method.UNLEARN, wall, epochs, pre[0], post[0], pre[1], post[1])


def amnesiac_unlearn(
    model: Model,
    journal: Journal,
    selector,
    *,
    dataset: Dataset | None = None,
    eval_data: Dataset | None = None,
) -> tuple[Model, RemovalReport]:
    """Subtract every journaled delta from batches that held sensitive data.

    ``dataset`` resolves class selectors to ids (and scores the removal).
    Raises MissingDeltaError naming the batches whose deltas a WATCHLIST
    journal did not keep.
    """
    if journal.arch_fingerprint != model.architecture.fingerprint():
        raise FingerprintMismatchError("journal was recorded for a different architecture")
    score = dataset is not None and isinstance(selector, Selector)
    if score:
        target, non_target = target_split(selector, dataset, eval_data)
        pre = _score(model, target, non_target)
    t0 = time.perf_counter()
    keys = journal.batches_containing(selector, dataset)
    removed = journal.sum_deltas(keys)
    out = Model(model.architecture, model.params - removed)
    wall = time.perf_counter() - t0
    report = RemovalReport(Method.AMNESIAC, wall, 0, removed_batches=len(keys))
    if score:
        post = _score(out, target, non_target)
        report.pre_target_accuracy, report.post_target_accuracy = pre[0], post[0]
        report.pre_non_target_accuracy, report.post_non_target_accuracy = pre[1], post[1]
    return out, report


def fine_tune(
    model: Model,
    dataset_without_s: Dataset,
    epochs: int,
    config: TrainConfig,
    *,
    excluded: Selector | None = None,
    journal: Journal | None = None,
    first_epoch: int = 0,
) -> Model:
    """Continue SGD from ``model`` on data that no longer contains S.

    ``excluded`` (if given) is checked against the dataset. A journal passed
    here must be a fresh one (its own run id) starting at ``model``'s
    parameters.
    """
    if epochs < 0:
        raise RemovalError("epochs must be non-negative")
    if excluded is not None and excluded.mask(dataset_without_s).any():
        raise RemovalError("fine-tuning data still contains sensitive examples")
    if journal is not None and journal.initial_params != model.params:
        raise RemovalError("fine-tune journal must start from the unlearned parameters")
    out = model.copy()
    if epochs:
        train(out, dataset_without_s, _with_epochs(config, epochs), journal, first_epoch=first_epoch)
    return out


def _with_epochs(config: TrainConfig, epochs: int) -> TrainConfig:
    return TrainConfig(epochs, config.batch_size, config.learning_rate, config.seed, config.shuffle)
