import numpy as np
import pytest

from amnesiac import Architecture, TrainConfig, accuracy, init_model, train
from amnesiac.data import Selector, synth_blobs
from amnesiac.journal import FingerprintMismatchError, Journal, MissingDeltaError, Mode
from amnesiac.nn import Model
from amnesiac.removal import (
    Method,
    RemovalError,
    amnesiac_unlearn,
    fine_tune,
    naive_retrain,
    relabel,
    target_split,
    unlearn,
)

ARCH = Architecture.mlp(6, 12, 4)
CFG = TrainConfig(2, 16, 0.1, 3)


@pytest.fixture(scope="module")
def trained(blobs):
    model = init_model(ARCH, 0)
    journal = Journal.for_model(model)
    snapshots = {}
    train(model, blobs, CFG, journal, on_batch=lambda key, m: snapshots.__setitem__(key, m.params.copy()))
    return model, journal, snapshots


# --------------------------------------------------------------------------
# amnesiac bookkeeping


def test_removing_the_final_batch_restores_the_snapshot(trained):
    model, journal, snapshots = trained
    last = journal.keys()[-1]
    undone, report = amnesiac_unlearn(model, journal, journal.example_ids(last).tolist())
    # the final batch's examples also appear in earlier epochs; isolate it
    sb = journal.batches_containing(journal.example_ids(last).tolist())
    assert report.removed_batches == len(sb)
    only_last = Model(model.architecture, model.params - journal.sum_deltas([last]))
    assert only_last.params == snapshots[last]


def test_removing_every_batch_restores_the_initial_params(trained, blobs):
    model, journal, _ = trained
    undone, report = amnesiac_unlearn(model, journal, blobs.ids.tolist())
    assert undone.params == journal.initial_params
    assert report.removed_batches == len(journal)


def test_empty_selector_is_identity(trained):
    model, journal, _ = trained
    undone, report = amnesiac_unlearn(model, journal, Selector.of_examples([]))
    assert undone.params == model.params and report.removed_batches == 0
    assert undone is not model


def test_subtraction_equals_the_delta_sum(trained, blobs):
    model, journal, _ = trained
    rng = np.random.default_rng(1)
    for size in (1, 5, 40):
        ids = rng.choice(blobs.ids, size, replace=False).tolist()
        undone, _ = amnesiac_unlearn(model, journal, ids)
        assert model.params - undone.params == journal.sum_deltas(journal.batches_containing(ids))


def test_class_selector_scores_on_eval_data(trained, blobs):
    model, journal, _ = trained
    undone, report = amnesiac_unlearn(model, journal, Selector.of_class(2), dataset=blobs, eval_data=blobs)
    assert report.method is Method.AMNESIAC
    assert report.pre_target_accuracy == accuracy(model, blobs, Selector.of_class(2))
    assert report.post_target_accuracy == accuracy(undone, blobs, Selector.of_class(2))
    assert report.wall_time >= 0


def test_non_commutativity():
    """Undoing b1 from a b0,b1,b2 run is not the same as training on b0,b2."""
    data = synth_blobs(3, 8, 4, 0.4, seed=2)
    arch = Architecture.mlp(4, 8, 3)
    cfg = TrainConfig(1, 8, 0.5, 0, shuffle=False)
    model = init_model(arch, 1)
    journal = Journal.for_model(model)
    train(model, data, cfg, journal)
    assert len(journal) == 3
    b1 = journal.example_ids((0, 1)).tolist()
    undone, _ = amnesiac_unlearn(model, journal, b1)

    direct = init_model(arch, 1)
    kept = data.take(~Selector.of_examples(b1).mask(data))
    train(direct, kept, cfg)
    assert np.max(np.abs(direct.params.flat - undone.params.flat)) > 1e-7


def test_disturbance_grows_with_the_number_of_removed_batches(trained):
    model, journal, _ = trained
    keys = journal.keys()
    rng = np.random.default_rng(0)
    means = []
    for size in (1, 2, 4, 8, 16):
        norms = [np.linalg.norm(journal.sum_deltas([keys[i] for i in rng.choice(len(keys), size, replace=False)]).flat)
                 for _ in range(12)]
        means.append(np.mean(norms))
    assert all(a <= b for a, b in zip(means, means[1:]))


def test_architecture_mismatch_is_refused(trained):
    _, journal, _ = trained
    other = init_model(Architecture.mlp(6, 13, 4), 0)
    with pytest.raises(FingerprintMismatchError):
        amnesiac_unlearn(other, journal, [0])


def test_watchlist_miss_names_the_missing_batches(blobs):
    model = init_model(ARCH, 0)
    journal = Journal.for_model(model, mode=Mode.WATCHLIST, watched=blobs.ids[:2].tolist())
    train(model, blobs, CFG, journal)
    amnesiac_unlearn(model, journal, blobs.ids[:2].tolist())  # covered
    with pytest.raises(MissingDeltaError) as err:
        amnesiac_unlearn(model, journal, Selector.of_class(0), dataset=blobs)
    missing = set(journal.batches_containing(Selector.of_class(0), blobs)) - set(journal.stored_keys())
    assert set(err.value.keys) == missing and missing


# --------------------------------------------------------------------------
# relabel


def test_class_relabel_removes_the_true_label(blobs):
    out = relabel(blobs, Selector.of_class(3), seed=0)
    was_three = blobs.labels == 3
    assert len(out) == len(blobs)
    assert not np.any(out.labels[was_three] == 3)
    assert np.array_equal(out.labels[~was_three], blobs.labels[~was_three])
    assert np.array_equal(out.ids, blobs.ids)


def test_example_relabel_counts_and_origins(blobs):
    ids = blobs.ids[[3, 9, 20, 41, 77]].tolist()
    out = relabel(blobs, Selector.of_examples(ids), copies_k=3, seed=1)
    assert len(out) == len(blobs) - 5 + 15
    copies = ~np.isin(out.ids, blobs.ids)
    assert copies.sum() == 15 and not np.isin(ids, out.ids).any()
    origin_labels = {int(i): int(blobs.labels[blobs.position([i])[0]]) for i in ids}
    for origin, label in zip(out.origin_ids[copies], out.labels[copies]):
        assert int(origin) in origin_labels and origin_labels[int(origin)] != label
    assert sorted(np.unique(out.origin_ids[copies]).tolist()) == sorted(ids)


def test_relabel_is_seeded(blobs):
    sel = Selector.of_class(1)
    a, b = relabel(blobs, sel, seed=5), relabel(blobs, sel, seed=5)
    assert np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.labels, relabel(blobs, sel, seed=6).labels)


def test_relabel_wrong_labels_are_spread_over_other_classes():
    data = synth_blobs(4, 500, 2, 0.5, seed=0)
    out = relabel(data, Selector.of_class(0), seed=0)
    counts = np.bincount(out.labels[data.labels == 0], minlength=4)
    assert counts[0] == 0 and all(abs(c / 500 - 1 / 3) < 0.06 for c in counts[1:])


def test_relabel_copies_must_be_positive(blobs):
    with pytest.raises(RemovalError):
        relabel(blobs, Selector.of_examples([0]), copies_k=0)


# --------------------------------------------------------------------------
# naive, unlearn, fine-tune


def test_naive_drops_exactly_the_selected_examples(blobs):
    sel = Selector.of_examples(blobs.ids[:10].tolist())
    seen = []
    model, report = naive_retrain(blobs, sel, ARCH, TrainConfig(1, 16, 0.1, 0))
    assert report.method is Method.NAIVE and report.pre_target_accuracy is None
    # fresh init trained on D \ S equals training a fresh model by hand
    manual = init_model(ARCH, 0)
    kept = blobs.take(~sel.mask(blobs))
    assert len(kept) == len(blobs) - 10
    train(manual, kept, TrainConfig(1, 16, 0.1, 0), on_batch=lambda k, m: seen.append(k))
    assert manual.params == model.params


def test_naive_continues_from_a_given_model(trained, blobs):
    model = trained[0]
    cont, report = naive_retrain(blobs, Selector.of_class(0), ARCH, TrainConfig(1, 16, 0.1, 0), model=model,
                                 eval_data=blobs)
    assert report.pre_target_accuracy == accuracy(model, blobs, Selector.of_class(0))
    assert cont.params != model.params


def test_naive_refuses_to_remove_everything(blobs):
    with pytest.raises(RemovalError):
        naive_retrain(blobs, Selector.of_examples(blobs.ids.tolist()), ARCH, CFG)


def test_unlearn_zero_epochs_is_identity(trained, blobs):
    model = trained[0]
    out, report = unlearn(model, blobs, Selector.of_class(1), 0, CFG)
    assert out.params == model.params and report.epochs_used == 0


def test_unlearn_forgets_a_blob_class(trained, blobs):
    model = trained[0]
    out, report = unlearn(model, blobs, Selector.of_class(1), 2, CFG, eval_data=blobs)
    assert report.post_target_accuracy < report.pre_target_accuracy
    assert report.post_target_accuracy <= 0.25


def test_fine_tune_zero_epochs_is_identity(trained, blobs):
    assert fine_tune(trained[0], blobs, 0, CFG).params == trained[0].params


def test_fine_tune_refuses_data_with_sensitive_examples(trained, blobs):
    with pytest.raises(RemovalError):
        fine_tune(trained[0], blobs, 1, CFG, excluded=Selector.of_class(0))


def test_fine_tune_journal_starts_at_the_unlearned_params(trained, blobs):
    model, journal, _ = trained
    undone, _ = amnesiac_unlearn(model, journal, Selector.of_class(0), dataset=blobs)
    kept = blobs.take(~Selector.of_class(0).mask(blobs))
    with pytest.raises(RemovalError):
        fine_tune(undone, kept, 1, CFG, journal=Journal.for_model(model, run_id="fine-tune"))
    fresh = Journal.for_model(undone, run_id="fine-tune")
    tuned = fine_tune(undone, kept, 1, CFG, journal=fresh, first_epoch=CFG.epochs)
    assert fresh.initial_params + fresh.sum_deltas(fresh.keys()) == tuned.params


def test_fine_tune_does_not_bring_back_a_removed_class(blobs):
    model = init_model(ARCH, 0)
    journal = Journal.for_model(model)
    train(model, blobs, CFG, journal)
    sel = Selector.of_class(2)
    undone, _ = amnesiac_unlearn(model, journal, sel, dataset=blobs)
    tuned = fine_tune(undone, blobs.take(~sel.mask(blobs)), 3, CFG, excluded=sel, first_epoch=2)
    assert accuracy(tuned, blobs, sel) <= 2 * 0.25


def test_target_split_modes(blobs):
    test = synth_blobs(4, 10, 6, 0.3, seed=6)
    t, n = target_split(Selector.of_class(1), blobs, test)
    assert set(t.labels.tolist()) == {1} and 1 not in n.labels
    ids = blobs.ids[:4].tolist()
    t, n = target_split(Selector.of_examples(ids), blobs, test)
    assert t.ids.tolist() == ids and len(n) == len(test)
