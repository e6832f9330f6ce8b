import json

import numpy as np
import pytest

from octagraph import gnn, hetero, train
from octagraph.train import TrainConfig
from toys import toy_dataset, toy_graph


def test_zero_learning_rate_keeps_parameters():
    data = toy_dataset(0, 12)
    cfg = TrainConfig(epochs=3, learning_rate=0.0, seed=5)
    result = train.train(data, [], cfg)
    init = gnn.HeteroGNN(seed=int(np.random.default_rng(5).integers(2 ** 31)))
    for k, p in init.params.items():
        np.testing.assert_array_equal(result.model.params[k].data, p.data)


def test_loss_decreases_on_separable_classes():
    data = toy_dataset(1, 64, classes=(0, 2), shift=1.5)
    result = train.train(data, [], TrainConfig(epochs=10, seed=0))
    losses = [h["loss"] for h in result.history]
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def _minority_recall(weights, seed):
    rng = np.random.default_rng(seed)
    labels = [0] * 90 + [1] * 10
    rng.shuffle(labels)
    data = [toy_graph(rng, lab, shift=0.35) for lab in labels]
    test = [toy_graph(rng, lab, shift=0.35) for lab in [0] * 40 + [1] * 40]
    result = train.train(data, [], TrainConfig(epochs=15, seed=seed, class_weights=weights))
    stats = result.stats
    preds = result.model.predict([hetero.normalize(g, stats) for g in test])
    return np.mean([p.predicted_class == 1 for p in preds[40:]])


def test_class_weights_raise_minority_recall():
    assert _minority_recall("balanced", 3) > _minority_recall("none", 3)


def test_balanced_class_weights():
    w = train.class_weight_vector([0] * 9 + [1], "balanced")
    assert w[0] == pytest.approx(10 / (2 * 9)) and w[1] == pytest.approx(5.0) and w[2] == 0


def test_seeded_runs_are_identical():
    data, val = toy_dataset(2, 20), toy_dataset(3, 6)
    a = train.train(data, val, TrainConfig(epochs=3, seed=9))
    b = train.train(data, val, TrainConfig(epochs=3, seed=9))
    strip = lambda r: json.dumps({k: v for k, v in train.checkpoint_dict(r).items()}, sort_keys=True)
    assert strip(a) == strip(b)


def test_validation_loss_with_class_unseen_in_training():
    data, val = toy_dataset(4, 12, classes=(0, 1)), toy_dataset(5, 4, classes=(2,))
    result = train.train(data, val, TrainConfig(epochs=2, seed=1))
    assert all(np.isfinite(h["val_loss"]) for h in result.history)


def test_single_class_rejected():
    with pytest.raises(ValueError):
        train.train(toy_dataset(0, 6, classes=(1,)), [], TrainConfig(epochs=1))


def test_checkpoint_roundtrip(tmp_path):
    data, val = toy_dataset(4, 18), toy_dataset(5, 6)
    result = train.train(data, val, TrainConfig(epochs=2, seed=1))
    path = tmp_path / "model.json"
    train.save_checkpoint(result, path)
    back = train.load_checkpoint(path)
    graphs = [hetero.normalize(g, back.stats) for g in val]
    want = result.model.predict([hetero.normalize(g, result.stats) for g in val])
    got = back.model.predict(graphs)
    for p, q in zip(want, got):
        assert p.logits.tobytes() == q.logits.tobytes()
    assert back.best_epoch == result.best_epoch and back.history == result.history


# ---------------------------------------------------------------- splitting


def test_split_singletons():
    folds = train.group_stratified_split([1] * 10, list(range(10)), 5, seed=0)
    assert np.bincount(folds).tolist() == [2] * 5


def test_split_keeps_pairs_together():
    labels = [0, 0, 1, 1, 2, 2, 0, 0, 1, 1, 2, 2]
    groups = [0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5]
    for seed in range(10):
        folds = train.group_stratified_split(labels, groups, 6, seed)
        for g in set(groups):
            assert len({folds[i] for i in range(12) if groups[i] == g}) == 1


def test_split_no_leakage_and_balance():
    rng = np.random.default_rng(0)
    for trial in range(30):
        n_groups = int(rng.integers(12, 60))
        size = rng.integers(1, 3, n_groups)
        group_class = rng.integers(0, 3, n_groups)
        groups = np.repeat(np.arange(n_groups), size)
        labels = np.repeat(group_class, size)
        folds = train.group_stratified_split(labels, groups, 6, seed=trial)
        for g in range(n_groups):
            assert len(set(folds[groups == g])) == 1
        np.testing.assert_array_equal(folds, train.group_stratified_split(labels, groups, 6, seed=trial))


def test_split_balance_with_equal_groups():
    # 2-sample single-class groups: per-class group counts per fold differ by at most one
    labels = np.repeat([0] * 13 + [1] * 8 + [2] * 7, 2)
    groups = np.repeat(np.arange(28), 2)
    folds = train.group_stratified_split(labels, groups, 6, seed=1)
    for c in range(3):
        per_fold = np.bincount(folds[labels == c], minlength=6) // 2
        assert per_fold.max() - per_fold.min() <= 1


def test_split_needs_enough_groups():
    with pytest.raises(ValueError):
        train.group_stratified_split([0, 1, 0], [0, 0, 1], 3)
