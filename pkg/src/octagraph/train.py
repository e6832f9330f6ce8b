"""Training loop, group-aware data splitting and checkpoint files."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import NumericError
from .gnn import HeteroGNN, ModelConfig, collate
from .hetero import CLASSES, NODE_TYPES, HeteroGraph, NormStats, fit_norm_stats, model_feature_names, normalize
from .metrics import balanced_accuracy

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    class_weights: str | list = "balanced"   # balanced | none | explicit list
    n_folds: int = 6
    test_fold: int = 0
    val_fold: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be non-negative")
        if isinstance(self.class_weights, str) and self.class_weights not in ("balanced", "none"):
            raise ValueError(f"unknown class weighting {self.class_weights!r}")


@dataclass
class TrainResult:
    model: HeteroGNN
    stats: NormStats
    history: list[dict]
    best_epoch: int
    config: TrainConfig
    elapsed_s: float = 0.0
    meta: dict = field(default_factory=dict)


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: dict, lr, beta1, beta2, eps, weight_decay):
        self.params = params
        self.lr, self.b1, self.b2, self.eps, self.wd = lr, beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = p.data - self.lr * (update + self.wd * p.data)


def class_weight_vector(labels, mode) -> np.ndarray:
    """Per-class loss weights; ``balanced`` gives N / (C * n_c) for present classes."""
    k = len(CLASSES)
    if isinstance(mode, (list, tuple, np.ndarray)):
        w = np.asarray(mode, dtype=float)
        if w.shape != (k,) or np.any(w < 0):
            raise ValueError("explicit class weights need one non-negative value per class")
        return w
    if mode == "none":
        return np.ones(k)
    counts = np.bincount(np.asarray(labels, int), minlength=k).astype(float)
    present = counts > 0
    w = np.zeros(k)
    w[present] = counts.sum() / (present.sum() * counts[present])
    return w


def _batches(model: HeteroGNN, graphs, batch_size=64) -> list:
    return [collate(graphs[i:i + batch_size], model.cfg) for i in range(0, len(graphs), batch_size)]


def _evaluate(model: HeteroGNN, batches, weights):
    if not batches:
        return float("nan"), float("nan")
    logits, labels = [], []
    for b in batches:
        logits.append(model.forward(b).data)
        labels.append(b.labels)
    logits, labels = np.concatenate(logits), np.concatenate(labels)
    if not weights[labels].any():
        weights = None  # only classes unseen in training: fall back to the plain mean
    loss = float(ad.cross_entropy(logits, labels, weights).data)
    return loss, balanced_accuracy(labels, logits.argmax(axis=1))


def train(train_graphs: list[HeteroGraph], val_graphs: list[HeteroGraph], cfg: TrainConfig | None = None,
          model_cfg: ModelConfig | None = None, log=None) -> TrainResult:
    """Fit normalisation and model; keep the epoch with the best validation balanced accuracy.

    Without validation graphs the training-set balanced accuracy picks the epoch.
    Ties keep the earliest epoch.
    """
    cfg = cfg or TrainConfig()
    model_cfg = model_cfg or ModelConfig()
    if not train_graphs:
        raise ValueError("no training graphs")
    labels = np.array([g.label for g in train_graphs])
    if any(g.label is None for g in train_graphs):
        raise ValueError("every training graph needs a label")
    if len(np.unique(labels)) < 2:
        raise ValueError("training set contains a single class")
    start = time.perf_counter()
    stats = fit_norm_stats(train_graphs)
    tr = [normalize(g, stats) for g in train_graphs]
    va = [normalize(g, stats) for g in val_graphs]
    weights = class_weight_vector(labels, cfg.class_weights)

    rng = np.random.default_rng(cfg.seed)
    model = HeteroGNN(model_cfg, seed=int(rng.integers(2 ** 31)))
    opt = AdamW(model.params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    val_batches = _batches(model, va)
    history, best, best_state, best_epoch = [], -np.inf, model.copy_state(), 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(tr))
        losses, sizes, preds, truth = [], [], [], []
        for i in range(0, len(order), cfg.batch_size):
            batch = collate([tr[j] for j in order[i:i + cfg.batch_size]], model_cfg)
            model.zero_grad()
            logits = model.forward(batch, train=True, rng=rng)
            loss = ad.cross_entropy(logits, batch.labels, weights)
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
            sizes.append(batch.num_graphs)
            preds.append(logits.data.argmax(axis=1))
            truth.append(batch.labels)
        for p in model.params.values():
            if not np.all(np.isfinite(p.data)):
                raise NumericError(f"non-finite parameters after epoch {epoch}")
        record = {
            "epoch": epoch,
            "loss": float(np.average(losses, weights=sizes)),
            "train_balanced_accuracy": balanced_accuracy(np.concatenate(truth), np.concatenate(preds)),
        }
        if va:
            record["val_loss"], record["val_balanced_accuracy"] = _evaluate(model, val_batches, weights)
            score = record["val_balanced_accuracy"]
        else:
            score = record["train_balanced_accuracy"]
        history.append(record)
        if score > best:
            best, best_state, best_epoch = score, model.copy_state(), epoch
        if log is not None:
            log(record)
    model.restore_state(best_state)
    return TrainResult(model, stats, history, best_epoch, cfg, time.perf_counter() - start,
                       {"class_weights": weights.tolist(), "num_train": len(tr), "num_val": len(va)})


# ------------------------------------------------------------------ splitting


def group_stratified_split(labels, group_ids, n_folds: int, seed: int = 0) -> np.ndarray:
    """Fold index per sample; samples sharing a group id always share a fold.

    Groups are placed largest first (seeded shuffle among equal sizes) into the
    fold whose per-class counts move least away from the per-class targets.
    """
    labels = np.asarray(labels)
    group_ids = np.asarray(group_ids)
    if len(labels) != len(group_ids):
        raise ValueError("labels and group ids differ in length")
    if n_folds < 2:
        raise ValueError("need at least two folds")
    groups, inverse = np.unique(group_ids, return_inverse=True)
    if len(groups) < n_folds:
        raise ValueError(f"{len(groups)} groups cannot fill {n_folds} folds")
    classes, lab_idx = np.unique(labels, return_inverse=True)
    comp = np.zeros((len(groups), len(classes)))
    np.add.at(comp, (inverse, lab_idx), 1)
    target = comp.sum(axis=0) / n_folds
    rng = np.random.default_rng(seed)
    key = rng.permutation(len(groups))
    order = sorted(range(len(groups)), key=lambda g: (-comp[g].sum(), key[g]))
    fold_counts = np.zeros((n_folds, len(classes)))
    assign = np.empty(len(groups), dtype=np.int64)
    for g in order:
        after = fold_counts + comp[g]
        cost = ((after - target) ** 2).sum(axis=1) - ((fold_counts - target) ** 2).sum(axis=1)
        sizes = fold_counts.sum(axis=1)
        f = min(range(n_folds), key=lambda i: (round(cost[i], 9), sizes[i], i))
        assign[g] = f
        fold_counts[f] += comp[g]
    return assign[inverse]


def fold_subsets(folds: np.ndarray, test_fold: int, val_fold: int):
    """Index arrays (train, val, test) for one fold assignment."""
    folds = np.asarray(folds)
    if test_fold == val_fold:
        raise ValueError("test and validation folds must differ")
    test = np.flatnonzero(folds == test_fold)
    val = np.flatnonzero(folds == val_fold)
    train_ = np.flatnonzero((folds != test_fold) & (folds != val_fold))
    return train_, val, test


# ------------------------------------------------------------------ checkpoints


def checkpoint_dict(result: TrainResult) -> dict:
    mc = result.model.cfg
    return {
        "format": "octagraph-checkpoint",
        "version": CHECKPOINT_VERSION,
        "model_config": mc.to_dict(),
        "train_config": asdict(result.config),
        "norm_stats": result.stats.to_dict(),
        "features": {t: model_feature_names(t, mc.include_coordinates) for t in NODE_TYPES},
        "state": result.model.state_dict(),
        "history": result.history,
        "best_epoch": result.best_epoch,
        "meta": result.meta,
    }


def save_checkpoint(result: TrainResult, path) -> None:
    from .io_utils import atomic_write_text

    atomic_write_text(path, json.dumps(checkpoint_dict(result), sort_keys=True, separators=(",", ":")))


def checkpoint_from_dict(d: dict) -> TrainResult:
    if d.get("format") != "octagraph-checkpoint" or d.get("version") != CHECKPOINT_VERSION:
        raise ValueError("not a supported checkpoint file")
    mc = ModelConfig(**d["model_config"])
    model = HeteroGNN(mc)
    model.load_state_dict(d["state"])
    cfg = TrainConfig(**d["train_config"])
    return TrainResult(model, NormStats.from_dict(d["norm_stats"]), d["history"], d["best_epoch"], cfg,
                       meta=d.get("meta", {}))


def load_checkpoint(path) -> TrainResult:
    with open(path, encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"checkpoint is not valid JSON: {exc}") from exc
    return checkpoint_from_dict(d)
