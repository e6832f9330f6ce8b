"""Heterogeneous message-passing classifier over vessel, ICA and FAZ nodes.

Pipeline per graph batch: per-type preprocess MLP, K message-passing layers
(per-relation mean aggregation, concatenation with the node's own state, a
relation-specific linear map and ReLU, then a sum over relations), per-type
postprocess MLP, mean pooling per type, and a two-layer classification head.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NumericError
from .hetero import (
    CLASSES, FAZ, ICA, NODE_TYPES, RELATION_TYPES, RELATIONS, VES, HeteroGraph, mask_relations,
    model_columns,
)

MAX_PARAMETERS = 60_000

# message channels: (name, target type, source type, relation)
CHANNELS = (
    ("VES<-VES", VES, VES, "VES_VES"),
    ("ICA<-ICA", ICA, ICA, "ICA_ICA"),
    ("VES<-ICA", VES, ICA, "VES_ICA"),
    ("ICA<-VES", ICA, VES, "VES_ICA"),
    ("FAZ<-VES", FAZ, VES, "FAZ_VES"),
    ("VES<-FAZ", VES, FAZ, "FAZ_VES"),
    ("FAZ<-ICA", FAZ, ICA, "FAZ_ICA"),
    ("ICA<-FAZ", ICA, FAZ, "FAZ_ICA"),
)


@dataclass
class ModelConfig:
    hidden_dim: int = 32
    num_layers: int = 2
    dropout: float = 0.3
    neighbour_aggregator: str = "mean"   # mean | sum
    relation_aggregator: str = "sum"     # sum | mean
    include_coordinates: bool = False
    relations: tuple = RELATIONS
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.relations = tuple(self.relations)
        if self.hidden_dim < 1 or self.num_layers < 0:
            raise ValueError("hidden_dim must be positive and num_layers non-negative")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.neighbour_aggregator not in ("mean", "sum"):
            raise ValueError(f"unknown neighbour aggregator {self.neighbour_aggregator!r}")
        if self.relation_aggregator not in ("mean", "sum"):
            raise ValueError(f"unknown relation aggregator {self.relation_aggregator!r}")
        bad = set(self.relations) - set(RELATIONS)
        if bad or not self.relations:
            raise ValueError(f"invalid relation set {self.relations}")

    def input_dim(self, node_type: str) -> int:
        return len(model_columns(node_type, self.include_coordinates))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["relations"] = list(self.relations)
        return d


@dataclass
class Prediction:
    logits: np.ndarray
    probabilities: np.ndarray
    predicted_class: int

    @property
    def label(self) -> str:
        return CLASSES[self.predicted_class]


# ------------------------------------------------------------------ batching


@dataclass
class Batch:
    x: dict                 # node type -> (n, d) normalised model features
    adjacency: dict         # channel name -> sparse (n_target, n_source)
    pool: dict              # node type -> sparse (num_graphs, n) mean-pooling matrix
    num_graphs: int
    labels: np.ndarray | None = None
    graph_of: dict = field(default_factory=dict)  # node type -> graph index per node


def _aggregation_matrix(rows, cols, n_rows, n_cols, mean: bool) -> sp.csr_matrix:
    data = np.ones(len(rows))
    m = sp.csr_matrix((data, (rows, cols)), shape=(n_rows, n_cols))
    m.sum_duplicates()
    m.data[:] = 1.0
    if mean:
        deg = np.asarray(m.sum(axis=1)).ravel()
        scale = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
        m = sp.diags(scale) @ m
    return m.tocsr()


def collate(graphs: list[HeteroGraph], cfg: ModelConfig, features: dict | None = None) -> Batch:
    """Disjoint union of normalised graphs.

    ``features`` optionally replaces the per-type feature matrices (used to
    feed interpolated inputs for attribution).
    """
    graphs = [mask_relations(g, cfg.relations) for g in graphs]
    counts = {t: [g.num_nodes(t) for g in graphs] for t in NODE_TYPES}
    offsets = {t: np.concatenate([[0], np.cumsum(counts[t])]) for t in NODE_TYPES}
    totals = {t: int(offsets[t][-1]) for t in NODE_TYPES}
    x = {}
    for t in NODE_TYPES:
        if features is not None and t in features:
            x[t] = features[t]
            continue
        d = cfg.input_dim(t)
        parts = [g.features(t, cfg.include_coordinates) for g in graphs]
        x[t] = np.concatenate(parts).reshape(totals[t], d) if parts else np.zeros((0, d))
        if not np.all(np.isfinite(x[t])):
            raise NumericError(f"{t} features contain NaN/Inf")
    mean = cfg.neighbour_aggregator == "mean"
    adjacency = {}
    for name, tgt, src, rel in CHANNELS:
        if rel not in cfg.relations:
            continue
        a_type, b_type = RELATION_TYPES[rel]
        rows, cols = [], []
        for gi, g in enumerate(graphs):
            e = g.edges[rel]
            if len(e) == 0:
                continue
            ea = e[:, 0] + offsets[a_type][gi]
            eb = e[:, 1] + offsets[b_type][gi]
            if a_type == b_type:
                rows += [ea, eb]
                cols += [eb, ea]
            elif tgt == a_type:
                rows.append(ea)
                cols.append(eb)
            else:
                rows.append(eb)
                cols.append(ea)
        r = np.concatenate(rows) if rows else np.zeros(0, np.int64)
        c = np.concatenate(cols) if cols else np.zeros(0, np.int64)
        adjacency[name] = _aggregation_matrix(r, c, totals[tgt], totals[src], mean)
    pool, graph_of = {}, {}
    for t in NODE_TYPES:
        gid = np.repeat(np.arange(len(graphs)), counts[t])
        graph_of[t] = gid
        cnt = np.asarray(counts[t], float)
        w = np.divide(1.0, cnt, out=np.zeros_like(cnt), where=cnt > 0)[gid]
        pool[t] = sp.csr_matrix((w, (gid, np.arange(totals[t]))), shape=(len(graphs), totals[t]))
    labels = None
    if all(g.label is not None for g in graphs):
        labels = np.array([g.label for g in graphs], dtype=np.int64)
    return Batch(x, adjacency, pool, len(graphs), labels, graph_of)


# ------------------------------------------------------------------ model


class HeteroGNN:
    """Parameters, batch-norm buffers and the forward computation."""

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        self.cfg = cfg or ModelConfig()
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(seed)
        h = self.cfg.hidden_dim
        for block in ("pre", "post"):
            for t in NODE_TYPES:
                d_in = self.cfg.input_dim(t) if block == "pre" else h
                for i in range(2):
                    self._linear(rng, f"{block}.{t}.{i}", d_in if i == 0 else h, h)
                    self._batch_norm(f"{block}.{t}.{i}.bn", h)
        for k in range(self.cfg.num_layers):
            for name, *_ in CHANNELS:
                self._linear(rng, f"mp.{k}.{name}", 2 * h, h)
        self._linear(rng, "head.0", len(NODE_TYPES) * h, h)
        self._linear(rng, "head.1", h, len(CLASSES))
        n = self.num_parameters()
        if n > MAX_PARAMETERS:
            raise ValueError(f"model has {n} parameters, budget is {MAX_PARAMETERS}")

    def _linear(self, rng, name, d_in, d_out):
        bound = 1.0 / np.sqrt(d_in)
        self.params[f"{name}.weight"] = Tensor(rng.uniform(-bound, bound, (d_out, d_in)), True)
        self.params[f"{name}.bias"] = Tensor(np.zeros(d_out), True)

    def _batch_norm(self, name, d):
        self.params[f"{name}.gamma"] = Tensor(np.ones(d), True)
        self.params[f"{name}.beta"] = Tensor(np.zeros(d), True)
        self.buffers[f"{name}.mean"] = np.zeros(d)
        self.buffers[f"{name}.var"] = np.ones(d)

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    # -------------------------------------------------------------- pieces

    def _apply_linear(self, name, x):
        return ad.linear(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def _apply_bn(self, name, x, train):
        gamma, beta = self.params[f"{name}.gamma"], self.params[f"{name}.beta"]
        rm, rv = self.buffers[f"{name}.mean"], self.buffers[f"{name}.var"]
        n = x.shape[0]
        if not train or n < 2:
            out, _, _ = ad.batch_norm(x, gamma, beta, rm, rv, self.cfg.bn_eps)
            return out
        out, mu, var = ad.batch_norm(x, gamma, beta, eps=self.cfg.bn_eps)
        m = self.cfg.bn_momentum
        self.buffers[f"{name}.mean"] = (1 - m) * rm + m * mu
        self.buffers[f"{name}.var"] = (1 - m) * rv + m * var * n / (n - 1)
        return out

    def _mlp(self, block, t, x, train):
        for i in range(2):
            x = ad.relu(self._apply_bn(f"{block}.{t}.{i}.bn", self._apply_linear(f"{block}.{t}.{i}", x), train))
        return x

    def message_pass(self, batch: Batch, h: dict, layer: int) -> dict:
        """One heterogeneous layer over the channels of the kept relations."""
        out = {}
        for t in NODE_TYPES:
            if h[t].shape[0] == 0:
                out[t] = h[t]
                continue
            parts = []
            for name, tgt, src, rel in CHANNELS:
                if tgt != t or name not in batch.adjacency:
                    continue
                w, b = self.params[f"mp.{layer}.{name}.weight"], self.params[f"mp.{layer}.{name}.bias"]
                parts.append(ad.channel_relu(h[t], h[src], batch.adjacency[name], w, b))
            if not parts:
                out[t] = h[t]
                continue
            acc = parts[0]
            for p in parts[1:]:
                acc = ad.add(acc, p)
            if self.cfg.relation_aggregator == "mean" and len(parts) > 1:
                acc = ad.mul(acc, 1.0 / len(parts))
            out[t] = acc
        return out

    def forward(self, batch: Batch, train: bool = False, rng: np.random.Generator | None = None,
                inputs: dict | None = None) -> Tensor:
        """Logits (num_graphs, 3). ``inputs`` maps node type to a Tensor to differentiate against."""
        hdim = self.cfg.hidden_dim
        h = {}
        for t in NODE_TYPES:
            x = inputs[t] if inputs is not None and t in inputs else Tensor(batch.x[t])
            if x.shape[1] != self.cfg.input_dim(t):
                raise ValueError(f"{t} input has {x.shape[1]} columns, model expects {self.cfg.input_dim(t)}")
            h[t] = self._mlp("pre", t, x, train) if x.shape[0] else Tensor(np.zeros((0, hdim)))
        for k in range(self.cfg.num_layers):
            h = self.message_pass(batch, h, k)
        pooled = []
        for t in NODE_TYPES:
            if h[t].shape[0]:
                h[t] = self._mlp("post", t, h[t], train)
            pooled.append(ad.spmm(batch.pool[t], h[t]))
        z = ad.relu(self._apply_linear("head.0", ad.concat(pooled, axis=1)))
        if train and self.cfg.dropout > 0:
            if rng is None:
                raise ValueError("training mode needs a random generator for dropout")
            keep = (rng.random(z.shape) >= self.cfg.dropout) / (1.0 - self.cfg.dropout)
            z = ad.mul(z, keep)
        return self._apply_linear("head.1", z)

    # -------------------------------------------------------------- inference

    def predict(self, graphs: list[HeteroGraph], batch_size: int = 64) -> list[Prediction]:
        out = []
        for i in range(0, len(graphs), batch_size):
            logits = self.forward(collate(graphs[i:i + batch_size], self.cfg)).data
            if not np.all(np.isfinite(logits)):
                raise NumericError("non-finite logits")
            probs = ad.softmax(logits)
            out += [Prediction(l, p, int(np.argmax(l))) for l, p in zip(logits, probs)]
        return out

    # -------------------------------------------------------------- state

    def state_dict(self) -> dict:
        return {
            "params": {k: v.data.tolist() for k, v in self.params.items()},
            "buffers": {k: v.tolist() for k, v in self.buffers.items()},
        }

    def load_state_dict(self, state: dict):
        for k, p in self.params.items():
            arr = np.asarray(state["params"][k], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"parameter {k} has shape {arr.shape}, expected {p.data.shape}")
            p.data = arr
        for k in self.buffers:
            self.buffers[k] = np.asarray(state["buffers"][k], dtype=np.float64)

    def copy_state(self) -> dict:
        return {"params": {k: v.data.copy() for k, v in self.params.items()},
                "buffers": {k: v.copy() for k, v in self.buffers.items()}}

    def restore_state(self, state: dict):
        for k, v in state["params"].items():
            self.params[k].data = v.copy()
        for k, v in state["buffers"].items():
            self.buffers[k] = v.copy()
