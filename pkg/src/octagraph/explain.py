"""Integrated-gradients attributions against a spatial nearest-neighbour baseline.

Each node's baseline is the mean normalised feature vector of the k training
nodes of the same type closest to it in image coordinates. Attributions are
``(x - x_bl) * mean_alpha dF/dx`` along the straight path, with F the logit of
the explained class, using the midpoint rule over ``steps`` points.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NumericError
from .gnn import HeteroGNN, collate
from .hetero import CLASSES, FAZ, ICA, NODE_TYPES, VES, HeteroGraph, NormStats, mask_relations, model_feature_names
from .hetero import normalize, paint_masks

DEFAULT_K = 25
DEFAULT_STEPS = 128
MIN_STEPS = 8


# ------------------------------------------------------------------ baseline index


class BaselineIndex:
    """Per-type search trees over training node positions with their normalised features."""

    def __init__(self, positions: dict, features: dict, k: int = DEFAULT_K, include_coordinates: bool = False):
        if k < 1:
            raise ValueError("k must be at least 1")
        self.k = k
        self.include_coordinates = include_coordinates
        self.positions = {t: np.asarray(p, float).reshape(-1, 2) for t, p in positions.items()}
        self.features = {t: np.asarray(f, float) for t, f in features.items()}
        self._trees = {t: cKDTree(p) for t, p in self.positions.items() if len(p)}

    def size(self, node_type: str) -> int:
        return len(self.positions.get(node_type, ()))

    def neighbours(self, node_type: str, point, k: int | None = None) -> np.ndarray:
        """Indices of the k nearest entries, ordered by (distance, insertion index)."""
        if node_type not in self._trees:
            raise ValueError(f"index holds no {node_type} nodes")
        k = min(k or self.k, self.size(node_type))
        pts = self.positions[node_type]
        point = np.asarray(point, float)
        dist, _ = self._trees[node_type].query(point, k=k)
        kth = float(np.atleast_1d(dist)[-1])
        # collect everything tied with the k-th distance, then order exactly
        cand = np.asarray(self._trees[node_type].query_ball_point(point, kth * (1 + 1e-9) + 1e-12), dtype=np.int64)
        d2 = ((pts[cand] - point) ** 2).sum(axis=1)
        order = np.lexsort((cand, d2))
        return cand[order[:k]]

    def baseline(self, node_type: str, point) -> np.ndarray:
        nearest = self.neighbours(node_type, point)
        return self.features[node_type][nearest].mean(axis=0)


def build_baseline_index(graphs: list[HeteroGraph], stats: NormStats, k: int = DEFAULT_K,
                         include_coordinates: bool = False) -> BaselineIndex:
    if not graphs:
        raise ValueError("baseline index needs at least one training graph")
    positions, features = {}, {}
    for t in NODE_TYPES:
        normed = [normalize(g, stats) if g.nodes[t].norm is None else g for g in graphs]
        positions[t] = np.concatenate([g.positions(t) for g in normed]).reshape(-1, 2)
        features[t] = np.concatenate([g.features(t, include_coordinates) for g in normed])
    return BaselineIndex(positions, features, k, include_coordinates)


_MAGIC = b"OGIDX1\n"


def save_index(index: BaselineIndex, path) -> None:
    """Binary index file: magic, JSON header length, JSON header, float64 blocks."""
    from .io_utils import atomic_write_bytes

    header = {"k": index.k, "include_coordinates": index.include_coordinates,
              "types": {t: [int(index.size(t)), int(index.features[t].shape[1])] for t in NODE_TYPES}}
    head = json.dumps(header, sort_keys=True).encode()
    blocks = b"".join(np.ascontiguousarray(index.positions[t], "<f8").tobytes()
                      + np.ascontiguousarray(index.features[t], "<f8").tobytes() for t in NODE_TYPES)
    atomic_write_bytes(path, _MAGIC + struct.pack("<Q", len(head)) + head + blocks)


def load_index(path) -> BaselineIndex:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(_MAGIC):
        raise ValueError("not a baseline index file")
    pos = len(_MAGIC)
    (n,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    header = json.loads(data[pos:pos + n])
    pos += n
    positions, features = {}, {}
    for t in NODE_TYPES:
        rows, d = header["types"][t]
        positions[t] = np.frombuffer(data, "<f8", rows * 2, pos).reshape(rows, 2).copy()
        pos += rows * 2 * 8
        features[t] = np.frombuffer(data, "<f8", rows * d, pos).reshape(rows, d).copy()
        pos += rows * d * 8
    if pos != len(data):
        raise ValueError("baseline index file has trailing or missing bytes")
    return BaselineIndex(positions, features, header["k"], header["include_coordinates"])


# ------------------------------------------------------------------ attribution


@dataclass
class Attribution:
    scores: dict            # node type -> (n, d) feature attributions
    baselines: dict         # node type -> (n, d)
    inputs: dict            # node type -> (n, d) explained (normalised) features
    target: int
    steps: int
    output_at_input: float
    output_at_baseline: float
    completeness_gap: float
    feature_names: dict = field(default_factory=dict)

    def importance(self, node_type: str) -> np.ndarray:
        return self.scores[node_type].sum(axis=1)

    @property
    def total(self) -> float:
        return float(sum(s.sum() for s in self.scores.values()))


def _first_bad_layer(model: HeteroGNN) -> str:
    for name, p in model.params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            return name.rsplit(".", 1)[0]
    return "input"


def _output_weights(logits: np.ndarray, target: int, output: str) -> np.ndarray:
    """dF/dlogits per row: one-hot for logits, p_t (e_t - p) for probabilities."""
    w = np.zeros_like(logits)
    if output == "logit":
        w[:, target] = 1.0
    else:
        p = ad.softmax(logits)
        w = -p * p[:, [target]]
        w[:, target] += p[:, target]
    return w


def _evaluate_output(model, graph, features, target, output):
    logits = model.forward(collate([graph], model.cfg, features)).data[0]
    return float(logits[target] if output == "logit" else ad.softmax(logits)[target])


def integrated_gradients(model: HeteroGNN, graph: HeteroGraph, index: BaselineIndex | None = None,
                         target: int | None = None, steps: int = DEFAULT_STEPS, output: str = "logit",
                         baselines: dict | None = None, chunk_nodes: int = 200_000) -> Attribution:
    """Feature attributions for one normalised graph.

    ``baselines`` may supply per-type baseline matrices directly; otherwise
    each node's baseline comes from ``index``.
    """
    if steps < MIN_STEPS:
        raise ValueError(f"need at least {MIN_STEPS} integration steps")
    if output not in ("logit", "probability"):
        raise ValueError("output must be 'logit' or 'probability'")
    cfg = model.cfg
    g = mask_relations(graph, cfg.relations)
    x = {t: g.features(t, cfg.include_coordinates) for t in NODE_TYPES}
    if baselines is None:
        if index is None:
            raise ValueError("need a baseline index or explicit baselines")
        if index.include_coordinates != cfg.include_coordinates:
            raise ValueError("index and model disagree on coordinate features")
        baselines = {}
        pos = {t: g.positions(t) for t in NODE_TYPES}
        for t in NODE_TYPES:
            rows = [index.baseline(t, p) for p in pos[t]]
            baselines[t] = np.array(rows).reshape(x[t].shape)
    bl = {t: np.asarray(baselines[t], float).reshape(x[t].shape) for t in NODE_TYPES}
    if target is None:
        target = int(np.argmax(model.forward(collate([g], cfg)).data[0]))
    if not 0 <= target < len(CLASSES):
        raise ValueError(f"target class {target} out of range")

    alphas = (np.arange(steps) + 0.5) / steps
    delta = {t: x[t] - bl[t] for t in NODE_TYPES}
    n_nodes = max(1, sum(len(v) for v in x.values()))
    per_chunk = max(1, min(steps, chunk_nodes // n_nodes))
    grad_sum = {t: np.zeros_like(x[t]) for t in NODE_TYPES}
    for start in range(0, steps, per_chunk):
        a = alphas[start:start + per_chunk]
        feats = {t: np.concatenate([bl[t] + ai * delta[t] for ai in a]).reshape(-1, x[t].shape[1])
                 for t in NODE_TYPES}
        inputs = {t: Tensor(feats[t], requires_grad=True) for t in NODE_TYPES}
        batch = collate([g] * len(a), cfg, feats)
        model.zero_grad()
        logits = model.forward(batch, inputs=inputs)
        weights = _output_weights(logits.data, target, output)
        ad.total(ad.mul(logits, weights)).backward()
        for t in NODE_TYPES:
            gr = inputs[t].grad
            if gr is None:
                continue
            if not np.all(np.isfinite(gr)):
                raise NumericError(f"non-finite gradient reaching {t} inputs (first bad layer: {_first_bad_layer(model)})")
            grad_sum[t] += gr.reshape(len(a), *x[t].shape).sum(axis=0)
    model.zero_grad()
    scores = {t: delta[t] * grad_sum[t] / steps for t in NODE_TYPES}
    f_x = _evaluate_output(model, g, x, target, output)
    f_bl = _evaluate_output(model, g, bl, target, output)
    total = sum(s.sum() for s in scores.values())
    names = {t: model_feature_names(t, cfg.include_coordinates) for t in NODE_TYPES}
    return Attribution(scores, bl, x, target, steps, f_x, f_bl, float(abs(total - (f_x - f_bl))), names)


# ------------------------------------------------------------------ reporting


def rank_nodes(attr: Attribution, top_n: int | None = None, node_type: str | None = None):
    """(node type, id, importance) by descending importance; ties by type order then id."""
    types = NODE_TYPES if node_type is None else (node_type,)
    rows = []
    for ti, t in enumerate(NODE_TYPES):
        if t not in types:
            continue
        for i, imp in enumerate(attr.importance(t)):
            rows.append((-float(imp), ti, i, t))
    rows.sort()
    out = [(t, i, -neg) for neg, _, i, t in rows]
    return out if top_n is None else out[:top_n]


def format_sd(value: float) -> str:
    return f"{value:+.1f} SD"


def top_features(attr: Attribution, node_type: str, node_id: int, j: int, raw: np.ndarray | None = None):
    """The j features with the largest |attribution| for one node (ties: column order)."""
    scores = attr.scores[node_type][node_id]
    order = sorted(range(len(scores)), key=lambda i: (-abs(scores[i]), i))[:j]
    names = attr.feature_names[node_type]
    out = []
    for i in order:
        z = float(attr.inputs[node_type][node_id, i])
        out.append({
            "name": names[i],
            "attribution": float(scores[i]),
            "sd_deviation": z,
            "sd_label": format_sd(z),
            "raw_value": None if raw is None else float(raw[i]),
        })
    return out


def explanation_report(attr: Attribution, graph: HeteroGraph, model: HeteroGNN, top_n: int = 10,
                       top_j: int = 3, prediction=None) -> dict:
    from .hetero import model_columns

    nodes = []
    for t, i, imp in rank_nodes(attr, top_n):
        raw = graph.nodes[t].raw[i, model_columns(t, model.cfg.include_coordinates)]
        nodes.append({"node_type": t, "id": int(i), "importance": float(imp),
                      "top_features": top_features(attr, t, i, top_j, raw)})
    report = {
        "source": graph.meta.get("source", ""),
        "target": CLASSES[attr.target],
        "steps": attr.steps,
        "output_at_input": attr.output_at_input,
        "output_at_baseline": attr.output_at_baseline,
        "attribution_total": attr.total,
        "completeness_gap": attr.completeness_gap,
        "nodes": nodes,
    }
    if prediction is not None:
        report["prediction"] = {"label": prediction.label,
                                "probabilities": dict(zip(CLASSES, map(float, prediction.probabilities)))}
    return report


# ------------------------------------------------------------------ overlays

OVERLAY_TYPES = {"vessel": (VES,), "ica_faz": (ICA, FAZ), "combined": (VES, ICA, FAZ)}


def overlay_alpha(graph: HeteroGraph, attr: Attribution, mode: str = "combined", negative: bool = False):
    """Signed per-pixel tint strength: positive importance in (0, 1], negative in [-1, 0)."""
    if mode not in OVERLAY_TYPES:
        raise ValueError(f"unknown overlay mode {mode!r}")
    shape = graph.shape
    types = OVERLAY_TYPES[mode]
    imps = {t: attr.importance(t) for t in types}
    pos_max = max([float(v.max()) for v in imps.values() if len(v)] + [0.0])
    neg_max = max([float(-v.min()) for v in imps.values() if len(v)] + [0.0])
    alpha = np.zeros(shape)
    for t in types:
        if len(imps[t]) == 0:
            continue
        if len(graph.nodes[t].masks) != len(imps[t]):
            raise ValueError(f"graph and attribution disagree on {t} node count")
        node_alpha = np.zeros(len(imps[t]))
        if pos_max > 0:
            node_alpha = np.where(imps[t] > 0, imps[t] / pos_max, 0.0)
        if negative and neg_max > 0:
            node_alpha = np.where(imps[t] < 0, imps[t] / neg_max, node_alpha)
        lab = paint_masks(graph.nodes[t].masks, shape)
        on = lab > 0
        alpha[on] = node_alpha[lab[on] - 1]
    return alpha


def render_overlay(graph: HeteroGraph, attr: Attribution, base, mode: str = "combined",
                   negative: bool = False) -> np.ndarray:
    """RGB uint8 raster: grayscale base with red (and optionally blue) tinted node masks."""
    values = base.values if hasattr(base, "values") else np.asarray(base, float)
    if values.shape != tuple(graph.shape):
        raise ValueError(f"image {values.shape} and graph {tuple(graph.shape)} differ in shape")
    alpha = overlay_alpha(graph, attr, mode, negative)
    gray = values * 255.0
    rgb = np.repeat(gray[..., None], 3, axis=2)
    a = np.abs(alpha)[..., None]
    red = np.array([255.0, 0.0, 0.0])
    blue = np.array([0.0, 0.0, 255.0])
    tint = np.where((alpha > 0)[..., None], red, blue)
    rgb = np.where(a > 0, (1 - a) * rgb + a * tint, rgb)
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def save_png(rgb: np.ndarray, path) -> None:
    import io

    from PIL import Image

    from .io_utils import atomic_write_bytes

    buf = io.BytesIO()
    Image.fromarray(rgb, mode="RGB").save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())
