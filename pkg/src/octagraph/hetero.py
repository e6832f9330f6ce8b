"""Heterogeneous graph assembly, Z-score normalisation and the JSON graph format.

Node types are ``vessel``, ``ica`` and ``faz``; the five relations are stored
once per undirected pair, with the first index on the first-named type.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import ica as ica_mod
from . import raster
from .errors import DegenerateInputError, GraphFormatError
from .raster import IntensityGrid
from .vessels import BRANCH, VESSEL_FEATURES, VESSEL_POSITION, build_vessel_graph

FORMAT_VERSION = 1

VES, ICA, FAZ = "vessel", "ica", "faz"
NODE_TYPES = (VES, ICA, FAZ)
RELATIONS = ("VES_VES", "ICA_ICA", "VES_ICA", "FAZ_VES", "FAZ_ICA")
RELATION_TYPES = {
    "VES_VES": (VES, VES),
    "ICA_ICA": (ICA, ICA),
    "VES_ICA": (VES, ICA),
    "FAZ_VES": (FAZ, VES),
    "FAZ_ICA": (FAZ, ICA),
}
CLASSES = ("Healthy", "NPDR", "PDR")

FEATURE_NAMES = {VES: VESSEL_FEATURES, ICA: ica_mod.ICA_FEATURES, FAZ: ica_mod.FAZ_FEATURES}
POSITION_NAMES = {VES: VESSEL_POSITION, ICA: ica_mod.AREA_POSITION, FAZ: ica_mod.AREA_POSITION}
COORDINATE_NAMES = {
    VES: ("mid_x", "mid_y", "end_a_x", "end_a_y", "end_b_x", "end_b_y"),
    ICA: ("centroid_x", "centroid_y"),
    FAZ: ("centroid_x", "centroid_y"),
}

STD_FLOOR = 1e-6


def model_columns(node_type: str, include_coordinates: bool = False) -> list[int]:
    """Indices of the raw feature columns fed to the model."""
    names = FEATURE_NAMES[node_type]
    skip = () if include_coordinates else COORDINATE_NAMES[node_type]
    return [i for i, n in enumerate(names) if n not in skip]


def model_feature_names(node_type: str, include_coordinates: bool = False) -> list[str]:
    names = FEATURE_NAMES[node_type]
    return [names[i] for i in model_columns(node_type, include_coordinates)]


def class_index(label) -> int | None:
    if label is None:
        return None
    if isinstance(label, (int, np.integer)):
        if not 0 <= label < len(CLASSES):
            raise ValueError(f"class index {label} out of range")
        return int(label)
    try:
        return CLASSES.index(label)
    except ValueError:
        raise ValueError(f"unknown class label {label!r}") from None


# ------------------------------------------------------------------ run-length masks


def run_lengths(label_grid: np.ndarray, num_labels: int) -> list[np.ndarray]:
    """Row runs ``[row, start_col, length]`` for labels 1..num_labels, lexicographically sorted."""
    h, w = label_grid.shape
    flat = label_grid.ravel()
    col = np.tile(np.arange(w), h)
    start = (col == 0) | (np.r_[-1, flat[:-1]] != flat)
    starts = np.flatnonzero(start)
    lengths = np.diff(np.r_[starts, flat.size])
    labs = flat[starts]
    keep = labs > 0
    starts, lengths, labs = starts[keep], lengths[keep], labs[keep]
    runs = np.stack([starts // w, starts % w, lengths], axis=1).astype(np.int64)
    order = np.argsort(labs, kind="stable")
    labs, runs = labs[order], runs[order]
    bounds = np.searchsorted(labs, np.arange(1, num_labels + 2))
    return [runs[bounds[k]:bounds[k + 1]] for k in range(num_labels)]


def rle_pixels(rle: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Expand runs to (rows, cols) index arrays."""
    rle = np.asarray(rle, dtype=np.int64).reshape(-1, 3)
    if len(rle) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    lengths = rle[:, 2]
    rows = np.repeat(rle[:, 0], lengths)
    offsets = np.arange(lengths.sum()) - np.repeat(np.cumsum(lengths) - lengths, lengths)
    cols = np.repeat(rle[:, 1], lengths) + offsets
    return rows, cols


def paint_masks(masks: list[np.ndarray], shape) -> np.ndarray:
    """Label raster with node index + 1 (later nodes overwrite earlier ones)."""
    out = np.zeros(shape, dtype=np.int32)
    for i, m in enumerate(masks):
        r, c = rle_pixels(m)
        out[r, c] = i + 1
    return out


# ------------------------------------------------------------------ graph type


@dataclass(eq=False)
class NodeSet:
    raw: np.ndarray
    masks: list[np.ndarray]
    norm: np.ndarray | None = None

    def __len__(self) -> int:
        return self.raw.shape[0]


@dataclass(eq=False)
class HeteroGraph:
    nodes: dict[str, NodeSet]
    edges: dict[str, np.ndarray]
    label: int | None = None
    meta: dict = field(default_factory=dict)

    def num_nodes(self, node_type: str) -> int:
        return len(self.nodes[node_type])

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.meta["shape"])

    def positions(self, node_type: str) -> np.ndarray:
        names = FEATURE_NAMES[node_type]
        cols = [names.index(n) for n in POSITION_NAMES[node_type]]
        return self.nodes[node_type].raw[:, cols]

    def features(self, node_type: str, include_coordinates: bool = False, normalized: bool = True) -> np.ndarray:
        ns = self.nodes[node_type]
        src = ns.norm if normalized else ns.raw
        if src is None:
            raise ValueError("graph has not been normalised")
        return src[:, model_columns(node_type, include_coordinates)]

    def __eq__(self, other) -> bool:
        if not isinstance(other, HeteroGraph):
            return NotImplemented
        if self.label != other.label or self.meta != other.meta:
            return False
        for t in NODE_TYPES:
            a, b = self.nodes[t], other.nodes[t]
            if not np.array_equal(a.raw, b.raw) or len(a.masks) != len(b.masks):
                return False
            if any(not np.array_equal(x, y) for x, y in zip(a.masks, b.masks)):
                return False
            if (a.norm is None) != (b.norm is None) or (a.norm is not None and not np.array_equal(a.norm, b.norm)):
                return False
        return all(np.array_equal(self.edges[r], other.edges[r]) for r in RELATIONS)

    __hash__ = None


def _edge_array(pairs) -> np.ndarray:
    arr = np.asarray(sorted(set(map(tuple, pairs))), dtype=np.int64).reshape(-1, 2)
    return arr


def _adjacent_pairs(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Unique (a_label, b_label) pairs over 8-adjacent pixel pairs, labels > 0."""
    h, w = a.shape
    pb = np.pad(b, 1)
    found = []
    rows, cols = np.nonzero(a)
    la = a[rows, cols]
    for dr, dc in raster.RING:
        lb = pb[rows + 1 + dr, cols + 1 + dc]
        keep = lb > 0
        found.append(np.stack([la[keep], lb[keep]], axis=1))
    if not found:
        return np.zeros((0, 2), np.int64)
    allp = np.concatenate(found)
    return np.unique(allp, axis=0) if len(allp) else allp.reshape(0, 2)


def assemble(seg: np.ndarray, img: IntensityGrid, label=None, source_id: str = "") -> HeteroGraph:
    """Build the vessel/ICA/FAZ graph of one segmentation map."""
    seg = np.asarray(seg, dtype=bool)
    if seg.shape != img.shape:
        raise ValueError("segmentation and image differ in shape")
    bg = ica_mod.background_labels(seg)
    if bg.num_labels == 0:
        raise DegenerateInputError("segmentation has no background component")
    vg = build_vessel_graph(seg, img)
    icas = ica_mod.extract_ica_nodes(seg, img, bg)
    ica_edges = ica_mod.skeleton_adjacency_edges(seg, vg.skeleton, bg)
    faz_id = ica_mod.identify_faz(icas, bg)
    faz_node = icas[faz_id]
    faz_node.acircularity = ica_mod.acircularity(bg.labels == faz_id + 1)

    remap = np.full(len(icas), -1, dtype=np.int64)
    others = [n for n in icas if n.id != faz_id]
    remap[[n.id for n in others]] = np.arange(len(others))

    ica_ica, faz_ica = [], []
    for u, v in ica_edges:
        if u == faz_id or v == faz_id:
            faz_ica.append((0, int(remap[v if u == faz_id else u])))
        else:
            ica_ica.append(tuple(sorted((int(remap[u]), int(remap[v])))))
    ves_ica, faz_ves = [], []
    # junction pixels are shared by every segment meeting there, so they do not
    # put a segment on an area's border
    border_owner = np.where(vg.classification.kind == BRANCH, 0, vg.owner)
    for v, a in _adjacent_pairs(border_owner, bg.labels).tolist():
        if a - 1 == faz_id:
            faz_ves.append((0, v - 1))
        else:
            ves_ica.append((v - 1, int(remap[a - 1])))

    ves_masks = run_lengths(vg.owner, len(vg.segments))
    bg_masks = run_lengths(bg.labels, bg.num_labels)
    n_ves = len(vg.segments)
    ves_raw = np.array([s.features.as_vector() for s in vg.segments]).reshape(n_ves, len(VESSEL_FEATURES))
    ica_raw = np.array([n.as_vector() for n in others]).reshape(len(others), len(ica_mod.ICA_FEATURES))
    nodes = {
        VES: NodeSet(ves_raw, ves_masks),
        ICA: NodeSet(ica_raw, [bg_masks[n.id] for n in others]),
        FAZ: NodeSet(faz_node.as_vector(faz=True).reshape(1, -1), [bg_masks[faz_id]]),
    }
    edges = {
        "VES_VES": _edge_array(vg.edges),
        "ICA_ICA": _edge_array(ica_ica),
        "VES_ICA": _edge_array(ves_ica),
        "FAZ_VES": _edge_array(faz_ves),
        "FAZ_ICA": _edge_array(faz_ica),
    }
    meta = {
        "source": source_id,
        "pixel_size_mm": float(img.pixel_size_mm),
        "shape": [int(seg.shape[0]), int(seg.shape[1])],
    }
    return HeteroGraph(nodes, edges, class_index(label), meta)


# ------------------------------------------------------------------ normalisation


@dataclass
class NormStats:
    mean: dict[str, np.ndarray]
    std: dict[str, np.ndarray]

    def to_dict(self) -> dict:
        return {t: {"mean": self.mean[t].tolist(), "std": self.std[t].tolist()} for t in NODE_TYPES}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls({t: np.asarray(d[t]["mean"], float) for t in NODE_TYPES},
                   {t: np.asarray(d[t]["std"], float) for t in NODE_TYPES})


def fit_norm_stats(graphs: list[HeteroGraph]) -> NormStats:
    """Pooled per-type feature mean and population std (floored at 1e-6)."""
    if not graphs:
        raise ValueError("need at least one training graph")
    mean, std = {}, {}
    for t in NODE_TYPES:
        d = len(FEATURE_NAMES[t])
        stack = np.concatenate([g.nodes[t].raw.reshape(-1, d) for g in graphs])
        if len(stack) == 0:
            mean[t], std[t] = np.zeros(d), np.ones(d)
            continue
        mean[t] = stack.mean(axis=0)
        std[t] = np.maximum(stack.std(axis=0), STD_FLOOR)
    return NormStats(mean, std)


def normalize(graph: HeteroGraph, stats: NormStats) -> HeteroGraph:
    nodes = {}
    for t in NODE_TYPES:
        ns = graph.nodes[t]
        if ns.raw.shape[1] != stats.mean[t].shape[0]:
            raise ValueError(f"{t} features have {ns.raw.shape[1]} columns, stats expect {stats.mean[t].shape[0]}")
        nodes[t] = replace(ns, norm=(ns.raw - stats.mean[t]) / stats.std[t])
    return replace(graph, nodes=nodes)


# ------------------------------------------------------------------ ablation views


def mask_relations(graph: HeteroGraph, keep) -> HeteroGraph:
    """Model view restricted to ``keep``; node types left without relations are emptied."""
    keep = set(keep)
    if not keep:
        raise ValueError("keep at least one relation")
    unknown = keep - set(RELATIONS)
    if unknown:
        raise ValueError(f"unknown relations {sorted(unknown)}")
    if keep == set(RELATIONS):
        return graph
    active = {t for r in keep for t in RELATION_TYPES[r]}
    nodes = {}
    for t in NODE_TYPES:
        ns = graph.nodes[t]
        if t in active:
            nodes[t] = ns
        else:
            d = ns.raw.shape[1]
            nodes[t] = NodeSet(np.zeros((0, d)), [], None if ns.norm is None else np.zeros((0, d)))
    edges = {r: graph.edges[r] if r in keep else np.zeros((0, 2), np.int64) for r in RELATIONS}
    meta = dict(graph.meta, relations=sorted(keep, key=RELATIONS.index))
    return replace(graph, nodes=nodes, edges=edges, meta=meta)


ABLATIONS = {
    "heterogeneous": RELATIONS,
    "vessel": ("VES_VES",),
    "ica": ("ICA_ICA", "FAZ_ICA"),
}


# ------------------------------------------------------------------ serialisation


def _node_records(ns: NodeSet) -> list[dict]:
    return [
        {"features": [float(v) for v in row], "mask": m.tolist()}
        for row, m in zip(ns.raw, ns.masks)
    ]


def to_dict(graph: HeteroGraph) -> dict:
    faz = graph.nodes[FAZ]
    meta = dict(graph.meta)
    meta["features"] = {t: list(FEATURE_NAMES[t]) for t in NODE_TYPES}
    return {
        "version": FORMAT_VERSION,
        "meta": meta,
        "vessel_nodes": _node_records(graph.nodes[VES]),
        "ica_nodes": _node_records(graph.nodes[ICA]),
        "faz": _node_records(faz)[0] if len(faz) else None,
        "edges": {r: graph.edges[r].tolist() for r in RELATIONS},
        "label": None if graph.label is None else CLASSES[graph.label],
    }


def serialize(graph: HeteroGraph) -> bytes:
    return json.dumps(to_dict(graph), separators=(",", ":")).encode("utf-8")


def _nodes_from(records, node_type) -> NodeSet:
    d = len(FEATURE_NAMES[node_type])
    raw = np.array([r["features"] for r in records], dtype=np.float64).reshape(len(records), d)
    masks = [np.asarray(r["mask"], dtype=np.int64).reshape(-1, 3) for r in records]
    return NodeSet(raw, masks)


def from_dict(payload: dict) -> HeteroGraph:
    if not isinstance(payload, dict) or payload.get("version") != FORMAT_VERSION:
        raise GraphFormatError(f"unsupported graph version {payload.get('version') if isinstance(payload, dict) else None!r}")
    try:
        meta = dict(payload["meta"])
        names = meta.pop("features")
        for t in NODE_TYPES:
            if tuple(names[t]) != FEATURE_NAMES[t]:
                raise GraphFormatError(f"feature manifest for {t} does not match this version")
        faz = payload["faz"]
        nodes = {
            VES: _nodes_from(payload["vessel_nodes"], VES),
            ICA: _nodes_from(payload["ica_nodes"], ICA),
            FAZ: _nodes_from([faz] if faz is not None else [], FAZ),
        }
        edges = {r: np.asarray(payload["edges"][r], dtype=np.int64).reshape(-1, 2) for r in RELATIONS}
        label = class_index(payload["label"])
    except GraphFormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise GraphFormatError(f"malformed graph payload: {exc}") from exc
    graph = HeteroGraph(nodes, edges, label, meta)
    validate(graph)
    return graph


def deserialize(data: bytes) -> HeteroGraph:
    try:
        payload = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise GraphFormatError(f"graph payload is not valid JSON: {exc}") from exc
    return from_dict(payload)


def save_graph(graph: HeteroGraph, path) -> None:
    from .io_utils import atomic_write_bytes

    atomic_write_bytes(path, serialize(graph))


def load_graph(path) -> HeteroGraph:
    with open(path, "rb") as fh:
        return deserialize(fh.read())


def validate(graph: HeteroGraph) -> None:
    """Check index ranges, relation typing and finiteness; raise GraphFormatError."""
    for r in RELATIONS:
        e = graph.edges[r]
        a, b = RELATION_TYPES[r]
        if len(e) == 0:
            continue
        if e.min() < 0 or e[:, 0].max() >= graph.num_nodes(a) or e[:, 1].max() >= graph.num_nodes(b):
            raise GraphFormatError(f"{r} edge index out of range")
        if a == b and np.any(e[:, 0] == e[:, 1]):
            raise GraphFormatError(f"{r} contains a self-loop")
    if graph.num_nodes(FAZ) > 1:
        raise GraphFormatError("graph has more than one FAZ node")
    for t in NODE_TYPES:
        if not np.all(np.isfinite(graph.nodes[t].raw)):
            raise GraphFormatError(f"{t} features contain NaN/Inf")
