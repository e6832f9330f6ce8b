"""Classical OCTA biomarkers, per-graph feature aggregates and a logistic baseline classifier."""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import ica as ica_mod
from . import raster
from .hetero import CLASSES, FAZ, ICA, NODE_TYPES, VES, HeteroGraph, model_columns, model_feature_names
from .raster import IntensityGrid

BOX_SIZES = (2, 4, 8, 16, 32, 64)
FERET_DIRECTIONS = 180
QUANTILE_METHOD = "linear"


@dataclass
class BiomarkerRecord:
    faz_area: float
    faz_max_diameter: float
    faz_mean_diameter: float
    faz_acircularity: float
    vessel_density: float
    vessel_perimeter: float
    fractal_dimension: float
    warnings: list = field(default_factory=list)

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls) if f.name != "warnings"]

    def values(self) -> list[float]:
        return [getattr(self, n) for n in self.names()]


def feret_diameters(points: np.ndarray, directions: int = FERET_DIRECTIONS) -> tuple[float, float]:
    """(max, mean) caliper width of a point set over evenly spaced directions in [0, pi)."""
    pts = np.asarray(points, float).reshape(-1, 2)
    if len(pts) == 0:
        return 0.0, 0.0
    hull = raster.convex_hull(pts)
    theta = np.arange(directions) * np.pi / directions
    proj = hull @ np.stack([np.cos(theta), np.sin(theta)])
    widths = proj.max(axis=0) - proj.min(axis=0)
    return float(widths.max()), float(widths.mean())


def box_count_dimension(mask: np.ndarray, sizes=BOX_SIZES) -> float:
    """Least-squares slope of log N(s) against log(1/s); boxes anchored at the origin."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return 0.0
    h, w = mask.shape
    counts = []
    for s in sizes:
        ph, pw = -h % s, -w % s
        m = np.pad(mask, ((0, ph), (0, pw)))
        blocks = m.reshape(m.shape[0] // s, s, m.shape[1] // s, s).any(axis=(1, 3))
        counts.append(int(blocks.sum()))
    slope, _ = np.polyfit(np.log(1.0 / np.asarray(sizes, float)), np.log(counts), 1)
    return float(slope)


def _interface_edges(mask: np.ndarray) -> int:
    """Pixel edges between foreground and background inside the image."""
    return int(np.count_nonzero(mask[1:, :] != mask[:-1, :]) + np.count_nonzero(mask[:, 1:] != mask[:, :-1]))


def extract_biomarkers(seg: np.ndarray, img: IntensityGrid, faz_mask: np.ndarray | None = None,
                       skeleton: np.ndarray | None = None) -> BiomarkerRecord:
    from .vessels import centreline

    seg = np.asarray(seg, dtype=bool)
    if seg.shape != img.shape:
        raise ValueError("segmentation and image differ in shape")
    s = img.pixel_size_mm
    notes = []
    if faz_mask is None:
        labels = ica_mod.background_labels(seg)
        nodes = ica_mod.extract_ica_nodes(seg, img, labels)
        faz_mask = labels.labels == ica_mod.identify_faz(nodes, labels) + 1
    faz_mask = np.asarray(faz_mask, dtype=bool)
    area_px = int(faz_mask.sum())
    rows, cols = np.nonzero(faz_mask)
    pts = np.stack([cols, rows], axis=1).astype(float)
    if area_px < 4:
        notes.append(f"degenerate FAZ ({area_px} px): diameters taken from the raw mask")
        if len(pts):
            theta = np.arange(FERET_DIRECTIONS) * np.pi / FERET_DIRECTIONS
            proj = pts @ np.stack([np.cos(theta), np.sin(theta)])
            widths = proj.max(axis=0) - proj.min(axis=0)
            dmax, dmean = float(widths.max()), float(widths.mean())
        else:
            dmax = dmean = 0.0
    else:
        dmax, dmean = feret_diameters(pts)
    skel = centreline(seg) if skeleton is None else skeleton
    fd = box_count_dimension(skel)
    if not skel.any():
        notes.append("empty skeleton: fractal dimension set to 0")
    return BiomarkerRecord(
        faz_area=area_px * s * s,
        faz_max_diameter=dmax * s,
        faz_mean_diameter=dmean * s,
        faz_acircularity=ica_mod.acircularity(faz_mask) if area_px else float("nan"),
        vessel_density=float(seg.mean()),
        vessel_perimeter=_interface_edges(seg) * s,
        fractal_dimension=fd,
        warnings=notes,
    )


# ------------------------------------------------------------------ aggregates

AGGREGATES = ("median", "q90", "mean")


def aggregate_names(include_coordinates: bool = False) -> list[str]:
    names = []
    for t in (VES, ICA):
        names.append(f"{t}.present")
        for f in model_feature_names(t, include_coordinates):
            names += [f"{t}.{f}.{a}" for a in AGGREGATES]
    names += [f"faz.{f}" for f in model_feature_names(FAZ, include_coordinates)]
    return names


def aggregate_embeddings(graph: HeteroGraph, include_coordinates: bool = False) -> np.ndarray:
    """Fixed-length vector: per-type median / q90 / mean of raw features plus the FAZ vector."""
    parts = []
    for t in (VES, ICA):
        x = graph.nodes[t].raw[:, model_columns(t, include_coordinates)]
        if len(x) == 0:
            parts.append(np.zeros(1 + 3 * x.shape[1]))
            continue
        stats = np.stack([np.median(x, axis=0), np.quantile(x, 0.9, axis=0, method=QUANTILE_METHOD),
                          x.mean(axis=0)], axis=1)
        parts.append(np.concatenate([[1.0], stats.ravel()]))
    faz = graph.nodes[FAZ].raw[:, model_columns(FAZ, include_coordinates)]
    parts.append(faz[0] if len(faz) else np.zeros(faz.shape[1]))
    return np.concatenate(parts)


# ------------------------------------------------------------------ logistic baseline


@dataclass
class LogisticModel:
    weight: np.ndarray   # (classes, features)
    bias: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    def logits(self, x: np.ndarray) -> np.ndarray:
        z = (np.asarray(x, float) - self.mean) / self.std
        return z @ self.weight.T + self.bias

    def predict(self, x: np.ndarray):
        from .gnn import Prediction

        out = []
        for row in np.atleast_2d(self.logits(x)):
            out.append(Prediction(row, ad.softmax(row[None])[0], int(np.argmax(row))))
        return out

    def to_dict(self) -> dict:
        return {k: v.tolist() for k, v in asdict(self).items()}


def logistic_loss(weight, bias, z, y, l2: float):
    w = ad.Tensor(weight, True) if not isinstance(weight, ad.Tensor) else weight
    b = ad.Tensor(bias, True) if not isinstance(bias, ad.Tensor) else bias
    loss = ad.cross_entropy(ad.linear(z, w, b), y)
    return ad.add(loss, ad.mul(ad.total(ad.mul(w, w)), 0.5 * l2)), w, b


def train_logistic(x, y, l2: float = 1e-3, learning_rate: float = 0.5, iterations: int = 500,
                   num_classes: int = len(CLASSES)) -> LogisticModel:
    """Multinomial logistic regression by full-batch gradient descent on standardised inputs."""
    x = np.asarray(x, float)
    y = np.asarray(y, np.int64)
    if len(np.unique(y)) < 2:
        raise ValueError("logistic baseline needs at least two classes")
    mean = x.mean(axis=0)
    std = np.maximum(x.std(axis=0), 1e-6)
    z = (x - mean) / std
    weight = np.zeros((num_classes, x.shape[1]))
    bias = np.zeros(num_classes)
    for _ in range(iterations):
        loss, w, b = logistic_loss(weight, bias, z, y, l2)
        loss.backward()
        weight = weight - learning_rate * w.grad
        bias = bias - learning_rate * b.grad
    return LogisticModel(weight, bias, mean, std)


# ------------------------------------------------------------------ CSV


def _check_names(names):
    for n in names:
        if any(ch in n for ch in ',"\r\n'):
            raise ValueError(f"field name {n!r} contains a delimiter or quote")


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".9g")


def csv_text(names: list[str], rows: list[dict], key: str = "sample_id") -> str:
    """RFC 4180 CSV with rows ordered by ``key``; floats at 9 significant digits."""
    _check_names(names)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(names)
    for row in sorted(rows, key=lambda r: str(r.get(key, ""))):
        writer.writerow([_fmt(row.get(n)) for n in names])
    return buf.getvalue()


def export_csv(names: list[str], rows: list[dict], path, key: str = "sample_id") -> None:
    from .io_utils import atomic_write_text

    atomic_write_text(path, csv_text(names, rows, key))


def read_csv(path) -> tuple[list[str], list[dict]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        names = next(reader)
        rows = []
        for rec in reader:
            row = {}
            for n, v in zip(names, rec):
                try:
                    row[n] = float(v) if v != "" else float("nan")
                except ValueError:
                    row[n] = v
            rows.append(row)
    return names, rows


# ------------------------------------------------------------------ distribution report

# (label, node type, feature, statistic)
DISTRIBUTION_STATISTICS = (
    ("vessel_tortuosity_q90", VES, "tortuosity", "q90"),
    ("vessel_area_q90", VES, "area", "q90"),
    ("vessel_radius_variability_q90", VES, "radius_variability", "q90"),
    ("ica_area_median", ICA, "area", "median"),
    ("ica_area_q90", ICA, "area", "q90"),
    ("ica_major_axis_median", ICA, "major_axis", "median"),
    ("faz_solidity", FAZ, "solidity", "value"),
    ("faz_area", FAZ, "area", "value"),
    ("faz_minor_axis", FAZ, "minor_axis", "value"),
)
SUMMARY_KEYS = ("min", "q25", "median", "q75", "max", "mean")


def graph_statistics(graph: HeteroGraph) -> dict:
    from .hetero import FEATURE_NAMES

    out = {}
    for label, t, feat, stat in DISTRIBUTION_STATISTICS:
        col = graph.nodes[t].raw[:, FEATURE_NAMES[t].index(feat)]
        if len(col) == 0:
            out[label] = float("nan")
        elif stat == "value":
            out[label] = float(col[0])
        elif stat == "median":
            out[label] = float(np.median(col))
        else:
            out[label] = float(np.quantile(col, 0.9, method=QUANTILE_METHOD))
    return out


def summarize(values) -> dict:
    v = np.asarray([x for x in values if not math.isnan(x)], float)
    if len(v) == 0:
        return {k: None for k in SUMMARY_KEYS}
    q = np.quantile(v, [0.0, 0.25, 0.5, 0.75, 1.0], method=QUANTILE_METHOD)
    return dict(zip(SUMMARY_KEYS, [float(x) for x in q] + [float(v.mean())]))


def distribution_rows(graphs: list[HeteroGraph], sample_ids=None) -> list[dict]:
    rows = []
    for i, g in enumerate(graphs):
        if g.label is None:
            raise ValueError("distribution report needs labelled graphs")
        sid = sample_ids[i] if sample_ids is not None else g.meta.get("source") or f"graph{i:05d}"
        rows.append({"sample_id": sid, "label": CLASSES[g.label], **graph_statistics(g)})
    return rows


def summaries_from_rows(rows: list[dict]) -> dict:
    report = {"quantile_method": QUANTILE_METHOD, "classes": {}, "warnings": []}
    for c in CLASSES:
        members = [r for r in rows if r["label"] == c]
        if not members:
            report["warnings"].append(f"no graphs of class {c}; omitted")
            continue
        report["classes"][c] = {
            "n": len(members),
            "statistics": {label: summarize([r[label] for r in members]) for label, *_ in DISTRIBUTION_STATISTICS},
        }
    return report


def feature_distribution_report(graphs: list[HeteroGraph], sample_ids=None) -> tuple[dict, list[dict]]:
    """Per-class summaries of the per-graph statistics, plus the per-graph rows they come from."""
    rows = distribution_rows(graphs, sample_ids)
    report = summaries_from_rows(rows)
    for w in report["warnings"]:
        warnings.warn(w)
    return report, rows


def distribution_csv_names() -> list[str]:
    return ["sample_id", "label"] + [label for label, *_ in DISTRIBUTION_STATISTICS]
