"""Intercapillary areas (background components), their adjacency, and the FAZ."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import raster
from .errors import DegenerateInputError
from .raster import IntensityGrid, LabelGrid, RegionProps

ICA_FEATURES = (
    "area", "perimeter", "eccentricity", "major_axis", "minor_axis", "solidity",
    "mean_intensity", "std_intensity", "touches_border", "centroid_x", "centroid_y",
)
FAZ_FEATURES = ICA_FEATURES[:-2] + ("acircularity", "centroid_x", "centroid_y")
AREA_POSITION = ("centroid_x", "centroid_y")


@dataclass
class ICANode:
    """One background component. Lengths in mm, areas in mm^2, centroid in pixels."""

    id: int
    props: RegionProps
    touches_border: bool
    pixel_count: int
    acircularity: float | None = None

    def as_vector(self, faz: bool = False) -> np.ndarray:
        p = self.props
        head = [p.area, p.perimeter, p.eccentricity, p.major_axis_len, p.minor_axis_len,
                p.solidity, p.mean_intensity, p.std_intensity, float(self.touches_border)]
        if faz:
            head.append(self.acircularity)
        return np.array(head + list(p.centroid))


def background_labels(seg: np.ndarray) -> LabelGrid:
    return raster.connected_components(~np.asarray(seg, dtype=bool), 4)


def _scaled(p: RegionProps, s: float) -> RegionProps:
    return replace(p, area=p.area * s * s, perimeter=p.perimeter * s,
                   major_axis_len=p.major_axis_len * s, minor_axis_len=p.minor_axis_len * s)


def extract_ica_nodes(seg: np.ndarray, img: IntensityGrid, labels: LabelGrid | None = None) -> list[ICANode]:
    seg = np.asarray(seg, dtype=bool)
    if labels is None:
        labels = background_labels(seg)
    props = raster.all_region_properties(labels, img)
    lab = labels.labels
    frame = np.unique(np.concatenate([lab[0], lab[-1], lab[:, 0], lab[:, -1]]))
    on_frame = set(frame[frame > 0].tolist())
    s = img.pixel_size_mm
    return [
        ICANode(k - 1, _scaled(p, s), k in on_frame, int(p.area))
        for k, p in enumerate(props, start=1)
    ]


def skeleton_adjacency_edges(seg: np.ndarray, skel: np.ndarray | None = None,
                             labels: LabelGrid | None = None) -> list[tuple[int, int]]:
    """ICA pairs separated only by vessel, found by walking the skeleton.

    Background components of the segmentation are mapped into those of the
    skeletonised map; every skeleton pixel whose 8-neighbours see two distinct
    skeleton-background components links the corresponding ICAs (0-based ids).
    """
    seg = np.asarray(seg, dtype=bool)
    if skel is None:
        from .vessels import centreline

        skel = centreline(seg)
    if labels is None:
        labels = background_labels(seg)
    if labels.num_labels < 2 or not skel.any():
        return []
    skel_bg = raster.connected_components(~skel, 4)
    seg_lab = labels.labels

    bg = seg_lab > 0
    pairs = np.unique(np.stack([seg_lab[bg], skel_bg.labels[bg]], axis=1), axis=0)
    counts = np.bincount(pairs[:, 0], minlength=labels.num_labels + 1)
    if np.any(counts[1:] != 1):
        bad = int(np.flatnonzero(counts[1:] != 1)[0]) + 1
        raise AssertionError(f"background component {bad} spans several skeleton-background components")
    preimage: dict[int, list[int]] = {}
    for a, b in pairs.tolist():
        preimage.setdefault(b, []).append(a)

    rows, cols = np.nonzero(skel)
    padded = np.pad(skel_bg.labels, 1)
    nb = np.stack([padded[rows + 1 + dr, cols + 1 + dc] for dr, dc in raster.RING], axis=1)
    found = set()
    for i in range(8):
        for j in range(i + 1, 8):
            a, b = nb[:, i], nb[:, j]
            keep = (a > 0) & (b > 0) & (a != b)
            if keep.any():
                found.update(map(tuple, np.unique(np.stack([a[keep], b[keep]], axis=1), axis=0).tolist()))
    edges = set()
    for a, b in found:
        for u in preimage.get(a, ()):
            for v in preimage.get(b, ()):
                if u != v:
                    edges.add((min(u, v) - 1, max(u, v) - 1))
    return sorted(edges)


def identify_faz(nodes: list[ICANode], labels: LabelGrid, center: tuple[int, int] | None = None) -> int:
    """Id of the central ICA.

    ``center`` is (x, y) in pixels, defaulting to the image centre pixel. When
    that pixel is vessel, the ICA with the nearest centroid wins (ties: larger
    area, then lower id).
    """
    if not nodes:
        raise DegenerateInputError("no intercapillary areas to pick the FAZ from")
    h, w = labels.shape
    cx, cy = center if center is not None else (w // 2, h // 2)
    hit = int(labels.labels[cy, cx])
    if hit > 0:
        return hit - 1
    best = min(nodes, key=lambda n: (math.hypot(n.props.centroid[0] - cx, n.props.centroid[1] - cy),
                                      -n.pixel_count, n.id))
    return best.id


def acircularity(mask: np.ndarray) -> float:
    """Boundary length over the circumference of the equal-area circle (1 for a disc)."""
    area = np.count_nonzero(mask)
    if area == 0:
        return float("nan")
    return raster.contour_length(mask) / (2 * math.sqrt(math.pi * area))
