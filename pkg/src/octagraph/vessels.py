"""Vessel graph: centreline segments between bifurcations and their geometric features."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import raster
from .raster import RING, IntensityGrid

NONE, ENDPOINT, SLAB, BRANCH = 0, 1, 2, 3

TORTUOSITY_CAP = 20.0

VESSEL_FEATURES = (
    "length", "avg_radius", "radius_variability", "area", "tortuosity",
    "mean_intensity", "std_intensity", "is_terminal",
    "mid_x", "mid_y", "end_a_x", "end_a_y", "end_b_x", "end_b_y",
)
VESSEL_POSITION = ("mid_x", "mid_y")


@dataclass(frozen=True, eq=False)
class SkeletonClassification:
    """Per-pixel class (NONE/ENDPOINT/SLAB/BRANCH) and 8-connected branch clusters.

    An isolated skeleton pixel (no neighbours) is classed as ENDPOINT.
    """

    kind: np.ndarray
    cluster: np.ndarray
    num_clusters: int


@dataclass
class VesselFeatures:
    length: float
    avg_radius: float
    radius_variability: float
    area: float
    tortuosity: float
    mean_intensity: float
    std_intensity: float
    midpoint: tuple[float, float]
    endpoint_a: tuple[float, float]
    endpoint_b: tuple[float, float]
    is_terminal: bool

    def as_vector(self) -> np.ndarray:
        return np.array([
            self.length, self.avg_radius, self.radius_variability, self.area, self.tortuosity,
            self.mean_intensity, self.std_intensity, float(self.is_terminal),
            *self.midpoint, *self.endpoint_a, *self.endpoint_b,
        ])


@dataclass
class VesselSegment:
    id: int
    path: np.ndarray  # (n, 2) of (row, col)
    features: VesselFeatures
    closed: bool = False


@dataclass
class VesselGraph:
    segments: list[VesselSegment]
    edges: list[tuple[int, int]]
    skeleton: np.ndarray
    owner: np.ndarray  # segment id + 1 per pixel, 0 where unowned
    classification: SkeletonClassification | None = field(default=None, repr=False)


def centreline(seg: np.ndarray) -> np.ndarray:
    """Skeleton of ``seg`` with vessels crossing the frame kept running to the frame.

    Plain thinning erodes a vessel's cut end at the image border, which would
    open a gap between the areas it separates. The border is replicated
    outward before thinning and the result cropped back.
    """
    seg = np.asarray(seg, dtype=bool)
    if not seg.any():
        return np.zeros_like(seg)
    margin = int(math.ceil(raster.distance_transform(seg).max())) + 2
    h, w = seg.shape
    skel = raster.skeletonize(np.pad(seg, margin, mode="edge"))[margin:margin + h, margin:margin + w]
    # a short stub on the border can thin away entirely into the margin
    comp = raster.connected_components(seg, 8)
    covered = np.zeros(comp.num_labels + 1, bool)
    covered[comp.labels[skel]] = True
    missing = ~covered[comp.labels] & seg
    if missing.any():
        skel |= raster.skeletonize(missing)
    return skel


def classify_skeleton(skel: np.ndarray) -> SkeletonClassification:
    skel = np.asarray(skel, dtype=bool)
    count = raster.neighbour_count(skel)
    kind = np.zeros(skel.shape, dtype=np.int8)
    kind[skel & (count <= 1)] = ENDPOINT
    kind[skel & (count == 2)] = SLAB
    kind[skel & (count >= 3)] = BRANCH
    clusters = raster.connected_components(kind == BRANCH, 8)
    return SkeletonClassification(kind, clusters.labels, clusters.num_labels)


def _neighbours(pixels: set, p):
    r, c = p
    return [(r + dr, c + dc) for dr, dc in RING if (r + dr, c + dc) in pixels]


def trace_segments(skel: np.ndarray, cls: SkeletonClassification):
    """Split the skeleton into centreline paths.

    Returns ``(paths, edges, closed, terminal)``: paths as lists of (row, col),
    adjacency pairs ``(i, j)`` with ``i < j`` for segments meeting at a branch
    cluster, a closed-cycle flag and a touches-an-endpoint flag per path.
    """
    skel = np.asarray(skel, dtype=bool)
    pixels = set(map(tuple, np.argwhere(skel).tolist()))
    kind = cls.kind
    visited: set = set()
    raw: list[list] = []

    def walk(prev, cur, path):
        while True:
            k = kind[cur]
            if k == BRANCH:
                path.append(cur)
                return path
            path.append(cur)
            visited.add(cur)
            nxt = [q for q in _neighbours(pixels, cur) if q != prev]
            if k == ENDPOINT and (prev is not None or not nxt):
                return path
            if k == ENDPOINT:
                nxt = nxt[:1]
            step = None
            for q in nxt:
                if kind[q] == BRANCH or q not in visited:
                    step = q
                    break
            if step is None:
                return path
            prev, cur = cur, step

    ordered = sorted(pixels)
    for p in ordered:
        if kind[p] != BRANCH:
            continue
        for q in _neighbours(pixels, p):
            if kind[q] != BRANCH and q not in visited:
                raw.append((walk(p, q, [p]), False))
    for p in ordered:
        if kind[p] == ENDPOINT and p not in visited:
            raw.append((walk(None, p, []), False))
    for p in ordered:
        if kind[p] == SLAB and p not in visited:
            path = walk(None, p, [])
            path.append(p)
            raw.append((path, True))
    touched = {int(cls.cluster[p]) for path, _ in raw for p in (path[0], path[-1]) if kind[p] == BRANCH}
    for k in range(1, cls.num_clusters + 1):
        if k not in touched:
            first = next(p for p in ordered if cls.cluster[p] == k)
            raw.append(([first], False))

    raw.sort(key=lambda item: item[0])
    paths = [path for path, _ in raw]
    closed = [flag for _, flag in raw]

    by_cluster: dict[int, set] = {}
    terminal = []
    for i, path in enumerate(paths):
        ends = (path[0], path[-1])
        terminal.append(not closed[i] and any(kind[p] == ENDPOINT for p in ends))
        for p in ends:
            if kind[p] == BRANCH:
                by_cluster.setdefault(int(cls.cluster[p]), set()).add(i)
    edges = set()
    for members in by_cluster.values():
        members = sorted(members)
        for a in range(len(members)):
            for b in range(a + 1, len(members)):
                edges.add((members[a], members[b]))
    return paths, sorted(edges), closed, terminal


def _step_lengths(path: np.ndarray) -> np.ndarray:
    if len(path) < 2:
        return np.zeros(0)
    d = np.abs(np.diff(path, axis=0)).sum(axis=1)
    return np.where(d == 2, math.sqrt(2.0), 1.0)


def segment_features(path, dist: np.ndarray, img: IntensityGrid, mask=None,
                     is_terminal: bool = False) -> VesselFeatures:
    """Geometric and intensity descriptors of one centreline path.

    ``mask`` is the (row, col) pixel set owned by the segment; intensity
    statistics fall back to the path pixels when it is not given. Lengths are
    in mm, using axis steps of 1 and diagonal steps of sqrt(2) pixels.
    """
    path = np.asarray(path, dtype=np.int64).reshape(-1, 2)
    if len(path) == 0:
        raise ValueError("segment path is empty")
    if dist.shape != img.shape:
        raise ValueError("distance and intensity grids differ in shape")
    s = img.pixel_size_mm
    steps = _step_lengths(path)
    if len(steps):
        ds = np.zeros(len(path))
        ds[:-1] += steps / 2
        ds[1:] += steps / 2
        length_px = float(steps.sum())
    else:
        ds = np.ones(1)
        length_px = 1.0
    if length_px == 0:
        length_px = 1.0
    radius = dist[path[:, 0], path[:, 1]] * s
    avg_r = float(radius.mean())
    variability = float(radius.std() / avg_r) if avg_r > 0 else 0.0
    area = float(np.sum(2 * radius * ds * s))
    chord = float(np.hypot(*(path[-1] - path[0])))
    if chord < 1.0:
        tort = TORTUOSITY_CAP
    else:
        tort = min(max(length_px / chord, 1.0), TORTUOSITY_CAP)
    if mask is None:
        mask = path
    mask = np.asarray(mask).reshape(-1, 2)
    vals = img.values[mask[:, 0], mask[:, 1]]
    if len(steps):
        cum = np.concatenate([[0.0], np.cumsum(steps)])
        mid = path[int(np.searchsorted(cum, cum[-1] / 2))]
    else:
        mid = path[0]
    return VesselFeatures(
        length=length_px * s,
        avg_radius=avg_r,
        radius_variability=variability,
        area=area,
        tortuosity=tort,
        mean_intensity=float(vals.mean()),
        std_intensity=float(vals.std()),
        midpoint=(float(mid[1]), float(mid[0])),
        endpoint_a=(float(path[0, 1]), float(path[0, 0])),
        endpoint_b=(float(path[-1, 1]), float(path[-1, 0])),
        is_terminal=bool(is_terminal),
    )


def _offset_shells(max_radius: int):
    offs = [(dr * dr + dc * dc, dr, dc)
            for dr in range(-max_radius, max_radius + 1)
            for dc in range(-max_radius, max_radius + 1)]
    offs.sort()
    shells: dict[int, list] = {}
    for d2, dr, dc in offs:
        shells.setdefault(d2, []).append((dr, dc))
    return sorted(shells.items())


def assign_pixels(seg: np.ndarray, paths: list, kind: np.ndarray | None = None) -> np.ndarray:
    """Give every foreground pixel to the segment owning its nearest centreline pixel.

    Candidates are restricted to the same 8-connected foreground component;
    equal distances go to the lower segment id. When ``kind`` is given, branch
    pixels shared by several segments are not used as seeds, so junction
    surroundings follow the segments' own centrelines. Returns ids + 1
    (0 = background).
    """
    seg = np.asarray(seg, dtype=bool)
    h, w = seg.shape
    big = np.iinfo(np.int32).max
    source = np.full(seg.shape, big, dtype=np.int32)
    for i, path in enumerate(paths):
        p = np.asarray(path).reshape(-1, 2)
        if kind is not None:
            own = kind[p[:, 0], p[:, 1]] != BRANCH
            if own.any():
                p = p[own]
        cur = source[p[:, 0], p[:, 1]]
        source[p[:, 0], p[:, 1]] = np.minimum(cur, i)
    comp = raster.connected_components(seg, 8).labels
    best = np.full(seg.shape, big, dtype=np.int32)
    rows, cols = np.nonzero(seg)
    own_comp = comp[rows, cols]
    done, reach = -1, 2
    # grow offset shells in order of squared distance; only unassigned pixels are probed
    while len(rows) and done < h * h + w * w:
        for d2, offs in _offset_shells(reach):
            if d2 <= done:
                continue
            if d2 > reach * reach:
                break
            cand = np.full(len(rows), big, dtype=np.int32)
            for dr, dc in offs:
                rr, cc = rows + dr, cols + dc
                ok = np.flatnonzero((rr >= 0) & (rr < h) & (cc >= 0) & (cc < w))
                src = source[rr[ok], cc[ok]]
                src[comp[rr[ok], cc[ok]] != own_comp[ok]] = big
                cand[ok] = np.minimum(cand[ok], src)
            take = cand != big
            best[rows[take], cols[take]] = cand[take]
            rows, cols, own_comp = rows[~take], cols[~take], own_comp[~take]
            done = d2
            if not len(rows):
                break
        done, reach = max(done, reach * reach), reach * 2
    owner = np.where(seg & (best != big), best + 1, 0).astype(np.int32)
    return owner


def build_vessel_graph(seg: np.ndarray, img: IntensityGrid) -> VesselGraph:
    seg = np.asarray(seg, dtype=bool)
    if seg.shape != img.shape:
        raise ValueError("segmentation and image differ in shape")
    skel = centreline(seg)
    cls = classify_skeleton(skel)
    paths, edges, closed, terminal = trace_segments(skel, cls)
    owner = assign_pixels(seg, paths, cls.kind)
    dist = raster.distance_transform(seg)
    rows, cols = np.nonzero(owner)
    ids = owner[rows, cols] - 1
    order = np.argsort(ids, kind="stable")
    rows, cols, ids = rows[order], cols[order], ids[order]
    bounds = np.searchsorted(ids, np.arange(len(paths) + 1))
    segments = []
    for i, path in enumerate(paths):
        sl = slice(bounds[i], bounds[i + 1])
        mask = np.stack([rows[sl], cols[sl]], axis=1)
        if len(mask) == 0:
            mask = None
        feats = segment_features(path, dist, img, mask, terminal[i])
        segments.append(VesselSegment(i, np.asarray(path, dtype=np.int64).reshape(-1, 2), feats, closed[i]))
    return VesselGraph(segments, edges, skel, owner, cls)
