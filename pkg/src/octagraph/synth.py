"""Seeded synthetic OCTA-like segmentation maps with tunable pathology.

A sample is a jittered triangular capillary mesh around a central avascular
disc closed by a ring vessel, crossed by a few wider radial arterioles. The
pathology knobs remove mesh edges (capillary dropout), add round blobs at
dangling capillary ends (aneurysms) and enlarge the central disc.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .hetero import CLASSES
from .raster import IntensityGrid

MESH_SPACING = 24.0
MESH_JITTER = 4.0
FAZ_RADIUS = 15.0
RING_WIDTH = 2.5
ARTERIOLE_WIDTH = 3.5


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    size: int = 304
    dropout_rate: float = 0.0
    aneurysm_count: int = 0
    faz_scale: float = 1.0
    class_label: str = "Healthy"

    def __post_init__(self):
        if self.size < 64:
            raise ValueError("size must be at least 64 px")
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise ValueError("dropout_rate must lie in [0, 1]")
        if self.aneurysm_count < 0:
            raise ValueError("aneurysm_count must be non-negative")
        if self.faz_scale < 1.0:
            raise ValueError("faz_scale must be at least 1")
        if self.class_label not in CLASSES:
            raise ValueError(f"unknown class label {self.class_label!r}")


# default knob triples per class: (dropout_rate, aneurysm_count, faz_scale)
CLASS_KNOBS = {
    "Healthy": (0.00, 0, 1.0),
    "NPDR": (0.15, 2, 1.15),
    "PDR": (0.35, 5, 1.4),
}


def _draw_segment(canvas: np.ndarray, p, q, width: float):
    """Set pixels whose centre lies within width/2 of segment pq (points as (x, y))."""
    h, w = canvas.shape
    r = width / 2.0
    x0, x1 = sorted((p[0], q[0]))
    y0, y1 = sorted((p[1], q[1]))
    c0, c1 = max(int(math.floor(x0 - r)), 0), min(int(math.ceil(x1 + r)), w - 1)
    r0, r1 = max(int(math.floor(y0 - r)), 0), min(int(math.ceil(y1 + r)), h - 1)
    if c0 > c1 or r0 > r1:
        return
    yy, xx = np.mgrid[r0:r1 + 1, c0:c1 + 1]
    px, py = xx - p[0], yy - p[1]
    dx, dy = q[0] - p[0], q[1] - p[1]
    L2 = dx * dx + dy * dy
    t = np.clip((px * dx + py * dy) / L2, 0.0, 1.0) if L2 > 0 else np.zeros_like(px, float)
    d2 = (px - t * dx) ** 2 + (py - t * dy) ** 2
    canvas[r0:r1 + 1, c0:c1 + 1] |= d2 <= r * r


def _draw_disc(canvas: np.ndarray, centre, radius: float):
    _draw_segment(canvas, centre, centre, 2 * radius)


def _mesh(rng, size, centre, faz_r):
    """Jittered triangular lattice (points, edges) with the central disc cut out.

    Edges from a kept point towards a removed (central) point are redirected to
    the ring, so the mesh stays attached to the avascular zone's rim.
    """
    sp = MESH_SPACING
    dy = sp * math.sqrt(3) / 2
    rows = int(size / dy) + 3
    cols = int(size / sp) + 3
    grid = {}
    pts = []
    for i in range(rows):
        for j in range(cols):
            x = (j - 1) * sp + (sp / 2 if i % 2 else 0.0)
            y = (i - 1) * dy
            grid[i, j] = len(pts)
            pts.append((x, y))
    pts = np.array(pts) + rng.uniform(-MESH_JITTER, MESH_JITTER, (len(pts), 2))
    edges = set()
    for (i, j), a in grid.items():
        nbrs = [(i, j + 1)]
        if i % 2:
            nbrs += [(i + 1, j), (i + 1, j + 1)]
        else:
            nbrs += [(i + 1, j - 1), (i + 1, j)]
        for key in nbrs:
            if key in grid:
                edges.add((a, grid[key]))
    d = np.hypot(pts[:, 0] - centre[0], pts[:, 1] - centre[1])
    inside = d < faz_r + 0.35 * sp
    kept, spokes = [], []
    for a, b in sorted(edges):
        if inside[a] and inside[b]:
            continue
        if inside[a] or inside[b]:
            out = b if inside[a] else a
            v = pts[out] - centre
            spokes.append((out, centre + v / np.linalg.norm(v) * faz_r))
            continue
        kept.append((a, b))
    return pts, kept, spokes, inside


def generate(cfg: SynthConfig):
    """(segmentation, intensity image, class label); fully determined by ``cfg``."""
    rng = np.random.default_rng(cfg.seed)
    n = cfg.size
    centre = np.array([n // 2, n // 2], float)
    faz_r = FAZ_RADIUS * cfg.faz_scale
    seg = np.zeros((n, n), bool)

    pts, edges, spokes, inside = _mesh(rng, n, centre, faz_r)
    widths = rng.choice([1.0, 2.0, 3.0], size=len(edges) + len(spokes), p=[0.25, 0.5, 0.25])
    drop = rng.random(len(edges)) < cfg.dropout_rate
    degree = np.zeros(len(pts), int)
    for k, (a, b) in enumerate(edges):
        if drop[k]:
            continue
        _draw_segment(seg, pts[a], pts[b], widths[k])
        degree[a] += 1
        degree[b] += 1
    for k, (a, q) in enumerate(spokes):
        _draw_segment(seg, pts[a], q, widths[len(edges) + k])
        degree[a] += 1

    # ring closing the avascular zone
    m = 48
    ring = [centre + faz_r * np.array([math.cos(2 * math.pi * i / m), math.sin(2 * math.pi * i / m)])
            for i in range(m + 1)]
    for p, q in zip(ring[:-1], ring[1:]):
        _draw_segment(seg, p, q, RING_WIDTH)

    # radial arterioles from the ring to the border with a gentle wave
    count = int(rng.integers(4, 7))
    phase = rng.uniform(0, 2 * math.pi)
    for i in range(count):
        ang = phase + 2 * math.pi * i / count + rng.uniform(-0.2, 0.2)
        wave, freq = rng.uniform(2, 6), rng.uniform(0.02, 0.05)
        radii = np.arange(faz_r, n * 0.75, 4.0)
        u = np.array([math.cos(ang), math.sin(ang)])
        perp = np.array([-u[1], u[0]])
        path = [centre + r * u + wave * math.sin(freq * (r - faz_r)) * perp for r in radii]
        for p, q in zip(path[:-1], path[1:]):
            _draw_segment(seg, p, q, ARTERIOLE_WIDTH)

    # aneurysms on dangling capillary ends
    if cfg.aneurysm_count:
        valid = (~inside) & (pts[:, 0] > 4) & (pts[:, 0] < n - 5) & (pts[:, 1] > 4) & (pts[:, 1] < n - 5)
        terminal = np.flatnonzero(valid & (degree == 1))
        pool = terminal if len(terminal) >= cfg.aneurysm_count else np.flatnonzero(valid & (degree > 0))
        chosen = rng.choice(pool, size=min(cfg.aneurysm_count, len(pool)), replace=False)
        for v in sorted(chosen.tolist()):
            _draw_disc(seg, pts[v], rng.uniform(3.0, 5.0))

    # keep the avascular disc clear of everything except its ring
    yy, xx = np.mgrid[:n, :n]
    seg[np.hypot(xx - centre[0], yy - centre[1]) < faz_r - RING_WIDTH / 2 - 0.5] = False

    fg = np.clip(rng.uniform(0.7, 0.9) + rng.normal(0, 0.08, seg.shape), 0.6, 1.0)
    bg = rng.uniform(0.0, 0.15, seg.shape)
    img = np.round(np.where(seg, fg, bg) * 255) / 255
    return seg, IntensityGrid(img), cfg.class_label


@dataclass(frozen=True)
class SampleSpec:
    sample_id: str
    label: str
    group_id: str
    config: SynthConfig


def dataset_specs(n_per_class: int, seed: int = 0, knobs: dict | None = None, size: int = 304) -> list[SampleSpec]:
    """Sample list with per-sample seeds; two consecutive samples of a class share a group id."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be at least 1")
    knobs = knobs or CLASS_KNOBS
    specs = []
    for ci, label in enumerate(CLASSES):
        d, a, f = knobs[label]
        for i in range(n_per_class):
            sub = int(np.random.SeedSequence([seed, ci, i]).generate_state(1)[0])
            cfg = SynthConfig(sub, size, d, a, f, label)
            specs.append(SampleSpec(f"{label.lower()}_{i:04d}", label, f"{label.lower()}_p{i // 2:04d}", cfg))
    return specs
