"""Pixel-lattice primitives: image I/O, labeling, thinning, distance and region measures.

Arrays are indexed ``[row, col]``; points exposed to callers are ``(x, y) = (col, row)``.
Foreground uses 8-connectivity and background 4-connectivity throughout the package.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage as ndi

from .errors import ImageFormatError

DEFAULT_PIXEL_SIZE_MM = 3.0 / 304

STRUCT4 = ndi.generate_binary_structure(2, 1)
STRUCT8 = ndi.generate_binary_structure(2, 2)

# 8-neighbourhood ring, clockwise from north, as (drow, dcol)
RING = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))


@dataclass(frozen=True, eq=False)
class IntensityGrid:
    """Grayscale image in [0, 1] with its physical pixel spacing."""

    values: np.ndarray
    pixel_size_mm: float = DEFAULT_PIXEL_SIZE_MM

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f"intensity grid must be 2-D, got shape {values.shape}")
        if not np.all(np.isfinite(values)) or values.min(initial=0.0) < 0 or values.max(initial=0.0) > 1:
            raise ValueError("intensity values must be finite and within [0, 1]")
        if not self.pixel_size_mm > 0:
            raise ValueError("pixel_size_mm must be positive")
        object.__setattr__(self, "values", values)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True, eq=False)
class LabelGrid:
    labels: np.ndarray
    num_labels: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


@dataclass(frozen=True)
class RegionProps:
    area: float
    perimeter: float
    centroid: tuple[float, float]
    eccentricity: float
    major_axis_len: float
    minor_axis_len: float
    solidity: float
    mean_intensity: float
    std_intensity: float


# --------------------------------------------------------------------------- I/O


def _read_pgm(data: bytes, path) -> tuple[np.ndarray, int]:
    if not data.startswith(b"P5"):
        raise ImageFormatError(f"{path}: only binary PGM (P5) is supported")
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3:
        if pos >= len(data):
            raise ImageFormatError(f"{path}: truncated PGM header")
        ch = data[pos:pos + 1]
        if ch == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(data) and not data[pos:pos + 1].isspace():
                pos += 1
            tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise ImageFormatError(f"{path}: malformed PGM header") from exc
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise ImageFormatError(f"{path}: unsupported PGM dimensions or bit depth")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    n = width * height * dtype.itemsize
    if len(data) - pos < n:
        raise ImageFormatError(f"{path}: truncated PGM pixel data")
    arr = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos)
    return arr.reshape(height, width), maxval


def _read_with_pillow(path) -> tuple[np.ndarray, int]:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("1", "L"):
                return np.asarray(im.convert("L")), 255
            if mode.startswith("I;16"):
                return np.asarray(im).astype(np.uint16), 65535
            if mode in ("P", "RGB", "RGBA", "LA"):
                rgb = np.asarray(im.convert("RGB"))
                if not (np.array_equal(rgb[..., 0], rgb[..., 1]) and np.array_equal(rgb[..., 1], rgb[..., 2])):
                    raise ImageFormatError(f"{path}: color images are not supported")
                return rgb[..., 0], 255
    except UnidentifiedImageError as exc:
        raise ImageFormatError(f"{path}: unrecognised image format") from exc
    raise ImageFormatError(f"{path}: unsupported image mode {mode!r}")


def load_image(path, pixel_size_mm: float = DEFAULT_PIXEL_SIZE_MM) -> IntensityGrid:
    """Read an 8/16-bit grayscale PGM (or PNG/BMP via Pillow), rescaled to [0, 1]."""
    path = Path(path)
    data = path.read_bytes()
    if data[:2] == b"P5":
        arr, maxval = _read_pgm(data, path)
    elif data[:1] == b"P" and data[1:2].isdigit():
        raise ImageFormatError(f"{path}: only binary PGM (P5) is supported")
    else:
        arr, maxval = _read_with_pillow(path)
    values = np.minimum(arr.astype(np.float64) / maxval, 1.0)
    return IntensityGrid(values, pixel_size_mm)


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255), 0, 255).astype(np.uint8)


def pgm_bytes(values: np.ndarray) -> bytes:
    """Encode a [0, 1] array (or bool mask) as 8-bit binary PGM."""
    arr = to_uint8(values)
    h, w = arr.shape
    return b"P5\n%d %d\n255\n" % (w, h) + arr.tobytes()


def save_pgm(path, values: np.ndarray) -> None:
    Path(path).write_bytes(pgm_bytes(values))


# --------------------------------------------------------------- basic raster ops


def threshold(grid: IntensityGrid, t: float) -> np.ndarray:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {t}")
    return grid.values >= t


def connected_components(mask: np.ndarray, connectivity: int = 8) -> LabelGrid:
    """Label connected true pixels; labels follow the row-major order of each component's first pixel."""
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    mask = np.asarray(mask, dtype=bool)
    labels, n = ndi.label(mask, STRUCT8 if connectivity == 8 else STRUCT4)
    labels = labels.astype(np.int32, copy=False)
    if n > 1:
        flat = labels.ravel()
        uniq, first = np.unique(flat, return_index=True)
        order = np.argsort(first[uniq > 0], kind="stable")
        if np.any(order != np.arange(n)):
            remap = np.zeros(n + 1, dtype=np.int32)
            remap[uniq[uniq > 0][order]] = np.arange(1, n + 1, dtype=np.int32)
            labels = remap[labels]
    return LabelGrid(labels, int(n))


def neighbour_codes(mask: np.ndarray) -> np.ndarray:
    """8-bit code per pixel; bit i set when the i-th ``RING`` neighbour is true (frame is false)."""
    padded = np.pad(np.asarray(mask, dtype=bool), 1)
    h, w = mask.shape
    codes = np.zeros((h, w), dtype=np.uint8)
    for i, (dr, dc) in enumerate(RING):
        codes |= padded[1 + dr:1 + dr + h, 1 + dc:1 + dc + w].astype(np.uint8) << i
    return codes


def neighbour_count(mask: np.ndarray) -> np.ndarray:
    return _POPCOUNT[neighbour_codes(mask)]


# ------------------------------------------------------------------- thinning


def _thinning_tables():
    zs = np.zeros((2, 256), dtype=bool)
    simple = np.zeros(256, dtype=bool)
    corner = np.zeros(256, dtype=bool)
    popcount = np.zeros(256, dtype=np.int8)
    for code in range(256):
        b = [(code >> i) & 1 for i in range(8)]
        n, ne, e, se, s, sw, w, nw = b
        count = sum(b)
        popcount[code] = count
        crossings = sum(1 for i in range(8) if b[i] == 0 and b[(i + 1) % 8] == 1)
        base = 2 <= count <= 6 and crossings == 1
        zs[0, code] = base and n * e * s == 0 and e * s * w == 0
        zs[1, code] = base and n * e * w == 0 and n * s * w == 0
        # Yokoi connectivity number for 8-connected foreground
        nb = [1 - v for v in b]
        yokoi = sum(nb[k] - nb[k] * nb[(k + 1) % 8] * nb[(k + 2) % 8] for k in (0, 2, 4, 6))
        simple[code] = yokoi == 1 and count >= 2
        corner[code] = simple[code] and bool((n and e) or (e and s) or (s and w) or (w and n))
    return zs, simple, corner, popcount


_ZS, _SIMPLE, _CORNER, _POPCOUNT = _thinning_tables()


def _topology(mask: np.ndarray) -> tuple[int, int]:
    fg = ndi.label(mask, STRUCT8)[1]
    bg = ndi.label(np.pad(~mask, 1, constant_values=True), STRUCT4)[1]
    return fg, bg


def _delete_sequential(mask: np.ndarray, candidates: np.ndarray, table: np.ndarray) -> np.ndarray | None:
    """Remove candidates one at a time in raster order while ``table`` still allows it."""
    grid = np.pad(mask, 1).tolist()
    removed = False
    rows, cols = np.nonzero(candidates)
    for r, c in zip(rows.tolist(), cols.tolist()):
        r += 1
        c += 1
        code = 0
        for i, (dr, dc) in enumerate(RING):
            if grid[r + dr][c + dc]:
                code |= 1 << i
        if table[code]:
            grid[r][c] = False
            removed = True
    if not removed:
        return None
    return np.array(grid, dtype=bool)[1:-1, 1:-1]


def skeletonize(mask: np.ndarray) -> np.ndarray:
    """Zhang-Suen thinning with topology guard and staircase removal.

    Each sub-iteration deletes its Zhang-Suen candidates in parallel. If that
    would change the foreground (8) or background (4) component count, the
    candidates are instead removed sequentially, keeping only simple points.
    Once Zhang-Suen converges, simple pixels with two orthogonal neighbours
    (4-connected staircase corners) are removed, and the loop repeats until
    nothing changes, so the result is a fixed point.
    """
    img = np.array(mask, dtype=bool)
    if not img.any():
        return img
    topo = _topology(img)
    while True:
        changed = False
        for sub in (0, 1):
            cand = img & _ZS[sub][neighbour_codes(img)]
            if not cand.any():
                continue
            trial = img & ~cand
            if _topology(trial) == topo:
                img = trial
                changed = True
            else:
                out = _delete_sequential(img, cand, _SIMPLE)
                if out is not None:
                    img = out
                    changed = True
        if not changed:
            cand = img & _CORNER[neighbour_codes(img)]
            if cand.any():
                out = _delete_sequential(img, cand, _CORNER)
                if out is not None:
                    img = out
                    changed = True
        if not changed:
            return img


def is_simple(mask: np.ndarray) -> np.ndarray:
    """Per-pixel flag: true pixel whose removal keeps 8/4 topology and is not an end point."""
    return np.asarray(mask, dtype=bool) & _SIMPLE[neighbour_codes(mask)]


# ------------------------------------------------------------ distance transform


def distance_transform(mask: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance to the nearest false pixel; the outer frame counts as false."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.zeros(mask.shape, dtype=np.float64)
    return ndi.distance_transform_edt(np.pad(mask, 1))[1:-1, 1:-1]


# ------------------------------------------------------------ region properties


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Monotone-chain hull of (x, y) points, counter-clockwise, collinear points dropped."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]
    if len(pts) > 1:
        pts = pts[np.r_[True, np.any(pts[1:] != pts[:-1], axis=1)]]
    if len(pts) <= 2:
        return pts
    pts = pts.tolist()

    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2:
                (ox, oy), (ax, ay) = out[-2], out[-1]
                if (ax - ox) * (p[1] - oy) - (ay - oy) * (p[0] - ox) <= 0:
                    out.pop()
                else:
                    break
            out.append(p)
        return out

    lower = half(pts)
    upper = half(reversed(pts))
    return np.array(lower[:-1] + upper[:-1])


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def boundary_edge_count(mask: np.ndarray) -> int:
    """Pixel edges between ``mask`` and its complement (frame edges included)."""
    p = np.pad(np.asarray(mask, dtype=bool), 1)
    return int(np.count_nonzero(p[1:, :] != p[:-1, :]) + np.count_nonzero(p[:, 1:] != p[:, :-1]))


# marching-squares segment length per 2x2 cell configuration at level 0.5
_MS_LENGTH = np.zeros(16)
_MS_LENGTH[[1, 2, 4, 8, 7, 11, 13, 14]] = np.sqrt(0.5)
_MS_LENGTH[[3, 6, 9, 12]] = 1.0
_MS_LENGTH[[5, 10]] = 2 * np.sqrt(0.5)


def contour_length(mask: np.ndarray) -> float:
    """Length in pixels of the marching-squares iso-contour of a binary mask."""
    p = np.pad(np.asarray(mask, dtype=np.uint8), 1)
    code = p[:-1, :-1] | (p[:-1, 1:] << 1) | (p[1:, 1:] << 2) | (p[1:, :-1] << 3)
    return float(_MS_LENGTH[code].sum())


def _row_extremes(labels: np.ndarray):
    """Per-label hull candidates: leftmost and rightmost pixel of each row."""
    rows, cols = np.nonzero(labels)
    lab = labels[rows, cols]
    order = np.lexsort((cols, rows, lab))
    lab, rows, cols = lab[order], rows[order], cols[order]
    key = lab.astype(np.int64) * (labels.shape[0] + 1) + rows
    starts = np.flatnonzero(np.r_[True, key[1:] != key[:-1]])
    ends = np.r_[starts[1:], len(key)] - 1
    return lab[starts], rows[starts], cols[starts], cols[ends]


def all_region_properties(labels: LabelGrid, intensity: IntensityGrid | None = None) -> list[RegionProps]:
    """Properties of every label 1..num_labels in pixel units."""
    n = labels.num_labels
    lab = labels.labels
    if n == 0:
        return []
    if intensity is not None and intensity.shape != lab.shape:
        raise ValueError("label and intensity grids differ in shape")
    rows, cols = np.nonzero(lab)
    ids = lab[rows, cols]
    size = n + 1
    area = np.bincount(ids, minlength=size).astype(np.float64)
    sx = np.bincount(ids, cols, size)
    sy = np.bincount(ids, rows, size)
    safe = np.maximum(area, 1)
    cx, cy = sx / safe, sy / safe
    dx, dy = cols - cx[ids], rows - cy[ids]
    # unit-square pixels contribute 1/12 variance along each axis
    mxx = np.bincount(ids, dx * dx, size) / safe + 1 / 12
    myy = np.bincount(ids, dy * dy, size) / safe + 1 / 12
    mxy = np.bincount(ids, dx * dy, size) / safe
    half_tr = (mxx + myy) / 2
    root = np.sqrt(((mxx - myy) / 2) ** 2 + mxy ** 2)
    lam1, lam2 = half_tr + root, np.maximum(half_tr - root, 0.0)
    ecc = np.sqrt(np.clip(1 - lam2 / lam1, 0.0, 1.0))

    p = np.pad(lab, 1)
    perim = np.zeros(size)
    for a, b in ((p[1:, :], p[:-1, :]), (p[:, 1:], p[:, :-1])):
        diff = a != b
        perim += np.bincount(a[diff], minlength=size) + np.bincount(b[diff], minlength=size)

    if intensity is not None:
        v = intensity.values[rows, cols]
        mean_i = np.bincount(ids, v, size) / safe
        var_i = np.bincount(ids, v * v, size) / safe - mean_i ** 2
        std_i = np.sqrt(np.maximum(var_i, 0.0))
    else:
        mean_i = std_i = np.zeros(size)

    e_lab, e_row, e_left, e_right = _row_extremes(lab)
    bounds = np.searchsorted(e_lab, np.arange(1, n + 2))
    out = []
    for k in range(1, n + 1):
        s, t = bounds[k - 1], bounds[k]
        pts = np.concatenate([
            np.stack([e_left[s:t], e_row[s:t]], axis=1),
            np.stack([e_right[s:t], e_row[s:t]], axis=1),
        ])
        hull_area = polygon_area(convex_hull(pts))
        solidity = 1.0 if hull_area <= area[k] else area[k] / hull_area
        out.append(RegionProps(
            area=float(area[k]),
            perimeter=float(perim[k]),
            centroid=(float(cx[k]), float(cy[k])),
            eccentricity=float(ecc[k]),
            major_axis_len=float(4 * np.sqrt(lam1[k])),
            minor_axis_len=float(4 * np.sqrt(lam2[k])),
            solidity=float(solidity),
            mean_intensity=float(mean_i[k]),
            std_intensity=float(std_i[k]),
        ))
    return out


def region_properties(labels: LabelGrid, label: int, intensity: IntensityGrid | None = None) -> RegionProps:
    if not 1 <= label <= labels.num_labels:
        raise ValueError(f"label {label} outside 1..{labels.num_labels}")
    single = LabelGrid((labels.labels == label).astype(np.int32), 1)
    return all_region_properties(single, intensity)[0]
