"""On-disk dataset layout: images/, segs/, graphs/ and labels.csv."""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import hetero, raster, synth
from .errors import OctagraphError
from .io_utils import atomic_write_bytes, atomic_write_text

LABEL_FIELDS = ("sample_id", "label", "group_id")


class DatasetError(OctagraphError):
    """Missing or inconsistent dataset directory content."""


@dataclass
class Sample:
    sample_id: str
    label: str
    group_id: str
    fold: int | None = None


def image_path(root, sid: str) -> Path:
    return Path(root) / "images" / f"{sid}.pgm"


def seg_path(root, sid: str) -> Path:
    return Path(root) / "segs" / f"{sid}.pgm"


def graph_path(root, sid: str) -> Path:
    return Path(root) / "graphs" / f"{sid}.json"


def labels_text(samples: list[Sample]) -> str:
    with_folds = any(s.fold is not None for s in samples)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(LABEL_FIELDS + (("fold",) if with_folds else ()))
    for s in samples:
        row = [s.sample_id, s.label, s.group_id]
        if with_folds:
            row.append("" if s.fold is None else str(s.fold))
        w.writerow(row)
    return buf.getvalue()


def write_labels(root, samples: list[Sample]) -> None:
    atomic_write_text(Path(root) / "labels.csv", labels_text(samples))


def read_labels(root) -> list[Sample]:
    path = Path(root) / "labels.csv"
    if not path.is_file():
        raise DatasetError(f"{path}: labels.csv not found")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [f for f in ("sample_id", "label") if f not in (reader.fieldnames or [])]
        if missing:
            raise DatasetError(f"{path}: missing columns {missing}")
        samples = []
        for row in reader:
            if row["label"] not in hetero.CLASSES:
                raise DatasetError(f"{path}: unknown label {row['label']!r} for {row['sample_id']}")
            fold = row.get("fold") or None
            samples.append(Sample(row["sample_id"], row["label"], row.get("group_id") or row["sample_id"],
                                  int(fold) if fold is not None else None))
    ids = [s.sample_id for s in samples]
    if len(set(ids)) != len(ids):
        raise DatasetError(f"{path}: duplicate sample ids")
    return samples


def graph_from_files(seg_file, img_file, label=None, source_id: str = "", threshold: float = 0.5,
                     pixel_size_mm: float = raster.DEFAULT_PIXEL_SIZE_MM) -> hetero.HeteroGraph:
    seg = raster.threshold(raster.load_image(seg_file, pixel_size_mm), threshold)
    img = raster.load_image(img_file, pixel_size_mm)
    if seg.shape != img.shape:
        raise DatasetError(f"{seg_file} and {img_file} differ in shape")
    return hetero.assemble(seg, img, label, source_id)


def load_graphs(root, samples: list[Sample], threshold: float = 0.5,
                pixel_size_mm: float = raster.DEFAULT_PIXEL_SIZE_MM) -> list[hetero.HeteroGraph]:
    """Stored graphs where present, otherwise built from the segmentation and image files."""
    graphs = []
    for s in samples:
        gp = graph_path(root, s.sample_id)
        if gp.is_file():
            g = hetero.load_graph(gp)
        else:
            sp, ip = seg_path(root, s.sample_id), image_path(root, s.sample_id)
            if not (sp.is_file() and ip.is_file()):
                raise DatasetError(f"no graph and no segmentation/image pair for {s.sample_id}")
            g = graph_from_files(sp, ip, None, s.sample_id, threshold, pixel_size_mm)
        g.label = hetero.class_index(s.label)
        graphs.append(g)
    return graphs


def _write_synthetic(args) -> None:
    root, spec = args
    seg, img, label = synth.generate(spec.config)
    atomic_write_bytes(seg_path(root, spec.sample_id), raster.pgm_bytes(seg))
    atomic_write_bytes(image_path(root, spec.sample_id), raster.pgm_bytes(img.values))
    # the graph is built from the stored 8-bit image, so a rebuild from disk is identical
    stored = raster.IntensityGrid(raster.to_uint8(img.values) / 255.0)
    g = hetero.assemble(seg, stored, label, spec.sample_id)
    hetero.save_graph(g, graph_path(root, spec.sample_id))


def write_synthetic_dataset(root, n_per_class: int, seed: int = 0, size: int = 304,
                            workers: int | None = None, knobs: dict | None = None) -> list[Sample]:
    root = Path(root)
    for sub in ("images", "segs", "graphs"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    specs = synth.dataset_specs(n_per_class, seed, knobs, size)
    workers = workers or os.cpu_count() or 1
    jobs = [(root, s) for s in specs]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            list(pool.map(_write_synthetic, jobs, chunksize=4))
    else:
        for job in jobs:
            _write_synthetic(job)
    samples = [Sample(s.sample_id, s.label, s.group_id) for s in specs]
    write_labels(root, samples)
    return samples


def label_indices(samples: list[Sample]) -> np.ndarray:
    return np.array([hetero.class_index(s.label) for s in samples], dtype=np.int64)
