"""Command-line interface.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric error.
Machine-readable output goes to stdout, messages to stderr. Every file is
written through a temporary file and renamed into place.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import biomarkers, dataset, explain, hetero, metrics, raster, train
from .config import ConfigError, PipelineConfig, load_config
from .errors import NumericError, OctagraphError
from .io_utils import atomic_write_text, dump_json

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _emit(obj) -> None:
    sys.stdout.write(dump_json(obj))
    sys.stdout.flush()


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _config(args) -> PipelineConfig:
    path = getattr(args, "config", None)
    return load_config(path) if path else PipelineConfig()


def _prepared(ckpt: train.TrainResult, graph: hetero.HeteroGraph) -> hetero.HeteroGraph:
    return hetero.normalize(graph, ckpt.stats)


def _split_ids(samples, cfg: PipelineConfig):
    """Fold per sample: labels.csv folds when every sample has one, otherwise a fresh split."""
    if all(s.fold is not None for s in samples):
        folds = np.array([s.fold for s in samples])
    else:
        folds = train.group_stratified_split([s.label for s in samples], [s.group_id for s in samples],
                                             cfg.split.folds, cfg.split.seed)
    tr, va, te = train.fold_subsets(folds, cfg.split.test_fold, cfg.split.val_fold)
    if len(tr) == 0:
        raise dataset.DatasetError("training subset is empty")
    return tr, va, te


# ------------------------------------------------------------------ subcommands


def cmd_build_graph(args) -> int:
    cfg = _config(args)
    g = dataset.graph_from_files(args.seg, args.img, args.label, args.source or Path(args.seg).stem,
                                 cfg.data.threshold, cfg.data.pixel_size_mm)
    hetero.save_graph(g, args.output)
    _emit({"output": str(args.output), "nodes": {t: g.num_nodes(t) for t in hetero.NODE_TYPES},
           "edges": {r: int(len(e)) for r, e in g.edges.items()}})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    samples = dataset.read_labels(args.dataset)
    graphs = dataset.load_graphs(args.dataset, samples, cfg.data.threshold, cfg.data.pixel_size_mm)
    tr, va, te = _split_ids(samples, cfg)
    tcfg = cfg.train_config()

    def log(rec):
        if not args.quiet:
            val = f" val_ba={rec['val_balanced_accuracy']:.3f}" if "val_balanced_accuracy" in rec else ""
            _log(f"epoch {rec['epoch']:3d} loss={rec['loss']:.4f} train_ba={rec['train_balanced_accuracy']:.3f}{val}")

    result = train.train([graphs[i] for i in tr], [graphs[i] for i in va], tcfg, cfg.model, log)
    result.meta.update({
        "train_ids": [samples[i].sample_id for i in tr],
        "val_ids": [samples[i].sample_id for i in va],
        "test_ids": [samples[i].sample_id for i in te],
    })
    train.save_checkpoint(result, args.output)
    if args.index:
        index = explain.build_baseline_index([graphs[i] for i in tr], result.stats, cfg.explain.k,
                                             cfg.model.include_coordinates)
        explain.save_index(index, args.index)
    if args.plot:
        from .plotting import history_figure

        history_figure(result.history, args.plot)
    best = result.history[result.best_epoch - 1]
    _emit({"output": str(args.output), "best_epoch": result.best_epoch, "best": best,
           "num_train": len(tr), "num_val": len(va), "num_test": len(te)})
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt = train.load_checkpoint(args.model)
    g = _prepared(ckpt, hetero.load_graph(args.graph))
    (p,) = ckpt.model.predict([g])
    _emit({"class": p.label, "probabilities": dict(zip(hetero.CLASSES, map(float, p.probabilities)))})
    return EXIT_OK


def cmd_explain(args) -> int:
    cfg = _config(args)
    ckpt = train.load_checkpoint(args.model)
    g = _prepared(ckpt, hetero.load_graph(args.graph))
    index = explain.load_index(args.index)
    if index.include_coordinates != ckpt.model.cfg.include_coordinates:
        raise dataset.DatasetError("baseline index and model disagree on coordinate features")
    (pred,) = ckpt.model.predict([g])
    target = hetero.class_index(args.target) if args.target else None
    steps = args.steps or cfg.explain.steps
    attr = explain.integrated_gradients(ckpt.model, g, index, target, steps, cfg.explain.output)
    report = explain.explanation_report(attr, g, ckpt.model, cfg.explain.top_nodes, cfg.explain.top_features, pred)
    report["output"] = cfg.explain.output
    report["k"] = index.k
    if args.overlay:
        if args.image:
            base = raster.load_image(args.image)
        else:
            base = (hetero.paint_masks(g.nodes[hetero.VES].masks, g.shape) > 0) * 0.6
        explain.save_png(explain.render_overlay(g, attr, base, args.mode, args.negative), args.overlay)
    atomic_write_text(args.output, dump_json(report))
    _emit({"output": str(args.output), "class": pred.label, "target": report["target"],
           "completeness_gap": attr.completeness_gap})
    return EXIT_OK


def cmd_biomarkers(args) -> int:
    cfg = _config(args)
    seg = raster.threshold(raster.load_image(args.seg, cfg.data.pixel_size_mm), cfg.data.threshold)
    img = raster.load_image(args.img, cfg.data.pixel_size_mm)
    rec = biomarkers.extract_biomarkers(seg, img)
    for w in rec.warnings:
        _log(f"warning: {w}")
    row = {"sample_id": args.source or Path(args.seg).stem, **dict(zip(rec.names(), rec.values()))}
    biomarkers.export_csv(["sample_id"] + rec.names(), [row], args.output)
    _emit({"output": str(args.output), **row})
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.per_class < 1:
        raise UsageError("--per-class must be at least 1")
    samples = dataset.write_synthetic_dataset(args.output, args.per_class, args.seed, args.size, args.workers)
    counts = {c: sum(s.label == c for s in samples) for c in hetero.CLASSES}
    _emit({"output": str(args.output), "counts": counts})
    return EXIT_OK


def _subset(samples, ckpt, name):
    if name == "all":
        return list(range(len(samples)))
    ids = ckpt.meta.get(f"{name}_ids")
    if ids is None:
        raise dataset.DatasetError(f"checkpoint records no {name} subset")
    pos = {s.sample_id: i for i, s in enumerate(samples)}
    missing = [i for i in ids if i not in pos]
    if missing:
        raise dataset.DatasetError(f"{len(missing)} {name} samples missing from dataset, e.g. {missing[0]}")
    return [pos[i] for i in ids]


def cmd_eval(args) -> int:
    cfg = _config(args)
    ckpt = train.load_checkpoint(args.model)
    samples = dataset.read_labels(args.dataset)
    subset = args.subset
    if subset is None:
        pos = {s.sample_id for s in samples}
        recorded = ckpt.meta.get("test_ids")
        subset = "test" if recorded and all(i in pos for i in recorded) else "all"
    idx = _subset(samples, ckpt, subset)
    if not idx:
        raise dataset.DatasetError(f"{subset} subset is empty")
    chosen = [samples[i] for i in idx]
    graphs = dataset.load_graphs(args.dataset, chosen, cfg.data.threshold, cfg.data.pixel_size_mm)
    preds = ckpt.model.predict([_prepared(ckpt, g) for g in graphs])
    result = metrics.evaluate(np.stack([p.probabilities for p in preds]), dataset.label_indices(chosen))
    result["subset"] = subset
    result["n"] = len(chosen)
    for w in result.get("warnings", []):
        _log(f"warning: {w}")
    _emit(result)
    return EXIT_OK


def cmd_split(args) -> int:
    samples = dataset.read_labels(args.dataset)
    folds = train.group_stratified_split([s.label for s in samples], [s.group_id for s in samples],
                                         args.folds, args.seed)
    for s, f in zip(samples, folds):
        s.fold = int(f)
    dataset.write_labels(args.dataset, samples)
    counts = {str(f): {c: sum(1 for s in samples if s.fold == f and s.label == c) for c in hetero.CLASSES}
              for f in range(args.folds)}
    _emit({"folds": counts})
    return EXIT_OK


def cmd_build_index(args) -> int:
    cfg = _config(args)
    ckpt = train.load_checkpoint(args.model)
    samples = dataset.read_labels(args.dataset)
    idx = _subset(samples, ckpt, "train")
    graphs = dataset.load_graphs(args.dataset, [samples[i] for i in idx], cfg.data.threshold, cfg.data.pixel_size_mm)
    index = explain.build_baseline_index(graphs, ckpt.stats, args.k or cfg.explain.k,
                                         ckpt.model.cfg.include_coordinates)
    explain.save_index(index, args.output)
    _emit({"output": str(args.output), "k": index.k, "sizes": {t: index.size(t) for t in hetero.NODE_TYPES}})
    return EXIT_OK


def cmd_report(args) -> int:
    from .plotting import distribution_figure

    cfg = _config(args)
    samples = dataset.read_labels(args.dataset)
    graphs = dataset.load_graphs(args.dataset, samples, cfg.data.threshold, cfg.data.pixel_size_mm)
    out = Path(args.output)
    report, rows = biomarkers.feature_distribution_report(graphs, [s.sample_id for s in samples])
    report["n"] = len(samples)
    biomarkers.export_csv(biomarkers.distribution_csv_names(), rows, out / "distribution.csv")
    distribution_figure(rows, [name for name, *_ in biomarkers.DISTRIBUTION_STATISTICS], out / "distribution.png")

    # aggregate-feature logistic baseline on the same split the model would use
    emb = np.stack([biomarkers.aggregate_embeddings(g) for g in graphs])
    names = biomarkers.aggregate_names()
    emb_rows = [{"sample_id": s.sample_id, "label": s.label, **dict(zip(names, e))} for s, e in zip(samples, emb)]
    biomarkers.export_csv(["sample_id", "label"] + names, emb_rows, out / "aggregates.csv")
    labels = dataset.label_indices(samples)
    tr, va, te = _split_ids(samples, cfg)
    if len(np.unique(labels[tr])) >= 2 and len(te):
        lr = biomarkers.train_logistic(emb[tr], labels[tr])
        probs = np.stack([p.probabilities for p in lr.predict(emb[te])])
        report["logistic_baseline"] = {"subset": "test", "n": len(te), **metrics.evaluate(probs, labels[te])}
    atomic_write_text(out / "distribution.json", dump_json(report))
    _emit({"output": str(out), "files": ["distribution.json", "distribution.csv", "distribution.png",
                                         "aggregates.csv"]})
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="octagraph", description="Graph-based staging of retinal OCTA segmentations.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        return sp

    s = add("build-graph", cmd_build_graph, "build a heterogeneous graph from a segmentation and image")
    s.add_argument("seg")
    s.add_argument("img")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--label", choices=hetero.CLASSES)
    s.add_argument("--source", help="sample id stored in the graph (default: segmentation file stem)")
    s.add_argument("--config")

    s = add("train", cmd_train, "train a model on a dataset directory")
    s.add_argument("dataset")
    s.add_argument("--config")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--index", help="also write the baseline index of the training graphs")
    s.add_argument("--plot", help="also write a training-curve PNG")
    s.add_argument("--quiet", action="store_true")

    s = add("predict", cmd_predict, "predict the stage of one graph")
    s.add_argument("model")
    s.add_argument("graph")

    s = add("explain", cmd_explain, "integrated-gradients attribution for one graph")
    s.add_argument("model")
    s.add_argument("graph")
    s.add_argument("--index", required=True)
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--overlay")
    s.add_argument("--image", help="grayscale image under the overlay (default: vessel masks)")
    s.add_argument("--mode", choices=sorted(explain.OVERLAY_TYPES), default="combined")
    s.add_argument("--negative", action="store_true", help="tint negative importance blue")
    s.add_argument("--target", choices=hetero.CLASSES, help="class to explain (default: predicted)")
    s.add_argument("--steps", type=int)
    s.add_argument("--config")

    s = add("biomarkers", cmd_biomarkers, "classical biomarkers of one segmentation")
    s.add_argument("seg")
    s.add_argument("img")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--source")
    s.add_argument("--config")

    s = add("synth", cmd_synth, "write a synthetic dataset directory")
    s.add_argument("--per-class", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=304)
    s.add_argument("--workers", type=int, help="worker processes (default: CPU count)")
    s.add_argument("-o", "--output", required=True)

    s = add("eval", cmd_eval, "metrics of a model on a dataset directory")
    s.add_argument("model")
    s.add_argument("dataset")
    s.add_argument("--subset", choices=("test", "val", "train", "all"),
                   help="default: the checkpoint's test subset when present in the dataset, else all")
    s.add_argument("--config")

    s = add("split", cmd_split, "assign group-stratified folds in labels.csv")
    s.add_argument("dataset")
    s.add_argument("--folds", type=int, default=6)
    s.add_argument("--seed", type=int, default=0)

    s = add("build-index", cmd_build_index, "baseline index from a checkpoint's training graphs")
    s.add_argument("model")
    s.add_argument("dataset")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--k", type=int)
    s.add_argument("--config")

    s = add("report", cmd_report, "feature distribution report with figures and a logistic baseline")
    s.add_argument("dataset")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--config")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        _log(f"error: {exc}")
        return EXIT_USAGE
    except NumericError as exc:
        _log(f"numeric error: {exc}")
        return EXIT_NUMERIC
    except (OSError, OctagraphError, ValueError, KeyError, json.JSONDecodeError) as exc:
        _log(f"data error: {exc}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
