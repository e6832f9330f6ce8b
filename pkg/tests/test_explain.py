import json

import numpy as np
import pytest

from octagraph import explain, gnn, hetero
from octagraph.autodiff import Tensor
from octagraph import autodiff as ad
from octagraph.raster import IntensityGrid
from oracles import linear_scan_knn
from shapes import image_for, wheel
from toys import toy_dataset


@pytest.fixture(scope="module")
def toy_setup():
    train_graphs = toy_dataset(0, 12)
    stats = hetero.fit_norm_stats(train_graphs)
    index = explain.build_baseline_index(train_graphs, stats, k=3)
    model = gnn.HeteroGNN(seed=1)
    graph = hetero.normalize(toy_dataset(1, 1)[0], stats)
    return train_graphs, stats, index, model, graph


# ---------------------------------------------------------------- baseline index


def test_index_sizes_and_exact_hit(toy_setup):
    train_graphs, stats, index, _, _ = toy_setup
    assert index.size(hetero.FAZ) == len(train_graphs)
    assert index.size(hetero.VES) == sum(g.num_nodes(hetero.VES) for g in train_graphs)
    pos = index.positions[hetero.VES][7]
    assert index.neighbours(hetero.VES, pos, 1)[0] == 7


def test_single_graph_index():
    g = toy_dataset(3, 1)[0]
    g.nodes[hetero.VES].raw = g.nodes[hetero.VES].raw[:5]
    g.nodes[hetero.VES].masks = g.nodes[hetero.VES].masks[:5]
    idx = explain.build_baseline_index([g], hetero.fit_norm_stats([g]), k=3)
    assert idx.size(hetero.VES) == 5


def test_knn_matches_linear_scan():
    rng = np.random.default_rng(0)
    pts = rng.integers(0, 50, (1000, 2)).astype(float)  # integer grid: many distance ties
    feats = rng.normal(size=(1000, 4))
    idx = explain.BaselineIndex({hetero.VES: pts}, {hetero.VES: feats}, k=7)
    for q in rng.uniform(-5, 55, (100, 2)):
        np.testing.assert_array_equal(idx.neighbours(hetero.VES, q), linear_scan_knn(pts, q, 7))
        np.testing.assert_allclose(idx.baseline(hetero.VES, q), feats[linear_scan_knn(pts, q, 7)].mean(axis=0))


def test_baseline_k1_and_population():
    rng = np.random.default_rng(1)
    pts = rng.uniform(0, 100, (40, 2))
    feats = rng.normal(size=(40, 3))
    feats -= feats.mean(axis=0)
    one = explain.BaselineIndex({hetero.ICA: pts}, {hetero.ICA: feats}, k=1)
    np.testing.assert_array_equal(one.baseline(hetero.ICA, pts[12]), feats[12])
    everyone = explain.BaselineIndex({hetero.ICA: pts}, {hetero.ICA: feats}, k=40)
    np.testing.assert_allclose(everyone.baseline(hetero.ICA, [3.0, 4.0]), 0, atol=1e-12)
    with pytest.raises(ValueError):
        one.baseline(hetero.VES, [0, 0])
    with pytest.raises(ValueError):
        explain.build_baseline_index([], None)


def test_index_file_roundtrip(tmp_path, toy_setup):
    index = toy_setup[2]
    explain.save_index(index, tmp_path / "idx.bin")
    back = explain.load_index(tmp_path / "idx.bin")
    assert back.k == index.k
    for t in hetero.NODE_TYPES:
        np.testing.assert_array_equal(back.positions[t], index.positions[t])
        np.testing.assert_array_equal(back.features[t], index.features[t])
    first = (tmp_path / "idx.bin").read_bytes()
    explain.save_index(back, tmp_path / "again.bin")
    assert (tmp_path / "again.bin").read_bytes() == first


# ---------------------------------------------------------------- integrated gradients


def test_zero_path_gives_zero_attribution(toy_setup):
    *_, model, graph = toy_setup
    x = {t: graph.features(t) for t in hetero.NODE_TYPES}
    attr = explain.integrated_gradients(model, graph, baselines=x, steps=16)
    for t in hetero.NODE_TYPES:
        assert np.all(attr.scores[t] == 0)


def test_sensitivity_null(toy_setup):
    _, _, index, model, graph = toy_setup
    bl = {t: graph.features(t).copy() for t in hetero.NODE_TYPES}
    bl[hetero.VES][:, 2] += 1.0  # only one column differs
    attr = explain.integrated_gradients(model, graph, baselines=bl, steps=16)
    mask = np.ones_like(attr.scores[hetero.VES], bool)
    mask[:, 2] = False
    assert np.all(attr.scores[hetero.VES][mask] == 0)
    assert np.all(attr.scores[hetero.ICA] == 0)


def test_linear_regime_is_exact(toy_setup):
    *_, graph = toy_setup
    model = gnn.HeteroGNN(gnn.ModelConfig(dropout=0.0), seed=2)
    # large shifts keep every ReLU active, so the logit is affine in the inputs
    for name, p in model.params.items():
        if name.endswith(".beta") or name == "head.0.bias":
            p.data = p.data + 50.0
    x = {t: graph.features(t) for t in hetero.NODE_TYPES}
    rng = np.random.default_rng(0)
    bl = {t: x[t] + rng.normal(scale=0.1, size=x[t].shape) for t in hetero.NODE_TYPES}
    inputs = {t: Tensor(x[t], True) for t in hetero.NODE_TYPES}
    logits = model.forward(gnn.collate([graph], model.cfg), inputs=inputs)
    ad.select(logits, (0, 1)).backward()
    for m in (8, 9):
        attr = explain.integrated_gradients(model, graph, baselines=bl, target=1, steps=m)
        for t in hetero.NODE_TYPES:
            np.testing.assert_allclose(attr.scores[t], (x[t] - bl[t]) * inputs[t].grad, atol=1e-10)


def test_completeness_improves_with_steps(toy_setup):
    _, _, index, model, graph = toy_setup
    coarse = explain.integrated_gradients(model, graph, index, steps=32)
    fine = explain.integrated_gradients(model, graph, index, steps=512)
    diff = abs(fine.output_at_input - fine.output_at_baseline)
    assert fine.completeness_gap <= 1e-4 * diff + 1e-6
    assert fine.completeness_gap < coarse.completeness_gap or coarse.completeness_gap <= 1e-12


def test_probability_output_completeness(toy_setup):
    _, _, index, model, graph = toy_setup
    attr = explain.integrated_gradients(model, graph, index, steps=512, output="probability")
    assert attr.completeness_gap <= 1e-4 * abs(attr.output_at_input - attr.output_at_baseline) + 1e-6


def test_steps_and_target_validation(toy_setup):
    _, _, index, model, graph = toy_setup
    with pytest.raises(ValueError):
        explain.integrated_gradients(model, graph, index, steps=4)
    with pytest.raises(ValueError):
        explain.integrated_gradients(model, graph, index, target=5)


# ---------------------------------------------------------------- ranking and reports


def _attr_with(importances):
    scores = {hetero.VES: np.array(importances, float)[:, None],
              hetero.ICA: np.zeros((0, 1)), hetero.FAZ: np.zeros((0, 1))}
    return explain.Attribution(scores, scores, scores, 0, 8, 0.0, 0.0, 0.0,
                               {t: ["f"] for t in hetero.NODE_TYPES})


def test_rank_nodes():
    assert [i for _, i, _ in explain.rank_nodes(_attr_with([0.5, -0.2, 0.9]))] == [2, 0, 1]
    assert [i for _, i, _ in explain.rank_nodes(_attr_with([0.0, 0.0, 0.0]))] == [0, 1, 2]
    assert len(explain.rank_nodes(_attr_with([1.0, 2.0]), top_n=10)) == 2


def test_top_features():
    scores = {hetero.VES: np.array([[0.01, -0.9, 0.2]]), hetero.ICA: np.zeros((0, 3)), hetero.FAZ: np.zeros((0, 3))}
    inputs = {hetero.VES: np.array([[0.3, -1.25, 2.0]]), hetero.ICA: np.zeros((0, 3)), hetero.FAZ: np.zeros((0, 3))}
    attr = explain.Attribution(scores, inputs, inputs, 0, 8, 0, 0, 0, {t: ["a", "b", "c"] for t in hetero.NODE_TYPES})
    (top,) = explain.top_features(attr, hetero.VES, 0, 1)
    assert top["name"] == "b"
    full = explain.top_features(attr, hetero.VES, 0, 3, raw=np.array([1.0, 2.0, 3.0]))
    assert [f["name"] for f in full] == ["b", "c", "a"]
    assert full[2]["sd_label"] == "+0.3 SD" and full[2]["raw_value"] == 1.0
    assert explain.format_sd(-1.25) == "-1.2 SD"


def test_report_is_json_serialisable(toy_setup):
    _, _, index, model, graph = toy_setup
    attr = explain.integrated_gradients(model, graph, index, steps=16)
    report = explain.explanation_report(attr, graph, model, top_n=5, prediction=model.predict([graph])[0])
    text = json.dumps(report)
    assert len(report["nodes"]) == 5
    assert set(report["nodes"][0]) == {"node_type", "id", "importance", "top_features"}
    assert "+" in text or "-" in text


# ---------------------------------------------------------------- overlays


@pytest.fixture(scope="module")
def wheel_setup():
    seg = wheel()
    img = image_for(seg, 0.7, 0.2)
    g = hetero.assemble(seg, img)
    return g, img


def _attr_for(graph, values):
    scores = {t: np.asarray(values[t], float)[:, None] for t in hetero.NODE_TYPES}
    return explain.Attribution(scores, scores, scores, 0, 8, 0, 0, 0, {t: ["f"] for t in hetero.NODE_TYPES})


def test_zero_attribution_overlay_is_base(wheel_setup):
    g, img = wheel_setup
    attr = _attr_for(g, {t: np.zeros(g.num_nodes(t)) for t in hetero.NODE_TYPES})
    rgb = explain.render_overlay(g, attr, img)
    from octagraph.raster import to_uint8

    np.testing.assert_array_equal(rgb, np.repeat(to_uint8(img.values)[..., None], 3, axis=2))


def test_single_vessel_tint_is_mask_bounded(wheel_setup):
    g, img = wheel_setup
    imp = {t: np.zeros(g.num_nodes(t)) for t in hetero.NODE_TYPES}
    imp[hetero.VES][4] = 2.0
    imp[hetero.VES][5] = -1.0
    rgb = explain.render_overlay(g, _attr_for(g, imp), img, mode="vessel")
    base = explain.render_overlay(g, _attr_for(g, {t: np.zeros(g.num_nodes(t)) for t in hetero.NODE_TYPES}), img)
    changed = np.any(rgb != base, axis=2)
    mask = hetero.paint_masks(g.nodes[hetero.VES].masks, g.shape) == 5
    np.testing.assert_array_equal(changed, mask)
    assert np.all(rgb[mask] == [255, 0, 0])


def test_combined_coverage_is_union_of_positive_masks(wheel_setup):
    g, img = wheel_setup
    rng = np.random.default_rng(0)
    imp = {t: rng.normal(size=g.num_nodes(t)) for t in hetero.NODE_TYPES}
    alpha = explain.overlay_alpha(g, _attr_for(g, imp), "combined")
    union = np.zeros(g.shape, bool)
    for t in hetero.NODE_TYPES:
        lab = hetero.paint_masks(g.nodes[t].masks, g.shape)
        for i in np.flatnonzero(imp[t] > 0):
            union |= lab == i + 1
    np.testing.assert_array_equal(alpha > 0, union)
    assert alpha.max() == 1.0


def test_overlay_shape_mismatch(wheel_setup):
    g, _ = wheel_setup
    attr = _attr_for(g, {t: np.zeros(g.num_nodes(t)) for t in hetero.NODE_TYPES})
    with pytest.raises(ValueError):
        explain.render_overlay(g, attr, IntensityGrid(np.zeros((5, 5))))


def test_overlay_png_deterministic(tmp_path, wheel_setup):
    g, img = wheel_setup
    imp = {t: np.arange(g.num_nodes(t), dtype=float) for t in hetero.NODE_TYPES}
    rgb = explain.render_overlay(g, _attr_for(g, imp), img)
    explain.save_png(rgb, tmp_path / "a.png")
    explain.save_png(rgb, tmp_path / "b.png")
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
