import logging
import math

import numpy as np
import pytest

from flowrecon.gsopt import psnr
from flowrecon.pipeline import (
    DepthCues,
    IdentityFlow,
    NoValidTargets,
    OracleFlow,
    PairRecord,
    ReconConfig,
    decode_residual,
    encode,
    equally_spaced,
    evaluate,
    generate_pairs,
    generate_synthetic_scene,
    initial_reconstruction,
    make_corruption_dataset,
    random_init_scene,
    refine_reconstruction,
    upsample,
    voxel_dedup,
    write_metrics_csv,
)
from flowrecon.pipeline.recon import source_points
from flowrecon.gsopt import SOURCE, fit
from flowrecon.splatrender import rasterize
from flowrecon.viewplan import PlanConfig

SHORT = ReconConfig(steps=30, refine_steps=30, max_init_points=200, seed=0)


@pytest.fixture(scope="module")
def small_synth():
    return generate_synthetic_scene(3, n_primitives=60, n_views=24, image_size=16)


def test_synthetic_deterministic():
    a = generate_synthetic_scene(5, n_primitives=20, n_views=6, image_size=16)
    b = generate_synthetic_scene(5, n_primitives=20, n_views=6, image_size=16)
    assert a.gt.positions.tobytes() == b.gt.positions.tobytes()
    for x, y in zip(a.views, b.views):
        assert x.image.tobytes() == y.image.tobytes()
    for x, y in zip(a.mono_depths, b.mono_depths):
        assert x.tobytes() == y.tobytes()


def test_synthetic_single_primitive():
    s = generate_synthetic_scene(1, n_primitives=1, n_views=4, image_size=16)
    assert len(s.gt) == 1
    for v in s.views:
        assert np.isfinite(v.image).all()
    with pytest.raises(ValueError):
        generate_synthetic_scene(1, n_primitives=0)


def test_synthetic_depth_cues_consistent(small_synth):
    s = small_synth
    for v, mono, conf, sparse in zip(s.views, s.mono_depths, s.confidences, s.sparse_depths):
        assert np.all((mono > 0) == (conf > 0))
        assert np.all(sparse[sparse > 0] > 0) and np.all(mono[sparse > 0] > 0)


def test_psnr_formula_and_cap():
    a = np.zeros((4, 4, 3))
    assert psnr(a + 0.1, a) == pytest.approx(20.0, abs=1e-12)
    assert psnr(a, a) == 99.0


def test_evaluate_gt_is_perfect(small_synth):
    rep = evaluate(small_synth.gt, small_synth.views[:4], opacity_threshold=0.0)
    assert rep.mean_psnr == 99.0 and rep.mean_ssim == pytest.approx(1.0, abs=1e-12)
    assert rep.coverage == 1.0
    plain = evaluate(small_synth.gt, small_synth.views[:4])
    assert plain.mean_psnr == 99.0


def test_evaluate_impossible_threshold(small_synth, tmp_path):
    rep = evaluate(small_synth.gt, small_synth.views[:3], opacity_threshold=1.01)
    assert rep.coverage == 0.0
    assert math.isnan(rep.mean_psnr) and math.isnan(rep.mean_ssim)
    write_metrics_csv(tmp_path / "m.csv", rep)
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "view_id,psnr,ssim,coverage"
    assert len(lines) == 5 and lines[-1].startswith("mean,undefined,undefined,0.0")


def test_evaluate_coverage_in_unit_interval(small_synth):
    rep = evaluate(small_synth.gt, small_synth.views[:3], opacity_threshold=0.5)
    assert 0.0 < rep.coverage < 1.0
    assert all(0 <= r["coverage"] <= 1 for r in rep.rows)


def test_voxel_dedup(rng):
    pts = rng.uniform(size=(300, 3))
    cols = rng.uniform(size=(300, 3))
    p0, c0 = voxel_dedup(pts, cols, 0.0)
    assert len(p0) == 300
    p, c = voxel_dedup(pts, cols, 0.25)
    assert len(p) <= 64
    keys = np.floor(p / 0.25)
    assert len(np.unique(keys, axis=0)) == len(p)


def test_source_points_dedup_disabled(small_synth):
    cues = DepthCues.from_synthetic(small_synth)
    views = small_synth.views[:6]
    raw, _, _ = source_points(views, cues, ReconConfig(voxel_size=0.0))
    dedup, _, _ = source_points(views, cues, ReconConfig(voxel_size=0.1))
    assert len(dedup) < len(raw)


def test_initial_reconstruction_two_views(small_synth):
    cues = DepthCues.from_synthetic(small_synth)
    cfg = ReconConfig(steps=60, max_primitives=300, max_init_points=200)
    scene = initial_reconstruction(small_synth.views[:2], cues, cfg)
    assert len(scene) <= 300
    assert np.isfinite(scene.positions).all()
    with pytest.raises(ValueError):
        initial_reconstruction(small_synth.views[:1], cues, cfg)


@pytest.mark.slow
def test_depth_init_beats_random_init():
    synth = generate_synthetic_scene(0, n_views=48)
    cues = DepthCues.from_synthetic(synth)
    inputs = equally_spaced(synth.views, 12)
    ids = {v.id for v in inputs}
    test = [v for v in synth.views if v.id not in ids][::4]
    cfg = ReconConfig(steps=400)
    ours = initial_reconstruction(inputs, cues, cfg)
    rnd = fit(random_init_scene(cfg.max_init_points, inputs, cfg), [(v, SOURCE) for v in inputs], cfg.optimizer(),
              seed=cfg.seed)
    assert evaluate(ours, test).mean_psnr > evaluate(rnd, test).mean_psnr


def test_generate_pairs_bookkeeping(small_synth, caplog):
    cues = DepthCues.from_synthetic(small_synth)
    views = small_synth.views[:8]
    recs = generate_pairs(views, cues, [2, 4], SHORT)
    assert sorted({r.sparsity for r in recs}) == [2, 4]
    for s in (2, 4):
        mine = [r for r in recs if r.sparsity == s]
        assert len(mine) == 8 - s
        assert all(len(r.source_view_ids) == s for r in mine)
        assert all(r.camera.id not in r.source_view_ids for r in mine)
    with caplog.at_level(logging.WARNING):
        assert generate_pairs(views, cues, [8], SHORT) == []
    assert "no held-out" in caplog.text


def test_pair_record_shape_check():
    with pytest.raises(ValueError):
        PairRecord(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)), None, (), 1)


def test_equally_spaced():
    assert equally_spaced(list(range(48)), 12) == list(range(0, 48, 4))
    assert equally_spaced(list(range(5)), 5) == list(range(5))


def test_refine_no_valid_targets(small_synth):
    cues = DepthCues.from_synthetic(small_synth)
    inputs = equally_spaced(small_synth.views, 6)
    with pytest.raises(NoValidTargets):
        refine_reconstruction(small_synth.gt, inputs, IdentityFlow(), cues, SHORT,
                              PlanConfig(n_targets=4, min_points_in_frustum=10**6))


def test_refine_smoke_and_flows(small_synth):
    cues = DepthCues.from_synthetic(small_synth)
    inputs = equally_spaced(small_synth.views, 6)
    plan = PlanConfig(n_targets=4, min_points_in_frustum=5)
    res = refine_reconstruction(small_synth.gt, inputs, IdentityFlow(), cues, SHORT, plan)
    assert len(res.targets) == len(res.generated) > 0
    for r, g in zip(res.renders, res.generated):
        np.testing.assert_array_equal(r, g)
    oracle = OracleFlow(small_synth.gt)(res.renders, res.targets, inputs)
    for t, g in zip(res.targets, oracle):
        np.testing.assert_array_equal(g, np.clip(rasterize(small_synth.gt, t).color, 0, 1))


def test_encode_and_residual(rng):
    img = rng.uniform(size=(8, 12, 3))
    z = encode(img, 4)
    assert z.shape == (2, 3, 3)
    np.testing.assert_allclose(z[0, 0], img[:4, :4].reshape(-1, 3).mean(0))
    np.testing.assert_array_equal(decode_residual(img, z, z, 4), img)
    flat = np.full((2, 3, 3), 0.4)
    np.testing.assert_allclose(upsample(flat, 4), 0.4, atol=1e-12)
    with pytest.raises(ValueError):
        encode(np.zeros((5, 4, 3)), 4)


def test_corruption_dataset_fixed_and_fresh():
    a = make_corruption_dataset(0, 3, image_size=16)
    b = make_corruption_dataset(0, 3, image_size=16)
    assert a[1].z0.tobytes() == b[1].z0.tobytes() == a[1].z0.tobytes()
    f = make_corruption_dataset(0, 3, image_size=16, fresh=True)
    assert f[0].z0.tobytes() != f[0].z0.tobytes()
    item = a[0]
    assert item.z0.shape == item.z1.shape == (1, 2, 4, 4, 3)
    assert item.cond["raymaps"].shape == (1, 4, 4, 4, 6)
    assert np.all(np.diff(np.sort(item.cond["indices"][0])) > 0)
