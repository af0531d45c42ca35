import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import front_camera, random_camera, random_scene
from flowrecon.scenecore import GaussianPrimitive, GaussianScene, rigid_transform_camera, rigid_transform_scene
from flowrecon.scenecore.geometry import quat_to_rotmat
from flowrecon.splatrender import (
    CULLED,
    DEFAULT_SETTINGS,
    RenderSettings,
    project_gaussian,
    rasterize,
    rasterize_backward,
)
from gradsuite import PRIMITIVE_GROUPS, primitive_case
from oracles import naive_render

NO_THRESHOLDS = RenderSettings(skip_weight=0.0, min_transmittance=0.0)


def _prim(pos, log_scale=(-2.0, -2.0, -2.0), logit=10.0, rgb=(1.0, 1.0, 1.0)):
    sh = np.asarray(rgb, dtype=np.float64)[None] / 0.28209479177387814
    return GaussianPrimitive(np.asarray(pos, float), np.asarray(log_scale, float), np.array([1.0, 0, 0, 0]), logit, sh)


def test_project_on_axis_closed_form():
    f, sigma = 20.0, 0.1
    cam = front_camera(size=32, dist=1.0, focal=f)  # point at the origin sits at depth 1
    p = project_gaussian(_prim([0, 0, 0], [math.log(sigma)] * 3), cam)
    np.testing.assert_allclose(p.mean2d, [15.5, 15.5], atol=1e-12)
    np.testing.assert_allclose(p.cov2d, (f * f * sigma * sigma + 0.3) * np.eye(2), atol=1e-9)
    assert p.depth == pytest.approx(1.0)
    assert np.linalg.eigvalsh(p.cov2d).min() >= 0.3 - 1e-12


def test_project_behind_camera_is_culled():
    cam = front_camera(dist=1.0)
    assert project_gaussian(_prim([0, 0, -2.0]), cam) is CULLED


def test_project_far_outside_is_culled():
    cam = front_camera(dist=1.0)
    assert project_gaussian(_prim([50.0, 0, 0]), cam) is CULLED


def test_project_shift_matches_derivative():
    f, eps = 20.0, 1e-4
    cam = front_camera(size=32, dist=2.0, focal=f)
    a = project_gaussian(_prim([0.1, 0.05, 0.3]), cam)
    b = project_gaussian(_prim([0.1 + eps, 0.05, 0.3]), cam)
    assert (b.mean2d[0] - a.mean2d[0]) == pytest.approx(f * eps / a.depth, rel=1e-6)
    assert b.mean2d[1] == pytest.approx(a.mean2d[1])


def test_single_gaussian_center_pixel():
    # kernel value 1 at the mean, so the pixel is the opacity times white
    cam = front_camera(size=31, dist=2.0, focal=20.0)
    logit = 1.2
    scene = GaussianScene.from_primitives([_prim([0, 0, 0], [-6.0] * 3, logit)], dtype=np.float64)
    out = rasterize(scene, cam)
    alpha = 1 / (1 + math.exp(-logit))
    np.testing.assert_allclose(out.color[15, 15], [alpha] * 3, rtol=1e-12)


def test_two_gaussian_expansion():
    cam = front_camera(size=16, dist=2.0, focal=20.0)
    cam = replace(cam, intrinsics=np.array([[20.0, 0, 8.0], [0, 20.0, 8.0], [0, 0, 1]]))
    l1, l2 = 0.3, -0.4
    c1, c2 = np.array([0.9, 0.2, 0.1]), np.array([0.1, 0.5, 0.8])
    near = _prim([0, 0, -0.5], [-6.0] * 3, l1, c1)
    far = _prim([0, 0, 0.5], [-6.0] * 3, l2, c2)
    scene = GaussianScene.from_primitives([far, near], dtype=np.float64)
    w1, w2 = 1 / (1 + math.exp(-l1)), 1 / (1 + math.exp(-l2))
    np.testing.assert_allclose(rasterize(scene, cam).color[8, 8], c1 * w1 + c2 * w2 * (1 - w1), rtol=1e-12)


def test_empty_scene_renders_background():
    scene = GaussianScene.from_primitives([_prim([0, 0, -5.0])], dtype=np.float64)
    out = rasterize(scene, front_camera(dist=1.0), background=(0.2, 0.3, 0.4))
    np.testing.assert_allclose(out.color, np.broadcast_to([0.2, 0.3, 0.4], out.color.shape))
    assert np.all(out.alpha == 0)


def test_same_rules_naive_matches_exactly(rng):
    for _ in range(5):
        scene = random_scene(rng, 50)
        cam = random_camera(rng, size=16, focal=20.0)
        out = rasterize(scene, cam)
        ref, ref_alpha = naive_render(scene, cam, skip=1 / 255, early=1e-4)
        np.testing.assert_allclose(out.color, ref, atol=1e-10)
        np.testing.assert_allclose(out.alpha, ref_alpha, atol=1e-10)


def test_thresholds_off_matches_plain_naive(rng):
    for _ in range(5):
        scene = random_scene(rng, 50)
        cam = random_camera(rng, size=16, focal=20.0)
        out = rasterize(scene, cam, settings=NO_THRESHOLDS)
        ref, _ = naive_render(scene, cam)
        np.testing.assert_allclose(out.color, ref, atol=1e-8)


@pytest.mark.parametrize("tile", [1, 3, 8, 16, 40])
def test_tile_size_does_not_change_image(tile, rng):
    scene = random_scene(rng, 40)
    cam = random_camera(rng)
    np.testing.assert_allclose(rasterize(scene, cam, tile_size=tile).color, rasterize(scene, cam, tile_size=8).color,
                               atol=1e-12)


def test_threaded_tiles_match(rng):
    scene = random_scene(rng, 40)
    cam = random_camera(rng)
    a = rasterize(scene, cam)
    b = rasterize(scene, cam, settings=replace(DEFAULT_SETTINGS, workers=4))
    np.testing.assert_array_equal(a.color, b.color)


@settings(max_examples=25)
@given(st.integers(0, 2**31 - 1))
def test_alpha_range_and_weight_sum(seed):
    rng = np.random.default_rng(seed)
    scene = random_scene(rng, int(rng.integers(1, 60)))
    cam = random_camera(rng, size=16, focal=20.0)
    out = rasterize(scene, cam)
    assert np.all(np.isfinite(out.color))
    assert np.all((out.alpha >= 0) & (out.alpha <= 1))
    # white unit colours composite to the accumulated weight sum
    white = replace(scene, sh=np.zeros_like(scene.sh) + np.r_[1 / 0.28209479177387814, np.zeros(len(scene.sh[0]) - 1)][
        None, :, None])
    np.testing.assert_allclose(rasterize(white, cam).color[..., 0], out.alpha, atol=1e-6)


def test_rigid_invariance(rng):
    scene = random_scene(rng, 40)
    cam = random_camera(rng)
    R = quat_to_rotmat(rng.normal(size=4))
    t = rng.normal(size=3)
    a = rasterize(scene, cam).color
    b = rasterize(rigid_transform_scene(scene, R, t), rigid_transform_camera(cam, R, t)).color
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_double_resolution_is_supersampling(rng):
    scene = random_scene(rng, 40, scale_range=(-2.0, -1.0))
    cam = random_camera(rng, size=16, focal=20.0)
    K2 = cam.intrinsics.copy()
    K2[:2] *= 2
    K2[0, 2] = K2[1, 2] = 2 * 7.5 + 0.5
    big = replace(cam, intrinsics=K2, width=32, height=32)
    lo = rasterize(scene, cam).color
    hi = rasterize(scene, big).color
    down = hi.reshape(16, 2, 16, 2, 3).mean(axis=(1, 3))
    assert np.mean(np.abs(down - lo)) < 0.02


def test_zero_upstream_gives_zero_gradients(rng):
    scene = random_scene(rng, 10, degree=2)
    cam = random_camera(rng)
    g = rasterize_backward(scene, cam, np.zeros((32, 32, 3)))
    for name in PRIMITIVE_GROUPS:
        assert np.all(getattr(g, name) == 0)


def test_single_gaussian_sum_of_pixels_fd():
    from oracles import central_difference, relative_error

    cam = front_camera(size=16, dist=2.5, focal=18.0)
    scene = GaussianScene(positions=[[0.05, -0.1, 0.1]], log_scales=[[-1.5, -1.8, -1.6]], quats=[[0.9, 0.1, -0.2, 0.3]],
                          opacity_logits=[0.4], sh=[[[2.0, 1.5, 1.0]]], dtype=np.float64)
    g = rasterize_backward(scene, cam, np.ones((16, 16, 3)), settings=NO_THRESHOLDS).as_dict()
    params = {k: np.array(v) for k, v in scene.params().items()}

    def loss():
        return rasterize(scene.with_params(params), cam, settings=NO_THRESHOLDS).color.sum()

    for name in PRIMITIVE_GROUPS:
        arr = params[name]
        num = [central_difference(loss, arr, i, 1e-4) for i in np.ndindex(arr.shape)]
        assert relative_error(g[name].ravel(), num) < 1e-3, name


@pytest.mark.parametrize("seed", range(5))
def test_random_scene_gradients(seed):
    errs = primitive_case(seed)
    assert max(errs.values()) < 5e-3, errs


def test_abs_grad_dominates_mean_grad(rng):
    scene = random_scene(rng, 20)
    cam = random_camera(rng)
    g = rasterize_backward(scene, cam, rng.normal(size=(32, 32, 3)))
    assert np.all(g.abs_grad_norm >= g.mean2d_grad_norm - 1e-12)
    assert np.all(g.abs_grad_norm[~g.visible] == 0)
