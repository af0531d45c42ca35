import numpy as np
import pytest

from conftest import front_camera, random_camera
from flowrecon.autodiff import Tensor
from flowrecon.flowcore import FlowBatch
from flowrecon.velocitynet.encoding import patchify_tensor
from flowrecon.velocitynet import (
    CheckpointError,
    OddDimensions,
    ShapeMismatch,
    VelocityNet,
    VelocityNetConfig,
    closest_to_centroid,
    compute_raymap,
    draw_view_indices,
    load_model,
    patchify,
    save_model,
    train_toy,
    unpatchify,
    view_index_encoding,
)
from gradsuite import LAYER_TYPES, layer_case
from scipy.spatial.distance import pdist
from scipy.spatial.transform import Rotation

SMALL = VelocityNetConfig(dim=16, depth=2, heads=2, mlp_ratio=2.0, freq_dim=16, seed=3)


def _inputs(rng, B=2, N=2, M=2, h=4, w=4, C=3):
    z = rng.normal(size=(B, N, h, w, C))
    src = rng.normal(size=(B, M, h, w, C))
    ray = rng.normal(size=(B, N + M, h, w, 6))
    idx = np.stack([draw_view_indices(rng, N + M) for _ in range(B)])
    t = rng.uniform(size=(B, N))
    return z, src, ray, idx, t


def test_patchify_numbered_grid():
    x = np.arange(16.0).reshape(4, 4, 1)
    tok = patchify(x)
    assert tok.shape == (4, 4)
    np.testing.assert_array_equal(tok, [[0, 1, 4, 5], [2, 3, 6, 7], [8, 9, 12, 13], [10, 11, 14, 15]])


def test_patchify_roundtrip(rng):
    x = rng.normal(size=(8, 8, 16))
    tok = patchify(x)
    assert tok.shape == (16, 2 * 2 * 16)
    np.testing.assert_array_equal(unpatchify(tok, 8, 8), x)
    np.testing.assert_array_equal(patchify_tensor(Tensor(x)).data, tok)


def test_patchify_odd():
    with pytest.raises(OddDimensions):
        patchify(np.zeros((5, 4, 3)))


def test_patchify_gradient_is_inverse(rng):
    x = Tensor(rng.normal(size=(2, 4, 6, 3)), requires_grad=True)
    w = rng.normal(size=(2, 6, 12))
    (patchify_tensor(x) * Tensor(w)).sum().backward()
    np.testing.assert_array_equal(x.grad, unpatchify(w, 4, 6))


def test_raymap_self_has_zero_moment(rng):
    cam = random_camera(rng, size=8)
    r = compute_raymap(cam, cam)
    assert r.shape == (8, 8, 6)
    assert np.all(r[..., :3] == 0)


def test_raymap_hand_computed():
    ref = front_camera(size=9, dist=0.0)
    cam = front_camera(size=9, dist=0.0)
    from dataclasses import replace

    cam = replace(cam, translation=np.array([1.0, 0.0, 0.0]))
    r = compute_raymap(cam, ref)
    np.testing.assert_allclose(r[4, 4, 3:], [0, 0, 1], atol=1e-15)
    np.testing.assert_allclose(r[4, 4, :3], [0, -1, 0], atol=1e-15)


def test_raymap_plucker_constraint(rng):
    for _ in range(20):
        a, b = random_camera(rng, size=8), random_camera(rng, size=8)
        r = compute_raymap(a, b, 4, 4)
        np.testing.assert_allclose(np.sum(r[..., :3] * r[..., 3:], -1), 0, atol=1e-6)
        np.testing.assert_allclose(np.linalg.norm(r[..., 3:], axis=-1), 1, atol=1e-12)


def test_raymap_invariant_to_shared_rigid_motion(rng):
    from flowrecon.scenecore import rigid_transform_camera

    a, b = random_camera(rng), random_camera(rng)
    R, t = Rotation.random(random_state=1).as_matrix(), rng.normal(size=3)
    np.testing.assert_allclose(compute_raymap(a, b),
                               compute_raymap(rigid_transform_camera(a, R, t), rigid_transform_camera(b, R, t)),
                               atol=1e-12)


def test_closest_to_centroid(rng):
    views = [random_camera(rng) for _ in range(5)]
    c = np.array([v.center for v in views])
    assert closest_to_centroid(views) == int(np.argmin(np.linalg.norm(c - c.mean(0), axis=1)))


def test_view_index_encoding_zero():
    e = view_index_encoding(0, 32)
    np.testing.assert_array_equal(e[0::2], 0.0)
    np.testing.assert_array_equal(e[1::2], 1.0)


def test_view_index_encoding_injective_and_norm():
    e = view_index_encoding(np.arange(1001), 32)
    assert pdist(e).min() > 1e-6
    norms = np.linalg.norm(e, axis=1)
    assert norms.max() <= 1.2 * norms.min()


def test_view_index_range():
    with pytest.raises(ValueError):
        view_index_encoding(-1, 8)


def test_draw_view_indices(rng):
    for _ in range(50):
        idx = draw_view_indices(rng, 6)
        assert len(set(idx)) == 6 and np.all(np.diff(idx) > 0) and idx.min() >= 0 and idx.max() <= 1000


@pytest.mark.parametrize("kind", LAYER_TYPES)
def test_layer_gradients(kind):
    tol = 5e-3 if kind in ("block", "velocitynet") else 1e-3
    for seed in range(3):
        assert layer_case(kind, seed) < tol


def test_zero_init_multiview_branch_is_inert(rng):
    m = VelocityNet(SMALL, dtype=np.float64)
    # give the rest of the network non-trivial weights; the zero output linears stay zero
    for name, p in m.named_parameters():
        if "mv_out" not in name:
            p.data = p.data + rng.normal(size=p.shape) * 0.2
    z, src, ray, idx, t = _inputs(rng)
    a = m(z, src, ray, idx, t).data
    b = m(z, src, ray, idx, t, use_multiview=False).data
    np.testing.assert_array_equal(a, b)


def test_fresh_model_outputs_zero(rng):
    m = VelocityNet(SMALL)
    z, src, ray, idx, t = _inputs(rng)
    assert np.all(m(z, src, ray, idx, t).data == 0)


def test_source_permutation_invariance(rng):
    m = VelocityNet(SMALL, dtype=np.float64)
    for p in m.parameters():
        p.data = p.data + rng.normal(size=p.shape) * 0.2
    N, M = 2, 3
    z, src, ray, idx, t = _inputs(rng, N=N, M=M)
    perm = np.array([2, 0, 1])
    full = np.concatenate([np.arange(N), N + perm])
    a = m(z, src, ray, idx, t).data
    b = m(z, src[:, perm], ray[:, full], idx[:, full], t).data
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_shape_contract(rng):
    m = VelocityNet(SMALL)
    z = rng.normal(size=(1, 1, 8, 8, 3))
    assert m(z).shape == z.shape
    with pytest.raises(ShapeMismatch):
        m(rng.normal(size=(1, 1, 8, 8, 4)))
    with pytest.raises(ShapeMismatch):
        m(z, rng.normal(size=(1, 1, 4, 4, 3)))
    with pytest.raises(ShapeMismatch):
        m(z, raymaps=np.zeros((1, 2, 8, 8, 6)))


def test_checkpoint_roundtrip(tmp_path, rng):
    cfg = VelocityNetConfig(dim=16, depth=2, heads=2, cond_channels=3, seed=5)
    m = VelocityNet(cfg)
    for p in m.parameters():
        p.data = (p.data + rng.normal(size=p.shape)).astype(np.float32)
    save_model(m, tmp_path / "m.bin")
    back = load_model(tmp_path / "m.bin")
    assert back.cfg == cfg
    for (n1, p1), (n2, p2) in zip(m.named_parameters(), back.named_parameters()):
        assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()
    raw = (tmp_path / "m.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-3])
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "t.bin")
    (tmp_path / "x.bin").write_bytes(raw + b"\0")
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "x.bin")
    (tmp_path / "y.bin").write_bytes(b"NOTMAGIC" + raw[8:])
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "y.bin")


def _tiny_dataset(rng, n=6):
    out = []
    for _ in range(n):
        z1 = rng.uniform(size=(1, 2, 4, 4, 3))
        out.append(FlowBatch(z1 + rng.normal(0, 0.1, z1.shape), z1,
                             {"src": rng.uniform(size=(1, 1, 4, 4, 3)), "raymaps": rng.normal(size=(1, 3, 4, 4, 6)),
                              "indices": np.array([[3, 10, 400]])}))
    return out


def test_zero_lr_keeps_parameters(rng):
    m = VelocityNet(SMALL)
    before = [p.data.copy() for p in m.parameters()]
    train_toy(m, _tiny_dataset(rng), steps=5, lr=0.0, batch_size=2)
    for a, p in zip(before, m.parameters()):
        assert a.tobytes() == p.data.tobytes()


def test_training_history_finite_and_decreasing(rng):
    m = VelocityNet(SMALL)
    _, hist = train_toy(m, _tiny_dataset(rng), steps=150, lr=3e-3, batch_size=4, warmup=10, log_interval=10)
    losses = [h["loss"] for h in hist]
    assert all(np.isfinite(losses))
    assert np.mean(losses[-3:]) < np.mean(losses[:3])


def test_empty_dataset():
    with pytest.raises(ValueError):
        train_toy(VelocityNet(SMALL), [], steps=1)
