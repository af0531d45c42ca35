"""Acceptance gate: one test per criterion, each at its stated tolerance.

Every test records a PASS/FAIL line (shown in the pytest summary) before
asserting.  Run with ``pytest tests/test_acceptance.py -v``.
"""

import time

import numpy as np
import pytest
from sklearn.datasets import make_moons

import corruption
import e2esuite
from acceptlog import record
from conftest import random_camera, random_scene
from flowrecon import flowcore
from flowrecon.scenecore.io import load_scene, save_scene
from flowrecon.splatrender import rasterize
from flowrecon.velocitynet import ToyVelocityMLP, energy_distance, load_model, save_model, train_mlp_flow
from gradsuite import DEEP, LAYER_TYPES, PRIMITIVE_GROUPS, layer_case, primitive_case
from oracles import naive_render
from plansuite import PROPERTIES
from scalesuite import beta_case

pytestmark = pytest.mark.acceptance


def _finish(number, ok, detail, start, budget_s):
    elapsed = time.perf_counter() - start
    in_time = elapsed < budget_s
    record(number, ok and in_time, f"{detail}; {elapsed:.0f}s of {budget_s:.0f}s budget")
    assert ok, detail
    assert in_time, f"took {elapsed:.0f}s, budget {budget_s:.0f}s"


def test_c01_rasterizer_matches_naive_reference():
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 201))
        scene = random_scene(rng, n, degree=int(rng.integers(0, 4)))
        cam = random_camera(rng, size=32)
        ref, _ = naive_render(scene, cam)
        worst = max(worst, float(np.abs(rasterize(scene, cam).color - ref).max()))
    _finish(1, worst <= 1e-4, f"max per-channel error {worst:.2e} (tolerance 1e-4)", start, 120)


def test_c02_gradient_suite():
    start = time.perf_counter()
    worst = {g: 0.0 for g in PRIMITIVE_GROUPS}
    for seed in range(50):
        for g, err in primitive_case(seed).items():
            worst[g] = max(worst[g], err)
    for kind in LAYER_TYPES:
        worst[kind] = max(layer_case(kind, seed) for seed in range(50))
    tol = {k: (5e-3 if k in DEEP else 1e-3) for k in worst}
    bad = [k for k in worst if not worst[k] < tol[k]]
    detail = "worst relative error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    _finish(2, not bad, detail + (f"; failing {bad}" if bad else ""), start, 600)


def test_c03_flow_math():
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    s = flowcore.SIGMA_MIN
    ident, euler = 0.0, 0.0
    for _ in range(1000):
        shape = tuple(rng.integers(1, 5, size=int(rng.integers(1, 4))))
        z0, z1 = rng.normal(size=(2,) + shape) * rng.uniform(0.1, 10)
        scale = max(1.0, np.abs(z0).max(), np.abs(z1).max())
        ident = max(ident, np.abs(flowcore.interpolate_state(z0, z1, 0.0) - z0).max() / scale)
        ident = max(ident, np.abs(flowcore.interpolate_state(z0, z1, 1.0) - (z1 + s * z0)).max() / scale)
        t, h = rng.uniform(0.01, 0.99), 1e-5
        fd = (flowcore.interpolate_state(z0, z1, t + h) - flowcore.interpolate_state(z0, z1, t - h)) / (2 * h)
        ident = max(ident, np.abs(fd - flowcore.target_velocity(z0, z1)).max() / scale)
        dt = rng.dirichlet(np.ones(int(rng.integers(1, 60))))
        out = flowcore.integrate_euler(flowcore.exact_velocity_closure(z0, z1), z0, schedule=dt)
        euler = max(euler, np.abs(out - (z1 + s * z0)).max())
    ok = ident <= 1e-6 and euler <= 1e-5
    _finish(3, ok, f"identity error {ident:.1e} (1e-6), Euler error {euler:.1e} (1e-5)", start, 60)


def _moons(rng, n):
    x, _ = make_moons(n, noise=0.05, random_state=int(rng.integers(2**31)))
    return x


def test_c04_two_moons_transport():
    start = time.perf_counter()
    model, _ = train_mlp_flow(ToyVelocityMLP(hidden=128, depth=3), _moons, steps=2000, batch_size=256)
    rng = np.random.default_rng(1)
    out = flowcore.integrate_euler(model.velocity, rng.normal(size=(10_000, 2)), None, 20)
    ed = energy_distance(out, _moons(rng, 10_000))
    _finish(4, ed < 0.05, f"energy distance {ed:.4f} (< 0.05)", start, 900)


def test_c05_conditional_source_beats_gaussian():
    start = time.perf_counter()
    cond = corruption.heldout_mse("conditional")
    gauss = corruption.heldout_mse("gaussian")
    gain = (gauss - cond) / gauss
    _finish(5, gain >= 0.10, f"held-out MSE conditional {cond:.5f}, Gaussian {gauss:.5f}, "
                             f"relative gain {gain:.1%} (>= 10%)", start, 3600)


def test_c06_identity_preservation():
    corruption.trained_model("conditional")  # shared with criterion 5; training is budgeted there
    start = time.perf_counter()
    drift = corruption.identity_mse()
    ref = corruption.corruption_mse()
    _finish(6, drift < 0.1 * ref, f"identity MSE {drift:.2e} = {drift / ref:.1%} of corruption MSE {ref:.2e} "
                                  f"(< 10%)", start, 300)


def test_c07_end_to_end_ordering():
    start = time.perf_counter()
    rows = [e2esuite.run_scene(seed) for seed in e2esuite.SEEDS]
    ok = all(e2esuite.ordering_holds(r) for r in rows)
    detail = "; ".join(e2esuite.describe(r) for r in rows)
    _finish(7, ok, detail, start, 7200)


def test_c08_view_planning_properties():
    start = time.perf_counter()
    failures = {}
    for name, trial in PROPERTIES.items():
        for seed in range(1000):
            try:
                trial(seed)
            except AssertionError:
                failures[name] = failures.get(name, 0) + 1
    detail = f"{len(PROPERTIES)} properties x 1000 trials, failures {failures or 'none'}"
    _finish(8, not failures, detail, start, 300)


def test_c09_beta_alignment():
    start = time.perf_counter()
    bad, worst = 0, 0.0
    for seed in range(200):
        err, gap = beta_case(seed)
        worst = max(worst, err if gap > 1e-12 else 0.0)
        bad += not (err < 1e-6 or gap <= 1e-12)
    _finish(9, bad == 0, f"{bad}/200 instances off the golden-section optimum (worst argmin gap {worst:.1e})",
            start, 60)


def test_c10_determinism_and_persistence(tmp_path):
    start = time.perf_counter()
    a = e2esuite.cli_chain(tmp_path / "a")
    b = e2esuite.cli_chain(tmp_path / "b")
    chain_ok = all(a[k] == b[k] for k in a)

    rng = np.random.default_rng(10)
    scene = random_scene(rng, 500, degree=3, dtype=np.float32)  # the on-disk precision
    save_scene(scene, tmp_path / "s.flwr")
    back = load_scene(tmp_path / "s.flwr")
    scene_ok = all(np.asarray(getattr(scene, f)).tobytes() == np.asarray(getattr(back, f)).tobytes()
                   for f in ("positions", "log_scales", "quats", "opacity_logits", "sh"))

    model = _random_model(rng)
    save_model(model, tmp_path / "m.bin")
    loaded = load_model(tmp_path / "m.bin")
    model_ok = loaded.cfg == model.cfg and all(
        p.data.tobytes() == q.data.tobytes() for p, q in zip(model.parameters(), loaded.parameters()))
    ok = chain_ok and scene_ok and model_ok
    _finish(10, ok, f"chain bit-identical {chain_ok} ({', '.join(sorted(a))}); scene round trip {scene_ok}; "
                    f"model round trip {model_ok}", start, 600)


def _random_model(rng):
    from flowrecon.velocitynet import VelocityNet

    model = VelocityNet(corruption.model_config())
    for p in model.parameters():
        p.data = (p.data + rng.normal(size=p.shape)).astype(p.data.dtype)
    return model
