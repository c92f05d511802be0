import math

import numpy as np
import pytest

from patchforge import attack as atk
from patchforge import eot
from patchforge import gradcore as gc
from patchforge.detector import DetectorConfig, MiniYOLO, detection_loss
from patchforge.scenegen import SceneConfig, make_dataset

SMALL = DetectorConfig(image_size=32, S=4, B=2, C=3, anchors=((8, 8), (16, 16)), channels=(4, 6, 8, 8))
SCENES = SceneConfig(image_size=32, min_object_size=8, max_object_size=16, classes=("circle", "square", "triangle"))
RANGES = eot.TransformRanges(scale=(6, 10), image_size=32)


@pytest.fixture(scope="module")
def data():
    return make_dataset(3, SCENES, 12)


@pytest.fixture(scope="module")
def model():
    return MiniYOLO(SMALL, seed=5)


def f64(model):
    return MiniYOLO(model.config, {k: gc.Tensor(v.data.astype(np.float64)) for k, v in model.params.items()})


def small_config(**kw):
    base = dict(patch_size=8, ranges=RANGES, iterations=2, steps=2, restarts=2, batch_size=3, val_every=1)
    base.update(kw)
    return atk.AttackConfig(**base)


def test_zero_gradient_leaves_patch(monkeypatch, data, model):
    monkeypatch.setattr(atk, "patch_loss_and_grad", lambda p, *a, **k: (1.0, np.zeros(np.shape(p))))
    patch = np.random.default_rng(0).random((8, 8, 3)).astype(np.float32)
    samples = [eot.neutral(8)] * 2
    out, _ = atk.attack_step_pgd(patch, data.images[:2], data.truths[:2], samples, model, 0.1,
                                 atk.Velocity.zeros(patch))
    assert out.tobytes() == patch.tobytes()
    out, _ = atk.attack_step_dpatch(patch, data.images[:2], samples, model, 0.1, atk.Velocity.zeros(patch))
    assert out.tobytes() == patch.tobytes()


def test_pgd_clips_at_one(monkeypatch, data, model):
    monkeypatch.setattr(atk, "patch_loss_and_grad", lambda p, *a, **k: (1.0, np.ones(np.shape(p))))
    patch = np.full((8, 8, 3), 0.95, np.float32)
    out, _ = atk.attack_step_pgd(patch, data.images[:1], data.truths[:1], [eot.neutral(8)], model, 0.1,
                                 atk.Velocity.zeros(patch))
    assert np.all(out == 1.0)


def test_single_pixel_update_follows_fd_slope(data, model):
    with gc.precision(np.float64):
        m = f64(model)
        img = data.images[:1].astype(np.float64)
        truth = data.truths[:1]
        samples = [eot.TransformSample(scale=1.0, tx=12.0, ty=9.0)]
        patch = np.full((1, 1, 3), 0.5)

        def J(p):
            out, _ = eot.composite(p, img, samples)
            return detection_loss(m.forward(out), truth, SMALL).item()

        out, _ = atk.attack_step_pgd(patch, img, truth, samples, m, 1e-3, atk.Velocity.zeros(patch), momentum=0.0)
        idx, est = gc.finite_difference_gradient(J, patch, 1e-4)
    step = (out.astype(np.float64) - patch).reshape(-1)
    assert np.all(np.sign(step[idx]) == np.sign(est))


def test_dpatch_target_neutral():
    (b,) = atk.build_dpatch_target(eot.neutral(32), 2)
    assert b.class_id == 2 and b.coords == (0, 0, 32, 32)


def test_dpatch_target_rotated_matches_corners():
    rng = np.random.default_rng(1)
    for _ in range(10):
        t = eot.sample_transform(eot.TransformRanges(), rng)
        target = atk.build_dpatch_target(t, 0)
        assert len(target) == 1
        q = eot._project(eot.homography(t, 32, 128), eot.corners(32))
        assert target[0].coords == pytest.approx((*q.min(0), *q.max(0)), abs=1e-9)


@pytest.mark.parametrize("lr", [1e-3, 1e-2, 1e-1])
def test_dpatch_small_step_descends(data, model, lr):
    with gc.precision(np.float64):
        m = f64(model)
        imgs = data.images[:3].astype(np.float64)
        samples = [eot.sample_transform(RANGES, s, 8) for s in range(3)]
        targets = [atk.build_dpatch_target(t, 0, 8, 32) for t in samples]
        patch = np.random.default_rng(2).uniform(0.2, 0.8, (8, 8, 3))

        def J(p):
            out, _ = eot.composite(p, imgs, samples)
            return detection_loss(m.forward(out), targets, SMALL).item()

        out, _ = atk.attack_step_dpatch(patch, imgs, samples, m, lr, atk.Velocity.zeros(patch), momentum=0.0)
        assert J(out.astype(np.float64)) <= J(patch)


def test_pgd_small_step_ascends(data, model):
    rng = np.random.default_rng(3)
    with gc.precision(np.float64):
        m = f64(model)
        ok = 0
        trials = 20
        for _ in range(trials):
            idx = rng.choice(len(data), 3, replace=False)
            imgs = data.images[idx].astype(np.float64)
            truths = [data.truths[i] for i in idx]
            samples = [eot.neutral(8, *rng.integers(0, 24, 2))] * 3
            patch = rng.uniform(0.1, 0.9, (8, 8, 3))

            def J(p):
                out, _ = eot.composite(p, imgs, samples)
                return detection_loss(m.forward(out), truths, SMALL).item()

            out, _ = atk.attack_step_pgd(patch, imgs, truths, samples, m, 1e-4, atk.Velocity.zeros(patch),
                                         momentum=0.0)
            ok += J(out.astype(np.float64)) >= J(patch)
    assert ok >= 0.95 * trials


def test_zero_steps_returns_initial_patch(data, model):
    cfg = small_config(restarts=1, steps=0)
    res = atk.run_attack(cfg, data, data, model, seed=4)
    expected = atk.initial_patch(cfg, np.random.default_rng([4, 0]))
    assert res.patch.tobytes() == expected.tobytes()
    assert res.histories[0].step == [] and res.best == 0


def test_lr_schedule():
    cfg = atk.AttackConfig()
    assert cfg.lr_at(10) == pytest.approx(0.09025, abs=1e-15)
    assert cfg.lr_at(4) == 0.1 and cfg.lr_at(5) == pytest.approx(0.095)


def test_invalid_config():
    with pytest.raises(ValueError):
        atk.AttackConfig(lr=0)
    with pytest.raises(ValueError):
        atk.AttackConfig(momentum=1.0)
    with pytest.raises(ValueError):
        atk.AttackConfig(restarts=0)
    with pytest.raises(ValueError):
        atk.AttackConfig(method="fgsm")


def test_run_is_deterministic_and_detector_untouched(data, model):
    before = [p.data.tobytes() for p in model.parameters()]
    cfg = small_config()
    a = atk.run_attack(cfg, data, data, model, seed=7)
    b = atk.run_attack(cfg, data, data, model, seed=7)
    assert a.patch.tobytes() == b.patch.tobytes() and a.best == b.best
    assert [p.data.tobytes() for p in model.parameters()] == before
    h = a.histories[0]
    assert len(h.loss) == 2 and len(h.patch_min) == 4 and not math.isnan(h.final_map)


def test_validation_every_five_steps(data, model):
    cfg = small_config(steps=7, iterations=1, restarts=1, val_every=5)
    (h,) = atk.run_attack(cfg, data, data, model).histories
    validated = [s for s, m in zip(h.step, h.map50) if not math.isnan(m)]
    assert validated == [4, 6]
    assert h.lr == [cfg.lr_at(s) for s in range(7)]


def test_clipped_modes_stay_in_range_and_unclipped_dpatch_escapes(data, model):
    for method in ("pgd", "dpatch"):
        (h,) = atk.run_attack(small_config(method=method, restarts=1, iterations=5), data, data, model).histories
        assert min(h.patch_min) >= 0.0 and max(h.patch_max) <= 1.0
    cfg = small_config(method="dpatch", clip=False, restarts=1, iterations=5, lr=5.0)
    (h,) = atk.run_attack(cfg, data, data, model).histories
    assert min(h.patch_min) < 0.0 or max(h.patch_max) > 1.0


def test_best_restart_has_lowest_final_map(data, model):
    res = atk.run_attack(small_config(restarts=3), data, data, model, seed=1)
    maps = [h.final_map for h in res.histories]
    assert maps[res.best] == min(maps)


def test_non_finite_gradient_aborts_with_completed_restarts(monkeypatch, data, model):
    real = atk.patch_loss_and_grad
    calls = {"n": 0}

    def poisoned(*a, **k):
        calls["n"] += 1
        loss, g = real(*a, **k)
        return (loss, g * np.nan) if calls["n"] > 4 else (loss, g)

    monkeypatch.setattr(atk, "patch_loss_and_grad", poisoned)
    with pytest.raises(atk.NonFiniteGradient) as err:
        atk.run_attack(small_config(), data, data, model)
    assert err.value.restart == 1 and len(err.value.completed) == 1


def test_history_csv(tmp_path):
    h = atk.AttackHistory(0, [0, 1], [1.5, 2.0], [0.1, 0.1], [math.nan, 0.25])
    h.to_csv(tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().splitlines() == [
        "step,loss,lr,map50", "0,1.500000,0.1,", "1,2.000000,0.1,0.250000"]


def test_patch_roundtrip(tmp_path):
    p = np.random.default_rng(0).normal(size=(5, 5, 3)).astype(np.float32)
    atk.save_patch(tmp_path / "p.pft", p)
    assert atk.load_patch(tmp_path / "p.pft").tobytes() == p.tobytes()
    atk.save_patch_png(tmp_path / "p.png", p)
    assert (tmp_path / "p.png").stat().st_size > 0
