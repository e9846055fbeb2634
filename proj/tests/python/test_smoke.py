import math

import numpy as np
import pytest
from scipy.spatial import cKDTree

import gcut3r as g


def test_rays_hand_example():
    rays = g.encode_rays(g.Intrinsics(2, 2, 1, 1), None, 2, 4)
    assert rays.shape == (3, 2, 4)
    np.testing.assert_allclose(rays[:, 1, 3], [math.sqrt(0.5), 0.0, math.sqrt(0.5)], atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(rays, axis=0), 1.0, atol=1e-12)


def test_rays_rotate_with_pose():
    k = g.Intrinsics(5, 4, 1.5, 2.5)
    pose = g.Pose(g.axis_angle([0.3, -1, 2], 0.7), [1, 2, 3])
    local = g.encode_rays(k, None, 4, 3)
    world = g.encode_rays(k, pose, 4, 3)
    np.testing.assert_allclose(np.einsum("ij,jhw->ihw", pose.rotation(), local), world, atol=1e-12)
    assert np.array_equal(g.encode_rays(k, g.Pose(), 4, 3), local)


def test_pose_map_and_depth_encoding():
    pm = g.encode_pose_map(g.Pose([1, 0, 0, 0], [1, 2, 3]), 2, 3)
    assert np.array_equal(pm, np.broadcast_to(np.array([1.0, 2, 3])[:, None, None], (3, 2, 3)))
    enc = g.encode_depth(np.array([[2.0, 9.0, 4.0]]), np.array([[1, 0, 1]]), scale=4.0)
    assert np.array_equal(enc, [[[0.5, 0.0, 1.0]], [[1.0, 0.0, 1.0]]])


def test_loss_values():
    r = g.pointmap_loss([[[0.0]], [[2.0]], [[0.0]]], [[0.5]], np.zeros((3, 1, 1)), [[1.0]], alpha=0.2)
    assert r["loss"] == pytest.approx(0.5 * 2.0 - 0.2 * math.log(0.5), abs=1e-12)
    r = g.pose_loss([0, 1, 0, 0], [1, 0, 0], [1, 0, 0, 0], [0, 0, 0])
    assert r["loss"] == pytest.approx(1.0 + math.sqrt(2.0), abs=1e-12)
    flipped = g.pose_loss([0, 1, 0, 0], [1, 0, 0], [-1, 0, 0, 0], [0, 0, 0])
    assert flipped["loss"] == r["loss"]


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    pred, gt = rng.normal(size=(3, 2, 2)), rng.normal(size=(3, 2, 2))
    conf, mask = rng.uniform(1.2, 3, size=(2, 2)), np.array([[1.0, 1.0], [0.0, 1.0]])
    r = g.pointmap_loss(pred, conf, gt, mask, with_grad=True)
    eps = 1e-6
    for idx in np.ndindex(pred.shape):
        hi, lo = pred.copy(), pred.copy()
        hi[idx] += eps
        lo[idx] -= eps
        numeric = (g.pointmap_loss(hi, conf, gt, mask)["loss"] - g.pointmap_loss(lo, conf, gt, mask)["loss"]) / (2 * eps)
        assert r["grad_pointmap"][idx] == pytest.approx(numeric, rel=1e-6, abs=1e-8)


def test_sequence_is_deterministic_and_consistent():
    a, b = g.gen_sequence(3), g.gen_sequence(3)
    assert len(a) == g.SEQUENCE_LENGTH
    for fa, fb in zip(a, b):
        assert np.array_equal(fa["image"], fb["image"])
    f0 = a[0]
    assert f0["image"].shape == (3, 32, 32)
    # frame-0 pointmap is the unprojected frame-0 depth
    pts = g.unproject(f0["depth"], f0["valid"], f0["intrinsics"])
    valid = f0["valid"].astype(bool)
    np.testing.assert_allclose(pts[:, valid], f0["pointmap"][:, valid], atol=1e-9)


def test_metrics_against_scipy_and_closed_form():
    rng = np.random.default_rng(1)
    pred, gt = rng.normal(size=(150, 3)), rng.normal(size=(120, 3))
    acc = cKDTree(gt).query(pred)[0]
    comp = cKDTree(pred).query(gt)[0]
    r = g.acc_comp(pred, gt)
    assert r["acc_mean"] == pytest.approx(acc.mean(), abs=1e-12)
    assert r["comp_median"] == pytest.approx(np.median(comp), abs=1e-12)

    rot = g.quat_to_rot(g.axis_angle([1, 2, 3], 1.1))
    s, r_fit, t = g.umeyama_sim3(pred, 2.5 * pred @ rot.T + [1, -2, 0.5])
    assert s == pytest.approx(2.5, abs=1e-10)
    np.testing.assert_allclose(r_fit, rot, atol=1e-10)
    np.testing.assert_allclose(t, [1, -2, 0.5], atol=1e-10)


def test_errors_carry_their_code():
    with pytest.raises(g.Error) as e:
        g.acc_comp(np.zeros((0, 3)), np.zeros((4, 3)))
    assert e.value.code == "empty-cloud"
    with pytest.raises(g.Error) as e:
        g.gen_sequence(1, profile="nope")
    assert e.value.code == "usage"


def test_zero_init_fusion_ignores_priors():
    model = g.Model(g.ModelConfig.tiny())
    base = model.infer(7, "noisy", "")
    for guidance in ["K", "PD", "KPD"]:
        for p, q in zip(base, model.infer(7, "noisy", guidance)):
            for key in p:
                assert np.array_equal(p[key], q[key])
    cfg = g.ModelConfig.tiny()
    cfg.zero_init_fusion = False
    standard = g.Model(cfg)
    assert not np.array_equal(standard.infer(7, "noisy", "")[0]["pointmap"], standard.infer(7, "noisy", "KPD")[0]["pointmap"])


def test_train_save_load_round_trip(tmp_path):
    g.generate_corpus(tmp_path / "data", 6, 3, "noisy", 0.34, image_size=16)
    cfg = {"preset": "tiny", "image_size": 16, "patch": 4, "total_steps": 4, "warmup_steps": 1, "seed": 2}
    model = g.train(cfg, tmp_path / "data", tmp_path / "run")
    loaded = g.Model.load(tmp_path / "run" / "model.ckpt")
    assert loaded.num_parameters == model.num_parameters
    a, b = model.infer(1, guidance="KPD"), loaded.infer(1, guidance="KPD")
    assert np.array_equal(a[3]["pointmap"], b[3]["pointmap"])
    row = loaded.evaluate(1, guidance="D")
    assert len(row["l2"]) == g.SEQUENCE_LENGTH and math.isfinite(row["mean_l2"])
