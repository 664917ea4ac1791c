import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semiseg import autodiff as ad
from semiseg.autodiff import Tensor, gradcheck
from semiseg.distill import (DistillConfig, HuberParams, bilinear_matrix, distill_term, feature_distill_loss,
                             huber, meta_targets, resize_bilinear, sd_teacher_objective, self_similarity,
                             similarity_rows_batched, structural_distill_loss)
from semiseg.matching import LossWeights, set_loss
from semiseg.model import forward, init_params
from semiseg.oracle import Oracle, OracleConfig
from semiseg.synthdata import SceneConfig, generate_scene

from helpers import TINY, random_labels


def test_similarity_examples():
    c = self_similarity(np.array([[1.0, 0.0], [0.0, 1.0]])).data
    np.testing.assert_allclose(c, np.eye(2), atol=1e-6)
    c = self_similarity(np.ones((3, 4))).data
    np.testing.assert_allclose(c, np.ones((4, 4)), atol=1e-6)
    c = self_similarity(np.array([[1.0, 1.0], [0.0, 1.0]])).data
    assert c[0, 1] == pytest.approx(0.70711, abs=1e-5)


def test_similarity_rows_and_bounds():
    f = np.random.default_rng(0).normal(size=(3, 2, 2))
    full = self_similarity(f).data
    part = self_similarity(f, [3, 0]).data
    np.testing.assert_allclose(part, full[[3, 0]], atol=1e-6)
    with pytest.raises(IndexError):
        self_similarity(f, [4])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 5), st.integers(2, 9))
def test_encoder_similarity_symmetric_unit_diagonal_and_scale_invariant(seed, d, n):
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(d, n))
    c = self_similarity(f).data
    assert np.all(np.abs(c) <= 1 + 1e-5)
    np.testing.assert_allclose(c, c.T, atol=1e-5)
    np.testing.assert_allclose(np.diag(c), 1.0, atol=1e-5)
    scaled = self_similarity(f * rng.uniform(0.1, 10, size=(1, n))).data
    np.testing.assert_allclose(scaled, c, atol=1e-5)


def test_batched_rows_match_single_map():
    rng = np.random.default_rng(1)
    feats = rng.normal(size=(2, 6, 3))
    rows = np.array([[0, 5], [2, 2]])
    c = similarity_rows_batched(Tensor(feats), rows).data
    for b in range(2):
        np.testing.assert_allclose(c[b], self_similarity(feats[b].T, rows[b]).data, atol=1e-6)


def test_structural_loss_hand_cases():
    c = np.zeros((2, 2))
    assert float(structural_distill_loss(c, c).data) == 0.0
    diff = np.array([[0.0, 0.5], [0.5, 0.0]])
    assert float(structural_distill_loss(diff, np.zeros((2, 2))).data) == pytest.approx(0.125, abs=1e-6)
    assert float(structural_distill_loss(np.array([[2.0]]), np.zeros((1, 1))).data) == pytest.approx(1.5, abs=1e-6)
    with pytest.raises(ad.ShapeError):
        structural_distill_loss(np.zeros((2, 2)), np.zeros((2, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_structural_loss_nonnegative_zero_only_on_equality(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1, 1, (3, 4))
    b = rng.uniform(-1, 1, (3, 4))
    assert float(structural_distill_loss(a, b).data) > 0
    assert float(structural_distill_loss(a, a).data) == 0.0


def test_huber_branches_and_kink():
    np.testing.assert_allclose(huber(np.array([0.5, -2.0, 0.0]), 1.0), [0.125, 1.5, 0.0])
    assert huber(1.0 - 1e-9, 1.0) == pytest.approx(huber(1.0 + 1e-9, 1.0), abs=1e-6)
    # one-sided derivatives at the kink: x on the quadratic side, 1 on the linear side
    h = 1e-6
    assert (huber(1.0, 1.0) - huber(1.0 - h, 1.0)) / h == pytest.approx(1.0, abs=1e-5)
    assert (huber(1.0 + h, 1.0) - huber(1.0, 1.0)) / h == pytest.approx(1.0, abs=1e-5)
    for x, slope in ((0.999, 0.999), (1.001, 1.0), (-1.5, -1.0)):
        t = Tensor([x], requires_grad=True)
        with ad.Tape() as tape:
            y = huber(t, 1.0).sum()
        tape.backward(y)
        assert float(t.grad[0]) == pytest.approx(slope, rel=1e-6)
    with pytest.raises(ValueError):
        HuberParams(0.0)


def test_feature_distill_examples():
    rng = np.random.default_rng(2)
    f = rng.normal(size=(4, 3))
    assert float(feature_distill_loss(f, f).data) == 0.0
    assert float(feature_distill_loss(f, f + 0.5).data) == pytest.approx(0.25 * 3, rel=1e-5)
    a, b = rng.normal(size=(2, 2, 2)), rng.normal(size=(2, 2, 2))
    loops = 0.0
    for i in range(2):
        for j in range(2):
            loops += sum((a[i, j, k] - b[i, j, k]) ** 2 for k in range(2))
    assert float(feature_distill_loss(a.reshape(4, 2), b.reshape(4, 2)).data) == pytest.approx(loops / 4, rel=1e-5)
    with pytest.raises(ad.ShapeError):
        feature_distill_loss(np.zeros((4, 2)), np.zeros((4, 3)))


def test_bilinear_resize_rows_sum_to_one_and_identity():
    m = bilinear_matrix(4, 8)
    np.testing.assert_allclose(m.sum(1), 1.0)
    np.testing.assert_allclose(bilinear_matrix(5, 5), np.eye(5))
    x = np.random.default_rng(0).normal(size=(3, 4, 4))
    up = resize_bilinear(x, (8, 8)).data
    assert up.shape == (3, 8, 8)
    np.testing.assert_allclose(resize_bilinear(np.ones((1, 4, 4)), (6, 6)).data, 1.0, atol=1e-6)


def test_config_rejects_decoder_feature_mix():
    with pytest.raises(ValueError):
        DistillConfig(mode="decoder", loss="feature")
    with pytest.raises(ValueError):
        DistillConfig(mode="other")


# ---------------------------------------------------------------------------
# the teacher objective


SCENES = SceneConfig(height=32, width=32, num_classes=3, min_instances=2, max_instances=3, min_radius=5, max_radius=8,
                     min_visible_fraction=0.3)


def _setup(seed, mode="decoder", loss="structural"):
    rng = np.random.default_rng(seed)
    scenes = [generate_scene(SCENES, seed * 10 + j) for j in range(2)]
    oracle = Oracle(OracleConfig(noise_std=0.1, stride=8, feature_dim=16))
    dcfg = DistillConfig(mode=mode, loss=loss, points=5)
    target, rows = meta_targets(scenes, oracle, dcfg, TINY.grid,
                                [np.random.default_rng(seed + j) for j in range(2)])
    # random points in parameter space, not just the zero-bias initialization
    params = {k: v + rng.normal(0, 0.3, v.shape) for k, v in init_params(TINY, rng).items()}
    return scenes, params, dcfg, target, rows


def test_objective_without_distillation_is_labeled_loss():
    scenes, params, _, _, _ = _setup(0)
    images = np.stack([s.image for s in scenes])
    pred = forward(params, images, TINY)
    labels = [s.instances[: TINY.num_queries] for s in scenes]
    total, l_lb, l_sd = sd_teacher_objective(pred, labels, None, None, None)
    assert l_sd is None
    assert float(total.data) == float(set_loss(pred, labels, LossWeights()).data)


def test_zero_noise_meta_features_give_zero_distillation():
    scene = generate_scene(SCENES, 4)
    oracle = Oracle(OracleConfig(noise_std=0.0, stride=8, feature_dim=16))
    fmap = oracle.meta_features(scene, "encoder", None, np.random.default_rng(0))
    feats = Tensor(fmap.reshape(fmap.shape[0], -1).T[None])
    for loss in ("structural", "feature"):
        dcfg = DistillConfig(mode="encoder", loss=loss)
        target, rows = meta_targets([scene], oracle, dcfg, TINY.grid, [np.random.default_rng(0)])
        assert float(distill_term(feats, target, rows, dcfg).data) == pytest.approx(0.0, abs=1e-6)


@pytest.mark.parametrize("mode,loss", [("decoder", "structural"), ("encoder", "structural"), ("encoder", "feature")])
def test_distill_term_gradient(mode, loss):
    for seed in range(20):
        _, _, dcfg, target, rows = _setup(seed, mode, loss)
        feats = np.random.default_rng(seed).normal(size=(2, TINY.grid[0] * TINY.grid[1], 16 if loss == "feature" else 4))
        assert gradcheck(lambda f: distill_term(f, target, rows, dcfg), [feats]) < 1e-4


# parameters downstream of the ReLU trunk: the objective is smooth in them
SMOOTH = ("pe_w2", "pe_b2", "queries", "attn_q", "attn_k", "attn_v", "cls_w", "mask_w", "mask_bias_w")


def _objective_fn(names, params, scenes, dcfg, target, rows):
    images = np.stack([s.image for s in scenes])
    labels = [s.instances[: TINY.num_queries] for s in scenes]

    def f(*arrays):
        p = dict(params)
        p.update(zip(names, arrays))
        pred = forward(p, images, TINY)
        return sd_teacher_objective(pred, labels, target, rows, dcfg)[0]

    return f


@pytest.mark.parametrize("seed", range(20))
def test_full_teacher_objective_gradient(seed):
    scenes, params, dcfg, target, rows = _setup(seed)
    f = _objective_fn(SMOOTH, params, scenes, dcfg, target, rows)
    assert gradcheck(f, [params[n] for n in SMOOTH], joint=True) < 1e-4


def test_full_teacher_objective_gradient_all_parameters():
    scenes, params, dcfg, target, rows = _setup(99, "encoder")
    names = sorted(params)
    f = _objective_fn(names, params, scenes, dcfg, target, rows)
    assert gradcheck(f, [params[n] for n in names], joint=True) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_full_student_objective_gradient(seed):
    from semiseg.matching import student_objective

    scenes, params, _, _, _ = _setup(seed)
    rng = np.random.default_rng(seed)
    l_images = np.stack([s.image for s in scenes])
    u_images = np.stack([generate_scene(SCENES, 500 + seed).image])
    l_labels = [s.instances[: TINY.num_queries] for s in scenes]
    pseudo = [random_labels(rng, TINY, 2)]
    w = LossWeights()

    def f(*arrays):
        p = dict(params)
        p.update(zip(SMOOTH, arrays))
        l_lb = set_loss(forward(p, l_images, TINY), l_labels, w)
        l_ulb = set_loss(forward(p, u_images, TINY), pseudo, w)
        return student_objective(l_lb, l_ulb, w)

    assert gradcheck(f, [params[n] for n in SMOOTH], joint=True) < 1e-4
