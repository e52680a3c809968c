import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deformseg.config import NetConfig, ShapeConfig
from deformseg.data import rasterize_shape
from deformseg.exceptions import DegenerateInputError, MissingDetectorError
from deformseg.metrics import dsc
from deformseg.nn import NetworkModel, dnn_logit
from deformseg.shape_learning import (ModeDetectorSet, MarginalShapeEstimator, OrderError,
                                      build_mode_hypotheses, estimate_mode,
                                      extract_patch_vectors, extract_shape_patch_vector,
                                      fabricate_mode_hypotheses, mode_grid, segment,
                                      train_mode_detectors)
from deformseg.shape_model import ShapeModel, SpaceParams, synthesize_shape
from deformseg.synthetic import SyntheticSpec, generate_synthetic_dataset

SP = SpaceParams(T=(64.0, 60.0), theta=0.05, S=(70.0, 50.0))


def toy_model(M=16, K=3, seed=0):
    """Unit-box ellipse mean with random orthonormal modes."""
    t = 2 * np.pi * np.arange(M) / M
    mean = np.column_stack([0.4 * np.cos(t), 0.4 * np.sin(t)]).reshape(-1)
    q, _ = np.linalg.qr(np.random.default_rng(seed).normal(size=(2 * M, K)))
    return ShapeModel(mean, q, np.array([4e-3, 2e-3, 1e-3][:K]), n_parts=1)


def peaked(u0):
    return lambda X, values: np.exp(-np.abs(np.asarray(values) - u0))


def stub_set(model, b, **kw):
    u = b / model.std
    return ModeDetectorSet({k: peaked(u[k - 1]) for k in range(1, model.n_modes + 1)}, **kw)


# --- patch vectors ----------------------------------------------------------------

def test_patch_vector_length():
    shape = np.random.default_rng(0).random(288) * 50
    assert extract_shape_patch_vector(np.zeros((64, 64)), shape, 15).size == 144 * 225 == 32400
    assert extract_shape_patch_vector(np.zeros((64, 64)), shape[:64], 9).size == 2592


def test_q1_gives_landmark_intensities():
    img = np.random.default_rng(1).random((20, 30))
    shape = np.array([3.0, 4.0, 10.0, 2.0, 29.0, 19.0])
    np.testing.assert_allclose(extract_shape_patch_vector(img, shape, 1),
                               [img[4, 3], img[2, 10], img[19, 29]])


def test_constant_image_and_border_replication():
    v = extract_shape_patch_vector(np.full((16, 16), 0.3), np.array([0.0, 0.0, 15.0, 15.0]), 7)
    np.testing.assert_allclose(v, 0.3, atol=1e-15)


def test_patch_vector_errors():
    with pytest.raises(ValueError):
        extract_shape_patch_vector(np.zeros((8, 8)), np.array([1.0, 1.0]), 4)
    with pytest.raises(DegenerateInputError):
        extract_patch_vectors(np.zeros((8, 8)), np.zeros((1, 0)), 3)


def test_patch_rows_follow_landmark_order():
    img = np.arange(100.0).reshape(10, 10) / 100
    a = extract_shape_patch_vector(img, np.array([2.0, 3.0, 7.0, 5.0]), 3)
    b = extract_shape_patch_vector(img, np.array([7.0, 5.0, 2.0, 3.0]), 3)
    np.testing.assert_array_equal(a[:9], b[9:])


# --- hypotheses -------------------------------------------------------------------

def test_grid_has_25_points():
    g = mode_grid(0.25)
    assert len(g) == 25 and g[0] == -3 and g[-1] == 3


def test_24_negatives_when_true_weight_is_zero():
    model = toy_model()
    img = np.random.default_rng(2).random((120, 128))
    gt = synthesize_shape(model, np.zeros(3), SP)
    h = fabricate_mode_hypotheses(model, img, gt, SP, 1, q=3)
    assert (h.y == 0).sum() == 24 and (h.y == 1).sum() == 1
    assert 0.0 not in h.values[h.y == 0]


def test_negatives_keep_lower_modes_and_zero_higher():
    model = toy_model()
    b = np.array([0.05, -0.04, 0.02])
    gt = synthesize_shape(model, b, SP)
    img = np.random.default_rng(3).random((120, 128))
    h = fabricate_mode_hypotheses(model, img, gt, SP, 2, q=1, extra_positives=3)
    assert np.all(np.abs(h.values[h.y == 0] - h.truth[h.y == 0]) >= 0.25 - 1e-12)
    assert np.all(np.abs(h.values[h.y == 1] - h.truth[h.y == 1]) <= 0.05 + 1e-12)
    u2 = b[1] / model.std[1]
    neg_u = h.values[h.y == 0][0]
    expect = synthesize_shape(model, [b[0], neg_u * model.std[1], 0.0], SP)
    row = np.flatnonzero(h.y == 0)[0]
    np.testing.assert_allclose(h.X[row], extract_shape_patch_vector(img, expect, 1))
    assert h.truth[0] == pytest.approx(u2)
    with pytest.raises(ValueError):
        fabricate_mode_hypotheses(model, img, gt, SP, 4)


@settings(max_examples=30, deadline=None)
@given(b=st.lists(st.floats(-2.5, 2.5), min_size=3, max_size=3), k=st.integers(1, 3))
def test_mode_hypotheses_disjoint(b, k):
    model = toy_model()
    gt = synthesize_shape(model, np.asarray(b) * model.std, SP)
    h = fabricate_mode_hypotheses(model, np.zeros((120, 128)), gt, SP, k, q=1, extra_positives=2)
    pos, neg = h.values[h.y == 1], h.values[h.y == 0]
    assert np.min(np.abs(pos[:, None] - neg[None, :])) >= 0.25 - 0.05 - 1e-9


# --- mode estimation --------------------------------------------------------------

def test_stub_peak_recovered_within_half_step():
    model = toy_model()
    img = np.zeros((120, 128))
    x0 = synthesize_shape(model, np.zeros(3), SP)
    u = 1.234
    b = estimate_mode(peaked(u), img, x0, model, SP, 1, q=1, scan_step=0.05, top_n=9)
    assert abs(b / model.std[0] - u) <= 0.025 + 1e-12
    b1 = estimate_mode(peaked(u), img, x0, model, SP, 1, q=1, top_n=1)
    assert b1 / model.std[0] == pytest.approx(1.25)


@settings(max_examples=30, deadline=None)
@given(u=st.floats(-10, 10), top_n=st.integers(1, 20))
def test_estimate_within_clamp(u, top_n):
    model = toy_model()
    x0 = synthesize_shape(model, np.zeros(3), SP)
    b = estimate_mode(peaked(u), np.zeros((120, 128)), x0, model, SP, 2, q=1, top_n=top_n)
    assert abs(b) <= 3 * model.std[1] + 1e-12


def test_flat_mode_scores_warn_and_keep_mean():
    model = toy_model()
    x0 = synthesize_shape(model, np.zeros(3), SP)
    with pytest.warns(RuntimeWarning):
        assert estimate_mode(lambda X, v: np.ones(len(v)), np.zeros((120, 128)), x0, model, SP,
                             1, q=1) == 0.0


def test_modes_must_run_in_order():
    model = toy_model()
    est = MarginalShapeEstimator(np.zeros((120, 128)), SP, model, stub_set(model, np.zeros(3)))
    with pytest.raises(OrderError):
        est.step(2)
    est.step(1)
    with pytest.raises(OrderError):
        est.step(1)


def test_k0_is_placed_mean():
    model = toy_model()
    res = segment(np.zeros((120, 128)), SP, model, ModeDetectorSet({}), K_use=0)
    np.testing.assert_array_equal(res.shape, SP.apply(model.mean))


def test_perfect_stubs_error_budget():
    model = toy_model()
    b = np.array([1.3, -0.7, 2.1]) * model.std
    truth = synthesize_shape(model, b, SP)
    res = segment(np.zeros((120, 128)), SP, model, stub_set(model, b, q=1, top_n=9))
    rms = np.sqrt(np.mean(np.sum((res.shape - truth).reshape(-1, 2) ** 2, axis=1)))
    budget = np.linalg.norm(SP.apply_linear(model.eigvecs[:, 0] * 2 * 0.05 * model.std[0])
                            .reshape(-1, 2), axis=1).max()
    assert rms <= budget
    assert len(res.stages) == 4


def test_true_weights_reproduce_synthesis():
    model = toy_model()
    b = np.array([0.03, -0.02, 0.01])
    est = MarginalShapeEstimator(np.zeros((120, 128)), SP, model, ModeDetectorSet({}))
    for k in (1, 2, 3):
        est.x = est.x + SP.apply_linear(model.eigvecs[:, k - 1] * b[k - 1])
    np.testing.assert_allclose(est.x, synthesize_shape(model, b, SP), atol=1e-12)


def test_missing_detector_fails_before_any_stage():
    model = toy_model()
    calls = []

    def det(X, v):
        calls.append(1)
        return np.zeros(len(v))

    with pytest.raises(MissingDetectorError):
        segment(np.zeros((120, 128)), SP, model, ModeDetectorSet({1: det, 3: det}), K_use=3)
    assert not calls
    with pytest.raises(ValueError):
        segment(np.zeros((120, 128)), SP, model, ModeDetectorSet({}), K_use=4)


def test_bundle_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    d = 16 * 9
    nets = {k: NetworkModel((d, 3, 1), [rng.normal(size=(3, d)), rng.normal(size=(1, 3))],
                            [np.zeros(3), np.zeros(1)]) for k in (1, 2)}
    ModeDetectorSet(nets, q=3, top_n=4).save(tmp_path / "modes")
    back = ModeDetectorSet.load(tmp_path / "modes")
    assert back.K == 2 and back.q == 3 and back.top_n == 4
    model = toy_model()
    img = rng.random((120, 128))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = segment(img, SP, model, ModeDetectorSet(nets, q=3, top_n=4))
        b = segment(img, SP, model, back)
    np.testing.assert_array_equal(a.shape, b.shape)


# --- trained mode detector --------------------------------------------------------

@pytest.mark.slow
def test_trained_mode1_detector_generalises():
    ds = generate_synthetic_dataset(SyntheticSpec(count=36, seed=5))

    def samples(idx):
        out = []
        for i in idx:
            t = ds.truths[i]
            out.append((ds.images[i].pixels, ds.shapes[i], ds.models[t["group"]],
                        SpaceParams.from_dict(t["space_params"])))
        return out

    cfg = ShapeConfig(q=9, extra_positives=3,
                      net=NetConfig(hidden_dims=(64, 16), pretrain_lr=0.002, finetune_lr=0.1,
                                    batch_size=32, pretrain_epochs=2, finetune_epochs=40))
    dets = train_mode_detectors(samples(range(24)), 1, cfg, seed=0)
    h, _ = build_mode_hypotheses(samples(range(24, 36)), 1, cfg)
    acc = np.mean((dnn_logit(dets.detector(1), h.X) > 0) == (h.y == 1))
    assert acc >= 0.90
    again = train_mode_detectors(samples(range(24)), 1, cfg, seed=0)
    assert np.array_equal(again.detector(1).weights[0], dets.detector(1).weights[0])
    # one stage of refinement should not hurt the overlap with the truth
    img, shape, model, sp = samples([30])[0]
    dims = ds.images[30].dims
    k0 = segment(img, sp, model, dets, K_use=0).shape
    k1 = segment(img, sp, model, dets, K_use=1).shape
    truth = rasterize_shape(shape, dims)
    assert dsc(rasterize_shape(k1, dims), truth) >= dsc(rasterize_shape(k0, dims), truth) - 0.01
