import filecmp
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deformseg.data import (AugmentConfig, DatasetManifest, GrayImage, IntensityPCA, augment,
                            apply_intensity_perturbation, balance_classes, fill_polygon,
                            flip_image, flip_shape, load_and_normalize, load_dataset,
                            mirror_permutation, normalize_raw, rasterize_shape, read_pgm,
                            resize_image, save_image, write_pgm)
from deformseg.exceptions import DegenerateInputError, DimensionError
from deformseg.shape_model import SpaceParams, project_shape
from deformseg.space import derive_box
from deformseg.synthetic import (SyntheticSpec, generate_synthetic_dataset,
                                 write_synthetic_dataset)


# --- normalisation and files -----------------------------------------------------

@pytest.mark.parametrize("raw,expect", [(4095, 4095 / 4096), (0, 0.0), (2048, 0.5)])
def test_normalize_examples(raw, expect, tmp_path):
    write_pgm(tmp_path / "a.pgm", np.full((3, 4), raw))
    img = load_and_normalize(tmp_path / "a.pgm", 12)
    assert img.dims == (4, 3)
    assert np.all(img.pixels == expect)


def test_normalize_rejects_out_of_range(tmp_path):
    write_pgm(tmp_path / "a.pgm", np.full((2, 2), 4096))
    with pytest.raises(ValueError):
        load_and_normalize(tmp_path / "a.pgm", 12)
    with pytest.raises(FileNotFoundError):
        load_and_normalize(tmp_path / "missing.pgm", 12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 4095), min_size=2, max_size=50))
def test_normalization_order_preserving(raw):
    raw = np.asarray(raw)
    out = normalize_raw(raw, 12)
    assert np.all(out >= 0) and np.all(out < 1)
    order = np.argsort(raw, kind="stable")
    assert np.all(np.diff(out[order]) >= 0)


def test_pgm_roundtrip_16bit(tmp_path):
    raw = np.random.default_rng(0).integers(0, 4096, (7, 5))
    write_pgm(tmp_path / "x.pgm", raw)
    back, maxval = read_pgm(tmp_path / "x.pgm")
    assert maxval == 65535 and np.array_equal(back, raw)


def test_gray_image_invariants():
    with pytest.raises(ValueError):
        GrayImage(np.full((2, 2), 1.5))
    with pytest.raises(ValueError):
        GrayImage(np.zeros((2, 2)), spacing=(0.0, 1.0))


# --- resampling -------------------------------------------------------------------

def test_resize_identity_and_constant():
    px = np.random.default_rng(1).random((12, 9))
    out = resize_image(GrayImage(px), (9, 12))
    assert np.max(np.abs(out.pixels - px)) <= 1e-12
    const = resize_image(GrayImage(np.full((10, 10), 0.3)), (17, 23))
    np.testing.assert_allclose(const.pixels, 0.3, atol=1e-12)


def test_resize_upsampled_ramp_and_spacing():
    W = 32
    ramp = np.tile(np.arange(W) / (2 * W), (8, 1))
    out = resize_image(GrayImage(ramp, spacing=(0.5, 0.5)), (2 * W, 16))
    xs = (np.arange(2 * W) + 0.5) / 2 - 0.5
    expect = xs / (2 * W)
    interior = slice(4, 2 * W - 4)
    assert np.max(np.abs(out.pixels[:, interior] - expect[interior])) <= 1e-3
    assert out.spacing == (0.25, 0.25)
    with pytest.raises(DimensionError):
        resize_image(GrayImage(ramp), (0, 4))


# --- augmentation -----------------------------------------------------------------

def test_flip_involution():
    px = np.random.default_rng(2).random((6, 9))
    assert np.array_equal(flip_image(flip_image(px, "h"), "h"), px)
    shape = np.random.default_rng(3).random(16) * 8
    np.testing.assert_allclose(flip_shape(flip_shape(shape, (9, 6), "h"), (9, 6), "h"), shape)
    np.testing.assert_allclose(flip_shape(flip_shape(shape, (9, 6), "v"), (9, 6), "v"), shape)


def test_mirror_permutation_swaps_sides():
    assert mirror_permutation(8, 2).tolist() == [4, 5, 6, 7, 0, 1, 2, 3]


def test_intensity_zero_alpha_and_hand_formula():
    px = np.random.default_rng(4).random((5, 6)) * 0.5
    basis = np.random.default_rng(5).normal(0, 1, (1, 5, 6))
    np.testing.assert_array_equal(apply_intensity_perturbation(px, basis, [2.0], [0.0]), px)
    out = apply_intensity_perturbation(px, basis, [0.7], [0.03], clip=False)
    assert abs(out[2, 3] - (px[2, 3] + 0.03 * 0.7 * basis[0, 2, 3])) <= 1e-12


def test_intensity_pca_component_limit():
    imgs = [np.random.default_rng(i).random((16, 16)) for i in range(3)]
    with pytest.raises(ValueError):
        IntensityPCA(n_components=5, size=8).fit(imgs)


def test_augment_counts_flips_and_theta():
    rng = np.random.default_rng(6)
    imgs = [rng.random((20, 30)) for _ in range(3)]
    shapes = [rng.random(8) * 19 for _ in range(3)]
    cfg = AugmentConfig(flips=("h",), intensity_copies=2, n_components=2, pca_size=8, seed=1)
    out_i, out_s, origin, extras = augment(imgs, shapes, cfg, None, 2,
                                           [{"theta": 0.1 * i} for i in range(3)])
    assert len(out_i) == 3 * 2 * 3
    assert origin[3] == (0, "flip-h") and extras[4]["theta"] == -0.1
    assert np.array_equal(out_i[3], imgs[0][:, ::-1])
    again = augment(imgs, shapes, cfg, None, 2)[0]
    assert all(np.array_equal(a, b) for a, b in zip(out_i, again))


def test_balance_classes_ratio():
    X = np.arange(20).reshape(10, 2)
    y = np.array([1, 1, 0, 0, 0, 0, 0, 0, 0, 0])
    Xb, yb = balance_classes(X, y, np.random.default_rng(0))
    assert (yb == 1).sum() == (yb == 0).sum() == 2
    with pytest.raises(DegenerateInputError):
        balance_classes(X, np.zeros(10), np.random.default_rng(0))


# --- rasterisation ----------------------------------------------------------------

def test_rasterize_square_counts_centres():
    sq = np.array([[2.5, 2.5], [12.5, 2.5], [12.5, 12.5], [2.5, 12.5]])
    assert fill_polygon(sq, (20, 20)).sum() == 100


def test_rasterize_degenerate_and_disk():
    assert fill_polygon(np.array([[1.0, 1.0], [5.0, 5.0], [9.0, 9.0]]), (12, 12)).sum() == 0
    t = 2 * math.pi * np.arange(720) / 720
    disk = np.column_stack([40 + 20 * np.cos(t), 40 + 20 * np.sin(t)])
    area = fill_polygon(disk, (80, 80)).sum()
    assert abs(area - math.pi * 400) <= 0.02 * math.pi * 400


def test_rasterize_rejects_self_intersection():
    bowtie = np.array([0.0, 0.0, 10.0, 10.0, 10.0, 0.0, 0.0, 10.0])
    with pytest.raises(DegenerateInputError):
        rasterize_shape(bowtie, (12, 12), n_parts=1)


# --- synthetic benchmark ----------------------------------------------------------

@pytest.fixture(scope="module")
def small_synthetic():
    return generate_synthetic_dataset(SyntheticSpec(count=8, seed=11))


def test_synthetic_weights_reproject(small_synthetic):
    ds = small_synthetic
    for shape, truth in zip(ds.shapes, ds.truths):
        model = ds.models[truth["group"]]
        sp = SpaceParams.from_dict(truth["space_params"])
        b = project_shape(model, shape, sp)
        np.testing.assert_allclose(b, truth["shape_weights"], atol=1e-8)
        assert np.all(np.abs(b) <= 3 * np.sqrt(model.eigvals) + 1e-9)


def test_synthetic_box_self_consistent(small_synthetic):
    for shape, truth in zip(small_synthetic.shapes, small_synthetic.truths):
        pts = shape.reshape(-1, 2)
        T, S = derive_box(pts[:, 1].min(), pts[:, 1].max(), pts[:, 0].min(), pts[:, 0].max())
        np.testing.assert_allclose(T, truth["box"]["T"], atol=1e-12)
        np.testing.assert_allclose(S, truth["box"]["S"], atol=1e-12)


def test_synthetic_files_deterministic(tmp_path, small_synthetic):
    a = write_synthetic_dataset(small_synthetic, tmp_path / "a")
    b = write_synthetic_dataset(generate_synthetic_dataset(SyntheticSpec(count=8, seed=11)),
                                tmp_path / "b")
    names = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len([n for n in names if n.suffix == ".pgm"]) == 8
    assert len([n for n in names if str(n).startswith("landmarks")]) == 8
    _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", [str(n) for n in names],
                                           shallow=False)
    assert not mismatch and not errors
    manifest = DatasetManifest.load(a)
    images, shapes, _ = load_dataset(manifest)
    assert len(images) == 8
    # the file round trip is lossless because pixels are quantised before writing
    np.testing.assert_array_equal(images[0].pixels, small_synthetic.images[0].pixels)
    np.testing.assert_allclose(shapes[0], small_synthetic.shapes[0], atol=0)
    assert json.loads((b.parent / "truth" / "img_0000.json").read_text())["model_ref"]


def test_synthetic_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(count=0)
    with pytest.raises(ValueError):
        SyntheticSpec(eigvals=(0.01, 0.02, 0.0, 0.0, 0.0))
    with pytest.raises(DegenerateInputError):
        generate_synthetic_dataset(SyntheticSpec(count=1, dims=(64, 64)))


def test_save_image_roundtrip(tmp_path):
    px = np.round(np.random.default_rng(0).random((5, 5)) * 4096) / 4096
    px = np.clip(px, 0, 4095 / 4096)
    save_image(tmp_path / "i.pgm", px, 12)
    assert np.array_equal(load_and_normalize(tmp_path / "i.pgm", 12).pixels, px)
