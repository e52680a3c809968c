import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deformseg.evaluation import (build_report, fold_assignment, non_decreasing, paired_wilcoxon,
                                  shape_scores, space_errors)
from deformseg.exceptions import DegenerateInputError, DimensionError
from deformseg.metrics import (EvalReport, acd, acd_shapes, dsc, jaccard, mask_boundary,
                               pearson_r, summarize)


def mask(cells, dims=(4, 4)):
    m = np.zeros(dims, dtype=bool)
    for r, c in cells:
        m[r, c] = True
    return m


# --- overlap ----------------------------------------------------------------------

def test_overlap_examples():
    a = mask([(0, 0), (0, 1), (1, 0), (1, 1)])
    b = mask([(1, 0), (1, 1), (2, 0), (2, 1)])
    assert dsc(a, a) == 1.0 and jaccard(a, a) == 1.0
    assert dsc(a, mask([(3, 3)])) == 0.0 and jaccard(a, mask([(3, 3)])) == 0.0
    assert dsc(a, b) == 0.5
    assert jaccard(a, b) == pytest.approx(1 / 3)


def test_empty_masks_warn():
    with pytest.warns(RuntimeWarning):
        assert dsc(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    with pytest.raises(DimensionError):
        dsc(np.zeros((3, 3)), np.zeros((3, 4)))


def _brute_boundary(m):
    pts = []
    h, w = m.shape
    for y in range(h):
        for x in range(w):
            if not m[y, x]:
                continue
            nbrs = [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)]
            if any(not (0 <= yy < h and 0 <= xx < w) or not m[yy, xx] for yy, xx in nbrs):
                pts.append((x, y))
    return pts


def _brute_acd(p, q):
    def mean_min(src, dst):
        return sum(min(math.dist(s, d) for d in dst) for s in src) / len(src)
    return 0.5 * (mean_min(q, p) + mean_min(p, q))


def test_metrics_match_brute_force_on_random_8x8_pairs():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        a = rng.random((8, 8)) < rng.random()
        b = rng.random((8, 8)) < rng.random()
        a[rng.integers(8), rng.integers(8)] = True
        b[rng.integers(8), rng.integers(8)] = True
        inter = sum(bool(a[i, j] and b[i, j]) for i in range(8) for j in range(8))
        na, nb = int(a.sum()), int(b.sum())
        assert dsc(a, b) == 2 * inter / (na + nb)
        assert jaccard(a, b) == inter / (na + nb - inter)
        ba, bb = _brute_boundary(a), _brute_boundary(b)
        assert sorted(map(tuple, mask_boundary(a).astype(int).tolist())) == sorted(ba)
        assert abs(acd(mask_boundary(a), mask_boundary(b)) - _brute_acd(ba, bb)) <= 1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_dice_jaccard_identity(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((6, 6)) < 0.5, rng.random((6, 6)) < 0.5
    if not a.any() and not b.any():
        return
    d, j = dsc(a, b), jaccard(a, b)
    assert 0 <= j <= d <= 1
    assert d == pytest.approx(2 * j / (1 + j), abs=1e-12)
    assert dsc(b, a) == d


# --- contour distance -------------------------------------------------------------

def test_acd_examples():
    seg = np.column_stack([np.arange(11.0), np.zeros(11)])
    assert acd(seg, seg) == 0.0
    assert acd(seg, seg + [0, 3.5]) == pytest.approx(3.5)
    assert acd(seg, seg + [0, 10], spacing=0.17) == pytest.approx(1.7)
    with pytest.raises(DegenerateInputError):
        acd(np.zeros((0, 2)), seg)


def test_acd_shapes_concentric_squares():
    inner = np.array([0.0, 0, 10, 0, 10, 10, 0, 10])
    outer = np.array([-2.0, -2, 12, -2, 12, 12, -2, 12])
    assert acd_shapes(inner, inner, n_parts=1) == 0.0
    assert acd_shapes(inner, outer, n_parts=1) == pytest.approx(2.0, abs=0.6)
    assert acd_shapes(inner, outer, n_parts=1) >= 2.0


# --- correlation ------------------------------------------------------------------

def test_pearson_examples():
    x = np.arange(6.0)
    assert pearson_r(x, 2 * x) == pytest.approx(1.0)
    assert pearson_r(x, -2 * x) == pytest.approx(-1.0)
    assert pearson_r([1, 2, 3], [1, 1, 2]) == pytest.approx(0.8660, abs=1e-4)
    with pytest.raises(DegenerateInputError):
        pearson_r([1, 1, 1], [1, 2, 3])
    with pytest.raises(DimensionError):
        pearson_r([1], [1])


# --- folds and reports ------------------------------------------------------------

def test_fold_assignment_n10():
    a = fold_assignment(10, 2, seed=3)
    assert sorted(np.bincount(a).tolist()) == [5, 5]
    assert np.array_equal(a, fold_assignment(10, 2, seed=3))
    with pytest.raises(ValueError):
        fold_assignment(1, 2)
    with pytest.raises(ValueError):
        fold_assignment(10, 1)


@settings(max_examples=50, deadline=None)
@given(n=st.integers(2, 200), folds=st.integers(2, 5), seed=st.integers(0, 10 ** 6))
def test_fold_sizes_balanced(n, folds, seed):
    if n < folds:
        return
    counts = np.bincount(fold_assignment(n, folds, seed), minlength=folds)
    assert counts.sum() == n and counts.max() - counts.min() <= 1


def _rows(n=12, seed=0):
    rng = np.random.default_rng(seed)
    assign = fold_assignment(n, 2, seed)
    rows = []
    for i in range(n):
        full = 0.9 + 0.05 * rng.random()
        rows.append({"index": i, "fold": int(assign[i]), "dsc": full, "jaccard": full / (2 - full),
                     "acd_mm": rng.random(), "mean_shape_dsc": full - 0.05 - 0.01 * rng.random(),
                     "dsc_by_modes": list(np.linspace(full - 0.05, full, 3))})
    return rows, assign


def test_pooled_mean_is_mean_over_both_rounds():
    rows, assign = _rows()
    rep = build_report(rows, assign, seed=0)
    agg = rep.aggregates
    assert agg["pooled"]["dsc"]["mean"] == pytest.approx(np.mean([r["dsc"] for r in rows]))
    n0, n1 = agg["fold0"]["dsc"]["n"], agg["fold1"]["dsc"]["n"]
    weighted = (agg["fold0"]["dsc"]["mean"] * n0 + agg["fold1"]["dsc"]["mean"] * n1) / (n0 + n1)
    assert agg["pooled"]["dsc"]["mean"] == pytest.approx(weighted)
    assert rep.extra["mean_shape_vs_full"]["wilcoxon_p"] < 0.01
    assert non_decreasing(rep.extra["mean_dsc_by_modes"])


def test_report_files(tmp_path):
    rows, assign = _rows()
    js, txt = build_report(rows, assign, seed=4).write(tmp_path)
    d = json.loads(js.read_text())
    assert d["seed"] == 4 and len(d["per_image"]) == 12 and d["fold_assignment"] == assign.tolist()
    table = txt.read_text().splitlines()
    assert table[0].startswith("Metric") and any(line.startswith("dsc") for line in table)


def test_summarize():
    s = summarize([1.0, 2.0, 3.0])
    assert s == {"mean": 2.0, "std": 1.0, "min": 1.0, "max": 3.0, "n": 3}
    assert summarize([])["n"] == 0
    assert EvalReport([]).aggregates == {"pooled": {}}


def test_paired_wilcoxon():
    rng = np.random.default_rng(1)
    base = rng.random(40)
    assert paired_wilcoxon(base + 0.1 + 0.01 * rng.random(40), base) < 1e-6
    assert paired_wilcoxon(base, base + 0.1 + 0.01 * rng.random(40)) > 0.5
    assert paired_wilcoxon(base, base) == 1.0
    with pytest.raises(DimensionError):
        paired_wilcoxon([1.0], [0.0])


def test_space_errors_and_shape_scores():
    shape = np.array([10.0, 20, 50, 20, 50, 60, 10, 60])
    e = space_errors((33.0, 44.0), (44.0, 40.0), 0.1, shape, 0.05, spacing=(0.5, 0.5))
    assert e["translation_px"] == pytest.approx(5.0)
    assert e["translation_mm"] == pytest.approx(2.5)
    assert e["scale_px"] == pytest.approx(2.0)
    assert e["orientation_rad"] == pytest.approx(0.05)
    s = shape_scores(shape, shape, (64, 64), n_parts=1)
    assert s["dsc"] == 1.0 and s["jaccard"] == 1.0 and s["acd_mm"] == 0.0
