import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from texstat.metrics import (Confusion, MetricInputError, accuracy, boundary, confusion, dice, evaluate_logits,
                             evaluate_masks, ge, hausdorff, hd95, jaccard, miou, nearest_rank_percentile, vacuous)

from oracles import brute_boundary, brute_counts, brute_hd95, brute_rates


def masks(max_side=8):
    return st.integers(1, max_side).flatmap(
        lambda h: st.integers(1, max_side).flatmap(
            lambda w: st.tuples(hnp.arrays(bool, (h, w)), hnp.arrays(bool, (h, w)))))


def test_identity_counts():
    gt = np.zeros(16, bool)
    gt[:5] = True
    c = confusion(gt, gt)
    assert (c.tp, c.tn, c.fp, c.fn) == (5, 11, 0, 0)


def test_all_wrong_counts():
    assert confusion(np.ones(4, bool), np.zeros(4, bool)).fp == 4


def test_formula_examples():
    c = Confusion(tp=2, fp=1, tn=12, fn=1)
    assert dice(c) == pytest.approx(4 / 6) and jaccard(c) == 0.5
    assert miou(c) == pytest.approx(0.5 * (2 / 4 + 12 / 14))
    assert miou(c) == pytest.approx(0.6786, abs=1e-4)


def test_perfect_prediction_scores_one():
    m = np.random.default_rng(0).random((6, 6)) > 0.5
    c = confusion(m, m)
    assert dice(c) == jaccard(c) == miou(c) == accuracy(c) == ge(c) == 1.0


def test_vacuous_flagged():
    c = confusion(np.zeros((3, 3), bool), np.zeros((3, 3), bool))
    assert dice(c) == 1.0 and jaccard(c) == 1.0 and vacuous(c)
    assert not vacuous(Confusion(1, 1, 1, 1))


def test_geometric_ge_option():
    c = Confusion(tp=3, fp=1, tn=4, fn=1)
    se, sp = 3 / 4, 4 / 5
    assert ge(c) == pytest.approx((se + sp) / 2)
    assert ge(c, geometric=True) == pytest.approx(math.sqrt(se * sp))


def test_non_binary_rejected():
    with pytest.raises(MetricInputError):
        confusion(np.array([0, 2]), np.array([0, 1]))
    with pytest.raises(MetricInputError):
        confusion(np.zeros(3), np.zeros(4))


@given(masks())
@settings(max_examples=200, deadline=None)
def test_rates_match_brute_force(pair):
    pred, gt = pair
    c = confusion(pred, gt)
    assert (c.tp, c.fp, c.tn, c.fn) == brute_counts(pred, gt)
    assert c.total == pred.size
    ref = brute_rates(pred, gt)
    got = {"dice": dice(c), "ja": jaccard(c), "miou": miou(c), "ac": accuracy(c), "ge": ge(c)}
    assert got == ref
    assert all(0.0 <= v <= 1.0 for v in got.values())


@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
@settings(max_examples=200, deadline=None)
def test_dice_jaccard_identity(tp, fp, tn, fn):
    c = Confusion(tp, fp, tn, fn)
    assert dice(c) == pytest.approx(2 * jaccard(c) / (1 + jaccard(c)), abs=1e-12)


@given(masks())
@settings(max_examples=100, deadline=None)
def test_swap_symmetry(pair):
    pred, gt = pair
    c, s = confusion(pred, gt), confusion(~pred, ~gt)
    assert accuracy(c) == accuracy(s)
    assert ge(c) == pytest.approx(ge(s))


def test_dice_not_swap_symmetric():
    pred = np.array([1, 1, 0, 0], bool)
    gt = np.array([1, 0, 0, 0], bool)
    assert dice(confusion(pred, gt)) != dice(confusion(~pred, ~gt))


# --- boundary distances -------------------------------------------------------------

def test_hd95_identical_is_zero():
    m = np.zeros((6, 6), bool)
    m[1:4, 2:5] = True
    assert hd95(m, m) == 0.0


def test_hd95_three_four_five():
    a, b = np.zeros((5, 5), bool), np.zeros((5, 5), bool)
    a[0, 0] = True
    b[3, 4] = True
    assert hd95(a, b) == 5.0


def test_hd95_empty_is_undefined():
    assert hd95(np.zeros((3, 3), bool), np.ones((3, 3), bool)) is None


def test_boundary_includes_image_edge():
    m = np.ones((3, 3), bool)
    assert boundary(m).sum() == 8 and not boundary(m)[1, 1]


def test_nearest_rank():
    assert nearest_rank_percentile(np.arange(1, 21), 95) == 19
    assert nearest_rank_percentile(np.array([7.0]), 95) == 7.0


@given(masks(12))
@settings(max_examples=120, deadline=None)
def test_hd95_matches_all_pairs_oracle(pair):
    a, b = pair
    assert sorted(zip(*np.nonzero(boundary(a)))) == sorted(brute_boundary(a))
    got, ref = hd95(a, b), brute_hd95(a, b)
    assert got == ref
    if got is not None:
        assert got <= hausdorff(a, b)
        assert got == hd95(b, a)


# --- reports ---------------------------------------------------------------------------

def test_perfect_logits_report():
    rng = np.random.default_rng(1)
    gts = [(rng.random((1, 8, 8)) > 0.5).astype(float) for _ in range(3)]
    rep = evaluate_logits([np.where(g > 0, 10.0, -10.0) for g in gts], gts, ids=["a", "b", "c"])
    for name in ("dice", "miou", "ja", "ac", "ge"):
        assert rep.mean(name) == 1.0
    assert rep.mean("hd95") == 0.0 and rep.undefined_hd95 == 0


def test_report_csv_and_undefined_count():
    gts = [np.ones((4, 4)), np.zeros((4, 4))]
    preds = [np.ones((4, 4), bool), np.ones((4, 4), bool)]
    rep = evaluate_masks(preds, gts, ids=["full", "empty"])
    lines = rep.to_csv().splitlines()
    assert lines[0] == "id,dice,miou,ja,ac,ge,hd95"
    assert lines[2].startswith("empty,") and lines[2].endswith(",undefined")
    assert lines[-2].startswith("mean,") and lines[-1] == "undefined_hd95,1"
    assert rep.undefined_hd95 == 1
