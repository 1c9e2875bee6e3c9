import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flowuq.fields import FieldError, FlowField, HypothesisSet, UncertaintyField, ValidMask, make_flow
from flowuq.losses import (
    epe_loss,
    epe_loss_grad,
    laplace_nll,
    laplace_nll_grad,
    wta_best_idx,
    wta_loss,
    wta_loss_grad,
    wta_smoothness,
)


def one(u, v):
    return make_flow(1, 1, (u, v))


def scales(bu, bv, shape=(1, 1)):
    return UncertaintyField(np.full(shape, float(bu)), np.full(shape, float(bv)))


# ---------------------------------------------------------------------------
# EPE
# ---------------------------------------------------------------------------


def test_epe_loss_examples():
    f = FlowField(np.arange(4.0).reshape(2, 2), np.ones((2, 2)))
    assert epe_loss(f, f).total == 0
    assert epe_loss(one(3, 4), one(0, 0)).total == 5
    pred = FlowField(np.array([[1.0, 3.0]]), np.zeros((1, 2)))
    assert epe_loss(pred, make_flow(2, 1)).total == 2


def test_epe_loss_reduction_flag():
    pred = FlowField(np.array([[1.0, 3.0]]), np.zeros((1, 2)))
    assert epe_loss(pred, make_flow(2, 1), reduction="sum").total == 4
    mask = ValidMask(np.array([[False, True]]))
    lv = epe_loss(pred, make_flow(2, 1), mask)
    assert lv.total == 3 and lv.per_pixel[0, 0] == 0


def test_epe_loss_dimension_mismatch():
    with pytest.raises(FieldError):
        epe_loss(make_flow(2, 2), make_flow(2, 3))


def test_epe_grad_examples():
    du, dv = epe_loss_grad(one(3, 4), one(0, 0))
    assert du[0, 0] == pytest.approx(0.6, abs=1e-15)
    assert dv[0, 0] == pytest.approx(0.8, abs=1e-15)
    du, dv = epe_loss_grad(one(1, 1), one(1, 1))
    assert du[0, 0] == 0 and dv[0, 0] == 0


def _fd(fn, x, h=1e-5):
    return (fn(x + h) - fn(x - h)) / (2 * h)


def test_epe_grad_finite_difference():
    rng = np.random.default_rng(1)
    for _ in range(50):
        pu, pv, gu, gv = rng.normal(size=(4, 2, 3))
        gt = FlowField(gu, gv)
        du, dv = epe_loss_grad(FlowField(pu, pv), gt, reduction="sum")
        i, j = rng.integers(2), rng.integers(3)

        def f_u(x):
            u = pu.copy()
            u[i, j] = x
            return epe_loss(FlowField(u, pv), gt, reduction="sum").total

        assert du[i, j] == pytest.approx(_fd(f_u, pu[i, j]), rel=1e-5, abs=1e-9)


# ---------------------------------------------------------------------------
# Laplace NLL
# ---------------------------------------------------------------------------


def test_nll_examples():
    assert laplace_nll(one(0, 0), scales(1, 1), one(0, 0)).total == 0
    assert laplace_nll(one(1, 0), scales(1, 1), one(0, 0)).total == 1
    assert laplace_nll(one(2, 0), scales(2, 1), one(0, 0)).total == pytest.approx(1 + math.log(2), abs=1e-12)


def test_nll_rejects_missing_scale():
    with pytest.raises(FieldError):
        laplace_nll(one(0, 0), None, one(0, 0))


def test_nll_grad_examples():
    _, _, ds_u, _ = laplace_nll_grad(one(0, 0), scales(1.5, 1), one(0, 0))
    assert ds_u[0, 0] == 1
    _, _, ds_u, _ = laplace_nll_grad(one(2.5, 0), scales(2.5, 1), one(0, 0))
    assert ds_u[0, 0] == pytest.approx(0, abs=1e-15)


def test_nll_grad_finite_difference():
    rng = np.random.default_rng(2)
    for _ in range(50):
        pu, pv, gu, gv = rng.normal(size=(4, 2, 2))
        su, sv = rng.normal(0, 0.5, size=(2, 2, 2))
        gt = FlowField(gu, gv)
        da_u, da_v, ds_u, ds_v = laplace_nll_grad(FlowField(pu, pv), UncertaintyField.from_log_scale(su, sv), gt, reduction="sum")

        def total(pu_, su_):
            return laplace_nll(FlowField(pu_, pv), UncertaintyField.from_log_scale(su_, sv), gt, reduction="sum").total

        i, j = rng.integers(2), rng.integers(2)
        if abs(pu[i, j] - gu[i, j]) < 1e-3:
            continue

        def f_a(x):
            u = pu.copy()
            u[i, j] = x
            return total(u, su)

        def f_s(x):
            s = su.copy()
            s[i, j] = x
            return total(pu, s)

        assert da_u[i, j] == pytest.approx(_fd(f_a, pu[i, j]), rel=1e-5)
        assert ds_u[i, j] == pytest.approx(_fd(f_s, su[i, j]), rel=1e-5, abs=1e-10)


@given(st.floats(-10, 10))
def test_nll_minimized_at_abs_residual(resid):
    if abs(resid) < 1e-2:
        return
    bs = np.abs(resid) * np.exp(np.linspace(-1, 1, 201))
    vals = [laplace_nll(one(resid, 0), scales(b, 1), one(0, 0)).total for b in bs]
    assert abs(bs[int(np.argmin(vals))] - abs(resid)) < 1e-12 + abs(resid) * 0.011


def test_nll_mean_gradient_bounded_by_inverse_scale():
    rng = np.random.default_rng(3)
    pu, pv, gu, gv = rng.normal(0, 10, size=(4, 5, 5))
    b = rng.uniform(0.1, 5, size=(5, 5))
    da_u, da_v, _, _ = laplace_nll_grad(FlowField(pu, pv), UncertaintyField(b, b), FlowField(gu, gv), reduction="sum")
    assert (np.abs(da_u) <= 1 / b + 1e-15).all()
    assert (np.abs(da_v) <= 1 / b + 1e-15).all()


# ---------------------------------------------------------------------------
# WTA
# ---------------------------------------------------------------------------


def hyps_const(values, shape=(1, 1)):
    return HypothesisSet([make_flow(shape[1], shape[0], v) for v in values])


def test_best_idx_examples():
    assert wta_best_idx(hyps_const([(0, 0), (1, 1)]), one(1, 1)).best_idx[0, 0] == 1
    sel = wta_best_idx(hyps_const([(2, 2), (2, 2)], (3, 3)), make_flow(3, 3))
    assert (sel.best_idx == 0).all()


def test_best_idx_matches_exhaustive():
    rng = np.random.default_rng(4)
    for _ in range(20):
        hu, hv = rng.normal(size=(2, 3, 4, 5))
        gu, gv = rng.normal(size=(2, 4, 5))
        sel = wta_best_idx(HypothesisSet.from_arrays(hu, hv), FlowField(gu, gv)).best_idx
        for i, j in itertools.product(range(4), range(5)):
            d = [math.hypot(hu[k, i, j] - gu[i, j], hv[k, i, j] - gv[i, j]) for k in range(3)]
            assert sel[i, j] == d.index(min(d))


def test_smoothness_examples():
    assert wta_smoothness(hyps_const([(1, 2), (3, 4)], (3, 3))).total == 0
    h = HypothesisSet([FlowField(np.array([[0.0, 5.0]]), np.zeros((1, 2)))])
    assert wta_smoothness(h).total == 5
    assert wta_smoothness(hyps_const([(1, 2)])).total == 0


def test_smoothness_zero_iff_constant():
    rng = np.random.default_rng(5)
    for _ in range(20):
        hu, hv = rng.normal(size=(2, 2, 3, 3))
        assert wta_smoothness(HypothesisSet.from_arrays(hu, hv)).total > 0


def test_wta_split_example():
    h1, h2 = (1.0, 0.0), (-2.0, 3.0)
    gu = np.array([[1.0, 1.0, -2.0, -2.0]] * 2)
    gv = np.array([[0.0, 0.0, 3.0, 3.0]] * 2)
    hyps = hyps_const([h1, h2], (2, 4))
    loss, sel = wta_loss(hyps, FlowField(gu, gv))
    assert loss.total == 0
    assert wta_smoothness(hyps).total == 0
    np.testing.assert_array_equal(sel.best_idx, [[0, 0, 1, 1]] * 2)


def test_wta_single_hypothesis_collapse():
    rng = np.random.default_rng(6)
    pu, pv, gu, gv = rng.normal(size=(4, 3, 3))
    pred, gt = FlowField(pu, pv), FlowField(gu, gv)
    hyps = HypothesisSet([pred])
    loss, _ = wta_loss(hyps, gt, smoothness_weight=0.7)
    expected = epe_loss(pred, gt, reduction="sum").total + 0.7 * wta_smoothness(hyps).total
    assert loss.total == pytest.approx(expected, rel=1e-12)
    unc = UncertaintyField(rng.uniform(0.5, 2, (3, 3)), rng.uniform(0.5, 2, (3, 3)))
    loss, _ = wta_loss(HypothesisSet([pred], [unc]), gt, inner="laplace_nll", smoothness_weight=0.0)
    assert loss.total == pytest.approx(laplace_nll(pred, unc, gt, reduction="sum").total, rel=1e-12)


def test_wta_nll_needs_uncertainty():
    with pytest.raises(FieldError):
        wta_loss(hyps_const([(0, 0), (1, 1)]), one(0, 0), inner="laplace_nll")


def test_wta_data_gradient_only_into_selected():
    rng = np.random.default_rng(7)
    hu, hv = rng.normal(size=(2, 4, 5, 5))
    gt = FlowField(*rng.normal(size=(2, 5, 5)))
    hyps = HypothesisSet.from_arrays(hu, hv, np.ones_like(hu), np.ones_like(hu))
    for inner in ("epe", "laplace_nll"):
        g = wta_loss_grad(hyps, gt, inner=inner, smoothness_weight=0.0)
        best = wta_best_idx(hyps, gt).best_idx
        for k in range(4):
            off = best != k
            for key in g:
                assert (g[key][k][off] == 0).all()


def test_wta_gradient_finite_difference():
    rng = np.random.default_rng(8)
    hu, hv = rng.normal(size=(2, 3, 4, 4))
    su, sv = rng.normal(0, 0.3, size=(2, 3, 4, 4))
    gt = FlowField(*rng.normal(size=(2, 4, 4)))

    def total(hu_, su_):
        h = HypothesisSet.from_arrays(hu_, hv, np.exp(su_), np.exp(sv))
        return wta_loss(h, gt, inner="laplace_nll", smoothness_weight=0.5)[0].total

    g = wta_loss_grad(HypothesisSet.from_arrays(hu, hv, np.exp(su), np.exp(sv)), gt, inner="laplace_nll", smoothness_weight=0.5)
    for idx in itertools.product(range(3), range(4), range(4)):
        for arr, key in ((hu, "u"), (su, "s_u")):
            plus, minus = arr.copy(), arr.copy()
            plus[idx] += 1e-5
            minus[idx] -= 1e-5
            args_p = (plus, su) if key == "u" else (hu, plus)
            args_m = (minus, su) if key == "u" else (hu, minus)
            num = (total(*args_p) - total(*args_m)) / 2e-5
            assert g[key][idx] == pytest.approx(num, rel=1e-5, abs=1e-8)


@given(arrays(np.float64, (3, 2, 3), elements=st.floats(-5, 5)), st.permutations(range(3)))
def test_wta_permutation_invariance(hu, perm):
    hv = hu[::-1] * 0.5
    gt = FlowField(np.zeros((2, 3)), np.ones((2, 3)))
    l1, s1 = wta_loss(HypothesisSet.from_arrays(hu, hv), gt)
    l2, s2 = wta_loss(HypothesisSet.from_arrays(hu[list(perm)], hv[list(perm)]), gt)
    assert l1.total == pytest.approx(l2.total, rel=1e-12, abs=1e-12)
    # the same hypothesis wins unless distances tie
    chosen1 = np.take_along_axis(hu, s1.best_idx[None], 0)
    chosen2 = np.take_along_axis(hu[list(perm)], s2.best_idx[None], 0)
    d1 = np.hypot(chosen1, np.take_along_axis(hv, s1.best_idx[None], 0) - 1)
    d2 = np.hypot(chosen2, np.take_along_axis(hv[list(perm)], s2.best_idx[None], 0) - 1)
    np.testing.assert_array_equal(d1, d2)


@given(arrays(np.float64, (3, 2, 2), elements=st.floats(-5, 5)), arrays(np.float64, (2, 2), elements=st.floats(-5, 5)))
def test_wta_selection_optimal(hu, gu):
    hv = np.zeros_like(hu)
    gt = FlowField(gu, np.zeros_like(gu))
    loss, sel = wta_loss(HypothesisSet.from_arrays(hu, hv), gt, smoothness_weight=0.0)
    each = np.abs(hu - gu)
    assert (loss.per_pixel <= each.min(axis=0) + 1e-12).all()
