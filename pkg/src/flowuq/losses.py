"""Losses for flow regression with analytic gradients.

Two layers live here. The ``*_terms`` / ``*_kernel`` functions work on raw
numpy arrays of any leading shape and are what the toy trainer calls on
batched grids. The public functions take :mod:`flowuq.fields` types,
apply masks and reductions, and return :class:`LossValue` objects.

Scales are parameterized as ``s = log b``; gradients with respect to the
scale are always taken with respect to ``s``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from flowuq.fields import FieldError, FlowField, HypothesisSet, UncertaintyField, ValidMask, resolve_mask

EPE_KINK = 1e-9


class LossKind(str, Enum):
    EPE = "epe"
    LAPLACE_NLL = "laplace_nll"


@dataclass(frozen=True, eq=False)
class LossValue:
    """A reduced loss together with its per-pixel map.

    ``total`` is the sum (``reduction="sum"``) or mean (``"mean"``) of
    ``per_pixel`` over ``mask``. Invalid pixels hold 0 in ``per_pixel``.
    """

    total: float
    per_pixel: np.ndarray
    mask: ValidMask
    reduction: str


@dataclass(frozen=True, eq=False)
class WtaSelection:
    """Index of the winning hypothesis per pixel; -1 at invalid pixels."""

    best_idx: np.ndarray
    mask: ValidMask

    def usage(self, num_hypotheses: int) -> np.ndarray:
        """Fraction of valid pixels won by each hypothesis."""
        idx = self.best_idx[self.mask.valid]
        return np.bincount(idx, minlength=num_hypotheses) / max(idx.size, 1)


# ---------------------------------------------------------------------------
# array kernels
# ---------------------------------------------------------------------------


def epe_terms(res_u, res_v):
    """Endpoint error and its gradient for residuals ``pred - gt``.

    Returns ``(epe, d_u, d_v)``. Below ``EPE_KINK`` the gradient is zero.
    """
    epe = np.hypot(res_u, res_v)
    safe = np.where(epe < EPE_KINK, 1.0, epe)
    d_u = np.where(epe < EPE_KINK, 0.0, res_u / safe)
    d_v = np.where(epe < EPE_KINK, 0.0, res_v / safe)
    return epe, d_u, d_v


def laplace_terms(res_u, res_v, s_u, s_v):
    """Factorized Laplace NLL for residuals ``a - gt`` and log scales ``s``.

    Returns ``(nll, d_a_u, d_a_v, d_s_u, d_s_v)`` with
    ``nll = |r_u|/b_u + s_u + |r_v|/b_v + s_v``; the constant ``log 4`` is
    left out.
    """
    inv_u = np.exp(-s_u)
    inv_v = np.exp(-s_v)
    abs_u = np.abs(res_u) * inv_u
    abs_v = np.abs(res_v) * inv_v
    nll = abs_u + s_u + abs_v + s_v
    return nll, np.sign(res_u) * inv_u, np.sign(res_v) * inv_v, 1.0 - abs_u, 1.0 - abs_v


def smoothness_kernel(h):
    """One-sided absolute differences of ``h`` over its last two axes.

    Returns ``(per_pixel, grad)``. Each difference between ``(i, j)`` and
    its upper or left neighbour is charged to ``(i, j)``. ``per_pixel`` has
    the shape of ``h`` and sums to the total smoothness.
    """
    per_pixel = np.zeros_like(h)
    grad = np.zeros_like(h)
    dy = h[..., 1:, :] - h[..., :-1, :]
    dx = h[..., :, 1:] - h[..., :, :-1]
    per_pixel[..., 1:, :] += np.abs(dy)
    per_pixel[..., :, 1:] += np.abs(dx)
    sy = np.sign(dy)
    sx = np.sign(dx)
    grad[..., 1:, :] += sy
    grad[..., :-1, :] -= sy
    grad[..., :, 1:] += sx
    grad[..., :, :-1] -= sx
    return per_pixel, grad


def best_index_kernel(hu, hv, gt_u, gt_v):
    """Argmin over axis 0 of the endpoint error; ties go to the lowest index."""
    epe = np.hypot(hu - gt_u, hv - gt_v)
    return np.argmin(epe, axis=0)


def wta_kernel(hu, hv, gt_u, gt_v, valid, hs_u=None, hs_v=None, smoothness_weight=1.0):
    """Winner-takes-all loss on stacked hypotheses ``(M, ...)``.

    The winner per pixel is chosen by endpoint error. If ``hs_u``/``hs_v``
    (log scales) are given the data term is the Laplace NLL, otherwise the
    endpoint error. Returns ``(best, data_pp, smooth_pp, grads)`` where
    ``data_pp`` is zero at invalid pixels and ``grads`` maps ``"u"``,
    ``"v"`` (and ``"s_u"``, ``"s_v"``) to arrays shaped like ``hu`` holding
    the gradient of ``sum(data_pp) + smoothness_weight * sum(smooth_pp)``.
    """
    best = best_index_kernel(hu, hv, gt_u, gt_v)
    onehot = np.arange(hu.shape[0]).reshape((-1,) + (1,) * best.ndim) == best[None]
    onehot = onehot & valid[None]
    sel_u = np.take_along_axis(hu, best[None], axis=0)[0]
    sel_v = np.take_along_axis(hv, best[None], axis=0)[0]
    grads = {}
    if hs_u is None:
        data, d_u, d_v = epe_terms(sel_u - gt_u, sel_v - gt_v)
    else:
        sel_su = np.take_along_axis(hs_u, best[None], axis=0)[0]
        sel_sv = np.take_along_axis(hs_v, best[None], axis=0)[0]
        data, d_u, d_v, d_su, d_sv = laplace_terms(sel_u - gt_u, sel_v - gt_v, sel_su, sel_sv)
        grads["s_u"] = np.where(onehot, d_su[None], 0.0)
        grads["s_v"] = np.where(onehot, d_sv[None], 0.0)
    data = np.where(valid, data, 0.0)
    grads["u"] = np.where(onehot, d_u[None], 0.0)
    grads["v"] = np.where(onehot, d_v[None], 0.0)
    smooth_u, g_u = smoothness_kernel(hu)
    smooth_v, g_v = smoothness_kernel(hv)
    smooth_pp = (smooth_u + smooth_v).sum(axis=0)
    if smoothness_weight:
        grads["u"] = grads["u"] + smoothness_weight * g_u
        grads["v"] = grads["v"] + smoothness_weight * g_v
    return best, data, smooth_pp, grads


# ---------------------------------------------------------------------------
# field-level API
# ---------------------------------------------------------------------------


def _prepare(pred, gt, mask):
    if pred.shape != gt.shape:
        raise FieldError(f"dimension mismatch: {pred.shape} vs {gt.shape}")
    mask = resolve_mask(mask, pred.shape)
    if mask.count == 0:
        raise FieldError("loss needs at least one valid pixel")
    return mask


def _reduce(per_pixel, mask, reduction):
    if reduction == "sum":
        return float(per_pixel[mask.valid].sum())
    if reduction == "mean":
        return float(per_pixel[mask.valid].mean())
    raise ValueError(f"unknown reduction {reduction!r}")


def _grad_scale(mask, reduction):
    if reduction == "sum":
        return 1.0
    if reduction == "mean":
        return 1.0 / mask.count
    raise ValueError(f"unknown reduction {reduction!r}")


def epe_loss(pred: FlowField, gt: FlowField, mask: Optional[ValidMask] = None, reduction: str = "mean") -> LossValue:
    mask = _prepare(pred, gt, mask)
    epe, _, _ = epe_terms(pred.u - gt.u, pred.v - gt.v)
    epe = np.where(mask.valid, epe, 0.0)
    return LossValue(_reduce(epe, mask, reduction), epe, mask, reduction)


def epe_loss_grad(pred: FlowField, gt: FlowField, mask: Optional[ValidMask] = None, reduction: str = "mean"):
    """Gradient of :func:`epe_loss` with respect to ``pred.u`` and ``pred.v``."""
    mask = _prepare(pred, gt, mask)
    _, d_u, d_v = epe_terms(pred.u - gt.u, pred.v - gt.v)
    scale = _grad_scale(mask, reduction)
    return np.where(mask.valid, d_u * scale, 0.0), np.where(mask.valid, d_v * scale, 0.0)


def _check_unc(pred, unc):
    if unc is None:
        raise FieldError("Laplace NLL needs an uncertainty field")
    if unc.shape != pred.shape:
        raise FieldError(f"dimension mismatch: {pred.shape} vs {unc.shape}")
    if (unc.b_u <= 0).any() or (unc.b_v <= 0).any():
        raise FieldError("Laplace scales must be positive")


def laplace_nll(
    pred: FlowField,
    unc: UncertaintyField,
    gt: FlowField,
    mask: Optional[ValidMask] = None,
    reduction: str = "mean",
) -> LossValue:
    """Negative log-likelihood of ``gt`` under independent Laplacians per component.

    ``pred`` holds the location parameters and ``unc`` the scales.
    """
    mask = _prepare(pred, gt, mask)
    _check_unc(pred, unc)
    nll, *_ = laplace_terms(pred.u - gt.u, pred.v - gt.v, np.log(unc.b_u), np.log(unc.b_v))
    nll = np.where(mask.valid, nll, 0.0)
    return LossValue(_reduce(nll, mask, reduction), nll, mask, reduction)


def laplace_nll_grad(
    pred: FlowField,
    unc: UncertaintyField,
    gt: FlowField,
    mask: Optional[ValidMask] = None,
    reduction: str = "mean",
):
    """Gradients of :func:`laplace_nll`: ``(d_a_u, d_a_v, d_logb_u, d_logb_v)``."""
    mask = _prepare(pred, gt, mask)
    _check_unc(pred, unc)
    _, da_u, da_v, ds_u, ds_v = laplace_terms(pred.u - gt.u, pred.v - gt.v, np.log(unc.b_u), np.log(unc.b_v))
    scale = _grad_scale(mask, reduction)
    return tuple(np.where(mask.valid, g * scale, 0.0) for g in (da_u, da_v, ds_u, ds_v))


def wta_best_idx(hyps: HypothesisSet, gt: FlowField, mask: Optional[ValidMask] = None) -> WtaSelection:
    if hyps.shape != gt.shape:
        raise FieldError(f"dimension mismatch: {hyps.shape} vs {gt.shape}")
    mask = resolve_mask(mask, gt.shape)
    best = best_index_kernel(hyps.u, hyps.v, gt.u, gt.v)
    return WtaSelection(np.where(mask.valid, best, -1), mask)


def wta_smoothness(hyps: HypothesisSet) -> LossValue:
    """Sum of one-sided absolute spatial differences over all hypotheses and both components."""
    smooth_u, _ = smoothness_kernel(hyps.u)
    smooth_v, _ = smoothness_kernel(hyps.v)
    per_pixel = (smooth_u + smooth_v).sum(axis=0)
    mask = ValidMask.all_valid(hyps.shape)
    return LossValue(float(per_pixel.sum()), per_pixel, mask, "sum")


def _wta_inputs(hyps, gt, mask, inner):
    inner = LossKind(inner)
    if hyps.shape != gt.shape:
        raise FieldError(f"dimension mismatch: {hyps.shape} vs {gt.shape}")
    mask = resolve_mask(mask, gt.shape)
    if inner is LossKind.LAPLACE_NLL:
        if not hyps.has_uncertainty:
            raise FieldError("Laplace NLL inner loss needs hypotheses with uncertainties")
        return mask, np.log(hyps.b_u), np.log(hyps.b_v)
    return mask, None, None


def wta_loss(
    hyps: HypothesisSet,
    gt: FlowField,
    mask: Optional[ValidMask] = None,
    inner: LossKind | str = LossKind.EPE,
    smoothness_weight: float = 1.0,
):
    """Winner-takes-all multi-hypothesis loss.

    At every valid pixel only the hypothesis with the lowest endpoint error
    is scored by the ``inner`` loss; the smoothness term over all hypotheses
    is added once for the whole grid, scaled by ``smoothness_weight``.

    Returns:
        ``(LossValue, WtaSelection)``. The loss is a sum; ``per_pixel`` holds
        the data term plus the weighted smoothness charged to each pixel.
    """
    mask, hs_u, hs_v = _wta_inputs(hyps, gt, mask, inner)
    best, data, smooth, _ = wta_kernel(hyps.u, hyps.v, gt.u, gt.v, mask.valid, hs_u, hs_v, smoothness_weight)
    per_pixel = data + smoothness_weight * smooth
    loss = LossValue(float(per_pixel.sum()), per_pixel, ValidMask.all_valid(gt.shape), "sum")
    return loss, WtaSelection(np.where(mask.valid, best, -1), mask)


def wta_loss_grad(
    hyps: HypothesisSet,
    gt: FlowField,
    mask: Optional[ValidMask] = None,
    inner: LossKind | str = LossKind.EPE,
    smoothness_weight: float = 1.0,
) -> dict:
    """Gradient of :func:`wta_loss` with respect to each hypothesis.

    Returns a dict of ``(M, H, W)`` arrays keyed ``"u"``, ``"v"`` and, for
    the Laplace inner loss, ``"s_u"``, ``"s_v"`` (log-scale gradients).
    """
    mask, hs_u, hs_v = _wta_inputs(hyps, gt, mask, inner)
    _, _, _, grads = wta_kernel(hyps.u, hyps.v, gt.u, gt.v, mask.valid, hs_u, hs_v, smoothness_weight)
    return grads
