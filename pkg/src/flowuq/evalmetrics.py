"""Sparsification-based evaluation of uncertainty estimates.

A sparsification curve removes the pixels with the highest uncertainty in
growing fractions and tracks the average endpoint error of what remains,
normalized so the full set scores 1. The oracle curve ranks pixels by
their true error instead. The area between the two (AUSE) is the headline
score: 0 means the uncertainty orders errors perfectly.

Ranking ties are broken by row-major pixel order: among equally ranked
pixels the one with the lower index is removed first. The number of pixels
removed at step ``k`` of ``steps`` is ``floor(k * N / steps)`` computed in
integers, so it never suffers from float rounding.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from flowuq.ensembles import MergedPrediction, merge_empirical
from flowuq.fields import (
    SCALE_FLOOR,
    ErrorField,
    FieldError,
    FlowField,
    HypothesisSet,
    UncertaintyField,
    ValidMask,
    resolve_mask,
)

DEFAULT_STEPS = 100


class DegenerateCurveWarning(UserWarning):
    """Baseline error is zero, so the curve cannot be normalized."""


@dataclass(frozen=True, eq=False)
class SparsificationCurve:
    fractions: np.ndarray
    values: np.ndarray
    oracle_values: np.ndarray
    degenerate: bool = False
    n_valid: int = 0

    def __post_init__(self):
        for name in ("fractions", "values", "oracle_values"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (self.fractions.shape == self.values.shape == self.oracle_values.shape):
            raise ValueError("curve arrays must have equal length")
        if self.fractions.ndim != 1:
            raise ValueError("curve arrays must be 1-D")

    def __len__(self):
        return self.fractions.size


@dataclass(frozen=True, eq=False)
class EntropyMap:
    values: np.ndarray

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64)
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def shape(self):
        return self.values.shape


# ---------------------------------------------------------------------------
# sparsification
# ---------------------------------------------------------------------------


def removal_counts(n_valid: int, steps: int) -> np.ndarray:
    return (np.arange(steps, dtype=np.int64) * n_valid) // steps


def _remaining_means(errors, ranking, counts):
    order = np.argsort(-ranking, kind="stable")
    removed_first = errors[order]
    # suffix[n] is the error sum left after removing the first n pixels
    suffix = np.cumsum(removed_first[::-1])[::-1]
    return suffix[counts] / (errors.size - counts)


def curve_from_values(errors, ranking, steps: int = DEFAULT_STEPS) -> SparsificationCurve:
    """Sparsification curve for flat arrays of valid errors and ranking scalars."""
    errors = np.asarray(errors, dtype=np.float64).ravel()
    ranking = np.asarray(ranking, dtype=np.float64).ravel()
    if steps < 2:
        raise ValueError("steps must be >= 2")
    if errors.size == 0:
        raise FieldError("sparsification needs at least one valid pixel")
    if errors.shape != ranking.shape:
        raise FieldError("errors and ranking must have the same number of pixels")
    if np.isnan(ranking).any():
        raise FieldError("ranking contains NaN")
    n = errors.size
    counts = removal_counts(n, steps)
    fractions = np.arange(steps) / steps
    baseline = errors.mean()
    if baseline == 0:
        warnings.warn("baseline AEPE is zero; returning an all-zero curve", DegenerateCurveWarning, stacklevel=2)
        zeros = np.zeros(steps)
        return SparsificationCurve(fractions, zeros, zeros, degenerate=True, n_valid=n)
    values = _remaining_means(errors, ranking, counts) / baseline
    oracle = _remaining_means(errors, errors, counts) / baseline
    # nothing removed yet: exactly the normalization anchor, whatever the summation order
    values[counts == 0] = 1.0
    oracle[counts == 0] = 1.0
    return SparsificationCurve(fractions, values, oracle, n_valid=n)


def _valid_pixels(errors: ErrorField, ranking, mask):
    ranking = np.asarray(ranking, dtype=np.float64)
    if ranking.shape != errors.shape:
        raise FieldError(f"ranking shape {ranking.shape} does not match errors {errors.shape}")
    valid = errors.mask.valid
    if mask is not None:
        valid = valid & resolve_mask(mask, errors.shape).valid
    return errors.epe[valid], ranking[valid]


def sparsification(
    errors: ErrorField,
    ranking,
    mask: Optional[ValidMask] = None,
    steps: int = DEFAULT_STEPS,
) -> SparsificationCurve:
    """Sparsification curve of one image.

    Args:
        errors: per-pixel endpoint errors.
        ranking: per-pixel uncertainty scalar, higher means removed earlier.
        mask: extra validity mask combined with the one in ``errors``.
        steps: number of fractions, ``0, 1/steps, ..., (steps-1)/steps``.
    """
    e, r = _valid_pixels(errors, ranking, mask)
    return curve_from_values(e, r, steps)


def dataset_sparsification(per_image: Sequence, steps: int = DEFAULT_STEPS) -> SparsificationCurve:
    """Rank all valid pixels of all images jointly, then normalize once.

    ``per_image`` holds ``(ErrorField, ranking)`` or
    ``(ErrorField, ranking, mask)`` tuples; pixels are pooled in image order.
    """
    if not per_image:
        raise FieldError("dataset sparsification needs at least one image")
    errs, ranks = [], []
    for item in per_image:
        errors, ranking = item[0], item[1]
        mask = item[2] if len(item) > 2 else None
        e, r = _valid_pixels(errors, ranking, mask)
        errs.append(e)
        ranks.append(r)
    return curve_from_values(np.concatenate(errs), np.concatenate(ranks), steps)


def average_curves(curves: Iterable[SparsificationCurve]) -> SparsificationCurve:
    """Image-wise protocol: mean of per-image curves, skipping degenerate ones."""
    curves = list(curves)
    if not curves:
        raise ValueError("no curves to average")
    usable = [c for c in curves if not c.degenerate]
    if not usable:
        warnings.warn("every image has zero baseline AEPE", DegenerateCurveWarning, stacklevel=2)
        return curves[0]
    fractions = usable[0].fractions
    if any(not np.array_equal(c.fractions, fractions) for c in usable):
        raise ValueError("curves must share fractions")
    return SparsificationCurve(
        fractions,
        np.mean([c.values for c in usable], axis=0),
        np.mean([c.oracle_values for c in usable], axis=0),
        n_valid=sum(c.n_valid for c in usable),
    )


def sparsification_error(curve: SparsificationCurve) -> np.ndarray:
    return curve.values - curve.oracle_values


def ause(curve: SparsificationCurve) -> float:
    """Trapezoidal area under the sparsification error over the curve's fractions."""
    if len(curve) < 2:
        raise ValueError("AUSE needs at least two fractions")
    return float(np.trapezoid(sparsification_error(curve), curve.fractions))


# ---------------------------------------------------------------------------
# ranking scalars
# ---------------------------------------------------------------------------


def entropy_ranking(unc: UncertaintyField) -> np.ndarray:
    """``log b_u + log b_v``; orders pixels like the Laplace entropy does."""
    return np.log(unc.b_u) + np.log(unc.b_v)


def variance_ranking(unc: UncertaintyField | MergedPrediction) -> np.ndarray:
    if isinstance(unc, MergedPrediction):
        return unc.total_variance
    return unc.var_u + unc.var_v


# ---------------------------------------------------------------------------
# ensemble diagnostics
# ---------------------------------------------------------------------------


def oracle_epe(hyps: HypothesisSet, gt: FlowField, mask: Optional[ValidMask] = None) -> float:
    """AEPE when the member closest to the ground truth is picked at every pixel."""
    if hyps.shape != gt.shape:
        raise FieldError(f"dimension mismatch: {hyps.shape} vs {gt.shape}")
    mask = resolve_mask(mask, gt.shape)
    if mask.count == 0:
        raise FieldError("oracle_epe needs at least one valid pixel")
    best = np.hypot(hyps.u - gt.u, hyps.v - gt.v).min(axis=0)
    return float(best[mask.valid].mean())


def member_variance(hyps: HypothesisSet, mask: Optional[ValidMask] = None) -> float:
    """Mean over valid pixels of ``var_u + var_v`` among the members."""
    if hyps.M < 2:
        raise FieldError("member variance needs at least two members")
    mask = resolve_mask(mask, hyps.shape)
    if mask.count == 0:
        raise FieldError("member_variance needs at least one valid pixel")
    merged = merge_empirical(hyps)
    return float(merged.total_variance[mask.valid].mean())


# ---------------------------------------------------------------------------
# entropy
# ---------------------------------------------------------------------------


def laplace_entropy(unc: UncertaintyField) -> EntropyMap:
    """Differential entropy in nats of the factorized Laplace, ``log(2 b e)`` per component."""
    return EntropyMap(np.log(2.0 * unc.b_u) + np.log(2.0 * unc.b_v) + 2.0)


def gaussian_entropy(sigma_x, sigma_y) -> EntropyMap:
    sx = np.maximum(np.asarray(sigma_x, dtype=np.float64), SCALE_FLOOR)
    sy = np.maximum(np.asarray(sigma_y, dtype=np.float64), SCALE_FLOOR)
    const = np.log(2.0 * np.pi * np.e)
    return EntropyMap(0.5 * (const + 2.0 * np.log(sx)) + 0.5 * (const + 2.0 * np.log(sy)))


def oracle_entropy(pred: FlowField, gt: FlowField, kind: str = "laplace") -> EntropyMap:
    """Entropy obtained when the scales equal the actual per-component errors."""
    if pred.shape != gt.shape:
        raise FieldError(f"dimension mismatch: {pred.shape} vs {gt.shape}")
    err_u = np.abs(pred.u - gt.u)
    err_v = np.abs(pred.v - gt.v)
    if kind == "laplace":
        return laplace_entropy(UncertaintyField(err_u, err_v))
    if kind == "gaussian":
        return gaussian_entropy(err_u, err_v)
    raise ValueError(f"unknown entropy kind {kind!r}")


def display_range(maps: Sequence[EntropyMap], shared: bool = True) -> list[tuple[float, float]]:
    """Value ranges for rendering a group of maps.

    With ``shared`` every map gets the joint min/max so an estimate and its
    oracle are comparable; otherwise each map uses its own range.
    """
    lohi = [(float(m.values.min()), float(m.values.max())) for m in maps]
    if shared and lohi:
        lo = min(a for a, _ in lohi)
        hi = max(b for _, b in lohi)
        return [(lo, hi)] * len(lohi)
    return lohi


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EvalRecord:
    """One image to evaluate: a point estimate, its ranking scalar and the truth."""

    name: str
    pred: FlowField
    ranking: np.ndarray
    gt: FlowField
    mask: Optional[ValidMask] = None
    members: Optional[HypothesisSet] = None


def evaluate_records(records: Sequence[EvalRecord], steps: int = DEFAULT_STEPS, dataset_wise: bool = False):
    """Compute the report dictionary and the summary curve for a set of images.

    Image-wise mode averages the per-image curves (images with zero
    baseline error are skipped); dataset-wise mode ranks all pixels jointly.
    The summary ``aepe`` is the mean of per-image AEPEs; ``oracle_epe`` and
    ``member_variance`` are per-image means, or None when unavailable.

    Returns:
        ``(report, curve, per_image_curves)``.
    """
    if not records:
        raise FieldError("nothing to evaluate")
    per_image, curves, pooled = [], [], []
    for rec in records:
        errors = _errors(rec)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateCurveWarning)
            curve = sparsification(errors, rec.ranking, steps=steps)
        curves.append(curve)
        pooled.append((errors, rec.ranking))
        entry = {
            "name": rec.name,
            "aepe": float(errors.valid_values().mean()),
            "ause": None if curve.degenerate else ause(curve),
            "degenerate": curve.degenerate,
            "oracle_epe": None,
            "member_variance": None,
        }
        if rec.members is not None:
            entry["oracle_epe"] = oracle_epe(rec.members, rec.gt, errors.mask)
            if rec.members.M >= 2:
                entry["member_variance"] = member_variance(rec.members, errors.mask)
        per_image.append(entry)
    if dataset_wise:
        curve = dataset_sparsification(pooled, steps)
    else:
        curve = average_curves(curves)

    def _mean(key):
        vals = [e[key] for e in per_image if e[key] is not None]
        return float(np.mean(vals)) if vals else None

    report = {
        "aepe": _mean("aepe"),
        "ause": 0.0 if curve.degenerate else ause(curve),
        "oracle_epe": _mean("oracle_epe"),
        "member_variance": _mean("member_variance"),
        "per_image": per_image,
        "steps": steps,
        "sparsification": "dataset" if dataset_wise else "image",
    }
    return report, curve, curves


def _errors(rec: EvalRecord) -> ErrorField:
    from flowuq.fields import endpoint_error

    mask = resolve_mask(rec.mask, rec.gt.shape)
    if mask.count == 0:
        raise FieldError(f"{rec.name}: no valid pixels")
    return endpoint_error(rec.pred, rec.gt, mask)
