"""Grid data types shared by every module.

All grids are ``(height, width)`` numpy arrays stored row-major with the
origin at the top-left pixel, the same layout image files use. Arrays are
copied to float64 (or bool) on construction and marked read-only, so the
types can be shared freely once built.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

SCALE_FLOOR = 1e-6


class FieldError(ValueError):
    """Raised when a grid cannot be constructed or shapes disagree."""


def _frozen(arr, dtype=np.float64) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def _check_shape(shape):
    if len(shape) != 2 or shape[0] < 1 or shape[1] < 1:
        raise FieldError(f"grid must be 2-D with positive size, got shape {shape}")


@dataclass(frozen=True, eq=False)
class FlowField:
    """Per-pixel displacement ``(u, v)`` in pixels."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u = _frozen(self.u)
        v = _frozen(self.v)
        _check_shape(u.shape)
        if u.shape != v.shape:
            raise FieldError(f"u and v shapes differ: {u.shape} vs {v.shape}")
        if not (np.isfinite(u).all() and np.isfinite(v).all()):
            raise FieldError("flow contains non-finite values")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    def stack(self) -> np.ndarray:
        """Return an ``(H, W, 2)`` copy with u in channel 0."""
        return np.stack([self.u, self.v], axis=-1)

    @classmethod
    def from_array(cls, arr) -> "FlowField":
        arr = np.asarray(arr)
        if arr.ndim != 3 or arr.shape[-1] != 2:
            raise FieldError(f"expected (H, W, 2) array, got {arr.shape}")
        return cls(arr[..., 0], arr[..., 1])


@dataclass(frozen=True, eq=False)
class ValidMask:
    valid: np.ndarray

    def __post_init__(self):
        valid = _frozen(self.valid, dtype=bool)
        _check_shape(valid.shape)
        object.__setattr__(self, "valid", valid)

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape

    @property
    def count(self) -> int:
        return int(self.valid.sum())

    @classmethod
    def all_valid(cls, shape) -> "ValidMask":
        return cls(np.ones(shape, dtype=bool))


@dataclass(frozen=True, eq=False)
class UncertaintyField:
    """Per-pixel Laplace scales ``b_u``, ``b_v``.

    Negative scales are rejected and scales below ``SCALE_FLOOR`` (including
    zero) are raised to it, so ``log b`` stays finite. The variance view
    ``2 b^2`` is computed on access.
    """

    b_u: np.ndarray
    b_v: np.ndarray

    def __post_init__(self):
        b_u = np.array(self.b_u, dtype=np.float64)
        b_v = np.array(self.b_v, dtype=np.float64)
        _check_shape(b_u.shape)
        if b_u.shape != b_v.shape:
            raise FieldError(f"b_u and b_v shapes differ: {b_u.shape} vs {b_v.shape}")
        if np.isnan(b_u).any() or np.isnan(b_v).any():
            raise FieldError("scale contains NaN")
        if not (np.isfinite(b_u).all() and np.isfinite(b_v).all()):
            raise FieldError("scale contains non-finite values")
        if (b_u < 0).any() or (b_v < 0).any():
            raise FieldError("Laplace scales must be non-negative")
        object.__setattr__(self, "b_u", _frozen(np.maximum(b_u, SCALE_FLOOR)))
        object.__setattr__(self, "b_v", _frozen(np.maximum(b_v, SCALE_FLOOR)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.b_u.shape

    @property
    def var_u(self) -> np.ndarray:
        return 2.0 * self.b_u**2

    @property
    def var_v(self) -> np.ndarray:
        return 2.0 * self.b_v**2

    @classmethod
    def from_log_scale(cls, s_u, s_v) -> "UncertaintyField":
        return cls(np.exp(s_u), np.exp(s_v))

    @classmethod
    def from_variance(cls, var_u, var_v) -> "UncertaintyField":
        return cls(np.sqrt(np.asarray(var_u) / 2.0), np.sqrt(np.asarray(var_v) / 2.0))


@dataclass(frozen=True, eq=False)
class ErrorField:
    """Per-pixel endpoint error together with the mask it was computed under.

    Invalid pixels hold 0.0 and are ignored by every aggregation. Without
    a mask every pixel is valid.
    """

    epe: np.ndarray
    mask: Optional[ValidMask] = None

    def __post_init__(self):
        epe = np.array(self.epe, dtype=np.float64)
        _check_shape(epe.shape)
        if self.mask is None:
            object.__setattr__(self, "mask", ValidMask.all_valid(epe.shape))
        if epe.shape != self.mask.shape:
            raise FieldError("error grid and mask shapes differ")
        if not np.isfinite(epe).all() or (epe < 0).any():
            raise FieldError("endpoint errors must be finite and non-negative")
        epe = np.where(self.mask.valid, epe, 0.0)
        object.__setattr__(self, "epe", _frozen(epe))

    @property
    def shape(self) -> tuple[int, int]:
        return self.epe.shape

    def valid_values(self) -> np.ndarray:
        """Errors of valid pixels in row-major order."""
        return self.epe[self.mask.valid]


class HypothesisSet:
    """An ordered group of M flow fields, optionally each with scales.

    Either every member carries an :class:`UncertaintyField` or none does.
    Stacked ``(M, H, W)`` views are exposed as ``u``, ``v`` (and ``b_u``,
    ``b_v`` for predictive sets).
    """

    def __init__(self, flows: Sequence[FlowField], uncertainties: Optional[Sequence[UncertaintyField]] = None):
        flows = list(flows)
        if not flows:
            raise FieldError("hypothesis set needs at least one member")
        shape = flows[0].shape
        if any(f.shape != shape for f in flows):
            raise FieldError("all hypotheses must share dimensions")
        if uncertainties is not None:
            uncertainties = list(uncertainties)
            if len(uncertainties) != len(flows):
                raise FieldError("either all members carry uncertainties or none do")
            if any(unc is None for unc in uncertainties):
                raise FieldError("either all members carry uncertainties or none do")
            if any(unc.shape != shape for unc in uncertainties):
                raise FieldError("uncertainty shape does not match flow shape")
        self.flows = tuple(flows)
        self.uncertainties = tuple(uncertainties) if uncertainties is not None else None
        self.u = _frozen([f.u for f in flows])
        self.v = _frozen([f.v for f in flows])
        if self.uncertainties is not None:
            self.b_u = _frozen([unc.b_u for unc in self.uncertainties])
            self.b_v = _frozen([unc.b_v for unc in self.uncertainties])
        else:
            self.b_u = self.b_v = None

    @classmethod
    def from_arrays(cls, u, v, b_u=None, b_v=None) -> "HypothesisSet":
        """Build from stacked ``(M, H, W)`` arrays."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        if u.ndim != 3:
            raise FieldError(f"expected (M, H, W) arrays, got {u.shape}")
        flows = [FlowField(u[k], v[k]) for k in range(u.shape[0])]
        uncs = None
        if b_u is not None:
            b_u = np.asarray(b_u, dtype=np.float64)
            b_v = np.asarray(b_v, dtype=np.float64)
            uncs = [UncertaintyField(b_u[k], b_v[k]) for k in range(u.shape[0])]
        return cls(flows, uncs)

    @property
    def M(self) -> int:
        return len(self.flows)

    @property
    def shape(self) -> tuple[int, int]:
        return self.flows[0].shape

    @property
    def has_uncertainty(self) -> bool:
        return self.uncertainties is not None

    def __len__(self):
        return self.M

    def __iter__(self):
        uncs = self.uncertainties or (None,) * self.M
        return iter(zip(self.flows, uncs))


def make_flow(width: int, height: int, fill=(0.0, 0.0)) -> FlowField:
    if width < 1 or height < 1:
        raise FieldError(f"dimensions must be >= 1, got {width}x{height}")
    return FlowField(np.full((height, width), float(fill[0])), np.full((height, width), float(fill[1])))


def resolve_mask(mask: Optional[ValidMask], shape) -> ValidMask:
    """Return ``mask`` after a shape check, or an all-valid mask for None."""
    if mask is None:
        return ValidMask.all_valid(shape)
    if mask.shape != tuple(shape):
        raise FieldError(f"mask shape {mask.shape} does not match grid {tuple(shape)}")
    return mask


def _check_same(a, b):
    if a.shape != b.shape:
        raise FieldError(f"dimension mismatch: {a.shape} vs {b.shape}")


def endpoint_error(pred: FlowField, gt: FlowField, mask: Optional[ValidMask] = None) -> ErrorField:
    """Per-pixel Euclidean distance between predicted and true flow vectors."""
    _check_same(pred, gt)
    mask = resolve_mask(mask, pred.shape)
    epe = np.hypot(pred.u - gt.u, pred.v - gt.v)
    return ErrorField(epe, mask)


def mean_epe(errors: ErrorField, mask: Optional[ValidMask] = None) -> float:
    """Average endpoint error over valid pixels.

    ``mask`` defaults to the mask stored in ``errors``; when given it is
    combined with that mask.
    """
    valid = errors.mask.valid
    if mask is not None:
        valid = valid & resolve_mask(mask, errors.shape).valid
    if not valid.any():
        raise FieldError("mean_epe needs at least one valid pixel")
    return float(errors.epe[valid].mean())
