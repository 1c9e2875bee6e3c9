"""Ensemble merging and the bookkeeping used to build ensembles.

Empirical sets (point predictions only) are merged with the plain mean and
the biased ``1/M`` variance. Predictive sets (every member has Laplace
scales) are merged as a uniform mixture: member means are averaged and the
variance follows the law of total variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from flowuq.fields import FieldError, FlowField, HypothesisSet


@dataclass(frozen=True, eq=False)
class MergedPrediction:
    mean: FlowField
    var_u: np.ndarray
    var_v: np.ndarray

    def __post_init__(self):
        for name in ("var_u", "var_v"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            if arr.shape != self.mean.shape:
                raise FieldError(f"{name} shape {arr.shape} does not match mean {self.mean.shape}")
            if (arr < 0).any():
                raise FieldError(f"{name} has negative entries")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def total_variance(self) -> np.ndarray:
        """``var_u + var_v``, the default ranking scalar for merged outputs."""
        return self.var_u + self.var_v


def _moments(x):
    mu = x.mean(axis=0)
    return mu, ((x - mu) ** 2).mean(axis=0)


def merge_empirical(hyps: HypothesisSet) -> MergedPrediction:
    """Mean and ``1/M`` variance of member flows; member scales are ignored."""
    mu_u, var_u = _moments(hyps.u)
    mu_v, var_v = _moments(hyps.v)
    return MergedPrediction(FlowField(mu_u, mu_v), var_u, var_v)


def merge_predictive(hyps: HypothesisSet) -> MergedPrediction:
    """Moments of the uniform mixture of the members' Laplace distributions."""
    if not hyps.has_uncertainty:
        raise FieldError("predictive merging needs members with uncertainties")
    mu_u, between_u = _moments(hyps.u)
    mu_v, between_v = _moments(hyps.v)
    var_u = between_u + (2.0 * hyps.b_u**2).mean(axis=0)
    var_v = between_v + (2.0 * hyps.b_v**2).mean(axis=0)
    return MergedPrediction(FlowField(mu_u, mu_v), var_u, var_v)


def variance_of_laplace(b):
    """Variance ``2 b^2`` of a Laplace distribution with scale ``b``."""
    arr = np.asarray(b, dtype=np.float64)
    if (arr <= 0).any():
        raise ValueError("Laplace scale must be positive")
    out = 2.0 * arr**2
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# SGDR snapshots
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SgdrSchedule:
    """Cosine annealing with warm restarts.

    With ``t_mult == 1`` every cycle lasts ``cycle_length`` iterations;
    otherwise cycle ``i`` lasts ``cycle_length * t_mult**i`` (rounded).
    Snapshots are the ends of the ``num_snapshots`` cycles that follow the
    first ``pre_cycles`` cycles.
    """

    base_lr: float
    cycle_length: int
    t_mult: float = 1.0
    pre_cycles: int = 0
    num_snapshots: int = 1
    min_lr: float = 0.0

    def __post_init__(self):
        if self.cycle_length < 1:
            raise ValueError("cycle_length must be >= 1")
        if self.t_mult < 1:
            raise ValueError("t_mult must be >= 1")
        if self.pre_cycles < 0 or self.num_snapshots < 1:
            raise ValueError("need pre_cycles >= 0 and num_snapshots >= 1")

    def cycle_len(self, index: int) -> int:
        return max(1, int(round(self.cycle_length * self.t_mult**index)))

    @property
    def total_iterations(self) -> int:
        return sum(self.cycle_len(i) for i in range(self.pre_cycles + self.num_snapshots))


def sgdr_lr(schedule: SgdrSchedule, iteration: int) -> float:
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    t = iteration
    if schedule.t_mult == 1:
        length = schedule.cycle_length
        t %= length
    else:
        i = 0
        length = schedule.cycle_len(0)
        while t >= length:
            t -= length
            i += 1
            length = schedule.cycle_len(i)
    lo = schedule.min_lr
    return lo + 0.5 * (schedule.base_lr - lo) * (1.0 + math.cos(math.pi * t / length))


def snapshot_iterations(schedule: SgdrSchedule) -> list[int]:
    ends = []
    total = 0
    for i in range(schedule.pre_cycles + schedule.num_snapshots):
        total += schedule.cycle_len(i)
        ends.append(total)
    return ends[schedule.pre_cycles:]


# ---------------------------------------------------------------------------
# bootstrap subsets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BootstrapPlan:
    num_members: int = 8
    subset_fraction: float = 0.67
    seeds: Optional[Sequence[int]] = None
    with_replacement: bool = False

    def __post_init__(self):
        if self.num_members < 1:
            raise ValueError("num_members must be >= 1")
        if not 0 < self.subset_fraction <= 1:
            raise ValueError("subset_fraction must lie in (0, 1]")
        if self.seeds is not None and len(self.seeds) != self.num_members:
            raise ValueError("need one seed per member")

    def member_seeds(self) -> list[int]:
        if self.seeds is not None:
            return list(self.seeds)
        return list(range(self.num_members))

    def subset_size(self, dataset_size: int) -> int:
        return min(dataset_size, max(1, int(round(self.subset_fraction * dataset_size))))


def bootstrap_indices(plan: BootstrapPlan, dataset_size: int) -> list[np.ndarray]:
    """One seeded index subset per member.

    Without replacement (the default) each member gets
    ``round(fraction * N)`` distinct indices, sorted.
    """
    if dataset_size < 1:
        raise ValueError("dataset_size must be >= 1")
    size = plan.subset_size(dataset_size)
    out = []
    for seed in plan.member_seeds():
        rng = np.random.default_rng(seed)
        idx = rng.choice(dataset_size, size=size, replace=plan.with_replacement)
        out.append(np.sort(idx))
    return out
