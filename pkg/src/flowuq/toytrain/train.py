"""Training loops for the toy model.

All losses are averaged per pixel inside a training step (the WTA loss is
its pixel sum divided by the pixel count) and minimized with momentum SGD.
Runs are bitwise reproducible for a fixed config.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from flowuq.ensembles import BootstrapPlan, SgdrSchedule, bootstrap_indices, sgdr_lr, snapshot_iterations
from flowuq.fields import FlowField, UncertaintyField
from flowuq.losses import epe_terms, laplace_terms, wta_kernel
from flowuq.toytrain.data import stack_scenes
from flowuq.toytrain.model import (
    ToyModel,
    backward_array,
    forward_array,
    init_model,
    merge_output_grads,
    split_outputs,
)

log = logging.getLogger(__name__)

LOSS_KINDS = ("epe", "laplace_nll")
SCHEDULES = ("constant", "cosine", "sgdr")


class TrainingDiverged(RuntimeError):
    """The loss or a gradient became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    iterations: int = 2000
    schedule: str = "cosine"
    base_lr: float = 0.01
    sgdr: Optional[SgdrSchedule] = None
    batch_size: int = 4
    loss: str = "epe"
    num_hyp: int = 1
    smoothness_weight: float = 1.0
    dropout_rate: float = 0.2
    bootstrap: Optional[BootstrapPlan] = None
    momentum: float = 0.9
    grad_clip: float = 5.0
    hidden: tuple = (64, 64)

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.schedule == "sgdr" and self.sgdr is None:
            raise ValueError("schedule 'sgdr' needs an SgdrSchedule")
        if self.iterations < 1 or self.batch_size < 1 or self.num_hyp < 1:
            raise ValueError("iterations, batch_size and num_hyp must be >= 1")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")

    @property
    def total_iterations(self) -> int:
        if self.schedule == "sgdr":
            return self.sgdr.total_iterations
        return self.iterations

    def lr(self, it: int) -> float:
        if self.schedule == "constant":
            return self.base_lr
        if self.schedule == "cosine":
            return 0.5 * self.base_lr * (1.0 + math.cos(math.pi * it / self.iterations))
        return sgdr_lr(self.sgdr, it)


@dataclass
class TrainResult:
    model: ToyModel
    snapshots: list = field(default_factory=list)
    history: list = field(default_factory=list)
    usage: Optional[np.ndarray] = None


# ---------------------------------------------------------------------------
# loss over a batch
# ---------------------------------------------------------------------------


def output_loss(model: ToyModel, parts: dict, gu, gv, loss: str, wta: bool, smoothness_weight: float, valid=None):
    """Per-pixel-averaged loss and its gradient w.r.t. the split outputs.

    Returns ``(loss, grads, best)`` where ``best`` is the WTA selection or
    None.
    """
    npx = gu.size
    if valid is None:
        valid = np.ones(gu.shape, dtype=bool)
    nvalid = max(int(valid.sum()), 1)
    if wta:
        hs_u = parts.get("s_u") if loss == "laplace_nll" else None
        hs_v = parts.get("s_v") if loss == "laplace_nll" else None
        if loss == "laplace_nll" and hs_u is None:
            raise ValueError("Laplace NLL needs a model with scale outputs")
        best, data, smooth, g = wta_kernel(parts["u"], parts["v"], gu, gv, valid, hs_u, hs_v, smoothness_weight)
        value = (data.sum() + smoothness_weight * smooth.sum()) / npx
        grads = {k: g[k] / npx for k in g}
        if model.with_scale and "s_u" not in grads:
            grads["s_u"] = np.zeros_like(parts["u"])
            grads["s_v"] = np.zeros_like(parts["u"])
        return value, grads, best
    u, v = parts["u"][0], parts["v"][0]
    if loss == "epe":
        per, d_u, d_v = epe_terms(u - gu, v - gv)
        grads = {"u": d_u, "v": d_v}
        if model.with_scale:
            grads["s_u"] = np.zeros_like(u)
            grads["s_v"] = np.zeros_like(u)
    else:
        if not model.with_scale:
            raise ValueError("Laplace NLL needs a model with scale outputs")
        per, d_u, d_v, d_su, d_sv = laplace_terms(u - gu, v - gv, parts["s_u"][0], parts["s_v"][0])
        grads = {"u": d_u, "v": d_v, "s_u": d_su, "s_v": d_sv}
    value = float(np.where(valid, per, 0.0).sum() / nvalid)
    grads = {k: (np.where(valid, g, 0.0) / nvalid)[None] for k, g in grads.items()}
    return value, grads, None


def loss_and_grads(
    model: ToyModel,
    x: np.ndarray,
    gu: np.ndarray,
    gv: np.ndarray,
    loss: str = "epe",
    wta: bool = False,
    smoothness_weight: float = 1.0,
    dropout_rate: float = 0.0,
    rng: Optional[np.random.Generator] = None,
):
    """Loss and parameter gradients for features ``(B, H, W, F)``."""
    lead = x.shape[:-1]
    out, cache = forward_array(model, x.reshape(-1, x.shape[-1]), dropout_rate, rng)
    parts = split_outputs(model, out.reshape(lead + (-1,)))
    value, grads, best = output_loss(model, parts, gu, gv, loss, wta, smoothness_weight)
    g_out = merge_output_grads(model, grads).reshape(out.shape)
    return value, backward_array(model, cache, g_out), best


def _clip(grads, limit):
    if not limit:
        return grads
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if norm > limit:
        return [g * (limit / norm) for g in grads]
    return grads


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


def _loop(model, x, gu, gv, config: TrainConfig, wta: bool, snapshot_at=()) -> TrainResult:
    rng = np.random.default_rng([config.seed, 1])
    drop_rng = np.random.default_rng([config.seed, 2])
    params = model.params
    vel = [np.zeros_like(p) for p in params]
    snapshot_at = set(snapshot_at)
    result = TrainResult(model)
    n = x.shape[0]
    bs = min(config.batch_size, n)
    for it in range(config.total_iterations):
        idx = rng.choice(n, size=bs, replace=False)
        value, grads, best = loss_and_grads(
            model, x[idx], gu[idx], gv[idx], config.loss, wta, config.smoothness_weight, config.dropout_rate, drop_rng
        )
        if not math.isfinite(value) or not all(np.isfinite(g).all() for g in grads):
            raise TrainingDiverged(f"non-finite loss or gradient at iteration {it} (loss={value})")
        grads = _clip(grads, config.grad_clip)
        lr = config.lr(it)
        for p, v, g in zip(params, vel, grads):
            v *= config.momentum
            v -= lr * g
            p += v
        result.history.append(float(value))
        if it + 1 in snapshot_at:
            result.snapshots.append(model.copy())
    return result


def _arrays(data):
    if isinstance(data, tuple):
        return data
    return stack_scenes(data)


def train(model: ToyModel, data, config: TrainConfig) -> TrainResult:
    """Train ``model`` in place on scenes (or stacked arrays).

    Uses WTA automatically when the model has more than one hypothesis.
    With an SGDR schedule, copies of the weights are kept at the end of
    each counted annealing cycle.
    """
    x, gu, gv = _arrays(data)
    snaps = snapshot_iterations(config.sgdr) if config.schedule == "sgdr" else ()
    result = _loop(model, x, gu, gv, config, wta=model.num_hyp > 1, snapshot_at=snaps)
    log.debug("trained %s for %d iterations, final loss %.4f", model.kind, config.total_iterations, result.history[-1])
    return result


def train_wta(model: ToyModel, data, config: TrainConfig) -> TrainResult:
    """Multi-hypothesis training; reports how often each head wins on the data."""
    x, gu, gv = _arrays(data)
    result = _loop(model, x, gu, gv, config, wta=True)
    parts = predict_parts(model, x)
    from flowuq.losses import best_index_kernel

    best = best_index_kernel(parts["u"], parts["v"], gu, gv)
    result.usage = np.bincount(best.ravel(), minlength=model.num_hyp) / best.size
    return result


def train_bootstrap_ensemble(data, config: TrainConfig, with_scale: bool) -> list[ToyModel]:
    """One model per bootstrap member, each on its own data subset."""
    x, gu, gv = _arrays(data)
    plan = config.bootstrap or BootstrapPlan()
    models = []
    for k, idx in enumerate(bootstrap_indices(plan, x.shape[0])):
        cfg = replace(config, seed=config.seed * 1000 + k)
        model = init_model(cfg.seed, x.shape[-1], cfg.hidden, 1, with_scale)
        _loop(model, x[idx], gu[idx], gv[idx], cfg, wta=False)
        models.append(model)
    return models


def predict_parts(model: ToyModel, x, dropout_rate: float = 0.0, rng=None) -> dict:
    lead = x.shape[:-1]
    out, _ = forward_array(model, x.reshape(-1, x.shape[-1]), dropout_rate, rng)
    return split_outputs(model, out.reshape(lead + (-1,)))


# ---------------------------------------------------------------------------
# merging head
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class MergeModel:
    """Maps M hypotheses to one Laplace prediction per pixel.

    Inputs are the hypotheses centred on their mean (and their log scales
    when present). The network predicts an offset from the hypothesis mean
    and the log scales of the merged distribution.
    """

    net: ToyModel
    num_hyp: int
    with_scale: bool


def merge_inputs(parts: dict, with_scale: bool):
    mu_u = parts["u"].mean(axis=0)
    mu_v = parts["v"].mean(axis=0)
    cols = [parts["u"] - mu_u, parts["v"] - mu_v]
    if with_scale:
        cols += [parts["s_u"], parts["s_v"]]
    feats = np.concatenate(cols, axis=0)
    return np.moveaxis(feats, 0, -1), mu_u, mu_v


def train_merge_head(hyp_model: ToyModel, data, config: TrainConfig, hidden: Sequence[int] = (32, 32)) -> MergeModel:
    """Fit a merging network on top of a frozen multi-hypothesis model with Laplace NLL."""
    x, gu, gv = _arrays(data)
    parts = predict_parts(hyp_model, x)
    feats, mu_u, mu_v = merge_inputs(parts, hyp_model.with_scale)
    net = init_model(config.seed, feats.shape[-1], hidden, 1, with_scale=True)
    # the net predicts offsets, so the targets are residuals w.r.t. the hypothesis mean
    cfg = replace(config, loss="laplace_nll")
    _loop(net, feats, gu - mu_u, gv - mu_v, cfg, wta=False)
    return MergeModel(net, hyp_model.num_hyp, hyp_model.with_scale)


def predict_merged(merge: MergeModel, hyp_model: ToyModel, scene):
    """Merged ``(FlowField, UncertaintyField)`` for one scene."""
    features = scene.features if hasattr(scene, "features") else np.asarray(scene)
    parts = predict_parts(hyp_model, features[None])
    feats, mu_u, mu_v = merge_inputs(parts, hyp_model.with_scale)
    return merged_from_inputs(merge, feats[0], mu_u[0], mu_v[0])


def merged_from_inputs(merge: MergeModel, feats, mu_u, mu_v):
    out = predict_parts(merge.net, feats)
    return (
        FlowField(mu_u + out["u"][0], mu_v + out["v"][0]),
        UncertaintyField.from_log_scale(out["s_u"][0], out["s_v"][0]),
    )


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def _kink_signature(model, x, gu, gv, loss, wta, dropout_rate, seed):
    """Discrete state of every non-smooth operation in the forward pass."""
    rng = np.random.default_rng(seed) if dropout_rate else None
    lead = x.shape[:-1]
    out, cache = forward_array(model, x.reshape(-1, x.shape[-1]), dropout_rate, rng)
    sig = [z > 0 for z in cache.preacts]
    parts = split_outputs(model, out.reshape(lead + (-1,)))
    if wta:
        from flowuq.losses import best_index_kernel

        best = best_index_kernel(parts["u"], parts["v"], gu, gv)
        sig.append(best)
        for k in ("u", "v"):
            h = parts[k]
            sig.append(np.sign(h[..., 1:, :] - h[..., :-1, :]))
            sig.append(np.sign(h[..., :, 1:] - h[..., :, :-1]))
        sel_u = np.take_along_axis(parts["u"], best[None], 0)[0]
        sel_v = np.take_along_axis(parts["v"], best[None], 0)[0]
    else:
        sel_u, sel_v = parts["u"][0], parts["v"][0]
    sig.append(np.sign(sel_u - gu))
    sig.append(np.sign(sel_v - gv))
    return sig


def gradient_check(
    model: ToyModel,
    x,
    gu,
    gv,
    loss: str = "epe",
    wta: bool = False,
    smoothness_weight: float = 1.0,
    dropout_rate: float = 0.0,
    fraction: float = 0.01,
    h: float = 1e-5,
    seed: int = 0,
    min_probes: int = 1,
):
    """Compare backprop against central differences on random parameters.

    Probes whose ``+-h`` perturbation flips any activation, selection or
    absolute-value sign are reported with ``at_kink=True``.

    Returns a list of ``(analytic, numeric, at_kink)`` tuples.
    """
    rng = np.random.default_rng(seed)
    drop_seed = int(rng.integers(2**32))

    def run():
        r = np.random.default_rng(drop_seed) if dropout_rate else None
        return loss_and_grads(model, x, gu, gv, loss, wta, smoothness_weight, dropout_rate, r)

    _, grads, _ = run()
    base_sig = _kink_signature(model, x, gu, gv, loss, wta, dropout_rate, drop_seed)
    params = model.params
    sizes = [p.size for p in params]
    total = sum(sizes)
    count = max(min_probes, int(round(fraction * total)))
    flat_idx = rng.choice(total, size=min(count, total), replace=False)
    offsets = np.cumsum([0] + sizes)
    results = []
    for fi in flat_idx:
        pi = int(np.searchsorted(offsets, fi, side="right") - 1)
        local = np.unravel_index(fi - offsets[pi], params[pi].shape)
        p = params[pi]
        orig = p[local]
        p[local] = orig + h
        plus, _, _ = run()
        kink = _changed(base_sig, _kink_signature(model, x, gu, gv, loss, wta, dropout_rate, drop_seed))
        p[local] = orig - h
        minus, _, _ = run()
        kink |= _changed(base_sig, _kink_signature(model, x, gu, gv, loss, wta, dropout_rate, drop_seed))
        p[local] = orig
        results.append((float(grads[pi][local]), (plus - minus) / (2 * h), kink))
    return results


def _changed(a, b):
    return any(not np.array_equal(x, y) for x, y in zip(a, b))


def relative_error(analytic: float, numeric: float, floor: float = 1e-10) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
