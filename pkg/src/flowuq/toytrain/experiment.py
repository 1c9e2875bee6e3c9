"""Toy-scale comparison of empirical and predictive uncertainty estimates.

Each variant trains one or more toy models, predicts on a held-out set of
synthetic scenes and is scored with the same evaluation code used for real
flow fields. Variant names follow ``<family>_<estimate>``:

    single_pred       one Laplace head
    dropout_emp/pred  MC-dropout samples of a point / Laplace model
    sgdr_emp/pred     snapshots at the end of SGDR cycles
    bootstrap_emp/pred  members trained on random data subsets
    hyp_emp/hyp_pred  one multi-hypothesis model trained with WTA
    hyp_pred_merged   hyp_pred plus a learned merging head

Empirical variants rank pixels by the member variance, predictive variants
by the mixture variance, and single Laplace predictions by entropy.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

from flowuq.ensembles import BootstrapPlan, SgdrSchedule, merge_empirical, merge_predictive
from flowuq.evalmetrics import EvalRecord, entropy_ranking, evaluate_records, laplace_entropy, variance_ranking
from flowuq.fields import HypothesisSet
from flowuq.io import dump_json, encode_png, render_flow, render_heatmap, validate_report, write_curve_csv
from flowuq.toytrain.data import NUM_FEATURES, generate_scenes, stack_scenes
from flowuq.toytrain.model import forward, init_model, save_model
from flowuq.toytrain.train import (
    TrainConfig,
    predict_merged,
    train,
    train_bootstrap_ensemble,
    train_merge_head,
)

log = logging.getLogger(__name__)

VARIANTS = (
    "single_pred",
    "dropout_emp",
    "dropout_pred",
    "sgdr_emp",
    "sgdr_pred",
    "bootstrap_emp",
    "bootstrap_pred",
    "hyp_emp",
    "hyp_pred",
    "hyp_pred_merged",
)

DEFAULT_CONFIG = {
    "seed": 0,
    "task": {
        "mode": "bimodal",
        "heteroscedastic": True,
        "train_scenes": 512,
        "test_scenes": 16,
        "height": 16,
        "width": 16,
        "num_regions": 8,
    },
    "train": {
        "iterations": 1500,
        "base_lr": 0.03,
        "batch_size": 4,
        "hidden": [64, 64],
        "momentum": 0.9,
        "grad_clip": 5.0,
        "smoothness_weight": 0.1,
    },
    "ensemble": {
        "members": 8,
        "dropout_rate": 0.2,
        "bootstrap_fraction": 0.67,
        "sgdr_cycle": 200,
        "sgdr_pre_cycles": 2,
    },
    "merge": {"iterations": 1500, "hidden": [32, 32]},
    "eval": {"steps": 100, "dataset_wise": False},
    "variants": list(VARIANTS),
}

_POS_INT = {"type": "integer", "minimum": 1}
_HIDDEN = {"type": "array", "items": _POS_INT, "minItems": 1}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "task": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["unimodal", "bimodal"]},
                "heteroscedastic": {"type": "boolean"},
                "train_scenes": _POS_INT,
                "test_scenes": _POS_INT,
                "height": _POS_INT,
                "width": _POS_INT,
                "num_regions": _POS_INT,
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "iterations": _POS_INT,
                "base_lr": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": _POS_INT,
                "hidden": _HIDDEN,
                "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "grad_clip": {"type": "number", "minimum": 0},
                "smoothness_weight": {"type": "number", "minimum": 0},
            },
        },
        "ensemble": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "members": {"type": "integer", "minimum": 2},
                "dropout_rate": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "bootstrap_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "sgdr_cycle": _POS_INT,
                "sgdr_pre_cycles": {"type": "integer", "minimum": 0},
            },
        },
        "merge": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"iterations": _POS_INT, "hidden": _HIDDEN},
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"steps": {"type": "integer", "minimum": 2}, "dataset_wise": {"type": "boolean"}},
        },
        "variants": {"type": "array", "items": {"enum": list(VARIANTS)}, "minItems": 1, "uniqueItems": True},
    },
}


class ConfigError(ValueError):
    """Malformed experiment config; ``path`` names the offending key."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def _merge_defaults(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge_defaults(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(config: Optional[dict] = None) -> dict:
    """Validate a (partial) config and fill in defaults.

    Raises:
        ConfigError: with the dotted path of the first offending key.
    """
    config = {} if config is None else config
    if not isinstance(config, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(config), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        err = errors[0]
        path = ".".join(str(p) for p in err.absolute_path) or "<root>"
        if err.validator == "additionalProperties":
            extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
            path = ".".join(filter(None, [path if path != "<root>" else "", extra[0]]))
        raise ConfigError(path, err.message)
    return _merge_defaults(DEFAULT_CONFIG, config)


# ---------------------------------------------------------------------------
# variants
# ---------------------------------------------------------------------------


@dataclass
class _Prediction:
    """Per-scene output of a variant."""

    mean: object
    ranking: np.ndarray
    members: Optional[HypothesisSet]
    entropy: np.ndarray


def _base_config(cfg: dict, seed: int, **overrides) -> TrainConfig:
    t = cfg["train"]
    kwargs = dict(
        seed=seed,
        iterations=t["iterations"],
        schedule="cosine",
        base_lr=t["base_lr"],
        batch_size=t["batch_size"],
        momentum=t["momentum"],
        grad_clip=t["grad_clip"],
        hidden=tuple(t["hidden"]),
        smoothness_weight=t["smoothness_weight"],
        dropout_rate=0.0,
    )
    kwargs.update(overrides)
    return TrainConfig(**kwargs)


def _stack_members(fields):
    """HypothesisSet from a list of FlowField or (FlowField, UncertaintyField)."""
    if isinstance(fields[0], tuple):
        u = np.stack([f.u for f, _ in fields])
        v = np.stack([f.v for f, _ in fields])
        b_u = np.stack([s.b_u for _, s in fields])
        b_v = np.stack([s.b_v for _, s in fields])
        return HypothesisSet.from_arrays(u, v, b_u, b_v)
    return HypothesisSet.from_arrays(np.stack([f.u for f in fields]), np.stack([f.v for f in fields]))


def _from_members(members: HypothesisSet) -> _Prediction:
    merged = merge_predictive(members) if members.has_uncertainty else merge_empirical(members)
    # Gaussian entropy of the merged per-component variances, for display
    ent = 0.5 * np.log(2 * np.pi * np.e * np.maximum(merged.var_u, 1e-12))
    ent = ent + 0.5 * np.log(2 * np.pi * np.e * np.maximum(merged.var_v, 1e-12))
    return _Prediction(merged.mean, variance_ranking(merged), members, ent)


def _from_laplace(pred, members=None) -> _Prediction:
    flow, unc = pred
    return _Prediction(flow, entropy_ranking(unc), members, laplace_entropy(unc).values)


def _run_variant(name: str, cfg: dict, data, test, seed: int):
    """Train one variant; returns ``(models, predictions)``."""
    family, _, estimate = name.partition("_")
    with_scale = family == "single" or estimate.startswith("pred")
    loss = "laplace_nll" if with_scale else "epe"
    ens = cfg["ensemble"]
    m = ens["members"]
    if family == "single":
        model = init_model(seed, NUM_FEATURES, tuple(cfg["train"]["hidden"]), 1, True)
        train(model, data, _base_config(cfg, seed, loss=loss))
        return {name: model}, [_from_laplace(forward(model, s)) for s in test]
    if family == "dropout":
        rate = ens["dropout_rate"]
        model = init_model(seed, NUM_FEATURES, tuple(cfg["train"]["hidden"]), 1, with_scale)
        train(model, data, _base_config(cfg, seed, loss=loss, dropout_rate=rate))
        preds = []
        for i, s in enumerate(test):
            rng = np.random.default_rng([seed, 3, i])
            preds.append(_from_members(_stack_members([forward(model, s, (rate, rng)) for _ in range(m)])))
        return {name: model}, preds
    if family == "sgdr":
        sched = SgdrSchedule(
            cfg["train"]["base_lr"], ens["sgdr_cycle"], pre_cycles=ens["sgdr_pre_cycles"], num_snapshots=m
        )
        model = init_model(seed, NUM_FEATURES, tuple(cfg["train"]["hidden"]), 1, with_scale)
        result = train(model, data, _base_config(cfg, seed, loss=loss, schedule="sgdr", sgdr=sched))
        snaps = result.snapshots
        models = {f"{name}_{k}": snap for k, snap in enumerate(snaps)}
        return models, [_from_members(_stack_members([forward(mm, s) for mm in snaps])) for s in test]
    if family == "bootstrap":
        plan = BootstrapPlan(num_members=m, subset_fraction=ens["bootstrap_fraction"])
        members = train_bootstrap_ensemble(data, _base_config(cfg, seed, loss=loss, bootstrap=plan), with_scale)
        models = {f"{name}_{k}": mm for k, mm in enumerate(members)}
        return models, [_from_members(_stack_members([forward(mm, s) for mm in members])) for s in test]
    if family == "hyp":
        model = init_model(seed, NUM_FEATURES, tuple(cfg["train"]["hidden"]), m, with_scale)
        train(model, data, _base_config(cfg, seed, num_hyp=m, loss=loss))
        if estimate != "pred_merged":
            return {name: model}, [_from_members(forward(model, s)) for s in test]
        mcfg = _base_config(cfg, seed, iterations=cfg["merge"]["iterations"], loss="laplace_nll")
        merge = train_merge_head(model, data, mcfg, hidden=tuple(cfg["merge"]["hidden"]))
        preds = [_from_laplace(predict_merged(merge, model, s), forward(model, s)) for s in test]
        return {name: model, f"{name}_merge": merge.net}, preds
    raise ValueError(f"unknown variant {name!r}")


def run_experiment_matrix(config: Optional[dict] = None, out_dir=None) -> dict:
    """Train and evaluate the configured variants.

    Args:
        config: Partial config; missing keys take values from
            ``DEFAULT_CONFIG``.
        out_dir: If given, writes ``report.json``, ``curves/<variant>.csv``,
            ``models/<name>.fuqm`` and ``viz/<variant>_{flow,entropy}.png``
            (rendered for the first test scene).

    Returns:
        ``{"config": resolved, "variants": {name: report}}``. Each variant
        report validates against the evaluation report schema.
    """
    cfg = resolve_config(config)
    seed = cfg["seed"]
    task = cfg["task"]
    kw = dict(
        height=task["height"],
        width=task["width"],
        num_regions=task["num_regions"],
        heteroscedastic=task["heteroscedastic"],
    )
    train_scenes = generate_scenes([seed, 0], task["train_scenes"], task["mode"], **kw)
    test_scenes = generate_scenes([seed, 1], task["test_scenes"], task["mode"], **kw)
    data = stack_scenes(train_scenes)
    out = Path(out_dir) if out_dir is not None else None
    variants = {}
    for name in cfg["variants"]:
        log.info("training %s", name)
        models, preds = _run_variant(name, cfg, data, test_scenes, seed)
        records = [
            EvalRecord(f"scene_{i:03d}", p.mean, p.ranking, s.gt, None, p.members)
            for i, (s, p) in enumerate(zip(test_scenes, preds))
        ]
        report, curve, _ = evaluate_records(records, cfg["eval"]["steps"], cfg["eval"]["dataset_wise"])
        validate_report(report)
        variants[name] = report
        if out is not None:
            _write_variant(out, name, models, curve, preds[0])
    result = {"config": cfg, "variants": variants}
    if out is not None:
        dump_json(result, out / "report.json")
    return result


def _write_variant(out: Path, name: str, models: dict, curve, pred: _Prediction):
    for sub in ("curves", "models", "viz"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    write_curve_csv(curve, out / "curves" / f"{name}.csv")
    for key, model in models.items():
        (out / "models" / f"{key}.fuqm").write_bytes(save_model(model))
    (out / "viz" / f"{name}_flow.png").write_bytes(encode_png(render_flow(pred.mean)))
    (out / "viz" / f"{name}_entropy.png").write_bytes(encode_png(render_heatmap(pred.entropy)))
