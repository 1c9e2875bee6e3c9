"""Command-line entry point: ``flowuq {eval,merge,viz,toy}``.

Manifests are JSON lines, one record per line, paths relative to the
manifest's directory. An evaluation record looks like::

    {"name": "frame_0001", "prediction": "pred/0001.flo",
     "uncertainty": "pred/0001_scale.flo", "ground_truth": "gt/0001.png",
     "mask": "gt"}

``uncertainty`` is a scale file, or ``"oracle"`` to rank by the true
error. ``mask`` is ``"gt"`` (validity from the ground truth, the default),
``"all"``, or the path of a PNG whose non-zero pixels are valid. A line of
the form ``{"options": {"steps": 20, "dataset_wise": true, "ranking":
"variance"}}`` sets dataset-level defaults that command-line flags
override.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
``FLOWUQ_THREADS`` caps the number of worker threads for per-record work.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import jsonschema
import numpy as np
import png

from flowuq import __version__
from flowuq.ensembles import merge_empirical, merge_predictive
from flowuq.evalmetrics import EvalRecord, entropy_ranking, evaluate_records, laplace_entropy, variance_ranking
from flowuq.fields import FieldError, FlowField, HypothesisSet, ValidMask, endpoint_error
from flowuq.io import (
    SCALE_TAG,
    FormatError,
    dump_json,
    encode_png,
    encode_ppm,
    load_flo,
    load_ground_truth,
    load_kitti_png,
    load_scale_file,
    render_flow,
    render_heatmap,
    save_flo,
    save_scale_file,
    validate_report,
    write_curve_csv,
)

log = logging.getLogger("flowuq")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
_NAME_RE = re.compile(r"^[A-Za-z0-9._-]+$")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def thread_count() -> int:
    raw = os.environ.get("FLOWUQ_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"FLOWUQ_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"FLOWUQ_THREADS must be a positive integer, got {raw!r}")
    return n


def _map(fn, items):
    """Ordered parallel map capped by FLOWUQ_THREADS."""
    workers = min(thread_count(), max(len(items), 1))
    if workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def read_manifest(path):
    """Parse a JSON-lines manifest into ``(records, options)``.

    Relative paths are resolved against the manifest's directory; blank
    lines are skipped.
    """
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    records, options = [], {}
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
        if not isinstance(obj, dict):
            raise DataError(f"{path}:{lineno}: record must be a JSON object")
        if "options" in obj:
            if not isinstance(obj["options"], dict):
                raise DataError(f"{path}:{lineno}: options must be an object")
            options.update(obj["options"])
            continue
        obj = dict(obj, _line=lineno, _base=path.parent)
        obj.setdefault("name", f"{len(records):04d}")
        if not isinstance(obj["name"], str) or not _NAME_RE.match(obj["name"]):
            raise DataError(f"{path}:{lineno}: name must match {_NAME_RE.pattern}")
        records.append(obj)
    if not records:
        raise DataError(f"{path}: manifest has no records")
    names = [r["name"] for r in records]
    if len(set(names)) != len(names):
        raise DataError(f"{path}: duplicate record names")
    return records, options


def _path(rec, key, required=True):
    value = rec.get(key)
    if value is None:
        if required:
            raise DataError(f"record {rec['name']} (line {rec['_line']}): missing {key!r}")
        return None
    if not isinstance(value, str):
        raise DataError(f"record {rec['name']}: {key!r} must be a string")
    return rec["_base"] / value


def load_flow(path) -> FlowField:
    path = Path(path)
    if path.suffix.lower() == ".png":
        return load_kitti_png(path)[0]
    return load_flo(path)


def load_mask_png(path, shape) -> ValidMask:
    try:
        width, height, rows, info = png.Reader(filename=str(path)).read()
        raw = np.vstack([np.asarray(row) for row in rows]).reshape(height, width, -1)
    except (png.Error, OSError) as exc:
        raise FormatError(f"cannot read mask {path}: {exc}") from exc
    if (height, width) != shape:
        raise FormatError(f"mask {path} is {height}x{width}, expected {shape[0]}x{shape[1]}")
    return ValidMask(raw.any(axis=-1))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _eval_record(rec, ranking_kind):
    pred = load_flow(_path(rec, "prediction"))
    gt, gt_mask = load_ground_truth(_path(rec, "ground_truth"))
    if pred.shape != gt.shape:
        raise DataError(f"record {rec['name']}: prediction {pred.shape} vs ground truth {gt.shape}")
    mask_src = rec.get("mask", "gt")
    if mask_src == "gt":
        mask = gt_mask
    elif mask_src == "all":
        mask = ValidMask.all_valid(gt.shape)
    else:
        mask = load_mask_png(_path(rec, "mask"), gt.shape)
    unc_src = rec.get("uncertainty")
    if unc_src == "oracle":
        ranking = endpoint_error(pred, gt).epe
    elif unc_src is None:
        raise DataError(f"record {rec['name']}: no uncertainty given")
    else:
        unc = load_scale_file(_path(rec, "uncertainty"))
        if unc.shape != gt.shape:
            raise DataError(f"record {rec['name']}: uncertainty {unc.shape} vs ground truth {gt.shape}")
        ranking = entropy_ranking(unc) if ranking_kind == "entropy" else variance_ranking(unc)
    return EvalRecord(rec["name"], pred, ranking, gt, mask)


def cmd_eval(args) -> int:
    records, options = read_manifest(args.manifest)
    steps = args.steps if args.steps is not None else options.get("steps", 100)
    dataset_wise = args.dataset_wise or bool(options.get("dataset_wise", False))
    ranking = args.ranking or options.get("ranking", "entropy")
    if not isinstance(steps, int) or steps < 2:
        raise UsageError(f"steps must be an integer >= 2, got {steps!r}")
    if ranking not in ("entropy", "variance"):
        raise UsageError(f"ranking must be 'entropy' or 'variance', got {ranking!r}")
    evals = _map(lambda r: _eval_record(r, ranking), records)
    report, curve, curves = evaluate_records(evals, steps, dataset_wise)
    report["ranking"] = ranking
    validate_report(report)
    _check_finite(report)
    out = Path(args.out)
    (out / "curves").mkdir(parents=True, exist_ok=True)
    dump_json(report, out / "report.json")
    write_curve_csv(curve, out / "curve.csv")
    for rec, c in zip(evals, curves):
        if len(c):
            write_curve_csv(c, out / "curves" / f"{rec.name}.csv")
    print(f"aepe {report['aepe']:.6f}  ause {report['ause']:.6f}  ({len(evals)} images)")
    return EXIT_OK


def _check_finite(report):
    for key in ("aepe", "ause"):
        if not np.isfinite(report[key]):
            raise FloatingPointError(f"non-finite {key} in report")


def _member_record(rec, need_scale):
    flow = load_flow(_path(rec, "prediction"))
    unc = load_scale_file(_path(rec, "uncertainty")) if need_scale else None
    if unc is not None and unc.shape != flow.shape:
        raise DataError(f"record {rec['name']}: uncertainty {unc.shape} vs prediction {flow.shape}")
    return flow, unc


def cmd_merge(args) -> int:
    members = [read_manifest(m)[0] for m in args.manifests]
    count = len(members[0])
    if any(len(m) != count for m in members):
        raise DataError("member manifests list different numbers of records")
    predictive = args.mode == "predictive"
    jobs = []
    for i in range(count):
        names = {m[i]["name"] for m in members}
        if len(names) != 1:
            raise DataError(f"record {i}: member names disagree: {sorted(names)}")
        jobs.append([m[i] for m in members])

    def merge_one(recs):
        loaded = [_member_record(r, predictive) for r in recs]
        shapes = {f.shape for f, _ in loaded}
        if len(shapes) != 1:
            raise DataError(f"record {recs[0]['name']}: member shapes differ: {sorted(shapes)}")
        if predictive:
            hyps = HypothesisSet([f for f, _ in loaded], [u for _, u in loaded])
            merged = merge_predictive(hyps)
        else:
            merged = merge_empirical(HypothesisSet([f for f, _ in loaded]))
        return recs[0]["name"], merged

    results = _map(merge_one, jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, merged in results:
        save_flo(out / f"{name}.flo", merged.mean)
        # a variance sigma^2 is stored as the Laplace scale with the same variance
        save_scale_file(
            out / f"{name}_scale.flo",
            np.sqrt(merged.var_u / 2.0),
            np.sqrt(merged.var_v / 2.0),
            mode=args.mode,
            members=len(members),
        )
    print(f"merged {count} records from {len(members)} members ({args.mode})")
    return EXIT_OK


def _is_scale_file(path: Path) -> bool:
    sidecar = path.with_name(path.name + ".json")
    if not sidecar.exists():
        return False
    try:
        return json.loads(sidecar.read_text()).get("format") == SCALE_TAG["format"]
    except (json.JSONDecodeError, AttributeError):
        return False


def cmd_viz(args) -> int:
    src = Path(args.input)
    if not src.exists():
        raise DataError(f"no such file: {src}")
    kind = args.kind
    if kind == "auto":
        kind = "entropy" if _is_scale_file(src) else "flow"
    if kind == "flow":
        rgb = render_flow(load_flow(src), args.max_magnitude)
    else:
        ent = laplace_entropy(load_scale_file(src))
        lo, hi = args.range if args.range else (None, None)
        if args.range and not lo < hi:
            raise UsageError(f"--range needs LO < HI, got {lo} {hi}")
        rgb = render_heatmap(ent, lo, hi)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    target = out / f"{src.stem}_{kind}.{args.format}"
    target.write_bytes(encode_ppm(rgb) if args.format == "ppm" else encode_png(rgb))
    print(target)
    return EXIT_OK


def cmd_toy(args) -> int:
    from flowuq.toytrain.experiment import run_experiment_matrix

    try:
        config = json.loads(Path(args.config).read_text())
    except OSError as exc:
        raise DataError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{args.config}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    result = run_experiment_matrix(config, out_dir=args.out)
    for name, rep in result["variants"].items():
        print(f"{name:16s} aepe {rep['aepe']:.4f}  ause {rep['ause']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def version_string() -> str:
    return f"flowuq {__version__} (python {platform.python_version()}, numpy {np.__version__})"


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="flowuq", description="Uncertainty evaluation and merging for optical flow.")
    p.add_argument("--version", action="version", version=version_string())
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    e = sub.add_parser("eval", help="sparsification metrics for a manifest")
    e.add_argument("manifest")
    e.add_argument("--steps", type=int, default=None, help="curve resolution (default 100)")
    e.add_argument("--dataset-wise", action="store_true", help="rank all pixels jointly")
    e.add_argument("--ranking", choices=["entropy", "variance"], default=None)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("merge", help="merge ensemble members")
    m.add_argument("manifests", nargs="+", help="one manifest per member")
    m.add_argument("--mode", choices=["empirical", "predictive"], required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_merge)

    v = sub.add_parser("viz", help="render a flow or uncertainty file")
    v.add_argument("input")
    v.add_argument("--kind", choices=["auto", "flow", "entropy"], default="auto")
    v.add_argument("--max-magnitude", type=float, default=None)
    v.add_argument("--range", type=float, nargs=2, metavar=("LO", "HI"), default=None)
    v.add_argument("--format", choices=["png", "ppm"], default="png")
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_viz)

    t = sub.add_parser("toy", help="run the toy experiment matrix")
    t.add_argument("config", help="JSON config (partial; defaults fill the rest)")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_toy)
    return p


def main(argv=None) -> int:
    from flowuq.toytrain.experiment import ConfigError
    from flowuq.toytrain.train import TrainingDiverged

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"flowuq: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"flowuq: invalid config at {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DataError, FormatError, FieldError, jsonschema.ValidationError, OSError) as exc:
        print(f"flowuq: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"flowuq: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
