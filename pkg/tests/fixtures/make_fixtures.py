"""Regenerate the committed test fixtures and golden files.

    python tests/fixtures/make_fixtures.py

Inputs are written with the package writers; golden reports are computed
from the raw bytes by the loop-based code in ``tests/reference.py`` only.
"""

import hashlib
import json
import math
import struct
import sys
from pathlib import Path

import numpy as np
import png

HERE = Path(__file__).parent
sys.path.insert(0, str(HERE.parent))

import reference as ref  # noqa: E402
from flowuq.fields import FlowField, ValidMask  # noqa: E402
from flowuq.io import encode_ppm, render_flow, render_heatmap, save_scale_file, write_flo, write_kitti_png  # noqa: E402
from flowuq.evalmetrics import laplace_entropy  # noqa: E402
from flowuq.fields import UncertaintyField  # noqa: E402


def _kitti_ref(data):
    """Decode a KITTI PNG with the published formulas, independently of flowuq.io."""
    width, height, rows, _ = png.Reader(bytes=data).read()
    rows = [list(r) for r in rows]
    u = [[(rows[i][3 * j] - 32768) / 64.0 for j in range(width)] for i in range(height)]
    v = [[(rows[i][3 * j + 1] - 32768) / 64.0 for j in range(width)] for i in range(height)]
    valid = [[rows[i][3 * j + 2] > 0 for j in range(width)] for i in range(height)]
    return u, v, valid


def make_eval(root: Path):
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(20240611)
    h, w = 6, 8
    lines = []
    # a: .flo ground truth with a scale file
    gt = FlowField(rng.normal(0, 3, (h, w)), rng.normal(0, 3, (h, w)))
    pred = FlowField(gt.u + rng.laplace(0, 1, (h, w)), gt.v + rng.laplace(0, 1, (h, w)))
    (root / "gt_a.flo").write_bytes(write_flo(gt))
    (root / "pred_a.flo").write_bytes(write_flo(pred))
    save_scale_file(root / "scale_a.flo", rng.uniform(0.1, 2, (h, w)), rng.uniform(0.1, 2, (h, w)))
    lines.append({"name": "a", "prediction": "pred_a.flo", "uncertainty": "scale_a.flo", "ground_truth": "gt_a.flo"})
    # b: KITTI ground truth with invalid pixels, multiples of 1/64
    gu = np.round(rng.normal(0, 5, (h, w)) * 64) / 64
    gv = np.round(rng.normal(0, 5, (h, w)) * 64) / 64
    valid = rng.random((h, w)) > 0.3
    (root / "gt_b.png").write_bytes(write_kitti_png(FlowField(gu, gv), ValidMask(valid)))
    pred = FlowField(gu + rng.normal(0, 2, (h, w)), gv + rng.normal(0, 2, (h, w)))
    (root / "pred_b.flo").write_bytes(write_flo(pred))
    err = np.abs(pred.u - gu) + rng.uniform(0, 1, (h, w))
    save_scale_file(root / "scale_b.flo", err, rng.uniform(0.5, 1.5, (h, w)))
    lines.append({"name": "b", "prediction": "pred_b.flo", "uncertainty": "scale_b.flo", "ground_truth": "gt_b.png"})
    # c: oracle ranking
    gt = FlowField(rng.normal(0, 1, (h, w)), rng.normal(0, 1, (h, w)))
    pred = FlowField(gt.u + rng.normal(0, 1, (h, w)), gt.v)
    (root / "gt_c.flo").write_bytes(write_flo(gt))
    (root / "pred_c.flo").write_bytes(write_flo(pred))
    lines.append({"name": "c", "prediction": "pred_c.flo", "uncertainty": "oracle", "ground_truth": "gt_c.flo"})
    # d: perfect prediction, zero baseline
    (root / "pred_d.flo").write_bytes(write_flo(gt))
    lines.append({"name": "d", "prediction": "pred_d.flo", "uncertainty": "oracle", "ground_truth": "gt_c.flo", "mask": "all"})
    (root / "manifest.jsonl").write_text("".join(json.dumps(x) + "\n" for x in lines))

    for ranking, dataset_wise, steps, out in (
        ("entropy", False, 20, "golden_report.json"),
        ("variance", True, 10, "golden_report_dataset.json"),
    ):
        report = golden_report(root, lines, ranking, dataset_wise, steps)
        (root / out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def golden_report(root, lines, ranking, dataset_wise, steps):
    per_image, curves, pooled_e, pooled_r = [], [], [], []
    for rec in lines:
        pu, pv = ref.read_flo((root / rec["prediction"]).read_bytes())
        gpath = root / rec["ground_truth"]
        if gpath.suffix == ".png":
            gu, gv, valid = _kitti_ref(gpath.read_bytes())
        else:
            gu, gv = ref.read_flo(gpath.read_bytes())
            valid = None
        e = ref.epe(pu, pv, gu, gv)
        if rec["uncertainty"] == "oracle":
            r = e
        else:
            bu, bv = ref.read_flo((root / rec["uncertainty"]).read_bytes())
            if ranking == "entropy":
                r = ref.entropy_rank(bu, bv)
            else:
                r = [[2 * bu[i][j] ** 2 + 2 * bv[i][j] ** 2 for j in range(len(bu[0]))] for i in range(len(bu))]
        ev, rv = ref.flatten_valid(e, valid), ref.flatten_valid(r, valid)
        pooled_e += ev
        pooled_r += rv
        c = ref.curve(ev, rv, steps)
        curves.append(c)
        per_image.append({
            "name": rec["name"],
            "aepe": math.fsum(ev) / len(ev),
            "ause": None if c[3] else ref.ause(*c[:3]),
            "degenerate": c[3],
            "oracle_epe": None,
            "member_variance": None,
        })
    summary = ref.curve(pooled_e, pooled_r, steps) if dataset_wise else ref.average(curves)
    return {
        "aepe": math.fsum(p["aepe"] for p in per_image) / len(per_image),
        "ause": ref.ause(*summary[:3]),
        "oracle_epe": None,
        "member_variance": None,
        "per_image": per_image,
        "steps": steps,
        "sparsification": "dataset" if dataset_wise else "image",
        "ranking": ranking,
    }


def make_merge(root: Path):
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(7)
    h, w = 5, 7
    for k in range(3):
        lines = []
        for name in ("x", "y"):
            flow = FlowField(rng.normal(0, 2, (h, w)), rng.normal(0, 2, (h, w)))
            (root / f"m{k}_{name}.flo").write_bytes(write_flo(flow))
            save_scale_file(root / f"m{k}_{name}_scale.flo", rng.uniform(0.2, 2, (h, w)), rng.uniform(0.2, 2, (h, w)))
            lines.append({"name": name, "prediction": f"m{k}_{name}.flo", "uncertainty": f"m{k}_{name}_scale.flo"})
        (root / f"member{k}.jsonl").write_text("".join(json.dumps(x) + "\n" for x in lines))


def make_viz(root: Path):
    root.mkdir(parents=True, exist_ok=True)
    h, w = 24, 32
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    flow = FlowField(xx - (w - 1) / 2, (h - 1) / 2 - yy)
    (root / "flow.flo").write_bytes(write_flo(flow))
    b = 0.1 + np.hypot(xx - 8, yy - 6) / 10
    save_scale_file(root / "scale.flo", b, b[::-1])
    unc = UncertaintyField(*_roundtrip32(b, b[::-1]))
    hashes = {
        "flow_ppm_sha256": hashlib.sha256(encode_ppm(render_flow(_roundtrip32_field(flow)))).hexdigest(),
        "entropy_ppm_sha256": hashlib.sha256(encode_ppm(render_heatmap(laplace_entropy(unc)))).hexdigest(),
    }
    (root / "golden.json").write_text(json.dumps(hashes, indent=2, sort_keys=True) + "\n")


def _roundtrip32(*arrays):
    return [np.asarray(a, dtype=np.float32).astype(np.float64) for a in arrays]


def _roundtrip32_field(f):
    return FlowField(*_roundtrip32(f.u, f.v))


def make_io(root: Path):
    root.mkdir(parents=True, exist_ok=True)
    # 3 wide, 2 high, built byte by byte from the format description
    data = struct.pack("<fii", 202021.25, 3, 2)
    data += struct.pack("<12f", *[float(i) - 5.5 for i in range(12)])
    (root / "tiny_3x2.flo").write_bytes(data)


if __name__ == "__main__":
    make_eval(HERE / "eval")
    make_merge(HERE / "merge")
    make_viz(HERE / "viz")
    make_io(HERE / "io")
    print("fixtures written to", HERE)
