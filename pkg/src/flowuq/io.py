"""Flow files, KITTI ground truth, rendering and report output.

``.flo`` layout (little-endian)::

    float32  202021.25        magic, the bytes spell "PIEH"
    int32    width
    int32    height
    float32  u, v, u, v, ...  interleaved, row-major, origin top-left

Uncertainty files reuse the ``.flo`` container with ``(b_u, b_v)`` in
place of ``(u, v)``, plus a JSON sidecar ``<file>.json`` holding
``{"format": "flowuq-scale", "payload": "laplace_b", ...}``.

KITTI flow PNGs are 16-bit RGB with ``u = (R - 2**15) / 64``,
``v = (G - 2**15) / 64`` and ``valid = B > 0``.
"""

from __future__ import annotations

import colorsys
import csv
import io as _stdio
import json
import struct
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np
import png

from flowuq.evalmetrics import EntropyMap, SparsificationCurve, sparsification_error
from flowuq.fields import FieldError, FlowField, UncertaintyField, ValidMask

FLO_MAGIC = 202021.25
FLO_HEADER = struct.Struct("<fii")
KITTI_OFFSET = 2**15
KITTI_SCALE = 64.0
SCALE_TAG = {"format": "flowuq-scale", "payload": "laplace_b"}


class FormatError(ValueError):
    """Raised for malformed or unsupported input files."""


# ---------------------------------------------------------------------------
# .flo
# ---------------------------------------------------------------------------


def read_flo(data: bytes) -> FlowField:
    if len(data) < FLO_HEADER.size:
        raise FormatError(f".flo too short for header: {len(data)} bytes")
    magic, width, height = FLO_HEADER.unpack_from(data)
    if magic != FLO_MAGIC:
        raise FormatError(f"bad .flo magic {magic!r}, expected {FLO_MAGIC}")
    if width < 1 or height < 1:
        raise FormatError(f"bad .flo dimensions {width}x{height}")
    expected = FLO_HEADER.size + width * height * 8
    if len(data) != expected:
        raise FormatError(f".flo payload size mismatch: got {len(data)} bytes, expected {expected}")
    payload = np.frombuffer(data, dtype="<f4", offset=FLO_HEADER.size).reshape(height, width, 2)
    if not np.isfinite(payload).all():
        raise FormatError(".flo payload contains non-finite values")
    return FlowField(payload[..., 0], payload[..., 1])


def write_flo(field: FlowField) -> bytes:
    payload = np.stack([field.u, field.v], axis=-1).astype("<f4")
    return FLO_HEADER.pack(FLO_MAGIC, field.width, field.height) + payload.tobytes()


def load_flo(path) -> FlowField:
    return read_flo(Path(path).read_bytes())


def save_flo(path, field: FlowField) -> None:
    Path(path).write_bytes(write_flo(field))


def save_scale_file(path, b_u, b_v, **meta) -> None:
    """Write Laplace scales as a ``.flo`` payload plus its sidecar tag."""
    path = Path(path)
    save_flo(path, FlowField(b_u, b_v))
    sidecar = dict(SCALE_TAG, **meta)
    path.with_name(path.name + ".json").write_text(json.dumps(sidecar, sort_keys=True) + "\n")


def load_scale_file(path) -> UncertaintyField:
    path = Path(path)
    sidecar = path.with_name(path.name + ".json")
    if sidecar.exists():
        try:
            tag = json.loads(sidecar.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"unreadable sidecar {sidecar}: {exc}") from exc
        if tag.get("format") != SCALE_TAG["format"] or tag.get("payload") != SCALE_TAG["payload"]:
            raise FormatError(f"{sidecar} does not describe a Laplace scale file")
    field = load_flo(path)
    try:
        return UncertaintyField(field.u, field.v)
    except FieldError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# KITTI 16-bit PNG
# ---------------------------------------------------------------------------


def read_kitti_png(data: bytes):
    """Decode a KITTI flow PNG into ``(FlowField, ValidMask)``.

    Invalid pixels get zero flow.
    """
    try:
        width, height, rows, info = png.Reader(bytes=data).read()
        raw = np.vstack([np.asarray(row, dtype=np.uint16) for row in rows])
    except png.Error as exc:
        raise FormatError(f"cannot decode PNG: {exc}") from exc
    if info["bitdepth"] != 16 or info["planes"] != 3 or info.get("palette"):
        raise FormatError(
            f"KITTI flow must be 16-bit RGB, got bitdepth={info['bitdepth']} planes={info['planes']}"
        )
    raw = raw.reshape(height, width, 3).astype(np.float64)
    valid = raw[..., 2] > 0
    u = np.where(valid, (raw[..., 0] - KITTI_OFFSET) / KITTI_SCALE, 0.0)
    v = np.where(valid, (raw[..., 1] - KITTI_OFFSET) / KITTI_SCALE, 0.0)
    return FlowField(u, v), ValidMask(valid)


def write_kitti_png(field: FlowField, mask: Optional[ValidMask] = None) -> bytes:
    """Encode flow in KITTI format; values are rounded to 1/64 px and clipped to 16 bits."""
    valid = mask.valid if mask is not None else np.ones(field.shape, dtype=bool)
    enc = np.zeros(field.shape + (3,), dtype=np.uint16)
    for c, comp in enumerate((field.u, field.v)):
        q = np.clip(np.rint(comp * KITTI_SCALE + KITTI_OFFSET), 0, 65535)
        enc[..., c] = np.where(valid, q, 0).astype(np.uint16)
    enc[..., 2] = valid.astype(np.uint16)
    buf = _stdio.BytesIO()
    writer = png.Writer(field.width, field.height, greyscale=False, bitdepth=16)
    writer.write(buf, enc.reshape(field.height, -1).tolist())
    return buf.getvalue()


def load_kitti_png(path):
    return read_kitti_png(Path(path).read_bytes())


def load_ground_truth(path):
    """Read ``.flo`` (all pixels valid) or KITTI ``.png`` ground truth."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        return load_kitti_png(path)
    field = load_flo(path)
    return field, ValidMask.all_valid(field.shape)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def make_colorwheel() -> np.ndarray:
    """The 55-entry Middlebury wheel as an ``(55, 3)`` array in [0, 255]."""
    RY, YG, GC, CB, BM, MR = 15, 6, 4, 11, 13, 6
    wheel = np.zeros((RY + YG + GC + CB + BM + MR, 3))
    col = 0
    wheel[col:col + RY, 0] = 255
    wheel[col:col + RY, 1] = np.floor(255 * np.arange(RY) / RY)
    col += RY
    wheel[col:col + YG, 0] = 255 - np.floor(255 * np.arange(YG) / YG)
    wheel[col:col + YG, 1] = 255
    col += YG
    wheel[col:col + GC, 1] = 255
    wheel[col:col + GC, 2] = np.floor(255 * np.arange(GC) / GC)
    col += GC
    wheel[col:col + CB, 1] = 255 - np.floor(255 * np.arange(CB) / CB)
    wheel[col:col + CB, 2] = 255
    col += CB
    wheel[col:col + BM, 2] = 255
    wheel[col:col + BM, 0] = np.floor(255 * np.arange(BM) / BM)
    col += BM
    wheel[col:col + MR, 2] = 255 - np.floor(255 * np.arange(MR) / MR)
    wheel[col:col + MR, 0] = 255
    return wheel


COLORWHEEL = make_colorwheel()


def wheel_position(u, v) -> np.ndarray:
    """Fractional colour-wheel index in ``[0, ncols - 1]`` for each direction."""
    angle = np.arctan2(-np.asarray(v, dtype=np.float64), -np.asarray(u, dtype=np.float64)) / np.pi
    return (angle + 1.0) / 2.0 * (COLORWHEEL.shape[0] - 1)


def render_flow(field: FlowField, max_magnitude: Optional[float] = None) -> np.ndarray:
    """Colour-code a flow field as an ``(H, W, 3)`` uint8 image.

    Hue encodes direction and saturation encodes magnitude relative to
    ``max_magnitude`` (default: the largest magnitude in the field). Zero
    motion is white; vectors longer than ``max_magnitude`` are darkened.
    """
    mag = np.hypot(field.u, field.v)
    if max_magnitude is None:
        max_magnitude = float(mag.max())
    elif max_magnitude <= 0:
        raise ValueError("max_magnitude must be positive")
    if max_magnitude == 0:
        return np.full(field.shape + (3,), 255, dtype=np.uint8)
    rad = mag / max_magnitude
    ncols = COLORWHEEL.shape[0]
    fk = wheel_position(field.u, field.v)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    f = (fk - k0)[..., None]
    col = ((1 - f) * COLORWHEEL[k0] + f * COLORWHEEL[k1]) / 255.0
    inside = (rad <= 1)[..., None]
    col = np.where(inside, 1 - rad[..., None] * (1 - col), col * 0.75)
    return np.floor(255 * col).astype(np.uint8)


HEATMAP_STOPS = np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 1.0], [1.0, 1.0, 0.0], [1.0, 0.0, 0.0]])


def render_heatmap(map: EntropyMap | np.ndarray, lo: Optional[float] = None, hi: Optional[float] = None) -> np.ndarray:
    """Blue-cyan-yellow-red rendering of a scalar map over ``[lo, hi]``.

    Values outside the range are clamped. Without an explicit range the
    map's own min/max is used; a constant map then renders at mid-scale.
    """
    values = map.values if isinstance(map, EntropyMap) else np.asarray(map, dtype=np.float64)
    if lo is None or hi is None:
        vmin, vmax = float(values.min()), float(values.max())
        lo = vmin if lo is None else lo
        hi = vmax if hi is None else hi
        if lo == hi:
            t = np.full(values.shape, 0.5)
            return _heat_colors(t)
    if lo >= hi:
        raise ValueError(f"heatmap range needs lo < hi, got [{lo}, {hi}]")
    t = np.clip((values - lo) / (hi - lo), 0.0, 1.0)
    return _heat_colors(t)


def _heat_colors(t):
    pos = t * (len(HEATMAP_STOPS) - 1)
    i0 = np.minimum(np.floor(pos).astype(int), len(HEATMAP_STOPS) - 2)
    f = (pos - i0)[..., None]
    rgb = (1 - f) * HEATMAP_STOPS[i0] + f * HEATMAP_STOPS[i0 + 1]
    return np.rint(255 * rgb).astype(np.uint8)


def hue_of(rgb) -> float:
    """HSV hue in [0, 1) of a single uint8 RGB triple."""
    r, g, b = (np.asarray(rgb, dtype=np.float64) / 255.0).tolist()
    return colorsys.rgb_to_hsv(r, g, b)[0]


def encode_png(rgb: np.ndarray) -> bytes:
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    buf = _stdio.BytesIO()
    png.Writer(w, h, greyscale=False, bitdepth=8).write(buf, rgb.reshape(h, -1).tolist())
    return buf.getvalue()


def encode_ppm(rgb: np.ndarray) -> bytes:
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes()


def save_image(path, rgb: np.ndarray) -> None:
    """Write PNG, or binary PPM when the suffix is ``.ppm``."""
    path = Path(path)
    data = encode_ppm(rgb) if path.suffix.lower() == ".ppm" else encode_png(rgb)
    path.write_bytes(data)


# ---------------------------------------------------------------------------
# curves and reports
# ---------------------------------------------------------------------------

CURVE_HEADER = ["fraction", "value", "oracle", "sparsification_error"]


def write_curve_csv(curve: SparsificationCurve, path) -> None:
    if len(curve) == 0:
        raise ValueError("cannot write an empty curve")
    err = sparsification_error(curve)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CURVE_HEADER)
        for row in zip(curve.fractions, curve.values, curve.oracle_values, err):
            writer.writerow([f"{x:.17g}" for x in row])


def read_curve_csv(path) -> SparsificationCurve:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CURVE_HEADER:
            raise FormatError(f"unexpected curve header {header}")
        rows = [[float(x) for x in row] for row in reader]
    arr = np.array(rows, dtype=np.float64).reshape(-1, 4)
    return SparsificationCurve(arr[:, 0], arr[:, 1], arr[:, 2])


_nullable_number = {"type": ["number", "null"]}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["aepe", "ause", "oracle_epe", "member_variance", "per_image"],
    "properties": {
        "aepe": {"type": "number", "minimum": 0},
        "ause": {"type": "number"},
        "oracle_epe": _nullable_number,
        "member_variance": _nullable_number,
        "per_image": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["aepe", "ause"],
                "properties": {
                    "name": {"type": "string"},
                    "aepe": {"type": "number", "minimum": 0},
                    "ause": {"type": ["number", "null"]},
                    "oracle_epe": _nullable_number,
                    "member_variance": _nullable_number,
                    "degenerate": {"type": "boolean"},
                },
            },
        },
    },
}


def validate_report(report: dict) -> None:
    """Raise ``jsonschema.ValidationError`` if ``report`` breaks the schema."""
    jsonschema.validate(report, REPORT_SCHEMA)


def dump_json(obj, path) -> None:
    """Deterministic JSON output: sorted keys, fixed indentation."""
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")
