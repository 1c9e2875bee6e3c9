"""A per-pixel multilayer perceptron with hand-written backpropagation.

The same weights are applied to every pixel's feature vector, which makes
the network a 1x1-receptive-field stand-in for a CNN. Outputs are laid out
per hypothesis: ``[u, v]`` for point heads and ``[a_u, a_v, s_u, s_v]``
(``s = log b``) for Laplace heads, repeated ``num_hyp`` times.

Checkpoint layout (little-endian)::

    4s      b"FUQM"
    uint32  version (1)
    uint32  num_hyp
    uint32  flags, bit 0 = Laplace head
    uint32  number of layers L
    uint32  L + 1 layer widths
    float32 per layer: weights (in x out, row-major) then biases (out)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from flowuq.fields import FlowField, HypothesisSet, UncertaintyField

LEAKY_SLOPE = 0.1
CKPT_MAGIC = b"FUQM"
CKPT_VERSION = 1


@dataclass(eq=False)
class ToyModel:
    sizes: tuple
    weights: list
    biases: list
    num_hyp: int = 1
    with_scale: bool = False

    @property
    def channels(self) -> int:
        return 4 if self.with_scale else 2

    @property
    def kind(self) -> str:
        if self.num_hyp > 1:
            return "hyp"
        return "laplace" if self.with_scale else "flow"

    @property
    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params)

    def copy(self) -> "ToyModel":
        return ToyModel(
            tuple(self.sizes),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.num_hyp,
            self.with_scale,
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])


def init_model(
    seed: int,
    in_features: int,
    hidden: Sequence[int] = (64, 64),
    num_hyp: int = 1,
    with_scale: bool = False,
) -> ToyModel:
    """He-initialized weights; output biases start at zero (so ``b = 1``)."""
    rng = np.random.default_rng(seed)
    out_dim = num_hyp * (4 if with_scale else 2)
    sizes = (in_features, *hidden, out_dim)
    weights, biases = [], []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        std = np.sqrt(2.0 / n_in) if i < len(sizes) - 2 else np.sqrt(1.0 / n_in)
        weights.append(rng.normal(0.0, std, size=(n_in, n_out)))
        biases.append(np.zeros(n_out))
    return ToyModel(sizes, weights, biases, num_hyp, with_scale)


@dataclass
class Cache:
    inputs: list = field(default_factory=list)
    preacts: list = field(default_factory=list)
    slopes: list = field(default_factory=list)
    masks: list = field(default_factory=list)


def forward_array(model: ToyModel, x: np.ndarray, dropout_rate: float = 0.0, rng: Optional[np.random.Generator] = None):
    """Run the network on ``(N, F)`` rows; returns ``(out, cache)``.

    With ``dropout_rate > 0`` every hidden unit is kept with probability
    ``1 - rate`` and survivors are scaled by ``1 / (1 - rate)``.
    """
    if dropout_rate and rng is None:
        raise ValueError("dropout needs an rng")
    cache = Cache()
    h = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        cache.inputs.append(h)
        z = h @ w + b
        if i == last:
            return z, cache
        cache.preacts.append(z)
        slope = (z > 0).astype(np.float64)
        slope *= 1.0 - LEAKY_SLOPE
        slope += LEAKY_SLOPE
        cache.slopes.append(slope)
        h = z * slope
        if dropout_rate:
            keep = rng.random(h.shape) >= dropout_rate
            mask = keep / (1.0 - dropout_rate)
            h = h * mask
        else:
            mask = None
        cache.masks.append(mask)
    raise AssertionError("unreachable")


def backward_array(model: ToyModel, cache: Cache, grad_out: np.ndarray) -> list:
    """Gradients ``[dW0, db0, dW1, db1, ...]`` given ``dLoss/dOut``."""
    grads = [None] * (2 * len(model.weights))
    g = grad_out
    for i in range(len(model.weights) - 1, -1, -1):
        grads[2 * i] = cache.inputs[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        if i == 0:
            break
        g = g @ model.weights[i].T
        mask = cache.masks[i - 1]
        if mask is not None:
            g = g * mask
        g = g * cache.slopes[i - 1]
    return grads


def split_outputs(model: ToyModel, out: np.ndarray) -> dict:
    """Turn ``(..., out_dim)`` outputs into ``(M, ...)`` arrays keyed u, v[, s_u, s_v]."""
    c = model.channels
    lead = out.shape[:-1]
    arr = np.moveaxis(out.reshape(lead + (model.num_hyp, c)), -2, 0)
    parts = {"u": arr[..., 0], "v": arr[..., 1]}
    if model.with_scale:
        parts["s_u"] = arr[..., 2]
        parts["s_v"] = arr[..., 3]
    return parts


def merge_output_grads(model: ToyModel, grads: dict) -> np.ndarray:
    """Inverse of :func:`split_outputs` for gradient dicts."""
    keys = ["u", "v"] + (["s_u", "s_v"] if model.with_scale else [])
    arr = np.stack([grads[k] for k in keys], axis=-1)
    arr = np.moveaxis(arr, 0, -2)
    return arr.reshape(arr.shape[:-2] + (-1,))


def forward(model: ToyModel, scene, dropout: Optional[tuple] = None):
    """Prediction for one scene in the head's natural type.

    Returns a :class:`FlowField` for point heads, ``(FlowField,
    UncertaintyField)`` for a single Laplace head and a
    :class:`HypothesisSet` for multi-hypothesis heads. ``dropout`` is an
    optional ``(rate, rng)`` pair.
    """
    rate, rng = dropout if dropout is not None else (0.0, None)
    features = scene.features if hasattr(scene, "features") else np.asarray(scene)
    h, w, f = features.shape
    out, _ = forward_array(model, features.reshape(-1, f), rate, rng)
    parts = split_outputs(model, out.reshape(h, w, -1))
    return outputs_to_fields(model, parts)


def outputs_to_fields(model: ToyModel, parts: dict):
    if model.kind == "flow":
        return FlowField(parts["u"][0], parts["v"][0])
    if model.kind == "laplace":
        return (
            FlowField(parts["u"][0], parts["v"][0]),
            UncertaintyField.from_log_scale(parts["s_u"][0], parts["s_v"][0]),
        )
    if model.with_scale:
        return HypothesisSet.from_arrays(parts["u"], parts["v"], np.exp(parts["s_u"]), np.exp(parts["s_v"]))
    return HypothesisSet.from_arrays(parts["u"], parts["v"])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_model(model: ToyModel) -> bytes:
    head = struct.pack("<4sIIII", CKPT_MAGIC, CKPT_VERSION, model.num_hyp, int(model.with_scale), len(model.weights))
    dims = struct.pack(f"<{len(model.sizes)}I", *model.sizes)
    body = b"".join(p.astype("<f4").tobytes() for p in model.params)
    return head + dims + body


def load_model(data: bytes) -> ToyModel:
    hdr = struct.calcsize("<4sIIII")
    if len(data) < hdr:
        raise ValueError("checkpoint truncated")
    magic, version, num_hyp, flags, n_layers = struct.unpack_from("<4sIIII", data)
    if magic != CKPT_MAGIC or version != CKPT_VERSION:
        raise ValueError("not a flowuq model checkpoint")
    sizes = struct.unpack_from(f"<{n_layers + 1}I", data, hdr)
    offset = hdr + 4 * (n_layers + 1)
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        for shape, bucket in (((n_in, n_out), weights), ((n_out,), biases)):
            count = int(np.prod(shape))
            if offset + 4 * count > len(data):
                raise ValueError("checkpoint truncated")
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).astype(np.float64)
            bucket.append(arr.reshape(shape))
            offset += 4 * count
    if offset != len(data):
        raise ValueError("trailing bytes in checkpoint")
    return ToyModel(tuple(sizes), weights, biases, num_hyp, bool(flags & 1))
