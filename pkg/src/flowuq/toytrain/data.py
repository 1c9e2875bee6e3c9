"""Synthetic flow scenes with controllable ambiguity and noise.

Each scene is split into a few Voronoi regions. Every region draws a
descriptor and every pixel of the region carries the same feature vector:

    [z0, z1, z2, z3, texture, noise_level]

The clean motion is a fixed nonlinear function of ``z``. Regions with
``texture < AMBIGUITY_THRESHOLD`` are ambiguous in bimodal scenes: their
motion is offset by ``+d`` or ``-d`` along a feature-dependent direction,
and which sign applies is a per-scene fair coin that never enters the
features. With ``heteroscedastic=True`` Laplace noise with scale
``noise_scale(noise_level)`` is added to the ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from flowuq.fields import FlowField

NUM_FEATURES = 6
AMBIGUITY_THRESHOLD = 0.4
MODE_OFFSET = 3.0
NOISE_MIN = 0.02
NOISE_MAX = 1.5


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    features: np.ndarray        # (H, W, NUM_FEATURES)
    gt: FlowField
    mode: str
    latent: int                 # +1 / -1 in bimodal scenes, 0 otherwise
    ambiguous: np.ndarray       # (H, W) bool
    noise_scale: np.ndarray     # (H, W) Laplace scale of injected noise, 0 if none

    @property
    def shape(self):
        return self.gt.shape


def clean_flow(features):
    """Deterministic motion implied by the features."""
    z0, z1, z2, z3 = (features[..., i] for i in range(4))
    u = 2.0 * z0 + np.sin(2.0 * z1)
    v = 2.0 * z2 + 0.5 * z3 * z0
    return u, v


def mode_direction(features):
    phi = 0.5 * np.tanh(features[..., 1])
    return np.cos(phi), np.sin(phi)


def noise_scale(features):
    return NOISE_MIN + (NOISE_MAX - NOISE_MIN) * features[..., 5] ** 2


def realize_flow(features, ambiguous, latent: int):
    """Ground-truth motion for given features and latent sign (no noise)."""
    u, v = clean_flow(features)
    if latent:
        du, dv = mode_direction(features)
        u = u + np.where(ambiguous, latent * MODE_OFFSET * du, 0.0)
        v = v + np.where(ambiguous, latent * MODE_OFFSET * dv, 0.0)
    return u, v


def _regions(rng, height, width, num_regions):
    centers = rng.uniform(0, 1, size=(num_regions, 2)) * [height, width]
    yy, xx = np.mgrid[0:height, 0:width]
    d2 = (yy[..., None] - centers[:, 0]) ** 2 + (xx[..., None] - centers[:, 1]) ** 2
    return np.argmin(d2, axis=-1)


def _draw_features(rng, height, width, num_regions):
    labels = _regions(rng, height, width, num_regions)
    desc = np.empty((num_regions, NUM_FEATURES))
    desc[:, :4] = rng.normal(0.0, 1.0, size=(num_regions, 4))
    desc[:, 4] = rng.uniform(0.0, 1.0, size=num_regions)
    desc[:, 5] = rng.uniform(0.0, 1.0, size=num_regions)
    return desc[labels]


def generate_scenes(
    seed: int,
    count: int,
    mode: str = "unimodal",
    *,
    height: int = 16,
    width: int = 16,
    num_regions: int = 5,
    heteroscedastic: bool = False,
) -> list[SyntheticScene]:
    """Deterministic list of scenes for ``seed``.

    ``mode`` is ``"unimodal"`` or ``"bimodal"``.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if mode not in ("unimodal", "bimodal"):
        raise ValueError(f"unknown mode {mode!r}")
    rng = np.random.default_rng(seed)
    scenes = []
    for _ in range(count):
        features = _draw_features(rng, height, width, num_regions)
        latent = int(rng.choice([-1, 1])) if mode == "bimodal" else 0
        noise_rng = np.random.default_rng(rng.integers(2**63))
        scenes.append(_build(features, mode, latent, heteroscedastic, noise_rng))
    return scenes


def _build(features, mode, latent, heteroscedastic, noise_rng):
    ambiguous = features[..., 4] < AMBIGUITY_THRESHOLD if mode == "bimodal" else np.zeros(features.shape[:2], bool)
    u, v = realize_flow(features, ambiguous, latent)
    if heteroscedastic:
        scale = noise_scale(features)
        u = u + noise_rng.laplace(0.0, scale)
        v = v + noise_rng.laplace(0.0, scale)
    else:
        scale = np.zeros(features.shape[:2])
    features = np.array(features)
    features.setflags(write=False)
    return SyntheticScene(features, FlowField(u, v), mode, latent, ambiguous, scale)


def resample_latent(scene: SyntheticScene, rng: np.random.Generator, heteroscedastic: Optional[bool] = None) -> SyntheticScene:
    """Same features, freshly drawn latent motion (and noise)."""
    hetero = bool(scene.noise_scale.any()) if heteroscedastic is None else heteroscedastic
    latent = int(rng.choice([-1, 1])) if scene.mode == "bimodal" else 0
    noise_rng = np.random.default_rng(rng.integers(2**63))
    return _build(scene.features, scene.mode, latent, hetero, noise_rng)


def stack_scenes(scenes):
    """Stack scenes into ``(B, H, W, F)`` features and ``(B, H, W)`` gt arrays."""
    x = np.stack([s.features for s in scenes])
    gu = np.stack([s.gt.u for s in scenes])
    gv = np.stack([s.gt.v for s in scenes])
    return x, gu, gv

