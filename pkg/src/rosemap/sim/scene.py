"""Procedural ground-truth seafloor built from splats.

The terrain is a patch of gently rolling height field carrying a layered
sinusoidal color pattern, dense enough that any nadir view from survey
altitude sees texture and parallax.
"""

from __future__ import annotations

import numpy as np

from ..splat.gaussians import SplatMap

_HEIGHT_WAVES = 6
_COLOR_WAVES = 4


def _height_field(rng: np.random.Generator):
    """Random low-frequency bumps, roughly +/- 0.3 m."""
    freqs = rng.uniform(0.15, 0.8, size=(_HEIGHT_WAVES, 2)) * 2 * np.pi
    phases = rng.uniform(0, 2 * np.pi, _HEIGHT_WAVES)
    amps = rng.uniform(0.02, 0.08, _HEIGHT_WAVES)

    def field(x, y):
        z = np.zeros_like(x)
        for k in range(_HEIGHT_WAVES):
            z = z + amps[k] * np.sin(freqs[k, 0] * x + freqs[k, 1] * y + phases[k])
        return z

    return field


def _color_field(rng: np.random.Generator):
    """Banded color with spatial periods of roughly 0.5-3 m per channel."""
    freqs = rng.uniform(2 * np.pi / 3.0, 2 * np.pi / 0.5, size=(3, _COLOR_WAVES, 2))
    signs = rng.choice([-1.0, 1.0], size=(3, _COLOR_WAVES, 2))
    freqs = freqs * signs
    phases = rng.uniform(0, 2 * np.pi, size=(3, _COLOR_WAVES))
    weights = rng.uniform(0.5, 1.0, size=(3, _COLOR_WAVES))
    weights = weights / weights.sum(axis=1, keepdims=True)

    def field(x, y):
        out = np.zeros((x.shape[0], 3))
        for c in range(3):
            acc = np.zeros_like(x)
            for k in range(_COLOR_WAVES):
                acc = acc + weights[c, k] * np.sin(freqs[c, k, 0] * x + freqs[c, k, 1] * y + phases[c, k])
            out[:, c] = 0.5 + 0.4 * acc
        return np.clip(out, 0.05, 0.95)

    return field


def generate_ground_truth_scene(extent: float, splat_count: int, seed: int,
                                relief: float = 1.0) -> SplatMap:
    """Scatter splats over a textured height-field plane centered at the origin.

    `relief` scales the terrain height variation; rougher ground gives
    nadir views more parallax.
    """
    if splat_count <= 0:
        raise ValueError("splat_count must be positive")
    if extent <= 0:
        raise ValueError("extent must be positive")
    rng = np.random.default_rng(seed)
    height = _height_field(rng)
    color = _color_field(rng)

    x = rng.uniform(-extent / 2, extent / 2, splat_count)
    y = rng.uniform(-extent / 2, extent / 2, splat_count)
    z = relief * height(x, y)
    means = np.stack([x, y, z], axis=1)

    spacing = extent / np.sqrt(splat_count)
    scales = spacing * 1.0 * rng.uniform(0.8, 1.25, splat_count)
    opacities = rng.uniform(0.7, 0.95, splat_count)
    colors = color(x, y)
    colors = np.clip(colors + rng.normal(0, 0.04, colors.shape), 0.02, 0.98)

    scene = SplatMap()
    scene.add(means, scales, opacities, colors, ring_tag=-1)
    return scene
