"""Adaptive density control: clone, split, prune.

Splats whose accumulated positional gradient is large are under-fitting
some structure: small ones get cloned (shifted one sigma along the mean
gradient direction), large ones get split into two at 0.8x scale. Splats
that faded below the opacity floor are dropped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gaussians import SplatMap


@dataclass
class DensifyReport:
    cloned: int
    split: int
    pruned: int
    total: int


def densify_and_prune(splats: SplatMap, grad_sum: np.ndarray, grad_count: np.ndarray,
                      grad_threshold: float, split_scale: float, opacity_floor: float,
                      rng: np.random.Generator) -> DensifyReport:
    """One density-control pass; mutates the map and returns counts.

    grad_sum/grad_count accumulate per-splat mean-position gradients over
    the optimization window preceding this call.
    """
    n = len(splats)
    if grad_sum.shape != (n, 3) or grad_count.shape != (n,):
        raise ValueError("gradient statistics do not match the map size")
    counts = np.maximum(grad_count, 1.0)
    avg_vec = grad_sum / counts[:, None]
    avg_mag = np.linalg.norm(avg_vec, axis=1)

    scales = splats.scales
    opac = splats.opacities
    high = avg_mag > grad_threshold
    clone_mask = high & (scales < split_scale)
    split_mask = high & (scales >= split_scale)

    clone_idx = np.flatnonzero(clone_mask)
    split_idx = np.flatnonzero(split_mask)

    new_means, new_scales, new_opac, new_colors, new_tags = [], [], [], [], []
    for i in clone_idx:
        direction = avg_vec[i]
        nrm = np.linalg.norm(direction)
        if nrm < 1e-12:
            direction = rng.normal(size=3)
            nrm = np.linalg.norm(direction)
        direction = direction / nrm
        new_means.append(splats.means[i] + scales[i] * direction)
        new_scales.append(scales[i])
        new_opac.append(opac[i])
        new_colors.append(splats.colors[i])
        new_tags.append(splats.ring_tags[i])
    for i in split_idx:
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        for sign in (1.0, -1.0):
            new_means.append(splats.means[i] + 0.5 * scales[i] * sign * direction)
            new_scales.append(0.8 * scales[i])
            new_opac.append(opac[i])
            new_colors.append(splats.colors[i])
            new_tags.append(splats.ring_tags[i])

    keep = (opac >= opacity_floor) & ~split_mask
    pruned = int(np.count_nonzero(~keep & ~split_mask))
    splats.keep(keep)
    if new_means:
        order = np.argsort(np.asarray(new_tags), kind="stable")
        means_arr = np.asarray(new_means)[order]
        scale_arr = np.asarray(new_scales)[order]
        opac_arr = np.clip(np.asarray(new_opac)[order], 1e-6, 1 - 1e-6)
        color_arr = np.asarray(new_colors)[order]
        tags_arr = np.asarray(new_tags)[order]
        for tag in np.unique(tags_arr):
            sel = tags_arr == tag
            splats.add(means_arr[sel], scale_arr[sel], opac_arr[sel], color_arr[sel],
                       ring_tag=int(tag))
    return DensifyReport(len(clone_idx), len(split_idx), pruned, len(splats))
