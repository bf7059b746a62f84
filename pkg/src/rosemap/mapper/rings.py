"""Distance-based discretization of keyframes around the landmark."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class RingError(Exception):
    pass


@dataclass
class Ring:
    index: int
    r_lo: float
    r_hi: float
    members: list                 # (frame_id, var_id) pairs, time-ordered

    def frame_ids(self) -> list:
        return [fid for fid, _ in self.members]


def ring_partition(keyframes: list, landmark_xy: np.ndarray, ring_width: float) -> list:
    """Assign keyframes to half-open radial bands [k*w, (k+1)*w).

    `keyframes` holds (frame_id, var_id, RigidPose) in time order; membership
    uses the horizontal distance of the pose estimate from the landmark.
    Empty rings are dropped; ring 0 (the seed region) must be nonempty.
    """
    if ring_width <= 0:
        raise RingError("ring_width must be positive")
    if not keyframes:
        raise RingError("no keyframes to partition")
    landmark_xy = np.asarray(landmark_xy, dtype=float).reshape(-1)[:2]
    buckets: dict[int, list] = {}
    for fid, vid, pose in keyframes:
        d = float(np.linalg.norm(pose.translation[:2] - landmark_xy))
        k = int(np.floor(d / ring_width))
        buckets.setdefault(k, []).append((fid, vid))
    if 0 not in buckets:
        raise RingError("seed region is empty: no keyframe within one ring width of the landmark")
    return [Ring(k, k * ring_width, (k + 1) * ring_width, buckets[k])
            for k in sorted(buckets)]
