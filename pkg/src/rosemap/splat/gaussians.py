"""Growable isotropic-splat container with per-parameter Adam state.

Each splat has 8 scalars: mean (3), scale (1, kept as log-scale), opacity
(1, kept as logit) and color (3, clipped to [0,1]). Storing the constrained
quantities in unconstrained form lets the optimizer take free steps.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

_ADAM_B1 = 0.9
_ADAM_B2 = 0.999
_ADAM_EPS = 1e-8

_PLY_PROPS = ("x", "y", "z", "scale", "opacity", "red", "green", "blue")


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    return np.log(p) - np.log1p(-p)


@dataclass
class ParamState:
    """First/second Adam moments for one parameter array."""

    m: np.ndarray
    v: np.ndarray


class SplatMap:
    """A growable set of isotropic 3D gaussians plus optimizer state."""

    PARAM_NAMES = ("means", "log_scales", "logit_opacities", "colors")

    def __init__(self):
        self.means = np.zeros((0, 3))
        self.log_scales = np.zeros(0)
        self.logit_opacities = np.zeros(0)
        self.colors = np.zeros((0, 3))
        self.ring_tags = np.zeros(0, dtype=np.int32)
        self.adam_step_count = 0
        self._adam = {
            name: ParamState(np.zeros_like(getattr(self, name)), np.zeros_like(getattr(self, name)))
            for name in self.PARAM_NAMES
        }

    def __len__(self) -> int:
        return self.means.shape[0]

    # -- activated views ----------------------------------------------------

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.logit_opacities)

    def validate(self):
        for name in self.PARAM_NAMES:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite entries in {name}")

    # -- growth / shrinkage -------------------------------------------------

    def add(self, means, scales, opacities, colors, ring_tag: int = 0):
        """Append splats given activated scale/opacity values."""
        means = np.atleast_2d(np.asarray(means, dtype=float))
        n = means.shape[0]
        scales = np.broadcast_to(np.asarray(scales, dtype=float), (n,))
        opacities = np.broadcast_to(np.asarray(opacities, dtype=float), (n,))
        colors = np.clip(np.broadcast_to(np.asarray(colors, dtype=float), (n, 3)), 0.0, 1.0)
        if np.any(scales <= 0):
            raise ValueError("scales must be positive")
        if np.any((opacities <= 0) | (opacities >= 1)):
            raise ValueError("opacities must lie strictly in (0, 1)")
        self._append_raw(means, np.log(scales), logit(opacities), colors,
                         np.full(n, ring_tag, dtype=np.int32))

    def _append_raw(self, means, log_scales, logit_opacities, colors, ring_tags):
        self.means = np.concatenate([self.means, means], axis=0)
        self.log_scales = np.concatenate([self.log_scales, log_scales])
        self.logit_opacities = np.concatenate([self.logit_opacities, logit_opacities])
        self.colors = np.concatenate([self.colors, colors], axis=0)
        self.ring_tags = np.concatenate([self.ring_tags, ring_tags.astype(np.int32)])
        for name in self.PARAM_NAMES:
            st = self._adam[name]
            pad_shape = (means.shape[0],) + st.m.shape[1:]
            st.m = np.concatenate([st.m, np.zeros(pad_shape)], axis=0)
            st.v = np.concatenate([st.v, np.zeros(pad_shape)], axis=0)

    def keep(self, mask: np.ndarray):
        """Retain only the splats where mask is True."""
        mask = np.asarray(mask, dtype=bool)
        self.means = self.means[mask]
        self.log_scales = self.log_scales[mask]
        self.logit_opacities = self.logit_opacities[mask]
        self.colors = self.colors[mask]
        self.ring_tags = self.ring_tags[mask]
        for st in self._adam.values():
            st.m = st.m[mask]
            st.v = st.v[mask]

    # -- optimization --------------------------------------------------------

    def adam_step(self, grads: dict, lrs: dict):
        """One Adam update; grads/lrs are keyed by parameter name."""
        self.adam_step_count += 1
        t = self.adam_step_count
        for name, g in grads.items():
            if name not in self._adam:
                raise KeyError(f"unknown parameter {name}")
            lr = lrs[name]
            st = self._adam[name]
            st.m = _ADAM_B1 * st.m + (1 - _ADAM_B1) * g
            st.v = _ADAM_B2 * st.v + (1 - _ADAM_B2) * g * g
            m_hat = st.m / (1 - _ADAM_B1 ** t)
            v_hat = st.v / (1 - _ADAM_B2 ** t)
            param = getattr(self, name)
            setattr(self, name, param - lr * m_hat / (np.sqrt(v_hat) + _ADAM_EPS))
        self.colors = np.clip(self.colors, 0.0, 1.0)

    # -- serialization -------------------------------------------------------

    def to_ply_bytes(self) -> bytes:
        n = len(self)
        header = (
            "ply\n"
            "format binary_little_endian 1.0\n"
            f"element vertex {n}\n"
            + "".join(f"property float {p}\n" for p in _PLY_PROPS)
            + "end_header\n"
        ).encode("ascii")
        data = np.empty((n, 8), dtype="<f4")
        data[:, 0:3] = self.means
        data[:, 3] = self.scales
        data[:, 4] = self.opacities
        data[:, 5:8] = self.colors
        return header + data.tobytes()

    def save_ply(self, path):
        with open(path, "wb") as f:
            f.write(self.to_ply_bytes())

    @classmethod
    def from_ply_bytes(cls, blob: bytes) -> "SplatMap":
        end = blob.index(b"end_header\n") + len(b"end_header\n")
        header = blob[:end].decode("ascii").splitlines()
        if header[0] != "ply" or header[1] != "format binary_little_endian 1.0":
            raise ValueError("unsupported PLY header")
        n = None
        props = []
        for line in header[2:]:
            if line.startswith("element vertex"):
                n = int(line.split()[-1])
            elif line.startswith("property"):
                props.append(line.split()[-1])
        if n is None or tuple(props) != _PLY_PROPS:
            raise ValueError("unexpected PLY layout")
        data = np.frombuffer(blob[end:], dtype="<f4").reshape(n, 8).astype(float)
        out = cls()
        opac = np.clip(data[:, 4], 1e-7, 1 - 1e-7)
        out._append_raw(data[:, 0:3], np.log(data[:, 3]), logit(opac),
                        np.clip(data[:, 5:8], 0.0, 1.0), np.zeros(n, dtype=np.int32))
        return out

    @classmethod
    def load_ply(cls, path) -> "SplatMap":
        with open(path, "rb") as f:
            return cls.from_ply_bytes(f.read())

    def save_npz(self, path):
        np.savez(
            path,
            means=self.means,
            log_scales=self.log_scales,
            logit_opacities=self.logit_opacities,
            colors=self.colors,
            ring_tags=self.ring_tags,
            adam_step_count=np.array(self.adam_step_count),
            **{f"adam_m_{k}": v.m for k, v in self._adam.items()},
            **{f"adam_v_{k}": v.v for k, v in self._adam.items()},
        )

    @classmethod
    def load_npz(cls, path) -> "SplatMap":
        blob = np.load(path)
        out = cls()
        out.means = blob["means"]
        out.log_scales = blob["log_scales"]
        out.logit_opacities = blob["logit_opacities"]
        out.colors = blob["colors"]
        out.ring_tags = blob["ring_tags"].astype(np.int32)
        out.adam_step_count = int(blob["adam_step_count"])
        out._adam = {
            name: ParamState(blob[f"adam_m_{name}"], blob[f"adam_v_{name}"])
            for name in cls.PARAM_NAMES
        }
        return out
