"""Strict YAML schema for the simulator."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import yaml

from .sensors import NoiseSpec, SensorRates


class SimConfigError(ValueError):
    pass


@dataclass
class SceneConfig:
    extent: float = 24.0
    splat_count: int = 50_000
    seed: int = 7
    relief: float = 2.0


@dataclass
class RosetteConfig:
    petal_count: int = 4
    radius: float = 10.0
    altitude: float = 2.0
    speed: float = 0.75
    center: list = field(default_factory=lambda: [0.0, 0.0, 0.0])


@dataclass
class CameraConfig:
    width: int = 128
    height: int = 96
    focal: float = 110.0


@dataclass
class SimConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    rosette: RosetteConfig = field(default_factory=RosetteConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    rates: SensorRates = field(default_factory=SensorRates)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    trajectory_dt: float = 0.005

    @classmethod
    def from_yaml(cls, path) -> "SimConfig":
        with open(path) as f:
            data = yaml.safe_load(f) or {}
        if not isinstance(data, dict):
            raise SimConfigError("simulator config must hold a mapping")
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict) -> "SimConfig":
        sections = {
            "scene": SceneConfig,
            "rosette": RosetteConfig,
            "camera": CameraConfig,
            "rates": SensorRates,
            "noise": NoiseSpec,
        }
        unknown = set(data) - set(sections) - {"trajectory_dt"}
        if unknown:
            raise SimConfigError(f"unknown simulator config sections: {sorted(unknown)}")
        kwargs = {}
        for name, klass in sections.items():
            sub = data.get(name, {})
            if not isinstance(sub, dict):
                raise SimConfigError(f"section {name} must be a mapping")
            valid = {f.name for f in dataclasses.fields(klass)}
            bad = set(sub) - valid
            if bad:
                raise SimConfigError(f"unknown keys in {name}: {sorted(bad)}")
            kwargs[name] = klass(**sub)
        return cls(trajectory_dt=float(data.get("trajectory_dt", 0.005)), **kwargs)

    def to_yaml(self, path):
        with open(path, "w") as f:
            yaml.safe_dump(dataclasses.asdict(self), f, sort_keys=True)
