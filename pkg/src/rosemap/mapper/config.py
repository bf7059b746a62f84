"""Pipeline configuration with strict YAML loading."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    # mapping mode: incremental rings or one batch over all frames
    mode: str = "incremental"
    ring_width: float = 2.0
    seed_stride: int = 8
    fill_alpha: float = 0.5
    coverage_min: float = 0.3

    # local pose refinement
    refine_iters: int = 100
    refine_interleave_iters: int = 20
    refine_lr_rot: float = 1e-3
    refine_lr_trans: float = 1e-2
    refine_max_step_rot: float = 0.3
    refine_max_step_trans: float = 0.5

    # global re-optimization gate and external factor strength
    reopt_enabled: bool = True
    gate_factor: float = 2.0
    sigma_ext_rot: float = 0.01
    sigma_ext_trans: float = 0.02

    # photometric losses
    lambda1: float = 0.2
    lambda2: float = 0.05
    lambda3: float = 0.1
    lambda4: float = 0.01
    beta_min: float = 0.1

    # map optimization budget; per-frame steps keep large rings from being
    # shortchanged relative to small ones
    seed_steps: int = 400
    steps_per_ring: int = 250
    steps_per_frontier_frame: int = 0
    interleave_every: int = 50
    frontier_sample_bias: float = 0.5
    lr_means: float = 2e-3
    lr_log_scales: float = 5e-3
    lr_logit_opacities: float = 5e-2
    lr_colors: float = 2e-2

    # adaptive density control
    densify_every: int = 100
    densify_grad_threshold: float = 2e-3
    densify_scale_split: float = 0.2
    opacity_floor: float = 0.005

    # uncertainty head
    uncertainty_enabled: bool = True
    unc_hidden: int = 16
    unc_clusters: int = 8
    unc_lr: float = 1e-2

    # factor graph noise models
    huber_k: float = 1.345
    prior_sigma_rot: float = 1e-3
    prior_sigma_trans: float = 1e-3
    landmark_sigma_rot: float = 0.01
    landmark_sigma_trans: float = 0.02

    # misc
    rng_seed: int = 0
    match_tolerance: float = 0.02

    def __post_init__(self):
        if self.mode not in ("incremental", "batch"):
            raise ConfigError(f"mode must be incremental or batch, got {self.mode!r}")
        if self.ring_width <= 0:
            raise ConfigError("ring_width must be positive")
        if self.gate_factor <= 1:
            raise ConfigError("gate_factor must exceed 1")
        if self.seed_stride < 1:
            raise ConfigError("seed_stride must be at least 1")
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")

    @classmethod
    def field_names(cls) -> set:
        return {f.name for f in dataclasses.fields(cls)}

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        unknown = set(data) - cls.field_names()
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_yaml(cls, path) -> "PipelineConfig":
        with open(path) as f:
            data = yaml.safe_load(f) or {}
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping")
        return cls.from_dict(data)

    def to_yaml(self, path):
        with open(path, "w") as f:
            yaml.safe_dump(dataclasses.asdict(self), f, sort_keys=True)
