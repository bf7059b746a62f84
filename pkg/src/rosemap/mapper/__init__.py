from .config import PipelineConfig
from .rings import Ring, ring_partition
from .refine import RefinementResult, refine_pose
from .pipeline import MapperSession, PipelineResult, backproject_grid, run_pipeline

__all__ = [
    "PipelineConfig",
    "Ring",
    "ring_partition",
    "RefinementResult",
    "refine_pose",
    "MapperSession",
    "PipelineResult",
    "run_pipeline",
]
