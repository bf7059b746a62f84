from .gaussians import SplatMap
from .render import RenderOutput, rasterize, render_backward

__all__ = ["SplatMap", "RenderOutput", "rasterize", "render_backward"]
