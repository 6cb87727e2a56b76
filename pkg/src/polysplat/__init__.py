"""Differentiable rendering of linear volumetric primitives (octahedra and
tetrahedra) with a tiled ray-space rasterizer, analytic gradients and a
training pipeline."""

from .primitives import OCTAHEDRON, TETRAHEDRON, PrimitiveSet
from .projection import APPROXIMATE, EXACT, Camera
from .raster import RenderSettings, render

__all__ = ["OCTAHEDRON", "TETRAHEDRON", "PrimitiveSet", "Camera", "APPROXIMATE", "EXACT",
           "RenderSettings", "render"]
__version__ = "0.1.0"
