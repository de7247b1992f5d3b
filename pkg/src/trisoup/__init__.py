"""Differentiable triangle-soup rendering with binary opacity."""
from .scene import Camera, Dataset, TriangleSoup
from .texture import TextureGridSet
from .shading import ShadingNet

__version__ = "0.1.0"
__all__ = ["Camera", "Dataset", "TriangleSoup", "TextureGridSet", "ShadingNet"]
