"""Tiered diffusion for indoor object layouts: furniture first, small objects second."""

from .scene import CategoryTaxonomy, ObjectRecord, Scene, SceneGraph

__all__ = ["CategoryTaxonomy", "ObjectRecord", "Scene", "SceneGraph"]
__version__ = "0.1.0"
