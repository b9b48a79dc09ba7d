"""Adaptive-template mesh reconstruction from volumetric images.

A small numpy autodiff core, a 3-D U-Net feature extractor, a GCN decoder that
predicts a per-subject template, and a staged GCN deformer trained with a
chamfer / Laplacian / normal / edge loss.
"""
from .mesh import TriMesh, icosphere, load_obj, save_obj
from .tensor import Tensor, precision
from .volume import Volume, load_volume, marching_cubes, save_volume

__all__ = ["Tensor", "TriMesh", "Volume", "icosphere", "load_obj", "load_volume", "marching_cubes",
           "precision", "save_obj", "save_volume"]
__version__ = "0.1.0"
