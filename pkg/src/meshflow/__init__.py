"""Deformable mesh reconstruction from a single 2-D surrogate slice.

A reference triangulated organ surface is deformed by an attention graph
network conditioned on features extracted from a live 2-D slice. The
package ships its own reverse-mode autodiff engine, differentiable
Chamfer-style losses, a synthetic breathing-data generator, and
training/evaluation harnesses.
"""

from . import autodiff, gnn, image, losses, mesh, pipeline, synthdata  # noqa: F401
from .autodiff import Adam, Tape, Tensor, backward, load_checkpoint, no_grad, save_checkpoint  # noqa: F401
from .image import ConvExtractor, PlaneSpec, SurrogateImage  # noqa: F401
from .losses import LossConfig, chamfer, sample_facet, sample_mesh, sampled_chamfer  # noqa: F401
from .mesh import (  # noqa: F401
    NormalizeTransform,
    TriMesh,
    load_obj,
    normalize,
    point_triangle_distance,
    save_obj,
    signed_vertex_distance,
    unsigned_surface_distance,
)
from .pipeline import EvalReport, Model, TrainConfig, crossval, evaluate, infer, train  # noqa: F401
from .synthdata import BreathingSequence, DeformParams, deform, make_dataset, make_reference  # noqa: F401

__version__ = "0.1.0"
