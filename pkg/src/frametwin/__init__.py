"""Digital twins of partially printed wireframe structures.

A neural deformation field bends the planned Bézier struts until renders of
curve-anchored Gaussian kernels match camera images; unprinted struts are
then blended onto the deformed structure so the next batch prints in place.
"""

from .errors import (
    DegenerateCurveError,
    FrameTwinError,
    IllConditionedError,
    InvalidArgument,
    NumericError,
    UndefinedDistanceError,
    UsageError,
)
from .geometry import BezierCurve, bishop_frames, eval_curve, refit_curve, sample_curve
from .wireframe import DigitalTwin, PartialState, PrintPlan, WireframeGraph, blend_targets, cube_graph, load_graph, partial_state
from .field import DeformationField, Domain, EncodingConfig
from .splat import Camera, RenderOptions, render_view, render_views
from .optimize import LossWeights, TwinConfig, TwinResult, construct_twin
from .synth import SimConfig, adaptive_sim, chamfer_curves, generate_scene, parse_oracle
from .config import Config

__version__ = "0.1.0"

__all__ = [
    "BezierCurve", "Camera", "Config", "DegenerateCurveError", "DeformationField", "DigitalTwin", "Domain",
    "EncodingConfig", "FrameTwinError", "IllConditionedError", "InvalidArgument", "LossWeights", "NumericError",
    "PartialState", "PrintPlan", "RenderOptions", "SimConfig", "TwinConfig", "TwinResult", "UndefinedDistanceError",
    "UsageError", "WireframeGraph", "adaptive_sim", "bishop_frames", "blend_targets", "chamfer_curves",
    "construct_twin", "cube_graph", "eval_curve", "generate_scene", "load_graph", "parse_oracle", "partial_state",
    "refit_curve", "render_view", "render_views", "sample_curve",
]
