"""Template-deformation vessel graphs and swept hexahedral meshes."""

from .graph import VascularGraph, VesselSegment, build_template, subdivide, validate_graph
from .mesher import quality_report, sweep_hex, sweep_surface
from .metrics import evaluate_graphs
from .net import DeformNet, TemplatePyramid, forward, init_net

__all__ = [
    "VascularGraph",
    "VesselSegment",
    "build_template",
    "subdivide",
    "validate_graph",
    "sweep_hex",
    "sweep_surface",
    "quality_report",
    "evaluate_graphs",
    "DeformNet",
    "TemplatePyramid",
    "forward",
    "init_net",
]

__version__ = "0.1.0"
