"""Deterministic temporal action proposal pipeline.

Feature fusion of an environment pathway with a multi-agent pathway,
boundary/duration label generation, weighted losses with analytic
gradients, proposal inference with Soft-NMS, and AR@AN / AUC evaluation.
"""

from tapgen.timeline import VideoMeta, SnippetGrid, GroundTruthAction, build_grid, temporal_iou

__all__ = [
    "VideoMeta",
    "SnippetGrid",
    "GroundTruthAction",
    "build_grid",
    "temporal_iou",
]

__version__ = "0.1.0"
