"""Contour-driven panoptic segmentation post-processing, losses and metrics."""

from contourpan.raster import (
    CITYSCAPES,
    ClassCatalog,
    ContourMask,
    ContourProbMap,
    InstanceLabelMap,
    InstanceRecord,
    OffsetField,
    PanopticMap,
    SemanticLabelMap,
    SemanticProbMap,
    ValidationError,
)
from contourpan.stf import FormatError, read_tensor, write_tensor

__version__ = "0.1.0"

__all__ = [
    "CITYSCAPES",
    "ClassCatalog",
    "ContourMask",
    "ContourProbMap",
    "FormatError",
    "InstanceLabelMap",
    "InstanceRecord",
    "OffsetField",
    "PanopticMap",
    "SemanticLabelMap",
    "SemanticProbMap",
    "ValidationError",
    "read_tensor",
    "write_tensor",
]
