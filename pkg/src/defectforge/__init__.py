"""Procedural industrial-defect synthesis with phase-field refinement."""

from defectforge.errors import DefectForgeError, DimensionError, NumericError, ParameterError
from defectforge.masks import FractureParams, PittingParams, WarpParams
from defectforge.overlay import OverlayParams, ReferenceColor
from defectforge.pipeline import GenerationRecipe, RefineSettings, run_dataset, run_generate, run_refine
from defectforge.refine import AcParams

__version__ = "0.1.0"

__all__ = [
    "AcParams",
    "DefectForgeError",
    "DimensionError",
    "FractureParams",
    "GenerationRecipe",
    "NumericError",
    "OverlayParams",
    "ParameterError",
    "PittingParams",
    "ReferenceColor",
    "RefineSettings",
    "WarpParams",
    "run_dataset",
    "run_generate",
    "run_refine",
]
