"""Compositing of defect masks onto normal images."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from defectforge.errors import DimensionError, ParameterError
from defectforge.fields import distance_transform

FADE_MODES = ("literal", "boundary_fade")


@dataclass(frozen=True)
class OverlayParams:
    """Fracture overlay settings.

    ``max_darken`` is the multiplicative floor reached at full strength, so 1.0
    means no darkening at all. ``max_color_shift`` is an additive RGB offset in
    image units. ``fade_mode="literal"`` measures strength by the distance to
    the mask, which is zero on every masked pixel; ``"boundary_fade"`` ramps
    strength up with depth into the defect instead.
    """

    base_alpha: float = 0.85
    max_darken: float = 0.45
    max_color_shift: tuple = (0.02, 0.01, 0.0)
    edge_fade: float = 3.0
    fade_mode: str = "literal"

    def __post_init__(self):
        if not 0.0 <= self.base_alpha <= 1.0:
            raise ParameterError(f"base_alpha must lie in [0, 1], got {self.base_alpha}")
        if not 0.0 <= self.max_darken <= 1.0:
            raise ParameterError(f"max_darken must lie in [0, 1], got {self.max_darken}")
        if len(self.max_color_shift) != 3:
            raise ParameterError("max_color_shift needs one value per channel")
        if self.fade_mode not in FADE_MODES:
            raise ParameterError(f"fade_mode must be one of {FADE_MODES}")

    @classmethod
    def from_dict(cls, data: dict | None) -> "OverlayParams":
        data = dict(data or {})
        if "max_color_shift" in data:
            data["max_color_shift"] = tuple(data["max_color_shift"])
        return cls(**data)

    def to_dict(self) -> dict:
        return {
            "base_alpha": self.base_alpha,
            "max_darken": self.max_darken,
            "max_color_shift": list(self.max_color_shift),
            "edge_fade": self.edge_fade,
            "fade_mode": self.fade_mode,
        }


@dataclass(frozen=True)
class ReferenceColor:
    z: tuple = (0.35, 0.22, 0.13)
    strength: float = 0.85

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.float64)
        if z.shape != (3,) or (z < 0).any() or (z > 1).any():
            raise ParameterError(f"reference colour must be 3 values in [0, 1], got {self.z}")
        if not 0.0 <= self.strength <= 1.0:
            raise ParameterError(f"strength must lie in [0, 1], got {self.strength}")

    @classmethod
    def from_dict(cls, data: dict | None) -> "ReferenceColor":
        data = dict(data or {})
        if "z" in data:
            data["z"] = tuple(data["z"])
        return cls(**data)

    def to_dict(self) -> dict:
        return {"z": list(self.z), "strength": self.strength}


def _check_pair(image, mask):
    img = np.asarray(image, dtype=np.float64)
    m = np.asarray(mask) != 0
    if img.ndim != 3 or img.shape[:2] != m.shape:
        raise DimensionError(f"image {img.shape} and mask {m.shape} are not aligned")
    return img, m


def apply_fracture_overlay(image, mask, params: OverlayParams) -> np.ndarray:
    """Darken and tint the masked pixels, then alpha-blend them with the original.

    Pixels outside the mask are returned bit-identical.
    """
    img, m = _check_pair(image, mask)
    if not params.edge_fade > 0:
        raise ParameterError(f"edge_fade must be > 0, got {params.edge_fade}")
    if params.fade_mode == "literal":
        strength = np.clip(1.0 - distance_transform(~m) / params.edge_fade, 0.0, 1.0)
    else:
        strength = np.clip(distance_transform(m) / params.edge_fade, 0.0, 1.0)
    s = strength[m][:, None]
    darken = 1.0 - (1.0 - params.max_darken) * s
    shift = np.asarray(params.max_color_shift, dtype=np.float64)[None, :] * s

    out = img.copy()
    orig = img[m]
    modified = orig * darken + shift
    out[m] = np.clip((1.0 - params.base_alpha) * orig + params.base_alpha * modified, 0.0, 1.0)
    return out


def blend_reference_color(image, mask, z, strength: float) -> np.ndarray:
    """``image * (1 - strength*mask) + z * (strength*mask)`` per channel."""
    img, m = _check_pair(image, mask)
    zc = np.asarray(z.z if isinstance(z, ReferenceColor) else z, dtype=np.float64)
    a = strength * m.astype(np.float64)[..., None]
    return img * (1.0 - a) + zc[None, None, :] * a
