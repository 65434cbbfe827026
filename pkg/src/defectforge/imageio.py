"""8-bit PNG input/output and foreground extraction."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from defectforge.errors import DefectForgeError, DimensionError


def _open(path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise DefectForgeError(f"cannot read image {path}: {exc}") from exc
    return img


def load_image(path) -> np.ndarray:
    """RGB image as ``float64`` in ``[0, 1]`` with shape ``(H, W, 3)``."""
    return np.asarray(_open(path).convert("RGB"), dtype=np.float64) / 255.0


def to_uint8(image) -> np.ndarray:
    return np.floor(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def quantize(image) -> np.ndarray:
    """Round-trip through 8 bits, i.e. exactly what :func:`save_image` stores."""
    return to_uint8(image).astype(np.float64) / 255.0


def save_image(path, image) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")


def load_mask(path) -> np.ndarray:
    """8-bit mask file thresholded at 128 into a 0/1 ``uint8`` array."""
    return (np.asarray(_open(path).convert("L")) >= 128).astype(np.uint8)


def save_mask(path, mask) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(((np.asarray(mask) != 0) * 255).astype(np.uint8), mode="L").save(path, format="PNG")


def luminance(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    return 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]


def otsu_threshold(gray_u8) -> int:
    """Otsu's threshold on 8-bit values; pixels ``> t`` form the upper class."""
    hist = np.bincount(np.asarray(gray_u8, dtype=np.uint8).ravel(), minlength=256).astype(np.float64)
    p = hist / hist.sum()
    omega = np.cumsum(p)
    mu = np.cumsum(p * np.arange(256))
    mu_t = mu[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mu_t * omega - mu) ** 2 / (omega * (1.0 - omega))
    between[~np.isfinite(between)] = -1.0
    return int(np.argmax(between))


def largest_component(mask) -> np.ndarray:
    labels, n = ndimage.label(np.asarray(mask) != 0)  # 4-connectivity
    if n == 0:
        return np.zeros(labels.shape, dtype=np.uint8)
    sizes = np.bincount(labels.ravel())[1:]
    return (labels == 1 + int(np.argmax(sizes))).astype(np.uint8)


def heuristic_foreground(image) -> np.ndarray:
    """Otsu split of luminance, keeping the largest 4-connected object region.

    The class touching more of the image border is taken as background.
    """
    gray = np.floor(np.clip(luminance(image), 0, 1) * 255 + 0.5).astype(np.uint8)
    upper = gray > otsu_threshold(gray)
    border = np.concatenate([upper[0], upper[-1], upper[:, 0], upper[:, -1]])
    if border.mean() > 0.5:
        upper = ~upper
    return largest_component(upper)


def load_foreground(image_path, mask_path=None) -> np.ndarray:
    image = load_image(image_path)
    if mask_path is None:
        return heuristic_foreground(image)
    mask = load_mask(mask_path)
    if mask.shape != image.shape[:2]:
        raise DimensionError(f"foreground mask {mask.shape} does not match image {image.shape[:2]}")
    return mask
