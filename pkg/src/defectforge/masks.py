"""Defect mask generators: fracture lines, pitting loss and plastic warp."""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, fields

import numpy as np

from defectforge import fields as F
from defectforge.errors import NumericError, ParameterError
from defectforge.rng import draw_seed

log = logging.getLogger(__name__)

# Recommended ranges for every mask-generation parameter, keyed by the
# parameter names used in the recipe files.
RECOMMENDED_RANGES = {
    "fracture": {
        "max_steps": (200, 800),
        "step_size": (1, 2),
        "branching_prob": (0.01, 0.05),
        "stop_prob": (0.01, 0.05),
        "n_starts": (1, 3),
        "w0": (0.5, 2.5),
        "alpha": (0.01, 0.02),
        "epsilon": (0.3, 1.0),
        "noise_scale": (0.1, 0.3),
        "noise_octaves": (1, 3),
        "morph_kernel_size": (1, 3),
        "sigma_blur": (1.0, 1.0),
    },
    "pitting": {
        "k": (1, 5),
        "polygon_size": (15, 65),
        "deform_factor": (0.1, 0.3),
        "overlap_prob": (0.7, 1.0),
        "n_growth": (8, 50),
        "grow_prob": (0.3, 0.7),
    },
    "warp": {
        "num_ctrl_pts": (3, 12),
        "max_offset": (8, 30),
        "dist_field_radius": (30, 80),
        "inpaint_radius": (3, 10),
        "margin": (10, 30),
    },
}


def _check_prob(name, value):
    if not 0.0 <= value <= 1.0:
        raise ParameterError(f"{name} must lie in [0, 1], got {value}")


class _Params:
    @classmethod
    def from_dict(cls, data: dict | None):
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ParameterError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
        for key, value in data.items():
            if isinstance(value, list):
                data[key] = tuple(value)
        return cls(**data)

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v) for f in fields(self)}


@dataclass(frozen=True)
class FractureParams(_Params):
    max_steps: int = 400
    step_size: float = 1.5
    branching_prob: float = 0.03
    stop_prob: float = 0.02
    n_starts: int = 2
    w0: float = 1.5
    alpha: float = 0.015
    epsilon: float = 0.6
    noise_scale: float = 0.2
    noise_octaves: int = 2
    morph_kernel_size: int = 3
    sigma_blur: float = 1.0
    blur_threshold: float = 0.3

    def __post_init__(self):
        _check_prob("branching_prob", self.branching_prob)
        _check_prob("stop_prob", self.stop_prob)
        if self.max_steps < 0 or self.n_starts < 0:
            raise ParameterError("max_steps and n_starts must be >= 0")
        if self.step_size <= 0:
            raise ParameterError(f"step_size must be > 0, got {self.step_size}")
        # alpha = 0 is allowed: it switches the thickness decay off.
        if self.w0 <= 0 or self.alpha < 0 or self.epsilon <= 0:
            raise ParameterError("w0 and epsilon must be > 0 and alpha >= 0")
        if self.noise_scale < 0 or self.noise_octaves < 1:
            raise ParameterError("noise_scale must be >= 0 and noise_octaves >= 1")
        if self.morph_kernel_size < 1 or self.morph_kernel_size % 2 == 0:
            raise ParameterError(f"morph_kernel_size must be odd, got {self.morph_kernel_size}")
        if self.sigma_blur <= 0:
            raise ParameterError(f"sigma_blur must be > 0, got {self.sigma_blur}")


@dataclass(frozen=True)
class PittingParams(_Params):
    k: int = 3
    polygon_size: tuple = (15.0, 40.0)
    deform_factor: float = 0.2
    overlap_prob: float = 0.85
    n_growth: int = 12
    grow_prob: float = 0.5
    perlin_threshold: float = 0.25
    noise_enabled: bool = True
    noise_octaves: int = 3
    n_vertices: tuple = (6, 12)

    def __post_init__(self):
        _check_prob("overlap_prob", self.overlap_prob)
        _check_prob("grow_prob", self.grow_prob)
        lo, hi = self.polygon_size
        if not 0 < lo <= hi:
            raise ParameterError(f"polygon_size must satisfy 0 < min <= max, got {self.polygon_size}")
        if self.k < 0 or self.n_growth < 0:
            raise ParameterError("k and n_growth must be >= 0")
        if not 0 <= self.deform_factor < 0.5:
            raise ParameterError(f"deform_factor must lie in [0, 0.5), got {self.deform_factor}")
        if not 3 <= self.n_vertices[0] <= self.n_vertices[1]:
            raise ParameterError(f"n_vertices must satisfy 3 <= min <= max, got {self.n_vertices}")
        if self.noise_octaves < 1:
            raise ParameterError("noise_octaves must be >= 1")


@dataclass(frozen=True)
class WarpParams(_Params):
    num_ctrl_pts: int = 6
    max_offset: float = 15.0
    dist_field_radius: float = 50.0
    inpaint_radius: int = 5
    margin: int = 15
    partial_roi: bool = False

    def __post_init__(self):
        if self.num_ctrl_pts < 3:
            raise ParameterError(f"num_ctrl_pts must be >= 3, got {self.num_ctrl_pts}")
        if self.max_offset < 0 or self.margin < 0 or self.inpaint_radius < 1:
            raise ParameterError("max_offset, margin must be >= 0 and inpaint_radius >= 1")
        if self.dist_field_radius <= 0:
            raise ParameterError("dist_field_radius must be > 0")


# --------------------------------------------------------------------------
# fracture lines
# --------------------------------------------------------------------------
def _round_half_up(v: float) -> int:
    return math.floor(v + 0.5)


def generate_skeleton(foreground, params: FractureParams, rng: np.random.Generator) -> np.ndarray:
    """Grow a branching fracture skeleton from random seeds inside ``foreground``.

    Frontiers live in a FIFO queue. A frontier whose next pixel leaves the image
    or the foreground is dropped.
    """
    fg = np.asarray(foreground) != 0
    height, width = fg.shape
    skeleton = np.zeros((height, width), dtype=np.uint8)
    ys, xs = np.nonzero(fg)
    if len(ys) == 0:
        return skeleton

    frontiers = deque()
    for pick in rng.integers(0, len(ys), size=params.n_starts):
        y0, x0 = int(ys[pick]), int(xs[pick])
        angle = rng.uniform(0.0, 2.0 * math.pi)
        frontiers.append((float(y0), float(x0), math.sin(angle), math.cos(angle), params.max_steps))
        skeleton[y0, x0] = 1

    step = params.step_size
    while frontiers:
        y, x, dy, dx, steps = frontiers.popleft()
        if steps <= 0:
            continue
        y_new = y + dy * step
        x_new = x + dx * step
        yi = _round_half_up(y_new)
        xi = _round_half_up(x_new)
        if not (0 <= yi < height and 0 <= xi < width) or not fg[yi, xi]:
            continue
        skeleton[yi, xi] = 1
        steps -= 1
        if rng.random() < params.stop_prob:
            continue
        frontiers.append((y_new, x_new, dy, dx, steps))
        if rng.random() < params.branching_prob:
            theta = rng.uniform(-math.pi / 4.0, math.pi / 4.0)
            c, s = math.cos(theta), math.sin(theta)
            frontiers.append((y_new, x_new, dy * c - dx * s, dy * s + dx * c, steps // 2))
    return skeleton


def thickness_mask(skeleton, params: FractureParams, noise_seed: int) -> np.ndarray:
    """Pre-morphology fracture mask: pixels with ``dist + noise < w0*exp(-alpha*dist) + epsilon``."""
    skel = np.asarray(skeleton) != 0
    height, width = skel.shape
    dist = F.distance_transform(~skel)
    wt = params.w0 * np.exp(-params.alpha * dist) + params.epsilon
    noise = F.perlin_field(height, width, params.noise_octaves, params.noise_scale, noise_seed)
    return ((wt > 0) & (dist + noise < wt)).astype(np.uint8)


def fracture_mask_from_skeleton(skeleton, params: FractureParams, rng: np.random.Generator, foreground=None) -> np.ndarray:
    """Thicken a skeleton into a fracture mask, then smooth it.

    Closing and opening with a square kernel, a Gaussian blur and a threshold
    follow the thickness test. When ``foreground`` is given the result is
    clipped to it, since thickening and blurring can spill past the object.
    """
    core = thickness_mask(skeleton, params, draw_seed(rng))
    m = F.morph(core, "close", params.morph_kernel_size)
    m = F.morph(m, "open", params.morph_kernel_size)
    blurred = F.gaussian_blur(m.astype(np.float64), params.sigma_blur)
    out = (blurred > params.blur_threshold).astype(np.uint8)
    if foreground is not None:
        out &= (np.asarray(foreground) != 0).astype(np.uint8)
    return out


def generate_fracture_mask(foreground, params: FractureParams, rng: np.random.Generator) -> np.ndarray:
    skeleton = generate_skeleton(foreground, params, rng)
    return fracture_mask_from_skeleton(skeleton, params, rng, foreground=foreground)


# --------------------------------------------------------------------------
# pitting loss
# --------------------------------------------------------------------------
def rasterize_polygon(vertices, shape) -> np.ndarray:
    """Even-odd fill of a polygon given as ``(row, col)`` vertices, sampled at pixel centres."""
    v = np.asarray(vertices, dtype=np.float64)
    height, width = shape
    out = np.zeros(shape, dtype=np.uint8)
    y_lo = max(int(math.floor(v[:, 0].min())), 0)
    y_hi = min(int(math.ceil(v[:, 0].max())), height - 1)
    x_lo = max(int(math.floor(v[:, 1].min())), 0)
    x_hi = min(int(math.ceil(v[:, 1].max())), width - 1)
    if y_lo > y_hi or x_lo > x_hi:
        return out
    py, px = np.meshgrid(np.arange(y_lo, y_hi + 1, dtype=np.float64), np.arange(x_lo, x_hi + 1, dtype=np.float64), indexing="ij")
    inside = np.zeros(py.shape, dtype=bool)
    for (y1, x1), (y2, x2) in zip(v, np.roll(v, -1, axis=0)):
        if y1 == y2:
            continue
        straddles = (y1 > py) != (y2 > py)
        x_cross = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= straddles & (px < x_cross)
    out[y_lo : y_hi + 1, x_lo : x_hi + 1] = inside
    return out


def sample_pitting_polygons(foreground, params: PittingParams, rng: np.random.Generator) -> list:
    """Draw ``k`` jittered polygons centred on foreground pixels.

    With probability ``overlap_prob`` a later polygon is centred within the
    radius of an earlier one, so the two blobs merge.
    """
    fg = np.asarray(foreground) != 0
    ys, xs = np.nonzero(fg)
    if len(ys) == 0:
        return []
    lo, hi = params.polygon_size
    v_lo, v_hi = params.n_vertices
    polygons = []
    centers = []
    for i in range(params.k):
        pick = None
        if i > 0 and rng.random() < params.overlap_prob:
            cy, cx, cr = centers[int(rng.integers(0, len(centers)))]
            near = np.nonzero((ys - cy) ** 2 + (xs - cx) ** 2 <= cr**2)[0]
            if len(near):
                pick = int(near[rng.integers(0, len(near))])
        if pick is None:
            pick = int(rng.integers(0, len(ys)))
        cy, cx = float(ys[pick]), float(xs[pick])
        radius = rng.uniform(lo, hi)
        n = int(rng.integers(v_lo, v_hi + 1))
        spacing = 2.0 * math.pi / n
        angles = np.arange(n) * spacing + rng.uniform(-params.deform_factor, params.deform_factor, n) * spacing
        radii = radius * (1.0 + rng.uniform(-params.deform_factor, params.deform_factor, n))
        polygons.append(np.column_stack([cy + radii * np.sin(angles), cx + radii * np.cos(angles)]))
        centers.append((cy, cx, radius))
    return polygons


def grow_boundary(mask, foreground, grow_prob: float, rng: np.random.Generator) -> np.ndarray:
    """One stochastic growth round: each outer boundary pixel turns on with ``grow_prob``."""
    m = np.asarray(mask) != 0
    fg = np.asarray(foreground) != 0
    boundary = (F.morph(m, "dilate", 3) != 0) & ~m & fg
    draws = rng.random(m.shape)
    return (m | (boundary & (draws < grow_prob))).astype(np.uint8)


def generate_pitting_mask(foreground, params: PittingParams, rng: np.random.Generator) -> np.ndarray:
    """Blobby pitting mask: polygons, boundary growth, closing and Perlin edge erosion."""
    fg = np.asarray(foreground) != 0
    height, width = fg.shape
    if not fg.any():
        return np.zeros((height, width), dtype=np.uint8)

    mask = np.zeros((height, width), dtype=bool)
    for poly in sample_pitting_polygons(fg, params, rng):
        mask |= rasterize_polygon(poly, (height, width)) != 0
    mask &= fg
    for _ in range(params.n_growth):
        mask = grow_boundary(mask, fg, params.grow_prob, rng) != 0
    mask = (F.morph(mask, "close", 3) != 0) & fg

    noise_seed = draw_seed(rng)
    if params.noise_enabled:
        noise = F.perlin_field(height, width, params.noise_octaves, 1.0, noise_seed)
        edge = mask & (F.morph(mask, "erode", 3) == 0)
        mask &= ~(edge & (noise > params.perlin_threshold))
    return (mask & fg).astype(np.uint8)


# --------------------------------------------------------------------------
# plastic warp
# --------------------------------------------------------------------------
def _bbox(mask: np.ndarray):
    ys, xs = np.nonzero(mask)
    return int(ys.min()), int(ys.max()), int(xs.min()), int(xs.max())


def _sample_sub_rect(mask: np.ndarray, rng: np.random.Generator, tries: int = 20):
    """Random sub-rectangle of the mask's bounding box (sides 50-90 %) touching the mask."""
    y0, y1, x0, x1 = _bbox(mask)
    bh, bw = y1 - y0 + 1, x1 - x0 + 1
    for _ in range(tries):
        sh = max(1, int(round(rng.uniform(0.5, 0.9) * bh)))
        sw = max(1, int(round(rng.uniform(0.5, 0.9) * bw)))
        top = int(rng.integers(y0, y1 - sh + 2))
        left = int(rng.integers(x0, x1 - sw + 2))
        if mask[top : top + sh, left : left + sw].any():
            return top, top + sh - 1, left, left + sw - 1
    return y0, y1, x0, x1


def warp_with_controls(image, mask, region, box, src, displacements, params: WarpParams):
    """Warp the part of ``region`` inside ``box`` with a TPS through the given controls.

    ``box`` is ``(top, bottom, left, right)`` inclusive; ``src`` and
    ``displacements`` are ``(row, col)`` pairs in box coordinates. The warped
    object is taken from the original pixels and laid over an inpainted copy
    of the box. Returns ``(image, mask)``; both are unchanged if the control
    points are degenerate.
    """
    img = np.asarray(image, dtype=np.float64)
    full = np.asarray(mask) != 0
    reg = np.asarray(region) != 0
    top, bottom, left, right = box
    sl = (slice(top, bottom + 1), slice(left, right + 1))
    roi_img = img[sl]
    roi_region = reg[sl]
    roi_full = full[sl]
    h, w = roi_region.shape

    try:
        model = F.tps_fit(src, displacements, scale=params.dist_field_radius)
    except (ParameterError, NumericError) as exc:
        log.info("skipping warp: %s", exc)
        return img.copy(), full.astype(np.uint8)
    try:
        background = F.inpaint_diffusion(roi_img, roi_region, radius=params.inpaint_radius)
    except ParameterError:
        background = roi_img.copy()

    field = F.tps_eval_field(model, h, w)
    warped_img = F.remap(roi_img, field, "bilinear")
    warped_mask = F.remap(roi_region.astype(np.uint8), field, "nearest") != 0

    new_roi = background
    new_roi[warped_mask] = warped_img[warped_mask]
    out_img = img.copy()
    out_img[sl] = new_roi
    out_mask = full.copy()
    out_mask[sl] = (roi_full & ~roi_region) | warped_mask
    return out_img, out_mask.astype(np.uint8)


def tps_warp_region(image, mask, params: WarpParams, rng: np.random.Generator):
    """Locally warp the object under ``mask`` with a random thin-plate spline.

    Returns ``(image, mask)``. An empty mask returns copies of the inputs.
    With ``params.partial_roi`` only a random sub-rectangle of the object's
    bounding box is warped.
    """
    img = np.asarray(image, dtype=np.float64)
    full = np.asarray(mask) != 0
    if not full.any():
        return img.copy(), full.astype(np.uint8)
    height, width = full.shape

    if params.partial_roi:
        sy0, sy1, sx0, sx1 = _sample_sub_rect(full, rng)
        region = np.zeros_like(full)
        region[sy0 : sy1 + 1, sx0 : sx1 + 1] = full[sy0 : sy1 + 1, sx0 : sx1 + 1]
    else:
        region = full
    y0, y1, x0, x1 = _bbox(region)
    box = (
        max(y0 - params.margin, 0),
        min(y1 + params.margin, height - 1),
        max(x0 - params.margin, 0),
        min(x1 + params.margin, width - 1),
    )

    ys, xs = np.nonzero(region[box[0] : box[1] + 1, box[2] : box[3] + 1])
    n = min(params.num_ctrl_pts, len(ys))
    picks = rng.choice(len(ys), size=n, replace=False)
    src = np.column_stack([ys[picks], xs[picks]]).astype(np.float64)
    disp = rng.uniform(-params.max_offset, params.max_offset, size=(n, 2))
    return warp_with_controls(img, full, region, box, src, disp, params)


def generate_warp(image, foreground, params: WarpParams, rng: np.random.Generator):
    """Warp the foreground object; the returned mask is clipped to the foreground."""
    out_img, out_mask = tps_warp_region(image, foreground, params, rng)
    return out_img, out_mask & (np.asarray(foreground) != 0).astype(np.uint8)
