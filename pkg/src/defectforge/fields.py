"""Numerical kernels on 2D fields.

Everything here is a pure function of its inputs. Binary masks are ``uint8``
arrays holding 0/1, scalar fields are ``float64`` arrays and colour images are
``float64`` arrays of shape ``(H, W, 3)`` with values in ``[0, 1]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse.linalg import spsolve

from defectforge.errors import DimensionError, NumericError, ParameterError

MORPH_OPS = ("close", "open", "dilate", "erode")

# Single-octave |perlin2| never exceeds this for the diagonal gradient set
# (the maximum is reached at cell centres).
PERLIN_BOUND = 1.0

_GRADIENTS = np.array([(1.0, 1.0), (-1.0, 1.0), (1.0, -1.0), (-1.0, -1.0)])
_LAPLACE_STENCIL = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


def _as_2d(array, name: str = "field") -> np.ndarray:
    arr = np.asarray(array)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"{name} must be non-empty, got shape {arr.shape}")
    return arr


def far_sentinel(height: int, width: int) -> float:
    """Distance used when a mask has no zero pixel at all."""
    return 1.0e6 + height + width


# --------------------------------------------------------------------------
# distance transform
# --------------------------------------------------------------------------
def distance_transform(mask) -> np.ndarray:
    """Exact Euclidean distance from every pixel to the nearest zero pixel.

    Pixels that are zero get distance 0. If the mask contains no zero pixel the
    whole output is :func:`far_sentinel`.
    """
    m = _as_2d(mask, "mask") != 0
    if m.all():
        return np.full(m.shape, far_sentinel(*m.shape), dtype=np.float64)
    return ndimage.distance_transform_edt(m).astype(np.float64)


# --------------------------------------------------------------------------
# Perlin noise
# --------------------------------------------------------------------------
def permutation_table(seed: int) -> np.ndarray:
    """Seeded 256-entry permutation, doubled to 512 entries to skip a modulo."""
    perm = np.random.default_rng(int(seed)).permutation(256)
    return np.concatenate([perm, perm]).astype(np.int64)


def _fade(t):
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def perlin2(y, x, perm: np.ndarray):
    """Classic 2D gradient noise at ``(y, x)``; zero on integer lattice points.

    Corner ``(iy, ix)`` uses gradient ``G[P[P[ix & 255] + (iy & 255)] & 3]`` where
    ``G = [(1, 1), (-1, 1), (1, -1), (-1, -1)]`` holds ``(gy, gx)`` pairs.
    """
    y = np.asarray(y, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    y0f = np.floor(y)
    x0f = np.floor(x)
    fy = y - y0f
    fx = x - x0f
    iy = y0f.astype(np.int64) & 255
    ix = x0f.astype(np.int64) & 255

    def corner(cy, cx, dy, dx):
        h = perm[perm[(ix + cx) & 255] + ((iy + cy) & 255)] & 3
        g = _GRADIENTS[h]
        return g[..., 0] * dy + g[..., 1] * dx

    n00 = corner(0, 0, fy, fx)
    n01 = corner(0, 1, fy, fx - 1.0)
    n10 = corner(1, 0, fy - 1.0, fx)
    n11 = corner(1, 1, fy - 1.0, fx - 1.0)
    u = _fade(fx)
    v = _fade(fy)
    top = n00 + u * (n01 - n00)
    bottom = n10 + u * (n11 - n10)
    out = top + v * (bottom - top)
    return float(out) if out.ndim == 0 else out


def perlin_fractal(y, x, octaves: int = 1, scale: float = 1.0, seed: int = 0):
    """Fractal sum ``scale * sum_o 0.5**o * perlin2(y * 2**o, x * 2**o)``.

    ``y`` and ``x`` are normalized coordinates (scalars or arrays of equal
    shape). Deterministic in its arguments.
    """
    if int(octaves) < 1:
        raise ParameterError(f"octaves must be >= 1, got {octaves}")
    perm = permutation_table(seed)
    y = np.asarray(y, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    total = np.zeros(np.broadcast(y, x).shape)
    for o in range(int(octaves)):
        freq = 2.0**o
        total = total + 0.5**o * perlin2(y * freq, x * freq, perm)
    total = scale * total
    return float(total) if total.ndim == 0 else total


def perlin_field(height: int, width: int, octaves: int = 1, scale: float = 1.0, seed: int = 0) -> np.ndarray:
    """Evaluate :func:`perlin_fractal` at ``(y / height, x / width)`` on a pixel grid."""
    yy, xx = np.meshgrid(np.arange(height) / height, np.arange(width) / width, indexing="ij")
    return perlin_fractal(yy, xx, octaves=octaves, scale=scale, seed=seed)


# --------------------------------------------------------------------------
# morphology, blur, Laplacian
# --------------------------------------------------------------------------
def morph(mask, op: str, kernel_size: int = 3) -> np.ndarray:
    """Binary morphology with a square structuring element.

    Pixels beyond the image border count as background for every operation.
    """
    m = _as_2d(mask, "mask") != 0
    if op not in MORPH_OPS:
        raise ParameterError(f"unknown morphology op {op!r}; expected one of {MORPH_OPS}")
    k = int(kernel_size)
    if k < 1 or k % 2 == 0:
        raise ParameterError(f"kernel_size must be odd and >= 1, got {kernel_size}")
    se = np.ones((k, k), dtype=bool)

    def dilate(a):
        return ndimage.binary_dilation(a, structure=se, border_value=0)

    def erode(a):
        return ndimage.binary_erosion(a, structure=se, border_value=0)

    if op == "dilate":
        out = dilate(m)
    elif op == "erode":
        out = erode(m)
    elif op == "close":
        out = erode(dilate(m))
    else:
        out = dilate(erode(m))
    return out.astype(np.uint8)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(field, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, kernel radius ``ceil(3 * sigma)``, reflect padding."""
    if not sigma > 0:
        raise ParameterError(f"sigma must be > 0, got {sigma}")
    f = _as_2d(field).astype(np.float64)
    lo, hi = f.min(), f.max()
    k = gaussian_kernel(sigma)
    # Blurring the offset from the minimum keeps constants bit-exact.
    out = ndimage.correlate1d(f - lo, k, axis=0, mode="reflect")
    out = ndimage.correlate1d(out, k, axis=1, mode="reflect")
    return np.clip(out + lo, lo, hi)


def _laplacian(f: np.ndarray) -> np.ndarray:
    p = np.pad(f, [(1, 1), (1, 1)] + [(0, 0)] * (f.ndim - 2), mode="symmetric")
    return (p[:-2, 1:-1] + p[2:, 1:-1]) + (p[1:-1, :-2] + p[1:-1, 2:]) - 4.0 * f


def laplacian_hf(field) -> np.ndarray:
    """4-neighbour Laplacian ``[[0,1,0],[1,-4,1],[0,1,0]]`` with edge-inclusive reflection.

    Edge-inclusive reflection makes this the Neumann graph Laplacian, which is
    what keeps the Allen-Cahn flow a true gradient flow.
    """
    f = _as_2d(field).astype(np.float64)
    if f.shape[0] < 3 or f.shape[1] < 3:
        raise DimensionError(f"laplacian needs at least 3x3, got {f.shape}")
    return _laplacian(f)


def laplacian_channels(image: np.ndarray) -> np.ndarray:
    """Per-channel :func:`laplacian_hf` for ``(H, W, C)`` arrays."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        return laplacian_hf(img)
    if img.shape[0] < 3 or img.shape[1] < 3:
        raise DimensionError(f"laplacian needs at least 3x3, got {img.shape[:2]}")
    return _laplacian(img)


# --------------------------------------------------------------------------
# Haar wavelets
# --------------------------------------------------------------------------
def haar_dwt(field):
    """Single-level orthonormal 2D Haar transform, returns ``(LL, LH, HL, HH)``.

    With ``a, b, c, d`` the top-left, top-right, bottom-left and bottom-right
    pixels of each 2x2 block: ``LL=(a+b+c+d)/2``, ``LH=(a+b-c-d)/2`` (row
    difference), ``HL=(a-b+c-d)/2`` (column difference), ``HH=(a-b-c+d)/2``.
    """
    f = _as_2d(field).astype(np.float64)
    if f.shape[0] % 2 or f.shape[1] % 2:
        raise DimensionError(f"haar_dwt needs even dimensions, got {f.shape}")
    a = f[0::2, 0::2]
    b = f[0::2, 1::2]
    c = f[1::2, 0::2]
    d = f[1::2, 1::2]
    ll = (a + b + c + d) / 2.0
    lh = (a + b - c - d) / 2.0
    hl = (a - b + c - d) / 2.0
    hh = (a - b - c + d) / 2.0
    return ll, lh, hl, hh


def haar_idwt(ll, lh, hl, hh) -> np.ndarray:
    """Exact inverse of :func:`haar_dwt`."""
    bands = [np.asarray(s, dtype=np.float64) for s in (ll, lh, hl, hh)]
    shape = bands[0].shape
    if any(s.ndim != 2 for s in bands) or any(s.shape != shape for s in bands):
        raise DimensionError(f"subbands must share one 2D shape, got {[s.shape for s in bands]}")
    ll, lh, hl, hh = bands
    out = np.empty((2 * shape[0], 2 * shape[1]))
    out[0::2, 0::2] = (ll + lh + hl + hh) / 2.0
    out[0::2, 1::2] = (ll + lh - hl - hh) / 2.0
    out[1::2, 0::2] = (ll - lh + hl - hh) / 2.0
    out[1::2, 1::2] = (ll - lh - hl + hh) / 2.0
    return out


# --------------------------------------------------------------------------
# thin-plate splines
# --------------------------------------------------------------------------
def tps_kernel(r: np.ndarray) -> np.ndarray:
    """``r**2 * log(r)`` with the removable singularity at 0 set to 0."""
    r = np.asarray(r, dtype=np.float64)
    out = np.zeros_like(r)
    nz = r > 0
    out[nz] = r[nz] ** 2 * np.log(r[nz])
    return out


@dataclass(frozen=True)
class TpsModel:
    """Thin-plate spline mapping ``(row, col)`` to a displacement ``(dy, dx)``.

    ``weights`` has one row per source point and one column per axis;
    ``affine`` rows are the constant, row and column coefficients. Distances are
    divided by ``scale`` before the kernel is applied, which only affects
    conditioning because the affine part absorbs the difference.
    """

    src: np.ndarray
    weights: np.ndarray
    affine: np.ndarray
    ridge: float = 1e-8
    scale: float = 1.0

    def __call__(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        diff = pts[:, None, :] - self.src[None, :, :]
        r = np.sqrt((diff**2).sum(-1)) / self.scale
        poly = np.column_stack([np.ones(len(pts)), pts])
        return tps_kernel(r) @ self.weights + poly @ self.affine


def tps_fit(src, displacements, ridge: float = 1e-8, scale: float = 1.0) -> TpsModel:
    """Solve the thin-plate spline system with affine part for both axes."""
    p = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    v = np.asarray(displacements, dtype=np.float64).reshape(-1, 2)
    if len(p) != len(v):
        raise ParameterError(f"{len(p)} source points but {len(v)} displacements")
    if ridge < 0:
        raise ParameterError(f"ridge must be >= 0, got {ridge}")
    if not scale > 0:
        raise ParameterError(f"scale must be > 0, got {scale}")
    m = len(p)
    poly = np.column_stack([np.ones(m), p])
    if m < 3 or np.linalg.matrix_rank(poly) < 3:
        raise ParameterError("tps_fit needs at least 3 non-collinear points")
    r = np.sqrt(((p[:, None, :] - p[None, :, :]) ** 2).sum(-1)) / scale
    system = np.zeros((m + 3, m + 3))
    system[:m, :m] = tps_kernel(r) + ridge * np.eye(m)
    system[:m, m:] = poly
    system[m:, :m] = poly.T
    cond = np.linalg.cond(system)
    if not np.isfinite(cond) or cond > 1e14:
        raise NumericError(f"thin-plate system is singular (condition estimate {cond:.3g})")
    rhs = np.zeros((m + 3, 2))
    rhs[:m] = v
    sol = np.linalg.solve(system, rhs)
    # The ridge biases the fit away from exact interpolation, noticeably so when
    # a large ``scale`` shrinks the kernel entries. A few refinement sweeps
    # against the unregularized equations remove that bias while the ridged
    # matrix still does the solving; stop as soon as they stop helping.
    exact = system.copy()
    exact[:m, :m] -= ridge * np.eye(m)
    best = np.abs(exact @ sol - rhs).max()
    for _ in range(4):
        if best == 0.0:
            break
        trial = sol + np.linalg.solve(system, rhs - exact @ sol)
        err = np.abs(exact @ trial - rhs).max()
        if not err < best:
            break
        sol, best = trial, err
    return TpsModel(src=p, weights=sol[:m], affine=sol[m:], ridge=float(ridge), scale=float(scale))


@dataclass(frozen=True)
class DisplacementField:
    """Backward sampling map: output pixel ``(v, u)`` reads input ``(map_y, map_x)``."""

    map_x: np.ndarray
    map_y: np.ndarray

    @property
    def shape(self):
        return self.map_x.shape


def identity_field(height: int, width: int) -> DisplacementField:
    yy, xx = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    return DisplacementField(map_x=xx, map_y=yy)


def tps_eval_field(model: TpsModel, height: int, width: int) -> DisplacementField:
    """``map_x = u - dx(v, u)`` and ``map_y = v - dy(v, u)`` for every pixel."""
    if height < 1 or width < 1:
        raise DimensionError(f"field must be non-empty, got {height}x{width}")
    ident = identity_field(height, width)
    pts = np.column_stack([ident.map_y.ravel(), ident.map_x.ravel()])
    disp = model(pts)
    return DisplacementField(
        map_x=ident.map_x - disp[:, 1].reshape(height, width),
        map_y=ident.map_y - disp[:, 0].reshape(height, width),
    )


def remap(image, field: DisplacementField, interp: str = "bilinear") -> np.ndarray:
    """Sample ``image`` at ``(map_y, map_x)``; out-of-range samples clamp to the border.

    Integer or boolean arrays are treated as masks and only accept ``nearest``.
    """
    img = np.asarray(image)
    if img.ndim not in (2, 3) or img.shape[:2] != field.shape or field.map_y.shape != field.shape:
        raise DimensionError(f"field {field.shape} does not match image {img.shape}")
    is_mask = img.dtype == bool or np.issubdtype(img.dtype, np.integer)
    if interp not in ("bilinear", "nearest"):
        raise ParameterError(f"unknown interpolation {interp!r}")
    if interp == "bilinear" and is_mask:
        raise ParameterError("masks must be remapped with nearest interpolation")
    h, w = img.shape[:2]
    my = np.clip(field.map_y, 0.0, h - 1.0)
    mx = np.clip(field.map_x, 0.0, w - 1.0)
    if interp == "nearest":
        iy = np.floor(my + 0.5).astype(np.int64)
        ix = np.floor(mx + 0.5).astype(np.int64)
        return img[np.minimum(iy, h - 1), np.minimum(ix, w - 1)]
    y0 = np.floor(my).astype(np.int64)
    x0 = np.floor(mx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = my - y0
    fx = mx - x0
    if img.ndim == 3:
        fy = fy[..., None]
        fx = fx[..., None]
    f = img.astype(np.float64)
    top = f[y0, x0] * (1.0 - fx) + f[y0, x1] * fx
    bottom = f[y1, x0] * (1.0 - fx) + f[y1, x1] * fx
    return top * (1.0 - fy) + bottom * fy


# --------------------------------------------------------------------------
# inpainting
# --------------------------------------------------------------------------
INPAINT_METHODS = ("direct", "gauss_seidel")


def inpaint_diffusion(image, hole, tol: float = 1e-4, max_iters: int = 2000, radius: int = 1, method: str = "direct") -> np.ndarray:
    """Fill ``hole`` with the discrete harmonic interpolant of its surroundings.

    Hole pixels satisfy the 4-neighbour Laplace equation; non-hole pixels next
    to the hole are the Dirichlet data and the image border is a zero-flux
    boundary. ``method="direct"`` solves that sparse system exactly.
    ``method="gauss_seidel"`` runs red-black sweeps until the largest update
    drops below ``tol`` or ``max_iters`` is reached, starting from the mean
    colour of the non-hole band within ``radius`` of the hole, clipped to the
    range of the Dirichlet ring so every iterate obeys the maximum principle.
    """
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    h = _as_2d(hole, "hole") != 0
    if h.shape != img.shape[:2]:
        raise DimensionError(f"hole {h.shape} does not match image {img.shape[:2]}")
    if method not in INPAINT_METHODS:
        raise ParameterError(f"unknown inpainting method {method!r}; expected one of {INPAINT_METHODS}")
    out = img.copy()
    if not h.any():
        return out[..., 0] if squeeze else out
    if h.all():
        raise ParameterError("hole covers the entire image; no boundary data")

    H, W, C = img.shape
    ys, xs = np.nonzero(h)
    flat = out.reshape(-1, C)
    idx = ys * W + xs
    nbr = np.empty((len(idx), 4), dtype=np.int64)
    valid = np.empty((len(idx), 4), dtype=bool)
    for k, (dy, dx) in enumerate(((-1, 0), (1, 0), (0, -1), (0, 1))):
        ny, nx = ys + dy, xs + dx
        ok = (ny >= 0) & (ny < H) & (nx >= 0) & (nx < W)
        valid[:, k] = ok
        nbr[:, k] = np.where(ok, ny * W + nx, idx)
    count = valid.sum(axis=1).astype(np.float64)

    if method == "direct":
        unknown = np.full(H * W, -1, dtype=np.int64)
        unknown[idx] = np.arange(len(idx))
        col = unknown[nbr]
        coupled = valid & (col >= 0)
        rows = np.nonzero(coupled)[0]
        system = sparse.csc_matrix(
            (np.full(len(rows), -1.0), (rows, col[coupled])), shape=(len(idx), len(idx))
        ) + sparse.diags(count, format="csc")
        known = valid & (col < 0)
        rhs = np.zeros((len(idx), C))
        np.add.at(rhs, np.nonzero(known)[0], flat[nbr[known]])
        sol = spsolve(system, rhs)
        flat[idx] = sol.reshape(len(idx), C)
        return out[..., 0] if squeeze else out

    ring = ndimage.binary_dilation(h, structure=ndimage.generate_binary_structure(2, 1)) & ~h
    band_se = np.ones((2 * max(int(radius), 1) + 1,) * 2, dtype=bool)
    band = ndimage.binary_dilation(h, structure=band_se) & ~h
    flat[idx] = np.clip(img[band].mean(axis=0), img[ring].min(axis=0), img[ring].max(axis=0))
    weight = valid.astype(np.float64)[..., None]
    count = count[:, None]
    parity = (ys + xs) % 2
    groups = [np.nonzero(parity == p)[0] for p in (0, 1)]

    for _ in range(int(max_iters)):
        delta = 0.0
        for g in groups:
            if len(g) == 0:
                continue
            new = (flat[nbr[g]] * weight[g]).sum(axis=1) / count[g]
            delta = max(delta, float(np.abs(new - flat[idx[g]]).max()))
            flat[idx[g]] = new
        if delta < tol:
            break
    return out[..., 0] if squeeze else out
