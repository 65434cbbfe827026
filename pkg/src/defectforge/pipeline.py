"""Recipes, single-sample generation and refinement, batch datasets and the weighting demo."""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import logging
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from defectforge import imageio, masks, refine, weights
from defectforge.overlay import OverlayParams, ReferenceColor, apply_fracture_overlay, blend_reference_color
from defectforge.errors import DefectForgeError, ParameterError
from defectforge.fields import perlin_field
from defectforge.rng import child_seed, make_rng

log = logging.getLogger(__name__)

MECHANISMS = ("fracture", "pitting", "warp")
PARAM_TYPES = {
    "fracture": masks.FractureParams,
    "pitting": masks.PittingParams,
    "warp": masks.WarpParams,
}
SEED_ENV = "DEFECTFORGE_SEED"
DEFAULT_SIZE = 512
MANIFEST_FORMAT = "defectforge-manifest/1"
REFINE_CROP_MARGIN = 16


def env_seed(default=None):
    value = os.environ.get(SEED_ENV)
    return default if value in (None, "") else int(value)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def digest(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


# --------------------------------------------------------------------------
# recipes
# --------------------------------------------------------------------------
@dataclass(frozen=True)
class RefineSettings:
    ac: refine.AcParams = field(default_factory=refine.AcParams)
    wave_filter: bool = False
    eps_p: float = 0.001
    subband_gain: tuple = (1.0, 0.5, 0.5, 0.25)
    beta: float = 0.5
    delta: float = 0.1

    @classmethod
    def from_dict(cls, data: dict | None) -> "RefineSettings":
        data = dict(data or {})
        ac_keys = {"eps2", "dt", "n_steps", "fidelity"}
        ac = refine.AcParams(**{k: data.pop(k) for k in list(data) if k in ac_keys})
        if "subband_gain" in data:
            data["subband_gain"] = tuple(data["subband_gain"])
        unknown = set(data) - {"wave_filter", "eps_p", "subband_gain", "beta", "delta"}
        if unknown:
            raise ParameterError(f"unknown refine fields: {sorted(unknown)}")
        return cls(ac=ac, **data)

    def to_dict(self) -> dict:
        out = asdict(self.ac)
        out.update(
            wave_filter=self.wave_filter,
            eps_p=self.eps_p,
            subband_gain=list(self.subband_gain),
            beta=self.beta,
            delta=self.delta,
        )
        return out


@dataclass(frozen=True)
class GenerationRecipe:
    mechanism: str
    params: object
    overlay: OverlayParams = field(default_factory=OverlayParams)
    reference: ReferenceColor = field(default_factory=ReferenceColor)
    refine: RefineSettings = field(default_factory=RefineSettings)
    seed: int = 0
    category: str = "default"

    @classmethod
    def from_dict(cls, data: dict) -> "GenerationRecipe":
        blocks = [m for m in MECHANISMS if m in data]
        if len(blocks) != 1:
            raise ParameterError(f"a recipe needs exactly one mechanism block out of {MECHANISMS}, found {blocks}")
        mech = blocks[0]
        if data.get("mechanism", mech) != mech:
            raise ParameterError(f"mechanism {data['mechanism']!r} does not match the {mech!r} block")
        unknown = set(data) - {"mechanism", mech, "overlay", "reference", "refine", "seed", "category"}
        if unknown:
            raise ParameterError(f"unknown recipe fields: {sorted(unknown)}")
        return cls(
            mechanism=mech,
            params=PARAM_TYPES[mech].from_dict(data[mech]),
            overlay=OverlayParams.from_dict(data.get("overlay")),
            reference=ReferenceColor.from_dict(data.get("reference")),
            refine=RefineSettings.from_dict(data.get("refine")),
            seed=int(data.get("seed", 0)),
            category=str(data.get("category", "default")),
        )

    @classmethod
    def load(cls, path) -> "GenerationRecipe":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {
            "mechanism": self.mechanism,
            self.mechanism: self.params.to_dict(),
            "overlay": self.overlay.to_dict(),
            "reference": self.reference.to_dict(),
            "refine": self.refine.to_dict(),
            "seed": self.seed,
            "category": self.category,
        }

    def with_seed(self, seed: int) -> "GenerationRecipe":
        return GenerationRecipe(self.mechanism, self.params, self.overlay, self.reference, self.refine, int(seed), self.category)

    def digest(self) -> str:
        return digest(self.to_dict())


# --------------------------------------------------------------------------
# single sample
# --------------------------------------------------------------------------
def run_generate(recipe: GenerationRecipe, image, foreground):
    """Mask and coarse composite for one recipe; returns ``(mask, coarse_image)``."""
    img = np.asarray(image, dtype=np.float64)
    fg = np.asarray(foreground) != 0
    if fg.shape != img.shape[:2]:
        raise ParameterError(f"foreground {fg.shape} does not match image {img.shape[:2]}")
    rng = make_rng(recipe.seed)
    if recipe.mechanism == "fracture":
        mask = masks.generate_fracture_mask(fg, recipe.params, rng)
        coarse = apply_fracture_overlay(img, mask, recipe.overlay)
    elif recipe.mechanism == "pitting":
        mask = masks.generate_pitting_mask(fg, recipe.params, rng)
        coarse = blend_reference_color(img, mask, recipe.reference.z, recipe.reference.strength)
    else:
        coarse, mask = masks.generate_warp(img, fg, recipe.params, rng)
    return mask.astype(np.uint8), coarse


def _crop_box(mask: np.ndarray, margin: int):
    ys, xs = np.nonzero(mask)
    h, w = mask.shape
    return (
        slice(max(int(ys.min()) - margin, 0), min(int(ys.max()) + margin + 1, h)),
        slice(max(int(xs.min()) - margin, 0), min(int(xs.max()) + margin + 1, w)),
    )


def run_refine(coarse, orig, mask, settings: RefineSettings | None = None, reference=None):
    """Relax the masked part of ``coarse`` with the Allen-Cahn flow.

    Unmasked pixels are copied from ``coarse``. Only a window around the mask
    is integrated: the anchored normal pixels damp any influence from farther
    away to far below 8-bit resolution. Returns ``(refined, metrics)`` where the
    metrics are measured on the 8-bit quantized result.
    """
    settings = settings or RefineSettings()
    reference = reference or ReferenceColor()
    coarse = np.asarray(coarse, dtype=np.float64)
    orig = np.asarray(orig, dtype=np.float64)
    m = np.asarray(mask) != 0
    if coarse.shape != orig.shape or coarse.shape[:2] != m.shape:
        raise ParameterError(f"coarse {coarse.shape}, orig {orig.shape} and mask {m.shape} are not aligned")

    refined = coarse.copy()
    if m.any() and settings.ac.n_steps > 0:
        box = _crop_box(m, REFINE_CROP_MARGIN)
        u = refine.ac_relax(refine.to_phase(coarse[box]), m[box], settings.ac)
        if settings.wave_filter:
            u = refine.pde_wave_filter(u, settings.eps_p, settings.subband_gain)
        window = refined[box]
        window[m[box]] = refine.from_phase(u)[m[box]]
    refined = imageio.quantize(refined)
    metrics = refine.refinement_metrics(
        refine.to_phase(refined),
        refine.to_phase(orig),
        refine.to_phase(coarse),
        m,
        refine.to_phase(np.asarray(reference.z)),
        beta=settings.beta,
        delta=settings.delta,
        eps2=settings.ac.eps2,
    )
    return refined, metrics


# --------------------------------------------------------------------------
# synthetic normal images
# --------------------------------------------------------------------------
SYNTHETIC_SHAPES = ("disk", "square", "ellipse")


def synthetic_object(kind: str, size: int, seed: int):
    """Procedural normal image: a textured bright object on a darker textured backdrop.

    Returns ``(image, foreground)``.
    """
    if kind not in SYNTHETIC_SHAPES:
        raise ParameterError(f"unknown synthetic shape {kind!r}; expected one of {SYNTHETIC_SHAPES}")
    yy, xx = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")
    c = size / 2.0
    if kind == "disk":
        fg = (yy - c) ** 2 + (xx - c) ** 2 <= (0.35 * size) ** 2
    elif kind == "square":
        fg = (np.abs(yy - c) <= 0.3 * size) & (np.abs(xx - c) <= 0.3 * size)
    else:
        fg = ((yy - c) / (0.38 * size)) ** 2 + ((xx - c) / (0.25 * size)) ** 2 <= 1.0
    rng = make_rng(seed)
    tint = rng.uniform(0.55, 0.8, size=3)
    texture = perlin_field(size, size, octaves=4, scale=0.12, seed=int(rng.integers(0, 2**31)))
    shade = 0.08 * (xx - c) / size
    obj = tint[None, None, :] + (texture + shade)[..., None]
    backdrop = 0.18 + 0.5 * texture[..., None] * np.ones(3)
    image = np.where(fg[..., None], obj, backdrop)
    return np.clip(image, 0.0, 1.0), fg.astype(np.uint8)


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------
def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _prepare_category(cat: dict, size: int, master_seed: int, index: int, out_dir: Path):
    name = cat["name"]
    if "image" in cat:
        image = imageio.load_image(cat["image"])
        fg = imageio.load_foreground(cat["image"], cat.get("foreground"))
    else:
        image, fg = synthetic_object(cat.get("synthetic", "disk"), size, child_seed(master_seed, -1 - index))
    input_rel = f"{name}/normal.png"
    fg_rel = f"{name}/foreground.png"
    imageio.save_image(out_dir / input_rel, image)
    imageio.save_mask(out_dir / fg_rel, fg)
    return input_rel, fg_rel


def _entry_task(task: dict) -> dict:
    out_dir = Path(task["out_dir"])
    recipe = GenerationRecipe.from_dict(task["recipe"])
    image = imageio.load_image(out_dir / task["input_path"])
    fg = imageio.load_mask(out_dir / task["foreground_path"])
    mask, coarse = run_generate(recipe, image, fg)
    coarse = imageio.quantize(coarse)
    refined, metrics = run_refine(coarse, image, mask, recipe.refine, recipe.reference)
    base = f"{recipe.category}/{task['id']}"
    paths = {
        "mask_path": f"{base}/mask.png",
        "coarse_path": f"{base}/coarse.png",
        "refined_path": f"{base}/refined.png",
    }
    imageio.save_mask(out_dir / paths["mask_path"], mask)
    imageio.save_image(out_dir / paths["coarse_path"], coarse)
    imageio.save_image(out_dir / paths["refined_path"], refined)
    return {
        "id": task["id"],
        "category": recipe.category,
        "mechanism": recipe.mechanism,
        "seed": recipe.seed,
        "input_path": task["input_path"],
        **paths,
        "params_digest": recipe.digest(),
        "metrics": metrics.to_dict(),
    }


def _safe_entry_task(task: dict):
    try:
        return _entry_task(task), None
    except (DefectForgeError, ValueError, ArithmeticError, OSError) as exc:
        return None, {"id": task["id"], "error": f"{type(exc).__name__}: {exc}"}


def plan_dataset(config: dict, master_seed: int):
    """Expand a dataset config into ``(category specs, per-entry recipe dicts)`` in index order."""
    categories = config.get("categories") or []
    if not categories:
        raise ParameterError("dataset config needs at least one category")
    names = [c.get("name") for c in categories]
    if any(not n for n in names) or len(set(names)) != len(names):
        raise ParameterError(f"category names must be present and unique, got {names}")
    counts = config.get("counts", {})
    unknown = set(counts) - set(MECHANISMS)
    if unknown:
        raise ParameterError(f"unknown mechanisms in counts: {sorted(unknown)}")
    defaults = config.get("defaults", {})
    entries = []
    index = 0
    for cat in categories:
        for mech in MECHANISMS:
            for k in range(int(counts.get(mech, 0))):
                recipe = {
                    mech: defaults.get(mech, {}),
                    "overlay": defaults.get("overlay", {}),
                    "reference": defaults.get("reference", {}),
                    "refine": defaults.get("refine", {}),
                    "seed": child_seed(master_seed, index),
                    "category": cat["name"],
                }
                # validate eagerly so config errors surface before any work
                GenerationRecipe.from_dict(recipe)
                entries.append({"id": f"{cat['name']}-{mech}-{k:03d}", "recipe": recipe})
                index += 1
    return categories, entries


def run_dataset(config: dict, out_dir, jobs: int = 1, master_seed=None):
    """Generate every entry of a dataset config and write ``manifest.json`` last.

    Returns ``(manifest, failures)``. Failed entries are left out of the
    manifest and listed in ``errors.log``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if master_seed is None:
        master_seed = env_seed(config.get("master_seed", 0))
    master_seed = int(master_seed)
    size = int(config.get("image_size", DEFAULT_SIZE))
    categories, entries = plan_dataset(config, master_seed)

    inputs = {}
    for i, cat in enumerate(categories):
        inputs[cat["name"]] = _prepare_category(cat, size, master_seed, i, out_dir)
    tasks = [
        {
            "id": e["id"],
            "recipe": e["recipe"],
            "out_dir": str(out_dir),
            "input_path": inputs[e["recipe"]["category"]][0],
            "foreground_path": inputs[e["recipe"]["category"]][1],
        }
        for e in entries
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_safe_entry_task, tasks))
    else:
        results = [_safe_entry_task(t) for t in tasks]

    done = [r for r, _ in results if r is not None]
    failures = [err for _, err in results if err is not None]
    error_log = out_dir / "errors.log"
    if failures:
        error_log.write_text("".join(f"{f['id']}\t{f['error']}\n" for f in failures))
        for f in failures:
            log.error("entry %s failed: %s", f["id"], f["error"])
    elif error_log.exists():
        error_log.unlink()

    manifest = {
        "format": MANIFEST_FORMAT,
        "master_seed": master_seed,
        "config_digest": digest(config),
        "generated_at": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "entries": done,
    }
    _atomic_write_text(out_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest, failures


# --------------------------------------------------------------------------
# weighting demo
# --------------------------------------------------------------------------
WEIGHTS_DEMO_DEFAULTS = {
    "seed": 0,
    "n_train": 40,
    "n_val": 20,
    "dim": 3,
    "epochs": 10,
    "separation": 3.0,
    "flip_fraction": 0.2,
    "adversarial": None,
    "inner_lr": None,
    "outer_lr": 0.01,
    "lambda_sqe": 1.0,
    "lambda_bi": 1.0,
    "auc_alpha": 5.0,
    "eps": 1e-8,
    "val_source": "holdout",
    "val_fraction": 0.05,
}


def _toy_points(rng, labels, dim, separation):
    x = rng.normal(size=(len(labels), dim))
    x[:, 0] += separation * labels
    return x


def run_weights_demo(config: dict | None = None) -> dict:
    """Bilevel reweighting on a toy linear detector with some mislabelled samples.

    Each epoch: per-sample losses -> quality targets -> weights -> one inner
    training step -> one outer step on the data weights.
    """
    cfg = dict(WEIGHTS_DEMO_DEFAULTS)
    unknown = set(config or {}) - set(cfg)
    if unknown:
        raise ParameterError(f"unknown weights-demo fields: {sorted(unknown)}")
    cfg.update(config or {})
    n, dim, epochs = int(cfg["n_train"]), int(cfg["dim"]), int(cfg["epochs"])
    if n < 2 or dim < 1 or epochs < 0 or int(cfg["n_val"]) < 1:
        raise ParameterError("weights demo needs n_train >= 2, dim >= 1, n_val >= 1, epochs >= 0")

    rng = make_rng(cfg["seed"])
    labels = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    X = _toy_points(rng, labels, dim, cfg["separation"])
    if cfg["adversarial"] is None:
        n_flip = int(round(cfg["flip_fraction"] * n))
        adversarial = sorted(int(i) for i in rng.choice(n, size=n_flip, replace=False))
    else:
        adversarial = sorted(int(i) for i in cfg["adversarial"])
    targets = labels.copy()
    targets[adversarial] *= -1.0

    if cfg["val_source"] == "holdout":
        n_val = int(cfg["n_val"])
        val_pos = _toy_points(rng, np.ones(n_val), dim, cfg["separation"])
        val_neg = _toy_points(rng, -np.ones(n_val), dim, cfg["separation"])
    elif cfg["val_source"] != "entropy":
        raise ParameterError(f"val_source must be 'holdout' or 'entropy', got {cfg['val_source']!r}")

    inner_lr = cfg["inner_lr"]
    if inner_lr is None:
        # the summed loss has Hessian 2 X^T diag(w) X with w <= ~2, so this keeps steps contractive
        inner_lr = 0.25 / float(np.linalg.norm(X, 2) ** 2)
    det = weights.ToyDetector(theta=np.zeros(dim), X=X, t=targets, inner_lr=inner_lr, outer_lr=cfg["outer_lr"])
    d = np.ones(n)
    trace = []
    for epoch in range(epochs):
        losses = det.losses()
        q = weights.quality_targets(losses, cfg["eps"])
        w = weights.sample_weights(q, d, cfg["lambda_sqe"], cfg["lambda_bi"])
        det.theta = weights.toy_inner_step(det, w)
        if cfg["val_source"] == "entropy":
            # most uncertain samples of each class, so both sides of the AUC are populated
            pos_idx, neg_idx = np.flatnonzero(labels > 0), np.flatnonzero(labels < 0)
            val_pos = X[pos_idx[weights.highest_entropy_subset(q[pos_idx], cfg["val_fraction"])]]
            val_neg = X[neg_idx[weights.highest_entropy_subset(q[neg_idx], cfg["val_fraction"])]]
        state = weights.WeightState(losses=losses, q=q, d=d, lambda_sqe=cfg["lambda_sqe"], lambda_bi=cfg["lambda_bi"], eps=cfg["eps"])
        d = weights.outer_update_weights(det, state, val_pos, val_neg, cfg["auc_alpha"])
        pos_s, neg_s = val_pos @ det.theta, val_neg @ det.theta
        trace.append(
            {
                "epoch": epoch,
                "q": q.tolist(),
                "d": d.tolist(),
                "weights": w.tolist(),
                "theta": det.theta.tolist(),
                "soft_auc": weights.soft_auc(pos_s, neg_s, cfg["auc_alpha"]),
                "exact_auc": weights.exact_auc(pos_s, neg_s),
            }
        )
    return {"config": cfg | {"adversarial": adversarial, "inner_lr": inner_lr}, "adversarial": adversarial, "epochs": trace}
