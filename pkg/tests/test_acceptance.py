"""Acceptance gate: one test per headline criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` (the summary lines appear
at the end of the report) or ``python3 tests/test_acceptance.py``.
"""

import json
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from defectforge import fields as F
from defectforge import masks as M
from defectforge import overlay as O
from defectforge import pipeline as P
from defectforge import refine as R
from defectforge import weights as W
from defectforge.rng import draw_seed, make_rng
from oracles import brute_distance, brute_morph, wilcoxon_auc

RESULTS = []


@contextmanager
def criterion(name, budget_s=None):
    start = time.perf_counter()
    status = "FAIL"
    detail = ""
    try:
        yield
        status = "PASS"
    except AssertionError as exc:
        detail = f" ({str(exc).splitlines()[0][:100]})" if str(exc) else ""
        raise
    finally:
        elapsed = time.perf_counter() - start
        if status == "PASS" and budget_s is not None and elapsed > budget_s:
            status = "FAIL"
            detail = f" (runtime over budget {budget_s:.0f}s)"
        budget = f" / budget {budget_s:.0f}s" if budget_s is not None else ""
        line = f"{status}  {name}  [{elapsed:.2f}s{budget}]{detail}"
        RESULTS.append(line)
        print(line)
    if budget_s is not None:
        assert elapsed <= budget_s, f"{name} took {elapsed:.1f}s, budget {budget_s}s"


# ---------------------------------------------------------------- 1
def test_oracle_equivalence():
    rng = np.random.default_rng(2024)
    with criterion("oracle equivalence: distance transform and morphology", 5.0):
        checked = 0
        while checked < 100:
            h, w = (int(v) for v in rng.integers(1, 17, size=2))
            m = rng.random((h, w)) < rng.uniform(0.1, 0.95)
            if m.all():
                continue
            assert np.array_equal(F.distance_transform(m), brute_distance(m)), f"distance mismatch on {h}x{w}"
            checked += 1
        for _ in range(50):
            m = rng.random((8, 8)) < rng.uniform(0.2, 0.8)
            for op in F.MORPH_OPS:
                assert np.array_equal(F.morph(m, op, 3).astype(bool), brute_morph(m, op, 3)), f"morph {op} mismatch"


# ---------------------------------------------------------------- 2
def test_wavelet_suite():
    rng = np.random.default_rng(7)
    with criterion("wavelet suite: Haar roundtrip and energy preservation", 2.0):
        for _ in range(100):
            h, w = (2 * int(v) for v in rng.integers(1, 33, size=2))
            f = rng.normal(size=(h, w)) * rng.uniform(0.1, 10)
            bands = F.haar_dwt(f)
            assert np.abs(F.haar_idwt(*bands) - f).max() <= 1e-9
            energy = (f**2).sum()
            assert abs(energy - sum((b**2).sum() for b in bands)) <= 1e-9 * energy


# ---------------------------------------------------------------- 3
def test_tps_interpolation_and_affine_reproduction():
    rng = np.random.default_rng(11)
    with criterion("thin-plate spline: control-point interpolation and affine reproduction", 5.0):
        grid = np.argwhere(np.ones((64, 64))).astype(float)
        for _ in range(50):
            n = int(rng.integers(3, 13))
            src = rng.uniform(0, 64, size=(n, 2))
            disp = rng.uniform(-30, 30, size=(n, 2))
            model = F.tps_fit(src, disp, scale=float(rng.uniform(30, 80)))
            assert np.abs(model(src) - disp).max() <= 1e-6
        for _ in range(50):
            n = int(rng.integers(3, 13))
            src = rng.uniform(0, 64, size=(n, 2))
            offset = rng.uniform(-30, 30, size=2)
            model = F.tps_fit(src, np.tile(offset, (n, 1)), scale=float(rng.uniform(30, 80)))
            assert np.abs(model(grid) - offset).max() <= 1e-6


# ---------------------------------------------------------------- 4
def test_allen_cahn_identities_and_energy():
    rng = np.random.default_rng(5)
    params = R.AcParams()
    with criterion("Allen-Cahn: residual identities and energy descent (eps2=0.005, 500 steps)", 60.0):
        assert params.eps2 == 0.005 and params.n_steps == 500
        for v in (-1.0, 0.0, 1.0):
            assert np.all(R.allen_cahn_residual(np.full((16, 16, 3), v), params.eps2) == 0.0)
        assert np.all(R.allen_cahn_residual(np.full((16, 16, 3), 0.5), params.eps2) == 0.375)
        for trial in range(20):
            init = rng.uniform(-1, 1, (64, 64, 3))
            mask = rng.random((64, 64)) < rng.uniform(0.1, 0.9)
            energies = [R.gl_energy(init, init, mask, params)]
            R.ac_relax(init, mask, params, callback=lambda step, u: energies.append(R.gl_energy(u, init, mask, params)))
            rises = np.flatnonzero(np.diff(energies) > 0)
            assert len(energies) == 501
            assert len(rises) == 0, f"energy rose at step {rises[:3]} in trial {trial}"


# ---------------------------------------------------------------- 5
def test_mask_contracts():
    shapes = P.SYNTHETIC_SHAPES
    rng = np.random.default_rng(99)
    ranges = M.RECOMMENDED_RANGES["fracture"]
    with criterion("mask contracts: subset of foreground, skeleton inside core, empty in empty out", 120.0):
        for seed in range(100):
            image, fg = P.synthetic_object(shapes[seed % 3], 256, seed)
            fgb = fg.astype(bool)
            fracture = M.FractureParams(
                w0=float(rng.uniform(*ranges["w0"])),
                noise_scale=float(rng.uniform(*ranges["noise_scale"])),
                noise_octaves=int(rng.integers(1, 4)),
                epsilon=float(rng.uniform(*ranges["epsilon"])),
            )
            assert fracture.noise_scale < fracture.w0
            gen = make_rng(seed)
            skeleton = M.generate_skeleton(fg, fracture, gen)
            core = M.thickness_mask(skeleton, fracture, draw_seed(gen))
            assert not (skeleton.astype(bool) & ~core.astype(bool)).any(), f"skeleton escapes core, seed {seed}"
            assert not (M.generate_fracture_mask(fg, fracture, make_rng(seed)).astype(bool) & ~fgb).any()
            assert not (M.generate_pitting_mask(fg, M.PittingParams(), make_rng(seed)).astype(bool) & ~fgb).any()
            _, warp_mask = M.generate_warp(image, fg, M.WarpParams(partial_roi=bool(seed % 2)), make_rng(seed))
            assert not (warp_mask.astype(bool) & ~fgb).any()

        empty = np.zeros((256, 256), dtype=np.uint8)
        image = np.full((256, 256, 3), 0.5)
        for seed in range(5):
            assert not M.generate_fracture_mask(empty, M.FractureParams(), make_rng(seed)).any()
            assert not M.generate_pitting_mask(empty, M.PittingParams(), make_rng(seed)).any()
            assert not M.generate_warp(image, empty, M.WarpParams(), make_rng(seed))[1].any()


# ---------------------------------------------------------------- 6
def test_overlay_contracts():
    rng = np.random.default_rng(3)
    with criterion("overlay: unmasked pixels bit-identical, zero alpha is identity"):
        for _ in range(50):
            img = rng.random((48, 40, 3))
            mask = (rng.random((48, 40)) < rng.uniform(0.05, 0.6)).astype(np.uint8)
            params = O.OverlayParams(
                base_alpha=float(rng.uniform(0, 1)),
                max_darken=float(rng.uniform(0, 1)),
                max_color_shift=tuple(rng.uniform(-0.5, 0.5, 3)),
                edge_fade=float(rng.uniform(0.5, 10)),
                fade_mode=str(rng.choice(O.FADE_MODES)),
            )
            out = O.apply_fracture_overlay(img, mask, params)
            assert np.array_equal(out[mask == 0], img[mask == 0])
            still = O.OverlayParams(base_alpha=0.0, max_darken=params.max_darken, max_color_shift=params.max_color_shift)
            assert np.array_equal(O.apply_fracture_overlay(img, mask, still), img)


# ---------------------------------------------------------------- 7
def test_weighting_math():
    rng = np.random.default_rng(17)
    with criterion("weighting math: quality extremes, soft-AUC, outer gradient, theta restoration", 10.0):
        for _ in range(100):
            losses = rng.exponential(size=int(rng.integers(1, 40)))
            assert W.quality_targets(losses)[np.argmin(losses)] == 1.0
        for _ in range(100):
            pos = rng.normal(rng.uniform(0, 1), 1.0, 50)
            neg = rng.normal(0.0, 1.0, 50)
            assert abs(W.soft_auc(pos, neg, 50.0) - wilcoxon_auc(pos, neg)) <= 0.02
        h = 1e-5
        for _ in range(20):
            det = W.ToyDetector(rng.normal(size=3), rng.normal(size=(5, 3)), rng.choice([-1.0, 1.0], 5), inner_lr=0.05)
            losses = det.losses()
            state = W.WeightState(losses, W.quality_targets(losses), rng.uniform(0.5, 1.5, 5), 1.0, float(rng.uniform(0.2, 2)))
            vp, vn = rng.normal(size=(4, 3)) + 0.5, rng.normal(size=(4, 3)) - 0.5
            theta_before = det.theta.copy()
            analytic = W.outer_gradient(det, state, vp, vn, 2.0)
            numeric = np.empty(5)
            for i in range(5):
                vals = []
                for sign in (1.0, -1.0):
                    d = state.d.copy()
                    d[i] += sign * h
                    theta = W.toy_inner_step(det, W.sample_weights(state.q, d, state.lambda_sqe, state.lambda_bi))
                    vals.append(W.validation_loss(det, theta, vp, vn, 2.0))
                numeric[i] = (vals[0] - vals[1]) / (2 * h)
            assert np.linalg.norm(analytic - numeric) <= 1e-4 * np.linalg.norm(numeric)
            W.outer_update_weights(det, state, vp, vn, 2.0)
            assert np.array_equal(det.theta, theta_before)


# ---------------------------------------------------------------- 8
DETERMINISM_CONFIG = {
    "categories": [
        {"name": "disk", "synthetic": "disk"},
        {"name": "square", "synthetic": "square"},
        {"name": "ellipse", "synthetic": "ellipse"},
    ],
    "counts": {"fracture": 3, "pitting": 3, "warp": 3},
    "master_seed": 20240611,
    "image_size": 256,
}


def _snapshot(root: Path):
    files = {}
    for path in sorted(root.rglob("*")):
        if path.is_file():
            rel = path.relative_to(root).as_posix()
            if rel == "manifest.json":
                manifest = json.loads(path.read_text())
                manifest.pop("generated_at")
                files[rel] = json.dumps(manifest, sort_keys=True).encode()
            else:
                files[rel] = path.read_bytes()
    return files


def _timed_run(out_dir, jobs):
    start = time.perf_counter()
    manifest, failures = P.run_dataset(DETERMINISM_CONFIG, out_dir, jobs=jobs, master_seed=DETERMINISM_CONFIG["master_seed"])
    return manifest, failures, time.perf_counter() - start


def test_dataset_determinism(tmp_path):
    with criterion("determinism: repeated and parallel dataset runs are byte-identical (each run < 5 min)"):
        runs = []
        for name, jobs in (("serial_a", 1), ("serial_b", 1), ("jobs4", 4)):
            manifest, failures, elapsed = _timed_run(tmp_path / name, jobs)
            assert not failures, failures
            assert len(manifest["entries"]) == 27
            assert elapsed < 300.0, f"{name} run took {elapsed:.0f}s"
            runs.append(_snapshot(tmp_path / name))
        assert runs[0] == runs[1], "serial reruns differ"
        assert runs[0] == runs[2], "serial and --jobs 4 runs differ"
        assert sum(1 for k in runs[0] if k.endswith("mask.png")) == 27


# ---------------------------------------------------------------- 9
# Mask-generation parameter table, "Recommended" column, one row per parameter.
RECOMMENDED_TABLE = """
Fracture-Line Skeleton | max_steps         | 200-800
Fracture-Line Skeleton | step_size         | 1-2
Fracture-Line Skeleton | branching_prob    | 0.01-0.05
Fracture-Line Skeleton | stop_prob         | 0.01-0.05
Fracture-Line Skeleton | n_starts          | 1-3
Fracture-Line Mask     | w0                | 0.5-2.5
Fracture-Line Mask     | alpha             | 0.01-0.02
Fracture-Line Mask     | epsilon           | 0.3-1.0
Fracture-Line Mask     | noise_scale       | 0.1-0.3
Fracture-Line Mask     | noise_octaves     | 1-3
Fracture-Line Mask     | morph_kernel_size | 1-3
Fracture-Line Mask     | sigma_blur        | 1.0
Pitting-Loss Mask      | k                 | 1-5
Pitting-Loss Mask      | polygon_size      | 15-65
Pitting-Loss Mask      | deform_factor     | 0.1-0.3
Pitting-Loss Mask      | overlap_prob      | 0.7-1.0
Pitting-Loss Mask      | n_growth          | 8-50
Pitting-Loss Mask      | grow_prob         | 0.3-0.7
TPS Plastic-Warp       | num_ctrl_pts      | 3-12
TPS Plastic-Warp       | max_offset        | 8-30
TPS Plastic-Warp       | dist_field_radius | 30-80
TPS Plastic-Warp       | inpaint_radius    | 3-10
TPS Plastic-Warp       | margin            | 10-30
"""

STAGE_DEFAULTS = {
    "Fracture-Line Skeleton": M.FractureParams(),
    "Fracture-Line Mask": M.FractureParams(),
    "Pitting-Loss Mask": M.PittingParams(),
    "TPS Plastic-Warp": M.WarpParams(),
}
STAGE_KEY = {
    "Fracture-Line Skeleton": "fracture",
    "Fracture-Line Mask": "fracture",
    "Pitting-Loss Mask": "pitting",
    "TPS Plastic-Warp": "warp",
}


def _table_rows():
    for line in RECOMMENDED_TABLE.strip().splitlines():
        stage, name, rec = (cell.strip() for cell in line.split("|"))
        lo, _, hi = rec.partition("-")
        yield stage, name, float(lo), float(hi or lo)


def test_parameter_range_conformance():
    with criterion("parameter defaults inside the recommended ranges"):
        rows = list(_table_rows())
        assert len(rows) == 23
        for stage, name, lo, hi in rows:
            value = getattr(STAGE_DEFAULTS[stage], name)
            values = value if isinstance(value, tuple) else (value,)
            for v in values:
                assert lo <= v <= hi, f"{name}={v} outside [{lo}, {hi}]"
            assert tuple(float(b) for b in M.RECOMMENDED_RANGES[STAGE_KEY[stage]][name]) == (lo, hi), name


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
