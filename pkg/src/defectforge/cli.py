"""Command-line entry point: ``defectforge {gen,refine,dataset,weights-demo}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from defectforge import imageio, pipeline, refine
from defectforge.errors import DefectForgeError, NumericError

log = logging.getLogger("defectforge")


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DefectForgeError(f"cannot read JSON config {path}: {exc}") from exc


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_gen(args) -> int:
    recipe = pipeline.GenerationRecipe.from_dict(_read_json(args.recipe))
    seed = args.seed if args.seed is not None else pipeline.env_seed(recipe.seed)
    recipe = recipe.with_seed(seed)
    image = imageio.load_image(args.image)
    fg = imageio.load_foreground(args.image, args.foreground)
    mask, coarse = pipeline.run_generate(recipe, image, fg)
    out = Path(args.out_dir)
    imageio.save_mask(out / "mask.png", mask)
    imageio.save_image(out / "coarse.png", coarse)
    _write_json(out / "recipe.json", recipe.to_dict() | {"params_digest": recipe.digest()})
    log.info("wrote %s (mechanism=%s, seed=%d, %d mask pixels)", out, recipe.mechanism, seed, int(mask.sum()))
    return 0


def cmd_refine(args) -> int:
    ac = refine.AcParams(eps2=args.eps2, dt=args.dt, n_steps=args.n_steps, fidelity=args.fidelity)
    settings = pipeline.RefineSettings(ac=ac, wave_filter=args.wave_filter, eps_p=args.eps_p)
    coarse = imageio.load_image(args.coarse)
    orig = imageio.load_image(args.orig)
    mask = imageio.load_mask(args.mask)
    refined, metrics = pipeline.run_refine(coarse, orig, mask, settings)
    out = Path(args.out_dir)
    imageio.save_image(out / "refined.png", refined)
    _write_json(out / "metrics.json", metrics.to_dict())
    log.info("wrote %s", out)
    return 0


def cmd_dataset(args) -> int:
    config = _read_json(args.config)
    manifest, failures = pipeline.run_dataset(config, args.out_dir, jobs=args.jobs)
    log.info("%d entries written, %d failed", len(manifest["entries"]), len(failures))
    if failures:
        log.error("see %s for per-entry errors", Path(args.out_dir) / "errors.log")
        return 1
    return 0


def cmd_weights_demo(args) -> int:
    config = _read_json(args.config) if args.config else {}
    if "seed" not in config:
        config["seed"] = pipeline.env_seed(0)
    report = pipeline.run_weights_demo(config)
    if args.out:
        _write_json(Path(args.out), report)
    else:
        json.dump(report, sys.stdout, indent=2, sort_keys=True)
        sys.stdout.write("\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="defectforge", description="Procedural defect synthesis and phase-field refinement.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate one defect mask and its coarse composite")
    p.add_argument("--recipe", required=True, help="JSON recipe with exactly one mechanism block")
    p.add_argument("--image", required=True, help="normal RGB image (PNG)")
    p.add_argument("--foreground", help="object mask PNG; Otsu fallback when omitted")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, help="overrides the recipe seed")
    p.set_defaults(func=cmd_gen)

    defaults = refine.AcParams()
    p = sub.add_parser("refine", help="relax a coarse composite with the Allen-Cahn flow")
    p.add_argument("--coarse", required=True)
    p.add_argument("--orig", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--eps2", type=float, default=defaults.eps2)
    p.add_argument("--dt", type=float, default=defaults.dt)
    p.add_argument("--n-steps", type=int, default=defaults.n_steps)
    p.add_argument("--fidelity", type=float, default=defaults.fidelity)
    p.add_argument("--wave-filter", action="store_true", help="apply the Laplacian/Haar filter after relaxing")
    p.add_argument("--eps-p", type=float, default=0.001)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("dataset", help="generate a seeded batch dataset with a manifest")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("weights-demo", help="toy bilevel sample reweighting")
    p.add_argument("--config")
    p.add_argument("--out", help="report path (stdout when omitted)")
    p.set_defaults(func=cmd_weights_demo)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"defectforge: numeric failure: {exc}", file=sys.stderr)
        return 3
    except (DefectForgeError, ValueError, OSError) as exc:
        print(f"defectforge: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
