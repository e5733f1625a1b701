"""Command-line entry point."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import jsonio

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
log = logging.getLogger("viewgen")


def _cmd_preprocess(args) -> int:
    from .geometry.io import read_obj, save_bank
    from .geometry.mesh import icosphere
    from .geometry.preprocess import preprocess_template
    from .geometry.templates import TemplateBank

    reference = icosphere(args.level)
    templates, names = [], []
    for path in args.objs:
        mesh, _, _ = read_obj(path)
        templates.append(preprocess_template(mesh, args.resolution, reference))
        names.append(Path(path).stem)
        log.info("preprocessed %s", path)
    scales = args.scales if args.scales else None
    if scales is not None and len(scales) != len(templates):
        raise ValueError(f"{len(scales)} scales for {len(templates)} templates")
    bank = TemplateBank.from_reference(reference, templates, scales, names)
    save_bank(bank, args.out)
    print(f"wrote {bank.n} templates to {args.out}")
    return EXIT_OK


def _cmd_gen_data(args) -> int:
    from .data import build_dataset

    m = build_dataset(args.shapes, args.seed, args.size, args.size, args.out, family=args.family,
                      same_texture_pairs=args.same_texture_pairs)
    print(f"wrote {len(m.train)} training and {len(m.eval)} evaluation views to {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    from .train import TrainConfig, train

    cfg = TrainConfig.load(args.config)
    trainer = train(cfg, args.out, resume=args.resume, max_steps=args.max_steps)
    print(f"trained to step {trainer.step}; checkpoint {Path(args.out) / 'final.bin'}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .data import load_dataset
    from .evaluate import evaluate
    from .train import load_checkpoint

    trainer = load_checkpoint(args.ckpt)
    report = evaluate(trainer, load_dataset(args.data))
    jsonio.dump(report.as_dict(), args.report)
    print(f"original-view mIoU {report.original_miou:.4f}; novel-view MSE {report.novel_mse:.5f}")
    return EXIT_OK


def _load_input(path: str, size: int) -> np.ndarray:
    from .data import DataError
    from .geometry.io import image_from_png

    if not Path(path).exists():
        raise DataError(f"image not found: {path}")
    img = image_from_png(path)
    if img.ndim != 3 or img.shape[0] != 3 or img.shape[1:] != (size, size):
        raise DataError(f"{path}: expected a {size}x{size} RGB image, got shape {img.shape}")
    return img


def _cmd_infer(args) -> int:
    from .evaluate import export_textured_mesh
    from .train import load_checkpoint

    trainer = load_checkpoint(args.ckpt)
    img = _load_input(args.image, trainer.model.config.image_size)
    obj, cam, _ = export_textured_mesh(trainer.model, img, args.export, trainer.cfg.use_multi_template)
    jsonio.dump(cam.as_dict(), Path(args.export).with_suffix(".camera.json"))
    print(f"wrote {obj}")
    return EXIT_OK


def _cmd_turntable(args) -> int:
    from .evaluate import render_turntable
    from .geometry.io import image_to_png
    from .train import load_checkpoint

    trainer = load_checkpoint(args.ckpt)
    img = _load_input(args.image, trainer.model.config.image_size)
    strip = render_turntable(trainer.model, img, args.views, trainer.cfg.sigma, trainer.cfg.use_multi_template)
    image_to_png(strip, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="viewgen", description="Single-view textured mesh reconstruction with cycle consistency.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("preprocess-template", help="voxelize, re-mesh and resample template OBJs onto the reference topology")
    s.add_argument("objs", nargs="+")
    s.add_argument("--out", required=True)
    s.add_argument("--resolution", type=int, default=32)
    s.add_argument("--level", type=int, default=3)
    s.add_argument("--scales", type=float, nargs="*")
    s.set_defaults(func=_cmd_preprocess)

    s = sub.add_parser("gen-data", help="generate the synthetic single-view dataset")
    s.add_argument("--shapes", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--family", choices=("ellipsoid", "superquadric", "box-blend"))
    s.add_argument("--same-texture-pairs", action="store_true")
    s.set_defaults(func=_cmd_gen_data)

    s = sub.add_parser("train", help="train from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resume")
    s.add_argument("--max-steps", type=int)
    s.set_defaults(func=_cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--report", required=True)
    s.set_defaults(func=_cmd_eval)

    s = sub.add_parser("infer", help="infer and export a textured mesh from one image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--export", required=True)
    s.set_defaults(func=_cmd_infer)

    s = sub.add_parser("turntable", help="render an azimuth turntable strip")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--views", type=int, default=4)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_turntable)
    return p


def main(argv: list[str] | None = None) -> int:
    from .data import DataError
    from .geometry.mesh import MeshError
    from .geometry.preprocess import PreprocessError
    from .train import ConfigError, NumericAbort

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, PreprocessError, MeshError, FileNotFoundError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
