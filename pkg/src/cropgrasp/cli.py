"""Command line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .config import Config, load_config
from .errors import CropGraspError
from .models import load_checkpoint, save_checkpoint
from .synth import build_dataset, generate_scene, labels_from_raster, load_dataset, rasterize, write_ppm

logger = logging.getLogger("cropgrasp")

USAGE_EXIT = 1
RUNTIME_EXIT = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _add_globals(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=argparse.SUPPRESS, metavar="FILE", help="JSON run configuration")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, metavar="U64",
                   help="seed (defaults to the config's seed)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cropgrasp", description="Crop detection and vacuum grasp pipeline")
    _add_globals(parser)
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_globals(p)
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--n", type=int, default=None, help="number of scenes (config n_samples)")

    for name, what in (("train-detector", "detector"), ("train-grasper", "grasp regressor")):
        p = sub.add_parser(name, help=f"train the {what}")
        _add_globals(p)
        p.add_argument("--data", required=True, metavar="DIR")
        p.add_argument("--out", required=True, metavar="CKPT")
        p.add_argument("--log", default=None, metavar="JSONL", help="epoch reports, one JSON per line")

    p = sub.add_parser("eval", help="evaluate detector and grasper on a split")
    _add_globals(p)
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--detector", default="oracle", metavar="CKPT|oracle")
    p.add_argument("--grasper", default="oracle", metavar="CKPT|oracle")
    p.add_argument("--out", default=None, metavar="JSON")

    p = sub.add_parser("run", help="one scene end to end: detect, plan and execute one grasp")
    _add_globals(p)
    p.add_argument("--detector", default="oracle", metavar="CKPT|oracle")
    p.add_argument("--grasper", default="oracle", metavar="CKPT|oracle")
    p.add_argument("--render", default="run.ppm", metavar="PPM")
    return parser


def _stages(args, cfg: Config):
    digests = []
    if args.detector == "oracle":
        detector = pipeline.GroundTruthDetector(cfg.detector)
        digests.append("detector:oracle")
    else:
        detector = pipeline.NetworkDetector(load_checkpoint(args.detector))
        digests.append("detector:" + pipeline.file_digest(args.detector))
    if args.grasper == "oracle":
        grasper = pipeline.CentroidOracleGrasper()
        digests.append("grasper:oracle")
    else:
        grasper = pipeline.NetworkGrasper(load_checkpoint(args.grasper))
        digests.append("grasper:" + pipeline.file_digest(args.grasper))
    return detector, grasper, ";".join(digests)


def _train(args, cfg: Config, seed: int, which: str) -> None:
    manifest = load_dataset(args.data)
    log = open(args.log, "w") if args.log else None

    def on_epoch(rep):
        line = rep.to_json()
        logger.info("epoch %d loss %.5f", rep.epoch, rep.mean_loss)
        if log:
            log.write(line + "\n")
            log.flush()

    try:
        train = pipeline.train_detector if which == "detector" else pipeline.train_grasper
        net, _ = train(manifest, cfg, seed, on_epoch)
    finally:
        if log:
            log.close()
    save_checkpoint(net, args.out)
    print(json.dumps({"checkpoint": str(args.out), "final_loss": net.metadata["final_loss"]}))


_CLASS_COLORS = np.array([(1.0, 1.0, 0.0), (0.0, 1.0, 1.0), (1.0, 0.0, 1.0), (1.0, 1.0, 1.0)])


def render(image: np.ndarray, detections, contact=None, scale: int = 4) -> np.ndarray:
    """Upscaled copy of ``image`` with box outlines and a contact-point cross."""
    img = np.repeat(np.repeat(np.asarray(image, dtype=np.float32), scale, axis=1), scale, axis=2)
    H, W = img.shape[1:]
    for d in detections:
        color = _CLASS_COLORS[d.class_id % len(_CLASS_COLORS)][:, None]
        x0, y0, x1, y1 = d.box.corners()
        c0, c1 = int(x0 * (W - 1)), int(x1 * (W - 1))
        r0, r1 = int(y0 * (H - 1)), int(y1 * (H - 1))
        img[:, r0, c0:c1 + 1] = color
        img[:, r1, c0:c1 + 1] = color
        img[:, r0:r1 + 1, c0] = color
        img[:, r0:r1 + 1, c1] = color
    if contact is not None:
        cx, cy = int(contact[0] * (W - 1)), int(contact[1] * (H - 1))
        arm = max(scale, 2)
        img[:, cy, max(cx - arm, 0):cx + arm + 1] = 1.0
        img[:, max(cy - arm, 0):cy + arm + 1, cx] = 1.0
    return img


def _run(args, cfg: Config, seed: int) -> None:
    gen = cfg.dataset.generator
    scene = generate_scene(gen, seed)
    image, objs = rasterize(scene, gen.image_size, gen.image_size)
    labels = labels_from_raster(objs)
    detector, grasper, _ = _stages(args, cfg)
    if isinstance(detector, pipeline.GroundTruthDetector):
        detector.add(image, labels)
    dets = pipeline.detect(image, detector, cfg.eval.conf_threshold, cfg.eval.nms_iou)
    plan = pipeline.plan_grasp(image, dets[0] if dets else None, grasper,
                               expand=cfg.eval.crop_expand, masks=[l.mask for l in labels])
    result = pipeline.execute_grasp(objs, plan)
    write_ppm(args.render, render(image, dets, plan.contact_point))
    print(json.dumps(result.to_dict(), sort_keys=True))


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "cropgrasp: error: a subcommand is required")
        if not hasattr(args, "config"):
            raise UsageError(parser.format_usage() + "cropgrasp: error: the following arguments are required: --config")
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return USAGE_EXIT
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        seed = int(getattr(args, "seed", cfg.seed))
        if args.command == "synth":
            manifest = build_dataset(cfg.dataset, args.n or cfg.n_samples, seed, args.out)
            counts = {k: len(manifest.split(k)) for k in ("train", "val", "test")}
            print(json.dumps({"out": str(args.out), "splits": counts}, sort_keys=True))
        elif args.command == "train-detector":
            _train(args, cfg, seed, "detector")
        elif args.command == "train-grasper":
            _train(args, cfg, seed, "grasper")
        elif args.command == "eval":
            manifest = load_dataset(args.data)
            detector, grasper, ckpt = _stages(args, cfg)
            if isinstance(detector, pipeline.GroundTruthDetector):
                detector = pipeline.GroundTruthDetector.from_manifest(cfg.detector, manifest, args.split)
            report = pipeline.evaluate(manifest, args.split, detector, grasper, cfg.eval,
                                       config_digest=cfg.digest(), checkpoint_digest=ckpt)
            text = report.to_json()
            if args.out:
                Path(args.out).write_text(text + "\n")
            print(text)
        elif args.command == "run":
            _run(args, cfg, seed)
    except (CropGraspError, OSError) as exc:
        print(f"cropgrasp: {type(exc).__name__}: {exc}", file=sys.stderr)
        return RUNTIME_EXIT
    return 0


if __name__ == "__main__":
    sys.exit(main())
