"""Command-line entry points.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure
(non-finite loss, failed gradient check, failed grid cell).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import gradcheck
from .dataset import (PALETTE, ClassTable, image_files, letterbox_image, load_dataset, read_image,
                      rescale_image, split_dataset, synthesize_dataset, to_original_pixels, write_dataset)
from .errors import ConfigError, DataError, EvaluationError, TinyDetError, TrainingError, WeightsError
from .layers import Network
from .metrics import EvalThresholds, evaluate_model, render_report, run_detector
from .netdef import bundled_path, load_cfg, micro_cfg, read_weights, write_weights
from .trainer import (GridSpec, LossWeights, OptimizerConfig, TrainConfig, init_weights, render_grid_table,
                      run_grid, train)

log = logging.getLogger("tinydet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _unit_float(text):
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"{v} is not in [0, 1]")
    return v


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"{v} is not >= 1")
    return v


def _default_workers():
    return min(4, os.cpu_count() or 1)


def _existing(path, kind="file"):
    p = Path(path)
    ok = p.is_file() if kind == "file" else p.is_dir() if kind == "dir" else p.exists()
    if not ok:
        raise UsageError(f"{kind} not found: {path}")
    return p


def _load_model(args):
    cfg = load_cfg(_existing(args.cfg))
    weights = read_weights(_existing(args.weights), cfg)
    return cfg, Network(cfg, weights)


def _load_classes(args, cfg=None):
    path = args.classes if args.classes else bundled_path("classes.txt")
    table = ClassTable.load(_existing(path))
    if cfg is not None and cfg.classes != len(table):
        raise DataError(f"{path} lists {len(table)} classes but the network predicts {cfg.classes}")
    return table


def _load_cfg_or_micro(args):
    return load_cfg(_existing(args.cfg)) if args.cfg else micro_cfg()


# detect ------------------------------------------------------------------------------

def detection_record(name, size, dets, table, original_box):
    """One JSON-ready record per image; field order is part of the output format."""
    return {
        "image": name,
        "width": int(size[0]),
        "height": int(size[1]),
        "detections": [
            {
                "class_id": d.class_id,
                "class_name": table[d.class_id],
                "score": round(float(d.score), 6),
                "box": [round(float(v), 2) for v in original_box(d.box)],
            }
            for d in dets
        ],
    }


def cmd_detect(args):
    cfg, net = _load_model(args)
    table = _load_classes(args, cfg)
    target = (cfg.input_w, cfg.input_h)
    paths = image_files(_existing(args.input, "any"))

    def load(path):
        try:
            pixels = read_image(path)
        except OSError as e:
            return path, None, str(e)
        return path, pixels, None

    failures = 0
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            for path, pixels, error in pool.map(load, paths):
                if error is not None:
                    failures += 1
                    log.error("cannot read %s: %s", path.name, error)
                    out.write(json.dumps({"image": path.name, "error": error}) + "\n")
                    continue
                h, w = pixels.shape[:2]
                if args.letterbox:
                    image, info = letterbox_image(pixels, target)
                else:
                    image, info = rescale_image(pixels, target), None
                dets = detect_image(net, image, args.score_thresh, args.iou_thresh, args.class_agnostic)
                record = detection_record(path.name, (w, h), dets, table,
                                          lambda b: to_original_pixels(b, (w, h), target, info))
                out.write(json.dumps(record) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_DATA if failures else EXIT_OK


def detect_image(net, image, score_thresh, iou_thresh, class_agnostic=False):
    from .dataset import Sample

    return run_detector(net, [Sample(image, [], "")], score_thresh, iou_thresh, class_agnostic)[0]


# eval --------------------------------------------------------------------------------

def cmd_eval(args):
    cfg, net = _load_model(args)
    table = _load_classes(args, cfg)
    samples, problems = load_dataset(_existing(args.images, "dir"), _existing(args.labels, "dir"), table,
                                     (cfg.input_w, cfg.input_h), args.letterbox, args.workers)
    if problems:
        log.warning("%d file(s) skipped", len(problems))
    if not samples:
        raise DataError("no usable image/label pairs")
    th = EvalThresholds(args.score_thresh, args.iou_thresh)
    report = evaluate_model(net, samples, table.names, th, class_agnostic=args.class_agnostic,
                            average="micro" if args.micro_average else "macro")
    Path(args.report).write_text(report.to_json())
    sys.stdout.write(render_report(report))
    return EXIT_OK


# train -------------------------------------------------------------------------------

def cmd_train(args):
    cfg = _load_cfg_or_micro(args)
    table = _load_classes(args, cfg)
    samples, problems = load_dataset(_existing(args.images, "dir"), _existing(args.labels, "dir"), table,
                                     (cfg.input_w, cfg.input_h), workers=args.workers)
    if not samples:
        raise DataError("no usable image/label pairs")
    tc = TrainConfig(args.epochs, args.batch, OptimizerConfig(args.optimizer, args.lr), args.seed,
                     LossWeights(args.coord_weight, args.obj_weight, args.cls_weight))
    log_file = open(args.loss_log, "w") if args.loss_log else None
    if log_file:
        log_file.write("epoch,loss\n")

    def on_epoch(epoch, loss):
        log.info("epoch %d loss %.6f", epoch + 1, loss)
        if log_file:
            log_file.write(f"{epoch + 1},{float(loss)!r}\n")
            log_file.flush()

    try:
        weights, _ = train(cfg, init_weights(cfg, args.seed), samples, tc, on_epoch)
    finally:
        if log_file:
            log_file.close()
    write_weights(args.out_weights, weights)
    return EXIT_OK


# grid --------------------------------------------------------------------------------

def cmd_grid(args):
    try:
        spec = GridSpec.load(_existing(args.spec))
    except (KeyError, ValueError, TypeError) as e:
        raise DataError(f"bad grid spec {args.spec}: {e}") from None
    cfg = _load_cfg_or_micro(args)
    table = _load_classes(args, cfg)
    samples, _ = load_dataset(_existing(args.images, "dir"), _existing(args.labels, "dir"), table,
                              (cfg.input_w, cfg.input_h), workers=args.workers)
    train_data, val_data = split_dataset(samples, spec.train_fraction, spec.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    timings = {}

    def on_cell(r):
        stem = out / f"cell_{r.cell_id:02d}"
        stem.with_name(stem.name + "_loss.csv").write_text(
            "epoch,loss\n" + "".join(f"{i + 1},{float(v)!r}\n" for i, v in enumerate(r.loss_curve)))
        body = {"cell": r.cell, "error": r.error,
                "report": None if r.report is None else r.report.to_dict()}
        stem.with_name(stem.name + "_report.json").write_text(json.dumps(body, indent=2) + "\n")
        timings[r.cell_id] = round(r.wall_time, 3)
        log.info("cell %d %s done%s", r.cell_id, r.cell, " (failed)" if r.failed else "")

    results = run_grid(spec, cfg, train_data, val_data, table.names, on_cell)
    table_md = render_grid_table(spec, results)
    (out / "results.md").write_text(table_md)
    (out / "timings.json").write_text(json.dumps(timings, indent=2) + "\n")
    sys.stdout.write(table_md)
    return EXIT_NUMERIC if any(r.failed for r in results) else EXIT_OK


# gradcheck ---------------------------------------------------------------------------

def cmd_gradcheck(args):
    def show(r):
        status = "ok" if r.passed else "FAIL"
        extra = f"  ({r.skipped} entries skipped at kinks)" if r.skipped else ""
        print(f"{status:4s}  {r.kind:36s} draws={r.draws:3d}  max rel err={r.max_error:.3e}{extra}", flush=True)

    results = gradcheck.run_suite(args.seed, args.draws, show)
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


# synth -------------------------------------------------------------------------------

def cmd_synth(args):
    table = _load_classes(args)
    samples, images = synthesize_dataset(args.n, args.seed, table, args.size)
    write_dataset(args.out, samples, images, table, args.format)
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


# render ------------------------------------------------------------------------------

def draw_detections(pixels, detections):
    """Copy of ``pixels`` with each detection's box and "name score" label burnt in."""
    from PIL import Image, ImageDraw

    img = Image.fromarray(pixels).convert("RGB")
    draw = ImageDraw.Draw(img)
    width = max(1, round(min(img.size) / 200))
    for d in detections:
        colour = PALETTE[d["class_id"] % len(PALETTE)]
        x0, y0, x1, y1 = d["box"]
        draw.rectangle([x0, y0, x1, y1], outline=colour, width=width)
        label = f"{d['class_name']} {d['score']:.2f}"
        tx0, ty0, tx1, ty1 = draw.textbbox((x0, y0), label)
        top = max(0, y0 - (ty1 - ty0) - 2)
        draw.rectangle([x0, top, x0 + (tx1 - tx0) + 2, top + (ty1 - ty0) + 2], fill=colour)
        draw.text((x0 + 1, top), label, fill=(255, 255, 255))
    return img


def cmd_render(args):
    images = _existing(args.images, "dir")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    failures = 0
    with open(_existing(args.detections)) as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{args.detections} line {line_no}: {e}") from None
            if "error" in record:
                continue
            try:
                pixels = read_image(images / record["image"])
            except OSError as e:
                failures += 1
                log.error("cannot read %s: %s", record["image"], e)
                continue
            draw_detections(pixels, record["detections"]).save(out / (Path(record["image"]).stem + ".png"))
    return EXIT_DATA if failures else EXIT_OK


# parser ------------------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="tinydet", description="Tiny single-stage detector: inference, evaluation, training.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def thresholds(p):
        p.add_argument("--score-thresh", type=_unit_float, default=0.7)
        p.add_argument("--iou-thresh", type=_unit_float, default=0.5)
        p.add_argument("--class-agnostic", action="store_true", help="suppress across classes in NMS")

    def model(p):
        p.add_argument("--cfg", required=True)
        p.add_argument("--weights", required=True)
        p.add_argument("--classes", required=True)

    def workers(p):
        p.add_argument("--workers", type=_positive_int, default=_default_workers(),
                       help="image loading threads")

    p = sub.add_parser("detect", help="detect objects in an image or directory (JSON lines)")
    model(p)
    p.add_argument("--input", required=True, help="image file or directory")
    thresholds(p)
    p.add_argument("--out", help="output file (default stdout)")
    p.add_argument("--letterbox", action="store_true", help="aspect-preserving resize instead of stretch")
    workers(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="evaluate a model on a labelled directory")
    model(p)
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    thresholds(p)
    p.add_argument("--report", required=True, help="JSON report path")
    p.add_argument("--micro-average", action="store_true")
    p.add_argument("--letterbox", action="store_true")
    workers(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("train", help="train from scratch on a labelled directory")
    p.add_argument("--cfg", help="network cfg (default: bundled micro-detector)")
    p.add_argument("--classes", help="class names (default: bundled ripeness classes)")
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--epochs", type=_positive_int, default=30)
    p.add_argument("--batch", type=_positive_int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coord-weight", type=float, default=1.0)
    p.add_argument("--obj-weight", type=float, default=1.0)
    p.add_argument("--cls-weight", type=float, default=1.0)
    p.add_argument("--out-weights", required=True)
    p.add_argument("--loss-log", help="CSV of per-epoch mean loss")
    workers(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grid", help="run a factorial grid search")
    p.add_argument("--spec", required=True, help="grid spec JSON")
    p.add_argument("--cfg", help="network cfg (default: bundled micro-detector)")
    p.add_argument("--classes", help="class names (default: bundled ripeness classes)")
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True, help="output directory")
    workers(p)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--draws", type=_positive_int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic labelled dataset")
    p.add_argument("--n", type=_positive_int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=_positive_int, default=416)
    p.add_argument("--format", choices=["png", "jpg"], default="png")
    p.add_argument("--classes", help="class names (default: bundled ripeness classes)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("render", help="draw detections onto copies of the images")
    p.add_argument("--detections", required=True, help="JSON lines from detect")
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"tinydet {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, FloatingPointError) as e:
        print(f"tinydet {args.command}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ConfigError, WeightsError, EvaluationError, OSError) as e:
        print(f"tinydet {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA
    except (TinyDetError, ValueError) as e:
        print(f"tinydet {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
