"""Command-line entry point: ``mddfnet <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data fault,
3 numeric fault. Every failure prints one line ``error: <kind>: <reason>``
on standard error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from .boxes import Detection, GroundTruthBox
from .data import SynthConfig, convert_tt100k, letterbox, load_dataset, read_image, synth_generate, to_chw_float
from .efficiency import efficiency_report
from .errors import (ConfigurationError, ContractError, DataError, EstimationError, EvaluationError,
                     GradCheckError, MeasurementError, NumericFault)
from .gradsuite import SUITES, run_suites
from .metrics import evaluate, per_class_table
from .train import Checkpoint, TrainConfig, evaluate_samples, load_config, load_samples, model_from_checkpoint, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def read_predictions(path) -> list[Detection]:
    dets = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if line.strip():
                try:
                    dets.append(Detection.from_record(json.loads(line)))
                except (KeyError, ValueError) as exc:
                    raise DataError(f"{path}:{n}: bad prediction record ({exc})") from exc
    return dets


def write_predictions(dets, fh) -> None:
    for d in dets:
        fh.write(json.dumps(d.to_record(), sort_keys=True) + "\n")


def _ground_truth(index) -> list[GroundTruthBox]:
    gts = []
    for i, item in enumerate(index.items):
        boxes, cls = index.targets(i)
        gts += [GroundTruthBox(tuple(map(float, b)), int(c), item.image_id) for b, c in zip(boxes, cls)]
    return gts


def _emit_report(report, labels, out) -> None:
    out.write(json.dumps(report.to_dict(), sort_keys=True) + "\n")
    out.write(per_class_table(report, labels) + "\n")


# -- subcommands ---------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.epochs is not None:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "epochs": args.epochs})
    data = args.data or cfg.data
    if not data:
        raise ConfigurationError("no training manifest: set 'data' in the config or pass --data")
    base = Path(args.config).parent
    resolve = lambda p: p if Path(p).is_absolute() or Path(p).exists() else str(base / p)  # noqa: E731
    index = load_dataset(resolve(data))
    val = load_dataset(resolve(cfg.val_data)) if cfg.val_data else None
    resume = Checkpoint.load(args.resume) if args.resume else None
    result = train(cfg, index, val, resume=resume, out_dir=args.out, echo=True)
    print(json.dumps({"checkpoint": str(result.checkpoint_path), "epochs": len(result.history)}))
    return EXIT_OK


def cmd_eval(args) -> int:
    index = load_dataset(args.data)
    labels = index.label_set
    if args.predictions:
        dets = read_predictions(args.predictions)
        report = evaluate([d for d in dets if d.score >= args.score_thr], _ground_truth(index), len(labels))
    elif args.checkpoint:
        model, cfg = model_from_checkpoint(Checkpoint.load(args.checkpoint))
        samples = load_samples(index, cfg.input_size)
        report = evaluate_samples(model, samples, len(labels), args.score_thr, args.iou_thr, cfg.max_det,
                                  cfg.batch_size)
    else:
        raise UsageError("eval needs --checkpoint or --predictions")
    _emit_report(report, labels, sys.stdout)
    return EXIT_OK


def cmd_infer(args) -> int:
    model, cfg = model_from_checkpoint(Checkpoint.load(args.checkpoint))
    img = read_image(args.image)
    lb, _, tr = letterbox(img, np.zeros((0, 4)), cfg.input_size)
    iid = Path(args.image).stem
    dets = model.predict(to_chw_float(lb)[None], args.score_thr, args.iou_thr, [iid], cfg.max_det)[0]
    back = tr.inverse_boxes(np.array([d.box for d in dets]).reshape(-1, 4))
    dets = [Detection(tuple(map(float, b)), d.score, d.class_id, iid) for b, d in zip(back, dets)]
    if args.out == "-":
        write_predictions(dets, sys.stdout)
    else:
        with open(args.out, "w") as fh:
            write_predictions(dets, fh)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    names = SUITES if args.module == "all" else (args.module,)
    failed = 0
    for res in run_suites(names, seed=args.seed):
        print(res.line(), flush=True)
        failed += not res.passed
    print(f"gradcheck: {'FAIL' if failed else 'PASS'} ({failed} over tolerance)")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_bench(args) -> int:
    if args.checkpoint:
        model, _ = model_from_checkpoint(Checkpoint.load(args.checkpoint))
    else:
        from .model import build_variant

        model = build_variant(args.variant, args.backbone, num_classes=args.num_classes, neck_width=args.neck_width)
    rep = efficiency_report(model, args.input_size, args.warmup, args.runs)
    print(json.dumps(rep.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_synth(args) -> int:
    doc = yaml.safe_load(Path(args.config).read_text()) if args.config else {}
    try:
        cfg = SynthConfig(**(doc or {}))
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"bad synth config: {exc}") from exc
    index = synth_generate(cfg, args.out)
    print(json.dumps({"images": len(index), "boxes": sum(len(i.boxes) for i in index.items),
                      "manifest": str(Path(args.out) / "manifest.json")}))
    return EXIT_OK


def cmd_convert(args) -> int:
    index = convert_tt100k(args.annotations, args.ids, args.labels, args.out)
    print(json.dumps({"images": len(index), "labels": len(index.label_set), "warnings": index.warnings}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mddfnet", description="Mamba-style dual-fusion traffic-sign detector toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a detector from a YAML config")
    t.add_argument("--config", required=True)
    t.add_argument("--data", help="manifest path (overrides the config)")
    t.add_argument("--out", help="output directory (overrides the config)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint or a prediction file against a manifest")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--predictions", help="JSON-lines prediction records")
    e.add_argument("--data", required=True)
    e.add_argument("--iou-thr", type=float, default=0.45, help="NMS IoU threshold")
    e.add_argument("--score-thr", type=float, default=0.01)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="detect signs in one image")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--out", default="-")
    i.add_argument("--score-thr", type=float, default=0.25)
    i.add_argument("--iou-thr", type=float, default=0.45)
    i.set_defaults(func=cmd_infer)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    g.add_argument("--module", choices=("all",) + SUITES, default="all")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="parameters, GFLOPs and FPS")
    b.add_argument("--checkpoint")
    b.add_argument("--variant", default="full")
    b.add_argument("--backbone", choices=("tiny", "full"), default="tiny")
    b.add_argument("--num-classes", type=int, default=3)
    b.add_argument("--neck-width", type=int, default=32)
    b.add_argument("--input-size", type=int, default=128)
    b.add_argument("--runs", type=int, default=5)
    b.add_argument("--warmup", type=int, default=2)
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("synth", help="render a synthetic sign dataset")
    s.add_argument("--config", help="YAML with SynthConfig fields")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    c = sub.add_parser("convert-tt100k", help="TT100K annotations to a manifest")
    c.add_argument("--annotations", required=True)
    c.add_argument("--ids", required=True)
    c.add_argument("--labels", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_convert)
    return p


def _fail(code: int, kind: str, exc) -> int:
    print(f"error: {kind}: {exc}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        return _fail(EXIT_USAGE, "usage", exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except ConfigurationError as exc:
        return _fail(EXIT_USAGE, "config", exc)
    except (DataError, EvaluationError, OSError) as exc:
        return _fail(EXIT_DATA, "data", exc)
    except (NumericFault, GradCheckError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, "numeric", exc)
    except (EstimationError, MeasurementError, ContractError) as exc:
        return _fail(EXIT_DATA, type(exc).__name__, exc)


if __name__ == "__main__":
    sys.exit(main())
