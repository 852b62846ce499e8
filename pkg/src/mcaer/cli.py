"""``mcaer`` command line.

Exit codes: 0 success, 1 usage, 2 I/O, 3 cache failure in strict mode,
4 training aborted on a non-finite loss, 5 missing cue in strict mode,
6 self-test failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import functional as F
from .checkpoint import load_checkpoint
from .config import RunConfig, load_config
from .cues import (
    CommandDetector,
    CueBundle,
    FaceBox,
    detect_faces,
    fallback_face,
    select_person_mask_index,
    select_principal_face,
)
from .data import (
    CueDataset,
    DatasetSpec,
    dump_record,
    load_dataset,
    prepare_bundle,
    read_sidecar,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DatasetError,
    MCAERError,
    MissingCueError,
    NoFaceError,
    ParseError,
    TrainingAborted,
    ValidationError,
)
from .gradcam import gradcam
from .imageio import read_mask, read_rgb, write_image
from .model import CLASS_NAMES, STREAMS, MCAERModel
from .preprocessing import PrepConfig, resize_bilinear
from .tensor import no_grad

log = logging.getLogger("mcaer")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_CACHE, EXIT_ABORT, EXIT_CUE, EXIT_SELFTEST = range(7)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- argument types --------------------------------------------------------------


def _streams(text: str) -> tuple[str, ...]:
    names = tuple(s.strip() for s in text.split(",") if s.strip())
    bad = [s for s in names if s not in STREAMS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown stream(s) {bad}; choose from {list(STREAMS)}")
    if "face" not in names or "context" not in names:
        raise argparse.ArgumentTypeError("streams must include face and context")
    return tuple(s for s in STREAMS if s in names)


def _box(text: str) -> FaceBox:
    try:
        vals = [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected x,y,w,h integers, got {text!r}") from None
    if len(vals) != 4:
        raise argparse.ArgumentTypeError(f"expected x,y,w,h, got {text!r}")
    try:
        return FaceBox(*vals)
    except ValidationError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


# -- shared helpers -----------------------------------------------------------------


def _echo(command: str, settings: dict) -> None:
    log.info("%s: effective configuration\n%s", command, json.dumps(settings, indent=2, sort_keys=True, default=str))


def _ensure_parent(path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)


def _dataset_spec(args, split: Optional[str]) -> DatasetSpec:
    return DatasetSpec(args.data, args.annotations, split, split_seed=args.split_seed)


def _load_model(path: str) -> MCAERModel:
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    return load_checkpoint(path)


def _single_sample(args, model: MCAERModel, prep: PrepConfig):
    """Read ``--image`` and resolve face/mask for one-off inference; returns (bundle, prepared)."""
    image = read_rgb(args.image)
    h, w = image.shape[:2]
    if args.face is not None:
        face = args.face.clip(w, h)
        if face is None:
            raise UsageError(f"--face {','.join(map(str, args.face.as_list()[:4]))} lies outside the {w}x{h} image")
        fallback = False
    else:
        boxes = detect_faces(image, CommandDetector(args.detector), args.image) if args.detector else []
        if boxes:
            face, fallback = select_principal_face(boxes, w, h), False
        elif args.lenient:
            face, fallback = fallback_face(w, h), True
            log.warning("no face found; using the centred fallback box %s", face.as_list())
        else:
            raise NoFaceError("no face: pass --face, --detector, or --lenient")
    mask = read_mask(args.mask) if args.mask else None
    bundle = CueBundle(image, face, mask, None, face_fallback=fallback)
    sample = prepare_bundle(bundle, model.config, prep, lenient=args.lenient, dtype=model.dtype)
    if not sample.body_present:
        log.warning("no person mask; the body stream contributes a zero feature")
    return bundle, sample


def _inputs(sample, model: MCAERModel) -> tuple[dict, Optional[np.ndarray]]:
    inputs = {"face": sample.face[None], "context": sample.context[None]}
    present = None
    if "body" in model.config.enabled_streams:
        inputs["body"] = sample.body[None]
        present = np.array([sample.body_present])
    return inputs, present


# -- commands ------------------------------------------------------------------------


def cmd_synth(args) -> int:
    from .synthetic import generate_synthetic

    _echo("synth", {"out": args.out, "n": args.n, "seed": args.seed})
    spec = generate_synthetic(args.n, args.seed, args.out)
    print(f"wrote {args.n * len(CLASS_NAMES)} scenes and {spec.sidecar_path}")
    return EXIT_OK


def _cache_record(rec: dict, root: Path, detector) -> tuple[dict, list[str]]:
    """Select principal face and person mask for one sidecar record; returns (record, problems)."""
    out = copy.deepcopy(rec)
    problems = []
    image = read_rgb(root / rec["image"])
    h, w = image.shape[:2]
    if detector is not None:
        cands = detect_faces(image, detector, str(root / rec["image"]))
    else:
        raw = rec.get("faces")
        if raw is None:
            raw = [rec["face"]] if rec.get("face") is not None else []
        cands = [b for b in (FaceBox.from_seq(v).clip(w, h) for v in raw) if b is not None]
    face = select_principal_face(cands, w, h) if cands else None
    if face is None:
        problems.append("no face candidates")
        out["face"] = None
    else:
        out["face"] = face.as_list()[:4]
    mask_paths = rec.get("masks")
    if mask_paths is None:
        mask_paths = [rec["mask"]] if rec.get("mask") else []
    chosen = None
    if mask_paths and face is not None:
        idx = select_person_mask_index([read_mask(root / p) for p in mask_paths], face)
        chosen = None if idx is None else mask_paths[idx]
    if chosen is None:
        problems.append("no person mask covers the face" if mask_paths else "no person mask")
    out["mask"] = chosen
    return out, problems


def cmd_cache(args) -> int:
    root = Path(args.data)
    sidecar = DatasetSpec(args.data, args.annotations, None).sidecar_path
    _echo("cache", {"data": str(root), "annotations": str(sidecar), "out": args.out,
                    "lenient": args.lenient, "detector": args.detector})
    detector = CommandDetector(args.detector) if args.detector else None
    out_records, failures = [], []
    for lineno, rec in enumerate(read_sidecar(sidecar), start=1):
        try:
            new, problems = _cache_record(rec, root, detector)
        except (OSError, ParseError, ValidationError) as exc:
            new, problems = None, [f"unreadable: {exc}"]
        for p in problems:
            log.warning("%s:%d %s: %s", sidecar, lineno, rec.get("image"), p)
        if problems:
            failures.append(rec.get("image"))
        if new is not None:
            out_records.append(new)
    log.info("cache: %d records, %d with unresolved cues", len(out_records), len(failures))
    if failures and not args.lenient:
        log.error("strict mode: %d sample(s) unresolvable, nothing written", len(failures))
        return EXIT_CACHE
    text = "".join(dump_record(r) + "\n" for r in out_records)
    _ensure_parent(args.out)
    Path(args.out).write_text(text, encoding="utf-8")
    print(f"wrote {len(out_records)} records to {args.out}")
    return EXIT_OK


def _run_config(args) -> RunConfig:
    config = load_config(args.config)
    train_over = {}
    for key, attr in (("epochs", "epochs"), ("seed", "seed"), ("batch_size", "batch_size"),
                      ("lr0", "lr"), ("early_stop_acc", "early_stop_acc"), ("precision", "precision")):
        v = getattr(args, attr, None)
        if v is not None:
            train_over[key] = v
    if args.strict:
        train_over["lenient"] = False
    if train_over:
        config = replace(config, train=replace(config.train, **train_over))
    if args.width_divisor is not None:
        config = replace(config, model=replace(config.model, width_divisor=args.width_divisor))
    if args.streams is not None:
        config = config.with_streams(args.streams)
    return config


def cmd_train(args) -> int:
    from .training import train

    config = _run_config(args)
    history_path = args.history or str(args.out) + ".history"
    _echo("train", {"data": args.data, "annotations": args.annotations, "out": args.out,
                    "history": history_path, "split_seed": args.split_seed, "config": config.to_ini()})
    cfg = config.train
    spec = _dataset_spec(args, "train")
    train_refs = load_dataset(spec)
    val_refs = load_dataset(spec.with_split("val"))
    model = MCAERModel(config.model, seed=cfg.seed, dtype=cfg.dtype)
    _ensure_parent(args.out)
    _ensure_parent(history_path)
    make = lambda refs: CueDataset(refs, config.model, config.prep, cfg.lenient, True, cfg.dtype)  # noqa: E731
    val = make(val_refs) if val_refs else None
    log.info("train: %d training / %d validation samples", len(train_refs), len(val_refs))
    history = train(model, make(train_refs), val, cfg, args.out, history_path)
    last = history.records[-1] if history.records else None
    print(f"trained {len(history.records)} epochs ({history.steps} steps); best epoch {history.best_epoch}")
    if last is not None:
        print(f"final loss {last.loss:.6f} val_acc {last.val_acc:.4f}")
    print(f"checkpoint {args.out}; history {history_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .training import evaluate

    model = _load_model(args.ckpt)
    split = None if args.split == "all" else args.split
    prep = load_config(args.config).prep
    _echo("eval", {"ckpt": args.ckpt, "data": args.data, "annotations": args.annotations, "split": args.split,
                   "split_seed": args.split_seed, "lenient": args.lenient, "streams": model.config.streams})
    refs = load_dataset(_dataset_spec(args, split))
    report = evaluate(model, CueDataset(refs, model.config, prep, args.lenient))
    print(report.format())
    return EXIT_OK


def cmd_infer(args) -> int:
    model = _load_model(args.ckpt)
    prep = load_config(args.config).prep
    _echo("infer", {"ckpt": args.ckpt, "image": args.image, "face": args.face and args.face.as_list(),
                    "mask": args.mask, "lenient": args.lenient, "detector": args.detector})
    bundle, sample = _single_sample(args, model, prep)
    inputs, present = _inputs(sample, model)
    with no_grad():
        out = model.forward(inputs, train=False, body_present=present)
    probs = F.softmax(out.logits, axis=1).data[0].astype(np.float64)
    weights = out.weights.data[0].astype(np.float64)
    print(f"class {CLASS_NAMES[int(np.argmax(probs))]}")
    print(f"face {' '.join(str(v) for v in bundle.face.as_list()[:4])}{' (fallback)' if bundle.face_fallback else ''}")
    for name, p in zip(CLASS_NAMES, probs):
        print(f"prob {name} {p:.9f}")
    for name, lam in zip(model.config.streams, weights):
        print(f"lambda {name} {lam:.9f}")
    return EXIT_OK


def cmd_gradcam(args) -> int:
    model = _load_model(args.ckpt)
    prep = load_config(args.config).prep
    _echo("gradcam", {"ckpt": args.ckpt, "image": args.image, "class": args.class_name, "out": args.out,
                      "face": args.face and args.face.as_list(), "mask": args.mask, "lenient": args.lenient})
    _, sample = _single_sample(args, model, prep)
    inputs, present = _inputs(sample, model)
    cam = gradcam(model, inputs, CLASS_NAMES.index(args.class_name), body_present=present)
    h, w = model.config.context_hw
    up = resize_bilinear(cam.astype(np.float64), h, w)
    pixels = np.clip(np.rint(up * 255.0), 0, 255).astype(np.uint8)
    _ensure_parent(args.out)
    write_image(args.out, pixels)
    print(f"wrote {w}x{h} heatmap to {args.out} (map {cam.shape[0]}x{cam.shape[1]}, peak {cam.max():.4f})")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    _echo("selftest", {"seeds": args.seeds})
    ok = run_selftest(range(args.seeds), fault=args.inject_grad_fault, echo=lambda s: print(s, flush=True))
    print("selftest passed" if ok else "selftest FAILED")
    return EXIT_OK if ok else EXIT_SELFTEST


# -- parser ------------------------------------------------------------------------------


def _add_data_args(p) -> None:
    p.add_argument("--data", required=True, help="dataset root with one folder per class")
    p.add_argument("--annotations", default=None, help="sidecar path (default: <data>/annotations.jsonl)")
    p.add_argument("--split-seed", type=int, default=0, help="seed of the 70/10/20 per-class split")


def _add_sample_args(p) -> None:
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--face", type=_box, default=None, metavar="X,Y,W,H", help="face box (skips detection)")
    p.add_argument("--mask", default=None, help="person mask image for the body stream")
    p.add_argument("--detector", default=None, metavar="CMD", help="external face detector command")
    p.add_argument("--lenient", action="store_true", help="substitute missing cues instead of failing")
    p.add_argument("--config", default=None, help="INI file; only [prep] is used")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    common.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    parser = _Parser(prog="mcaer", description="Multi-cue emotion recognition: data, training, inference.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def command(name, func, help):
        p = sub.add_parser(name, parents=[common], help=help)
        p.set_defaults(func=func)
        return p

    p = command("synth", cmd_synth, "write the synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=_positive, default=8, help="scenes per class")
    p.add_argument("--seed", type=int, default=0)

    p = command("cache", cmd_cache, "select principal face and person mask, write an enriched sidecar")
    p.add_argument("--data", required=True)
    p.add_argument("--annotations", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--detector", default=None, metavar="CMD")
    p.add_argument("--lenient", action="store_true", help="keep samples with unresolved cues (mask: null)")

    p = command("train", cmd_train, "train and write the best-validation checkpoint")
    _add_data_args(p)
    p.add_argument("--config", default=None, help="INI file with [model], [train], [prep]")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--history", default=None, help="history log path (default: <out>.history)")
    p.add_argument("--streams", type=_streams, default=None, help="face,context[,body]")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--batch-size", type=_positive, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--width-divisor", type=_positive, default=None)
    p.add_argument("--early-stop-acc", type=float, default=None)
    p.add_argument("--precision", choices=("float32", "float64"), default=None)
    p.add_argument("--strict", action="store_true", help="fail on samples with missing cues")

    p = command("eval", cmd_eval, "accuracy and confusion matrix of a checkpoint")
    _add_data_args(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.add_argument("--lenient", action="store_true")
    p.add_argument("--config", default=None, help="INI file; only [prep] is used")

    p = command("infer", cmd_infer, "classify one image")
    _add_sample_args(p)

    p = command("gradcam", cmd_gradcam, "write a class-activation heatmap as PGM")
    _add_sample_args(p)
    p.add_argument("--class", dest="class_name", required=True, choices=CLASS_NAMES)
    p.add_argument("--out", required=True)

    p = command("selftest", cmd_selftest, "gradient, shape and invariant checks")
    p.add_argument("--seeds", type=_positive, default=20)
    p.add_argument("--inject-grad-fault", action="store_true", help=argparse.SUPPRESS)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except TrainingAborted as exc:
        log.error("%s", exc)
        return EXIT_ABORT
    except (MissingCueError, NoFaceError) as exc:
        log.error("%s", exc)
        return EXIT_CUE
    except (OSError, DatasetError, CheckpointError, ParseError) as exc:
        log.error("%s", exc)
        return EXIT_IO
    except MCAERError as exc:
        # remaining input problems (bad image geometry, empty split, ...)
        log.error("%s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
