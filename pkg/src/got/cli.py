"""Command-line entry point: one binary, subcommands for the whole workflow.

    got synth-data --out DIR --n 100 --seed 7 [--layout mixed|pair]
    got train      --dataset DIR/annotations.jsonl [--split train] [--config F] [--out DIR]
    got evaluate   --dataset DIR/annotations.jsonl --checkpoint F [--split val] [--out F]
    got detect     --image F --checkpoint F [--out F]
    got retrieve   --image F --query "a red square" --checkpoint F [--out F]
    got serve      [--port N] [--checkpoint-caption F] [--checkpoint-retrieval F]

Exit codes: 0 success, 2 validation error, 3 runtime error. ``--set key=value``
overrides any config field; CLI flags win over the config file. ``serve``
honors the ``GOT_PORT``, ``GOT_CHECKPOINT_CAPTION`` and
``GOT_CHECKPOINT_RETRIEVAL`` environment variables.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .config import TrainConfig
from .datasets import (
    generate_synthetic_corpus,
    load_annotations,
    read_splits,
    save_annotations,
    split_dataset,
    tokenize,
    write_splits,
)
from .errors import CheckpointError, GotError, TrainingDivergedError, ValidationError
from .infer_eval import detect_and_caption, evaluate_captioning, evaluate_retrieval, retrieve
from .serve import InferenceService, run_server
from .trainer import load_checkpoint, train

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="got", description="grounded object toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth-data", help="generate a synthetic shapes corpus")
    synth.add_argument("--out", required=True, help="output directory")
    synth.add_argument("--n", type=int, default=100, help="number of images")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--layout", choices=("mixed", "pair"), default="mixed")
    synth.add_argument("--canvas", default="64,64", help="canvas size WIDTH,HEIGHT")
    synth.add_argument("--val-fraction", type=float, default=0.2)

    tr = sub.add_parser("train", help="train a caption or retrieval model")
    _common_config_flags(tr)
    tr.add_argument("--dataset", required=True, help="annotations.jsonl path")
    tr.add_argument("--split", default=None, help="split name from splits.json")
    tr.add_argument("--out", default=None, help="checkpoint output directory")
    tr.add_argument("--log-every", type=int, default=0)

    ev = sub.add_parser("evaluate", help="run the metric suite on a split")
    _common_config_flags(ev)
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--split", default=None)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--out", default=None, help="write the JSON report here")

    de = sub.add_parser("detect", help="detect objects and caption them")
    _common_config_flags(de)
    de.add_argument("--image", required=True)
    de.add_argument("--checkpoint", required=True)
    de.add_argument("--out", default=None)

    re_ = sub.add_parser("retrieve", help="localize the object a query refers to")
    _common_config_flags(re_)
    re_.add_argument("--image", required=True)
    re_.add_argument("--query", required=True)
    re_.add_argument("--checkpoint", required=True)
    re_.add_argument("--out", default=None)

    sv = sub.add_parser("serve", help="run the HTTP inference service")
    sv.add_argument("--host", default="127.0.0.1")
    sv.add_argument("--port", type=int, default=None)
    sv.add_argument("--checkpoint-caption", default=None)
    sv.add_argument("--checkpoint-retrieval", default=None)
    return parser


def _common_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config field (repeatable)")


def _config_from_args(args, extra: dict | None = None) -> TrainConfig:
    overrides: dict = {}
    for item in args.set:
        if "=" not in item:
            raise ValidationError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = args.seed
    if extra:
        overrides.update(extra)
    return TrainConfig.load(args.config, overrides)


def _load_split(args):
    dataset = load_annotations(args.dataset)
    if args.split:
        splits_path = Path(args.dataset).parent / "splits.json"
        if not splits_path.exists():
            raise ValidationError(f"--split given but {splits_path} does not exist")
        splits = read_splits(splits_path)
        if args.split not in splits:
            raise ValidationError(f"split {args.split!r} not in {sorted(splits)}")
        dataset = dataset.subset(splits[args.split])
    if len(dataset) == 0:
        raise ValidationError("selected split is empty")
    return dataset


def _load_image(path) -> np.ndarray:
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as e:
        raise ValidationError(f"cannot read image {path}: {e}") from e
    return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0


def _emit(payload: dict, out_path) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out_path:
        Path(out_path).write_text(text + "\n", encoding="utf-8")
    print(text)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth_data(args) -> int:
    try:
        width, height = (int(v) for v in args.canvas.split(","))
    except ValueError as e:
        raise ValidationError(f"--canvas expects WIDTH,HEIGHT, got {args.canvas!r}") from e
    corpus = generate_synthetic_corpus(args.n, seed=args.seed, canvas_size=(width, height),
                                       layout=args.layout)
    out = Path(args.out)
    save_annotations(corpus, out / "annotations.jsonl")
    fractions = {"train": 1.0 - args.val_fraction, "val": args.val_fraction}
    if args.val_fraction <= 0:
        fractions = {"train": 1.0}
    write_splits(split_dataset(corpus, fractions, seed=args.seed), out / "splits.json")
    print(f"wrote {len(corpus)} images to {out} "
          f"({corpus.n_superclasses} superclasses, layout={args.layout})")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _config_from_args(args)
    dataset = _load_split(args)
    checkpoints = train(dataset, config, out_dir=args.out, log_every=args.log_every)
    final = checkpoints[-1]
    print(f"trained task={config.task} iterations={config.iterations} "
          f"final_loss={final.manifest['loss_history_tail'][-1]:.4f} digest={final.digest}")
    if args.out:
        print(f"checkpoints in {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    params = ckpt.to_model()
    config = _config_from_args(args, extra={"task": params.task, "mode": params.mode,
                                            "width_preset": params.widths.preset})
    dataset = _load_split(args)
    if params.task == "caption":
        report = evaluate_captioning(dataset, params, config)
    else:
        report = evaluate_retrieval(dataset, params, config)
    print(report.to_table())
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n", encoding="utf-8")
        print(f"report written to {args.out}")
    return EXIT_OK


def cmd_detect(args) -> int:
    ckpt = load_checkpoint(args.checkpoint, expected_task="caption")
    params = ckpt.to_model()
    config = _config_from_args(args, extra={"task": "caption", "mode": params.mode,
                                            "width_preset": params.widths.preset})
    result = detect_and_caption(_load_image(args.image), params, config)
    _emit({
        "detections": [
            {"box": list(o.box), "superclass": o.superclass, "score": o.score, "caption": o.caption}
            for o in result.objects
        ],
        "fallback_used": result.fallback_used,
    }, args.out)
    return EXIT_OK


def cmd_retrieve(args) -> int:
    ckpt = load_checkpoint(args.checkpoint, expected_task="retrieval")
    params = ckpt.to_model()
    config = _config_from_args(args, extra={"task": "retrieval",
                                            "width_preset": params.widths.preset})
    words = tokenize(args.query)
    if not words:
        raise ValidationError("query must not be empty")
    result = retrieve(_load_image(args.image), words, params, config)
    _emit({
        "query": args.query,
        "all_unknown": result.all_unknown,
        "chosen": {"box": list(result.chosen.box), "superclass": result.chosen.superclass,
                   "retrieval_score": result.chosen.retrieval_score},
        "candidates": [
            {"box": list(c.box), "superclass": c.superclass, "retrieval_score": c.retrieval_score}
            for c in result.candidates
        ],
    }, args.out)
    return EXIT_OK


def cmd_serve(args) -> int:
    service = InferenceService()
    caption_path = args.checkpoint_caption or os.environ.get("GOT_CHECKPOINT_CAPTION")
    retrieval_path = args.checkpoint_retrieval or os.environ.get("GOT_CHECKPOINT_RETRIEVAL")
    if not caption_path and not retrieval_path:
        raise ValidationError("serve needs at least one checkpoint "
                              "(--checkpoint-caption/--checkpoint-retrieval or GOT_CHECKPOINT_* env)")
    if caption_path:
        service.load(caption_path, "caption")
    if retrieval_path:
        service.load(retrieval_path, "retrieval")
    port = args.port if args.port is not None else int(os.environ.get("GOT_PORT", "8420"))
    run_server(service, args.host, port)
    return EXIT_OK


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "detect": cmd_detect,
    "retrieve": cmd_retrieve,
    "serve": cmd_serve,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ValidationError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except TrainingDivergedError as e:
        print(f"error: {e}\ndiagnostics: {e.diagnostics}", file=sys.stderr)
        return EXIT_RUNTIME
    except GotError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
