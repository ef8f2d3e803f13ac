"""Command-line surface tying the pipeline together.

Subcommands: extract, fit-whitening, synth, train, embed, evaluate,
attention. Global flags ``--seed``, ``--config``, ``--threads`` come before
the subcommand. ``--config`` names a JSON file whose keys are subcommand
option names (with dashes or underscores); explicit flags override config
values, config values override built-in defaults, and unknown keys are
rejected up front.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import encoder as enc
from . import features, io, retrieval, synth, trainer
from .validation import DataError, MalformedInputError, NumericalError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2; usage errors are exit 1
        raise UsageError(message)


# Per-command built-in defaults. Options parse with default=None so that a
# config file can fill anything the command line leaves unset; REQUIRED lists
# the options that must be set one way or the other.
DEFAULTS: dict[str, dict] = {
    "extract": {"mode": "imac", "whitening": None, "output": None},
    "fit-whitening": {"mode": "imac", "output_dim": 1024, "output": None},
    "synth": {
        "output_dir": None,
        "num_events": 10, "positives_per_event": 3, "num_distractors": 100,
        "frames_min": 16, "frames_max": 48, "dim": 64,
        "noise_sigma": 0.05, "crop_fraction": 0.5,
    },
    "train": {
        "manifest": None, "output_dir": None,
        "heads": 8, "ffn_dim": 2048, "dropout": 0.5, "dim": None,
        "epochs": 40, "batch_size": 64, "negatives": 1024,
        "bank_capacity": 4096, "pad_length": 64, "lr": 1e-5,
        "loss": "circle", "tau": 0.07, "gamma": 256.0, "margin": 0.25,
        "resume": None, "log": None,
    },
    "embed": {"checkpoint": None, "corpus": None,
              "frames_output": None, "video_output": None},
    "evaluate": {"corpus": None, "ground_truth": None,
                 "measure": "chamfer", "output": None},
    "attention": {"checkpoint": None, "corpus": None,
                  "video_id": None, "output": None},
}

REQUIRED: dict[str, tuple[str, ...]] = {
    "extract": ("whitening", "output"),
    "fit-whitening": ("output",),
    "synth": ("output_dir",),
    "train": ("manifest", "output_dir"),
    "embed": ("checkpoint", "corpus", "frames_output", "video_output"),
    "evaluate": ("corpus", "ground_truth"),
    "attention": ("checkpoint", "corpus", "video_id"),
}

_PATH_KEYS = frozenset({
    "whitening", "output", "output_dir", "manifest", "resume", "log",
    "checkpoint", "corpus", "frames_output", "video_output", "ground_truth",
})


def build_parser() -> _Parser:
    parser = _Parser(prog="vidrep", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--seed", type=int, default=0, help="global RNG seed")
    parser.add_argument("--config", type=Path, default=None,
                        help="JSON file with subcommand option defaults")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads for query evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="pool feature maps into a descriptor corpus")
    p.add_argument("inputs", nargs="+", type=Path, help="feature-map files")
    p.add_argument("--mode", choices=features.POOL_MODES, default=None)
    p.add_argument("--whitening", type=Path, default=None)
    p.add_argument("--output", type=Path, default=None)

    p = sub.add_parser("fit-whitening", help="fit a whitening model on pooled frames")
    p.add_argument("inputs", nargs="+", type=Path, help="feature-map files")
    p.add_argument("--mode", choices=features.POOL_MODES, default=None)
    p.add_argument("--output-dim", type=int, default=None)
    p.add_argument("--output", type=Path, default=None)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--output-dir", type=Path, default=None)
    p.add_argument("--num-events", type=int, default=None)
    p.add_argument("--positives-per-event", type=int, default=None)
    p.add_argument("--num-distractors", type=int, default=None)
    p.add_argument("--frames-min", type=int, default=None)
    p.add_argument("--frames-max", type=int, default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--noise-sigma", type=float, default=None)
    p.add_argument("--crop-fraction", type=float, default=None)

    p = sub.add_parser("train", help="train the encoder on a manifest")
    p.add_argument("--manifest", type=Path, default=None)
    p.add_argument("--output-dir", type=Path, default=None)
    p.add_argument("--log", type=Path, default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--ffn-dim", type=int, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--negatives", type=int, default=None)
    p.add_argument("--bank-capacity", type=int, default=None)
    p.add_argument("--pad-length", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--loss", choices=("softmax", "infonce", "circle"), default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--margin", type=float, default=None)
    p.add_argument("--resume", type=Path, default=None)

    p = sub.add_parser("embed", help="encode a corpus with a trained checkpoint")
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--corpus", type=Path, default=None)
    p.add_argument("--frames-output", type=Path, default=None)
    p.add_argument("--video-output", type=Path, default=None)

    p = sub.add_parser("evaluate", help="ranked retrieval evaluation with mAP")
    p.add_argument("--corpus", type=Path, default=None)
    p.add_argument("--ground-truth", type=Path, default=None)
    p.add_argument("--measure", choices=retrieval.MEASURES, default=None)
    p.add_argument("--output", type=Path, default=None)

    p = sub.add_parser("attention", help="per-frame attention response of one video")
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--corpus", type=Path, default=None)
    p.add_argument("--video-id", default=None)
    p.add_argument("--output", type=Path, default=None)
    return parser


def _merge_config(args: argparse.Namespace) -> argparse.Namespace:
    """Resolve option values: explicit flag > config file > built-in default."""
    defaults = dict(DEFAULTS[args.command])
    if args.config is not None:
        payload = io.read_json(args.config)
        if not isinstance(payload, dict):
            raise UsageError("config file must hold a JSON object")
        for key, value in payload.items():
            dest = key.replace("-", "_")
            if dest not in defaults:
                raise UsageError(
                    f"unknown config key {key!r} for command {args.command!r}"
                )
            if dest in _PATH_KEYS and value is not None:
                value = Path(value)
            defaults[dest] = value
    for dest, value in defaults.items():
        if getattr(args, dest, None) is None:
            setattr(args, dest, value)
    for dest in REQUIRED[args.command]:
        if getattr(args, dest) is None:
            flag = "--" + dest.replace("_", "-")
            raise UsageError(f"missing required option {flag}")
    return args


def _load_video_stacks(path: Path) -> list:
    if not path.exists():
        raise DataError(f"feature-map file not found: {path}")
    return io.read_feature_maps(path)


def cmd_extract(args) -> int:
    model = io.read_whitening(args.whitening)
    corpus: dict[str, np.ndarray] = {}
    for path in args.inputs:
        stacks = _load_video_stacks(path)
        corpus[path.stem] = features.frame_descriptor_sequence(stacks, args.mode, model)
    io.write_corpus(args.output, corpus)
    print(f"wrote {len(corpus)} videos to {args.output}")
    return 0


def cmd_fit_whitening(args) -> int:
    pooled = []
    for path in args.inputs:
        for stack in _load_video_stacks(path):
            pooled.append(features.pool_stack(stack, args.mode))
    model = features.fit_whitening(np.stack(pooled), args.output_dim)
    io.write_whitening(args.output, model)
    print(f"fitted whitening {model.input_dim_} -> {model.output_dim_} "
          f"on {len(pooled)} frames; wrote {args.output}")
    return 0


def cmd_synth(args) -> int:
    try:
        spec = synth.SyntheticSpec(
            num_events=args.num_events,
            positives_per_event=args.positives_per_event,
            num_distractors=args.num_distractors,
            frames_range=(args.frames_min, args.frames_max),
            dim=args.dim,
            noise_sigma=args.noise_sigma,
            crop_fraction=args.crop_fraction,
            seed=args.seed,
        )
    except MalformedInputError as err:
        raise UsageError(str(err)) from err
    dataset = synth.generate(spec)
    out = Path(args.output_dir)
    io.write_corpus(out / "corpus.tcad", dataset.sequences)
    io.write_manifest(
        out / "manifest.json",
        dataset.core_pairs,
        dataset.distractors,
        {vid: "corpus.tcad" for vid in dataset.sequences},
    )
    io.write_json(out / "ground_truth.json", dataset.ground_truth)
    print(f"wrote {len(dataset.sequences)} videos "
          f"({len(dataset.core_pairs)} core pairs, "
          f"{len(dataset.distractors)} distractors) to {out}")
    return 0


def cmd_train(args) -> int:
    manifest = io.read_manifest(args.manifest)
    sequences, distractors = io.load_manifest_sequences(manifest)
    dataset = trainer.VideoDataset(
        sequences=sequences, core_pairs=manifest.core_pairs, distractors=distractors
    )
    data_dim = next(iter(sequences.values())).shape[1]
    dim = args.dim if args.dim is not None else data_dim
    if dim != data_dim:
        raise DataError(f"--dim {dim} does not match data dimension {data_dim}")
    try:
        encoder_config = enc.EncoderConfig(
            dim=dim, heads=args.heads, ffn_dim=args.ffn_dim,
            dropout_rate=args.dropout, seed=args.seed,
        )
        config = trainer.TrainingConfig(
            batch_size=args.batch_size, epochs=args.epochs,
            negatives_per_step=args.negatives, bank_capacity=args.bank_capacity,
            pad_length=args.pad_length, base_lr=args.lr, loss=args.loss,
            tau=args.tau, gamma=args.gamma, margin=args.margin, seed=args.seed,
        )
    except MalformedInputError as err:
        raise UsageError(str(err)) from err
    out_dir = Path(args.output_dir)
    log_path = args.log if args.log is not None else out_dir / "train_log.ndjson"
    Path(log_path).parent.mkdir(parents=True, exist_ok=True)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = trainer.fit(dataset, encoder_config, config, out_dir=out_dir,
                         log_path=log_path, resume_from=args.resume)
    if result.history:
        first = result.history[0]["loss"]
        last = result.history[-1]["loss"]
        print(f"trained {len(result.history)} steps; loss {first:.4f} -> {last:.4f}")
    else:
        print("no training steps run (epochs=0); checkpoint equals initialization")
    print(f"final checkpoint: {result.final_checkpoint}")
    return 0


def cmd_embed(args) -> int:
    config, params = io.read_checkpoint(args.checkpoint)
    corpus = io.read_corpus(args.corpus)
    refined_corpus: dict[str, np.ndarray] = {}
    video_corpus: dict[str, np.ndarray] = {}
    for vid, seq in corpus.items():
        if seq.shape[1] != config.dim:
            raise DataError(
                f"video {vid!r} has dimension {seq.shape[1]}, checkpoint expects {config.dim}"
            )
        refined = enc.encode_frames(params, seq, heads=config.heads)
        refined_corpus[vid] = refined / np.linalg.norm(refined, axis=1, keepdims=True)
        video_corpus[vid] = enc.aggregate_video(refined)[None, :]
    io.write_corpus(args.frames_output, refined_corpus)
    io.write_corpus(args.video_output, video_corpus)
    print(f"embedded {len(corpus)} videos -> {args.frames_output}, {args.video_output}")
    return 0


def cmd_evaluate(args) -> int:
    corpus = io.read_corpus(args.corpus)
    ground_truth = io.read_json(args.ground_truth)
    report = retrieval.rank_and_score(
        corpus, sorted(ground_truth), ground_truth, args.measure,
        threads=args.threads,
    )
    payload = report.to_dict()
    if args.output is not None:
        io.write_json(args.output, payload)
        print(f"wrote report to {args.output}")
    else:
        json.dump(payload, sys.stdout, indent=2, sort_keys=True)
        print()
    for tier, value in report.map_per_tier.items():
        print(f"mAP[{tier}] = {value:.4f}")
    return 0


def cmd_attention(args) -> int:
    config, params = io.read_checkpoint(args.checkpoint)
    corpus = io.read_corpus(args.corpus)
    if args.video_id not in corpus:
        raise DataError(f"video id {args.video_id!r} not found in corpus")
    responses = enc.mean_attention_response(
        params, corpus[args.video_id], heads=config.heads
    )
    payload = {"video_id": args.video_id, "responses": [float(r) for r in responses]}
    if args.output is not None:
        io.write_json(args.output, payload)
        print(f"wrote attention responses to {args.output}")
    else:
        json.dump(payload, sys.stdout, indent=2)
        print()
    return 0


COMMANDS = {
    "extract": cmd_extract,
    "fit-whitening": cmd_fit_whitening,
    "synth": cmd_synth,
    "train": cmd_train,
    "embed": cmd_embed,
    "evaluate": cmd_evaluate,
    "attention": cmd_attention,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args = _merge_config(args)
        return COMMANDS[args.command](args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except FileNotFoundError as err:
        print(f"data error: {err}", file=sys.stderr)
        return 2
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return 2
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
