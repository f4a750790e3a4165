"""Command-line entry points: synth, train, embed, match, eval."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from . import embedfile
from .errors import ConfigError, IrisStackError, SampleLookupError
from .matching import cosine_similarity
from .synth import Perturbations, SynthSpec, generate, load_index, read_index_file
from .train import RunConfig, embed, evaluate_run, train



def _thread_limit():
    raw = os.environ.get("CLRE_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"CLRE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"CLRE_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def cmd_synth(args) -> int:
    p = Perturbations(
        rotation_px=args.rotation_px,
        blur_sigma=args.blur_sigma,
        reflection_prob=args.reflection_prob,
        occlusion_frac=args.occlusion_frac,
    )
    index = generate(SynthSpec(args.subjects, args.samples, args.seed, p), args.out)
    print(f"wrote {len(index.keys())} samples of {len(index.subjects)} subjects to {args.out}")
    return 0


def resolve_run_config(args) -> RunConfig:
    d = RunConfig.load(args.config).to_dict() if args.config else RunConfig().to_dict()
    overrides = {
        "dataset": args.dataset,
        "out_dir": args.out,
        "preset": args.preset,
        "cycles": args.cycles,
        "warmup_epochs": args.warmup_epochs,
        "triplet_margin": args.triplet_margin,
        "arcface_scale": args.arcface_scale,
        "arcface_margin": args.arcface_margin,
        "classes_per_batch": args.classes_per_batch,
        "samples_per_class": args.samples_per_class,
        "train_split": args.train_split,
        "seed": args.seed,
    }
    d.update({k: v for k, v in overrides.items() if v is not None})
    if args.phase_length is not None:
        d["phase_lengths"] = args.phase_length if len(args.phase_length) > 1 else args.phase_length[0]
    for key in ("kind", "lr", "momentum", "schedule"):
        value = getattr(args, f"opt_{key}")
        if value is not None:
            d["optimizer"][key] = value
    if args.input_shape is not None:
        d["backbone"] = dict(d["backbone"], input_shape=list(args.input_shape))
    if args.backbone_json is not None:
        try:
            extra = json.loads(args.backbone_json)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--backbone-json is not valid JSON: {exc}") from None
        if not isinstance(extra, dict):
            raise ConfigError("--backbone-json must be a JSON object")
        d["backbone"] = dict(d["backbone"], **extra)
    return RunConfig.from_dict(d)


def cmd_train(args) -> int:
    cfg = resolve_run_config(args)
    final = train(cfg)
    print(f"checkpoint {final}; log {Path(cfg.out_dir) / 'train_log.jsonl'}")
    return 0


def cmd_embed(args) -> int:
    keys, _ = embed(args.checkpoint, args.dataset, args.out)
    print(f"wrote {len(keys)} embeddings to {args.out}")
    return 0


def cmd_match(args) -> int:
    vectors = embedfile.as_mapping(args.embeddings)
    for sid in (args.a, args.b):
        if sid not in vectors:
            raise SampleLookupError(f"no embedding for sample {sid!r} in {args.embeddings}")
    print(f"{cosine_similarity(vectors[args.a], vectors[args.b]):.6f}")
    return 0


def cmd_eval(args) -> int:
    # a directory is scanned and validated; an index.json file is trusted as-is
    path = Path(args.index)
    index = load_index(path) if path.is_dir() else read_index_file(path)
    exclude = [s for s in (args.exclude_subjects or "").split(",") if s]
    report = evaluate_run(args.embeddings, index, args.out, exclude, scores_csv=not args.no_scores_csv)
    print(json.dumps(report, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="irisstack", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic iris dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--subjects", type=int, default=8)
    s.add_argument("--samples", type=int, default=6)
    s.add_argument("--seed", type=int, default=0)
    defaults = Perturbations()
    s.add_argument("--rotation-px", type=int, default=defaults.rotation_px)
    s.add_argument("--blur-sigma", type=float, default=defaults.blur_sigma)
    s.add_argument("--reflection-prob", type=float, default=defaults.reflection_prob)
    s.add_argument("--occlusion-frac", type=float, default=defaults.occlusion_frac)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train the backbone with the triplet/ArcFace curriculum")
    t.add_argument("--config", help="run config JSON; flags override its fields")
    t.add_argument("--dataset")
    t.add_argument("--out")
    t.add_argument("--preset", choices=["desk", "wide"])
    t.add_argument("--phase-length", type=int, nargs="+", help="epochs per phase (one value or one per phase)")
    t.add_argument("--cycles", type=int)
    t.add_argument("--warmup-epochs", type=int)
    t.add_argument("--triplet-margin", type=float)
    t.add_argument("--arcface-scale", type=float)
    t.add_argument("--arcface-margin", type=float)
    t.add_argument("--classes-per-batch", type=int)
    t.add_argument("--samples-per-class", type=int)
    t.add_argument("--train-split", choices=["gallery", "all"])
    t.add_argument("--seed", type=int)
    t.add_argument("--optimizer", dest="opt_kind", choices=["adam", "sgd-momentum"])
    t.add_argument("--lr", dest="opt_lr", type=float)
    t.add_argument("--momentum", dest="opt_momentum", type=float)
    t.add_argument("--lr-schedule", dest="opt_schedule", choices=["constant", "cosine"])
    t.add_argument("--input-shape", type=int, nargs=3, metavar=("D", "H", "W"))
    t.add_argument("--backbone-json", help="JSON object of backbone config overrides")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("embed", help="embed every sample of a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_embed)

    m = sub.add_parser("match", help="cosine score of two embedded samples")
    m.add_argument("--embeddings", required=True)
    m.add_argument("a")
    m.add_argument("b")
    m.set_defaults(func=cmd_match)

    v = sub.add_parser("eval", help="verification and identification metrics over the gallery/probe split")
    v.add_argument("--embeddings", required=True)
    v.add_argument("--index", required=True, help="dataset directory or index.json")
    v.add_argument("--out", required=True)
    v.add_argument("--exclude-subjects", help="comma-separated training identities (open-set protocol)")
    v.add_argument("--no-scores-csv", action="store_true", help="skip the per-pair scores file")
    v.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except (IrisStackError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
