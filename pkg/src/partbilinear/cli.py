"""Command line entry point: ``partbilinear <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .core import Split
from .errors import (
    ConfigurationError,
    CorruptionError,
    DegenerateEmbeddingError,
    DimensionError,
    EmptyInputError,
    FormatError,
    MalformedBatchError,
    NumericFailureError,
    ValidationError,
)
from .evaluation import DEFAULT_RANKS, LabeledEmbeddings, evaluate, evaluate_rankings
from .matching import rank_all
from .sketch import DEFAULT_SKETCH_DIM, SketchParams
from .synthgen import SynthConfig, generate
from .training import LinearHeads, MODES, TrainConfig, embed_arrays, train
from .viz import viz_export

logger = logging.getLogger("partbilinear")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DATA_ERRORS = (FormatError, CorruptionError, ValidationError, DimensionError, EmptyInputError,
               MalformedBatchError, ConfigurationError, OSError, KeyError)
NUMERIC_ERRORS = (NumericFailureError, DegenerateEmbeddingError, FloatingPointError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {value}")
    return value


def _nonneg_int(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _ranks(text):
    try:
        ranks = tuple(int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad rank list {text!r}") from None
    if not ranks or min(ranks) < 1:
        raise argparse.ArgumentTypeError("ranks must be positive")
    return ranks


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="partbilinear", description="Part-aligned bilinear embeddings for re-identification.")
    common = _Parser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    _add = sub.add_parser

    def add_parser(name, **kw):
        return _add(name, parents=[common], **kw)

    sub.add_parser = add_parser

    p = sub.add_parser("synth", help="generate a synthetic misalignment dataset")
    p.add_argument("--out", required=True, help="output directory")
    d = SynthConfig()
    p.add_argument("--identities", type=_positive_int, default=d.num_identities)
    p.add_argument("--images", type=_positive_int, default=d.images_per_identity)
    p.add_argument("--height", type=_positive_int, default=d.height)
    p.add_argument("--width", type=_positive_int, default=d.width)
    p.add_argument("--parts", type=_positive_int, default=d.num_parts)
    p.add_argument("--channels", type=_positive_int, default=d.appearance_channels)
    p.add_argument("--jitter", type=_nonneg_int, default=d.jitter)
    p.add_argument("--noise", type=float, default=d.noise)
    p.add_argument("--distractors", type=float, default=d.distractor_fraction)
    p.add_argument("--cameras", type=_positive_int, default=d.cameras)
    p.add_argument("--palette", type=_positive_int, default=d.palette_size)
    p.add_argument("--seed", type=int, default=0)

    for name, helptext in (("pool", "exact bilinear embeddings"), ("sketch", "compact (sketched) embeddings")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--manifest", required=True)
        p.add_argument("--out", required=True, help="embeddings file (.npz)")
        p.add_argument("--heads", help="trained heads (JSON); raw maps are pooled directly when omitted")
        p.add_argument("--nonneg-parts", action="store_true")
        if name == "sketch":
            p.add_argument("--dim", type=_positive_int,
                           help=f"sketch dimension (default: heads' config, else {DEFAULT_SKETCH_DIM})")
            p.add_argument("--seed", type=int, help="sketch seed (default: heads' config, else 0)")
        else:
            p.add_argument("--mode", choices=("exact", "gap", "concat"),
                           help="aggregation; defaults to the heads' training mode")

    p = sub.add_parser("train", help="train linear heads with the triplet loss")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="JSON training config")
    p.add_argument("--iters", type=_nonneg_int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--nonneg-parts", action="store_true")
    p.add_argument("--out", required=True, help="heads file (JSON)")
    p.add_argument("--history", help="loss history (CSV: iteration, loss, lr)")

    p = sub.add_parser("match", help="rank gallery entries for every query")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True, help="rankings file (TSV)")

    p = sub.add_parser("eval", help="CMC / mAP report")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--rankings")
    src.add_argument("--embeddings")
    p.add_argument("--manifest", help="labels for --rankings")
    p.add_argument("--ranks", type=_ranks, default=DEFAULT_RANKS)
    p.add_argument("--out", help="report file (JSON); stdout when omitted")

    p = sub.add_parser("viz", help="render maps as PCA-colored images")
    p.add_argument("maps", nargs="+", help="feature map files")
    p.add_argument("--out", required=True, help="output directory")
    return parser


def _read_heads(path):
    with open(path) as fh:
        blob = json.load(fh)
    return LinearHeads.from_dict(blob["heads"]), blob.get("config", {})


def _embed_manifest(args, sketched: bool):
    manifest = io.read_manifest(args.manifest)
    samples = io.load_samples(manifest)
    if not samples:
        raise EmptyInputError("manifest is empty")
    RA = np.stack([s.appearance_map.descriptors() for s in samples])
    RP = np.stack([s.part_map.descriptors() for s in samples])
    sids = tuple(s.sample_id for s in samples)
    if args.heads:
        heads, cfg = _read_heads(args.heads)
        if args.nonneg_parts:
            heads = heads.replace(nonneg_parts=True)
    else:
        # Without heads the stored maps are pooled as they are.
        heads = LinearHeads(np.eye(RA.shape[-1]), np.zeros(RA.shape[-1]),
                            np.eye(RP.shape[-1]), np.zeros(RP.shape[-1]), args.nonneg_parts)
        cfg = {}
    sketch = None
    if sketched:
        mode = "sketched"
        dim = args.dim or cfg.get("sketch_dim", DEFAULT_SKETCH_DIM)
        seed = args.seed if args.seed is not None else cfg.get("sketch_seed", 0)
        sketch = SketchParams.from_seed(heads.c_a, heads.c_p, dim, seed)
    else:
        mode = args.mode or cfg.get("mode", "exact")
        if mode == "sketched":
            raise ConfigurationError("heads were trained with sketching; use the `sketch` subcommand")
    F = embed_arrays(RA, RP, heads, mode, sketch, normalized=False)
    norms = np.linalg.norm(F, axis=1, keepdims=True)
    for i in np.flatnonzero(norms.ravel() == 0):
        logger.warning("sample %s has a zero embedding; it will rank last everywhere", sids[i])
    # Zero rows stay zero: ranking scores them -inf against everything.
    F = np.divide(F, norms, out=np.zeros_like(F), where=norms > 0)
    emb = LabeledEmbeddings(F, [s.identity for s in samples], [s.camera for s in samples], sids)
    layout = f"sketched:{sketch.d}" if sketched else mode
    io.save_embeddings(args.out, emb, layout, [e.split.value for e in manifest])
    logger.info("wrote %d embeddings of length %d to %s", len(emb), F.shape[1], args.out)


def _split_embeddings(path):
    emb, splits, _ = io.load_embeddings(path)
    splits = np.array(splits)
    q = np.flatnonzero(splits == Split.QUERY.value)
    g = np.flatnonzero(splits == Split.GALLERY.value)
    if q.size == 0 or g.size == 0:
        raise EmptyInputError(f"{path}: needs both query and gallery entries")
    return emb.take(q), emb.take(g)


def cmd_synth(args):
    cfg = SynthConfig(
        num_identities=args.identities, images_per_identity=args.images, height=args.height,
        width=args.width, num_parts=args.parts, appearance_channels=args.channels,
        jitter=args.jitter, noise=args.noise, distractor_fraction=args.distractors,
        cameras=args.cameras, seed=args.seed, palette_size=args.palette,
    )
    ds = generate(cfg)
    io.write_dataset(ds.samples, ds.splits, args.out)
    logger.info("wrote %d samples to %s", len(ds.samples), args.out)


def cmd_train(args):
    cfg = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    overrides = {}
    if args.mode:
        overrides["mode"] = args.mode
    if args.nonneg_parts:
        overrides["nonneg_parts"] = True
    if overrides:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), **overrides})
    manifest = io.read_manifest(args.manifest).subset(Split.TRAIN)
    samples = io.load_samples(manifest)
    if not samples:
        raise EmptyInputError("manifest has no training samples")
    RA = np.stack([s.appearance_map.descriptors() for s in samples])
    RP = np.stack([s.part_map.descriptors() for s in samples])
    result = train(RA, RP, [s.identity for s in samples], cfg, args.iters, args.seed)
    with open(args.out, "w") as fh:
        json.dump({"heads": result.heads.to_dict(), "config": cfg.to_dict()}, fh)
    if args.history:
        io.write_loss_history(result.history, args.history)
    if result.history:
        logger.info("loss %.4f -> %.4f over %d iterations",
                    result.history[0][1], result.history[-1][1], len(result.history))


def cmd_match(args):
    q, g = _split_embeddings(args.embeddings)
    io.write_rankings(rank_all(q.features, q.sample_ids, g.features, g.sample_ids), args.out)


def cmd_eval(args):
    if args.rankings:
        if not args.manifest:
            raise UsageError("eval --rankings needs --manifest for labels")
        labels = {e.sample_id: (e.identity, e.camera) for e in io.read_manifest(args.manifest)}
        report = evaluate_rankings(io.read_rankings(args.rankings), labels, args.ranks)
    else:
        q, g = _split_embeddings(args.embeddings)
        report = evaluate(q, g, args.ranks)
    if args.out:
        io.write_report(report, args.out)
    else:
        print(json.dumps(report.as_dict(), indent=2))


def cmd_viz(args):
    maps = [io.read_feature_file(p) for p in args.maps]
    paths = viz_export(maps, args.out, [Path(p).stem for p in args.maps])
    logger.info("wrote %d images to %s", len(paths), args.out)


COMMANDS = {
    "synth": cmd_synth,
    "pool": lambda a: _embed_manifest(a, sketched=False),
    "sketch": lambda a: _embed_manifest(a, sketched=True),
    "train": cmd_train,
    "match": cmd_match,
    "eval": cmd_eval,
    "viz": cmd_viz,
}


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        if not argv:
            raise UsageError(parser.format_help())
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        COMMANDS[args.command](args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except NUMERIC_ERRORS as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
