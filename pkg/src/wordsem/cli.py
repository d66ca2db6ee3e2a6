"""Command-line interface binding all modules.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
Every run echoes its resolved configuration to stderr before executing.
"""

from __future__ import annotations

import argparse
import difflib
import json
import sys
from pathlib import Path

from . import embed, harness, taxonomy, tinynet, wordgen
from .errors import (
    ConfigError,
    FormatError,
    GraphLookupError,
    IntegrityError,
    MetricUndefinedError,
    NumericError,
    ParseError,
    RenderError,
    UsageError,
    WordsemError,
)

DATA_ERRORS = (
    ParseError, IntegrityError, FormatError, GraphLookupError,
    ConfigError, RenderError, MetricUndefinedError, FileNotFoundError,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _echo(config: dict):
    print("resolved config: " + json.dumps(config, sort_keys=True, default=str), file=sys.stderr)


def _guard_overwrite(path: Path, force: bool):
    if path.exists() and not force:
        raise ConfigError(f"{path} exists; pass --force to overwrite")


def _parse_canvas(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise UsageError(f"canvas must look like 16x48, got {text!r}") from None


def _table(rows, headers):
    if sys.stdout.isatty():
        widths = [max(len(str(r[i])) for r in [headers] + rows) for i in range(len(headers))]
        for r in [headers] + rows:
            print("  ".join(str(v).ljust(w) for v, w in zip(r, widths)))
    else:
        for r in [headers] + rows:
            print("\t".join(str(v) for v in r))


def _load_vocab(path) -> taxonomy.ConceptVocabulary:
    with open(path, "r", encoding="utf-8") as f:
        return taxonomy.ConceptVocabulary.from_json(f.read())


def _load_data_dir(path) -> wordgen.Dataset:
    d = Path(path)
    return wordgen.load_dataset(d / "manifest.jsonl", d / "images.bin")


# ---------------------------------------------------------------------------
# subcommands

def cmd_mine(args) -> int:
    out = Path(args.out)
    _guard_overwrite(out, args.force)
    _echo(vars(args))
    if args.mini:
        with open(args.mini, "r", encoding="utf-8") as f:
            graph = taxonomy.load_mini_taxonomy(f)
    else:
        if not (args.index and args.data):
            raise UsageError("mine needs either --mini or both --index and --data")
        with open(args.index, "rb") as idx, open(args.data, "rb") as dat:
            graph = taxonomy.parse_wndb(idx, dat)
    with open(args.words, "r", encoding="utf-8") as f:
        words = [line.strip() for line in f if line.strip()]
    level = args.level + args.depth_offset
    vocab = taxonomy.build_vocabulary(graph, words, level, args.topk)
    with open(out, "w", encoding="utf-8") as f:
        f.write(vocab.to_json())
    print(f"wrote {out}: K={vocab.k}, {len(vocab.word_annotations)} annotated words")
    return 0


def cmd_synth(args) -> int:
    out = Path(args.out)
    manifest, raster = out / "manifest.jsonl", out / "images.bin"
    for p in (manifest, raster):
        _guard_overwrite(p, args.force)
    _echo(vars(args))
    vocab = _load_vocab(args.vocab)
    config = wordgen.DistortionConfig() if not args.no_distortion else wordgen.DistortionConfig.none()
    dataset = wordgen.build_dataset(vocab, args.per_word, _parse_canvas(args.canvas), config, args.seed)
    out.mkdir(parents=True, exist_ok=True)
    wordgen.save_dataset(dataset, manifest, raster)
    print(f"wrote {len(dataset)} images to {out}")
    return 0


def cmd_train(args) -> int:
    out = Path(args.out)
    _guard_overwrite(out / "checkpoint.bin", args.force)
    vocab = _load_vocab(args.vocab)
    dataset = _load_data_dir(args.data)
    cfg = tinynet.TrainConfig(
        learning_rate=args.lr,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        epochs=args.epochs,
        seed=args.seed,
    )
    _echo({"train": cfg.to_dict(), "preset": args.preset, "vocab": args.vocab, "data": args.data})
    if dataset.header["per_word"] > args.val_replicas:
        train_ds, _ = dataset.split_by_replica(args.val_replicas)
    else:
        train_ds = dataset
    specs, input_shape = tinynet.get_preset(args.preset, vocab.k)
    if tuple(dataset.canvas) != input_shape[1:]:
        raise ConfigError(
            f"dataset canvas {dataset.canvas} does not match preset input {input_shape[1:]}"
        )
    net = tinynet.init(specs, input_shape, seed=wordgen.mix_seed(args.seed, 0x1237))
    harness.run_training(net, train_ds, cfg, out)
    print(f"wrote {out / 'checkpoint.bin'}")
    return 0


def _eval_common(args, crop: bool) -> int:
    vocab = _load_vocab(args.vocab)
    dataset = _load_data_dir(args.data)
    net = tinynet.load_checkpoint(args.checkpoint)
    _echo(vars(args))
    if dataset.header["per_word"] > args.val_replicas:
        _, eval_ds = dataset.split_by_replica(args.val_replicas)
    else:
        eval_ds = dataset
    out = Path(args.out)
    if crop:
        summary = harness.run_crop_robustness(net, eval_ds, vocab, args.max_crop, args.seed, out)
        rows = [[k, f"{v:.4f}"] for k, v in summary["ratios"].items()]
        _table(rows, ["metric", "cropped/clean"])
    else:
        tasks = tuple(args.tasks.split(",")) if args.tasks else harness.DEFAULT_TASKS
        summary = harness.run_eval(net, eval_ds, vocab, tasks, out, args.image_queries, args.seed)
        rows = [[k, f"{v:.4f}"] for k, v in summary.items() if isinstance(v, float)]
        _table(rows, ["metric", "value"])
    return 0


def cmd_eval(args) -> int:
    return _eval_common(args, crop=False)


def cmd_crop_eval(args) -> int:
    return _eval_common(args, crop=True)


def cmd_zeroshot(args) -> int:
    if args.spec:
        with open(args.spec, "r", encoding="utf-8") as f:
            spec = harness.ExperimentSpec.from_json(f.read())
    else:
        spec = harness.ExperimentSpec.desk_smoke(seed=args.seed, epochs=args.epochs)
    _echo(spec.resolved())
    summary = harness.run_zero_shot(spec, Path(args.out))
    rows = [
        ["unseen image-to-concept mAP", f"{summary['unseen_image_to_concept_map']:.4f}"],
        ["unseen concept-to-image mAP", f"{summary['unseen_concept_to_image_map']:.4f}"],
        ["seen image-to-concept mAP", f"{summary['seen_image_to_concept_map']:.4f}"],
        ["chance image-to-concept mAP", f"{summary['chance_image_to_concept_map']:.4f}"],
    ]
    _table(rows, ["metric", "value"])
    return 0


def cmd_finetune(args) -> int:
    old_vocab = _load_vocab(args.vocab)
    new_vocab = _load_vocab(args.vocab_new)
    dataset = _load_data_dir(args.data)
    net = tinynet.load_checkpoint(args.checkpoint)
    cfg = tinynet.TrainConfig(epochs=args.epochs, seed=args.seed)
    _echo(vars(args))
    widened, summary = harness.run_finetune_k(net, old_vocab, new_vocab, dataset, cfg, Path(args.out))
    tinynet.save_checkpoint(widened, Path(args.out) / "checkpoint.bin")
    _table(
        [
            ["pre-finetune mAP (original K)", f"{summary['pre_finetune_map_original_k']:.4f}"],
            ["post-finetune mAP (original K)", f"{summary['post_finetune_map_original_k']:.4f}"],
        ],
        ["metric", "value"],
    )
    return 0


def _parse_expression(text: str) -> tuple[list[str], list[str]]:
    tokens = text.replace("+", " + ").replace("-", " - ").split()
    add, sub, sign = [], [], "+"
    expect_name = True
    for tok in tokens:
        if tok in ("+", "-"):
            if expect_name:
                raise UsageError(f"misplaced {tok!r} in expression {text!r}")
            sign, expect_name = tok, True
        else:
            (add if sign == "+" else sub).append(tok)
            expect_name = False
    if expect_name:
        raise UsageError(f"expression {text!r} ends with an operator")
    seen = set()
    for name in add + sub:
        if name in seen:
            raise UsageError(f"duplicate concept {name!r} in expression")
        seen.add(name)
    return add, sub


def _resolve_concept(vocab: taxonomy.ConceptVocabulary, name: str) -> int:
    try:
        return vocab.concept_index(name)
    except GraphLookupError:
        labels = [c["label"] for c in vocab.concepts]
        near = difflib.get_close_matches(name, labels, n=3)
        hint = f"; nearest: {', '.join(near)}" if near else ""
        raise GraphLookupError(f"unknown concept {name!r}{hint}") from None


def cmd_query(args) -> int:
    vocab = _load_vocab(args.vocab)
    net = tinynet.load_checkpoint(args.checkpoint)
    _echo(vars(args))
    if args.expr:
        if not args.data:
            raise UsageError("--expr queries need --data with the image corpus")
        add_names, sub_names = _parse_expression(args.expr)
        add = [_resolve_concept(vocab, n) for n in add_names]
        sub = [_resolve_concept(vocab, n) for n in sub_names]
        dataset = _load_data_dir(args.data)
        space = harness.build_space(net, dataset)
        ranked = embed.concept_arithmetic_query(space, add, sub)
        word_of = {rec["id"]: rec["word"] for rec in dataset.records}
        rows = [[i, word_of[i], f"{s:.4f}"] for i, s in ranked.top(args.top)]
        _table(rows, ["image", "word", "score"])
        return 0
    if args.image:
        images = wordgen.load_raster(args.image)
        res = tinynet.forward(net, images[:1], mode="eval")
        if args.task != "image-to-concept":
            raise UsageError(f"single-image queries support image-to-concept only, got {args.task!r}")
        ranked = embed.rank_items(range(net.k), res.scores[0], [])
        rows = [[vocab.concepts[i]["label"], f"{s:.4f}"] for i, s in ranked.top(args.top)]
        _table(rows, ["concept", "score"])
        return 0
    raise UsageError("query needs --image or --expr")


def build_parser() -> _Parser:
    parser = _Parser(prog="wordsem", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mine", help="mine a concept vocabulary from a taxonomy")
    p.add_argument("--index", help="WNDB index.noun path")
    p.add_argument("--data", help="WNDB data.noun path")
    p.add_argument("--mini", help="mini taxonomy fixture path (instead of WNDB)")
    p.add_argument("--level", type=int, required=True)
    p.add_argument("--topk", type=int, required=True)
    p.add_argument("--words", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--depth-offset", type=int, default=0,
                   help="added to --level for other root-depth conventions")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("synth", help="render a seeded synthetic dataset")
    p.add_argument("--vocab", required=True)
    p.add_argument("--per-word", type=int, default=20)
    p.add_argument("--canvas", default="16x48")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-distortion", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the ranking network")
    p.add_argument("--vocab", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.007)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-replicas", type=int, default=4)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    for name, fn in (("eval", cmd_eval), ("crop-eval", cmd_crop_eval)):
        p = sub.add_parser(name)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--vocab", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--val-replicas", type=int, default=4)
        p.add_argument("--image-queries", type=int, default=200)
        p.add_argument("--seed", type=int, default=0)
        if name == "eval":
            p.add_argument("--tasks", help="comma-separated task list")
        else:
            p.add_argument("--max-crop", type=float, default=0.2)
        p.set_defaults(func=fn)

    p = sub.add_parser("zeroshot", help="disjoint-word split protocol")
    p.add_argument("--spec", help="experiment spec JSON; defaults to the desk configuration")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_zeroshot)

    p = sub.add_parser("finetune", help="widen the scoring layer to a larger vocabulary")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True, help="vocabulary the checkpoint was trained on")
    p.add_argument("--vocab-new", required=True)
    p.add_argument("--data", required=True, help="dataset rendered from the new vocabulary")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("query", help="query a trained model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--image", help="single-image raster file")
    p.add_argument("--expr", help='concept expression, e.g. "vertebrate - mammal"')
    p.add_argument("--data", help="image corpus directory for --expr queries")
    p.add_argument("--task", default="image-to-concept")
    p.add_argument("--top", type=int, default=5)
    p.set_defaults(func=cmd_query)

    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericError,) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except WordsemError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
