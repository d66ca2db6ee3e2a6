"""End-to-end experiment orchestration.

Wires taxonomy mining, image synthesis, ranking-loss training and the three
retrieval evaluations into reproducible runs; every number in a report is a
pure function of (spec, seed). Reports land in a directory as report.json,
metrics.csv, train_log.jsonl and rendered figures.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import embed, plots, taxonomy, tinynet, warp, wordgen
from .errors import ConfigError, NumericError, ParameterError
from .taxonomy import ConceptVocabulary
from .tinynet import Network, TrainConfig
from .wordgen import Dataset, DistortionConfig, mix_seed

DEFAULT_TASKS = ("image-to-concept", "concept-to-image", "image-to-image")


def fixture_path(name: str) -> Path:
    return Path(resources.files("wordsem.fixtures") / name)


@dataclass
class ExperimentSpec:
    """Everything needed to reproduce a run, JSON-serializable."""

    taxonomy: dict  # {"mode": "mini", "fixture": path} | {"mode": "wndb", "index": ..., "data": ...}
    words: list[str] | str  # inline list or a path to one-word-per-line text
    level: int
    topk: int
    per_word: int = 20
    canvas: tuple[int, int] = (16, 48)
    distortion: DistortionConfig = field(default_factory=DistortionConfig)
    preset: str = "desk"
    train: TrainConfig = field(default_factory=TrainConfig)
    tasks: tuple[str, ...] = DEFAULT_TASKS
    seed: int = 0
    val_replicas: int = 4
    image_queries: int = 200

    _KEYS = {
        "taxonomy", "words", "level", "topk", "per_word", "canvas", "distortion",
        "preset", "train", "tasks", "seed", "val_replicas", "image_queries",
    }

    @classmethod
    def from_json(cls, text: str) -> "ExperimentSpec":
        payload = json.loads(text)
        unknown = set(payload) - cls._KEYS
        if unknown:
            raise ConfigError(f"unknown spec keys: {sorted(unknown)}")
        for required in ("taxonomy", "words", "level", "topk"):
            if required not in payload:
                raise ConfigError(f"spec is missing required key {required!r}")
        kwargs = dict(payload)
        if "canvas" in kwargs:
            kwargs["canvas"] = tuple(kwargs["canvas"])
        if "distortion" in kwargs:
            kwargs["distortion"] = DistortionConfig.from_dict(kwargs["distortion"])
        if "train" in kwargs:
            kwargs["train"] = TrainConfig(**kwargs["train"])
        if "tasks" in kwargs:
            kwargs["tasks"] = tuple(kwargs["tasks"])
        return cls(**kwargs)

    def resolved(self) -> dict:
        return {
            "taxonomy": self.taxonomy,
            "words": self.words,
            "level": self.level,
            "topk": self.topk,
            "per_word": self.per_word,
            "canvas": list(self.canvas),
            "distortion": self.distortion.to_dict(),
            "preset": self.preset,
            "train": self.train.to_dict(),
            "tasks": list(self.tasks),
            "seed": self.seed,
            "val_replicas": self.val_replicas,
            "image_queries": self.image_queries,
        }

    def load_graph(self) -> taxonomy.SynsetGraph:
        mode = self.taxonomy.get("mode")
        if mode == "mini":
            with open(self.taxonomy["fixture"], "r", encoding="utf-8") as f:
                return taxonomy.load_mini_taxonomy(f)
        if mode == "wndb":
            with open(self.taxonomy["index"], "rb") as idx, open(self.taxonomy["data"], "rb") as dat:
                return taxonomy.parse_wndb(idx, dat)
        raise ConfigError(f"taxonomy mode must be mini or wndb, got {mode!r}")

    def load_words(self) -> list[str]:
        if isinstance(self.words, str):
            with open(self.words, "r", encoding="utf-8") as f:
                return [line.strip() for line in f if line.strip()]
        return list(self.words)

    def build_vocabulary(self) -> ConceptVocabulary:
        graph = self.load_graph()
        return taxonomy.build_vocabulary(graph, self.load_words(), self.level, self.topk)

    def build_dataset(self, vocab: ConceptVocabulary) -> Dataset:
        return wordgen.build_dataset(
            vocab, self.per_word, self.canvas, self.distortion, mix_seed(self.seed, 0xDA7A)
        )

    @classmethod
    def desk_smoke(cls, seed: int = 7, epochs: int = 30) -> "ExperimentSpec":
        """The built-in 60-word / 8-concept configuration."""
        return cls(
            taxonomy={"mode": "mini", "fixture": str(fixture_path("desk_taxonomy.txt"))},
            words=str(fixture_path("desk_words.txt")),
            level=2,
            topk=8,
            per_word=20,
            train=TrainConfig(epochs=epochs, seed=seed),
            seed=seed,
        )


# ---------------------------------------------------------------------------
# training

def run_training(
    net: Network,
    dataset: Dataset,
    cfg: TrainConfig,
    out_dir: Path | None = None,
) -> tuple[Network, list[dict]]:
    """Momentum-SGD over shuffled minibatches, one sampled ranking update per
    image per epoch. Returns the trained network and the per-epoch log."""
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    n = len(dataset)
    if n == 0:
        raise ConfigError("training dataset is empty")
    velocity = tinynet.new_velocity(net)
    lr = cfg.learning_rate
    train_log: list[dict] = []
    for epoch in range(cfg.epochs):
        if epoch == cfg.decay_epoch() and epoch > 0:
            lr *= cfg.lr_decay_factor
            if out_dir is not None:
                tinynet.save_checkpoint(net, out_dir / f"checkpoint_epoch{epoch}.bin")
        rng = np.random.default_rng(np.random.PCG64(mix_seed(cfg.seed, 0x5F0F, epoch)))
        order = rng.permutation(n)
        losses, tries, zeros = [], [], 0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            batch = dataset.images[idx]
            res = tinynet.forward(
                net, batch, mode="train",
                seed=mix_seed(cfg.seed, 0xD0, epoch, step),
                use_dropout=cfg.dropout_enabled,
            )
            dY = np.zeros_like(res.scores, dtype=np.float64)
            for row, di in enumerate(idx):
                rec = dataset.records[di]
                update = warp.sample_update(
                    res.scores[row].astype(np.float64),
                    rec["concept_ids"],
                    seed=mix_seed(cfg.seed, 0x3A, epoch, rec["id"]),
                )
                dY[row] = update.grad
                losses.append(update.loss)
                tries.append(update.tries)
                if update.negative is None:
                    zeros += 1
            if not np.isfinite(np.sum(losses[-len(idx):])):
                raise NumericError(f"non-finite loss at epoch {epoch}, step {step}")
            grads, _ = tinynet.backward(net, res.caches, dY / len(idx))
            tinynet.sgd_step(net, grads, cfg, velocity, lr=lr)
        train_log.append(
            {
                "epoch": epoch,
                "lr": lr,
                "mean_loss": float(np.mean(losses)),
                "mean_tries": float(np.mean(tries)),
                "zero_update_fraction": zeros / n,
            }
        )
    if out_dir is not None:
        tinynet.save_checkpoint(net, out_dir / "checkpoint.bin")
        with open(out_dir / "train_log.jsonl", "w", encoding="utf-8") as f:
            for rec in train_log:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
        plots.plot_training_curve(train_log, out_dir / "loss_curve.png")
    return net, train_log


# ---------------------------------------------------------------------------
# evaluation

def build_space(net: Network, dataset: Dataset) -> embed.EmbeddingSpace:
    ids = [rec["id"] for rec in dataset.records]
    return embed.extract(net, dataset.images, ids, dataset.relevance_map())


def evaluate(
    net: Network,
    dataset: Dataset,
    tasks=DEFAULT_TASKS,
    image_queries: int = 200,
    seed: int = 0,
) -> tuple[dict, list[dict]]:
    """Run the requested retrieval tasks; returns (summary, per-query rows)."""
    space = build_space(net, dataset)
    summary: dict = {"consistency_error": space.consistency_error()}
    rows: list[dict] = []
    if "image-to-concept" in tasks:
        lists = {i: embed.image_to_concept(space, i) for i in space.image_ids}
        m, rep = embed.mean_average_precision(lists)
        summary["image_to_concept_map"] = m
        summary["image_to_concept_degenerate"] = len(rep["degenerate_queries"])
        rows.extend(embed.query_metrics_row("image-to-concept", i, lists[i]) for i in space.image_ids)
    if "concept-to-image" in tasks:
        lists = {k: embed.concept_to_image(space, k) for k in range(space.k)}
        usable = {k: v for k, v in lists.items() if np.any(v.relevance)}
        if usable:
            m, rep = embed.mean_average_precision(usable)
            summary["concept_to_image_map"] = m
        else:
            summary["concept_to_image_map"] = None
        rows.extend(embed.query_metrics_row("concept-to-image", k, lists[k]) for k in lists)
    if "image-to-image" in tasks:
        rng = np.random.default_rng(np.random.PCG64(mix_seed(seed, 0x1212)))
        ids = space.image_ids
        if len(ids) > image_queries:
            chosen = sorted(rng.choice(len(ids), size=image_queries, replace=False).tolist())
            queries = [ids[i] for i in chosen]
        else:
            queries = list(ids)
        for feature in ("phi", "scores"):
            lists = {q: embed.image_to_image(space, q, feature=feature) for q in queries}
            usable = {q: v for q, v in lists.items() if np.any(v.relevance)}
            prefix = f"image_to_image_{feature}"
            if usable:
                summary[f"{prefix}_p_at_1"] = float(np.mean([embed.precision_at_k(v, 1) for v in usable.values()]))
                summary[f"{prefix}_p_at_10"] = float(np.mean([embed.precision_at_k(v, 10) for v in usable.values()]))
                summary[f"{prefix}_p_at_50"] = float(np.mean([embed.precision_at_k(v, 50) for v in usable.values()]))
                summary[f"{prefix}_r_precision"] = float(np.mean([embed.r_precision(v) for v in usable.values()]))
            rows.extend(
                embed.query_metrics_row(f"image-to-image-{feature}", q, lists[q]) for q in queries
            )
    return summary, rows


def write_report(out_dir, summary: dict, rows: list[dict], spec_resolved: dict | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = {"summary": summary}
    if spec_resolved is not None:
        report["spec"] = spec_resolved
    with open(out_dir / "report.json", "w", encoding="utf-8") as f:
        json.dump(report, f, sort_keys=True, indent=2)
        f.write("\n")
    embed.write_metrics_csv(rows, out_dir / "metrics.csv")
    bars = {k: v for k, v in summary.items() if isinstance(v, float) and 0.0 <= v <= 1.0}
    if bars:
        plots.plot_metric_bars(bars, out_dir / "metrics.png")


def run_eval(
    net: Network,
    dataset: Dataset,
    vocab: ConceptVocabulary,
    tasks=DEFAULT_TASKS,
    out_dir=None,
    image_queries: int = 200,
    seed: int = 0,
) -> dict:
    if net.k != vocab.k:
        raise ConfigError(f"checkpoint K={net.k} does not match vocabulary K={vocab.k}")
    summary, rows = evaluate(net, dataset, tasks, image_queries, seed)
    if out_dir is not None:
        write_report(out_dir, summary, rows)
    return summary


# ---------------------------------------------------------------------------
# protocols

def crop_dataset(dataset: Dataset, max_frac: float, seed: int) -> Dataset:
    """One seeded random crop per image; ids and annotations preserved."""
    images = np.empty_like(dataset.images)
    for i in range(len(dataset)):
        img = dataset.image(i)
        images[i] = wordgen.random_crop(img, max_frac, mix_seed(seed, 0xC0, img.render_seed)).pixels
    return Dataset(dict(dataset.header), [dict(r) for r in dataset.records], images)


def run_crop_robustness(
    net: Network,
    dataset: Dataset,
    vocab: ConceptVocabulary,
    max_frac: float = 0.2,
    seed: int = 0,
    out_dir=None,
) -> dict:
    """Paired clean / cropped evaluation plus per-metric ratios."""
    tasks = ("image-to-concept", "concept-to-image")
    clean, clean_rows = evaluate(net, dataset, tasks)
    cropped_ds = crop_dataset(dataset, max_frac, seed)
    cropped, cropped_rows = evaluate(net, cropped_ds, tasks)
    ratios = {}
    for key in ("image_to_concept_map", "concept_to_image_map"):
        if clean.get(key):
            ratios[key] = (cropped[key] or 0.0) / clean[key]
    summary = {"clean": clean, "cropped": cropped, "ratios": ratios, "max_frac": max_frac, "seed": seed}
    if out_dir is not None:
        rows = [dict(r, task="clean-" + r["task"]) for r in clean_rows]
        rows += [dict(r, task="cropped-" + r["task"]) for r in cropped_rows]
        write_report(out_dir, {"crop_robustness": ratios, **{f"clean_{k}": v for k, v in clean.items() if isinstance(v, float)}, **{f"cropped_{k}": v for k, v in cropped.items() if isinstance(v, float)}}, rows)
    return summary


def chance_map(relevant_sets, k: int, trials: int = 10000, seed: int = 0) -> float:
    """Empirical chance-level mAP: AP of random score vectors against the
    given relevance patterns."""
    relevant_sets = [frozenset(r) for r in relevant_sets if r]
    if not relevant_sets:
        raise ParameterError("need at least one non-empty relevance set")
    rng = np.random.default_rng(np.random.PCG64(seed))
    total = 0.0
    for t in range(trials):
        rel = relevant_sets[t % len(relevant_sets)]
        scores = rng.random(k)
        ranked = embed.rank_items(range(k), scores, rel)
        total += embed.average_precision(ranked)
    return total / trials


def run_zero_shot(spec: ExperimentSpec, out_dir=None, split_seed: int | None = None) -> dict:
    """Train on 90% of words, evaluate on images of the held-out words only."""
    vocab = spec.build_vocabulary()
    if len(vocab.word_annotations) < 10:
        raise ConfigError("zero-shot protocol needs a vocabulary of >= 10 words")
    split = wordgen.disjoint_word_split(
        vocab, 0.9, spec.seed if split_seed is None else split_seed
    )
    if not split.test_words:
        raise ConfigError("empty test side in zero-shot split")
    assert not set(split.train_words) & set(split.test_words), "split hygiene violated"
    test_concepts = set()
    for w in split.test_words:
        test_concepts.update(vocab.word_annotations[w])
    dropped = sorted(set(range(vocab.k)) - {c for w in split.train_words for c in vocab.word_annotations[w]})
    if test_concepts and test_concepts <= set(dropped):
        raise ConfigError(f"all test-word concepts lack training words: {dropped}")
    dataset = spec.build_dataset(vocab)
    train_ds = dataset.subset_by_words(split.train_words)
    test_ds = dataset.subset_by_words(split.test_words)
    specs, input_shape = tinynet.get_preset(spec.preset, vocab.k)
    net = tinynet.init(specs, input_shape, seed=mix_seed(spec.seed, 0x1237))
    net, train_log = run_training(net, train_ds, spec.train, out_dir)
    tasks = ("image-to-concept", "concept-to-image")
    unseen, unseen_rows = evaluate(net, test_ds, tasks)
    _, seen_val = train_ds.split_by_replica(spec.val_replicas)
    seen, _ = evaluate(net, seen_val, tasks)
    chance = chance_map(
        [frozenset(r["concept_ids"]) for r in test_ds.records], vocab.k,
        trials=10000, seed=mix_seed(spec.seed, 0xC4A),
    )
    summary = {
        "train_words": split.train_words,
        "test_words": split.test_words,
        "train_only_concepts": split.train_only_concepts,
        "unseen_image_to_concept_map": unseen["image_to_concept_map"],
        "unseen_concept_to_image_map": unseen["concept_to_image_map"],
        "seen_image_to_concept_map": seen["image_to_concept_map"],
        "seen_concept_to_image_map": seen["concept_to_image_map"],
        "chance_image_to_concept_map": chance,
    }
    if out_dir is not None:
        write_report(out_dir, {k: v for k, v in summary.items() if isinstance(v, (int, float))}, unseen_rows, spec.resolved())
    return summary


def run_finetune_k(
    net: Network,
    old_vocab: ConceptVocabulary,
    new_vocab: ConceptVocabulary,
    new_dataset: Dataset,
    cfg: TrainConfig,
    out_dir=None,
    val_replicas: int = 4,
) -> tuple[Network, dict]:
    """Widen the scoring layer to the larger vocabulary and keep training.

    The new vocabulary's first K concepts must coincide with the old ones.
    Reports image-to-concept mAP on the original concepts before and after.
    """
    k_old = old_vocab.k
    if new_vocab.k < k_old:
        raise ConfigError("new vocabulary is smaller than the old one")
    old_ids = [c["id"] for c in old_vocab.concepts]
    new_ids = [c["id"] for c in new_vocab.concepts[:k_old]]
    if old_ids != new_ids:
        raise ConfigError("new vocabulary's concept prefix does not match the old vocabulary")
    train_ds, val_ds = (
        new_dataset.split_by_replica(val_replicas)
        if new_dataset.header["per_word"] > val_replicas
        else (new_dataset, new_dataset)
    )
    pre = _map_on_original_concepts(net, val_ds, k_old)
    widened = tinynet.resize_scoring_layer(net, new_vocab.k, seed=mix_seed(cfg.seed, 0xF1))
    if cfg.epochs > 0:
        widened, train_log = run_training(widened, train_ds, cfg, out_dir)
    else:
        train_log = []
    post = _map_on_original_concepts(widened, val_ds, k_old)
    summary = {
        "k_old": k_old,
        "k_new": new_vocab.k,
        "pre_finetune_map_original_k": pre,
        "post_finetune_map_original_k": post,
        "epochs": cfg.epochs,
    }
    if out_dir is not None:
        write_report(out_dir, summary, [])
    return widened, summary


def _map_on_original_concepts(net: Network, dataset: Dataset, k_old: int) -> float:
    """Image-to-concept mAP restricted to the first k_old concepts."""
    res = tinynet.forward(net, dataset.images, mode="eval")
    lists = {}
    for row, rec in enumerate(dataset.records):
        rel = {c for c in rec["concept_ids"] if c < k_old}
        lists[rec["id"]] = embed.rank_items(range(k_old), res.scores[row, :k_old], rel)
    usable = {q: v for q, v in lists.items() if np.any(v.relevance)}
    m, _ = embed.mean_average_precision(usable)
    return m


# ---------------------------------------------------------------------------
# whole-experiment driver

def run_experiment(spec: ExperimentSpec, out_dir) -> dict:
    """mine -> synth -> train -> eval with full artifacts on disk."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    vocab = spec.build_vocabulary()
    with open(out_dir / "vocabulary.json", "w", encoding="utf-8") as f:
        f.write(vocab.to_json())
    dataset = spec.build_dataset(vocab)
    wordgen.save_dataset(dataset, out_dir / "manifest.jsonl", out_dir / "images.bin")
    train_ds, val_ds = dataset.split_by_replica(spec.val_replicas)
    specs, input_shape = tinynet.get_preset(spec.preset, vocab.k)
    net = tinynet.init(specs, input_shape, seed=mix_seed(spec.seed, 0x1237))
    net, train_log = run_training(net, train_ds, spec.train, out_dir)
    summary, rows = evaluate(net, val_ds, spec.tasks, spec.image_queries, spec.seed)
    summary["wall_clock_s"] = time.time() - t0
    write_report(out_dir, summary, rows, spec.resolved())
    space = build_space(net, val_ds)
    embed.save_embeddings(space, out_dir / "embeddings.bin")
    return {"summary": summary, "vocab": vocab, "net": net, "train_log": train_log}
