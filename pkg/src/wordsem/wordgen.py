"""Deterministic synthetic word-image generation.

Renders words from the embedded bitmap font onto a fixed canvas with seeded
photometric jitter, provides the random-crop localization surrogate, and
assembles manifest+raster datasets from a concept vocabulary.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import glyphs
from .errors import ConfigError, FormatError, ParameterError
from .taxonomy import ConceptVocabulary

RASTER_MAGIC = b"LWIMG1"
MIX_FUNCTION_ID = "splitmix64-v1"

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One splitmix64 output step; the dataset's seed-mixing primitive."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def mix_seed(*parts: int) -> int:
    """Fold integer parts into one 64-bit seed via chained splitmix64."""
    x = 0
    for p in parts:
        x = splitmix64((x ^ (p & _MASK64)) & _MASK64)
    return x


@dataclass(frozen=True)
class DistortionConfig:
    brightness_range: tuple[float, float] = (-0.2, 0.2)
    contrast_range: tuple[float, float] = (0.8, 1.2)
    noise_sigma_range: tuple[float, float] = (0.0, 0.05)
    shift_range: tuple[int, int] = (-2, 2)
    polarity_flip_prob: float = 0.5

    def __post_init__(self):
        for name in ("brightness_range", "contrast_range", "noise_sigma_range", "shift_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ParameterError(f"{name} is not well-ordered: {lo} > {hi}")
        if self.noise_sigma_range[0] < 0:
            raise ParameterError("noise sigma must be >= 0")
        if not 0.0 <= self.polarity_flip_prob <= 1.0:
            raise ParameterError("polarity flip probability must be in [0,1]")

    @classmethod
    def none(cls) -> "DistortionConfig":
        return cls((0.0, 0.0), (1.0, 1.0), (0.0, 0.0), (0, 0), 0.0)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "DistortionConfig":
        return cls(
            tuple(d["brightness_range"]),
            tuple(d["contrast_range"]),
            tuple(d["noise_sigma_range"]),
            tuple(int(v) for v in d["shift_range"]),
            d["polarity_flip_prob"],
        )


@dataclass
class WordImage:
    pixels: np.ndarray  # H x W, float in [0,1]
    word: str
    concept_ids: frozenset[int]
    render_seed: int


def nn_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize, aspect ratio ignored."""
    h, w = img.shape
    rows = np.floor(np.arange(out_h) * h / out_h).astype(int)
    cols = np.floor(np.arange(out_w) * w / out_w).astype(int)
    return img[np.ix_(rows, cols)]


def render(
    word: str,
    canvas: tuple[int, int],
    config: DistortionConfig = DistortionConfig(),
    seed: int = 0,
    concept_ids: frozenset[int] = frozenset(),
) -> WordImage:
    """Rasterize a word onto the canvas with seeded distortions.

    Pipeline order is fixed: glyph strip -> integer shift -> nearest resize
    -> contrast -> brightness -> noise -> polarity flip -> clamp.
    """
    h, w = canvas
    rng = np.random.default_rng(np.random.PCG64(seed))
    strip = glyphs.compose_strip(word)
    pad = max(abs(config.shift_range[0]), abs(config.shift_range[1]), 1)
    framed = np.zeros((strip.shape[0] + 2 * pad, strip.shape[1] + 2 * pad))
    framed[pad:pad + strip.shape[0], pad:pad + strip.shape[1]] = strip
    dy = int(rng.integers(config.shift_range[0], config.shift_range[1] + 1))
    dx = int(rng.integers(config.shift_range[0], config.shift_range[1] + 1))
    framed = np.roll(np.roll(framed, dy, axis=0), dx, axis=1)
    img = nn_resize(framed, h, w)
    contrast = rng.uniform(*config.contrast_range)
    brightness = rng.uniform(*config.brightness_range)
    sigma = rng.uniform(*config.noise_sigma_range)
    img = (img - 0.5) * contrast + 0.5 + brightness
    img = img + rng.normal(0.0, 1.0, size=img.shape) * sigma
    if rng.uniform() < config.polarity_flip_prob:
        img = 1.0 - img
    img = np.clip(img, 0.0, 1.0)
    return WordImage(img.astype(np.float32), word.lower(), frozenset(concept_ids), seed)


def random_crop(
    image: WordImage,
    max_frac: float = 0.2,
    seed: int = 0,
    forced: tuple[float, float, float, float] | None = None,
) -> WordImage:
    """Remove a seeded fraction of the canvas and resize back.

    The total horizontal removal is uniform in [0, max_frac] and split
    between left and right; the vertical axis is treated independently, so
    the retained-area fraction is always >= (1-max_frac)^2. `forced`
    is a test hook pinning (f_h, u_h, f_v, u_v).
    """
    if not 0.0 <= max_frac < 1.0:
        raise ParameterError(f"max_frac must be in [0,1), got {max_frac}")
    h, w = image.pixels.shape
    rng = np.random.default_rng(np.random.PCG64(seed))
    if forced is not None:
        f_h, u_h, f_v, u_v = forced
    else:
        f_h, u_h = rng.uniform(0.0, max_frac), rng.uniform()
        f_v, u_v = rng.uniform(0.0, max_frac), rng.uniform()
    removed_w = int(np.floor(f_h * w))
    removed_h = int(np.floor(f_v * h))
    if removed_w >= w or removed_h >= h:
        raise ParameterError("crop removes the entire canvas")
    left = int(np.floor(u_h * removed_w))
    top = int(np.floor(u_v * removed_h))
    cropped = image.pixels[top:h - (removed_h - top), left:w - (removed_w - left)]
    out = nn_resize(cropped, h, w)
    return WordImage(out.astype(np.float32), image.word, image.concept_ids, seed)


@dataclass
class Dataset:
    """A rendered word-image corpus: header, per-image records, raster block."""

    header: dict
    records: list[dict]
    images: np.ndarray  # N x H x W float32

    def __len__(self) -> int:
        return len(self.records)

    @property
    def canvas(self) -> tuple[int, int]:
        return tuple(self.header["canvas"])

    def image(self, index: int) -> WordImage:
        rec = self.records[index]
        return WordImage(
            self.images[index], rec["word"], frozenset(rec["concept_ids"]), rec["seed"]
        )

    def relevance_map(self) -> dict[int, frozenset[int]]:
        return {rec["id"]: frozenset(rec["concept_ids"]) for rec in self.records}

    def split_by_replica(self, val_replicas: int) -> tuple["Dataset", "Dataset"]:
        """Deterministic train/val split: the last val_replicas renders of
        every word go to the validation side."""
        per_word = self.header["per_word"]
        if not 0 < val_replicas < per_word:
            raise ParameterError("val_replicas must be in (0, per_word)")
        train_idx = [i for i, r in enumerate(self.records) if r["replica"] < per_word - val_replicas]
        val_idx = [i for i, r in enumerate(self.records) if r["replica"] >= per_word - val_replicas]
        return self._subset(train_idx), self._subset(val_idx)

    def subset_by_words(self, words) -> "Dataset":
        words = set(words)
        idx = [i for i, r in enumerate(self.records) if r["word"] in words]
        return self._subset(idx)

    def _subset(self, indices: list[int]) -> "Dataset":
        return Dataset(dict(self.header), [self.records[i] for i in indices], self.images[indices])


def build_dataset(
    vocab: ConceptVocabulary,
    per_word: int,
    canvas: tuple[int, int] = (16, 48),
    config: DistortionConfig = DistortionConfig(),
    seed: int = 0,
) -> Dataset:
    """Render per_word seeded images for every annotated word.

    Per-image seeds derive from the master seed, the word index and the
    replica index through chained splitmix64, so the manifest is fully
    reproducible from its header.
    """
    if per_word < 1:
        raise ParameterError(f"per_word must be >= 1, got {per_word}")
    words = sorted(vocab.word_annotations)
    if not words:
        raise ConfigError("vocabulary has no annotated words")
    h, w = canvas
    header = {
        "canvas": [h, w],
        "distortion": config.to_dict(),
        "seed": seed,
        "mix": MIX_FUNCTION_ID,
        "per_word": per_word,
    }
    records = []
    rasters = np.empty((len(words) * per_word, h, w), dtype=np.float32)
    image_id = 0
    for wi, word in enumerate(words):
        concept_ids = sorted(vocab.word_annotations[word])
        for rep in range(per_word):
            img_seed = mix_seed(seed, wi, rep)
            img = render(word, canvas, config, img_seed, frozenset(concept_ids))
            rasters[image_id] = img.pixels
            records.append(
                {
                    "id": image_id,
                    "word": word,
                    "concept_ids": concept_ids,
                    "seed": img_seed,
                    "replica": rep,
                    "offset": len(RASTER_MAGIC) + 8 + image_id * h * w * 4,
                }
            )
            image_id += 1
    return Dataset(header, records, rasters)


@dataclass
class SplitResult:
    train_words: list[str]
    test_words: list[str]
    train_only_concepts: list[int] = field(default_factory=list)


def disjoint_word_split(
    vocab: ConceptVocabulary, train_fraction: float = 0.9, seed: int = 0
) -> SplitResult:
    """Seeded word-level partition; the two sides never share a word.

    Concepts left with no test-side word are flagged train-only.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ParameterError(f"train_fraction must be in (0,1), got {train_fraction}")
    words = sorted(vocab.word_annotations)
    rng = np.random.default_rng(np.random.PCG64(seed))
    order = list(rng.permutation(len(words)))
    n_train = int(round(train_fraction * len(words)))
    n_train = min(max(n_train, 1), len(words) - 1)
    train = sorted(words[i] for i in order[:n_train])
    test = sorted(words[i] for i in order[n_train:])
    test_concepts = set()
    for word in test:
        test_concepts.update(vocab.word_annotations[word])
    train_only = sorted(set(range(vocab.k)) - test_concepts)
    return SplitResult(train, test, train_only)


# ---------------------------------------------------------------------------
# serialization

def save_dataset(dataset: Dataset, manifest_path, raster_path) -> None:
    """Write the JSON-lines manifest and the little-endian raster block."""
    h, w = dataset.canvas
    with open(raster_path, "wb") as f:
        f.write(RASTER_MAGIC)
        f.write(struct.pack("<IHH", len(dataset), h, w))
        f.write(dataset.images.astype("<f4").tobytes())
    with open(manifest_path, "w", encoding="utf-8") as f:
        f.write(json.dumps(dataset.header, sort_keys=True, separators=(",", ":")) + "\n")
        for rec in dataset.records:
            f.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def load_dataset(manifest_path, raster_path) -> Dataset:
    with open(raster_path, "rb") as f:
        magic = f.read(len(RASTER_MAGIC))
        if magic != RASTER_MAGIC:
            raise FormatError(f"bad raster magic {magic!r}")
        head = f.read(8)
        if len(head) != 8:
            raise FormatError("truncated raster header")
        count, h, w = struct.unpack("<IHH", head)
        payload = f.read(count * h * w * 4)
        if len(payload) != count * h * w * 4:
            raise FormatError("truncated raster payload")
        images = np.frombuffer(payload, dtype="<f4").reshape(count, h, w).copy()
    with open(manifest_path, "r", encoding="utf-8") as f:
        lines = [line for line in f if line.strip()]
    if not lines:
        raise FormatError("empty manifest")
    header = json.loads(lines[0])
    records = [json.loads(line) for line in lines[1:]]
    if len(records) != count:
        raise FormatError(f"manifest lists {len(records)} images, raster holds {count}")
    return Dataset(header, records, images)


def save_single_image(image: WordImage, path) -> None:
    ds = Dataset(
        {"canvas": list(image.pixels.shape), "per_word": 1},
        [{"id": 0, "word": image.word, "concept_ids": sorted(image.concept_ids),
          "seed": image.render_seed, "replica": 0, "offset": len(RASTER_MAGIC) + 8}],
        image.pixels[None],
    )
    with open(path, "wb") as f:
        f.write(RASTER_MAGIC)
        h, w = image.pixels.shape
        f.write(struct.pack("<IHH", 1, h, w))
        f.write(ds.images.astype("<f4").tobytes())


def load_raster(path) -> np.ndarray:
    """Read just the raster block (no manifest): N x H x W float32."""
    with open(path, "rb") as f:
        magic = f.read(len(RASTER_MAGIC))
        if magic != RASTER_MAGIC:
            raise FormatError(f"bad raster magic {magic!r}")
        count, h, w = struct.unpack("<IHH", f.read(8))
        payload = f.read(count * h * w * 4)
        if len(payload) != count * h * w * 4:
            raise FormatError("truncated raster payload")
    return np.frombuffer(payload, dtype="<f4").reshape(count, h, w).copy()
