"""Annotated-image data model, vocabulary, caption encoding, annotation file
I/O, superclass merging, and a synthetic shapes-and-captions corpus.

Annotation wire format: UTF-8 JSON lines, one image per line::

    {"image_id": str, "image_path": str, "width": int, "height": int,
     "objects": [{"box": [x1, y1, x2, y2], "superclass": str,
                  "captions": [str, ...]}]}

The superclass name set lives once in a sidecar ``superclasses.json`` next to
the annotation file; split files are JSON mapping split name -> image_id list.
Boxes use the half-open pixel convention of :mod:`got.geometry`; (x1, y1) is
the top-left corner.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import AnnotationParseError, GenerationError, ValidationError

EOC_WORD = "<eoc>"
UNK_WORD = "<unk>"


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace; no further normalization."""
    return text.lower().split()


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Vocabulary:
    """Bijective word<->index map with reserved end-of-caption and unknown words."""

    index_to_word: tuple[str, ...]
    word_to_index: dict[str, int] = field(compare=False)

    def __post_init__(self):
        if len(self.index_to_word) != len(self.word_to_index):
            raise ValidationError("vocabulary word/index maps are not a bijection")
        if self.index_to_word.count(EOC_WORD) != 1 or self.index_to_word.count(UNK_WORD) != 1:
            raise ValidationError("vocabulary must contain the reserved words exactly once")

    def __len__(self) -> int:
        return len(self.index_to_word)

    @property
    def eoc_index(self) -> int:
        return self.word_to_index[EOC_WORD]

    @property
    def unk_index(self) -> int:
        return self.word_to_index[UNK_WORD]

    def index_of(self, word: str) -> int:
        return self.word_to_index.get(word, self.unk_index)

    def word_of(self, index: int) -> str:
        return self.index_to_word[index]

    @staticmethod
    def from_words(words: list[str]) -> "Vocabulary":
        idx_to_word = tuple(words)
        return Vocabulary(idx_to_word, {w: i for i, w in enumerate(idx_to_word)})


def build_vocabulary(captions: list[list[str]], min_count: int = 2) -> Vocabulary:
    """Vocabulary of every word with corpus frequency >= min_count, plus the
    two reserved words.

    Index order is deterministic: reserved words first, then retained words by
    descending frequency, ties broken lexicographically.
    """
    if min_count < 1:
        raise ValidationError("min_count must be >= 1")
    counts: dict[str, int] = {}
    for caption in captions:
        for word in caption:
            if word in (EOC_WORD, UNK_WORD):
                continue
            counts[word] = counts.get(word, 0) + 1
    retained = sorted((w for w, c in counts.items() if c >= min_count),
                      key=lambda w: (-counts[w], w))
    return Vocabulary.from_words([EOC_WORD, UNK_WORD] + retained)


@dataclass(frozen=True)
class TokenizedCaption:
    """Fixed-length token ids; everything after the first end-of-caption id is
    end-of-caption."""

    token_ids: tuple[int, ...]
    eoc_index: int

    def __post_init__(self):
        seen_eoc = False
        for t in self.token_ids:
            if seen_eoc and t != self.eoc_index:
                raise ValidationError("content token after end-of-caption")
            if t == self.eoc_index:
                seen_eoc = True

    def __len__(self) -> int:
        return len(self.token_ids)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.token_ids, dtype=np.int64)

    def content_length(self) -> int:
        for i, t in enumerate(self.token_ids):
            if t == self.eoc_index:
                return i
        return len(self.token_ids)


def encode_caption(words: list[str], vocab: Vocabulary, n_steps: int) -> TokenizedCaption:
    """First min(len, n_steps) words to ids (unknown -> UNK), padded with the
    end-of-caption id to exactly n_steps."""
    if n_steps < 1:
        raise ValidationError("n_steps must be >= 1")
    ids = []
    for word in words[:n_steps]:
        if word in (EOC_WORD, UNK_WORD):
            ids.append(vocab.unk_index)
        else:
            ids.append(vocab.index_of(word))
    ids.extend([vocab.eoc_index] * (n_steps - len(ids)))
    return TokenizedCaption(tuple(ids), vocab.eoc_index)


def decode_caption(token_ids, vocab: Vocabulary) -> list[str]:
    """Token ids back to words, stopping at the first end-of-caption id."""
    words = []
    for t in token_ids:
        if int(t) == vocab.eoc_index:
            break
        words.append(vocab.word_of(int(t)))
    return words


# ---------------------------------------------------------------------------
# data model
# ---------------------------------------------------------------------------

@dataclass
class AnnotatedObject:
    box: tuple[float, float, float, float]  # (x1, y1, x2, y2) pixels
    superclass_id: int
    captions: list[str]

    def validate(self, n_superclasses: int, width: float, height: float, image_id: str) -> None:
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise ValidationError(f"image {image_id!r}: degenerate box {self.box}")
        if not (0 <= x1 and x2 <= width and 0 <= y1 and y2 <= height):
            raise ValidationError(f"image {image_id!r}: box {self.box} outside {width}x{height}")
        if not (0 <= self.superclass_id < n_superclasses):
            raise ValidationError(f"image {image_id!r}: superclass id {self.superclass_id} out of range")
        if not self.captions:
            raise ValidationError(f"image {image_id!r}: object has no captions")


@dataclass
class AnnotatedImage:
    image_id: str
    pixels: np.ndarray  # HxWx3 float in [0, 1]
    objects: list[AnnotatedObject]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def validate(self, n_superclasses: int) -> None:
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3 or self.height < 1 or self.width < 1:
            raise ValidationError(f"image {self.image_id!r}: pixels must be HxWx3")
        for obj in self.objects:
            obj.validate(n_superclasses, self.width, self.height, self.image_id)


@dataclass
class Dataset:
    """A sequence of annotated images plus the declared superclass name set."""

    images: list[AnnotatedImage]
    superclass_names: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.images)

    def __iter__(self):
        return iter(self.images)

    def __getitem__(self, i) -> AnnotatedImage:
        return self.images[i]

    @property
    def n_superclasses(self) -> int:
        return len(self.superclass_names)

    def validate(self) -> None:
        for image in self.images:
            image.validate(self.n_superclasses)

    def all_caption_tokens(self) -> list[list[str]]:
        return [tokenize(c) for img in self.images for obj in img.objects for c in obj.captions]

    def build_vocabulary(self, min_count: int = 2) -> Vocabulary:
        return build_vocabulary(self.all_caption_tokens(), min_count)

    def subset(self, image_ids) -> "Dataset":
        wanted = set(image_ids)
        return Dataset([im for im in self.images if im.image_id in wanted], self.superclass_names)


def merge_superclasses(dataset: Dataset, mapping: dict[int, int]) -> Dataset:
    """Remap superclass ids; `mapping` must cover every source id and its
    values must form a contiguous 0..K'-1 range."""
    source_ids = set(range(dataset.n_superclasses))
    if set(mapping.keys()) != source_ids:
        missing = sorted(source_ids - set(mapping.keys()))
        raise ValidationError(f"superclass mapping incomplete, missing ids {missing}")
    targets = set(mapping.values())
    if targets != set(range(len(targets))):
        raise ValidationError(f"superclass mapping targets must be 0..K-1, got {sorted(targets)}")
    groups: dict[int, list[str]] = {}
    for src, dst in sorted(mapping.items()):
        groups.setdefault(dst, []).append(dataset.superclass_names[src])
    names = tuple("+".join(groups[k]) for k in range(len(targets)))
    images = [
        AnnotatedImage(
            im.image_id,
            im.pixels,
            [AnnotatedObject(o.box, mapping[o.superclass_id], list(o.captions)) for o in im.objects],
        )
        for im in dataset.images
    ]
    return Dataset(images, names)


# ---------------------------------------------------------------------------
# annotation file I/O
# ---------------------------------------------------------------------------

SUPERCLASS_SIDECAR = "superclasses.json"


def save_annotations(dataset: Dataset, path) -> None:
    """Write JSON-lines annotations, the superclass sidecar, and PNG images."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image_dir = path.parent / "images"
    image_dir.mkdir(exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for im in dataset.images:
            rel = f"images/{im.image_id}.png"
            Image.fromarray((np.clip(im.pixels, 0, 1) * 255).round().astype(np.uint8)).save(image_dir / f"{im.image_id}.png")
            record = {
                "image_id": im.image_id,
                "image_path": rel,
                "width": im.width,
                "height": im.height,
                "objects": [
                    {
                        "box": [float(v) for v in o.box],
                        "superclass": dataset.superclass_names[o.superclass_id],
                        "captions": list(o.captions),
                    }
                    for o in im.objects
                ],
            }
            f.write(json.dumps(record) + "\n")
    with open(path.parent / SUPERCLASS_SIDECAR, "w", encoding="utf-8") as f:
        json.dump({"superclasses": list(dataset.superclass_names)}, f)


def load_annotations(path, superclass_names: tuple[str, ...] | None = None) -> Dataset:
    """Read a JSON-lines annotation file; every record is validated.

    Superclass names come from the sidecar file next to `path` unless given
    explicitly. Malformed lines raise :class:`AnnotationParseError` with the
    line number; invariant violations raise :class:`ValidationError` naming
    the image id.
    """
    path = Path(path)
    if superclass_names is None:
        sidecar = path.parent / SUPERCLASS_SIDECAR
        if not sidecar.exists():
            raise ValidationError(f"no superclass sidecar {sidecar} and none passed explicitly")
        with open(sidecar, encoding="utf-8") as f:
            superclass_names = tuple(json.load(f)["superclasses"])
    name_to_id = {n: i for i, n in enumerate(superclass_names)}
    images: list[AnnotatedImage] = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise AnnotationParseError(f"{path}:{lineno}: malformed JSON line: {e}", lineno) from e
            try:
                image_id = record["image_id"]
                image_path = record["image_path"]
                width, height = int(record["width"]), int(record["height"])
                raw_objects = record["objects"]
            except (KeyError, TypeError, ValueError) as e:
                raise AnnotationParseError(f"{path}:{lineno}: missing or bad field: {e}", lineno) from e
            if not isinstance(raw_objects, list):
                raise AnnotationParseError(f"{path}:{lineno}: 'objects' must be a list", lineno)
            pixel_file = path.parent / image_path
            if not pixel_file.exists():
                raise ValidationError(f"image {image_id!r}: pixel file {pixel_file} not found")
            pixels = np.asarray(Image.open(pixel_file).convert("RGB"), dtype=np.float32) / 255.0
            if pixels.shape[:2] != (height, width):
                raise ValidationError(
                    f"image {image_id!r}: declared {width}x{height} but file is "
                    f"{pixels.shape[1]}x{pixels.shape[0]}"
                )
            objects = []
            for raw in raw_objects:
                try:
                    name = raw["superclass"]
                    box = tuple(float(v) for v in raw["box"])
                    captions = list(raw["captions"])
                except (KeyError, TypeError, ValueError) as e:
                    raise AnnotationParseError(f"{path}:{lineno}: bad object record: {e}", lineno) from e
                if name not in name_to_id:
                    raise ValidationError(f"image {image_id!r}: unknown superclass {name!r}")
                if len(box) != 4:
                    raise ValidationError(f"image {image_id!r}: box must have 4 coordinates")
                objects.append(AnnotatedObject(box, name_to_id[name], captions))
            image = AnnotatedImage(image_id, pixels, objects)
            image.validate(len(superclass_names))
            images.append(image)
    return Dataset(images, tuple(superclass_names))


def write_splits(splits: dict[str, list[str]], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(splits, f, indent=0)


def read_splits(path) -> dict[str, list[str]]:
    with open(path, encoding="utf-8") as f:
        return {str(k): [str(i) for i in v] for k, v in json.load(f).items()}


def split_dataset(dataset: Dataset, fractions: dict[str, float], seed: int) -> dict[str, list[str]]:
    """Deterministic disjoint splits by image id; fractions must sum to 1."""
    if abs(sum(fractions.values()) - 1.0) > 1e-9:
        raise ValidationError("split fractions must sum to 1")
    ids = [im.image_id for im in dataset.images]
    order = np.random.default_rng(seed).permutation(len(ids))
    splits: dict[str, list[str]] = {}
    start = 0
    names = list(fractions)
    for i, name in enumerate(names):
        count = len(ids) - start if i == len(names) - 1 else int(round(fractions[name] * len(ids)))
        splits[name] = [ids[j] for j in order[start:start + count]]
        start += count
    return splits


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

SHAPE_NAMES = ("square", "circle", "triangle", "cross")
COLOR_TABLE = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.70, 0.15),
    "blue": (0.15, 0.20, 0.85),
    "yellow": (0.90, 0.85, 0.10),
    "purple": (0.60, 0.15, 0.70),
    "orange": (0.95, 0.55, 0.10),
}
SIZE_NAMES = ("small", "big")
DEFAULT_TEMPLATES = ("a {color} {shape}", "a {size} {color} {shape}")
BACKGROUND = 0.92


def _shape_mask(shape: str, side: int) -> np.ndarray:
    """Boolean side x side mask of the filled shape."""
    r = np.arange(side)[:, None] + 0.5
    c = np.arange(side)[None, :] + 0.5
    half = side / 2.0
    if shape == "square":
        return np.ones((side, side), dtype=bool)
    if shape == "circle":
        return (r - half) ** 2 + (c - half) ** 2 <= half ** 2
    if shape == "triangle":  # isoceles, apex at top
        return np.abs(c - half) <= (r / side) * half
    if shape == "cross":
        arm = side / 6.0
        return (np.abs(c - half) <= arm) | (np.abs(r - half) <= arm)
    raise ValidationError(f"unknown shape {shape!r}")


def render_scene(canvas_size: tuple[int, int], placements) -> np.ndarray:
    """Draw (shape, color_rgb, x, y, side) placements on a light background."""
    w, h = canvas_size
    pixels = np.full((h, w, 3), BACKGROUND, dtype=np.float32)
    for shape, rgb, x, y, side in placements:
        mask = _shape_mask(shape, side)
        region = pixels[y:y + side, x:x + side]
        region[mask] = np.asarray(rgb, dtype=np.float32)
    return pixels


def _place_boxes(rng, canvas_size, sides, margin=2, attempts=500):
    """Non-overlapping top-left corners for the requested square sides.

    Largest objects are placed first (keeps rejection sampling reliable);
    the returned list follows the caller's original order.
    """
    w, h = canvas_size
    order = sorted(range(len(sides)), key=lambda i: -sides[i])
    placed: dict[int, tuple[int, int, int]] = {}
    for i in order:
        side = sides[i]
        if side + 2 * margin > min(w, h):
            raise GenerationError(f"canvas {canvas_size} too small for an object of side {side}")
        for attempt in range(attempts):
            x = int(rng.integers(margin, w - side - margin + 1))
            y = int(rng.integers(margin, h - side - margin + 1))
            ok = all(
                x + side + margin <= px or px + pside + margin <= x
                or y + side + margin <= py or py + pside + margin <= y
                for px, py, pside in placed.values()
            )
            if ok:
                placed[i] = (x, y, side)
                break
        else:
            raise GenerationError(f"could not place {len(sides)} objects on canvas {canvas_size}")
    return [placed[i] for i in range(len(sides))]


def _captions_for(template_set, color, shape, size) -> list[str]:
    captions = []
    for template in template_set:
        caption = template.format(color=color, shape=shape, size=size)
        if caption not in captions:
            captions.append(caption)
    return captions


def generate_synthetic_corpus(
    n_images: int,
    seed: int,
    canvas_size: tuple[int, int] = (64, 64),
    template_set: tuple[str, ...] = DEFAULT_TEMPLATES,
    layout: str = "mixed",
) -> Dataset:
    """A deterministic corpus of colored-shape scenes with template captions.

    `layout="mixed"` draws 1-3 objects with pairwise-distinct (shape, color)
    attributes; `layout="pair"` draws exactly two objects of the same shape in
    different colors, the discrimination setup used by retrieval training.
    Superclasses are the shape kinds. The same seed reproduces the corpus
    exactly, pixels included.
    """
    if n_images < 1:
        raise ValidationError("n_images must be >= 1")
    if layout not in ("mixed", "pair"):
        raise ValidationError(f"unknown layout {layout!r}")
    rng = np.random.default_rng(seed)
    colors = list(COLOR_TABLE)
    w, h = canvas_size
    small_max = max(10, min(w, h) // 5)
    big_max = max(14, min(w, h) // 3)
    size_ranges = {"small": (8, small_max), "big": (small_max + 2, big_max)}
    images: list[AnnotatedImage] = []
    for i in range(n_images):
        if layout == "pair":
            shape = SHAPE_NAMES[int(rng.integers(len(SHAPE_NAMES)))]
            color_pair = rng.choice(len(colors), size=2, replace=False)
            combos = [(shape, colors[int(c)]) for c in color_pair]
        else:
            n_objects = int(rng.integers(1, 4))
            pool = [(s, c) for s in SHAPE_NAMES for c in colors]
            picks = rng.choice(len(pool), size=n_objects, replace=False)
            combos = [pool[int(p)] for p in picks]
        sizes = []
        size_words = []
        for _ in combos:
            word = SIZE_NAMES[int(rng.integers(len(SIZE_NAMES)))]
            lo, hi = size_ranges[word]
            sizes.append(int(rng.integers(lo, hi + 1)))
            size_words.append(word)
        placements = _place_boxes(rng, canvas_size, sizes)
        scene = []
        objects = []
        for (shape, color), size_word, (x, y, side) in zip(combos, size_words, placements):
            scene.append((shape, COLOR_TABLE[color], x, y, side))
            captions = _captions_for(template_set, color, shape, size_word)
            objects.append(
                AnnotatedObject(
                    box=(float(x), float(y), float(x + side), float(y + side)),
                    superclass_id=SHAPE_NAMES.index(shape),
                    captions=captions,
                )
            )
        pixels = render_scene(canvas_size, scene)
        images.append(AnnotatedImage(f"synth-{seed}-{i:06d}", pixels, objects))
    dataset = Dataset(images, SHAPE_NAMES)
    dataset.validate()
    return dataset
