"""Captioned image datasets: synthetic shapes, CUB-format loading, preprocessing.

Images travel through the package as an :class:`ImageExample` holding a
pyramid of square ``(3, N, N)`` float32 arrays in ``[-1, 1]``, smallest level
first. Captions are :class:`CaptionRecord` rows, one per (image, caption) pair.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

DEFAULT_CROP_RATIO = 0.75
DEFAULT_RESOLUTIONS = (16, 32, 64)

_PUNCT = re.compile(r"[^\w\s]")


class DatasetError(ValueError):
    """Raised for malformed dataset inputs; the message names the offending item."""


@dataclass(frozen=True)
class Vocabulary:
    itos: tuple[str, ...]

    def __post_init__(self):
        if self.itos[: len(RESERVED_TOKENS)] != RESERVED_TOKENS:
            raise DatasetError("vocabulary must start with the reserved tokens")
        if len(set(self.itos)) != len(self.itos):
            raise DatasetError("duplicate vocabulary entries")
        object.__setattr__(self, "stoi", {w: i for i, w in enumerate(self.itos)})

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, word: str) -> bool:
        return word in self.stoi

    def id(self, word: str) -> int:
        return self.stoi.get(word, UNK)

    def word(self, idx: int) -> str:
        return self.itos[idx]

    @property
    def pad_id(self) -> int:
        return PAD

    @property
    def bos_id(self) -> int:
        return BOS

    @property
    def eos_id(self) -> int:
        return EOS

    @property
    def unk_id(self) -> int:
        return UNK


@dataclass
class CaptionRecord:
    image_id: str
    class_id: int
    tokens: list[int]
    raw_text: str
    attributes: dict | None = None


@dataclass
class ImageExample:
    pyramid: list[np.ndarray]
    class_id: int
    bbox: tuple[int, int, int, int] | None = None
    clamped: bool = False

    @property
    def resolutions(self) -> list[int]:
        return [level.shape[-1] for level in self.pyramid]


@dataclass(frozen=True)
class SplitManifest:
    train_classes: frozenset[int]
    test_classes: frozenset[int]
    seed: int


@dataclass(frozen=True)
class CropResult:
    image: np.ndarray
    box: tuple[int, int, int, int]  # x, y, w, h of the crop in source pixels
    clamped: bool


@dataclass
class CaptionDataset:
    records: list[CaptionRecord]
    images: dict[str, ImageExample]
    vocab: Vocabulary
    t_max: int
    class_names: list[str]
    attributes: dict[str, dict] | None = None
    _by_image: dict[str, list[int]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._by_image = {}
        for i, rec in enumerate(self.records):
            self._by_image.setdefault(rec.image_id, []).append(i)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def image_ids(self, classes: Iterable[int] | None = None) -> list[str]:
        keep = None if classes is None else set(classes)
        return sorted(i for i, ex in self.images.items() if keep is None or ex.class_id in keep)

    def captions_of(self, image_id: str) -> list[CaptionRecord]:
        return [self.records[i] for i in self._by_image[image_id]]

    def records_of_class(self, class_id: int) -> list[CaptionRecord]:
        return [r for r in self.records if r.class_id == class_id]


# ----------------------------------------------------------------------------
# Text
# ----------------------------------------------------------------------------

def clean_words(text: str) -> list[str]:
    return _PUNCT.sub(" ", text.lower()).split()


def build_vocabulary(corpus: Sequence[str], min_freq: int = 1) -> Vocabulary:
    """Build a vocabulary ordered by frequency (descending) then lexicographically.

    Words seen fewer than ``min_freq`` times are left out and later map to ``<unk>``.
    """
    if len(corpus) == 0:
        raise DatasetError("cannot build a vocabulary from an empty corpus")
    counts = Counter(w for text in corpus for w in clean_words(text))
    kept = sorted((w for w, n in counts.items() if n >= min_freq and w not in RESERVED_TOKENS),
                  key=lambda w: (-counts[w], w))
    return Vocabulary(RESERVED_TOKENS + tuple(kept))


def tokenize(text: str, vocab: Vocabulary, t_max: int, pad: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(ids, mask)``; with ``pad=True`` both are padded to ``t_max``."""
    words = clean_words(text)
    if not words:
        raise DatasetError(f"caption has no tokens after cleaning: {text!r}")
    ids = [vocab.id(w) for w in words[:t_max]]
    n = len(ids)
    length = t_max if pad else n
    out = np.full(length, PAD, dtype=np.int64)
    out[:n] = ids
    mask = np.zeros(length, dtype=bool)
    mask[:n] = True
    return out, mask


def detokenize(ids: Iterable[int], vocab: Vocabulary) -> str:
    words = []
    for i in ids:
        i = int(i)
        if i == EOS:
            break
        if i in (PAD, BOS):
            continue
        words.append(vocab.word(i))
    return " ".join(words)


def pad_tokens(seqs: Sequence[Sequence[int]], t_max: int) -> tuple[np.ndarray, np.ndarray]:
    out = np.full((len(seqs), t_max), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), t_max), dtype=bool)
    for i, s in enumerate(seqs):
        s = list(s)[:t_max]
        out[i, : len(s)] = s
        mask[i, : len(s)] = True
    return out, mask


# ----------------------------------------------------------------------------
# Preprocessing
# ----------------------------------------------------------------------------

def crop_to_bbox_ratio(image: np.ndarray, bbox: Sequence[int],
                       min_ratio: float = DEFAULT_CROP_RATIO) -> CropResult:
    """Crop ``image`` (H, W[, C]) around ``bbox`` so the box fills at least ``min_ratio`` of the crop.

    The crop keeps the box's aspect ratio and is as large as the ratio allows,
    centred on the box. When the window would leave the image it is shifted (and
    if necessary shrunk) to fit; such crops are returned with ``clamped=True``.
    """
    if not 0 < min_ratio <= 1:
        raise DatasetError(f"min_ratio must be in (0, 1], got {min_ratio}")
    H, W = image.shape[:2]
    x, y, w, h = (int(v) for v in bbox)
    if w <= 0 or h <= 0:
        raise DatasetError(f"degenerate bounding box {tuple(bbox)}")
    if x < 0 or y < 0 or x + w > W or y + h > H:
        raise DatasetError(f"bounding box {tuple(bbox)} outside image of size {W}x{H}")
    if w * h >= min_ratio * W * H:
        return CropResult(image, (0, 0, W, H), False)

    scale = 1.0 / math.sqrt(min_ratio)
    cw = max(w, int(math.floor(w * scale + 1e-9)))
    ch = max(h, int(math.floor(h * scale + 1e-9)))
    clamped = False
    if cw > W:
        cw, clamped = W, True
    if ch > H:
        ch, clamped = H, True
    cx, cy = x + w / 2.0, y + h / 2.0
    x0 = int(round(cx - cw / 2.0))
    y0 = int(round(cy - ch / 2.0))
    # keep the box inside the window, then the window inside the image
    x0 = min(max(x0, x + w - cw), x)
    y0 = min(max(y0, y + h - ch), y)
    nx0 = min(max(x0, 0), W - cw)
    ny0 = min(max(y0, 0), H - ch)
    clamped = clamped or (nx0, ny0) != (x0, y0)
    return CropResult(image[ny0:ny0 + ch, nx0:nx0 + cw], (nx0, ny0, cw, ch), clamped)


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) matrix of fractional pixel overlaps."""
    step = n_in / n_out
    edges = np.arange(n_out + 1) * step
    lo, hi = edges[:-1, None], edges[1:, None]
    j = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, j + 1) - np.maximum(lo, j), 0.0, None)
    return overlap / step


def area_resize(image: np.ndarray, size: int) -> np.ndarray:
    """Area-average a (C, H, W) float array down to (C, size, size)."""
    _, H, W = image.shape
    if H < size or W < size:
        raise DatasetError(f"cannot area-average {H}x{W} up to {size}x{size}")
    ah = _area_weights(H, size)
    aw = _area_weights(W, size)
    return ah @ image.astype(np.float64) @ aw.T


def to_unit_range(image: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 or (3, H, W) float in [-1, 1] → (3, H, W) float64 in [-1, 1]."""
    if image.dtype == np.uint8:
        if image.ndim == 2:
            image = np.repeat(image[..., None], 3, axis=-1)
        return image.transpose(2, 0, 1).astype(np.float64) / 127.5 - 1.0
    return np.asarray(image, dtype=np.float64)


def make_pyramid(image: np.ndarray, base_resolution: int = DEFAULT_RESOLUTIONS[0],
                 levels: int = len(DEFAULT_RESOLUTIONS)) -> list[np.ndarray]:
    """Area-averaged square pyramid with edges ``base * 2**k``, smallest first."""
    img = to_unit_range(image)
    top = base_resolution * 2 ** (levels - 1)
    if min(img.shape[1:]) < top:
        raise DatasetError(f"image {img.shape[1]}x{img.shape[2]} smaller than largest level {top}")
    out = []
    for k in range(levels):
        level = area_resize(img, base_resolution * 2 ** k)
        out.append(np.clip(level, -1.0, 1.0).astype(np.float32))
    return out


def split_class_disjoint(records: Iterable[CaptionRecord], train_fraction: float = 0.75,
                         seed: int = 0) -> SplitManifest:
    classes = sorted({r.class_id for r in records})
    if len(classes) < 2:
        raise DatasetError("class-disjoint split needs at least two classes")
    n_train = min(max(int(round(train_fraction * len(classes))), 1), len(classes) - 1)
    order = np.random.default_rng(seed).permutation(len(classes))
    train = frozenset(classes[i] for i in order[:n_train])
    test = frozenset(classes) - train
    return SplitManifest(train, test, seed)


# ----------------------------------------------------------------------------
# Synthetic shapes
# ----------------------------------------------------------------------------

COLORS = {
    "red": (220, 30, 30),
    "green": (30, 200, 40),
    "blue": (40, 60, 230),
    "yellow": (230, 220, 30),
    "purple": (150, 40, 210),
    "cyan": (30, 210, 220),
    "orange": (240, 130, 20),
}
SHAPES = ("circle", "square", "triangle", "diamond")
SIZES = {"small": 0.2, "large": 0.34}  # shape extent as a fraction of the image edge
POSITIONS = ("upper left", "upper right", "lower left", "lower right")
TEMPLATES = (
    "a {size} {color} {shape} in the {position}",
    "the {position} has a {size} {color} {shape}",
    "{size} {color} {shape} in the {position} corner",
)


def synthetic_class(class_id: int) -> tuple[str, str]:
    """Class k is (color k mod 7, shape k mod 4); unique for k < 28."""
    colors = list(COLORS)
    if class_id >= len(colors) * len(SHAPES):
        raise DatasetError(f"at most {len(colors) * len(SHAPES)} synthetic classes")
    return colors[class_id % len(colors)], SHAPES[class_id % len(SHAPES)]


def shape_mask(shape: str, edge: int, cx: float, cy: float, half: float) -> np.ndarray:
    yy, xx = np.mgrid[0:edge, 0:edge] + 0.5
    dx, dy = xx - cx, yy - cy
    if shape == "circle":
        return dx ** 2 + dy ** 2 <= half ** 2
    if shape == "square":
        return (np.abs(dx) <= half * 0.85) & (np.abs(dy) <= half * 0.85)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= half
    if shape == "triangle":
        # apex up, base at cy + half
        t = (dy + half) / (2 * half)
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= t * half)
    raise DatasetError(f"unknown shape {shape!r}")


def render_shape(edge: int, color: str, shape: str, size: str, position: str,
                 rng: np.random.Generator, supersample: int = 2) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    """Render one shape on a black background as (edge, edge, 3) uint8 plus its pixel bbox."""
    big = edge * supersample
    half = SIZES[size] * big / 2 + rng.uniform(-0.02, 0.02) * big
    row, col = position.split()
    qx = 0.25 if col == "left" else 0.75
    qy = 0.25 if row == "upper" else 0.75
    cx = (qx + rng.uniform(-0.04, 0.04)) * big
    cy = (qy + rng.uniform(-0.04, 0.04)) * big
    mask = shape_mask(shape, big, cx, cy, half)
    canvas = np.zeros((big, big, 3), dtype=np.float64)
    rgb = np.asarray(COLORS[color], dtype=np.float64)
    shade = rng.uniform(0.85, 1.0)
    canvas[mask] = rgb * shade
    canvas += rng.normal(0.0, 4.0, size=canvas.shape)
    small = area_resize(canvas.transpose(2, 0, 1), edge).transpose(1, 2, 0)
    img = np.clip(np.round(small), 0, 255).astype(np.uint8)
    ys, xs = np.nonzero(shape_mask(shape, edge, cx / supersample, cy / supersample, half / supersample))
    if len(xs) == 0:
        bbox = (int(cx / supersample), int(cy / supersample), 1, 1)
    else:
        bbox = (int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1))
    return img, bbox


def generate_synthetic_dataset(n_classes: int = 8, n_per_class: int = 64,
                               resolutions: Sequence[int] = DEFAULT_RESOLUTIONS, seed: int = 0,
                               captions_per_image: int = 2, t_max: int = 12) -> CaptionDataset:
    """Colored shapes on black, captioned from templates; each class is a (color, shape) pair.

    Size and quadrant vary within a class and appear in the captions, so the
    caption/image correspondence can be checked programmatically.
    """
    if n_classes < 2:
        raise DatasetError("need at least two classes")
    if n_per_class < 1 or not 1 <= captions_per_image <= len(TEMPLATES):
        raise DatasetError("n_per_class must be >= 1 and captions_per_image in 1..3")
    resolutions = _check_resolutions(resolutions)
    rng = np.random.default_rng(seed)
    raw: list[tuple[str, int, str, dict]] = []
    images: dict[str, ImageExample] = {}
    attributes: dict[str, dict] = {}
    class_names = []
    for k in range(n_classes):
        color, shape = synthetic_class(k)
        class_names.append(f"{color} {shape}")
        for n in range(n_per_class):
            image_id = f"{k:03d}_{n:04d}"
            size = list(SIZES)[rng.integers(len(SIZES))]
            position = POSITIONS[rng.integers(len(POSITIONS))]
            pixels, bbox = render_shape(resolutions[-1], color, shape, size, position, rng)
            attrs = {"color": color, "shape": shape, "size": size, "position": position,
                     "bbox": list(bbox)}
            attributes[image_id] = attrs
            images[image_id] = ImageExample(make_pyramid(pixels, resolutions[0], len(resolutions)), k,
                                            (0, 0, resolutions[-1], resolutions[-1]))
            for t in rng.permutation(len(TEMPLATES))[:captions_per_image]:
                raw.append((image_id, k, TEMPLATES[t].format(**attrs), attrs))
    vocab = build_vocabulary([r[2] for r in raw])
    records = [CaptionRecord(i, k, tokenize(text, vocab, t_max)[0].tolist(), text, a)
               for i, k, text, a in raw]
    return CaptionDataset(records, images, vocab, t_max, class_names, attributes)


def _check_resolutions(resolutions: Sequence[int]) -> list[int]:
    resolutions = [int(r) for r in resolutions]
    for a, b in zip(resolutions, resolutions[1:]):
        if b != 2 * a:
            raise DatasetError(f"resolutions must double per level, got {resolutions}")
    return resolutions


# ----------------------------------------------------------------------------
# On-disk layout
# ----------------------------------------------------------------------------

def _class_dir(class_id: int, name: str) -> str:
    return f"{class_id + 1:03d}.{name.replace(' ', '_')}"


def write_dataset_layout(root: str | Path, dataset: CaptionDataset) -> Path:
    """Write ``dataset`` in the CUB-compatible layout (largest pyramid level as PNG)."""
    root = Path(root)
    lines = []
    for image_id in dataset.image_ids():
        ex = dataset.images[image_id]
        cdir = _class_dir(ex.class_id, dataset.class_names[ex.class_id])
        (root / "images" / cdir).mkdir(parents=True, exist_ok=True)
        (root / "text" / cdir).mkdir(parents=True, exist_ok=True)
        top = ex.pyramid[-1]
        pixels = np.clip(np.round((top.transpose(1, 2, 0).astype(np.float64) + 1.0) * 127.5), 0, 255)
        Image.fromarray(pixels.astype(np.uint8)).save(root / "images" / cdir / f"{image_id}.png")
        caps = [r.raw_text for r in dataset.captions_of(image_id)]
        (root / "text" / cdir / f"{image_id}.txt").write_text("\n".join(caps) + "\n")
        bx = ex.bbox or (0, 0, top.shape[-1], top.shape[-1])
        lines.append(f"{image_id} {bx[0]} {bx[1]} {bx[2]} {bx[3]}")
    (root / "bounding_boxes.txt").write_text("\n".join(lines) + "\n")
    if dataset.attributes is not None:
        (root / "attributes.json").write_text(json.dumps(dataset.attributes, indent=1, sort_keys=True))
    return root


def _read_bboxes(path: Path) -> dict[str, tuple[int, int, int, int]]:
    if not path.exists():
        raise DatasetError(f"missing bounding-box table: {path}")
    boxes = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        try:
            if len(parts) != 5:
                raise ValueError
            boxes[parts[0]] = tuple(int(round(float(v))) for v in parts[1:])
        except ValueError:
            raise DatasetError(f"malformed bbox row {lineno} in {path}: {line!r}") from None
    return boxes


def load_cub_layout(root: str | Path, resolutions: Sequence[int] = DEFAULT_RESOLUTIONS,
                    crop_ratio: float | None = DEFAULT_CROP_RATIO, t_max: int = 18,
                    min_freq: int = 1, vocab: Vocabulary | None = None) -> CaptionDataset:
    """Load ``images/<class>/<id>.{jpg,png}`` with ``text/<class>/<id>.txt`` captions.

    Class ids follow the sorted class-directory order. ``attributes.json`` is
    picked up when present (synthetic datasets written by :func:`write_dataset_layout`).
    """
    root = Path(root)
    resolutions = _check_resolutions(resolutions)
    image_dir = root / "images"
    if not image_dir.is_dir():
        raise DatasetError(f"missing image directory: {image_dir}")
    boxes = _read_bboxes(root / "bounding_boxes.txt")
    class_dirs = sorted(p for p in image_dir.iterdir() if p.is_dir())
    class_names = [re.sub(r"^\d+\.", "", p.name).replace("_", " ") for p in class_dirs]
    raw, images = [], {}
    for class_id, cdir in enumerate(class_dirs):
        for img_path in sorted(p for p in cdir.iterdir() if p.suffix.lower() in (".jpg", ".jpeg", ".png")):
            image_id = img_path.stem
            text_path = root / "text" / cdir.name / f"{image_id}.txt"
            if not text_path.exists():
                raise DatasetError(f"missing caption file: {text_path}")
            pixels = np.asarray(Image.open(img_path).convert("RGB"))
            bbox = boxes.get(image_id)
            clamped = False
            if bbox is not None and crop_ratio is not None:
                crop = crop_to_bbox_ratio(pixels, bbox, crop_ratio)
                pixels, clamped = crop.image, crop.clamped
            images[image_id] = ImageExample(make_pyramid(pixels, resolutions[0], len(resolutions)),
                                            class_id, bbox, clamped)
            for line in text_path.read_text().splitlines():
                if line.strip():
                    raw.append((image_id, class_id, line.strip()))
    if not raw:
        raise DatasetError(f"no captions found under {root}")
    attributes = None
    if (root / "attributes.json").exists():
        attributes = json.loads((root / "attributes.json").read_text())
    if vocab is None:
        vocab = build_vocabulary([r[2] for r in raw], min_freq)
    records = [CaptionRecord(i, k, tokenize(t, vocab, t_max)[0].tolist(), t,
                             None if attributes is None else attributes.get(i))
               for i, k, t in raw]
    return CaptionDataset(records, images, vocab, t_max, class_names, attributes)
