"""Evaluation: Inception score with a dataset-trained classifier, MOS tooling,
a programmatic caption-consistency probe for synthetic shapes, and metric curves."""

from __future__ import annotations

import colorsys
import csv
import time
from dataclasses import dataclass
from pathlib import Path
from statistics import mean, stdev
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .dataset import COLORS, POSITIONS, SHAPES, SIZES, CaptionDataset, pad_tokens, shape_mask

METRIC_COLUMNS = ("epoch", "model", "metric", "value", "seed")
MOS_COLUMNS = ("rater_id", "item_id", "source_tag", "rating", "unix_time")
SOURCE_TAGS = ("ground_truth", "model_A", "model_B")


# ----------------------------------------------------------------------------
# Inception score
# ----------------------------------------------------------------------------

def _check_distribution(p: np.ndarray, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if (p < 0).any() or not np.allclose(p.sum(-1), 1.0, atol=1e-9):
        raise ValueError(f"{name} is not a probability distribution")
    return p


def kl_divergence(p, q) -> float:
    """sum p log(p / q) in nats, with 0 log 0 = 0."""
    p = _check_distribution(p, "P")
    q = _check_distribution(q, "Q")
    support = p > 0
    if (q[support] <= 0).any():
        raise ValueError("Q is zero where P is positive")
    return float(np.sum(p[support] * np.log(p[support] / q[support])))


def inception_score(conditionals, splits: int = 1) -> float:
    """exp of the mean KL between each p(y|x) and the marginal p(y); averaged over ``splits``."""
    conds = np.asarray(conditionals, dtype=np.float64)
    if conds.ndim != 2 or len(conds) == 0:
        raise ValueError("need a non-empty (N, K) array of conditionals")
    _check_distribution(conds, "conditional")
    scores = []
    for part in np.array_split(conds, splits):
        marginal = part.mean(axis=0)
        scores.append(np.exp(np.mean([kl_divergence(c, marginal) for c in part])))
    return float(np.mean(scores))


class EvalClassifier(nn.Module):
    """Small conv classifier; batch norm lets it pick up shape and not only colour."""

    def __init__(self, n_classes: int, resolution: int = 64, channels: int = 16):
        super().__init__()
        layers, cin, edge = [], 3, resolution
        while edge > 4:
            layers += [nn.Conv2d(cin, channels, 3, padding=1), nn.BatchNorm2d(channels), nn.ReLU(), nn.MaxPool2d(2)]
            cin, edge = channels, edge // 2
            channels = min(channels * 2, 64)
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(cin, n_classes)

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.features(x).mean(dim=(2, 3)))


@dataclass
class ClassifierRun:
    model: EvalClassifier
    val_accuracy: list[float]


@torch.no_grad()
def classify(model: EvalClassifier, images: Tensor, batch_size: int = 128) -> np.ndarray:
    model.eval()
    out = [torch.softmax(model(images[i:i + batch_size].float()), dim=-1).double()
           for i in range(0, len(images), batch_size)]
    probs = torch.cat(out).numpy()
    return probs / probs.sum(axis=1, keepdims=True)


def stack_images(dataset: CaptionDataset, image_ids: Sequence[str], level: int = -1) -> Tensor:
    return torch.from_numpy(np.stack([dataset.images[i].pyramid[level] for i in image_ids]))


def train_eval_classifier(dataset: CaptionDataset, seed: int = 0, val_fraction: float = 0.2,
                          patience: int = 5, max_epochs: int = 40, batch_size: int = 32,
                          lr: float = 1e-3) -> ClassifierRun:
    """Train the stand-in scoring classifier on real images until validation accuracy stops improving."""
    if dataset.n_classes < 2:
        raise ValueError("classifier needs at least two classes")
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    ids = dataset.image_ids()
    order = torch.randperm(len(ids), generator=gen).tolist()
    n_val = max(1, int(round(val_fraction * len(ids))))
    val_ids = [ids[i] for i in order[:n_val]]
    train_ids = [ids[i] for i in order[n_val:]]
    x_train, x_val = stack_images(dataset, train_ids), stack_images(dataset, val_ids)
    y_train = torch.tensor([dataset.images[i].class_id for i in train_ids])
    y_val = torch.tensor([dataset.images[i].class_id for i in val_ids])

    model = EvalClassifier(dataset.n_classes, x_train.shape[-1])
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    history: list[float] = []
    best, best_state, stale = -1.0, None, 0
    for _ in range(max_epochs):
        model.train()
        perm = torch.randperm(len(train_ids), generator=gen)
        for i in range(0, len(perm), batch_size):
            idx = perm[i:i + batch_size]
            loss = nn.functional.cross_entropy(model(x_train[idx]), y_train[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        acc = float((torch.from_numpy(classify(model, x_val)).argmax(1) == y_val).float().mean())
        history.append(acc)
        if acc > best:
            best, stale = acc, 0
            best_state = {k: v.clone() for k, v in model.state_dict().items()}
        else:
            stale += 1
            if stale >= patience:
                break
    model.load_state_dict(best_state)
    model.eval()
    return ClassifierRun(model, history)


@torch.no_grad()
def sample_for_is(text_encoder, generator, dataset: CaptionDataset, classes: Iterable[int],
                  per_class: int = 20, seed: int = 0, batch_size: int = 64) -> tuple[Tensor, list[int]]:
    """Draw ``per_class`` captions per class without replacement and generate one final-stage image each."""
    rng = np.random.default_rng(seed)
    chosen = []
    for k in sorted(classes):
        recs = dataset.records_of_class(k)
        take = rng.choice(len(recs), size=min(per_class, len(recs)), replace=False)
        chosen += [recs[i] for i in sorted(take)]
    gen = torch.Generator().manual_seed(seed)
    dtype = next(generator.parameters()).dtype
    text_encoder.eval()
    generator.eval()
    images = []
    for i in range(0, len(chosen), batch_size):
        batch = chosen[i:i + batch_size]
        tokens, mask = pad_tokens([r.tokens for r in batch], dataset.t_max)
        tokens, mask = torch.from_numpy(tokens), torch.from_numpy(mask)
        words, sent = text_encoder(tokens, mask)
        eps = torch.randn(len(batch), generator.ca.d_cond, generator=gen, dtype=dtype)
        z = torch.randn(len(batch), generator.d_z, generator=gen, dtype=dtype)
        images.append(generator(sent, words, mask, eps, z).images[-1])
    return torch.cat(images), [r.class_id for r in chosen]


# ----------------------------------------------------------------------------
# Mean opinion score
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class MosItem:
    item_id: str
    source_tag: str
    image_path: str
    caption: str


@dataclass(frozen=True)
class MosRating:
    rater_id: str
    item_id: str
    source_tag: str
    rating: int
    unix_time: float


@dataclass
class MosSession:
    rater_id: str
    ratings: list[MosRating]
    complete: bool


@dataclass(frozen=True)
class MosSummary:
    mean: float
    n: int
    std: float


def read_mos_items(path: str | Path) -> list[MosItem]:
    """Manifest CSV with header ``item_id,source_tag,image_path,caption``."""
    with open(path, newline="") as fh:
        return [MosItem(r["item_id"], r["source_tag"], r["image_path"], r["caption"]) for r in csv.DictReader(fh)]


def read_mos_log(path: str | Path) -> list[MosRating]:
    path = Path(path)
    if not path.exists():
        return []
    out = []
    with path.open(newline="") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            rater, item, tag, rating, ts = row
            out.append(MosRating(rater, item, tag, int(rating), float(ts)))
    return out


def parse_rating(text: str) -> int | None:
    text = text.strip()
    if text in {"1", "2", "3", "4", "5"}:
        return int(text)
    return None


def mos_record(items: Sequence[MosItem], rater_id: str, log_path: str | Path, seed: int = 0,
               input_fn: Callable[[str], str] = input, print_fn: Callable[[str], None] = print,
               clock: Callable[[], float] = time.time) -> MosSession:
    """Terminal rating flow. Items come in a seeded random order; ratings are appended
    to ``log_path`` as they are given, so an interrupted session resumes where it stopped."""
    for it in items:
        if it.source_tag not in SOURCE_TAGS:
            raise ValueError(f"unknown source tag {it.source_tag!r} for item {it.item_id}")
    done = {r.item_id for r in read_mos_log(log_path) if r.rater_id == rater_id}
    order = np.random.default_rng(seed).permutation(len(items))
    pending = [items[i] for i in order if items[i].item_id not in done]
    ratings: list[MosRating] = []
    log_path = Path(log_path)
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with log_path.open("a", newline="") as fh:
        writer = csv.writer(fh)
        for k, item in enumerate(pending, 1):
            print_fn(f"[{k}/{len(pending)}] {item.image_path}\n    caption: {item.caption}")
            rating = None
            while rating is None:
                try:
                    answer = input_fn("quality 1 (poor) .. 5 (high): ")
                except (EOFError, KeyboardInterrupt):
                    print_fn("session interrupted; rerun to resume")
                    return MosSession(rater_id, ratings, False)
                rating = parse_rating(answer)
                if rating is None:
                    print_fn("please answer with a whole number from 1 to 5")
            rec = MosRating(rater_id, item.item_id, item.source_tag, rating, clock())
            writer.writerow([rec.rater_id, rec.item_id, rec.source_tag, rec.rating, repr(rec.unix_time)])
            fh.flush()
            ratings.append(rec)
    return MosSession(rater_id, ratings, True)


def mos_report(ratings: Iterable[MosRating]) -> dict[str, MosSummary]:
    by_tag: dict[str, list[int]] = {}
    for r in ratings:
        by_tag.setdefault(r.source_tag, []).append(r.rating)
    if not by_tag:
        raise ValueError("no MOS ratings to report")
    return {tag: MosSummary(mean(v), len(v), stdev(v) if len(v) > 1 else 0.0)
            for tag, v in sorted(by_tag.items())}


# ----------------------------------------------------------------------------
# Caption consistency on synthetic shapes
# ----------------------------------------------------------------------------

_HUES = {name: colorsys.rgb_to_hsv(*(c / 255 for c in rgb))[0] for name, rgb in COLORS.items()}


@dataclass
class ConsistencyResult:
    matches: dict[str, bool]
    predicted: dict[str, str | None]

    @property
    def accuracy(self) -> float:
        return sum(self.matches.values()) / len(self.matches)


def _foreground(rgb: np.ndarray, threshold: float = 0.3) -> np.ndarray:
    """rgb: (H, W, 3) in [0, 1]; bright-and-saturated pixels."""
    mx = rgb.max(-1)
    mn = rgb.min(-1)
    return (mx > threshold) & ((mx - mn) > 0.5 * mx)


def _dominant_color(rgb: np.ndarray, fg: np.ndarray) -> str:
    px = rgb[fg]
    hues = np.array([colorsys.rgb_to_hsv(*p)[0] for p in px])
    names = list(_HUES)
    ref = np.array([_HUES[n] for n in names])
    d = np.abs(hues[:, None] - ref[None, :])
    d = np.minimum(d, 1.0 - d)
    votes = np.bincount(d.argmin(1), minlength=len(names))
    return names[int(votes.argmax())]


def _best_shape(fg: np.ndarray) -> str:
    ys, xs = np.nonzero(fg)
    edge = fg.shape[0]
    cx = (xs.min() + xs.max() + 1) / 2.0
    cy = (ys.min() + ys.max() + 1) / 2.0
    base = max(xs.max() - xs.min() + 1, ys.max() - ys.min() + 1) / 2.0
    best, best_iou = SHAPES[0], -1.0
    for shape in SHAPES:
        scale = base / 0.85 if shape == "square" else base
        for f in np.linspace(0.8, 1.2, 9):
            tmpl = shape_mask(shape, edge, cx, cy, scale * f)
            iou = (tmpl & fg).sum() / max((tmpl | fg).sum(), 1)
            if iou > best_iou:
                best, best_iou = shape, iou
    return best


def analyze_shape_image(image: np.ndarray) -> dict[str, str | None]:
    """Read (color, shape, size, position) off a (3, H, W) image in [-1, 1]."""
    rgb = (np.clip(np.asarray(image, dtype=np.float64), -1, 1).transpose(1, 2, 0) + 1.0) / 2.0
    fg = _foreground(rgb)
    if fg.sum() < 3:
        return {"color": None, "shape": None, "size": None, "position": None}
    edge = fg.shape[0]
    ys, xs = np.nonzero(fg)
    row = "upper" if ys.mean() < edge / 2 else "lower"
    col = "left" if xs.mean() < edge / 2 else "right"
    shape = _best_shape(fg)
    extent = max(xs.max() - xs.min() + 1, ys.max() - ys.min() + 1) / edge
    if shape == "square":
        extent /= 0.85
    size = "small" if extent < (SIZES["small"] + SIZES["large"]) / 2 else "large"
    return {"color": _dominant_color(rgb, fg), "shape": shape, "size": size, "position": f"{row} {col}"}


def caption_consistency(image, attributes: dict | None) -> ConsistencyResult:
    if not attributes:
        raise ValueError("caption consistency needs ground-truth attributes")
    predicted = analyze_shape_image(image)
    keys = [k for k in ("color", "shape", "size", "position") if k in attributes]
    return ConsistencyResult({k: predicted[k] == attributes[k] for k in keys}, predicted)


# ----------------------------------------------------------------------------
# Metrics files and curves
# ----------------------------------------------------------------------------

def append_metrics(path: str | Path, rows: Iterable[Sequence]) -> Path:
    """Append ``epoch,model,metric,value,seed`` rows, writing the header for a new file."""
    path = Path(path)
    new = not path.exists()
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(METRIC_COLUMNS)
        for epoch, model, metric, value, seed in rows:
            writer.writerow([epoch, model, metric, repr(float(value)), seed])
    return path


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [dict(r, epoch=int(r["epoch"]), value=float(r["value"]), seed=int(r["seed"]))
                for r in csv.DictReader(fh)]


def plot_curve(points: Sequence[tuple[int, float]], path: str | Path, label: str = "inception score",
               title: str | None = None) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    xs, ys = zip(*points)
    ax.plot(xs, ys, marker="o")
    ax.set_xlabel("epoch")
    ax.set_ylabel(label)
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def is_curve(checkpoints: Sequence[str | Path], dataset: CaptionDataset, classifier: EvalClassifier,
             out_dir: str | Path, classes: Iterable[int] | None = None, per_class: int = 20,
             seed: int = 0, model_name: str = "generator") -> list[tuple[int, float]]:
    """Inception score at each checkpoint with a fixed sampling seed → metrics CSV and a line plot."""
    from .training import load_models

    if len(checkpoints) < 2:
        raise ValueError("an IS curve needs at least two checkpoints")
    classes = sorted(set(range(dataset.n_classes)) if classes is None else set(classes))
    points = []
    for path in checkpoints:
        models = load_models(path)
        images, _ = sample_for_is(models.text_encoder, models.generator, dataset, classes, per_class, seed)
        points.append((models.epoch, inception_score(classify(classifier, images))))
    points.sort()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    append_metrics(out_dir / "is_curve.csv", [(e, model_name, "inception_score", v, seed) for e, v in points])
    plot_curve(points, out_dir / "is_curve.png", title=f"{model_name} inception score")
    return points
