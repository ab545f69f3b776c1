"""Toy few-shot segmentation data, class folds and episodic sampling."""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dtc import read_dtc, write_dtc

DATASET_VERSION = 1
SHAPES = ("ellipse", "rectangle", "triangle")
FG_FRACTION = (0.05, 0.8)


class DatasetError(ValueError):
    pass


class DatasetVersionError(DatasetError):
    pass


@dataclass(frozen=True)
class ToyDatasetConfig:
    num_classes: int = 10
    images_per_class: int = 8
    size: int = 96


@dataclass
class ToyDataset:
    """class id -> list of (image [H,W,3] float32 in [0,1], mask [H,W] uint8 in {0,1})."""

    classes: list
    items: dict
    seed: int
    size: int

    def image(self, class_id, index):
        return self.items[class_id][index][0]

    def mask(self, class_id, index):
        return self.items[class_id][index][1]


@dataclass(frozen=True)
class FoldSplit:
    fold: int
    train_classes: tuple
    test_classes: tuple


@dataclass
class Episode:
    """n support pairs and one query pair from one class.

    ``support_ids``/``query_id`` are (class, index) keys into the dataset, so
    features can be cached per image.
    """

    support: list
    query: tuple
    class_id: int
    support_ids: list = field(default_factory=list)
    query_id: tuple | None = None

    @property
    def n(self):
        return len(self.support)


# --------------------------------------------------------------------------
# generation


def _rasterize(kind, size, cy, cx, a, b, theta):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    if kind == "ellipse":
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    if kind == "rectangle":
        return (np.abs(u) <= a) & (np.abs(v) <= b)
    # triangle inscribed in the (a, b) ellipse
    angles = np.array([-np.pi / 2, np.pi / 6, 5 * np.pi / 6])
    vx, vy = a * np.cos(angles), b * np.sin(angles)
    crosses = []
    for k in range(3):
        x0, y0, x1, y1 = vx[k], vy[k], vx[(k + 1) % 3], vy[(k + 1) % 3]
        crosses.append((x1 - x0) * (v - y0) - (y1 - y0) * (u - x0))
    crosses = np.stack(crosses)
    return (crosses >= 0).all(axis=0) | (crosses <= 0).all(axis=0)


def _smooth_noise(rng, size, cells):
    coarse = rng.uniform(0, 1, (cells, cells))
    idx = np.linspace(0, cells - 1, size)
    i0 = np.floor(idx).astype(int)
    i1 = np.minimum(i0 + 1, cells - 1)
    f = idx - i0
    rows = coarse[i0] * (1 - f)[:, None] + coarse[i1] * f[:, None]
    return rows[:, i0] * (1 - f)[None, :] + rows[:, i1] * f[None, :]


def _class_style(seed, class_id):
    rng = np.random.default_rng([seed, 0, class_id])
    hue = rng.uniform(0, 1, 3)
    color = 0.15 + 0.85 * (hue - hue.min()) / max(np.ptp(hue), 1e-6)
    return {
        "shape": SHAPES[class_id % len(SHAPES)],
        "color": color,
        "freq": rng.uniform(0.15, 0.45),
        "angle": rng.uniform(0, np.pi),
        "amp": rng.uniform(0.1, 0.25),
    }


def _make_pair(rng, style, size):
    lo, hi = FG_FRACTION
    for _ in range(100):
        a = rng.uniform(0.12, 0.42) * size
        b = rng.uniform(0.12, 0.42) * size
        cy, cx = rng.uniform(0.3, 0.7, 2) * size
        mask = _rasterize(style["shape"], size, cy, cx, a, b, rng.uniform(0, np.pi))
        frac = mask.mean()
        if lo <= frac <= hi and not mask.all():
            break
    else:
        raise DatasetError("could not place a shape within the foreground-fraction bounds")

    gray = 0.25 + 0.5 * _smooth_noise(rng, size, 6)
    tint = rng.uniform(-0.08, 0.08, 3)
    image = np.clip(gray[..., None] + tint, 0, 1)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    phase = np.cos(style["angle"]) * xx + np.sin(style["angle"]) * yy
    stripes = style["amp"] * np.sin(style["freq"] * phase + rng.uniform(0, 2 * np.pi))
    fg = np.clip(style["color"] * (0.85 + 0.3 * rng.uniform()) + stripes[..., None], 0, 1)
    image = np.where(mask[..., None], fg, image)
    image = np.clip(image + rng.normal(0, 0.02, image.shape), 0, 1)
    return image.astype(np.float32), mask.astype(np.uint8)


def generate_toy_dataset(cfg=None, seed=0):
    """Seeded procedural shapes: per class a fixed shape family, colour and stripe texture."""
    cfg = cfg or ToyDatasetConfig()
    if cfg.num_classes < 2:
        raise DatasetError("need at least 2 classes")
    if cfg.images_per_class < 6:
        raise DatasetError("need at least 6 images per class")
    if cfg.size < 32:
        raise DatasetError(f"image size {cfg.size} too small for shapes (minimum 32)")
    items = {}
    for c in range(cfg.num_classes):
        style = _class_style(seed, c)
        pairs = []
        for i in range(cfg.images_per_class):
            pairs.append(_make_pair(np.random.default_rng([seed, 0, c, i]), style, cfg.size))
        items[c] = pairs
    return ToyDataset(list(range(cfg.num_classes)), items, seed, cfg.size)


# --------------------------------------------------------------------------
# folds and episodes


def make_folds(class_ids, k):
    """k class folds; fold j tests on the j-th contiguous slice of the sorted ids."""
    ids = sorted(class_ids)
    if k < 1 or len(ids) % k:
        raise ValueError(f"{len(ids)} classes cannot be split evenly into {k} folds")
    per = len(ids) // k
    folds = []
    for j in range(k):
        test = tuple(ids[j * per : (j + 1) * per])
        train = tuple(c for c in ids if c not in test)
        folds.append(FoldSplit(j, train, test))
    return folds


def sample_episode(dataset, fold, n, rng, split="test"):
    """Uniform class from the fold's split, then n+1 distinct images of it (last one is the query)."""
    if n < 1:
        raise ValueError("shots must be >= 1")
    classes = fold.test_classes if split == "test" else fold.train_classes
    if not classes:
        raise DatasetError(f"fold {fold.fold} has no {split} classes")
    class_id = classes[int(rng.integers(len(classes)))]
    pool = len(dataset.items[class_id])
    if pool < n + 1:
        raise DatasetError(f"class {class_id} has {pool} images; {n}-shot episodes need {n + 1}")
    picks = [int(i) for i in rng.choice(pool, size=n + 1, replace=False)]
    pairs = dataset.items[class_id]
    return Episode(
        support=[pairs[i] for i in picks[:n]],
        query=pairs[picks[n]],
        class_id=class_id,
        support_ids=[(class_id, i) for i in picks[:n]],
        query_id=(class_id, picks[n]),
    )


def sample_episodes(dataset, fold, n, count, seed, split="test"):
    rng = np.random.default_rng(seed)
    return [sample_episode(dataset, fold, n, rng, split) for _ in range(count)]


# --------------------------------------------------------------------------
# storage


def save_dataset(dataset, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    table = []
    for c in dataset.classes:
        for i, (image, mask) in enumerate(dataset.items[c]):
            img_name, mask_name = f"img_c{c}_{i}", f"mask_c{c}_{i}"
            write_dtc(directory / img_name, image)
            write_dtc(directory / mask_name, mask)
            table.append({"class": c, "index": i, "image": img_name, "mask": mask_name})
    manifest = {
        "version": DATASET_VERSION,
        "seed": dataset.seed,
        "size": dataset.size,
        "classes": list(dataset.classes),
        "items": table,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(directory):
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"missing dataset manifest: {path}")
    try:
        manifest = json.loads(path.read_text())
    except ValueError as exc:
        raise DatasetError(f"corrupt dataset manifest {path}: {exc}") from exc
    if manifest.get("version") != DATASET_VERSION:
        raise DatasetVersionError(f"dataset version {manifest.get('version')!r}, this build reads {DATASET_VERSION}")
    try:
        items = {int(c): [] for c in manifest["classes"]}
        for entry in sorted(manifest["items"], key=lambda e: (e["class"], e["index"])):
            image = read_dtc(directory / entry["image"], expect_dtype="f32")
            mask = read_dtc(directory / entry["mask"], expect_dtype="u8")
            items[int(entry["class"])].append((image, mask))
        return ToyDataset(sorted(items), items, int(manifest["seed"]), int(manifest["size"]))
    except (KeyError, TypeError) as exc:
        raise DatasetError(f"corrupt dataset manifest {path}: missing field {exc}") from exc
