"""Datasets, continual task streams and augmentation.

Every image set is held in memory as a uint8 tensor of shape (N, C, H, W);
normalisation and augmentation are applied per batch.  Two small sets are
available without any download and back the CPU-scale configs:

* ``digits``  -- scikit-learn's bundled 8x8 handwritten digits, upsampled.
* ``glyphs``  -- procedurally rendered strokes and outlines (10 classes).
"""
from __future__ import annotations

import functools
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DatasetUnavailable

DATA_ROOT_ENV = "TWF_DATA_ROOT"


@dataclass(frozen=True)
class DatasetInfo:
    name: str
    num_classes: int
    channels: int
    native_size: int
    hflip: bool = True


DATASETS = {
    "cifar10": DatasetInfo("cifar10", 10, 3, 32),
    "cifar100": DatasetInfo("cifar100", 100, 3, 32),
    "svhn": DatasetInfo("svhn", 10, 3, 32, hflip=False),
    "tiny_imagenet": DatasetInfo("tiny_imagenet", 200, 3, 64),
    "cub200": DatasetInfo("cub200", 200, 3, 224),
    "digits": DatasetInfo("digits", 10, 1, 8, hflip=False),
    "glyphs": DatasetInfo("glyphs", 10, 1, 32, hflip=False),
}

# Channel statistics of the training splits (pixel values in [0, 1]).
NORMALIZATION = {
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
    "cifar100": ((0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762)),
    "svhn": ((0.4377, 0.4438, 0.4728), (0.1980, 0.2010, 0.1970)),
    "tiny_imagenet": ((0.4802, 0.4481, 0.3975), (0.2770, 0.2691, 0.2821)),
    "cub200": ((0.4856, 0.4994, 0.4324), (0.2322, 0.2277, 0.2665)),
}


def dataset_info(dataset_id):
    try:
        return DATASETS[dataset_id]
    except KeyError:
        raise ConfigError(
            f"unknown dataset_id {dataset_id!r}; expected one of {sorted(DATASETS)}"
        ) from None


def resolve_data_root(data_root=None):
    if data_root is None:
        data_root = os.environ.get(DATA_ROOT_ENV, "data")
    return Path(data_root)


class ImageSet:
    """In-memory labelled image set with fixed normalisation statistics."""

    def __init__(self, images, labels, mean, std, name=""):
        images = torch.as_tensor(images)
        if images.dtype != torch.uint8 or images.dim() != 4:
            raise ValueError("images must be a uint8 tensor of shape (N, C, H, W)")
        self.images = images
        self.labels = torch.as_tensor(labels, dtype=torch.long)
        if len(self.labels) != len(self.images):
            raise ValueError("images and labels differ in length")
        self.mean = torch.tensor(mean, dtype=torch.float32).view(1, -1, 1, 1)
        self.std = torch.tensor(std, dtype=torch.float32).view(1, -1, 1, 1)
        self.name = name

    def __len__(self):
        return len(self.labels)

    @property
    def resolution(self):
        return tuple(self.images.shape[-2:])

    @property
    def channels(self):
        return self.images.shape[1]

    def normalize(self, raw):
        return (raw.float() / 255.0 - self.mean) / self.std

    def batch(self, idx, augment=None, generator=None):
        """Normalised float batch and labels for the given indices."""
        idx = torch.as_tensor(idx, dtype=torch.long)
        raw = self.images[idx]
        if augment is not None:
            raw = augment(raw, generator)
        return self.normalize(raw), self.labels[idx]

    def subset(self, idx):
        idx = torch.as_tensor(idx, dtype=torch.long)
        out = ImageSet.__new__(ImageSet)
        out.images, out.labels = self.images[idx], self.labels[idx]
        out.mean, out.std, out.name = self.mean, self.std, self.name
        return out


def _channel_stats(images):
    x = images.float() / 255.0
    mean = x.mean(dim=(0, 2, 3))
    std = x.std(dim=(0, 2, 3))
    return tuple(mean.tolist()), tuple(std.tolist())


def resize_uint8(images, size):
    if tuple(images.shape[-2:]) == (size, size):
        return images
    x = F.interpolate(images.float(), size=(size, size), mode="bilinear",
                      align_corners=False, antialias=images.shape[-1] > size)
    return x.round().clamp(0, 255).to(torch.uint8)


@dataclass
class Augment:
    """Random crop with zero padding plus optional horizontal flip."""

    padding: int = 4
    hflip: bool = True

    def __call__(self, raw, generator=None):
        n, _, h, w = raw.shape
        if self.padding:
            p = self.padding
            padded = F.pad(raw, (p, p, p, p))
            offs = torch.randint(0, 2 * p + 1, (n, 2), generator=generator)
            raw = torch.stack([
                padded[i, :, oy:oy + h, ox:ox + w]
                for i, (oy, ox) in enumerate(offs.tolist())
            ])
        if self.hflip:
            flip = torch.rand(n, generator=generator) < 0.5
            raw = torch.where(flip.view(-1, 1, 1, 1), raw.flip(-1), raw)
        return raw


# ---------------------------------------------------------------------------
# procedural glyphs

def _segment_distance(px, py, ax, ay, bx, by):
    dx, dy = bx - ax, by - ay
    t = ((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy + 1e-12)
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(px - (ax + t * dx), py - (ay + t * dy))


def _polyline(points, closed=False):
    pts = list(points) + ([points[0]] if closed else [])
    return [(pts[i], pts[i + 1]) for i in range(len(pts) - 1)]


def _arc(cx, cy, r, start, stop, pieces=16):
    ang = np.linspace(start, stop, pieces + 1)
    return _polyline([(cx + r * np.cos(a), cy + r * np.sin(a)) for a in ang])


_GLYPH_SHAPES = [
    lambda: _polyline([(-0.6, 0.0), (0.6, 0.0)]),                     # bar
    lambda: _polyline([(0.0, -0.6), (0.0, 0.6)]),                     # pole
    lambda: _polyline([(-0.5, 0.6), (0.5, -0.6)]),                    # slash
    lambda: _polyline([(-0.5, -0.6), (0.5, 0.6)]),                    # backslash
    lambda: _arc(0.0, 0.0, 0.55, 0.0, 2 * np.pi, 24),                 # ring
    lambda: _polyline([(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)], closed=True),
    lambda: _polyline([(-0.6, 0.0), (0.6, 0.0)]) + _polyline([(0.0, -0.6), (0.0, 0.6)]),
    lambda: _polyline([(-0.5, -0.5), (0.5, 0.5)]) + _polyline([(-0.5, 0.5), (0.5, -0.5)]),
    lambda: _polyline([(0.0, -0.6), (0.6, 0.5), (-0.6, 0.5)], closed=True),
    lambda: _arc(0.0, -0.1, 0.5, 0.0, np.pi, 16),                     # cup
]


def render_glyphs(n_per_class, size=32, seed=0):
    """Render ``n_per_class`` jittered images of each of the ten glyph classes."""
    rng = np.random.default_rng(seed)
    coords = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    px, py = np.meshgrid(coords, coords)
    images, labels = [], []
    for label, shape in enumerate(_GLYPH_SHAPES):
        segments = shape()
        for _ in range(n_per_class):
            angle = rng.uniform(-0.3, 0.3)
            scale = rng.uniform(0.7, 1.05)
            tx, ty = rng.uniform(-0.15, 0.15, size=2)
            thick = rng.uniform(0.06, 0.14)
            c, s = np.cos(angle) * scale, np.sin(angle) * scale

            def warp(p):
                return (c * p[0] - s * p[1] + tx, s * p[0] + c * p[1] + ty)

            dist = np.full((size, size), np.inf)
            for a, b in segments:
                (ax, ay), (bx, by) = warp(a), warp(b)
                dist = np.minimum(dist, _segment_distance(px, py, ax, ay, bx, by))
            img = np.clip(1.0 - (dist - thick) / 0.08, 0.0, 1.0)
            img = np.clip(img * rng.uniform(0.7, 1.0) + rng.normal(0, 0.05, img.shape), 0, 1)
            images.append(img)
            labels.append(label)
    images = (np.stack(images)[:, None] * 255).round().astype(np.uint8)
    order = rng.permutation(len(labels))
    return torch.from_numpy(images[order]), torch.tensor(labels)[order]


# ---------------------------------------------------------------------------
# loaders

def _load_digits(split, resolution):
    from sklearn.datasets import load_digits

    bunch = load_digits()
    images = torch.from_numpy((bunch.images / 16.0 * 255).round().astype(np.uint8))[:, None]
    labels = torch.from_numpy(bunch.target.astype(np.int64))
    # fixed stratified 70/30 split, independent of any run seed
    rng = np.random.default_rng(0)
    test_mask = np.zeros(len(labels), dtype=bool)
    for c in range(10):
        idx = np.flatnonzero(bunch.target == c)
        test_mask[rng.permutation(idx)[: int(round(0.3 * len(idx)))]] = True
    keep = test_mask if split == "test" else ~test_mask
    images = resize_uint8(images[torch.from_numpy(keep)], resolution)
    return images, labels[torch.from_numpy(keep)]


@functools.lru_cache(maxsize=2)
def _rendered_glyphs(split):
    n = 500 if split == "train" else 100
    return render_glyphs(n, size=32, seed=0 if split == "train" else 1)


def _load_glyphs(split, resolution):
    images, labels = _rendered_glyphs(split)
    return resize_uint8(images.clone(), resolution), labels.clone()


def _torchvision(name, root, split, download):
    import torchvision

    train = split == "train"
    try:
        if name == "cifar10":
            ds = torchvision.datasets.CIFAR10(root, train=train, download=download)
        elif name == "cifar100":
            ds = torchvision.datasets.CIFAR100(root, train=train, download=download)
        else:
            ds = torchvision.datasets.SVHN(root, split=split, download=download)
    except (RuntimeError, OSError) as exc:
        raise DatasetUnavailable(f"{name} not found under {root}: {exc}") from exc
    if name == "svhn":
        images, labels = torch.from_numpy(ds.data), torch.from_numpy(ds.labels.astype(np.int64))
    else:
        images = torch.from_numpy(ds.data).permute(0, 3, 1, 2).contiguous()
        labels = torch.tensor(ds.targets, dtype=torch.long)
    return images, labels


def _load_folder(paths_and_labels, resolution):
    from PIL import Image

    images = []
    for path, _ in paths_and_labels:
        with Image.open(path) as img:
            img = img.convert("RGB").resize((resolution, resolution), Image.BILINEAR)
            images.append(np.asarray(img))
    images = torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).contiguous()
    return images, torch.tensor([lab for _, lab in paths_and_labels], dtype=torch.long)


def _load_tiny_imagenet(root, split, resolution):
    base = root / "tiny-imagenet-200"
    if not base.is_dir():
        raise DatasetUnavailable(f"tiny_imagenet expects {base}")
    wnids = sorted((base / "wnids.txt").read_text().split())
    index = {w: i for i, w in enumerate(wnids)}
    if split == "train":
        items = [(p, index[w]) for w in wnids
                 for p in sorted((base / "train" / w / "images").glob("*.JPEG"))]
    else:
        items = []
        for line in (base / "val" / "val_annotations.txt").read_text().splitlines():
            fname, wnid = line.split("\t")[:2]
            items.append((base / "val" / "images" / fname, index[wnid]))
    return _load_folder(items, resolution)


def _load_cub200(root, split, resolution):
    base = root / "CUB_200_2011"
    if not base.is_dir():
        raise DatasetUnavailable(f"cub200 expects {base}")

    def table(name):
        return dict(line.split() for line in (base / name).read_text().splitlines())

    paths, labels, is_train = table("images.txt"), table("image_class_labels.txt"), table("train_test_split.txt")
    want = "1" if split == "train" else "0"
    items = [(base / "images" / paths[k], int(labels[k]) - 1)
             for k in sorted(paths, key=int) if is_train[k] == want]
    return _load_folder(items, resolution)


def load_image_set(dataset_id, split, resolution=None, data_root=None, download=False):
    """Load one split of a registered dataset at ``resolution`` pixels."""
    info = dataset_info(dataset_id)
    resolution = resolution or info.native_size
    root = resolve_data_root(data_root)
    if dataset_id == "digits":
        images, labels = _load_digits(split, resolution)
    elif dataset_id == "glyphs":
        images, labels = _load_glyphs(split, resolution)
    elif dataset_id in ("cifar10", "cifar100", "svhn"):
        images, labels = _torchvision(dataset_id, str(root), split, download)
        images = resize_uint8(images, resolution)
    elif dataset_id == "tiny_imagenet":
        images, labels = _load_tiny_imagenet(root, split, resolution)
    else:
        images, labels = _load_cub200(root, split, resolution)
    if dataset_id in NORMALIZATION:
        mean, std = NORMALIZATION[dataset_id]
    elif split == "train":
        mean, std = _channel_stats(images)
    else:
        mean, std = _channel_stats(load_image_set(dataset_id, "train", resolution, data_root).images)
    return ImageSet(images, labels, mean, std, name=dataset_id)


@dataclass
class PretrainData:
    dataset_id: str
    train: ImageSet
    test: ImageSet | None = None

    @property
    def num_classes(self):
        return dataset_info(self.dataset_id).num_classes


def load_pretrain_dataset(dataset_id, target_resolution, resize=True, data_root=None,
                          download=False):
    """Load a pretraining dataset resampled to ``target_resolution``.

    The label space is the dataset's own and unrelated to any CL stream.
    Requesting a resolution other than the native one with ``resize=False``
    raises ConfigError.
    """
    info = dataset_info(dataset_id)
    if not resize and target_resolution != info.native_size:
        raise ConfigError(
            f"{dataset_id} is {info.native_size}x{info.native_size}; "
            f"requested {target_resolution} with resizing disabled"
        )
    train = load_image_set(dataset_id, "train", target_resolution, data_root, download)
    try:
        test_split = "val" if dataset_id == "tiny_imagenet" else "test"
        test = load_image_set(dataset_id, test_split, target_resolution, data_root, download)
        test.mean, test.std = train.mean, train.std
    except DatasetUnavailable:
        test = None
    return PretrainData(dataset_id, train, test)


# ---------------------------------------------------------------------------
# task streams

@dataclass(frozen=True)
class Task:
    index: int
    classes: tuple
    train_idx: np.ndarray = field(repr=False)
    test_idx: np.ndarray = field(repr=False)


@dataclass
class TaskStream:
    dataset_id: str
    train: ImageSet
    test: ImageSet
    tasks: list
    classes_per_task: int
    seed: int
    class_order: tuple
    augment: Augment | None = None
    pretrain: PretrainData | None = None

    @property
    def num_tasks(self):
        return len(self.tasks)

    @property
    def num_classes(self):
        return self.num_tasks * self.classes_per_task

    def task_of(self, label):
        return task_identifier_of(label, self.classes_per_task, self.class_order)

    def task_ids(self, labels):
        lookup = torch.empty(self.num_classes, dtype=torch.long)
        for task in self.tasks:
            lookup[list(task.classes)] = task.index
        return lookup[torch.as_tensor(labels, dtype=torch.long)]

    def joint(self):
        """The same stream collapsed into a single task holding every class."""
        merged = Task(0, tuple(sorted(self.class_order)),
                      np.sort(np.concatenate([t.train_idx for t in self.tasks])),
                      np.sort(np.concatenate([t.test_idx for t in self.tasks])))
        return TaskStream(self.dataset_id, self.train, self.test, [merged],
                          self.num_classes, self.seed, tuple(sorted(self.class_order)),
                          self.augment, self.pretrain)

    def write_manifest(self, directory):
        """Write one index list per task and split (one integer per line)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for task in self.tasks:
            for split, idx in (("train", task.train_idx), ("test", task.test_idx)):
                path = directory / f"task{task.index}_{split}.txt"
                path.write_text("".join(f"{i}\n" for i in idx.tolist()))
        (directory / "classes.txt").write_text(
            "".join(" ".join(map(str, t.classes)) + "\n" for t in self.tasks))


def task_identifier_of(label, classes_per_task, class_order=None):
    """Task index holding ``label``.

    With ascending assignment this is ``label // classes_per_task``; with a
    permuted ``class_order`` the label's position in the order is used.
    """
    label = int(label)
    if label < 0:
        raise ValueError(f"label must be non-negative, got {label}")
    if class_order is None:
        return label // classes_per_task
    try:
        return list(class_order).index(label) // classes_per_task
    except ValueError:
        raise ValueError(f"label {label} outside the benchmark label space") from None


VALIDATION_SEED = 123


def validation_split(train, fraction, seed=VALIDATION_SEED):
    """Hold out ``fraction`` of every class of ``train``; returns ``(rest, held_out)``."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"validation fraction must lie in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    labels = train.labels.numpy()
    held = np.zeros(len(labels), dtype=bool)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        held[rng.permutation(idx)[: int(round(fraction * len(idx)))]] = True
    return train.subset(np.flatnonzero(~held)), train.subset(np.flatnonzero(held))


def partition_classes(num_classes, num_tasks, seed=0, shuffle=False):
    if num_tasks <= 0 or num_classes % num_tasks:
        raise ConfigError(f"{num_classes} classes cannot be split evenly into {num_tasks} tasks")
    order = np.arange(num_classes)
    if shuffle:
        order = np.random.default_rng(seed).permutation(num_classes)
    cpt = num_classes // num_tasks
    return [tuple(int(c) for c in order[i * cpt:(i + 1) * cpt]) for i in range(num_tasks)], tuple(int(c) for c in order)


def build_split_benchmark(dataset_id, num_tasks, seed=0, *, resolution=None, data_root=None,
                          shuffle_classes=False, augment=True, source=None, download=False,
                          validation=None):
    """Split a labelled dataset into ``num_tasks`` tasks with disjoint classes.

    ``source`` may carry a preloaded ``(train, test)`` pair of ImageSets; it
    is otherwise loaded from ``data_root``.  With ``validation`` set to a
    fraction, the test split is replaced by that fraction of the training
    split (see ``validation_split``) for hyperparameter selection.
    """
    info = dataset_info(dataset_id)
    partition, order = partition_classes(info.num_classes, num_tasks, seed, shuffle_classes)
    if source is None:
        train = load_image_set(dataset_id, "train", resolution, data_root, download)
        if validation:
            train, test = validation_split(train, validation)
        else:
            test = load_image_set(dataset_id, "test", resolution, data_root, download)
            test.mean, test.std = train.mean, train.std
    else:
        train, test = source
    ytr, yte = train.labels.numpy(), test.labels.numpy()
    if ytr.size and (ytr.min() < 0 or ytr.max() >= info.num_classes):
        raise ConfigError(f"{dataset_id} labels fall outside [0, {info.num_classes})")
    tasks = [
        Task(i, classes,
             np.flatnonzero(np.isin(ytr, classes)),
             np.flatnonzero(np.isin(yte, classes)))
        for i, classes in enumerate(partition)
    ]
    aug = None
    if augment:
        aug = Augment(padding=4, hflip=info.hflip) if train.resolution[-1] >= 32 else Augment(padding=1, hflip=info.hflip)
    return TaskStream(dataset_id, train, test, tasks, info.num_classes // num_tasks,
                      seed, order, aug)
