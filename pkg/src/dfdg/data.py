"""Datasets, Dirichlet client partitioning and label statistics."""
from __future__ import annotations

import gzip
import json
import pickle
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

DATASETS = ("FMNIST", "CIFAR10", "SVHN", "CIFAR100", "CINIC10", "TINYIMAGENET", "FOOD101", "SYNTH_TOY")
PARTITION_FORMAT_VERSION = 1
RNG_FAMILY = "numpy.PCG64"


class DatasetError(RuntimeError):
    """Raised when dataset files are missing or malformed."""


@dataclass
class DatasetHandle:
    name: str
    image_shape: tuple[int, int, int]
    num_classes: int
    train_x: torch.Tensor
    train_y: torch.Tensor
    test_x: torch.Tensor
    test_y: torch.Tensor

    def __post_init__(self):
        for x, y in ((self.train_x, self.train_y), (self.test_x, self.test_y)):
            if tuple(x.shape[1:]) != tuple(self.image_shape):
                raise DatasetError(f"{self.name}: images have shape {tuple(x.shape[1:])}, expected {self.image_shape}")
            if len(x) != len(y):
                raise DatasetError(f"{self.name}: {len(x)} images but {len(y)} labels")
            if len(y) and (int(y.min()) < 0 or int(y.max()) >= self.num_classes):
                raise DatasetError(f"{self.name}: labels outside [0, {self.num_classes})")

    @property
    def num_train(self) -> int:
        return len(self.train_y)

    @property
    def num_test(self) -> int:
        return len(self.test_y)

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.train_y.numpy(), minlength=self.num_classes)


@dataclass
class PartitionedFederation:
    dataset: str
    num_clients: int
    concentration: float
    seed: int
    client_indices: list[np.ndarray]
    seed_offset: int = 0
    rng: str = RNG_FAMILY

    def sizes(self) -> list[int]:
        return [len(ix) for ix in self.client_indices]

    def to_dict(self) -> dict:
        return {
            "version": PARTITION_FORMAT_VERSION,
            "dataset": self.dataset,
            "num_clients": self.num_clients,
            "concentration": self.concentration,
            "seed": self.seed,
            "seed_offset": self.seed_offset,
            "rng": self.rng,
            "client_indices": [ix.tolist() for ix in self.client_indices],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PartitionedFederation":
        if d.get("version") != PARTITION_FORMAT_VERSION:
            raise DatasetError(f"unsupported partition file version {d.get('version')!r}")
        return cls(
            dataset=d["dataset"],
            num_clients=int(d["num_clients"]),
            concentration=float(d["concentration"]),
            seed=int(d["seed"]),
            client_indices=[np.asarray(ix, dtype=np.int64) for ix in d["client_indices"]],
            seed_offset=int(d.get("seed_offset", 0)),
            rng=d.get("rng", RNG_FAMILY),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "PartitionedFederation":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class LabelCounter:
    """Per-client label counts accumulated while clients train (N x C)."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=np.int64))

    @classmethod
    def from_rows(cls, rows: Sequence[np.ndarray]) -> "LabelCounter":
        return cls(np.stack([np.asarray(r, dtype=np.int64) for r in rows]))


# ---------------------------------------------------------------------------
# loading

def _normalize(images: np.ndarray) -> torch.Tensor:
    """uint8 NCHW -> float32 in [-1, 1]."""
    return torch.from_numpy(images.astype(np.float32) / 127.5 - 1.0)


def _resize(x: torch.Tensor, side: int) -> torch.Tensor:
    if x.shape[-1] == side:
        return x
    out = []
    for chunk in torch.split(x, 4096):
        out.append(F.interpolate(chunk, size=(side, side), mode="bilinear", align_corners=False))
    return torch.cat(out).clamp_(-1.0, 1.0)


def _read_idx(path: Path) -> np.ndarray:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        _, _, dtype_code, ndim = struct.unpack(">BBBB", fh.read(4))
        if dtype_code != 0x08:
            raise DatasetError(f"{path}: unsupported IDX dtype {dtype_code:#x}")
        shape = struct.unpack(">" + "I" * ndim, fh.read(4 * ndim))
        return np.frombuffer(fh.read(), dtype=np.uint8).reshape(shape)


def _find(root: Path, names: Sequence[str]) -> Path:
    for name in names:
        for candidate in (root / name, root / (name + ".gz")):
            if candidate.exists():
                return candidate
    raise DatasetError(f"missing dataset file: expected {root / names[0]}[.gz]")


def _load_fmnist(root: Path):
    root = root / "fashion_mnist"
    parts = {}
    for split, prefix in (("train", "train"), ("test", "t10k")):
        x = _read_idx(_find(root, [f"{prefix}-images-idx3-ubyte"]))
        y = _read_idx(_find(root, [f"{prefix}-labels-idx1-ubyte"]))
        parts[split] = (_resize(_normalize(x[:, None]), 32), torch.from_numpy(y.astype(np.int64)))
    return parts


def _load_cifar(root: Path, coarse: bool):
    sub = root / ("cifar-100-python" if coarse else "cifar-10-batches-py")
    if not sub.is_dir():
        raise DatasetError(f"missing dataset directory: expected {sub}")
    files = {"train": ["train"], "test": ["test"]} if coarse else {
        "train": [f"data_batch_{i}" for i in range(1, 6)], "test": ["test_batch"]}
    key = b"fine_labels" if coarse else b"labels"
    parts = {}
    for split, names in files.items():
        xs, ys = [], []
        for name in names:
            path = sub / name
            if not path.exists():
                raise DatasetError(f"missing dataset file: expected {path}")
            with open(path, "rb") as fh:
                batch = pickle.load(fh, encoding="bytes")
            xs.append(np.asarray(batch[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32))
            ys.append(np.asarray(batch[key], dtype=np.int64))
        parts[split] = (_normalize(np.concatenate(xs)), torch.from_numpy(np.concatenate(ys)))
    return parts


def _load_svhn(root: Path):
    from scipy.io import loadmat

    parts = {}
    for split in ("train", "test"):
        path = root / "svhn" / f"{split}_32x32.mat"
        if not path.exists():
            raise DatasetError(f"missing dataset file: expected {path}")
        mat = loadmat(path)
        x = np.transpose(mat["X"], (3, 2, 0, 1))
        y = mat["y"].reshape(-1).astype(np.int64) % 10  # label 10 encodes digit 0
        parts[split] = (_normalize(x), torch.from_numpy(y))
    return parts


def _load_image_folder(root: Path, side: int):
    from PIL import Image

    if not root.is_dir():
        raise DatasetError(f"missing dataset directory: expected {root}")
    classes = sorted(p.name for p in (root / "train").iterdir() if p.is_dir()) if (root / "train").is_dir() else []
    if not classes:
        raise DatasetError(f"missing dataset directory: expected {root / 'train'}/<class>/")
    parts = {}
    for split in ("train", "test"):
        xs, ys = [], []
        for label, cls in enumerate(classes):
            for img_path in sorted((root / split / cls).glob("*")):
                img = Image.open(img_path).convert("RGB").resize((side, side), Image.BILINEAR)
                xs.append(np.asarray(img, dtype=np.uint8).transpose(2, 0, 1))
                ys.append(label)
        if not xs:
            raise DatasetError(f"no images found under {root / split}")
        parts[split] = (_normalize(np.stack(xs)), torch.tensor(ys, dtype=torch.int64))
    return parts, len(classes)


# Procedural toy task: one Gaussian blob per class, class centres on a ring.
TOY_SIDE = 16
TOY_CLASSES = 10
TOY_TRAIN = 2000
TOY_TEST = 500


def synth_toy(seed: int = 20240101) -> DatasetHandle:
    rng = np.random.Generator(np.random.PCG64(seed))
    angles = 2 * np.pi * np.arange(TOY_CLASSES) / TOY_CLASSES
    centres = np.stack([7.5 + 4.5 * np.cos(angles), 7.5 + 4.5 * np.sin(angles)], axis=1)
    grid = np.stack(np.meshgrid(np.arange(TOY_SIDE), np.arange(TOY_SIDE), indexing="ij"), axis=-1).astype(np.float64)

    def render(n: int):
        labels = np.tile(np.arange(TOY_CLASSES), n // TOY_CLASSES)
        rng.shuffle(labels)
        pos = centres[labels] + rng.normal(0.0, 1.2, size=(n, 2))
        width = rng.uniform(1.5, 2.5, size=n)
        amp = rng.uniform(1.2, 2.0, size=n)
        d2 = ((grid[None] - pos[:, None, None, :]) ** 2).sum(-1)
        img = -1.0 + amp[:, None, None] * np.exp(-d2 / (2 * width[:, None, None] ** 2))
        img += rng.normal(0.0, 0.25, size=img.shape)
        img = np.clip(img, -1.0, 1.0).astype(np.float32)
        return torch.from_numpy(img[:, None]), torch.from_numpy(labels.astype(np.int64))

    train_x, train_y = render(TOY_TRAIN)
    test_x, test_y = render(TOY_TEST)
    return DatasetHandle("SYNTH_TOY", (1, TOY_SIDE, TOY_SIDE), TOY_CLASSES, train_x, train_y, test_x, test_y)


def load_dataset(name: str, data_root: str | Path = "data", max_train: int | None = None,
                 max_test: int | None = None) -> DatasetHandle:
    """Load a dataset normalised to [-1, 1]. ``max_train``/``max_test`` keep the first examples only."""
    name = name.upper()
    if name not in DATASETS:
        raise DatasetError(f"unknown dataset {name!r}; choose from {', '.join(DATASETS)}")
    if name == "SYNTH_TOY":
        ds = synth_toy()
    else:
        root = Path(data_root)
        if name == "FMNIST":
            parts, shape, c = _load_fmnist(root), (1, 32, 32), 10
        elif name == "CIFAR10":
            parts, shape, c = _load_cifar(root, coarse=False), (3, 32, 32), 10
        elif name == "CIFAR100":
            parts, shape, c = _load_cifar(root, coarse=True), (3, 32, 32), 100
        elif name == "SVHN":
            parts, shape, c = _load_svhn(root), (3, 32, 32), 10
        else:
            side = 32 if name == "CINIC10" else 64
            sub = {"CINIC10": "cinic-10", "TINYIMAGENET": "tiny-imagenet-200", "FOOD101": "food-101"}[name]
            parts, c = _load_image_folder(root / sub, side)
            shape = (3, side, side)
        ds = DatasetHandle(name, shape, c, *parts["train"], *parts["test"])
    if max_train is not None:
        ds.train_x, ds.train_y = ds.train_x[:max_train], ds.train_y[:max_train]
    if max_test is not None:
        ds.test_x, ds.test_y = ds.test_x[:max_test], ds.test_y[:max_test]
    return ds


# ---------------------------------------------------------------------------
# partitioning

def _split_classwise(labels: np.ndarray, num_classes: int, n: int, omega: float,
                     rng: np.random.Generator) -> list[np.ndarray]:
    buckets: list[list[np.ndarray]] = [[] for _ in range(n)]
    for y in range(num_classes):
        idx = np.flatnonzero(labels == y)
        if len(idx) == 0:
            continue
        rng.shuffle(idx)
        props = rng.dirichlet(np.full(n, omega))
        cuts = (np.cumsum(props)[:-1] * len(idx)).astype(np.int64)
        for i, chunk in enumerate(np.split(idx, cuts)):
            buckets[i].append(chunk)
    return [np.sort(np.concatenate(b)) if b else np.zeros(0, dtype=np.int64) for b in buckets]


def dirichlet_partition(dataset: DatasetHandle, num_clients: int, omega: float, seed: int,
                        max_repairs: int = 1000) -> PartitionedFederation:
    """Split the training set class by class with Dir(omega) proportions over clients.

    If a draw leaves a client empty the split is redrawn with ``seed + offset``;
    the offset used is kept on the result so the split can be reproduced.
    """
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    if not omega > 0:
        raise ValueError("omega must be > 0")
    if dataset.num_train < num_clients:
        raise ValueError(f"cannot give {num_clients} clients at least one of {dataset.num_train} examples")
    labels = dataset.train_y.numpy()
    for offset in range(max_repairs):
        rng = np.random.Generator(np.random.PCG64(seed + offset))
        parts = _split_classwise(labels, dataset.num_classes, num_clients, omega, rng)
        if all(len(p) for p in parts):
            return PartitionedFederation(dataset.name, num_clients, float(omega), seed, parts, offset)
    raise RuntimeError(f"no partition without empty clients after {max_repairs} redraws")


def true_label_histogram(federation: PartitionedFederation, dataset: DatasetHandle) -> np.ndarray:
    labels = dataset.train_y.numpy()
    return np.stack([np.bincount(labels[ix], minlength=dataset.num_classes) for ix in federation.client_indices])


def client_slice(dataset: DatasetHandle, federation: PartitionedFederation, i: int):
    ix = torch.from_numpy(federation.client_indices[i])
    return dataset.train_x[ix], dataset.train_y[ix]
