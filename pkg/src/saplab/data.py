"""Synthetic Gaussian-anchor classification data in the unit box."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from saplab import dumps, rng
from saplab.errors import ConfigurationError, GenerationError

MAX_REJECTIONS = 10_000


@dataclass(frozen=True)
class DataParams:
    n_classes: int = 10
    dim: int = 32
    n_train: int = 5000
    n_test: int = 500
    sigma: float = 0.06
    min_separation: float = 0.5
    anchor_low: float = 0.2
    anchor_high: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigurationError(f"need at least 2 classes, got {self.n_classes}")
        if self.dim < 2:
            raise ConfigurationError(f"need at least 2 input dimensions, got {self.dim}")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigurationError("n_train and n_test must be positive")
        if self.sigma < 0:
            raise ConfigurationError(f"sigma must be >= 0, got {self.sigma}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "DataParams":
        return cls(**d)


@dataclass(frozen=True)
class Split:
    name: str
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


@dataclass(frozen=True)
class SyntheticDataset:
    params: DataParams
    anchors: np.ndarray
    train: Split
    test: Split


def place_anchors(params: DataParams) -> np.ndarray:
    """Rejection-sample anchors uniformly in the anchor box with a minimum
    pairwise L2 distance."""
    gen = rng.generator(params.seed, rng.DOMAIN_DATA, 0)
    anchors: list[np.ndarray] = []
    rejections = 0
    while len(anchors) < params.n_classes:
        cand = gen.uniform(params.anchor_low, params.anchor_high, params.dim)
        if all(np.linalg.norm(cand - a) >= params.min_separation for a in anchors):
            anchors.append(cand)
            continue
        rejections += 1
        if rejections > MAX_REJECTIONS:
            raise GenerationError(
                f"could not place {params.n_classes} anchors {params.min_separation} apart in "
                f"{params.dim} dimensions after {MAX_REJECTIONS} rejections"
            )
    return np.stack(anchors)


def _sample_split(params: DataParams, anchors: np.ndarray, name: str, n: int, stream: int) -> Split:
    gen = rng.generator(params.seed, rng.DOMAIN_DATA, stream)
    labels = np.arange(n, dtype=np.int64) % params.n_classes
    labels = labels[gen.permutation(n)]
    x = anchors[labels] + params.sigma * gen.standard_normal((n, params.dim))
    return Split(name, np.clip(x, 0.0, 1.0), labels)


def make_dataset(params: DataParams) -> SyntheticDataset:
    anchors = place_anchors(params)
    return SyntheticDataset(
        params,
        anchors,
        _sample_split(params, anchors, "train", params.n_train, 1),
        _sample_split(params, anchors, "test", params.n_test, 2),
    )


def nearest_anchor_predict(anchors: np.ndarray, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d2 = ((x[:, None, :] - anchors[None, :, :]) ** 2).sum(axis=-1)
    return np.argmin(d2, axis=1)


def save_dataset(dataset: SyntheticDataset, path) -> Path:
    """One JSON header line, then a SAPX block per split in header order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": "saplab-dataset",
        "version": 1,
        "params": dataset.params.to_dict(),
        "anchors": dataset.anchors.tolist(),
        "splits": [{"name": s.name, "count": len(s)} for s in (dataset.train, dataset.test)],
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for split in (dataset.train, dataset.test):
            dumps.write_block(f, split.x, split.y)
    return path


def load_dataset(path) -> SyntheticDataset:
    with open(path, "rb") as f:
        header = json.loads(f.readline())
        if header.get("format") != "saplab-dataset":
            raise dumps.DumpFormatError(f"{path}: not a saplab dataset file")
        splits = {}
        for entry in header["splits"]:
            x, y, _ = dumps.read_block(f)
            splits[entry["name"]] = Split(entry["name"], x, y)
    return SyntheticDataset(
        DataParams.from_dict(header["params"]),
        np.asarray(header["anchors"], dtype=np.float64),
        splits["train"],
        splits["test"],
    )
