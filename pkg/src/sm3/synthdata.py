"""Synthetic paired-modality datasets with planted multi-label structure.

Each study has a latent ``u ~ N(0, I)``.  Label k is the bin of ``u @ w_k``
(``w_k`` a fixed random unit vector) under the standard-normal quantiles of
the class prior, so labels are functions of the shared latent.  Both
modalities observe ``u`` through their own fixed random mixing matrix plus
independent noise, optionally followed by ``tanh``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import norm

from sm3.diffcore import Rng
from sm3.errors import ConfigError, StructureError
from sm3.store import read_artifact, write_artifact

FORMAT = "sm3-dataset"
VERSION = 1
SPLITS = ("train", "val", "test")
# 413 / 203 / 395 studies in the reference split
DEFAULT_SPLIT = (413 / 1011, 203 / 1011, 395 / 1011)
DERM7PT_CLASS_COUNTS = (3, 2, 3, 3, 3, 3, 3, 5)


@dataclass
class GeneratorConfig:
    n_samples: int = 1250
    latent_dim: int = 8
    derm_dim: int = 32
    clinic_dim: int = 32
    class_counts: tuple[int, ...] = DERM7PT_CLASS_COUNTS
    noise_std: float = 0.3
    private_dim: int = 4
    private_std: float = 1.0
    nonlinear: bool = True
    split: tuple[float, float, float] = DEFAULT_SPLIT
    class_priors: list | None = None
    seed: int = 0

    def __post_init__(self):
        self.class_counts = tuple(int(c) for c in self.class_counts)
        self.split = tuple(float(s) for s in self.split)
        self.validate()

    @property
    def K(self) -> int:
        return len(self.class_counts)

    def validate(self) -> None:
        for name in ("n_samples", "latent_dim", "derm_dim", "clinic_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"data.{name} must be positive")
        if not self.class_counts:
            raise ConfigError("data.class_counts must list at least one label")
        for k, c in enumerate(self.class_counts):
            if c < 2:
                raise ConfigError(f"data.class_counts[{k}] must be >= 2 (got {c})")
        if self.noise_std < 0 or self.private_std < 0 or self.private_dim < 0:
            raise ConfigError("data.noise_std, data.private_std and data.private_dim must be >= 0")
        if len(self.split) != 3 or min(self.split) < 0 or abs(sum(self.split) - 1) > 1e-6:
            raise ConfigError("data.split must be three nonnegative fractions summing to 1")
        if self.class_priors is not None:
            if len(self.class_priors) != self.K:
                raise ConfigError("data.class_priors needs one entry per label")
            for k, pri in enumerate(self.class_priors):
                if pri is None:
                    continue
                pri = np.asarray(pri, dtype=float)
                if len(pri) != self.class_counts[k] or pri.min() <= 0 or abs(pri.sum() - 1) > 1e-6:
                    raise ConfigError(f"data.class_priors[{k}] must be {self.class_counts[k]} positive probabilities")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_counts"] = list(self.class_counts)
        d["split"] = list(self.split)
        return d


@dataclass
class ModalityPairSample:
    derm: np.ndarray
    clinic: np.ndarray | None
    labels: np.ndarray


@dataclass
class Dataset:
    x_derm: np.ndarray
    x_clinic: np.ndarray | None
    labels: np.ndarray
    splits: dict[str, np.ndarray]
    config: GeneratorConfig
    latent: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.x_derm)

    def __getitem__(self, i: int) -> ModalityPairSample:
        clinic = None if self.x_clinic is None else self.x_clinic[i]
        return ModalityPairSample(self.x_derm[i], clinic, self.labels[i])

    @property
    def samples(self) -> list[ModalityPairSample]:
        return [self[i] for i in range(len(self))]

    @property
    def class_counts(self) -> tuple[int, ...]:
        return self.config.class_counts

    @property
    def paired(self) -> bool:
        return self.x_clinic is not None

    def split(self, name: str) -> np.ndarray:
        return self.splits[name]

    def equals(self, other: Dataset) -> bool:
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()

        return (same(self.x_derm, other.x_derm) and same(self.x_clinic, other.x_clinic)
                and same(self.labels, other.labels) and same(self.latent, other.latent)
                and all(same(self.splits[s], other.splits[s]) for s in SPLITS)
                and self.config.to_dict() == other.config.to_dict())


def _bin_edges(prior: Sequence[float] | None, c: int) -> np.ndarray:
    cum = np.arange(1, c) / c if prior is None else np.cumsum(prior)[:-1]
    return norm.ppf(cum)


def generate(config: GeneratorConfig, rng: Rng | None = None) -> Dataset:
    rng = rng or Rng(config.seed)
    n, du = config.n_samples, config.latent_dim
    u = rng.child("latent").standard_normal((n, du))

    proj = rng.child("label-projections").standard_normal((config.K, du))
    proj /= np.linalg.norm(proj, axis=1, keepdims=True)
    scores = u @ proj.T
    labels = np.empty((n, config.K), dtype=np.int64)
    for k, c in enumerate(config.class_counts):
        prior = None if config.class_priors is None else config.class_priors[k]
        labels[:, k] = np.searchsorted(_bin_edges(prior, c), scores[:, k])

    def observe(tag: str, dim: int) -> np.ndarray:
        r = rng.child("modality", tag)
        mixing = r.child("mixing").standard_normal((dim, du)) / np.sqrt(du)
        x = u @ mixing.T
        if config.private_dim > 0 and config.private_std > 0:
            v = r.child("private").standard_normal((n, config.private_dim)) * config.private_std
            nuisance = r.child("private-mixing").standard_normal((dim, config.private_dim)) / np.sqrt(config.private_dim)
            x = x + v @ nuisance.T
        x = x + config.noise_std * r.child("noise").standard_normal((n, dim))
        if config.nonlinear:
            x = np.tanh(x)
        return x.astype(np.float32)

    x_derm = observe("derm", config.derm_dim)
    x_clinic = observe("clinic", config.clinic_dim)

    order = rng.child("split").permutation(n)
    n_train = int(round(config.split[0] * n))
    n_val = int(round(config.split[1] * n))
    splits = {
        "train": np.sort(order[:n_train]),
        "val": np.sort(order[n_train:n_train + n_val]),
        "test": np.sort(order[n_train + n_val:]),
    }
    return Dataset(x_derm, x_clinic, labels, splits, config, latent=u.astype(np.float32))


def save(dataset: Dataset, path: str | Path) -> Path:
    tensors = {"x_derm": dataset.x_derm}
    if dataset.x_clinic is not None:
        tensors["x_clinic"] = dataset.x_clinic
    tensors["labels"] = dataset.labels.astype(np.float32)
    if dataset.latent is not None:
        tensors["latent"] = dataset.latent
    meta = {
        "n_samples": len(dataset),
        "config": dataset.config.to_dict(),
        "splits": {s: dataset.splits[s].tolist() for s in SPLITS},
    }
    return write_artifact(path, FORMAT, VERSION, meta, tensors)


def load(path: str | Path) -> Dataset:
    manifest, tensors = read_artifact(path, FORMAT, VERSION)
    n = manifest.get("n_samples")
    for name in ("x_derm", "labels"):
        if name not in tensors:
            raise StructureError(f"dataset is missing tensor {name!r}")
    for name, arr in tensors.items():
        if arr.shape[0] != n:
            raise StructureError(f"manifest declares {n} samples but {name} has {arr.shape[0]} records")
    try:
        config = GeneratorConfig(**{**manifest["config"], "class_counts": tuple(manifest["config"]["class_counts"])})
    except (KeyError, TypeError) as exc:
        raise StructureError(f"dataset config unreadable: {exc}") from None
    labels = tensors["labels"].astype(np.int64)
    if labels.shape[1] != config.K:
        raise StructureError("label columns disagree with class_counts")
    splits = {s: np.asarray(manifest["splits"][s], dtype=np.int64) for s in SPLITS}
    covered = np.sort(np.concatenate([splits[s] for s in SPLITS]))
    if not np.array_equal(covered, np.arange(n)):
        raise StructureError("splits must be disjoint and cover every sample")
    return Dataset(tensors["x_derm"], tensors.get("x_clinic"), labels, splits, config, latent=tensors.get("latent"))
