"""Two-stage pretraining: multi-modality contrastive (stage 1) and pseudo-multi-label (stage 2)."""
from __future__ import annotations

import copy
import csv
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from sm3.augment import AugmentationPolicy, augment_batch
from sm3.diffcore import Rng, Tensor, derive_seed, no_grad
from sm3.errors import ConfigError, NonFiniteError, StructureError
from sm3.losses import l_ssl, multilabel_ce, nt_xent
from sm3.models import (
    ML_STRATEGIES,
    MM_STRATEGIES,
    Encoder,
    Module,
    MultiLabelClassifier,
    ProjectionHead,
    fuse,
)
from sm3.optim import AdamW, AdamWHyper
from sm3.pseudolabel import PseudoLabelSet, generate_pseudo_multilabels
from sm3.store import read_artifact, write_artifact
from sm3.synthdata import Dataset

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "sm3-checkpoint"
CHECKPOINT_VERSION = 1
MM_COLUMNS = ("l_derm", "l_clinic", "l_mm", "l_concat")


@dataclass
class ModelConfig:
    encoder_widths: tuple[int, ...] = (128, 64)
    projection_dim: int = 128
    activation: str = "gelu"

    def __post_init__(self):
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)

    @property
    def feature_dim(self) -> int:
        return self.encoder_widths[-1]


@dataclass
class Stage1Config:
    strategy: str = "sep_sep"
    batch_size: int = 64
    lr: float = 1e-3
    epochs: int = 100
    temperature: float = 0.1
    symmetric: bool = False
    mirror: bool = False


@dataclass
class Stage2Config:
    strategy: str = "tel"
    batch_size: int = 64
    lr: float = 1e-3
    epochs: int = 50
    label_proj_dim: int = 512
    ffn_dim: int = 128
    dropout: float = 0.1
    cluster_input: str = "post"
    align_clusters: bool = True
    cluster_restarts: int = 1  # k-means seedings per label per epoch; labels are refreshed every epoch anyway
    finetune_backbone: bool = False
    augment: bool = False


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    optimizer: AdamWHyper = field(default_factory=AdamWHyper)
    augment: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    seed: int = 0

    def validate(self) -> None:
        s1, s2 = self.stage1, self.stage2
        if s1.strategy not in MM_STRATEGIES:
            raise ConfigError(f"train.stage1.strategy must be one of {MM_STRATEGIES}, got {s1.strategy!r}")
        if s2.strategy not in ML_STRATEGIES:
            raise ConfigError(f"train.stage2.strategy must be one of {ML_STRATEGIES}, got {s2.strategy!r}")
        for name, value in (("stage1.batch_size", s1.batch_size), ("stage2.batch_size", s2.batch_size),
                            ("stage1.lr", s1.lr), ("stage2.lr", s2.lr), ("stage1.temperature", s1.temperature),
                            ("model.projection_dim", self.model.projection_dim),
                            ("stage2.label_proj_dim", s2.label_proj_dim), ("stage2.ffn_dim", s2.ffn_dim)):
            if value <= 0:
                raise ConfigError(f"train.{name} must be positive")
        for name, value in (("stage1.epochs", s1.epochs), ("stage2.epochs", s2.epochs)):
            if value < 0:
                raise ConfigError(f"train.{name} must be >= 0")
        if not self.model.encoder_widths or min(self.model.encoder_widths) < 1:
            raise ConfigError("train.model.encoder_widths must be positive integers")
        if not 0 <= s2.dropout < 1:
            raise ConfigError("train.stage2.dropout must lie in [0, 1)")
        if s2.cluster_input not in ("pre", "post"):
            raise ConfigError("train.stage2.cluster_input must be 'pre' or 'post'")
        if isinstance(s2.cluster_restarts, bool) or not isinstance(s2.cluster_restarts, int) \
                or s2.cluster_restarts < 1:
            raise ConfigError("train.stage2.cluster_restarts must be an integer >= 1")
        if self.optimizer.weight_decay < 0:
            raise ConfigError("train.optimizer.weight_decay must be >= 0")
        self.augment.validate()

    @classmethod
    def paper(cls) -> TrainConfig:
        """Reference hyperparameters (ResNet-50 scale; slow on desk-scale data)."""
        cfg = cls()
        cfg.stage1 = Stage1Config(batch_size=96, lr=1e-6, epochs=400, temperature=0.1)
        cfg.stage2 = Stage2Config(batch_size=256, lr=1e-4, epochs=150)
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"] = self.augment.to_dict()
        d["model"]["encoder_widths"] = list(self.model.encoder_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = copy.deepcopy(d)
        return cls(
            model=_build(ModelConfig, d.get("model", {}), "train.model"),
            stage1=_build(Stage1Config, d.get("stage1", {}), "train.stage1"),
            stage2=_build(Stage2Config, d.get("stage2", {}), "train.stage2"),
            optimizer=_build(AdamWHyper, d.get("optimizer", {}), "train.optimizer"),
            augment=_build(AugmentationPolicy, d.get("augment", {}), "augment"),
            seed=int(d.get("seed", 0)),
        )


def _build(kind, values: dict, where: str):
    known = {f.name for f in fields(kind)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys under {where}: {sorted(unknown)}")
    try:
        return kind(**values)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


class SM3Model(Module):
    """Both branches, the stage-1 heads of one strategy, and optionally the stage-2 classifier.

    Heads by strategy -- simclr: head_derm, head_clinic; concat: head_concat;
    sep_shared: head_shared; sep_sep: head_derm, head_clinic plus the
    shared-space heads mm_derm, mm_clinic.
    """

    def __init__(self, derm_dim: int, clinic_dim: int, class_counts, config: TrainConfig,
                 mm_strategy: str | None = None, ml_strategy: str | None = None):
        super().__init__()
        self.config = config
        m = config.model
        rng = Rng(derive_seed(config.seed, "init"))
        self.mm_strategy = mm_strategy or config.stage1.strategy
        self.ml_strategy = ml_strategy
        self.class_counts = tuple(class_counts)
        act = m.activation
        F, Z = m.feature_dim, m.projection_dim
        self.enc_derm = Encoder(derm_dim, m.encoder_widths, rng.child("enc_derm"), act)
        self.enc_clinic = Encoder(clinic_dim, m.encoder_widths, rng.child("enc_clinic"), act)
        s = self.mm_strategy
        if s in ("simclr", "sep_sep"):
            self.head_derm = ProjectionHead(F, Z, rng.child("head_derm"), activation=act)
            self.head_clinic = ProjectionHead(F, Z, rng.child("head_clinic"), activation=act)
        if s == "sep_sep":
            self.mm_derm = ProjectionHead(F, Z, rng.child("mm_derm"), activation=act)
            self.mm_clinic = ProjectionHead(F, Z, rng.child("mm_clinic"), activation=act)
        if s == "sep_shared":
            self.head_shared = ProjectionHead(F, Z, rng.child("head_shared"), activation=act)
        if s == "concat":
            self.head_concat = ProjectionHead(2 * F, Z, rng.child("head_concat"), hidden=2 * F, activation=act)
        if ml_strategy is not None:
            s2 = config.stage2
            self.classifier = MultiLabelClassifier(2 * F, class_counts, rng.child("classifier", ml_strategy),
                                                   ml_strategy, s2.label_proj_dim, s2.ffn_dim, s2.dropout)

    @property
    def feature_dim(self) -> int:
        return self.config.model.feature_dim

    def has(self, name: str) -> bool:
        return name in self._modules

    def backbone_parameters(self) -> list[Tensor]:
        return self.enc_derm.parameters() + self.enc_clinic.parameters()

    def fused_features(self, x_derm, x_clinic) -> Tensor:
        return fuse(self.enc_derm(_t(x_derm)), self.enc_clinic(_t(x_clinic)))

    def matching_embeddings(self, x_derm, x_clinic) -> tuple[Tensor, Tensor]:
        """Embeddings compared by pair matching: the cross-modality space if the strategy has one."""
        hd, hc = self.enc_derm(_t(x_derm)), self.enc_clinic(_t(x_clinic))
        if self.has("mm_derm"):
            return self.mm_derm(hd), self.mm_clinic(hc)
        if self.has("head_shared"):
            return self.head_shared(hd), self.head_shared(hc)
        return hd, hc

    def contrastive_loss(self, xd1, xd2, xc1, xc2) -> tuple[Tensor, dict[str, Tensor]]:
        """Stage-1 objective of the configured strategy and its addends."""
        s1 = self.config.stage1
        tau = s1.temperature
        zero = Tensor(np.zeros((), dtype=np.float32))
        hd1, hd2 = self.enc_derm(_t(xd1)), self.enc_derm(_t(xd2))
        if self.mm_strategy == "simclr" and xc1 is None:
            a = nt_xent(self.head_derm(hd1), self.head_derm(hd2), tau, s1.symmetric)
            return a, {"l_derm": a, "l_clinic": zero, "l_mm": zero, "l_concat": zero}
        hc1, hc2 = self.enc_clinic(_t(xc1)), self.enc_clinic(_t(xc2))
        s = self.mm_strategy
        if s == "concat":
            c = nt_xent(self.head_concat(fuse(hd1, hc1)), self.head_concat(fuse(hd2, hc2)), tau, s1.symmetric)
            return c, {"l_derm": zero, "l_clinic": zero, "l_mm": zero, "l_concat": c}
        if s == "simclr":
            a = nt_xent(self.head_derm(hd1), self.head_derm(hd2), tau, s1.symmetric)
            b = nt_xent(self.head_clinic(hc1), self.head_clinic(hc2), tau, s1.symmetric)
            return a + b, {"l_derm": a, "l_clinic": b, "l_mm": zero, "l_concat": zero}
        if s == "sep_shared":
            g = self.head_shared
            out = l_ssl(g(hd1), g(hd2), g(hc1), g(hc2), tau, symmetric=s1.symmetric, mirror=s1.mirror)
        else:
            out = l_ssl(self.head_derm(hd1), self.head_derm(hd2), self.head_clinic(hc1), self.head_clinic(hc2), tau,
                        Md1=self.mm_derm(hd1), Md2=self.mm_derm(hd2), Mc1=self.mm_clinic(hc1),
                        Mc2=self.mm_clinic(hc2), symmetric=s1.symmetric, mirror=s1.mirror)
        return out.total, {"l_derm": out.l_derm, "l_clinic": out.l_clinic, "l_mm": out.l_mm, "l_concat": zero}


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- checkpoints ------------------------------------------------------------

@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict[str, np.ndarray]
    stage: str
    mm_strategy: str
    ml_strategy: str | None
    derm_dim: int
    clinic_dim: int
    class_counts: tuple[int, ...]
    epoch: int = 0
    history: list[dict] = field(default_factory=list)
    version: int = CHECKPOINT_VERSION

    def build_model(self) -> SM3Model:
        model = SM3Model(self.derm_dim, self.clinic_dim, self.class_counts, self.config,
                         self.mm_strategy, self.ml_strategy)
        model.load_state_dict(self.params)
        return model

    @classmethod
    def from_model(cls, model: SM3Model, stage: str, epoch: int, history: list[dict]) -> Checkpoint:
        return cls(config=model.config, params={k: v.copy() for k, v in model.state_dict().items()}, stage=stage,
                   mm_strategy=model.mm_strategy, ml_strategy=model.ml_strategy,
                   derm_dim=model.enc_derm.in_dim, clinic_dim=model.enc_clinic.in_dim,
                   class_counts=tuple(model.class_counts), epoch=epoch, history=history)

    def components(self) -> list[str]:
        return sorted({name.split(".")[0] for name in self.params})

    def relation_layers(self) -> int:
        """Number of attention layers in the label-relation module (0 when absent)."""
        return sum(1 for name in self.params if name.startswith("classifier.relation.") and name.endswith("q.weight"))

    def equals(self, other: Checkpoint) -> bool:
        return (self.params.keys() == other.params.keys()
                and all(self.params[k].tobytes() == other.params[k].tobytes() for k in self.params)
                and self.config.to_dict() == other.config.to_dict() and self.history == other.history)

    def save(self, path: str | Path) -> Path:
        meta = {
            "config": self.config.to_dict(),
            "stage": self.stage,
            "mm_strategy": self.mm_strategy,
            "ml_strategy": self.ml_strategy,
            "derm_dim": self.derm_dim,
            "clinic_dim": self.clinic_dim,
            "class_counts": list(self.class_counts),
            "epoch": self.epoch,
            "history": self.history,
        }
        return write_artifact(path, CHECKPOINT_FORMAT, self.version, meta, self.params)

    @classmethod
    def load(cls, path: str | Path) -> Checkpoint:
        manifest, tensors = read_artifact(path, CHECKPOINT_FORMAT, CHECKPOINT_VERSION)
        try:
            ckpt = cls(config=TrainConfig.from_dict(manifest["config"]), params=tensors, stage=manifest["stage"],
                       mm_strategy=manifest["mm_strategy"], ml_strategy=manifest["ml_strategy"],
                       derm_dim=int(manifest["derm_dim"]), clinic_dim=int(manifest["clinic_dim"]),
                       class_counts=tuple(manifest["class_counts"]), epoch=int(manifest["epoch"]),
                       history=manifest["history"])
        except KeyError as exc:
            raise StructureError(f"checkpoint manifest lacks {exc}") from None
        expected = set(SM3Model(ckpt.derm_dim, ckpt.clinic_dim, ckpt.class_counts, ckpt.config,
                                ckpt.mm_strategy, ckpt.ml_strategy).state_dict())
        if expected != set(tensors):
            raise StructureError("checkpoint tensors do not match the declared architecture")
        return ckpt


MM_HISTORY_COLUMNS = ("epoch", "l_derm", "l_clinic", "l_mm", "l_concat", "l_total")
ML_HISTORY_COLUMNS = ("epoch", "l_ce")


def write_history_csv(history: list[dict], path: str | Path, columns: tuple[str, ...] | None = None) -> None:
    cols = list(columns or (history[0].keys() if history else ("epoch",)))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in history:
            w.writerow([row[c] if c == "epoch" else repr(float(row[c])) for c in cols])


# -- stage 1 ----------------------------------------------------------------

def _batches(train_idx: np.ndarray, batch_size: int, rng: Rng, epoch: int, drop_last: bool):
    perm = rng.child("shuffle", epoch).permutation(train_idx)
    stop = len(perm) - (len(perm) % batch_size if drop_last else 0)
    for start in range(0, stop, batch_size):
        yield perm[start:start + batch_size]


def init_model(dataset: Dataset, config: TrainConfig) -> SM3Model:
    clinic_dim = dataset.x_clinic.shape[1] if dataset.paired else dataset.x_derm.shape[1]
    return SM3Model(dataset.x_derm.shape[1], clinic_dim, dataset.class_counts, config)


def pretrain_mm(dataset: Dataset, config: TrainConfig,
                on_epoch: Callable[[dict], None] | None = None) -> Checkpoint:
    """Stage 1.  ``epochs = 0`` yields the untrained (random-init) checkpoint."""
    config.validate()
    s1 = config.stage1
    if not dataset.paired and s1.strategy != "simclr":
        raise ConfigError(f"strategy {s1.strategy!r} needs a paired two-modality dataset")
    train_idx = dataset.split("train")
    if s1.epochs and len(train_idx) < s1.batch_size:
        raise ConfigError(f"train split ({len(train_idx)}) is smaller than stage1.batch_size ({s1.batch_size})")
    if s1.epochs and s1.batch_size < 2:
        log.warning("stage-1 batch size 1 makes every contrastive loss identically zero")
    model = init_model(dataset, config)
    rng = Rng(config.seed)
    hyper = AdamWHyper(**{**asdict(config.optimizer), "lr": s1.lr})
    opt = AdamW(model.parameters(), hyper)
    policy = config.augment
    n_total = len(dataset)
    history = []
    for epoch in range(1, s1.epochs + 1):
        sums = dict.fromkeys(MM_COLUMNS, 0.0)
        n_batches = 0
        for idx in _batches(train_idx, s1.batch_size, rng, epoch, drop_last=True):
            xd = dataset.x_derm[idx]
            xd1 = augment_batch(xd, idx, policy, config.seed, 1, epoch, "derm", n_total)
            xd2 = augment_batch(xd, idx, policy, config.seed, 2, epoch, "derm", n_total)
            xc1 = xc2 = None
            if dataset.paired:
                xc = dataset.x_clinic[idx]
                xc1 = augment_batch(xc, idx, policy, config.seed, 1, epoch, "clinic", n_total)
                xc2 = augment_batch(xc, idx, policy, config.seed, 2, epoch, "clinic", n_total)
            opt.zero_grad()
            total, parts = model.contrastive_loss(xd1, xd2, xc1, xc2)
            if not total.is_finite():
                raise NonFiniteError(f"non-finite stage-1 loss at epoch {epoch}")
            total.backward()
            opt.step()
            for k in MM_COLUMNS:
                sums[k] += float(parts[k].item())
            n_batches += 1
        row = {"epoch": epoch, **{k: sums[k] / n_batches for k in MM_COLUMNS}}
        row["l_total"] = row["l_derm"] + row["l_clinic"] + row["l_mm"] + row["l_concat"]
        history.append(row)
        if on_epoch:
            on_epoch(row)
        log.info("stage1 epoch %d: %s", epoch, {k: round(v, 5) for k, v in row.items() if k != "epoch"})
    return Checkpoint.from_model(model, "mm", s1.epochs, history)


# -- stage 2 ----------------------------------------------------------------

def _embed(model: SM3Model, dataset: Dataset, idx: np.ndarray, batch: int = 512) -> np.ndarray:
    model.eval()
    out = []
    with no_grad():
        for start in range(0, len(idx), batch):
            sel = idx[start:start + batch]
            xc = dataset.x_clinic[sel] if dataset.paired else dataset.x_derm[sel]
            out.append(model.fused_features(dataset.x_derm[sel], xc).data)
    return np.concatenate(out, axis=0)


def pretrain_ml(dataset: Dataset, stage1: Checkpoint, config: TrainConfig | None = None,
                on_epoch: Callable[[dict], None] | None = None,
                on_pseudo: Callable[[PseudoLabelSet], None] | None = None) -> Checkpoint:
    """Stage 2: each epoch re-clusters the label embeddings and fits the heads to the clusters.

    ``on_pseudo`` sees every epoch's PseudoLabelSet (rows follow the train split order).
    """
    config = copy.deepcopy(config or stage1.config)
    config.stage1 = copy.deepcopy(stage1.config.stage1)
    config.model = copy.deepcopy(stage1.config.model)
    config.validate()
    s2 = config.stage2
    if stage1.derm_dim != dataset.x_derm.shape[1] or tuple(stage1.class_counts) != tuple(dataset.class_counts):
        raise ConfigError("stage-1 checkpoint is not compatible with this dataset")
    model = SM3Model(stage1.derm_dim, stage1.clinic_dim, stage1.class_counts, config,
                     stage1.mm_strategy, s2.strategy)
    stage1_params = {k: v for k, v in model.state_dict().items() if not k.startswith("classifier.")}
    missing = set(stage1_params) - set(stage1.params)
    if missing:
        raise StructureError(f"stage-1 checkpoint lacks {sorted(missing)[:3]}")
    model.load_state_dict({**model.state_dict(), **{k: stage1.params[k] for k in stage1_params}})
    clf = model.classifier
    rng = Rng(config.seed).child("stage2")
    drop_gen = np.random.Generator(np.random.PCG64(derive_seed(config.seed, "stage2-dropout")))
    if hasattr(clf, "relation"):
        clf.relation.set_dropout_rng(drop_gen)

    train_idx = dataset.split("train")
    trainable = clf.parameters() + (model.backbone_parameters() if s2.finetune_backbone else [])
    model.requires_grad_(False)
    for p in trainable:
        p.requires_grad = True
    opt = AdamW(trainable, AdamWHyper(**{**asdict(config.optimizer), "lr": s2.lr}))
    row_of = {int(i): r for r, i in enumerate(train_idx)}
    feats = None if s2.finetune_backbone else _embed(model, dataset, train_idx)
    previous: PseudoLabelSet | None = None
    history = []
    for epoch in range(1, s2.epochs + 1):
        if s2.finetune_backbone:
            feats = _embed(model, dataset, train_idx)
        clf.eval()
        with no_grad():
            h = Tensor(feats)
            tokens = clf.tokens(h) if s2.cluster_input == "post" else clf.pre_relation_tokens(h)
            label_emb = [t.data for t in tokens]
        pseudo = generate_pseudo_multilabels(label_emb, dataset.class_counts, config.seed, epoch,
                                             previous if s2.align_clusters else None,
                                             n_init=s2.cluster_restarts)
        previous = pseudo
        if on_pseudo:
            on_pseudo(pseudo)
        clf.train()
        total, n_batches = 0.0, 0
        for idx in _batches(train_idx, s2.batch_size, rng, epoch, drop_last=False):
            rows = np.array([row_of[int(i)] for i in idx])
            if s2.finetune_backbone:
                xc = dataset.x_clinic[idx] if dataset.paired else dataset.x_derm[idx]
                xd = dataset.x_derm[idx]
                if s2.augment:
                    xd = augment_batch(xd, idx, config.augment, config.seed, 1, epoch, "derm-ml", len(dataset))
                    xc = augment_batch(xc, idx, config.augment, config.seed, 1, epoch, "clinic-ml", len(dataset))
                h = model.fused_features(xd, xc)
            else:
                h = Tensor(feats[rows])
            opt.zero_grad()
            loss = multilabel_ce(clf(h), pseudo.assignments[rows])
            if not loss.is_finite():
                raise NonFiniteError(f"non-finite stage-2 loss at epoch {epoch}")
            loss.backward()
            opt.step()
            total += loss.item()
            n_batches += 1
        row = {"epoch": epoch, "l_ce": total / n_batches}
        history.append(row)
        if on_epoch:
            on_epoch(row)
        log.info("stage2 epoch %d: l_ce=%.5f", epoch, row["l_ce"])
    model.requires_grad_(True)
    return Checkpoint.from_model(model, "ml", s2.epochs, history)
