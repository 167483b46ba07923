"""Evaluation protocols: pair matching, classification metrics, linear probing, fine-tuning."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from sm3.augment import augment_batch
from sm3.diffcore import Rng, Tensor, derive_seed, no_grad, softmax
from sm3.errors import ConfigError
from sm3.losses import multilabel_ce
from sm3.models import ML_STRATEGIES, Linear, MultiLabelClassifier
from sm3.optim import AdamW, AdamWHyper
from sm3.synthdata import Dataset
from sm3.train import Checkpoint, SM3Model, _batches, _embed

log = logging.getLogger(__name__)


# -- pair matching -----------------------------------------------------------

@dataclass
class PairMatchReport:
    avg_rank: float
    acc_at_1: float
    acc_at_5: float
    M: int
    ranks: list[float] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {"avg_rank": self.avg_rank, "acc_at_1": self.acc_at_1, "acc_at_5": self.acc_at_5, "M": self.M}


def pair_match(Z_derm, Z_clinic) -> PairMatchReport:
    """Rank each true clinical partner among all clinical rows, querying with the dermoscopy row.

    rank_i = 1 + #{j != i : s_ij > s_ii} + 0.5 * #{j != i : s_ij == s_ii}
    over cosine scores s.  Acc@k is the fraction of queries with rank <= k.
    """
    A = np.asarray(Z_derm.data if isinstance(Z_derm, Tensor) else Z_derm, dtype=np.float64)
    B = np.asarray(Z_clinic.data if isinstance(Z_clinic, Tensor) else Z_clinic, dtype=np.float64)
    if A.ndim != 2 or A.shape != B.shape:
        raise ValueError(f"embedding matrices must have equal shapes, got {A.shape} and {B.shape}")
    M = len(A)
    if M < 1:
        raise ValueError("need at least one query")
    An = A / np.maximum(np.linalg.norm(A, axis=1, keepdims=True), 1e-12)
    Bn = B / np.maximum(np.linalg.norm(B, axis=1, keepdims=True), 1e-12)
    S = An @ Bn.T
    true = np.diag(S)[:, None]
    above = (S > true).sum(1)
    ties = (S == true).sum(1) - 1
    ranks = 1.0 + above + 0.5 * ties
    return PairMatchReport(avg_rank=float(ranks.mean()), acc_at_1=float((ranks <= 1).mean()),
                           acc_at_5=float((ranks <= 5).mean()), M=M, ranks=ranks.tolist())


# -- classification metrics --------------------------------------------------

def auc(scores, labels) -> float | None:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted half.  None if one class is absent."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    r = rankdata(s)  # midranks
    u = r[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class Confusion:
    sens: float | None
    spec: float | None
    prec: float
    prec_undefined: bool
    tp: int
    fn: int
    tn: int
    fp: int


def confusion_metrics(predictions, labels, positive_class: int) -> Confusion:
    """Sensitivity, specificity and precision for one designated positive class.

    Precision with no positive predictions is reported as 0.0 with
    ``prec_undefined`` set; sensitivity/specificity are None when their
    denominator is empty.
    """
    p = np.asarray(predictions).ravel()
    y = np.asarray(labels).ravel()
    if p.size == 0:
        raise ValueError("empty input")
    if p.shape != y.shape:
        raise ValueError("predictions and labels differ in length")
    pp, yp = p == positive_class, y == positive_class
    tp = int((pp & yp).sum())
    fn = int((~pp & yp).sum())
    tn = int((~pp & ~yp).sum())
    fp = int((pp & ~yp).sum())
    sens = tp / (tp + fn) if tp + fn else None
    spec = tn / (tn + fp) if tn + fp else None
    undefined = tp + fp == 0
    prec = 0.0 if undefined else tp / (tp + fp)
    return Confusion(sens, spec, prec, undefined, tp, fn, tn, fp)


@dataclass
class MetricsReport:
    """Per (label, class) AUC/Sens/Spec/Prec on the test split.

    ``macro`` averages over every (label, class) pair; ``macro_designated``
    averages over the designated positive class of each label (class c_k - 1),
    the one-column-per-attribute table shape.
    """

    rows: list[dict]
    macro: dict[str, float]
    macro_designated: dict[str, float]
    setting: dict = field(default_factory=dict)

    @property
    def macro_auc(self) -> float:
        return self.macro["auc"]

    def to_dict(self) -> dict:
        return {"setting": self.setting, "macro": self.macro, "macro_designated": self.macro_designated,
                "rows": self.rows}

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label", "class", "metric", "value"])
            for row in self.rows:
                for metric in ("auc", "sens", "spec", "prec"):
                    v = row[metric]
                    w.writerow([row["label"], row["class"], metric, "" if v is None else repr(v)])
            for metric, v in self.macro.items():
                w.writerow(["macro", "all", metric, repr(v)])
            for metric, v in self.macro_designated.items():
                w.writerow(["macro", "designated", metric, repr(v)])


def _mean(values) -> float:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else float("nan")


def classification_report(probs: Sequence[np.ndarray], labels: np.ndarray, class_counts, setting=None) -> MetricsReport:
    rows = []
    for k, c in enumerate(class_counts):
        pred = probs[k].argmax(1)
        for cls in range(c):
            conf = confusion_metrics(pred, labels[:, k], cls)
            rows.append({
                "label": k, "class": cls, "designated": cls == c - 1,
                "auc": auc(probs[k][:, cls], labels[:, k] == cls),
                "sens": conf.sens, "spec": conf.spec, "prec": conf.prec, "prec_undefined": conf.prec_undefined,
                "support": int((labels[:, k] == cls).sum()),
            })
    metrics = ("auc", "sens", "spec", "prec")
    macro = {m: _mean(r[m] for r in rows) for m in metrics}
    designated = {m: _mean(r[m] for r in rows if r["designated"]) for m in metrics}
    return MetricsReport(rows, macro, designated, setting or {})


# -- probing and fine-tuning -------------------------------------------------

@dataclass
class EvalConfig:
    probe_lr: float = 1e-3
    probe_batch_size: int = 128
    probe_epochs: int = 50
    finetune_lr: float = 1e-4
    finetune_batch_size: int = 64
    finetune_epochs: int = 50
    probe_head: str = "no_proj"
    # stage-2 heads predict arbitrary cluster ids; re-draw them before fitting true labels
    reset_heads: bool = True
    # train-time views drawn with the checkpoint's augmentation policy
    augment: bool = True
    # keep the epoch with the best validation macro AUC instead of the last one
    select_on_val: bool = False
    # "probe": fine-tuning starts from the linearly probed classifier; "fresh": from an untrained one
    finetune_init: str = "probe"
    pair_queries: int = 100
    pair_split: str = "test"
    seed: int = 0

    def validate(self) -> None:
        if self.probe_head not in ML_STRATEGIES:
            raise ConfigError(f"eval.probe_head must be one of {ML_STRATEGIES}")
        for name in ("probe_lr", "probe_batch_size", "finetune_lr", "finetune_batch_size", "pair_queries"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"eval.{name} must be positive")
        for name in ("probe_epochs", "finetune_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"eval.{name} must be >= 0")
        if self.finetune_init not in ("probe", "fresh"):
            raise ConfigError("eval.finetune_init must be 'probe' or 'fresh'")
        if self.pair_split not in ("train", "val", "test"):
            raise ConfigError("eval.pair_split must be train, val or test")

    def to_dict(self) -> dict:
        return asdict(self)


def _check_compatible(ckpt: Checkpoint, dataset: Dataset) -> None:
    clinic_dim = dataset.x_clinic.shape[1] if dataset.paired else dataset.x_derm.shape[1]
    if ckpt.derm_dim != dataset.x_derm.shape[1] or ckpt.clinic_dim != clinic_dim:
        raise ConfigError(f"checkpoint expects inputs ({ckpt.derm_dim}, {ckpt.clinic_dim}), "
                          f"dataset has ({dataset.x_derm.shape[1]}, {clinic_dim})")
    if tuple(ckpt.class_counts) != tuple(dataset.class_counts):
        raise ConfigError("checkpoint and dataset disagree on class counts")


def _model_with_classifier(ckpt: Checkpoint, cfg: EvalConfig) -> SM3Model:
    if ckpt.ml_strategy is not None:
        model = ckpt.build_model()
        if cfg.reset_heads:
            rng = Rng(derive_seed(cfg.seed, "probe-head", ckpt.ml_strategy))
            clf = model.classifier
            clf.heads = [Linear(h.weight.shape[0], h.weight.shape[1], rng.child("q", k), h.weight.dtype)
                         for k, h in enumerate(clf.heads)]
        return model
    model = SM3Model(ckpt.derm_dim, ckpt.clinic_dim, ckpt.class_counts, ckpt.config, ckpt.mm_strategy)
    model.load_state_dict(ckpt.params)
    s2 = ckpt.config.stage2
    rng = Rng(derive_seed(cfg.seed, "probe-head", cfg.probe_head))
    model.classifier = MultiLabelClassifier(2 * model.feature_dim, ckpt.class_counts, rng, cfg.probe_head,
                                            s2.label_proj_dim, s2.ffn_dim, s2.dropout)
    model.ml_strategy = cfg.probe_head
    return model


def _fit_classifier(model: SM3Model, dataset: Dataset, cfg: EvalConfig, lr: float, batch: int, epochs: int,
                    full: bool, tag: str) -> SM3Model:
    clf = model.classifier
    if hasattr(clf, "relation"):
        clf.relation.set_dropout_rng(np.random.Generator(np.random.PCG64(derive_seed(cfg.seed, tag, "dropout"))))
    train_idx = dataset.split("train")
    model.requires_grad_(False)
    trainable = clf.parameters() + (model.backbone_parameters() if full else [])
    for p in trainable:
        p.requires_grad = True
    base = model.config.optimizer
    opt = AdamW(trainable, AdamWHyper(lr=lr, beta1=base.beta1, beta2=base.beta2, eps=base.eps,
                                      weight_decay=base.weight_decay))
    policy = model.config.augment
    feats = None if full or cfg.augment else _embed(model, dataset, train_idx)
    row_of = {int(i): r for r, i in enumerate(train_idx)}
    rng = Rng(derive_seed(cfg.seed, tag))
    n = len(dataset)
    best = None
    for epoch in range(1, epochs + 1):
        model.train()
        for idx in _batches(train_idx, batch, rng, epoch, drop_last=False):
            if feats is not None:
                h = Tensor(feats[[row_of[int(i)] for i in idx]])
            else:
                xd = dataset.x_derm[idx]
                xc = dataset.x_clinic[idx] if dataset.paired else xd
                if cfg.augment:
                    xd = augment_batch(xd, idx, policy, cfg.seed, 1, epoch, tag + "-derm", n)
                    xc = augment_batch(xc, idx, policy, cfg.seed, 1, epoch, tag + "-clinic", n)
                if full:
                    h = model.fused_features(xd, xc)
                else:
                    with no_grad():
                        h = Tensor(model.fused_features(xd, xc).data)
            opt.zero_grad()
            loss = multilabel_ce(clf(h), dataset.labels[idx])
            loss.check_finite("classification loss")
            loss.backward()
            opt.step()
        if cfg.select_on_val and len(dataset.split("val")):
            score = _evaluate(model, dataset, {}, "val").macro["auc"]
            if best is None or (score is not None and score > best[0]):
                best = (score, epoch, {k: v.copy() for k, v in model.state_dict().items()})
    if best is not None:
        model.load_state_dict(best[2])
        log.info("%s: kept epoch %d (validation macro AUC %.6f)", tag, best[1], best[0])
    model.requires_grad_(True)
    model.eval()
    return model


def predict_proba(model: SM3Model, dataset: Dataset, split: str = "test") -> list[np.ndarray]:
    idx = dataset.split(split)
    model.eval()
    with no_grad():
        h = Tensor(_embed(model, dataset, idx))
        return [softmax(lg, axis=1).data.astype(np.float64) for lg in model.classifier(h)]


def _evaluate(model: SM3Model, dataset: Dataset, setting: dict, split: str = "test") -> MetricsReport:
    probs = predict_proba(model, dataset, split)
    return classification_report(probs, dataset.labels[dataset.split(split)], dataset.class_counts, setting)


def linear_probe(ckpt: Checkpoint, dataset: Dataset, config: EvalConfig | None = None,
                 return_model: bool = False):
    """Frozen encoders; only the classifier stack is trained on the true labels of the train split."""
    cfg = config or EvalConfig()
    cfg.validate()
    _check_compatible(ckpt, dataset)
    model = _model_with_classifier(ckpt, cfg)
    _fit_classifier(model, dataset, cfg, cfg.probe_lr, cfg.probe_batch_size, cfg.probe_epochs, False, "probe")
    setting = {"protocol": "linear_probe", "mm_strategy": ckpt.mm_strategy, "ml_strategy": model.ml_strategy,
               "stage": ckpt.stage, "pretrain_epochs": ckpt.epoch, "seed": cfg.seed}
    report = _evaluate(model, dataset, setting)
    return (report, model) if return_model else report


def finetune(ckpt: Checkpoint, dataset: Dataset, config: EvalConfig | None = None, return_model: bool = False):
    """All parameters trainable, initialised from the checkpoint.

    With ``finetune_init="probe"`` the classifier is first fitted on frozen
    encoders (the linear-probe step) so that the encoders are not updated
    through a random head.
    """
    cfg = config or EvalConfig()
    cfg.validate()
    _check_compatible(ckpt, dataset)
    model = _model_with_classifier(ckpt, cfg)
    if cfg.finetune_init == "probe":
        _fit_classifier(model, dataset, cfg, cfg.probe_lr, cfg.probe_batch_size, cfg.probe_epochs, False, "probe")
    _fit_classifier(model, dataset, cfg, cfg.finetune_lr, cfg.finetune_batch_size, cfg.finetune_epochs, True,
                    "finetune")
    setting = {"protocol": "finetune", "mm_strategy": ckpt.mm_strategy, "ml_strategy": model.ml_strategy,
               "stage": ckpt.stage, "pretrain_epochs": ckpt.epoch, "seed": cfg.seed}
    report = _evaluate(model, dataset, setting)
    return (report, model) if return_model else report


def evaluate_pair_matching(ckpt: Checkpoint, dataset: Dataset, config: EvalConfig | None = None) -> PairMatchReport:
    """Pair matching on the first ``pair_queries`` studies of the held-out split."""
    cfg = config or EvalConfig()
    cfg.validate()
    _check_compatible(ckpt, dataset)
    if not dataset.paired:
        raise ConfigError("pair matching needs a paired dataset")
    idx = dataset.split(cfg.pair_split)[:cfg.pair_queries]
    model = ckpt.build_model().eval()
    with no_grad():
        zd, zc = model.matching_embeddings(dataset.x_derm[idx], dataset.x_clinic[idx])
    return pair_match(zd.data, zc.data)
