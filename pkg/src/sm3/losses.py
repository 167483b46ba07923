"""Contrastive and pseudo-label objectives."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from sm3.diffcore import Tensor, concat, log_softmax, pairwise_cosine


def _check(Z1: Tensor, Z2: Tensor, tau: float) -> int:
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if Z1.shape != Z2.shape:
        raise ValueError(f"view shapes differ: {Z1.shape} vs {Z2.shape}")
    n = Z1.shape[0]
    if n < 1:
        raise ValueError("empty batch")
    return n


def _anchored_terms(anchor: Tensor, positives: Tensor, same_view: Tensor, tau: float) -> Tensor:
    """Per-row -log softmax of the positive against [all positives-side columns, off-diagonal same-view columns]."""
    n = anchor.shape[0]
    cross = pairwise_cosine(anchor, positives) * (1.0 / tau)
    within = pairwise_cosine(anchor, same_view) * (1.0 / tau)
    mask = np.zeros((n, n), dtype=within.dtype)
    np.fill_diagonal(mask, -np.inf)
    logits = concat([cross, within + mask], axis=1)
    diag = np.arange(n)
    return logits.logsumexp(axis=1) - cross[diag, diag]


def nt_xent(Z1, Z2, tau: float, symmetric: bool = False) -> Tensor:
    """Normalised-temperature cross entropy anchored at view 1, averaged over the batch.

    Row i contrasts sim(z1_i, z2_i) against every sim(z1_i, z2_j) and every
    sim(z1_i, z1_j) with j != i.  ``symmetric`` averages with the view-2 anchored loss.
    """
    Z1, Z2 = _as(Z1), _as(Z2)
    _check(Z1, Z2, tau)
    loss = _anchored_terms(Z1, Z2, Z1, tau).mean()
    if symmetric:
        loss = (loss + _anchored_terms(Z2, Z1, Z2, tau).mean()) * 0.5
    return loss


def l_mm(Zd1, Zd2, Zc1, Zc2, tau: float, mirror: bool = False) -> Tensor:
    """Cross-modality loss anchored at dermoscopy view 1.

    Two terms per sample: positives are the clinical embeddings of view 1 and
    view 2 respectively; both use the other dermoscopy view-1 rows as extra
    negatives.  ``Zd2`` only enters through ``mirror``, which adds the
    clinical-anchored counterpart.
    """
    Zd1, Zd2, Zc1, Zc2 = _as(Zd1), _as(Zd2), _as(Zc1), _as(Zc2)
    for Z in (Zd2, Zc1, Zc2):
        _check(Zd1, Z, tau)
    per_sample = _anchored_terms(Zd1, Zc1, Zd1, tau) + _anchored_terms(Zd1, Zc2, Zd1, tau)
    loss = per_sample.mean()
    if mirror:
        loss = loss + (_anchored_terms(Zc1, Zd1, Zc1, tau) + _anchored_terms(Zc1, Zd2, Zc1, tau)).mean()
    return loss


@dataclass
class SSLLoss:
    """Joint loss with its addends kept for logging."""

    total: Tensor
    l_derm: Tensor
    l_clinic: Tensor
    l_mm: Tensor

    def components(self) -> dict[str, float]:
        return {"l_derm": self.l_derm.item(), "l_clinic": self.l_clinic.item(), "l_mm": self.l_mm.item()}


def l_ssl(Zd1, Zd2, Zc1, Zc2, tau: float, Md1=None, Mc1=None, Mc2=None, Md2=None,
          symmetric: bool = False, mirror: bool = False) -> SSLLoss:
    """L_derm + L_clinic + L_mm.

    ``Zd*``/``Zc*`` are the per-modality contrastive projections.  The
    cross-modality term uses ``Md1``/``Mc1``/``Mc2`` (the shared-space
    projections) when given, otherwise the per-modality projections.
    """
    Md1 = Zd1 if Md1 is None else Md1
    Md2 = Zd2 if Md2 is None else Md2
    Mc1 = Zc1 if Mc1 is None else Mc1
    Mc2 = Zc2 if Mc2 is None else Mc2
    a = nt_xent(Zd1, Zd2, tau, symmetric)
    b = nt_xent(Zc1, Zc2, tau, symmetric)
    c = l_mm(Md1, Md2, Mc1, Mc2, tau, mirror)
    return SSLLoss(total=a + b + c, l_derm=a, l_clinic=b, l_mm=c)


def multilabel_ce(logits: Sequence[Tensor], y) -> Tensor:
    """Sum over label heads of the cross entropy against pseudo-labels, averaged over samples.

    ``logits[k]`` is (N, c_k) (or (c_k,) for one sample); ``y`` is (N, K) integers.
    """
    y = np.asarray(y, dtype=np.int64)
    single = logits[0].ndim == 1
    if single:
        logits = [lg.reshape(1, -1) for lg in logits]
        y = y.reshape(1, -1)
    n, K = y.shape
    if K != len(logits):
        raise ValueError(f"{len(logits)} heads but labels have {K} columns")
    rows = np.arange(n)
    total = None
    for k, lg in enumerate(logits):
        c = lg.shape[1]
        col = y[:, k]
        if col.min() < 0 or col.max() >= c:
            raise ValueError(f"pseudo-label out of range for head {k} (classes: {c})")
        nll = -log_softmax(lg, axis=1)[rows, col]
        total = nll if total is None else total + nll
    return total.mean()


def _as(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
