"""Genuine-probability score, AUC and EER-threshold HTER."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import Prediction
from .tensor import Tensor


def score(pred: Prediction) -> np.ndarray:
    """Per-sample genuine score: the average of s1 and the pixel-map mean."""
    s = pred.s.data if isinstance(pred.s, Tensor) else np.asarray(pred.s)
    m = pred.m.data if isinstance(pred.m, Tensor) else np.asarray(pred.m)
    s = np.atleast_2d(s)
    m = m.reshape(s.shape[0], -1)
    return (s[:, 1].astype(np.float64) + m.astype(np.float64).mean(axis=1)) / 2.0


def _split(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores but {labels.size} labels")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 (spoof) or 1 (genuine)")
    gen, spf = scores[labels == 1], scores[labels == 0]
    if gen.size == 0 or spf.size == 0:
        raise ValueError("both genuine and spoof samples are required")
    return gen, spf


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(genuine > spoof) with ties counted as one half."""
    gen, spf = _split(scores, labels)
    spf = np.sort(spf)
    below = np.searchsorted(spf, gen, side="left")
    ties = np.searchsorted(spf, gen, side="right") - below
    # twice the numerator is an integer, so the sum is exact
    twice = int(np.sum(2 * below + ties))
    return twice / (2.0 * gen.size * spf.size)


def _counts(gen: np.ndarray, spf: np.ndarray, tau: float) -> tuple[int, int]:
    return int(np.count_nonzero(spf >= tau)), int(np.count_nonzero(gen < tau))


def hter(scores, labels, tau: float) -> tuple[float, float, float]:
    """(FAR, FRR, HTER) when samples scoring >= tau are accepted as genuine."""
    gen, spf = _split(scores, labels)
    fa, fr = _counts(gen, spf, tau)
    ns, ng = spf.size, gen.size
    # one integer division so HTER is the correctly rounded exact value
    return fa / ns, fr / ng, (fa * ng + fr * ns) / (2 * ns * ng)


def candidate_thresholds(scores) -> np.ndarray:
    u = np.unique(np.asarray(scores, dtype=np.float64))
    if u.size == 1:
        return u
    return (u[:-1] + u[1:]) / 2.0


def eer_threshold(scores, labels) -> float:
    """Midpoint threshold minimising |FAR - FRR|; the lowest one wins ties.

    When every score is identical that score itself is returned.
    """
    gen, spf = _split(scores, labels)
    cands = candidate_thresholds(np.concatenate([gen, spf]))
    ng, ns = gen.size, spf.size
    best, best_gap = cands[0], None
    for tau in cands:
        fa, fr = _counts(gen, spf, tau)
        gap = abs(fa * ng - fr * ns)  # |FAR - FRR| scaled by ns*ng, kept in integers
        if best_gap is None or gap < best_gap:
            best, best_gap = tau, gap
    return float(best)


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """(FAR, 1 - FRR) pairs for every distinct threshold, from strict to lax."""
    gen, spf = _split(scores, labels)
    taus = np.concatenate([[np.inf], np.unique(np.concatenate([gen, spf]))[::-1]])
    far = np.array([np.mean(spf >= t) for t in taus])
    tpr = np.array([np.mean(gen >= t) for t in taus])
    return far, tpr


@dataclass
class EvalReport:
    scores: np.ndarray
    labels: np.ndarray
    threshold: float
    far: float
    frr: float
    hter: float
    auc: float
    eer: float
    train_domains: list = field(default_factory=list)
    test_domain: str = ""
    seed: int = 0

    def row(self) -> dict:
        return {"test_domain": self.test_domain, "auc": self.auc, "hter": self.hter,
                "far": self.far, "frr": self.frr, "threshold": self.threshold}


def evaluate(scores, labels, train_domains=(), test_domain: str = "", seed: int = 0) -> EvalReport:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    tau = eer_threshold(scores, labels)
    far, frr, h = hter(scores, labels, tau)
    return EvalReport(scores, labels, tau, far, frr, h, auc(scores, labels), h,
                      list(train_domains), test_domain, seed)
