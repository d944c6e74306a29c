"""Prototype-contrastive losses with analytic gradients, plus loss weighting.

Two interchangeable losses share one softmax-contrast structure: the
probabilistic form scores anchor/prototype and anchor/negative pairs by
mutual likelihood, the deterministic baseline scores them by negative squared
euclidean distance. Anchors are pulled toward their class prototype and
pushed from sampled negatives of other classes.

Per-anchor terms are summed in index order so results are bitwise
reproducible; prototypes are treated as constants (no gradient is returned
for them).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .prob_embed import DistPrototype, PointPrototype, ProbRep, _LOG_2PI, mls


@dataclass(frozen=True)
class SchedulerConfig:
    """Exponentially decaying weight for the contrastive term."""

    lambda_c0: float = 1.0
    alpha: float = -2.0
    total_epochs: int = 40

    def __post_init__(self):
        if self.lambda_c0 < 0.0:
            raise ValueError("lambda_c0 must be nonnegative")
        if not self.alpha < 0.0:
            raise ValueError("alpha must be negative")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be at least 1")


def lambda_c(t: float, cfg: SchedulerConfig) -> float:
    """Contrastive weight at epoch t: lambda_c0 * exp(alpha * (t / T)^2)."""
    if not 0 <= t <= cfg.total_epochs:
        raise ValueError(f"epoch index {t} outside [0, {cfg.total_epochs}]")
    return cfg.lambda_c0 * math.exp(cfg.alpha * (t / cfg.total_epochs) ** 2)


def lambda_u(confidences: Sequence[float], delta_u: float) -> float:
    """Fraction of confidences strictly greater than delta_u (0 for an empty list)."""
    if not 0.0 <= delta_u <= 1.0:
        raise ValueError("delta_u must lie in [0, 1]")
    conf = np.asarray(confidences, dtype=np.float64)
    if conf.size == 0:
        return 0.0
    return float(np.mean(conf > delta_u))


def total_loss(l_s: float, l_u: float, l_contrast: float, lam_u: float, lam_c: float) -> float:
    """Weighted sum l_s + lam_u * l_u + lam_c * l_contrast."""
    for name, v in (("l_s", l_s), ("l_u", l_u), ("l_contrast", l_contrast)):
        if not math.isfinite(v):
            raise ValueError(f"{name} must be finite, got {v}")
    if not 0.0 <= lam_u <= 1.0:
        raise ValueError("lam_u must lie in [0, 1]")
    if lam_c < 0.0 or not math.isfinite(lam_c):
        raise ValueError("lam_c must be finite and nonnegative")
    return l_s + lam_u * l_u + lam_c * l_contrast


def softmax_contrast_term(pos_score: float, neg_scores, tau: float):
    """One anchor's -log softmax term with a log-sum-exp stabilized denominator.

    Returns (term, d_pos, d_negs), the derivatives taken with respect to the
    raw similarity scores. With no negatives the term is exactly zero.
    """
    if tau <= 0.0:
        raise ValueError("temperature must be positive")
    negs = np.asarray(neg_scores, dtype=np.float64)
    logits = np.concatenate(([float(pos_score)], negs.ravel())) / tau
    m = logits.max()
    exps = np.exp(logits - m)
    z = exps.sum()
    term = float(math.log(z) + m - logits[0])
    probs = exps / z
    d_pos = (probs[0] - 1.0) / tau
    return term, float(d_pos), probs[1:] / tau


@dataclass(frozen=True, eq=False)
class ContrastBatch:
    """Anchors, class prototypes, and per-anchor negatives for the probabilistic loss.

    negatives maps an anchor's index in `anchors` to its sampled negative
    representations; anchors without an entry have no negatives.
    """

    anchors: list[tuple[ProbRep, int]]
    prototypes: dict[int, DistPrototype]
    negatives: dict[int, list[tuple[ProbRep, int]]] = field(default_factory=dict)
    temperature: float = 0.5

    def __post_init__(self):
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")
        for rep, cls in self.anchors:
            if cls not in self.prototypes:
                raise ValueError(f"anchor class {cls} has no prototype")
        for idx, negs in self.negatives.items():
            if not 0 <= idx < len(self.anchors):
                raise ValueError(f"negative list attached to unknown anchor index {idx}")
            anchor_cls = self.anchors[idx][1]
            for rep, cls in negs:
                if cls == anchor_cls:
                    raise ValueError(f"negative of class {cls} attached to an anchor of the same class")


@dataclass(eq=False)
class ProbContrastGrads:
    """Gradients aligned with a ContrastBatch: one entry per anchor / negative slot."""

    anchor_mu: list[np.ndarray]
    anchor_sigma2: list[np.ndarray]
    neg_mu: dict[int, list[np.ndarray]]
    neg_sigma2: dict[int, list[np.ndarray]]


@dataclass(eq=False)
class PointContrastGrads:
    """Gradients for the deterministic baseline loss."""

    anchor_mu: list[np.ndarray]
    neg_mu: dict[int, list[np.ndarray]]


def _pairwise_mls(mu_a, s2_a, mu_b, s2_b):
    """Scores plus anchor-side and other-side partials for a batch of pairs.

    mu_b/s2_b are (m, D); returns scores (m,), d mu_a (m, D), d sigma2 (m, D).
    The other-side partials are -d_mu_a and the same d_sigma2.
    """
    s = s2_a[None, :] + s2_b
    d = mu_a[None, :] - mu_b
    scores = -0.5 * np.sum(d * d / s + np.log(s), axis=1) - 0.5 * mu_a.size * _LOG_2PI
    d_mu_a = -d / s
    d_sigma2 = (d * d - s) / (2.0 * s * s)
    return scores, d_mu_a, d_sigma2


def _class_weights(anchors) -> list[float]:
    """Per-anchor weight 1 / (number of anchor classes * anchors in that class)."""
    counts: dict[int, int] = {}
    for _, cls in anchors:
        counts[cls] = counts.get(cls, 0) + 1
    n_classes = len(counts)
    return [1.0 / (n_classes * counts[cls]) for _, cls in anchors]


def prcl_loss(batch: ContrastBatch) -> tuple[float, ProbContrastGrads]:
    """Probabilistic prototype-contrastive loss over a batch of anchors.

    Each anchor contributes -log of the softmax probability that it matches
    its class prototype rather than any of its negatives, with similarities
    scored by mutual likelihood and divided by the temperature. Anchor terms
    are averaged per class and classes averaged uniformly. Gradients cover
    every anchor and negative mean/variance; prototypes get none.
    """
    grads = ProbContrastGrads([], [], {}, {})
    if not batch.anchors:
        return 0.0, grads
    weights = _class_weights(batch.anchors)
    tau = batch.temperature
    loss = 0.0
    for idx, (rep, cls) in enumerate(batch.anchors):
        w = weights[idx]
        proto = batch.prototypes[cls]
        pos, d_pos_mu, d_pos_s2 = _pairwise_mls(
            rep.mu, rep.sigma2, proto.mu[None, :], proto.sigma2[None, :]
        )
        negs = batch.negatives.get(idx, [])
        if negs:
            neg_mu = np.stack([z.mu for z, _ in negs])
            neg_s2 = np.stack([z.sigma2 for z, _ in negs])
            neg_scores, d_neg_mu_a, d_neg_s2 = _pairwise_mls(rep.mu, rep.sigma2, neg_mu, neg_s2)
        else:
            neg_scores = np.empty(0)
        term, d_pos, d_negs = softmax_contrast_term(float(pos[0]), neg_scores, tau)
        loss += w * term

        a_mu = w * d_pos * d_pos_mu[0]
        a_s2 = w * d_pos * d_pos_s2[0]
        if negs:
            coef = (w * d_negs)[:, None]
            a_mu = a_mu + (coef * d_neg_mu_a).sum(axis=0)
            a_s2 = a_s2 + (coef * d_neg_s2).sum(axis=0)
            grads.neg_mu[idx] = list(-coef * d_neg_mu_a)
            grads.neg_sigma2[idx] = list(coef * d_neg_s2)
        grads.anchor_mu.append(a_mu)
        grads.anchor_sigma2.append(a_s2)
    return float(loss), grads


def infonce_l2_loss(
    anchors: list[tuple[np.ndarray, int]],
    prototypes: dict[int, PointPrototype],
    negatives: dict[int, list[tuple[np.ndarray, int]]],
    tau: float,
) -> tuple[float, PointContrastGrads]:
    """Deterministic baseline: same contrast structure with similarity -||u - v||^2."""
    if tau <= 0.0:
        raise ValueError("temperature must be positive")
    grads = PointContrastGrads([], {})
    if not anchors:
        return 0.0, grads
    anchors = [(np.asarray(v, dtype=np.float64), cls) for v, cls in anchors]
    for _, cls in anchors:
        if cls not in prototypes:
            raise ValueError(f"anchor class {cls} has no prototype")
    weights = _class_weights(anchors)
    loss = 0.0
    for idx, (vec, cls) in enumerate(anchors):
        w = weights[idx]
        proto = prototypes[cls]
        d_pos_vec = vec - proto.mu
        pos = -float(d_pos_vec @ d_pos_vec)
        negs = negatives.get(idx, [])
        if negs:
            neg_mats = np.stack([np.asarray(v, dtype=np.float64) for v, _ in negs])
            for _, ncls in negs:
                if ncls == cls:
                    raise ValueError(f"negative of class {ncls} attached to an anchor of the same class")
            d_neg = vec[None, :] - neg_mats
            neg_scores = -np.sum(d_neg * d_neg, axis=1)
        else:
            neg_scores = np.empty(0)
        term, d_pos, d_negs = softmax_contrast_term(pos, neg_scores, tau)
        loss += w * term

        a_mu = w * d_pos * (-2.0 * d_pos_vec)
        if negs:
            coef = (w * d_negs)[:, None]
            a_mu = a_mu + (coef * (-2.0 * d_neg)).sum(axis=0)
            grads.neg_mu[idx] = list(coef * (2.0 * d_neg))
        grads.anchor_mu.append(a_mu)
    return float(loss), grads
