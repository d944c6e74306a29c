"""Confidence-gated candidate filtering, hard-anchor selection, and negative allocation.

Three stages feed the contrastive loss: (a) keep only candidates whose
prediction confidence clears a weak threshold, (b) per class, sample anchors
from the remaining candidates whose confidence is still below a strong
threshold (the ambiguous ones worth contrasting), and (c) for each anchor,
allocate a fixed negative budget across the other classes in proportion to
prototype similarity, so look-alike classes contribute more negatives.

All sampling is seeded and fully deterministic for identical inputs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .prob_embed import ProbRep, mls

SOURCES = ("labeled", "unlabeled")


@dataclass(frozen=True, eq=False)
class PixelCandidate:
    """One pixel's representation with its confidence and (pseudo-)label.

    pixel_id is an opaque bookkeeping handle for callers that need to route
    gradients back to the pixel; the sampling operations never read it.
    """

    rep: ProbRep
    confidence: float
    class_id: int
    source: str
    pixel_id: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}, got {self.source!r}")


@dataclass(frozen=True)
class SamplingConfig:
    delta_w: float = 0.70
    delta_s: float = 0.80
    anchors_per_class: int = 16
    negatives_per_anchor: int = 512
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("delta_w", "delta_s"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.anchors_per_class < 1:
            raise ValueError("anchors_per_class must be positive")
        if self.negatives_per_anchor < 1:
            raise ValueError("negatives_per_anchor must be positive")
        if self.delta_w >= self.delta_s:
            warnings.warn(
                f"delta_w={self.delta_w} >= delta_s={self.delta_s}: the valid pool "
                "cannot contain any hard anchor",
                stacklevel=2,
            )


def filter_valid(candidates: Sequence[PixelCandidate], delta_w: float) -> list[PixelCandidate]:
    """Keep candidates whose confidence is strictly greater than delta_w."""
    return [c for c in candidates if c.confidence > delta_w]


def sample_anchors(
    valid: Sequence[PixelCandidate], cfg: SamplingConfig
) -> dict[int, list[PixelCandidate]]:
    """Per class, sample up to anchors_per_class candidates with confidence below delta_s.

    Classes with no hard candidate are absent from the result. Selection is
    uniform without replacement, seeded by cfg.rng_seed, and classes are
    processed in sorted order so identical inputs give identical picks.
    """
    by_class: dict[int, list[PixelCandidate]] = {}
    for c in valid:
        by_class.setdefault(c.class_id, []).append(c)
    rng = np.random.default_rng(cfg.rng_seed)
    anchors: dict[int, list[PixelCandidate]] = {}
    for cls in sorted(by_class):
        hard = [c for c in by_class[cls] if c.confidence < cfg.delta_s]
        if not hard:
            continue
        if len(hard) <= cfg.anchors_per_class:
            anchors[cls] = hard
        else:
            idx = rng.choice(len(hard), size=cfg.anchors_per_class, replace=False)
            anchors[cls] = [hard[i] for i in sorted(idx)]
    return anchors


def largest_remainder(weights, n: int) -> np.ndarray:
    """Apportion n items to weights exactly: floors first, remainders by size.

    Ties between equal remainders resolve to the earlier index. The returned
    integer counts always sum to n.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("weights must be a non-empty 1-D vector")
    if np.any(w < 0.0) or w.sum() <= 0.0:
        raise ValueError("weights must be nonnegative with a positive sum")
    if n < 0:
        raise ValueError("n must be nonnegative")
    quota = n * w / w.sum()
    counts = np.floor(quota).astype(np.int64)
    remainder = n - int(counts.sum())
    order = np.argsort(-(quota - counts), kind="stable")
    counts[order[:remainder]] += 1
    return counts


def allocate_negatives(
    anchor_class: int,
    prototypes: dict,
    pools: dict[int, Sequence[PixelCandidate]],
    n: int,
    seed: int,
    tau: float = 0.5,
    similarity: Callable = mls,
) -> list[PixelCandidate]:
    """Draw n negatives across non-anchor classes, weighted by prototype similarity.

    Class weights are a softmax over similarity(prototype_c, prototype_anchor)
    divided by tau, apportioned to integer counts by largest remainder. Quota a
    class cannot fill from its pool spills over to the next-largest-weight
    class with spare capacity; if all pools together hold fewer than n
    candidates, everything available is returned.
    """
    if n < 1:
        raise ValueError("n must be positive")
    anchor_proto = prototypes.get(anchor_class)
    if anchor_proto is None:
        raise ValueError(f"anchor class {anchor_class} has no prototype")
    classes = [
        cls
        for cls in sorted(pools)
        if cls != anchor_class and len(pools[cls]) > 0 and cls in prototypes
    ]
    if not classes:
        raise ValueError("no non-anchor class pool is available")

    scores = np.array([similarity(prototypes[cls], anchor_proto) / tau for cls in classes])
    scores -= scores.max()
    weights = np.exp(scores)
    weights /= weights.sum()
    counts = largest_remainder(weights, n)

    caps = np.array([len(pools[cls]) for cls in classes])
    # Weight order with class id as the tie breaker, reused for spillover.
    order = sorted(range(len(classes)), key=lambda i: (-weights[i], classes[i]))
    counts = np.minimum(counts, caps)
    leftover = n - int(counts.sum())
    for i in order:
        if leftover <= 0:
            break
        extra = min(leftover, int(caps[i] - counts[i]))
        counts[i] += extra
        leftover -= extra

    rng = np.random.default_rng(seed)
    picked: list[PixelCandidate] = []
    for i in order:
        if counts[i] == 0:
            continue
        pool = pools[classes[i]]
        idx = rng.choice(len(pool), size=int(counts[i]), replace=False)
        picked.extend(pool[j] for j in sorted(idx))
    return picked
