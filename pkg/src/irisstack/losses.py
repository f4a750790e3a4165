"""Triplet loss with semi-hard mining, ArcFace loss, and the curriculum schedule."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, make_result
from .errors import ConfigError, DimensionError, LabelError, MiningError


# ---------------------------------------------------------------------------
# triplet loss


@dataclass(frozen=True)
class TripletMarginState:
    """Adaptive margin: +step after ``patience`` consecutive low-semi-hard batches, capped."""

    margin: float = 0.5
    low_semi_hard_streak: int = 0
    threshold_fraction: float = 0.10
    step: float = 0.05
    cap: float = 1.5
    patience: int = 3

    def __post_init__(self):
        if not 0 < self.margin <= self.cap:
            raise ConfigError(f"margin {self.margin} must lie in (0, cap={self.cap}]")


@dataclass(frozen=True)
class TripletStats:
    semi_hard_count: int
    anchor_positive_pairs: int

    @property
    def semi_hard_fraction(self) -> float:
        return self.semi_hard_count / self.anchor_positive_pairs if self.anchor_positive_pairs else 0.0


def mine_triplets(sq_dist: np.ndarray, labels: np.ndarray, margin: float):
    """Pick one negative per ordered anchor-positive pair.

    Preference: the closest semi-hard negative (d_ap < d_an < d_ap + margin);
    otherwise the closest negative overall. Ties resolve to the lowest index.
    Returns (anchors, positives, negatives, semi_hard_mask).
    """
    n = len(labels)
    same = labels[:, None] == labels[None, :]
    anchors, positives, negatives, semi = [], [], [], []
    for a in range(n):
        neg_idx = np.flatnonzero(~same[a])
        d_neg = sq_dist[a, neg_idx]
        for p in np.flatnonzero(same[a]):
            if p == a:
                continue
            d_ap = sq_dist[a, p]
            candidates = (d_neg > d_ap) & (d_neg < d_ap + margin)
            if candidates.any():
                pool = np.where(candidates, d_neg, np.inf)
                semi.append(True)
            else:
                pool = d_neg
                semi.append(False)
            anchors.append(a)
            positives.append(p)
            negatives.append(neg_idx[int(np.argmin(pool))])
    return (
        np.asarray(anchors, dtype=np.int64),
        np.asarray(positives, dtype=np.int64),
        np.asarray(negatives, dtype=np.int64),
        np.asarray(semi, dtype=bool),
    )


def triplet_loss(embeddings: Tensor, labels, state: TripletMarginState) -> tuple[Tensor, TripletStats]:
    """Mean hinge max(0, |a-p|^2 - |a-n|^2 + m) over mined triplets.

    Embeddings are expected to be l2-normalised; that is not re-checked so the
    loss can be probed with finite differences.
    """
    labels = np.asarray(labels)
    if embeddings.ndim != 2 or labels.shape != (embeddings.shape[0],):
        raise DimensionError(f"embeddings {embeddings.shape} and labels {labels.shape} disagree")
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise MiningError("triplet mining needs at least two classes in the batch")
    if counts.max() < 2:
        raise MiningError("triplet mining needs a class with at least two samples in the batch")
    x = embeddings.data.astype(np.float64)
    gram = x @ x.T
    sq = np.diag(gram)
    sq_dist = np.maximum(sq[:, None] + sq[None, :] - 2 * gram, 0.0)
    a, p, n, semi = mine_triplets(sq_dist, labels, state.margin)
    diff_ap = x[a] - x[p]
    diff_an = x[a] - x[n]
    hinge = np.sum(diff_ap**2, axis=1) - np.sum(diff_an**2, axis=1) + state.margin
    active = hinge > 0
    count = len(a)
    value = np.maximum(hinge, 0.0).mean()
    stats = TripletStats(int(semi.sum()), count)

    def backward_fn(g):
        scale = float(np.reshape(g, -1)[0]) / count
        w = (active * scale)[:, None]
        grad = np.zeros_like(x)
        np.add.at(grad, a, 2 * w * (diff_ap - diff_an))
        np.add.at(grad, p, -2 * w * diff_ap)
        np.add.at(grad, n, 2 * w * diff_an)
        return (grad.astype(embeddings.dtype),)

    loss = make_result(np.asarray(value, dtype=embeddings.dtype), (embeddings,), backward_fn)
    return loss, stats


def update_margin(state: TripletMarginState, stats: TripletStats) -> TripletMarginState:
    low = stats.semi_hard_count < state.threshold_fraction * stats.anchor_positive_pairs
    if not low:
        return replace(state, low_semi_hard_streak=0)
    streak = state.low_semi_hard_streak + 1
    if streak < state.patience:
        return replace(state, low_semi_hard_streak=streak)
    # round away accumulated binary error so 0.5 + 20 * 0.05 lands on the cap exactly
    margin = min(round(state.margin + state.step, 10), state.cap)
    return replace(state, margin=margin, low_semi_hard_streak=0)


# ---------------------------------------------------------------------------
# ArcFace


@dataclass
class ArcFaceParams:
    class_weights: Tensor
    scale: float = 30.0
    margin: float = 0.2

    def __post_init__(self):
        if self.scale <= 0:
            raise ConfigError(f"ArcFace scale must be positive, got {self.scale}")
        if not 0 <= self.margin < math.pi / 2:
            raise ConfigError(f"ArcFace margin must lie in [0, pi/2), got {self.margin}")


_COS_CLAMP = 1.0 - 1e-7


def additive_angular_margin_ce(cosines: Tensor, labels, scale: float, margin: float) -> Tensor:
    """Cross-entropy over s*cos(theta_j), with the true class rotated to s*cos(theta_y + m)."""
    labels = np.asarray(labels, dtype=np.int64)
    c = cosines.data.astype(np.float64)
    n, k = c.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise LabelError(f"label {bad} outside [0, {k})")
    rows = np.arange(n)
    cy_raw = c[rows, labels]
    cy = np.clip(cy_raw, -_COS_CLAMP, _COS_CLAMP)
    sin_y = np.sqrt(np.maximum(0.0, 1.0 - cy**2))
    target = cy * math.cos(margin) - sin_y * math.sin(margin)
    z = scale * c
    z[rows, labels] = scale * target
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    value = np.mean(lse - z[rows, labels])

    def backward_fn(g):
        dz = np.exp(z - lse[:, None])
        dz[rows, labels] -= 1.0
        dz *= float(np.reshape(g, -1)[0]) / n
        dc = scale * dz
        inside = np.abs(cy_raw) < _COS_CLAMP
        dtarget = math.cos(margin) + cy * math.sin(margin) / np.maximum(sin_y, 1e-12)
        dc[rows, labels] = scale * dz[rows, labels] * dtarget * inside
        return (dc.astype(cosines.dtype),)

    return make_result(np.asarray(value, dtype=cosines.dtype), (cosines,), backward_fn)


def arcface_loss(embeddings: Tensor, labels, params: ArcFaceParams) -> Tensor:
    """ArcFace loss of ``embeddings`` against l2-normalised class weights."""
    weights = params.class_weights
    if embeddings.ndim != 2 or weights.ndim != 2 or embeddings.shape[1] != weights.shape[1]:
        raise DimensionError(
            f"embedding width {embeddings.shape} does not match class weights {weights.shape}"
        )
    cosines = ad.dense(embeddings, ad.l2_normalize(weights))
    return additive_angular_margin_ce(cosines, labels, params.scale, params.margin)


# ---------------------------------------------------------------------------
# curriculum


class Phase(str, enum.Enum):
    TRIPLET = "triplet"
    ARCFACE = "arcface"
    DONE = "done"

    @property
    def short(self) -> str:
        return {"triplet": "T", "arcface": "A", "done": "-"}[self.value]


@dataclass(frozen=True)
class CurriculumSchedule:
    """Triplet/ArcFace alternation; ``phase_lengths`` is one int or one entry per phase."""

    phase_lengths: Union[int, Sequence[int]] = 5
    cycles: int = 3

    def __post_init__(self):
        if self.cycles < 1:
            raise ConfigError(f"cycles must be >= 1, got {self.cycles}")
        lengths = self.lengths()
        if len(lengths) != 2 * self.cycles:
            raise ConfigError(f"phase_lengths needs {2 * self.cycles} entries, got {len(lengths)}")
        if min(lengths) < 1:
            raise ConfigError(f"phase lengths must be >= 1, got {list(lengths)}")

    def sequence(self) -> list[Phase]:
        return [Phase.TRIPLET, Phase.ARCFACE] * self.cycles

    def lengths(self) -> tuple[int, ...]:
        if isinstance(self.phase_lengths, int):
            return (self.phase_lengths,) * (2 * self.cycles)
        return tuple(int(v) for v in self.phase_lengths)

    @property
    def total_epochs(self) -> int:
        return sum(self.lengths())


def phase_index(schedule: CurriculumSchedule, completed_epochs: int) -> int:
    """Index into ``schedule.sequence()``; equals its length once training is done."""
    if completed_epochs < 0:
        raise ConfigError(f"completed_epochs must be >= 0, got {completed_epochs}")
    edge = 0
    for i, length in enumerate(schedule.lengths()):
        edge += length
        if completed_epochs < edge:
            return i
    return len(schedule.lengths())


def next_phase(schedule: CurriculumSchedule, completed_epochs: int) -> Phase:
    i = phase_index(schedule, completed_epochs)
    seq = schedule.sequence()
    return seq[i] if i < len(seq) else Phase.DONE
