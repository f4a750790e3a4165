"""Cosine matching, gallery/probe protocols and verification/identification metrics.

Scores and rates are accumulated in float64 regardless of embedding dtype.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DegenerateInputError, InputError, SampleLookupError

log = logging.getLogger(__name__)

DEFAULT_FMR_TARGETS = (0.001, 0.0001)
_NORM_FLOOR = 1e-12


def cosine_similarity(probe, gallery) -> float:
    p = np.asarray(probe, dtype=np.float64).ravel()
    g = np.asarray(gallery, dtype=np.float64).ravel()
    if p.shape != g.shape:
        raise InputError(f"vector lengths differ: {p.size} vs {g.size}")
    np_, ng = np.linalg.norm(p), np.linalg.norm(g)
    if np_ <= _NORM_FLOOR or ng <= _NORM_FLOOR:
        raise DegenerateInputError("cosine similarity of a zero-norm vector is undefined")
    return float(np.clip(p @ g / (np_ * ng), -1.0, 1.0))


# ---------------------------------------------------------------------------
# protocol


@dataclass
class Protocol:
    """Gallery and probe sample ids grouped by subject, plus an id -> vector lookup."""

    gallery: dict[str, list[str]]
    probe: dict[str, list[str]]
    embeddings: Mapping[str, np.ndarray] = field(default_factory=dict)
    kind: str = "closed"

    def __post_init__(self):
        if self.kind not in ("closed", "open"):
            raise InputError(f"protocol kind must be 'closed' or 'open', got {self.kind!r}")
        g = {s for ids in self.gallery.values() for s in ids}
        p = {s for ids in self.probe.values() for s in ids}
        shared = g & p
        if shared:
            raise InputError(f"gallery and probe share sample(s): {sorted(shared)[:5]}")

    def gallery_items(self) -> list[tuple[str, str]]:
        """(sample_id, subject) sorted by sample id."""
        return sorted((s, subj) for subj, ids in self.gallery.items() for s in ids)

    def probe_items(self) -> list[tuple[str, str]]:
        return sorted((s, subj) for subj, ids in self.probe.items() for s in ids)


def split_protocol(
    samples: Mapping[str, Sequence[str]],
    embeddings: Mapping[str, np.ndarray],
    exclude_subjects: Sequence[str] = (),
) -> Protocol:
    """Halve each subject's sorted samples into gallery (first half) and probe.

    With ``exclude_subjects`` (training identities) the result is the open-set
    protocol: those identities are dropped and must not reappear.
    """
    excluded = set(exclude_subjects)
    gallery, probe = {}, {}
    for subj in sorted(samples):
        if subj in excluded:
            continue
        ids = sorted(samples[subj])
        if len(ids) < 2:
            raise InputError(f"subject {subj!r} needs at least 2 samples for a gallery/probe split")
        half = len(ids) // 2
        gallery[subj], probe[subj] = ids[:half], ids[half:]
    if not gallery:
        raise InputError("no subjects left for the protocol")
    return Protocol(gallery, probe, embeddings, kind="open" if excluded else "closed")


def enumerate_pairs(protocol: Protocol) -> tuple[int, int]:
    """(genuine, impostor) pair counts of the full probe x gallery comparison."""
    n_probe = sum(len(v) for v in protocol.probe.values())
    n_gallery = sum(len(v) for v in protocol.gallery.values())
    if n_probe == 0 or n_gallery == 0:
        raise InputError("protocol has an empty gallery or probe set")
    genuine = sum(len(ids) * len(protocol.gallery.get(s, ())) for s, ids in protocol.probe.items())
    return genuine, n_probe * n_gallery - genuine


def _stack(protocol: Protocol, items) -> np.ndarray:
    rows = []
    for sample_id, _ in items:
        try:
            rows.append(np.asarray(protocol.embeddings[sample_id], dtype=np.float64).ravel())
        except KeyError:
            raise SampleLookupError(f"no embedding for sample {sample_id!r}") from None
    m = np.stack(rows)
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    bad = np.flatnonzero(norms[:, 0] <= _NORM_FLOOR)
    if bad.size:
        raise DegenerateInputError(f"embedding of {items[bad[0]][0]!r} has zero norm")
    return m / norms


@dataclass
class ScoreMatrix:
    probe_ids: list[str]
    probe_subjects: list[str]
    gallery_ids: list[str]
    gallery_subjects: list[str]
    scores: np.ndarray  # float64 [probes, gallery]

    @property
    def genuine_mask(self) -> np.ndarray:
        return np.asarray(self.probe_subjects)[:, None] == np.asarray(self.gallery_subjects)[None, :]


@dataclass
class ScoreSet:
    genuine: np.ndarray
    impostor: np.ndarray

    def __post_init__(self):
        self.genuine = np.asarray(self.genuine, dtype=np.float64).ravel()
        self.impostor = np.asarray(self.impostor, dtype=np.float64).ravel()

    def validate(self) -> None:
        if self.genuine.size == 0 or self.impostor.size == 0:
            raise InputError(
                f"need genuine and impostor scores (got {self.genuine.size} and {self.impostor.size})"
            )
        both = np.concatenate([self.genuine, self.impostor])
        if not np.all(np.isfinite(both)) or np.abs(both).max() > 1.0:
            raise InputError("scores must be finite cosine values in [-1, 1]")


def score_matrix(protocol: Protocol) -> ScoreMatrix:
    enumerate_pairs(protocol)  # emptiness check
    p_items, g_items = protocol.probe_items(), protocol.gallery_items()
    p, g = _stack(protocol, p_items), _stack(protocol, g_items)
    s = np.clip(p @ g.T, -1.0, 1.0)
    return ScoreMatrix(
        [i for i, _ in p_items], [s_ for _, s_ in p_items], [i for i, _ in g_items], [s_ for _, s_ in g_items], s
    )


def score_all(protocol: Protocol) -> ScoreSet:
    m = score_matrix(protocol)
    mask = m.genuine_mask
    return ScoreSet(m.scores[mask], m.scores[~mask])


# ---------------------------------------------------------------------------
# verification metrics


def sweep(scores: ScoreSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """FMR and FNMR at -inf, every distinct score, and +inf (ascending thresholds).

    FMR(t) = fraction of impostor >= t, FNMR(t) = fraction of genuine < t.
    """
    scores.validate()
    g, i = np.sort(scores.genuine), np.sort(scores.impostor)
    t = np.concatenate([[-np.inf], np.unique(np.concatenate([g, i])), [np.inf]])
    fmr = (i.size - np.searchsorted(i, t, side="left")) / i.size
    fnmr = np.searchsorted(g, t, side="left") / g.size
    return t, fmr, fnmr


def eer(scores: ScoreSet) -> tuple[float, float]:
    """Equal error rate and its threshold.

    Where FMR and FNMR never coincide on a sweep point, both are interpolated
    linearly between the two bracketing points; the threshold is interpolated
    the same way (or taken from the finite end when one end is infinite).
    """
    t, fmr, fnmr = sweep(scores)
    d = fmr - fnmr  # +1 at -inf, -1 at +inf, non-increasing
    exact = np.flatnonzero(d == 0)
    if exact.size:
        k = exact[0]
        return float(fmr[k]), float(t[k])
    k = int(np.flatnonzero(d > 0)[-1])
    a = d[k] / (d[k] - d[k + 1])
    rate = fmr[k] + a * (fmr[k + 1] - fmr[k])
    lo, hi = t[k], t[k + 1]
    if np.isfinite(lo) and np.isfinite(hi):
        thr = lo + a * (hi - lo)
    else:
        thr = lo if np.isfinite(lo) else hi
    return float(rate), float(thr)


@dataclass(frozen=True)
class TmrResult:
    target: float
    tmr: float
    threshold: float
    underpowered: bool  # fewer impostors than 1 / target


def tmr_at_fmr(scores: ScoreSet, fmr_targets: Sequence[float] = DEFAULT_FMR_TARGETS) -> list[TmrResult]:
    """True match rate at the smallest threshold whose FMR is within each target."""
    t, fmr, fnmr = sweep(scores)
    out = []
    for target in fmr_targets:
        if not 0 < target < 1:
            raise InputError(f"FMR target must lie in (0, 1), got {target}")
        k = int(np.flatnonzero(fmr <= target)[0])
        out.append(TmrResult(float(target), float(1.0 - fnmr[k]), float(t[k]), scores.impostor.size < 1.0 / target))
    return out


def decidability(scores: ScoreSet) -> float:
    g, i = scores.genuine, scores.impostor
    if g.size < 2 or i.size < 2:
        raise InputError("decidability needs at least two genuine and two impostor scores")
    vg, vi = np.var(g, ddof=1), np.var(i, ddof=1)
    if vg == 0 and vi == 0:
        raise DegenerateInputError("both score distributions have zero variance")
    return float(abs(g.mean() - i.mean()) / math.sqrt((vg + vi) / 2.0))


@dataclass
class DetCurve:
    thresholds: np.ndarray
    fmr: np.ndarray
    fnmr: np.ndarray

    @property
    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.fmr.tolist(), self.fnmr.tolist()))


def det_curve(scores: ScoreSet) -> DetCurve:
    """One point per distinct score value (the infinite end points are dropped)."""
    t, fmr, fnmr = sweep(scores)
    return DetCurve(t[1:-1], fmr[1:-1], fnmr[1:-1])


# ---------------------------------------------------------------------------
# identification


def rank1_correct(scores: np.ndarray, probe_subjects, gallery_ids, gallery_subjects) -> np.ndarray:
    """Per probe: does the best gallery match (ties -> smallest gallery id) share its subject?"""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(np.asarray(gallery_ids), kind="stable")
    # argmax returns the first maximum, so columns sorted by id break ties lexicographically
    best = order[np.argmax(scores[:, order], axis=1)]
    return np.asarray(gallery_subjects)[best] == np.asarray(probe_subjects)


def crr(protocol: Protocol) -> float:
    if not any(protocol.gallery.values()):
        raise InputError("CRR needs a non-empty gallery")
    m = score_matrix(protocol)
    return float(np.mean(rank1_correct(m.scores, m.probe_subjects, m.gallery_ids, m.gallery_subjects)))


# ---------------------------------------------------------------------------
# reports


def evaluate(protocol: Protocol) -> tuple[dict, ScoreMatrix, ScoreSet, list[TmrResult]]:
    """All metrics of one protocol; the dict has the report JSON keys."""
    m = score_matrix(protocol)
    mask = m.genuine_mask
    ss = ScoreSet(m.scores[mask], m.scores[~mask])
    rate, thr = eer(ss)
    tmr = tmr_at_fmr(ss)
    correct = rank1_correct(m.scores, m.probe_subjects, m.gallery_ids, m.gallery_subjects)
    genuine, impostor = enumerate_pairs(protocol)
    try:
        di = decidability(ss)
    except InputError as exc:
        # a metric that is undefined here should not sink the whole report
        log.warning("DI undefined: %s", exc)
        di = None
    report = {
        "eer": rate,
        "eer_threshold": thr,
        "tmr_at_fmr_0p1": tmr[0].tmr,
        "tmr_at_fmr_0p01": tmr[1].tmr,
        "crr": float(np.mean(correct)),
        "di": di,
        "genuine_count": genuine,
        "impostor_count": impostor,
    }
    return report, m, ss, tmr


def write_scores_csv(path, matrix: ScoreMatrix) -> None:
    mask = matrix.genuine_mask
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["probe_id", "gallery_id", "label", "score"])
        for r, pid in enumerate(matrix.probe_ids):
            for c, gid in enumerate(matrix.gallery_ids):
                label = "genuine" if mask[r, c] else "impostor"
                w.writerow([pid, gid, label, f"{matrix.scores[r, c]:.6f}"])


def read_scores_csv(path) -> ScoreSet:
    genuine, impostor = [], []
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["probe_id", "gallery_id", "label", "score"]:
            raise InputError(f"{path}: unexpected header {reader.fieldnames}")
        for line, row in enumerate(reader, start=2):
            try:
                value = float(row["score"])
            except (TypeError, ValueError):
                raise InputError(f"{path}:{line}: bad score {row['score']!r}") from None
            if row["label"] == "genuine":
                genuine.append(value)
            elif row["label"] == "impostor":
                impostor.append(value)
            else:
                raise InputError(f"{path}:{line}: label must be genuine or impostor, got {row['label']!r}")
    return ScoreSet(genuine, impostor)


def write_det_csv(path, curve: DetCurve) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "fmr", "fnmr"])
        for t, a, b in curve.points:
            w.writerow([repr(t), repr(a), repr(b)])
