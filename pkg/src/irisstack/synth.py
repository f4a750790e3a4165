"""Deterministic synthetic iris dataset and class-balanced batching.

Each subject owns a band-limited texture on the normalised-strip domain. A
sample is that texture, circularly shifted (head roll), painted back into the
annulus of a synthetic eye image, then blurred, given specular highlights
(masked out) and partly covered by an upper eyelid.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DatasetError
from .pgm import write_pgm
from .preproc import STRIP_HEIGHT, STRIP_WIDTH, Circle, load_sample

INDEX_FILE = "index.json"
EYE_SIZE = 320
PUPIL = Circle(160.0, 160.0, 36.0)
IRIS = Circle(160.0, 160.0, 124.0)
PUPIL_LEVEL = 18
SCLERA_LEVEL = 210
EYELID_LEVEL = 140


@dataclass(frozen=True)
class Perturbations:
    rotation_px: int = 8
    blur_sigma: float = 1.0
    reflection_prob: float = 0.3
    occlusion_frac: float = 0.15


@dataclass(frozen=True)
class SynthSpec:
    num_subjects: int
    samples_per_subject: int
    seed: int = 0
    perturbations: Perturbations = field(default_factory=Perturbations)

    def __post_init__(self):
        p = self.perturbations
        if isinstance(p, dict):
            object.__setattr__(self, "perturbations", Perturbations(**p))
            p = self.perturbations
        if self.num_subjects < 1:
            raise ConfigError(f"num_subjects must be >= 1, got {self.num_subjects}")
        if self.samples_per_subject < 1:
            raise ConfigError(f"samples_per_subject must be >= 1, got {self.samples_per_subject}")
        if not 0 <= p.rotation_px < STRIP_WIDTH:
            raise ConfigError(f"rotation_px must lie in [0, {STRIP_WIDTH}), got {p.rotation_px}")
        if p.blur_sigma < 0:
            raise ConfigError(f"blur_sigma must be >= 0, got {p.blur_sigma}")
        if not 0 <= p.reflection_prob <= 1:
            raise ConfigError(f"reflection_prob must lie in [0, 1], got {p.reflection_prob}")
        if not 0 <= p.occlusion_frac < 1:
            raise ConfigError(f"occlusion_frac must lie in [0, 1), got {p.occlusion_frac}")

    def to_dict(self) -> dict:
        return asdict(self)


def subject_id(i: int) -> str:
    return f"subj{i:03d}"


def sample_id(j: int) -> str:
    return f"s{j:02d}"


# ---------------------------------------------------------------------------
# index


@dataclass
class DatasetIndex:
    """Subjects, their sample keys ("subject/sample") and the gallery/probe split."""

    subjects: list[str]
    samples: dict[str, list[str]]
    split: dict[str, str]
    root: Optional[Path] = field(default=None, compare=False)

    def keys(self, split: Optional[str] = None) -> list[str]:
        out = [k for s in self.subjects for k in self.samples[s]]
        return out if split is None else [k for k in out if self.split[k] == split]

    def by_subject(self, split: Optional[str] = None) -> dict[str, list[str]]:
        return {s: [k for k in self.samples[s] if split is None or self.split[k] == split] for s in self.subjects}

    def to_dict(self) -> dict:
        return {"subjects": self.subjects, "samples": self.samples, "split": self.split}

    @classmethod
    def from_dict(cls, d: dict, root=None, source="index") -> "DatasetIndex":
        try:
            subjects = [str(s) for s in d["subjects"]]
            samples = {str(s): [str(k) for k in d["samples"][s]] for s in subjects}
            split = {str(k): str(v) for k, v in d["split"].items()}
        except (KeyError, TypeError, AttributeError) as exc:
            raise DatasetError(f"{source}: malformed index ({exc!r})") from None
        index = cls(subjects, samples, split, Path(root) if root is not None else None)
        index.validate(source)
        return index

    def validate(self, source="index") -> None:
        if not self.subjects:
            raise DatasetError(f"{source}: no subjects")
        keys = self.keys()
        if set(keys) != set(self.split) or len(keys) != len(set(keys)):
            raise DatasetError(f"{source}: split assignment does not match the sample list")
        bad = sorted({v for v in self.split.values()} - {"gallery", "probe"})
        if bad:
            raise DatasetError(f"{source}: unknown split label(s) {bad}")


def half_split(samples: dict[str, list[str]]) -> dict[str, str]:
    """First half of each subject's sorted samples -> gallery, rest -> probe."""
    split = {}
    for keys in samples.values():
        ordered = sorted(keys)
        half = len(ordered) // 2
        for i, k in enumerate(ordered):
            split[k] = "gallery" if i < half else "probe"
    return split


def read_index_file(path) -> DatasetIndex:
    """Parse an ``index.json`` without touching the image files."""
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"{path}: unreadable index ({exc})") from exc
    return DatasetIndex.from_dict(d, root=path.parent, source=str(path))


def load_index(root) -> DatasetIndex:
    """Scan a dataset directory, validating every image, mask and sidecar."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    samples: dict[str, list[str]] = {}
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        ids = sorted(p.name[: -len(".pgm")] for p in sub.glob("*.pgm") if not p.name.endswith(".mask.pgm"))
        for sid in ids:
            load_sample(root, sub.name, sid)  # raises DatasetError naming the bad file
        if ids:
            samples[sub.name] = [f"{sub.name}/{sid}" for sid in ids]
    if not samples:
        raise DatasetError(f"dataset root {root} contains no samples")
    scanned = DatasetIndex(sorted(samples), samples, half_split(samples), root)
    index_path = root / INDEX_FILE
    if index_path.is_file():
        declared = read_index_file(index_path)
        if declared != scanned:
            raise DatasetError(f"{index_path}: listed samples or split disagree with the files on disk")
        return declared
    return scanned


# ---------------------------------------------------------------------------
# generation


def subject_texture(seed: int, subject_index: int) -> np.ndarray:
    """Identity signature on the [112, 512] strip, values in [0, 1]."""
    rng = np.random.default_rng([seed, subject_index, 0])
    h, w = STRIP_HEIGHT, STRIP_WIDTH
    rows = np.arange(h)[:, None] / h
    cols = np.arange(w)[None, :] / w
    tex = np.zeros((h, w))
    for _ in range(8):
        fu = rng.integers(3, 40)  # whole cycles around the circle keep the strip periodic
        fv = rng.uniform(0.5, 5.0)
        tex += rng.uniform(0.4, 1.0) * np.sin(2 * np.pi * (fu * cols + fv * rows) + rng.uniform(0, 2 * np.pi))
    noise = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=2.5, mode="wrap")
    tex = tex / np.abs(tex).max() + 1.5 * noise / np.abs(noise).max()
    tex = (tex - tex.min()) / (tex.max() - tex.min())
    return tex


def paint_eye(strip: np.ndarray) -> np.ndarray:
    """Map a strip back into the annulus of an EYE_SIZE^2 image (inverse rubber sheet)."""
    h, w = strip.shape
    yy, xx = np.mgrid[0:EYE_SIZE, 0:EYE_SIZE].astype(np.float64)
    dx, dy = xx - IRIS.cx, yy - IRIS.cy
    radius = np.hypot(dx, dy)
    rho = (radius - PUPIL.r) / (IRIS.r - PUPIL.r)
    theta = np.mod(np.arctan2(dy, dx), 2 * np.pi)
    r = np.clip(rho, 0, 1) * (h - 1)
    c = theta * w / (2 * np.pi)
    r0 = np.floor(r).astype(np.int64)
    c0 = np.floor(c).astype(np.int64)
    fr, fc = r - r0, c - c0
    r1 = np.minimum(r0 + 1, h - 1)
    c0w, c1w = c0 % w, (c0 + 1) % w
    top = strip[r0, c0w] * (1 - fc) + strip[r0, c1w] * fc
    bot = strip[r1, c0w] * (1 - fc) + strip[r1, c1w] * fc
    iris = 40.0 + 180.0 * (top * (1 - fr) + bot * fr)
    img = np.where(rho < 0, PUPIL_LEVEL, np.where(rho > 1, SCLERA_LEVEL, iris))
    return img


def render_sample(texture: np.ndarray, spec: SynthSpec, subject_index: int, sample_index: int):
    """(image uint8, mask uint8 in {0, 255}) for one sample."""
    p = spec.perturbations
    rng = np.random.default_rng([spec.seed, subject_index, sample_index + 1])
    shift = int(rng.integers(-p.rotation_px, p.rotation_px + 1)) if p.rotation_px else 0
    img = paint_eye(np.roll(texture, shift, axis=1))
    sigma = rng.uniform(0, p.blur_sigma) if p.blur_sigma > 0 else 0.0
    if sigma > 0:
        img = ndimage.gaussian_filter(img, sigma=sigma, mode="nearest")
    mask = np.ones(img.shape, dtype=bool)
    yy, xx = np.mgrid[0 : img.shape[0], 0 : img.shape[1]]
    if p.reflection_prob > 0 and rng.random() < p.reflection_prob:
        for _ in range(int(rng.integers(1, 3))):
            ang = rng.uniform(0, 2 * np.pi)
            rad = rng.uniform(PUPIL.r + 5, IRIS.r - 10)
            ex, ey = IRIS.cx + rad * math.cos(ang), IRIS.cy + rad * math.sin(ang)
            ax, ay = rng.uniform(4, 10), rng.uniform(3, 7)
            spot = ((xx - ex) / ax) ** 2 + ((yy - ey) / ay) ** 2 <= 1
            img[spot] = 255
            mask &= ~spot
    if p.occlusion_frac > 0:
        frac = rng.uniform(0, p.occlusion_frac)
        lid = yy < IRIS.cy - IRIS.r + frac * 2 * IRIS.r
        img[lid] = EYELID_LEVEL
        mask &= ~lid
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return image, np.where(mask, 255, 0).astype(np.uint8)


def generate(spec: SynthSpec, out_dir) -> DatasetIndex:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        samples: dict[str, list[str]] = {}
        sidecar = json.dumps({"pupil": PUPIL.to_dict(), "iris": IRIS.to_dict()}, sort_keys=True) + "\n"
        for i in range(spec.num_subjects):
            subj = subject_id(i)
            texture = subject_texture(spec.seed, i)
            d = out / subj
            d.mkdir(exist_ok=True)
            samples[subj] = []
            for j in range(spec.samples_per_subject):
                sid = sample_id(j)
                image, mask = render_sample(texture, spec, i, j)
                write_pgm(d / f"{sid}.pgm", image)
                write_pgm(d / f"{sid}.mask.pgm", mask)
                (d / f"{sid}.json").write_text(sidecar)
                samples[subj].append(f"{subj}/{sid}")
        index = DatasetIndex(sorted(samples), samples, half_split(samples), out)
        payload = dict(index.to_dict(), spec=spec.to_dict())
        (out / INDEX_FILE).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise DatasetError(f"cannot write dataset under {out}: {exc.strerror or exc} ({exc.filename or out})") from exc
    return index


# ---------------------------------------------------------------------------
# P-K batching


@dataclass
class Batch:
    keys: list[str]
    labels: np.ndarray  # int64 class index per key
    inputs: Optional[np.ndarray] = None  # [N, 3, D, H, W] when a loader is given


def make_batches(
    index: DatasetIndex,
    classes_per_batch: int,
    samples_per_class: int,
    seed: int,
    split: Optional[str] = "gallery",
    epoch: int = 0,
    loader: Optional[Callable[[str], np.ndarray]] = None,
) -> Iterator[Batch]:
    """One epoch of P-K batches: ``classes_per_batch`` subjects x ``samples_per_class`` samples.

    Every sample of every eligible subject appears at least once per epoch;
    the order depends only on (seed, epoch). Labels index the sorted list of
    subjects in ``split``.
    """
    if classes_per_batch < 2 or samples_per_class < 2:
        raise ConfigError(
            f"classes_per_batch and samples_per_class must be >= 2, got {classes_per_batch} and {samples_per_class}"
        )
    pools = {s: ks for s, ks in index.by_subject(split).items() if ks}
    labels_of = {s: i for i, s in enumerate(sorted(pools))}
    eligible = [s for s in sorted(pools) if len(pools[s]) >= samples_per_class]
    if len(eligible) < classes_per_batch:
        raise ConfigError(
            f"only {len(eligible)} subjects have >= {samples_per_class} samples in split {split!r}; "
            f"classes_per_batch={classes_per_batch} is too many"
        )
    rng = np.random.default_rng([seed, epoch])
    groups: dict[str, list[list[str]]] = {}
    for s in eligible:
        ks = [pools[s][i] for i in rng.permutation(len(pools[s]))]
        n_groups = -(-len(ks) // samples_per_class)
        padded = [ks[i % len(ks)] for i in range(n_groups * samples_per_class)]
        groups[s] = [padded[g * samples_per_class : (g + 1) * samples_per_class] for g in range(n_groups)]
    order = [eligible[i] for i in rng.permutation(len(eligible))]
    while any(groups[s] for s in order):
        # subjects with the most groups left go first; permutation order breaks ties
        ranked = sorted(order, key=lambda s: -len(groups[s]))
        chosen = [s for s in ranked if groups[s]][:classes_per_batch]
        members = [groups[s].pop(0) for s in chosen]
        if len(chosen) < classes_per_batch:
            spare = [s for s in order if s not in chosen]
            for s in [spare[i] for i in rng.permutation(len(spare))][: classes_per_batch - len(chosen)]:
                chosen.append(s)
                members.append([pools[s][i] for i in rng.choice(len(pools[s]), samples_per_class, replace=False)])
        keys = [k for m in members for k in m]
        labels = np.array([labels_of[s] for s, m in zip(chosen, members) for _ in m], dtype=np.int64)
        inputs = np.stack([loader(k) for k in keys]) if loader is not None else None
        yield Batch(keys, labels, inputs)
