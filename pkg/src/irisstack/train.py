"""Curriculum training, embedding extraction and evaluation runs."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from . import embedfile
from .backbone import HEAD_WEIGHTS, Model, build, preset
from .errors import ConfigError, GeometryError, TrainingError
from .losses import (
    ArcFaceParams,
    CurriculumSchedule,
    Phase,
    TripletMarginState,
    arcface_loss,
    next_phase,
    phase_index,
    triplet_loss,
    update_margin,
)
from .matching import Protocol, det_curve, evaluate, write_det_csv, write_scores_csv
from .optim import SCHEDULES, learning_rate, make_optimizer
from .preproc import load_sample, network_input
from .synth import DatasetIndex, load_index, make_batches

log = logging.getLogger(__name__)

WARMUP = "warmup"
CONFIG_FILE = "config.json"
LOG_FILE = "train_log.jsonl"
FINAL_CHECKPOINT = "model.ckpt"
EMBED_BATCH = 4


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    schedule: str = "constant"


@dataclass
class RunConfig:
    dataset: str = "data"
    out_dir: str = "run"
    preset: str = "desk"
    backbone: dict = field(default_factory=dict)  # BackboneConfig field overrides
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    phase_lengths: Union[int, list] = 5
    cycles: int = 3
    warmup_epochs: int = 0
    triplet_margin: float = 0.5
    arcface_scale: float = 30.0
    arcface_margin: float = 0.2
    classes_per_batch: int = 4
    samples_per_class: int = 3
    train_split: str = "gallery"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig(**self.optimizer)
        if self.train_split not in ("gallery", "all"):
            raise ConfigError(f"train_split must be 'gallery' or 'all', got {self.train_split!r}")
        if self.warmup_epochs < 0:
            raise ConfigError(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")
        if self.optimizer.schedule not in SCHEDULES:
            raise ConfigError(f"optimizer.schedule must be one of {SCHEDULES}, got {self.optimizer.schedule!r}")
        self.schedule()  # validates phase_lengths / cycles

    def schedule(self) -> CurriculumSchedule:
        lengths = self.phase_lengths if isinstance(self.phase_lengths, int) else tuple(self.phase_lengths)
        return CurriculumSchedule(phase_lengths=lengths, cycles=self.cycles)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown run config field(s): {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad run config: {exc}") from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: unreadable config ({exc})") from exc
        return cls.from_dict(d)


class InputCache:
    """Backbone inputs per sample key, computed once."""

    def __init__(self, root, input_shape):
        self.root = Path(root)
        self.input_shape = tuple(input_shape)
        self._cache: dict[str, np.ndarray] = {}

    def __call__(self, key: str) -> np.ndarray:
        if key not in self._cache:
            subject, sample = key.split("/", 1)
            try:
                self._cache[key] = network_input(load_sample(self.root, subject, sample), self.input_shape)
            except GeometryError as exc:
                raise ConfigError(f"backbone input_shape {self.input_shape} does not fit the data: {exc}") from exc
        return self._cache[key]


def _train_split(cfg: RunConfig) -> Optional[str]:
    return None if cfg.train_split == "all" else cfg.train_split


def epoch_plan(cfg: RunConfig) -> list[tuple[str, str]]:
    """(phase name, segment tag) of every epoch: warm-up first, then the curriculum."""
    sched = cfg.schedule()
    plan = [(WARMUP, WARMUP)] * cfg.warmup_epochs
    for e in range(sched.total_epochs):
        phase = next_phase(sched, e).value
        plan.append((phase, f"{phase_index(sched, e):02d}-{phase}"))
    return plan


def train(cfg: RunConfig) -> Path:
    """Run the curriculum; returns the final checkpoint path."""
    index = load_index(cfg.dataset)
    split = _train_split(cfg)
    subjects = [s for s, ks in index.by_subject(split).items() if ks]
    bcfg = preset(cfg.preset, num_classes=len(subjects), **cfg.backbone)
    bcfg.validate()
    model = build(bcfg, seed=cfg.seed)
    loader = InputCache(index.root, bcfg.input_shape)
    # fail on dataset/geometry problems before the first step
    for key in index.keys(split):
        loader(key)
    list(make_batches(index, cfg.classes_per_batch, cfg.samples_per_class, cfg.seed, split, epoch=0))

    out = Path(cfg.out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / CONFIG_FILE).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")

    params = model.parameters()
    opt = make_optimizer(cfg.optimizer.kind, params, cfg.optimizer.lr, cfg.optimizer.momentum)
    body = [k for k in params if k != HEAD_WEIGHTS]
    margin = TripletMarginState(margin=cfg.triplet_margin)
    arc = ArcFaceParams(model.class_weights, scale=cfg.arcface_scale, margin=cfg.arcface_margin)
    plan = epoch_plan(cfg)
    batches_per_epoch = len(list(make_batches(index, cfg.classes_per_batch, cfg.samples_per_class, cfg.seed, split)))
    total_steps = len(plan) * batches_per_epoch
    step = 0
    with open(out / LOG_FILE, "w") as logf:
        for epoch, (phase, tag) in enumerate(plan):
            for b, batch in enumerate(
                make_batches(index, cfg.classes_per_batch, cfg.samples_per_class, cfg.seed, split, epoch, loader)
            ):
                emb, logits = model.forward(batch.inputs, mode="train")
                semi = None
                used_margin = margin.margin
                if phase == Phase.TRIPLET.value:
                    loss, stats = triplet_loss(emb, batch.labels, margin)
                    margin = update_margin(margin, stats)
                    semi = stats.semi_hard_fraction
                    names = body
                elif phase == Phase.ARCFACE.value:
                    loss = arcface_loss(emb, batch.labels, arc)
                    names = list(params)
                else:
                    loss = ad.softmax_cross_entropy(ad.scale(logits, cfg.arcface_scale), batch.labels)
                    names = list(params)
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingError(
                        f"non-finite loss {value} at epoch {epoch}, batch {b}, phase {phase}; "
                        f"try a lower learning rate (currently {cfg.optimizer.lr})"
                    )
                for p in params.values():
                    p.zero_grad()
                loss.backward()
                opt.step(names, learning_rate(cfg.optimizer.lr, cfg.optimizer.schedule, step, total_steps))
                step += 1
                record = {
                    "epoch": epoch,
                    "batch": b,
                    "phase": phase,
                    "loss": value,
                    "margin": used_margin,
                    "semi_hard_fraction": semi,
                }
                logf.write(json.dumps(record) + "\n")
                logf.flush()
                log.info("epoch %d batch %d %s loss %.6f margin %.2f", epoch, b, phase, value, used_margin)
            if epoch + 1 == len(plan) or plan[epoch + 1][1] != tag:
                model.save(out / "checkpoints" / f"{tag}.ckpt")
    final = out / FINAL_CHECKPOINT
    model.save(final)
    (out / "margin_state.json").write_text(json.dumps(asdict(margin), sort_keys=True) + "\n")
    return final


def embed(checkpoint, dataset, out_path) -> tuple[list[str], np.ndarray]:
    """Unit-norm infer-mode embedding of every sample in the dataset."""
    model = Model.load(checkpoint)
    if model.config.in_channels != 3:
        raise ConfigError(f"checkpoint expects {model.config.in_channels} input channels; samples have 3")
    index = load_index(dataset)
    loader = InputCache(index.root, model.config.input_shape)
    keys = index.keys()
    vectors = []
    for lo in range(0, len(keys), EMBED_BATCH):
        chunk = keys[lo : lo + EMBED_BATCH]
        emb, _ = model.forward(np.stack([loader(k) for k in chunk]), mode="infer")
        vectors.append(emb.data)
    vectors = np.concatenate(vectors).astype(np.float32)
    embedfile.save(out_path, keys, vectors)
    return keys, vectors


def protocol_from_index(index: DatasetIndex, embeddings, exclude_subjects=()) -> Protocol:
    """Gallery/probe protocol from the index split; excluding subjects makes it open-set."""
    excluded = set(exclude_subjects)
    unknown = excluded - set(index.subjects)
    if unknown:
        raise ConfigError(f"excluded subject(s) not in the index: {sorted(unknown)}")
    keep = [s for s in index.subjects if s not in excluded]
    if not keep:
        raise ConfigError("every subject is excluded; nothing to evaluate")
    gallery = {s: [k for k in index.samples[s] if index.split[k] == "gallery"] for s in keep}
    probe = {s: [k for k in index.samples[s] if index.split[k] == "probe"] for s in keep}
    return Protocol(gallery, probe, embeddings, kind="open" if excluded else "closed")


def evaluate_run(
    embeddings_path, index: DatasetIndex, out_dir, exclude_subjects=(), scores_csv: bool = True
) -> dict:
    """Score, write metrics.json, scores.csv and det.csv; returns the metrics."""
    protocol = protocol_from_index(index, embedfile.as_mapping(embeddings_path), exclude_subjects)
    report, matrix, scores, tmr = evaluate(protocol)
    for r in tmr:
        if r.underpowered:
            log.warning("TMR at FMR %g rests on %d impostor scores (< %d)", r.target, scores.impostor.size, round(1 / r.target))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(report, indent=2) + "\n")
    if scores_csv:
        write_scores_csv(out / "scores.csv", matrix)
    write_det_csv(out / "det.csv", det_curve(scores))
    return report
