"""Inflated-3D inception backbone with rectangular-filter branches.

Layout (depth axis = patch index)::

    conv3d(stem_kernel, stride 2, same) -> BN -> ReLU -> maxpool (1,3,3)/(1,2,2)
    inception block x B: four parallel conv->BN->ReLU branches with kernels
        (1,3,7), (7,7,3), (1,1,1), (3,3,3), channel-concatenated,
        optionally followed by maxpool (3,3,3)/(2,2,2)
    global average pool -> dense(embedding_dim) -> l2 normalise  => embedding
    embedding . normalised class weights                          => cosine logits
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor, checkpoint
from .autodiff.ops import conv_output_extent
from .errors import CheckpointError, ConfigError, DimensionError

BRANCH_KERNELS: tuple[tuple[int, int, int], ...] = ((1, 3, 7), (7, 7, 3), (1, 1, 1), (3, 3, 3))
STEM_POOL = ((1, 3, 3), (1, 2, 2))
BLOCK_POOL = ((3, 3, 3), (2, 2, 2))
HEAD_WEIGHTS = "head.class_weights"


def _branch_name(kernel) -> str:
    return "b" + "x".join(str(k) for k in kernel)


@dataclass(frozen=True)
class InceptionBlockSpec:
    channels: tuple[int, int, int, int]
    pool_after: bool = False

    @property
    def out_channels(self) -> int:
        return sum(self.channels)


@dataclass
class BackboneConfig:
    num_classes: int
    stem_kernel: tuple[int, int, int] = (7, 7, 7)
    stem_stride: int = 2
    stem_channels: int = 16
    blocks: tuple[InceptionBlockSpec, ...] = field(
        default_factory=lambda: DESK_BLOCKS
    )
    embedding_dim: int = 128
    input_shape: tuple[int, int, int] = (80, 112, 112)
    in_channels: int = 3
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        self.stem_kernel = tuple(int(k) for k in self.stem_kernel)
        self.input_shape = tuple(int(k) for k in self.input_shape)
        self.blocks = tuple(
            b if isinstance(b, InceptionBlockSpec) else InceptionBlockSpec(tuple(b["channels"]), bool(b.get("pool_after", False)))
            for b in self.blocks
        )

    def validate(self) -> None:
        if not isinstance(self.num_classes, int) or self.num_classes < 2:
            raise ConfigError(f"num_classes must be an integer >= 2, got {self.num_classes!r}")
        if self.embedding_dim < 8:
            raise ConfigError(f"embedding_dim must be >= 8, got {self.embedding_dim}")
        if len(self.stem_kernel) != 3 or min(self.stem_kernel) < 1:
            raise ConfigError(f"stem_kernel must be three positive extents, got {self.stem_kernel}")
        if self.stem_stride < 1:
            raise ConfigError(f"stem_stride must be >= 1, got {self.stem_stride}")
        if self.stem_channels < 1:
            raise ConfigError(f"stem_channels must be >= 1, got {self.stem_channels}")
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if not self.blocks:
            raise ConfigError("blocks must list at least one inception block")
        for i, block in enumerate(self.blocks):
            if len(block.channels) != len(BRANCH_KERNELS):
                raise ConfigError(f"blocks[{i}].channels needs {len(BRANCH_KERNELS)} entries")
            if min(block.channels) < 1:
                raise ConfigError(f"blocks[{i}].channels must all be >= 1, got {block.channels}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be three positive extents, got {self.input_shape}")
        shape_plan(self)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = [{"channels": list(b.channels), "pool_after": b.pool_after} for b in self.blocks]
        d["stem_kernel"] = list(self.stem_kernel)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown backbone config field(s): {sorted(unknown)}")
        return cls(**d)


DESK_BLOCKS = (InceptionBlockSpec((16, 16, 8, 8), pool_after=True), InceptionBlockSpec((16, 16, 8, 8)))
WIDE_BLOCKS = (
    InceptionBlockSpec((32, 32, 16, 16)),
    InceptionBlockSpec((48, 48, 24, 24), pool_after=True),
    InceptionBlockSpec((64, 64, 32, 32)),
    InceptionBlockSpec((96, 96, 48, 48), pool_after=True),
)


def preset(name: str, num_classes: int, **overrides) -> BackboneConfig:
    """Named configurations: ``desk`` (2 blocks, stem 16) and ``wide`` (4 wider blocks)."""
    if name == "desk":
        base = dict(stem_channels=16, blocks=DESK_BLOCKS)
    elif name == "wide":
        base = dict(stem_channels=32, blocks=WIDE_BLOCKS, embedding_dim=256)
    else:
        raise ConfigError(f"unknown backbone preset {name!r} (expected 'desk' or 'wide')")
    base.update(overrides)
    return BackboneConfig(num_classes=num_classes, **base)


def shape_plan(config: BackboneConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Per-layer output shapes (without the batch axis) implied by the config."""
    d, h, w = config.input_shape
    c = config.in_channels
    plan: list[tuple[str, tuple[int, ...]]] = [("input", (c, d, h, w))]
    s = config.stem_stride
    d, h, w = (conv_output_extent(n, k, s, "same") for n, k in zip((d, h, w), config.stem_kernel))
    c = config.stem_channels
    plan.append(("stem.conv", (c, d, h, w)))

    def pool(name, dims, window, stride):
        out = []
        for axis, n, k, st in zip(("depth", "height", "width"), dims, window, stride):
            if k > n:
                raise ConfigError(
                    f"{name}: {axis} extent {n} is smaller than pooling window {k}; input_shape too small"
                )
            out.append((n - k) // st + 1)
        return tuple(out)

    d, h, w = pool("stem.pool", (d, h, w), *STEM_POOL)
    plan.append(("stem.pool", (c, d, h, w)))
    for i, block in enumerate(config.blocks):
        c = block.out_channels
        plan.append((f"blocks.{i}", (c, d, h, w)))
        if block.pool_after:
            d, h, w = pool(f"blocks.{i}.pool", (d, h, w), *BLOCK_POOL)
            plan.append((f"blocks.{i}.pool", (c, d, h, w)))
    plan.append(("gap", (c,)))
    plan.append(("embedding", (config.embedding_dim,)))
    plan.append(("logits", (config.num_classes,)))
    return plan


class Model:
    """Parameters, batch-norm moments and the forward pass of one backbone."""

    def __init__(self, config: BackboneConfig, params: dict[str, Tensor], bn: dict[str, BatchNormState]):
        self.config = config
        self.params = params
        self.bn = bn

    # -- parameters -------------------------------------------------------
    def parameters(self, include_head: bool = True) -> dict[str, Tensor]:
        if include_head:
            return dict(self.params)
        return {k: v for k, v in self.params.items() if k != HEAD_WEIGHTS}

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    @property
    def class_weights(self) -> Tensor:
        return self.params[HEAD_WEIGHTS]

    def astype(self, dtype) -> "Model":
        params = {k: Tensor(v.data, requires_grad=v.requires_grad, dtype=dtype, name=k) for k, v in self.params.items()}
        bn = {
            k: BatchNormState(s.channels, s.momentum, s.running_mean.copy(), s.running_var.copy())
            for k, s in self.bn.items()
        }
        return Model(self.config, params, bn)

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {k: v.data for k, v in self.params.items()}
        for k, s in self.bn.items():
            arrays[f"{k}.running_mean"] = s.running_mean
            arrays[f"{k}.running_var"] = s.running_var
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = self.state_arrays()
        missing = set(expected) - set(arrays)
        extra = set(arrays) - set(expected)
        if missing or extra:
            raise CheckpointError(f"checkpoint arrays differ from model: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, arr in arrays.items():
            if arr.shape != expected[name].shape:
                raise CheckpointError(f"{name}: checkpoint shape {arr.shape} != model shape {expected[name].shape}")
        for k, p in self.params.items():
            p.data = np.array(arrays[k], dtype=p.data.dtype)
        for k, s in self.bn.items():
            s.running_mean = np.array(arrays[f"{k}.running_mean"], dtype=np.float32)
            s.running_var = np.array(arrays[f"{k}.running_var"], dtype=np.float32)

    def save(self, path) -> None:
        """Write ``path`` (binary arrays) and ``path`` + ``.json`` (config)."""
        path = Path(path)
        checkpoint.save(path, self.state_arrays())
        config_path(path).write_text(json.dumps(self.config.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Model":
        path = Path(path)
        cfg_file = config_path(path)
        if not cfg_file.is_file():
            raise CheckpointError(f"missing config file {cfg_file} beside checkpoint")
        config = BackboneConfig.from_dict(json.loads(cfg_file.read_text()))
        model = build(config, seed=0)
        model.load_state_arrays(checkpoint.load(path))
        return model

    # -- forward ----------------------------------------------------------
    def _unit(self, x: Tensor, name: str, stride, mode: str) -> Tensor:
        y = ad.conv3d(x, self.params[f"{name}.conv.weight"], stride=stride, padding="same")
        y = ad.batchnorm(
            y,
            self.params[f"{name}.bn.gamma"],
            self.params[f"{name}.bn.beta"],
            eps=self.config.bn_eps,
            mode=mode,
            state=self.bn[f"{name}.bn"],
        )
        return ad.relu(y)

    def forward(self, batch, mode: str = "infer", trace: Optional[list] = None) -> tuple[Tensor, Tensor]:
        """Return (unit-norm embeddings [N, embedding_dim], cosine logits [N, num_classes])."""
        cfg = self.config
        x = batch if isinstance(batch, Tensor) else Tensor(batch, dtype=self.class_weights.dtype)
        expected = (cfg.in_channels,) + tuple(cfg.input_shape)
        if x.ndim != 5 or x.shape[1:] != expected:
            raise DimensionError(f"backbone input must be [N, {', '.join(map(str, expected))}], got {x.shape}")

        def record(name, t):
            if trace is not None:
                trace.append((name, t.shape[1:]))

        record("input", x)
        x = self._unit(x, "stem", cfg.stem_stride, mode)
        record("stem.conv", x)
        x = ad.maxpool3d(x, *STEM_POOL)
        record("stem.pool", x)
        for i, block in enumerate(cfg.blocks):
            branches = [self._unit(x, f"blocks.{i}.{_branch_name(k)}", 1, mode) for k in BRANCH_KERNELS]
            x = ad.concat_channels(branches)
            record(f"blocks.{i}", x)
            if block.pool_after:
                x = ad.maxpool3d(x, *BLOCK_POOL)
                record(f"blocks.{i}.pool", x)
        x = ad.global_avg_pool3d(x)
        record("gap", x)
        emb = ad.l2_normalize(ad.dense(x, self.params["embed.weight"], self.params["embed.bias"]))
        record("embedding", emb)
        logits = ad.dense(emb, ad.l2_normalize(self.class_weights))
        record("logits", logits)
        return emb, logits

    __call__ = forward


def config_path(checkpoint_path) -> Path:
    p = Path(checkpoint_path)
    return p.with_name(p.name + ".json")


def build(config: BackboneConfig, seed: int, dtype=np.float32) -> Model:
    """Initialise a model deterministically: He-uniform conv/dense, BN gamma=1 beta=0."""
    config.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    bn: dict[str, BatchNormState] = {}

    def he_uniform(shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    def add(name, arr):
        params[name] = Tensor(arr, requires_grad=True, dtype=dtype, name=name)

    def unit(name, cin, cout, kernel):
        add(f"{name}.conv.weight", he_uniform((cout, cin) + tuple(kernel), cin * int(np.prod(kernel))))
        add(f"{name}.bn.gamma", np.ones(cout))
        add(f"{name}.bn.beta", np.zeros(cout))
        bn[f"{name}.bn"] = BatchNormState(cout, momentum=config.bn_momentum)

    unit("stem", config.in_channels, config.stem_channels, config.stem_kernel)
    cin = config.stem_channels
    for i, block in enumerate(config.blocks):
        for kernel, cout in zip(BRANCH_KERNELS, block.channels):
            unit(f"blocks.{i}.{_branch_name(kernel)}", cin, cout, kernel)
        cin = block.out_channels
    add("embed.weight", he_uniform((config.embedding_dim, cin), cin))
    add("embed.bias", np.zeros(config.embedding_dim))
    add(HEAD_WEIGHTS, he_uniform((config.num_classes, config.embedding_dim), config.embedding_dim))
    return Model(config, params, bn)
