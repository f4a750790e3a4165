"""Iris normalisation and patch-stack composition.

An eye image plus pupil/iris circles is unwrapped into a 112x512 polar strip
(rubber-sheet model), encoded as three channels (iris, mask, masked iris) and
cut into overlapping 112x112 windows along the angular axis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DatasetError, GeometryError
from .pgm import read_pgm

STRIP_HEIGHT = 112
STRIP_WIDTH = 512
PATCH_SIZE = 112
PATCH_STRIDE = 5
PATCH_COUNT = 80


@dataclass(frozen=True)
class Circle:
    cx: float
    cy: float
    r: float

    @classmethod
    def from_dict(cls, d: dict) -> "Circle":
        return cls(float(d["cx"]), float(d["cy"]), float(d["r"]))

    def to_dict(self) -> dict:
        return {"cx": self.cx, "cy": self.cy, "r": self.r}


@dataclass
class IrisSample:
    image: np.ndarray  # uint8 [H, W]
    mask: np.ndarray  # {0, 1} [H, W]
    pupil: Circle
    iris: Circle
    subject_id: str
    sample_id: str

    def __post_init__(self):
        self.validate()

    @property
    def key(self) -> str:
        return f"{self.subject_id}/{self.sample_id}"

    def validate(self) -> None:
        if self.image.ndim != 2:
            raise GeometryError(f"{self.key}: image must be 2D, got shape {self.image.shape}")
        if self.mask.shape != self.image.shape:
            raise GeometryError(
                f"{self.key}: mask extents {self.mask.shape} differ from image {self.image.shape}"
            )
        if not self.pupil.r < self.iris.r:
            raise GeometryError(f"{self.key}: pupil radius {self.pupil.r} >= iris radius {self.iris.r}")
        if self.pupil.r <= 0:
            raise GeometryError(f"{self.key}: pupil radius must be positive")
        if np.hypot(self.pupil.cx - self.iris.cx, self.pupil.cy - self.iris.cy) >= self.iris.r:
            raise GeometryError(f"{self.key}: pupil centre lies outside the iris circle")


@dataclass
class NormalizedIris:
    iris_channel: np.ndarray
    mask_channel: np.ndarray
    masked_channel: np.ndarray


def sample_points(pupil: Circle, iris: Circle, out_height: int, out_width: int):
    """Image coordinates (x, y) of every strip cell, each of shape [out_height, out_width]."""
    theta = 2.0 * np.pi * np.arange(out_width) / out_width
    rho = np.arange(out_height) / (out_height - 1) if out_height > 1 else np.zeros(1)
    cos, sin = np.cos(theta), np.sin(theta)
    px, py = pupil.cx + pupil.r * cos, pupil.cy + pupil.r * sin
    ix, iy = iris.cx + iris.r * cos, iris.cy + iris.r * sin
    x = (1.0 - rho)[:, None] * px[None, :] + rho[:, None] * ix[None, :]
    y = (1.0 - rho)[:, None] * py[None, :] + rho[:, None] * iy[None, :]
    return x, y


def rubber_sheet_normalize(
    sample: IrisSample, out_height: int = STRIP_HEIGHT, out_width: int = STRIP_WIDTH
) -> NormalizedIris:
    """Unwrap the annulus between pupil and iris boundaries into a rectangle.

    Row 0 lies on the pupil boundary, the last row on the iris boundary, and
    column c sits at angle 2*pi*c/out_width. Intensities are bilinearly
    interpolated and scaled to [0, 1]; the mask is sampled nearest-neighbour
    and thresholded at 0.5. Points outside the image read as occluded (0, 0).
    """
    img = sample.image.astype(np.float64) / 255.0
    msk = sample.mask.astype(np.float64)
    if msk.max(initial=0) > 1:
        msk = msk / 255.0
    h, w = img.shape
    x, y = sample_points(sample.pupil, sample.iris, out_height, out_width)
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x0 = np.floor(xc).astype(np.int64)
    y0 = np.floor(yc).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bottom = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    iris_channel = np.where(inside, top * (1 - fy) + bottom * fy, 0.0)
    xn = np.clip(np.floor(xc + 0.5).astype(np.int64), 0, w - 1)
    yn = np.clip(np.floor(yc + 0.5).astype(np.int64), 0, h - 1)
    mask_channel = np.where(inside & (msk[yn, xn] >= 0.5), 1.0, 0.0)
    iris_channel = iris_channel.astype(np.float32)
    mask_channel = mask_channel.astype(np.float32)
    return NormalizedIris(iris_channel, mask_channel, iris_channel * mask_channel)


def compose_channels(normalized: NormalizedIris) -> np.ndarray:
    """Stack (iris, mask, masked iris) into an [H, W, 3] array."""
    return np.stack(
        [normalized.iris_channel, normalized.mask_channel, normalized.masked_channel], axis=-1
    ).astype(np.float32)


def max_patch_count(width: int, patch: int, stride: int) -> int:
    if width < patch:
        return 0
    return (width - patch) // stride + 1


def make_patch_stack(
    composed: np.ndarray,
    patch: int = PATCH_SIZE,
    stride: int = PATCH_STRIDE,
    count: int = PATCH_COUNT,
) -> np.ndarray:
    """Slide a ``patch``-wide window along the angular (column) axis.

    Patch k covers columns [stride*k, stride*k + patch). Returns
    [count, rows, patch, channels].
    """
    composed = np.asarray(composed)
    if composed.ndim != 3:
        raise GeometryError(f"expected [rows, columns, channels], got shape {composed.shape}")
    width = composed.shape[1]
    if patch < 1 or stride < 1 or count < 1:
        raise GeometryError(f"patch, stride and count must be positive (got {patch}, {stride}, {count})")
    feasible = max_patch_count(width, patch, stride)
    if count > feasible:
        raise GeometryError(
            f"{count} patches of width {patch} at stride {stride} do not fit in {width} columns; "
            f"max feasible count is {feasible}"
        )
    offsets = stride * np.arange(count)
    cols = offsets[:, None] + np.arange(patch)[None, :]
    # [rows, count, patch, ch] -> [count, rows, patch, ch]
    return np.ascontiguousarray(composed[:, cols, :].transpose(1, 0, 2, 3))


def to_network_input(stack: np.ndarray) -> np.ndarray:
    """[count, rows, cols, 3] -> channels-first [3, count, rows, cols]."""
    return np.ascontiguousarray(np.asarray(stack, dtype=np.float32).transpose(3, 0, 1, 2))


def preprocess(sample: IrisSample) -> np.ndarray:
    """Composed [112, 512, 3] strip for one sample."""
    return compose_channels(rubber_sheet_normalize(sample))


def load_sample(root, subject_id: str, sample_id: str) -> IrisSample:
    """Read ``<root>/<subject>/<sample>.pgm`` with its mask and JSON sidecar."""
    base = Path(root) / subject_id
    image_path = base / f"{sample_id}.pgm"
    mask_path = base / f"{sample_id}.mask.pgm"
    side_path = base / f"{sample_id}.json"
    for p in (image_path, mask_path, side_path):
        if not p.is_file():
            raise DatasetError(f"missing file {p}")
    pupil, iris = read_sidecar(side_path)
    image = read_pgm(image_path)
    mask = (read_pgm(mask_path) >= 128).astype(np.uint8)
    try:
        return IrisSample(image, mask, pupil, iris, subject_id, sample_id)
    except GeometryError as exc:
        raise DatasetError(f"{side_path}: {exc}") from exc


def read_sidecar(path) -> tuple[Circle, Circle]:
    path = Path(path)
    try:
        meta = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"{path}: unreadable sidecar ({exc})") from exc
    circles = []
    for key in ("pupil", "iris"):
        block = meta.get(key) if isinstance(meta, dict) else None
        if not isinstance(block, dict):
            raise DatasetError(f"{path}: field '{key}' missing or not an object")
        for field in ("cx", "cy", "r"):
            value = block.get(field)
            if not isinstance(value, (int, float)) or isinstance(value, bool) or not np.isfinite(value):
                raise DatasetError(f"{path}: field '{key}.{field}' missing or not a number")
        circles.append(Circle.from_dict(block))
    return circles[0], circles[1]


def network_input(sample: IrisSample, input_shape=(PATCH_COUNT, PATCH_SIZE, PATCH_SIZE), stride: int = PATCH_STRIDE) -> np.ndarray:
    """[3, D, H, W] backbone input; the strip height follows the patch size H (= W)."""
    count, height, width = (int(v) for v in input_shape)
    if height != width:
        raise GeometryError(f"patches are square: input_shape {tuple(input_shape)} has height != width")
    strip = compose_channels(rubber_sheet_normalize(sample, out_height=height, out_width=STRIP_WIDTH))
    return to_network_input(make_patch_stack(strip, patch=height, stride=stride, count=count))
