"""Dual spatial masks for a box pair and the convolutional encoder that
turns them into a 64-dimensional feature."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .numkit import (
    ConfigurationError,
    DimensionError,
    ParamStore,
    affine,
    affine_backward,
    conv2d,
    conv2d_backward,
    glorot_uniform,
    relu,
    relu_backward,
)

SPATIAL_DIM = 64
DEFAULT_MASK_SIZE = 32
DEFAULT_MARGIN = 0.05


class GeometryError(ValueError):
    pass


class BoundingBox(NamedTuple):
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return max(0.0, self.width) * max(0.0, self.height)

    def is_valid(self) -> bool:
        return self.x_min < self.x_max and self.y_min < self.y_max

    def clamp(self, width: float, height: float) -> "BoundingBox":
        return BoundingBox(
            min(max(self.x_min, 0.0), width),
            min(max(self.y_min, 0.0), height),
            min(max(self.x_max, 0.0), width),
            min(max(self.y_max, 0.0), height),
        )

    def translate(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def scale(self, factor: float) -> "BoundingBox":
        return BoundingBox(*(c * factor for c in self))


def union_box(a: BoundingBox, b: BoundingBox) -> BoundingBox:
    """Smallest box containing both ``a`` and ``b`` (no margin)."""
    return BoundingBox(min(a.x_min, b.x_min), min(a.y_min, b.y_min),
                       max(a.x_max, b.x_max), max(a.y_max, b.y_max))


def enclosing_box(a: BoundingBox, b: BoundingBox, margin_fraction: float = DEFAULT_MARGIN,
                  image_size: Optional[Tuple[float, float]] = None) -> BoundingBox:
    """Union of ``a`` and ``b`` grown by ``margin_fraction`` of its own size on
    every side, then clamped to ``image_size`` = (width, height) if given."""
    if margin_fraction < 0:
        raise ValueError("margin_fraction must be non-negative")
    u = union_box(a, b)
    mx, my = margin_fraction * u.width, margin_fraction * u.height
    out = BoundingBox(u.x_min - mx, u.y_min - my, u.x_max + mx, u.y_max + my)
    if image_size is not None:
        out = out.clamp(*image_size)
    return out


def _rasterize(box: BoundingBox, frame: BoundingBox, M: int) -> np.ndarray:
    # cell centers in normalized frame coordinates
    centers = (np.arange(M) + 0.5) / M
    u0 = (box.x_min - frame.x_min) / frame.width
    u1 = (box.x_max - frame.x_min) / frame.width
    v0 = (box.y_min - frame.y_min) / frame.height
    v1 = (box.y_max - frame.y_min) / frame.height
    # half-open, so boxes that only share an edge never share a cell
    cols = (centers >= u0) & (centers < u1)
    rows = (centers >= v0) & (centers < v1)
    mask = np.outer(rows, cols).astype(np.uint8)
    if not mask.any():
        # box smaller than one cell: mark the cell holding its center
        cu = min(max((u0 + u1) / 2, 0.0), 1.0 - 1e-12)
        cv = min(max((v0 + v1) / 2, 0.0), 1.0 - 1e-12)
        mask[int(cv * M), int(cu * M)] = 1
    return mask


@dataclass
class DualSpatialMask:
    subject_mask: np.ndarray
    object_mask: np.ndarray

    @property
    def size(self) -> int:
        return self.subject_mask.shape[0]

    def stacked(self) -> np.ndarray:
        """(2, M, M) float array, subject channel first."""
        return np.stack([self.subject_mask, self.object_mask]).astype(np.float64)


def rasterize_dual_mask(subject: BoundingBox, obj: BoundingBox, frame: BoundingBox,
                        M: int = DEFAULT_MASK_SIZE) -> DualSpatialMask:
    """Binary M x M masks: a cell is on iff its center lies in the box
    (left/top edges inclusive, right/bottom exclusive), measured in the
    coordinates of ``frame``."""
    if M < 2:
        raise ValueError("mask resolution must be at least 2")
    if not frame.is_valid():
        raise GeometryError(f"degenerate frame {frame}")
    return DualSpatialMask(_rasterize(subject, frame, M), _rasterize(obj, frame, M))


def pair_masks(subject: BoundingBox, obj: BoundingBox, image_size: Tuple[float, float],
               M: int = DEFAULT_MASK_SIZE, margin_fraction: float = DEFAULT_MARGIN) -> DualSpatialMask:
    w, h = image_size
    s, o = subject.clamp(w, h), obj.clamp(w, h)
    frame = enclosing_box(s, o, margin_fraction, image_size)
    return rasterize_dual_mask(s, o, frame, M)


def pack_mask(mask: np.ndarray) -> List[str]:
    """Pack a binary mask as one hex string per row."""
    return [np.packbits(row.astype(np.uint8)).tobytes().hex() for row in mask]


def unpack_mask(rows: Sequence[str], M: int) -> np.ndarray:
    return np.stack([
        np.unpackbits(np.frombuffer(bytes.fromhex(r), dtype=np.uint8))[:M] for r in rows
    ]).astype(np.uint8)


# (filters, kernel size, stride) per convolution layer
Schedule = Tuple[Tuple[int, int, int], ...]

DEFAULT_SCHEDULE: Schedule = ((8, 5, 2), (16, 5, 2), (32, 3, 1))


def schedule_for_mask_size(M: int, widths: Tuple[int, int, int] = (8, 16, 32)) -> Schedule:
    """A three-layer schedule that fits an M x M input."""
    a, b, c = widths
    if M == 32:
        return ((a, 5, 2), (b, 5, 2), (c, 3, 1))
    if M < 12:
        return ((a, 3, 1), (b, 3, 1), (c, 2, 1)) if M >= 6 else ((a, 2, 1), (b, 1, 1), (c, 1, 1))
    if M < 32:
        return ((a, 5, 2), (b, 3, 1), (c, 2, 1))
    return ((a, 5, 2), (b, 5, 2), (c, 3, 2))


def schedule_output_shape(M: int, schedule: Schedule) -> Tuple[int, int, int]:
    size, channels = M, 2
    for filters, k, stride in schedule:
        if k > size:
            raise ConfigurationError(f"kernel {k} does not fit a {size}x{size} map (mask size {M})")
        size = (size - k) // stride + 1
        channels = filters
    return channels, size, size


class SpatialEncoder:
    """Three valid convolutions with rectifiers, then an affine map to 64-d.

    Parameters live in a shared :class:`ParamStore` under ``prefix``.
    """

    def __init__(self, store: ParamStore, prefix: str = "spatial.",
                 mask_size: int = DEFAULT_MASK_SIZE, schedule: Optional[Schedule] = None):
        self.store = store
        self.prefix = prefix
        self.mask_size = mask_size
        self.schedule = tuple(tuple(l) for l in (schedule or schedule_for_mask_size(mask_size)))
        self.flat_shape = schedule_output_shape(mask_size, self.schedule)

    def init_params(self, rng: np.random.Generator) -> None:
        channels = 2
        for i, (filters, k, _) in enumerate(self.schedule):
            fan_in = channels * k * k
            limit = np.sqrt(6.0 / fan_in)
            self.store.add(f"{self.prefix}conv{i}.W", rng.uniform(-limit, limit, (filters, channels, k, k)))
            self.store.add(f"{self.prefix}conv{i}.b", np.full(filters, 0.01))
            channels = filters
        flat = int(np.prod(self.flat_shape))
        self.store.add(f"{self.prefix}fc.W", glorot_uniform(rng, SPATIAL_DIM, flat))
        self.store.add(f"{self.prefix}fc.b", np.zeros(SPATIAL_DIM))

    def _check(self, x: np.ndarray) -> None:
        if x.shape[-3:] != (2, self.mask_size, self.mask_size):
            raise ConfigurationError(
                f"mask batch shape {x.shape} does not match mask size {self.mask_size}"
            )

    def forward(self, masks: np.ndarray):
        """``masks``: (B, 2, M, M). Returns ``(features (B, 64), cache)``."""
        x = np.asarray(masks, dtype=np.float64)
        self._check(x)
        p = self.store.params
        cache = []
        for i, (_, _, stride) in enumerate(self.schedule):
            pre, cols = conv2d(x, p[f"{self.prefix}conv{i}.W"], p[f"{self.prefix}conv{i}.b"],
                               stride, return_cols=True)
            cache.append((x, pre, cols))
            x = relu(pre)
        flat = x.reshape(x.shape[0], -1)
        out = affine(flat, p[f"{self.prefix}fc.W"], p[f"{self.prefix}fc.b"])
        cache.append(flat)
        return out, cache

    def backward(self, cache, dout: np.ndarray) -> None:
        p, pre_flat = self.store.params, cache[-1]
        dflat, dW, db = affine_backward(pre_flat, p[f"{self.prefix}fc.W"], dout)
        self.store.accumulate(f"{self.prefix}fc.W", dW)
        self.store.accumulate(f"{self.prefix}fc.b", db)
        last_pre = cache[-2][1]
        dx = dflat.reshape(last_pre.shape)
        for i in reversed(range(len(self.schedule))):
            x_in, pre, cols = cache[i]
            dpre = relu_backward(pre, dx)
            stride = self.schedule[i][2]
            dx, dk, dbias = conv2d_backward(x_in, p[f"{self.prefix}conv{i}.W"], dpre, stride,
                                            need_dx=i > 0, cols=cols)
            self.store.accumulate(f"{self.prefix}conv{i}.W", dk)
            self.store.accumulate(f"{self.prefix}conv{i}.b", dbias)


def encode_spatial(masks: DualSpatialMask, encoder: SpatialEncoder) -> np.ndarray:
    """64-d spatial feature for one mask pair."""
    if masks.size != encoder.mask_size:
        raise ConfigurationError(f"mask size {masks.size} != encoder mask size {encoder.mask_size}")
    out, _ = encoder.forward(masks.stacked()[None])
    return out[0]
