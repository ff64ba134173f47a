"""Frame, mask, and affine-transform primitives shared by all pipeline stages.

Conventions used throughout the package:

* Pixel coordinates are (x, y) with x horizontal (column) and y vertical
  (row); arrays are indexed ``[y, x]`` and stored row-major.
* ``warp_affine(frame, m)`` samples the *source* frame at ``m @ (x, y)``
  for every output pixel, i.e. ``m`` maps output coordinates to source
  coordinates. Passing the estimated frame-to-frame motion of the scene
  therefore aligns the later frame back onto the earlier one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, EmptyMaskError, EstimationError

# Frames below this side length cannot support pyramid processing.
MIN_FRAME_SIDE = 8

# |det| at or below this is treated as non-invertible.
SINGULAR_DET_EPS = 1e-6


@dataclass(frozen=True, eq=False)
class GrayFrame:
    """Single-channel 8-bit image, the unit of all pixel processing.

    ``data`` is a read-only ``(height, width)`` uint8 array. Instances are
    immutable and safe to share across threads.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ContractError(f"frame data must be 2-D, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            raise ContractError(f"frame data must be uint8, got {arr.dtype}")
        h, w = arr.shape
        if w < MIN_FRAME_SIDE or h < MIN_FRAME_SIDE:
            raise ContractError(
                f"frame must be at least {MIN_FRAME_SIDE}x{MIN_FRAME_SIDE}, got {w}x{h}"
            )
        if arr.flags.writeable or not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr).copy()
            arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "GrayFrame":
        """Build a frame from any 2-D array, rounding and clipping to uint8."""
        arr = np.asarray(arr)
        if arr.dtype != np.uint8:
            arr = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
        return cls(arr)

    def to_float(self) -> np.ndarray:
        """Writable float32 copy of the pixel data."""
        return self.data.astype(np.float32)


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box: top-left corner (x, y), width w, height h, in pixels."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise ContractError(f"box sides must be >= 1, got w={self.w} h={self.h}")
        if self.x < 0 or self.y < 0:
            raise ContractError(f"box origin must be >= 0, got ({self.x}, {self.y})")

    @property
    def area(self) -> int:
        return self.w * self.h

    @property
    def x2(self) -> int:
        """One past the right edge."""
        return self.x + self.w

    @property
    def y2(self) -> int:
        """One past the bottom edge."""
        return self.y + self.h

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x, self.y, self.w, self.h)


class InstanceMask:
    """Per-object binary occupancy grid congruent with a frame.

    Bits are stored packed (one bit per pixel) so that overlapping
    instances remain independently representable; ``dense()`` unpacks to a
    boolean array on demand. ``pixel_count`` and the tightest enclosing
    ``bbox`` are derived at construction. Instances arriving from a
    detection stream always have ``pixel_count > 0``; an empty mask (legal
    only for derived masks such as exclusion regions) has ``bbox None``.
    """

    __slots__ = ("label", "width", "height", "pixel_count", "bbox", "_packed")

    def __init__(self, label: int, bits: np.ndarray):
        bits = np.asarray(bits)
        if bits.ndim != 2:
            raise ContractError(f"mask bits must be 2-D, got shape {bits.shape}")
        if bits.dtype != np.bool_:
            bits = bits.astype(bool)
        self.label = int(label)
        self.height, self.width = bits.shape
        self.pixel_count = int(bits.sum())
        if self.pixel_count:
            rows = np.flatnonzero(bits.any(axis=1))
            cols = np.flatnonzero(bits.any(axis=0))
            self.bbox = BoundingBox(
                int(cols[0]),
                int(rows[0]),
                int(cols[-1] - cols[0] + 1),
                int(rows[-1] - rows[0] + 1),
            )
        else:
            self.bbox = None
        self._packed = np.packbits(bits, axis=None)
        self._packed.setflags(write=False)

    def dense(self) -> np.ndarray:
        """Unpacked (height, width) boolean view of the occupancy grid."""
        flat = np.unpackbits(self._packed, count=self.width * self.height)
        return flat.reshape(self.height, self.width).astype(bool)

    def congruent_with(self, frame: GrayFrame) -> bool:
        return self.width == frame.width and self.height == frame.height

    def __repr__(self):
        return (
            f"InstanceMask(label={self.label}, {self.width}x{self.height}, "
            f"pixels={self.pixel_count}, bbox={self.bbox})"
        )


@dataclass(frozen=True)
class AffineTransform:
    """2-D affine map ``(x, y) -> (a00 x + a01 y + bx, a10 x + a11 y + by)``."""

    a00: float
    a01: float
    a10: float
    a11: float
    bx: float
    by: float

    def __post_init__(self):
        entries = (self.a00, self.a01, self.a10, self.a11, self.bx, self.by)
        if not all(math.isfinite(v) for v in entries):
            raise ContractError(f"affine entries must be finite, got {entries}")

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(1.0, 0.0, 0.0, 1.0, 0.0, 0.0)

    @classmethod
    def translation(cls, bx: float, by: float) -> "AffineTransform":
        return cls(1.0, 0.0, 0.0, 1.0, bx, by)

    @classmethod
    def rotation_about(cls, degrees: float, cx: float, cy: float) -> "AffineTransform":
        """Rotation by ``degrees`` (counter-clockwise in x-right/y-down axes)
        about the point (cx, cy)."""
        rad = math.radians(degrees)
        c, s = math.cos(rad), math.sin(rad)
        # b = p0 - A @ p0 so the pivot maps to itself
        return cls(c, -s, s, c, cx - c * cx + s * cy, cy - s * cx - c * cy)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "AffineTransform":
        m = np.asarray(m, dtype=float)
        if m.shape != (2, 3):
            raise ContractError(f"expected a 2x3 matrix, got shape {m.shape}")
        return cls(m[0, 0], m[0, 1], m[1, 0], m[1, 1], m[0, 2], m[1, 2])

    def as_matrix(self) -> np.ndarray:
        return np.array(
            [[self.a00, self.a01, self.bx], [self.a10, self.a11, self.by]],
            dtype=np.float64,
        )

    def as_entries(self) -> tuple[float, float, float, float, float, float]:
        return (self.a00, self.a01, self.a10, self.a11, self.bx, self.by)

    @property
    def det(self) -> float:
        return self.a00 * self.a11 - self.a01 * self.a10

    def inverse(self) -> "AffineTransform":
        d = self.det
        if abs(d) <= SINGULAR_DET_EPS:
            raise EstimationError(f"transform is singular (det={d:g})")
        i00 = self.a11 / d
        i01 = -self.a01 / d
        i10 = -self.a10 / d
        i11 = self.a00 / d
        return AffineTransform(
            i00,
            i01,
            i10,
            i11,
            -(i00 * self.bx + i01 * self.by),
            -(i10 * self.bx + i11 * self.by),
        )

    def __matmul__(self, other: "AffineTransform") -> "AffineTransform":
        """Composition: ``(self @ other)(p) == self(other(p))``."""
        return AffineTransform(
            self.a00 * other.a00 + self.a01 * other.a10,
            self.a00 * other.a01 + self.a01 * other.a11,
            self.a10 * other.a00 + self.a11 * other.a10,
            self.a10 * other.a01 + self.a11 * other.a11,
            self.a00 * other.bx + self.a01 * other.by + self.bx,
            self.a10 * other.bx + self.a11 * other.by + self.by,
        )

    def apply(self, pts: np.ndarray) -> np.ndarray:
        """Map an (N, 2) array of (x, y) points."""
        pts = np.asarray(pts, dtype=np.float64)
        a = np.array([[self.a00, self.a01], [self.a10, self.a11]])
        return pts @ a.T + np.array([self.bx, self.by])

    def is_near_identity(self, tol: float = 1e-9) -> bool:
        return (
            abs(self.a00 - 1) <= tol
            and abs(self.a11 - 1) <= tol
            and abs(self.a01) <= tol
            and abs(self.a10) <= tol
            and abs(self.bx) <= tol
            and abs(self.by) <= tol
        )


def bilinear_sample(
    img: np.ndarray, xs: np.ndarray, ys: np.ndarray, fill: float = 0.0
) -> np.ndarray:
    """Sample a float image at fractional (xs, ys); out-of-bounds -> fill.

    A location is in bounds when 0 <= x <= width-1 and 0 <= y <= height-1.
    """
    h, w = img.shape
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = (xs - x0).astype(img.dtype, copy=False)
    fy = (ys - y0).astype(img.dtype, copy=False)
    inside = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    x0i = np.clip(x0, 0, w - 2).astype(np.intp)
    y0i = np.clip(y0, 0, h - 2).astype(np.intp)
    p00 = img[y0i, x0i]
    p01 = img[y0i, x0i + 1]
    p10 = img[y0i + 1, x0i]
    p11 = img[y0i + 1, x0i + 1]
    top = p00 + fx * (p01 - p00)
    bot = p10 + fx * (p11 - p10)
    vals = top + fy * (bot - top)
    return np.where(inside, vals, img.dtype.type(fill))


def affine_sample_grid(
    m: AffineTransform, width: int, height: int
) -> tuple[np.ndarray, np.ndarray]:
    """Source coordinates ``m @ (x, y)`` for every pixel of a width x height grid."""
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)
    gx, gy = np.meshgrid(xs, ys)
    sx = m.a00 * gx + m.a01 * gy + m.bx
    sy = m.a10 * gx + m.a11 * gy + m.by
    return sx.astype(np.float32), sy.astype(np.float32)


def warp_affine(frame: GrayFrame, m: AffineTransform) -> GrayFrame:
    """Resample ``frame`` so that output pixel p takes the value at ``m(p)``.

    Bilinear interpolation; source locations outside the frame yield 0.
    The border band given by :func:`warp_margin` is unreliable for flow
    aggregation and should be invalidated downstream.
    """
    if abs(m.det) <= SINGULAR_DET_EPS:
        raise EstimationError(f"cannot warp by singular transform (det={m.det:g})")
    sx, sy = affine_sample_grid(m, frame.width, frame.height)
    vals = bilinear_sample(frame.to_float(), sx, sy, fill=0.0)
    return GrayFrame.from_array(vals)


def warp_margin(m: AffineTransform) -> int:
    """Border width (px) rendered unreliable by warping with ``m``.

    Covers the translation magnitude plus two pixels of interpolation and
    rounding slack.
    """
    return int(math.ceil(max(abs(m.bx), abs(m.by)))) + 2


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection-over-union of two boxes; 0.0 when disjoint."""
    ix = min(a.x2, b.x2) - max(a.x, b.x)
    iy = min(a.y2, b.y2) - max(a.y, b.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / float(a.area + b.area - inter)


def mask_to_bbox(mask: InstanceMask) -> BoundingBox:
    """Tightest axis-aligned box enclosing the mask's set bits."""
    if mask.pixel_count == 0:
        raise EmptyMaskError(f"mask {mask.label} has no set pixels")
    return mask.bbox


def validate_frame_size(width: int, height: int) -> None:
    if width < MIN_FRAME_SIDE or height < MIN_FRAME_SIDE:
        raise ConfigError(
            f"frame size {width}x{height} below minimum {MIN_FRAME_SIDE}"
        )
