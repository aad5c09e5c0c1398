"""Keypoint <-> heatmap codec: Gaussian rendering, peak decoding, confidences.

A heatmap is a plain 2-D ``numpy`` array of shape ``(height, width)`` holding
finite activation values in row-major order. In unit-peak mode all values lie
in [0, 1].
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInputError, InvalidSigmaError, OutOfBoundsError, ShapeError

MIN_SIDE = 8


class Visibility(enum.IntEnum):
    INVISIBLE = 0
    OCCLUDED = 1
    VISIBLE = 2


class AmplitudeMode(enum.Enum):
    """Peak amplitude convention of the rendered Gaussian kernel."""

    EQ1_LITERAL = "eq1-literal"  # A = 1 / (2 pi sigma^2)
    UNIT_PEAK = "unit-peak"      # A = 1


@dataclass(frozen=True)
class GaussianParams:
    sigma: float = 2.0
    amplitude_mode: AmplitudeMode = AmplitudeMode.UNIT_PEAK

    def __post_init__(self):
        if not (self.sigma > 0):
            raise InvalidSigmaError(f"sigma must be > 0, got {self.sigma}")

    @property
    def amplitude(self) -> float:
        if self.amplitude_mode is AmplitudeMode.EQ1_LITERAL:
            return 1.0 / (2.0 * math.pi * self.sigma**2)
        return 1.0


@dataclass
class Keypoint:
    """Sub-pixel keypoint location with confidence and visibility."""

    x: float
    y: float
    confidence: float = 1.0
    visibility: Visibility = Visibility.VISIBLE

    def __post_init__(self):
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")

    @property
    def xy(self) -> tuple[float, float]:
        return (self.x, self.y)


def validate_heatmap(h: np.ndarray) -> np.ndarray:
    """Check heatmap invariants, returning the array for chaining."""
    h = np.asarray(h)
    if h.ndim != 2:
        raise ShapeError(f"heatmap must be 2-D, got shape {h.shape}")
    height, width = h.shape
    if width < MIN_SIDE or height < MIN_SIDE:
        raise ShapeError(f"heatmap sides must be >= {MIN_SIDE}, got {width}x{height}")
    if not np.isfinite(h).all():
        raise ShapeError("heatmap contains non-finite values")
    return h


def encode_keypoint(
    p: Keypoint | tuple[float, float],
    g: GaussianParams,
    dims: tuple[int, int],
    dtype=np.float32,
) -> np.ndarray:
    """Render a Gaussian peak at ``p`` on a ``dims = (width, height)`` grid.

    The value at pixel (x, y) is ``A * exp(-[(x-px)^2 + (y-py)^2] / (2 sigma^2))``
    with A set by the amplitude mode.
    """
    px, py = (p.x, p.y) if isinstance(p, Keypoint) else (float(p[0]), float(p[1]))
    width, height = dims
    if width < MIN_SIDE or height < MIN_SIDE:
        raise ShapeError(f"grid sides must be >= {MIN_SIDE}, got {width}x{height}")
    if not (0.0 <= px < width and 0.0 <= py < height):
        raise OutOfBoundsError(f"keypoint ({px}, {py}) outside [0, {width}) x [0, {height})")
    xs = np.arange(width, dtype=np.float64) - px
    ys = np.arange(height, dtype=np.float64) - py
    grid = np.exp(-(ys[:, None] ** 2 + xs[None, :] ** 2) / (2.0 * g.sigma**2))
    if g.amplitude != 1.0:
        grid *= g.amplitude
    return grid.astype(dtype)


def decode_argmax(h: np.ndarray) -> Keypoint:
    """Integer-pixel peak of a heatmap; ties break to the smallest row-major index."""
    h = validate_heatmap(h)
    idx = int(np.argmax(h))
    y, x = divmod(idx, h.shape[1])
    conf = float(min(1.0, max(0.0, h[y, x])))
    return Keypoint(float(x), float(y), confidence=conf)


def decode_subpixel(h: np.ndarray) -> Keypoint:
    """Quarter-offset refinement of the argmax peak.

    The argmax pixel is shifted 0.25 px toward the strictly larger of its two
    axis neighbors on each axis; at a grid border the shift on that axis is 0.
    """
    kp = decode_argmax(h)
    x, y = int(kp.x), int(kp.y)
    height, width = h.shape
    fx, fy = float(x), float(y)
    if 0 < x < width - 1:
        if h[y, x + 1] > h[y, x - 1]:
            fx += 0.25
        elif h[y, x - 1] > h[y, x + 1]:
            fx -= 0.25
    if 0 < y < height - 1:
        if h[y + 1, x] > h[y - 1, x]:
            fy += 0.25
        elif h[y - 1, x] > h[y + 1, x]:
            fy -= 0.25
    return Keypoint(fx, fy, confidence=kp.confidence)


def batch_confidence(hs) -> list[float]:
    """Clamped max value of each heatmap, order preserving."""
    if len(hs) == 0:
        raise EmptyInputError("batch_confidence needs at least one heatmap")
    return [float(min(1.0, max(0.0, np.max(validate_heatmap(h))))) for h in hs]


def value_at(h: np.ndarray, x: float, y: float) -> float:
    """Heatmap value at the pixel nearest (x, y), clamped to [0, 1]."""
    height, width = h.shape
    xi = min(width - 1, max(0, int(round(x))))
    yi = min(height - 1, max(0, int(round(y))))
    return float(min(1.0, max(0.0, h[yi, xi])))
