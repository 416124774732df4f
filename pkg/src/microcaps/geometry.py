"""Planar homographies, bilinear warping and label-conditioned augmentation.

Pixel coordinates put x to the right and y downward with pixel centres on
integers, so an image of shape (H, W) spans [0, W-1] x [0, H-1].
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np


class SingularHomographyError(ValueError):
    pass


class RotationLabel(str, enum.Enum):
    LEFT_WIDE = "LeftWide"
    LEFT_SHALLOW = "LeftShallow"
    NEUTRAL = "Neutral"
    RIGHT_SHALLOW = "RightShallow"
    RIGHT_WIDE = "RightWide"


class Ring(str, enum.Enum):
    NEGATIVE_FAR = "NegativeFar"
    NEGATIVE_NEAR = "NegativeNear"
    NEUTRAL = "Neutral"
    POSITIVE_NEAR = "PositiveNear"
    POSITIVE_FAR = "PositiveFar"

    @property
    def band(self) -> str:
        return "Neutral" if self is Ring.NEUTRAL else self.value.replace("Negative", "").replace("Positive", "")


ROTATION_ORDER = list(RotationLabel)
RING_ORDER = list(Ring)

# Left rotations are positive angles, right rotations negative.
ROTATION_SIGN = {
    RotationLabel.LEFT_WIDE: 1,
    RotationLabel.LEFT_SHALLOW: 1,
    RotationLabel.NEUTRAL: 0,
    RotationLabel.RIGHT_SHALLOW: -1,
    RotationLabel.RIGHT_WIDE: -1,
}

# Measured |deviation| from neutral, degrees: (min, mean, sd, max).
ROTATION_STATS = {
    RotationLabel.LEFT_WIDE: (10.43, 21.31, 4.50481, 32.78602043),
    RotationLabel.LEFT_SHALLOW: (4.23, 12.39, 3.59036, 23.72892221),
    RotationLabel.NEUTRAL: (0.0, 2.475, 2.04823, 12.76094982),
    RotationLabel.RIGHT_SHALLOW: (0.16, 14.73, 4.46218, 31.52155152),
    RotationLabel.RIGHT_WIDE: (0.76, 24.31, 5.27139, 42.84832537),
}

# |bottom/top width ratio| in percent: (min, mean, sd, max).
RATIO_STATS = {
    Ring.NEGATIVE_FAR: (0.0, 12.71, 6.27130, 48.18),
    Ring.NEGATIVE_NEAR: (0.0, 7.94, 5.05283, 29.66),
    Ring.NEUTRAL: (0.0, 4.40, 3.50910, 20.90),
    Ring.POSITIVE_NEAR: (0.0, 7.09, 3.59487, 26.76),
    Ring.POSITIVE_FAR: (0.0, 11.45, 4.36561, 23.13),
}

GRID_SIZE = 5
GRID_CENTER = 2


def ring_of(row: int, col: int) -> Ring:
    """Perspective ring of a 5x5 capture-grid cell.

    Chebyshev distance from the centre picks Near/Far; cells preceding the
    centre in row-major order (above it, or level with it and to its left)
    are negative.
    """
    if not (0 <= row < GRID_SIZE and 0 <= col < GRID_SIZE):
        raise ValueError(f"grid position ({row}, {col}) outside the 5x5 grid")
    dist = max(abs(row - GRID_CENTER), abs(col - GRID_CENTER))
    if dist == 0:
        return Ring.NEUTRAL
    negative = (row, col) < (GRID_CENTER, GRID_CENTER)
    if dist == 1:
        return Ring.NEGATIVE_NEAR if negative else Ring.POSITIVE_NEAR
    return Ring.NEGATIVE_FAR if negative else Ring.POSITIVE_FAR


@dataclass(frozen=True)
class PerspectiveLabel:
    row: int
    col: int

    @property
    def ring(self) -> Ring:
        return ring_of(self.row, self.col)


# ---------------------------------------------------------------------------
# homographies


@dataclass(frozen=True, eq=False)
class Homography:
    m: np.ndarray

    def __post_init__(self):
        m = np.array(self.m, dtype=np.float64).reshape(3, 3)
        if m[2, 2] != 0:
            m = m / m[2, 2]
        if not np.all(np.isfinite(m)) or abs(np.linalg.det(m)) <= 1e-12:
            raise SingularHomographyError(f"homography is singular:\n{m}")
        object.__setattr__(self, "m", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @property
    def is_affine(self) -> bool:
        return bool(self.m[2, 0] == 0 and self.m[2, 1] == 0)

    def apply(self, points) -> np.ndarray:
        """Map an (..., 2) array of points."""
        pts = np.asarray(points, dtype=np.float64)
        hom = pts @ self.m[:, :2].T + self.m[:, 2]
        return hom[..., :2] / hom[..., 2:3]

    def __matmul__(self, other: "Homography") -> "Homography":
        return compose(self, other)


def compose(h1: Homography, h2: Homography) -> Homography:
    """The map that applies ``h2`` first, then ``h1``."""
    return Homography(h1.m @ h2.m)


def invert(h: Homography) -> Homography:
    return Homography(np.linalg.inv(h.m))


def translation_homography(tx: float, ty: float) -> Homography:
    return Homography(np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]]))


def rotation_homography(theta: float, center=(0.0, 0.0)) -> Homography:
    """Rotation by ``theta`` degrees about ``center`` (x, y); (1, 0) goes to (0, 1) at 90."""
    t = math.radians(theta)
    c, s = math.cos(t), math.sin(t)
    cx, cy = center
    return Homography(
        np.array(
            [
                [c, -s, cx - c * cx + s * cy],
                [s, c, cy - s * cx - c * cy],
                [0.0, 0.0, 1.0],
            ]
        )
    )


def homography_from_points(src, dst) -> Homography:
    """Exact homography through four point correspondences."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != (4, 2) or dst.shape != (4, 2):
        raise ValueError("need exactly four (x, y) correspondences")
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        a[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * i] = u
        b[2 * i + 1] = v
    try:
        h = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise SingularHomographyError("degenerate point configuration") from exc
    return Homography(np.append(h, 1.0).reshape(3, 3))


def _keystone_widths(extent: float, ratio: float) -> tuple[float, float]:
    # (near, far) side lengths with (near - far) / far == ratio and max == extent
    if ratio >= 0:
        return extent, extent / (1.0 + ratio)
    return extent * (1.0 + ratio), extent


def perspective_homography(ratio_y: float, ratio_x: float = 0.0, image_shape=(64, 64)) -> Homography:
    """Keystone warp of an (H, W) frame.

    ``ratio_y`` is (bottom width - top width) / top width of the warped frame,
    ``ratio_x`` likewise (right height - left height) / left height. The longer
    side keeps the full frame extent so nothing is pushed out of view.
    """
    if abs(ratio_y) >= 1 or abs(ratio_x) >= 1:
        raise SingularHomographyError(f"degenerate perspective ratio ({ratio_y}, {ratio_x}); need |ratio| < 1")
    h, w = image_shape[:2]
    x1, y1 = w - 1.0, h - 1.0
    cx, cy = x1 / 2, y1 / 2
    corners = [(0, 0), (x1, 0), (x1, y1), (0, y1)]
    result = Homography.identity()
    if ratio_y != 0:
        wb, wt = _keystone_widths(x1, ratio_y)
        dst = [(cx - wt / 2, 0), (cx + wt / 2, 0), (cx + wb / 2, y1), (cx - wb / 2, y1)]
        result = homography_from_points(corners, dst)
    if ratio_x != 0:
        hr, hl = _keystone_widths(y1, ratio_x)
        dst = [(0, cy - hl / 2), (x1, cy - hr / 2), (x1, cy + hr / 2), (0, cy + hl / 2)]
        result = compose(homography_from_points(corners, dst), result)
    return result


# ---------------------------------------------------------------------------
# warping


def warp_batch(images: np.ndarray, hs: np.ndarray, fill_value=0.0) -> np.ndarray:
    """Inverse-mapped bilinear warp of a stack of images.

    ``images`` is [N, H, W] or [N, H, W, C]; ``hs`` holds N forward 3x3
    homographies (source -> destination). ``fill_value`` (scalar, per image
    [N], per channel [C] or [N, C]) replaces every sample outside the source.
    """
    imgs = np.asarray(images)
    squeeze = imgs.ndim == 3
    if squeeze:
        imgs = imgs[..., None]
    n, h, w, c = imgs.shape
    dtype = np.result_type(imgs.dtype, np.float32)
    hs = np.asarray(hs, dtype=np.float64).reshape(n, 3, 3)
    inv = np.linalg.inv(hs)
    ys, xs = np.mgrid[0:h, 0:w]
    grid = np.stack([xs.ravel(), ys.ravel(), np.ones(h * w)], axis=0).astype(np.float64)
    src = inv @ grid  # [N, 3, HW]
    den = src[:, 2]
    valid_den = den > 1e-12
    den = np.where(valid_den, den, 1.0)
    # a point behind the camera maps far outside, so all four neighbours read the fill
    sx = np.where(valid_den, src[:, 0] / den, -4.0)
    sy = np.where(valid_den, src[:, 1] / den, -4.0)
    sx = np.clip(sx, -2.0, w + 1.0)
    sy = np.clip(sy, -2.0, h + 1.0)
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = (sx - x0).astype(dtype)
    fy = (sy - y0).astype(dtype)
    fill = np.asarray(fill_value, dtype=dtype)
    if fill.ndim == 1 and fill.shape[0] == n and (n != c or c == 1):
        fill = fill[:, None]
    fill = np.broadcast_to(fill, (n, c))
    # channel planes with a one-pixel fill border; clipping a neighbour index
    # into [-1, W] lands every out-of-source neighbour on that border
    padded = np.empty((n, c, h + 2, w + 2), dtype=dtype)
    padded[:] = fill[:, :, None, None]
    padded[:, :, 1:-1, 1:-1] = imgs.transpose(0, 3, 1, 2)
    flat = padded.reshape(-1)
    plane = (h + 2) * (w + 2)
    base = (np.arange(n * c) * plane).reshape(n, c, 1)
    xa = np.clip(x0, -1, w).astype(np.int64) + 1
    xb = np.clip(x0 + 1, -1, w).astype(np.int64) + 1
    ya = (np.clip(y0, -1, h).astype(np.int64) + 1) * (w + 2)
    yb = (np.clip(y0 + 1, -1, h).astype(np.int64) + 1) * (w + 2)

    def tap(yy, xx):
        return np.take(flat, (yy + xx)[:, None, :] + base)  # [N, C, HW]

    gx = fx[:, None, :]
    gy = fy[:, None, :]
    top = tap(ya, xa)
    top += (tap(ya, xb) - top) * gx
    bot = tap(yb, xa)
    bot += (tap(yb, xb) - bot) * gx
    top += (bot - top) * gy
    out = top.reshape(n, c, h, w).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(out[..., 0]) if squeeze else np.ascontiguousarray(out)


def warp(image: np.ndarray, h: Homography, fill_value=0.0) -> np.ndarray:
    """Warp one [H, W] or [H, W, C] image by ``h`` with bilinear inverse mapping."""
    fill = np.asarray(fill_value)
    return warp_batch(np.asarray(image)[None], h.m[None], fill[None] if fill.ndim else fill)[0]


# ---------------------------------------------------------------------------
# augmentation sampling


def _default_rotation_sd() -> dict:
    return {k: v[2] for k, v in ROTATION_STATS.items()}


def _default_rotation_mean() -> dict:
    return {k: v[1] for k, v in ROTATION_STATS.items()}


def _default_ratio_sd() -> dict:
    return {k: v[2] for k, v in RATIO_STATS.items()}


@dataclass
class AugmentPolicy:
    """Per-label augmentation spreads.

    ``rotation_sd`` is in degrees; ``perspective_sd`` is in percent, matching
    the measurement tables, and is divided by 100 when sampling.
    """

    rotation_sd: dict = field(default_factory=_default_rotation_sd)
    perspective_sd: dict = field(default_factory=_default_ratio_sd)
    rotation_mean: dict = field(default_factory=_default_rotation_mean)
    translation_bound: float = 0.05
    simulate_rotations: bool = False
    simulate_perspectives: bool = False
    perspective_axes: str = "both"

    def __post_init__(self):
        if not 0.0 <= self.translation_bound <= 0.5:
            raise ValueError(f"translation_bound must lie in [0, 0.5], got {self.translation_bound}")
        if any(v < 0 for v in self.rotation_sd.values()) or any(v < 0 for v in self.perspective_sd.values()):
            raise ValueError("augmentation standard deviations must be non-negative")
        if self.perspective_axes not in ("both", "y"):
            raise ValueError(f"perspective_axes must be 'both' or 'y', got {self.perspective_axes!r}")


@dataclass(frozen=True)
class AugmentDraw:
    theta: float
    ratio_y: float
    ratio_x: float
    tx: float
    ty: float

    def __iter__(self):
        return iter((self.theta, self.ratio_y, self.ratio_x, self.tx, self.ty))


MAX_AUGMENT_RATIO = 0.9


def sample_augmentation(
    rotation_label: RotationLabel,
    ring: Ring,
    policy: AugmentPolicy,
    rng: np.random.Generator,
    image_shape=(64, 64),
) -> AugmentDraw:
    """One draw of (theta deg, ratio_y, ratio_x, tx px, ty px) for a training sample."""
    h, w = image_shape[:2]
    theta = 0.0
    ratio_y = ratio_x = 0.0
    if policy.simulate_rotations:
        theta = float(rng.normal(0.0, policy.rotation_sd[RotationLabel(rotation_label)]))
    if policy.simulate_perspectives:
        ratio_y = float(rng.normal(0.0, policy.perspective_sd[Ring(ring)] / 100.0))
        ratio_y = float(np.clip(ratio_y, -MAX_AUGMENT_RATIO, MAX_AUGMENT_RATIO))
        if policy.perspective_axes == "both":
            ratio_x = float(np.clip(ratio_y * (w / h), -MAX_AUGMENT_RATIO, MAX_AUGMENT_RATIO))
    b = policy.translation_bound
    tx = float(rng.uniform(-b, b) * w)
    ty = float(rng.uniform(-b, b) * h)
    return AugmentDraw(theta, ratio_y, ratio_x, tx, ty)


def augmentation_homography(draw: AugmentDraw, image_shape=(64, 64)) -> Homography:
    """Rotation about the frame centre, then keystone, then translation."""
    h, w = image_shape[:2]
    center = ((w - 1) / 2.0, (h - 1) / 2.0)
    out = rotation_homography(draw.theta, center) if draw.theta else Homography.identity()
    if draw.ratio_y or draw.ratio_x:
        out = compose(perspective_homography(draw.ratio_y, draw.ratio_x, (h, w)), out)
    if draw.tx or draw.ty:
        out = compose(translation_homography(draw.tx, draw.ty), out)
    return out
