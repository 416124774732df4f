"""Procedural micro-PCB stand-ins rendered under the 5x5 capture geometry.

World units are inches. The capture surface is the plane z = 0, the camera
sits 16 units above the centre cell and is aimed at the board it photographs,
and focal length scales with distance so every board appears at the same
scale (the analogue of cropping each photograph to the board).
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import (
    GRID_CENTER,
    GRID_SIZE,
    ROTATION_ORDER,
    ROTATION_SIGN,
    ROTATION_STATS,
    Homography,
    Ring,
    RotationLabel,
    compose,
    invert,
    ring_of,
    warp,
)
from .rng import derive_rng

CAMERA_HEIGHT = 16.0
GRID_SPACING = 6.0
FIELD_OF_VIEW = 5.4  # world units spanned by the frame at the board centre
BACKGROUND = np.array([0.86, 0.86, 0.84])
SUPERSAMPLE = 4
TRAIN_COPIES = 4
TEST_COPIES = 1
COMPONENT_MARGIN = 0.15
VARIANT_REPAINTS = 2
VARIANT_SHIFT = 0.15  # colour distance of a repainted part
INSTANCE_JITTER = 0.05  # per-part colour sd between physical copies
SENSOR_NOISE = 0.02  # per-pixel sd; lighting itself stays fixed


class FieldOfViewError(ValueError):
    pass


@dataclass(frozen=True)
class Component:
    x: float  # centre, board-local units (origin at board centre, y down)
    y: float
    w: float
    h: float
    height: float
    color: tuple[float, float, float]
    appearance_seed: int = 0
    inset: tuple[float, float, float] | None = None  # colour of a centred marking


@dataclass(frozen=True)
class BoardSpec:
    class_id: int
    board_size: tuple[float, float]
    components: tuple[Component, ...]
    base_color: tuple[float, float, float]
    texture_seed: int
    layout_id: int = 0

    def in_bounds(self) -> bool:
        bw, bh = self.board_size
        return all(
            abs(c.x) + c.w / 2 <= bw / 2 + 1e-9 and abs(c.y) + c.h / 2 <= bh / 2 + 1e-9 for c in self.components
        )

    def flattened(self) -> "BoardSpec":
        return replace(self, components=tuple(replace(c, height=0.0) for c in self.components))


@dataclass(frozen=True)
class SceneParams:
    grid_position: tuple[int, int] = (GRID_CENTER, GRID_CENTER)
    rotation_label: RotationLabel = RotationLabel.NEUTRAL
    actual_theta: float = 0.0
    instance_noise_seed: int = 0
    sensor_seed: int | None = None  # None renders noise-free

    def __post_init__(self):
        ring_of(*self.grid_position)

    @property
    def ring(self) -> Ring:
        return ring_of(*self.grid_position)


@dataclass
class LabeledSample:
    image: np.ndarray  # [H, W, 3] float32 on the 1/255 lattice
    class_id: int
    rotation_label: RotationLabel
    grid_position: tuple[int, int]
    theta: float
    ratio_y: float
    ratio_x: float
    split: str
    copy: int = 0

    @property
    def ring(self) -> Ring:
        return ring_of(*self.grid_position)


# ---------------------------------------------------------------------------
# board library

_BASE_COLORS = [
    (0.05, 0.35, 0.55),  # arduino blue
    (0.07, 0.40, 0.18),  # solder-mask green
    (0.10, 0.10, 0.12),  # matte black
    (0.45, 0.10, 0.12),  # red
    (0.12, 0.25, 0.35),
    (0.20, 0.35, 0.10),
]
_PART_COLORS = [
    (0.78, 0.78, 0.80),  # tin / shielding
    (0.12, 0.12, 0.13),  # IC package
    (0.85, 0.70, 0.20),  # gold header
    (0.60, 0.40, 0.20),  # tantalum
    (0.95, 0.95, 0.92),  # white connector
    (0.30, 0.30, 0.32),
    (0.70, 0.15, 0.15),
]


def _random_layout(rng: np.random.Generator, board_size: tuple[float, float]) -> list[tuple]:
    bw, bh = board_size
    parts: list[tuple] = []
    n_parts = int(rng.integers(12, 19))
    attempts = 0
    while len(parts) < n_parts and attempts < 400:
        attempts += 1
        kind = rng.random()
        if kind < 0.25:  # header / connector strip
            w, h = rng.uniform(0.8, 1.8), rng.uniform(0.18, 0.3)
            if rng.random() < 0.5:
                w, h = h, w
            height = rng.uniform(0.3, 0.5)
        elif kind < 0.55:  # IC
            w = h = rng.uniform(0.35, 0.8)
            height = rng.uniform(0.05, 0.12)
        else:  # passive or small part
            w, h = rng.uniform(0.2, 0.45), rng.uniform(0.2, 0.45)
            height = rng.uniform(0.0, 0.35)
        hx = bw / 2 - COMPONENT_MARGIN - w / 2
        hy = bh / 2 - COMPONENT_MARGIN - h / 2
        if hx <= 0 or hy <= 0:
            continue
        x, y = rng.uniform(-hx, hx), rng.uniform(-hy, hy)
        if any(abs(x - p[0]) < (w + p[2]) / 2 + 0.05 and abs(y - p[1]) < (h + p[3]) / 2 + 0.05 for p in parts):
            continue
        parts.append((x, y, w, h, height))
    return parts


def _paint(layout: list[tuple], rng: np.random.Generator, seed: int) -> tuple[Component, ...]:
    comps = []
    for i, (x, y, w, h, height) in enumerate(layout):
        color = _PART_COLORS[int(rng.integers(len(_PART_COLORS)))]
        inset = None
        if min(w, h) > 0.3 and rng.random() < 0.5:
            inset = _PART_COLORS[int(rng.integers(len(_PART_COLORS)))]
        comps.append(Component(x, y, w, h, height, color, seed * 1000 + i, inset))
    return tuple(comps)


def _variant_paint(parent: tuple[Component, ...], rng: np.random.Generator, seed: int) -> tuple[Component, ...]:
    # a clone from another vendor: same parts, a few of them in a slightly different shade
    comps = list(parent)
    for i in rng.choice(len(comps), size=min(VARIANT_REPAINTS, len(comps)), replace=False):
        old = comps[int(i)]
        step = rng.normal(size=3)
        color = np.array(old.color) + VARIANT_SHIFT * step / np.linalg.norm(step)
        # reflect off the [0, 1] walls so clipping never shrinks the shift
        color = 1 - np.abs(1 - np.abs(color))
        comps[int(i)] = replace(old, color=tuple(float(c) for c in color), appearance_seed=seed * 1000 + int(i))
    return tuple(comps)


def make_board_library(n_classes: int, rng_seed: int = 0) -> list[BoardSpec]:
    """Deterministic set of board designs.

    Classes 0 and 1 (and 2 when there are at least 8 classes) share one
    component layout, like one board model bought from several vendors: the
    copies repaint only a few parts and shift the mask colour slightly. With
    11 or more classes, classes 8 and 9 form a second such pair.
    """
    if n_classes < 2:
        raise ValueError(f"need at least 2 classes, got {n_classes}")
    layout_of = list(range(n_classes))
    layout_of[1] = 0
    if n_classes >= 8:
        layout_of[2] = 0
    if n_classes >= 11:
        layout_of[9] = 8
    layouts: dict[int, tuple] = {}
    library = []
    for cls in range(n_classes):
        lid = layout_of[cls]
        if lid not in layouts:
            lrng = derive_rng(rng_seed, 1, lid)
            size = (float(lrng.uniform(2.1, 2.7)), float(lrng.uniform(3.2, 3.7)))
            layouts[lid] = (size, _random_layout(lrng, size))
        size, layout = layouts[lid]
        prng = derive_rng(rng_seed, 2, cls)
        if lid == cls:
            base = _BASE_COLORS[int(prng.integers(len(_BASE_COLORS)))]
        else:
            first = library[lid]
            base = tuple(float(np.clip(c + prng.uniform(-0.05, 0.05), 0, 1)) for c in first.base_color)
        comps = _paint(layout, prng, cls) if lid == cls else _variant_paint(library[lid].components, prng, cls)
        library.append(BoardSpec(cls, size, comps, tuple(base), int(prng.integers(2**31)), lid))
    return library


# ---------------------------------------------------------------------------
# camera


def cell_center(row: int, col: int) -> tuple[float, float]:
    return ((col - GRID_CENTER) * GRID_SPACING, (row - GRID_CENTER) * GRID_SPACING)


def _camera_rotation(target: np.ndarray) -> np.ndarray:
    """Rows are the camera x, y, z axes in world coordinates (pan-tilt, no roll)."""
    base = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]])
    fwd = target - np.array([0.0, 0.0, CAMERA_HEIGHT])
    fwd /= np.linalg.norm(fwd)
    down = base[2]
    axis = np.cross(down, fwd)
    s = np.linalg.norm(axis)
    c = float(np.dot(down, fwd))
    if s < 1e-15:
        return base
    k = axis / s
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    rot = np.eye(3) + s * kx + (1 - c) * (kx @ kx)
    return (rot @ base.T).T


def plane_homography(grid_position, theta: float, out_size: int) -> Homography:
    """Board-local plane coordinates to image pixels for a board rotated by ``theta``."""
    bx, by = cell_center(*grid_position)
    target = np.array([bx, by, 0.0])
    rc = _camera_rotation(target)
    dist = float(np.linalg.norm(target - np.array([0.0, 0.0, CAMERA_HEIGHT])))
    f = out_size / FIELD_OF_VIEW * dist
    cxy = (out_size - 1) / 2.0
    kmat = np.array([[f, 0, cxy], [0, f, cxy], [0, 0, 1.0]])
    t = math.radians(theta)
    c, s = math.cos(t), math.sin(t)
    m = np.array([[c, -s, bx], [s, c, by], [0.0, 0.0, -CAMERA_HEIGHT]])
    return Homography(kmat @ rc @ m)


def parallax_shift(grid_position, theta: float, height: float) -> np.ndarray:
    """Board-local displacement of a component top at ``height`` above the board."""
    off = np.array(cell_center(*grid_position))
    world = height * off / CAMERA_HEIGHT
    t = math.radians(theta)
    c, s = math.cos(t), math.sin(t)
    return np.array([c * world[0] + s * world[1], -s * world[0] + c * world[1]])


def _corners(board: BoardSpec) -> np.ndarray:
    bw, bh = board.board_size
    return np.array([[-bw / 2, -bh / 2], [bw / 2, -bh / 2], [bw / 2, bh / 2], [-bw / 2, bh / 2]])


def expected_ratio(h: Homography, board_size) -> float:
    """Closed-form bottom/top width ratio of a flat board seen through ``h``.

    The left and right board sides are projected to image lines; their
    horizontal separation is compared at the lowest and highest rows both
    sides cover.
    """
    bw, bh = board_size
    tl, tr, br, bl = h.apply(np.array([[-bw / 2, -bh / 2], [bw / 2, -bh / 2], [bw / 2, bh / 2], [-bw / 2, bh / 2]]))
    y_top = max(min(tl[1], bl[1]), min(tr[1], br[1]))
    y_bot = min(max(tl[1], bl[1]), max(tr[1], br[1]))

    def x_at(p, q, y):
        return p[0] + (q[0] - p[0]) * (y - p[1]) / (q[1] - p[1])

    w_top = x_at(tr, br, y_top) - x_at(tl, bl, y_top)
    w_bot = x_at(tr, br, y_bot) - x_at(tl, bl, y_bot)
    return float((w_bot - w_top) / w_top)


# ---------------------------------------------------------------------------
# rendering


def _texture(board: BoardSpec, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    rng = derive_rng(board.texture_seed, 7)
    k = rng.uniform(0.6, 1.6, size=(2, 2))
    ph = rng.uniform(0, 2 * np.pi, size=2)
    return 0.025 * (np.sin(k[0, 0] * u + k[0, 1] * v + ph[0]) + np.sin(k[1, 0] * u - k[1, 1] * v + ph[1]))


def _instance_colors(board: BoardSpec, instance_seed: int) -> list[np.ndarray]:
    rng = derive_rng(instance_seed, board.class_id, 11)
    return [np.clip(np.array(c.color) + rng.normal(0, INSTANCE_JITTER, 3), 0, 1) for c in board.components]


def render(board: BoardSpec, scene: SceneParams, out_size: int = 64, supersample: int = SUPERSAMPLE) -> np.ndarray:
    """Render ``board`` under ``scene`` as an [out_size, out_size, 3] float image in [0, 1].

    The board plane goes through its exact camera homography; each raised
    component is drawn at its footprint displaced by the parallax shift for
    its height. Taller components are painted last.
    """
    theta = scene.actual_theta
    h0 = plane_homography(scene.grid_position, theta, out_size)
    shifts = [parallax_shift(scene.grid_position, theta, c.height) for c in board.components]

    corners = [_corners(board)]
    for comp, sh in zip(board.components, shifts):
        cx, cy = comp.x + sh[0], comp.y + sh[1]
        corners.append(np.array([[cx - comp.w / 2, cy - comp.h / 2], [cx + comp.w / 2, cy + comp.h / 2]]))
    pts = h0.apply(np.concatenate(corners))
    if np.any(pts < -0.5) or np.any(pts > out_size - 0.5):
        raise FieldOfViewError(f"board {board.class_id} leaves the frame at {scene.grid_position}, theta={theta:.2f}")

    ss = supersample
    offs = (np.arange(ss) + 0.5) / ss - 0.5
    pix = np.arange(out_size, dtype=np.float64)
    xs = (pix[:, None] + offs[None, :]).ravel()
    gx, gy = np.meshgrid(xs, xs)
    uv = _inverse_map(h0, gx, gy)
    u, v = uv[..., 0], uv[..., 1]

    img = np.empty(gx.shape + (3,))
    img[:] = BACKGROUND
    bw, bh = board.board_size
    on_board = (np.abs(u) <= bw / 2) & (np.abs(v) <= bh / 2)
    tex = _texture(board, u, v)
    base = np.clip(np.array(board.base_color)[None, None, :] + tex[..., None], 0, 1)
    img[on_board] = base[on_board]

    colors = _instance_colors(board, scene.instance_noise_seed)
    order = sorted(range(len(board.components)), key=lambda i: board.components[i].height)
    for i in order:
        comp = board.components[i]
        du = u - (comp.x + shifts[i][0])
        dv = v - (comp.y + shifts[i][1])
        inside = (np.abs(du) <= comp.w / 2) & (np.abs(dv) <= comp.h / 2)
        img[inside] = colors[i]
        if comp.inset is not None:
            mark = inside & (np.abs(du) <= comp.w * 0.3) & (np.abs(dv) <= comp.h * 0.3)
            img[mark] = comp.inset

    img = img.reshape(out_size, ss, out_size, ss, 3).mean(axis=(1, 3))
    if scene.sensor_seed is not None:
        img = img + derive_rng(scene.sensor_seed, 13).normal(0.0, SENSOR_NOISE, img.shape)
    return quantize(img)


def _inverse_map(h: Homography, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    inv = np.linalg.inv(h.m)
    hom = inv[:, 0, None, None] * gx + inv[:, 1, None, None] * gy + inv[:, 2, None, None]
    return np.stack([hom[0] / hom[2], hom[1] / hom[2]], axis=-1)


def quantize(img: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(img, 0, 1) * 255) / 255).astype(np.float32)


def induced_homography(grid_position, theta: float, out_size: int = 64) -> Homography:
    """Image-to-image map from the centre-cell view to the view at ``grid_position``."""
    centre = plane_homography((GRID_CENTER, GRID_CENTER), theta, out_size)
    return compose(plane_homography(grid_position, theta, out_size), invert(centre))


def planarity_residual(board: BoardSpec, grid_position, theta: float = 0.0, out_size: int = 128,
                       margin: int = 2) -> np.ndarray:
    """|render at ``grid_position`` - warp(centre render)| per pixel, grey-averaged.

    Zero up to resampling error for a flat board; raised parts leave a
    residual where their parallax-shifted footprint lands. ``margin`` pixels
    along the frame edge are set to zero.
    """
    centre = render(board, SceneParams((GRID_CENTER, GRID_CENTER), RotationLabel.NEUTRAL, theta), out_size)
    actual = render(board, SceneParams(tuple(grid_position), RotationLabel.NEUTRAL, theta), out_size)
    warped = warp(centre, induced_homography(grid_position, theta, out_size), BACKGROUND)
    res = np.abs(actual - warped).mean(axis=-1)
    if margin:
        res[:margin] = res[-margin:] = 0.0
        res[:, :margin] = res[:, -margin:] = 0.0
    return res


def component_window(board: BoardSpec, index: int, grid_position, theta: float = 0.0, out_size: int = 128,
                     pad: int = 2) -> tuple[slice, slice]:
    """Pixel box covering a component's flat footprint and its parallax-shifted top."""
    comp = board.components[index]
    shift = parallax_shift(grid_position, theta, comp.height)
    pts = [
        [comp.x + dx + sx * comp.w / 2, comp.y + dy + sy * comp.h / 2]
        for dx, dy in ((0.0, 0.0), tuple(shift))
        for sx in (-1, 1)
        for sy in (-1, 1)
    ]
    img = plane_homography(grid_position, theta, out_size).apply(np.array(pts))
    x0, y0 = np.maximum(np.floor(img.min(axis=0)).astype(int) - pad, 0)
    x1, y1 = np.minimum(np.ceil(img.max(axis=0)).astype(int) + pad + 1, out_size)
    return slice(int(y0), int(y1)), slice(int(x0), int(x1))


# ---------------------------------------------------------------------------
# dataset generation

_NEUTRAL_SD = ROTATION_STATS[RotationLabel.NEUTRAL][1] * math.sqrt(math.pi / 2)


def rotation_bands() -> dict:
    """Allowed |theta| interval per label: midpoints between adjacent label means, capped at 3 sigma."""
    mean = {k: v[1] for k, v in ROTATION_STATS.items()}
    n = RotationLabel.NEUTRAL
    mid = {
        "left_inner": (mean[n] + mean[RotationLabel.LEFT_SHALLOW]) / 2,
        "left_outer": (mean[RotationLabel.LEFT_SHALLOW] + mean[RotationLabel.LEFT_WIDE]) / 2,
        "right_inner": (mean[n] + mean[RotationLabel.RIGHT_SHALLOW]) / 2,
        "right_outer": (mean[RotationLabel.RIGHT_SHALLOW] + mean[RotationLabel.RIGHT_WIDE]) / 2,
    }
    bands = {}
    for label, (lo_b, hi_b) in {
        RotationLabel.LEFT_SHALLOW: (mid["left_inner"], mid["left_outer"]),
        RotationLabel.LEFT_WIDE: (mid["left_outer"], math.inf),
        RotationLabel.RIGHT_SHALLOW: (mid["right_inner"], mid["right_outer"]),
        RotationLabel.RIGHT_WIDE: (mid["right_outer"], math.inf),
    }.items():
        _, mu, sd, _ = ROTATION_STATS[label]
        bands[label] = (max(lo_b, mu - 3 * sd), min(hi_b, mu + 3 * sd))
    bands[RotationLabel.NEUTRAL] = (-min(mid["right_inner"], 3 * _NEUTRAL_SD), min(mid["left_inner"], 3 * _NEUTRAL_SD))
    return bands


def sample_theta(label: RotationLabel, rng: np.random.Generator) -> float:
    """Signed placement angle for a hand-placed board with the given label.

    Non-neutral labels draw |theta| from the measured mean and spread,
    truncated to the label's band; neutral draws a zero-mean normal whose
    mean absolute value equals the measured neutral mean.
    """
    lo, hi = rotation_bands()[label]
    if label is RotationLabel.NEUTRAL:
        mu, sd, sign = 0.0, _NEUTRAL_SD, 1
    else:
        _, mu, sd, _ = ROTATION_STATS[label]
        sign = ROTATION_SIGN[label]
    while True:
        x = rng.normal(mu, sd)
        if lo <= x <= hi:
            return float(sign * x)


def generate_dataset(library: list[BoardSpec], out_size: int = 64, rng_seed: int = 0,
                     flat: bool = False) -> list[LabeledSample]:
    """500 train + 125 test samples per class in (class, position, rotation, copy) order."""
    if not library:
        raise ValueError("board library is empty")
    samples = []
    for board in library:
        b = board.flattened() if flat else board
        train_seed = _instance_seed(rng_seed, board.class_id, "train")
        test_seed = _instance_seed(rng_seed, board.class_id, "test")
        for row in range(GRID_SIZE):
            for col in range(GRID_SIZE):
                for ri, label in enumerate(ROTATION_ORDER):
                    for copy in range(TRAIN_COPIES + TEST_COPIES):
                        split = "train" if copy < TRAIN_COPIES else "test"
                        rng = derive_rng(rng_seed, board.class_id, row, col, ri, copy)
                        theta = sample_theta(label, rng)
                        scene = SceneParams((row, col), label, theta, train_seed if split == "train" else test_seed,
                                            int(rng.integers(2**31)))
                        img = render(b, scene, out_size)
                        h = plane_homography((row, col), theta, out_size)
                        ry = expected_ratio(h, board.board_size)
                        samples.append(
                            LabeledSample(img, board.class_id, label, (row, col), theta, ry, ry, split, copy)
                        )
    return samples


def _instance_seed(seed: int, class_id: int, split: str) -> int:
    return int(derive_rng(seed, class_id, 99 if split == "train" else 98).integers(2**31))


# ---------------------------------------------------------------------------
# array view used for training


@dataclass
class SampleSet:
    """Column-oriented view of labelled samples."""

    images: np.ndarray  # [N, H, W, C] float32
    class_ids: np.ndarray
    rotation: np.ndarray  # index into ROTATION_ORDER
    rows: np.ndarray
    cols: np.ndarray
    theta: np.ndarray
    ratio_y: np.ndarray
    split: np.ndarray
    paths: list = field(default_factory=list)

    @classmethod
    def from_samples(cls, samples: list[LabeledSample]) -> "SampleSet":
        if not samples:
            raise ValueError("no samples")
        return cls(
            images=np.stack([s.image for s in samples]).astype(np.float32),
            class_ids=np.array([s.class_id for s in samples], dtype=np.int64),
            rotation=np.array([ROTATION_ORDER.index(RotationLabel(s.rotation_label)) for s in samples]),
            rows=np.array([s.grid_position[0] for s in samples]),
            cols=np.array([s.grid_position[1] for s in samples]),
            theta=np.array([s.theta for s in samples]),
            ratio_y=np.array([s.ratio_y for s in samples]),
            split=np.array([s.split for s in samples]),
            paths=[sample_relpath(s) for s in samples],
        )

    def __len__(self) -> int:
        return len(self.class_ids)

    @property
    def rings(self) -> list[Ring]:
        return [ring_of(int(r), int(c)) for r, c in zip(self.rows, self.cols)]

    @property
    def num_classes(self) -> int:
        return int(self.class_ids.max()) + 1

    def subset(self, mask) -> "SampleSet":
        idx = np.flatnonzero(np.asarray(mask))
        return SampleSet(
            self.images[idx], self.class_ids[idx], self.rotation[idx], self.rows[idx], self.cols[idx],
            self.theta[idx], self.ratio_y[idx], self.split[idx],
            [self.paths[i] for i in idx] if self.paths else [],
        )

    def split_of(self, name: str) -> "SampleSet":
        return self.subset(self.split == name)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(self.class_ids.tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# on-disk layout

MANIFEST_FIELDS = ["path", "class_id", "split", "row", "col", "rotation_label", "theta_true", "ratio_y_true"]


def sample_relpath(s: LabeledSample, ext: str = "png") -> str:
    r, c = s.grid_position
    return f"{s.class_id}/{s.split}/r{r}c{c}_{RotationLabel(s.rotation_label).value}_{s.copy}.{ext}"


def write_dataset(samples: list[LabeledSample], root) -> Path:
    """Write lossless 8-bit RGB PNGs and ``manifest.csv`` under ``root``."""
    from PIL import Image

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = root / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(MANIFEST_FIELDS)
        for s in samples:
            rel = sample_relpath(s)
            path = root / rel
            path.parent.mkdir(parents=True, exist_ok=True)
            arr = np.round(np.clip(s.image, 0, 1) * 255).astype(np.uint8)
            Image.fromarray(arr, mode="RGB").save(path, format="PNG")
            wr.writerow([rel, s.class_id, s.split, s.grid_position[0], s.grid_position[1],
                         RotationLabel(s.rotation_label).value, f"{s.theta:.6f}", f"{s.ratio_y:.6f}"])
    return manifest


class ManifestError(FileNotFoundError):
    pass


def read_manifest(root) -> list[dict]:
    manifest = Path(root) / "manifest.csv"
    if not manifest.is_file():
        raise ManifestError(f"no manifest.csv under {root}")
    with open(manifest, newline="") as fh:
        rows = list(csv.DictReader(fh))
    missing = set(MANIFEST_FIELDS) - set(rows[0].keys() if rows else MANIFEST_FIELDS)
    if missing:
        raise ManifestError(f"manifest.csv lacks columns {sorted(missing)}")
    return rows


def load_dataset(root, size: int | None = None) -> list[LabeledSample]:
    """Load a synthetic or real dataset laid out like :func:`write_dataset`.

    Real photographs can be brought to a common square ``size`` here; ground
    truth columns may be empty for real data.
    """
    from PIL import Image

    root = Path(root)
    out = []
    for row in read_manifest(root):
        with Image.open(root / row["path"]) as im:
            im = im.convert("RGB")
            if size is not None and im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            img = np.asarray(im, dtype=np.float32) / 255.0
        name = Path(row["path"]).stem
        copy = int(name.rsplit("_", 1)[-1]) if name.rsplit("_", 1)[-1].isdigit() else 0
        ratio = float(row["ratio_y_true"]) if row["ratio_y_true"] not in ("", None) else float("nan")
        theta = float(row["theta_true"]) if row["theta_true"] not in ("", None) else float("nan")
        out.append(LabeledSample(img, int(row["class_id"]), RotationLabel(row["rotation_label"]),
                                 (int(row["row"]), int(row["col"])), theta, ratio, ratio, row["split"], copy))
    return out
