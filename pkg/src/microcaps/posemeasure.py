"""Board pose from its left and right edges.

Each image row contributes the first and last horizontal-gradient peak as
left/right edge candidates. The rows form the two outer boundary chains of a
convex quadrilateral; a chain that bends is cut where two lines fit it best
and the longer piece is taken as the board side, which keeps top/bottom-edge
rows of a rotated board out of the fit.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import RING_ORDER, ROTATION_ORDER, RotationLabel, ring_of

MIN_SUPPORT = 10
SIGN_AGREEMENT = 0.8
REJECT_FLOOR = 0.5  # px; residuals below this are never outliers
SPLIT_RMS = 1.0  # px; chains fitting one line this well are not split
SPLIT_MIN = 4


class DetectionError(RuntimeError):
    def __init__(self, sides: tuple[str, ...], reason: str = ""):
        self.sides = tuple(sides)
        super().__init__(f"edge detection failed on {' and '.join(self.sides)} side(s){': ' + reason if reason else ''}")


class DegenerateGeometryError(RuntimeError):
    pass


@dataclass(frozen=True)
class EdgeLine:
    side: str
    point: tuple[float, float]
    direction: tuple[float, float]  # unit length, pointing up the image (bottom to top)
    support: int
    residual: float
    row_span: tuple[float, float]  # lowest and highest inlier row (min y, max y)

    @property
    def slope(self) -> float:
        """dx/dy of the line."""
        return self.direction[0] / self.direction[1]

    def x_at(self, y: float) -> float:
        return self.point[0] + self.slope * (y - self.point[1])


def grayscale(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    return img.mean(axis=-1) if img.ndim == 3 else img


def _row_peaks(gray: np.ndarray, threshold: float):
    """First and last above-threshold |d/dx| peak per row, with sub-pixel offsets."""
    g = np.zeros_like(gray)
    g[:, 1:-1] = 0.5 * (gray[:, 2:] - gray[:, :-2])
    a = np.abs(g)
    top = a.max()
    if top <= 0:
        return None
    thr = threshold * top
    peak = np.zeros_like(a, dtype=bool)
    peak[:, 1:-1] = (a[:, 1:-1] >= a[:, :-2]) & (a[:, 1:-1] > a[:, 2:]) & (a[:, 1:-1] >= thr)
    left, right = [], []
    for y in range(gray.shape[0]):
        xs = np.flatnonzero(peak[y])
        if xs.size < 2:
            continue
        for x, out in ((xs[0], left), (xs[-1], right)):
            l, c, r = a[y, x - 1], a[y, x], a[y, x + 1]
            den = l - 2 * c + r
            off = 0.5 * (l - r) / den if den != 0 else 0.0
            out.append((x + off, float(y), np.sign(g[y, x])))
    return np.array(left).reshape(-1, 3), np.array(right).reshape(-1, 3)


def _fit_line(pts: np.ndarray):
    y = pts[:, 1]
    x = pts[:, 0]
    a, b = np.polyfit(y, x, 1)
    res = np.abs(x - (a * y + b)) / math.sqrt(1 + a * a)
    return a, b, res


def _segment_sse(x: np.ndarray, y: np.ndarray, i: np.ndarray, j: np.ndarray) -> np.ndarray:
    """Least-squares x-on-y residual sum of squares of points [i, j) for index arrays."""
    c = [np.concatenate([[0.0], np.cumsum(v)]) for v in (np.ones_like(x), y, x, y * y, x * y, x * x)]
    n, sy, sx, syy, sxy, sxx = (cc[j] - cc[i] for cc in c)
    vyy = syy - sy * sy / n
    vxy = sxy - sx * sy / n
    vxx = sxx - sx * sx / n
    with np.errstate(divide="ignore", invalid="ignore"):
        sse = np.where(vyy > 0, vxx - vxy * vxy / vyy, vxx)
    return np.maximum(sse, 0.0)


def _side_chain(pts: np.ndarray) -> np.ndarray:
    """Rows belonging to the board side.

    A boundary chain may run along a top or bottom edge before turning onto
    the side; when one line explains the chain poorly, the best two-piece
    split is found and its longer piece kept.
    """
    n = len(pts)
    x, y = pts[:, 0], pts[:, 1]
    whole = _segment_sse(x, y, np.array([0]), np.array([n]))[0]
    if n < 2 * SPLIT_MIN or whole / n <= SPLIT_RMS**2:
        return pts
    ks = np.arange(SPLIT_MIN, n - SPLIT_MIN + 1)
    total = _segment_sse(x, y, np.zeros_like(ks), ks) + _segment_sse(x, y, ks, np.full_like(ks, n))
    k = int(ks[np.argmin(total)])
    return pts[:k] if k >= n - k else pts[k:]


def _fit_side(pts: np.ndarray, side: str) -> EdgeLine:
    if len(pts) < MIN_SUPPORT:
        raise DetectionError((side,), f"only {len(pts)} edge points")
    chain = _side_chain(pts)
    if len(chain) < MIN_SUPPORT:
        raise DetectionError((side,), "boundary chain too short")
    a, b, res = _fit_line(chain)
    sigma = math.sqrt(np.mean(res**2))
    keep = res <= max(2 * sigma, REJECT_FLOOR)
    inliers = chain[keep]
    if len(inliers) < MIN_SUPPORT:
        raise DetectionError((side,), "too few inliers")
    a, b, res = _fit_line(inliers)
    signs = inliers[:, 2]
    agreement = max(np.mean(signs > 0), np.mean(signs < 0))
    if agreement < SIGN_AGREEMENT:
        raise DetectionError((side,), "edge polarity is inconsistent")
    norm = math.sqrt(1 + a * a)
    ym = float(inliers[:, 1].mean())
    return EdgeLine(
        side=side,
        point=(a * ym + b, ym),
        direction=(-a / norm, -1 / norm),
        support=int(len(inliers)),
        residual=float(math.sqrt(np.mean(res**2))),
        row_span=(float(inliers[:, 1].min()), float(inliers[:, 1].max())),
    )


def detect_side_edges(image: np.ndarray, gradient_threshold: float = 0.3) -> tuple[EdgeLine, EdgeLine]:
    """Fit the left and right board edges; raises :class:`DetectionError` naming failed sides."""
    peaks = _row_peaks(grayscale(image), gradient_threshold)
    if peaks is None:
        raise DetectionError(("left", "right"), "image has no horizontal gradient")
    lines, failed = {}, []
    for side, pts in zip(("left", "right"), peaks):
        try:
            lines[side] = _fit_side(pts, side)
        except DetectionError:
            failed.append(side)
    if failed:
        raise DetectionError(tuple(failed))
    return lines["left"], lines["right"]


def rotation_from_edge(edge: EdgeLine) -> float:
    """Signed angle (degrees) of an edge from vertical; positive for left rotations."""
    dx, dy = edge.direction
    return math.degrees(math.atan2(dx, -dy))


def measure_rotation(image: np.ndarray, gradient_threshold: float = 0.3) -> float:
    left, _ = detect_side_edges(image, gradient_threshold)
    return rotation_from_edge(left)


def ratio_from_edges(left: EdgeLine, right: EdgeLine) -> float:
    y_top = max(left.row_span[0], right.row_span[0])
    y_bot = min(left.row_span[1], right.row_span[1])
    if y_bot <= y_top:
        raise DegenerateGeometryError("left and right edges share no rows")
    w_top = right.x_at(y_top) - left.x_at(y_top)
    w_bot = right.x_at(y_bot) - left.x_at(y_bot)
    if w_top < 1.0:
        raise DegenerateGeometryError(f"top width {w_top:.3f}px is degenerate")
    return (w_bot - w_top) / w_top


def measure_perspective_ratio(image: np.ndarray, gradient_threshold: float = 0.3) -> float:
    """(bottom width - top width) / top width between the fitted side edges."""
    return ratio_from_edges(*detect_side_edges(image, gradient_threshold))


@dataclass(frozen=True)
class PoseReading:
    path: str
    theta: float
    ratio: float
    status: str


def measure(image: np.ndarray, path: str = "", gradient_threshold: float = 0.3) -> PoseReading:
    """Never raises on bad images; the failure is reported in ``status``."""
    try:
        left, right = detect_side_edges(image, gradient_threshold)
    except DetectionError as exc:
        return PoseReading(path, math.nan, math.nan, "fail_" + "_".join(exc.sides))
    theta = rotation_from_edge(left)
    try:
        ratio = ratio_from_edges(left, right)
    except DegenerateGeometryError:
        return PoseReading(path, theta, math.nan, "degenerate")
    return PoseReading(path, theta, ratio, "ok")


# ---------------------------------------------------------------------------
# batch mode

REPORT_FIELDS = ["path", "theta_measured", "ratio_measured", "detect_status"]
AGGREGATE_FIELDS = ["group", "label", "n", "min", "mean", "sd", "max"]


@dataclass(frozen=True)
class AggregateRow:
    group: str  # "rotation" (|theta| degrees) or "perspective" (|ratio| percent)
    label: str
    n: int
    min: float
    mean: float
    sd: float
    max: float


def _stats(group: str, label: str, values) -> AggregateRow:
    v = np.abs(np.asarray([x for x in values if np.isfinite(x)], dtype=np.float64))
    if v.size == 0:
        return AggregateRow(group, label, 0, math.nan, math.nan, math.nan, math.nan)
    sd = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return AggregateRow(group, label, int(v.size), float(v.min()), float(v.mean()), sd, float(v.max()))


def aggregate(readings: list[PoseReading], rotation_labels, grid_positions) -> list[AggregateRow]:
    """Per-rotation-label |theta| and per-ring |ratio| (percent) summaries, in table order."""
    rows = []
    labels = [RotationLabel(r) for r in rotation_labels]
    for lab in ROTATION_ORDER:
        rows.append(_stats("rotation", lab.value, [r.theta for r, l in zip(readings, labels) if l is lab]))
    rings = [ring_of(*g) for g in grid_positions]
    for ring in RING_ORDER:
        rows.append(_stats("perspective", ring.value, [100 * r.ratio for r, g in zip(readings, rings) if g is ring]))
    return rows


def measure_dataset(root, out_dir=None, gradient_threshold: float = 0.3):
    """Measure every image listed in ``root/manifest.csv``.

    Writes ``pose_report.csv`` and ``pose_aggregate.csv`` into ``out_dir``
    (the current directory by default; ``root`` itself is never written) and
    returns (readings, aggregate rows).
    """
    from PIL import Image

    from .synthgen import read_manifest

    root = Path(root)
    rows = read_manifest(root)
    readings = []
    for row in rows:
        with Image.open(root / row["path"]) as im:
            img = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        readings.append(measure(img, row["path"], gradient_threshold))
    agg = aggregate(readings, [r["rotation_label"] for r in rows], [(int(r["row"]), int(r["col"])) for r in rows])
    out = Path(out_dir) if out_dir is not None else Path.cwd()
    out.mkdir(parents=True, exist_ok=True)
    write_report(readings, out / "pose_report.csv")
    write_aggregate(agg, out / "pose_aggregate.csv")
    return readings, agg


def write_report(readings: list[PoseReading], path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(REPORT_FIELDS)
        for r in readings:
            wr.writerow([r.path, f"{r.theta:.6f}", f"{r.ratio:.6f}", r.status])


def write_aggregate(rows: list[AggregateRow], path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(AGGREGATE_FIELDS)
        for r in rows:
            wr.writerow([r.group, r.label, r.n, f"{r.min:.6f}", f"{r.mean:.6f}", f"{r.sd:.6f}", f"{r.max:.6f}"])


def format_aggregate(rows: list[AggregateRow]) -> str:
    lines = [f"{'Position':<14}{'Min':>10}{'Mean':>10}{'S.D.':>10}{'Max':>10}"]
    group = None
    for r in rows:
        if r.group != group:
            group = r.group
            lines.append("-- angles (deg) --" if group == "rotation" else "-- width ratios (%) --")
        lines.append(f"{r.label:<14}{r.min:>10.3f}{r.mean:>10.3f}{r.sd:>10.4f}{r.max:>10.3f}")
    return "\n".join(lines)
