"""Plot files, elevation normalization, feature scaling and subsampling.

A plot file is UTF-8 text. The first line is ``plot_id o_L o_M o_H`` where the
three labels may each be ``-`` when the plot is unannotated. Every following
line holds one point::

    x y z r g b nir intensity return_number

Coordinates are absolute meters; the loader keeps them verbatim and exposes
plot-centered horizontal coordinates through :attr:`Plot.xy`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import PlotFormatError

logger = logging.getLogger(__name__)

RAW_FEATURES = ("x", "y", "z", "r", "g", "b", "nir", "intensity", "return_number")
FEATURES = RAW_FEATURES + ("z_norm",)
N_FEATURES = len(FEATURES)
DEFAULT_RADIUS = 10.0
DEFAULT_SUBSAMPLE = 4096

# slack for float noise when checking the plot radius
_RADIUS_SLACK = 1e-6


def _circle_two(a, b):
    c = (a + b) / 2.0
    return c, float(np.hypot(*(a - c)))


def _circle_three(a, b, c):
    ax, ay = a
    bx, by = b
    cx, cy = c
    d = 2.0 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
    if abs(d) < 1e-18:
        # collinear: the widest pair spans the circle
        pairs = [(a, b), (a, c), (b, c)]
        return max((_circle_two(p, q) for p, q in pairs), key=lambda t: t[1])
    a2, b2, c2 = ax * ax + ay * ay, bx * bx + by * by, cx * cx + cy * cy
    ux = (a2 * (by - cy) + b2 * (cy - ay) + c2 * (ay - by)) / d
    uy = (a2 * (cx - bx) + b2 * (ax - cx) + c2 * (bx - ax)) / d
    center = np.array([ux, uy])
    return center, float(np.hypot(*(a - center)))


def _inside(circle, p, eps=1e-10):
    center, r = circle
    return float(np.hypot(*(p - center))) <= r + eps


def enclosing_circle(xy: np.ndarray) -> tuple[np.ndarray, float]:
    """Smallest circle containing all points (iterative Welzl on the hull)."""
    pts = np.unique(np.asarray(xy, dtype=np.float64), axis=0)
    if len(pts) == 1:
        return pts[0].copy(), 0.0
    # circumcenters square the coordinates: work near the origin, not in UTM meters
    offset = pts.mean(axis=0)
    pts = pts - offset
    if len(pts) > 3:
        try:
            from scipy.spatial import ConvexHull

            pts = pts[ConvexHull(pts).vertices]
        except Exception:  # degenerate (collinear) input, keep all points
            pass
    # fixed shuffle keeps the expected linear running time deterministic
    pts = pts[np.random.default_rng(0).permutation(len(pts))]
    circle = (pts[0], 0.0)
    for i in range(1, len(pts)):
        p = pts[i]
        if _inside(circle, p):
            continue
        circle = (p, 0.0)
        for j in range(i):
            q = pts[j]
            if _inside(circle, q):
                continue
            circle = _circle_two(p, q)
            for k in range(j):
                if not _inside(circle, pts[k]):
                    circle = _circle_three(p, q, pts[k])
    return np.asarray(circle[0], dtype=np.float64) + offset, circle[1]


@dataclass
class Plot:
    """One circular study plot.

    ``points`` is an (N, 9) float array in :data:`RAW_FEATURES` order.
    ``center`` is the horizontal plot center; it defaults to the center of the
    smallest circle enclosing the points.
    """

    plot_id: str
    points: np.ndarray
    radius: float = DEFAULT_RADIUS
    labels: tuple[float, float, float] | None = None
    z_norm: np.ndarray | None = None
    center: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != len(RAW_FEATURES):
            raise PlotFormatError(f"points must be (N, {len(RAW_FEATURES)}), got {self.points.shape}")
        if len(self.points) < 1:
            raise PlotFormatError("plot has no points")
        if not np.all(np.isfinite(self.points)):
            raise PlotFormatError("non-finite point value")
        if np.any(self.points[:, 8] < 1):
            raise PlotFormatError("return_number must be >= 1")
        if self.labels is not None:
            self.labels = tuple(float(v) for v in self.labels)
            if len(self.labels) != 3:
                raise PlotFormatError("labels must be a triple")
            for v in self.labels:
                if not 0.0 <= v <= 1.0:
                    raise PlotFormatError(f"label out of [0,1]: {v}")
        if self.center is None:
            self.center, _ = enclosing_circle(self.points[:, :2])
        self.center = np.asarray(self.center, dtype=np.float64)

    def __len__(self):
        return len(self.points)

    @property
    def xy(self) -> np.ndarray:
        """Plot-centered horizontal coordinates, (N, 2)."""
        return self.points[:, :2] - self.center

    @property
    def z(self) -> np.ndarray:
        return self.points[:, 2]

    def with_z_norm(self, z_norm: np.ndarray) -> Plot:
        return Plot(self.plot_id, self.points, self.radius, self.labels, z_norm, self.center)


def _parse_float(tok: str, line: int) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise PlotFormatError(f"non-numeric field {tok!r}", line) from None
    if not math.isfinite(v):
        raise PlotFormatError(f"non-finite field {tok!r}", line)
    return v


def parse_plot(text: str, radius: float = DEFAULT_RADIUS) -> Plot:
    """Parse the canonical plot text format."""
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise PlotFormatError("missing header", 1)
    head = lines[0].split()
    if len(head) != 4:
        raise PlotFormatError("header must be 'plot_id o_L o_M o_H'", 1)
    plot_id, raw_labels = head[0], head[1:]
    if all(tok == "-" for tok in raw_labels):
        labels = None
    elif any(tok == "-" for tok in raw_labels):
        raise PlotFormatError("labels must be all present or all '-'", 1)
    else:
        labels = tuple(_parse_float(tok, 1) for tok in raw_labels)
        for v in labels:
            if not 0.0 <= v <= 1.0:
                raise PlotFormatError(f"label out of [0,1]: {v}", 1)

    rows = []
    line_numbers = []
    for lineno, line in enumerate(lines[1:], start=2):
        toks = line.split()
        if not toks:
            continue
        if len(toks) != len(RAW_FEATURES):
            raise PlotFormatError(f"expected {len(RAW_FEATURES)} fields, got {len(toks)}", lineno)
        row = [_parse_float(t, lineno) for t in toks]
        if row[8] < 1:
            raise PlotFormatError("return_number must be >= 1", lineno)
        rows.append(row)
        line_numbers.append(lineno)
    if not rows:
        raise PlotFormatError("plot has no points", len(lines))

    plot = Plot(plot_id, np.array(rows), radius=radius, labels=labels)
    dist = np.hypot(*plot.xy.T)
    outside = np.flatnonzero(dist > radius + _RADIUS_SLACK)
    if len(outside):
        i = outside[0]
        raise PlotFormatError(f"point {dist[i]:.3f} m from plot center exceeds radius {radius}", line_numbers[i])
    return plot


def _fmt(v: float) -> str:
    s = f"{v:.6f}"
    return "0.000000" if s == "-0.000000" else s


def write_plot(plot: Plot) -> str:
    """Serialize a plot; values carry 6 fractional digits."""
    if plot.labels is None:
        head = f"{plot.plot_id} - - -"
    else:
        head = " ".join([plot.plot_id] + [_fmt(v) for v in plot.labels])
    out = [head]
    for row in plot.points:
        out.append(" ".join(_fmt(v) for v in row))
    return "\n".join(out) + "\n"


def load_plot(path: str | Path, radius: float = DEFAULT_RADIUS) -> Plot:
    path = Path(path)
    try:
        return parse_plot(path.read_text(encoding="utf-8"), radius=radius)
    except PlotFormatError as exc:
        raise PlotFormatError(f"{path}: {exc}") from None


def save_plot(plot: Plot, path: str | Path) -> None:
    Path(path).write_text(write_plot(plot), encoding="utf-8")


def load_dataset(directory: str | Path, radius: float = DEFAULT_RADIUS) -> list[Plot]:
    """Load every ``*.txt`` plot file in a directory, sorted by name."""
    files = sorted(p for p in Path(directory).glob("*.txt") if not p.name.endswith(".truth.txt"))
    return [load_plot(p, radius=radius) for p in files]


# ---------------------------------------------------------------------------
# elevation normalization


class GridHash:
    """Uniform 2-D grid over points with square cells of side ``cell``."""

    def __init__(self, xy: np.ndarray, cell: float):
        if cell <= 0:
            raise ValueError("cell size must be positive")
        self.xy = np.asarray(xy, dtype=np.float64)
        self.cell = float(cell)
        ij = np.floor((self.xy - self.xy.min(axis=0)) / self.cell).astype(np.int64)
        self.ij = ij
        self.shape = tuple(ij.max(axis=0) + 1)
        key = ij[:, 0] * self.shape[1] + ij[:, 1]
        self.order = np.argsort(key, kind="stable")
        n_cells = self.shape[0] * self.shape[1]
        self.count = np.bincount(key, minlength=n_cells)
        self.start = np.concatenate(([0], np.cumsum(self.count)[:-1]))

    def neighbor_reduce_min(self, values: np.ndarray, radius: float) -> np.ndarray:
        """For each point, min of ``values`` over points within ``radius`` (inclusive).

        ``radius`` must not exceed the cell size, so the 3x3 block of cells
        around a point covers its neighborhood.
        """
        if radius > self.cell + 1e-12:
            raise ValueError("radius larger than grid cell")
        values = np.asarray(values, dtype=np.float64)
        out = values.copy()
        r2 = radius * radius
        ni, nj = self.shape
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                ci = self.ij[:, 0] + di
                cj = self.ij[:, 1] + dj
                valid = (ci >= 0) & (ci < ni) & (cj >= 0) & (cj < nj)
                q = np.flatnonzero(valid)
                cell = ci[q] * nj + cj[q]
                cnt = self.count[cell]
                st = self.start[cell]
                for k in range(int(cnt.max(initial=0))):
                    has = cnt > k
                    qi = q[has]
                    cand = self.order[st[has] + k]
                    d = self.xy[cand] - self.xy[qi]
                    near = np.einsum("ij,ij->i", d, d) <= r2
                    np.minimum.at(out, qi[near], values[cand[near]])
        return out


def neighborhood_min_bruteforce(xy: np.ndarray, values: np.ndarray, radius: float) -> np.ndarray:
    """O(N^2) reference for :meth:`GridHash.neighbor_reduce_min`."""
    d = xy[:, None, :] - xy[None, :, :]
    near = np.einsum("ijk,ijk->ij", d, d) <= radius * radius
    return np.where(near, values[None, :], np.inf).min(axis=1)


def normalize_elevation(plot: Plot, neighborhood_radius: float = 0.5) -> Plot:
    """Height of each point above the lowest point of its vertical cylinder."""
    grid = GridHash(plot.xy, neighborhood_radius)
    ground = grid.neighbor_reduce_min(plot.z, neighborhood_radius)
    return plot.with_z_norm(plot.z - ground)


# ---------------------------------------------------------------------------
# features


def raw_features(plot: Plot) -> np.ndarray:
    """(N, 10) unscaled features; x and y are plot-centered."""
    if plot.z_norm is None:
        raise ValueError(f"plot {plot.plot_id} has no z_norm; run normalize_elevation first")
    feats = np.empty((len(plot), N_FEATURES))
    feats[:, :9] = plot.points
    feats[:, :2] = plot.xy
    feats[:, 9] = plot.z_norm
    return feats


@dataclass(frozen=True)
class FeatureScaler:
    """Per-feature min-max scaling fitted over a set of plots."""

    mins: np.ndarray
    maxs: np.ndarray

    def __post_init__(self):
        if np.any(self.maxs < self.mins):
            raise ValueError("scaler max < min")

    def transform(self, feats: np.ndarray) -> tuple[np.ndarray, int]:
        """Scale to [0,1]; returns the scaled matrix and the number of clamped values."""
        span = self.maxs - self.mins
        safe = np.where(span > 0, span, 1.0)
        out = np.where(span > 0, (feats - self.mins) / safe, 0.0)
        n_clamped = int(np.count_nonzero((out < 0.0) | (out > 1.0)))
        return np.clip(out, 0.0, 1.0), n_clamped

    def to_text(self) -> str:
        lines = ["feature min max"]
        for name, lo, hi in zip(FEATURES, self.mins, self.maxs):
            lines.append(f"{name} {float(lo)!r} {float(hi)!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> FeatureScaler:
        rows = [ln.split() for ln in text.splitlines()[1:] if ln.strip()]
        names = tuple(r[0] for r in rows)
        if names != FEATURES:
            raise PlotFormatError(f"scaler features {names} do not match {FEATURES}")
        return cls(np.array([float(r[1]) for r in rows]), np.array([float(r[2]) for r in rows]))


def fit_scaler(dataset: list[Plot]) -> FeatureScaler:
    if not dataset:
        raise ValueError("cannot fit a scaler on an empty dataset")
    mins = np.full(N_FEATURES, np.inf)
    maxs = np.full(N_FEATURES, -np.inf)
    for plot in dataset:
        f = raw_features(plot)
        mins = np.minimum(mins, f.min(axis=0))
        maxs = np.maximum(maxs, f.max(axis=0))
    return FeatureScaler(mins, maxs)


def apply_scaler(scaler: FeatureScaler, plot: Plot) -> np.ndarray:
    """Scaled (N, 10) feature matrix in [0,1]."""
    feats, n_clamped = scaler.transform(raw_features(plot))
    if n_clamped:
        logger.debug("plot %s: %d feature values clamped", plot.plot_id, n_clamped)
    return feats


def subsample(plot: Plot | int, n: int = DEFAULT_SUBSAMPLE, seed: int = 0) -> np.ndarray:
    """Fixed-size index sample; pads with replacement when the plot is small."""
    if n < 1:
        raise ValueError("subsample size must be >= 1")
    total = plot if isinstance(plot, int) else len(plot)
    rng = np.random.default_rng(seed)
    if total >= n:
        return rng.choice(total, size=n, replace=False)
    pad = rng.choice(total, size=n - total, replace=True)
    return rng.permutation(np.concatenate([np.arange(total), pad]))
