"""Synthetic plots with exactly known stratum occupancies.

Scenes are made of disk-shaped grass patches, bushes and tree canopies inside a
circular plot. Occupancy of a stratum is the area of the union of its disks
clipped to the plot, divided by the plot area. It is computed exactly by
integrating along the boundary arcs of the union, and independently by
Monte-Carlo in :func:`oracle_occupancy`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .plotio import DEFAULT_RADIUS, Plot, normalize_elevation, save_plot

SOIL, LOWER, MEDIUM, HIGHER = 0, 1, 2, 3
CLASS_NAMES = ("soil", "lower", "medium", "higher")

Disk = tuple[float, float, float]  # (cx, cy, radius), plot-centered meters

# mean reflectance (r, g, b, nir) and laser intensity per surface type
_SURFACE = {
    "soil": ((0.50, 0.42, 0.32, 0.33), 0.35),
    "grass": ((0.16, 0.46, 0.13, 0.66), 0.55),
    "bush": ((0.12, 0.36, 0.10, 0.58), 0.45),
    "canopy": ((0.10, 0.30, 0.11, 0.62), 0.40),
    "trunk": ((0.34, 0.25, 0.18, 0.30), 0.30),
}


@dataclass
class SceneSpec:
    seed: int = 0
    grass_patches: list[Disk] = field(default_factory=list)
    bushes: list[Disk] = field(default_factory=list)
    trees: list[Disk] = field(default_factory=list)
    ground_density: float = 10.0  # points / m^2
    bush_density: float = 8.0
    canopy_density: float = 6.0
    noise: float = 0.02  # m
    radius: float = DEFAULT_RADIUS
    origin: tuple[float, float, float] = (652000.0, 6290000.0, 180.0)
    slope: tuple[float, float] = (0.02, -0.01)

    def __post_init__(self):
        for name in ("grass_patches", "bushes", "trees"):
            disks = [tuple(float(v) for v in d) for d in getattr(self, name)]
            for cx, cy, r in disks:
                if r <= 0:
                    raise ValueError(f"{name}: radius must be positive")
                if math.hypot(cx, cy) > self.radius:
                    raise ValueError(f"{name}: center outside the plot")
            setattr(self, name, disks)


@dataclass
class LabeledScene:
    plot: Plot
    classes: np.ndarray  # (N,) int in {SOIL, LOWER, MEDIUM, HIGHER}
    is_trunk: np.ndarray  # (N,) bool
    height: np.ndarray  # true height above terrain, m
    occupancy: tuple[float, float, float]


# ---------------------------------------------------------------------------
# exact footprint areas


def _circle_intersections(c1, r1, c2, r2) -> list[float]:
    dx, dy = c2[0] - c1[0], c2[1] - c1[1]
    d = math.hypot(dx, dy)
    if d == 0.0 or d >= r1 + r2 or d <= abs(r1 - r2):
        return []
    a = (r1 * r1 - r2 * r2 + d * d) / (2.0 * d)
    delta = math.acos(max(-1.0, min(1.0, a / r1)))
    phi = math.atan2(dy, dx)
    return [(phi - delta) % (2 * math.pi), (phi + delta) % (2 * math.pi)]


def _arc_integral(cx, cy, r, a, b) -> float:
    # 1/2 * integral of (x dy - y dx) along the CCW arc a -> b
    return 0.5 * (r * r * (b - a) + r * (cx * (math.sin(b) - math.sin(a)) - cy * (math.cos(b) - math.cos(a))))


def union_area_in_disk(disks: list[Disk], radius: float) -> float:
    """Exact area of (union of ``disks``) intersected with the disk of ``radius`` at the origin."""
    disks = sorted(set((float(x), float(y), float(r)) for x, y, r in disks))
    if not disks:
        return 0.0
    plot = (0.0, 0.0, float(radius))
    circles = disks + [plot]
    area = 0.0
    for i, (cx, cy, r) in enumerate(circles):
        is_plot = i == len(circles) - 1
        cuts = [0.0, 2 * math.pi]
        for j, (ox, oy, orad) in enumerate(circles):
            if j != i:
                cuts.extend(_circle_intersections((cx, cy), r, (ox, oy), orad))
        cuts.sort()
        for a, b in zip(cuts[:-1], cuts[1:]):
            if b - a <= 0.0:
                continue
            m = 0.5 * (a + b)
            px, py = cx + r * math.cos(m), cy + r * math.sin(m)
            if is_plot:
                keep = any(math.hypot(px - x, py - y) < rr for x, y, rr in disks)
            else:
                keep = math.hypot(px, py) <= radius and not any(
                    math.hypot(px - x, py - y) < rr for k, (x, y, rr) in enumerate(disks) if k != i
                )
            if keep:
                area += _arc_integral(cx, cy, r, a, b)
    return area


def true_occupancy(spec: SceneSpec) -> tuple[float, float, float]:
    plot_area = math.pi * spec.radius**2
    return tuple(
        min(1.0, max(0.0, union_area_in_disk(d, spec.radius) / plot_area))
        for d in (spec.grass_patches, spec.bushes, spec.trees)
    )


def oracle_occupancy(spec: SceneSpec, samples: int = 1_000_000, seed: int = 12345) -> tuple[float, float, float]:
    """Monte-Carlo footprint ratios over the plot disk."""
    rng = np.random.default_rng(seed)
    rho = spec.radius * np.sqrt(rng.random(samples))
    theta = 2 * np.pi * rng.random(samples)
    x, y = rho * np.cos(theta), rho * np.sin(theta)
    out = []
    for disks in (spec.grass_patches, spec.bushes, spec.trees):
        hit = np.zeros(samples, dtype=bool)
        for cx, cy, r in disks:
            hit |= (x - cx) ** 2 + (y - cy) ** 2 < r * r
        out.append(float(hit.mean()))
    return tuple(out)


# ---------------------------------------------------------------------------
# point generation


def _in_any(xy: np.ndarray, disks: list[Disk]) -> np.ndarray:
    hit = np.zeros(len(xy), dtype=bool)
    for cx, cy, r in disks:
        hit |= (xy[:, 0] - cx) ** 2 + (xy[:, 1] - cy) ** 2 < r * r
    return hit


def _uniform_disk(rng, n, cx, cy, r):
    rho = r * np.sqrt(rng.random(n))
    theta = 2 * np.pi * rng.random(n)
    return np.column_stack([cx + rho * np.cos(theta), cy + rho * np.sin(theta)])


def _clip_to_plot(xy, radius):
    return xy[np.hypot(xy[:, 0], xy[:, 1]) <= radius]


def generate_plot(spec: SceneSpec, plot_id: str = "synth") -> LabeledScene:
    """Sample a labeled point cloud for ``spec``; deterministic per ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    R = spec.radius
    xy_parts, h_parts, cls_parts, trunk_parts, surf_parts, ret_parts = [], [], [], [], [], []

    def add(xy, h, cls, surface, ret, trunk=False):
        xy_parts.append(xy)
        h_parts.append(h)
        cls_parts.append(np.full(len(xy), cls))
        trunk_parts.append(np.full(len(xy), trunk))
        surf_parts.append(np.full(len(xy), surface, dtype=object))
        ret_parts.append(np.asarray(ret, dtype=float) * np.ones(len(xy)))

    # ground layer covers the whole disk; grass patches carry short vegetation
    n_ground = rng.poisson(spec.ground_density * math.pi * R * R)
    gxy = _uniform_disk(rng, n_ground, 0.0, 0.0, R)
    covered = _in_any(gxy, spec.bushes + spec.trees)
    grass = _in_any(gxy, spec.grass_patches)
    grass_top = rng.uniform(0.2, 0.45, size=len(gxy))
    h = np.where(grass, rng.uniform(0.03, 1.0, size=len(gxy)) * grass_top, np.abs(rng.normal(0.0, spec.noise, len(gxy))))
    ret = np.where(covered, rng.integers(2, 4, size=len(gxy)), 1)
    for mask, cls, surface in ((~grass, SOIL, "soil"), (grass, LOWER, "grass")):
        add(gxy[mask], h[mask], cls, surface, ret[mask])

    for cx, cy, r in spec.bushes:
        top = rng.uniform(0.9, 1.45)
        n = rng.poisson(spec.bush_density * math.pi * r * r)
        bxy = _clip_to_plot(_uniform_disk(rng, n, cx, cy, r), R)
        rel = np.hypot(bxy[:, 0] - cx, bxy[:, 1] - cy) / r
        dome = 0.5 + (top - 0.5) * np.sqrt(np.clip(1.0 - rel**2, 0.0, 1.0))
        bh = 0.5 + rng.random(len(bxy)) ** 0.5 * (dome - 0.5)
        add(bxy, bh, MEDIUM, "bush", 1)

    for cx, cy, r in spec.trees:
        base = rng.uniform(2.0, 3.5)
        top = base + rng.uniform(1.5, 5.0)
        n = rng.poisson(spec.canopy_density * math.pi * r * r)
        txy = _clip_to_plot(_uniform_disk(rng, n, cx, cy, r), R)
        rel = np.hypot(txy[:, 0] - cx, txy[:, 1] - cy) / r
        crown = base + (top - base) * np.sqrt(np.clip(1.0 - rel**2, 0.0, 1.0))
        th = base + 0.1 + rng.random(len(txy)) ** 0.4 * np.maximum(crown - base - 0.1, 0.0)
        add(txy, th, HIGHER, "canopy", rng.integers(1, 3, size=len(txy)))
        n_trunk = int(12 * base)
        trunk_xy = _clip_to_plot(_uniform_disk(rng, n_trunk, cx, cy, 0.15), R)
        add(trunk_xy, rng.uniform(0.0, base, size=len(trunk_xy)), HIGHER, "trunk", 2, trunk=True)

    xy = np.concatenate(xy_parts)
    height = np.concatenate(h_parts)
    classes = np.concatenate(cls_parts).astype(np.int64)
    is_trunk = np.concatenate(trunk_parts).astype(bool)
    surface = np.concatenate(surf_parts)
    returns = np.concatenate(ret_parts)

    n = len(xy)
    color = np.empty((n, 4))
    intensity = np.empty(n)
    for name, (mean, inten) in _SURFACE.items():
        m = surface == name
        color[m] = np.asarray(mean) + rng.normal(0.0, 0.03, size=(m.sum(), 4))
        intensity[m] = inten + rng.normal(0.0, 0.05, size=m.sum())
    color = np.clip(color, 0.0, 1.0)
    intensity = np.clip(intensity, 0.0, 1.0)

    x0, y0, z0 = spec.origin
    terrain = z0 + spec.slope[0] * xy[:, 0] + spec.slope[1] * xy[:, 1]
    points = np.column_stack([xy[:, 0] + x0, xy[:, 1] + y0, terrain + height, color, intensity, returns])
    # round to the file precision so in-memory and reloaded plots are identical
    points = np.round(points, 6)

    occ = true_occupancy(spec)
    plot = normalize_elevation(Plot(plot_id, points, radius=R, labels=tuple(round(v, 6) for v in occ)))
    return LabeledScene(plot=plot, classes=classes, is_trunk=is_trunk, height=height, occupancy=occ)


def random_spec(seed: int, radius: float = DEFAULT_RADIUS, **overrides) -> SceneSpec:
    """Random scene: a few grass patches, bushes and trees."""
    rng = np.random.default_rng([seed, 7919])

    def disks(count, rmin, rmax):
        out = []
        for _ in range(count):
            rho = radius * math.sqrt(rng.random())
            th = 2 * math.pi * rng.random()
            out.append((rho * math.cos(th), rho * math.sin(th), float(rng.uniform(rmin, rmax))))
        return out

    kind = rng.random()
    if kind < 0.05:
        grass = []
    elif kind < 0.1:
        grass = [(0.0, 0.0, radius * 1.2)]
    else:
        grass = disks(int(rng.integers(1, 6)), 1.0, 6.0)
    return SceneSpec(
        seed=seed,
        grass_patches=grass,
        bushes=disks(int(rng.integers(0, 5)), 0.6, 2.5),
        trees=disks(int(rng.integers(0, 4)), 1.5, 4.5),
        radius=radius,
        **overrides,
    )


def synth_dataset(n_plots: int, seed: int = 0, radius: float = DEFAULT_RADIUS, **overrides) -> list[LabeledScene]:
    return [
        generate_plot(random_spec(seed * 100_003 + i, radius, **overrides), plot_id=f"s{seed}_{i:04d}")
        for i in range(n_plots)
    ]


def truth_text(scene: LabeledScene) -> str:
    o = scene.occupancy
    lines = [f"{scene.plot.plot_id} {o[0]:.6f} {o[1]:.6f} {o[2]:.6f}"]
    lines += [f"{c} {int(t)}" for c, t in zip(scene.classes, scene.is_trunk)]
    return "\n".join(lines) + "\n"


def parse_truth(text: str) -> tuple[str, tuple[float, float, float], np.ndarray, np.ndarray]:
    lines = text.splitlines()
    head = lines[0].split()
    rows = np.array([[int(v) for v in ln.split()] for ln in lines[1:] if ln.strip()], dtype=np.int64).reshape(-1, 2)
    return head[0], tuple(float(v) for v in head[1:4]), rows[:, 0], rows[:, 1].astype(bool)


def write_scene(scene: LabeledScene, directory: str | Path) -> Path:
    """Write ``<id>.txt`` and the ``<id>.truth.txt`` sidecar; returns the plot path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{scene.plot.plot_id}.txt"
    save_plot(scene.plot, path)
    (directory / f"{scene.plot.plot_id}.truth.txt").write_text(truth_text(scene), encoding="utf-8")
    return path
