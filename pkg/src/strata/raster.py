"""Per-stratum occupancy rasters from pointwise class probabilities.

The plot square [-radius, radius]^2 is cut into K x K pixels. A pixel's
occupancy for a stratum is the largest probability of that stratum among the
points falling in the pixel; the plot-level occupancy is the mean over pixels
whose centers lie inside the plot disk. Row ``i`` of a raster spans increasing
y, column ``j`` increasing x.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

STRATA = ("L", "M", "H")
# probability column of each stratum; column 0 is bare soil
STRATUM_COLUMN = {"L": 1, "M": 2, "H": 3}

# Figure-style palette: bare soil is brown, strata tint green/blue/red
SOIL_RGB = np.array([140.0, 100.0, 60.0])
OUTSIDE_RGB = np.array([255.0, 255.0, 255.0])


@dataclass
class OccupancyRaster:
    stratum: str
    values: np.ndarray  # (K, K) pixel occupancies, 0 outside the disk
    mask: np.ndarray  # (K, K) bool, pixel center inside the plot disk
    pixel: np.ndarray  # (N,) flat pixel index of each point
    argmax: np.ndarray  # (K, K) index of the point realizing the max, -1 if none

    @property
    def K(self) -> int:
        return self.values.shape[0]

    def members(self, i: int, j: int) -> np.ndarray:
        """Indices of the points whose projection falls in pixel (i, j)."""
        if not self.mask[i, j]:
            return np.empty(0, dtype=np.int64)
        return np.flatnonzero(self.pixel == i * self.K + j)


def disk_mask(K: int, radius: float) -> np.ndarray:
    h = 2.0 * radius / K
    c = -radius + h * (np.arange(K) + 0.5)
    return c[:, None] ** 2 + c[None, :] ** 2 <= radius * radius


def pixel_index(xy: np.ndarray, K: int, radius: float) -> np.ndarray:
    """Flat pixel index (row * K + col) per point; far edges are closed."""
    xy = np.asarray(xy, dtype=np.float64)
    if np.any(np.abs(xy) > radius):
        raise ValueError("point outside the plot square")
    h = 2.0 * radius / K
    ij = np.minimum(np.floor((xy + radius) / h).astype(np.int64), K - 1)
    return ij[:, 1] * K + ij[:, 0]


def project(probs: np.ndarray, xy: np.ndarray, K: int = 32, radius: float = 10.0) -> list[OccupancyRaster]:
    """Rasters for the lower, medium and higher strata (per-pixel max)."""
    if K < 1:
        raise ValueError("K must be >= 1")
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[1] != 4 or len(probs) != len(xy):
        raise ValueError("probs must be (N, 4) matching xy")
    pix = pixel_index(xy, K, radius)
    mask = disk_mask(K, radius)
    sel = np.flatnonzero(mask.ravel()[pix])
    rasters = []
    for s in STRATA:
        vals = probs[sel, STRATUM_COLUMN[s]]
        # per pixel: highest value first, lowest point index among ties
        order = np.lexsort((sel, -vals, pix[sel]))
        sp = pix[sel][order]
        first = np.ones(len(sp), dtype=bool)
        first[1:] = sp[1:] != sp[:-1]
        winners = sel[order[first]]
        values = np.zeros(K * K)
        argmax = np.full(K * K, -1, dtype=np.int64)
        values[sp[first]] = probs[winners, STRATUM_COLUMN[s]]
        argmax[sp[first]] = winners
        rasters.append(OccupancyRaster(s, values.reshape(K, K), mask, pix, argmax.reshape(K, K)))
    return rasters


def aggregate(raster: OccupancyRaster) -> tuple[float, np.ndarray]:
    """Mean in-disk pixel occupancy and its gradient w.r.t. the pixels."""
    n = int(raster.mask.sum())
    grad = raster.mask / n
    return float(raster.values[raster.mask].sum() / n), grad


def occupancy(rasters: list[OccupancyRaster]) -> np.ndarray:
    return np.array([aggregate(r)[0] for r in rasters])


def raster_backward(rasters: list[OccupancyRaster], d_pixels: list[np.ndarray], n_points: int | None = None) -> np.ndarray:
    """Route pixel gradients to the probability entry that produced each pixel."""
    if len(d_pixels) != len(rasters):
        raise ValueError("one pixel gradient per raster expected")
    n = len(rasters[0].pixel) if n_points is None else n_points
    out = np.zeros((n, 4))
    for r, d in zip(rasters, d_pixels):
        d = np.asarray(d, dtype=np.float64)
        if d.shape != r.values.shape:
            raise ValueError(f"pixel gradient shape {d.shape} != raster shape {r.values.shape}")
        hit = (r.argmax >= 0) & r.mask
        out[r.argmax[hit], STRATUM_COLUMN[r.stratum]] += d[hit]
    return out


# ---------------------------------------------------------------------------
# export


def _image_rows(a: np.ndarray) -> np.ndarray:
    # images store the top row first; the top of the plot is +y
    return a[::-1]


def to_pgm(raster: OccupancyRaster) -> str:
    """Plain (P2) 8-bit greymap, occupancy scaled to 0..255."""
    img = _image_rows(np.rint(np.clip(raster.values, 0, 1) * 255).astype(int))
    lines = ["P2", f"# stratum {raster.stratum}", f"{raster.K} {raster.K}", "255"]
    lines += [" ".join(str(v) for v in row) for row in img]
    return "\n".join(lines) + "\n"


def composite_rgb(rasters: list[OccupancyRaster]) -> np.ndarray:
    """(K, K, 3) uint8 map: green=lower, blue=medium, red=higher over brown soil."""
    by = {r.stratum: np.clip(r.values, 0, 1) for r in rasters}
    tint = np.stack([by["H"], by["L"], by["M"]], axis=-1) * 255.0
    cover = np.maximum(np.maximum(by["L"], by["M"]), by["H"])[..., None]
    rgb = (1.0 - cover) * SOIL_RGB + cover * tint
    rgb = np.where(rasters[0].mask[..., None], rgb, OUTSIDE_RGB)
    return _image_rows(np.rint(np.clip(rgb, 0, 255)).astype(np.uint8))


def to_ppm(rasters: list[OccupancyRaster]) -> str:
    rgb = composite_rgb(rasters)
    K = rgb.shape[0]
    lines = ["P3", f"{K} {K}", "255"]
    lines += [" ".join(f"{r} {g} {b}" for r, g, b in row) for row in rgb]
    return "\n".join(lines) + "\n"


def to_csv(rasters: list[OccupancyRaster]) -> str:
    """Long-format CSV: stratum,row,col,in_disk,occupancy."""
    lines = ["stratum,row,col,in_disk,occupancy"]
    for r in rasters:
        for i in range(r.K):
            for j in range(r.K):
                lines.append(f"{r.stratum},{i},{j},{int(r.mask[i, j])},{float(r.values[i, j])!r}")
    return "\n".join(lines) + "\n"


def export(rasters: list[OccupancyRaster], out_dir: str | Path, stem: str) -> list[Path]:
    """Write the three PGMs, the PPM composite and the CSV; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for r in rasters:
        p = out_dir / f"{stem}_{r.stratum}.pgm"
        p.write_text(to_pgm(r))
        paths.append(p)
    p = out_dir / f"{stem}.ppm"
    p.write_text(to_ppm(rasters))
    paths.append(p)
    p = out_dir / f"{stem}.csv"
    p.write_text(to_csv(rasters))
    paths.append(p)
    return paths
