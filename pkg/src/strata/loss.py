"""Training losses: occupancy MAE, pixel entropy and elevation likelihood."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import entr

from .errors import NumericalError
from .raster import OccupancyRaster

ENTROPY_CLAMP = 1e-7


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.2  # entropy weight
    lam: float = 1.0  # elevation likelihood weight

    def __post_init__(self):
        if self.alpha < 0 or self.lam < 0:
            raise ValueError("loss weights must be nonnegative")


def data_loss(pred, truth) -> tuple[float, np.ndarray]:
    """Mean absolute error over the three strata and its subgradient (0 at equality)."""
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(truth, dtype=np.float64)
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


def binary_entropy(o: np.ndarray) -> np.ndarray:
    """Entropy in nats; exactly 0 at o = 0 and o = 1."""
    o = np.clip(o, 0.0, 1.0)
    return entr(o) + entr(1.0 - o)


def entropy_loss(rasters: list[OccupancyRaster]) -> tuple[float, list[np.ndarray]]:
    """Mean binary entropy over the in-disk pixels of all rasters, with per-pixel gradients."""
    n = sum(int(r.mask.sum()) for r in rasters)
    total = 0.0
    grads = []
    for r in rasters:
        o = r.values
        total += float(binary_entropy(o[r.mask]).sum())
        inside = (o > ENTROPY_CLAMP) & (o < 1.0 - ENTROPY_CLAMP) & r.mask
        oc = np.clip(o, ENTROPY_CLAMP, 1.0 - ENTROPY_CLAMP)
        grads.append(np.where(inside, np.log1p(-oc) - np.log(oc), 0.0) / n)
    return total / n, grads


def total_loss(data: float, entropy: float, likelihood: float, cfg: LossConfig = LossConfig()) -> float:
    value = data + cfg.alpha * entropy + cfg.lam * likelihood
    if not math.isfinite(value):
        raise NumericalError("non-finite loss")
    return value
