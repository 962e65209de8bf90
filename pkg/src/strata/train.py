"""Weakly-supervised training from plot-level occupancies, and inference.

Per plot: features -> point network -> per-point class probabilities ->
per-stratum rasters (pixel max) -> plot occupancy (pixel mean). The loss is
the occupancy MAE plus pixel entropy plus the elevation likelihood under a
Gamma mixture fitted once on the training elevations.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import gamma, pointnet, raster
from .errors import NumericalError, PlotFormatError
from .loss import LossConfig, data_loss, entropy_loss
from .plotio import DEFAULT_SUBSAMPLE, FeatureScaler, Plot, fit_scaler, normalize_elevation, raw_features, subsample

logger = logging.getLogger(__name__)

BUNDLE_VERSION = 1


@dataclass
class TrainConfig:
    K: int = 32
    batch_size: int = 20
    epochs: int = 100
    lr: float = 1e-3
    seed: int = 0
    subsample: int = DEFAULT_SUBSAMPLE
    loss: LossConfig = field(default_factory=LossConfig)
    val_fraction: float = 0.2
    arch: pointnet.Arch = field(default_factory=pointnet.Arch)
    neighborhood_radius: float = 0.5

    def __post_init__(self):
        if self.K < 1 or self.batch_size < 1 or self.epochs < 1 or self.subsample < 1:
            raise ValueError("K, batch_size, epochs and subsample must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arch"] = json.loads(self.arch.to_json())
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        d["loss"] = LossConfig(**d["loss"])
        a = d["arch"]
        d["arch"] = pointnet.Arch.from_json(json.dumps(a))
        return cls(**d)


@dataclass
class TrainReport:
    l_data: list[float] = field(default_factory=list)
    l_entropy: list[float] = field(default_factory=list)
    l_likelihood: list[float] = field(default_factory=list)
    total: list[float] = field(default_factory=list)
    val_errors: list[tuple[float, float, float]] = field(default_factory=list)
    mixture: gamma.GammaMixture | None = None
    train_ids: list[str] = field(default_factory=list)
    val_ids: list[str] = field(default_factory=list)
    checkpoint: str | None = None

    @property
    def final_val_errors(self) -> tuple[float, float, float] | None:
        return self.val_errors[-1] if self.val_errors else None

    def curve_csv(self) -> str:
        lines = ["epoch,l_data,l_entropy,l_likelihood,total,val_L,val_M,val_H"]
        for e in range(len(self.total)):
            v = self.val_errors[e] if self.val_errors else (math.nan,) * 3
            row = [self.l_data[e], self.l_entropy[e], self.l_likelihood[e], self.total[e], *v]
            lines.append(f"{e + 1}," + ",".join(f"{x:.8g}" for x in row))
        return "\n".join(lines) + "\n"


class InferResult(NamedTuple):
    probs: np.ndarray
    rasters: list[raster.OccupancyRaster]
    occupancy: np.ndarray
    n_clamped: int


@dataclass
class Bundle:
    """Everything inference needs, saved together in one directory."""

    params: pointnet.NetParams
    mixture: gamma.GammaMixture
    scaler: FeatureScaler
    config: TrainConfig
    radius: float = 10.0
    opt_state: pointnet.OptState | None = None


def prepare(plots: list[Plot], neighborhood_radius: float = 0.5) -> list[Plot]:
    """Normalize elevations where missing."""
    return [p if p.z_norm is not None else normalize_elevation(p, neighborhood_radius) for p in plots]


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng([seed, 1]).permutation(n)
    n_val = int(round(n * val_fraction))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def fit_mixture(plots: list[Plot]) -> gamma.GammaMixture:
    z = np.concatenate([p.z_norm for p in plots])
    return gamma.ecm_fit(z, gamma.init_mixture(z, split=0.5))


def plot_loss(probs, xy, z, labels, mixture, cfg: TrainConfig, radius: float):
    """Loss terms for one plot and dLoss/dProbs, shape (N, 4)."""
    rasters = raster.project(probs, xy, cfg.K, radius)
    occ = raster.occupancy(rasters)
    l_data, d_occ = data_loss(occ, labels)
    l_ent, d_ent = entropy_loss(rasters)
    l_lik, d_lik = gamma.elevation_nll(mixture, probs, z)
    d_pix = []
    for s, r in enumerate(rasters):
        _, d_agg = raster.aggregate(r)
        d_pix.append(d_occ[s] * d_agg + cfg.loss.alpha * d_ent[s])
    d_probs = raster.raster_backward(rasters, d_pix) + cfg.loss.lam * d_lik
    return (l_data, l_ent, l_lik), d_probs


def infer(
    params: pointnet.NetParams,
    mixture: gamma.GammaMixture | None,
    scaler: FeatureScaler,
    plot: Plot,
    K: int = 32,
) -> InferResult:
    """Full-resolution inference on every point of ``plot``."""
    if plot.z_norm is None:
        plot = normalize_elevation(plot)
    feats, n_clamped = scaler.transform(raw_features(plot))
    if n_clamped:
        logger.debug("plot %s: %d feature values outside the scaler range were clamped", plot.plot_id, n_clamped)
    probs, _ = pointnet.forward(params, feats)
    rasters = raster.project(probs, plot.xy, K, plot.radius)
    return InferResult(probs, rasters, raster.occupancy(rasters), n_clamped)


def validation_errors(params, mixture, scaler, plots, K) -> tuple[float, float, float]:
    err = np.zeros(3)
    for p in plots:
        err += np.abs(infer(params, mixture, scaler, p, K).occupancy - np.asarray(p.labels))
    return tuple(float(v) for v in err / len(plots))


def train(dataset: list[Plot], cfg: TrainConfig = TrainConfig()) -> tuple[pointnet.NetParams, TrainReport, Bundle]:
    """Train the point network from plot-level labels only."""
    for p in dataset:
        if p.labels is None:
            raise PlotFormatError(f"plot {p.plot_id} has no labels")
    plots = prepare(dataset, cfg.neighborhood_radius)
    train_idx, val_idx = split_indices(len(plots), cfg.val_fraction, cfg.seed)
    train_plots = [plots[i] for i in train_idx]
    val_plots = [plots[i] for i in val_idx]
    if len(train_plots) < 1:
        raise ValueError("empty training split")
    if len(train_plots) < cfg.batch_size:
        logger.warning("training split (%d) smaller than batch size (%d)", len(train_plots), cfg.batch_size)

    scaler = fit_scaler(train_plots)
    mixture = fit_mixture(train_plots)
    logger.info("elevation mixture: %s", mixture)

    feats = [scaler.transform(raw_features(p))[0] for p in train_plots]
    xys = [p.xy for p in train_plots]
    zs = [gamma.clip_elevations(p.z_norm) for p in train_plots]
    labels = [np.asarray(p.labels) for p in train_plots]
    radii = [p.radius for p in train_plots]

    params = pointnet.init_params(cfg.arch, cfg.seed)
    state = pointnet.OptState(lr=cfg.lr)
    report = TrainReport(
        mixture=mixture,
        train_ids=[p.plot_id for p in train_plots],
        val_ids=[p.plot_id for p in val_plots],
    )
    rng = np.random.default_rng([cfg.seed, 2])
    n = cfg.subsample
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_plots))
        sums = np.zeros(4)
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = order[start : start + cfg.batch_size]
            picks = [subsample(len(feats[i]), n, seed=int(rng.integers(2**32))) for i in batch]
            X = np.stack([feats[i][s] for i, s in zip(batch, picks)])
            probs, cache = pointnet.forward(params, X)
            d_probs = np.empty_like(probs)
            for j, (i, s) in enumerate(zip(batch, picks)):
                (l_d, l_e, l_l), d = plot_loss(probs[j], xys[i][s], zs[i][s], labels[i], mixture, cfg, radii[i])
                d_probs[j] = d / len(batch)
                total = l_d + cfg.loss.alpha * l_e + cfg.loss.lam * l_l
                if not math.isfinite(total):
                    raise NumericalError(f"non-finite loss at epoch {epoch + 1}, batch {b + 1}")
                sums += (l_d, l_e, l_l, total)
            grads = pointnet.backward(cache, d_probs)
            try:
                params, state = pointnet.adam_step(params, grads, state)
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch + 1}, batch {b + 1}: {exc}") from None
        sums /= len(train_plots)
        report.l_data.append(float(sums[0]))
        report.l_entropy.append(float(sums[1]))
        report.l_likelihood.append(float(sums[2]))
        report.total.append(float(sums[3]))
        if val_plots:
            report.val_errors.append(validation_errors(params, mixture, scaler, val_plots, cfg.K))
        logger.info(
            "epoch %d: data %.4f entropy %.4f lik %.4f total %.4f val %s",
            epoch + 1, *sums, report.val_errors[-1] if val_plots else "-",
        )
    bundle = Bundle(params, mixture, scaler, cfg, radius=train_plots[0].radius, opt_state=state)
    return params, report, bundle


# ---------------------------------------------------------------------------
# bundle persistence


def save_bundle(bundle: Bundle, directory: str | Path, method: str = "ours") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    pointnet.save_checkpoint(directory / "model.npz", bundle.params, bundle.opt_state, kind=method)
    if bundle.mixture is not None:
        gamma.save_mixture(bundle.mixture, directory / "mixture.txt")
    (directory / "scaler.txt").write_text(bundle.scaler.to_text())
    meta = {
        "version": BUNDLE_VERSION,
        "method": method,
        "radius": bundle.radius,
        "config": bundle.config.to_dict(),
    }
    (directory / "bundle.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return directory


def load_bundle(directory: str | Path) -> tuple[Bundle, str]:
    """Returns the bundle and the method name it was trained with."""
    directory = Path(directory)
    meta = json.loads((directory / "bundle.json").read_text())
    if meta.get("version") != BUNDLE_VERSION:
        raise ValueError(f"unsupported bundle version {meta.get('version')}")
    method = meta["method"]
    cfg = TrainConfig.from_dict(meta["config"])
    expected = pointnet.arch_shapes(cfg.arch) if method == "ours" else None
    params, state = pointnet.load_checkpoint(directory / "model.npz", expected, kind=method)
    mix_path = directory / "mixture.txt"
    mixture = gamma.load_mixture(mix_path) if mix_path.exists() else None
    scaler = FeatureScaler.from_text((directory / "scaler.txt").read_text())
    return Bundle(params, mixture, scaler, cfg, meta["radius"], state), method
