"""Comparison methods.

``handcrafted``: fixed thresholds on elevation and NDVI label every point, then
the same projection and aggregation as the learned model produce rasters.

``direct``: a point encoder with max pooling regresses the three plot
occupancies directly through a sigmoid head, trained on MAE only.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import pointnet, raster
from .errors import NumericalError, PlotFormatError
from .loss import data_loss
from .plotio import FeatureScaler, Plot, fit_scaler, normalize_elevation, raw_features, subsample
from .train import Bundle, InferResult, TrainConfig, TrainReport, prepare, split_indices

logger = logging.getLogger(__name__)

R_COL, NIR_COL = 3, 6


@dataclass(frozen=True)
class TreeRules:
    low: float = 0.5
    high: float = 1.5
    ndvi_threshold: float = 0.3

    def __post_init__(self):
        if not self.low < self.high:
            raise ValueError("elevation thresholds must be ordered")
        if not -1.0 < self.ndvi_threshold < 1.0:
            raise ValueError("NDVI threshold must be in (-1, 1)")


def ndvi(plot: Plot) -> np.ndarray:
    r, nir = plot.points[:, R_COL], plot.points[:, NIR_COL]
    den = nir + r
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den != 0, (nir - r) / np.where(den != 0, den, 1.0), 0.0)


def handcrafted_classify(plot: Plot, rules: TreeRules = TreeRules()) -> np.ndarray:
    """One-hot (N, 4) rows over (soil, lower, medium, higher)."""
    if plot.z_norm is None:
        plot = normalize_elevation(plot)
    z = plot.z_norm
    cls = np.where(z > rules.high, 3, np.where(z >= rules.low, 2, np.where(ndvi(plot) >= rules.ndvi_threshold, 1, 0)))
    return np.eye(4)[cls]


def handcrafted_infer(plot: Plot, rules: TreeRules = TreeRules(), K: int = 32) -> InferResult:
    probs = handcrafted_classify(plot, rules)
    rasters = raster.project(probs, plot.xy, K, plot.radius)
    return InferResult(probs, rasters, raster.occupancy(rasters), 0)


# ---------------------------------------------------------------------------
# direct regression


def direct_layers(arch: pointnet.Arch) -> list[tuple[str, int, int]]:
    layers = [layer for layer in arch.layers() if layer[0].startswith("enc")]
    widths = (arch.encoder[-1],) + arch.decoder[-1:] + (3,)
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        layers.append((f"head{i}", a, b))
    return layers


def init_direct(arch: pointnet.Arch = pointnet.Arch(), seed: int = 0) -> pointnet.NetParams:
    return pointnet.glorot_layers(direct_layers(arch), seed)


def _split_names(params):
    enc = sorted((k[:-2] for k in params if k.startswith("enc") and k.endswith(".W")), key=lambda s: int(s[3:]))
    head = sorted((k[:-2] for k in params if k.startswith("head") and k.endswith(".W")), key=lambda s: int(s[4:]))
    return enc, head


def direct_forward(params: pointnet.NetParams, features: np.ndarray):
    """Plot occupancies (..., 3) in (0, 1) and a cache for :func:`direct_backward`."""
    x = np.asarray(features, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericalError("non-finite network input")
    enc, head = _split_names(params)
    h, enc_cache = pointnet.mlp_forward(params, enc, x)
    g, idx = pointnet.max_pool(h)
    logits, head_cache = pointnet.mlp_forward(params, head, g, relu_last=False)
    out = expit(logits)
    return out, (params, enc, head, enc_cache, h.shape[-2], idx, head_cache, out)


def direct_backward(cache, d_out: np.ndarray) -> pointnet.NetParams:
    params, enc, head, enc_cache, n_points, idx, head_cache, out = cache
    grads: pointnet.NetParams = {}
    d_logits = d_out * out * (1.0 - out)
    dg = pointnet.mlp_backward(params, head, head_cache, d_logits, grads, relu_last=False)
    dh = pointnet.max_pool_backward(dg, idx, n_points)
    pointnet.mlp_backward(params, enc, enc_cache, dh, grads)
    return grads


def direct_regression_infer(params: pointnet.NetParams, scaler: FeatureScaler, plot: Plot) -> np.ndarray:
    if plot.z_norm is None:
        plot = normalize_elevation(plot)
    feats, _ = scaler.transform(raw_features(plot))
    return direct_forward(params, feats)[0]


def direct_regression_train(dataset: list[Plot], cfg: TrainConfig = TrainConfig()):
    """Returns ``(params, report, bundle)``; the report carries MAE as ``l_data``."""
    for p in dataset:
        if p.labels is None:
            raise PlotFormatError(f"plot {p.plot_id} has no labels")
    plots = prepare(dataset, cfg.neighborhood_radius)
    train_idx, val_idx = split_indices(len(plots), cfg.val_fraction, cfg.seed)
    train_plots = [plots[i] for i in train_idx]
    val_plots = [plots[i] for i in val_idx]
    scaler = fit_scaler(train_plots)
    feats = [scaler.transform(raw_features(p))[0] for p in train_plots]
    labels = np.array([p.labels for p in train_plots])

    params = init_direct(cfg.arch, cfg.seed)
    state = pointnet.OptState(lr=cfg.lr)
    report = TrainReport(train_ids=[p.plot_id for p in train_plots], val_ids=[p.plot_id for p in val_plots])
    rng = np.random.default_rng([cfg.seed, 3])
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_plots))
        total = 0.0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = order[start : start + cfg.batch_size]
            X = np.stack([feats[i][subsample(len(feats[i]), cfg.subsample, int(rng.integers(2**32)))] for i in batch])
            out, cache = direct_forward(params, X)
            d_out = np.empty_like(out)
            for j, i in enumerate(batch):
                l, d = data_loss(out[j], labels[i])
                total += l
                d_out[j] = d / len(batch)
            if not math.isfinite(total):
                raise NumericalError(f"non-finite loss at epoch {epoch + 1}, batch {b + 1}")
            params, state = pointnet.adam_step(params, direct_backward(cache, d_out), state)
        mean = total / len(train_plots)
        report.l_data.append(mean)
        report.l_entropy.append(0.0)
        report.l_likelihood.append(0.0)
        report.total.append(mean)
        if val_plots:
            err = np.mean([np.abs(direct_regression_infer(params, scaler, p) - p.labels) for p in val_plots], axis=0)
            report.val_errors.append(tuple(float(v) for v in err))
        logger.info("direct epoch %d: mae %.4f val %s", epoch + 1, mean, report.val_errors[-1] if val_plots else "-")
    bundle = Bundle(params, None, scaler, cfg, radius=train_plots[0].radius, opt_state=state)
    return params, report, bundle
