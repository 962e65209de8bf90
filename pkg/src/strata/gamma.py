"""Two-component Gamma mixture over normalized point elevations.

Component 1 models the ground and lower stratum, component 2 the medium and
higher strata. Parameters are fitted by expectation / conditional maximization:
after the E-step the weight is updated in closed form, then each component's
shape (from the profile equation, solved by Newton) and the scale matching it.
Every update maximizes the expected complete-data log-likelihood given the
parameters not yet touched, so the log-likelihood never decreases.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import digamma, gammaln, polygamma

from .errors import NumericalError

logger = logging.getLogger(__name__)

ELEVATION_EPS = 1e-6
SHAPE_BOUNDS = (1e-3, 1e3)
_WEIGHT_FLOOR = 1e-9


@dataclass(frozen=True)
class GammaMixture:
    weight: float  # weight of component 1
    k1: float
    theta1: float
    k2: float
    theta2: float

    def __post_init__(self):
        if not 0.0 < self.weight < 1.0:
            raise ValueError(f"mixture weight must be in (0, 1), got {self.weight}")
        for v in (self.k1, self.theta1, self.k2, self.theta2):
            if not (v > 0 and math.isfinite(v)):
                raise ValueError("shapes and scales must be positive and finite")

    def component_logpdf(self, z: np.ndarray) -> np.ndarray:
        """(..., 2) log-densities of both components."""
        z = np.asarray(z, dtype=np.float64)
        return np.stack([gamma_logpdf(z, self.k1, self.theta1), gamma_logpdf(z, self.k2, self.theta2)], axis=-1)

    def logpdf(self, z: np.ndarray) -> np.ndarray:
        lp = self.component_logpdf(z) + np.log([self.weight, 1.0 - self.weight])
        return np.logaddexp(lp[..., 0], lp[..., 1])

    def loglik(self, z: np.ndarray) -> float:
        return float(self.logpdf(z).sum())

    def to_text(self) -> str:
        return f"{self.weight:.5f} {self.k1:.5f} {self.theta1:.5f} {self.k2:.5f} {self.theta2:.5f}\n"

    @classmethod
    def from_text(cls, text: str) -> GammaMixture:
        vals = text.split()
        if len(vals) != 5:
            raise ValueError("mixture file must hold 'pi k1 theta1 k2 theta2'")
        return cls(*(float(v) for v in vals))


def gamma_logpdf(z, k, theta):
    """Log-density of Gamma(shape=k, scale=theta) at z > 0."""
    z = np.asarray(z, dtype=np.float64)
    if np.any(z <= 0) or k <= 0 or theta <= 0:
        raise ValueError("gamma_logpdf requires z, k, theta > 0")
    return (k - 1.0) * np.log(z) - z / theta - gammaln(k) - k * np.log(theta)


def clip_elevations(z: np.ndarray, eps: float = ELEVATION_EPS) -> np.ndarray:
    return np.maximum(np.asarray(z, dtype=np.float64), eps)


def responsibilities(mix: GammaMixture, z) -> np.ndarray:
    """Posterior component probabilities, shape (..., 2); rows sum to 1."""
    lp = mix.component_logpdf(z) + np.log([mix.weight, 1.0 - mix.weight])
    lp -= lp.max(axis=-1, keepdims=True)
    r = np.exp(lp)
    return r / r.sum(axis=-1, keepdims=True)


def _moments(z: np.ndarray) -> tuple[float, float]:
    mean = float(z.mean())
    var = float(z.var())
    if var <= 0:
        var = max(mean * mean, 1e-12)
    return mean * mean / var, var / mean


def init_mixture(z: np.ndarray, split: float = 0.5) -> GammaMixture:
    """Method-of-moments start with the two groups separated at ``split``."""
    z = clip_elevations(z)
    low, high = z[z < split], z[z >= split]
    if len(low) < 2 or len(high) < 2:
        # one side is (nearly) empty: fall back to a median split
        med = np.median(z)
        low, high = z[z <= med], z[z > med]
        if len(high) == 0:
            raise NumericalError("zero-variance elevations")
    weight = min(max(len(low) / len(z), 0.01), 0.99)
    k1, t1 = _moments(low)
    k2, t2 = _moments(high)
    lo, hi = SHAPE_BOUNDS
    return GammaMixture(weight, min(max(k1, lo), hi), t1, min(max(k2, lo), hi), t2)


def solve_shape(c: float, k0: float, tol: float = 1e-12, max_iter: int = 100) -> float:
    """Root of ln k - digamma(k) = c by Newton, safeguarded with a bisection bracket."""
    lo, hi = SHAPE_BOUNDS

    def f(k):
        return math.log(k) - float(digamma(k)) - c

    # f is strictly decreasing in k
    if f(hi) >= 0:
        return hi
    if f(lo) <= 0:
        return lo
    k = min(max(k0, lo), hi)
    for _ in range(max_iter):
        fk = f(k)
        if fk > 0:
            lo = k
        else:
            hi = k
        dk = 1.0 / k - float(polygamma(1, k))
        step = fk / dk if dk != 0 else math.nan
        k_new = k - step
        if not math.isfinite(k_new) or not lo < k_new < hi:
            k_new = 0.5 * (lo + hi)
        if abs(k_new - k) <= tol * k:
            return k_new
        k = k_new
    return k


def ecm_step(z: np.ndarray, log_z: np.ndarray, mix: GammaMixture) -> GammaMixture:
    r1 = responsibilities(mix, z)[:, 0]
    weight = float(np.clip(r1.mean(), _WEIGHT_FLOOR, 1.0 - _WEIGHT_FLOOR))
    params = []
    for r, k in ((r1, mix.k1), (1.0 - r1, mix.k2)):
        s = float(r.sum())
        if s <= 0:
            raise NumericalError("mixture component lost all responsibility")
        mean_z = float(r @ z) / s
        mean_log = float(r @ log_z) / s
        # the profile equation maximizes over the scale jointly, so the shape
        # update is followed by the scale that maximizes given the new shape
        c = math.log(mean_z) - mean_log
        if c <= 0:
            raise NumericalError("zero-variance elevations")
        k = solve_shape(c, k)
        theta = mean_z / k
        params += [k, theta]
    return GammaMixture(weight, *params)


def ecm_fit(
    elevations,
    init: GammaMixture | None = None,
    tol: float = 1e-8,
    max_iter: int = 500,
    history: list[float] | None = None,
) -> GammaMixture:
    """Fit the mixture; ``history`` (if given) receives the log-likelihood per iteration.

    ``tol`` is the stopping threshold on the log-likelihood improvement per sample.
    """
    z = clip_elevations(elevations)
    if len(z) < 10:
        raise ValueError("need at least 10 elevations to fit the mixture")
    if np.ptp(z) == 0:
        raise NumericalError("zero-variance elevations")
    mix = init if init is not None else init_mixture(z)
    log_z = np.log(z)
    ll = mix.loglik(z)
    if history is not None:
        history.append(ll)
    for it in range(max_iter):
        new = ecm_step(z, log_z, mix)
        new_ll = new.loglik(z)
        if not math.isfinite(new_ll):
            raise NumericalError(f"non-finite log-likelihood at ECM iteration {it}")
        if history is not None:
            history.append(new_ll)
        gain = new_ll - ll
        if new_ll >= ll:
            mix = new
        ll = max(ll, new_ll)
        if gain < tol * len(z):
            break
    logger.debug("ECM stopped after %d iterations, loglik %.6f", it + 1, ll)
    return mix


def elevation_nll(mix: GammaMixture, probs: np.ndarray, z: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of elevations given pointwise classes.

    Soil and lower probabilities weight component 1, medium and higher weight
    component 2. Returns the loss and its (N, 4) gradient w.r.t. ``probs``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    z = clip_elevations(z)
    if probs.ndim != 2 or probs.shape[1] != 4 or probs.shape[0] != z.shape[0]:
        raise ValueError("probs must be (N, 4) matching z")
    neg = -mix.component_logpdf(z)  # (N, 2)
    cost = neg[:, [0, 0, 1, 1]]
    n = len(z)
    return float((probs * cost).sum() / n), cost / n


def save_mixture(mix: GammaMixture, path: str | Path) -> None:
    Path(path).write_text(mix.to_text())


def load_mixture(path: str | Path) -> GammaMixture:
    return GammaMixture.from_text(Path(path).read_text())
