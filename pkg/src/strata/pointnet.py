"""Shared-MLP point network with max-pooled global context.

Every point goes through the same encoder MLP; the encoder outputs are max-pooled
into one global feature that is concatenated back onto each point before a
per-point decoder MLP and a probability head over (soil, lower, medium, higher).

The default ``factorized`` head emits three logits: one for the elevation group
(soil+lower vs medium+higher) and one per group for the split inside it, so
that ``p_S = q*a, p_L = q*(1-a), p_M = (1-q)*b, p_H = (1-q)*(1-b)``. A loss that
only depends on group membership then never moves the within-group split. The
``softmax`` head is the plain 4-way softmax.

Gradients are computed by hand. All arrays are float64 and may carry leading
batch dimensions: features are (..., N, F) and pooling runs over the point axis.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import NumericalError

NetParams = dict[str, np.ndarray]

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Arch:
    n_features: int = 10
    encoder: tuple[int, ...] = (32, 64)
    decoder: tuple[int, ...] = (64, 32)
    n_classes: int = 4
    head: str = "factorized"

    def __post_init__(self):
        if not self.encoder or not self.decoder:
            raise ValueError("encoder and decoder need at least one hidden layer each")
        if self.head not in ("factorized", "softmax"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.head == "factorized" and self.n_classes != 4:
            raise ValueError("the factorized head needs exactly 4 classes")

    @property
    def n_logits(self) -> int:
        return 3 if self.head == "factorized" else self.n_classes

    def layers(self) -> list[tuple[str, int, int]]:
        """(name, fan_in, fan_out) for every dense layer, in forward order."""
        out = []
        widths = (self.n_features,) + self.encoder
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            out.append((f"enc{i}", a, b))
        widths = (2 * self.encoder[-1],) + self.decoder + (self.n_logits,)
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            out.append((f"dec{i}", a, b))
        return out

    @property
    def n_params(self) -> int:
        return sum(a * b + b for _, a, b in self.layers())

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> Arch:
        d = json.loads(text)
        return cls(d["n_features"], tuple(d["encoder"]), tuple(d["decoder"]), d["n_classes"], d.get("head", "factorized"))


def glorot_layers(layers, seed: int) -> NetParams:
    rng = np.random.default_rng(seed)
    params = {}
    for name, fan_in, fan_out in layers:
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        params[f"{name}.W"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params[f"{name}.b"] = np.zeros(fan_out)
    return params


def init_params(arch: Arch = Arch(), seed: int = 0) -> NetParams:
    return glorot_layers(arch.layers(), seed)


def arch_of(params: NetParams) -> Arch:
    enc = []
    i = 0
    while f"enc{i}.W" in params:
        enc.append(params[f"enc{i}.W"].shape[1])
        i += 1
    dec = []
    i = 0
    while f"dec{i}.W" in params:
        dec.append(params[f"dec{i}.W"].shape[1])
        i += 1
    n_out = dec[-1]
    if n_out == 3:
        return Arch(params["enc0.W"].shape[0], tuple(enc), tuple(dec[:-1]), 4, "factorized")
    return Arch(params["enc0.W"].shape[0], tuple(enc), tuple(dec[:-1]), n_out, "softmax")


# ---------------------------------------------------------------------------
# dense-stack building blocks, shared with the direct-regression baseline


def mlp_forward(params: NetParams, names: list[str], a: np.ndarray, relu_last: bool = True):
    """Run dense layers ``names`` in order; returns output and per-layer cache."""
    cache = []
    for k, name in enumerate(names):
        z = a @ params[f"{name}.W"] + params[f"{name}.b"]
        cache.append((a, z))
        a = np.maximum(z, 0.0) if (relu_last or k < len(names) - 1) else z
    return a, cache


def mlp_backward(params, names, cache, da, grads, relu_last: bool = True):
    """Accumulate into ``grads`` and return the gradient w.r.t. the stack input."""
    for k in range(len(names) - 1, -1, -1):
        name = names[k]
        a, z = cache[k]
        dz = da * (z > 0) if (relu_last or k < len(names) - 1) else da
        W = params[f"{name}.W"]
        grads[f"{name}.W"] = np.tensordot(a, dz, axes=(tuple(range(a.ndim - 1)), tuple(range(dz.ndim - 1))))
        grads[f"{name}.b"] = dz.reshape(-1, dz.shape[-1]).sum(axis=0)
        da = dz @ W.T
    return da


def max_pool(h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Max over the point axis; argmax takes the lowest index among ties."""
    idx = np.argmax(h, axis=-2)
    g = np.take_along_axis(h, idx[..., None, :], axis=-2)[..., 0, :]
    return g, idx


def max_pool_backward(dg: np.ndarray, idx: np.ndarray, n_points: int) -> np.ndarray:
    dh = np.zeros(dg.shape[:-1] + (n_points, dg.shape[-1]))
    np.put_along_axis(dh, idx[..., None, :], dg[..., None, :], axis=-2)
    return dh


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def factorized_probs(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Class probabilities from (group, lower-split, upper-split) logits."""
    s = expit(z)
    q, a, b = s[..., 0], s[..., 1], s[..., 2]
    probs = np.stack([q * a, q * (1.0 - a), (1.0 - q) * b, (1.0 - q) * (1.0 - b)], axis=-1)
    return probs, s


def factorized_backward(s: np.ndarray, d_probs: np.ndarray) -> np.ndarray:
    q, a, b = s[..., 0], s[..., 1], s[..., 2]
    g0, g1, g2, g3 = (d_probs[..., i] for i in range(4))
    dq = g0 * a + g1 * (1.0 - a) - g2 * b - g3 * (1.0 - b)
    da = q * (g0 - g1)
    db = (1.0 - q) * (g2 - g3)
    return np.stack([dq, da, db], axis=-1) * s * (1.0 - s)


# ---------------------------------------------------------------------------
# segmentation network


@dataclass
class Cache:
    arch: Arch
    enc: list
    h: np.ndarray
    pool_idx: np.ndarray
    dec_in: tuple
    dec: list
    probs: np.ndarray
    params: NetParams
    gates: np.ndarray | None = None


def _names(arch: Arch):
    layers = [n for n, _, _ in arch.layers()]
    return [n for n in layers if n.startswith("enc")], [n for n in layers if n.startswith("dec")]


def forward(params: NetParams, features: np.ndarray) -> tuple[np.ndarray, Cache]:
    """Per-point class probabilities for features of shape (..., N, F)."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim < 2 or x.shape[-2] < 1:
        raise ValueError("features must be (..., N, F) with N >= 1")
    if not np.all(np.isfinite(x)):
        raise NumericalError("non-finite network input")
    arch = arch_of(params)
    if x.shape[-1] != arch.n_features:
        raise ValueError(f"expected {arch.n_features} features, got {x.shape[-1]}")
    enc_names, dec_names = _names(arch)

    h, enc_cache = mlp_forward(params, enc_names, x)
    g, idx = max_pool(h)

    # first decoder layer on [h, broadcast(g)] without materializing the concat
    W0, b0 = params["dec0.W"], params["dec0.b"]
    c = h.shape[-1]
    z0 = h @ W0[:c] + (g @ W0[c:])[..., None, :] + b0
    a0 = np.maximum(z0, 0.0)
    logits, dec_cache = mlp_forward(params, dec_names[1:], a0, relu_last=False)
    gates = None
    if arch.head == "factorized":
        probs, gates = factorized_probs(logits)
    else:
        probs = softmax(logits)
    return probs, Cache(arch, enc_cache, h, idx, (g, z0), dec_cache, probs, params, gates)


def backward(cache: Cache, d_probs: np.ndarray) -> NetParams:
    """Gradient of a scalar loss w.r.t. all parameters, given dLoss/dProbs."""
    params = cache.params
    d_probs = np.asarray(d_probs, dtype=np.float64)
    if d_probs.shape != cache.probs.shape:
        raise ValueError(f"gradient shape {d_probs.shape} does not match probs {cache.probs.shape}")
    enc_names, dec_names = _names(cache.arch)
    grads: NetParams = {}
    if cache.arch.head == "factorized":
        d_logits = factorized_backward(cache.gates, d_probs)
    else:
        p = cache.probs
        d_logits = p * (d_probs - (d_probs * p).sum(axis=-1, keepdims=True))
    da0 = mlp_backward(params, dec_names[1:], cache.dec, d_logits, grads, relu_last=False)

    g, z0 = cache.dec_in
    h = cache.h
    c = h.shape[-1]
    W0 = params["dec0.W"]
    dz0 = da0 * (z0 > 0)
    lead = tuple(range(h.ndim - 1))
    dz0_sum = dz0.sum(axis=-2)
    dW0 = np.empty_like(W0)
    dW0[:c] = np.tensordot(h, dz0, axes=(lead, lead))
    dW0[c:] = np.tensordot(g, dz0_sum, axes=(tuple(range(g.ndim - 1)),) * 2)
    grads["dec0.W"] = dW0
    grads["dec0.b"] = dz0.reshape(-1, dz0.shape[-1]).sum(axis=0)

    dh = dz0 @ W0[:c].T
    dg = dz0_sum @ W0[c:].T
    dh += max_pool_backward(dg, cache.pool_idx, h.shape[-2])
    mlp_backward(params, enc_names, cache.enc, dh, grads)
    return grads


# ---------------------------------------------------------------------------
# ADAM


@dataclass
class OptState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: NetParams, grads: NetParams, state: OptState) -> tuple[NetParams, OptState]:
    """One bias-corrected ADAM update; inputs are left untouched."""
    if set(grads) != set(params):
        raise ValueError("gradient keys do not match parameters")
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ValueError(f"gradient shape mismatch for {k}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {k}")
    t = state.step + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    new_params, m, v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m[k] = state.beta1 * state.m.get(k, np.zeros_like(p)) + (1.0 - state.beta1) * g
        v[k] = state.beta2 * state.v.get(k, np.zeros_like(p)) + (1.0 - state.beta2) * (g * g)
        new_params[k] = p - state.lr * (m[k] / bc1) / (np.sqrt(v[k] / bc2) + state.eps)
    return new_params, OptState(state.lr, state.beta1, state.beta2, state.eps, t, m, v)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, params: NetParams, state: OptState | None = None, kind: str = "pointnet"):
    blobs = {
        "format_version": np.array(CHECKPOINT_VERSION),
        "kind": np.array(kind),
        "arch": np.array(json.dumps({k: list(v.shape) for k, v in sorted(params.items())})),
    }
    for k, v in params.items():
        blobs[f"param/{k}"] = np.ascontiguousarray(v)
    if state is not None:
        blobs["adam/hparams"] = np.array([state.lr, state.beta1, state.beta2, state.eps])
        blobs["adam/step"] = np.array(state.step)
        for k in state.m:
            blobs[f"adam/m/{k}"] = state.m[k]
            blobs[f"adam/v/{k}"] = state.v[k]
    with open(path, "wb") as fh:
        np.savez(fh, **blobs)


def load_checkpoint(path: str | Path, expected: dict[str, tuple] | None = None, kind: str = "pointnet"):
    """Load ``(params, OptState | None)``; rejects other versions or shapes."""
    with np.load(path, allow_pickle=False) as z:
        version = int(z["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        if str(z["kind"]) != kind:
            raise ValueError(f"checkpoint holds a {z['kind']} model, expected {kind}")
        shapes = {k: tuple(v) for k, v in json.loads(str(z["arch"])).items()}
        if expected is not None and shapes != {k: tuple(v) for k, v in expected.items()}:
            raise ValueError("checkpoint architecture does not match the expected one")
        params = {k[len("param/"):]: z[k].copy() for k in z.files if k.startswith("param/")}
        if {k: v.shape for k, v in params.items()} != shapes:
            raise ValueError("checkpoint tensors disagree with its architecture header")
        state = None
        if "adam/hparams" in z.files:
            lr, b1, b2, eps = (float(v) for v in z["adam/hparams"])
            m = {k[len("adam/m/"):]: z[k].copy() for k in z.files if k.startswith("adam/m/")}
            v = {k[len("adam/v/"):]: z[k].copy() for k in z.files if k.startswith("adam/v/")}
            state = OptState(lr, b1, b2, eps, int(z["adam/step"]), m, v)
    return params, state


def arch_shapes(arch: Arch) -> dict[str, tuple]:
    out = {}
    for name, a, b in arch.layers():
        out[f"{name}.W"] = (a, b)
        out[f"{name}.b"] = (b,)
    return out
