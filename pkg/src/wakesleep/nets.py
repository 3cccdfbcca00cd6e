"""Small dense-network kernel with hand-derived gradients.

Everything operates on 64-bit numpy arrays with value semantics: forward
passes return caches, backward passes return gradient structures, and the
only in-place mutation anywhere is the Adam update. No autograd framework
is used; each backward rule is written out so it can be checked against
central finite differences.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

LN_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when an input does not match a layer's expected shape."""


# ---------------------------------------------------------------------------
# layers


@dataclass
class DenseLayer:
    w: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    activation: str = "identity"  # relu | tanh | identity


@dataclass
class LayerNormParams:
    gain: np.ndarray  # (d,)
    shift: np.ndarray  # (d,)


@dataclass
class MLPParams:
    layers: list[DenseLayer]
    norm: LayerNormParams | None = None  # applied after the last layer


@dataclass
class MLPCache:
    x: np.ndarray
    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)
    norm_cache: tuple | None = None
    out: np.ndarray | None = None


@dataclass
class MLPGrads:
    dw: list[np.ndarray]
    db: list[np.ndarray]
    dgain: np.ndarray | None = None
    dshift: np.ndarray | None = None


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def mlp_init(
    sizes: list[int],
    rng: np.random.Generator,
    hidden_activation: str = "relu",
    out_activation: str = "identity",
    final_layernorm: bool = False,
) -> MLPParams:
    """Build an MLP with the given layer sizes, e.g. [768, 96, 64]."""
    if len(sizes) < 2:
        raise ShapeError(f"mlp_init needs at least 2 sizes, got {sizes}")
    layers = []
    for i in range(len(sizes) - 1):
        act = out_activation if i == len(sizes) - 2 else hidden_activation
        layers.append(
            DenseLayer(
                w=glorot_uniform(rng, sizes[i + 1], sizes[i]),
                b=np.zeros(sizes[i + 1]),
                activation=act,
            )
        )
    norm = None
    if final_layernorm:
        norm = LayerNormParams(gain=np.ones(sizes[-1]), shift=np.zeros(sizes[-1]))
    return MLPParams(layers=layers, norm=norm)


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "identity":
        return z
    raise ValueError(f"unknown activation {name!r}")


def _activate_grad(name: str, z: np.ndarray, post: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0.0).astype(z.dtype)
    if name == "tanh":
        return 1.0 - post * post
    if name == "identity":
        return np.ones_like(z)
    raise ValueError(f"unknown activation {name!r}")


def layer_norm_forward(
    x: np.ndarray, gain: np.ndarray, shift: np.ndarray, eps: float = LN_EPS
):
    """Per-row layer norm: y = gain * (x - mean) / sqrt(var + eps) + shift."""
    if x.ndim != 2:
        raise ShapeError(f"layer_norm expects a (batch, d) array, got shape {x.shape}")
    d = x.shape[1]
    if d < 2:
        raise ShapeError("layer_norm is undefined for length-1 vectors")
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    y = xhat * gain + shift
    return y, (xhat, inv_std, gain)


def layer_norm_backward(cache, dy: np.ndarray):
    """Backward for layer_norm_forward; returns (dx, dgain, dshift)."""
    xhat, inv_std, gain = cache
    d = xhat.shape[1]
    dxhat = dy * gain
    # dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = inv_std * (dxhat - m1 - xhat * m2)
    dgain = (dy * xhat).sum(axis=0)
    dshift = dy.sum(axis=0)
    return dx, dgain, dshift


def mlp_forward(params: MLPParams, x: np.ndarray) -> MLPCache:
    if x.ndim != 2:
        raise ShapeError(f"mlp_forward expects a (batch, d) array, got shape {x.shape}")
    cache = MLPCache(x=x)
    h = x
    for i, layer in enumerate(params.layers):
        if h.shape[1] != layer.w.shape[1]:
            raise ShapeError(
                f"layer {i}: expected input dim {layer.w.shape[1]}, got {h.shape[1]}"
            )
        z = h @ layer.w.T + layer.b
        a = _activate(layer.activation, z)
        cache.pre.append(z)
        cache.post.append(a)
        h = a
    if params.norm is not None:
        h, nc = layer_norm_forward(h, params.norm.gain, params.norm.shift)
        cache.norm_cache = nc
    cache.out = h
    return cache


def mlp_backward(params: MLPParams, cache: MLPCache, dout: np.ndarray):
    """Backward pass; returns (MLPGrads, dx)."""
    dgain = dshift = None
    dh = dout
    if params.norm is not None:
        dh, dgain, dshift = layer_norm_backward(cache.norm_cache, dout)
    dw: list[np.ndarray] = [None] * len(params.layers)  # type: ignore[list-item]
    db: list[np.ndarray] = [None] * len(params.layers)  # type: ignore[list-item]
    for i in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[i]
        dz = dh * _activate_grad(layer.activation, cache.pre[i], cache.post[i])
        below = cache.x if i == 0 else cache.post[i - 1]
        dw[i] = dz.T @ below
        db[i] = dz.sum(axis=0)
        dh = dz @ layer.w
    return MLPGrads(dw=dw, db=db, dgain=dgain, dshift=dshift), dh


def mlp_params_list(params: MLPParams) -> list[np.ndarray]:
    """Ordered parameter arrays (shared references, not copies)."""
    out: list[np.ndarray] = []
    for layer in params.layers:
        out.append(layer.w)
        out.append(layer.b)
    if params.norm is not None:
        out.append(params.norm.gain)
        out.append(params.norm.shift)
    return out


def mlp_grads_list(params: MLPParams, grads: MLPGrads) -> list[np.ndarray]:
    out: list[np.ndarray] = []
    for i in range(len(params.layers)):
        out.append(grads.dw[i])
        out.append(grads.db[i])
    if params.norm is not None:
        out.append(grads.dgain)
        out.append(grads.dshift)
    return out


def mlp_clone(params: MLPParams) -> MLPParams:
    layers = [
        DenseLayer(w=l.w.copy(), b=l.b.copy(), activation=l.activation)
        for l in params.layers
    ]
    norm = None
    if params.norm is not None:
        norm = LayerNormParams(gain=params.norm.gain.copy(), shift=params.norm.shift.copy())
    return MLPParams(layers=layers, norm=norm)


# ---------------------------------------------------------------------------
# softmax helpers


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def entropy_from_logits(logits: np.ndarray) -> np.ndarray:
    """Shannon entropy of softmax(logits) along the last axis."""
    logp = log_softmax(logits)
    p = np.exp(logp)
    return -(p * logp).sum(axis=-1)


def sample_categorical(rng: np.random.Generator, logits: np.ndarray) -> np.ndarray:
    """Sample one index per row of a (batch, k) logit array."""
    p = softmax(logits)
    cdf = np.cumsum(p, axis=-1)
    u = rng.random(size=(logits.shape[0], 1))
    return (u > cdf[:, :-1]).sum(axis=1).astype(np.int64)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: list[np.ndarray], lr: float = 1e-3) -> AdamState:
    return AdamState(
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
        lr=lr,
    )


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on the parameter arrays."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError(
            f"adam_step: {len(params)} params, {len(grads)} grads, "
            f"{len(state.m)} state slots"
        )
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeError(f"adam_step: param shape {p.shape} vs grad shape {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p -= state.lr * mhat / (np.sqrt(vhat) + state.eps)


# ---------------------------------------------------------------------------
# snapshot serialization

MAGIC = b"L2RLW1"


def save_arrays(path, arrays: list[np.ndarray]) -> None:
    """Write arrays as a flat binary record: magic, little-endian shapes, f64 data."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(arrays)))
        for a in arrays:
            a = np.asarray(a, dtype=np.float64)
            f.write(struct.pack("<I", a.ndim))
            for d in a.shape:
                f.write(struct.pack("<I", d))
            f.write(a.astype("<f8").tobytes(order="C"))


def load_arrays(path) -> list[np.ndarray]:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"bad snapshot magic {magic!r}")
        (n,) = struct.unpack("<I", f.read(4))
        out = []
        for _ in range(n):
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(8 * count), dtype="<f8").astype(np.float64)
            out.append(data.reshape(shape))
        return out


def assign_arrays(targets: list[np.ndarray], sources: list[np.ndarray]) -> None:
    """Copy values into existing arrays (shape-checked)."""
    if len(targets) != len(sources):
        raise ShapeError(f"assign_arrays: {len(targets)} targets vs {len(sources)} sources")
    for t, s in zip(targets, sources):
        if t.shape != s.shape:
            raise ShapeError(f"assign_arrays: shape {t.shape} vs {s.shape}")
        t[...] = s
