"""Small dense / 1-D convolutional networks with hand-written backprop.

Architectures are lists of :class:`LayerSpec`; parameters are a parallel list
of dicts (``{"W": ..., "b": ...}`` or ``{}``).  Inputs carry the batch on the
first axis; ``conv1d`` and ``maxpool1d`` take ``(batch, channels, length)`` and
a ``dense`` layer flattens whatever it receives.  Everything is float64.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

LAYER_KINDS = ("dense", "conv1d", "maxpool1d", "relu", "sigmoid", "tanh")
PROB_CLAMP = 1e-12
TANH_EPS = 1e-6
LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


@dataclass(frozen=True)
class LayerSpec:
    """``dense``: (in, out); ``conv1d``: (in_ch, out_ch, kernel[, stride, padding]);
    ``maxpool1d``: (size,); activations: ()."""
    kind: str
    dims: tuple = ()

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "dims": list(self.dims)}


def dense(n_in, n_out):
    return LayerSpec("dense", (n_in, n_out))


def conv1d(c_in, c_out, kernel, stride=1, padding=0):
    return LayerSpec("conv1d", (c_in, c_out, kernel, stride, padding))


def maxpool1d(size):
    return LayerSpec("maxpool1d", (size,))


RELU, SIGMOID, TANH = LayerSpec("relu"), LayerSpec("sigmoid"), LayerSpec("tanh")


def init_params(specs: Sequence[LayerSpec], rng) -> list[dict]:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(rng)
    params = []
    for s in specs:
        if s.kind == "dense":
            n_in, n_out = s.dims
            lim = math.sqrt(6.0 / (n_in + n_out))
            params.append({"W": rng.uniform(-lim, lim, size=(n_in, n_out)), "b": np.zeros(n_out)})
        elif s.kind == "conv1d":
            c_in, c_out, k = s.dims[:3]
            lim = math.sqrt(6.0 / (c_in * k + c_out * k))
            params.append({"W": rng.uniform(-lim, lim, size=(c_out, c_in, k)), "b": np.zeros(c_out)})
        else:
            params.append({})
    return params


# -- per-layer kernels ---------------------------------------------------------

def _conv_cols(x, k, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(x, k, axis=2)[:, :, ::stride, :]
    return win  # (B, C_in, L_out, k)


def _forward_layer(spec: LayerSpec, p: dict, x: np.ndarray):
    kind = spec.kind
    if kind == "dense":
        n_in = spec.dims[0]
        xf = x.reshape(x.shape[0], -1)
        if xf.shape[1] != n_in:
            raise ValueError(f"dense layer expects {n_in} inputs, got {xf.shape[1]}")
        return xf @ p["W"] + p["b"], (x.shape, xf)
    if kind == "conv1d":
        c_in, c_out, k, stride, padding = (spec.dims + (1, 0))[:5]
        if x.ndim != 3 or x.shape[1] != c_in:
            raise ValueError(f"conv1d expects (batch, {c_in}, length), got {x.shape}")
        win = _conv_cols(x, k, stride, padding)
        if win.shape[2] < 1:
            raise ValueError("conv1d input shorter than its kernel")
        out = np.einsum("bclk,ock->bol", win, p["W"], optimize=True) + p["b"][None, :, None]
        return out, (x.shape, win)
    if kind == "maxpool1d":
        size = spec.dims[0]
        if x.ndim != 3:
            raise ValueError(f"maxpool1d expects (batch, channels, length), got {x.shape}")
        B, C, L = x.shape
        L_out = -(-L // size)
        xp = np.full((B, C, L_out * size), -np.inf)
        xp[:, :, :L] = x
        blocks = xp.reshape(B, C, L_out, size)
        arg = blocks.argmax(axis=3)
        out = np.take_along_axis(blocks, arg[..., None], axis=3)[..., 0]
        return out, (x.shape, arg)
    if kind == "relu":
        return np.maximum(x, 0.0), x > 0
    if kind == "sigmoid":
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out, out
    out = np.tanh(x)
    return out, out


def _backward_layer(spec: LayerSpec, p: dict, cache, g: np.ndarray):
    kind = spec.kind
    if kind == "dense":
        shape, xf = cache
        grads = {"W": xf.T @ g, "b": g.sum(axis=0)}
        return grads, (g @ p["W"].T).reshape(shape)
    if kind == "conv1d":
        c_in, c_out, k, stride, padding = (spec.dims + (1, 0))[:5]
        shape, win = cache
        B, _, L = shape
        grads = {"W": np.einsum("bol,bclk->ock", g, win, optimize=True), "b": g.sum(axis=(0, 2))}
        dwin = np.einsum("bol,ock->bclk", g, p["W"], optimize=True)
        dx = np.zeros((B, c_in, L + 2 * padding))
        L_out = g.shape[2]
        for j in range(k):
            dx[:, :, j:j + stride * (L_out - 1) + 1:stride] += dwin[:, :, :, j]
        return grads, dx[:, :, padding:padding + L]
    if kind == "maxpool1d":
        size = spec.dims[0]
        shape, arg = cache
        B, C, L = shape
        L_out = arg.shape[2]
        blocks = np.zeros((B, C, L_out, size))
        np.put_along_axis(blocks, arg[..., None], g[..., None], axis=3)
        return {}, blocks.reshape(B, C, L_out * size)[:, :, :L]
    if kind == "relu":
        return {}, g * cache
    if kind == "sigmoid":
        return {}, g * cache * (1.0 - cache)
    return {}, g * (1.0 - cache ** 2)


def forward(specs: Sequence[LayerSpec], params: Sequence[dict], x):
    """Evaluate the stack; returns ``(output, caches)``."""
    x = np.asarray(x, dtype=float)
    caches = []
    for s, p in zip(specs, params):
        x, c = _forward_layer(s, p, x)
        caches.append(c)
    return x, caches


def backward(specs: Sequence[LayerSpec], params: Sequence[dict], caches, grad_out):
    """Reverse pass; returns ``(param_grads, input_grad)``."""
    g = np.asarray(grad_out, dtype=float)
    grads = [None] * len(specs)
    for i in range(len(specs) - 1, -1, -1):
        grads[i], g = _backward_layer(specs[i], params[i], caches[i], g)
    return grads, g


def output_shape(specs: Sequence[LayerSpec], in_shape: tuple) -> tuple:
    """Shape (without batch) produced by ``specs`` on a ``in_shape`` input."""
    x = np.zeros((1,) + tuple(in_shape))
    out, _ = forward(specs, init_params(specs, 0), x)
    return out.shape[1:]


# -- losses -----------------------------------------------------------------------

def bce_loss(p, y):
    """Mean binary cross-entropy and its gradient w.r.t. ``p``."""
    p = np.clip(np.asarray(p, dtype=float), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(y, dtype=float)
    M = p.size
    loss = -np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    grad = (p - y) / (p * (1.0 - p)) / M
    return float(loss), grad


# -- Adam --------------------------------------------------------------------------

@dataclass
class AdamState:
    first_moment: list
    second_moment: list
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, params: Sequence[dict], lr: float = 1e-3) -> "AdamState":
        m = [{k: np.zeros_like(v) for k, v in p.items()} for p in params]
        v = [{k: np.zeros_like(a) for k, a in p.items()} for p in params]
        return cls(m, v, 0, lr)


def adam_step(state: AdamState, params: list[dict], grads: list[dict]):
    """Bias-corrected Adam update, applied in place; returns ``(params, state)``."""
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        for k in p:
            m[k] *= b1
            m[k] += (1.0 - b1) * g[k]
            v[k] *= b2
            v[k] += (1.0 - b2) * g[k] ** 2
            p[k] -= state.lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + state.eps)
    return params, state


# -- squashed Gaussian --------------------------------------------------------------

def gaussian_tanh_sample(mean, log_std, noise):
    """``a = tanh(mean + noise * exp(log_std))`` and its log-density.

    The log-density is summed over the last axis and includes the tanh
    Jacobian ``-sum log(1 - a^2 + 1e-6)``.  Returns ``(a, log_prob, cache)``;
    pass ``cache`` to :func:`gaussian_tanh_backward`.
    """
    mean = np.asarray(mean, dtype=float)
    log_std = np.asarray(log_std, dtype=float)
    noise = np.asarray(noise, dtype=float)
    std = np.exp(log_std)
    u = mean + noise * std
    a = np.tanh(u)
    log_prob = np.sum(-0.5 * noise ** 2 - log_std - LOG_SQRT_2PI - np.log(1.0 - a ** 2 + TANH_EPS), axis=-1)
    return a, log_prob, (a, std, noise)


def gaussian_tanh_backward(cache, grad_a, grad_logp):
    """Reparameterised gradients ``(d/d mean, d/d log_std)``.

    ``grad_a`` has the action's shape, ``grad_logp`` one entry per sample.
    """
    a, std, noise = cache
    gl = np.asarray(grad_logp, dtype=float)[..., None]
    # d/du of -log(1 - tanh(u)^2 + eps)
    djac = 2.0 * a * (1.0 - a ** 2) / (1.0 - a ** 2 + TANH_EPS)
    du = np.asarray(grad_a, dtype=float) * (1.0 - a ** 2) + gl * djac
    return du, du * noise * std - gl


# -- model wrapper and checkpoints ----------------------------------------------------

@dataclass
class Model:
    specs: list
    params: list
    seed: int = 0
    step_count: int = 0
    meta: dict = field(default_factory=dict)

    @classmethod
    def build(cls, specs: Sequence[LayerSpec], seed: int = 0, **meta) -> "Model":
        return cls(list(specs), init_params(specs, seed), seed, 0, dict(meta))

    def __call__(self, x):
        return forward(self.specs, self.params, x)[0]

    def forward(self, x):
        return forward(self.specs, self.params, x)

    def backward(self, caches, grad_out):
        return backward(self.specs, self.params, caches, grad_out)

    def flat(self) -> np.ndarray:
        parts = [p[k].ravel() for p in self.params for k in sorted(p)]
        return np.concatenate(parts) if parts else np.zeros(0)

    def set_flat(self, vec) -> None:
        vec = np.asarray(vec, dtype=float)
        pos = 0
        for p in self.params:
            for k in sorted(p):
                n = p[k].size
                p[k] = vec[pos:pos + n].reshape(p[k].shape).copy()
                pos += n
        if pos != vec.size:
            raise ValueError(f"parameter blob has {vec.size} values, model needs {pos}")

    def copy(self) -> "Model":
        return Model(list(self.specs), [{k: v.copy() for k, v in p.items()} for p in self.params],
                     self.seed, self.step_count, dict(self.meta))


def save_checkpoint(model: Model, path) -> None:
    """``<path>.json`` manifest plus ``<path>.bin`` little-endian float64 blob."""
    path = Path(path)
    manifest = {"architecture": [s.to_dict() for s in model.specs], "seed": model.seed,
                "step_count": model.step_count, "meta": model.meta}
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    path.with_suffix(".bin").write_bytes(model.flat().astype("<f8").tobytes())


def load_checkpoint(path) -> Model:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    specs = [LayerSpec(d["kind"], tuple(d["dims"])) for d in manifest["architecture"]]
    model = Model.build(specs, manifest["seed"], **manifest.get("meta", {}))
    model.step_count = manifest["step_count"]
    model.set_flat(np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8"))
    return model
