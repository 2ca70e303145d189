"""Small numpy neural-network kernel with hand-written gradients.

Dense nets and stacked LSTMs are plain parameter containers; forward passes
are pure functions returning a cache, and backward passes turn that cache
into exact gradients. A dense net may carry a leading *ensemble* axis so
that several independent networks (e.g. one actor per DU) run as a single
batched matmul: weights ``(E, in, out)``, inputs ``(E, B, in)``.

Everything is float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import NumericalFailure, ShapeError, StaleCacheError

CHECKPOINT_MAGIC = "ORANSLICE-PARAMS"
CHECKPOINT_VERSION = 1

ACTIVATIONS = ("tanh", "linear")


def check_finite(arrays: Sequence[np.ndarray], what: str) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericalFailure(f"non-finite values in {what}")


def _sigmoid(z):
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


# ---------------------------------------------------------------- dense


class DenseNet:
    """Fully connected net: affine layers, each followed by tanh or identity."""

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray], activations: list[str]):
        if not (len(weights) == len(biases) == len(activations)):
            raise ShapeError("weights, biases and activations differ in length")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        for w_prev, w in zip(weights, weights[1:]):
            if w_prev.shape[-1] != w.shape[-2]:
                raise ShapeError("layer widths do not chain")
        self.weights = weights
        self.biases = biases
        self.activations = activations
        self.version = 0

    @classmethod
    def init(
        cls,
        widths: Sequence[int],
        rng: np.random.Generator,
        activations: Sequence[str] | None = None,
        ensemble: int | None = None,
    ) -> "DenseNet":
        """Uniform(+-1/sqrt(fan_in)) init. Default: tanh hidden layers, linear head."""
        n = len(widths) - 1
        if activations is None:
            activations = ["tanh"] * (n - 1) + ["linear"]
        lead = () if ensemble is None else (ensemble,)
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=lead + (fan_in, fan_out)))
            bshape = (fan_out,) if ensemble is None else (ensemble, 1, fan_out)
            biases.append(rng.uniform(-bound, bound, size=bshape))
        return cls(weights, biases, list(activations))

    @property
    def ensemble(self) -> int | None:
        return None if self.weights[0].ndim == 2 else self.weights[0].shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[-2]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[-1]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def named_params(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out += [(f"W{i}", w), (f"b{i}", b)]
        return out

    def copy(self) -> "DenseNet":
        return DenseNet([w.copy() for w in self.weights], [b.copy() for b in self.biases], list(self.activations))

    def load(self, tensors: dict[str, np.ndarray]) -> None:
        for name, p in self.named_params():
            if tensors[name].shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {tensors[name].shape} != {p.shape}")
            p[...] = tensors[name]
        self.version += 1


@dataclass
class DenseCache:
    owner: int
    version: int
    inputs: list[np.ndarray]
    outputs: list[np.ndarray]
    squeeze: bool


def dense_forward(net: DenseNet, x: np.ndarray) -> tuple[np.ndarray, DenseCache]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[-1] != net.in_dim:
        raise ShapeError(f"input width {x.shape[-1]} != {net.in_dim}")
    ens = net.ensemble
    if ens is not None and (x.ndim != 3 or x.shape[0] != ens):
        raise ShapeError(f"ensemble net expects input of shape ({ens}, B, {net.in_dim})")
    if ens is None and x.ndim != 2:
        raise ShapeError("single net expects a vector or (B, in) batch")
    inputs, outputs = [], []
    h = x
    for w, b, act in zip(net.weights, net.biases, net.activations):
        inputs.append(h)
        z = h @ w + b
        h = np.tanh(z) if act == "tanh" else z
        outputs.append(h)
    y = h[0] if squeeze else h
    return y, DenseCache(id(net), net.version, inputs, outputs, squeeze)


def dense_backward(net: DenseNet, cache: DenseCache, dy: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Returns (dL/dx, grads aligned with ``net.params()``)."""
    if cache.owner != id(net) or cache.version != net.version:
        raise StaleCacheError("dense cache does not match current parameters")
    dy = np.asarray(dy, dtype=np.float64)
    if cache.squeeze:
        dy = dy[None, :]
    if dy.shape != cache.outputs[-1].shape:
        raise ShapeError(f"dy shape {dy.shape} != output shape {cache.outputs[-1].shape}")
    ens = net.ensemble is not None
    grads: list[np.ndarray] = [None] * (2 * len(net.weights))  # type: ignore[list-item]
    for i in reversed(range(len(net.weights))):
        y = cache.outputs[i]
        dz = dy * (1.0 - y * y) if net.activations[i] == "tanh" else dy
        x = cache.inputs[i]
        grads[2 * i] = np.swapaxes(x, -1, -2) @ dz
        grads[2 * i + 1] = dz.sum(axis=1, keepdims=True) if ens else dz.sum(axis=0)
        dy = dz @ np.swapaxes(net.weights[i], -1, -2)
    dx = dy[0] if cache.squeeze else dy
    return dx, grads


# ---------------------------------------------------------------- LSTM


class LstmStack:
    """Stacked LSTM with a linear read-out applied at every time step.

    Each layer keeps input weights ``Wx (in, 4H)``, recurrent weights
    ``Wh (H, 4H)`` and bias ``b (4H,)``; the 4H gate axis is laid out as
    forget | input | output | candidate.
    """

    def __init__(self, layers: list[tuple[np.ndarray, np.ndarray, np.ndarray]], w_out: np.ndarray, b_out: np.ndarray):
        self.layers = layers
        self.w_out = w_out
        self.b_out = b_out
        self.version = 0
        h = self.hidden
        prev = self.in_dim
        for wx, wh, b in layers:
            if wx.shape != (prev, 4 * h) or wh.shape != (h, 4 * h) or b.shape != (4 * h,):
                raise ShapeError("inconsistent LSTM gate blocks")
            prev = h
        if w_out.shape != (h, b_out.shape[0]):
            raise ShapeError("output projection does not match hidden size")

    @classmethod
    def init(cls, in_dim: int, hidden: int, out_dim: int, n_layers: int, rng: np.random.Generator,
             zero_output: bool = False) -> "LstmStack":
        layers = []
        bound = 1.0 / np.sqrt(hidden)
        prev = in_dim
        for _ in range(n_layers):
            layers.append((
                rng.uniform(-1 / np.sqrt(prev), 1 / np.sqrt(prev), size=(prev, 4 * hidden)),
                rng.uniform(-bound, bound, size=(hidden, 4 * hidden)),
                rng.uniform(-bound, bound, size=4 * hidden),
            ))
            prev = hidden
        if zero_output:
            w_out, b_out = np.zeros((hidden, out_dim)), np.zeros(out_dim)
        else:
            w_out = rng.uniform(-bound, bound, size=(hidden, out_dim))
            b_out = rng.uniform(-bound, bound, size=out_dim)
        return cls(layers, w_out, b_out)

    @property
    def hidden(self) -> int:
        return self.layers[0][1].shape[0]

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.b_out.shape[0]

    def params(self) -> list[np.ndarray]:
        out = [p for layer in self.layers for p in layer]
        return out + [self.w_out, self.b_out]

    def named_params(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, (wx, wh, b) in enumerate(self.layers):
            out += [(f"layer{i}.Wx", wx), (f"layer{i}.Wh", wh), (f"layer{i}.b", b)]
        return out + [("out.W", self.w_out), ("out.b", self.b_out)]

    def copy(self) -> "LstmStack":
        return LstmStack([tuple(p.copy() for p in layer) for layer in self.layers],
                         self.w_out.copy(), self.b_out.copy())

    def load(self, tensors: dict[str, np.ndarray]) -> None:
        for name, p in self.named_params():
            if tensors[name].shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {tensors[name].shape} != {p.shape}")
            p[...] = tensors[name]
        self.version += 1


@dataclass
class LstmCache:
    owner: int
    version: int
    inputs: list[np.ndarray] = field(default_factory=list)  # per layer (B, T, in)
    gates: list[np.ndarray] = field(default_factory=list)  # per layer (B, T, 4H), post-activation
    cells: list[np.ndarray] = field(default_factory=list)  # per layer (B, T+1, H), index 0 = init
    hiddens: list[np.ndarray] = field(default_factory=list)  # per layer (B, T+1, H)
    squeeze: bool = False


def lstm_forward(stack: LstmStack, sequence: np.ndarray, init: tuple[np.ndarray, np.ndarray] | None = None,
                 keep_cache: bool = True) -> tuple[np.ndarray, LstmCache | None]:
    """Run the stack over ``sequence`` of shape (B, T, in) or (T, in).

    ``init`` is an optional (h0, c0) pair, each (layers, B, H). Returns the
    read-out at every step, shape (B, T, out).
    """
    x = np.asarray(sequence, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.ndim != 3 or x.shape[-1] != stack.in_dim:
        raise ShapeError(f"expected (B, T, {stack.in_dim}) sequence, got {x.shape}")
    bsz, steps, _ = x.shape
    if steps == 0:
        raise ShapeError("empty sequence")
    hdim = stack.hidden
    cache = LstmCache(id(stack), stack.version, squeeze=squeeze) if keep_cache else None
    for li, (wx, wh, b) in enumerate(stack.layers):
        if init is None:
            h = np.zeros((bsz, hdim))
            c = np.zeros((bsz, hdim))
        else:
            h, c = init[0][li], init[1][li]
        pre = x @ wx + b  # input contributions for every step at once
        out_h = np.empty((bsz, steps + 1, hdim))
        out_h[:, 0] = h
        if keep_cache:
            gates = np.empty((bsz, steps, 4 * hdim))
            cells = np.empty((bsz, steps + 1, hdim))
            cells[:, 0] = c
        for t in range(steps):
            z = pre[:, t] + h @ wh
            g = np.empty_like(z)
            g[:, : 3 * hdim] = _sigmoid(z[:, : 3 * hdim])
            g[:, 3 * hdim:] = np.tanh(z[:, 3 * hdim:])
            c = g[:, :hdim] * c + g[:, hdim: 2 * hdim] * g[:, 3 * hdim:]
            h = g[:, 2 * hdim: 3 * hdim] * np.tanh(c)
            out_h[:, t + 1] = h
            if keep_cache:
                gates[:, t] = g
                cells[:, t + 1] = c
        if keep_cache:
            cache.inputs.append(x)
            cache.gates.append(gates)
            cache.cells.append(cells)
            cache.hiddens.append(out_h)
        x = out_h[:, 1:]
    y = x @ stack.w_out + stack.b_out
    return (y[0] if squeeze else y), cache


def lstm_backward(stack: LstmStack, cache: LstmCache, dy_sequence: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Backpropagation through time over the full window.

    Returns (grads aligned with ``stack.params()``, dL/d(input sequence)).
    """
    if cache is None or cache.owner != id(stack) or cache.version != stack.version:
        raise StaleCacheError("LSTM cache does not match current parameters")
    dy = np.asarray(dy_sequence, dtype=np.float64)
    if cache.squeeze:
        dy = dy[None]
    top = cache.hiddens[-1][:, 1:]
    if dy.shape != top.shape[:2] + (stack.out_dim,):
        raise ShapeError(f"dy shape {dy.shape} does not match outputs")
    hdim = stack.hidden
    bsz, steps = dy.shape[:2]
    g_wout = top.reshape(-1, hdim).T @ dy.reshape(-1, stack.out_dim)
    g_bout = dy.sum(axis=(0, 1))
    dh_seq = dy @ stack.w_out.T
    layer_grads = []
    for li in reversed(range(len(stack.layers))):
        wx, wh, _ = stack.layers[li]
        gates, cells, hid = cache.gates[li], cache.cells[li], cache.hiddens[li]
        dz_all = np.empty((bsz, steps, 4 * hdim))
        dh_next = np.zeros((bsz, hdim))
        dc_next = np.zeros((bsz, hdim))
        for t in reversed(range(steps)):
            g = gates[:, t]
            f, i, o, cand = g[:, :hdim], g[:, hdim: 2 * hdim], g[:, 2 * hdim: 3 * hdim], g[:, 3 * hdim:]
            tc = np.tanh(cells[:, t + 1])
            dh = dh_seq[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz = dz_all[:, t]
            dz[:, :hdim] = dc * cells[:, t] * f * (1.0 - f)
            dz[:, hdim: 2 * hdim] = dc * cand * i * (1.0 - i)
            dz[:, 2 * hdim: 3 * hdim] = dh * tc * o * (1.0 - o)
            dz[:, 3 * hdim:] = dc * i * (1.0 - cand * cand)
            dc_next = dc * f
            dh_next = dz @ wh.T
        flat = dz_all.reshape(-1, 4 * hdim)
        g_wx = cache.inputs[li].reshape(-1, wx.shape[0]).T @ flat
        g_wh = hid[:, :-1].reshape(-1, hdim).T @ flat
        g_b = flat.sum(axis=0)
        layer_grads.append((g_wx, g_wh, g_b))
        dh_seq = dz_all @ wx.T
    grads = [g for layer in reversed(layer_grads) for g in layer] + [g_wout, g_bout]
    dx = dh_seq[0] if cache.squeeze else dh_seq
    return grads, dx


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> None:
    """In-place bias-corrected Adam update of ``params``."""
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.shape}")
    if state.m is None:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    step = state.lr / bc1
    for p, g, m, v in zip(params, grads, state.m, state.v):
        tmp = np.multiply(g, 1.0 - state.beta1)
        m *= state.beta1
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - state.beta2
        v *= state.beta2
        v += tmp
        # tmp <- step * m / (sqrt(v / bc2) + eps)
        np.divide(v, bc2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += state.eps
        np.divide(m, tmp, out=tmp)
        tmp *= step
        p -= tmp


def apply_adam(model, grads: list[np.ndarray], state: AdamState) -> None:
    """Adam step on a DenseNet/LstmStack; invalidates earlier caches."""
    params = model.params()
    adam_step(params, grads, state)
    model.version += 1
    check_finite(params, type(model).__name__ + " parameters")


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    entries = [
        {"name": name, "shape": list(a.shape), "dtype": "float64", "data": np.asarray(a, dtype=np.float64).ravel().tolist()}
        for name, a in tensors.items()
    ]
    doc = {"magic": CHECKPOINT_MAGIC, "version": CHECKPOINT_VERSION, "tensors": entries}
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    doc = json.loads(Path(path).read_text())
    if doc.get("magic") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    return {e["name"]: np.asarray(e["data"], dtype=np.float64).reshape(e["shape"]) for e in doc["tensors"]}


def prefixed(prefix: str, model) -> dict[str, np.ndarray]:
    return {f"{prefix}.{name}": p for name, p in model.named_params()}


def unprefixed(prefix: str, tensors: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    head = prefix + "."
    return {k[len(head):]: v for k, v in tensors.items() if k.startswith(head)}
