"""Dense MLP with exact manual backprop, Adam, and a finite-difference oracle.

Networks act on a single vector ``(in,)`` or on a batch of row vectors
``(B, in)``.  All arithmetic is float64.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("tanh", "relu", "identity")


@dataclass
class Layer:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ValueError("layer weight/bias shapes disagree")


class DenseNet:
    """Stack of affine layers; tanh hidden activations, identity output head."""

    def __init__(self, layers):
        self.layers = list(layers)
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.W.shape[0] != nxt.W.shape[1]:
                raise ValueError("consecutive layer dimensions do not chain")

    @classmethod
    def init(cls, sizes, rng, hidden="tanh", output="identity"):
        """Glorot-uniform initialised network with layer widths ``sizes``."""
        layers = []
        for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            r = np.sqrt(6.0 / (n_in + n_out))
            W = rng.uniform(-r, r, size=(n_out, n_in))
            act = output if k == len(sizes) - 2 else hidden
            layers.append(Layer(W, np.zeros(n_out), act))
        return cls(layers)

    @classmethod
    def zeros(cls, sizes, hidden="tanh", output="identity"):
        layers = []
        for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            act = output if k == len(sizes) - 2 else hidden
            layers.append(Layer(np.zeros((n_out, n_in)), np.zeros(n_out), act))
        return cls(layers)

    @property
    def n_in(self):
        return self.layers[0].W.shape[1]

    @property
    def n_out(self):
        return self.layers[-1].W.shape[0]

    @property
    def sizes(self):
        return [self.n_in] + [layer.W.shape[0] for layer in self.layers]

    def params(self):
        """Parameter arrays in a fixed order: W1, b1, W2, b2, ..."""
        out = []
        for layer in self.layers:
            out.extend([layer.W, layer.b])
        return out

    def copy(self):
        return DenseNet([Layer(l.W.copy(), l.b.copy(), l.activation) for l in self.layers])


@dataclass
class Tape:
    net_id: int
    shapes: tuple
    inputs: list  # input to each layer
    outputs: list  # post-activation output of each layer
    batched: bool


def _activate(name, a):
    if name == "tanh":
        return np.tanh(a)
    if name == "relu":
        return np.maximum(a, 0.0)
    return a


def _activation_grad(name, out, pre_grad):
    # derivative expressed through the layer output
    if name == "tanh":
        return pre_grad * (1.0 - out * out)
    if name == "relu":
        return pre_grad * (out > 0)
    return pre_grad


def _shapes(net):
    return tuple(layer.W.shape for layer in net.layers)


def forward(net, x):
    """Evaluate ``net`` at ``x``; returns ``(output, tape)``."""
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 2
    h = x if batched else x[None, :]
    if h.ndim != 2 or h.shape[1] != net.n_in:
        raise ValueError(f"input dimension {x.shape} does not match network input {net.n_in}")
    inputs, outputs = [], []
    for layer in net.layers:
        inputs.append(h)
        h = _activate(layer.activation, h @ layer.W.T + layer.b)
        outputs.append(h)
    tape = Tape(id(net), _shapes(net), inputs, outputs, batched)
    return (h if batched else h[0]), tape


def backward(net, tape, grad_out):
    """Gradients of ``<grad_out, output>`` w.r.t. every parameter and the input.

    For batched tapes the parameter gradients are summed over rows.
    """
    if tape.net_id != id(net) or tape.shapes != _shapes(net):
        raise ValueError("tape was not produced by this network")
    g = np.asarray(grad_out, dtype=np.float64)
    if not tape.batched:
        g = g[None, :]
    if g.shape != tape.outputs[-1].shape:
        raise ValueError(f"grad_out shape {g.shape} does not match output {tape.outputs[-1].shape}")
    grads = []
    for layer, h_in, h_out in zip(reversed(net.layers), reversed(tape.inputs), reversed(tape.outputs)):
        g = _activation_grad(layer.activation, h_out, g)
        grads.append((g.T @ h_in, g.sum(axis=0)))
        g = g @ layer.W
    param_grads = []
    for gW, gb in reversed(grads):
        param_grads.extend([gW, gb])
    return param_grads, (g if tape.batched else g[0])


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0

    @classmethod
    def for_params(cls, params, **hyper):
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], **hyper)


def adam_step(params, grads, state):
    """One bias-corrected Adam descent step, applied in place.

    Non-finite gradients raise ``FloatingPointError`` before anything changes.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and Adam moments are not congruent")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != np.shape(g) or p.shape != m.shape:
            raise ValueError("params, grads and Adam moments are not congruent")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient passed to adam_step")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def finite_diff_grad(f, params, eps=1e-5):
    """Central-difference gradient of scalar ``f`` at ``params`` (any shape)."""
    theta = np.array(params, dtype=np.float64, copy=True)
    grad = np.zeros_like(theta)
    flat, gflat = theta.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(theta)
        flat[i] = orig - eps
        fm = f(theta)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"objective not finite around coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(analytic, numeric, floor=1e-12):
    """Norm-wise relative discrepancy ||a - n|| / max(||a||, ||n||, floor)."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))


# Array container ---------------------------------------------------------
#
#   bytes 0..7    magic b"HCRLARR\0"
#   bytes 8..11   container version, uint32 little endian
#   bytes 12..19  header length H, uint64 little endian
#   next H bytes  UTF-8 JSON: {"meta": {...}, "arrays": [{"name", "dtype",
#                 "shape", "offset", "nbytes"}, ...]}
#   remainder     concatenated little-endian array payloads (C order)
#
# Output depends only on the inputs, so identical state gives identical bytes.

MAGIC = b"HCRLARR\0"
CONTAINER_VERSION = 1


def save_arrays(path, arrays, meta=None):
    entries, blobs, offset = [], [], 0
    for name in arrays:
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.kind == "f":
            arr = arr.astype("<f8")
        elif arr.dtype.kind in "iu":
            arr = arr.astype("<i8")
        else:
            raise TypeError(f"array {name!r} has unsupported dtype {arr.dtype}")
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "arrays": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", CONTAINER_VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_arrays(path):
    """Inverse of :func:`save_arrays`; returns ``(arrays, meta)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not an array container (bad magic)")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != CONTAINER_VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    header = json.loads(data[20:20 + hlen])
    base = 20 + hlen
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(data):
            raise ValueError(f"{path}: truncated payload for {e['name']!r}")
        buf = data[start:start + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=e["dtype"]).reshape(e["shape"]).copy()
    return arrays, header["meta"]


def net_arrays(net, prefix):
    out = {}
    for k, layer in enumerate(net.layers):
        out[f"{prefix}.{k}.W"] = layer.W
        out[f"{prefix}.{k}.b"] = layer.b
    return out


def net_from_arrays(arrays, prefix, activations):
    layers = []
    for k, act in enumerate(activations):
        layers.append(Layer(arrays[f"{prefix}.{k}.W"], arrays[f"{prefix}.{k}.b"], act))
    return DenseNet(layers)
