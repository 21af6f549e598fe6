"""Dense networks with hand-written backprop, softmax helpers and Adam."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ACTIVATIONS = ("tanh", "identity")


@dataclass
class Dense:
    weights: np.ndarray  # (in, out)
    biases: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.biases.shape != (self.weights.shape[1],):
            raise ValueError("weights must be (in, out) and biases (out,)")


@dataclass
class GradTape:
    inputs: list
    outputs: list
    squeeze: bool
    used: bool = False


class DenseNet:
    def __init__(self, layers: list[Dense]):
        for a, b in zip(layers, layers[1:]):
            if a.weights.shape[1] != b.weights.shape[0]:
                raise ValueError("consecutive layer shapes do not compose")
        self.layers = layers

    @classmethod
    def init(cls, sizes, rng: np.random.Generator, hidden="tanh", out_scale=1.0) -> "DenseNet":
        """Glorot-uniform weights, zero biases; last layer linear."""
        layers = []
        for i, (n_in, n_out) in enumerate(zip(sizes, sizes[1:])):
            last = i == len(sizes) - 2
            limit = np.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-limit, limit, size=(n_in, n_out))
            if last:
                w *= out_scale
            layers.append(Dense(w, np.zeros(n_out), "identity" if last else hidden))
        return cls(layers)

    @property
    def in_width(self) -> int:
        return self.layers[0].weights.shape[0]

    @property
    def out_width(self) -> int:
        return self.layers[-1].weights.shape[1]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weights, layer.biases))
        return out

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "DenseNet":
        return DenseNet([Dense(l.weights.copy(), l.biases.copy(), l.activation) for l in self.layers])

    def forward(self, x) -> tuple[np.ndarray, GradTape]:
        return forward(self, x)

    def __call__(self, x) -> np.ndarray:
        return forward(self, x)[0]


def forward(net: DenseNet, x) -> tuple[np.ndarray, GradTape]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = np.atleast_2d(x)
    if h.shape[1] != net.in_width:
        raise ValueError(f"input width {h.shape[1]} != {net.in_width}")
    inputs, outputs = [], []
    for layer in net.layers:
        inputs.append(h)
        a = h @ layer.weights + layer.biases
        h = np.tanh(a) if layer.activation == "tanh" else a
        outputs.append(h)
    tape = GradTape(inputs, outputs, squeeze)
    return (h[0] if squeeze else h), tape


def backward(net: DenseNet, tape: GradTape, output_grad) -> tuple[list[np.ndarray], np.ndarray]:
    """Reverse pass. Returns (grads aligned with ``net.params()``, input grad).

    Gradients of batched inputs are summed over the batch.
    """
    if tape.used:
        raise RuntimeError("gradient tape already consumed")
    tape.used = True
    g = np.atleast_2d(np.asarray(output_grad, dtype=np.float64))
    grads: list[np.ndarray] = []
    for layer, h_in, h_out in zip(reversed(net.layers), reversed(tape.inputs), reversed(tape.outputs)):
        if layer.activation == "tanh":
            g = g * (1.0 - h_out * h_out)
        grads.append(g.sum(axis=0))
        grads.append(h_in.T @ g)
        g = g @ layer.weights.T
    grads.reverse()
    return grads, (g[0] if tape.squeeze else g)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


# -- optimizer -----------------------------------------------------------------

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr: float, betas=ADAM_BETAS, eps=ADAM_EPS) -> AdamState:
    """In-place Adam update (Kingma & Ba, bias-corrected)."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and state lengths differ")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


@dataclass
class Adam:
    params: list[np.ndarray]
    lr: float = 1e-3
    betas: tuple[float, float] = ADAM_BETAS
    eps: float = ADAM_EPS
    state: AdamState = field(init=False)

    def __post_init__(self):
        self.state = AdamState.zeros_like(self.params)

    def step(self, grads) -> None:
        adam_step(self.params, grads, self.state, self.lr, self.betas, self.eps)


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(nets: dict[str, DenseNet], path) -> None:
    """``<path>.bin`` holds float64 little-endian params; ``<path>.json`` the shapes."""
    path = Path(path)
    manifest = {"dtype": "<f8", "nets": {}}
    chunks = []
    offset = 0
    for name, net in nets.items():
        entries = []
        for layer in net.layers:
            entries.append({
                "in": layer.weights.shape[0],
                "out": layer.weights.shape[1],
                "activation": layer.activation,
                "offset": offset,
            })
            chunks.append(layer.weights.ravel())
            chunks.append(layer.biases)
            offset += layer.weights.size + layer.biases.size
        manifest["nets"][name] = entries
    flat = np.concatenate(chunks).astype("<f8") if chunks else np.zeros(0, "<f8")
    path.with_suffix(".bin").write_bytes(flat.tobytes())
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_checkpoint(path) -> dict[str, DenseNet]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    flat = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8").astype(np.float64)
    nets = {}
    for name, entries in manifest["nets"].items():
        layers = []
        for e in entries:
            n_w = e["in"] * e["out"]
            start = e["offset"]
            w = flat[start:start + n_w].reshape(e["in"], e["out"]).copy()
            b = flat[start + n_w:start + n_w + e["out"]].copy()
            layers.append(Dense(w, b, e["activation"]))
        nets[name] = DenseNet(layers)
    return nets
