"""Minimal differentiable-computation core: dense nets with exact manual
reverse-mode gradients, an Adam optimizer, Gumbel-Softmax relaxation,
sinusoidal step embeddings, and a validated checkpoint format.

No tape, no graph: every model in this repo is a composition of Mlp calls,
and callers assemble chain rules from (param_grads, input_grads) pairs.
Gradient correctness is pinned by finite-difference tests.
"""

from __future__ import annotations

import json

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity")


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


class Mlp:
    """Fully connected net. `sizes` = [in, hidden..., out]; the activation
    sits between layers, and an optional softmax head normalizes the output
    rows."""

    def __init__(self, sizes, activation: str = "relu", head: str | None = None,
                 rng: np.random.Generator | None = None, init_scale: float | None = None):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if head not in (None, "softmax"):
            raise ValueError(f"unknown head {head!r}")
        rng = rng or np.random.default_rng(0)
        self.sizes = list(sizes)
        self.activation = activation
        self.head = head
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            scale = init_scale
            if scale is None:
                scale = np.sqrt(2.0 / fan_in) if activation == "relu" else np.sqrt(1.0 / fan_in)
            self.weights.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    # -- forward ------------------------------------------------------------

    def _act(self, z):
        if self.activation == "relu":
            return np.maximum(z, 0.0)
        if self.activation == "tanh":
            return np.tanh(z)
        return z

    def forward_cached(self, x: np.ndarray):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.sizes[0]:
            raise ValueError(f"input width {x.shape[1]} != {self.sizes[0]}")
        acts = [x]
        h = x
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = self._act(z) if i < n - 1 else z
            acts.append(h)
        out = softmax(h) if self.head == "softmax" else h
        return out, {"acts": acts, "out": out}

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.forward_cached(x)[0]

    # -- backward -----------------------------------------------------------

    def backward(self, cache, grad_out: np.ndarray):
        """Exact reverse-mode gradients for a cached forward pass.

        Returns (param_grads, grad_x) where param_grads is a flat list
        [dW0, db0, dW1, db1, ...] matching `params()`.
        """
        if cache is None:
            raise ValueError("backward called without a recorded forward pass")
        acts = cache["acts"]
        g = np.asarray(grad_out, dtype=float)
        if g.ndim == 1:
            g = g[None, :]
        if self.head == "softmax":
            y = cache["out"]
            g = y * (g - (g * y).sum(axis=1, keepdims=True))
        param_grads = [None] * (2 * len(self.weights))
        n = len(self.weights)
        for i in range(n - 1, -1, -1):
            h_out = acts[i + 1]
            if i < n - 1:  # undo the activation
                if self.activation == "relu":
                    g = g * (h_out > 0.0)
                elif self.activation == "tanh":
                    g = g * (1.0 - h_out**2)
            param_grads[2 * i] = acts[i].T @ g
            param_grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return param_grads, g

    # -- parameters ---------------------------------------------------------

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, flat: np.ndarray):
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.n_params():
            raise ValueError("flat parameter vector has the wrong size")
        i = 0
        for p in self.params():
            p[...] = flat[i : i + p.size].reshape(p.shape)
            i += p.size


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def softmax_cross_entropy(logits: np.ndarray, target_index: np.ndarray):
    """Mean cross entropy over rows with the fused softmax gradient."""
    logp = log_softmax(logits)
    rows = np.arange(logits.shape[0])
    loss = -logp[rows, target_index].mean()
    grad = softmax(logits)
    grad[rows, target_index] -= 1.0
    return loss, grad / logits.shape[0]


def mse(pred: np.ndarray, target: np.ndarray):
    diff = pred - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def adam_init(params) -> dict:
    return {
        "m": [np.zeros_like(p) for p in params],
        "v": [np.zeros_like(p) for p in params],
        "t": 0,
    }


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """Standard bias-corrected adaptive-moment update, in place."""
    if len(params) != len(grads):
        raise ValueError("params/grads length mismatch")
    state["t"] += 1
    t = state["t"]
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if p.shape != g.shape:
            raise ValueError("parameter/gradient shape mismatch")
        m[...] = beta1 * m + (1.0 - beta1) * g
        v[...] = beta2 * v + (1.0 - beta2) * g**2
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.state = adam_init(params)
        self.hp = dict(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self, grads):
        adam_step(self.params, grads, self.state, **self.hp)


# ---------------------------------------------------------------------------
# Stochastic relaxations and embeddings
# ---------------------------------------------------------------------------

def gumbel_softmax(logits: np.ndarray, temperature: float,
                   rng: np.random.Generator, hard: bool = False) -> np.ndarray:
    """Relaxed one-hot sample; `hard` snaps to the perturbed argmax
    (straight-through style sampling)."""
    if temperature <= 0.0:
        raise ValueError("temperature must be positive")
    u = rng.uniform(1e-12, 1.0 - 1e-12, size=np.shape(logits))
    g = -np.log(-np.log(u))
    y = softmax((np.asarray(logits, dtype=float) + g) / temperature, axis=-1)
    if hard:
        onehot = np.zeros_like(y)
        idx = np.argmax(y, axis=-1)
        np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
        return onehot
    return y


def sinusoidal_embedding(k, dim: int) -> np.ndarray:
    """Standard sin/cos positional embedding of integer step indices."""
    k = np.atleast_1d(np.asarray(k, dtype=float))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = k[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


# ---------------------------------------------------------------------------
# Checkpoints: npz blob with a JSON shape manifest; loaders validate it.
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays: dict, meta: dict | None = None):
    manifest = {
        "version": CHECKPOINT_VERSION,
        "shapes": {k: list(v.shape) for k, v in arrays.items()},
        "meta": meta or {},
    }
    np.savez(path, __manifest__=np.frombuffer(
        json.dumps(manifest).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path):
    with np.load(path) as z:
        manifest = json.loads(bytes(z["__manifest__"]).decode())
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise ValueError("unsupported checkpoint version")
        arrays = {}
        for k, shape in manifest["shapes"].items():
            arr = z[k]
            if list(arr.shape) != shape:
                raise ValueError(f"checkpoint array {k!r} shape mismatch")
            arrays[k] = arr
    return arrays, manifest["meta"]
