"""Unconditional trajectory DDPM: noise schedule, forward corruption,
denoiser training on pooled marginal trajectories, ancestral sampling, and
the hard projection back onto the discrete encoding.

The sampler core takes an optional per-step hook so guided sampling (next
stage) reuses exactly the same loop and randomness stream; with a no-op
hook the two are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffnet
from .encoding import TrajectoryLayout, project

TIME_EMB_DIM = 32
DENOISER_HIDDEN = (256, 256, 256)
PROJECT_TAIL = 5          # reverse steps that get the soft projection blend
PROJECT_BLEND = 0.5


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta schedule; index k runs 1..K, alpha_bar(0) = 1."""

    n_steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    betas: np.ndarray = field(default=None)
    alpha_bars: np.ndarray = field(default=None)

    def __post_init__(self):
        betas = np.linspace(self.beta_start, self.beta_end, self.n_steps)
        if not ((betas > 0.0).all() and (betas < 1.0).all()):
            raise ValueError("betas must lie in (0, 1)")
        alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    def beta(self, k):
        k = np.asarray(k)
        if np.any(k < 1) or np.any(k > self.n_steps):
            raise ValueError("diffusion step out of range")
        return self.betas[k - 1]

    def alpha_bar(self, k):
        k = np.asarray(k)
        if np.any(k < 0) or np.any(k > self.n_steps):
            raise ValueError("diffusion step out of range")
        return self.alpha_bars[k]


def forward_noise(tau0: np.ndarray, k, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Corrupt a clean trajectory to step k: sqrt(ab_k) tau0 + sqrt(1-ab_k) eps."""
    k = np.asarray(k)
    if np.any(k < 1):
        raise ValueError("forward_noise needs k >= 1")
    ab = schedule.alpha_bar(k)
    shape = (-1,) + (1,) * (tau0.ndim - 1) if k.ndim else ()
    ab = ab.reshape(shape) if k.ndim else ab
    return np.sqrt(ab) * tau0 + np.sqrt(1.0 - ab) * eps


def ddpm_step(tau_k: np.ndarray, eps_hat: np.ndarray, k: int,
              schedule: NoiseSchedule, z: np.ndarray | None = None) -> np.ndarray:
    """Ancestral reverse update tau_k -> tau_{k-1}; deterministic at k=1."""
    if k < 1 or k > schedule.n_steps:
        raise ValueError("diffusion step out of range")
    beta = schedule.beta(k)
    ab_k = schedule.alpha_bar(k)
    ab_prev = schedule.alpha_bar(k - 1)
    mu = (tau_k - beta / np.sqrt(1.0 - ab_k) * eps_hat) / np.sqrt(1.0 - beta)
    if k == 1:
        return mu
    sigma = np.sqrt(beta * (1.0 - ab_prev) / (1.0 - ab_k))
    if z is None:
        z = np.zeros_like(tau_k)
    return mu + sigma * z


class DenoiserNet:
    """Step-conditioned trajectory net.

    Hidden layers are FiLM-modulated tanh blocks (scale and shift computed
    from the sinusoidal step embedding) and the head adds a step-gated
    per-coordinate linear skip. The net regresses the velocity target
    v = sqrt(ab)*eps - sqrt(1-ab)*tau0, which is well-scaled at every
    diffusion step; the noise prediction is recovered by the exact identity
    eps_hat = sqrt(ab)*v_hat + sqrt(1-ab)*tau_k.
    """

    def __init__(self, width: int, hidden=DENOISER_HIDDEN, emb_dim: int = TIME_EMB_DIM,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.width = width
        self.emb_dim = emb_dim
        self.hidden = tuple(hidden)
        sizes = [width, *hidden]
        self.w = [rng.normal(0.0, np.sqrt(1.0 / sizes[i]), size=(sizes[i], sizes[i + 1]))
                  for i in range(len(hidden))]
        self.b = [np.zeros(h) for h in hidden]
        self.g = [rng.normal(0.0, 0.1, size=(emb_dim, h)) for h in hidden]   # FiLM scale
        self.c = [rng.normal(0.0, 0.1, size=(emb_dim, h)) for h in hidden]   # FiLM shift
        self.w_out = rng.normal(0.0, np.sqrt(1.0 / hidden[-1]), size=(hidden[-1], width))
        self.b_out = np.zeros(width)
        self.skip = rng.normal(0.0, 0.1, size=(emb_dim, width))

    def params(self) -> list[np.ndarray]:
        out = []
        for i in range(len(self.hidden)):
            out.extend([self.w[i], self.b[i], self.g[i], self.c[i]])
        out.extend([self.w_out, self.b_out, self.skip])
        return out

    def forward_cached(self, tau_flat: np.ndarray, emb: np.ndarray):
        cache = {"tau": tau_flat, "emb": emb, "act": [], "gain": [], "inputs": []}
        h = tau_flat
        for i in range(len(self.hidden)):
            cache["inputs"].append(h)
            z = h @ self.w[i] + self.b[i]
            a = np.tanh(z)
            gain = 1.0 + emb @ self.g[i]
            h = gain * a + emb @ self.c[i]
            cache["act"].append(a)
            cache["gain"].append(gain)
        s_gate = emb @ self.skip
        v_hat = h @ self.w_out + self.b_out + s_gate * tau_flat
        cache["h_last"] = h
        cache["s_gate"] = s_gate
        return v_hat, cache

    def backward(self, cache, grad_v: np.ndarray):
        """Gradients of sum(grad_v * v_hat) for all params and tau."""
        emb = cache["emb"]
        tau = cache["tau"]
        grads = {}
        grads["w_out"] = cache["h_last"].T @ grad_v
        grads["b_out"] = grad_v.sum(axis=0)
        grads["skip"] = emb.T @ (grad_v * tau)
        g_tau = grad_v * cache["s_gate"]
        g_h = grad_v @ self.w_out.T
        for i in range(len(self.hidden) - 1, -1, -1):
            a = cache["act"][i]
            gain = cache["gain"][i]
            grads[f"g{i}"] = emb.T @ (g_h * a)
            grads[f"c{i}"] = emb.T @ g_h
            g_z = g_h * gain * (1.0 - a**2)
            h_in = cache["inputs"][i]
            grads[f"w{i}"] = h_in.T @ g_z
            grads[f"b{i}"] = g_z.sum(axis=0)
            g_h = g_z @ self.w[i].T
        g_tau = g_tau + g_h
        ordered = []
        for i in range(len(self.hidden)):
            ordered.extend([grads[f"w{i}"], grads[f"b{i}"], grads[f"g{i}"], grads[f"c{i}"]])
        ordered.extend([grads["w_out"], grads["b_out"], grads["skip"]])
        return ordered, g_tau


@dataclass
class Denoiser:
    """Noise predictor over flattened trajectories conditioned on the
    diffusion step via a sinusoidal embedding."""

    net: DenoiserNet
    schedule: NoiseSchedule
    layout_manifest: dict
    history: dict = field(default_factory=dict)

    @property
    def traj_shape(self) -> tuple[int, int]:
        return self.layout_manifest["horizon"], self.layout_manifest["width"]

    def _emb(self, k, n: int) -> np.ndarray:
        kk = np.broadcast_to(np.asarray(k, dtype=float), (n,))
        return diffnet.sinusoidal_embedding(kk, TIME_EMB_DIM)

    def _ab(self, k, n: int) -> np.ndarray:
        kk = np.broadcast_to(np.asarray(k), (n,))
        return self.schedule.alpha_bar(kk)[:, None]

    def predict(self, tau: np.ndarray, k) -> np.ndarray:
        return self.predict_cached(tau, k)[0]

    def predict_cached(self, tau: np.ndarray, k):
        t, d = self.traj_shape
        flat = tau.reshape(-1, t * d)
        ab = self._ab(k, flat.shape[0])
        v_hat, cache = self.net.forward_cached(flat, self._emb(k, flat.shape[0]))
        eps = np.sqrt(ab) * v_hat + np.sqrt(1.0 - ab) * flat
        cache["ab"] = ab
        return eps.reshape(tau.shape), cache

    def backward(self, cache, grad_eps_flat: np.ndarray):
        """(param_grads, grad_tau_flat) of sum(grad * eps_hat)."""
        ab = cache["ab"]
        grads, g_tau = self.net.backward(cache, np.sqrt(ab) * grad_eps_flat)
        return grads, g_tau + np.sqrt(1.0 - ab) * grad_eps_flat

    def backward_to_tau(self, cache, grad_eps: np.ndarray) -> np.ndarray:
        """VJP of predict() back to the trajectory entries."""
        t, d = self.traj_shape
        _, g_tau = self.backward(cache, grad_eps.reshape(-1, t * d))
        return g_tau.reshape(grad_eps.shape)

    def checkpoint_arrays(self):
        arrays = {f"p{j}": p for j, p in enumerate(self.net.params())}
        meta = {
            "width": self.net.width,
            "hidden": list(self.net.hidden),
            "emb_dim": self.net.emb_dim,
            "schedule": {
                "n_steps": self.schedule.n_steps,
                "beta_start": self.schedule.beta_start,
                "beta_end": self.schedule.beta_end,
            },
            "layout_manifest": self.layout_manifest,
            "history": self.history,
        }
        return arrays, meta

    @staticmethod
    def from_checkpoint(arrays, meta) -> "Denoiser":
        net = DenoiserNet(meta["width"], hidden=meta["hidden"], emb_dim=meta["emb_dim"])
        for j, p in enumerate(net.params()):
            p[...] = arrays[f"p{j}"]
        sched = NoiseSchedule(**meta["schedule"])
        return Denoiser(net, sched, meta["layout_manifest"], meta.get("history", {}))


def train_denoiser(pool: np.ndarray, schedule: NoiseSchedule, layout: TrajectoryLayout,
                   seed: int = 0, steps: int = 4000, batch: int = 64,
                   lr: float = 1e-3, hidden=DENOISER_HIDDEN,
                   val_frac: float = 0.1, log_every: int = 100) -> Denoiser:
    """Minimize the per-coordinate noise-prediction error on pooled encoded
    trajectories (unit-variance noise scores 1.0 by construction)."""
    if pool.shape[0] == 0:
        raise ValueError("empty trajectory pool")
    rng = np.random.default_rng(seed)
    t, d = pool.shape[1], pool.shape[2]
    n_val = max(1, int(round(val_frac * pool.shape[0]))) if pool.shape[0] > 1 else 0
    val = pool[:n_val]
    train = pool[n_val:] if n_val < pool.shape[0] else pool

    net = DenoiserNet(t * d, hidden=hidden, rng=rng)
    den = Denoiser(net, schedule, layout.manifest())
    opt = diffnet.Adam(net.params(), lr=lr)

    # Fixed validation corruption so the metric is comparable across steps.
    val_rng = np.random.default_rng((seed, 1))
    val_k = val_rng.integers(1, schedule.n_steps + 1, size=val.shape[0])
    val_eps = val_rng.standard_normal(val.shape)

    def val_loss():
        if val.shape[0] == 0:
            return float("nan")
        tau_k = forward_noise(val, val_k, val_eps, schedule)
        return float(np.mean((den.predict(tau_k, val_k) - val_eps) ** 2))

    history = {"step": [], "train": [], "val": []}
    for it in range(steps):
        idx = rng.integers(0, train.shape[0], size=batch)
        tau0 = train[idx]
        k = rng.integers(1, schedule.n_steps + 1, size=batch)
        eps = rng.standard_normal(tau0.shape)
        tau_k = forward_noise(tau0, k, eps, schedule)
        pred, cache = den.predict_cached(tau_k, k)
        diff = (pred - eps).reshape(batch, -1)
        loss = float(np.mean(diff**2))
        grads, _ = den.backward(cache, 2.0 * diff / diff.size)
        opt.step(grads)
        if it % log_every == 0 or it == steps - 1:
            history["step"].append(it)
            history["train"].append(loss)
            history["val"].append(val_loss())
    den.history = history
    return den


def sample_core(n: int, schedule: NoiseSchedule, denoiser: Denoiser,
                layout: TrajectoryLayout, seed: int, guide_hook=None):
    """Shared ancestral sampling loop.

    guide_hook(tau_k, eps_hat, k) -> modified eps_hat (or None to keep); the
    randomness stream does not depend on the hook, so a no-op hook
    reproduces unguided samples bit-exactly.
    """
    rng = np.random.default_rng(seed)
    t, d = denoiser.traj_shape
    tau = rng.standard_normal((n, t, d))
    for k in range(schedule.n_steps, 0, -1):
        eps_hat = denoiser.predict(tau, k)
        if guide_hook is not None:
            modified = guide_hook(tau, eps_hat, k)
            if modified is not None:
                eps_hat = modified
        z = rng.standard_normal(tau.shape) if k > 1 else None
        tau = ddpm_step(tau, eps_hat, k, schedule, z)
        j = k - 1
        if 1 <= j <= PROJECT_TAIL:
            tau = (1.0 - PROJECT_BLEND) * tau + PROJECT_BLEND * project(tau, layout)
    return project(tau, layout)


def sample_unguided(n: int, schedule: NoiseSchedule, denoiser: Denoiser,
                    layout: TrajectoryLayout, seed: int) -> np.ndarray:
    """Prior samples: valid (projected) encoded trajectories."""
    return sample_core(n, schedule, denoiser, layout, seed, guide_hook=None)
