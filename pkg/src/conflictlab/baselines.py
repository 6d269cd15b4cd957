"""Comparison searchers over the shared surrogate models: random search,
backpropagation through time, and the cross-entropy method, all optimizing
the same deterministic surrogate objective via autoregressive mean-model
rollouts."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import diffnet
from .conflict import ConflictSpec, relaxed_phi
from .datafiles import sample_random_condition
from .encoding import (
    TrajectoryLayout,
    norm_pos,
    denorm_pos,
    soft_features_backward,
    soft_state_features,
)
from .netsim import LOW, LEVEL_WATTS, Condition, Exogenous, NetworkState, SimConfig
from .scenarios import action_kinds
from .surrogate import DynamicsEnsemble, PolicyEnsemble


@dataclass
class SurrogateModels:
    pol_a: PolicyEnsemble
    pol_b: PolicyEnsemble
    dyn: DynamicsEnsemble


@dataclass
class SearchResult:
    """Common output of every searcher: ranked conditions + their scores."""

    method: str
    scenario: str
    seed: int
    conditions: list
    j_hat: np.ndarray
    wall_clock_s: float = 0.0
    surrogate_queries: float = 0.0
    extras: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Condition <-> relaxed vector codec (shared by CEM and BPTT)
# ---------------------------------------------------------------------------

class ConditionCodec:
    """[pos_n | assoc logits | power logits | headings theta] as one vector."""

    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        n, m, t = cfg.n_ue, cfg.n_bs, cfg.horizon
        self.c = m + 1
        self.sizes = (2 * n, n * self.c, 3 * m, t * n)
        self.dim = sum(self.sizes)

    def split(self, vec: np.ndarray):
        n, m, t = self.cfg.n_ue, self.cfg.n_bs, self.cfg.horizon
        a, b, c, _ = np.cumsum(self.sizes)
        pos = vec[..., :a].reshape(vec.shape[:-1] + (n, 2))
        al = vec[..., a:b].reshape(vec.shape[:-1] + (n, self.c))
        pl = vec[..., b:c].reshape(vec.shape[:-1] + (m, 3))
        th = vec[..., c:].reshape(vec.shape[:-1] + (t, n))
        return pos, al, pl, th

    def to_condition(self, vec: np.ndarray) -> Condition:
        pos_n, al, pl, th = self.split(vec)
        pos = denorm_pos(np.clip(pos_n, -1.0, 1.0), self.cfg)
        assoc_cats = al.argmax(axis=-1)
        assoc = np.where(assoc_cats == self.cfg.n_bs, -1, assoc_cats)
        power = pl.argmax(axis=-1)
        s0 = NetworkState.make(pos, assoc, power, self.cfg)
        return Condition.make(s0, [Exogenous.make(h) for h in th])

    def from_condition(self, u: Condition) -> np.ndarray:
        cfg = self.cfg
        cats = np.where(u.s0.assoc == -1, cfg.n_bs, u.s0.assoc)
        al = np.full((cfg.n_ue, self.c), -1.0)
        al[np.arange(cfg.n_ue), cats] = 1.0
        pl = np.full((cfg.n_bs, 3), -1.0)
        pl[np.arange(cfg.n_bs), u.s0.power] = 1.0
        th = np.stack([e.headings for e in u.exo])
        return np.concatenate(
            [norm_pos(u.s0.ue_pos, cfg).ravel(), al.ravel(), pl.ravel(), th.ravel()]
        )


def condition_to_rollout_inputs(u: Condition, cfg: SimConfig):
    """Hard condition -> (pos_n, assoc probs, power probs, heading sin-cos)."""
    cats = np.where(u.s0.assoc == -1, cfg.n_bs, u.s0.assoc)
    pa = np.zeros((1, cfg.n_ue, cfg.n_bs + 1))
    pa[0, np.arange(cfg.n_ue), cats] = 1.0
    pp = np.zeros((1, cfg.n_bs, 3))
    pp[0, np.arange(cfg.n_bs), u.s0.power] = 1.0
    th = np.stack([e.headings for e in u.exo])
    hcs = np.stack([np.cos(th), np.sin(th)], axis=-1)[None]
    return norm_pos(u.s0.ue_pos, cfg)[None], pa, pp, hcs


# ---------------------------------------------------------------------------
# Deterministic surrogate rollout (ensemble means, no sampling)
# ---------------------------------------------------------------------------

class SurrogateRollout:
    """Batched autoregressive rollout under the mean surrogate models.

    Deterministic given the condition inputs. `record` keeps the caches
    needed for the BPTT reverse pass and for per-step uncertainty traces.
    """

    def __init__(self, models: SurrogateModels, cfg: SimConfig, spec: ConflictSpec,
                 scenario: str):
        self.models = models
        self.cfg = cfg
        self.spec = spec
        self.scenario = scenario

    def run(self, pos_n, pa0, pp0, hcs, record: bool = False,
            uncertainties: bool = False):
        cfg, spec = self.cfg, self.spec
        t_len = hcs.shape[1]
        ma, mb, dyn = self.models.pol_a, self.models.pol_b, self.models.dyn
        feats = soft_state_features(pos_n, pa0, pp0, cfg, with_grads=False)
        feats0_grads = None
        if record:
            feats, feats0_grads = soft_state_features(pos_n, pa0, pp0, cfg, with_grads=True)

        b = feats.shape[0]
        phi = np.zeros((b, t_len))
        tape = {"feats": [], "pol": [], "dyn": [], "phi": []}
        u_dyn = np.zeros((b, t_len))
        u_pi = np.zeros((b, t_len))
        hard_actions = []

        for t in range(t_len):
            probs_a, caches_a = ma.probs_cached(feats)
            probs_b, caches_b = mb.probs_cached(feats)
            mean_a, mean_b = probs_a.mean(axis=0), probs_b.mean(axis=0)
            val, g_a, g_b = relaxed_phi(self.scenario, mean_a, mean_b, spec, cfg.n_bs)
            phi[:, t] = val
            if uncertainties:
                dev_a = probs_a - mean_a
                dev_b = probs_b - mean_b
                u_pi[:, t] = (dev_a**2).sum(axis=(2, 3)).mean(axis=0) + (
                    dev_b**2
                ).sum(axis=(2, 3)).mean(axis=0)
                hard_actions.append((mean_a.argmax(axis=-1), mean_b.argmax(axis=-1)))
            if record:
                tape["feats"].append(feats)
                tape["pol"].append((probs_a, caches_a, probs_b, caches_b))
                tape["phi"].append((g_a, g_b))
            if t < t_len - 1:
                x = np.concatenate(
                    [
                        feats,
                        hcs[:, t].reshape(b, -1),
                        (2.0 * mean_a - 1.0).reshape(b, -1),
                        (2.0 * mean_b - 1.0).reshape(b, -1),
                    ],
                    axis=1,
                )
                preds, raws, dcaches = dyn.predictions_cached(x)
                if uncertainties:
                    dev = preds - preds.mean(axis=0)
                    u_dyn[:, t] = (dev**2).sum(axis=2).mean(axis=0)
                if record:
                    tape["dyn"].append((raws, dcaches))
                feats = preds.mean(axis=0)

        out = {"j_hat": phi.sum(axis=1), "phi": phi}
        if uncertainties:
            out["u_dyn"] = u_dyn
            out["u_pi"] = u_pi
            out["hard_actions"] = hard_actions
        if record:
            out["tape"] = tape
            out["feats0_grads"] = feats0_grads
        return out

    def score_condition(self, u: Condition) -> float:
        return float(self.run(*condition_to_rollout_inputs(u, self.cfg))["j_hat"][0])

    def score_conditions(self, conditions) -> np.ndarray:
        parts = [condition_to_rollout_inputs(u, self.cfg) for u in conditions]
        pos = np.concatenate([p[0] for p in parts])
        pa = np.concatenate([p[1] for p in parts])
        pp = np.concatenate([p[2] for p in parts])
        hcs = np.concatenate([p[3] for p in parts])
        return self.run(pos, pa, pp, hcs)["j_hat"]

    # -- reverse pass ---------------------------------------------------------

    def backward(self, out, pos_n, pa0, pp0, grad_j: np.ndarray | None = None):
        """Gradients of sum(grad_j * j_hat) w.r.t. the rollout inputs.

        Returns (g_pos, g_pa0, g_pp0, g_hcs) with g_hcs of shape
        (B, T, n, 2) for the heading sin-cos features.
        """
        cfg = self.cfg
        tape = out["tape"]
        t_len = len(tape["feats"])
        b = tape["feats"][0].shape[0]
        if grad_j is None:
            grad_j = np.ones(b)
        w = grad_j[:, None]
        ma, mb, dyn = self.models.pol_a, self.models.pol_b, self.models.dyn
        g_hcs = np.zeros((b, t_len, cfg.n_ue, 2))
        g_carry = np.zeros_like(tape["feats"][0])

        for t in range(t_len - 1, -1, -1):
            probs_a, caches_a, probs_b, caches_b = tape["pol"][t]
            g_phi_a, g_phi_b = tape["phi"][t]
            g_mean_a = g_phi_a * w[..., None]
            g_mean_b = g_phi_b * w[..., None]
            g_feats = np.zeros_like(g_carry)
            if t < t_len - 1:
                raws, dcaches = tape["dyn"][t]
                up = np.broadcast_to(g_carry / dyn.n_members,
                                     (dyn.n_members,) + g_carry.shape)
                g_x = dyn.backward_input(raws, dcaches, up)
                s_w = tape["feats"][t].shape[1]
                h_w = 2 * cfg.n_ue
                a_w = g_mean_a.reshape(b, -1).shape[1]
                g_feats += g_x[:, :s_w]
                g_hcs[:, t] = g_x[:, s_w : s_w + h_w].reshape(b, cfg.n_ue, 2)
                g_mean_a = g_mean_a + 2.0 * g_x[:, s_w + h_w : s_w + h_w + a_w].reshape(
                    g_mean_a.shape
                )
                g_mean_b = g_mean_b + 2.0 * g_x[:, s_w + h_w + a_w :].reshape(
                    g_mean_b.shape
                )
            g_feats += ma.backward_input(
                probs_a, caches_a,
                np.broadcast_to(g_mean_a / ma.n_members, probs_a.shape),
            )
            g_feats += mb.backward_input(
                probs_b, caches_b,
                np.broadcast_to(g_mean_b / mb.n_members, probs_b.shape),
            )
            g_carry = g_feats

        g_pos, g_pa0, g_pp0 = soft_features_backward(
            g_carry, pos_n, pa0, pp0, out["feats0_grads"], cfg
        )
        return g_pos, g_pa0, g_pp0, g_hcs


# ---------------------------------------------------------------------------
# Searchers
# ---------------------------------------------------------------------------

def random_search(n: int, models: SurrogateModels, cfg: SimConfig,
                  spec: ConflictSpec, scenario: str, seed: int,
                  batch: int = 256) -> SearchResult:
    """Uniformly sampled conditions scored by the surrogate objective."""
    rng = np.random.default_rng(seed)
    roller = SurrogateRollout(models, cfg, spec, scenario)
    t0 = time.perf_counter()
    conditions = [sample_random_condition(cfg, rng) for _ in range(n)]
    scores = np.concatenate(
        [roller.score_conditions(conditions[i : i + batch]) for i in range(0, n, batch)]
    )
    order = np.argsort(-scores, kind="stable")
    return SearchResult(
        "rs", scenario, seed,
        [conditions[i] for i in order], scores[order],
        wall_clock_s=time.perf_counter() - t0,
    )


def cem_search(models: SurrogateModels, cfg: SimConfig, spec: ConflictSpec,
               scenario: str, seed: int, pop: int = 256, elite_frac: float = 0.1,
               generations: int = 30, var_floor: float = 1e-4,
               init_std: float = 1.0, objective=None) -> SearchResult:
    """Gaussian cross-entropy search over the relaxed condition vector.

    Samples are hardened before scoring, so every emitted score is exactly
    reproducible from its condition. Returns the final population plus the
    all-time elites, ranked.
    """
    rng = np.random.default_rng(seed)
    codec = ConditionCodec(cfg)
    roller = SurrogateRollout(models, cfg, spec, scenario)

    def default_objective(vecs):
        return roller.score_conditions([codec.to_condition(v) for v in vecs])

    objective = objective or default_objective
    n_elite = max(1, int(round(elite_frac * pop)))
    mean = np.zeros(codec.dim)
    var = np.full(codec.dim, init_std**2)
    t0 = time.perf_counter()
    best_pool: list[tuple[float, np.ndarray]] = []
    history = []
    vecs = scores = None
    for _ in range(generations):
        vecs = mean + np.sqrt(var) * rng.standard_normal((pop, codec.dim))
        scores = np.asarray(objective(vecs))
        elite_idx = np.argsort(-scores, kind="stable")[:n_elite]
        elites = vecs[elite_idx]
        mean = elites.mean(axis=0)
        var = np.maximum(elites.var(axis=0), var_floor)
        history.append(float(scores[elite_idx].mean()))
        for i in elite_idx:
            best_pool.append((float(scores[i]), vecs[i]))

    pool_vecs = list(vecs) + [v for _, v in best_pool]
    pool_scores = np.concatenate([scores, np.array([s for s, _ in best_pool])])
    order = np.argsort(-pool_scores, kind="stable")
    conditions = [codec.to_condition(pool_vecs[i]) for i in order]
    return SearchResult(
        "cem", scenario, seed, conditions, pool_scores[order],
        wall_clock_s=time.perf_counter() - t0,
        extras={"elite_history": history, "mean": mean, "var": var},
    )


def bptt_search(models: SurrogateModels, cfg: SimConfig, spec: ConflictSpec,
                scenario: str, seed: int, n_restarts: int = 64, steps: int = 40,
                lr: float = 0.05, grad_clip: float = 10.0,
                gumbel_start: float = 1.0, gumbel_end: float = 0.3,
                objective=None) -> SearchResult:
    """Gradient ascent on the surrogate objective through the unrolled
    rollout; relaxed discrete blocks via annealed Gumbel-Softmax, gradient
    norm clipped, per-restart best iterate kept and hardened."""
    rng = np.random.default_rng(seed)
    codec = ConditionCodec(cfg)
    roller = SurrogateRollout(models, cfg, spec, scenario)
    b = n_restarts
    n, m, t_len = cfg.n_ue, cfg.n_bs, cfg.horizon
    c = m + 1

    pos = rng.uniform(-1.0, 1.0, size=(b, n, 2))
    a_logits = rng.normal(0.0, 0.5, size=(b, n, c))
    p_logits = rng.normal(0.0, 0.5, size=(b, m, 3))
    theta = rng.uniform(0.0, 2.0 * np.pi, size=(b, t_len, n))
    params = [pos, a_logits, p_logits, theta]
    opt = diffnet.Adam(params, lr=lr)

    best_obj = np.full(b, -np.inf)
    best_vecs = [None] * b
    history = []
    aborted = []
    t0 = time.perf_counter()

    for it in range(steps):
        temp = gumbel_start * (gumbel_end / gumbel_start) ** (it / max(steps - 1, 1))
        ga = rng.gumbel(size=a_logits.shape)
        gp = rng.gumbel(size=p_logits.shape)
        pa0 = diffnet.softmax((a_logits + ga) / temp)
        pp0 = diffnet.softmax((p_logits + gp) / temp)
        hcs = np.stack([np.cos(theta), np.sin(theta)], axis=-1)

        if objective is not None:
            obj, grads = objective(params)
            g_pos, g_al, g_pl, g_theta = grads
        else:
            out = roller.run(pos, pa0, pp0, hcs, record=True)
            obj = out["j_hat"]
            g_pos, g_pa0, g_pp0, g_hcs = roller.backward(out, pos, pa0, pp0)
            # relaxed one-hots back to logits through the tempered softmax
            g_al = (pa0 * (g_pa0 - (g_pa0 * pa0).sum(axis=-1, keepdims=True))) / temp
            g_pl = (pp0 * (g_pp0 - (g_pp0 * pp0).sum(axis=-1, keepdims=True))) / temp
            g_theta = -g_hcs[..., 0] * np.sin(theta) + g_hcs[..., 1] * np.cos(theta)

        if not np.isfinite(obj).all():
            for i in np.nonzero(~np.isfinite(obj))[0]:
                aborted.append({"restart": int(i), "step": it, "reason": "non-finite objective"})
            obj = np.nan_to_num(obj, nan=-np.inf)

        improved = obj > best_obj
        for i in np.nonzero(improved)[0]:
            best_obj[i] = obj[i]
            best_vecs[i] = np.concatenate(
                [pos[i].ravel(), a_logits[i].ravel(), p_logits[i].ravel(), theta[i].ravel()]
            )
        history.append(float(np.nanmax(best_obj)))

        step_grads = []
        for g in (g_pos, g_al, g_pl, g_theta):
            g = np.nan_to_num(g)
            norm = np.sqrt((g**2).sum(axis=tuple(range(1, g.ndim)), keepdims=True))
            scale = np.minimum(1.0, grad_clip / np.maximum(norm, 1e-12))
            step_grads.append(-g * scale)   # ascent
        opt.step(step_grads)

    conditions = [codec.to_condition(v) for v in best_vecs]
    scores = np.array([roller.score_condition(u) for u in conditions])
    order = np.argsort(-scores, kind="stable")
    return SearchResult(
        "bptt", scenario, seed, [conditions[i] for i in order], scores[order],
        wall_clock_s=time.perf_counter() - t0,
        extras={"best_history": history, "aborted": aborted},
    )
