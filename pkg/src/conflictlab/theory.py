"""Executable theory checks: canonical dynamics decomposition, the
non-identifiability demonstration, empirical constant estimation, per-step
uncertainty radii, the trajectory-mismatch bound, and the conflict
lower-confidence-bound audit.

All Lipschitz constants are sampled finite-difference maxima reported with
their probe budgets: the audit is empirical, not a proof.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .conflict import ConflictSpec, phi_step
from .datafiles import (
    MarginalDataset,
    sample_collection_condition,
    sample_random_condition,
)
from .encoding import TrajectoryLayout, encode_state_features
from .netsim import (
    Condition,
    JointAction,
    NetworkState,
    SimConfig,
    Trajectory,
    step,
)
from .scenarios import Scenario, action_kinds
from .surrogate import DynamicsEnsemble, PolicyEnsemble, calibration_betas
from .xapps import make_policy


@dataclass
class ConstantEstimates:
    l_f: float = 0.0          # dynamics Lipschitz in the state
    l_a: float = 0.0          # dynamics Lipschitz in the joint action
    l_pi: float = 0.0         # policy Lipschitz in the state
    l_c: float = 0.0          # conflict-metric Lipschitz
    l_ab: float = 0.0         # coupling bound
    beta_t: float = 0.0       # dynamics calibration constant
    beta_pi: float = 0.0      # policy calibration constant
    sigma_xi: float = 0.0     # aleatoric noise scale
    delta_cal: float = 0.05   # calibration failure level
    budgets: dict = field(default_factory=dict)

    def __post_init__(self):
        vals = (self.l_f, self.l_a, self.l_pi, self.l_c, self.l_ab,
                self.beta_t, self.beta_pi, self.sigma_xi)
        if any(v < 0 for v in vals):
            raise ValueError("constants must be nonnegative")

    @property
    def l_prime(self) -> float:
        """Closed-loop contraction constant."""
        return self.l_f + 2.0 * self.l_a * self.l_pi

    def to_dict(self) -> dict:
        return {
            "l_f": self.l_f, "l_a": self.l_a, "l_pi": self.l_pi,
            "l_c": self.l_c, "l_ab": self.l_ab, "beta_t": self.beta_t,
            "beta_pi": self.beta_pi, "sigma_xi": self.sigma_xi,
            "delta_cal": self.delta_cal, "l_prime": self.l_prime,
            "budgets": self.budgets,
        }

    @staticmethod
    def from_dict(d: dict) -> "ConstantEstimates":
        return ConstantEstimates(
            d["l_f"], d["l_a"], d["l_pi"], d["l_c"], d["l_ab"],
            d["beta_t"], d["beta_pi"], d["sigma_xi"], d.get("delta_cal", 0.05),
            d.get("budgets", {}),
        )


# ---------------------------------------------------------------------------
# Canonical decomposition
# ---------------------------------------------------------------------------

class DynamicsDecomposition:
    """Feature-space views of the joint dynamics and its canonical split
    into baseline, marginal, and residual-coupling parts."""

    def __init__(self, cfg: SimConfig, scenario: Scenario):
        self.cfg = cfg
        self.scenario = scenario
        self.def_a = make_policy(scenario.default_a, cfg)
        self.def_b = make_policy(scenario.default_b, cfg)

    def f_star(self, s: NetworkState, e, a_a, a_b) -> np.ndarray:
        nxt = step(s, JointAction(np.asarray(a_a), np.asarray(a_b)), e, self.cfg,
                   self.scenario.kind, self.scenario.joint_priority)
        return encode_state_features(nxt, self.cfg)

    def f0(self, s, e) -> np.ndarray:
        return self.f_star(s, e, self.def_a(s), self.def_b(s))

    def f_a(self, s, e, a_a) -> np.ndarray:
        return self.f_star(s, e, a_a, self.def_b(s)) - self.f0(s, e)

    def f_b(self, s, e, a_b) -> np.ndarray:
        return self.f_star(s, e, self.def_a(s), a_b) - self.f0(s, e)

    def f_ab(self, s, e, a_a, a_b) -> np.ndarray:
        return (
            self.f_star(s, e, a_a, a_b)
            - self.f0(s, e)
            - self.f_a(s, e, a_a)
            - self.f_b(s, e, a_b)
        )


def decompose_dynamics(cfg: SimConfig, scenario: Scenario) -> DynamicsDecomposition:
    return DynamicsDecomposition(cfg, scenario)


# ---------------------------------------------------------------------------
# Non-identifiability demonstration
# ---------------------------------------------------------------------------

def _coupling_shift(s: NetworkState, scale: float) -> np.ndarray:
    """Bounded deterministic position perturbation used as the synthetic
    coupling term."""
    phase = s.ue_pos.sum(axis=1) / 300.0
    return scale * np.stack([np.sin(phase), np.cos(phase)], axis=1)


class CoupledSimulator:
    """Simulator variant with an injected coupling term that activates only
    when both actions deviate from their defaults."""

    def __init__(self, cfg: SimConfig, scenario: Scenario, coupling_scale: float):
        self.cfg = cfg
        self.scenario = scenario
        self.scale = coupling_scale
        self.def_a = make_policy(scenario.default_a, cfg)
        self.def_b = make_policy(scenario.default_b, cfg)

    def step(self, s: NetworkState, a: JointAction, e, arbiter=None) -> NetworkState:
        nxt = step(s, a, e, self.cfg, self.scenario.kind,
                   arbiter or self.scenario.joint_priority)
        if self.scale != 0.0:
            both_active = (not np.array_equal(a.a_A, self.def_a(s))) and (
                not np.array_equal(a.a_B, self.def_b(s))
            )
            if both_active:
                wh = np.asarray(self.cfg.arena)
                pos = np.clip(nxt.ue_pos + _coupling_shift(s, self.scale), 0.0, wh)
                nxt = NetworkState.make(pos, nxt.assoc, nxt.power, self.cfg)
        return nxt

    def rollout(self, u: Condition, pol_a, pol_b, arbiter=None) -> Trajectory:
        states, actions = [u.s0], []
        for t in range(u.horizon):
            s = states[-1]
            act = JointAction(pol_a(s), pol_b(s))
            states.append(self.step(s, act, u.exo[t], arbiter))
            actions.append(act)
        return Trajectory(tuple(states), tuple(u.exo), tuple(actions))


def _feature_table(trajs: list[Trajectory], cfg: SimConfig,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """State-feature rows for the KS tables; with an rng, one uniformly
    chosen state per episode (rows within an episode are correlated, which
    would make row-level KS anti-conservative)."""
    rows = []
    for tr in trajs:
        if rng is None:
            rows.extend(encode_state_features(s, cfg) for s in tr.states)
        else:
            rows.append(
                encode_state_features(tr.states[rng.integers(len(tr.states))], cfg)
            )
    return np.asarray(rows)


def nonidentifiability_demo(cfg: SimConfig, scenario: Scenario, seed: int = 0,
                            n_episodes: int = 150, coupling_scale: float = 150.0,
                            alpha: float = 0.01) -> dict:
    """Marginal datasets from coupled and uncoupled simulator variants are
    statistically indistinguishable, while joint-execution datasets from the
    same variants diverge (positive control).

    During marginal collection one side always plays its default, so the
    coupled branch is unreachable and the marginal data are invariant to the
    coupling term under common collection randomness: every per-feature KS
    p-value equals 1 (the tables coincide). A different-seed comparison is
    reported as a supplementary diagnostic of the same equality in law. One
    state per episode enters each table so the KS samples are independent.
    """
    variants = [
        CoupledSimulator(cfg, scenario, 0.0),
        CoupledSimulator(cfg, scenario, coupling_scale),
    ]
    report = {"marginal": {}, "joint": {}, "alpha": alpha}

    for role in ("A", "B"):
        tables, cross = [], []
        for v_idx, sim in enumerate(variants):
            pol_a, pol_b = scenario.marginal_pair(role, cfg)
            arbiter = scenario.marginal_priority(role)

            def collect(collect_seed):
                rng = np.random.default_rng(collect_seed)
                trajs = [
                    sim.rollout(sample_collection_condition(cfg, rng), pol_a, pol_b, arbiter)
                    for _ in range(n_episodes)
                ]
                return _feature_table(trajs, cfg, rng)

            tables.append(collect((seed, 0, role == "B")))
            cross.append(collect((seed, 1 + v_idx, role == "B")))
        pvals = np.array(
            [stats.ks_2samp(tables[0][:, j], tables[1][:, j]).pvalue
             for j in range(tables[0].shape[1])]
        )
        cross_p = np.array(
            [stats.ks_2samp(cross[0][:, j], cross[1][:, j]).pvalue
             for j in range(cross[0].shape[1])]
        )
        report["marginal"][f"D_{role}"] = {
            "min_p": float(pvals.min()),
            "indistinguishable": bool((pvals > alpha).all()),
            "identical_under_common_randomness": bool(
                np.array_equal(tables[0], tables[1])
            ),
            "cross_seed_min_p": float(cross_p.min()),
        }

    pol_a, pol_b = scenario.policies(cfg)
    cond_rng = np.random.default_rng((seed, 7))
    conditions = [sample_random_condition(cfg, cond_rng) for _ in range(n_episodes)]
    tables = [
        _feature_table([sim.rollout(u, pol_a, pol_b) for u in conditions], cfg,
                       np.random.default_rng((seed, 8)))
        for sim in variants
    ]
    pvals = np.array(
        [stats.ks_2samp(tables[0][:, j], tables[1][:, j]).pvalue
         for j in range(tables[0].shape[1])]
    )
    report["joint"] = {
        "min_p": float(pvals.min()),
        "distinguishable": bool((pvals <= alpha).any()),
    }
    report["pass"] = (
        report["marginal"]["D_A"]["indistinguishable"]
        and report["marginal"]["D_B"]["indistinguishable"]
        and report["joint"]["distinguishable"]
    )
    return report


# ---------------------------------------------------------------------------
# Constant estimation
# ---------------------------------------------------------------------------

def estimate_lipschitz(fn, pair_sampler, n_pairs: int, rng: np.random.Generator):
    """max ||fn(x2) - fn(x1)|| / ||x2 - x1|| over sampled input pairs;
    zero-distance pairs are skipped and counted."""
    best, skipped = 0.0, 0
    for _ in range(n_pairs):
        x1, x2, d_in = pair_sampler(rng)
        if d_in <= 1e-12:
            skipped += 1
            continue
        ratio = float(np.linalg.norm(fn(x2) - fn(x1)) / d_in)
        best = max(best, ratio)
    return best, skipped


def _random_state(cfg: SimConfig, rng) -> NetworkState:
    wh = np.asarray(cfg.arena)
    return NetworkState.make(
        rng.uniform(0, 1, (cfg.n_ue, 2)) * wh,
        rng.integers(-1, cfg.n_bs, cfg.n_ue),
        rng.integers(0, 3, cfg.n_bs),
        cfg,
    )


def _random_actions(cfg: SimConfig, scenario_kind: str, rng):
    kind_a, kind_b = action_kinds(scenario_kind)
    def draw(kind):
        if kind == "assoc":
            return rng.integers(-1, cfg.n_bs, cfg.n_ue)
        return rng.integers(0, 3, cfg.n_bs)
    return draw(kind_a), draw(kind_b)


def _random_exo(cfg: SimConfig, rng):
    from .netsim import Exogenous
    return Exogenous.make(rng.uniform(0, 2 * np.pi, cfg.n_ue))


def _action_feat(vec, kind, cfg):
    from .encoding import _encode_action
    return _encode_action(np.asarray(vec), kind, cfg)


def estimate_constants(cfg: SimConfig, scenario: Scenario, spec: ConflictSpec,
                       pol_a: PolicyEnsemble, pol_b: PolicyEnsemble,
                       dyn: DynamicsEnsemble, datasets: list[MarginalDataset],
                       layout: TrajectoryLayout, seed: int = 0,
                       n_pairs: int = 10_000, pos_jitter: float = 60.0) -> ConstantEstimates:
    """Empirical constants: sampled finite-difference maxima in normalized
    feature space, coupling bound from random joint probes, calibration
    betas as 95th-percentile error/sqrt(U) ratios."""
    rng = np.random.default_rng(seed)
    decomp = DynamicsDecomposition(cfg, scenario)
    kind_a, kind_b = action_kinds(scenario.kind)
    true_a = make_policy(scenario.policy_a, cfg)
    true_b = make_policy(scenario.policy_b, cfg)
    wh = np.asarray(cfg.arena)
    budgets = {"n_pairs": n_pairs}

    def perturbed_state(s, rng):
        pos = np.clip(s.ue_pos + rng.normal(0, pos_jitter, s.ue_pos.shape), 0, wh)
        assoc = s.assoc.copy()
        if rng.uniform() < 0.25:
            assoc[rng.integers(cfg.n_ue)] = rng.integers(-1, cfg.n_bs)
        return NetworkState.make(pos, assoc, s.power, cfg)

    # L_F: dynamics vs state, actions held fixed
    def lf_sampler(rng):
        s1 = _random_state(cfg, rng)
        s2 = perturbed_state(s1, rng)
        e = _random_exo(cfg, rng)
        a = _random_actions(cfg, scenario.kind, rng)
        f1 = encode_state_features(s1, cfg)
        f2 = encode_state_features(s2, cfg)
        return (s1, e, a), (s2, e, a), float(np.linalg.norm(f2 - f1))

    def lf_fn(x):
        s, e, a = x
        return decomp.f_star(s, e, a[0], a[1])

    l_f, sk = estimate_lipschitz(lf_fn, lf_sampler, n_pairs // 4, rng)
    budgets["l_f_skipped"] = sk

    # L_a: dynamics vs action, state held fixed
    def la_sampler(rng):
        s = _random_state(cfg, rng)
        e = _random_exo(cfg, rng)
        a1 = _random_actions(cfg, scenario.kind, rng)
        a2 = (a1[0].copy(), a1[1].copy())
        which = rng.integers(2)
        vec = a2[which]
        kind = (kind_a, kind_b)[which]
        i = rng.integers(vec.shape[0])
        vec[i] = rng.integers(-1, cfg.n_bs) if kind == "assoc" else rng.integers(0, 3)
        d = np.linalg.norm(
            np.concatenate([_action_feat(a2[0], kind_a, cfg), _action_feat(a2[1], kind_b, cfg)])
            - np.concatenate([_action_feat(a1[0], kind_a, cfg), _action_feat(a1[1], kind_b, cfg)])
        )
        return (s, e, a1), (s, e, a2), float(d)

    l_a, sk = estimate_lipschitz(lf_fn, la_sampler, n_pairs // 4, rng)
    budgets["l_a_skipped"] = sk

    # L_pi: true policies vs state
    def lpi_sampler(rng):
        s1 = _random_state(cfg, rng)
        s2 = perturbed_state(s1, rng)
        f1 = encode_state_features(s1, cfg)
        f2 = encode_state_features(s2, cfg)
        return s1, s2, float(np.linalg.norm(f2 - f1))

    def lpi_fn(s):
        return np.concatenate(
            [_action_feat(true_a(s), kind_a, cfg), _action_feat(true_b(s), kind_b, cfg)]
        )

    l_pi, sk = estimate_lipschitz(lpi_fn, lpi_sampler, n_pairs // 4, rng)
    budgets["l_pi_skipped"] = sk

    # L_c: conflict metric vs (state features, action features)
    def lc_sampler(rng):
        s1 = _random_state(cfg, rng)
        s2 = perturbed_state(s1, rng)
        a1 = _random_actions(cfg, scenario.kind, rng)
        a2 = _random_actions(cfg, scenario.kind, rng)
        x1 = np.concatenate(
            [encode_state_features(s1, cfg), _action_feat(a1[0], kind_a, cfg),
             _action_feat(a1[1], kind_b, cfg)]
        )
        x2 = np.concatenate(
            [encode_state_features(s2, cfg), _action_feat(a2[0], kind_a, cfg),
             _action_feat(a2[1], kind_b, cfg)]
        )
        return (s1, a1), (s2, a2), float(np.linalg.norm(x2 - x1))

    def lc_fn(x):
        s, a = x
        return np.array([phi_step(s, a[0], a[1], spec)])

    l_c, sk = estimate_lipschitz(lc_fn, lc_sampler, n_pairs // 4, rng)
    budgets["l_c_skipped"] = sk

    # L_AB: residual coupling magnitude over random joint probes
    l_ab = 0.0
    for _ in range(n_pairs // 10):
        s = _random_state(cfg, rng)
        e = _random_exo(cfg, rng)
        a_a, a_b = _random_actions(cfg, scenario.kind, rng)
        l_ab = max(l_ab, float(np.linalg.norm(decomp.f_ab(s, e, a_a, a_b))))
    budgets["l_ab_probes"] = n_pairs // 10

    betas = calibration_betas(pol_a, pol_b, dyn, datasets, layout)
    return ConstantEstimates(
        l_f=l_f, l_a=l_a, l_pi=l_pi, l_c=l_c, l_ab=l_ab,
        beta_t=betas["beta_T"], beta_pi=betas["beta_pi"],
        sigma_xi=cfg.noise_sigma, budgets=budgets,
    )


# ---------------------------------------------------------------------------
# Radii, bounds, and the LCB audit
# ---------------------------------------------------------------------------

@dataclass
class BoundReport:
    r_trace: np.ndarray          # per-step uncertainty radius r_k
    mismatch_bound: np.ndarray   # per-step trajectory-mismatch bound
    big_r: float                 # R(u)
    j_hat_audit: float           # hard conflict metric over the hardened rollout
    j_true: float | None = None
    certificate: bool = False    # j_hat_audit > R(u)
    lcb_satisfied: bool | None = None

    def __post_init__(self):
        if (self.r_trace < 0).any() or self.big_r < 0:
            raise ValueError("radii must be nonnegative")


def radius_and_bounds(u_dyn: np.ndarray, u_pi: np.ndarray, est: ConstantEstimates,
                      j_hat_audit: float, j_true: float | None = None) -> BoundReport:
    """Evaluate r_k, the geometric mismatch bound, and R(u) from the
    uncertainty traces of one surrogate rollout."""
    t_len = u_pi.shape[0]
    r = (
        est.beta_t * np.sqrt(np.maximum(u_dyn, 0.0))
        + 2.0 * est.l_a * est.beta_pi * np.sqrt(np.maximum(u_pi, 0.0))
        + est.l_ab
        + est.sigma_xi
    )
    lp = est.l_prime
    mismatch = np.zeros(t_len)
    for t in range(1, t_len):
        ks = np.arange(t)
        mismatch[t] = float(np.sum(lp ** (t - 1 - ks) * r[ks]))
    big_r = float(
        est.l_c
        * np.sum(2.0 * est.beta_pi * np.sqrt(np.maximum(u_pi, 0.0))
                 + (1.0 + 2.0 * est.l_pi) * mismatch)
    )
    report = BoundReport(
        r_trace=r,
        mismatch_bound=mismatch,
        big_r=big_r,
        j_hat_audit=j_hat_audit,
        j_true=j_true,
        certificate=bool(j_hat_audit > big_r),
    )
    if j_true is not None:
        report.lcb_satisfied = bool(j_true >= j_hat_audit - big_r - 1e-9)
    return report


def lcb_audit(reports: list[BoundReport], horizon: int,
              delta_cal: float = 0.05) -> dict:
    """Fraction of verified conditions satisfying the lower confidence
    bound, compared against the nominal 1 - 2*T*delta level; violations are
    listed with their uncertainty traces."""
    checked = [r for r in reports if r.lcb_satisfied is not None]
    if not checked:
        return {"n": 0, "satisfied_fraction": float("nan")}
    frac = float(np.mean([r.lcb_satisfied for r in checked]))
    violations = [
        {
            "j_true": r.j_true,
            "j_hat_audit": r.j_hat_audit,
            "big_r": r.big_r,
            "mean_r": float(r.r_trace.mean()),
        }
        for r in checked
        if not r.lcb_satisfied
    ]
    return {
        "n": len(checked),
        "satisfied_fraction": frac,
        "nominal_level": max(0.0, 1.0 - 2.0 * horizon * delta_cal),
        "n_violations": len(violations),
        "violations": violations,
        "certificates": int(sum(r.certificate for r in checked)),
    }
