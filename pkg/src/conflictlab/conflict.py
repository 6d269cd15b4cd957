"""Single-step conflict metrics for the three interference types, in both
ground-truth form (verification) and smooth relaxed form (gradient guidance),
plus the cumulative per-trajectory score."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .netsim import LOW, LEVEL_WATTS, NetworkState, Trajectory
from .scenarios import action_kinds

KL_FLOOR = 1e-6
PROB_TOL = 1e-4

# Relaxed-metric sharpness. The sigmoid gets a +0.5 offset so integer loads
# sit on saturated flanks; sharpness is the smallest keeping the relaxed
# value within 0.05 of the hard count with three stations stacking error.
SIGMOID_SHARPNESS = 10.0
SIGMOID_OFFSET = 0.5
SOFTPLUS_SHARPNESS = 15.0


@dataclass(frozen=True)
class ConflictSpec:
    kind: str                      # direct | indirect | implicit
    theta_c: int = 2               # indirect count threshold
    p_max: float = 4.0             # watts, implicit budget
    tp_threshold: float | None = None  # per-trajectory label threshold

    def __post_init__(self):
        if self.theta_c < 1:
            raise ValueError("theta_c must be >= 1")
        if self.p_max <= 0:
            raise ValueError("p_max must be positive")
        if self.tp_threshold is not None and self.tp_threshold <= 0:
            raise ValueError("tp_threshold must be positive")


def phi_direct_true(a_A, a_B) -> int:
    """Number of terminals whose two commanded associations differ."""
    a, b = np.asarray(a_A), np.asarray(a_B)
    if a.shape != b.shape:
        raise ValueError("association vectors differ in length")
    return int((a != b).sum())


def mean_kl(p: np.ndarray, q: np.ndarray) -> float:
    """Mean per-terminal KL(p||q) over rows; rows floored at KL_FLOOR and
    renormalized. Rejects inputs that are not distributions."""
    p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    for m in (p, q):
        if np.abs(m.sum(axis=-1) - 1.0).max() > PROB_TOL:
            raise ValueError("distributions not normalized within tolerance")
    p = np.maximum(p, KL_FLOOR)
    q = np.maximum(q, KL_FLOOR)
    p = p / p.sum(axis=-1, keepdims=True)
    q = q / q.sum(axis=-1, keepdims=True)
    return float(np.mean(np.sum(p * np.log(p / q), axis=-1)))


def phi_direct_est(s: NetworkState, ens_a, ens_b) -> float:
    """Estimated direct conflict: mean per-terminal KL divergence between
    the two policy ensembles' mean action distributions at state s."""
    return mean_kl(ens_a.mean_action_probs(s), ens_b.mean_action_probs(s))


def phi_indirect(s: NetworkState, a_A, a_B, spec: ConflictSpec) -> int:
    """Stations commanded to low power while >= theta_c terminals are
    simultaneously being assigned to them."""
    power = np.asarray(a_A, dtype=int)
    assoc = np.asarray(a_B, dtype=int)
    n_bs = power.shape[0]
    counts = np.bincount(assoc[assoc >= 0], minlength=n_bs)
    return int(((power == LOW) & (counts >= spec.theta_c)).sum())


def phi_implicit(a_A, a_B, spec: ConflictSpec) -> float:
    """Hinge of total transmit watts over the budget; a_B carries the
    arbitrated power levels in the implicit scenario."""
    watts = LEVEL_WATTS[np.asarray(a_B, dtype=int)].sum()
    return float(max(0.0, watts - spec.p_max))


def phi_step(s: NetworkState, a_A, a_B, spec: ConflictSpec) -> float:
    """Ground-truth single-step metric for the spec's scenario kind."""
    if spec.kind == "direct":
        return float(phi_direct_true(a_A, a_B))
    if spec.kind == "indirect":
        return float(phi_indirect(s, a_A, a_B, spec))
    if spec.kind == "implicit":
        return phi_implicit(a_A, a_B, spec)
    raise ValueError(f"unknown conflict kind {spec.kind!r}")


def cumulative_conflict(traj: Trajectory, spec: ConflictSpec) -> float:
    """J(tau): the per-step metric summed over the trajectory."""
    return float(
        sum(
            phi_step(traj.states[t], traj.actions[t].a_A, traj.actions[t].a_B, spec)
            for t in range(traj.horizon)
        )
    )


def phi_trace(traj: Trajectory, spec: ConflictSpec) -> np.ndarray:
    return np.array(
        [
            phi_step(traj.states[t], traj.actions[t].a_A, traj.actions[t].a_B, spec)
            for t in range(traj.horizon)
        ]
    )


# ---------------------------------------------------------------------------
# Relaxed (everywhere-differentiable) forms. Each returns the value together
# with analytic partials so callers can assemble chain rules by hand; the
# partials are checked against central finite differences in the tests.
# ---------------------------------------------------------------------------

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def soft_indirect(p_low: np.ndarray, expected_load: np.ndarray, theta_c: int):
    """Relaxed indirect metric: sum_b sigmoid(S*(load_b - theta_c + 0.5)) * p_low_b.

    p_low and expected_load share shape (..., n_bs). Returns
    (value (...,), d/d p_low, d/d expected_load).
    """
    z = SIGMOID_SHARPNESS * (expected_load - theta_c + SIGMOID_OFFSET)
    sig = _sigmoid(z)
    val = (sig * p_low).sum(axis=-1)
    d_plow = sig
    d_load = SIGMOID_SHARPNESS * sig * (1.0 - sig) * p_low
    return val, d_plow, d_load


def soft_implicit(expected_watts: np.ndarray, p_max: float):
    """Relaxed implicit metric: softplus_beta(total_watts - p_max).

    expected_watts has shape (..., n_bs); returns (value (...,), d/d watts).
    """
    beta = SOFTPLUS_SHARPNESS
    x = expected_watts.sum(axis=-1) - p_max
    val = np.logaddexp(0.0, beta * x) / beta
    d_total = _sigmoid(beta * x)
    return val, d_total[..., None] * np.ones_like(expected_watts)


def soft_kl_rows(p: np.ndarray, q: np.ndarray):
    """KL(p||q) per row with partials; rows are assumed simplex vectors
    (softmax outputs), so the numeric floor only guards the log."""
    pf = np.maximum(p, KL_FLOOR)
    qf = np.maximum(q, KL_FLOOR)
    log_ratio = np.log(pf) - np.log(qf)
    val = (p * log_ratio).sum(axis=-1)
    active_p = (p > KL_FLOOR).astype(float)
    active_q = (q > KL_FLOOR).astype(float)
    d_p = log_ratio + active_p * (p / pf)
    d_q = -active_q * (p / qf)
    return val, d_p, d_q


def relaxed_phi(kind: str, probs_a: np.ndarray, probs_b: np.ndarray,
                spec: ConflictSpec, n_bs: int):
    """Relaxed per-step metric on per-policy action distributions (the
    guidance/search form; evaluated on ensemble means, it measures the
    conflict the joint policies would cause at a state).

    probs_a/probs_b: (B, heads, cats). Returns (value (B,), d/d probs_a,
    d/d probs_b). Gradients are defined everywhere.
    """
    if kind == "direct":
        b, h, c = probs_a.shape
        kl, d_p, d_q = soft_kl_rows(probs_a.reshape(-1, c), probs_b.reshape(-1, c))
        return (
            kl.reshape(b, h).mean(axis=1),
            d_p.reshape(probs_a.shape) / h,
            d_q.reshape(probs_b.shape) / h,
        )
    if kind == "indirect":
        p_low = probs_a[..., LOW]                      # A drives power
        load = probs_b[..., :n_bs].sum(axis=1)         # expected per-station load
        val, d_plow, d_load = soft_indirect(p_low, load, spec.theta_c)
        g_a = np.zeros_like(probs_a)
        g_a[..., LOW] = d_plow
        g_b = np.zeros_like(probs_b)
        g_b[..., :n_bs] = d_load[:, None, :]
        return val, g_a, g_b
    if kind == "implicit":
        watts = (probs_b * LEVEL_WATTS).sum(axis=-1)   # B drives power
        val, d_watts = soft_implicit(watts, spec.p_max)
        return val, np.zeros_like(probs_a), d_watts[..., None] * LEVEL_WATTS
    raise ValueError(f"unknown conflict kind {kind!r}")
