"""Verification and metrics: replay candidate conditions in the
ground-truth simulator, label true positives, compute TPR@K / rank
correlation / diversity, calibrate the labeling threshold, and drive the
guidance ablation variants."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .conflict import ConflictSpec, cumulative_conflict, phi_trace
from .datafiles import condition_from_dict, condition_to_dict, sample_random_condition
from .netsim import Condition, SimConfig, rollout
from .scenarios import Scenario

ABLATION_VARIANTS = ("full", "no_Udyn", "no_Upi", "no_both", "no_guidance")


@dataclass
class VerificationRecord:
    cid: str
    searcher: str
    scenario: str
    seed: int
    j_hat: float
    j_true: float
    label: bool
    phi_trace: list
    runtime_s: float
    condition: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "cid": self.cid, "searcher": self.searcher, "scenario": self.scenario,
            "seed": self.seed, "j_hat": self.j_hat, "j_true": self.j_true,
            "label": self.label, "phi_trace": self.phi_trace,
            "runtime_s": self.runtime_s, "condition": self.condition,
        }

    @staticmethod
    def from_dict(d: dict) -> "VerificationRecord":
        return VerificationRecord(**d)


def verify_conditions(conditions: list[Condition], j_hat: np.ndarray, searcher: str,
                      scenario: Scenario, cfg: SimConfig, spec: ConflictSpec,
                      seed: int) -> list[VerificationRecord]:
    """Replay each condition with the true policies and label it against the
    calibrated threshold. Records keep the ranking order of the input."""
    if spec.tp_threshold is None:
        raise ValueError("ConflictSpec.tp_threshold not calibrated")
    pol_a, pol_b = scenario.policies(cfg)
    records = []
    for i, u in enumerate(conditions):
        t0 = time.perf_counter()
        traj = rollout(u, pol_a, pol_b, cfg, scenario.kind, scenario.joint_priority)
        trace = phi_trace(traj, spec)
        j_true = float(trace.sum())
        records.append(
            VerificationRecord(
                cid=f"{searcher}-s{seed}-{i:04d}",
                searcher=searcher,
                scenario=scenario.kind,
                seed=seed,
                j_hat=float(j_hat[i]),
                j_true=j_true,
                label=bool(j_true > spec.tp_threshold),
                phi_trace=trace.tolist(),
                runtime_s=time.perf_counter() - t0,
                condition=condition_to_dict(u),
            )
        )
    return records


def replay_record(rec: VerificationRecord, scenario: Scenario, cfg: SimConfig,
                  spec: ConflictSpec) -> float:
    """Recompute J* from the stored condition (determinism chain check)."""
    u = condition_from_dict(rec.condition, cfg)
    pol_a, pol_b = scenario.policies(cfg)
    traj = rollout(u, pol_a, pol_b, cfg, scenario.kind, scenario.joint_priority)
    return cumulative_conflict(traj, spec)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def tpr_at_k(records: list[VerificationRecord], k: int) -> float:
    """Fraction of true positives among the top-K (records are ranked)."""
    if len(records) < k:
        raise ValueError(f"need at least {k} records, got {len(records)}")
    return float(np.mean([r.label for r in records[:k]]))


def spearman_rho(records: list[VerificationRecord]):
    """Rank correlation between the surrogate score and the verified
    conflict; returns None for constant series (undefined, flagged)."""
    if len(records) < 3:
        raise ValueError("need at least 3 records")
    x = np.array([r.j_hat for r in records])
    y = np.array([r.j_true for r in records])
    if np.all(x == x[0]) or np.all(y == y[0]):
        return None
    rho = stats.spearmanr(x, y).statistic
    return None if np.isnan(rho) else float(rho)


def severity_fraction(rec: VerificationRecord) -> float:
    trace = np.asarray(rec.phi_trace)
    return float((trace > 0).mean())


def diversity_histogram(records: list[VerificationRecord], bins: int = 10) -> dict:
    """Histogram of conflict-manifesting time fractions with its entropy
    (nats) as the scalar diversity score."""
    if not records:
        raise ValueError("no records to histogram")
    sev = np.array([severity_fraction(r) for r in records])
    counts, edges = np.histogram(sev, bins=bins, range=(0.0, 1.0))
    p = counts / counts.sum()
    nz = p[p > 0]
    return {
        "counts": counts.tolist(),
        "edges": edges.tolist(),
        "entropy": float(-(nz * np.log(nz)).sum()),
        "severities": sev.tolist(),
    }


# ---------------------------------------------------------------------------
# Threshold calibration
# ---------------------------------------------------------------------------

def calibrate_tp_threshold(score_fn, scenario: Scenario, cfg: SimConfig,
                           base_spec: ConflictSpec, seed: int = 1234,
                           n_conditions: int = 1000, top_k: int = 50,
                           target: float = 0.10) -> dict:
    """Pick the labeling threshold so random search lands near the target
    TPR@10.

    1000 uniform conditions are scored by the surrogate and verified in the
    simulator; the threshold is searched over J* midpoints so that the
    positive rate among the top-`top_k` surrogate-ranked conditions (the
    pooled stand-in for several top-10 draws) is closest to the target.
    """
    rng = np.random.default_rng(seed)
    pol_a, pol_b = scenario.policies(cfg)
    conditions = [sample_random_condition(cfg, rng) for _ in range(n_conditions)]
    j_hat = np.asarray(score_fn(conditions))
    j_true = np.array(
        [
            cumulative_conflict(
                rollout(u, pol_a, pol_b, cfg, scenario.kind, scenario.joint_priority),
                base_spec,
            )
            for u in conditions
        ]
    )
    top = j_true[np.argsort(-j_hat, kind="stable")[:top_k]]

    uniq = np.unique(j_true)
    mids = [(uniq[i] + uniq[i + 1]) / 2.0 for i in range(len(uniq) - 1)]
    if uniq[0] > 0:
        mids.insert(0, uniq[0] / 2.0)
    candidates = [m for m in mids if m > 0] or [max(uniq.max() / 2.0, 1e-6)]

    best_theta, best_err = None, np.inf
    for theta in candidates:
        rate = float((top > theta).mean())
        err = abs(rate - target)
        if err < best_err - 1e-12 or (abs(err - best_err) <= 1e-12 and (best_theta is None or theta > best_theta)):
            best_theta, best_err = float(theta), err
    rate = float((top > best_theta).mean())
    return {
        "tp_threshold": best_theta,
        "achieved_top_rate": rate,
        "base_rate": float((j_true > best_theta).mean()),
        "n_conditions": n_conditions,
        "top_k": top_k,
        "seed": seed,
    }


# ---------------------------------------------------------------------------
# Metric summaries and the ablation matrix
# ---------------------------------------------------------------------------

def metric_row(records: list[VerificationRecord], ks=(10, 20, 50)) -> dict:
    row = {f"tpr@{k}": tpr_at_k(records, k) for k in ks if len(records) >= k}
    row["spearman"] = spearman_rho(records)
    row["n"] = len(records)
    return row


def aggregate_rows(rows: list[dict]) -> dict:
    """mean +- sample std across seeds for every shared numeric key."""
    out = {}
    for key in rows[0]:
        vals = [r[key] for r in rows if r.get(key) is not None]
        if not vals or not isinstance(vals[0], (int, float)):
            continue
        arr = np.asarray(vals, dtype=float)
        out[key] = {
            "mean": float(arr.mean()),
            "std": float(arr.std(ddof=1)) if len(arr) > 1 else 0.0,
            "n": len(arr),
        }
    return out


def ablation_config(variant: str, base_cfg):
    """Guidance-config toggles for one ablation variant."""
    from .guidance import GuidanceConfig

    if variant not in ABLATION_VARIANTS:
        raise ValueError(f"unknown ablation variant {variant!r}")
    kw = dict(
        gamma=base_cfg.gamma, eta=base_cfg.eta, delta=base_cfg.delta,
        n_candidates=base_cfg.n_candidates,
        udyn_scale=base_cfg.udyn_scale, upi_scale=base_cfg.upi_scale,
    )
    if variant == "no_Udyn":
        kw["udyn_scale"] = 0.0
    elif variant == "no_Upi":
        kw["upi_scale"] = 0.0
    elif variant == "no_both":
        kw["udyn_scale"] = 0.0
        kw["upi_scale"] = 0.0
    elif variant == "no_guidance":
        kw["eta"] = 0.0
    return GuidanceConfig(**kw)


def run_ablation(variant: str, guided_runner, scenario: Scenario, cfg: SimConfig,
                 spec: ConflictSpec, seeds, ks=(10, 20, 50)) -> dict:
    """Run one guidance variant over the seed list and aggregate metrics.

    `guided_runner(guidance_cfg, seed)` must return ranked (conditions,
    j_hat); verification and metric aggregation happen here.
    """
    from .guidance import GuidanceConfig

    rows, all_records = [], []
    for seed in seeds:
        g_cfg = ablation_config(variant, GuidanceConfig())
        conditions, j_hat = guided_runner(g_cfg, seed)
        records = verify_conditions(
            conditions, j_hat, f"guided[{variant}]", scenario, cfg, spec, seed
        )
        rows.append(metric_row(records, ks))
        all_records.append(records)
    return {"variant": variant, "per_seed": rows, "summary": aggregate_rows(rows),
            "records": all_records}
