"""Ground-truth control policies (the "true" xApps) and the default
baseline policies used during marginal data collection.

The rest of the workbench treats every policy here as a black box: it only
ever calls them on a NetworkState and records the action. A subprocess
protocol at the bottom lets externally trained policies plug in the same
way.
"""

from __future__ import annotations

import json
import subprocess
from dataclasses import dataclass, field

import numpy as np

from .netsim import (
    DISCONNECT,
    HIGH,
    LOW,
    MED,
    LEVEL_WATTS,
    NetworkState,
    SimConfig,
    nearest_reachable,
    snr_matrix,
    shannon_utility,
)

POLICY_KINDS = (
    "lb_assoc", "qoe_assoc", "power_ctrl", "fixed_power", "hold_power", "sticky_assoc"
)


@dataclass(frozen=True)
class PolicyParams:
    # Calibration constants; tuned so random-search TPR@10 sits near the
    # ~10% base rate (see experiment configs).
    load_low: int = 3
    load_high: int = 3
    util_target: float = 2.0
    margin: float = 0.5
    power_mode: str = "energy_saving"   # for power_ctrl: energy_saving | qoe_boost


@dataclass(frozen=True)
class PolicySpec:
    scenario: str                      # direct | indirect | implicit
    role: str                          # A | B
    kind: str
    params: PolicyParams = field(default_factory=PolicyParams)

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")


def act_lb(s: NetworkState, cfg: SimConfig) -> np.ndarray:
    """Load-balancing association: each terminal goes to the least-loaded
    station whose SNR clears the connect threshold.

    The load counter starts from the current per-station loads; each
    terminal's own contribution is removed before its turn, the
    least-loaded feasible station is chosen (ties to the lowest index),
    and the counter is updated greedily in terminal order. Terminals with
    no feasible station disconnect.
    """
    snr = snr_matrix(s.ue_pos, s.power, cfg)
    loads = s.kpi_load.astype(float).copy()
    out = np.full(cfg.n_ue, DISCONNECT, dtype=int)
    for u in range(cfg.n_ue):
        if s.assoc[u] >= 0:
            loads[s.assoc[u]] -= 1.0
        feasible = snr[u] >= cfg.snr_connect_threshold
        if not feasible.any():
            continue
        masked = np.where(feasible, loads, np.inf)
        b = int(np.argmin(masked))   # argmin takes the first = lowest index
        out[u] = b
        loads[b] += 1.0
    return out


def act_qoe(s: NetworkState, cfg: SimConfig) -> np.ndarray:
    """QoE association: every terminal to its argmax-SNR station (ties to
    the lowest index); disconnect only if nothing clears the threshold."""
    return nearest_reachable(s, cfg)


def act_power(s: NetworkState, cfg: SimConfig, mode: str,
              params: PolicyParams) -> np.ndarray:
    """Per-station power control.

    energy_saving: stations serving fewer than `load_low` terminals go low,
    more than `load_high` go high, everything else med.

    qoe_boost: raise a station one level if any served terminal sits below
    util_target; lower one level if every served terminal clears
    util_target + margin (an empty station counts as satisfied). The rule
    is reactive, not budget-capped: it stays inside the transmit-power
    budget on the state distribution its solo rollouts visit, which is the
    local-constraint premise the implicit scenario needs.
    """
    if mode == "energy_saving":
        out = np.full(cfg.n_bs, MED, dtype=int)
        out[s.kpi_load < params.load_low] = LOW
        out[s.kpi_load > params.load_high] = HIGH
        return out
    if mode == "qoe_boost":
        out = s.power.copy().astype(int)
        for b in range(cfg.n_bs):
            served = s.kpi_util[s.assoc == b]
            if served.size and (served < params.util_target).any():
                out[b] = min(out[b] + 1, HIGH)
            elif served.size == 0 or (served > params.util_target + params.margin).all():
                out[b] = max(out[b] - 1, LOW)
        return out
    raise ValueError(f"unknown power mode {mode!r}")


def act_default(s: NetworkState, cfg: SimConfig, kind: str) -> np.ndarray:
    """Default marginal policies.

    fixed_power pins every station to med; hold_power maintains whatever
    configuration the episode started with (the collection protocol draws
    that configuration per episode, so the marginal data covers the power
    range without any joint deployment); sticky_assoc repeats the current
    association, with disconnect entries bootstrapping to the nearest
    reachable station.
    """
    if kind == "fixed_power":
        return np.full(cfg.n_bs, MED, dtype=int)
    if kind == "hold_power":
        return s.power.copy().astype(int)
    if kind == "sticky_assoc":
        nearest = nearest_reachable(s, cfg)
        return np.where(s.assoc == DISCONNECT, nearest, s.assoc).astype(int)
    raise ValueError(f"unknown default kind {kind!r}")


def make_policy(spec: PolicySpec, cfg: SimConfig):
    """Bind a PolicySpec to a callable NetworkState -> action."""
    kind, params = spec.kind, spec.params
    if kind == "lb_assoc":
        return lambda s: act_lb(s, cfg)
    if kind == "qoe_assoc":
        return lambda s: act_qoe(s, cfg)
    if kind == "power_ctrl":
        return lambda s: act_power(s, cfg, params.power_mode, params)
    if kind in ("fixed_power", "hold_power", "sticky_assoc"):
        return lambda s: act_default(s, cfg, kind)
    raise ValueError(f"unknown policy kind {kind!r}")


def total_watts(power_levels: np.ndarray) -> float:
    return float(LEVEL_WATTS[np.asarray(power_levels, dtype=int)].sum())


# ---------------------------------------------------------------------------
# External policy protocol: one JSON line with the state on stdin, one JSON
# line with the action on stdout, per query. Documented in the README.
# ---------------------------------------------------------------------------

def state_to_wire(s: NetworkState) -> dict:
    return {
        "ue_pos": s.ue_pos.tolist(),
        "assoc": s.assoc.tolist(),
        "power": s.power.tolist(),
        "kpi_load": s.kpi_load.tolist(),
        "kpi_snr": [None if not np.isfinite(v) else float(v) for v in s.kpi_snr],
        "kpi_util": s.kpi_util.tolist(),
    }


class SubprocessPolicy:
    """Queries an external policy process line-by-line.

    The child must read one JSON object per line from stdin and answer with
    {"action": [...]} on stdout. The process is kept alive across queries.
    """

    def __init__(self, command: list[str]):
        self._proc = subprocess.Popen(
            command, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True
        )

    def __call__(self, s: NetworkState) -> np.ndarray:
        self._proc.stdin.write(json.dumps(state_to_wire(s)) + "\n")
        self._proc.stdin.flush()
        line = self._proc.stdout.readline()
        if not line:
            raise RuntimeError("external policy process closed its stdout")
        return np.asarray(json.loads(line)["action"], dtype=int)

    def close(self):
        if self._proc.stdin:
            self._proc.stdin.close()
        self._proc.terminate()
        self._proc.wait(timeout=5)
