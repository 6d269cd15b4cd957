"""Marginal dataset collection and line-delimited serialization.

Each dataset is collected with exactly one target policy deployed; the
inactive side is replaced by its scripted default, and the record keeps
both action streams with provenance so the no-joint-data guarantee is
checkable structurally.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .netsim import (
    MED,
    Condition,
    Exogenous,
    JointAction,
    NetworkState,
    SimConfig,
    Trajectory,
    nearest_reachable,
    rollout,
)
from .scenarios import Scenario

DATASET_SCHEMA = "trajectories-v1"


def sample_collection_state(cfg: SimConfig, rng: np.random.Generator,
                            mode: str = "random") -> NetworkState:
    """Episode start during marginal collection: a fresh random
    configuration (positions, associations, per-station power levels; the
    hold_power default maintains the drawn levels for the episode).

    mode="baseline" starts from the nearest-reachable association at med
    power instead: the budget-constrained booster's solo deployments begin
    from their designed feasible operating point.
    """
    wh = np.asarray(cfg.arena)
    pos = rng.uniform(0.0, 1.0, size=(cfg.n_ue, 2)) * wh
    if mode == "baseline":
        power = np.full(cfg.n_bs, MED, dtype=int)
        probe = NetworkState.make(pos, np.full(cfg.n_ue, -1), power, cfg)
        return NetworkState.make(pos, nearest_reachable(probe, cfg), power, cfg)
    power = rng.integers(0, 3, size=cfg.n_bs)
    assoc = rng.integers(-1, cfg.n_bs, size=cfg.n_ue)
    return NetworkState.make(pos, assoc, power, cfg)


def sample_collection_condition(cfg: SimConfig, rng: np.random.Generator,
                                mode: str = "random") -> Condition:
    s0 = sample_collection_state(cfg, rng, mode)
    headings = rng.uniform(0.0, 2.0 * np.pi, size=(cfg.horizon, cfg.n_ue))
    return Condition.make(s0, [Exogenous.make(h) for h in headings])


def sample_random_condition(cfg: SimConfig, rng: np.random.Generator) -> Condition:
    """Uniform condition for random search / threshold calibration: uniform
    positions, headings, associations (disconnect included) and power."""
    wh = np.asarray(cfg.arena)
    pos = rng.uniform(0.0, 1.0, size=(cfg.n_ue, 2)) * wh
    assoc = rng.integers(-1, cfg.n_bs, size=cfg.n_ue)
    power = rng.integers(0, 3, size=cfg.n_bs)
    s0 = NetworkState.make(pos, assoc, power, cfg)
    headings = rng.uniform(0.0, 2.0 * np.pi, size=(cfg.horizon, cfg.n_ue))
    return Condition.make(s0, [Exogenous.make(h) for h in headings])


@dataclass
class MarginalDataset:
    """Trajectories from one marginal deployment (D_A or D_B)."""

    scenario: str
    active_role: str            # "A" or "B"
    default_kind: str           # policy kind that filled the inactive side
    cfg: SimConfig
    trajectories: list[Trajectory]

    @property
    def tag(self) -> str:
        return f"D_{self.active_role}"

    @property
    def n_episodes(self) -> int:
        return len(self.trajectories)


def collect_marginal(scenario: Scenario, cfg: SimConfig, active_role: str,
                     n_episodes: int, seed: int) -> MarginalDataset:
    """Roll out the marginal pair for a fixed number of episodes.

    The deployed policy's writes win on any shared parameter; the default
    policy still generates the recorded opposite-role actions.
    """
    rng = np.random.default_rng(seed)
    pol_a, pol_b = scenario.marginal_pair(active_role, cfg)
    arbiter = scenario.marginal_priority(active_role)
    # the power booster's solo deployment starts from its feasible baseline
    mode = "baseline" if (scenario.kind == "implicit" and active_role == "B") else "random"
    trajs = []
    for _ in range(n_episodes):
        u = sample_collection_condition(cfg, rng, mode)
        trajs.append(rollout(u, pol_a, pol_b, cfg, scenario.kind, arbiter))
    default_kind = (scenario.default_b if active_role == "A" else scenario.default_a).kind
    return MarginalDataset(scenario.kind, active_role, default_kind, cfg, trajs)


# ---------------------------------------------------------------------------
# Serialization: one header line, then one JSON trajectory per line.
# ---------------------------------------------------------------------------

def _traj_to_record(traj: Trajectory, ep: int) -> dict:
    return {
        "ep": ep,
        "pos": [s.ue_pos.tolist() for s in traj.states],
        "assoc": [s.assoc.tolist() for s in traj.states],
        "power": [s.power.tolist() for s in traj.states],
        "headings": [e.headings.tolist() for e in traj.exo],
        "a_A": [a.a_A.tolist() for a in traj.actions],
        "a_B": [a.a_B.tolist() for a in traj.actions],
    }


def _record_to_traj(rec: dict, cfg: SimConfig) -> Trajectory:
    states = tuple(
        NetworkState.make(p, a, w, cfg)
        for p, a, w in zip(rec["pos"], rec["assoc"], rec["power"])
    )
    exo = tuple(Exogenous.make(h) for h in rec["headings"])
    actions = tuple(
        JointAction(np.asarray(a, dtype=int), np.asarray(b, dtype=int))
        for a, b in zip(rec["a_A"], rec["a_B"])
    )
    return Trajectory(states, exo, actions)


def cfg_to_dict(cfg: SimConfig) -> dict:
    return {
        "n_bs": cfg.n_bs,
        "n_ue": cfg.n_ue,
        "arena": list(cfg.arena),
        "bs_positions": [list(p) for p in cfg.bs_positions],
        "ue_speed": cfg.ue_speed,
        "carrier_freq": cfg.carrier_freq,
        "bs_height": cfg.bs_height,
        "ue_height": cfg.ue_height,
        "noise_floor": cfg.noise_floor,
        "snr_connect_threshold": cfg.snr_connect_threshold,
        "horizon": cfg.horizon,
        "power_levels": list(cfg.power_levels),
        "p_max": cfg.p_max,
        "noise_sigma": cfg.noise_sigma,
        "seed": cfg.seed,
    }


def cfg_from_dict(d: dict) -> SimConfig:
    d = dict(d)
    d["arena"] = tuple(d["arena"])
    d["bs_positions"] = tuple(tuple(p) for p in d["bs_positions"])
    d["power_levels"] = tuple(d["power_levels"])
    return SimConfig(**d)


def write_dataset(path, data: MarginalDataset):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "schema": DATASET_SCHEMA,
        "scenario": data.scenario,
        "active_role": data.active_role,
        "default_kind": data.default_kind,
        "n_episodes": data.n_episodes,
        "cfg": cfg_to_dict(data.cfg),
    }
    with path.open("w") as fh:
        fh.write(json.dumps(header) + "\n")
        for ep, traj in enumerate(data.trajectories):
            fh.write(json.dumps(_traj_to_record(traj, ep)) + "\n")


def read_dataset(path) -> MarginalDataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file missing: {path}")
    with path.open() as fh:
        header = json.loads(fh.readline())
        if header.get("schema") != DATASET_SCHEMA:
            raise ValueError(f"unexpected dataset schema in {path}")
        cfg = cfg_from_dict(header["cfg"])
        trajs = [_record_to_traj(json.loads(line), cfg) for line in fh if line.strip()]
    return MarginalDataset(
        header["scenario"], header["active_role"], header["default_kind"], cfg, trajs
    )


def condition_to_dict(u: Condition) -> dict:
    return {
        "pos": u.s0.ue_pos.tolist(),
        "assoc": u.s0.assoc.tolist(),
        "power": u.s0.power.tolist(),
        "headings": [e.headings.tolist() for e in u.exo],
    }


def condition_from_dict(d: dict, cfg: SimConfig) -> Condition:
    s0 = NetworkState.make(d["pos"], d["assoc"], d["power"], cfg)
    return Condition.make(s0, [Exogenous.make(h) for h in d["headings"]])
