"""Deterministic mobile-network simulator.

Terminals move in a 2D arena and connect to base stations; channel gains
follow the Okumura-Hata urban model and per-terminal utility follows a
log-Shannon rule. All functions are pure over value types, so rollouts can
run in parallel with per-rollout seeds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DISCONNECT = -1

# Power level indices; dBm values come from SimConfig.power_levels.
LOW, MED, HIGH = 0, 1, 2

# Level -> watts mapping used for the transmit-power budget accounting.
LEVEL_WATTS = np.array([0.0, 1.0, 2.0])

# Floor below which distances are clamped (the Okumura-Hata formula
# diverges as d -> 0).
MIN_DISTANCE_M = 1.0


@dataclass(frozen=True)
class SimConfig:
    n_bs: int = 3
    n_ue: int = 5
    arena: tuple[float, float] = (2000.0, 2000.0)
    bs_positions: tuple[tuple[float, float], ...] = (
        (500.0, 500.0),
        (1500.0, 500.0),
        (1000.0, 1400.0),
    )
    ue_speed: float = 20.0           # meters per step, constant
    carrier_freq: float = 900.0      # MHz
    bs_height: float = 50.0          # meters
    ue_height: float = 1.5           # meters
    noise_floor: float = -100.0      # dBm
    snr_connect_threshold: float = 0.0  # dB
    horizon: int = 20                # steps T
    power_levels: tuple[float, ...] = (20.0, 30.0, 40.0)  # dBm
    p_max: float = 4.0               # watts, implicit-scenario budget
    noise_sigma: float = 0.0         # position jitter, disabled by default
    seed: int = 0

    def __post_init__(self):
        if self.n_bs < 1 or self.n_ue < 1:
            raise ValueError("n_bs and n_ue must be >= 1")
        if self.horizon < 2:
            raise ValueError("horizon must be >= 2")
        if len(self.power_levels) != 3:
            raise ValueError("exactly three power levels expected")
        if not all(a < b for a, b in zip(self.power_levels, self.power_levels[1:])):
            raise ValueError("power_levels must be strictly increasing")
        if len(self.bs_positions) != self.n_bs:
            raise ValueError("bs_positions length must equal n_bs")
        w, h = self.arena
        for x, y in self.bs_positions:
            if not (0.0 <= x <= w and 0.0 <= y <= h):
                raise ValueError("all bs_positions must lie inside the arena")

    @property
    def bs_xy(self) -> np.ndarray:
        return np.asarray(self.bs_positions, dtype=float)


def pathloss(distance, cfg: SimConfig):
    """Okumura-Hata urban path loss in dB (small-city mobile correction).

    Accepts scalars or arrays; distances below 1 m are clamped to 1 m,
    which makes the function total.
    """
    d = np.maximum(np.asarray(distance, dtype=float), MIN_DISTANCE_M)
    f = cfg.carrier_freq
    hb = cfg.bs_height
    hm = cfg.ue_height
    a_hm = (1.1 * math.log10(f) - 0.7) * hm - (1.56 * math.log10(f) - 0.8)
    pl = (
        69.55
        + 26.16 * math.log10(f)
        - 13.82 * math.log10(hb)
        - a_hm
        + (44.9 - 6.55 * math.log10(hb)) * np.log10(d / 1000.0)
    )
    return pl if pl.ndim else float(pl)


def snr_matrix(ue_pos: np.ndarray, power: np.ndarray, cfg: SimConfig) -> np.ndarray:
    """SNR in dB of every (terminal, station) pair at the given power levels."""
    d = np.linalg.norm(ue_pos[:, None, :] - cfg.bs_xy[None, :, :], axis=2)
    p_dbm = np.asarray(cfg.power_levels)[np.asarray(power)]
    return p_dbm[None, :] - pathloss(d, cfg) - cfg.noise_floor


def shannon_utility(snr_db):
    """log-Shannon utility, bits/s/Hz."""
    return np.log2(1.0 + np.power(10.0, np.asarray(snr_db) / 10.0))


def derive_kpis(ue_pos: np.ndarray, assoc: np.ndarray, power: np.ndarray, cfg: SimConfig):
    """Derived KPIs (load, snr, utility) as pure functions of the base state.

    Disconnected terminals get snr = -inf and utility 0.
    """
    assoc = np.asarray(assoc)
    load = np.bincount(assoc[assoc >= 0], minlength=cfg.n_bs).astype(int)
    snr_all = snr_matrix(ue_pos, power, cfg)
    snr = np.full(cfg.n_ue, -np.inf)
    connected = assoc >= 0
    snr[connected] = snr_all[np.nonzero(connected)[0], assoc[connected]]
    util = np.zeros(cfg.n_ue)
    util[connected] = shannon_utility(snr[connected])
    return load, snr, util


@dataclass(frozen=True)
class NetworkState:
    """Full simulator state; KPI fields are derived, never free."""

    ue_pos: np.ndarray          # (n_ue, 2) meters
    assoc: np.ndarray           # (n_ue,) int, DISCONNECT or station index
    power: np.ndarray           # (n_bs,) int level in {LOW, MED, HIGH}
    kpi_load: np.ndarray = field(default=None)
    kpi_snr: np.ndarray = field(default=None)
    kpi_util: np.ndarray = field(default=None)

    @staticmethod
    def make(ue_pos, assoc, power, cfg: SimConfig) -> "NetworkState":
        ue_pos = np.asarray(ue_pos, dtype=float).reshape(cfg.n_ue, 2)
        assoc = np.asarray(assoc, dtype=int).reshape(cfg.n_ue)
        power = np.asarray(power, dtype=int).reshape(cfg.n_bs)
        if assoc.min() < DISCONNECT or assoc.max() >= cfg.n_bs:
            raise ValueError("association out of range")
        if power.min() < LOW or power.max() > HIGH:
            raise ValueError("power level out of range")
        load, snr, util = derive_kpis(ue_pos, assoc, power, cfg)
        st = NetworkState(ue_pos, assoc, power, load, snr, util)
        for arr in (st.ue_pos, st.assoc, st.power, st.kpi_load, st.kpi_snr, st.kpi_util):
            arr.setflags(write=False)
        return st


@dataclass(frozen=True)
class Exogenous:
    """Per-step exogenous drivers: one heading per terminal, radians in [0, 2pi)."""

    headings: np.ndarray

    @staticmethod
    def make(headings) -> "Exogenous":
        h = np.mod(np.asarray(headings, dtype=float), 2.0 * np.pi)
        h.setflags(write=False)
        return Exogenous(h)


@dataclass(frozen=True)
class JointAction:
    a_A: np.ndarray
    a_B: np.ndarray


@dataclass(frozen=True)
class Condition:
    """Search variable u: initial state plus exogenous sequence of length T."""

    s0: NetworkState
    exo: tuple[Exogenous, ...]

    @staticmethod
    def make(s0: NetworkState, exo) -> "Condition":
        exo = tuple(exo)
        if len(exo) < 2:
            raise ValueError("exogenous sequence must cover a horizon of T >= 2")
        return Condition(s0, exo)

    @property
    def horizon(self) -> int:
        return len(self.exo)


@dataclass(frozen=True)
class Trajectory:
    """Joint rollout record: T+1 states, T exogenous, T joint actions."""

    states: tuple[NetworkState, ...]
    exo: tuple[Exogenous, ...]
    actions: tuple[JointAction, ...]

    def __post_init__(self):
        if not (len(self.states) == len(self.exo) + 1 == len(self.actions) + 1):
            raise ValueError("trajectory lengths inconsistent")

    @property
    def horizon(self) -> int:
        return len(self.actions)


def move_terminals(ue_pos: np.ndarray, e: Exogenous, cfg: SimConfig,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Advance positions along headings with reflection at arena walls."""
    step_xy = cfg.ue_speed * np.stack(
        [np.cos(e.headings), np.sin(e.headings)], axis=1
    )
    pos = ue_pos + step_xy
    if cfg.noise_sigma > 0.0 and rng is not None:
        pos = pos + rng.normal(0.0, cfg.noise_sigma, size=pos.shape)
    w, h = cfg.arena
    # Reflect: fold the line into [0, 2L] then mirror the upper half.
    for dim, lim in ((0, w), (1, h)):
        x = np.mod(pos[:, dim], 2.0 * lim)
        pos[:, dim] = np.where(x > lim, 2.0 * lim - x, x)
    return pos


class PriorityRule:
    """Arbitrates joint writes onto the shared state.

    The direct scenario has both policies writing the association vector;
    `shared_winner` names the side whose command sticks. Disjoint-write
    scenarios ignore it.
    """

    def __init__(self, shared_winner: str = "A"):
        if shared_winner not in ("A", "B"):
            raise ValueError("shared_winner must be 'A' or 'B'")
        self.shared_winner = shared_winner

    def resolve(self, scenario_kind: str, a: JointAction):
        """Return (assoc, power) to write; either may be None (keep current)."""
        if scenario_kind == "direct":
            chosen = a.a_A if self.shared_winner == "A" else a.a_B
            return chosen, None
        if scenario_kind == "indirect":
            return a.a_B, a.a_A   # A: power, B: association
        if scenario_kind == "implicit":
            return a.a_A, a.a_B   # A: association, B: power
        raise ValueError(f"unknown scenario kind {scenario_kind!r}")


def _validate_assoc_action(vec, cfg: SimConfig):
    v = np.asarray(vec)
    if v.shape != (cfg.n_ue,) or v.min() < DISCONNECT or v.max() >= cfg.n_bs:
        raise ValueError("association action outside the scenario action space")
    return v.astype(int)


def _validate_power_action(vec, cfg: SimConfig):
    v = np.asarray(vec)
    if v.shape != (cfg.n_bs,) or v.min() < LOW or v.max() > HIGH:
        raise ValueError("power action outside the scenario action space")
    return v.astype(int)


def validate_action(kind: str, vec, cfg: SimConfig):
    return _validate_assoc_action(vec, cfg) if kind == "assoc" else _validate_power_action(vec, cfg)


def step(s: NetworkState, a: JointAction, e: Exogenous, cfg: SimConfig,
         scenario_kind: str, arbiter: PriorityRule | None = None,
         rng: np.random.Generator | None = None) -> NetworkState:
    """One joint transition: move terminals, apply arbitrated writes, re-derive KPIs."""
    from .scenarios import action_kinds  # local import avoids a cycle

    kind_a, kind_b = action_kinds(scenario_kind)
    a = JointAction(validate_action(kind_a, a.a_A, cfg), validate_action(kind_b, a.a_B, cfg))
    arbiter = arbiter or PriorityRule("A")
    assoc_w, power_w = arbiter.resolve(scenario_kind, a)
    pos = move_terminals(s.ue_pos, e, cfg, rng)
    assoc = s.assoc if assoc_w is None else assoc_w
    power = s.power if power_w is None else power_w
    return NetworkState.make(pos, assoc, power, cfg)


def rollout(u: Condition, policy_a, policy_b, cfg: SimConfig, scenario_kind: str,
            arbiter: PriorityRule | None = None,
            rng: np.random.Generator | None = None) -> Trajectory:
    """Execute both policies for T steps from condition u.

    This is the verification oracle for discovered conditions: deterministic
    given (cfg.seed-free) inputs when noise is disabled.
    """
    states = [u.s0]
    actions = []
    for t in range(u.horizon):
        s = states[-1]
        act = JointAction(policy_a(s), policy_b(s))
        states.append(step(s, act, u.exo[t], cfg, scenario_kind, arbiter, rng))
        actions.append(act)
    return Trajectory(tuple(states), tuple(u.exo), tuple(actions))


def nearest_reachable(s: NetworkState, cfg: SimConfig) -> np.ndarray:
    """Highest-SNR station per terminal if it clears the connect threshold,
    else DISCONNECT. Ties broken by lowest station index (argmax picks first)."""
    snr = snr_matrix(s.ue_pos, s.power, cfg)
    best = np.argmax(snr, axis=1)
    ok = snr[np.arange(cfg.n_ue), best] >= cfg.snr_connect_threshold
    return np.where(ok, best, DISCONNECT).astype(int)
