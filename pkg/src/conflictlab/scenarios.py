"""Scenario wiring: which policy pair runs, who writes what, and which
default stands in for the inactive side during marginal data collection."""

from __future__ import annotations

from dataclasses import dataclass

from .netsim import PriorityRule, SimConfig
from .xapps import PolicyParams, PolicySpec, make_policy

SCENARIOS = ("direct", "indirect", "implicit")


def action_kinds(kind: str) -> tuple[str, str]:
    """(kind_A, kind_B) action types per scenario."""
    if kind == "direct":
        return "assoc", "assoc"
    if kind == "indirect":
        return "power", "assoc"
    if kind == "implicit":
        return "assoc", "power"
    raise ValueError(f"unknown scenario kind {kind!r}")


@dataclass(frozen=True)
class Scenario:
    kind: str
    policy_a: PolicySpec
    policy_b: PolicySpec
    default_a: PolicySpec    # stands in for A while collecting D_B
    default_b: PolicySpec    # stands in for B while collecting D_A
    theta_c: int = 2         # indirect count threshold

    @property
    def joint_priority(self) -> PriorityRule:
        # Load balancing has priority over QoE in the shared-parameter case.
        return PriorityRule("A")

    def marginal_priority(self, active_role: str) -> PriorityRule:
        # During marginal collection only the deployed policy issues
        # commands, so its writes win on any shared parameter.
        return PriorityRule(active_role)

    def policies(self, cfg: SimConfig):
        return make_policy(self.policy_a, cfg), make_policy(self.policy_b, cfg)

    def marginal_pair(self, active_role: str, cfg: SimConfig):
        """(policy_A, policy_B) with the inactive side replaced by its default."""
        if active_role == "A":
            return make_policy(self.policy_a, cfg), make_policy(self.default_b, cfg)
        if active_role == "B":
            return make_policy(self.default_a, cfg), make_policy(self.policy_b, cfg)
        raise ValueError("active_role must be 'A' or 'B'")


def build_scenario(kind: str, params: PolicyParams | None = None) -> Scenario:
    p = params or PolicyParams()
    if kind == "direct":
        return Scenario(
            kind,
            policy_a=PolicySpec(kind, "A", "lb_assoc", p),
            policy_b=PolicySpec(kind, "B", "qoe_assoc", p),
            default_a=PolicySpec(kind, "A", "sticky_assoc", p),
            default_b=PolicySpec(kind, "B", "sticky_assoc", p),
        )
    if kind == "indirect":
        es = PolicyParams(p.load_low, p.load_high, p.util_target, p.margin, "energy_saving")
        return Scenario(
            kind,
            policy_a=PolicySpec(kind, "A", "power_ctrl", es),
            policy_b=PolicySpec(kind, "B", "qoe_assoc", p),
            default_a=PolicySpec(kind, "A", "hold_power", p),
            default_b=PolicySpec(kind, "B", "sticky_assoc", p),
        )
    if kind == "implicit":
        qb = PolicyParams(p.load_low, p.load_high, p.util_target, p.margin, "qoe_boost")
        return Scenario(
            kind,
            policy_a=PolicySpec(kind, "A", "lb_assoc", p),
            policy_b=PolicySpec(kind, "B", "power_ctrl", qb),
            default_a=PolicySpec(kind, "A", "sticky_assoc", p),
            default_b=PolicySpec(kind, "B", "hold_power", p),
        )
    raise ValueError(f"unknown scenario kind {kind!r}")
