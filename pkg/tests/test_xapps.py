import itertools
import json
import sys

import numpy as np
import pytest

from conflictlab import datafiles
from conflictlab.netsim import (
    DISCONNECT,
    HIGH,
    LOW,
    MED,
    NetworkState,
    SimConfig,
    rollout,
    snr_matrix,
)
from conflictlab.scenarios import build_scenario
from conflictlab.xapps import (
    PolicyParams,
    SubprocessPolicy,
    act_default,
    act_lb,
    act_power,
    act_qoe,
    total_watts,
)

CFG = SimConfig()
CENTER = np.full((5, 2), (1000.0, 800.0))


def _state(pos, assoc, power):
    return NetworkState.make(pos, assoc, power, CFG)


class TestActLb:
    def test_least_loaded_lowest_index(self):
        # Current loads [3,1,1] with UE_0 itself on BS_0; after removing its
        # own contribution the least-loaded tie (1, 2) breaks to BS_1.
        s = _state(CENTER, [0, 0, 0, 1, 2], [HIGH] * 3)
        assert s.kpi_load.tolist() == [3, 1, 1]
        assert act_lb(s, CFG)[0] == 1

    def test_disconnect_when_nothing_reachable(self):
        pos = np.full((5, 2), (2000.0, 2000.0))  # far corner
        s = _state(pos, [-1] * 5, [LOW] * 3)
        assert (act_lb(s, CFG) == DISCONNECT).all()

    def test_symmetric_tie_breaks_to_bs0(self):
        # UE_0 disconnected, loads [1,1,1]: a pure three-way tie -> BS_0.
        s = _state(CENTER, [-1, 0, 1, 2, -1], [HIGH] * 3)
        assert s.kpi_load.tolist() == [1, 1, 1]
        assert act_lb(s, CFG)[0] == 0

    def test_greedy_prefix_optimality(self):
        # Every terminal gets an argmin-load feasible station at its turn.
        rng = np.random.default_rng(21)
        for _ in range(30):
            s = _state(
                rng.uniform(0, 2000, (5, 2)),
                rng.integers(-1, 3, size=5),
                rng.integers(0, 3, size=3),
            )
            out = act_lb(s, CFG)
            snr = snr_matrix(s.ue_pos, s.power, CFG)
            loads = s.kpi_load.astype(float).copy()
            for u in range(CFG.n_ue):
                if s.assoc[u] >= 0:
                    loads[s.assoc[u]] -= 1
                feasible = snr[u] >= CFG.snr_connect_threshold
                if not feasible.any():
                    assert out[u] == DISCONNECT
                    continue
                masked = np.where(feasible, loads, np.inf)
                assert out[u] == np.argmin(masked)
                loads[out[u]] += 1

    def test_brute_force_minmax_when_all_feasible(self):
        # With every station feasible and empty current loads, greedy
        # matches the brute-force optimal max-load over all 4^5 assignments.
        rng = np.random.default_rng(22)
        for _ in range(10):
            pos = rng.uniform(600, 1400, (5, 2))
            s = _state(pos, [-1] * 5, [HIGH] * 3)
            out = act_lb(s, CFG)
            best = min(
                max(np.bincount(np.array(a)[np.array(a) >= 0], minlength=3))
                for a in itertools.product(range(3), repeat=5)
            )
            assert np.bincount(out[out >= 0], minlength=3).max() == best


class TestActQoe:
    def test_nearest_station_wins_at_equal_power(self):
        pos = CENTER.copy()
        pos[0] = np.array(CFG.bs_positions[2]) + 40.0
        s = _state(pos, [-1] * 5, [MED] * 3)
        assert act_qoe(s, CFG)[0] == 2

    def test_equidistant_tie_breaks_to_bs0(self):
        pos = CENTER.copy()
        pos[0] = [1000.0, 500.0]  # midway between BS_0 and BS_1
        s = _state(pos, [-1] * 5, [MED] * 3)
        assert act_qoe(s, CFG)[0] == 0

    def test_disconnect_below_threshold(self):
        pos = np.full((5, 2), (2000.0, 2000.0))
        s = _state(pos, [-1] * 5, [LOW] * 3)
        assert (act_qoe(s, CFG) == DISCONNECT).all()


class TestActPower:
    def test_energy_saving_thresholds(self):
        params = PolicyParams(load_low=1, load_high=3)
        s = _state(CENTER, [1, 1, 1, 2, 2], [MED] * 3)  # loads [0, 3, 2]
        out = act_power(s, CFG, "energy_saving", params)
        assert out.tolist() == [LOW, MED, MED]

    def test_energy_saving_high_above_threshold(self):
        params = PolicyParams(load_low=1, load_high=3)
        s = _state(CENTER, [0, 0, 0, 0, 1], [MED] * 3)  # loads [4, 1, 0]
        out = act_power(s, CFG, "energy_saving", params)
        assert out.tolist() == [HIGH, MED, LOW]

    def test_qoe_boost_idle_when_satisfied(self):
        # Terminals close to their stations: utility well above target.
        pos = np.vstack([np.array(CFG.bs_positions)[[0, 1, 2, 0, 1]]]) + 30.0
        s = _state(pos, [0, 1, 2, 0, 1], [MED] * 3)
        out = act_power(s, CFG, "qoe_boost", PolicyParams())
        assert (out <= s.power).all()

    def test_qoe_boost_raises_for_needy_terminal(self):
        pos = CENTER.copy()
        pos[0] = [2000.0, 2000.0]  # far from BS_0 but pinned to it
        s = _state(pos, [0, -1, -1, -1, -1], [MED] * 3)
        out = act_power(s, CFG, "qoe_boost", PolicyParams())
        assert out[0] == HIGH

    def test_solo_budget_over_rollout_states(self):
        # The local-constraint premise: rolled out alone (with its default
        # sticky partner), the booster never exceeds the power budget.
        scen = build_scenario("implicit")
        pol_a, pol_b = scen.marginal_pair("B", CFG)
        rng = np.random.default_rng(17)
        checked = 0
        while checked < 200:
            u = datafiles.sample_collection_condition(CFG, rng)
            traj = rollout(u, pol_a, pol_b, CFG, "implicit", scen.marginal_priority("B"))
            for act in traj.actions:
                assert total_watts(act.a_B) <= CFG.p_max + 1e-9
            checked += traj.horizon
        assert checked >= 200


class TestActDefault:
    def test_fixed_power_is_all_med(self):
        s = _state(CENTER, [0] * 5, [LOW, MED, HIGH])
        assert act_default(s, CFG, "fixed_power").tolist() == [MED] * 3

    def test_sticky_repeats_associations(self):
        s = _state(CENTER, [1, 0, 2, 1, 0], [MED] * 3)
        assert act_default(s, CFG, "sticky_assoc").tolist() == [1, 0, 2, 1, 0]

    def test_sticky_bootstraps_disconnect_to_nearest(self):
        pos = CENTER.copy()
        pos[0] = np.array(CFG.bs_positions[1]) + 10.0
        s = _state(pos, [-1, 0, 0, 0, 0], [MED] * 3)
        assert act_default(s, CFG, "sticky_assoc")[0] == 1


class TestActionSpaces:
    @pytest.mark.parametrize("kind", ["direct", "indirect", "implicit"])
    def test_emitted_actions_lie_in_scenario_space(self, kind):
        from conflictlab.scenarios import action_kinds

        scen = build_scenario(kind)
        pol_a, pol_b = scen.policies(CFG)
        rng = np.random.default_rng(9)
        kind_a, kind_b = action_kinds(kind)
        for _ in range(20):
            u = datafiles.sample_random_condition(CFG, rng)
            for pol, k in ((pol_a, kind_a), (pol_b, kind_b)):
                a = pol(u.s0)
                if k == "assoc":
                    assert a.shape == (5,) and a.min() >= -1 and a.max() < 3
                else:
                    assert a.shape == (3,) and a.min() >= 0 and a.max() <= 2


ECHO_POLICY = """
import json, sys
for line in sys.stdin:
    state = json.loads(line)
    print(json.dumps({"action": [0] * len(state["assoc"])}))
    sys.stdout.flush()
"""


class TestSubprocessPolicy:
    def test_round_trip(self):
        pol = SubprocessPolicy([sys.executable, "-u", "-c", ECHO_POLICY])
        try:
            s = _state(CENTER, [1, 2, 0, -1, 1], [MED] * 3)
            out = pol(s)
            assert out.tolist() == [0] * 5
            out2 = pol(s)  # process stays alive across queries
            assert out2.tolist() == [0] * 5
        finally:
            pol.close()
