import numpy as np
import pytest

from conflictlab import datafiles
from conflictlab.encoding import (
    block_probs,
    block_probs_backward,
    decode_condition,
    decode_steps,
    encode_state_features,
    encode_trajectory,
    layout_for,
    project,
    soft_features_backward,
    soft_state_features,
)
from conflictlab.netsim import SimConfig, rollout
from conflictlab.scenarios import build_scenario

CFG = SimConfig()


def _hard_traj(kind, seed=0):
    scen = build_scenario(kind)
    pa, pb = scen.policies(CFG)
    rng = np.random.default_rng(seed)
    u = datafiles.sample_random_condition(CFG, rng)
    return rollout(u, pa, pb, CFG, kind, scen.joint_priority)


@pytest.mark.parametrize("kind", ["direct", "indirect", "implicit"])
def test_round_trip_exact_for_hard_trajectories(kind):
    layout = layout_for(CFG, kind)
    traj = _hard_traj(kind)
    rows = encode_trajectory(traj, CFG, layout)
    assert rows.shape == (CFG.horizon, layout.width)
    assert np.abs(rows).max() <= 1.0 + 1e-12

    u = decode_condition(rows, CFG, layout)
    np.testing.assert_allclose(u.s0.ue_pos, traj.states[0].ue_pos, atol=1e-9)
    np.testing.assert_array_equal(u.s0.assoc, traj.states[0].assoc)
    np.testing.assert_array_equal(u.s0.power, traj.states[0].power)
    for e1, e2 in zip(u.exo, traj.exo):
        np.testing.assert_allclose(e1.headings, e2.headings, atol=1e-9)

    steps = decode_steps(rows, CFG, layout)
    for t, (state, a_a, a_b) in enumerate(steps):
        np.testing.assert_array_equal(state.assoc, traj.states[t].assoc)
        np.testing.assert_array_equal(a_a, traj.actions[t].a_A)
        np.testing.assert_array_equal(a_b, traj.actions[t].a_B)


class TestProject:
    def test_hard_trajectory_unchanged(self):
        layout = layout_for(CFG, "direct")
        rows = encode_trajectory(_hard_traj("direct"), CFG, layout)
        np.testing.assert_allclose(project(rows, layout), rows, atol=1e-12)

    def test_block_snaps_to_argmax(self):
        layout = layout_for(CFG, "direct")
        rows = np.zeros((1, layout.width))
        sl = layout.slices["assoc"]
        block = np.tile([-1.0, -1.0, -1.0, -1.0], 5)
        block[:4] = [0.9, 0.2, -0.5, -1.0]
        rows[0, sl] = block
        snapped = project(rows, layout)[0, sl][:4]
        np.testing.assert_array_equal(snapped, [1.0, -1.0, -1.0, -1.0])

    def test_idempotence_sweep(self):
        layout = layout_for(CFG, "indirect")
        rng = np.random.default_rng(12)
        for _ in range(100):
            x = rng.normal(0, 2, size=(CFG.horizon, layout.width))
            once = project(x, layout)
            np.testing.assert_allclose(project(once, layout), once, atol=1e-12)

    def test_projected_decodes_to_valid_condition(self):
        layout = layout_for(CFG, "implicit")
        rng = np.random.default_rng(13)
        for _ in range(20)  :
            x = project(rng.normal(0, 2, size=(CFG.horizon, layout.width)), layout)
            u = decode_condition(x, CFG, layout)
            w, h = CFG.arena
            assert (u.s0.ue_pos[:, 0] >= 0).all() and (u.s0.ue_pos[:, 0] <= w).all()
            assert (u.s0.ue_pos[:, 1] >= 0).all() and (u.s0.ue_pos[:, 1] <= h).all()
            assert u.s0.assoc.min() >= -1 and u.s0.assoc.max() < CFG.n_bs
            assert u.s0.power.min() >= 0 and u.s0.power.max() <= 2
            assert len(u.exo) == CFG.horizon


class TestBlockProbs:
    def test_rows_normalize(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(4, 20))
        p = block_probs(x, 5, 4)
        assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-9)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2, 12))
        w = rng.normal(size=(2, 4, 3))

        def f(xx):
            return float((block_probs(xx, 4, 3) * w).sum())

        p = block_probs(x, 4, 3)
        g = block_probs_backward(p, w)
        fd = np.zeros_like(x)
        h = 1e-6
        for i in np.ndindex(x.shape):
            x[i] += h
            up = f(x)
            x[i] -= 2 * h
            dn = f(x)
            x[i] += h
            fd[i] = (up - dn) / (2 * h)
        assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-6


class TestSoftFeatures:
    def _random_relaxed(self, rng, b=3):
        pos = rng.uniform(-0.9, 0.9, size=(b, CFG.n_ue, 2))
        pa = rng.dirichlet(np.ones(CFG.n_bs + 1), size=(b, CFG.n_ue))
        pp = rng.dirichlet(np.ones(3), size=(b, CFG.n_bs))
        return pos, pa, pp

    def test_matches_hard_encoding_at_onehots(self):
        traj = _hard_traj("indirect", seed=2)
        for t in [0, 5, 19]:
            s = traj.states[t]
            hard = encode_state_features(s, CFG)
            cats = np.where(s.assoc == -1, CFG.n_bs, s.assoc)
            pa = np.zeros((1, CFG.n_ue, CFG.n_bs + 1))
            pa[0, np.arange(CFG.n_ue), cats] = 1.0
            pp = np.zeros((1, CFG.n_bs, 3))
            pp[0, np.arange(CFG.n_bs), s.power] = 1.0
            from conflictlab.encoding import norm_pos

            soft = soft_state_features(norm_pos(s.ue_pos, CFG)[None], pa, pp, CFG)
            np.testing.assert_allclose(soft[0], hard, atol=1e-12)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        pos, pa, pp = self._random_relaxed(rng)
        w = rng.normal(size=(3, 52))

        def f():
            return float((soft_state_features(pos, pa, pp, CFG) * w).sum())

        feats, grads = soft_state_features(pos, pa, pp, CFG, with_grads=True)
        g_pos, g_pa, g_pp = soft_features_backward(w, pos, pa, pp, grads, CFG)
        h = 1e-6
        for arr, g in ((pos, g_pos), (pa, g_pa), (pp, g_pp)):
            fd = np.zeros_like(arr)
            for i in np.ndindex(arr.shape):
                arr[i] += h
                up = f()
                arr[i] -= 2 * h
                dn = f()
                arr[i] += h
                fd[i] = (up - dn) / (2 * h)
            rel = np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12)
            assert rel < 1e-5, rel
