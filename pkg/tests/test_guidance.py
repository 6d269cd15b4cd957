import numpy as np
import pytest

from conflictlab import datafiles, diffusion, guidance, surrogate
from conflictlab.conflict import ConflictSpec
from conflictlab.diffusion import Denoiser, DenoiserNet, NoiseSchedule, forward_noise
from conflictlab.encoding import encode_trajectory, layout_for
from conflictlab.guidance import (
    EnergyEngine,
    GuidanceConfig,
    compose,
    guided_sample,
    tweedie,
    tweedie_cached,
    tweedie_vjp,
)
from conflictlab.netsim import SimConfig, rollout
from conflictlab.scenarios import build_scenario

CFG = SimConfig()
SCHED = NoiseSchedule()


@pytest.fixture(scope="module")
def stack():
    kind = "indirect"
    scen = build_scenario(kind)
    layout = layout_for(CFG, kind)
    d_a = datafiles.collect_marginal(scen, CFG, "A", n_episodes=60, seed=1)
    d_b = datafiles.collect_marginal(scen, CFG, "B", n_episodes=60, seed=2)
    pol_a = surrogate.train_policy_ensemble(d_a, "A", layout, n_members=3, seed=0,
                                            max_epochs=30)
    pol_b = surrogate.train_policy_ensemble(d_b, "B", layout, n_members=3, seed=0,
                                            max_epochs=30)
    dyn = surrogate.train_dynamics_ensemble([d_a, d_b], layout, n_members=3, seed=0,
                                            max_epochs=30)
    pool = np.stack([encode_trajectory(t, CFG, layout) for t in d_a.trajectories])
    den = diffusion.train_denoiser(pool, SCHED, layout, seed=0, steps=300, batch=32)
    return layout, pol_a, pol_b, dyn, den, d_a


class TestTweedie:
    def test_exact_inversion_with_true_noise(self, stack):
        layout, *_ , den, d_a = stack
        tau0 = encode_trajectory(d_a.trajectories[0], CFG, layout)[None]
        rng = np.random.default_rng(0)
        eps = rng.standard_normal(tau0.shape)
        k = 40
        tau_k = forward_noise(tau0, k, eps, SCHED)

        class ExactNet:
            def predict(self, tau, kk):
                return eps

        est = tweedie(tau_k, k, ExactNet(), SCHED)
        np.testing.assert_allclose(est, tau0, atol=1e-9)

    def test_zero_predictor_rescales(self, stack):
        layout, *_ , den, _ = stack

        class ZeroNet:
            def predict(self, tau, kk):
                return np.zeros_like(tau)

        tau_k = np.random.default_rng(1).normal(size=(2, *den.traj_shape))
        k = 30
        est = tweedie(tau_k, k, ZeroNet(), SCHED)
        np.testing.assert_allclose(est, tau_k / np.sqrt(SCHED.alpha_bar(k)), atol=1e-12)

    def test_gradient_through_denoiser_matches_fd(self):
        rng = np.random.default_rng(2)
        net = DenoiserNet(24, hidden=(10, 10, 10), rng=rng)
        den = Denoiser(net, SCHED, {"horizon": 4, "width": 6})
        tau = rng.normal(size=(2, 4, 6))
        w = rng.normal(size=(2, 4, 6))
        k = 25
        tau0, ctx = tweedie_cached(tau, k, den, SCHED)
        g = tweedie_vjp(ctx, den, w)
        h = 1e-6
        fd = np.zeros_like(tau)
        for idx in np.ndindex(tau.shape):
            tau[idx] += h
            up = float((tweedie(tau, k, den, SCHED) * w).sum())
            tau[idx] -= 2 * h
            dn = float((tweedie(tau, k, den, SCHED) * w).sum())
            tau[idx] += h
            fd[idx] = (up - dn) / (2 * h)
        assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-3


class TestCompose:
    def _grads(self, rng, shape=(3, 4, 5)):
        return [rng.normal(size=shape) for _ in range(3)]

    def test_gamma_one_returns_pure_target_direction(self):
        g = self._grads(np.random.default_rng(3))
        cfg = GuidanceConfig(gamma=1.0)
        d, dirs = compose(*g, cfg)
        np.testing.assert_allclose(d, dirs[0], atol=1e-12)

    def test_gamma_zero_averages_physics_epistemic(self):
        g = self._grads(np.random.default_rng(4))
        cfg = GuidanceConfig(gamma=0.0)
        d, dirs = compose(*g, cfg)
        np.testing.assert_allclose(d, (dirs[1] + dirs[2]) / 2.0, atol=1e-12)

    def test_directions_unit_norm(self):
        g = self._grads(np.random.default_rng(5))
        _, dirs = compose(*g, GuidanceConfig())
        for direction in dirs:
            norms = np.sqrt((direction**2).sum(axis=(1, 2)))
            assert ((norms > 1.0 - 1e-4) & (norms <= 1.0)).all()

    def test_shape_mismatch_rejected(self):
        rng = np.random.default_rng(6)
        with pytest.raises(ValueError):
            compose(rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4)),
                    rng.normal(size=(2, 3, 5)), GuidanceConfig())


class TestEnergies:
    def test_gradients_match_finite_differences(self, stack):
        layout, pol_a, pol_b, dyn, den, d_a = stack
        spec = ConflictSpec("indirect")
        engine = EnergyEngine(layout, CFG, spec, pol_a, pol_b, dyn, GuidanceConfig())
        rng = np.random.default_rng(7)
        base = encode_trajectory(d_a.trajectories[1], CFG, layout)
        tau0 = base[None] + rng.normal(0, 0.05, size=(1, *base.shape))
        values, grads = engine.energies(tau0)
        h = 1e-6
        for name in ("target", "physics", "epistemic"):
            row = 6
            fd_row = np.zeros(layout.width)
            for col in range(layout.width):
                tau0[0, row, col] += h
                up = engine.energies(tau0)[0][name][0]
                tau0[0, row, col] -= 2 * h
                dn = engine.energies(tau0)[0][name][0]
                tau0[0, row, col] += h
                fd_row[col] = (up - dn) / (2 * h)
            an_row = grads[name][0, row]
            rel = np.linalg.norm(an_row - fd_row) / max(np.linalg.norm(fd_row), 1e-9)
            assert rel < 1e-3, (name, rel)

    def test_identical_member_ensembles_zero_epistemic(self, stack):
        layout, pol_a, pol_b, dyn, den, d_a = stack
        clone_a = surrogate.PolicyEnsemble(
            [pol_a.members[0]] * 3, pol_a.norm, pol_a.n_heads, pol_a.n_cats,
            pol_a.role, pol_a.scenario, pol_a.action_kind, CFG)
        clone_b = surrogate.PolicyEnsemble(
            [pol_b.members[0]] * 3, pol_b.norm, pol_b.n_heads, pol_b.n_cats,
            pol_b.role, pol_b.scenario, pol_b.action_kind, CFG)
        clone_d = surrogate.DynamicsEnsemble(
            [dyn.members[0]] * 3, dyn.norm, dyn.layout_meta, dyn.scenario, CFG)
        engine = EnergyEngine(layout, CFG, ConflictSpec("indirect"),
                              clone_a, clone_b, clone_d, GuidanceConfig())
        tau0 = np.random.default_rng(8).normal(0, 0.3, size=(2, CFG.horizon, layout.width))
        values, grads = engine.energies(tau0)
        np.testing.assert_allclose(values["epistemic"], 0.0, atol=1e-12)
        np.testing.assert_allclose(grads["epistemic"], 0.0, atol=1e-12)

    def test_physics_zero_on_self_consistent_rollout(self, stack):
        # autoregressive mean-prediction rollouts are exactly self-consistent
        layout, pol_a, pol_b, dyn, den, d_a = stack
        spec = ConflictSpec("indirect")
        engine = EnergyEngine(layout, CFG, spec, pol_a, pol_b, dyn, GuidanceConfig())
        rng = np.random.default_rng(9)
        base = encode_trajectory(d_a.trajectories[2], CFG, layout)[None].copy()
        sl = layout.slices
        st_idx = layout.state_indices()
        rows = base[0]
        for t in range(CFG.horizon - 1):
            x = np.concatenate([
                rows[t][st_idx], rows[t][sl["heading"]],
                rows[t][sl["act_a"]], rows[t][sl["act_b"]],
            ])[None]
            pred = dyn.mean_prediction(x)[0]
            rows[t + 1][st_idx] = pred
        values, _ = engine.energies(rows[None])
        assert abs(values["physics"][0]) < 1e-12

    def test_ablation_zeroes_epistemic_contribution(self, stack):
        layout, pol_a, pol_b, dyn, den, d_a = stack
        cfg_off = GuidanceConfig(udyn_scale=0.0, upi_scale=0.0)
        engine = EnergyEngine(layout, CFG, ConflictSpec("indirect"),
                              pol_a, pol_b, dyn, cfg_off)
        tau0 = np.random.default_rng(10).normal(0, 0.3, size=(1, CFG.horizon, layout.width))
        values, grads = engine.energies(tau0)
        assert values["epistemic"][0] == 0.0
        np.testing.assert_allclose(grads["epistemic"], 0.0, atol=1e-15)


class TestGuidedSampling:
    def test_eta_zero_reproduces_unguided_bit_exactly(self, stack):
        layout, pol_a, pol_b, dyn, den, d_a = stack
        spec = ConflictSpec("indirect")
        g_cfg = GuidanceConfig(eta=0.0, n_candidates=4)
        _, _, rows = guided_sample(4, g_cfg, den, SCHED, layout, CFG, spec,
                                   pol_a, pol_b, dyn, seed=21)
        unguided = diffusion.sample_unguided(4, SCHED, den, layout, seed=21)
        ranked_back = np.stack(sorted(rows, key=lambda r: r.tobytes()))
        unranked = np.stack(sorted(unguided, key=lambda r: r.tobytes()))
        np.testing.assert_array_equal(ranked_back, unranked)

    def test_candidates_decode_to_valid_conditions(self, stack):
        layout, pol_a, pol_b, dyn, den, d_a = stack
        spec = ConflictSpec("indirect")
        report, conds, rows = guided_sample(
            5, GuidanceConfig(eta=8.0, n_candidates=5), den, SCHED, layout,
            CFG, spec, pol_a, pol_b, dyn, seed=22,
        )
        w, h = CFG.arena
        assert len(conds) == 5
        for u in conds:
            assert (u.s0.ue_pos >= 0).all()
            assert (u.s0.ue_pos[:, 0] <= w).all() and (u.s0.ue_pos[:, 1] <= h).all()
            assert len(u.exo) == CFG.horizon

    def test_ranking_key_reproducible_from_decoded_rows(self, stack):
        layout, pol_a, pol_b, dyn, den, d_a = stack
        spec = ConflictSpec("indirect")
        report, conds, rows = guided_sample(
            4, GuidanceConfig(eta=8.0), den, SCHED, layout, CFG, spec,
            pol_a, pol_b, dyn, seed=23,
        )
        for i in range(4):
            again = guidance.conflict_score_decoded(rows[i], CFG, layout, spec,
                                                    pol_a, pol_b)
            assert again == pytest.approx(report.j_hat[i], abs=1e-12)

    def test_report_never_drops_aborted_candidates(self, stack):
        layout, pol_a, pol_b, dyn, den, d_a = stack
        spec = ConflictSpec("indirect")
        report, conds, rows = guided_sample(
            3, GuidanceConfig(eta=8.0), den, SCHED, layout, CFG, spec,
            pol_a, pol_b, dyn, seed=24,
        )
        assert len(conds) == 3 and len(report.j_hat) == 3
