import csv
import math

import numpy as np
import pytest

import oracles
from mtpref import (
    BoundViolation,
    NotConverged,
    Policy,
    SolverConfig,
    TerminalReward,
    exploitability,
    gen_bt_chain,
    gen_random_cmdp,
    geometric_mixture,
    lr_schedule,
    make_policy,
    matrix_preference,
    md_step,
    mtpo_iteration,
    mtpo_tau_iteration,
    nash_solve,
    regularized_preference,
    rlhf_md_iteration,
    run,
    single_turn_instance,
    soft_best_response,
    trajectory_kl,
)
from mtpref import solvers
from mtpref.solvers import TRACE_COLUMNS, MissingReward, selfplay_q


def tv(p, q):
    return 0.5 * np.abs(p.probs - q.probs).sum(axis=-1).max()


class TestSchedule:
    def test_values(self):
        assert lr_schedule(0, 0.5) == 2.0
        assert lr_schedule(98, 0.1) == pytest.approx(0.2, abs=1e-15)
        for a in (0.01, 0.1, 0.37, 2.0):
            assert a * lr_schedule(0, a) == pytest.approx(1.0, abs=1e-15)

    def test_constant_schedule_guard(self):
        with pytest.raises(ValueError):
            SolverConfig(alpha=0.5, schedule="constant", eta=3.0)
        with pytest.raises(MissingReward):
            SolverConfig(algorithm="rlhf_md")


class TestMdStep:
    def test_constant_q_is_geometric_mixture(self):
        cmdp, _ = gen_random_cmdp(0, 2, 3, 3)
        pi = Policy(oracles.random_policy(cmdp, np.random.default_rng(0)))
        q = np.broadcast_to(np.random.default_rng(1).random((1, cmdp.n_nonterminal, 1)),
                            cmdp.reference_probs.shape).copy()
        out = md_step(cmdp, pi, q, 2.0, 0.2)
        np.testing.assert_allclose(out.probs, geometric_mixture(pi, cmdp.reference_policy, 0.4).probs, atol=1e-14)

    def test_tiny_alpha_softmax(self):
        cmdp, _ = single_turn_instance()
        out = md_step(cmdp, cmdp.reference_policy, np.array([[[1.0, 0.0]]]), 1.0, 1e-9)
        np.testing.assert_allclose(out.probs[0, 0], [0.7311, 0.2689], atol=1e-4)

    def test_full_step_ignores_pi(self):
        cmdp, _ = gen_random_cmdp(1, 2, 3, 3)
        pi = Policy(oracles.random_policy(cmdp, np.random.default_rng(2)))
        q = np.random.default_rng(3).random(cmdp.reference_probs.shape)
        eta = lr_schedule(0, 0.1)
        out = md_step(cmdp, pi, q, eta, 0.1)
        w = cmdp.reference_probs * np.exp(eta * q)
        np.testing.assert_allclose(out.probs, w / w.sum(axis=-1, keepdims=True), atol=1e-14)

    def test_maximizes_mirror_objective(self):
        cmdp, _ = gen_random_cmdp(2, 1, 2, 4)
        rng = np.random.default_rng(4)
        pi = Policy(oracles.random_policy(cmdp, rng))
        q = rng.random(cmdp.reference_probs.shape)
        alpha, eta = 0.3, 1.5
        out = md_step(cmdp, pi, q, eta, alpha)
        mu = cmdp.reference_probs[0, 0]

        def objective(p):
            return (eta * p @ q[0, 0] - alpha * eta * oracles.kl_row(p, mu)
                    - (1 - alpha * eta) * oracles.kl_row(p, pi.probs[0, 0]))

        best = objective(out.probs[0, 0])
        for _ in range(1000):
            cand = out.probs[0, 0] * np.exp(rng.normal(scale=0.3, size=4))
            cand /= cand.sum()
            assert objective(cand) <= best + 1e-10

    def test_rejects_overshoot(self):
        cmdp, _ = single_turn_instance()
        with pytest.raises(ValueError):
            md_step(cmdp, cmdp.reference_policy, np.zeros((1, 1, 2)), 20.0, 0.1)


class TestIterations:
    def test_indifferent_preference_drifts_to_mu(self):
        cmdp, _ = single_turn_instance()
        pref = matrix_preference(np.full((1, 2, 2), 0.5))
        pi = make_policy(cmdp, [[[0.9, 0.1]]])
        cfg = SolverConfig(alpha=0.1)
        nxt = mtpo_iteration(cmdp, pref, pi, 3, cfg)
        beta = 0.1 * cfg.eta_at(3)
        np.testing.assert_allclose(nxt.probs, geometric_mixture(pi, cmdp.reference_policy, beta).probs, atol=1e-15)

    def test_selfplay_symmetry_along_iterates(self):
        cmdp, pref = gen_random_cmdp(3, 3, 3, 3)
        cfg = SolverConfig(alpha=0.1)
        pi = cmdp.reference_policy
        for t in range(20):
            pi = mtpo_iteration(cmdp, pref, pi, t, cfg)
            assert abs(regularized_preference(cmdp, pref, 0.1, pi, pi) - 0.5) <= 1e-12
            assert np.array_equal(pi.probs > 0, cmdp.support)

    def test_tau_first_step_plays_mu(self):
        cmdp, pref = gen_random_cmdp(3, 2, 3, 3)
        pi0 = Policy(oracles.random_policy(cmdp, np.random.default_rng(0)))
        cfg = SolverConfig(algorithm="mtpo_tau", alpha=0.1)
        mixed = geometric_mixture(pi0, cmdp.reference_policy, 0.1 * cfg.eta_at(0))
        np.testing.assert_allclose(mixed.probs, cmdp.reference_probs, atol=1e-15)
        # hence the step does not depend on pi0
        a = mtpo_tau_iteration(cmdp, pref, pi0, 0, cfg)
        b = mtpo_tau_iteration(cmdp, pref, cmdp.reference_policy, 0, cfg)
        np.testing.assert_allclose(a.probs, b.probs, atol=1e-15)

    def test_tau_constant_q(self):
        cmdp, _ = single_turn_instance()
        pref = matrix_preference(np.full((1, 2, 2), 0.5))
        pi = make_policy(cmdp, [[[0.8, 0.2]]])
        cfg = SolverConfig(algorithm="mtpo_tau", alpha=0.1)
        mixed = geometric_mixture(pi, cmdp.reference_policy, 0.1 * cfg.eta_at(5))
        np.testing.assert_allclose(mtpo_tau_iteration(cmdp, pref, pi, 5, cfg).probs, mixed.probs, atol=1e-15)

    def test_rlhf_constant_reward_goes_to_mu(self):
        cmdp, _ = gen_random_cmdp(4, 3, 3, 3)
        cfg = SolverConfig(algorithm="rlhf_md", alpha=0.1, iterations=50,
                           rlhf_reward=TerminalReward(np.full((1, cmdp.n_terminal), 0.3)))
        tr = run(cmdp, None, cfg)
        assert tv(tr.final_policy, cmdp.reference_policy) <= 1e-12

    def test_rlhf_first_step(self):
        cmdp, _ = gen_random_cmdp(4, 2, 3, 3)
        r = TerminalReward(np.random.default_rng(0).random((1, cmdp.n_terminal)))
        cfg = SolverConfig(algorithm="rlhf_md", alpha=0.1, rlhf_reward=r)
        pi = Policy(oracles.random_policy(cmdp, np.random.default_rng(1)))
        from mtpref import generic_qv

        Q, _ = generic_qv(cmdp, pi, r, 0.1)
        eta = cfg.eta_at(0)
        w = cmdp.reference_probs * np.exp(eta * Q.q)
        np.testing.assert_allclose(rlhf_md_iteration(cmdp, r, pi, 0, cfg).probs,
                                   w / w.sum(axis=-1, keepdims=True), atol=1e-14)
        with pytest.raises(MissingReward):
            rlhf_md_iteration(cmdp, None, pi, 0, cfg)


class TestRun:
    def test_single_iteration(self):
        cmdp, pref = gen_random_cmdp(5, 2, 3, 3)
        tr = run(cmdp, pref, SolverConfig(iterations=1))
        assert len(tr.records) == 1
        np.testing.assert_array_equal(tr.policies[0].probs, cmdp.reference_probs)
        assert math.isfinite(tr.records[0].exploitability)

    def test_h1_exploitability(self):
        cmdp, pref = single_turn_instance()
        tr = run(cmdp, pref, SolverConfig(alpha=0.1, iterations=200))
        assert exploitability(cmdp, pref, tr.final_policy, 0.1) <= 1e-5

    def test_full_diagnostics_and_csv(self, tmp_path):
        cmdp, pref = gen_random_cmdp(6, 3, 3, 3, num_contexts=2)
        nash = nash_solve(cmdp, pref, 0.1).policy
        for algo in ("mtpo", "mtpo_tau"):
            tr = run(cmdp, pref, SolverConfig(algorithm=algo, alpha=0.1, iterations=60), reference_nash=nash)
            assert np.nanmin(tr.column("fi_slack")) >= -1e-8
            assert np.nanmin(tr.column("bound_margin")) >= 0
            if algo == "mtpo_tau":
                assert np.nanmin(tr.column("mixture_slack")) >= -1e-8
            tr.write_csv(tmp_path / f"{algo}.csv")
            rows = list(csv.reader(open(tmp_path / f"{algo}.csv")))
            assert tuple(rows[0]) == TRACE_COLUMNS and len(rows) == 61
            assert [int(r[0]) for r in rows[1:]] == list(range(60))
            summary = tr.summary(cmdp, pref)
            assert "wall_time_s" in summary and summary["config"]["algorithm"] == algo

    def test_bound_violation_is_raised(self, monkeypatch):
        cmdp, pref = gen_random_cmdp(6, 2, 3, 3)
        nash = nash_solve(cmdp, pref, 0.1).policy
        monkeypatch.setattr(solvers, "q_magnitude_bound", lambda c, a: 1e-6)
        with pytest.raises(BoundViolation) as exc:
            run(cmdp, pref, SolverConfig(alpha=0.1, iterations=10), reference_nash=nash)
        assert exc.value.check == "convergence bound" and exc.value.iteration == 0
        assert exc.value.trace is not None


class TestNash:
    def test_indifferent(self):
        cmdp, _ = gen_random_cmdp(7, 3, 3, 3)
        pref = matrix_preference(np.full((1, cmdp.n_terminal, cmdp.n_terminal), 0.5))
        cert = nash_solve(cmdp, pref, 0.1)
        assert cert.residual <= 1e-15 and cert.iterations_used == 0
        np.testing.assert_array_equal(cert.policy.probs, cmdp.reference_probs)

    @pytest.mark.parametrize("algorithm", ["mtpo", "mtpo_tau"])
    def test_h1_oracle(self, algorithm):
        cmdp, pref = single_turn_instance(0.8)
        p = oracles.single_turn_fixed_point(0.8, 0.1)
        cert = nash_solve(cmdp, pref, 0.1, algorithm=algorithm)
        assert abs(cert.policy.probs[0, 0, 0] - p) <= 1e-6
        assert cert.residual <= cert.tolerance and cert.exploitability <= 10 * cert.tolerance

    def test_tau_certificate_matches_mtpo(self):
        cmdp, pref = gen_random_cmdp(10, 3, 4, 3, num_contexts=2, perturbation=0.2)
        a = nash_solve(cmdp, pref, 0.1, tolerance=1e-10)
        b = nash_solve(cmdp, pref, 0.1, tolerance=1e-10, algorithm="mtpo_tau")
        assert 0.5 * np.abs(a.policy.probs - b.policy.probs).sum(axis=-1).max() <= 1e-8

    def test_h1_run_converges_to_oracle(self):
        cmdp, pref = single_turn_instance(0.8)
        p = oracles.single_turn_fixed_point(0.8, 0.1)
        for algo in ("mtpo", "mtpo_tau"):
            tr = run(cmdp, pref, SolverConfig(algorithm=algo, alpha=0.1, iterations=300, diagnostics=False))
            assert abs(tr.final_policy.probs[0, 0, 0] - p) <= 1e-6

    def test_constant_eta_uniqueness(self):
        cmdp, pref = gen_random_cmdp(8, 3, 3, 3, perturbation=0.2)
        tol = 1e-9
        a = nash_solve(cmdp, pref, 0.2, tolerance=tol, eta=2.0)
        b = nash_solve(cmdp, pref, 0.2, tolerance=tol, eta=3.5)
        assert np.abs(a.policy.probs - b.policy.probs).max() <= 2 * tol * 10

    def test_not_converged(self):
        cmdp, pref = gen_random_cmdp(8, 3, 3, 3)
        with pytest.raises(NotConverged) as exc:
            nash_solve(cmdp, pref, 0.1, max_iter=2)
        assert exc.value.cap == 2 and exc.value.residual > 0

    def test_certificate_dict(self):
        cmdp, pref = gen_random_cmdp(9, 2, 3, 3)
        d = nash_solve(cmdp, pref, 0.1).to_dict(cmdp)
        assert d["kl_to_mu"] <= 1 / (2 * 0.1)
        assert len(d["policy_sha256"]) == 64


def test_rlhf_reaches_soft_optimum_on_chain():
    cmdp, pref = gen_bt_chain(0, 3)
    from mtpref.envs import chain_rewards

    r = TerminalReward(chain_rewards(pref))
    tr = run(cmdp, None, SolverConfig(algorithm="rlhf_md", alpha=0.1, iterations=500, rlhf_reward=r,
                                      record_policies=False))
    soft, _ = soft_best_response(cmdp, r, 0.1)
    assert trajectory_kl(cmdp, soft, tr.final_policy) <= 1e-6


def test_selfplay_q_reward_is_state_preference():
    cmdp, pref = gen_random_cmdp(10, 2, 3, 3)
    r, Q, V = selfplay_q(cmdp, pref, cmdp.reference_policy, 0.1)
    np.testing.assert_array_equal(V.v[:, cmdp.terminal_slice], r)
