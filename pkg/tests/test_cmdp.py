import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from mtpref import (
    DimensionMismatch,
    ExplosionError,
    Policy,
    ValidationError,
    enumerate_trajectories,
    gen_random_cmdp,
    geometric_mixture,
    make_policy,
    mixture_policy,
    reach_probabilities,
    sample_trajectory,
    single_turn_instance,
    trajectory_kl,
    validate_cmdp,
)
from mtpref.cmdp import build_cmdp, cmdp_to_dict, reach_all, state_kl


def doc_h1(p=("0.5", "0.5"), second_state=True):
    layers = [["x1"], ["xA", "xB"]] if second_state else [["x1"], ["xA"]]
    return {
        "contexts": [{"id": "c", "prob": "1"}],
        "horizon": 1,
        "layers": layers,
        "actions": ["a", "b"],
        "transitions": [
            {"context": "c", "state": "x1", "action": "a", "next": [["xA", p[0]], ["xB", p[1]]]},
            {"context": "c", "state": "x1", "action": "b", "next": [["xA", p[1]], ["xB", p[0]]]},
        ],
        "reference_policy": [{"context": "c", "state": "x1", "probs": ["0.5", "0.5"]}],
    }


def deterministic_chain(H=2, n_actions=2):
    """Action 0 moves to state 0 of the next layer, action 1 to state 1."""
    layers = [["s"]] + [[f"l{h}a", f"l{h}b"] for h in range(2, H + 2)]
    sizes = [len(x) for x in layers]
    off = np.concatenate([[0], np.cumsum(sizes)])
    T = np.zeros((1, off[-2], n_actions, off[-1]))
    for h in range(H):
        for x in range(off[h], off[h + 1]):
            for y in range(n_actions):
                T[0, x, y, off[h + 1] + (y % 2)] = 1.0
    mu = np.full((1, off[-2], n_actions), 1.0 / n_actions)
    return build_cmdp(["c"], [1.0], layers, [f"y{i}" for i in range(n_actions)], T, mu)


class TestValidate:
    def test_well_formed_h1(self):
        cmdp = validate_cmdp(doc_h1())
        assert cmdp.horizon == 1 and cmdp.n_states == 3
        assert cmdp.transitions[0, 0, 0, 1] == 0.5

    def test_row_summing_to_point_nine_is_named(self):
        with pytest.raises(ValidationError) as exc:
            validate_cmdp(doc_h1(p=("0.5", "0.4")))
        msg = " ".join(exc.value.violations)
        assert "x1" in msg and "sums to" in msg

    def test_unreachable_state(self):
        doc = doc_h1(p=("1", "0"))
        doc["layers"][1].append("xC")
        with pytest.raises(ValidationError) as exc:
            validate_cmdp(doc)
        assert any("xC" in v and "unreachable under mu" in v for v in exc.value.violations)

    def test_every_violation_is_listed(self):
        doc = doc_h1(p=("0.5", "0.4"))
        doc["contexts"][0]["prob"] = "0.9"
        doc["layers"][1].append("xC")
        with pytest.raises(ValidationError) as exc:
            validate_cmdp(doc)
        assert len(exc.value.violations) >= 3

    def test_decimal_exactness(self):
        # 0.1 + 0.2 + 0.7 is not 1.0 in binary, is exactly 1 in decimal
        doc = doc_h1()
        doc["layers"][1].append("xC")
        for t in doc["transitions"]:
            t["next"] = [["xA", "0.1"], ["xB", "0.2"], ["xC", "0.7"]]
        cmdp = validate_cmdp(json.dumps(doc))
        assert cmdp.n_terminal == 3

    def test_roundtrip(self):
        cmdp, _ = gen_random_cmdp(3, 2, 3, 2, num_contexts=2)
        again = validate_cmdp(json.loads(json.dumps(cmdp_to_dict(cmdp))))
        np.testing.assert_array_equal(again.transitions, cmdp.transitions)
        np.testing.assert_array_equal(again.reference_probs, cmdp.reference_probs)

    def test_layering_enforced(self):
        doc = doc_h1()
        doc["transitions"][0]["next"] = [["x1", "0.5"], ["xB", "0.5"]]
        with pytest.raises(ValidationError):
            validate_cmdp(doc)


class TestReach:
    def test_deterministic_single_path(self):
        cmdp = deterministic_chain(H=3)
        pi = make_policy(cmdp, np.tile([1.0, 0.0], (1, cmdp.n_nonterminal, 1)))
        rho = reach_probabilities(cmdp, pi).rho
        on_path = [0] + [1 + 2 * h for h in range(3)]
        assert np.all(rho[on_path] == 1.0)
        assert rho.sum() == 4.0

    def test_uniform_h1(self):
        cmdp, _ = single_turn_instance()
        rho = reach_probabilities(cmdp, cmdp.reference_policy).rho
        np.testing.assert_array_equal(rho, [1.0, 0.5, 0.5])

    def test_matches_enumeration(self):
        cmdp, _ = gen_random_cmdp(11, 3, 4, 3)
        pi = Policy(oracles.random_policy(cmdp, np.random.default_rng(0)))
        rho = reach_probabilities(cmdp, pi).rho
        np.testing.assert_allclose(rho[cmdp.terminal_slice], oracles.terminal_distribution(cmdp, pi, 0),
                                   atol=1e-12, rtol=0)
        np.testing.assert_allclose(rho, oracles.reach(cmdp, pi, 0), atol=1e-12, rtol=0)

    def test_layer_mass(self):
        cmdp, _ = gen_random_cmdp(5, 4, 5, 4, num_contexts=3)
        rho = reach_all(cmdp, Policy(oracles.random_policy(cmdp, np.random.default_rng(1), sparsity=0.3)))
        for sl in cmdp.layer_slices:
            np.testing.assert_allclose(rho[:, sl].sum(axis=1), 1.0, atol=1e-10)

    def test_dimension_mismatch(self):
        cmdp, _ = single_turn_instance()
        with pytest.raises(DimensionMismatch):
            reach_probabilities(cmdp, Policy(np.full((1, 2, 2), 0.5)))


class TestEnumerate:
    def test_deterministic_one_trajectory(self):
        cmdp = deterministic_chain(H=2)
        pi = make_policy(cmdp, np.tile([0.0, 1.0], (1, cmdp.n_nonterminal, 1)))
        trajs = enumerate_trajectories(cmdp, pi)
        assert len(trajs) == 1 and trajs[0].prob == 1.0

    def test_four_uniform(self):
        cmdp = deterministic_chain(H=2)
        trajs = enumerate_trajectories(cmdp, cmdp.reference_policy)
        assert len(trajs) == 4
        assert all(t.prob == 0.25 for t in trajs)

    def test_sums_to_one(self):
        cmdp, _ = gen_random_cmdp(2, 4, 4, 3)
        trajs = enumerate_trajectories(cmdp, cmdp.reference_policy)
        assert abs(sum(t.prob for t in trajs) - 1.0) <= 1e-10
        assert all(0 < t.prob <= 1 for t in trajs)

    def test_cap(self):
        cmdp, _ = gen_random_cmdp(2, 4, 4, 3)
        with pytest.raises(ExplosionError):
            enumerate_trajectories(cmdp, cmdp.reference_policy, cap=10)

    def test_layering_of_steps(self):
        cmdp, _ = gen_random_cmdp(9, 3, 3, 2)
        for t in enumerate_trajectories(cmdp, cmdp.reference_policy):
            assert [int(cmdp.state_layer[x]) for x in t.states] == list(range(1, cmdp.horizon + 2))


class TestSampling:
    def test_deterministic_unique(self):
        cmdp = deterministic_chain(H=3)
        pi = make_policy(cmdp, np.tile([1.0, 0.0], (1, cmdp.n_nonterminal, 1)))
        for seed in range(3):
            t = sample_trajectory(cmdp, pi, 0, np.random.default_rng(seed))
            assert t.actions == (0, 0, 0)

    def test_same_seed(self):
        cmdp, _ = gen_random_cmdp(4, 3, 4, 3)
        a = sample_trajectory(cmdp, cmdp.reference_policy, 0, np.random.default_rng(7))
        b = sample_trajectory(cmdp, cmdp.reference_policy, 0, np.random.default_rng(7))
        assert a == b

    def test_terminal_frequencies_3sigma(self):
        from mtpref.cmdp import sample_paths

        cmdp, _ = gen_random_cmdp(8, 2, 4, 3)
        assert cmdp.n_terminal == 4
        pi = Policy(oracles.random_policy(cmdp, np.random.default_rng(3)))
        n = 100_000
        paths = sample_paths(cmdp, pi, np.zeros(n, dtype=np.int64), np.random.default_rng(0))
        counts = np.bincount(paths.states[:, -1] - cmdp.terminal_slice.start, minlength=4)
        p = reach_probabilities(cmdp, pi).rho[cmdp.terminal_slice]
        sigma = np.sqrt(n * p * (1 - p))
        assert np.all(np.abs(counts - n * p) <= 3 * sigma + 1e-9)


class TestKL:
    def test_self_zero(self):
        cmdp, _ = gen_random_cmdp(1, 3, 3, 3)
        pi = Policy(oracles.random_policy(cmdp, np.random.default_rng(0)))
        assert trajectory_kl(cmdp, pi, pi) == 0.0

    def test_ln2(self):
        cmdp, _ = single_turn_instance()
        pi = make_policy(cmdp, [[[1.0, 0.0]]])
        assert trajectory_kl(cmdp, pi, cmdp.reference_policy) == pytest.approx(math.log(2), abs=1e-15)

    def test_support_violation_is_infinite(self):
        cmdp, _ = single_turn_instance()
        det = make_policy(cmdp, [[[1.0, 0.0]]])
        assert trajectory_kl(cmdp, cmdp.reference_policy, det) == math.inf
        from mtpref import SupportViolation

        with pytest.raises(SupportViolation):
            trajectory_kl(cmdp, cmdp.reference_policy, det, strict=True)

    @pytest.mark.parametrize("seed", range(5))
    def test_decomposition(self, seed):
        cmdp, _ = gen_random_cmdp(seed, 3, 3, 3, num_contexts=2)
        rng = np.random.default_rng(seed)
        pi = Policy(oracles.random_policy(cmdp, rng, sparsity=0.3))
        pp = Policy(oracles.random_policy(cmdp, rng))
        assert abs(trajectory_kl(cmdp, pi, pp) - oracles.direct_kl(cmdp, pi, pp)) <= 1e-9

    def test_state_kl_nonnegative(self):
        p = np.array([[0.999999, 1e-6, 0.0]])
        q = np.array([[0.999999, 1e-6, 0.0]])
        assert state_kl(p, q)[0] == 0.0


class TestMixtures:
    def test_coeff_one(self):
        cmdp, _ = gen_random_cmdp(6, 3, 3, 3)
        rng = np.random.default_rng(0)
        p1, p2 = Policy(oracles.random_policy(cmdp, rng)), Policy(oracles.random_policy(cmdp, rng))
        np.testing.assert_allclose(mixture_policy(cmdp, p1, p2, 1.0).probs, p1.probs, atol=1e-15)

    def test_same_policy(self):
        cmdp, _ = gen_random_cmdp(6, 3, 3, 3)
        p1 = Policy(oracles.random_policy(cmdp, np.random.default_rng(0)))
        np.testing.assert_allclose(mixture_policy(cmdp, p1, p1, 0.5).probs, p1.probs, atol=1e-15)

    def test_reach_linearity(self):
        cmdp, _ = gen_random_cmdp(6, 3, 4, 3, num_contexts=2)
        rng = np.random.default_rng(1)
        p1 = Policy(oracles.random_policy(cmdp, rng, sparsity=0.4))
        p2 = Policy(oracles.random_policy(cmdp, rng, sparsity=0.4))
        mix = mixture_policy(cmdp, p1, p2, 0.3)
        np.testing.assert_allclose(reach_all(cmdp, mix), 0.3 * reach_all(cmdp, p1) + 0.7 * reach_all(cmdp, p2),
                                   atol=1e-10, rtol=0)

    def test_doubly_unreachable_falls_back_to_mu(self):
        cmdp = deterministic_chain(H=2)
        det = make_policy(cmdp, np.tile([1.0, 0.0], (1, cmdp.n_nonterminal, 1)))
        mix = mixture_policy(cmdp, det, det, 0.5)
        # layer-2 state "l2b" is never visited by either policy
        x = cmdp.state_index["l2b"]
        np.testing.assert_array_equal(mix.probs[0, x], cmdp.reference_probs[0, x])

    def test_geometric_endpoints(self):
        cmdp, _ = gen_random_cmdp(6, 2, 3, 3)
        pi = Policy(oracles.random_policy(cmdp, np.random.default_rng(2)))
        mu = cmdp.reference_policy
        np.testing.assert_array_equal(geometric_mixture(pi, mu, 0.0).probs, pi.probs)
        np.testing.assert_array_equal(geometric_mixture(pi, mu, 1.0).probs, mu.probs)

    def test_geometric_closed_form(self):
        cmdp, _ = single_turn_instance()
        pi = make_policy(cmdp, [[[0.9, 0.1]]])
        g = geometric_mixture(pi, cmdp.reference_policy, 0.5).probs[0, 0]
        w = np.sqrt([0.45, 0.05])
        np.testing.assert_allclose(g, w / w.sum(), atol=1e-15)
        assert g[0] == pytest.approx(0.75, abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(beta=st.floats(0.0, 1.0), seed=st.integers(0, 50))
    def test_geometric_idempotent_on_mu(self, beta, seed):
        cmdp, _ = gen_random_cmdp(seed, 2, 3, 3)
        mu = cmdp.reference_policy
        np.testing.assert_allclose(geometric_mixture(mu, mu, beta).probs, mu.probs, atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), H=st.integers(1, 3), n=st.integers(1, 4), A=st.integers(1, 3),
       C=st.integers(1, 2))
def test_property_kl_decomposition_and_mass(seed, H, n, A, C):
    cmdp, _ = gen_random_cmdp(seed, H, n, A, num_contexts=C)
    rng = np.random.default_rng(seed)
    pi = Policy(oracles.random_policy(cmdp, rng, sparsity=0.3))
    pp = Policy(oracles.random_policy(cmdp, rng))
    assert abs(trajectory_kl(cmdp, pi, pp) - oracles.direct_kl(cmdp, pi, pp)) <= 1e-9
    rho = reach_all(cmdp, pi)
    for sl in cmdp.layer_slices:
        np.testing.assert_allclose(rho[:, sl].sum(axis=1), 1.0, atol=1e-10)
