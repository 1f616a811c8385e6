import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from subnetlab import gates as G
from subnetlab.tensor import Tensor

import oracles


def log_alpha_for(z_eval):
    """Inverse of eval_gate on its unclamped range."""
    p = (np.asarray(z_eval, float) + 0.1) / 1.2
    return np.log(p) - np.log1p(-p)


def gate_set(log_alpha, weight=None):
    la = np.asarray(log_alpha, float)
    return G.GateSet.create(np.ones_like(la) if weight is None else weight, init=la)


class TestScalarForms:
    def test_symmetry_point(self):
        assert G.sample_gate(0.0, 0.5) == pytest.approx(0.5, abs=1e-15)

    def test_high_draw_saturates(self):
        # sigmoid(1.5 ln 9) = 27 / 28 exactly
        s = 1 / (1 + math.exp(-1.5 * math.log(9)))
        assert s == pytest.approx(27 / 28, rel=1e-14)
        assert s * 1.2 - 0.1 == pytest.approx(1.057142857, abs=1e-9)
        assert G.sample_gate(0.0, 0.9) == 1.0

    def test_very_negative_log_alpha_is_zero(self):
        assert G.sample_gate(-10.0, 0.5) == 0.0

    def test_u_outside_open_interval(self):
        for u in (0.0, 1.0, -0.2):
            with pytest.raises(ValueError):
                G.sample_gate(0.0, u)

    def test_eval_gate_values(self):
        assert G.eval_gate(0.0) == pytest.approx(0.5)
        assert G.eval_gate(50.0) == 1.0
        assert G.eval_gate(-50.0) == 0.0

    def test_prob_nonzero_closed_form(self):
        assert G.prob_nonzero(0.0) == pytest.approx(1 / (1 + math.exp(-(2 / 3) * math.log(11))))
        assert G.prob_nonzero(0.0) == pytest.approx(0.8318, abs=5e-5)
        assert G.prob_nonzero(-1e4) == 0.0
        assert G.prob_nonzero(1e4) == 1.0

    @pytest.mark.parametrize("la", [-2.0, 0.0, 2.0])
    def test_closed_forms_match_oracle(self, la):
        assert G.prob_nonzero(la) == pytest.approx(1 - oracles.hc_prob_zero(la), rel=1e-12)
        assert G.prob_one(la) == pytest.approx(oracles.hc_prob_one(la), rel=1e-12)


class TestVectorForms:
    def test_sample_gates_matches_scalar(self):
        la = np.array([-3.0, -0.5, 0.0, 1.2, 4.0])
        u = np.array([0.1, 0.4, 0.5, 0.7, 0.99])
        z = G.sample_gates(gate_set(la), u).data
        np.testing.assert_allclose(z, [G.sample_gate(a, b) for a, b in zip(la, u)], atol=1e-14)

    def test_sample_gates_gradient_zero_when_clamped(self):
        g = gate_set([-10.0, 0.0, 10.0])
        z = G.sample_gates(g, np.array([0.5, 0.5, 0.5]))
        z.sum().backward()
        grad = g.log_alpha.grad
        assert grad[0] == 0 and grad[2] == 0 and grad[1] > 0

    def test_uniform_draws_depend_only_on_seed_and_step(self):
        a = G.uniform_draws(6, seed=3, step=10)
        assert np.array_equal(a, G.uniform_draws(6, seed=3, step=10))
        assert not np.array_equal(a, G.uniform_draws(6, seed=3, step=11))
        assert not np.array_equal(a, G.uniform_draws(6, seed=4, step=10))
        # entry i is the same whether or not more components are drawn
        np.testing.assert_array_equal(a, G.uniform_draws(9, seed=3, step=10)[:6])
        assert a.min() > 0 and a.max() < 1

    def test_adjacent_steps_share_no_draws(self):
        a = G.uniform_draws(20, seed=0, step=5)
        b = G.uniform_draws(20, seed=0, step=6)
        assert not set(a.tolist()) & set(b.tolist())

    def test_expected_sparsity_examples(self):
        assert G.expected_sparsity(gate_set([-1e4] * 3)).item() == 1.0
        assert G.expected_sparsity(gate_set([1e4] * 3)).item() == 0.0
        for w in ([1, 1, 1], [5, 1, 30]):
            t = G.expected_sparsity(gate_set([0.0] * 3, w)).item()
            assert t == pytest.approx(1 - 0.8318, abs=5e-5)
        assert G.expected_sparsity(gate_set([1e4, -1e4], [3, 1])).item() == 0.25

    def test_expected_sparsity_gradient(self):
        g = gate_set([0.3, -0.7], [2.0, 1.0])
        G.expected_sparsity(g).backward()
        p = np.array([G.prob_nonzero(0.3), G.prob_nonzero(-0.7)])
        np.testing.assert_allclose(g.log_alpha.grad, -np.array([2, 1]) / 3 * p * (1 - p), rtol=1e-12)

    def test_gateset_invariants(self):
        with pytest.raises(ValueError):
            G.GateSet.create([1.0], init=0.0, l=0.1)
        with pytest.raises(ValueError):
            G.GateSet.create([1.0], init=0.0, beta=0.0)
        with pytest.raises(ValueError):
            G.GateSet.create([1.0], init=0.0, eps=0.5)
        with pytest.raises(ValueError):
            G.GateSet.create([0.0], init=0.0)
        with pytest.raises(ValueError):
            G.GateSet(Tensor(np.zeros(2)), np.ones(3))


class TestLagrangian:
    def test_zero_residual(self):
        s = G.LagrangianState(lambda1=2.0, lambda2=3.0, target=0.4, final_target=0.5)
        assert G.lagrangian_penalty(0.4, s) == 0.0
        G.lagrangian_update(s, 0.4)
        assert (s.lambda1, s.lambda2) == (2.0, 3.0)

    def test_substitution_example(self):
        s = G.LagrangianState(lambda1=1.0, lambda2=1.0, target=0.3, final_target=0.5)
        assert G.lagrangian_penalty(0.5, s) == pytest.approx(0.24, abs=1e-15)

    def test_sign_flip(self):
        s = G.LagrangianState(lambda1=1.0, lambda2=0.0, target=0.3, final_target=0.5)
        assert G.lagrangian_penalty(0.1, s) < 0

    def test_ascent_step(self):
        s = G.LagrangianState(target=0.3, final_target=0.5, lr_lambda=2.0)
        G.lagrangian_update(s, 0.5)
        assert s.lambda1 == pytest.approx(0.4) and s.lambda2 == pytest.approx(0.08)

    def test_penalty_accepts_tensor(self):
        s = G.LagrangianState(lambda1=1.0, lambda2=1.0, target=0.3, final_target=0.5)
        t = Tensor(0.5, requires_grad=True)
        G.lagrangian_penalty(t, s).backward()
        assert t.grad == pytest.approx(1.0 + 2 * 0.2)

    def test_state_invariants(self):
        with pytest.raises(ValueError):
            G.LagrangianState(warmup_steps=-1)
        with pytest.raises(ValueError):
            G.LagrangianState(target=0.7, final_target=0.5)


class TestSchedule:
    def test_examples(self):
        assert G.target_schedule(0, 100, 0.5) == 0.0
        assert G.target_schedule(100, 100, 0.5) == 0.5
        assert G.target_schedule(50, 100, 0.5) == 0.25
        assert G.target_schedule(400, 100, 0.5) == 0.5

    def test_zero_warmup(self):
        assert G.target_schedule(0, 0, 0.7) == 0.7

    def test_negative_step(self):
        with pytest.raises(ValueError):
            G.target_schedule(-1, 10, 0.5)


class TestDiscretize:
    def test_threshold_comparison(self):
        sub = G.discretize(gate_set(log_alpha_for([0.6, 0.2, 0.9])), 0.5)
        assert sub.keep.tolist() == [True, False, True]

    def test_threshold_zero_keeps_all(self):
        sub = G.discretize(gate_set([-30.0, 0.0, 30.0]), 0.0)
        assert sub.keep.all() and sub.sparsity == 0.0

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            G.discretize(gate_set([0.0]), 1.5)

    def test_constructed_case_picks_035(self):
        z = [0.31, 0.32, 0.33, 0.32, 0.34, 0.31, 0.33, 0.9, 0.95, 0.99]
        g = gate_set(log_alpha_for(z))
        # exhaustive oracle over the 21-point grid
        grid = [i / 20 for i in range(21)]
        gaps = [abs(np.mean(~(np.array(z) >= t)) - 0.7) for t in grid]
        oracle = grid[int(np.argmin(gaps))]
        assert oracle == pytest.approx(0.35)
        assert G.choose_threshold(g, 0.7) == pytest.approx(oracle)

    def test_ties_go_to_lower_threshold(self):
        g = gate_set(log_alpha_for([0.52, 0.52]))
        # every threshold up to 0.5 keeps both: first grid point (0.0) wins
        assert G.choose_threshold(g, 0.0) == 0.0

    def test_subnetwork_roundtrip(self):
        sub = G.discretize(gate_set(log_alpha_for([0.6, 0.2, 0.9]), [4, 1, 5]), 0.5)
        sub.seed, sub.target_sparsity = 7, 0.1
        back = G.Subnetwork.from_dict(sub.to_dict())
        assert back.keep.tolist() == sub.keep.tolist()
        assert back.sparsity == pytest.approx(0.1)
        assert (back.seed, back.threshold) == (7, 0.5)


class TestMonteCarlo:
    N = 1_000_000

    @pytest.mark.parametrize("la", [-2.0, 0.0, 2.0])
    def test_statistics_within_three_standard_errors(self, la):
        u = G.uniform_draws(self.N, seed=2024, step=int(la * 10) + 100)
        z = G.sample_gates(gate_set(np.full(self.N, la)), u).data
        for emp, ref in ((np.mean(z == 0), oracles.hc_prob_zero(la)),
                         (np.mean(z == 1), oracles.hc_prob_one(la))):
            se = math.sqrt(ref * (1 - ref) / self.N)
            assert abs(emp - ref) < 3 * se
        mean_ref = oracles.hc_mean(la)
        assert abs(z.mean() - mean_ref) < 3 * z.std() / math.sqrt(self.N)


class TestProperties:
    @settings(max_examples=100, deadline=None)
    @given(st.floats(-8, 8), st.floats(-8, 8), st.floats(1e-6, 1 - 1e-6))
    def test_monotone_in_log_alpha(self, a, b, u):
        lo, hi = min(a, b), max(a, b)
        assert G.sample_gate(lo, u) <= G.sample_gate(hi, u)
        assert G.eval_gate(lo) <= G.eval_gate(hi)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-30, 30), min_size=1, max_size=12),
           st.lists(st.floats(0.1, 100), min_size=12, max_size=12))
    def test_expected_sparsity_in_unit_interval(self, la, w):
        t = G.expected_sparsity(gate_set(la, w[:len(la)])).item()
        assert 0.0 <= t <= 1.0

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(-6, 6), min_size=2, max_size=10),
           st.lists(st.integers(1, 50), min_size=10, max_size=10),
           st.floats(0.0, 0.95))
    def test_choose_threshold_is_grid_optimal(self, la, w, target):
        g = gate_set(la, np.array(w[:len(la)], float))
        thr = G.choose_threshold(g, target)
        best = min(abs(G.discretize(g, t).sparsity - target) for t in G.THRESHOLD_GRID)
        assert abs(G.discretize(g, thr).sparsity - target) == pytest.approx(best, abs=1e-12)
