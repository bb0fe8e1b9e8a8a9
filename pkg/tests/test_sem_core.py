"""Oracle and property tests for the structural-equation core."""
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from csavae.sem_core import (
    RIDGE_DELTA,
    apply_mask,
    causal_compose,
    dag_penalty,
    graph_document,
    gumbel_sigmoid,
    hard_adjacency,
    recover_exogenous,
    reconstruct_confounders,
    sample_gumbel,
    solve_scm,
    zero_diagonal,
)

# Hand-computed oracle: sigmoid(1) for the zero-noise sample at logit=0.2, tau=0.2.
SIGMOID_ONE = 1.0 / (1.0 + math.exp(-1.0))  # 0.7310585786300049


def _has_cycle(adj: np.ndarray) -> bool:
    """Brute-force DFS three-color cycle detector, independent of the penalty math."""
    k = adj.shape[0]
    color = [0] * k  # 0 white, 1 gray, 2 black

    def visit(v):
        color[v] = 1
        for w in range(k):
            if adj[v, w] > 0:
                if color[w] == 1:
                    return True
                if color[w] == 0 and visit(w):
                    return True
        color[v] = 2
        return False

    return any(color[v] == 0 and visit(v) for v in range(k))


def _random_dag(rng: np.random.Generator, k: int) -> torch.Tensor:
    """Random weighted DAG: strictly upper-triangular weights under a random node order."""
    perm = rng.permutation(k)
    weights = np.triu(rng.uniform(0.0, 1.0, size=(k, k)), k=1)
    mask = np.triu(rng.integers(0, 2, size=(k, k)), k=1)
    adj = np.zeros((k, k))
    adj[np.ix_(perm, perm)] = weights * mask
    return torch.from_numpy(adj)


class TestGumbelSigmoid:
    def test_zero_noise_matches_sigmoid_of_scaled_logit(self):
        logits = torch.full((2, 2), 0.2, dtype=torch.float64)
        zeros = torch.zeros_like(logits)
        out = gumbel_sigmoid(logits, 0.2, noise=(zeros, zeros))
        # off-diagonal entries: sigmoid(0.2 / 0.2) = sigmoid(1)
        assert out[0, 1].item() == pytest.approx(SIGMOID_ONE, abs=1e-12)
        assert out[1, 0].item() == pytest.approx(SIGMOID_ONE, abs=1e-12)

    def test_diagonal_always_zero(self):
        logits = torch.ones(4, 4, dtype=torch.float64) * 5.0
        gen = torch.Generator().manual_seed(7)
        out = gumbel_sigmoid(logits, 0.2, generator=gen)
        assert torch.all(out.diagonal() == 0)
        hard = gumbel_sigmoid(logits, 0.2, generator=gen, hard=True)
        assert torch.all(hard.diagonal() == 0)

    def test_saturation_at_huge_logits(self):
        logits = torch.tensor([[0.0, 1e6], [-1e6, 0.0]], dtype=torch.float64)
        zeros = torch.zeros_like(logits)
        out = gumbel_sigmoid(logits, 0.2, noise=(zeros, zeros))
        assert out[0, 1].item() == 1.0
        assert out[1, 0].item() == 0.0

    def test_monte_carlo_mean_at_zero_logit_is_half(self):
        # P(edge) = sigmoid(logit) = 0.5 at logit 0; the relaxed values are
        # symmetric around 0.5, so their mean converges there too.
        gen = torch.Generator().manual_seed(123)
        logits = torch.zeros(1, 2, 2, dtype=torch.float64).expand(20000, 2, 2)
        vals = gumbel_sigmoid(logits, 1.0, generator=gen)
        mean = vals[:, 0, 1].mean().item()
        assert mean == pytest.approx(0.5, abs=0.02)

    def test_rejects_nonpositive_tau(self):
        logits = torch.zeros(2, 2, dtype=torch.float64)
        with pytest.raises(ValueError):
            gumbel_sigmoid(logits, 0.0)
        with pytest.raises(ValueError):
            gumbel_sigmoid(logits, -1.0)

    def test_deterministic_given_generator_seed(self):
        logits = torch.randn(3, 3, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
        a = gumbel_sigmoid(logits, 0.2, generator=torch.Generator().manual_seed(42))
        b = gumbel_sigmoid(logits, 0.2, generator=torch.Generator().manual_seed(42))
        assert torch.equal(a, b)

    def test_monotone_in_logit_for_fixed_noise(self):
        gen = torch.Generator().manual_seed(5)
        g1 = sample_gumbel((2, 2), generator=gen)
        g2 = sample_gumbel((2, 2), generator=gen)
        lo = gumbel_sigmoid(torch.full((2, 2), -1.0, dtype=torch.float64), 0.5, noise=(g1, g2))
        hi = gumbel_sigmoid(torch.full((2, 2), 2.0, dtype=torch.float64), 0.5, noise=(g1, g2))
        off = ~torch.eye(2, dtype=torch.bool)
        assert torch.all(hi[off] > lo[off])

    def test_tau_to_zero_gives_near_binary(self):
        gen = torch.Generator().manual_seed(11)
        g1 = sample_gumbel((4, 4), generator=gen)
        g2 = sample_gumbel((4, 4), generator=gen)
        logits = torch.randn(4, 4, generator=torch.Generator().manual_seed(3), dtype=torch.float64)
        out = gumbel_sigmoid(logits, 1e-4, noise=(g1, g2))
        off = ~torch.eye(4, dtype=torch.bool)
        assert torch.all((out[off] < 1e-6) | (out[off] > 1 - 1e-6))

    def test_hard_mode_thresholds_at_half(self):
        logits = torch.tensor([[0.0, 3.0], [-3.0, 0.0]], dtype=torch.float64)
        zeros = torch.zeros_like(logits)
        hard = gumbel_sigmoid(logits, 0.2, noise=(zeros, zeros), hard=True)
        assert hard[0, 1].item() == 1.0
        assert hard[1, 0].item() == 0.0
        assert torch.equal(hard, hard_adjacency(logits))


class TestDagPenalty:
    def test_two_cycle_hand_value(self):
        # M = I + (1/2) A*A = [[1, .5], [.5, 1]]; tr(M^2) = 2 * (1 + .25) = 2.5
        adj = torch.tensor([[0.0, 1.0], [1.0, 0.0]], dtype=torch.float64)
        assert dag_penalty(adj, c=1.0).item() == pytest.approx(0.5, abs=1e-12)

    def test_chain_dag_is_zero(self):
        adj = torch.tensor([[0.0, 1.0], [0.0, 0.0]], dtype=torch.float64)
        assert dag_penalty(adj, c=1.0).item() == pytest.approx(0.0, abs=1e-12)

    def test_benchmark_graph_is_zero(self):
        adj = torch.tensor([
            [0, 1, 0, 0],
            [0, 0, 1, 1],
            [0, 0, 0, 0],
            [0, 0, 0, 0]], dtype=torch.float64)
        assert dag_penalty(adj, c=1.0).item() == pytest.approx(0.0, abs=1e-12)

    def test_rejects_negative_entries_and_bad_c(self):
        adj = torch.tensor([[0.0, -1.0], [0.0, 0.0]], dtype=torch.float64)
        with pytest.raises(ValueError):
            dag_penalty(adj)
        with pytest.raises(ValueError):
            dag_penalty(torch.zeros(2, 2, dtype=torch.float64), c=0.0)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10 ** 9), st.integers(min_value=2, max_value=6))
    def test_zero_iff_acyclic_against_dfs_oracle(self, seed, k):
        rng = np.random.default_rng(seed)
        adj_np = rng.integers(0, 2, size=(k, k)).astype(np.float64)
        np.fill_diagonal(adj_np, 0.0)
        penalty = dag_penalty(torch.from_numpy(adj_np), c=1.0).item()
        if _has_cycle(adj_np):
            assert penalty > 1e-9
        else:
            assert penalty == pytest.approx(0.0, abs=1e-9)

    def test_penalty_increases_with_cycle_weight(self):
        base = torch.tensor([[0.0, 0.5], [0.5, 0.0]], dtype=torch.float64)
        heavier = torch.tensor([[0.0, 0.9], [0.9, 0.0]], dtype=torch.float64)
        assert dag_penalty(heavier).item() > dag_penalty(base).item()

    def test_gradient_flows(self):
        adj = torch.tensor([[0.0, 0.8], [0.7, 0.0]], dtype=torch.float64, requires_grad=True)
        dag_penalty(adj).backward()
        off = ~torch.eye(2, dtype=torch.bool)
        assert torch.all(adj.grad[off] > 0)


class TestScmSolveRecover:
    def test_recover_example(self):
        # chain 1 -> 2 with weight 1, C = [[1], [3]]: eps = (I - A^T) C = [[1], [2]]
        adj = torch.tensor([[0.0, 1.0], [0.0, 0.0]], dtype=torch.float64)
        confounders = torch.tensor([[1.0], [3.0]], dtype=torch.float64)
        eps = recover_exogenous(confounders, adj)
        assert torch.allclose(eps, torch.tensor([[1.0], [2.0]], dtype=torch.float64))

    def test_solve_example(self):
        adj = torch.tensor([[0.0, 1.0], [0.0, 0.0]], dtype=torch.float64)
        eps = torch.tensor([[1.0], [2.0]], dtype=torch.float64)
        solved, ridge = solve_scm(eps, adj)
        assert not ridge
        assert torch.allclose(solved, torch.tensor([[1.0], [3.0]], dtype=torch.float64))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10 ** 9), st.integers(2, 8), st.integers(1, 16))
    def test_roundtrip_on_random_dags(self, seed, k, d):
        rng = np.random.default_rng(seed)
        adj = _random_dag(rng, k)
        eps = torch.from_numpy(rng.normal(size=(k, d)))
        solved, ridge = solve_scm(eps, adj)
        assert not ridge
        back = recover_exogenous(solved, adj)
        assert torch.allclose(back, eps, atol=1e-9, rtol=0.0)
        # and the other direction: recover then solve
        confounders = torch.from_numpy(rng.normal(size=(k, d)))
        eps2 = recover_exogenous(confounders, adj)
        solved2, _ = solve_scm(eps2, adj)
        assert torch.allclose(solved2, confounders, atol=1e-9, rtol=0.0)

    def test_singular_all_ones_engages_ridge_and_stays_finite(self):
        # k=2 all-ones off-diagonal: I - A^T = [[1,-1],[-1,1]] is exactly singular
        adj = torch.tensor([[0.0, 1.0], [1.0, 0.0]], dtype=torch.float64)
        eps = torch.tensor([[1.0], [2.0]], dtype=torch.float64)
        solved, ridge = solve_scm(eps, adj)
        assert ridge
        assert torch.isfinite(solved).all()

    def test_ridge_delta_matches_documented_default(self):
        assert RIDGE_DELTA == 1e-6

    def test_batched_broadcasting(self):
        adj = torch.tensor([[0.0, 1.0], [0.0, 0.0]], dtype=torch.float64)
        eps = torch.randn(5, 2, 3, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
        solved, ridge = solve_scm(eps, adj)
        assert not ridge
        assert solved.shape == (5, 2, 3)
        assert torch.allclose(recover_exogenous(solved, adj), eps, atol=1e-9)


class TestComposeMaskReconstruct:
    def test_compose_zeroes_where_global_is_zero(self):
        global_adj = torch.tensor([[0.0, 1.0], [0.0, 0.0]], dtype=torch.float64)
        local = torch.full((3, 2, 2), 0.7, dtype=torch.float64)
        composed = causal_compose(global_adj, local)
        assert torch.all(composed[:, 0, 1] == 0.7)
        assert torch.all(composed[:, 1, 0] == 0.0)

    def test_mask_row_of_zeros_removes_outgoing_influence(self):
        graph = torch.ones(3, 3, dtype=torch.float64)
        mask = torch.ones(3, 3, dtype=torch.float64)
        mask[1, :] = 0.0
        masked = apply_mask(graph, mask)
        assert torch.all(masked[1, :] == 0.0)
        assert torch.all(masked[0, :] == 1.0)

    def test_mask_must_be_binary(self):
        graph = torch.ones(2, 2, dtype=torch.float64)
        with pytest.raises(ValueError):
            apply_mask(graph, torch.full((2, 2), 0.5, dtype=torch.float64))

    def test_all_ones_mask_is_identity(self):
        gen = torch.Generator().manual_seed(9)
        graph = torch.rand(4, 4, generator=gen, dtype=torch.float64)
        assert torch.equal(apply_mask(graph, torch.ones(4, 4, dtype=torch.float64)), graph)

    def test_reconstruct_linear_chain_reproduces_scm_solution(self):
        # full mask, identity g: c_hat = masked^T M + eps = A^T C + eps = C
        adj = torch.tensor([[0.0, 1.0], [0.0, 0.0]], dtype=torch.float64)
        eps = torch.tensor([[1.0], [2.0]], dtype=torch.float64)
        c_hat = reconstruct_confounders(adj, eps, adj, g=lambda t: t)
        assert torch.allclose(c_hat, torch.tensor([[1.0], [3.0]], dtype=torch.float64), atol=1e-12)

    def test_reconstruct_bounded_by_sigmoid(self):
        rng = torch.Generator().manual_seed(2)
        adj = zero_diagonal(torch.rand(3, 3, generator=rng, dtype=torch.float64) * 0.3)
        eps = torch.randn(5, 3, 4, generator=rng, dtype=torch.float64)
        c_hat = reconstruct_confounders(adj, eps, adj)
        assert torch.all((c_hat > 0) & (c_hat < 1))

    def test_reconstruct_ignores_mask_bits_outside_global_support(self):
        global_adj = torch.tensor([[0.0, 1.0, 0.0],
                                   [0.0, 0.0, 1.0],
                                   [0.0, 0.0, 0.0]], dtype=torch.float64)
        local = torch.full((1, 3, 3), 0.9, dtype=torch.float64)
        composed = causal_compose(global_adj, local)
        eps = torch.randn(1, 3, 2, generator=torch.Generator().manual_seed(4), dtype=torch.float64)
        mask_a = torch.ones(3, 3, dtype=torch.float64)
        mask_b = torch.ones(3, 3, dtype=torch.float64)
        mask_b[2, 0] = 0.0  # edge 2->0 is not in the global graph anyway
        out_a = reconstruct_confounders(apply_mask(composed, mask_a), eps, global_adj)
        out_b = reconstruct_confounders(apply_mask(composed, mask_b), eps, global_adj)
        assert torch.equal(out_a, out_b)


class TestGraphDocument:
    def test_structure_and_threshold_semantics(self):
        logits = torch.tensor([[1.0, 2.0, -3.0],
                               [0.5, 1.0, -0.1],
                               [4.0, -2.0, 1.0]], dtype=torch.float64)
        doc = graph_document(logits, tau=0.2)
        assert doc["k"] == 3
        assert doc["threshold"] == 0.5
        assert len(doc["edges"]) == 6  # all ordered off-diagonal pairs
        by_pair = {(e["from"], e["to"]): e for e in doc["edges"]}
        assert (0, 0) not in by_pair
        assert by_pair[(0, 1)]["global"] == 1
        assert by_pair[(0, 2)]["global"] == 0
        assert by_pair[(2, 0)]["global"] == 1
        for e in doc["edges"]:
            # hard bit consistent with the 0.5 threshold on the edge probability
            assert e["global"] == int(e["global_prob"] > 0.5)
            assert 0.0 <= e["global_prob"] <= 1.0

    def test_probability_is_sigmoid_of_logit(self):
        logits = torch.tensor([[0.0, 1.0], [-1.0, 0.0]], dtype=torch.float64)
        doc = graph_document(logits, tau=0.2)
        by_pair = {(e["from"], e["to"]): e for e in doc["edges"]}
        assert by_pair[(0, 1)]["global_prob"] == pytest.approx(SIGMOID_ONE, abs=1e-12)
        assert by_pair[(1, 0)]["global_prob"] == pytest.approx(1 - SIGMOID_ONE, abs=1e-12)
