"""Oracle tests for the loss terms; totals are re-derived step by step."""
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from csavae.model import CSAVAENet, FrozenNoise, sample_gumbel
from csavae.objective import (
    LossWeights,
    TrainingFault,
    diversity_penalty,
    elbo_loss,
    kl_divergence,
    reconstruction_loglik,
    total_loss,
)
from csavae.sem_core import dag_penalty


class TestReconstruction:
    def test_one_hot_uniform_scores_gives_minus_log_n(self):
        n = 6
        x = torch.zeros(n, dtype=torch.float64)
        x[2] = 1.0
        scores = torch.zeros(n, dtype=torch.float64)
        val = reconstruction_loglik(scores, x).item()
        assert val == pytest.approx(-math.log(n), abs=1e-12)

    def test_saturated_score_at_the_positive_gives_zero(self):
        # +inf itself is NaN under IEEE log-softmax; 1e6 saturates to exactly 0.
        n = 5
        x = torch.zeros(n, dtype=torch.float64)
        x[0] = 1.0
        scores = torch.zeros(n, dtype=torch.float64)
        scores[0] = 1e6
        assert reconstruction_loglik(scores, x).item() == 0.0

    def test_batch_is_mean_of_per_user_values(self):
        gen = torch.Generator().manual_seed(0)
        x = (torch.rand(4, 7, generator=gen, dtype=torch.float64) > 0.5).double()
        scores = torch.randn(4, 7, generator=gen, dtype=torch.float64)
        whole = reconstruction_loglik(scores, x).item()
        singles = [reconstruction_loglik(scores[i], x[i]).item() for i in range(4)]
        assert whole == pytest.approx(np.mean(singles), abs=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            reconstruction_loglik(torch.zeros(3, dtype=torch.float64), torch.zeros(4, dtype=torch.float64))

    def test_always_nonpositive_for_binary_x(self):
        gen = torch.Generator().manual_seed(3)
        for _ in range(20):
            x = (torch.rand(8, generator=gen, dtype=torch.float64) > 0.4).double()
            scores = torch.randn(8, generator=gen, dtype=torch.float64) * 5
            assert reconstruction_loglik(scores, x).item() <= 1e-12


class TestKL:
    def test_standard_normal_posterior_gives_zero(self):
        mu = torch.zeros(3, 4, dtype=torch.float64)
        log_var = torch.zeros(3, 4, dtype=torch.float64)
        assert kl_divergence(mu, log_var).item() == 0.0

    def test_hand_value(self):
        # per-dim: 0.5 * (e^0 + mu^2 - 1 - 0) = 0.5 * mu^2 at unit variance
        mu = torch.tensor([[1.0, 2.0]], dtype=torch.float64)
        log_var = torch.zeros(1, 2, dtype=torch.float64)
        assert kl_divergence(mu, log_var).item() == pytest.approx(0.5 + 2.0, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10 ** 9))
    def test_nonnegative(self, seed):
        gen = torch.Generator().manual_seed(seed)
        mu = torch.randn(5, 6, generator=gen, dtype=torch.float64)
        log_var = torch.randn(5, 6, generator=gen, dtype=torch.float64)
        assert kl_divergence(mu, log_var).item() >= -1e-12


def _diversity_by_loops(eps: np.ndarray) -> float:
    """Independent oracle: explicit loops over users and ordered pairs."""
    if eps.ndim == 2:
        eps = eps[None]
    totals = []
    for user in eps:
        total = 0.0
        k = user.shape[0]
        for i in range(k):
            for j in range(k):
                if i == j:
                    continue
                ni, nj = np.linalg.norm(user[i]), np.linalg.norm(user[j])
                if ni == 0 or nj == 0:
                    continue
                total += float(np.dot(user[i], user[j]) / (ni * nj))
        totals.append(total)
    return float(np.mean(totals))


class TestDiversity:
    def test_identical_rows_k2_gives_two(self):
        eps = torch.tensor([[1.0, 2.0], [1.0, 2.0]], dtype=torch.float64)
        assert diversity_penalty(eps).item() == pytest.approx(2.0, abs=1e-12)

    def test_orthogonal_rows_give_zero(self):
        eps = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        assert diversity_penalty(eps).item() == pytest.approx(0.0, abs=1e-12)

    def test_zero_norm_row_contributes_zero_and_warns(self):
        eps = torch.tensor([[0.0, 0.0], [3.0, 0.0]], dtype=torch.float64)
        with pytest.warns(RuntimeWarning):
            val = diversity_penalty(eps).item()
        assert val == pytest.approx(0.0, abs=1e-12)

    def test_scale_invariance_of_rows(self):
        gen = torch.Generator().manual_seed(1)
        eps = torch.randn(3, 4, 5, generator=gen, dtype=torch.float64)
        scaled = eps.clone()
        scaled[:, 1, :] *= 17.0
        a = diversity_penalty(eps).item()
        b = diversity_penalty(scaled).item()
        assert a == pytest.approx(b, abs=1e-10)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10 ** 9), st.integers(2, 6), st.integers(2, 8))
    def test_matches_loop_oracle(self, seed, k, d):
        rng = np.random.default_rng(seed)
        eps = rng.normal(size=(3, k, d))
        ours = diversity_penalty(torch.from_numpy(eps)).item()
        assert ours == pytest.approx(_diversity_by_loops(eps), abs=1e-10)


def _tiny_forward(seed=0, batch=5, n_items=12, k=3, d=4, hidden=8):
    torch.manual_seed(seed)
    net = CSAVAENet(n_items=n_items, k=k, d=d, hidden=hidden, tau=0.2, dropout=0.5)
    net.train()
    gen = torch.Generator().manual_seed(seed + 1)
    x = (torch.rand(batch, n_items, generator=gen, dtype=torch.float64) > 0.6).double()
    x[:, 0] = 1.0  # no empty rows
    noise = FrozenNoise(
        eta=torch.randn(batch, d, generator=gen, dtype=torch.float64),
        gumbel=(sample_gumbel((k, k), generator=gen), sample_gumbel((k, k), generator=gen)),
        keep=(torch.rand(batch, n_items, generator=gen, dtype=torch.float64) >= 0.5).double() / 0.5,
    )
    scores, bundle = net.forward_with_confounders(x, noise=noise, hard_graph=False)
    return net, x, scores, bundle


class TestTotalLoss:
    def test_breakdown_matches_step_by_step_recomputation(self):
        _, x, scores, bundle = _tiny_forward()
        weights = LossWeights(beta_kl=0.7, lambda_dag=1.3, lambda_div=0.9)
        bd = total_loss(bundle, scores, x, weights, dag_c=1.0, beta_scale=0.5)

        recon = -reconstruction_loglik(scores, x).item()
        kl = kl_divergence(bundle.encoder_out.mu, bundle.encoder_out.log_var).item()
        dag_g = dag_penalty(bundle.adjacency, 1.0).item()
        dag_l = dag_penalty(bundle.local.abs().mean(0), 1.0).item()
        div = _diversity_by_loops(bundle.exogenous.detach().numpy())
        beta_eff = 0.7 * 0.5

        assert float(bd.recon.detach()) == pytest.approx(recon, abs=1e-10)
        assert float(bd.kl.detach()) == pytest.approx(kl, abs=1e-10)
        assert float(bd.dag_global.detach()) == pytest.approx(dag_g, abs=1e-10)
        assert float(bd.dag_local.detach()) == pytest.approx(dag_l, abs=1e-10)
        assert float(bd.diversity.detach()) == pytest.approx(div, abs=1e-10)
        assert bd.beta_kl == pytest.approx(beta_eff, abs=1e-15)
        expected_total = recon + beta_eff * kl + 1.3 * (dag_g + dag_l) + 0.9 * div
        assert float(bd.total.detach()) == pytest.approx(expected_total, abs=1e-10)
        assert float(bd.neg_elbo.detach()) == pytest.approx(recon + beta_eff * kl, abs=1e-10)

    @settings(max_examples=20, deadline=None)
    @given(st.floats(0.0, 2.0), st.floats(0.1, 2.0), st.floats(0.0, 2.0), st.floats(0.0, 1.0))
    def test_total_equation_invariant(self, beta, lam_dag, lam_div, beta_scale):
        _, x, scores, bundle = _tiny_forward(seed=7)
        weights = LossWeights(beta_kl=beta, lambda_dag=lam_dag, lambda_div=lam_div)
        bd = total_loss(bundle, scores, x, weights, beta_scale=beta_scale)
        lhs = float(bd.total.detach())
        rhs = (float(bd.recon.detach()) + bd.beta_kl * float(bd.kl.detach())
               + bd.lambda_dag * (float(bd.dag_global.detach()) + float(bd.dag_local.detach()))
               + bd.lambda_div * float(bd.diversity.detach()))
        assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)

    def test_total_is_differentiable_end_to_end(self):
        net, x, scores, bundle = _tiny_forward(seed=3)
        bd = total_loss(bundle, scores, x, LossWeights())
        bd.total.backward()
        assert net.graph_logits.grad is not None
        assert torch.isfinite(net.graph_logits.grad).all()

    def test_non_finite_total_raises_training_fault(self):
        _, x, scores, bundle = _tiny_forward(seed=5)
        bad_scores = scores.detach().clone()
        bad_scores[0, 0] = float("nan")
        with pytest.raises(TrainingFault) as err:
            total_loss(bundle, bad_scores, x, LossWeights())
        assert err.value.breakdown is not None

    def test_elbo_loss_matches_components(self):
        _, x, scores, bundle = _tiny_forward(seed=9)
        val = elbo_loss(scores, x, bundle.encoder_out.mu, bundle.encoder_out.log_var, 0.4).item()
        expect = (-reconstruction_loglik(scores, x) + 0.4 * kl_divergence(
            bundle.encoder_out.mu, bundle.encoder_out.log_var)).item()
        assert val == pytest.approx(expect, abs=1e-12)
