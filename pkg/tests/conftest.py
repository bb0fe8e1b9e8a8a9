"""Shared fixtures and the finite-difference gradient checker."""
import numpy as np
import pytest
import torch

from csavae.data import synthesize
from csavae.model import CSAVAENet, FrozenNoise
from csavae.objective import LossWeights, total_loss
from csavae.sem_core import sample_gumbel
from csavae.training import TrainConfig, train


def build_tiny_net(seed=0, n_items=10, k=2, d=3, hidden=5, **kw) -> CSAVAENet:
    torch.manual_seed(seed)
    return CSAVAENet(n_items=n_items, k=k, d=d, hidden=hidden, **kw)


def frozen_noise_for(net: CSAVAENet, batch: int, seed: int = 0) -> FrozenNoise:
    gen = torch.Generator().manual_seed(seed)
    return FrozenNoise(
        eta=torch.randn(batch, net.d, generator=gen, dtype=torch.float64),
        gumbel=(sample_gumbel((net.k, net.k), generator=gen),
                sample_gumbel((net.k, net.k), generator=gen)),
        keep=(torch.rand(batch, net.n_items, generator=gen, dtype=torch.float64) >= net.dropout_p).double()
        / (1.0 - net.dropout_p),
    )


def training_loss_closure(net: CSAVAENet, x: torch.Tensor, noise: FrozenNoise,
                          weights: LossWeights = LossWeights()):
    """Deterministic training-mode loss of the net given frozen noise."""
    net.train()
    scores, bundle = net.forward_with_confounders(x, noise=noise, hard_graph=False)
    return total_loss(bundle, scores, x, weights).total


def max_grad_rel_error(net: CSAVAENet, x: torch.Tensor, noise: FrozenNoise, h: float = 1e-5) -> float:
    """Max relative disagreement between autograd and central differences,
    over every entry of every parameter."""
    net.zero_grad()
    loss = training_loss_closure(net, x, noise)
    loss.backward()
    analytic = {name: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
                for name, p in net.named_parameters()}

    worst = 0.0
    with torch.no_grad():
        for name, p in net.named_parameters():
            flat = p.data.view(-1)
            for idx in range(flat.numel()):
                orig = flat[idx].item()
                flat[idx] = orig + h
                fp = float(training_loss_closure(net, x, noise).detach())
                flat[idx] = orig - h
                fm = float(training_loss_closure(net, x, noise).detach())
                flat[idx] = orig
                numeric = (fp - fm) / (2.0 * h)
                a = analytic[name].view(-1)[idx].item()
                denom = max(abs(a) + abs(numeric), 1e-6)
                worst = max(worst, abs(a - numeric) / denom)
    return worst


@pytest.fixture(scope="session")
def tiny_synth():
    """Small synthetic dataset (80 users x 100 items, true 4-node graph)."""
    return synthesize(seed=1, n_users=80, n_items=100)


@pytest.fixture(scope="session")
def tiny_config():
    return TrainConfig(k=3, d=8, hidden=32, batch_size=64, max_epochs=4,
                       patience=3, seed=11, eval_k=10)


@pytest.fixture(scope="session")
def tiny_result(tiny_synth, tiny_config):
    """A quickly trained checkpoint on the tiny synthetic split."""
    return train(tiny_synth.split, tiny_config)
