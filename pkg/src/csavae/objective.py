"""Training objective: multinomial ELBO plus structure and diversity penalties."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Dict, Optional

import torch

from .sem_core import dag_penalty

Tensor = torch.Tensor


class TrainingFault(RuntimeError):
    """Raised when the loss goes non-finite; carries the offending breakdown."""

    def __init__(self, message: str, breakdown: Optional["LossBreakdown"] = None):
        super().__init__(message)
        self.breakdown = breakdown


@dataclass
class LossWeights:
    beta_kl: float = 1.0
    lambda_dag: float = 1.0
    lambda_div: float = 1.0


@dataclass
class LossBreakdown:
    """Every additive term of the step loss, kept as 0-dim tensors so `total` backprops.

    `beta_kl` is the effective KL weight for the step (base weight times the
    anneal ramp), so total == recon + beta_kl*kl + lambda_dag*(dag_global +
    dag_local) + lambda_div*diversity holds exactly from the stored fields.
    """

    recon: Tensor
    kl: Tensor
    dag_global: Tensor
    dag_local: Tensor
    diversity: Tensor
    neg_elbo: Tensor
    total: Tensor
    beta_kl: float
    lambda_dag: float
    lambda_div: float

    def to_dict(self) -> Dict[str, float]:
        def f(t: Tensor) -> float:
            return float(t.detach())

        return {
            "recon": f(self.recon),
            "kl": f(self.kl),
            "dag_global": f(self.dag_global),
            "dag_local": f(self.dag_local),
            "diversity": f(self.diversity),
            "neg_elbo": f(self.neg_elbo),
            "total": f(self.total),
            "beta_kl": self.beta_kl,
            "lambda_dag": self.lambda_dag,
            "lambda_div": self.lambda_div,
        }


def reconstruction_loglik(scores: Tensor, x: Tensor) -> Tensor:
    """Multinomial log-likelihood sum_i x_i * log softmax(scores)_i.

    Per-user sum over items; batched inputs are averaged over the batch.
    """
    if scores.shape != x.shape:
        raise ValueError(f"scores shape {tuple(scores.shape)} != interactions shape {tuple(x.shape)}")
    log_probs = torch.log_softmax(scores, dim=-1)
    per_user = (x * log_probs).sum(-1)
    return per_user.mean()


def kl_divergence(mu: Tensor, log_var: Tensor) -> Tensor:
    """KL(q(z|x) || N(0, I)) = 0.5 * sum(exp(log_var) + mu^2 - 1 - log_var), batch-averaged."""
    per_user = 0.5 * (torch.exp(log_var) + mu * mu - 1.0 - log_var).sum(-1)
    return per_user.mean()


def diversity_penalty(exogenous: Tensor, *, warn_on_zero_norm: bool = True) -> Tensor:
    """Sum of pairwise cosine similarities between a user's exogenous rows.

    Rows are L2-normalized first; the sum runs over ordered pairs i != j
    (two identical rows at k=2 score 2.0). Zero-norm rows contribute
    similarity 0 and raise a warning rather than an error. Batched input
    is averaged over users.
    """
    if exogenous.dim() == 2:
        exogenous = exogenous.unsqueeze(0)
    norms = exogenous.norm(dim=-1, keepdim=True)
    if warn_on_zero_norm and bool((norms.squeeze(-1) == 0).any()):
        warnings.warn("diversity_penalty: zero-norm exogenous row treated as similarity 0", RuntimeWarning)
    unit = exogenous / torch.clamp(norms, min=torch.finfo(exogenous.dtype).tiny)
    sims = unit @ unit.transpose(-1, -2)
    k = sims.shape[-1]
    eye = torch.eye(k, dtype=sims.dtype, device=sims.device)
    per_user = (sims * (1.0 - eye)).sum((-1, -2))
    return per_user.mean()


def elbo_loss(scores: Tensor, x: Tensor, mu: Tensor, log_var: Tensor, beta_kl: float) -> Tensor:
    """Plain negative ELBO (reconstruction + weighted KL), for confounder-free variants."""
    return -reconstruction_loglik(scores, x) + beta_kl * kl_divergence(mu, log_var)


def total_loss(
    bundle,
    scores: Tensor,
    x: Tensor,
    weights: LossWeights,
    *,
    dag_c: float = 1.0,
    beta_scale: float = 1.0,
) -> LossBreakdown:
    """Full step loss from a forward bundle.

    dag_global penalizes the soft sampled adjacency; dag_local penalizes the
    batch-averaged absolute local graph; diversity penalizes collinear
    exogenous rows. `beta_scale` is the KL anneal ramp in [0, 1]. Raises
    TrainingFault if any component is non-finite.
    """
    beta_eff = weights.beta_kl * beta_scale
    recon = -reconstruction_loglik(scores, x)
    kl = kl_divergence(bundle.encoder_out.mu, bundle.encoder_out.log_var)
    dag_global = dag_penalty(bundle.adjacency, dag_c)
    dag_local = dag_penalty(bundle.local.abs().mean(0), dag_c)
    diversity = diversity_penalty(bundle.exogenous)
    neg_elbo = recon + beta_eff * kl
    total = neg_elbo + weights.lambda_dag * (dag_global + dag_local) + weights.lambda_div * diversity
    breakdown = LossBreakdown(
        recon=recon,
        kl=kl,
        dag_global=dag_global,
        dag_local=dag_local,
        diversity=diversity,
        neg_elbo=neg_elbo,
        total=total,
        beta_kl=beta_eff,
        lambda_dag=weights.lambda_dag,
        lambda_div=weights.lambda_div,
    )
    if not bool(torch.isfinite(total)):
        raise TrainingFault("non-finite training loss", breakdown)
    return breakdown
