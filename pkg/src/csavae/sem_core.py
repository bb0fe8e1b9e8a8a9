"""Differentiable structural-equation machinery for the confounder graph.

Pure functions over torch tensors: randomness only enters through an
explicit generator or pre-drawn noise tensors, so every call is
bit-reproducible. All matrix ops broadcast over leading batch dims.
"""
from __future__ import annotations

from typing import Callable, Optional, Tuple

import torch

Tensor = torch.Tensor

# Ridge stabilizer for the linear-SCM solve. The solve can hit singular
# systems during early training (soft cyclic adjacency), so we regularize
# instead of throwing.
RIDGE_DELTA = 1e-6
# Condition-number gate above which the ridge path engages.
COND_LIMIT = 1e10


def _eye_like(adj: Tensor) -> Tensor:
    k = adj.shape[-1]
    return torch.eye(k, dtype=adj.dtype, device=adj.device)


def zero_diagonal(m: Tensor) -> Tensor:
    """Zero the main diagonal of the trailing (k, k) block (self-loops are structural zeros)."""
    return m * (1.0 - _eye_like(m))


def sample_gumbel(
    shape,
    *,
    generator: Optional[torch.Generator] = None,
    dtype: torch.dtype = torch.float64,
    device=None,
) -> Tensor:
    """Standard Gumbel(0, 1) draws via -log(-log(U)), clamped away from the log poles."""
    u = torch.rand(shape, generator=generator, dtype=dtype, device=device)
    tiny = torch.finfo(dtype).tiny
    return -torch.log(torch.clamp(-torch.log(torch.clamp(u, min=tiny)), min=tiny))


def gumbel_sigmoid(
    logits: Tensor,
    tau: float,
    *,
    noise: Optional[Tuple[Tensor, Tensor]] = None,
    generator: Optional[torch.Generator] = None,
    hard: bool = False,
) -> Tensor:
    """Relaxed Bernoulli sample of the adjacency from per-edge logits.

    Computes sigmoid((logits + g1 - g2) / tau) with g1, g2 independent standard
    Gumbel draws (the numerically stable form of the two-exponential ratio).
    `noise` pins the pair explicitly; otherwise both are drawn from `generator`.
    `hard` thresholds the relaxed value at 0.5. The diagonal is always zeroed.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if noise is not None:
        g1, g2 = noise
    else:
        g1 = sample_gumbel(logits.shape, generator=generator, dtype=logits.dtype, device=logits.device)
        g2 = sample_gumbel(logits.shape, generator=generator, dtype=logits.dtype, device=logits.device)
    soft = torch.sigmoid((logits + g1 - g2) / tau)
    if hard:
        soft = (soft > 0.5).to(soft.dtype)
    return zero_diagonal(soft)


def hard_adjacency(logits: Tensor) -> Tensor:
    """Noise-free evaluation graph: edge on iff sigmoid(logit/tau) > 0.5, i.e. logit > 0."""
    return zero_diagonal((logits > 0).to(logits.dtype))


def dag_penalty(adj: Tensor, c: float = 1.0) -> Tensor:
    """Differentiable acyclicity score: tr((I + (c/k) A⊙A)^k) - k.

    Zero iff the (weighted) graph is acyclic; strictly positive and increasing
    in cycle-edge weights otherwise. Entries must be non-negative (pass the
    elementwise absolute value for signed graphs).
    """
    if c <= 0:
        raise ValueError(f"c must be positive, got {c}")
    if bool((adj < 0).any()):
        raise ValueError("dag_penalty expects non-negative entries; take abs() for signed graphs")
    k = adj.shape[-1]
    m = _eye_like(adj) + (c / k) * adj * adj
    powered = torch.linalg.matrix_power(m, k)
    return powered.diagonal(dim1=-2, dim2=-1).sum(-1) - k


def recover_exogenous(confounders: Tensor, adj: Tensor) -> Tensor:
    """Invert the linear SCM: eps = (I - A^T) C, rows of C are node states."""
    system = _eye_like(adj) - adj.transpose(-1, -2)
    return system @ confounders


def solve_scm(
    exogenous: Tensor,
    adj: Tensor,
    *,
    ridge_delta: float = RIDGE_DELTA,
    cond_limit: float = COND_LIMIT,
) -> Tuple[Tensor, bool]:
    """Forward solve C = (I - A^T)^{-1} eps, ridge-stabilized when ill-conditioned.

    Returns (solution, ridge_engaged). The ridge path solves
    (I - A^T + delta*I) C = eps; it engages when the system's condition number
    is non-finite or exceeds `cond_limit` (possible with cyclic adjacency).
    """
    system = _eye_like(adj) - adj.transpose(-1, -2)
    with torch.no_grad():
        cond = torch.linalg.cond(system)
        ridge = bool((~torch.isfinite(cond)).any() or (cond > cond_limit).any())
    if ridge:
        system = system + ridge_delta * _eye_like(adj)
    return torch.linalg.solve(system, exogenous), ridge


def causal_compose(global_adj: Tensor, local: Tensor) -> Tensor:
    """Elementwise gate of the per-user local graph by the shared global adjacency."""
    return global_adj * local


def apply_mask(user_graph: Tensor, mask: Tensor) -> Tensor:
    """Apply a binary do-operation mask; mask[i, j] = 0 severs the influence of node i on node j."""
    if not bool(((mask == 0) | (mask == 1)).all()):
        raise ValueError("mask must be binary (entries in {0, 1})")
    return user_graph * mask


def reconstruct_confounders(
    masked_graph: Tensor,
    exogenous: Tensor,
    adj: Tensor,
    g: Callable[[Tensor], Tensor] = torch.sigmoid,
    *,
    solved: Optional[Tensor] = None,
) -> Tensor:
    """Rebuild each confounder from its masked parents plus its own exogenous term.

    c_hat_i = g(sum_j masked_graph[j, i] * M_j + eps_i) where M solves the
    unmasked SCM for `adj`; column i of the masked graph is node i's parent
    set. Pass `solved` to reuse an existing solve (and its ridge bookkeeping).
    """
    if solved is None:
        solved, _ = solve_scm(exogenous, adj)
    parents = masked_graph.transpose(-1, -2) @ solved
    return g(parents + exogenous)


def graph_document(logits: Tensor, tau: float) -> dict:
    """JSON-ready export of the global graph: every off-diagonal ordered pair.

    `global` is the 0.5-threshold hard bit; `global_prob` is sigmoid(logit),
    the exact marginal probability that the sampled hard edge is on (the
    difference of two standard Gumbels is Logistic(0, 1)).
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    k = logits.shape[-1]
    probs = torch.sigmoid(logits.detach().to(torch.float64))
    edges = []
    for i in range(k):
        for j in range(k):
            if i == j:
                continue
            edges.append(
                {
                    "from": i,
                    "to": j,
                    "global": int(logits[i, j].item() > 0),
                    "global_prob": float(probs[i, j].item()),
                }
            )
    return {"k": int(k), "threshold": 0.5, "edges": edges}
