"""Network definition, forward paths, and the versioned checkpoint container."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
from torch import nn

from .sem_core import (
    apply_mask,
    causal_compose,
    graph_document,
    gumbel_sigmoid,
    hard_adjacency,
    recover_exogenous,
    reconstruct_confounders,
    sample_gumbel,
    solve_scm,
    zero_diagonal,
)

Tensor = torch.Tensor

CHECKPOINT_FORMAT_VERSION = 1


def l2_normalize(x: Tensor) -> Tensor:
    """Row-wise L2 normalization; zero rows pass through unchanged (idempotent)."""
    norm = x.norm(dim=-1, keepdim=True)
    return x / torch.clamp(norm, min=torch.finfo(x.dtype).tiny)


class NoiseSource:
    """Every stochastic draw of a forward pass, funneled through one generator."""

    def __init__(self, generator: Optional[torch.Generator] = None):
        self.generator = generator

    def normal(self, shape, *, dtype, device=None) -> Tensor:
        return torch.randn(shape, generator=self.generator, dtype=dtype, device=device)

    def gumbel_pair(self, shape, *, dtype, device=None) -> Tuple[Tensor, Tensor]:
        g1 = sample_gumbel(shape, generator=self.generator, dtype=dtype, device=device)
        g2 = sample_gumbel(shape, generator=self.generator, dtype=dtype, device=device)
        return g1, g2

    def keep_mask(self, shape, p: float, *, dtype, device=None) -> Tensor:
        """Inverted-dropout keep mask: Bernoulli(1-p) scaled by 1/(1-p)."""
        if p <= 0:
            return torch.ones(shape, dtype=dtype, device=device)
        if p >= 1:
            raise ValueError(f"dropout probability must be < 1, got {p}")
        u = torch.rand(shape, generator=self.generator, dtype=dtype, device=device)
        return (u >= p).to(dtype) / (1.0 - p)


class ZeroNoise(NoiseSource):
    """Deterministic source: z = mu, Gumbel pair = 0, dropout disabled."""

    def __init__(self):
        super().__init__(None)

    def normal(self, shape, *, dtype, device=None) -> Tensor:
        return torch.zeros(shape, dtype=dtype, device=device)

    def gumbel_pair(self, shape, *, dtype, device=None) -> Tuple[Tensor, Tensor]:
        z = torch.zeros(shape, dtype=dtype, device=device)
        return z, z.clone()

    def keep_mask(self, shape, p, *, dtype, device=None) -> Tensor:
        return torch.ones(shape, dtype=dtype, device=device)


class FrozenNoise(NoiseSource):
    """Replays pre-drawn tensors; slots left as None behave like ZeroNoise.

    Used by the finite-difference gradient check, where the same noise must be
    seen by every re-evaluation of the loss.
    """

    def __init__(self, *, eta: Optional[Tensor] = None, gumbel: Optional[Tuple[Tensor, Tensor]] = None,
                 keep: Optional[Tensor] = None):
        super().__init__(None)
        self.eta = eta
        self.gumbel = gumbel
        self.keep = keep

    def normal(self, shape, *, dtype, device=None) -> Tensor:
        if self.eta is None:
            return torch.zeros(shape, dtype=dtype, device=device)
        assert tuple(self.eta.shape) == tuple(shape), "frozen eta shape mismatch"
        return self.eta

    def gumbel_pair(self, shape, *, dtype, device=None) -> Tuple[Tensor, Tensor]:
        if self.gumbel is None:
            z = torch.zeros(shape, dtype=dtype, device=device)
            return z, z.clone()
        g1, g2 = self.gumbel
        assert tuple(g1.shape) == tuple(shape), "frozen gumbel shape mismatch"
        return g1, g2

    def keep_mask(self, shape, p, *, dtype, device=None) -> Tensor:
        if self.keep is None:
            return torch.ones(shape, dtype=dtype, device=device)
        assert tuple(self.keep.shape) == tuple(shape), "frozen keep-mask shape mismatch"
        return self.keep


@dataclass
class EncoderOutput:
    mu: Tensor        # (B, d)
    log_var: Tensor   # (B, d)
    z: Tensor         # (B, d)


@dataclass
class LatentBundle:
    """Full record of one forward pass through the confounder path."""

    encoder_out: EncoderOutput
    sinfo: Tensor          # (B, d) user-specific information
    confounders: Tensor    # (B, k, d) projected confounder states C
    adjacency: Tensor      # (k, k) global adjacency used this pass (soft or hard)
    exogenous: Tensor      # (B, k, d) recovered exogenous terms
    local: Tensor          # (B, k, k) per-user local graph
    user_graph: Tensor     # (B, k, k) global ⊙ local
    masked_graph: Tensor   # (B, k, k) after the do-operation mask
    reconstructed: Tensor  # (B, k, d) rebuilt confounders c_hat
    mixed: Tensor          # (B, d) attention-mixed confounder summary
    mix_scores: Tensor     # (B, k) attention weights over confounders
    z_hat: Tensor          # (B, d) decoder input
    ridge_engaged: bool


@dataclass
class InterventionSpec:
    """A do-operation: a binary edge mask and/or direct confounder assignments."""

    mask: Optional[Tensor] = None                    # (k, k) binary
    assignments: Dict[int, Tensor] = field(default_factory=dict)  # index -> (d,)

    def validate(self, k: int, d: int) -> None:
        if self.mask is not None:
            if tuple(self.mask.shape) != (k, k):
                raise ValueError(f"mask must be ({k}, {k}), got {tuple(self.mask.shape)}")
            if not bool(((self.mask == 0) | (self.mask == 1)).all()):
                raise ValueError("mask entries must be 0 or 1")
        for idx, vec in self.assignments.items():
            if not (0 <= int(idx) < k):
                raise ValueError(f"assignment index {idx} out of range [0, {k})")
            if tuple(vec.shape) != (d,):
                raise ValueError(f"assignment for confounder {idx} must have shape ({d},)")
            if not bool(torch.isfinite(vec).all()):
                raise ValueError(f"assignment for confounder {idx} contains non-finite values")


def _stacked_linear_init(heads: int, d_in: int, d_out: int, dtype) -> Tuple[nn.Parameter, nn.Parameter]:
    bound = 1.0 / math.sqrt(d_in)
    w = torch.empty(heads, d_in, d_out, dtype=dtype).uniform_(-bound, bound)
    b = torch.empty(heads, d_out, dtype=dtype).uniform_(-bound, bound)
    return nn.Parameter(w), nn.Parameter(b)


class CSAVAENet(nn.Module):
    """VAE over implicit feedback with a learned graph over k latent confounders.

    The encoder maps an L2-normalized interaction row to a Gaussian posterior;
    k per-head MLPs project z to confounder states; a Gumbel-relaxed global
    adjacency combined with a per-user attention graph drives a linear SCM
    whose reconstruction feeds an attention mix; the decoder scores all items.
    """

    def __init__(self, n_items: int, k: int = 4, d: int = 64, hidden: int = 600,
                 tau: float = 0.2, dag_c: float = 1.0, dropout: float = 0.5,
                 use_global: bool = True, use_local: bool = True, use_ffn: bool = False,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        if tau <= 0:
            raise ValueError(f"tau must be positive, got {tau}")
        self.n_items = n_items
        self.k = k
        self.d = d
        self.hidden = hidden
        self.tau = tau
        self.dag_c = dag_c
        self.dropout_p = dropout
        self.use_global = use_global
        self.use_local = use_local
        self.use_ffn = use_ffn
        self._dtype = dtype

        self.enc_hidden = nn.Linear(n_items, hidden, dtype=dtype)
        self.enc_mu = nn.Linear(hidden, d, dtype=dtype)
        self.enc_logvar = nn.Linear(hidden, d, dtype=dtype)

        # Global graph logits start all-ones (dense, cyclic prior the DAG
        # penalty must prune); diagonal is zeroed structurally at sample time.
        self.graph_logits = nn.Parameter(torch.ones(k, k, dtype=dtype))

        self.proj_w1, self.proj_b1 = _stacked_linear_init(k, d, d, dtype)
        self.proj_w2, self.proj_b2 = _stacked_linear_init(k, d, d, dtype)

        self.sinfo_fc1 = nn.Linear(d, d, dtype=dtype)
        self.sinfo_fc2 = nn.Linear(d, d, dtype=dtype)

        # Local-graph attention: one head per confounder, keys conditioned on sinfo.
        self.attn_q_w, self.attn_q_b = _stacked_linear_init(k, d, d, dtype)
        self.attn_k_w, self.attn_k_b = _stacked_linear_init(k, d, d, dtype)
        self.attn_s_w, _unused_b = _stacked_linear_init(k, d, d, dtype)
        head_bound = 1.0 / math.sqrt(k)
        self.attn_head_mix = nn.Parameter(torch.empty(k, dtype=dtype).uniform_(-head_bound, head_bound))

        self.mix_f = nn.Linear(d, d, dtype=dtype)
        self.mix_g = nn.Linear(d, d, dtype=dtype)
        self.mix_h = nn.Linear(d, d, dtype=dtype)

        self.ffn_fc1 = nn.Linear(d, d, dtype=dtype)
        self.ffn_fc2 = nn.Linear(d, d, dtype=dtype)

        self.dec_hidden = nn.Linear(d, hidden, dtype=dtype)
        self.dec_out = nn.Linear(hidden, n_items, dtype=dtype)

    # ---- stages ----

    def encode(self, x: Tensor, noise: NoiseSource) -> EncoderOutput:
        """Posterior over z from an interaction row; input is L2-normalized first."""
        x = l2_normalize(x.to(self._dtype))
        if self.training and self.dropout_p > 0:
            x = x * noise.keep_mask(x.shape, self.dropout_p, dtype=x.dtype, device=x.device)
        h = torch.tanh(self.enc_hidden(x))
        mu = self.enc_mu(h)
        log_var = self.enc_logvar(h)
        z = mu + torch.exp(0.5 * log_var) * noise.normal(mu.shape, dtype=mu.dtype, device=mu.device)
        return EncoderOutput(mu=mu, log_var=log_var, z=z)

    def project_confounders(self, z: Tensor) -> Tensor:
        """k independent two-layer heads, z -> (B, k, d); heads share no parameters."""
        h = torch.tanh(torch.einsum("bi,kio->bko", z, self.proj_w1) + self.proj_b1)
        return torch.einsum("bki,kio->bko", h, self.proj_w2) + self.proj_b2

    def specific_info(self, z: Tensor) -> Tensor:
        return self.sinfo_fc2(torch.tanh(self.sinfo_fc1(z)))

    def sample_global(self, noise: NoiseSource, *, hard: bool) -> Tensor:
        """Global adjacency for one pass: Gumbel-relaxed when soft, thresholded when hard.

        With the global branch disabled the graph is a constant all-ones
        off-diagonal matrix (ablation baseline)."""
        if not self.use_global:
            ones = torch.ones(self.k, self.k, dtype=self._dtype, device=self.graph_logits.device)
            return zero_diagonal(ones)
        if hard:
            return hard_adjacency(self.graph_logits)
        g1, g2 = noise.gumbel_pair((self.k, self.k), dtype=self._dtype, device=self.graph_logits.device)
        return gumbel_sigmoid(self.graph_logits, self.tau, noise=(g1, g2))

    def local_graph(self, exogenous: Tensor, sinfo: Tensor) -> Tensor:
        """Per-user (k, k) attention graph over confounders, keys conditioned on sinfo.

        One head per confounder; raw head scores are combined by a shared
        bias-free linear layer, so the construction is equivariant to a
        simultaneous permutation of the confounder axis. Diagonal is zeroed.
        """
        q = torch.einsum("bki,hio->bhko", exogenous, self.attn_q_w) + self.attn_q_b.unsqueeze(1)
        k_e = torch.einsum("bki,hio->bhko", exogenous, self.attn_k_w) + self.attn_k_b.unsqueeze(1)
        k_s = torch.einsum("bi,hio->bho", sinfo, self.attn_s_w).unsqueeze(2)
        keys = k_e + k_s
        scores = q @ keys.transpose(-1, -2) / math.sqrt(self.d)   # (B, H, k, k)
        local = torch.einsum("bhij,h->bij", scores, self.attn_head_mix)
        return zero_diagonal(local)

    def mix(self, sinfo: Tensor, c_hat: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        """Attend over reconstructed confounders and add the summary to sinfo.

        Returns (scores, mixed, z_hat); scores softmax to 1 over the k slots.
        """
        q = self.mix_f(l2_normalize(sinfo))
        keys = self.mix_g(l2_normalize(c_hat))
        values = self.mix_h(c_hat)
        logits = torch.einsum("bd,bkd->bk", q, keys) / math.sqrt(self.d)
        scores = torch.softmax(logits, dim=-1)
        mixed = torch.einsum("bk,bkd->bd", scores, values)
        z_hat = sinfo + mixed
        if self.use_ffn:
            z_hat = self.ffn_fc2(torch.tanh(self.ffn_fc1(z_hat)))
        return scores, mixed, z_hat

    def decode(self, z_hat: Tensor) -> Tensor:
        return self.dec_out(torch.tanh(self.dec_hidden(z_hat)))

    # ---- forward paths ----

    def forward_with_confounders(
        self,
        x: Tensor,
        spec: Optional[InterventionSpec] = None,
        noise: Optional[NoiseSource] = None,
        *,
        hard_graph: Optional[bool] = None,
    ) -> Tuple[Tensor, LatentBundle]:
        """Score all items through the confounder path; returns (scores, bundle).

        `hard_graph` defaults to eval-mode behavior (hard when not training).
        An InterventionSpec masks edges and/or overwrites reconstructed
        confounders before the mix stage.
        """
        if noise is None:
            noise = ZeroNoise()
        if hard_graph is None:
            hard_graph = not self.training
        if x.dim() == 1:
            x = x.unsqueeze(0)
        if spec is not None:
            spec.validate(self.k, self.d)

        enc = self.encode(x, noise)
        confounders = self.project_confounders(enc.z)
        adjacency = self.sample_global(noise, hard=hard_graph)
        exogenous = recover_exogenous(confounders, adjacency)
        sinfo = self.specific_info(enc.z)
        if self.use_local:
            local = self.local_graph(exogenous, sinfo)
        else:
            local = torch.ones(x.shape[0], self.k, self.k, dtype=self._dtype, device=x.device)
        user_graph = causal_compose(adjacency, local)
        mask = spec.mask.to(self._dtype) if (spec is not None and spec.mask is not None) else torch.ones(
            self.k, self.k, dtype=self._dtype, device=x.device)
        masked_graph = apply_mask(user_graph, mask)
        solved, ridge = solve_scm(exogenous, adjacency)
        c_hat = reconstruct_confounders(masked_graph, exogenous, adjacency, solved=solved)
        if spec is not None and spec.assignments:
            c_hat = c_hat.clone()
            for idx, vec in spec.assignments.items():
                c_hat[:, int(idx), :] = vec.to(self._dtype)
        scores_attn, mixed, z_hat = self.mix(sinfo, c_hat)
        item_scores = self.decode(z_hat)
        bundle = LatentBundle(
            encoder_out=enc, sinfo=sinfo, confounders=confounders, adjacency=adjacency,
            exogenous=exogenous, local=local, user_graph=user_graph, masked_graph=masked_graph,
            reconstructed=c_hat, mixed=mixed, mix_scores=scores_attn, z_hat=z_hat,
            ridge_engaged=ridge,
        )
        return item_scores, bundle

    def forward_without_confounders(self, x: Tensor, noise: Optional[NoiseSource] = None) -> Tuple[Tensor, EncoderOutput]:
        """Confounder-free scoring path: encode -> sinfo -> decode."""
        if noise is None:
            noise = ZeroNoise()
        if x.dim() == 1:
            x = x.unsqueeze(0)
        enc = self.encode(x, noise)
        z_hat = self.specific_info(enc.z)
        if self.use_ffn:
            z_hat = self.ffn_fc2(torch.tanh(self.ffn_fc1(z_hat)))
        return self.decode(z_hat), enc

    forward = forward_with_confounders

    def export_graph(self) -> dict:
        return graph_document(self.graph_logits.detach(), self.tau)

    def model_hyper(self) -> dict:
        return {
            "n_items": self.n_items, "k": self.k, "d": self.d, "hidden": self.hidden,
            "tau": self.tau, "dag_c": self.dag_c, "dropout": self.dropout_p,
            "use_global": self.use_global, "use_local": self.use_local, "use_ffn": self.use_ffn,
            "dtype": str(self._dtype).replace("torch.", ""),
        }


class CheckpointVersionError(ValueError):
    """Stored checkpoint format is not the one this code reads."""


@dataclass
class ModelCheckpoint:
    """Versioned container: parameters, hyperparameters, vocab, popularity, assign ranges."""

    hyper: dict                     # {"model": {...}, "train": {...}}
    params: Dict[str, np.ndarray]
    item_ids: List[str]
    user_ids: List[str]
    item_popularity: np.ndarray     # (n_items,) train interaction counts
    assign_ranges: np.ndarray       # (k, d) per-confounder inter-quantile range of c_hat
    format_version: int = CHECKPOINT_FORMAT_VERSION

    @classmethod
    def from_net(cls, net: CSAVAENet, train_hyper: dict, item_ids: List[str], user_ids: List[str],
                 item_popularity: np.ndarray, assign_ranges: np.ndarray) -> "ModelCheckpoint":
        params = {name: p.detach().cpu().numpy().copy() for name, p in net.state_dict().items()}
        return cls(
            hyper={"model": net.model_hyper(), "train": dict(train_hyper)},
            params=params,
            item_ids=[str(i) for i in item_ids],
            user_ids=[str(u) for u in user_ids],
            item_popularity=np.asarray(item_popularity, dtype=np.int64),
            assign_ranges=np.asarray(assign_ranges, dtype=np.float64),
        )

    def build_net(self) -> CSAVAENet:
        m = self.hyper["model"]
        dtype = getattr(torch, m.get("dtype", "float64"))
        net = CSAVAENet(
            n_items=m["n_items"], k=m["k"], d=m["d"], hidden=m["hidden"], tau=m["tau"],
            dag_c=m["dag_c"], dropout=m["dropout"], use_global=m["use_global"],
            use_local=m["use_local"], use_ffn=m["use_ffn"], dtype=dtype,
        )
        state = {name: torch.from_numpy(arr.copy()) for name, arr in self.params.items()}
        net.load_state_dict(state)
        net.eval()
        return net

    def digest(self) -> str:
        """Content hash over parameters and metadata, stable across processes."""
        h = hashlib.sha256()
        meta = {
            "format_version": self.format_version,
            "hyper": self.hyper,
            "item_ids": self.item_ids,
            "user_ids": self.user_ids,
        }
        h.update(json.dumps(meta, sort_keys=True).encode())
        for name in sorted(self.params):
            arr = np.ascontiguousarray(self.params[name])
            h.update(name.encode())
            h.update(str(arr.dtype).encode())
            h.update(str(arr.shape).encode())
            h.update(arr.tobytes())
        h.update(np.ascontiguousarray(self.item_popularity).tobytes())
        h.update(np.ascontiguousarray(self.assign_ranges).tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        meta = {
            "format_version": self.format_version,
            "hyper": self.hyper,
            "item_ids": self.item_ids,
            "user_ids": self.user_ids,
        }
        payload = {"param/" + name: arr for name, arr in self.params.items()}
        payload["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
        payload["item_popularity"] = self.item_popularity
        payload["assign_ranges"] = self.assign_ranges
        np.savez_compressed(path, **payload)

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        with np.load(path) as data:
            meta = json.loads(bytes(data["__meta__"]).decode())
            version = meta.get("format_version")
            if version != CHECKPOINT_FORMAT_VERSION:
                raise CheckpointVersionError(
                    f"checkpoint format version {version!r} is not supported "
                    f"(this build reads version {CHECKPOINT_FORMAT_VERSION}); re-train or convert it"
                )
            params = {key[len("param/"):]: data[key].copy() for key in data.files if key.startswith("param/")}
            return cls(
                hyper=meta["hyper"],
                params=params,
                item_ids=list(meta["item_ids"]),
                user_ids=list(meta["user_ids"]),
                item_popularity=data["item_popularity"].copy(),
                assign_ranges=data["assign_ranges"].copy(),
            )
