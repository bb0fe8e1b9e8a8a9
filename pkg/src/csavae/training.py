"""Seeded training loop with KL annealing, early stopping, and sweep helpers."""
from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import evaluation
from .data import SplitDataset
from .model import CSAVAENet, ModelCheckpoint, NoiseSource
from .objective import LossWeights, TrainingFault, total_loss


@dataclass
class TrainConfig:
    k: int = 4
    d: int = 64
    hidden: int = 600
    tau: float = 0.2
    dag_c: float = 1.0
    learning_rate: float = 1e-3
    weight_decay: float = 1e-6
    batch_size: int = 500
    max_epochs: int = 200
    patience: int = 10
    beta_kl: float = 1.0
    lambda_dag: float = 1.0
    lambda_div: float = 1.0
    anneal_fraction: float = 0.2
    dropout: float = 0.5
    use_global: bool = True
    use_local: bool = True
    use_ffn: bool = False
    eval_k: int = 10
    seed: int = 0

    def validate(self) -> None:
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if not 0 <= self.anneal_fraction <= 1:
            raise ValueError(f"anneal_fraction must be in [0, 1], got {self.anneal_fraction}")
        if not 0 <= self.dropout < 1:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def with_overrides(self, **kwargs) -> "TrainConfig":
        cfg = replace(self, **{k: v for k, v in kwargs.items() if v is not None})
        cfg.validate()
        return cfg


@dataclass
class EpochRecord:
    epoch: int
    losses: Dict[str, float]
    val_metric: Optional[float]
    val_metric_name: str
    seconds: float
    val_metrics: Dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "epoch": self.epoch, "losses": self.losses,
            "val_metric": self.val_metric, "val_metric_name": self.val_metric_name,
            "seconds": round(self.seconds, 4),
        }
        doc.update({f"val_{name}": value for name, value in self.val_metrics.items()})
        return json.dumps(doc, sort_keys=True)


@dataclass
class TrainResult:
    checkpoint: ModelCheckpoint
    history: List[EpochRecord]
    best_epoch: int
    stopped_early: bool


def _epoch_seed(seed: int, epoch: int) -> int:
    # Fixed mixing so a resume sees the same per-epoch noise stream as a
    # fresh run reaching that epoch; constants are arbitrary odd primes.
    return (seed * 2654435761 + epoch * 40503 + 1) % (2 ** 63)


def _assign_ranges(net: CSAVAENet, train: "np.ndarray") -> np.ndarray:
    """Per-confounder inter-quantile range of eval-mode c_hat across train users."""
    from scipy import sparse

    mat = train if sparse.issparse(train) else sparse.csr_matrix(train)
    c_hat = evaluation.reconstructed_confounders_matrix(net, mat)
    q25 = np.quantile(c_hat, 0.25, axis=0)
    q75 = np.quantile(c_hat, 0.75, axis=0)
    return (q75 - q25).astype(np.float64)


def train(dataset: SplitDataset, config: TrainConfig, *, out_dir=None,
          resume: Optional[ModelCheckpoint] = None,
          log_fn=None) -> TrainResult:
    """Train on a processed split; returns the best-validation checkpoint.

    Deterministic for a fixed (dataset, config): parameter init comes from
    config.seed, per-epoch noise from (seed, epoch). Early stopping watches
    NDCG@eval_k on the validation split with the configured patience; without
    validation interactions it runs to max_epochs. A non-finite loss raises
    TrainingFault with the epoch/step context attached.
    """
    config.validate()
    if dataset.n_items < 1 or dataset.train.nnz == 0:
        raise ValueError("training needs a non-empty train split")

    torch.manual_seed(config.seed)
    start_epoch = 0
    if resume is not None:
        net = resume.build_net()
        if net.n_items != dataset.n_items:
            raise ValueError("resume checkpoint item count does not match the dataset")
        start_epoch = int(resume.hyper["train"].get("trained_epochs", 0))
    else:
        net = CSAVAENet(
            n_items=dataset.n_items, k=config.k, d=config.d, hidden=config.hidden,
            tau=config.tau, dag_c=config.dag_c, dropout=config.dropout,
            use_global=config.use_global, use_local=config.use_local, use_ffn=config.use_ffn)
    optimizer = torch.optim.Adam(net.parameters(), lr=config.learning_rate,
                                 weight_decay=config.weight_decay)
    weights = LossWeights(beta_kl=config.beta_kl, lambda_dag=config.lambda_dag,
                          lambda_div=config.lambda_div)

    x_train = torch.from_numpy(np.asarray(dataset.train.todense(), dtype=np.float64))
    n_users = x_train.shape[0]
    steps_per_epoch = int(np.ceil(n_users / config.batch_size))
    anneal_steps = config.anneal_fraction * config.max_epochs * steps_per_epoch
    has_val = dataset.val.nnz > 0
    metric_name = f"ndcg@{config.eval_k}"

    history: List[EpochRecord] = []
    history_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        history_fh = open(out_dir / "history.jsonl", "a" if resume is not None else "w",
                          encoding="utf-8")

    best_metric = -np.inf
    best_state = {k: v.detach().clone() for k, v in net.state_dict().items()}
    best_epoch = start_epoch
    since_best = 0
    stopped_early = False
    step = start_epoch * steps_per_epoch

    try:
        for epoch in range(start_epoch + 1, config.max_epochs + 1):
            tic = time.perf_counter()
            gen = torch.Generator()
            gen.manual_seed(_epoch_seed(config.seed, epoch))
            perm = torch.randperm(n_users, generator=gen)
            net.train()
            epoch_losses: Dict[str, float] = {}
            n_batches = 0
            for start in range(0, n_users, config.batch_size):
                xb = x_train[perm[start:start + config.batch_size]]
                beta_scale = min(1.0, step / anneal_steps) if anneal_steps > 0 else 1.0
                noise = NoiseSource(gen)
                scores, bundle = net.forward_with_confounders(xb, noise=noise, hard_graph=False)
                try:
                    breakdown = total_loss(bundle, scores, xb, weights,
                                           dag_c=config.dag_c, beta_scale=beta_scale)
                except TrainingFault as fault:
                    raise TrainingFault(
                        f"non-finite loss at epoch {epoch}, step {step} "
                        f"(seed={config.seed}, k={config.k}): {fault}", fault.breakdown) from fault
                optimizer.zero_grad()
                breakdown.total.backward()
                optimizer.step()
                for key, value in breakdown.to_dict().items():
                    epoch_losses[key] = epoch_losses.get(key, 0.0) + value
                step += 1
                n_batches += 1
            epoch_losses = {k: v / n_batches for k, v in epoch_losses.items()}

            val_metric = None
            val_metrics: Dict[str, float] = {}
            if has_val:
                report = evaluation.evaluate_model(net, dataset, split="val", ks=(config.eval_k,))
                val_metric = report["metrics"][metric_name]
                val_metrics = {name: report["metrics"][name]
                               for name in (f"recall@{config.eval_k}", metric_name)
                               if name in report["metrics"]}
            record = EpochRecord(epoch=epoch, losses=epoch_losses, val_metric=val_metric,
                                 val_metric_name=metric_name, seconds=time.perf_counter() - tic,
                                 val_metrics=val_metrics)
            history.append(record)
            if history_fh is not None:
                history_fh.write(record.to_json() + "\n")
                history_fh.flush()
            if log_fn is not None:
                log_fn(record)

            if has_val:
                if val_metric > best_metric:
                    best_metric = val_metric
                    best_state = {k: v.detach().clone() for k, v in net.state_dict().items()}
                    best_epoch = epoch
                    since_best = 0
                else:
                    since_best += 1
                    if since_best >= config.patience:
                        stopped_early = True
                        break
            else:
                best_state = {k: v.detach().clone() for k, v in net.state_dict().items()}
                best_epoch = epoch
    finally:
        if history_fh is not None:
            history_fh.close()

    net.load_state_dict(best_state)
    net.eval()
    train_hyper = dict(config.to_dict())
    train_hyper["trained_epochs"] = best_epoch
    checkpoint = ModelCheckpoint.from_net(
        net, train_hyper, item_ids=dataset.item_ids, user_ids=dataset.user_ids,
        item_popularity=dataset.item_popularity(),
        assign_ranges=_assign_ranges(net, dataset.train))
    return TrainResult(checkpoint=checkpoint, history=history,
                       best_epoch=best_epoch, stopped_early=stopped_early)


def repeat_runs(dataset: SplitDataset, config: TrainConfig, seeds: Sequence[int],
                ks: Sequence[int] = (10, 30)) -> dict:
    """Train once per seed; report per-seed metrics, their mean, and any failures."""
    runs: List[dict] = []
    failures: List[dict] = []
    for seed in seeds:
        cfg = config.with_overrides(seed=seed)
        try:
            result = train(dataset, cfg)
            report = evaluation.evaluate_model(result.checkpoint.build_net(), dataset,
                                               split="test", ks=ks)
            row = {"seed": seed, "variant": "run", "error": ""}
            row.update(report["metrics"])
            runs.append(row)
        except Exception as exc:
            failures.append({"seed": seed, "error": f"{type(exc).__name__}: {exc}"})
    mean: Dict[str, float] = {}
    if runs:
        for key in runs[0]:
            if "@" in str(key):
                mean[key] = float(np.mean([r[key] for r in runs]))
    return {"runs": runs, "mean": mean, "failures": failures}


def sweep_k(dataset: SplitDataset, config: TrainConfig,
            k_values: Sequence[int] = (1, 2, 4, 8, 16, 32),
            ks: Sequence[int] = (10, 30)) -> List[dict]:
    """Train per candidate k; identical row schema with failures recorded inline."""
    rows: List[dict] = []
    for k in k_values:
        cfg = config.with_overrides(k=k)
        row = {"variant": f"k={k}", "k": k, "seed": cfg.seed, "error": ""}
        try:
            result = train(dataset, cfg)
            report = evaluation.evaluate_model(result.checkpoint.build_net(), dataset,
                                               split="test", ks=ks)
            row.update(report["metrics"])
        except Exception as exc:
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return rows
