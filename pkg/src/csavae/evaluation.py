"""Ranking metrics, the all-ranking protocol, graph recovery metrics, ablations."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy import sparse
from scipy.optimize import linear_sum_assignment

from .model import CSAVAENet, ZeroNoise

RESULTS_SCHEMA_VERSION = 1


# ---- popularity ----

def popularity_ranks(counts: np.ndarray) -> np.ndarray:
    """Ascending-popularity rank per item, 1-based; the least-rated item gets 1.

    Ties break by item index (lower index ranks first), so ranks are a
    permutation of 1..n and deterministic.
    """
    counts = np.asarray(counts)
    n = counts.shape[0]
    order = np.lexsort((np.arange(n), counts))
    ranks = np.empty(n, dtype=np.int64)
    ranks[order] = np.arange(1, n + 1)
    return ranks


# ---- per-list metrics ----

def recall_at_k(ranked: Sequence[int], relevant: Iterable[int], k: int) -> float:
    """Hits in the top k over min(k, |relevant|)."""
    relevant = set(relevant)
    if not relevant:
        raise ValueError("recall_at_k needs a non-empty relevant set")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    hits = sum(1 for item in list(ranked)[:k] if item in relevant)
    return hits / min(k, len(relevant))


def ndcg_at_k(ranked: Sequence[int], relevant: Iterable[int], k: int) -> float:
    """Binary-gain NDCG with 1/log2(pos+1) discount, positions 1-based."""
    relevant = set(relevant)
    if not relevant:
        raise ValueError("ndcg_at_k needs a non-empty relevant set")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    top = list(ranked)[:k]
    dcg = sum(1.0 / np.log2(pos + 1) for pos, item in enumerate(top, start=1) if item in relevant)
    ideal_hits = min(k, len(relevant))
    idcg = sum(1.0 / np.log2(pos + 1) for pos in range(1, ideal_hits + 1))
    return dcg / idcg


def avp_of_list(ranked: Sequence[int], pop_ranks: np.ndarray, k: int) -> float:
    """Mean ascending-popularity rank of the top-k list (higher = more popular)."""
    top = list(ranked)[:k]
    if not top:
        raise ValueError("avp_of_list needs a non-empty list")
    return float(np.mean([pop_ranks[item] for item in top]))


def avp_at_k(ranked_lists: Sequence[Sequence[int]], counts: np.ndarray, k: int) -> float:
    """Average AVP over users' top-k lists, from raw popularity counts."""
    ranks = popularity_ranks(counts)
    return float(np.mean([avp_of_list(lst, ranks, k) for lst in ranked_lists]))


# ---- ranking protocol ----

def rank_items(scores: np.ndarray, exclude: Sequence[int], k: Optional[int] = None) -> np.ndarray:
    """Descending-score item ranking over the full catalog minus `exclude`.

    Ties break by item index (stable sort). The exclusion is re-checked with a
    hard assertion: a leaked excluded item is a protocol bug, not a metric blip.
    """
    scores = np.asarray(scores, dtype=np.float64).copy()
    exclude = np.asarray(list(exclude), dtype=np.int64)
    if exclude.size:
        scores[exclude] = -np.inf
    order = np.argsort(-scores, kind="stable")
    n_rankable = scores.shape[0] - exclude.size
    order = order[:n_rankable]
    if k is not None:
        order = order[:k]
    if exclude.size and np.intersect1d(order, exclude).size:
        raise AssertionError("excluded items leaked into the ranking")
    return order


def score_matrix(net: CSAVAENet, x: sparse.csr_matrix, *, confounders: bool = True,
                 spec=None, batch_size: int = 2048) -> np.ndarray:
    """Deterministic eval-mode scores for every row of a sparse input matrix."""
    was_training = net.training
    net.eval()
    out = np.empty(x.shape, dtype=np.float64)
    try:
        with torch.no_grad():
            for start in range(0, x.shape[0], batch_size):
                stop = min(start + batch_size, x.shape[0])
                xb = torch.from_numpy(np.asarray(x[start:stop].todense(), dtype=np.float64))
                if confounders:
                    scores, _ = net.forward_with_confounders(xb, spec=spec, noise=ZeroNoise())
                else:
                    scores, _ = net.forward_without_confounders(xb, noise=ZeroNoise())
                out[start:stop] = scores.numpy()
    finally:
        if was_training:
            net.train()
    return out


def reconstructed_confounders_matrix(net: CSAVAENet, x: sparse.csr_matrix,
                                     batch_size: int = 2048) -> np.ndarray:
    """Eval-mode reconstructed confounders c_hat for every user, (U, k, d)."""
    net.eval()
    out = np.empty((x.shape[0], net.k, net.d), dtype=np.float64)
    with torch.no_grad():
        for start in range(0, x.shape[0], batch_size):
            stop = min(start + batch_size, x.shape[0])
            xb = torch.from_numpy(np.asarray(x[start:stop].todense(), dtype=np.float64))
            _, bundle = net.forward_with_confounders(xb, noise=ZeroNoise())
            out[start:stop] = bundle.reconstructed.numpy()
    return out


def _fold_in(dataset, split: str) -> Tuple[sparse.csr_matrix, sparse.csr_matrix, sparse.csr_matrix]:
    """(input, exclude, relevant) matrices for a split.

    Validation feeds the train rows and excludes them; test feeds train+val
    and excludes both. Held-out items are never fed back as input.
    """
    if split == "val":
        return dataset.train, dataset.train, dataset.val
    if split == "test":
        seen = (dataset.train + dataset.val).tocsr()
        seen.data[:] = 1.0
        return seen, seen, dataset.test
    raise ValueError(f"split must be 'val' or 'test', got {split!r}")


def evaluate_model(net: CSAVAENet, dataset, split: str = "test", ks: Sequence[int] = (10, 30),
                   *, confounders: bool = True) -> dict:
    """All-ranking evaluation over one split.

    Users with an empty relevant set are skipped and counted; metrics average
    over the scored users only.
    """
    x_in, x_excl, x_rel = _fold_in(dataset, split)
    scores = score_matrix(net, x_in, confounders=confounders)
    counts = dataset.item_popularity()
    pop_ranks = popularity_ranks(counts)
    max_k = max(ks)
    per_metric: Dict[str, List[float]] = {f"{m}@{k}": [] for m in ("recall", "ndcg", "avp") for k in ks}
    n_scored = 0
    n_skipped = 0
    for u in range(x_in.shape[0]):
        relevant = x_rel.indices[x_rel.indptr[u]:x_rel.indptr[u + 1]]
        if relevant.size == 0:
            n_skipped += 1
            continue
        exclude = x_excl.indices[x_excl.indptr[u]:x_excl.indptr[u + 1]]
        ranked = rank_items(scores[u], exclude, k=max_k)
        for k in ks:
            per_metric[f"recall@{k}"].append(recall_at_k(ranked, relevant, k))
            per_metric[f"ndcg@{k}"].append(ndcg_at_k(ranked, relevant, k))
            per_metric[f"avp@{k}"].append(avp_of_list(ranked, pop_ranks, k))
        n_scored += 1
    metrics = {name: (float(np.mean(vals)) if vals else float("nan")) for name, vals in per_metric.items()}
    return {"split": split, "ks": list(ks), "metrics": metrics,
            "n_scored": n_scored, "n_skipped": n_skipped}


# ---- graph recovery ----

def graph_metrics(predicted: np.ndarray, truth: np.ndarray) -> dict:
    """SHD plus directed-edge precision/recall (diagonals ignored).

    SHD counts edit operations per unordered pair; a reversed edge costs one
    (it is a single reorientation, not an add plus a delete).
    """
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape or predicted.shape[0] != predicted.shape[1]:
        raise ValueError("predicted and truth must be same-shape square matrices")
    for mat in (predicted, truth):
        if not np.all(np.isin(np.unique(mat), (0, 1))):
            raise ValueError("graph_metrics expects binary adjacency matrices")
    predicted = predicted.astype(np.int64)
    truth = truth.astype(np.int64)
    k = predicted.shape[0]
    shd = 0
    for i in range(k):
        for j in range(i + 1, k):
            p = (predicted[i, j], predicted[j, i])
            t = (truth[i, j], truth[j, i])
            if p == t:
                continue
            if {p, t} == {(1, 0), (0, 1)}:
                shd += 1  # pure reversal
            else:
                shd += abs(p[0] - t[0]) + abs(p[1] - t[1])
    off = ~np.eye(k, dtype=bool)
    true_edges = (truth == 1) & off
    pred_edges = (predicted == 1) & off
    hits = int((pred_edges & true_edges).sum())
    n_true = int(true_edges.sum())
    n_pred = int(pred_edges.sum())
    precision = float(hits / n_pred) if n_pred else float("nan")
    recall = float(hits / n_true) if n_true else float("nan")
    return {"shd": int(shd), "edge_precision": precision, "edge_recall": recall}


def align_to_concepts(slot_states: np.ndarray, concepts: np.ndarray) -> np.ndarray:
    """Match learned confounder slots to ground-truth concept series.

    `slot_states` is (U, k, d) reconstructed confounders over users;
    `concepts` is (U, k) true scalar series. Each slot is scalarized by its
    first principal component over users, then slots are assigned to concepts
    by maximizing total |Pearson correlation| (Hungarian). Returns `perm` with
    perm[concept] = slot, so predicted[perm][:, perm] lives in concept order.
    The answer graph plays no part in the alignment.
    """
    u_count, k, _ = slot_states.shape
    if concepts.shape != (u_count, k):
        raise ValueError("concepts must be (n_users, k)")
    series = np.empty((u_count, k))
    for i in range(k):
        centered = slot_states[:, i, :] - slot_states[:, i, :].mean(axis=0, keepdims=True)
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        series[:, i] = centered @ vt[0]
    corr = np.zeros((k, k))
    for i in range(k):
        for j in range(k):
            s = series[:, i]
            c = concepts[:, j]
            ss, cs = s.std(), c.std()
            corr[i, j] = 0.0 if (ss == 0 or cs == 0) else abs(float(np.corrcoef(s, c)[0, 1]))
    slot_idx, concept_idx = linear_sum_assignment(-corr)
    perm = np.empty(k, dtype=np.int64)
    perm[concept_idx] = slot_idx
    return perm


def permute_graph(adj: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """Relabel nodes so row/col order follows `perm` (node perm[i] becomes node i)."""
    adj = np.asarray(adj)
    return adj[np.ix_(perm, perm)]


# ---- ablations and result tables ----

ABLATION_VARIANTS = (
    ("full", True, True),
    ("wo_global", False, True),
    ("wo_local", True, False),
    ("wo_both", False, False),
)


def ablation_run(dataset, config, variants=ABLATION_VARIANTS, ks: Sequence[int] = (10, 30)) -> List[dict]:
    """Train and evaluate each graph-ablation variant; failures are recorded inline."""
    from .training import train  # local import, training depends on this module

    rows = []
    for name, use_global, use_local in variants:
        cfg = config.with_overrides(use_global=use_global, use_local=use_local)
        row = {"variant": name, "use_global": use_global, "use_local": use_local, "seed": cfg.seed}
        try:
            result = train(dataset, cfg)
            report = evaluate_model(result.checkpoint.build_net(), dataset, split="test", ks=ks)
            row.update(report["metrics"])
            row["error"] = ""
        except Exception as exc:  # keep the table complete even when a variant dies
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return rows


def write_results_table(rows: Sequence[dict], path, *, summary_path=None) -> None:
    """Flat (metric, K, variant, seed, value) delimited table plus a text summary."""
    path = Path(path)
    lines = [f"# results-schema v{RESULTS_SCHEMA_VERSION}", "metric\tK\tvariant\tseed\tvalue"]
    for row in rows:
        variant = str(row.get("variant", row.get("k", "run")))
        seed = row.get("seed", "")
        for key, value in row.items():
            if "@" not in str(key):
                continue
            metric, k = key.split("@")
            lines.append(f"{metric}\t{k}\t{variant}\t{seed}\t{value:.10g}")
        if row.get("error"):
            lines.append(f"error\t\t{variant}\t{seed}\t{row['error']}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    if summary_path is not None:
        summary = [f"{len(rows)} runs"]
        for row in rows:
            variant = str(row.get("variant", row.get("k", "run")))
            metrics = ", ".join(f"{k}={v:.5f}" for k, v in row.items() if "@" in str(k))
            status = row.get("error") or "ok"
            summary.append(f"- {variant} (seed={row.get('seed', '')}): {metrics} [{status}]")
        Path(summary_path).write_text("\n".join(summary) + "\n", encoding="utf-8")


def read_results_table(path) -> List[dict]:
    lines = Path(path).read_text(encoding="utf-8").strip().split("\n")
    if not lines or not lines[0].startswith("# results-schema"):
        raise ValueError(f"{path} is not a results table")
    header = lines[1].split("\t")
    out = []
    for line in lines[2:]:
        fields = line.split("\t")
        out.append(dict(zip(header, fields)))
    return out
