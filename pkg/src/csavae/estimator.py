"""Scikit-learn style estimator facade over the training loop."""
from __future__ import annotations

from typing import Optional

import numpy as np
import torch
from scipy import sparse
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import evaluation
from .data import SplitDataset
from .model import ZeroNoise
from .training import TrainConfig, train


def check_interactions(X, *, n_items: Optional[int] = None, require_nonempty_rows: bool = False):
    """Validate and coerce an interaction matrix to binary float64 CSR."""
    if sparse.issparse(X):
        mat = X.tocsr().astype(np.float64)
    else:
        arr = np.asarray(X)
        if arr.ndim != 2:
            raise ValueError(f"interactions must be 2-D, got shape {arr.shape}")
        mat = sparse.csr_matrix(arr.astype(np.float64))
    if mat.nnz and not np.isin(mat.data, (0.0, 1.0)).all():
        raise ValueError("interactions must be binary (0/1); binarize ratings first")
    mat.eliminate_zeros()
    if n_items is not None and mat.shape[1] != n_items:
        raise ValueError(f"expected {n_items} item columns, got {mat.shape[1]}")
    if require_nonempty_rows:
        row_nnz = np.diff(mat.indptr)
        if (row_nnz == 0).any():
            empty = int(np.argmax(row_nnz == 0))
            raise ValueError(f"training rows must have at least one interaction (row {empty} is empty)")
    return mat


class CSAVAE(BaseEstimator):
    """Collaborative-filtering VAE with a learned causal graph over k confounders.

    Parameters mirror TrainConfig; `fit` trains on a binary user-item matrix
    (optionally with a matching validation holdout for early stopping) and the
    fitted estimator scores, ranks, and exports the learned graph.
    """

    def __init__(self, k=4, d=64, hidden=600, tau=0.2, dag_c=1.0,
                 learning_rate=1e-3, weight_decay=1e-6, batch_size=500,
                 max_epochs=200, patience=10, beta_kl=1.0, lambda_dag=1.0,
                 lambda_div=1.0, anneal_fraction=0.2, dropout=0.5,
                 use_global=True, use_local=True, use_ffn=False,
                 eval_k=10, seed=0):
        self.k = k
        self.d = d
        self.hidden = hidden
        self.tau = tau
        self.dag_c = dag_c
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.beta_kl = beta_kl
        self.lambda_dag = lambda_dag
        self.lambda_div = lambda_div
        self.anneal_fraction = anneal_fraction
        self.dropout = dropout
        self.use_global = use_global
        self.use_local = use_local
        self.use_ffn = use_ffn
        self.eval_k = eval_k
        self.seed = seed

    def _config(self) -> TrainConfig:
        return TrainConfig(**{f: getattr(self, f) for f in TrainConfig.__dataclass_fields__})

    def fit(self, X, X_val=None):
        """Train on binary interactions X (users x items); X_val drives early stopping."""
        train_mat = check_interactions(X, require_nonempty_rows=True)
        if X_val is not None:
            val_mat = check_interactions(X_val, n_items=train_mat.shape[1])
            if val_mat.shape[0] != train_mat.shape[0]:
                raise ValueError("X_val must cover the same users as X")
        else:
            val_mat = sparse.csr_matrix(train_mat.shape)
        dataset = SplitDataset(
            train=train_mat, val=val_mat, test=sparse.csr_matrix(train_mat.shape),
            user_ids=[str(u) for u in range(train_mat.shape[0])],
            item_ids=[str(i) for i in range(train_mat.shape[1])],
            seed=self.seed, fractions=(1.0, 0.0, 0.0))
        result = train(dataset, self._config())
        self.checkpoint_ = result.checkpoint
        self.net_ = result.checkpoint.build_net()
        self.history_ = result.history
        self.n_items_ = train_mat.shape[1]
        return self

    def _check_fitted(self):
        if not hasattr(self, "net_"):
            raise NotFittedError("this CSAVAE instance is not fitted yet; call fit first")

    def predict_scores(self, X, *, confounders: bool = True) -> np.ndarray:
        """Deterministic item scores for each input row (eval mode, hard graph)."""
        self._check_fitted()
        mat = check_interactions(X, n_items=self.n_items_)
        return evaluation.score_matrix(self.net_, mat, confounders=confounders)

    def recommend(self, X, k: int = 10, *, exclude_observed: bool = True,
                  confounders: bool = True) -> list:
        """Top-k item indices per row, excluding each row's observed items by default."""
        self._check_fitted()
        mat = check_interactions(X, n_items=self.n_items_)
        scores = evaluation.score_matrix(self.net_, mat, confounders=confounders)
        out = []
        for u in range(mat.shape[0]):
            exclude = mat.indices[mat.indptr[u]:mat.indptr[u + 1]] if exclude_observed else ()
            out.append(evaluation.rank_items(scores[u], exclude, k=k).tolist())
        return out

    def transform(self, X) -> np.ndarray:
        """Posterior mean embedding of each input row."""
        self._check_fitted()
        mat = check_interactions(X, n_items=self.n_items_)
        with torch.no_grad():
            xb = torch.from_numpy(np.asarray(mat.todense(), dtype=np.float64))
            enc = self.net_.encode(xb, ZeroNoise())
        return enc.mu.numpy()

    def global_graph(self) -> dict:
        self._check_fitted()
        return self.net_.export_graph()
