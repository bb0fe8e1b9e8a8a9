"""Ratings ingestion, implicit-feedback preprocessing, splits, and the synthetic benchmark."""
from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse

SPLIT_FORMAT_VERSION = 1

# Ground-truth graph of the synthetic benchmark: edges 0->1, 1->2, 1->3.
SYNTH_TRUE_ADJACENCY = np.array(
    [[0, 1, 0, 0],
     [0, 0, 1, 1],
     [0, 0, 0, 0],
     [0, 0, 0, 0]], dtype=np.int64)


class DataError(ValueError):
    """Raised for malformed inputs or missing processed artifacts."""


@dataclass
class RatingRecord:
    user: str
    item: str
    rating: float
    timestamp: Optional[float] = None


@dataclass
class FormatSpec:
    """Column layout of a delimited ratings log.

    `columns` names each field in file order; 'user', 'item', 'rating' are
    required, 'timestamp' optional, '_' skips a field.
    """

    delimiter: str = "\t"
    columns: Tuple[str, ...] = ("user", "item", "rating", "timestamp")
    header: bool = False

    def __post_init__(self):
        for required in ("user", "item", "rating"):
            if required not in self.columns:
                raise DataError(f"format is missing required column {required!r}")


def load_ratings(path, spec: FormatSpec, *, max_malformed_fraction: float = 0.01) -> List[RatingRecord]:
    """Parse a ratings log; errors out if more than 1% of lines are malformed.

    Malformed = wrong field count, non-numeric rating/timestamp, or empty
    user/item id. An empty file yields an empty list.
    """
    path = Path(path)
    records: List[RatingRecord] = []
    malformed = 0
    total = 0
    idx = {name: i for i, name in enumerate(spec.columns)}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            if spec.header and lineno == 0:
                continue
            line = line.rstrip("\n")
            if not line:
                continue
            total += 1
            fields = line.split(spec.delimiter)
            if len(fields) != len(spec.columns):
                malformed += 1
                continue
            user = fields[idx["user"]].strip()
            item = fields[idx["item"]].strip()
            try:
                rating = float(fields[idx["rating"]])
                ts = float(fields[idx["timestamp"]]) if "timestamp" in idx else None
            except ValueError:
                malformed += 1
                continue
            if not user or not item:
                malformed += 1
                continue
            records.append(RatingRecord(user=user, item=item, rating=rating, timestamp=ts))
    if total > 0 and malformed / total > max_malformed_fraction:
        raise DataError(
            f"{malformed}/{total} malformed lines in {path} exceeds the "
            f"{max_malformed_fraction:.0%} tolerance; check the format spec")
    return records


def binarize(records: Iterable[RatingRecord], threshold: float = 4.0) -> List[Tuple[str, str]]:
    """Implicit positives: (user, item) pairs with rating >= threshold, deduplicated."""
    seen = set()
    pairs: List[Tuple[str, str]] = []
    for r in records:
        if r.rating >= threshold:
            key = (r.user, r.item)
            if key not in seen:
                seen.add(key)
                pairs.append(key)
    return pairs


def filter_core(pairs: Sequence[Tuple[str, str]], min_user: int = 20, min_item: int = 10) -> List[Tuple[str, str]]:
    """Iterated k-core: drop users with < min_user and items with < min_item
    interactions until a fixed point (removals can cascade)."""
    pairs = list(pairs)
    while True:
        user_counts: Dict[str, int] = {}
        item_counts: Dict[str, int] = {}
        for u, i in pairs:
            user_counts[u] = user_counts.get(u, 0) + 1
            item_counts[i] = item_counts.get(i, 0) + 1
        kept = [(u, i) for u, i in pairs
                if user_counts[u] >= min_user and item_counts[i] >= min_item]
        if len(kept) == len(pairs):
            return kept
        pairs = kept


def _sorted_ids(ids: Iterable[str]) -> List[str]:
    ids = list(set(ids))
    try:
        return sorted(ids, key=lambda s: (0, int(s)))
    except ValueError:
        return sorted(ids)


def build_matrix(pairs: Sequence[Tuple[str, str]]) -> Tuple[sparse.csr_matrix, List[str], List[str]]:
    """Binary user-item CSR matrix with deterministic (numeric-aware) id ordering."""
    user_ids = _sorted_ids(u for u, _ in pairs)
    item_ids = _sorted_ids(i for _, i in pairs)
    urow = {u: r for r, u in enumerate(user_ids)}
    icol = {i: c for c, i in enumerate(item_ids)}
    rows = np.fromiter((urow[u] for u, i in pairs), dtype=np.int64, count=len(pairs))
    cols = np.fromiter((icol[i] for u, i in pairs), dtype=np.int64, count=len(pairs))
    mat = sparse.csr_matrix(
        (np.ones(len(pairs), dtype=np.float64), (rows, cols)),
        shape=(len(user_ids), len(item_ids)))
    mat.sum_duplicates()
    mat.data[:] = 1.0
    return mat, user_ids, item_ids


def _checksum(mat: sparse.csr_matrix) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(mat.indptr, dtype=np.int64).tobytes())
    h.update(np.ascontiguousarray(mat.indices, dtype=np.int64).tobytes())
    h.update(np.ascontiguousarray(mat.data, dtype=np.float64).tobytes())
    h.update(str(mat.shape).encode())
    return h.hexdigest()


@dataclass
class SplitDataset:
    """Per-user train/val/test partition of a binary interaction matrix."""

    train: sparse.csr_matrix
    val: sparse.csr_matrix
    test: sparse.csr_matrix
    user_ids: List[str]
    item_ids: List[str]
    seed: int
    fractions: Tuple[float, float, float]
    mode: str = "per-user"

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    def item_popularity(self) -> np.ndarray:
        """Train-split interaction count per item (zeros kept for unseen items)."""
        return np.asarray(self.train.sum(axis=0)).ravel().astype(np.int64)

    def user_row(self, user_id: str) -> int:
        try:
            return self.user_ids.index(user_id)
        except ValueError:
            raise DataError(f"unknown user id {user_id!r}") from None

    def manifest(self) -> dict:
        return {
            "format_version": SPLIT_FORMAT_VERSION,
            "mode": self.mode,
            "seed": self.seed,
            "fractions": list(self.fractions),
            "n_users": self.n_users,
            "n_items": self.n_items,
            "interactions": {
                "train": int(self.train.nnz),
                "val": int(self.val.nnz),
                "test": int(self.test.nnz),
            },
            "checksums": {
                "train": _checksum(self.train),
                "val": _checksum(self.val),
                "test": _checksum(self.test),
            },
            "user_ids": self.user_ids,
            "item_ids": self.item_ids,
        }

    def save(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        arrays = {}
        for name, mat in (("train", self.train), ("val", self.val), ("test", self.test)):
            arrays[f"{name}_indptr"] = np.asarray(mat.indptr, dtype=np.int64)
            arrays[f"{name}_indices"] = np.asarray(mat.indices, dtype=np.int64)
            arrays[f"{name}_data"] = np.asarray(mat.data, dtype=np.float64)
        np.savez_compressed(out_dir / "splits.npz", **arrays)
        with open(out_dir / "split_manifest.json", "w", encoding="utf-8") as fh:
            json.dump(self.manifest(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, data_dir) -> "SplitDataset":
        data_dir = Path(data_dir)
        manifest_path = data_dir / "split_manifest.json"
        if not manifest_path.exists():
            raise DataError(
                f"no processed split at {data_dir} (missing split_manifest.json); "
                "run `csavae prep` or `csavae synth` first")
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        if manifest.get("format_version") != SPLIT_FORMAT_VERSION:
            raise DataError(f"split format version {manifest.get('format_version')!r} not supported")
        shape = (manifest["n_users"], manifest["n_items"])
        with np.load(data_dir / "splits.npz") as arrays:
            mats = {}
            for name in ("train", "val", "test"):
                mats[name] = sparse.csr_matrix(
                    (arrays[f"{name}_data"], arrays[f"{name}_indices"], arrays[f"{name}_indptr"]),
                    shape=shape)
        ds = cls(
            train=mats["train"], val=mats["val"], test=mats["test"],
            user_ids=list(manifest["user_ids"]), item_ids=list(manifest["item_ids"]),
            seed=manifest["seed"], fractions=tuple(manifest["fractions"]), mode=manifest["mode"])
        for name, mat in (("train", ds.train), ("val", ds.val), ("test", ds.test)):
            if _checksum(mat) != manifest["checksums"][name]:
                raise DataError(f"checksum mismatch for {name} split in {data_dir}")
        return ds


def split_interactions(
    matrix: sparse.csr_matrix,
    user_ids: List[str],
    item_ids: List[str],
    fractions: Tuple[float, float, float] = (0.7, 0.1, 0.2),
    seed: int = 0,
) -> SplitDataset:
    """Per-user random split into train/val/test by the given fractions.

    Users with fewer than 3 interactions go entirely to train. Counts use
    floor for val/test so train keeps the remainder; the per-user order is
    drawn from a seed-derived RNG, so the split is a pure function of
    (matrix, fractions, seed).
    """
    f = tuple(float(x) for x in fractions)
    if len(f) != 3 or any(x < 0 for x in f) or abs(sum(f) - 1.0) > 1e-9:
        raise DataError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    matrix = matrix.tocsr()
    n_users, n_items = matrix.shape
    rng = np.random.default_rng(seed)
    builders = {name: ([], [],) for name in ("train", "val", "test")}
    for u in range(n_users):
        cols = matrix.indices[matrix.indptr[u]:matrix.indptr[u + 1]]
        n = len(cols)
        if n == 0:
            continue
        if n < 3:
            dest = {"train": cols, "val": cols[:0], "test": cols[:0]}
        else:
            perm = rng.permutation(n)
            shuffled = cols[perm]
            n_val = int(np.floor(f[1] * n))
            n_test = int(np.floor(f[2] * n))
            n_train = n - n_val - n_test
            dest = {
                "train": shuffled[:n_train],
                "val": shuffled[n_train:n_train + n_val],
                "test": shuffled[n_train + n_val:],
            }
        for name, chosen in dest.items():
            rows, cols_list = builders[name]
            rows.extend([u] * len(chosen))
            cols_list.extend(chosen.tolist())
    mats = {}
    for name, (rows, cols_list) in builders.items():
        mats[name] = sparse.csr_matrix(
            (np.ones(len(rows), dtype=np.float64), (rows, cols_list)),
            shape=(n_users, n_items))
    return SplitDataset(
        train=mats["train"], val=mats["val"], test=mats["test"],
        user_ids=list(user_ids), item_ids=list(item_ids),
        seed=seed, fractions=f, mode="per-user")


def split_full_observed(
    biased: sparse.csr_matrix,
    unbiased_test: sparse.csr_matrix,
    user_ids: List[str],
    item_ids: List[str],
    val_fraction: float = 0.1,
    seed: int = 0,
) -> SplitDataset:
    """Fully-observed evaluation mode: the unbiased test matrix is taken
    verbatim; only train/val are split out of the biased log."""
    if biased.shape != unbiased_test.shape:
        raise DataError("biased log and unbiased test must share the user-item shape")
    inner = split_interactions(
        biased, user_ids, item_ids,
        fractions=(1.0 - val_fraction, val_fraction, 0.0), seed=seed)
    return SplitDataset(
        train=inner.train, val=inner.val, test=unbiased_test.tocsr(),
        user_ids=list(user_ids), item_ids=list(item_ids),
        seed=seed, fractions=(1.0 - val_fraction, val_fraction, 0.0),
        mode="full-observed")


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


@dataclass
class SyntheticDataset:
    """Synthetic benchmark with a known 4-node confounder graph."""

    observations: np.ndarray      # (n_users, n_items) real-valued
    binary: sparse.csr_matrix     # per-user top-decile positives
    confounders: np.ndarray       # (n_users, 4) true confounder states
    user_factor: np.ndarray       # (n_users,) the latent u series
    true_adjacency: np.ndarray    # (4, 4)
    params: dict
    split: SplitDataset = field(repr=False, default=None)


def synthesize(seed: int = 0, n_users: int = 300, n_items: int = 500,
               fractions: Tuple[float, float, float] = (0.7, 0.1, 0.2),
               quantile: float = 0.9) -> SyntheticDataset:
    """Generate the 4-confounder benchmark.

    Per user: u ~ N(0,1); exogenous noise n_i ~ N(lambda_i, beta_i) with
    lambda_i ~ U[-3,3], beta_i ~ U[0.01,4] drawn once per dataset; integer
    weights w_i ~ Poisson(softplus(u) + 0.5); SEM c1=n1, c2=w2*c1+n2,
    c3=w3*c2+n3, c4=w4*c2+n4. Observations come from a fixed random two-layer
    tanh MLP over [c1..c4, u]; positives are the entries strictly above the
    per-user `quantile` of observation values.
    """
    rng = np.random.default_rng(seed)
    lam = rng.uniform(-3.0, 3.0, size=4)
    beta = rng.uniform(0.01, 4.0, size=4)
    u = rng.normal(0.0, 1.0, size=n_users)
    noise = rng.normal(lam[None, :], np.sqrt(beta)[None, :], size=(n_users, 4))
    rate = _softplus(u) + 0.5
    w2 = rng.poisson(rate)
    w3 = rng.poisson(rate)
    w4 = rng.poisson(rate)
    c = np.zeros((n_users, 4))
    c[:, 0] = noise[:, 0]
    c[:, 1] = w2 * c[:, 0] + noise[:, 1]
    c[:, 2] = w3 * c[:, 1] + noise[:, 2]
    c[:, 3] = w4 * c[:, 1] + noise[:, 3]
    feats = np.column_stack([c, u])
    w_in = rng.normal(0.0, 1.0, size=(5, 64))
    w_out = rng.normal(0.0, 1.0, size=(64, n_items))
    observations = np.tanh(feats @ w_in) @ w_out
    thresh = np.quantile(observations, quantile, axis=1, keepdims=True)
    binary = sparse.csr_matrix((observations > thresh).astype(np.float64))
    user_ids = [f"u{i}" for i in range(n_users)]
    item_ids = [f"i{j}" for j in range(n_items)]
    split = split_interactions(binary, user_ids, item_ids, fractions=fractions, seed=seed)
    params = {
        "seed": seed, "n_users": n_users, "n_items": n_items,
        "lambda": lam.tolist(), "beta": beta.tolist(),
        "poisson_rate": "softplus(u) + 0.5", "quantile": quantile,
        "mlp_hidden": 64,
    }
    return SyntheticDataset(
        observations=observations, binary=binary, confounders=c, user_factor=u,
        true_adjacency=SYNTH_TRUE_ADJACENCY.copy(), params=params, split=split)


def save_synthetic(ds: SyntheticDataset, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    np.save(out_dir / "observations.npy", ds.observations)
    np.save(out_dir / "confounders.npy", ds.confounders)
    np.save(out_dir / "user_factor.npy", ds.user_factor)
    with open(out_dir / "true_graph.json", "w", encoding="utf-8") as fh:
        json.dump({"k": 4, "adjacency": ds.true_adjacency.tolist()}, fh, indent=2)
    with open(out_dir / "generator_params.json", "w", encoding="utf-8") as fh:
        json.dump(ds.params, fh, indent=2, sort_keys=True)
    ds.split.save(out_dir)


def load_true_graph(data_dir) -> Optional[np.ndarray]:
    path = Path(data_dir) / "true_graph.json"
    if not path.exists():
        return None
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return np.asarray(doc["adjacency"], dtype=np.int64)
