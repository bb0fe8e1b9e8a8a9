"""Stateless steering service over a trained checkpoint.

Exposes baseline recommendations, do-operation interventions, and graph
introspection. All forwards run in evaluation mode (hard adjacency, no noise,
no dropout) so every response is reproducible; nothing mutates the checkpoint.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np
import torch
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from . import evaluation
from .data import SplitDataset
from .model import CSAVAENet, InterventionSpec, ModelCheckpoint


class ServiceError(Exception):
    """Request-level failure carrying a wire code and HTTP status."""

    def __init__(self, code: str, message: str, status: int = 400):
        super().__init__(message)
        self.code = code
        self.message = message
        self.status = status


@dataclass
class SteeringContext:
    """Read-only state shared by every request: model, data, popularity ranks."""

    checkpoint: ModelCheckpoint
    net: CSAVAENet
    dataset: SplitDataset
    pop_ranks: np.ndarray
    digest: str
    user_index: Dict[str, int]

    @classmethod
    def build(cls, checkpoint: ModelCheckpoint, dataset: SplitDataset) -> "SteeringContext":
        if len(dataset.item_ids) != checkpoint.hyper["model"]["n_items"]:
            raise ValueError("dataset item count does not match the checkpoint")
        net = checkpoint.build_net()
        net.eval()
        return cls(
            checkpoint=checkpoint, net=net, dataset=dataset,
            pop_ranks=evaluation.popularity_ranks(np.asarray(checkpoint.item_popularity)),
            digest=checkpoint.digest(),
            user_index={uid: i for i, uid in enumerate(dataset.user_ids)})

    @property
    def k(self) -> int:
        return self.net.k

    @property
    def d(self) -> int:
        return self.net.d

    def row_of(self, user_id: str) -> int:
        try:
            return self.user_index[user_id]
        except KeyError:
            raise ServiceError("unknown_user", f"unknown user id {user_id!r}", 404) from None

    def input_row(self, row: int) -> torch.Tensor:
        x = np.asarray(self.dataset.train[row].todense(), dtype=np.float64)
        return torch.from_numpy(x)

    def excluded_items(self, row: int) -> np.ndarray:
        tr = self.dataset.train
        return tr.indices[tr.indptr[row]:tr.indptr[row + 1]]


def _ranked_payload(ctx: SteeringContext, scores: np.ndarray, exclude: np.ndarray,
                    k: int) -> dict:
    """Top-k item entries plus the list AVP; clamps k to what is rankable."""
    available = scores.shape[0] - len(exclude)
    warning = None
    if k > available:
        warning = f"k={k} clamped to {available} rankable items"
        k = available
    if k < 1:
        raise ServiceError("bad_request", "no rankable items for this user")
    ranked = evaluation.rank_items(scores, exclude, k=k)
    items = [{
        "index": int(i),
        "item_id": ctx.dataset.item_ids[int(i)],
        "score": float(scores[int(i)]),
        "pop_rank": int(ctx.pop_ranks[int(i)]),
    } for i in ranked]
    avp = evaluation.avp_of_list(ranked, ctx.pop_ranks, k)
    return {"k": k, "items": items, "avp": avp, "warning": warning}


def _forward_scores(ctx: SteeringContext, x: torch.Tensor, *, confounders: bool = True,
                    spec: Optional[InterventionSpec] = None):
    with torch.no_grad():
        if confounders:
            scores, bundle = ctx.net.forward_with_confounders(x, spec)
            return scores.numpy()[0], bundle
        scores, _ = ctx.net.forward_without_confounders(x)
        return scores.numpy()[0], None


def recommendations_payload(ctx: SteeringContext, user_id: str, k: int,
                            *, confounders: bool = True) -> dict:
    """Deterministic top-k for a user; train items are never recommended."""
    if k < 1:
        raise ServiceError("bad_request", f"k must be >= 1, got {k}")
    row = ctx.row_of(user_id)
    scores, _ = _forward_scores(ctx, ctx.input_row(row), confounders=confounders)
    payload = _ranked_payload(ctx, scores, ctx.excluded_items(row), k)
    payload.update({"user_id": user_id, "confounders": "on" if confounders else "off",
                    "checkpoint_digest": ctx.digest})
    return payload


def baseline_confounders(ctx: SteeringContext, user_id: str) -> np.ndarray:
    """The user's reconstructed confounder matrix (k, d) with no intervention."""
    row = ctx.row_of(user_id)
    _, bundle = _forward_scores(ctx, ctx.input_row(row))
    return bundle.reconstructed.numpy()[0]


def resolve_assignments(ctx: SteeringContext, user_id: str,
                        scalars: Dict[int, float]) -> Dict[int, np.ndarray]:
    """Map slider scalars in [-1, 1] to confounder vectors.

    Scalar s for confounder i resolves to c_hat_i(baseline) + s * range_i with
    range_i the per-confounder inter-quantile range stored in the checkpoint.
    """
    baseline = baseline_confounders(ctx, user_id)
    ranges = np.asarray(ctx.checkpoint.assign_ranges)
    out: Dict[int, np.ndarray] = {}
    for idx, s in scalars.items():
        out[int(idx)] = baseline[int(idx)] + float(s) * ranges[int(idx)]
    return out


def intervention_payload(ctx: SteeringContext, user_id: str, k: int,
                         mask: Optional[np.ndarray] = None,
                         assignments: Optional[Dict[int, np.ndarray]] = None) -> dict:
    """Before/after lists for a do-operation; the single path cmd_do shares.

    `assignments` carries resolved d-vectors (the values written into c_hat),
    echoed back as `resolved_assignments` so a client can export a file that
    replays the exact same intervention offline.
    """
    if k < 1:
        raise ServiceError("bad_request", f"k must be >= 1, got {k}")
    row = ctx.row_of(user_id)
    x = ctx.input_row(row)
    exclude = ctx.excluded_items(row)

    spec = None
    if mask is not None or assignments:
        spec_mask = None if mask is None else torch.from_numpy(
            np.asarray(mask, dtype=np.float64))
        spec_assign = {int(i): torch.from_numpy(np.asarray(v, dtype=np.float64))
                       for i, v in (assignments or {}).items()}
        spec = InterventionSpec(mask=spec_mask, assignments=spec_assign)
        try:
            spec.validate(ctx.k, ctx.d)
        except ValueError as exc:
            raise ServiceError("bad_request", str(exc)) from exc

    before_scores, _ = _forward_scores(ctx, x)
    after_scores, _ = _forward_scores(ctx, x, spec=spec)
    before = _ranked_payload(ctx, before_scores, exclude, k)
    after = _ranked_payload(ctx, after_scores, exclude, k)
    changed = [p for p, (b, a) in enumerate(zip(before["items"], after["items"]))
               if b["index"] != a["index"]]
    return {
        "user_id": user_id,
        "k": before["k"],
        "before": before["items"],
        "after": after["items"],
        "avp_before": before["avp"],
        "avp_after": after["avp"],
        "changed_positions": changed,
        "resolved_assignments": {str(i): [float(v) for v in vec]
                                 for i, vec in (assignments or {}).items()},
        "mask": None if mask is None else np.asarray(mask, dtype=np.int64).tolist(),
        "warning": before["warning"],
        "checkpoint_digest": ctx.digest,
    }


def user_graph_payload(ctx: SteeringContext, user_id: str) -> dict:
    """Global document plus the user's local attention graph and composed graph."""
    row = ctx.row_of(user_id)
    _, bundle = _forward_scores(ctx, ctx.input_row(row))
    return {
        "user_id": user_id,
        "global": ctx.net.export_graph(),
        "local": bundle.local.numpy()[0].tolist(),
        "composed": bundle.user_graph.numpy()[0].tolist(),
        "checkpoint_digest": ctx.digest,
    }


# ---- request parsing ----

def _parse_intervention_body(payload, k_confounders: int) -> dict:
    if not isinstance(payload, dict):
        raise ServiceError("bad_request", "request body must be a JSON object")
    allowed = {"k", "mask", "assign"}
    unknown = set(payload) - allowed
    if unknown:
        raise ServiceError("bad_request", f"unknown fields: {sorted(unknown)}")

    k = payload.get("k", 10)
    if not isinstance(k, int) or isinstance(k, bool) or k < 1:
        raise ServiceError("bad_request", f"k must be an integer >= 1, got {k!r}")

    mask = payload.get("mask")
    if mask is not None:
        arr = np.asarray(mask)
        if arr.shape != (k_confounders, k_confounders):
            raise ServiceError(
                "bad_request",
                f"mask must be {k_confounders}x{k_confounders}, got shape {arr.shape}")
        if not np.isin(arr, (0, 1)).all():
            raise ServiceError("bad_request", "mask entries must be 0 or 1")
        mask = arr.astype(np.float64)

    scalars: Dict[int, float] = {}
    assign = payload.get("assign") or {}
    if not isinstance(assign, dict):
        raise ServiceError("bad_request", "assign must be a map of confounder index to scalar")
    for key, value in assign.items():
        try:
            idx = int(key)
        except (TypeError, ValueError):
            raise ServiceError("bad_request", f"assign key {key!r} is not an index") from None
        if not 0 <= idx < k_confounders:
            raise ServiceError("bad_request",
                               f"assign index {idx} out of range [0, {k_confounders})")
        if not isinstance(value, (int, float)) or isinstance(value, bool) or not np.isfinite(value):
            raise ServiceError("bad_request", f"assign value for {idx} must be a finite number")
        if not -1.0 <= float(value) <= 1.0:
            raise ServiceError("bad_request",
                               f"assign value for {idx} must be in [-1, 1], got {value}")
        scalars[idx] = float(value)
    return {"k": k, "mask": mask, "scalars": scalars}


def create_app(checkpoint: ModelCheckpoint, dataset: SplitDataset, *, ui_dir=None):
    """Build the HTTP app: health, graph, recommendations, and intervene routes."""
    ctx = SteeringContext.build(checkpoint, dataset)
    app = FastAPI(title="confounder steering service", docs_url=None, redoc_url=None)
    app.state.ctx = ctx

    @app.exception_handler(ServiceError)
    async def service_error_handler(request: Request, exc: ServiceError):
        return JSONResponse(status_code=exc.status,
                            content={"code": exc.code, "message": exc.message},
                            headers={"X-Checkpoint-Digest": ctx.digest})

    @app.exception_handler(RequestValidationError)
    async def validation_error_handler(request: Request, exc: RequestValidationError):
        first = exc.errors()[0] if exc.errors() else {"loc": (), "msg": "invalid request"}
        where = ".".join(str(part) for part in first.get("loc", ()))
        return JSONResponse(status_code=400,
                            content={"code": "bad_request",
                                     "message": f"{where}: {first.get('msg', 'invalid')}"},
                            headers={"X-Checkpoint-Digest": ctx.digest})

    @app.middleware("http")
    async def digest_header(request: Request, call_next):
        response = await call_next(request)
        response.headers.setdefault("X-Checkpoint-Digest", ctx.digest)
        return response

    @app.get("/health")
    def health():
        return {"status": "ok", "checkpoint_digest": ctx.digest,
                "n_users": len(ctx.dataset.user_ids),
                "n_items": len(ctx.dataset.item_ids), "k": ctx.k}

    @app.get("/graph")
    def global_graph():
        doc = ctx.net.export_graph()
        doc["checkpoint_digest"] = ctx.digest
        return doc

    @app.get("/users/{user_id}/graph")
    def user_graph(user_id: str):
        return user_graph_payload(ctx, user_id)

    @app.get("/users/{user_id}/recommendations")
    def recommendations(user_id: str, k: int = 10, confounders: str = "on"):
        if confounders not in ("on", "off"):
            raise ServiceError("bad_request",
                               f"confounders must be 'on' or 'off', got {confounders!r}")
        return recommendations_payload(ctx, user_id, k, confounders=confounders == "on")

    @app.post("/users/{user_id}/intervene")
    async def intervene(user_id: str, request: Request):
        try:
            payload = await request.json()
        except Exception:
            raise ServiceError("bad_request", "request body must be valid JSON") from None
        parsed = _parse_intervention_body(payload, ctx.k)
        assignments = resolve_assignments(ctx, user_id, parsed["scalars"]) \
            if parsed["scalars"] else None
        return intervention_payload(ctx, user_id, parsed["k"],
                                    mask=parsed["mask"], assignments=assignments)

    if ui_dir is not None:
        from fastapi.staticfiles import StaticFiles
        app.mount("/ui", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app
