"""Operator command line: synth, prep, train, eval, do, export-graph, serve.

Every command that writes artifacts also writes a manifest.json holding the
resolved configuration, the seed, and content digests of its inputs and
outputs, so a run is reproducible (and checkable) from the manifest alone.
Digests cover array and document contents, never archive bytes, because zip
containers embed timestamps.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import click
import numpy as np

from . import __version__, evaluation, service
from .data import (DataError, FormatSpec, SplitDataset, binarize, build_matrix,
                   filter_core, load_ratings, save_synthetic, split_interactions,
                   synthesize)
from .model import CheckpointVersionError, ModelCheckpoint
from .objective import TrainingFault
from .service import ServiceError
from .training import TrainConfig
from .training import train as run_training


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_manifest(out_dir, command: str, **fields) -> None:
    _write_json(Path(out_dir) / "manifest.json", {"command": command, **fields})


def _load_dataset(data_dir) -> SplitDataset:
    try:
        return SplitDataset.load(data_dir)
    except DataError as exc:
        raise click.ClickException(str(exc)) from exc


def _load_checkpoint(path) -> ModelCheckpoint:
    try:
        return ModelCheckpoint.load(path)
    except (CheckpointVersionError, ValueError, KeyError, OSError) as exc:
        raise click.ClickException(f"cannot load checkpoint {path}: {exc}") from exc


def _resolved_config(config_path, **overrides) -> TrainConfig:
    try:
        if config_path is not None:
            raw = json.loads(Path(config_path).read_text(encoding="utf-8"))
            cfg = TrainConfig.from_dict(raw)
        else:
            cfg = TrainConfig()
        return cfg.with_overrides(**overrides)
    except (ValueError, json.JSONDecodeError) as exc:
        raise click.ClickException(f"bad config: {exc}") from exc


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(version=__version__, prog_name="csavae")
def main():
    """Causal-graph VAE recommender: data prep, training, evaluation, steering."""


@main.command("synth")
@click.option("--seed", type=int, default=0, show_default=True, help="Generator seed.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False),
              help="Output directory for the synthetic benchmark.")
@click.option("--users", type=int, default=300, show_default=True)
@click.option("--items", type=int, default=500, show_default=True)
def cmd_synth(seed, out_dir, users, items):
    """Generate the synthetic benchmark with its known 3-edge confounder graph."""
    try:
        ds = synthesize(seed=seed, n_users=users, n_items=items)
        save_synthetic(ds, out_dir)
    except (DataError, ValueError, OSError) as exc:
        raise click.ClickException(str(exc)) from exc
    split_manifest = ds.split.manifest()
    _write_manifest(
        out_dir, "synth", seed=seed, users=users, items=items,
        digests={
            "observations": _sha256(ds.observations.tobytes()),
            "confounders": _sha256(ds.confounders.tobytes()),
            "user_factor": _sha256(ds.user_factor.tobytes()),
            "true_adjacency": _sha256(np.asarray(ds.true_adjacency).tobytes()),
            "split": split_manifest["checksums"],
        })
    click.echo(f"synthetic benchmark written to {out_dir} "
               f"({users} users x {items} items, seed {seed})")


@main.command("prep")
@click.option("--ratings", "ratings_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Raw ratings file (user, item, rating[, timestamp] rows).")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--threshold", type=float, default=4.0, show_default=True,
              help="Ratings at or above this become positive interactions.")
@click.option("--min-user", type=int, default=20, show_default=True,
              help="Drop users with fewer interactions (iterated with --min-item).")
@click.option("--min-item", type=int, default=10, show_default=True)
@click.option("--val-frac", type=float, default=0.1, show_default=True)
@click.option("--test-frac", type=float, default=0.2, show_default=True)
@click.option("--delimiter", default="\t", show_default=False,
              help="Column delimiter of the ratings file (default: tab).")
@click.option("--header/--no-header", default=False, show_default=True)
def cmd_prep(ratings_path, out_dir, seed, threshold, min_user, min_item,
             val_frac, test_frac, delimiter, header):
    """Binarize, core-filter, and split a raw ratings log into a training split."""
    try:
        records = load_ratings(ratings_path, FormatSpec(delimiter=delimiter, header=header))
        pairs = filter_core(binarize(records, threshold=threshold),
                            min_user=min_user, min_item=min_item)
        matrix, user_ids, item_ids = build_matrix(pairs)
        train_frac = 1.0 - val_frac - test_frac
        split = split_interactions(matrix, user_ids, item_ids,
                                   fractions=(train_frac, val_frac, test_frac), seed=seed)
        split.save(out_dir)
    except (DataError, ValueError, OSError) as exc:
        raise click.ClickException(str(exc)) from exc
    manifest = split.manifest()
    _write_manifest(out_dir, "prep", seed=seed, threshold=threshold,
                    min_user=min_user, min_item=min_item,
                    fractions=[train_frac, val_frac, test_frac],
                    ratings_digest=_sha256(Path(ratings_path).read_bytes()),
                    digests={"split": manifest["checksums"]},
                    counts={"users": len(user_ids), "items": len(item_ids)})
    click.echo(f"processed split written to {out_dir} "
               f"({len(user_ids)} users x {len(item_ids)} items)")


@main.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="JSON config mirroring the training fields; flags override it.")
@click.option("--data", "data_dir", required=True, type=click.Path(file_okay=False),
              help="Directory holding a processed split (csavae prep or synth).")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=None, help="Overrides the config seed.")
@click.option("--k", type=int, default=None, help="Number of latent confounders.")
@click.option("--tau", type=float, default=None, help="Gumbel-Sigmoid temperature.")
@click.option("--lr", "learning_rate", type=float, default=None)
@click.option("--patience", type=int, default=None)
@click.option("--max-epochs", type=int, default=None)
@click.option("--resume", "resume_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Checkpoint to continue training from.")
@click.option("--quiet", is_flag=True, help="Suppress per-epoch log lines.")
def cmd_train(config_path, data_dir, out_dir, seed, k, tau, learning_rate,
              patience, max_epochs, resume_path, quiet):
    """Train on a processed split; writes checkpoint.npz, history.jsonl, manifest."""
    cfg = _resolved_config(config_path, seed=seed, k=k, tau=tau,
                           learning_rate=learning_rate, patience=patience,
                           max_epochs=max_epochs)
    dataset = _load_dataset(data_dir)
    resume = _load_checkpoint(resume_path) if resume_path else None
    log_fn = None if quiet else (lambda rec: click.echo(rec.to_json()))
    try:
        result = run_training(dataset, cfg, out_dir=out_dir, resume=resume, log_fn=log_fn)
    except TrainingFault as exc:
        raise click.ClickException(f"training diverged: {exc}") from exc
    except ValueError as exc:
        raise click.ClickException(str(exc)) from exc
    out = Path(out_dir)
    result.checkpoint.save(out / "checkpoint.npz")
    _write_manifest(
        out_dir, "train", config=cfg.to_dict(), seed=cfg.seed,
        best_epoch=result.best_epoch, stopped_early=result.stopped_early,
        digests={"data": dataset.manifest()["checksums"],
                 "checkpoint": result.checkpoint.digest()},
        resume_from=None if resume is None else resume.digest())
    best = next((rec for rec in result.history if rec.epoch == result.best_epoch), None)
    metric = "n/a" if best is None or best.val_metric is None else f"{best.val_metric:.5f}"
    click.echo(f"best epoch {result.best_epoch} (val {metric}); "
               f"checkpoint {out / 'checkpoint.npz'}")


@main.command("eval")
@click.option("--checkpoint", "checkpoint_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_dir", required=True, type=click.Path(file_okay=False))
@click.option("--split", type=click.Choice(["val", "test"]), default="test",
              show_default=True)
@click.option("--ks", default="10,30", show_default=True,
              help="Comma-separated ranking cutoffs.")
@click.option("--confounders/--no-confounders", default=True, show_default=True,
              help="Score with or without the confounder path.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
              help="Optional directory for results.json + manifest.")
def cmd_eval(checkpoint_path, data_dir, split, ks, confounders, out_dir):
    """All-ranking Recall/NDCG/AVP on a held-out split."""
    try:
        k_list = tuple(int(part) for part in ks.split(",") if part.strip())
        if not k_list or any(k < 1 for k in k_list):
            raise ValueError(f"ks must be positive integers, got {ks!r}")
    except ValueError as exc:
        raise click.ClickException(str(exc)) from exc
    checkpoint = _load_checkpoint(checkpoint_path)
    dataset = _load_dataset(data_dir)
    try:
        report = evaluation.evaluate_model(checkpoint.build_net(), dataset,
                                           split=split, ks=k_list,
                                           confounders=confounders)
    except ValueError as exc:
        raise click.ClickException(str(exc)) from exc
    for name in sorted(report["metrics"]):
        click.echo(f"{name}\t{report['metrics'][name]:.5f}")
    click.echo(f"scored {report['n_scored']} users, skipped {report['n_skipped']}")
    if out_dir is not None:
        _write_json(Path(out_dir) / "results.json", report)
        _write_manifest(out_dir, "eval", split=split, ks=list(k_list),
                        confounders=confounders,
                        digests={"checkpoint": checkpoint.digest(),
                                 "data": dataset.manifest()["checksums"]})


def _read_intervention_file(path) -> tuple:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise click.ClickException(f"cannot read intervention file {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise click.ClickException("intervention file must be a JSON object")
    mask = doc.get("mask")
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
    assign_raw = doc.get("assign") or {}
    if not isinstance(assign_raw, dict):
        raise click.ClickException("intervention 'assign' must map index to a value vector")
    try:
        assignments = {int(i): np.asarray(v, dtype=np.float64) for i, v in assign_raw.items()}
    except (TypeError, ValueError) as exc:
        raise click.ClickException(f"bad 'assign' entry: {exc}") from exc
    return mask, assignments


def _echo_ranked(title: str, items: list) -> None:
    click.echo(title)
    for pos, item in enumerate(items, start=1):
        click.echo(f"  {pos:>3}. item {item['item_id']} "
                   f"(score {item['score']:.4f}, pop rank {item['pop_rank']})")


@main.command("do")
@click.option("--checkpoint", "checkpoint_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_dir", required=True, type=click.Path(file_okay=False))
@click.option("--user", "user_id", required=True, help="User id from the split vocabulary.")
@click.option("--mask-file", "mask_file", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Intervention file: graph export doc plus 'mask' and/or 'assign'.")
@click.option("--k", type=int, default=10, show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
              help="Optional directory for do_result.json + manifest.")
def cmd_do(checkpoint_path, data_dir, user_id, mask_file, k, out_dir):
    """Apply a do-operation to one user and show the list before and after."""
    checkpoint = _load_checkpoint(checkpoint_path)
    dataset = _load_dataset(data_dir)
    mask, assignments = _read_intervention_file(mask_file)
    try:
        ctx = service.SteeringContext.build(checkpoint, dataset)
        payload = service.intervention_payload(ctx, user_id, k, mask=mask,
                                               assignments=assignments)
    except ServiceError as exc:
        raise click.ClickException(exc.message) from exc
    except ValueError as exc:
        raise click.ClickException(str(exc)) from exc

    _echo_ranked(f"before (AVP {payload['avp_before']:.2f}):", payload["before"])
    _echo_ranked(f"after  (AVP {payload['avp_after']:.2f}):", payload["after"])
    delta = payload["avp_after"] - payload["avp_before"]
    click.echo(f"AVP delta {delta:+.2f}; "
               f"{len(payload['changed_positions'])} of {payload['k']} positions changed")

    row = ctx.row_of(user_id)
    relevant = dataset.test.indices[dataset.test.indptr[row]:dataset.test.indptr[row + 1]]
    if relevant.size:
        before_ids = [item["index"] for item in payload["before"]]
        after_ids = [item["index"] for item in payload["after"]]
        r_before = evaluation.recall_at_k(before_ids, relevant, payload["k"])
        r_after = evaluation.recall_at_k(after_ids, relevant, payload["k"])
        click.echo(f"recall@{payload['k']} before {r_before:.4f} after {r_after:.4f} "
                   f"({r_after - r_before:+.4f})")
    else:
        click.echo("no test labels for this user; recall deltas unavailable")
    if out_dir is not None:
        _write_json(Path(out_dir) / "do_result.json", payload)
        _write_manifest(out_dir, "do", user=user_id, k=k,
                        digests={"checkpoint": checkpoint.digest(),
                                 "intervention_file": _sha256(Path(mask_file).read_bytes()),
                                 "data": dataset.manifest()["checksums"]})


@main.command("export-graph")
@click.option("--checkpoint", "checkpoint_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def cmd_export_graph(checkpoint_path, out_dir):
    """Write the learned global graph document (graph.json) for tools and the UI."""
    checkpoint = _load_checkpoint(checkpoint_path)
    doc = checkpoint.build_net().export_graph()
    _write_json(Path(out_dir) / "graph.json", doc)
    _write_manifest(out_dir, "export-graph",
                    digests={"checkpoint": checkpoint.digest(),
                             "graph": _sha256(json.dumps(doc, sort_keys=True).encode())})
    on_edges = sum(edge["global"] for edge in doc["edges"])
    click.echo(f"graph with {on_edges} active edges written to {Path(out_dir) / 'graph.json'}")


@main.command("serve")
@click.option("--checkpoint", "checkpoint_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_dir", required=True, type=click.Path(file_okay=False))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
@click.option("--ui", "ui_dir", type=click.Path(exists=True, file_okay=False), default=None,
              help="Optional static frontend directory mounted at /ui.")
def cmd_serve(checkpoint_path, data_dir, host, port, ui_dir):
    """Serve the steering API (and optionally the UI) for a trained checkpoint."""
    import uvicorn

    checkpoint = _load_checkpoint(checkpoint_path)
    dataset = _load_dataset(data_dir)
    try:
        app = service.create_app(checkpoint, dataset, ui_dir=ui_dir)
    except ValueError as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(f"serving checkpoint {checkpoint.digest()[:12]} on http://{host}:{port}")
    uvicorn.run(app, host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
