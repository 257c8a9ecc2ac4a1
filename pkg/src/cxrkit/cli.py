"""Command-line orchestrator.

Composable order: synth (optional) -> ingest -> split -> preprocess ->
train -> evaluate -> compare -> bootstrap -> embed -> index -> project ->
report -> serve. Each command consumes only artifacts declared by its
predecessors; all outputs land under the configured output root.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import CliConfig, ConfigError, load_config, override_seeds


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2; we want 1
        raise UsageError(message)


def _log(event: str, **fields):
    print(json.dumps({"event": event, **fields}, sort_keys=True), file=sys.stderr)


def _append_jsonl(path: Path, record: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise RuntimeError(f"missing {path} ({hint})")
    return path


def _clean_manifest(cfg: CliConfig):
    from .manifest import load_manifest

    path = _require(cfg.path("clean_manifest"), "run `ingest` first")
    return load_manifest(path)


def _split(cfg: CliConfig):
    from .manifest import load_split

    return load_split(_require(cfg.path("split_file"), "run `split` first"))


def _mask_model(cfg: CliConfig):
    from .segmentation import (
        ConstantMaskModel,
        load_mask_model,
        new_mask_model,
        save_mask_model,
        train_mask_model,
    )

    weights = cfg.path("mask_weights")
    if weights.exists():
        return load_mask_model(weights)
    if cfg.mask_fallback == "constant":
        _log("mask_fallback", kind="constant")
        return ConstantMaskModel(0.5)
    _log("mask_fallback", kind="synthetic", steps=cfg.mask_train_steps)
    model = new_mask_model(
        base_channels=cfg.mask_base_channels,
        native_size=cfg.mask_native_size,
        seed=cfg.global_seed,
    )
    train_mask_model(model, steps=cfg.mask_train_steps, seed=cfg.global_seed)
    save_mask_model(model, weights)
    return model


def _pipeline(cfg: CliConfig, mask_model=None, preprocessing=True, with_policy=True):
    from .pipeline import InputPipeline

    return InputPipeline(
        params=cfg.preprocess,
        mask_model=mask_model,
        policy=cfg.policy if with_policy else None,
        preprocessing_enabled=preprocessing,
        cache_dir=cfg.path("cache_dir"),
    )


def _active_checkpoint(cfg: CliConfig):
    from .model import load_checkpoint
    from .service import active_model_entry, load_registry

    registry_path = cfg.path("registry_file")
    entries = load_registry(registry_path) if registry_path.exists() else []
    active = active_model_entry(entries)
    if active is None:
        raise RuntimeError("no checkpoint: train a model first (`train`)")
    model, _ = load_checkpoint(active.checkpoint_path)
    return model, active.model_id


# ---------------------------------------------------------------------------
# Commands.

def cmd_synth(cfg: CliConfig, args) -> int:
    from .synthetic import SyntheticSpec, generate_dataset

    spec = SyntheticSpec(
        n_patients=cfg.synth_patients,
        scans_per_patient=cfg.synth_scans_per_patient,
        seed=cfg.synth_seed,
    )
    manifest_path = generate_dataset(cfg.path("data_root"), spec)
    target = cfg.path("manifest")
    if manifest_path != target:
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(manifest_path.read_bytes())
    _log("synth_done", manifest=str(target),
         images=cfg.synth_patients * cfg.synth_scans_per_patient)
    return 0


def cmd_ingest(cfg: CliConfig, args) -> int:
    from .manifest import apply_exclusions, load_manifest, save_exclusion_log, save_manifest

    manifest = load_manifest(cfg.path("manifest"))
    kept, log = apply_exclusions(manifest)
    save_manifest(kept, cfg.path("clean_manifest"))
    save_exclusion_log(log, cfg.path("exclusion_log"))
    _log("ingest_done", total=len(manifest), retained=len(kept), excluded=len(log))
    return 0


def cmd_split(cfg: CliConfig, args) -> int:
    from .manifest import patient_level_split, save_split

    manifest = _clean_manifest(cfg)
    split = patient_level_split(manifest, test_fraction=cfg.test_fraction, seed=cfg.split_seed)
    save_split(split, cfg.path("split_file"))
    _log("split_done", train=len(split.train_ids), test=len(split.test_ids),
         seed=cfg.split_seed, test_fraction=cfg.test_fraction)
    return 0


def cmd_preprocess(cfg: CliConfig, args) -> int:
    manifest = _clean_manifest(cfg)
    pipe = _pipeline(cfg)
    written = pipe.warm_cache(manifest.records)
    _log("preprocess_done", cached=written, total=len(manifest))
    return 0


def cmd_train(cfg: CliConfig, args) -> int:
    from .manifest import split_records
    from .model import build_model, save_checkpoint, train
    from .service import register_model

    manifest = _clean_manifest(cfg)
    split = _split(cfg)
    train_records, _ = split_records(manifest, split)
    mask = _mask_model(cfg)
    pipe = _pipeline(cfg, mask_model=mask)
    model = build_model(cfg.model, init_seed=cfg.global_seed)
    log_path = cfg.path("training_log")
    model = train(
        model,
        train_records,
        cfg.training,
        pipe,
        checkpoint_dir=cfg.path("checkpoint_dir") / cfg.model_id,
        log_fn=lambda rec: _append_jsonl(log_path, {"model_id": cfg.model_id, **rec}),
    )
    final = save_checkpoint(
        model, cfg.training, cfg.path("checkpoint_dir") / f"{cfg.model_id}.ckpt",
        epoch=cfg.training.epochs - 1,
        metrics=model.training_log[-1].to_dict() if model.training_log else {},
    )
    register_model(cfg.path("registry_file"), cfg.model_id, final, cfg.model.to_dict())
    _log("train_done", model_id=cfg.model_id, checkpoint=str(final),
         final_loss=model.training_log[-1].loss)
    return 0


def cmd_evaluate(cfg: CliConfig, args) -> int:
    from .manifest import split_records
    from .metrics import curve_to_text, evaluate, histogram_to_text, report_to_dict
    from .pipeline import save_scores, score_records, scored_pairs

    manifest = _clean_manifest(cfg)
    split = _split(cfg)
    model, model_id = _active_checkpoint(cfg)
    _, test_records = split_records(manifest, split)
    pipe = _pipeline(cfg, mask_model=_mask_model(cfg), with_policy=False)
    scored = score_records(model, test_records, pipe, batch_size=cfg.training.batch_size)
    report = evaluate(scored_pairs(scored), threshold=cfg.threshold)

    out = cfg.path("report_dir") / "evaluate" / model_id
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(
        json.dumps(report_to_dict(report), indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )
    if report.roc is not None:
        (out / "roc.tsv").write_text(curve_to_text(report.roc), encoding="utf-8")
    if report.pr is not None:
        (out / "pr.tsv").write_text(curve_to_text(report.pr), encoding="utf-8")
    (out / "histogram.tsv").write_text(histogram_to_text(report.histogram), encoding="utf-8")
    save_scores(scored, out / "scores.tsv")
    _log("evaluate_done", model_id=model_id, accuracy=report.accuracy,
         auc_roc=report.roc.auc if report.roc else None, output=str(out))
    return 0


def cmd_compare(cfg: CliConfig, args) -> int:
    from .experiments import ComparisonEntry, ExperimentSpec, comparison_table_text, run_comparison
    from .pipeline import save_scores

    if not cfg.compare_models:
        raise RuntimeError("config has no compare.models entries")
    manifest = _clean_manifest(cfg)
    entries = [
        ComparisonEntry(
            name=m.name,
            model_config=m.model_config(),
            preprocessing_enabled=m.preprocessing,
            init_seed=m.init_seed,
        )
        for m in cfg.compare_models
    ]
    spec = ExperimentSpec(
        manifest_path=cfg.path("clean_manifest"),
        split_seed=cfg.split_seed,
        models=entries,
        training=cfg.training,
        output_dir=cfg.path("output_root") / "compare",
        test_fraction=cfg.test_fraction,
        threshold=cfg.threshold,
        preprocess_params=cfg.preprocess,
        policy=cfg.policy,
    )
    result = run_comparison(
        spec,
        mask_model=_mask_model(cfg),
        cache_dir=cfg.path("cache_dir"),
        manifest=manifest,
        log_fn=lambda rec: _log("compare_progress", detail=rec),
    )
    out = Path(spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.tsv").write_text(comparison_table_text(result), encoding="utf-8")
    meta = {
        "threshold": result.threshold,
        "model_names": [row.name for row in result.rows],
        "train_ids_hash": result.train_ids_hash,
        "test_ids_hash": result.test_ids_hash,
        "split_seed": cfg.split_seed,
    }
    (out / "comparison_meta.json").write_text(
        json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )
    for row in result.rows:
        save_scores(row.scored, out / f"scores_{row.name}.tsv")
    _log("compare_done", models=[r.name for r in result.rows],
         vote_accuracy=result.vote.accuracy, output=str(out))
    return 0


def cmd_bootstrap(cfg: CliConfig, args) -> int:
    from .manifest import split_records
    from .metrics import BootstrapProtocol, bootstrap_cis, cis_to_text
    from .model import build_model, train
    from .pipeline import score_records, scored_pairs

    manifest = _clean_manifest(cfg)
    mask = _mask_model(cfg)

    def runner(manifest_, split):
        train_records, test_records = split_records(manifest_, split)
        pipe = _pipeline(cfg, mask_model=mask)
        model = build_model(cfg.model, init_seed=cfg.global_seed)
        model = train(model, train_records, cfg.training, pipe)
        scored = score_records(model, test_records, pipe, batch_size=cfg.training.batch_size)
        return scored_pairs(scored)

    cis = bootstrap_cis(
        runner,
        manifest,
        BootstrapProtocol(cfg.bootstrap_resamples, cfg.bootstrap_each),
        metrics=cfg.bootstrap_metrics,
        test_fraction=cfg.test_fraction,
        threshold=cfg.threshold,
        base_seed=cfg.split_seed,
        log_fn=lambda rec: _log("bootstrap_progress", detail=rec),
    )
    out = cfg.path("output_root") / "bootstrap_cis.tsv"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(cis_to_text(cis), encoding="utf-8")
    _log("bootstrap_done", output=str(out),
         cis={ci.metric_name: [ci.lower, ci.upper] for ci in cis})
    return 0


def cmd_embed(cfg: CliConfig, args) -> int:
    from .manifest import split_records
    from .pipeline import embed_records
    from .retrieval import save_embeddings

    manifest = _clean_manifest(cfg)
    split = _split(cfg)
    model, model_id = _active_checkpoint(cfg)
    train_records, test_records = split_records(manifest, split)
    pipe = _pipeline(cfg, mask_model=_mask_model(cfg), with_policy=False)
    entries, _ = embed_records(model, train_records, pipe, split="train",
                               batch_size=cfg.training.batch_size)
    test_entries, _ = embed_records(model, test_records, pipe, split="test",
                                    batch_size=cfg.training.batch_size)
    path = save_embeddings(entries + test_entries, cfg.path("embeddings_file"))
    _log("embed_done", model_id=model_id, embeddings=len(entries) + len(test_entries),
         output=str(path))
    return 0


def cmd_index(cfg: CliConfig, args) -> int:
    from .retrieval import build_index, load_embeddings, save_index

    entries = load_embeddings(_require(cfg.path("embeddings_file"), "run `embed` first"))
    index = build_index(entries, split="train")
    path = save_index(index, cfg.path("index_file"))
    _log("index_done", size=len(index), dim=index.dim, output=str(path))
    return 0


def cmd_project(cfg: CliConfig, args) -> int:
    from .retrieval import load_embeddings, project_entries, save_projection

    entries = load_embeddings(_require(cfg.path("embeddings_file"), "run `embed` first"))
    points, result = project_entries(
        entries,
        perplexity=cfg.tsne_perplexity,
        iterations=cfg.tsne_iterations,
        seed=cfg.tsne_seed,
    )
    path = save_projection(points, cfg.path("projection_file"))
    _log("project_done", points=len(points), initial_kl=result.initial_kl,
         final_kl=result.final_kl, output=str(path))
    return 0


def cmd_report(cfg: CliConfig, args) -> int:
    from .experiments import ReportInputs, emit_report, rebuild_comparison
    from .pipeline import load_scores
    from .retrieval import build_index, class_distance_stats, load_embeddings, load_projection

    inputs = ReportInputs()
    compare_dir = cfg.path("output_root") / "compare"
    meta_path = compare_dir / "comparison_meta.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        named = [
            (name, load_scores(compare_dir / f"scores_{name}.tsv"))
            for name in meta["model_names"]
        ]
        inputs.comparison = rebuild_comparison(named, _split(cfg), meta["threshold"])

    projection_path = cfg.path("projection_file")
    if projection_path.exists():
        inputs.projection = load_projection(projection_path)

    embeddings_path = cfg.path("embeddings_file")
    if embeddings_path.exists():
        entries = load_embeddings(embeddings_path)
        test_entries = [e for e in entries if e.split == "test"]
        if test_entries:
            inputs.distance_stats = class_distance_stats(
                build_index(entries, split="train"), test_entries
            )

    bootstrap_path = cfg.path("output_root") / "bootstrap_cis.tsv"
    if bootstrap_path.exists():
        inputs.bootstrap_text = bootstrap_path.read_text(encoding="utf-8")

    out = emit_report(inputs, cfg.path("report_dir"))
    _log("report_done", output=str(out))
    return 0


def cmd_serve(cfg: CliConfig, args) -> int:
    import uvicorn

    from .service import ServicePaths, create_app, load_service_state

    paths = ServicePaths(
        registry=cfg.path("registry_file"),
        index=cfg.path("index_file"),
        embeddings=cfg.path("embeddings_file"),
        projection=cfg.path("projection_file"),
        manifest=cfg.path("clean_manifest"),
        mask_weights=cfg.path("mask_weights"),
        cache_dir=cfg.path("cache_dir"),
    )

    def fresh():
        return load_service_state(paths, threshold=cfg.threshold, params=cfg.preprocess)

    static_dir = Path(__file__).resolve().parents[2] / "frontend"
    app = create_app(
        fresh(),
        reload_fn=fresh,
        static_dir=static_dir if (static_dir / "index.html").exists() else None,
    )
    _log("serve_start", host=cfg.service_host, port=cfg.service_port)
    uvicorn.run(app, host=cfg.service_host, port=cfg.service_port, log_level="warning")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "split": cmd_split,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "bootstrap": cmd_bootstrap,
    "embed": cmd_embed,
    "index": cmd_index,
    "project": cmd_project,
    "report": cmd_report,
    "serve": cmd_serve,
}


def build_parser() -> _Parser:
    parser = _Parser(
        prog="cxrkit",
        description="Chest X-ray classification and similar-case retrieval pipeline",
    )
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", default=None, help="YAML config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override every configured seed")
    return parser


def run_command(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = override_seeds(cfg, args.seed)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    _log("command_start", command=args.command, config=cfg.resolved())
    try:
        return COMMANDS[args.command](cfg, args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main(argv=None) -> int:
    try:
        return run_command(sys.argv[1:] if argv is None else argv)
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
