"""Command-line front end.

Every command reads the same flat config (file, then --key value
overrides), writes a deterministic JSON report into results_dir, and
exits 0 on success, 1 on usage/config errors, 2 on runtime failures.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import dmlt, pipeline
from .incremental import write_annotations
from .metrics import aupr, auroc, fpr_at_95_tpr
from .model import load_checkpoint, save_checkpoint
from .prototypes import make_prototypes
from .runconfig import ConfigError, RunConfig, apply_setting, load_config

USAGE_EXIT = 1
RUNTIME_EXIT = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_config_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key")
    for f in fields(RunConfig):
        parser.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfgkey_{f.name}",
                            metavar="V", help=argparse.SUPPRESS)


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config, args.set)
    for f in fields(RunConfig):
        raw = getattr(args, f"cfgkey_{f.name}", None)
        if raw is not None:
            apply_setting(cfg, f.name, raw)
    return cfg.validate()


def build_parser() -> _Parser:
    parser = _Parser(prog="openworldseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in [
        ("gen-data", "generate the synthetic dataset"),
        ("train", "train the base model on in-distribution classes"),
        ("eval-closed", "close-set IoU on the validation split"),
        ("eval-anomaly", "anomaly metrics on the held-out split"),
        ("infer-open", "write open-set maps for scenes"),
        ("incremental", "learn one held-out class from few shots"),
        ("loop", "full cycle: data, train, score, annotate, learn, re-evaluate"),
        ("sweep", "re-run with one parameter swept over several values"),
        ("serve", "start the annotation HTTP service"),
    ]:
        p = sub.add_parser(name, help=help_text)
        _add_config_flags(p)
        if name == "eval-anomaly":
            p.add_argument("--scores-file", help="JSON {scores: [...], labels: [...]} "
                                                 "to score directly")
        if name == "infer-open":
            p.add_argument("--split", default="test_ood")
            p.add_argument("--scenes", default="0", help="comma-separated scene indices")
        if name == "incremental":
            p.add_argument("--annotations", help="annotation directory (default: oracle labels)")
        if name == "sweep":
            p.add_argument("--param", required=True)
            p.add_argument("--values", required=True, help="comma-separated values")
        if name == "serve":
            p.add_argument("--port", type=int, default=8000)
            p.add_argument("--host", default="127.0.0.1")
    return parser


def _load_model(cfg: RunConfig):
    model = load_checkpoint(cfg.checkpoint_dir)
    protos = make_prototypes(model.n_base, model.t_value)
    return model, protos


def cmd_gen_data(cfg: RunConfig, args) -> dict:
    dataset = pipeline.prepare_dataset(cfg)
    return {
        "dataset_dir": str(Path(cfg.dataset_dir)),
        "counts": {split: dataset.count(split) for split in ("train", "val", "test_ood")},
        "classes": dataset.manifest["classes"],
    }


def cmd_train(cfg: RunConfig, args) -> dict:
    dataset = pipeline.open_dataset(cfg)
    model = pipeline.train_base_model(cfg, dataset)
    save_checkpoint(model, cfg.checkpoint_dir)
    losses = [entry["loss"] for entry in model.train_log]
    return {
        "checkpoint_dir": str(Path(cfg.checkpoint_dir)),
        "iterations": len(losses),
        "loss_first": losses[0],
        "loss_last": losses[-1],
        "loss_mean_last_100": float(np.mean(losses[-100:])),
        "params_digest": model.params_digest(),
    }


def cmd_eval_closed(cfg: RunConfig, args) -> dict:
    dataset = pipeline.open_dataset(cfg)
    model, protos = _load_model(cfg)
    report = pipeline.evaluate_closed(model, protos, dataset.scenes("val"), dataset.in_dist_ids)
    return {"split": "val", "iou": report}


def cmd_eval_anomaly(cfg: RunConfig, args) -> dict:
    if getattr(args, "scores_file", None):
        data = json.loads(Path(args.scores_file).read_text())
        scores, labels = data["scores"], data["labels"]
        return {"source": args.scores_file,
                "auroc": auroc(scores, labels),
                "aupr": aupr(scores, labels),
                "fpr95": fpr_at_95_tpr(scores, labels)}
    dataset = pipeline.open_dataset(cfg)
    model, protos = _load_model(cfg)
    report = pipeline.evaluate_anomaly(model, protos, dataset.scenes("test_ood"),
                                       dataset.ood_ids, cfg)
    return {"split": "test_ood", **report}


def _write_scene_maps(cfg: RunConfig, dataset, model, protos, lam: float,
                      split: str, indices: list[int]) -> list[str]:
    out_dir = Path(cfg.results_dir) / "openset"
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for index in indices:
        scene = dataset.scene(split, index)
        maps = pipeline.compose_openset(model, protos, scene.image, cfg, lam)
        for key, raw in pipeline.map_payload(maps).items():
            path = out_dir / f"{split}_{index:05d}_{key}.pgm"
            path.write_bytes(raw)
            written.append(str(path.relative_to(cfg.results_dir)))
        # probability maps also go out as raw float tensors
        for key in ("eds", "mmsp", "mixed"):
            path = out_dir / f"{split}_{index:05d}_{key}.dmlt"
            dmlt.write(path, maps[key])
            written.append(str(path.relative_to(cfg.results_dir)))
    return sorted(written)


def cmd_infer_open(cfg: RunConfig, args) -> dict:
    dataset = pipeline.open_dataset(cfg)
    model, protos = _load_model(cfg)
    lam = pipeline.calibrate_threshold(model, protos, dataset, cfg)
    indices = [int(i) for i in args.scenes.split(",")]
    written = _write_scene_maps(cfg, dataset, model, protos, lam, args.split, indices)
    return {"lambda_out": lam, "split": args.split, "scenes": indices, "files": written}


def cmd_incremental(cfg: RunConfig, args) -> dict:
    dataset = pipeline.open_dataset(cfg)
    model, _ = _load_model(cfg)
    annotations = None
    if getattr(args, "annotations", None):
        from .incremental import read_annotations
        annotations = read_annotations(args.annotations, dataset.resolve_image)
    new_model, protos, records, report = pipeline.incremental_step(model, dataset, cfg, annotations)
    if cfg.mode == "plm":
        save_checkpoint(new_model, str(Path(cfg.checkpoint_dir)) + "-plm")
        report["checkpoint_dir"] = str(Path(cfg.checkpoint_dir)) + "-plm"
    else:
        pipeline.save_novel_records(cfg.results_dir, records)
    if "table" in report:
        Path(cfg.results_dir).mkdir(parents=True, exist_ok=True)
        (Path(cfg.results_dir) / "incremental_table.txt").write_text(report["table"])
    return report


def cmd_loop(cfg: RunConfig, args) -> dict:
    dataset = pipeline.prepare_dataset(cfg)
    model = pipeline.train_base_model(cfg, dataset)
    save_checkpoint(model, cfg.checkpoint_dir)
    protos = make_prototypes(model.n_base, model.t_value)

    closed = pipeline.evaluate_closed(model, protos, dataset.scenes("val"), dataset.in_dist_ids)
    anomaly = pipeline.evaluate_anomaly(model, protos, dataset.scenes("test_ood"),
                                        dataset.ood_ids, cfg)
    lam = pipeline.calibrate_threshold(model, protos, dataset, cfg)
    preview = list(range(min(3, dataset.count("test_ood"))))
    map_files = _write_scene_maps(cfg, dataset, model, protos, lam, "test_ood", preview)

    new_model, protos2, records, incr = pipeline.incremental_step(model, dataset, cfg)
    if cfg.mode == "plm":
        save_checkpoint(new_model, str(Path(cfg.checkpoint_dir)) + "-plm")
    else:
        pipeline.save_novel_records(cfg.results_dir, records)
    if "table" in incr:
        (Path(cfg.results_dir) / "incremental_table.txt").write_text(incr["table"])

    # annotations used are persisted for the record in interchange form
    ann_dir = Path(cfg.results_dir) / "annotations" / incr["novel_class"]
    test = dataset.scenes("test_ood")
    from .shapesworld import oracle_annotate
    annotations = oracle_annotate(test, incr["novel_dataset_id"], cfg.shots,
                                  class_name=incr["novel_class"], max_shots=cfg.max_shots)
    write_annotations(ann_dir, annotations)

    return {
        "closed_set_val": closed,
        "anomaly_test_ood": anomaly,
        "lambda_out": lam,
        "openset_maps": map_files,
        "incremental": incr,
    }


_SCORING_PARAMS = {"beta", "gamma", "lambda_out", "target_fpr", "lambda_novel", "shots", "mode"}


def cmd_sweep(cfg: RunConfig, args) -> dict:
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("sweep needs at least one value")
    rows = []
    for raw in values:
        run_cfg = load_config(args.config, args.set)
        for f in fields(RunConfig):
            flag = getattr(args, f"cfgkey_{f.name}", None)
            if flag is not None:
                apply_setting(run_cfg, f.name, flag)
        apply_setting(run_cfg, args.param, raw)
        run_cfg.validate()

        if args.param in _SCORING_PARAMS:
            dataset = pipeline.open_dataset(run_cfg)
            model, protos = _load_model(run_cfg)
        else:
            dataset = pipeline.prepare_dataset(run_cfg)
            model = pipeline.train_base_model(run_cfg, dataset)
            protos = make_prototypes(model.n_base, model.t_value)
        anomaly = pipeline.evaluate_anomaly(model, protos, dataset.scenes("test_ood"),
                                            dataset.ood_ids, run_cfg)
        closed = pipeline.evaluate_closed(model, protos, dataset.scenes("val"),
                                          dataset.in_dist_ids)
        rows.append({
            "value": raw,
            "miou_val": closed["miou"],
            "eds": anomaly["eds"],
            "mmsp": anomaly["mmsp"],
            "mixed": anomaly["mixed"],
        })
    return {"param": args.param, "rows": rows}


def cmd_serve(cfg: RunConfig, args) -> dict:
    import os

    import uvicorn

    from .service import create_app

    app = create_app(cfg)
    port = int(os.environ.get("PORT", args.port))
    uvicorn.run(app, host=args.host, port=port, log_level="warning")
    return {"served": True}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval-closed": cmd_eval_closed,
    "eval-anomaly": cmd_eval_anomaly,
    "infer-open": cmd_infer_open,
    "incremental": cmd_incremental,
    "loop": cmd_loop,
    "sweep": cmd_sweep,
    "serve": cmd_serve,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _resolve_config(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    try:
        report = COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return RUNTIME_EXIT
    if args.command != "serve":
        payload = {"command": args.command, "config": cfg.as_dict(), "result": report}
        out = pipeline.write_report(cfg.results_dir, args.command.replace("-", "_"), payload)
        print(json.dumps({"report": str(out), **report}, sort_keys=True, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
