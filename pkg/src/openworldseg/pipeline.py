"""Shared orchestration: dataset preparation, base training, anomaly
scoring, open-set composition, threshold calibration, the incremental
step, and deterministic JSON reports. The CLI and the HTTP service are
thin shells over these functions."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import netpbm
from .anomaly import MixtureConfig, eds_map, eds_sum, mix_maps, mmsp_map, prob_to_u8
from .incremental import (Annotation, NovelClassRecord, PlmHyper, novel_prototype,
                          npm_classify, plm_inference, train_plm_head)
from .metrics import aupr, auroc, format_iou_table, fpr_at_95_tpr, iou_report
from .model import (BackboneConfig, ModelState, TrainHyper, build_model, forward_features,
                    load_checkpoint, save_checkpoint, train_closed_set)
from .openset import ANOMALY_ID, calibrate_lambda, openset_compose
from .prototypes import PrototypeSet, closeset_map, make_prototypes
from .runconfig import RunConfig
from .shapesworld import Dataset, WorldSpec, oracle_annotate, write_dataset

IGNORE_ID = 255


def world_spec(cfg: RunConfig) -> WorldSpec:
    return WorldSpec(image_size=cfg.image_size, noise=cfg.noise,
                     boundary_ignore=cfg.boundary_ignore, master_seed=cfg.seed)


def prepare_dataset(cfg: RunConfig) -> Dataset:
    root = Path(cfg.dataset_dir)
    counts = {"train": cfg.train_scenes, "val": cfg.val_scenes, "test_ood": cfg.test_scenes}
    write_dataset(world_spec(cfg), root, counts)
    return Dataset(root)


def open_dataset(cfg: RunConfig) -> Dataset:
    return Dataset(cfg.dataset_dir)


def train_base_model(cfg: RunConfig, dataset: Dataset) -> ModelState:
    names = [dataset.class_name(c) for c in dataset.in_dist_ids]
    model = build_model(len(dataset.in_dist_ids), names,
                        BackboneConfig(hidden_channels=cfg.hidden_channels,
                                       num_conv_layers=cfg.num_conv_layers),
                        t_value=cfg.t_value, seed=cfg.seed)
    hyper = TrainHyper(learning_rate=cfg.learning_rate, momentum=cfg.momentum,
                       weight_decay=cfg.weight_decay, batch_size=cfg.batch_size,
                       iterations=cfg.iterations, lambda_vl=cfg.lambda_vl,
                       seed=cfg.seed, hflip=cfg.hflip)
    train_closed_set(model, dataset.scenes("train"), hyper)
    return model


def anomaly_maps(model: ModelState, protos: PrototypeSet, image, cfg: RunConfig) -> dict[str, np.ndarray]:
    feats = forward_features(model, 0, image)
    s = eds_sum(feats, protos)
    p_eds = eds_map(s)
    p_mmsp = mmsp_map(feats, protos)
    p_mix = mix_maps(p_eds, p_mmsp, MixtureConfig(beta=cfg.beta, gamma=cfg.gamma))
    return {"eds_sum": s, "eds": p_eds, "mmsp": p_mmsp, "mixed": p_mix}


def calibrate_threshold(model: ModelState, protos: PrototypeSet, dataset: Dataset,
                        cfg: RunConfig) -> float:
    """Explicit lambda if configured, else the clean-split quantile."""
    if cfg.lambda_out is not None:
        return cfg.lambda_out
    maps = [anomaly_maps(model, protos, s.image, cfg)["mixed"] for s in dataset.scenes("val")]
    return calibrate_lambda(maps, cfg.target_fpr)


def evaluate_closed(model: ModelState, protos: PrototypeSet, scenes, class_ids) -> dict:
    preds = np.stack([closeset_map(forward_features(model, 0, s.image), protos) for s in scenes])
    gts = np.stack([s.label for s in scenes])
    return iou_report(preds, gts, class_ids, []).as_dict()


def evaluate_anomaly(model: ModelState, protos: PrototypeSet, scenes, ood_ids,
                     cfg: RunConfig) -> dict:
    per_score: dict[str, list] = {"eds": [], "mmsp": [], "mixed": []}
    labels = []
    s_ood, s_correct = [], []
    for scene in scenes:
        maps = anomaly_maps(model, protos, scene.image, cfg)
        keep = scene.label != IGNORE_ID
        for key in per_score:
            per_score[key].append(maps[key][keep])
        labels.append(np.isin(scene.label[keep], ood_ids).astype(int))
        seg = closeset_map(forward_features(model, 0, scene.image), protos)
        ood_mask = np.isin(scene.label, ood_ids)
        s_ood.append(maps["eds_sum"][ood_mask])
        correct = (~ood_mask) & keep & (seg == scene.label)
        s_correct.append(maps["eds_sum"][correct])
    y = np.concatenate(labels)
    report = {}
    for key, chunks in per_score.items():
        scores = np.concatenate(chunks)
        report[key] = {"auroc": auroc(scores, y), "aupr": aupr(scores, y),
                       "fpr95": fpr_at_95_tpr(scores, y)}
    report["median_distance_sum"] = {
        "ood": float(np.median(np.concatenate(s_ood))),
        "correct_in_dist": float(np.median(np.concatenate(s_correct))),
    }
    return report


def compose_openset(model: ModelState, protos: PrototypeSet, image, cfg: RunConfig,
                    lambda_out: float) -> dict[str, np.ndarray]:
    """Close-set map, the anomaly maps, and their open-set composition."""
    feats = forward_features(model, 0, image)
    maps = anomaly_maps(model, protos, image, cfg)
    close = closeset_map(feats, protos)
    maps["closeset"] = close
    maps["openset"] = openset_compose(close, maps["mixed"], lambda_out)
    return maps


def current_prediction(model: ModelState, protos: PrototypeSet,
                       records: list[NovelClassRecord], image, cfg: RunConfig) -> np.ndarray:
    """Best per-pixel labeling the current knowledge base supports."""
    if len(model.heads) > 1:
        return plm_inference(model, image)
    if protos.novel_prototypes:
        lams = [r.lambda_novel if r.lambda_novel is not None else cfg.lambda_novel
                for r in records if r.mode == "npm"]
        feats = forward_features(model, 0, image)
        return npm_classify(feats, protos, lams)
    return closeset_map(forward_features(model, 0, image), protos)


def _gt_old_only(label: np.ndarray, ood_ids) -> np.ndarray:
    out = label.copy()
    out[np.isin(label, ood_ids)] = IGNORE_ID
    return out


def _gt_with_novel(label: np.ndarray, ood_ids, learned_dataset_id: int, model_id: int) -> np.ndarray:
    out = label.copy()
    for cid in ood_ids:
        if cid != learned_dataset_id:
            out[label == cid] = IGNORE_ID
    out[label == learned_dataset_id] = model_id
    return out


def incremental_step(model: ModelState, dataset: Dataset, cfg: RunConfig,
                     annotations: list[Annotation] | None = None):
    """Run one NPM or PLM addition from oracle (or provided) annotations.

    Returns (new model, prototype set incl. any novel rows, records,
    report dict). The before/after old-class comparison excludes every OOD
    class from gt; novel IoU ignores un-learned OOD classes; annotated
    shot scenes are excluded from the evaluation split.
    """
    test = dataset.scenes("test_ood")
    base_ids = dataset.in_dist_ids
    ood_ids = dataset.ood_ids

    if annotations:
        class_name = annotations[0].class_name
    elif cfg.novel_class:
        matches = [c for c in ood_ids if dataset.class_name(c) == cfg.novel_class]
        if not matches:
            raise ValueError(f"novel class {cfg.novel_class!r} not among held-out classes "
                             f"{[dataset.class_name(c) for c in ood_ids]}")
        class_name = cfg.novel_class
    else:
        class_name = dataset.class_name(ood_ids[0])

    # ground-truth evaluation only applies when the class exists in the world
    name_matches = [c for c in ood_ids if dataset.class_name(c) == class_name]
    novel_dataset_id = name_matches[0] if name_matches else None

    if annotations is None:
        annotations = oracle_annotate(test, novel_dataset_id, cfg.shots,
                                      class_name=class_name, max_shots=cfg.max_shots)
    if not annotations:
        raise ValueError("no annotations provided")

    shot_refs = {a.image_ref for a in annotations}
    eval_scenes = [s for s in test if s.ref not in shot_refs]
    gt_old = np.stack([_gt_old_only(s.label, ood_ids) for s in eval_scenes])

    protos = make_prototypes(model.n_base, model.t_value)
    pre_preds = np.stack([closeset_map(forward_features(model, 0, s.image), protos)
                          for s in eval_scenes])
    pre_old = iou_report(pre_preds, gt_old, base_ids, []).as_dict()

    records: list[NovelClassRecord] = []
    if cfg.mode == "npm":
        feats = [forward_features(model, 0, a.image) for a in annotations]
        vec = novel_prototype(feats, [a.mask for a in annotations])
        model_id = protos.add_novel(vec)
        records.append(NovelClassRecord(class_id=model_id, mode="npm", class_name=class_name,
                                        shots=len(annotations), prototype=[float(v) for v in vec],
                                        lambda_novel=cfg.lambda_novel))
        new_model = model
        post_preds = np.stack([npm_classify(forward_features(model, 0, s.image), protos,
                                            cfg.lambda_novel) for s in eval_scenes])
    else:
        hyper = PlmHyper(iterations=cfg.plm_iterations, learning_rate=cfg.plm_learning_rate,
                         lambda_vl=cfg.lambda_vl, seed=cfg.seed)
        new_model, record = train_plm_head(model, annotations, hyper)
        records.append(record)
        model_id = record.class_id
        post_preds = np.stack([plm_inference(new_model, s.image) for s in eval_scenes])

    post_old = iou_report(post_preds, gt_old, base_ids, []).as_dict()
    report = {
        "mode": cfg.mode,
        "novel_class": class_name,
        "novel_dataset_id": novel_dataset_id,
        "novel_model_id": model_id,
        "shots": len(annotations),
        "eval_scenes": len(eval_scenes),
        "before": {"old_classes": pre_old},
        "after": {"old_classes": post_old},
        "old_miou_drift": abs((post_old["miou_old"] or 0.0) - (pre_old["miou_old"] or 0.0)),
        "novel_iou": None,
        "records": [r.as_dict() for r in records],
    }
    if novel_dataset_id is not None:
        gt_novel = np.stack([_gt_with_novel(s.label, ood_ids, novel_dataset_id, model_id)
                             for s in eval_scenes])
        with_novel = iou_report(post_preds, gt_novel, base_ids, [model_id])
        names = {c: dataset.class_name(c) for c in base_ids}
        names[model_id] = class_name
        report["after"]["with_novel"] = with_novel.as_dict()
        report["novel_iou"] = with_novel.as_dict()["per_class"].get(str(model_id))
        report["table"] = format_iou_table(with_novel, names)
    return new_model, protos, records, report


def write_report(results_dir, name: str, payload: dict) -> Path:
    path = Path(results_dir)
    path.mkdir(parents=True, exist_ok=True)
    out = path / f"{name}.json"
    out.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return out


def latest_report(results_dir) -> dict | None:
    path = Path(results_dir)
    if not path.exists():
        return None
    reports = sorted(path.glob("*.json"), key=lambda p: p.stat().st_mtime)
    if not reports:
        return None
    return json.loads(reports[-1].read_text())


def save_novel_records(results_dir, records: list[NovelClassRecord]) -> Path:
    path = Path(results_dir)
    path.mkdir(parents=True, exist_ok=True)
    out = path / "novel.json"
    out.write_text(json.dumps([r.as_dict() for r in records], sort_keys=True, indent=2) + "\n")
    return out


def load_novel_records(results_dir) -> list[NovelClassRecord]:
    path = Path(results_dir) / "novel.json"
    if not path.exists():
        return []
    return [NovelClassRecord(**entry) for entry in json.loads(path.read_text())]


def map_payload(maps: dict[str, np.ndarray]) -> dict[str, bytes]:
    """PGM-encode a compose_openset result: ids stay raw, probabilities
    quantize to round(255*p)."""
    payload = {}
    for key, arr in maps.items():
        if key == "eds_sum":
            continue
        if key in ("closeset", "openset"):
            payload[key] = netpbm.pgm_bytes(arr.astype(np.uint8))
        else:
            payload[key] = netpbm.pgm_bytes(prob_to_u8(arr))
    return payload
