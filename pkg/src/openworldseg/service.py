"""Annotation-console HTTP service.

Read endpoints (scene fetch, inference) are safe under concurrency; the
incremental endpoint is the single writer, guarded by a non-blocking lock
(409 when an operation is already in flight). It builds a fresh model
snapshot and swaps it in with one reference assignment, so concurrent
inference always sees a consistent model.

Open-set maps returned by /infer are composed on the quantized byte
domain (mixed_u8 > round(255*lambda)); the browser client applies the same
integer rule, which makes slider recomposition pixel-exact against the
transported 8-bit payloads.
"""
from __future__ import annotations

import base64
import threading
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import netpbm, pipeline
from .incremental import Annotation, NovelClassRecord, write_annotations
from .model import ModelState, load_checkpoint
from .openset import ANOMALY_ID
from .prototypes import PrototypeSet, make_prototypes
from .runconfig import RunConfig
from .shapesworld import Dataset


@dataclass
class Snapshot:
    model: ModelState
    protos: PrototypeSet
    records: list[NovelClassRecord]
    lambda_out: float


class InferRequest(BaseModel):
    split: str = "test_ood"
    index: int = 0
    lambda_out: float | None = Field(default=None, ge=0.0, le=1.0)


class AnnotationUpload(BaseModel):
    image_ref: str
    class_name: str = Field(min_length=1)
    shot_index: int = Field(ge=0)
    mask_pgm_b64: str


class IncrementalRequest(BaseModel):
    mode: str
    class_name: str = Field(min_length=1)
    shot_refs: list[str] | None = None


def _b64(raw: bytes) -> str:
    return base64.b64encode(raw).decode("ascii")


def quantized_threshold(lambda_out: float) -> int:
    """Round half up, exactly like JS Math.round on non-negative input, so
    browser-side recomposition derives the identical byte threshold (e.g.
    255*0.7 is exactly 178.5 in float64: half-to-even would give 178 here
    while every client rounds it to 179)."""
    x = 255.0 * lambda_out
    floor = np.floor(x)
    return int(floor + (1.0 if x - floor >= 0.5 else 0.0))


class ServiceState:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.dataset = Dataset(cfg.dataset_dir)
        model = load_checkpoint(cfg.checkpoint_dir)
        protos = make_prototypes(model.n_base, model.t_value)
        records = pipeline.load_novel_records(cfg.results_dir)
        for record in records:
            if record.mode == "npm" and record.prototype is not None:
                protos.add_novel(record.prototype)
        lam = pipeline.calibrate_threshold(model, protos, self.dataset, cfg)
        self.snapshot = Snapshot(model, protos, records, lam)
        self.write_lock = threading.Lock()
        self.annotations: dict[str, Annotation] = {}

    def legend(self, snap: Snapshot) -> list[dict]:
        entries = [{"id": cid, "name": info.name, "in_dist": info.in_dist, "novel": False}
                   for cid, info in sorted(snap.model.classes.items())]
        for record in snap.records:
            if record.mode == "npm":
                entries.append({"id": record.class_id, "name": record.class_name,
                                "in_dist": False, "novel": True})
            else:
                for e in entries:
                    if e["id"] == record.class_id:
                        e["novel"] = True
        entries.append({"id": ANOMALY_ID, "name": "anomaly", "in_dist": False, "novel": False})
        return entries


def create_app(cfg: RunConfig) -> FastAPI:
    state = ServiceState(cfg)
    app = FastAPI(title="openworldseg annotation service")
    app.state.service = state

    @app.get("/state")
    def get_state():
        snap = state.snapshot
        return {
            "classes": state.legend(snap),
            "heads": len(snap.model.heads),
            "novel_classes": len(snap.records),
            "params_digest": snap.model.params_digest(),
            "lambda_out": snap.lambda_out,
            "busy": state.write_lock.locked(),
            "splits": {s: state.dataset.count(s) for s in ("train", "val", "test_ood")},
            "image_size": state.dataset.manifest["image_size"],
            "max_shots": cfg.max_shots,
        }

    @app.get("/scenes/{split}/{index}")
    def get_scene(split: str, index: int):
        try:
            scene = state.dataset.scene(split, index)
        except (KeyError, IndexError):
            raise HTTPException(status_code=404, detail=f"no scene {split}/{index}")
        rgb8 = np.rint(scene.image * 255.0).astype(np.uint8).transpose(1, 2, 0)
        return {
            "split": split,
            "index": index,
            "image_ppm_b64": _b64(netpbm.ppm_bytes(rgb8)),
            "label_pgm_b64": _b64(netpbm.pgm_bytes(scene.label)),
        }

    @app.post("/infer")
    def infer(req: InferRequest):
        snap = state.snapshot
        try:
            scene = state.dataset.scene(req.split, req.index)
        except (KeyError, IndexError):
            raise HTTPException(status_code=404, detail=f"no scene {req.split}/{req.index}")
        lam = snap.lambda_out if req.lambda_out is None else req.lambda_out
        maps = pipeline.anomaly_maps(snap.model, snap.protos, scene.image, cfg)
        close = pipeline.current_prediction(snap.model, snap.protos, snap.records,
                                            scene.image, cfg)
        mixed_u8 = np.rint(255.0 * maps["mixed"]).astype(np.uint8)
        openset = close.copy()
        openset[mixed_u8 > quantized_threshold(lam)] = ANOMALY_ID
        payload = {
            "closeset": netpbm.pgm_bytes(close),
            "eds": netpbm.pgm_bytes(np.rint(255.0 * maps["eds"]).astype(np.uint8)),
            "mmsp": netpbm.pgm_bytes(np.rint(255.0 * maps["mmsp"]).astype(np.uint8)),
            "mixed": netpbm.pgm_bytes(mixed_u8),
            "openset": netpbm.pgm_bytes(openset),
        }
        return {
            "split": req.split,
            "index": req.index,
            "lambda_out": lam,
            "threshold_u8": quantized_threshold(lam),
            "maps_pgm_b64": {k: _b64(v) for k, v in payload.items()},
            "legend": state.legend(snap),
        }

    @app.post("/annotations")
    def upload_annotation(req: AnnotationUpload):
        try:
            image = state.dataset.resolve_image(req.image_ref)
        except Exception:
            raise HTTPException(status_code=404, detail=f"unknown scene ref {req.image_ref!r}")
        try:
            mask = netpbm.parse_pgm(base64.b64decode(req.mask_pgm_b64), name="mask")
        except (netpbm.PnmError, ValueError) as exc:
            raise HTTPException(status_code=400, detail=f"bad mask payload: {exc}")
        if mask.shape != image.shape[1:]:
            raise HTTPException(status_code=400,
                                detail=f"mask shape {mask.shape} != scene {image.shape[1:]}")
        binary = (mask > 127).astype(np.uint8)
        if not binary.any():
            raise HTTPException(status_code=400, detail="mask is empty")
        ann = Annotation(image=image, mask=binary, class_name=req.class_name,
                         shot_index=req.shot_index, image_ref=req.image_ref)
        ref = f"{req.class_name}/shot_{req.shot_index:03d}"
        state.annotations[ref] = ann
        stored = [k for k in state.annotations if k.startswith(req.class_name + "/")]
        if len(stored) > cfg.max_shots:
            del state.annotations[ref]
            raise HTTPException(status_code=400,
                                detail=f"at most {cfg.max_shots} shots per class")
        ann_dir = Path(cfg.results_dir) / "annotations" / req.class_name
        write_annotations(ann_dir, [ann])
        return {"stored": ref, "count": len(stored), "mask_pgm_b64": _b64(netpbm.pgm_bytes(binary * 255))}

    @app.post("/incremental")
    def incremental(req: IncrementalRequest):
        if req.mode not in ("npm", "plm"):
            raise HTTPException(status_code=400, detail=f"mode must be npm or plm, got {req.mode!r}")
        refs = req.shot_refs
        if refs is None:
            refs = sorted(k for k in state.annotations if k.startswith(req.class_name + "/"))
        annotations = [state.annotations[r] for r in refs if r in state.annotations]
        if not annotations:
            raise HTTPException(status_code=400, detail="no annotations for this class")
        if not state.write_lock.acquire(blocking=False):
            raise HTTPException(status_code=409, detail="an incremental operation is in flight")
        try:
            snap = state.snapshot
            run_cfg = replace(cfg, mode=req.mode, novel_class="", shots=len(annotations))
            if req.mode == "plm" and snap.records and snap.records[-1].mode == "npm":
                raise HTTPException(status_code=400,
                                    detail="model already carries npm classes; modes are exclusive")
            new_model, protos, new_records, report = pipeline.incremental_step(
                snap.model, state.dataset, run_cfg, annotations)
            records = snap.records + new_records
            if req.mode == "npm":
                # rebuild the prototype set so earlier novel classes survive
                protos = make_prototypes(new_model.n_base, new_model.t_value)
                for record in records:
                    if record.mode == "npm" and record.prototype is not None:
                        protos.add_novel(record.prototype)
                pipeline.save_novel_records(cfg.results_dir, records)
            state.snapshot = Snapshot(new_model, protos, records, snap.lambda_out)
            pipeline.write_report(cfg.results_dir, "incremental", {
                "command": "incremental", "config": run_cfg.as_dict(), "result": report})
            return report
        finally:
            state.write_lock.release()

    @app.get("/reports/latest")
    def reports_latest():
        report = pipeline.latest_report(cfg.results_dir)
        if report is None:
            raise HTTPException(status_code=404, detail="no reports yet")
        return report

    frontend_dist = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    if frontend_dist.exists():
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=frontend_dist, html=True), name="console")

    return app
