"""Few-shot class addition without touching old knowledge.

Two mechanisms: train one extra branch head against pseudo labels composed
from the existing heads plus the new binary annotation (everything else
frozen), or register the masked mean feature as a free prototype and
classify by a two-criterion distance rule with no training at all.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import netpbm
from . import tensor as T
from .losses import LossConfig, hybrid_loss
from .model import (ClassInfo, Head, HeadSpec, ModelState, _as_batch, _init_conv,
                    forward_backbone, forward_features)
from .prototypes import PrototypeSet, closeset_map, make_prototypes, squared_distances
from .tensor import SGD, ShapeMismatch, Tensor


@dataclass
class Annotation:
    """One annotated shot: the image, a strictly binary novel-class mask,
    and bookkeeping for the interchange format."""

    image: np.ndarray  # (3, H, W) float in [0, 1]
    mask: np.ndarray  # (H, W), values in {0, 1}
    class_name: str
    shot_index: int
    image_ref: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.mask = np.asarray(self.mask)
        if self.mask.shape != self.image.shape[1:]:
            raise ShapeMismatch("annotation mask", self.mask.shape, self.image.shape[1:])
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValueError("annotation mask must be strictly binary")
        self.mask = self.mask.astype(np.uint8)


@dataclass
class NovelClassRecord:
    class_id: int
    mode: str  # "plm" | "npm"
    class_name: str
    shots: int
    prototype: list[float] | None = None  # npm only
    lambda_novel: float | None = None  # npm only
    head_index: int | None = None  # plm only

    def as_dict(self) -> dict:
        return {
            "class_id": self.class_id,
            "mode": self.mode,
            "class_name": self.class_name,
            "shots": self.shots,
            "prototype": self.prototype,
            "lambda_novel": self.lambda_novel,
            "head_index": self.head_index,
        }


@dataclass
class PlmHyper:
    iterations: int = 500
    learning_rate: float | None = None  # None: 0.01 for multi-shot, 0.001 for 1-shot
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lambda_vl: float = 0.01
    seed: int = 0

    def resolved_lr(self, shots: int) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return 0.01 if shots > 1 else 0.001


def binary_head_map(model: ModelState, head_index: int, image) -> np.ndarray:
    """1 where head k's own metric space predicts its owned class, else 0."""
    if head_index == 0:
        raise ValueError("head 0 is the base head and has no binary map")
    head = model.head(head_index)  # KeyError if absent
    feats = forward_features(model, head_index, image)
    protos = make_prototypes(head.spec.metric_dim, model.t_value)
    seg = closeset_map(feats, protos)
    return (seg == head.spec.owned_class_id).astype(np.uint8)


def pseudo_label_generate(m_in: np.ndarray, binary_maps, annotation_mask: np.ndarray,
                          n_base: int) -> np.ndarray:
    """Compose the full pseudo label: base prediction, overwritten head by
    head in order, with the fresh annotation winning every overlap."""
    m_in = np.asarray(m_in)
    annotation_mask = np.asarray(annotation_mask)
    binary_maps = list(binary_maps)
    if np.any(m_in >= n_base):
        raise ValueError(f"base prediction contains ids >= {n_base}")
    out = m_in.astype(np.uint8).copy()
    for t, bm in enumerate(binary_maps, start=1):
        bm = np.asarray(bm)
        if bm.shape != out.shape:
            raise ShapeMismatch("pseudo_label_generate", bm.shape, out.shape)
        out[bm == 1] = n_base + t - 1
    if annotation_mask.shape != out.shape:
        raise ShapeMismatch("pseudo_label_generate", annotation_mask.shape, out.shape)
    out[annotation_mask == 1] = n_base + len(binary_maps)
    return out


def plm_inference(model: ModelState, image) -> np.ndarray:
    """Base close-set map overwritten by each trained head's binary map in
    head order (later heads win overlaps)."""
    protos = make_prototypes(model.n_base, model.t_value)
    out = closeset_map(forward_features(model, 0, image), protos)
    for h in model.heads[1:]:
        bm = binary_head_map(model, h.spec.head_index, image)
        out = out.copy()
        out[bm == 1] = h.spec.owned_class_id
    return out


def train_plm_head(model: ModelState, annotations: list[Annotation],
                   hyper: PlmHyper | None = None) -> tuple[ModelState, NovelClassRecord]:
    """Return a new model with one extra trained head; every pre-existing
    parameter is bitwise untouched."""
    if not annotations:
        raise ValueError("need at least one annotated shot")
    names = {a.class_name for a in annotations}
    if len(names) > 1:
        raise ValueError(f"annotations mix classes: {sorted(names)}")
    hyper = hyper or PlmHyper()
    shots = len(annotations)

    new_model = model.clone()
    k = len(new_model.heads)
    n = new_model.n_base
    new_dim = n + k
    owned = n + k - 1

    # pseudo labels come from the frozen old heads, so compute them once
    pseudo = []
    acts_cache = []
    for ann in annotations:
        m_in = closeset_map(forward_features(model, 0, ann.image),
                            make_prototypes(n, model.t_value))
        maps = [binary_head_map(model, h.spec.head_index, ann.image) for h in model.heads[1:]]
        pseudo.append(pseudo_label_generate(m_in, maps, ann.mask, n))
        acts = forward_backbone(model, Tensor(_as_batch(ann.image)))
        acts_cache.append(acts.data[0])

    rng = np.random.default_rng(hyper.seed)
    head = Head(HeadSpec(head_index=k, metric_dim=new_dim, owned_class_id=owned),
                *_init_conv(rng, new_dim, new_model.backbone_cfg.hidden_channels, 1))

    protos = make_prototypes(new_dim, new_model.t_value)
    cfg = LossConfig(lambda_vl=hyper.lambda_vl)
    opt = SGD([head.weight, head.bias], lr=hyper.resolved_lr(shots),
              momentum=hyper.momentum, weight_decay=hyper.weight_decay)
    batch_acts = Tensor(np.stack(acts_cache))  # constant: backbone frozen
    batch_labels = np.stack(pseudo)
    log = []
    for it in range(hyper.iterations):
        feats = T.conv2d(batch_acts, head.weight, head.bias, padding=0)
        loss = hybrid_loss(feats, batch_labels, protos, cfg)
        T.backward(loss)
        opt.step()
        opt.zero_grad()
        log.append({"iteration": it, "loss": loss.item()})

    new_model.heads.append(head)
    new_model.classes[owned] = ClassInfo(annotations[0].class_name, False)
    new_model.train_log.extend([{"phase": f"plm_head_{k}", **entry} for entry in log[-1:]])
    record = NovelClassRecord(class_id=owned, mode="plm", class_name=annotations[0].class_name,
                              shots=shots, head_index=k)
    return new_model, record


def novel_prototype(features_list, masks) -> np.ndarray:
    """Masked mean of base-head features pooled over all shots jointly, so
    shots with more annotated pixels weigh more."""
    num = None
    denom = 0.0
    for feats, mask in zip(features_list, masks):
        f = feats.data if isinstance(feats, Tensor) else np.asarray(feats)
        f = f.astype(np.float64)
        m = np.asarray(mask).astype(np.float64)
        if m.shape != f.shape[1:]:
            raise ShapeMismatch("novel_prototype", m.shape, f.shape[1:])
        contrib = (f * m[None]).sum(axis=(1, 2))
        num = contrib if num is None else num + contrib
        denom += m.sum()
    if num is None or denom == 0.0:
        raise ValueError("no annotated pixels across the provided shots")
    return num / denom


def npm_classify(features, protos: PrototypeSet, lambda_novel) -> np.ndarray:
    """Label a pixel with a novel class only when it is strictly within
    lambda of that prototype and strictly nearer to it than to every other
    prototype; otherwise keep the base close-set label. Multiple passing
    novels resolve to the nearest."""
    n_novel = len(protos.novel_prototypes)
    if n_novel == 0:
        raise ValueError("no novel prototypes registered")
    lam = np.asarray(lambda_novel, dtype=np.float64).reshape(-1)
    if lam.size == 1:
        lam = np.repeat(lam, n_novel)
    if lam.size != n_novel:
        raise ValueError(f"{lam.size} thresholds for {n_novel} novel prototypes")

    d = squared_distances(features, protos, include_novel=True)
    base_count = protos.base_count
    out = np.argmin(d[:base_count], axis=0).astype(np.uint8)

    candidates = np.full((n_novel,) + out.shape, np.inf)
    for i in range(n_novel):
        dv = d[base_count + i]
        others = np.delete(d, base_count + i, axis=0).min(axis=0)
        passing = (dv < lam[i]) & (dv < others)
        candidates[i][passing] = dv[passing]

    any_pass = np.isfinite(candidates).any(axis=0)
    winner = np.argmin(candidates, axis=0)
    out[any_pass] = (base_count + winner[any_pass]).astype(np.uint8)
    return out


# --- annotation interchange format ----------------------------------------

def write_annotations(root, annotations: list[Annotation]):
    """One directory per shot: binary mask as PGM plus a JSON sidecar."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for ann in annotations:
        shot_dir = root / f"shot_{ann.shot_index:03d}"
        shot_dir.mkdir(parents=True, exist_ok=True)
        netpbm.write_pgm(shot_dir / "mask.pgm", ann.mask * 255)
        meta = {"class_name": ann.class_name, "shot_index": ann.shot_index,
                "image_ref": ann.image_ref}
        (shot_dir / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")


def read_annotations(root, resolve_image) -> list[Annotation]:
    """Load every shot under root; resolve_image maps an image_ref to a
    (3, H, W) float image."""
    root = Path(root)
    shots = sorted(p for p in root.iterdir() if p.is_dir() and p.name.startswith("shot_"))
    if not shots:
        raise ValueError(f"{root}: no shot directories")
    annotations = []
    for shot_dir in shots:
        meta = json.loads((shot_dir / "meta.json").read_text())
        mask = (netpbm.read_pgm(shot_dir / "mask.pgm") > 127).astype(np.uint8)
        image = resolve_image(meta["image_ref"])
        annotations.append(Annotation(image=image, mask=mask, class_name=meta["class_name"],
                                      shot_index=meta["shot_index"], image_ref=meta["image_ref"]))
    return annotations
