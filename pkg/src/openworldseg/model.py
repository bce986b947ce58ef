"""Shared convolutional backbone with an ordered list of 1x1-conv branch
heads, each projecting pixels into a metric space sized to its class count:
head 0 covers the N base classes, head k adds one class and projects to
N+k dimensions. Spatial resolution is preserved end to end.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dmlt
from . import tensor as T
from .losses import IGNORE_ID, LossConfig, hybrid_loss
from .prototypes import make_prototypes
from .tensor import SGD, Tensor


class CheckpointError(ValueError):
    pass


@dataclass
class BackboneConfig:
    input_channels: int = 3
    hidden_channels: int = 16
    num_conv_layers: int = 4

    def __post_init__(self):
        if self.num_conv_layers < 1:
            raise ValueError("need at least one conv layer")
        if self.hidden_channels < 1 or self.input_channels < 1:
            raise ValueError("channel counts must be positive")


@dataclass
class HeadSpec:
    head_index: int
    metric_dim: int
    owned_class_id: int | None = None  # None for the base head


@dataclass
class ClassInfo:
    name: str
    in_dist: bool


@dataclass
class TrainHyper:
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8
    iterations: int = 2000
    lambda_vl: float = 0.01
    seed: int = 0
    hflip: bool = True


@dataclass
class Head:
    spec: HeadSpec
    weight: Tensor
    bias: Tensor


def _init_conv(rng, out_ch: int, in_ch: int, k: int) -> tuple[Tensor, Tensor]:
    fan_in = in_ch * k * k
    bound = float(np.sqrt(1.0 / fan_in))
    w = rng.uniform(-bound, bound, size=(out_ch, in_ch, k, k)).astype(np.float32)
    b = rng.uniform(-bound, bound, size=(out_ch,)).astype(np.float32)
    return Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)


class ModelState:
    FORMAT_VERSION = 1

    def __init__(self, backbone_cfg: BackboneConfig, t_value: float,
                 backbone: list[tuple[Tensor, Tensor]], heads: list[Head],
                 classes: dict[int, ClassInfo], train_log=None, hyper: dict | None = None):
        self.backbone_cfg = backbone_cfg
        self.t_value = float(t_value)
        self.backbone = backbone
        self.heads = heads
        self.classes = classes
        self.train_log: list[dict] = list(train_log or [])
        self.hyper = hyper

    @property
    def n_base(self) -> int:
        return self.heads[0].spec.metric_dim

    def head(self, head_index: int) -> Head:
        for h in self.heads:
            if h.spec.head_index == head_index:
                return h
        raise KeyError(f"model has no head {head_index} (heads 0..{len(self.heads) - 1})")

    def backbone_params(self) -> list[Tensor]:
        return [t for pair in self.backbone for t in pair]

    def head_params(self, head_index: int) -> list[Tensor]:
        h = self.head(head_index)
        return [h.weight, h.bias]

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        named = []
        for i, (w, b) in enumerate(self.backbone):
            named.append((f"backbone.{i}.w", w))
            named.append((f"backbone.{i}.b", b))
        for h in self.heads:
            named.append((f"head.{h.spec.head_index}.w", h.weight))
            named.append((f"head.{h.spec.head_index}.b", h.bias))
        return named

    def tensor_checksums(self) -> dict[str, str]:
        return {name: hashlib.sha256(dmlt.dump_bytes(t.data)).hexdigest()
                for name, t in self.named_tensors()}

    def params_digest(self) -> str:
        acc = hashlib.sha256()
        for name, t in self.named_tensors():
            acc.update(name.encode())
            acc.update(dmlt.dump_bytes(t.data))
        return acc.hexdigest()

    def clone(self) -> "ModelState":
        backbone = [(Tensor(w.data.copy(), requires_grad=True), Tensor(b.data.copy(), requires_grad=True))
                    for w, b in self.backbone]
        heads = [Head(HeadSpec(**asdict(h.spec)),
                      Tensor(h.weight.data.copy(), requires_grad=True),
                      Tensor(h.bias.data.copy(), requires_grad=True))
                 for h in self.heads]
        classes = {cid: ClassInfo(info.name, info.in_dist) for cid, info in self.classes.items()}
        return ModelState(self.backbone_cfg, self.t_value, backbone, heads, classes,
                          train_log=list(self.train_log), hyper=dict(self.hyper) if self.hyper else None)


def build_model(n_classes: int, class_names=None, backbone_cfg: BackboneConfig | None = None,
                t_value: float = 3.0, seed: int = 0) -> ModelState:
    cfg = backbone_cfg or BackboneConfig()
    if n_classes < 2:
        raise ValueError("need at least 2 base classes")
    rng = np.random.default_rng(seed)
    layers = []
    in_ch = cfg.input_channels
    for _ in range(cfg.num_conv_layers):
        layers.append(_init_conv(rng, cfg.hidden_channels, in_ch, 3))
        in_ch = cfg.hidden_channels
    head0 = Head(HeadSpec(head_index=0, metric_dim=n_classes),
                 *_init_conv(rng, n_classes, cfg.hidden_channels, 1))
    names = list(class_names) if class_names else [f"class_{i}" for i in range(n_classes)]
    if len(names) != n_classes:
        raise ValueError(f"{len(names)} names for {n_classes} classes")
    classes = {i: ClassInfo(names[i], True) for i in range(n_classes)}
    return ModelState(cfg, t_value, layers, [head0], classes)


def append_head(model: ModelState, class_name: str, seed: int = 0) -> Head:
    """Attach a freshly initialised head owning the next class id."""
    k = len(model.heads)
    dim = model.n_base + k
    owned = model.n_base + k - 1
    rng = np.random.default_rng(seed)
    head = Head(HeadSpec(head_index=k, metric_dim=dim, owned_class_id=owned),
                *_init_conv(rng, dim, model.backbone_cfg.hidden_channels, 1))
    model.heads.append(head)
    model.classes[owned] = ClassInfo(class_name, False)
    return head


def _as_batch(image) -> np.ndarray:
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return arr.astype(np.float32)


def forward_backbone(model: ModelState, batch: Tensor) -> Tensor:
    x = batch
    for w, b in model.backbone:
        x = T.relu(T.conv2d(x, w, b, padding=1))
    return x


def forward_features(model: ModelState, head_index: int, image) -> Tensor:
    """Per-pixel metric-space features for one image, shape (metric_dim, H, W)."""
    head = model.head(head_index)
    arr = _as_batch(image)
    if arr.shape[1] != model.backbone_cfg.input_channels:
        raise T.ShapeMismatch("forward_features", arr.shape[1:], (model.backbone_cfg.input_channels, "H", "W"))
    if arr.shape[2] < 8 or arr.shape[3] < 8:
        raise ValueError(f"image spatial dims must be >= 8, got {arr.shape[2:]}")
    acts = forward_backbone(model, Tensor(arr))
    feats = T.conv2d(acts, head.weight, head.bias, padding=0)
    return Tensor(feats.data[0])


def _resolve_pairs(dataset):
    pairs = []
    for item in dataset:
        if hasattr(item, "image") and hasattr(item, "label"):
            pairs.append((np.asarray(item.image, dtype=np.float32), np.asarray(item.label)))
        else:
            img, lbl = item
            pairs.append((np.asarray(img, dtype=np.float32), np.asarray(lbl)))
    return pairs


def train_closed_set(model: ModelState, dataset, hyper: TrainHyper | None = None,
                     progress=None) -> list[dict]:
    """Fit the backbone and base head with the hybrid loss; labels must be
    base-class ids or 255 (ignored)."""
    hyper = hyper or TrainHyper()
    pairs = _resolve_pairs(dataset)
    if not pairs:
        raise ValueError("training dataset is empty")
    n = model.n_base
    for _, lbl in pairs:
        bad = (lbl != IGNORE_ID) & (lbl >= n)
        if np.any(bad):
            raise ValueError(f"label id {int(lbl[bad].flat[0])} outside the {n} base classes")

    protos = make_prototypes(n, model.t_value)
    cfg = LossConfig(lambda_vl=hyper.lambda_vl)
    params = model.backbone_params() + model.head_params(0)
    opt = SGD(params, lr=hyper.learning_rate, momentum=hyper.momentum,
              weight_decay=hyper.weight_decay)
    rng = np.random.default_rng(hyper.seed)
    head = model.head(0)

    log = []
    for it in range(hyper.iterations):
        idx = rng.integers(0, len(pairs), size=hyper.batch_size)
        flip = rng.random(hyper.batch_size) < 0.5 if hyper.hflip else np.zeros(hyper.batch_size, bool)
        images = np.stack([pairs[i][0][:, :, ::-1] if f else pairs[i][0] for i, f in zip(idx, flip)])
        labels = np.stack([pairs[i][1][:, ::-1] if f else pairs[i][1] for i, f in zip(idx, flip)])

        acts = forward_backbone(model, Tensor(np.ascontiguousarray(images)))
        feats = T.conv2d(acts, head.weight, head.bias, padding=0)
        loss = hybrid_loss(feats, np.ascontiguousarray(labels), protos, cfg)
        T.backward(loss)
        opt.step()
        opt.zero_grad()
        entry = {"iteration": it, "loss": loss.item()}
        log.append(entry)
        if progress and (it % 100 == 0 or it == hyper.iterations - 1):
            progress(entry)

    model.train_log.extend(log)
    model.hyper = asdict(hyper)
    return log


def save_checkpoint(model: ModelState, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": ModelState.FORMAT_VERSION,
        "t_value": model.t_value,
        "backbone": asdict(model.backbone_cfg),
        "heads": [asdict(h.spec) for h in model.heads],
        "classes": {str(cid): asdict(info) for cid, info in sorted(model.classes.items())},
        "hyper": model.hyper,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    for name, t in model.named_tensors():
        dmlt.write(path / f"{name}.dmlt", t.data)


def load_checkpoint(path) -> ModelState:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise CheckpointError(f"{path}: no manifest.json")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{manifest_path}: invalid JSON ({exc})") from exc
    version = manifest.get("format_version")
    if version != ModelState.FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version} unsupported (expected {ModelState.FORMAT_VERSION})")

    cfg = BackboneConfig(**manifest["backbone"])

    def load_tensor(name, expect_shape=None):
        file = path / f"{name}.dmlt"
        if not file.exists():
            raise CheckpointError(f"{path}: missing parameter file {name}.dmlt")
        try:
            arr = dmlt.read(file)
        except dmlt.DmltError as exc:
            raise CheckpointError(str(exc)) from exc
        if expect_shape is not None and arr.shape != expect_shape:
            raise CheckpointError(f"{file}: shape {arr.shape}, manifest expects {expect_shape}")
        return Tensor(arr, requires_grad=True)

    backbone = []
    in_ch = cfg.input_channels
    for i in range(cfg.num_conv_layers):
        w = load_tensor(f"backbone.{i}.w", (cfg.hidden_channels, in_ch, 3, 3))
        b = load_tensor(f"backbone.{i}.b", (cfg.hidden_channels,))
        backbone.append((w, b))
        in_ch = cfg.hidden_channels

    specs = sorted((HeadSpec(**spec) for spec in manifest["heads"]), key=lambda s: s.head_index)
    if [s.head_index for s in specs] != list(range(len(specs))):
        raise CheckpointError(f"{path}: head indices must be 0..k without gaps")
    heads = []
    for spec in specs:
        w = load_tensor(f"head.{spec.head_index}.w", (spec.metric_dim, cfg.hidden_channels, 1, 1))
        b = load_tensor(f"head.{spec.head_index}.b", (spec.metric_dim,))
        heads.append(Head(spec, w, b))

    classes = {int(cid): ClassInfo(**info) for cid, info in manifest["classes"].items()}
    return ModelState(cfg, manifest["t_value"], backbone, heads, classes,
                      hyper=manifest.get("hyper"))
