"""Deterministic synthetic segmentation scenes: a textured background plus
colored geometric shapes. Four shape classes (plus background) are
in-distribution; star and cross are geometrically distinct kinds that only
appear in the held-out split, standing in for unknown objects.

Scene content is a pure function of (master seed, split, index). Images
are quantized to 8 bits at generation time so in-memory scenes equal their
on-disk round trip exactly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import netpbm
from .incremental import Annotation

SPLITS = ("train", "val", "test_ood")
_SPLIT_CODE = {"train": 0, "val": 1, "test_ood": 2}
IGNORE_ID = 255


@dataclass(frozen=True)
class ShapeClass:
    class_id: int
    name: str
    kind: str
    base_rgb: tuple[float, float, float]
    in_dist: bool


@dataclass
class WorldSpec:
    image_size: int = 32
    in_dist: list[ShapeClass] = field(default_factory=list)
    ood: list[ShapeClass] = field(default_factory=list)
    shapes_min: int = 2
    shapes_max: int = 3
    radius_min: int = 4
    radius_max: int = 8
    noise: float = 0.05
    color_jitter: float = 0.06
    boundary_ignore: int = 1  # class-boundary ring marked 255, in pixels
    master_seed: int = 42

    def __post_init__(self):
        if self.image_size < 16:
            raise ValueError(f"image size must be >= 16, got {self.image_size}")
        if not self.in_dist:
            self.in_dist = _DEFAULT_IN_DIST
        if not self.ood:
            self.ood = _DEFAULT_OOD
        seen = set()
        for c in self.in_dist + self.ood:
            key = (c.kind, tuple(round(v, 3) for v in c.base_rgb))
            if key in seen:
                raise ValueError(f"duplicate class descriptor kind={c.kind} rgb={c.base_rgb}")
            seen.add(key)

    @property
    def in_dist_ids(self) -> list[int]:
        return [0] + [c.class_id for c in self.in_dist]

    @property
    def ood_ids(self) -> list[int]:
        return [c.class_id for c in self.ood]

    @property
    def n_base(self) -> int:
        return 1 + len(self.in_dist)

    def registry(self) -> dict[int, dict]:
        reg = {0: {"name": "background", "kind": "background", "in_dist": True}}
        for c in self.in_dist + self.ood:
            reg[c.class_id] = {"name": c.name, "kind": c.kind, "in_dist": c.in_dist}
        return reg

    def class_name(self, class_id: int) -> str:
        return self.registry()[class_id]["name"]


_DEFAULT_IN_DIST = [
    ShapeClass(1, "circle", "circle", (0.85, 0.20, 0.20), True),
    ShapeClass(2, "square", "square", (0.20, 0.75, 0.25), True),
    ShapeClass(3, "triangle", "triangle", (0.25, 0.35, 0.85), True),
    ShapeClass(4, "diamond", "diamond", (0.90, 0.80, 0.20), True),
]
# OOD appearance reuses familiar color primitives while the shapes stay
# novel kinds: the star is a muted blend of the red and yellow classes (maps
# mid metric space), the cross wears the triangle class's blue at nearly
# full strength (a confident-misclassification trap: its thin arms dilute
# the response enough to stand out by distance sum but not by softmax).
_DEFAULT_OOD = [
    ShapeClass(5, "star", "star", (0.65, 0.42, 0.18), False),
    ShapeClass(6, "cross", "cross", (0.24, 0.34, 0.82), False),
]

# star drawn more often than cross in held-out scenes; unknown objects are
# not uniformly frequent in the wild
_OOD_KIND_ODDS = (0.6, 0.4)


@dataclass
class SceneSample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    label: np.ndarray  # (H, W) uint8
    split: str
    index: int
    seed: list[int]

    @property
    def ref(self) -> str:
        return f"{self.split}/{self.index}"


def _polygon_mask(xx, yy, verts) -> np.ndarray:
    inside = np.zeros(xx.shape, dtype=bool)
    n = len(verts)
    for i in range(n):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % n]
        crosses_row = (y1 > yy) != (y2 > yy)
        denom = y2 - y1
        if denom == 0:
            continue
        x_at = (x2 - x1) * (yy - y1) / denom + x1
        inside ^= crosses_row & (xx < x_at)
    return inside


def _star_vertices(cx, cy, r):
    pts = []
    for i in range(10):
        ang = -np.pi / 2 + i * np.pi / 5
        rad = r if i % 2 == 0 else 0.45 * r
        pts.append((cx + rad * np.cos(ang), cy + rad * np.sin(ang)))
    return pts


def _triangle_vertices(cx, cy, r):
    return [(cx + r * np.cos(a), cy + r * np.sin(a))
            for a in (-np.pi / 2, -np.pi / 2 + 2 * np.pi / 3, -np.pi / 2 + 4 * np.pi / 3)]


# per-kind radial extent, also used to keep placements inside the frame
_KIND_EXTENT = {"circle": 1.0, "square": 0.85, "triangle": 1.45, "diamond": 1.3,
                "star": 1.2, "cross": 1.1}


def _shape_mask(kind: str, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    if kind == "circle":
        return dx * dx + dy * dy <= r * r
    if kind == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= 0.85 * r
    if kind == "triangle":
        return _polygon_mask(xx, yy, _triangle_vertices(cx, cy, 1.45 * r))
    if kind == "diamond":
        return np.abs(dx) + np.abs(dy) <= 1.3 * r
    if kind == "star":
        return _polygon_mask(xx, yy, _star_vertices(cx, cy, 1.2 * r))
    if kind == "cross":
        arm = 0.3 * r
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= 1.1 * r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= 1.1 * r))
    raise ValueError(f"unknown shape kind {kind!r}")


def _paint_background(rng, size: int, noise: float) -> np.ndarray:
    base = rng.uniform(0.30, 0.48) + rng.uniform(-0.04, 0.04, size=3)
    img = np.tile(base.reshape(3, 1, 1), (1, size, size))
    # gentle linear shading in a random direction for texture
    theta = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / max(size - 1, 1)
    ramp = (np.cos(theta) * xx + np.sin(theta) * yy) * rng.uniform(0.03, 0.10)
    img += ramp[None]
    img += rng.uniform(-noise, noise, size=(3, size, size))
    return img


def _place_shape(rng, spec: WorldSpec, cls: ShapeClass, image, label):
    size = spec.image_size
    r = int(rng.integers(spec.radius_min, spec.radius_max + 1))
    extent = int(np.ceil(_KIND_EXTENT.get(cls.kind, 1.0) * r))
    margin = min(extent + 1, size // 2 - 1)
    cx = float(rng.integers(margin, size - margin))
    cy = float(rng.integers(margin, size - margin))
    color = np.clip(np.asarray(cls.base_rgb) + rng.uniform(-spec.color_jitter, spec.color_jitter, 3), 0, 1)
    mask = _shape_mask(cls.kind, size, cx, cy, r)
    image[:, mask] = color[:, None]
    label[mask] = cls.class_id


def _boundary_ring(label: np.ndarray, width: int) -> np.ndarray:
    """Pixels within `width` of a class boundary (8-connected)."""
    ring = np.zeros(label.shape, dtype=bool)
    padded = np.pad(label, width, mode="edge")
    h, w = label.shape
    for dy in range(-width, width + 1):
        for dx in range(-width, width + 1):
            if dy == 0 and dx == 0:
                continue
            shifted = padded[width + dy : width + dy + h, width + dx : width + dx + w]
            ring |= shifted != label
    return ring


def generate_one(spec: WorldSpec, split: str, index: int) -> SceneSample:
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
    seed = [spec.master_seed, _SPLIT_CODE[split], index]
    rng = np.random.default_rng(seed)
    size = spec.image_size
    image = _paint_background(rng, size, spec.noise)
    label = np.zeros((size, size), dtype=np.uint8)

    if split == "test_ood":
        n_in = int(rng.integers(1, 3))
        n_ood = int(rng.integers(1, 3))
        picks = [spec.in_dist[int(rng.integers(len(spec.in_dist)))] for _ in range(n_in)]
        odds = np.asarray(_OOD_KIND_ODDS[: len(spec.ood)], dtype=np.float64)
        odds = odds / odds.sum()
        picks += [spec.ood[int(rng.choice(len(spec.ood), p=odds))] for _ in range(n_ood)]
    else:
        n = int(rng.integers(spec.shapes_min, spec.shapes_max + 1))
        picks = [spec.in_dist[int(rng.integers(len(spec.in_dist)))] for _ in range(n)]

    for cls in picks:
        _place_shape(rng, spec, cls, image, label)

    image += rng.uniform(-spec.noise, spec.noise, size=(3, size, size))
    image = np.clip(image, 0.0, 1.0)
    # quantize now so in-memory scenes match their disk round trip exactly
    image = (np.rint(image * 255.0) / 255.0).astype(np.float32)

    if spec.boundary_ignore > 0:
        # class transitions are optically blurred over the conv receptive
        # field; mark a thin void ring there like real benchmarks do
        label[_boundary_ring(label, spec.boundary_ignore)] = IGNORE_ID

    if split != "test_ood":
        ood_ids = set(spec.ood_ids)
        bad = np.isin(label, list(ood_ids))
        label[bad] = IGNORE_ID  # never reached by construction; protocol guard

    return SceneSample(image=image, label=label, split=split, index=index, seed=seed)


def generate(spec: WorldSpec, split: str, count: int) -> list[SceneSample]:
    if count < 1:
        raise ValueError("count must be >= 1")
    return [generate_one(spec, split, i) for i in range(count)]


def oracle_annotate(samples, novel_class_id: int, shots: int, class_name: str | None = None,
                    max_shots: int = 5) -> list[Annotation]:
    """Ground-truth labeler: binary masks equal to the class's true mask."""
    if shots < 1:
        raise ValueError("shots must be >= 1")
    if shots > max_shots:
        raise ValueError(f"requested {shots} shots, limit is {max_shots}")
    eligible = [s for s in samples if np.any(s.label == novel_class_id)]
    if len(eligible) < shots:
        raise ValueError(f"class {novel_class_id} appears in only {len(eligible)} scenes, "
                         f"cannot provide {shots} shots")
    name = class_name or f"class_{novel_class_id}"
    annotations = []
    for i, sample in enumerate(eligible[:shots]):
        mask = (sample.label == novel_class_id).astype(np.uint8)
        annotations.append(Annotation(image=sample.image, mask=mask, class_name=name,
                                      shot_index=i, image_ref=sample.ref))
    return annotations


# --- dataset directory ------------------------------------------------------

def write_dataset(spec: WorldSpec, root, counts: dict[str, int]) -> dict:
    root = Path(root)
    manifest = {
        "format_version": 1,
        "image_size": spec.image_size,
        "noise": spec.noise,
        "master_seed": spec.master_seed,
        "classes": [dict(class_id=cid, **info) for cid, info in sorted(spec.registry().items())],
        "in_dist_ids": spec.in_dist_ids,
        "ood_ids": spec.ood_ids,
        "splits": {},
    }
    for split, count in counts.items():
        (root / split).mkdir(parents=True, exist_ok=True)
        files = []
        for sample in generate(spec, split, count):
            img_rel = f"{split}/img_{sample.index:05d}.ppm"
            lbl_rel = f"{split}/lbl_{sample.index:05d}.pgm"
            rgb8 = np.rint(sample.image * 255.0).astype(np.uint8).transpose(1, 2, 0)
            netpbm.write_ppm(root / img_rel, rgb8)
            netpbm.write_pgm(root / lbl_rel, sample.label)
            files.append({"index": sample.index, "image": img_rel, "label": lbl_rel,
                          "seed": sample.seed})
        manifest["splits"][split] = {"count": count, "files": files}
    (root / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return manifest


class Dataset:
    """Read-side view over a dataset directory written by write_dataset."""

    def __init__(self, root):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise FileNotFoundError(f"{self.root}: no manifest.json (not a dataset directory)")
        self.manifest = json.loads(manifest_path.read_text())

    @property
    def in_dist_ids(self) -> list[int]:
        return list(self.manifest["in_dist_ids"])

    @property
    def ood_ids(self) -> list[int]:
        return list(self.manifest["ood_ids"])

    def class_name(self, class_id: int) -> str:
        for entry in self.manifest["classes"]:
            if entry["class_id"] == class_id:
                return entry["name"]
        raise KeyError(f"class {class_id} not in manifest")

    def count(self, split: str) -> int:
        return self.manifest["splits"][split]["count"]

    def scene(self, split: str, index: int) -> SceneSample:
        entry = self.manifest["splits"][split]["files"][index]
        rgb = netpbm.read_ppm(self.root / entry["image"])
        label = netpbm.read_pgm(self.root / entry["label"])
        image = (rgb.astype(np.float32) / 255.0).transpose(2, 0, 1)
        return SceneSample(image=image, label=label, split=split, index=index,
                           seed=list(entry["seed"]))

    def scenes(self, split: str) -> list[SceneSample]:
        return [self.scene(split, i) for i in range(self.count(split))]

    def resolve_image(self, image_ref: str) -> np.ndarray:
        split, index = image_ref.rsplit("/", 1)
        return self.scene(split, int(index)).image
