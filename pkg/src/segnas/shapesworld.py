"""ShapesWorld: a deterministic procedural segmentation task.

Images are (3, H, W) float64 in [0, 1]; labels are per-pixel class ids:

    0 background, 1 circle, 2 rectangle, 3 stripe, 4 triangle, 5 noise blob

Each sample drops 2..6 shapes with class-correlated colors (plus jitter),
painter's-order occlusion, and sigma=0.02 pixel noise.  ``generate`` is a
pure function of (spec, split, index): the rng is seeded from those three
values alone, so regeneration is bit-identical on any host with IEEE-754
doubles.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

CLASS_NAMES = ("background", "circle", "rectangle", "stripe", "triangle", "blob")
SPLITS = ("train", "val", "test")

# base RGB per class; shapes jitter around these
_CLASS_COLORS = np.array([
    [0.35, 0.35, 0.35],  # background
    [0.85, 0.25, 0.20],  # circle
    [0.20, 0.75, 0.30],  # rectangle
    [0.20, 0.35, 0.85],  # stripe
    [0.90, 0.80, 0.20],  # triangle
    [0.80, 0.25, 0.80],  # blob
])


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    height: int = 64
    width: int = 128
    classes: int = 6
    train: int = 48
    val: int = 12
    test: int = 12
    seed: int = 0
    noise_sigma: float = 0.02
    min_shapes: int = 2
    max_shapes: int = 6

    def validate(self) -> None:
        if self.height < 8 or self.width < 8:
            raise DatasetError(f"dataset height/width too small: {self.height}x{self.width}")
        if self.classes != len(CLASS_NAMES):
            raise DatasetError(f"dataset classes must be {len(CLASS_NAMES)}, got {self.classes}")
        for name in ("train", "val", "test"):
            if getattr(self, name) < 0:
                raise DatasetError(f"dataset split count {name} must be >= 0")
        if not 0 <= self.min_shapes <= self.max_shapes:
            raise DatasetError(f"bad shape count range [{self.min_shapes}, {self.max_shapes}]")
        if self.noise_sigma < 0:
            raise DatasetError("dataset noise_sigma must be >= 0")

    def count(self, split: str) -> int:
        if split not in SPLITS:
            raise DatasetError(f"unknown split {split!r}")
        return getattr(self, split)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float64 in [0, 1]
    labels: np.ndarray  # (H, W) int64


def _sample_rng(spec: DatasetSpec, split: str, index: int) -> np.random.Generator:
    split_id = SPLITS.index(split)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, split_id, index])))


def _draw_shape(rng, cls, h, w):
    """Boolean mask for one shape instance of class `cls`."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    scale = min(h, w)
    if cls == 1:  # circle
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(0.20, 0.50) * scale
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if cls == 2:  # rectangle
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        hh = rng.uniform(0.16, 0.40) * scale
        hw = rng.uniform(0.19, 0.52) * scale
        return (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)
    if cls == 3:  # stripe: a band of random orientation crossing the image
        theta = rng.uniform(0, np.pi)
        ny, nx = np.sin(theta), np.cos(theta)
        offset = rng.uniform(0.2, 0.8) * (ny * h + nx * w)
        thickness = rng.uniform(0.07, 0.15) * scale
        return np.abs(yy * ny + xx * nx - offset) <= thickness
    if cls == 4:  # triangle: three well-spread vertices around a center
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        radius = rng.uniform(0.45, 0.95) * scale * 0.5
        angles = rng.uniform(0, 2 * np.pi) + np.array([0.0, 2.1, 4.2]) + rng.uniform(-0.4, 0.4, 3)
        vy = cy + radius * np.sin(angles)
        vx = cx + radius * np.cos(angles)
        mask = np.ones((h, w), dtype=bool)
        for i in range(3):
            ay, ax = vy[i], vx[i]
            by, bx = vy[(i + 1) % 3], vx[(i + 1) % 3]
            oy, ox = vy[(i + 2) % 3], vx[(i + 2) % 3]
            side = (bx - ax) * (yy - ay) - (by - ay) * (xx - ax)
            ref = (bx - ax) * (oy - ay) - (by - ay) * (ox - ax)
            mask &= side * ref >= 0
        return mask
    if cls == 5:  # blob: disk intersected with thresholded coarse noise
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(0.22, 0.46) * scale
        coarse = rng.random((8, 8))
        noise = coarse[np.minimum((yy / h * 8).astype(int), 7), np.minimum((xx / w * 8).astype(int), 7)]
        return ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r) & (noise > 0.30)
    raise DatasetError(f"no drawing rule for class {cls}")


def generate(spec: DatasetSpec, split: str, index: int) -> Sample:
    """Pure sample constructor; raises on an out-of-range index."""
    spec.validate()
    if not 0 <= index < spec.count(split):
        raise DatasetError(f"index {index} out of range for split {split!r} of {spec.count(split)}")
    rng = _sample_rng(spec, split, index)
    h, w = spec.height, spec.width

    base = np.clip(_CLASS_COLORS[0] + rng.uniform(-0.10, 0.10, 3), 0.0, 1.0)
    image = np.broadcast_to(base[:, None, None], (3, h, w)).copy()
    labels = np.zeros((h, w), dtype=np.int64)

    n_shapes = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    for _ in range(n_shapes):
        cls = int(rng.integers(1, spec.classes))
        mask = _draw_shape(rng, cls, h, w)
        color = np.clip(_CLASS_COLORS[cls] + rng.uniform(-0.15, 0.15, 3), 0.0, 1.0)
        image[:, mask] = color[:, None]
        labels[mask] = cls

    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, image.shape)
    return Sample(np.clip(image, 0.0, 1.0), labels)


def augment(sample: Sample, rng: np.random.Generator, force: bool | None = None) -> Sample:
    """Horizontal flip with p=0.5 (labels flipped consistently)."""
    flip = bool(rng.random() < 0.5) if force is None else bool(force)
    if not flip:
        return Sample(sample.image.copy(), sample.labels.copy())
    return Sample(sample.image[:, :, ::-1].copy(), sample.labels[:, ::-1].copy())


def load_batch(spec: DatasetSpec, split: str, indices) -> tuple[np.ndarray, np.ndarray]:
    samples = [generate(spec, split, int(i)) for i in indices]
    return (np.stack([s.image for s in samples]), np.stack([s.labels for s in samples]))


# --------------------------------------------------------------------------
# Metrics


def iou_counts(pred: np.ndarray, truth: np.ndarray, classes: int):
    """Per-class intersection and union pixel counts."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise DatasetError(f"miou shape mismatch: {pred.shape} vs {truth.shape}")
    if pred.size and (pred.max() >= classes or truth.max() >= classes or pred.min() < 0 or truth.min() < 0):
        raise DatasetError("miou class id out of range")
    inter = np.zeros(classes, dtype=np.int64)
    union = np.zeros(classes, dtype=np.int64)
    for c in range(classes):
        p = pred == c
        t = truth == c
        inter[c] = np.count_nonzero(p & t)
        union[c] = np.count_nonzero(p | t)
    return inter, union


def miou_from_counts(inter: np.ndarray, union: np.ndarray) -> float:
    present = union > 0
    if not present.any():
        raise DatasetError("miou undefined: no class present")
    return float(np.mean(inter[present] / union[present]))


def miou(pred: np.ndarray, truth: np.ndarray, classes: int) -> float:
    """Mean IoU over the classes present in pred or truth."""
    inter, union = iou_counts(pred, truth, classes)
    return miou_from_counts(inter, union)


# --------------------------------------------------------------------------
# Optional dump/load (raw little-endian binaries plus a JSON manifest)

DUMP_VERSION = 1


def dump_dataset(spec: DatasetSpec, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": DUMP_VERSION,
        "spec": spec.to_dict(),
        "image_dtype": "<f8",
        "label_dtype": "u1",
        "layout": "images: (count, 3, H, W) row-major; labels: (count, H, W)",
        "files": {},
    }
    for split in SPLITS:
        n = spec.count(split)
        images, labels = load_batch(spec, split, range(n)) if n else (
            np.zeros((0, 3, spec.height, spec.width)), np.zeros((0, spec.height, spec.width), np.int64))
        (out / f"{split}_images.bin").write_bytes(images.astype("<f8").tobytes())
        (out / f"{split}_labels.bin").write_bytes(labels.astype("u1").tobytes())
        manifest["files"][split] = {"images": f"{split}_images.bin", "labels": f"{split}_labels.bin", "count": n}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out / "manifest.json"


def load_dataset(dump_dir):
    dump_dir = Path(dump_dir)
    manifest = json.loads((dump_dir / "manifest.json").read_text())
    if manifest.get("version") != DUMP_VERSION:
        raise DatasetError(f"unsupported dataset dump version {manifest.get('version')!r}")
    spec = DatasetSpec(**manifest["spec"])
    data = {}
    for split in SPLITS:
        entry = manifest["files"][split]
        n = entry["count"]
        images = np.frombuffer((dump_dir / entry["images"]).read_bytes(), dtype="<f8").reshape(
            n, 3, spec.height, spec.width).astype(np.float64)
        labels = np.frombuffer((dump_dir / entry["labels"]).read_bytes(), dtype="u1").reshape(
            n, spec.height, spec.width).astype(np.int64)
        data[split] = (images, labels)
    return spec, data
