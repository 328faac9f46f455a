"""Synthetic quadrant-pattern dataset, manifest I/O and the fixture head.

Each image is low-amplitude noise with one class-specific stripe patch placed
at a random position inside a random quadrant. The evidence box is the patch
rectangle.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .backbone import BackboneConfig, backbone_forward
from .head import HeadParams
from .tensor import Tensor, write_tensor

IMAGE_SIZE = 32
PATCH_SIZE = 12
NOISE_AMPLITUDE = 0.15
PATTERN_CONTRAST = 0.85
STRIPE_PERIOD = 4.0

MANIFEST_NAME = "manifest.csv"
ANNOTATIONS_NAME = "annotations.txt"


@dataclass(frozen=True)
class Box:
    """Half-open pixel rectangle [x0, x1) x [y0, y1)."""
    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate box {self}")

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def as_tuple(self):
        return (self.x0, self.y0, self.x1, self.y1)


@dataclass(frozen=True, eq=False)
class SynthImage:
    pixels: np.ndarray  # 1 x H x W float32 in [0, 1]
    label: int
    evidence_box: Box


@dataclass(frozen=True)
class ManifestRecord:
    id: int
    label: int
    feature_path: Path
    img_w: int
    img_h: int
    box: Box


def class_pattern(label: int, n_classes: int, size: int = PATCH_SIZE) -> np.ndarray:
    """Binary stripes whose orientation encodes the class (angle = pi * label / n_classes)."""
    theta = np.pi * label / n_classes
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    phase = 2.0 * np.pi * (x * np.cos(theta) + y * np.sin(theta)) / STRIPE_PERIOD
    return (np.sin(phase + 0.7) > 0).astype(np.float64)


def synth_image(label: int, n_classes: int, rng: np.random.Generator,
                size: int = IMAGE_SIZE, patch: int = PATCH_SIZE) -> SynthImage:
    img = NOISE_AMPLITUDE * rng.random((size, size))
    half = size // 2
    quadrant = int(rng.integers(4))
    qx, qy = (quadrant % 2) * half, (quadrant // 2) * half
    # A patch wider than the quadrant would spill over; clamp the offset range.
    x0 = qx + int(rng.integers(0, max(half - patch, 0) + 1))
    y0 = qy + int(rng.integers(0, max(half - patch, 0) + 1))
    x0, y0 = min(x0, size - patch), min(y0, size - patch)
    region = img[y0:y0 + patch, x0:x0 + patch]
    img[y0:y0 + patch, x0:x0 + patch] = np.minimum(1.0, PATTERN_CONTRAST * class_pattern(label, n_classes, patch) + region)
    return SynthImage(img[None].astype(np.float32), label, Box(x0, y0, x0 + patch, y0 + patch))


def generate_images(n_per_class: int, n_classes: int, seed: int, id_offset: int = 0):
    """Yield ``(id, SynthImage)`` pairs, class-major; each image has its own seeded stream."""
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    if n_per_class < 1:
        raise ValueError("need at least 1 image per class")
    idx = id_offset
    for label in range(n_classes):
        for _ in range(n_per_class):
            rng = np.random.default_rng([seed, idx])
            yield idx, synth_image(label, n_classes, rng)
            idx += 1


def format_manifest_line(rec: ManifestRecord, base: Path | None = None) -> str:
    path = rec.feature_path
    if base is not None:
        try:
            path = path.relative_to(base)
        except ValueError:
            pass
    b = rec.box
    return f"{rec.id},{rec.label},{path.as_posix()},{rec.img_w},{rec.img_h},{b.x0},{b.y0},{b.x1},{b.y1}"


def write_manifest(records: Sequence[ManifestRecord], path: str | os.PathLike) -> None:
    path = Path(path)
    lines = [format_manifest_line(r, path.parent) for r in records]
    path.write_bytes(("".join(line + "\n" for line in lines)).encode("utf-8"))


def read_manifest(path: str | os.PathLike) -> list[ManifestRecord]:
    """Parse ``id,label,feature_path,img_w,img_h,x0,y0,x1,y1`` lines.

    Relative feature paths resolve against the manifest's directory.
    """
    path = Path(path)
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").split("\n"), 1):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 9:
            raise ValueError(f"{path}:{lineno}: expected 9 fields, got {len(parts)}")
        rid, label = int(parts[0]), int(parts[1])
        fpath = Path(parts[2])
        if not fpath.is_absolute():
            fpath = path.parent / fpath
        w, h, x0, y0, x1, y1 = (int(v) for v in parts[3:])
        records.append(ManifestRecord(rid, label, fpath, w, h, Box(x0, y0, x1, y1)))
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate record ids")
    return records


def write_annotations(records: Sequence[ManifestRecord], path: str | os.PathLike) -> None:
    lines = [f"{r.id},{r.img_w},{r.img_h},{r.box.x0},{r.box.y0},{r.box.x1},{r.box.y1}\n" for r in records]
    Path(path).write_bytes("".join(lines).encode("utf-8"))


def generate_synthetic_dataset(out_dir: str | os.PathLike, n_per_class: int, n_classes: int,
                               seed: int, backbone: BackboneConfig,
                               id_offset: int = 0) -> list[ManifestRecord]:
    """Write images, backbone features, ``manifest.csv`` and ``annotations.txt`` to ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "features").mkdir(parents=True, exist_ok=True)
    records = []
    for rid, img in generate_images(n_per_class, n_classes, seed, id_offset):
        write_tensor(Tensor(img.pixels), out / "images" / f"img_{rid:05d}.tnsr")
        fpath = out / "features" / f"feat_{rid:05d}.tnsr"
        write_tensor(Tensor(backbone_forward(img.pixels, backbone)), fpath)
        _, h, w = img.pixels.shape
        records.append(ManifestRecord(rid, img.label, fpath, w, h, img.evidence_box))
    write_manifest(records, out / MANIFEST_NAME)
    write_annotations(records, out / ANNOTATIONS_NAME)
    return records


# -- fixture head ----------------------------------------------------------

CALIBRATION_PER_CLASS = 30
CALIBRATION_STREAM = 0xCA1
SHRINKAGE = 0.1
BIAS_AXIS = 4.0
VARIATION_AXES = 4
VARIATION_SCALE = 0.2


def fixture_head(backbone: BackboneConfig, n_classes: int) -> HeadParams:
    """Handcrafted separating head for the synthetic data (D = n_classes + 5).

    One row per class: the regularized Fisher direction of that class's mean
    pooled feature against the grand mean, fitted on a calibration set drawn
    from a stream that depends only on the backbone seed. Rows are scaled so
    the largest between-class separation on any row is 1. The extra row has
    zero weights and a constant bias, which keeps embeddings close enough
    together that most triplets stay valid at the default margin. The last
    rows project onto the leading within-class principal axes (unit spread
    scaled by 0.2) so distinct images get distinct embeddings.
    """
    cal_seed = int(np.random.SeedSequence([backbone.seed, CALIBRATION_STREAM]).generate_state(1)[0])
    pooled, labels = [], []
    for _, img in generate_images(CALIBRATION_PER_CLASS, n_classes, cal_seed):
        pooled.append(backbone_forward(img.pixels, backbone).astype(np.float64).mean(axis=(1, 2)))
        labels.append(img.label)
    X, y = np.array(pooled), np.array(labels)
    K = X.shape[1]
    means = np.array([X[y == c].mean(axis=0) for c in range(n_classes)])
    centered = X - means[y]
    within = centered.T @ centered / len(X)
    within += SHRINKAGE * np.trace(within) / K * np.eye(K)
    grand = means.mean(axis=0)
    rows = np.linalg.solve(within, (means - grand).T).T
    offsets = -(rows @ grand)
    proj = rows @ means.T
    gap = max(np.max(np.abs(proj[:, i] - proj[:, j]))
              for i in range(n_classes) for j in range(i + 1, n_classes))
    # leading within-class principal axes, so embeddings are not confined to a curve
    _, sv, vt = np.linalg.svd(centered, full_matrices=False)
    spread = sv[:VARIATION_AXES] / np.sqrt(len(X))
    var_rows = VARIATION_SCALE * vt[:VARIATION_AXES] / spread[:, None]
    var_offsets = -(var_rows @ grand)
    w = np.vstack([rows / gap, np.zeros(K), var_rows])
    b = np.concatenate([offsets / gap, [BIAS_AXIS], var_offsets])
    return HeadParams(w.astype(np.float32), b.astype(np.float32))
