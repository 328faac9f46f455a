"""Grad-CAM heatmaps from grad-weights, resampling, PGM export and attention metrics."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import AllZeroHeatmap, ChannelOutOfRange, EmptyForeground, MissingRegion, ShapeError
from .gradweights import SparseWeights

BoxTuple = tuple[int, int, int, int]  # (x0, y0, x1, y1), half-open


@dataclass(frozen=True, eq=False)
class Heatmap:
    grid: np.ndarray
    normalized: bool = False
    degenerate: bool = False
    """Set by normalize_heatmap when the input was all zero."""

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.float32)
        if g.ndim != 2:
            raise ShapeError(f"heatmap grid must be 2-D, got shape {g.shape}")
        if np.any(g < 0):
            raise ValueError("heatmap values must be non-negative")
        object.__setattr__(self, "grid", g)

    @property
    def shape(self):
        return self.grid.shape


def _grid(h) -> np.ndarray:
    return h.grid if isinstance(h, Heatmap) else np.asarray(h, dtype=np.float32)


def grad_cam_heatmap(A, weights) -> Heatmap:
    """ReLU(sum_k alpha_k A^k). Sparse weights are densified, absent channels weigh 0."""
    A = np.asarray(A)
    if A.ndim != 3:
        raise ShapeError(f"feature map must be K x H x W, got shape {A.shape}")
    K = A.shape[0]
    if isinstance(weights, SparseWeights):
        if len(weights) and int(weights.channels.max()) >= K:
            raise ChannelOutOfRange(f"channel {int(weights.channels.max())} >= K={K}")
        alpha = weights.densify(K)
    else:
        alpha = np.asarray(weights, dtype=np.float32).reshape(-1)
        if alpha.shape[0] != K:
            raise ChannelOutOfRange(f"{alpha.shape[0]} weights for {K} channels")
    cam = np.tensordot(alpha.astype(np.float64), A.astype(np.float64), axes=1)
    return Heatmap(np.maximum(cam, 0.0).astype(np.float32))


def normalize_heatmap(h) -> Heatmap:
    g = _grid(h)
    peak = float(g.max())
    if peak == 0.0:
        return Heatmap(np.zeros_like(g), normalized=True, degenerate=True)
    if isinstance(h, Heatmap) and h.normalized:
        return h
    return Heatmap((g.astype(np.float64) / peak).astype(np.float32), normalized=True)


def upsample_bilinear(h, out_w: int, out_h: int) -> Heatmap:
    """Half-pixel-center bilinear resize with edge clamping."""
    if out_w < 1 or out_h < 1:
        raise ValueError("output size must be positive")
    g = _grid(h).astype(np.float64)
    H, W = g.shape

    def axis(n_out, n_in):
        s = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0.0, n_in - 1)
        lo = np.floor(s).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, s - lo

    x0, x1, fx = axis(out_w, W)
    y0, y1, fy = axis(out_h, H)
    top = g[y0][:, x0] * (1 - fx) + g[y0][:, x1] * fx
    bot = g[y1][:, x0] * (1 - fx) + g[y1][:, x1] * fx
    out = top * (1 - fy)[:, None] + bot * fy[:, None]
    return Heatmap(np.maximum(out, 0.0).astype(np.float32))


# -- PGM -------------------------------------------------------------------

def pgm_bytes(h) -> bytes:
    g = _grid(h).astype(np.float64)
    if np.any(g > 1.0):
        raise ValueError("PGM export needs values in [0, 1]; normalize first")
    rows, cols = g.shape
    payload = np.floor(255.0 * g + 0.5).astype(np.uint8)  # half away from zero for v >= 0
    return f"P5\n{cols} {rows}\n255\n".encode("ascii") + payload.tobytes()


def write_pgm(h, path: str | os.PathLike) -> None:
    data = pgm_bytes(h)
    with open(path, "wb") as fh:
        fh.write(data)


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    """Read an 8-bit binary PGM into a uint8 rows x cols array."""
    with open(path, "rb") as fh:
        buf = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos)
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(buf[start:pos])
    pos += 1
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: only 8-bit binary PGM (P5, maxval 255) is supported")
    cols, rows = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(buf, dtype=np.uint8, count=cols * rows, offset=pos)
    return data.reshape(rows, cols)


# -- metrics ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RegionAnnotation:
    width: int
    height: int
    box: BoxTuple | None = None
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.box is None and self.mask is None:
            raise MissingRegion("annotation needs a box or a mask")
        if self.box is not None:
            x0, y0, x1, y1 = self.box
            if not (0 <= x0 < x1 <= self.width and 0 <= y0 < y1 <= self.height):
                raise ValueError(f"box {self.box} outside {self.width}x{self.height} image")
        if self.mask is not None and np.shape(self.mask) != (self.height, self.width):
            raise ShapeError(f"mask shape {np.shape(self.mask)} != ({self.height}, {self.width})")

    def region_mask(self, region: str) -> np.ndarray:
        if region == "box":
            if self.box is None:
                raise MissingRegion("no box annotation")
            m = np.zeros((self.height, self.width), dtype=bool)
            x0, y0, x1, y1 = self.box
            m[y0:y1, x0:x1] = True
            return m
        if region == "mask":
            if self.mask is None:
                raise MissingRegion("no mask annotation")
            return np.asarray(self.mask) != 0
        raise ValueError(f"unknown region {region!r}")


def region_score(h, ann: RegionAnnotation, region: str = "box") -> float:
    """Fraction of total heatmap mass falling inside the annotated region.

    The max-normalized grid is scored, so raw and normalized inputs agree exactly.
    """
    g = normalize_heatmap(h).grid.astype(np.float64)
    if g.shape != (ann.height, ann.width):
        raise ShapeError(f"heatmap {g.shape} does not match image {ann.height}x{ann.width}")
    total = g.sum()
    if total == 0.0:
        raise AllZeroHeatmap("score undefined for an all-zero heatmap")
    return float(g[ann.region_mask(region)].sum() / total)


_EIGHT = np.ones((3, 3), dtype=bool)


def localize(h, threshold: float) -> BoxTuple:
    """Tight box around the largest 8-connected component of ``h >= threshold``.

    Equal-size components are ranked by their first pixel in row-major order.
    """
    g = _grid(h)
    labels, n = ndimage.label(g >= threshold, structure=_EIGHT)
    if n == 0:
        raise EmptyForeground(f"no pixel reaches threshold {threshold}")
    index = np.arange(1, n + 1)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    flat = np.arange(labels.size).reshape(labels.shape)
    first = ndimage.minimum(flat, labels, index)
    best = index[np.lexsort((first, -sizes))[0]]
    rows, cols = np.nonzero(labels == best)
    return (int(cols.min()), int(rows.min()), int(cols.max()) + 1, int(rows.max()) + 1)


def iou(a: BoxTuple, b: BoxTuple) -> float:
    ix = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


@dataclass
class EvalReport:
    metric: str
    scores: dict[int, float] = field(default_factory=dict)
    skipped: list[int] = field(default_factory=list)
    accuracy: dict[float, float] = field(default_factory=dict)

    @property
    def count(self) -> int:
        return len(self.scores)

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.scores.values()))) if self.scores else float("nan")

    @property
    def std(self) -> float:
        return float(np.std(list(self.scores.values()))) if self.scores else float("nan")

    def lines(self) -> list[str]:
        out = [f"{self.metric},{self.mean:.6f},{self.std:.6f},{self.count},{len(self.skipped)}"]
        out += [f"threshold,{t:.6f},{acc:.6f}" for t, acc in self.accuracy.items()]
        return out

    def summary(self) -> str:
        return f"{self.metric}: {self.mean:.3f} ± {self.std:.3f} (n={self.count}, skipped={len(self.skipped)})"


def evaluate_regions(items: Iterable[tuple[int, object, RegionAnnotation]], region: str = "box") -> EvalReport:
    """Region scores per image; all-zero heatmaps are skipped and listed.

    Items are ``(id, heatmap at image resolution, annotation)``; scores are
    reduced in ascending id order.
    """
    report = EvalReport(region if region != "box" else "bbox")
    for rid, h, ann in sorted(items, key=lambda it: it[0]):
        try:
            report.scores[rid] = region_score(h, ann, region)
        except AllZeroHeatmap:
            report.skipped.append(rid)
    return report


def localization_accuracy(items: Iterable[tuple[int, object, BoxTuple]], thresholds: Sequence[float],
                          iou_min: float = 0.5) -> EvalReport:
    """Fraction of images whose localized box reaches ``iou_min`` against ground truth.

    Heatmaps are max-normalized first. All-zero heatmaps count as misses and
    are listed as skipped. ``scores`` holds the per-image hit (1/0) at the
    first threshold.
    """
    items = sorted(items, key=lambda it: it[0])
    report = EvalReport("loc")
    if not items:
        return report
    normed = [(rid, normalize_heatmap(h), gt) for rid, h, gt in items]
    report.skipped = [rid for rid, h, _ in normed if h.degenerate]
    for ti, t in enumerate(thresholds):
        hits = []
        for rid, h, gt in normed:
            hit = 0.0 if h.degenerate else float(iou(localize(h, t), gt) >= iou_min)
            hits.append(hit)
            if ti == 0:
                report.scores[rid] = hit
        report.accuracy[float(t)] = float(np.mean(hits))
    return report
