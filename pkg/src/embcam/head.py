"""Pool -> linear -> L2-normalize embedding head with a closed-form backward pass.

Accumulations run in float64; everything crossing the module boundary is
rounded to float32.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ShapeError, ZeroNorm
from .tensor import read_tensor, write_tensor

ZERO_NORM_EPS = 1e-12

HEAD_W_FILE = "head_w.tnsr"
HEAD_B_FILE = "head_b.tnsr"


@dataclass(frozen=True, eq=False)
class HeadParams:
    w: np.ndarray  # D x K
    b: np.ndarray  # D

    def __post_init__(self):
        w = np.ascontiguousarray(self.w, dtype=np.float32)
        b = np.ascontiguousarray(self.b, dtype=np.float32).reshape(-1)
        if w.ndim != 2 or w.shape[0] != b.shape[0]:
            raise ShapeError(f"head W {w.shape} and b {b.shape} disagree")
        if w.shape[0] < 2:
            raise ShapeError("embedding dimension must be at least 2")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "b", b)

    @property
    def dim(self) -> int:
        return self.w.shape[0]

    @property
    def channels(self) -> int:
        return self.w.shape[1]


@dataclass(frozen=True, eq=False)
class HeadCache:
    p: np.ndarray       # pooled activations, K
    u: np.ndarray       # pre-normalization output, D
    norm_u: float
    f: np.ndarray       # unit-norm embedding, D


def save_head(params: HeadParams, directory: str | os.PathLike) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_tensor(params.w, d / HEAD_W_FILE)
    write_tensor(params.b, d / HEAD_B_FILE)


def load_head(directory: str | os.PathLike) -> HeadParams:
    d = Path(directory)
    w = read_tensor(d / HEAD_W_FILE)
    b = read_tensor(d / HEAD_B_FILE)
    if len(w.dims) != 2 or len(b.dims) != 1:
        raise ShapeError(f"head_w must be [D,K] and head_b [D]; got {w.dims}, {b.dims}")
    return HeadParams(np.array(w), np.array(b))


def _check_features(A, params: HeadParams) -> np.ndarray:
    A = np.asarray(A)
    if A.ndim != 3:
        raise ShapeError(f"feature map must be K x H x W, got shape {A.shape}")
    if A.shape[0] != params.channels:
        raise ShapeError(f"feature map has {A.shape[0]} channels, head expects {params.channels}")
    return A


def _forward64(A, params: HeadParams):
    p = np.asarray(A, dtype=np.float64).mean(axis=(-2, -1))
    u = p @ params.w.astype(np.float64).T + params.b.astype(np.float64)
    norm_u = np.linalg.norm(u, axis=-1)
    if np.any(norm_u < ZERO_NORM_EPS):
        raise ZeroNorm(f"|u| = {np.min(norm_u):.3g} below {ZERO_NORM_EPS}")
    f = u / np.expand_dims(norm_u, -1)
    return p, u, norm_u, f


def unit_f32(v) -> np.ndarray:
    """L2-normalize in float64 and round to float32."""
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n < ZERO_NORM_EPS:
        raise ZeroNorm(f"|v| = {n:.3g} below {ZERO_NORM_EPS}")
    return (v / n).astype(np.float32)


def head_forward(A, params: HeadParams) -> tuple[np.ndarray, HeadCache]:
    """Return the float32 unit embedding of feature map ``A`` plus the backward cache."""
    A = _check_features(A, params)
    p, u, norm_u, f = _forward64(A, params)
    cache = HeadCache(p.astype(np.float32), u.astype(np.float32), float(norm_u), f.astype(np.float32))
    return cache.f, cache


def normalize_backward(dL_df, f, norm_u: float) -> np.ndarray:
    """Gradient through f = u/|u|: (I - f f^T) dL_df / |u|, in float64."""
    g = np.asarray(dL_df, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    return (g - f * np.dot(f, g)) / norm_u


def head_backward(dL_df, cache: HeadCache, params: HeadParams, Z: int):
    """Backpropagate an embedding gradient to the feature map.

    Average pooling spreads dL/dp_k evenly, so every pixel of channel k gets
    the same gradient dL/dp_k / Z. Returns ``(per_channel, dL_dp)``, both
    float32 K-vectors.
    """
    dL_df = np.asarray(dL_df)
    if dL_df.shape != (params.dim,):
        raise ShapeError(f"dL_df has shape {dL_df.shape}, expected ({params.dim},)")
    if cache.p.shape != (params.channels,):
        raise ShapeError("cache does not match head parameters")
    if Z <= 0:
        raise ShapeError("spatial size Z must be positive")
    dL_du = normalize_backward(dL_df, cache.f, cache.norm_u)
    dL_dp = (params.w.astype(np.float64).T @ dL_du).astype(np.float32)
    per_channel = (dL_dp.astype(np.float64) / Z).astype(np.float32)
    return per_channel, dL_dp


def pixel_gradients(per_channel, height: int, width: int) -> np.ndarray:
    """Expand per-channel constants to the full K x H x W gradient field."""
    per_channel = np.asarray(per_channel, dtype=np.float32)
    return np.broadcast_to(per_channel[:, None, None], (per_channel.shape[0], height, width)).copy()


# -- finite-difference verification ----------------------------------------

Activation = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


def analytic_gradients(A, params: HeadParams, activation: Activation) -> np.ndarray:
    A = _check_features(A, params)
    f, cache = head_forward(A, params)
    _, g = activation(f.astype(np.float64))
    per_channel, _ = head_backward(np.asarray(g, dtype=np.float64), cache, params, A.shape[1] * A.shape[2])
    return pixel_gradients(per_channel, A.shape[1], A.shape[2])


def numeric_gradients(A, params: HeadParams, activation: Activation, eps: float,
                      indices=None, chunk: int = 512) -> np.ndarray:
    """Central differences of the activation w.r.t. individual feature-map entries.

    Each perturbed map is re-evaluated through an independent float64 forward
    pass. ``indices`` are flat positions into A; all entries when omitted.
    """
    A = np.asarray(_check_features(A, params), dtype=np.float64)
    flat = np.arange(A.size) if indices is None else np.asarray(indices)
    out = np.empty(flat.shape[0], dtype=np.float64)

    def value(batch):
        _, _, _, f = _forward64(batch, params)
        return np.array([activation(fi)[0] for fi in f])

    for start in range(0, flat.shape[0], chunk):
        idx = flat[start:start + chunk]
        plus = np.repeat(A[None], idx.shape[0], axis=0)
        minus = plus.copy()
        rows = np.arange(idx.shape[0])
        plus.reshape(idx.shape[0], -1)[rows, idx] += eps
        minus.reshape(idx.shape[0], -1)[rows, idx] -= eps
        out[start:start + idx.shape[0]] = (value(plus) - value(minus)) / (2.0 * eps)
    return out


def relative_error(analytic, numeric) -> float:
    """max |analytic - numeric| scaled by max(max |numeric|, 1e-8)."""
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(float(np.max(np.abs(numeric), initial=0.0)), 1e-8)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def finite_diff_check(A, params: HeadParams, activation: Activation, eps: float = 1e-3,
                      seed: int = 0, max_entries: int = 10_000) -> float:
    """Compare analytic dL/dA against central differences; returns the relative error.

    When the feature map has more than ``max_entries`` entries a seeded sample
    of positions is checked instead of all of them.
    """
    if not 1e-4 <= eps <= 1e-2:
        raise ValueError("eps must lie in [1e-4, 1e-2]")
    A = _check_features(A, params)
    analytic = analytic_gradients(A, params, activation).ravel()
    if A.size > max_entries:
        idx = np.sort(np.random.default_rng(seed).choice(A.size, max_entries, replace=False))
    else:
        idx = np.arange(A.size)
    numeric = numeric_gradients(A, params, activation, eps, idx)
    return relative_error(analytic[idx], numeric)
