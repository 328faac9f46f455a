"""Scalar activations on embeddings and their gradients w.r.t. the anchor.

All arithmetic is float64. Embeddings are treated as free variables here; the
normalization Jacobian is applied by the head.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import MissingParams, ShapeError


class ActivationKind(enum.Enum):
    TRIPLET = "triplet"
    DIST_DIFF = "dist-diff"
    POS_DIST = "pos-dist"
    NEG_DIST = "neg-dist"
    RANK_PAIR = "rank-pair"

    @property
    def code(self) -> int:
        return _CODES[self]

    @classmethod
    def from_code(cls, code: int) -> "ActivationKind":
        for kind, c in _CODES.items():
            if c == code:
                return kind
        raise ValueError(f"unknown activation code {code}")


_CODES = {
    ActivationKind.TRIPLET: 0,
    ActivationKind.DIST_DIFF: 1,
    ActivationKind.POS_DIST: 2,
    ActivationKind.NEG_DIST: 3,
    ActivationKind.RANK_PAIR: 4,
}


@dataclass(frozen=True)
class TripletConfig:
    margin: float = 0.2

    def __post_init__(self):
        if not self.margin >= 0:
            raise ValueError("margin must be non-negative")


@dataclass(frozen=True, eq=False)
class RankPairParams:
    """2 x D classifier on the difference of two embeddings.

    Logit 0 means "first outranks second", logit 1 the reverse.
    """
    w2: np.ndarray
    b2: np.ndarray
    first_outranks: bool = True

    def __post_init__(self):
        w2 = np.asarray(self.w2, dtype=np.float64)
        b2 = np.asarray(self.b2, dtype=np.float64).reshape(-1)
        if w2.ndim != 2 or w2.shape[0] != 2 or b2.shape != (2,):
            raise ShapeError(f"rank-pair layer must be 2 x D with a 2-bias, got {w2.shape}, {b2.shape}")
        object.__setattr__(self, "w2", w2)
        object.__setattr__(self, "b2", b2)

    def with_label(self, first_outranks: bool) -> "RankPairParams":
        return RankPairParams(self.w2, self.b2, bool(first_outranks))


def sq_dist(x, y) -> float:
    d = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    return float(np.dot(d, d))


def triplet_loss(f_a, f_p, f_n, cfg: TripletConfig) -> float:
    """[|f_a - f_p|^2 - |f_a - f_n|^2 + margin]_+"""
    return max(0.0, sq_dist(f_a, f_p) - sq_dist(f_a, f_n) + cfg.margin)


def _softmax(z):
    z = z - np.max(z)
    e = np.exp(z)
    return e / e.sum()


def activation_grad(kind: ActivationKind, f_a, f_p, f_n, cfg: TripletConfig,
                    rank_params: RankPairParams | None = None) -> tuple[float, np.ndarray]:
    """Return ``(value, dvalue/df_a)``.

    For RANK_PAIR the pair partner occupies the ``f_p`` slot and ``f_n`` is
    ignored. A triplet loss of exactly zero has zero gradient.
    """
    f_a = np.asarray(f_a, dtype=np.float64)
    f_p = np.asarray(f_p, dtype=np.float64) if f_p is not None else None
    f_n = np.asarray(f_n, dtype=np.float64) if f_n is not None else None

    if kind is ActivationKind.TRIPLET:
        value = triplet_loss(f_a, f_p, f_n, cfg)
        if value == 0.0:
            return 0.0, np.zeros_like(f_a)
        return value, 2.0 * (f_n - f_p)
    if kind is ActivationKind.DIST_DIFF:
        return sq_dist(f_a, f_p) - sq_dist(f_a, f_n), 2.0 * (f_n - f_p)
    if kind is ActivationKind.POS_DIST:
        return sq_dist(f_a, f_p), 2.0 * (f_a - f_p)
    if kind is ActivationKind.NEG_DIST:
        return sq_dist(f_a, f_n), 2.0 * (f_a - f_n)
    if kind is ActivationKind.RANK_PAIR:
        if rank_params is None:
            raise MissingParams("rank-pair activation needs rank_params")
        v = f_a - f_p
        logits = rank_params.w2 @ v + rank_params.b2
        probs = _softmax(logits)
        target = 0 if rank_params.first_outranks else 1
        shifted = logits - np.max(logits)
        value = float(np.log(np.exp(shifted).sum()) - shifted[target])
        onehot = np.zeros(2)
        onehot[target] = 1.0
        return value, rank_params.w2.T @ (probs - onehot)
    raise ValueError(f"unknown activation {kind!r}")


def make_activation(kind: ActivationKind, f_p, f_n, cfg: TripletConfig,
                    rank_params: RankPairParams | None = None):
    """Bind the non-anchor arguments, leaving a function of the anchor embedding."""
    def activation(f_a):
        return activation_grad(kind, f_a, f_p, f_n, cfg, rank_params)
    return activation
