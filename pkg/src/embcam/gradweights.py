"""Grad-weights from triplet activations: per-triplet, sampled, averaged, truncated."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .activations import ActivationKind, RankPairParams, TripletConfig, activation_grad, triplet_loss
from .errors import EmptyTriplets, NoNegatives, NoPositives, ShapeError
from .head import HeadCache, HeadParams, head_backward, head_forward

# Candidate (positive, negative) pairs examined per requested triplet.
DRAW_BUDGET_FACTOR = 50


@dataclass(frozen=True)
class BuildConfig:
    margin: float = 0.2
    num_triplets: int = 50
    top_m: int = 50
    seed: int = 0
    activation: ActivationKind = ActivationKind.TRIPLET

    def __post_init__(self):
        if self.num_triplets < 1:
            raise ValueError("num_triplets must be >= 1")
        if self.top_m < 1:
            raise ValueError("top_m must be >= 1")
        if self.margin < 0:
            raise ValueError("margin must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def triplet(self) -> TripletConfig:
        return TripletConfig(self.margin)


@dataclass(frozen=True)
class Triplet:
    anchor_id: int
    positive_id: int
    negative_id: int
    loss: float


class SparseWeights:
    """Top-M (channel, weight) pairs, ordered by descending weight then ascending channel."""

    __slots__ = ("channels", "weights")

    def __init__(self, channels, weights):
        channels = np.asarray(channels, dtype=np.uint32).reshape(-1)
        weights = np.asarray(weights, dtype=np.float32).reshape(-1)
        if channels.shape != weights.shape:
            raise ShapeError("channels and weights differ in length")
        if len(np.unique(channels)) != len(channels):
            raise ValueError("duplicate channel in sparse weights")
        self.channels = channels
        self.weights = weights

    def __len__(self):
        return len(self.channels)

    def __iter__(self):
        return iter(zip(self.channels.tolist(), self.weights.tolist()))

    def __eq__(self, other):
        if not isinstance(other, SparseWeights):
            return NotImplemented
        return (self.channels.tobytes() == other.channels.tobytes()
                and self.weights.tobytes() == other.weights.tobytes())

    def __repr__(self):
        return f"SparseWeights({list(self)})"

    def densify(self, K: int) -> np.ndarray:
        out = np.zeros(K, dtype=np.float32)
        out[self.channels] = self.weights
        return out


def grad_weights_from_cache(cache: HeadCache, params: HeadParams, Z: int, f_p, f_n,
                            cfg: BuildConfig, rank_params: RankPairParams | None = None) -> np.ndarray:
    _, dL_dfa = activation_grad(cfg.activation, cache.f, f_p, f_n, cfg.triplet, rank_params)
    alpha, _ = head_backward(dL_dfa, cache, params, Z)
    return alpha


def grad_weights_single(A_anchor, params: HeadParams, f_p, f_n, cfg: BuildConfig,
                        rank_params: RankPairParams | None = None) -> np.ndarray:
    """alpha_k = (1/Z) sum_ij dL/dA^k_ij for one triplet, as a float32 K-vector.

    The anchor embedding is recomputed from ``A_anchor``.
    """
    A_anchor = np.asarray(A_anchor)
    _, cache = head_forward(A_anchor, params)
    Z = A_anchor.shape[1] * A_anchor.shape[2]
    return grad_weights_from_cache(cache, params, Z, f_p, f_n, cfg, rank_params)


def sample_triplets(embeddings, labels, ids: Sequence[int], anchor: int,
                    cfg: BuildConfig) -> tuple[list[Triplet], int]:
    """Sample up to ``num_triplets`` distinct valid triplets for record index ``anchor``.

    Candidate pairs are drawn uniformly without replacement from a generator
    seeded by (seed, anchor id); at most 50 * num_triplets pairs are examined.
    Returns the kept triplets and the shortfall against ``num_triplets``.
    """
    labels = np.asarray(labels)
    anchor_label = labels[anchor]
    same = labels == anchor_label
    same[anchor] = False
    pos = np.flatnonzero(same)
    neg = np.flatnonzero(labels != anchor_label)
    anchor_id = int(ids[anchor])
    if pos.size == 0:
        raise NoPositives(f"anchor {anchor_id} has no other member of label {anchor_label}")
    if neg.size == 0:
        raise NoNegatives(f"anchor {anchor_id}: no record with a different label")

    rng = np.random.default_rng([cfg.seed, anchor_id])
    total = pos.size * neg.size
    n_draw = min(total, DRAW_BUDGET_FACTOR * cfg.num_triplets)
    picks = rng.choice(total, size=n_draw, replace=False)

    f_a = embeddings[anchor]
    tcfg = cfg.triplet
    kept: list[Triplet] = []
    for flat in picks.tolist():
        p, n = pos[flat // neg.size], neg[flat % neg.size]
        loss = triplet_loss(f_a, embeddings[p], embeddings[n], tcfg)
        if loss > 0.0:
            kept.append(Triplet(anchor_id, int(ids[p]), int(ids[n]), loss))
            if len(kept) == cfg.num_triplets:
                break
    return kept, cfg.num_triplets - len(kept)


def mean_weights(alphas) -> np.ndarray:
    """Mean of per-triplet grad-weights, accumulated in float64 in the given order."""
    if len(alphas) == 0:
        raise EmptyTriplets("cannot average zero grad-weight vectors")
    acc = np.zeros(np.shape(alphas[0]), dtype=np.float64)
    for a in alphas:
        acc += np.asarray(a, dtype=np.float64)
    return (acc / len(alphas)).astype(np.float32)


def grad_weights_aggregate(A_anchor, params: HeadParams, triplets: Sequence[Triplet],
                           embeddings: Mapping[int, np.ndarray], cfg: BuildConfig,
                           rank_params: RankPairParams | None = None,
                           labels: Mapping[int, int] | None = None) -> np.ndarray:
    """Average grad-weights over ``triplets``; the divisor is ``len(triplets)``.

    ``embeddings`` maps record id to embedding. For the rank-pair activation
    the negative is used as the pair partner and ``labels`` (id -> label,
    labels read as ordinal ranks) sets which member outranks the other.
    """
    if not triplets:
        raise EmptyTriplets("no triplets to aggregate")
    A_anchor = np.asarray(A_anchor)
    _, cache = head_forward(A_anchor, params)
    Z = A_anchor.shape[1] * A_anchor.shape[2]
    alphas = [per_triplet_alpha(cache, params, Z, t, embeddings, cfg, rank_params, labels)
              for t in triplets]
    return mean_weights(alphas)


def per_triplet_alpha(cache, params, Z, t: Triplet, embeddings, cfg: BuildConfig,
                      rank_params=None, labels=None) -> np.ndarray:
    f_p, f_n = embeddings[t.positive_id], embeddings[t.negative_id]
    if cfg.activation is ActivationKind.RANK_PAIR:
        if rank_params is not None and labels is not None:
            rank_params = rank_params.with_label(labels[t.anchor_id] > labels[t.negative_id])
        f_p, f_n = f_n, None
    return grad_weights_from_cache(cache, params, Z, f_p, f_n, cfg, rank_params)


def top_m(alpha, M: int) -> SparseWeights:
    """Keep the M largest signed weights; ties go to the lower channel index."""
    if M < 1:
        raise ValueError("M must be >= 1")
    alpha = np.asarray(alpha, dtype=np.float32).reshape(-1)
    # Stable sort on the negated values keeps equal weights in channel order.
    order = np.argsort(-alpha.astype(np.float64), kind="stable")[:M]
    return SparseWeights(order, alpha[order])
