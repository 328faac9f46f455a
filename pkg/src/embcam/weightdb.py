"""Embedding/grad-weights database: build, GWDB I/O, nearest-neighbor transfer,
k-means compaction and channel statistics.

GWDB layout (little-endian)::

    b"GWDB" | version u8 = 1 | 3 zero bytes
    N, D, M, K, N_s : u32 | margin : f32 | activation u8 | compacted u8 | 2 zero bytes
    N records: id u32, label u32, D x f32 embedding, M x (channel u32, weight f32)

Records with fewer than M real channels (only when K < M) are padded with
channel 0xFFFFFFFF, weight 0.
"""
from __future__ import annotations

import os
import struct
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .activations import ActivationKind, RankPairParams
from .errors import (AllExcluded, BadMagic, EmptyDatabase, FeatureReadError, KTooLarge,
                     MissingParams, NoNegatives, NoPositives, ShapeError, TruncatedFile, UnsupportedVersion)
from .gradweights import (BuildConfig, SparseWeights, mean_weights, per_triplet_alpha,
                          sample_triplets, top_m)
from .head import HeadParams, head_forward, unit_f32
from .synthetic import ManifestRecord
from .tensor import read_tensor

MAGIC = b"GWDB"
VERSION = 1
PAD_CHANNEL = 0xFFFFFFFF
_HEADER = struct.Struct("<4sB3xIIIIIfBB2x")
HEADER_SIZE = _HEADER.size  # 36


@dataclass(frozen=True)
class DbConfig:
    margin: float
    num_triplets: int
    top_m: int
    channels: int
    activation: ActivationKind = ActivationKind.TRIPLET


@dataclass(frozen=True, eq=False)
class DbEntry:
    id: int
    label: int
    embedding: np.ndarray
    weights: SparseWeights

    def __eq__(self, other):
        if not isinstance(other, DbEntry):
            return NotImplemented
        return (self.id == other.id and self.label == other.label
                and self.embedding.tobytes() == other.embedding.tobytes()
                and self.weights == other.weights)


@dataclass(eq=False)
class WeightDatabase:
    entries: list[DbEntry]
    config: DbConfig
    compacted: bool = False
    excluded_ids: tuple[int, ...] = ()
    """Not persisted by GWDB; a loaded database always reports none."""

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate entry ids")
        dims = {e.embedding.shape for e in self.entries}
        if len(dims) > 1:
            raise ShapeError("entries disagree on embedding dimension")

    def __len__(self):
        return len(self.entries)

    def __eq__(self, other):
        if not isinstance(other, WeightDatabase):
            return NotImplemented
        return encode_database(self) == encode_database(other)

    @property
    def dim(self) -> int:
        if not self.entries:
            raise EmptyDatabase("empty database has no embedding dimension")
        return self.entries[0].embedding.shape[0]

    @cached_property
    def _matrix(self) -> np.ndarray:
        return np.stack([e.embedding for e in self.entries]).astype(np.float64)

    @cached_property
    def _ids(self) -> np.ndarray:
        return np.array([e.id for e in self.entries], dtype=np.int64)


# -- build -----------------------------------------------------------------

@dataclass
class BuildResult:
    database: WeightDatabase
    dense: dict[int, np.ndarray] = field(default_factory=dict)
    shortfalls: dict[int, int] = field(default_factory=dict)
    """Per surviving anchor: how many triplets short of num_triplets sampling fell."""


def _load_features(rec: ManifestRecord) -> np.ndarray:
    try:
        t = read_tensor(rec.feature_path)
    except (OSError, ValueError) as exc:
        raise FeatureReadError(rec.id, exc) from exc
    if len(t.dims) != 3:
        raise FeatureReadError(rec.id, f"feature map must be K x H x W, got dims {t.dims}")
    return np.array(t)


def build(records: Sequence[ManifestRecord], params: HeadParams, cfg: BuildConfig,
          rank_params: RankPairParams | None = None, workers: int = 1) -> BuildResult:
    """Compute embeddings and top-M grad-weights for every manifest record.

    Anchors with no valid triplet (or no positive/negative at all) are
    excluded. The result does not depend on ``workers``.
    """
    if not records:
        raise ValueError("empty manifest")
    if cfg.activation is ActivationKind.RANK_PAIR and rank_params is None:
        raise MissingParams("rank-pair activation needs rank-pair parameters")
    features = [_load_features(r) for r in records]
    K = params.channels
    caches = [head_forward(A, params)[1] for A in features]
    embeddings = np.stack([c.f for c in caches])
    labels = np.array([r.label for r in records])
    ids = [r.id for r in records]
    emb_by_id = {r.id: embeddings[i] for i, r in enumerate(records)}
    label_by_id = {r.id: r.label for r in records}

    def anchor_job(i):
        try:
            triplets, shortfall = sample_triplets(embeddings, labels, ids, i, cfg)
        except (NoPositives, NoNegatives):
            return None
        if not triplets:
            return None
        A = features[i]
        Z = A.shape[1] * A.shape[2]
        alphas = [per_triplet_alpha(caches[i], params, Z, t, emb_by_id, cfg, rank_params, label_by_id)
                  for t in triplets]
        return mean_weights(alphas), shortfall

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(anchor_job, range(len(records))))
    else:
        results = [anchor_job(i) for i in range(len(records))]

    entries, excluded, dense, shortfalls = [], [], {}, {}
    for rec, emb, res in zip(records, embeddings, results):
        if res is None:
            excluded.append(rec.id)
            continue
        alpha, shortfall = res
        entries.append(DbEntry(rec.id, rec.label, emb, top_m(alpha, cfg.top_m)))
        dense[rec.id] = alpha
        shortfalls[rec.id] = shortfall
    if not entries:
        raise AllExcluded(f"all {len(records)} anchors lack valid triplets")
    db = WeightDatabase(entries, DbConfig(cfg.margin, cfg.num_triplets, cfg.top_m, K, cfg.activation),
                        compacted=False, excluded_ids=tuple(excluded))
    return BuildResult(db, dense, shortfalls)


def build_database(records, params, cfg, rank_params=None, workers=1) -> WeightDatabase:
    return build(records, params, cfg, rank_params, workers).database


# -- serialization ---------------------------------------------------------

def _record_dtype(D: int, M: int) -> np.dtype:
    return np.dtype([("id", "<u4"), ("label", "<u4"), ("emb", "<f4", (D,)),
                     ("w", [("ch", "<u4"), ("wt", "<f4")], (M,))])


def record_size(D: int, M: int) -> int:
    return 8 + 4 * D + 8 * M


def encode_database(db: WeightDatabase) -> bytes:
    cfg = db.config
    N = len(db.entries)
    D = db.dim if N else 0
    M = cfg.top_m
    header = _HEADER.pack(MAGIC, VERSION, N, D, M, cfg.channels, cfg.num_triplets,
                          cfg.margin, cfg.activation.code, int(db.compacted))
    recs = np.zeros(N, dtype=_record_dtype(D, M))
    for i, e in enumerate(db.entries):
        n = len(e.weights)
        if n > M:
            raise ValueError(f"entry {e.id} has {n} weights, more than M={M}")
        recs[i]["id"] = e.id
        recs[i]["label"] = e.label
        recs[i]["emb"] = e.embedding
        recs[i]["w"]["ch"][:n] = e.weights.channels
        recs[i]["w"]["wt"][:n] = e.weights.weights
        recs[i]["w"]["ch"][n:] = PAD_CHANNEL
    return header + recs.tobytes()


def decode_database(buf: bytes) -> WeightDatabase:
    if buf[:4] != MAGIC:
        if len(buf) < 4 and MAGIC.startswith(bytes(buf)):
            raise TruncatedFile("file shorter than the magic")
        raise BadMagic(f"expected b'GWDB', got {bytes(buf[:4])!r}")
    if len(buf) < HEADER_SIZE:
        raise TruncatedFile(f"header needs {HEADER_SIZE} bytes, found {len(buf)}")
    magic, version, N, D, M, K, n_s, margin, act, compacted = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise UnsupportedVersion(f"GWDB version {version}")
    need = HEADER_SIZE + N * record_size(D, M)
    if len(buf) < need:
        raise TruncatedFile(f"{N} records need {need} bytes, found {len(buf)}")
    if len(buf) > need:
        raise ValueError(f"{len(buf) - need} trailing bytes after GWDB records")
    recs = np.frombuffer(buf, dtype=_record_dtype(D, M), count=N, offset=HEADER_SIZE)
    entries = []
    for r in recs:
        ch, wt = r["w"]["ch"], r["w"]["wt"]
        real = ch != PAD_CHANNEL
        entries.append(DbEntry(int(r["id"]), int(r["label"]), np.array(r["emb"], dtype=np.float32),
                               SparseWeights(ch[real], wt[real])))
    cfg = DbConfig(float(margin), n_s, M, K, ActivationKind.from_code(act))
    return WeightDatabase(entries, cfg, compacted=bool(compacted))


def save_database(db: WeightDatabase, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_database(db))


def load_database(path: str | os.PathLike) -> WeightDatabase:
    with open(path, "rb") as fh:
        return decode_database(fh.read())


# -- query -----------------------------------------------------------------

def query_nearest(db: WeightDatabase, f_query) -> tuple[DbEntry, float]:
    """Exact linear scan for the nearest stored embedding; ties go to the lowest id.

    Ranks by float64 squared Euclidean distance, which orders unit vectors
    like the dot product but keeps a self-query at distance exactly 0.
    Returns the entry and its dot-product similarity.
    """
    if not db.entries:
        raise EmptyDatabase("cannot query an empty database")
    q = np.asarray(f_query, dtype=np.float64)
    d2 = ((db._matrix - q) ** 2).sum(axis=1)
    candidates = np.flatnonzero(d2 == d2.min())
    i = candidates[np.argmin(db._ids[candidates])]
    return db.entries[i], float(db._matrix[i] @ q)


# -- k-means compaction ----------------------------------------------------

def _sq_dists(X, C):
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=-1)


def kmeans_pp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    chosen = [int(rng.integers(n))]
    d2 = ((X - X[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            # every point coincides with a center already; pick an unused one
            unused = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(unused))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(axis=1))
    return X[chosen].copy()


def kmeans(X, k: int, iters: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding. Returns (centers, assignment).

    Ties in assignment go to the lower cluster index. An emptied cluster is
    re-seeded with the point farthest from its own center, drawn from clusters
    that still have more than one member.
    """
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    if not 1 <= k <= n:
        raise KTooLarge(f"k={k} must lie in 1..{n}")
    rng = np.random.default_rng(seed)
    centers = kmeans_pp_init(X, k, rng)
    assign = None
    for _ in range(max(iters, 1)):
        d = _sq_dists(X, centers)
        new = np.argmin(d, axis=1)
        counts = np.bincount(new, minlength=k)
        for c in np.flatnonzero(counts == 0):
            own = d[np.arange(n), new]
            donors = counts[new] > 1
            if not donors.any():
                break
            far = int(np.argmax(np.where(donors, own, -1.0)))
            counts[new[far]] -= 1
            new[far] = c
            counts[c] = 1
            centers[c] = X[far]
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for c in range(k):
            centers[c] = X[assign == c].mean(axis=0)
    return centers, assign


def compact_kmeans(db: WeightDatabase, dense: dict[int, np.ndarray], k: int, iters: int,
                   seed: int) -> WeightDatabase:
    """Replace entries by k cluster centers with averaged dense grad-weights.

    Each output entry: id = cluster index, label = majority member label
    (ties to the lowest), embedding = re-normalized member mean, weights =
    top-M of the member mean of the dense (pre-truncation) grad-weights.
    """
    if not db.entries:
        raise EmptyDatabase("cannot compact an empty database")
    if k > len(db.entries):
        raise KTooLarge(f"k={k} exceeds {len(db.entries)} entries")
    X = db._matrix
    _, assign = kmeans(X, k, iters, seed)
    entries = []
    for c in range(k):
        members = np.flatnonzero(assign == c)
        if members.size == 0:
            continue
        votes = Counter(db.entries[i].label for i in members)
        top = max(votes.values())
        label = min(lbl for lbl, v in votes.items() if v == top)
        if members.size == 1:
            # already unit-norm; re-normalizing could perturb the last bit
            emb = db.entries[members[0]].embedding.copy()
        else:
            emb = unit_f32(X[members].mean(axis=0))
        alpha = mean_weights([dense[db.entries[i].id] for i in members])
        entries.append(DbEntry(c, label, emb, top_m(alpha, db.config.top_m)))
    return WeightDatabase(entries, db.config, compacted=True, excluded_ids=db.excluded_ids)


# -- statistics ------------------------------------------------------------

@dataclass(frozen=True)
class DbStats:
    histogram: dict[int, int]
    count: int
    dim: int
    top_m: int
    channels: int
    excluded: int

    def lines(self) -> list[str]:
        out = [f"entries,{self.count}", f"dim,{self.dim}", f"top_m,{self.top_m}",
               f"channels,{self.channels}", f"excluded,{self.excluded}"]
        out += [f"top1,{ch},{n}" for ch, n in self.histogram.items()]
        return out


def db_stats(db: WeightDatabase) -> DbStats:
    """Histogram of each entry's top-1 channel, sorted by channel index."""
    if not db.entries:
        raise EmptyDatabase("no entries")
    hist = Counter(int(e.weights.channels[0]) for e in db.entries if len(e.weights))
    return DbStats(dict(sorted(hist.items())), len(db.entries), db.dim, db.config.top_m,
                   db.config.channels, len(db.excluded_ids))
