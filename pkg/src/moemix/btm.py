"""Routing-free ensemble baseline.

Instead of merging experts into one network, this keeps the trained branch
checkpoints separate: a byte-bigram tf-idf embedding picks the top-k experts
for a context by cosine similarity against each expert's mean training-data
embedding, and next-token prediction averages the selected experts' output
distributions. The generalist seed participates as an ordinary selectable
expert; callers include it in the corpora/centroid tables like any branch.

Byte bigrams are the term unit: byte-level corpora guarantee no whitespace
structure, and bigrams already separate the synthetic domains cleanly. The
idf convention is the smoothed ln((1+D)/(1+df)) + 1.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import tokenize
from .errors import CheckpointError, ContractError, DataError

CENTROID_MAGIC = b"BTMC"
CENTROID_VERSION = 1


def _bigram_ids(data) -> np.ndarray:
    """Byte pairs of a document as integer term ids (b0*256 + b1)."""
    ids = data if isinstance(data, np.ndarray) else tokenize(data)
    ids = ids.astype(np.int64)
    if ids.size < 2:
        return np.empty(0, dtype=np.int64)
    return ids[:-1] * 256 + ids[1:]


@dataclass
class TfIdfStats:
    """Fitted term statistics: sorted bigram vocabulary, smoothed idf per
    term, and the document count the fit saw. ``df`` is kept when the stats
    were fitted locally and is None for stats loaded from a centroid store."""

    terms: np.ndarray  # sorted int64 term ids
    idf: np.ndarray  # float64, aligned with terms
    n_docs: int
    df: np.ndarray | None = None

    def __post_init__(self):
        if self.terms.size != self.idf.size:
            raise ContractError("terms and idf tables must align")
        if self.df is not None and (self.df > self.n_docs).any():
            raise ContractError("document frequency exceeds document count")

    @property
    def n_terms(self) -> int:
        return int(self.terms.size)


@dataclass
class ExpertCentroid:
    """Unit-norm mean tf-idf embedding of one expert's training documents."""

    name: str
    vector: np.ndarray

    def __post_init__(self):
        norm = float(np.linalg.norm(self.vector))
        if not np.isclose(norm, 1.0, atol=1e-6):
            raise DataError(f"centroid for {self.name!r} must be unit norm, got {norm}")


def fit_tfidf(corpora: dict) -> TfIdfStats:
    """Fit over the union of all experts' training documents.

    ``corpora`` maps expert name to its list of training documents (bytes).
    tf is the raw bigram count; idf = ln((1+D)/(1+df)) + 1 where D is the
    total document count.
    """
    if not corpora:
        raise DataError("tf-idf fit needs at least one corpus")
    doc_terms = []
    for name, docs in corpora.items():
        if not docs:
            raise DataError(f"expert {name!r} has no training documents")
        doc_terms.extend(np.unique(_bigram_ids(doc)) for doc in docs)
    n_docs = len(doc_terms)
    terms = np.unique(np.concatenate(doc_terms))
    df = np.zeros(terms.size, dtype=np.int64)
    for uniq in doc_terms:
        df[np.searchsorted(terms, uniq)] += 1
    idf = np.log((1.0 + n_docs) / (1.0 + df)) + 1.0
    return TfIdfStats(terms=terms, idf=idf, n_docs=n_docs, df=df)


def embed(data, stats: TfIdfStats) -> np.ndarray:
    """Unit-normalized tf-idf vector of a byte string or token array.

    Out-of-vocabulary bigrams contribute nothing; a text with no in-vocabulary
    bigram embeds to the zero vector (selection then falls back to uniform).
    """
    pairs = _bigram_ids(data)
    tf = np.zeros(stats.n_terms, dtype=np.float64)
    if pairs.size and stats.n_terms:
        pos = np.searchsorted(stats.terms, pairs)
        pos_clipped = np.minimum(pos, stats.n_terms - 1)
        valid = stats.terms[pos_clipped] == pairs
        np.add.at(tf, pos_clipped[valid], 1.0)
    vec = tf * stats.idf
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


def expert_centroids(stats: TfIdfStats, corpora: dict) -> list[ExpertCentroid]:
    """Mean document embedding per expert, renormalized to unit length."""
    centroids = []
    for name, docs in corpora.items():
        if not docs:
            raise DataError(f"expert {name!r} has no training documents")
        mean = np.mean([embed(doc, stats) for doc in docs], axis=0)
        norm = np.linalg.norm(mean)
        if norm == 0:
            raise DataError(f"expert {name!r} embeds to the zero vector")
        centroids.append(ExpertCentroid(name=name, vector=mean / norm))
    return centroids


@dataclass
class Selection:
    """Top-k pick: expert names in descending similarity (ties to the lowest
    expert index), their cosine similarities, and whether the context embedded
    to zero and forced the uniform first-k fallback."""

    names: list[str]
    similarities: np.ndarray
    indices: np.ndarray
    fallback: bool


def select_experts(context, stats: TfIdfStats, centroids: list[ExpertCentroid], k: int) -> Selection:
    if not 1 <= k <= len(centroids):
        raise ContractError(f"k={k} outside [1, {len(centroids)}]")
    query = embed(context, stats)
    if not query.any():
        idx = np.arange(k)
        return Selection(
            names=[centroids[i].name for i in idx],
            similarities=np.zeros(k),
            indices=idx,
            fallback=True,
        )
    sims = np.array([float(query @ c.vector) for c in centroids])
    order = np.argsort(-sims, kind="stable")[:k]
    return Selection(
        names=[centroids[i].name for i in order],
        similarities=sims[order],
        indices=order,
        fallback=False,
    )


def _final_distribution(model, context: np.ndarray) -> np.ndarray:
    logits = model.forward(context[None, :]).data[0, -1].astype(np.float64)
    e = np.exp(logits - logits.max())
    return e / e.sum()


def btm_next_token(
    context: np.ndarray,
    experts: dict,
    stats: TfIdfStats,
    centroids: list[ExpertCentroid],
    k: int,
    weighted: bool = False,
) -> tuple[np.ndarray, Selection]:
    """Ensemble next-token distribution over the byte vocabulary.

    Each selected expert runs a forward pass on the context; the final
    position's softmax distributions are averaged (uniformly by default,
    similarity-weighted behind the flag), reduced in selection order.
    """
    selection = select_experts(context, stats, centroids, k)
    missing = [n for n in selection.names if n not in experts]
    if missing:
        raise ContractError(f"no model for selected experts {missing}")
    vocabs = {experts[n].config.vocab_size for n in selection.names}
    if len(vocabs) != 1:
        raise ContractError(f"experts disagree on vocabulary size: {sorted(vocabs)}")
    dists = [_final_distribution(experts[n], np.asarray(context)) for n in selection.names]
    if weighted and not selection.fallback:
        w = np.clip(selection.similarities, 0.0, None)
        w = w / w.sum() if w.sum() > 0 else np.full(k, 1.0 / k)
    else:
        w = np.full(k, 1.0 / k)
    probs = np.zeros_like(dists[0])
    for wi, di in zip(w, dists):
        probs += wi * di
    return probs, selection


def btm_sequence_nll(
    window: np.ndarray,
    experts: dict,
    stats: TfIdfStats,
    centroids: list[ExpertCentroid],
    k: int,
    weighted: bool = False,
) -> tuple[float, Selection]:
    """Teacher-forced mean NLL of one window under the ensemble.

    Experts are selected once from the whole window's bytes; each selected
    expert runs a single forward pass and the per-position distributions are
    averaged before scoring the targets. This is the sequence-level use of
    the same per-token averaging rule.
    """
    window = np.asarray(window)
    if window.size < 2:
        raise ContractError("window must hold at least two tokens")
    selection = select_experts(window, stats, centroids, k)
    missing = [n for n in selection.names if n not in experts]
    if missing:
        raise ContractError(f"no model for selected experts {missing}")
    inputs, targets = window[None, :-1], window[1:]
    dists = []
    for name in selection.names:
        logits = experts[name].forward(inputs).data[0].astype(np.float64)  # [T-1, V]
        e = np.exp(logits - logits.max(axis=-1, keepdims=True))
        dists.append(e / e.sum(axis=-1, keepdims=True))
    if weighted and not selection.fallback:
        w = np.clip(selection.similarities, 0.0, None)
        w = w / w.sum() if w.sum() > 0 else np.full(k, 1.0 / k)
    else:
        w = np.full(k, 1.0 / k)
    mean = np.zeros_like(dists[0])
    for wi, di in zip(w, dists):
        mean += wi * di
    picked = mean[np.arange(targets.size), targets]
    return float(-np.log(picked).mean()), selection


# ---------------------------------------------------------------------------
# centroid store


def save_centroids(path, stats: TfIdfStats, centroids: list[ExpertCentroid]) -> None:
    buf = bytearray()
    buf += CENTROID_MAGIC
    buf += struct.pack("<I", CENTROID_VERSION)
    buf += struct.pack("<I", stats.n_docs)
    buf += struct.pack("<I", stats.n_terms)
    buf += stats.terms.astype("<u4").tobytes()
    buf += stats.idf.astype("<f4").tobytes()
    buf += struct.pack("<I", len(centroids))
    for c in centroids:
        nb = c.name.encode("utf-8")
        buf += struct.pack("<I", len(nb)) + nb
        buf += c.vector.astype("<f4").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    Path(path).write_bytes(bytes(buf))


def load_centroids(path) -> tuple[TfIdfStats, list[ExpertCentroid]]:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != CENTROID_MAGIC:
        raise CheckpointError(f"{path}: not a centroid store")
    if zlib.crc32(raw[:-4]) != struct.unpack("<I", raw[-4:])[0]:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated)")
    off = 4
    version, n_docs, n_terms = struct.unpack_from("<III", raw, off)
    off += 12
    if version != CENTROID_VERSION:
        raise CheckpointError(f"{path}: unsupported centroid-store version {version}")
    terms = np.frombuffer(raw, dtype="<u4", count=n_terms, offset=off).astype(np.int64)
    off += 4 * n_terms
    idf = np.frombuffer(raw, dtype="<f4", count=n_terms, offset=off).astype(np.float64)
    off += 4 * n_terms
    (n_experts,) = struct.unpack_from("<I", raw, off)
    off += 4
    centroids = []
    for _ in range(n_experts):
        (name_len,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        vec = np.frombuffer(raw, dtype="<f4", count=n_terms, offset=off).astype(np.float64)
        off += 4 * n_terms
        # f32 rounding keeps the norm within the unit tolerance; not
        # renormalizing makes save(load(x)) byte-identical
        centroids.append(ExpertCentroid(name=name, vector=vec))
    return TfIdfStats(terms=terms, idf=idf, n_docs=n_docs), centroids
