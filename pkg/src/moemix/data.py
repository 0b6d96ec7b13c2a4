"""Domain corpora and batching.

Three synthetic byte-level domains stand in for large-scale math, code and
encyclopedia corpora: integer equations, nested-bracket assignment programs,
and template-grammar prose. They are cheap to generate, fully reproducible
from a seed, and distributionally far apart at the byte-bigram level, which
is what the specialization experiments need. A ``file:`` source ingests real
text (one document per blank-line-separated block) for anyone who wants to
swap in actual data.

Tokenization is the identity byte map, vocabulary 256.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

SYNTHETIC_SOURCES = ("synthetic:arith", "synthetic:code", "synthetic:text")
DEFAULT_CORPUS_BYTES = 200_000


def tokenize(data: bytes) -> np.ndarray:
    """Bytes to token ids (identity map)."""
    return np.frombuffer(bytes(data), dtype=np.uint8).astype(np.int64)


def detokenize(ids) -> bytes:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() > 255):
        raise DataError("token ids outside byte range")
    return ids.astype(np.uint8).tobytes()


@dataclass(frozen=True)
class CorpusSpec:
    """One domain corpus: where its documents come from and how to split them."""

    name: str
    source: str
    rng_seed: int = 0
    holdout_fraction: float = 0.1

    def __post_init__(self):
        if not (self.source in SYNTHETIC_SOURCES or self.source.startswith("file:")):
            raise DataError(f"unknown corpus source {self.source!r}")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise DataError(f"holdout_fraction must be in [0, 1), got {self.holdout_fraction}")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "source": self.source,
            "rng_seed": self.rng_seed,
            "holdout_fraction": self.holdout_fraction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


# ---------------------------------------------------------------------------
# synthetic generators


def _arith_doc(rng: np.random.Generator, min_bytes: int) -> bytes:
    lines = []
    size = 0
    while size <= min_bytes:
        a = int(rng.integers(0, 1000))
        b = int(rng.integers(0, 1000))
        op = ("+", "-", "*")[int(rng.integers(0, 3))]
        c = a + b if op == "+" else a - b if op == "-" else a * b
        line = f"{a} {op} {b} = {c}"
        lines.append(line)
        size += len(line) + 1
    return "\n".join(lines).encode()


_CODE_INTS = tuple(str(i) for i in range(10))


def _code_expr(rng: np.random.Generator, depth: int) -> str:
    roll = rng.random()
    if depth <= 0 or roll < 0.35:
        if rng.random() < 0.5:
            return f"v{int(rng.integers(0, 8))}"
        return _CODE_INTS[int(rng.integers(0, 10))]
    if roll < 0.8:
        op = ("+", "-", "*")[int(rng.integers(0, 3))]
        return f"( {_code_expr(rng, depth - 1)} {op} {_code_expr(rng, depth - 1)} )"
    return f"[ {_code_expr(rng, depth - 1)} , {_code_expr(rng, depth - 1)} ]"


def _code_doc(rng: np.random.Generator, min_bytes: int) -> bytes:
    lines = []
    size = 0
    while size <= min_bytes:
        target = f"v{int(rng.integers(0, 8))}"
        stmt = f"{target} = {_code_expr(rng, 3)} ;"
        if rng.random() < 0.3:
            body = f"{target} = {_code_expr(rng, 2)} ;"
            stmt = f"if ( v{int(rng.integers(0, 8))} ) {{ {body} }}"
        lines.append(stmt)
        size += len(stmt) + 1
    return "\n".join(lines).encode()


_NOUNS = ("river", "castle", "merchant", "library", "mountain", "harbor",
          "garden", "violin", "lantern", "archive")
_ADJS = ("ancient", "quiet", "gilded", "narrow", "restless", "pale",
         "weathered", "distant")
_VERBS = ("overlooks", "guards", "remembers", "borders", "survives",
          "shelters", "echoes through", "belongs to")
_OPENERS = ("for centuries", "according to the records", "in the old quarter",
            "long before the war", "every autumn")


def _text_doc(rng: np.random.Generator, min_bytes: int) -> bytes:
    def pick(words):
        return words[int(rng.integers(0, len(words)))]

    sentences = []
    size = 0
    while size <= min_bytes:
        s = f"the {pick(_ADJS)} {pick(_NOUNS)} {pick(_VERBS)} the {pick(_ADJS)} {pick(_NOUNS)}"
        if rng.random() < 0.4:
            s = f"{pick(_OPENERS)}, {s}"
        s = s + "."
        sentences.append(s)
        size += len(s) + 1
    return " ".join(sentences).encode()


_GENERATORS = {
    "synthetic:arith": _arith_doc,
    "synthetic:code": _code_doc,
    "synthetic:text": _text_doc,
}


def generate_domain_corpus(
    spec: CorpusSpec, n_bytes: int, min_doc_bytes: int = 320
) -> list[bytes]:
    """Documents for a corpus spec, deterministic per (source, rng_seed).

    Synthetic documents are at least ``min_doc_bytes`` long so full-context
    training windows fit inside a single document.
    """
    if n_bytes <= 0:
        raise DataError(f"n_bytes must be positive, got {n_bytes}")
    if spec.source.startswith("file:"):
        path = Path(spec.source[len("file:"):])
        if not path.exists():
            raise DataError(f"corpus file not found: {path}")
        blob = path.read_bytes()
        docs = [d.strip() for d in blob.split(b"\n\n") if d.strip()]
        if not docs:
            raise DataError(f"corpus file {path} holds no documents")
        return docs
    gen = _GENERATORS[spec.source]
    rng = np.random.default_rng(spec.rng_seed)
    docs: list[bytes] = []
    total = 0
    while total < n_bytes:
        doc = gen(rng, min_doc_bytes)
        docs.append(doc)
        total += len(doc)
    return docs


class Corpus:
    """Built corpus: documents plus a deterministic train/holdout split.

    The split happens at document granularity; holdout indices are a seeded
    permutation prefix, so train and holdout documents never overlap and the
    same spec always reproduces the same split.
    """

    def __init__(self, spec: CorpusSpec, documents: list[bytes]):
        if not documents:
            raise DataError(f"corpus {spec.name!r} is empty")
        self.spec = spec
        self.documents = list(documents)
        n = len(documents)
        order = np.random.default_rng(spec.rng_seed ^ 0x5EED).permutation(n)
        n_hold = int(round(spec.holdout_fraction * n)) if spec.holdout_fraction > 0 else 0
        n_hold = min(n_hold, n - 1) if n > 1 else 0
        self.holdout_indices = np.sort(order[:n_hold])
        self.train_indices = np.sort(order[n_hold:])

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def train_documents(self) -> list[bytes]:
        return [self.documents[i] for i in self.train_indices]

    @property
    def holdout_documents(self) -> list[bytes]:
        return [self.documents[i] for i in self.holdout_indices]

    def n_bytes(self) -> int:
        return sum(len(d) for d in self.documents)


def build_corpus(spec: CorpusSpec, n_bytes: int = DEFAULT_CORPUS_BYTES) -> Corpus:
    return Corpus(spec, generate_domain_corpus(spec, n_bytes))


@dataclass
class MixtureSpec:
    """Weighted blend of corpora. Weights only need to be positive (for
    example percentage tables); they are normalized to probabilities here."""

    components: list[tuple[CorpusSpec, float]]
    corpus_bytes: int = DEFAULT_CORPUS_BYTES

    def __post_init__(self):
        if not self.components:
            raise DataError("mixture needs at least one component")
        weights = np.array([w for _, w in self.components], dtype=np.float64)
        if (weights <= 0).any():
            raise DataError("mixture weights must be positive")
        self.probabilities = weights / weights.sum()
        assert abs(self.probabilities.sum() - 1.0) < 1e-9
        self._corpora: list[Corpus] | None = None

    def corpora(self) -> list[Corpus]:
        if self._corpora is None:
            self._corpora = [build_corpus(spec, self.corpus_bytes) for spec, _ in self.components]
        return self._corpora

    def to_dict(self) -> dict:
        return {
            "components": [
                {"corpus": spec.to_dict(), "weight": float(w)} for spec, w in self.components
            ],
            "corpus_bytes": self.corpus_bytes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureSpec":
        comps = [
            (CorpusSpec.from_dict(c["corpus"]), float(c["weight"])) for c in d["components"]
        ]
        return cls(comps, corpus_bytes=d.get("corpus_bytes", DEFAULT_CORPUS_BYTES))


@dataclass
class TokenBatch:
    tokens: np.ndarray  # [B, T] int64
    tags: list[str]  # source corpus name per row


def _window(doc: bytes, t: int, rng: np.random.Generator) -> np.ndarray:
    ids = tokenize(doc)
    if ids.size < t:  # short documents (file ingestion) cycle-extend
        ids = np.resize(ids, t)
    off = int(rng.integers(0, ids.size - t + 1))
    return ids[off : off + t]


def sample_batch(mixture: MixtureSpec, b: int, t: int, rng: np.random.Generator) -> TokenBatch:
    """B contiguous T-byte windows, each row's corpus drawn from the mixture."""
    corpora = mixture.corpora()
    choices = rng.choice(len(corpora), size=b, p=mixture.probabilities)
    rows, tags = [], []
    for ci in choices:
        corpus = corpora[ci]
        train = corpus.train_documents
        if not train:
            raise DataError(f"corpus {corpus.name!r} has no training documents")
        doc = train[int(rng.integers(0, len(train)))]
        rows.append(_window(doc, t, rng))
        tags.append(corpus.name)
    return TokenBatch(np.stack(rows), tags)


def single_corpus_mixture(spec: CorpusSpec, corpus_bytes: int = DEFAULT_CORPUS_BYTES) -> MixtureSpec:
    return MixtureSpec([(spec, 1.0)], corpus_bytes=corpus_bytes)


def heldout_stream(corpus: Corpus, t: int) -> list[np.ndarray]:
    """Deterministic evaluation windows: every holdout document cut into
    consecutive non-overlapping T-byte pieces (trailing remainder dropped)."""
    if not len(corpus.holdout_indices):
        raise DataError(f"corpus {corpus.name!r} has an empty holdout split")
    windows = []
    for doc in corpus.holdout_documents:
        ids = tokenize(doc)
        for start in range(0, ids.size - t + 1, t):
            windows.append(ids[start : start + t])
    if not windows:
        raise DataError(f"holdout documents of {corpus.name!r} are shorter than {t} bytes")
    return windows


def heldout_batches(corpus: Corpus, b: int, t: int, limit: int | None = None) -> list[np.ndarray]:
    """Holdout windows stacked into [<=B, T] batches, deterministic order."""
    windows = heldout_stream(corpus, t)
    if limit is not None:
        windows = windows[:limit]
    return [np.stack(windows[i : i + b]) for i in range(0, len(windows), b)]
