"""Label vocabulary, text embeddings and the seen/unseen split by spherical k-means."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from projgen.corpus import Corpus

logger = logging.getLogger(__name__)

SYNSET_RE = re.compile(r"^(?P<lemma>.+)\.(?P<pos>[nvasr])\.(?P<sense>\d+)$")

SEEN = "seen"
UNSEEN = "unseen"


class EmbeddingError(RuntimeError):
    pass


class KMeansError(ValueError):
    pass


def normalize_label(raw: str) -> str:
    return " ".join(raw.strip().lower().split())


def lemma_of(raw: str) -> tuple[str, bool]:
    """Bare lemma of a synset-style token (``dog.n.01`` -> ``dog``); plain labels pass through."""
    s = normalize_label(raw)
    m = SYNSET_RE.match(s)
    if m:
        return m.group("lemma").replace("_", " "), True
    return s, False


@dataclass(frozen=True)
class LabelEntry:
    count: int
    origin_synsets: frozenset = frozenset()


@dataclass(frozen=True)
class LabelVocab:
    entries: dict[str, LabelEntry] = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    def __contains__(self, label):
        return label in self.entries

    def labels(self) -> list[str]:
        return sorted(self.entries)

    def counts(self) -> dict[str, int]:
        return {k: v.count for k, v in self.entries.items()}

    def to_json(self) -> dict:
        return {k: {"count": v.count, "origin_synsets": sorted(v.origin_synsets)} for k, v in sorted(self.entries.items())}

    @classmethod
    def from_json(cls, d: dict) -> "LabelVocab":
        return cls({k: LabelEntry(v["count"], frozenset(v["origin_synsets"])) for k, v in d.items()})


def vocab_from_corpus(corpus: Corpus, origins: dict[str, set] | None = None) -> LabelVocab:
    counts = Counter(a.raw_label for a in corpus.annotations)
    origins = origins or {}
    return LabelVocab({lab: LabelEntry(n, frozenset(origins.get(lab, ()))) for lab, n in counts.items()})


def dedup_synsets_by_lemma(corpus: Corpus) -> tuple[Corpus, LabelVocab]:
    """Keep only the most frequent synset per lemma and relabel its annotations with the lemma.

    Ties go to the lexicographically smaller synset string. Plain labels compete under their own
    lowercased text, so a plain ``dog`` and synset ``dog.n.01`` are rivals for the lemma ``dog``.
    """
    variant_counts = Counter(normalize_label(a.raw_label) for a in corpus.annotations)
    by_lemma: dict[str, list[str]] = defaultdict(list)
    for variant in variant_counts:
        by_lemma[lemma_of(variant)[0]].append(variant)
    winner = {}
    for lemma, variants in by_lemma.items():
        winner[lemma] = min(variants, key=lambda v: (-variant_counts[v], v))
    kept = []
    dropped = 0
    for a in corpus.annotations:
        variant = normalize_label(a.raw_label)
        lemma = lemma_of(variant)[0]
        if winner[lemma] != variant:
            dropped += 1
            continue
        kept.append(dataclasses.replace(a, raw_label=lemma))
    origins = {lemma: {v} if lemma_of(v)[1] else set() for lemma, v in winner.items()}
    out = corpus.with_annotations(kept, dropped_synset_variants=dropped)
    return out, vocab_from_corpus(out, origins)


def filter_rare_labels(corpus: Corpus, vocab: LabelVocab, min_count: int = 10) -> tuple[Corpus, LabelVocab]:
    """Remove labels with fewer than ``min_count`` annotations."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    keep = {lab for lab, e in vocab.entries.items() if e.count >= min_count}
    anns = [a for a in corpus.annotations if a.raw_label in keep]
    out = corpus.with_annotations(anns, dropped_rare=len(corpus.annotations) - len(anns))
    counts = Counter(a.raw_label for a in anns)
    return out, LabelVocab({lab: LabelEntry(counts[lab], vocab.entries[lab].origin_synsets) for lab in keep})


# ---------------------------------------------------------------------------
# embedding providers

class EmbeddingProvider(Protocol):
    provider_id: str

    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


def _unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n == 0, 1.0, n)


class HashEmbedder:
    """Offline fallback: seeded hash of the text -> Gaussian vector -> unit norm."""

    def __init__(self, dim: int = 384, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self.provider_id = f"hash-{dim}-s{seed}"

    def embed(self, texts):
        out = np.empty((len(texts), self.dim))
        for i, t in enumerate(texts):
            h = hashlib.sha256(f"{self.seed}\x00{t}".encode("utf-8")).digest()
            rng = np.random.default_rng(int.from_bytes(h[:8], "little"))
            out[i] = rng.standard_normal(self.dim)
        return _unit(out)


class TableEmbedder:
    """Fixed lookup table, falling back to another provider for strings not in the table."""

    def __init__(self, table: dict[str, np.ndarray], provider_id: str = "table", fallback=None):
        self.table = {k: _unit(v) for k, v in table.items()}
        dims = {v.shape[-1] for v in self.table.values()}
        if len(dims) > 1:
            raise ValueError("table vectors have mixed dimensions")
        self.dim = dims.pop() if dims else 0
        self.fallback = fallback or HashEmbedder(self.dim or 16)
        self.provider_id = provider_id

    def embed(self, texts):
        out = []
        for t in texts:
            if t in self.table:
                out.append(self.table[t])
            else:
                out.append(self.fallback.embed([t])[0])
        return np.stack(out) if out else np.zeros((0, self.dim))


class SentenceTransformerEmbedder:
    """Real text embeddings (``all-MiniLM-L6-v2`` by default); loaded lazily."""

    def __init__(self, model_name: str = "sentence-transformers/all-MiniLM-L6-v2", batch_size: int = 256):
        self.model_name = model_name
        self.batch_size = batch_size
        self.provider_id = f"st:{model_name}"
        self._model = None

    def embed(self, texts):
        if self._model is None:
            from sentence_transformers import SentenceTransformer

            self._model = SentenceTransformer(self.model_name)
        vecs = self._model.encode(list(texts), batch_size=self.batch_size, convert_to_numpy=True)
        return _unit(vecs)


class EmbeddingCache:
    """Vectors keyed by ``(provider_id, text)``; persisted as JSON so reruns need no provider."""

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = Path(path) if path else None
        self._store: dict[tuple[str, str], np.ndarray] = {}
        if self.path and self.path.exists():
            for row in json.loads(self.path.read_text()):
                self._store[(row["provider"], row["text"])] = np.asarray(row["vector"], dtype=np.float64)

    def get(self, provider_id, text):
        return self._store.get((provider_id, text))

    def put(self, provider_id, text, vec):
        self._store[(provider_id, text)] = np.asarray(vec, dtype=np.float64)

    def __len__(self):
        return len(self._store)

    def save(self):
        if self.path is None:
            return
        rows = [{"provider": p, "text": t, "vector": v.tolist()} for (p, t), v in sorted(self._store.items())]
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_name(self.path.name + ".tmp")
        tmp.write_text(json.dumps(rows))
        os.replace(tmp, self.path)


def embed_labels(labels: Iterable[str], provider, cache: EmbeddingCache | None = None) -> dict[str, np.ndarray]:
    """One unit vector per label, served from ``cache`` when possible."""
    labels = list(dict.fromkeys(labels))
    cache = cache if cache is not None else EmbeddingCache()
    missing = [lab for lab in labels if cache.get(provider.provider_id, lab) is None]
    if missing:
        try:
            vecs = provider.embed(missing)
        except Exception as e:
            raise EmbeddingError(f"provider {provider.provider_id} failed; missing: {missing[:20]}"
                                 f"{' ...' if len(missing) > 20 else ''}") from e
        for lab, v in zip(missing, _unit(vecs)):
            cache.put(provider.provider_id, lab, v)
    return {lab: cache.get(provider.provider_id, lab) for lab in labels}


def make_provider(spec: dict | None):
    """Build a provider from a config mapping ``{"id": "hash"|"sentence-transformers", ...}``."""
    spec = dict(spec or {"id": "hash"})
    kind = spec.pop("id")
    if kind == "hash":
        return HashEmbedder(**spec)
    if kind == "sentence-transformers":
        return SentenceTransformerEmbedder(**spec)
    raise ValueError(f"unknown embedding provider {kind!r}")


# ---------------------------------------------------------------------------
# spherical k-means

@dataclass
class KMeansResult:
    assignment: np.ndarray
    centroids: np.ndarray
    objective: float
    n_iter: int


def _kmeanspp_init(X, k, rng):
    n = len(X)
    centers = [int(rng.integers(n))]
    for _ in range(1, k):
        sims = X @ X[centers].T
        dist = np.clip(1.0 - sims.max(axis=1), 0.0, None)
        total = dist.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=dist / total))
        centers.append(idx)
    return X[centers].copy()


def _centroids(X, assignment, k, old):
    C = np.zeros((k, X.shape[1]))
    np.add.at(C, assignment, X)
    norms = np.linalg.norm(C, axis=1)
    C[norms > 0] /= norms[norms > 0, None]
    C[norms == 0] = old[norms == 0]
    return C


def _single_run(X, k, rng, max_iters, tol):
    C = _kmeanspp_init(X, k, rng)
    assignment = None
    it = 0
    for it in range(1, max_iters + 1):
        sims = X @ C.T
        new = np.argmax(sims, axis=1)
        # empty cluster: reseed with the point least similar to its centroid
        for c in range(k):
            if not np.any(new == c):
                own = sims[np.arange(len(X)), new]
                counts = np.bincount(new, minlength=k)
                own = np.where(counts[new] > 1, own, np.inf)
                worst = int(np.argmin(own))
                new[worst] = c
                C[c] = X[worst]
        if assignment is not None and np.array_equal(new, assignment):
            break
        assignment = new
        C_new = _centroids(X, assignment, k, C)
        moved = float(np.max(np.linalg.norm(C_new - C, axis=1)))
        C = C_new
        if moved < tol:
            sims = X @ C.T
            if np.array_equal(np.argmax(sims, axis=1), assignment):
                break
    obj = float(np.sum(X * C[assignment]))
    return KMeansResult(assignment, C, obj, it)


def spherical_kmeans(vectors, k: int = 2, seed: int = 0, max_iters: int = 100, tol: float = 1e-10,
                     n_init: int = 10) -> KMeansResult:
    """k-means on the unit sphere under cosine similarity, best of ``n_init`` k-means++ restarts."""
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise KMeansError("need a non-empty 2-d array of vectors")
    if not np.allclose(np.linalg.norm(X, axis=1), 1.0, atol=1e-6):
        raise KMeansError("vectors must be unit norm")
    n_distinct = len(np.unique(np.round(X, 12), axis=0))
    if k < 1 or k > n_distinct:
        raise KMeansError(f"K={k} exceeds the {n_distinct} distinct points")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        res = _single_run(X, k, rng, max_iters, tol)
        if best is None or res.objective > best.objective + 1e-12:
            best = res
    return best


def kmeans_objective(X, assignment) -> float:
    """Sum of cosines between points and the normalised mean of their cluster."""
    X = np.asarray(X)
    total = 0.0
    for c in np.unique(assignment):
        total += float(np.linalg.norm(X[assignment == c].sum(axis=0)))
    return total


# ---------------------------------------------------------------------------
# split

@dataclass(frozen=True)
class LabelSplit:
    assignment: dict[str, str]
    centroids: tuple[tuple[float, ...], ...]
    seed: int
    provider_id: str
    seen_cluster: int = 0

    def __post_init__(self):
        bad = set(self.assignment.values()) - {SEEN, UNSEEN}
        if bad:
            raise ValueError(f"bad group names {bad}")

    @property
    def seen(self) -> frozenset:
        return frozenset(k for k, v in self.assignment.items() if v == SEEN)

    @property
    def unseen(self) -> frozenset:
        return frozenset(k for k, v in self.assignment.items() if v == UNSEEN)

    def group(self, label: str) -> str:
        return self.assignment[label]

    def to_json(self) -> dict:
        return {"assignment": dict(sorted(self.assignment.items())), "centroids": [list(c) for c in self.centroids],
                "seed": self.seed, "provider_id": self.provider_id, "seen_cluster": self.seen_cluster}

    @classmethod
    def from_json(cls, d) -> "LabelSplit":
        return cls(dict(d["assignment"]), tuple(tuple(c) for c in d["centroids"]), d["seed"], d["provider_id"],
                   d.get("seen_cluster", 0))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> "LabelSplit":
        return cls.from_json(json.loads(Path(path).read_text()))


def assign_split(assignment, labels: Sequence[str], centroids, seed: int, provider_id: str,
                 seen_cluster: int | None = None) -> LabelSplit:
    """The cluster with more unique labels becomes SEEN (ties: cluster 0) unless overridden."""
    assignment = np.asarray(assignment)
    if seen_cluster is None:
        sizes = np.bincount(assignment, minlength=2)
        seen_cluster = 0 if sizes[0] >= sizes[1] else 1
    groups = {lab: SEEN if int(c) == seen_cluster else UNSEEN for lab, c in zip(labels, assignment)}
    cents = tuple(tuple(float(x) for x in c) for c in np.asarray(centroids))
    return LabelSplit(groups, cents, seed, provider_id, int(seen_cluster))


def split_labels(vocab: LabelVocab, embeddings: dict[str, np.ndarray], seed: int = 0, provider_id: str = "",
                 n_init: int = 10, seen_cluster: int | None = None) -> LabelSplit:
    labels = vocab.labels()
    X = np.stack([embeddings[lab] for lab in labels])
    res = spherical_kmeans(X, k=2, seed=seed, n_init=n_init)
    logger.info("k-means converged in %d iterations, objective %.4f", res.n_iter, res.objective)
    return assign_split(res.assignment, labels, res.centroids, seed, provider_id, seen_cluster)
