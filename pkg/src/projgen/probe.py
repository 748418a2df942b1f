"""FFN key-value probe over visual prefixes.

Each prefix (BOS, visual tokens and the box text, with no label and no EOS) is run through a traced
forward pass. At the final prefix position the top-activated keys of every layer are recorded. Keys
are profiled by the labels of the prefixes that activate them, and their value columns are read
through the unembedding.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

from projgen.bridge import project
from projgen.prompts import DEFAULT_TEMPLATE, PromptSample, format_box

REAL = "real"
REAL_TOP1 = "real_top1"
BASELINE = "baseline"
WORD_MARKERS = ("Ġ", "▁", "##")


class ProbeError(ValueError):
    pass


@dataclass(frozen=True)
class VisualPrefix:
    item_id: str
    image_id: str
    norm_box: tuple[float, float, float, float]
    truth_label: str
    group: str

    def with_label(self, label: str) -> "VisualPrefix":
        return VisualPrefix(self.item_id, self.image_id, self.norm_box, label, self.group)


def build_visual_prefixes(pool: Sequence[PromptSample], group: str) -> list[VisualPrefix]:
    return [VisualPrefix(s.sample_id, s.image_id, s.norm_box, s.label, group)
            for s in sorted(pool, key=lambda s: s.sample_id)]


def prefix_ids(prefix: VisualPrefix, tokenizer, template: str = DEFAULT_TEMPLATE) -> list[int]:
    """Text token ids after the visual slots."""
    return tokenizer.encode(format_box(prefix.norm_box, template))


def prefix_embeds(prefix: VisualPrefix, projection, encoder, lm, template: str = DEFAULT_TEMPLATE,
                  features=None) -> torch.Tensor:
    patches = features(prefix) if features is not None else encoder.encode(prefix.image_id, prefix.norm_box).patches
    visual = projection(patches) if isinstance(projection, torch.nn.Module) else project(patches, projection)
    bos = lm.token_embed([lm.bos_id])
    parts = [bos, visual.to(bos.dtype), lm.token_embed(prefix_ids(prefix, lm.tokenizer, template))]
    return torch.cat(parts, dim=0)


# ---------------------------------------------------------------------------
# key extraction


@dataclass(frozen=True)
class KeyActivationRecord:
    layer: int
    key_index: int
    coefficient: float
    rank: int
    item_id: str
    truth_label: str


def topk_indices(values, k: int) -> list[int]:
    """Indices of the ``k`` largest values, descending; ties keep the lower index first."""
    v = np.asarray(values, dtype=np.float64)
    if k > v.shape[-1]:
        raise ProbeError(f"k={k} exceeds {v.shape[-1]} candidates")
    return [int(i) for i in np.argsort(-v, kind="stable")[:k]]


@torch.no_grad()
def extract_topk_keys(prefix: VisualPrefix, projection, encoder, lm, k: int = 3,
                      template: str = DEFAULT_TEMPLATE, features=None):
    """Top-``k`` memory coefficients per layer at the final prefix position.

    Returns the records and the trace (whose ``ffn_inputs`` allow independent recomputation).
    """
    if k > lm.d_ffn:
        raise ProbeError(f"k={k} exceeds d_ffn={lm.d_ffn}")
    embeds = prefix_embeds(prefix, projection, encoder, lm, template, features)
    trace = lm.traced_forward(embeds, [embeds.shape[0] - 1])
    records = []
    for layer in range(lm.num_layers):
        h = trace.coefficients[layer, 0].detach().cpu().to(torch.float64).numpy()
        for rank, j in enumerate(topk_indices(h, k)):
            records.append(KeyActivationRecord(layer, j, float(h[j]), rank, prefix.item_id, prefix.truth_label))
    return records, trace


def extract_all(prefixes: Sequence[VisualPrefix], projection, encoder, lm, k: int = 3,
                template: str = DEFAULT_TEMPLATE) -> list[KeyActivationRecord]:
    from projgen.train import FeatureCache

    feats = FeatureCache(encoder)
    out = []
    for p in prefixes:
        out.extend(extract_topk_keys(p, projection, encoder, lm, k, template, feats)[0])
    return out


# ---------------------------------------------------------------------------
# key profiles and coherence


@dataclass
class KeyProfile:
    layer: int
    key_index: int
    histogram: Counter = field(default_factory=Counter)

    @property
    def activation_count(self) -> int:
        return sum(self.histogram.values())

    @property
    def top3_labels(self) -> tuple[str, ...]:
        ranked = sorted(self.histogram.items(), key=lambda kv: (-kv[1], kv[0]))
        return tuple(lab for lab, _ in ranked[:3])

    def share(self, label: str) -> float:
        return self.histogram[label] / self.activation_count

    @property
    def key_id(self) -> str:
        return f"k_{self.key_index}^{self.layer}"

    @property
    def eligible(self) -> bool:
        return len(self.histogram) >= 3


def aggregate_key_profiles(records: Iterable[KeyActivationRecord]) -> dict[tuple[int, int], KeyProfile]:
    profiles: dict[tuple[int, int], KeyProfile] = {}
    for r in records:
        key = (r.layer, r.key_index)
        if key not in profiles:
            profiles[key] = KeyProfile(r.layer, r.key_index)
        profiles[key].histogram[r.truth_label] += 1
    return dict(sorted(profiles.items()))


def unique_key_counts(profiles: Mapping[tuple[int, int], KeyProfile]) -> dict[str, int]:
    """Unique keys counted as (layer, index) pairs and as indices pooled over layers."""
    return {"layer_index_pairs": len(profiles), "pooled_indices": len({j for _, j in profiles})}


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def pairwise_cosines(labels: Sequence[str], embeddings: Mapping[str, np.ndarray]) -> list[float]:
    vecs = [_unit(embeddings[lab]) for lab in labels]
    return [float(a @ b) for a, b in combinations(vecs, 2)]


@dataclass
class LayerDistributions:
    """Per-layer lists of a statistic for the real population and its random baseline."""

    num_layers: int
    real: dict[int, list[float]] = field(default_factory=dict)
    baseline: dict[int, list[float]] = field(default_factory=dict)

    def __post_init__(self):
        for layer in range(self.num_layers):
            self.real.setdefault(layer, [])
            self.baseline.setdefault(layer, [])

    def means(self, population: str = REAL) -> list[float]:
        src = self.real if population == REAL else self.baseline
        return [float(np.mean(src[layer])) if src[layer] else math.nan for layer in range(self.num_layers)]


def key_semantic_similarity(profiles: Mapping[tuple[int, int], KeyProfile], embeddings: Mapping[str, np.ndarray],
                            group_labels: Sequence[str], num_layers: int, seed: int = 0) -> LayerDistributions:
    """Pairwise cosines among each eligible key's top-3 labels, and among 3 random group labels."""
    pool = sorted(group_labels)
    if len(pool) < 3:
        raise ProbeError("baseline needs at least 3 labels in the group")
    rng = np.random.default_rng([seed, 31])
    out = LayerDistributions(num_layers)
    for (layer, _), prof in sorted(profiles.items()):
        if not prof.eligible:
            continue
        out.real[layer].extend(pairwise_cosines(prof.top3_labels, embeddings))
        pick = [pool[i] for i in rng.choice(len(pool), size=3, replace=False)]
        out.baseline[layer].extend(pairwise_cosines(pick, embeddings))
    return out


# ---------------------------------------------------------------------------
# values


def project_value_to_vocab(value, lm, k: int = 3) -> list[str]:
    """Top-``k`` tokens of the unembedded value column, descending (ties -> lower id)."""
    logits = lm.unembed(value).detach().cpu().to(torch.float64).numpy()
    return [lm.tokenizer.id_to_token(i) for i in topk_indices(logits, k)]


def normalize_token(token: str) -> str:
    t = token.strip()
    for m in WORD_MARKERS:
        if t.startswith(m):
            t = t[len(m):]
    return t.strip().lower()


def tokens_agree(tokens: Sequence[str], label: str) -> bool:
    label = label.strip().lower()
    targets = {label}
    if label.split():
        targets.add(label.split()[0])
    return any(normalize_token(t) in targets for t in tokens if normalize_token(t))


def token_label_cosine(tokens: Sequence[str], label: str, embed: Callable[[Sequence[str]], np.ndarray]) -> float | None:
    words = [normalize_token(t) for t in tokens]
    words = [w for w in words if w]
    if not words:
        return None
    vecs = embed(words + [label.strip().lower()])
    lab = _unit(vecs[-1])
    return float(np.mean([_unit(v) @ lab for v in vecs[:-1]]))


@dataclass(frozen=True)
class ValueProjectionRecord:
    layer: int
    value_index: int
    top3_tokens: tuple[str, ...]
    agreement: bool
    cosine_to_label: float | None
    baseline: bool
    rank: int
    item_id: str
    truth_label: str


class ValueReader:
    """Memoised top-3 token readout of value columns."""

    def __init__(self, lm, k: int = 3):
        self.lm = lm
        self.k = k
        self._cache: dict[tuple[int, int], tuple[str, ...]] = {}

    def __call__(self, layer: int, index: int) -> tuple[str, ...]:
        key = (layer, index)
        if key not in self._cache:
            self._cache[key] = tuple(project_value_to_vocab(self.lm.value_vector(layer, index), self.lm, self.k))
        return self._cache[key]


@dataclass
class ValueAlignment:
    records: list[ValueProjectionRecord]
    num_layers: int

    def population(self, name: str) -> list[ValueProjectionRecord]:
        if name == REAL:
            return [r for r in self.records if not r.baseline]
        if name == REAL_TOP1:
            return [r for r in self.records if not r.baseline and r.rank == 0]
        if name == BASELINE:
            return [r for r in self.records if r.baseline]
        raise ProbeError(f"unknown population {name!r}")

    def per_layer(self, metric: str, population: str) -> dict[int, list[float]]:
        out = {layer: [] for layer in range(self.num_layers)}
        for r in self.population(population):
            if metric == "agreement":
                out[r.layer].append(float(r.agreement))
            elif r.cosine_to_label is not None:
                out[r.layer].append(r.cosine_to_label)
        return out

    def rate(self, population: str) -> tuple[int, int]:
        recs = self.population(population)
        return sum(r.agreement for r in recs), len(recs)


def value_alignment(records: Sequence[KeyActivationRecord], lm, embed: Callable[[Sequence[str]], np.ndarray] | None,
                    seed: int = 0, reader: ValueReader | None = None) -> ValueAlignment:
    """Agreement and cosine of each activated value's top tokens with the prefix label, plus the
    same metrics for 3 uniformly random value columns per layer per prefix."""
    reader = reader or ValueReader(lm)
    rng = np.random.default_rng([seed, 37])
    out = []
    by_prefix: dict[str, list[KeyActivationRecord]] = defaultdict(list)
    for r in records:
        by_prefix[r.item_id].append(r)

    def make(layer, j, rank, item_id, label, is_base):
        toks = reader(layer, j)
        cos = token_label_cosine(toks, label, embed) if embed is not None else None
        return ValueProjectionRecord(layer, j, toks, tokens_agree(toks, label), cos, is_base, rank, item_id, label)

    for item_id in sorted(by_prefix):
        recs = sorted(by_prefix[item_id], key=lambda r: (r.layer, r.rank))
        label = recs[0].truth_label
        for r in recs:
            out.append(make(r.layer, r.key_index, r.rank, item_id, label, False))
        for layer in sorted({r.layer for r in recs}):
            for rank, j in enumerate(rng.choice(lm.d_ffn, size=3, replace=False)):
                out.append(make(layer, int(j), rank, item_id, label, True))
    return ValueAlignment(out, lm.num_layers)


def two_proportion_test(x1: int, n1: int, x2: int, n2: int) -> tuple[float, float]:
    """Pooled two-sided z-test for equal proportions; returns (z, p)."""
    if n1 <= 0 or n2 <= 0:
        raise ProbeError("both samples must be non-empty")
    pooled = (x1 + x2) / (n1 + n2)
    se = math.sqrt(pooled * (1 - pooled) * (1 / n1 + 1 / n2))
    if se == 0:
        return 0.0, 1.0
    z = (x1 / n1 - x2 / n2) / se
    return z, math.erfc(abs(z) / math.sqrt(2))


def permutation_check(records: Sequence[KeyActivationRecord], lm, n: int = 2000, seed: int = 0,
                      reader: ValueReader | None = None) -> dict:
    """Shuffle truth labels across prefixes, then compare real vs baseline agreement on ``n`` records each."""
    rng = np.random.default_rng([seed, 41])
    items = sorted({r.item_id for r in records})
    labels = {}
    for r in records:
        labels[r.item_id] = r.truth_label
    shuffled = [labels[i] for i in items]
    shuffled = [shuffled[i] for i in rng.permutation(len(shuffled))]
    relabel = dict(zip(items, shuffled))
    permuted = [KeyActivationRecord(r.layer, r.key_index, r.coefficient, r.rank, r.item_id, relabel[r.item_id])
                for r in records]
    align = value_alignment(permuted, lm, None, seed=seed + 1, reader=reader)
    real, base = align.population(REAL), align.population(BASELINE)
    if len(real) < n or len(base) < n:
        raise ProbeError(f"need {n} records per population, have {len(real)} and {len(base)}")
    real = [real[i] for i in np.sort(rng.choice(len(real), size=n, replace=False))]
    base = [base[i] for i in np.sort(rng.choice(len(base), size=n, replace=False))]
    x1, x2 = sum(r.agreement for r in real), sum(r.agreement for r in base)
    z, p = two_proportion_test(x1, n, x2, n)
    return {"n": n, "real_agree": x1, "baseline_agree": x2, "z": z, "p": p}


# ---------------------------------------------------------------------------
# exemplars


@dataclass(frozen=True)
class Exemplar:
    key_id: str
    layer: int
    key_index: int
    value_tokens: tuple[str, ...]
    top_labels: tuple[tuple[str, str], ...]
    coherence: float
    dominant_share: float

    def row(self) -> dict[str, str]:
        return {"key": self.key_id, "top_tokens": ", ".join(self.value_tokens),
                "top_labels": ", ".join(f"{lab} ({share})" for lab, share in self.top_labels)}


def format_share(count: int, total: int) -> str:
    return f"{100.0 * count / total:.1f}%"


def select_qualitative_pairs(profiles: Mapping[tuple[int, int], KeyProfile], reader: Callable[[int, int], Sequence[str]],
                             embeddings: Mapping[str, np.ndarray], coherence_min: float = 0.5,
                             n: int = 10) -> list[Exemplar]:
    """Keys whose top-3 labels are coherent and whose value ranks the dominant label in its top 3."""
    picked = []
    for (layer, j), prof in profiles.items():
        if not prof.eligible:
            continue
        top = prof.top3_labels
        coh = float(np.mean(pairwise_cosines(top, embeddings)))
        if coh < coherence_min:
            continue
        toks = tuple(reader(layer, j))
        if not tokens_agree(toks, top[0]):
            continue
        total = prof.activation_count
        shares = tuple((lab, format_share(prof.histogram[lab], total)) for lab in top)
        picked.append(Exemplar(prof.key_id, layer, j, toks, shares, coh, prof.share(top[0])))
    picked.sort(key=lambda e: (-e.dominant_share, e.layer, e.key_index))
    return picked[:n]


# ---------------------------------------------------------------------------
# files

CURVE_COLUMNS = ("layer", "metric", "population", "mean", "max", "values_digest")


def _digest(values: Sequence[float]) -> str:
    return hashlib.sha256(json.dumps([round(v, 12) for v in values]).encode()).hexdigest()[:16]


def _curve_rows(metric: str, per_pop: Mapping[str, Mapping[int, list[float]]], num_layers: int):
    for pop, per_layer in per_pop.items():
        for layer in range(num_layers):
            vals = per_layer.get(layer, [])
            yield {"layer": layer, "metric": metric, "population": pop,
                   "mean": f"{np.mean(vals):.6f}" if vals else "N/A",
                   "max": f"{np.max(vals):.6f}" if vals else "N/A", "values_digest": _digest(vals)}


def curves_csv(coherence: LayerDistributions | None, alignment: ValueAlignment | None) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CURVE_COLUMNS, lineterminator="\n")
    w.writeheader()
    if coherence is not None:
        for row in _curve_rows("key_coherence", {REAL: coherence.real, BASELINE: coherence.baseline},
                               coherence.num_layers):
            w.writerow(row)
    if alignment is not None:
        for metric in ("agreement", "cosine"):
            pops = {p: alignment.per_layer(metric, p) for p in (REAL, REAL_TOP1, BASELINE)}
            for row in _curve_rows(metric, pops, alignment.num_layers):
                w.writerow(row)
    return buf.getvalue()


def raw_values(coherence: LayerDistributions | None, alignment: ValueAlignment | None) -> dict:
    out = {}
    if coherence is not None:
        out["key_coherence"] = {REAL: {str(k): v for k, v in coherence.real.items()},
                                BASELINE: {str(k): v for k, v in coherence.baseline.items()}}
    if alignment is not None:
        for metric in ("agreement", "cosine"):
            out[metric] = {p: {str(k): v for k, v in alignment.per_layer(metric, p).items()}
                           for p in (REAL, REAL_TOP1, BASELINE)}
    return out


def exemplar_csv(exemplars: Sequence[Exemplar]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=("key", "top_tokens", "top_labels"), lineterminator="\n")
    w.writeheader()
    for e in exemplars:
        w.writerow(e.row())
    return buf.getvalue()


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)
    return path
