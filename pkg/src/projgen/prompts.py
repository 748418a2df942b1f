"""Geometric filtering, image-level train/test split, split tagging, prompt rendering and ablation subsets."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from projgen.corpus import Corpus
from projgen.labels import SEEN, UNSEEN, LabelSplit

logger = logging.getLogger(__name__)

DEFAULT_TEMPLATE = "bbox:[[{x1}],[{y1}],[{x2}],[{y2}]]"
ABLATION_PROPORTIONS = (0.50, 0.25, 0.10, 0.05, 0.01)

TRAIN = "train"
TEST = "test"


class RenderError(ValueError):
    pass


class SplitTag(str, enum.Enum):
    TRAIN_SEEN = "TRAIN_SEEN"
    TEST_SEEN = "TEST_SEEN"
    TEST_UNSEEN = "TEST_UNSEEN"


class AblationMethod(str, enum.Enum):
    CLASS_EXCLUSIVE = "CLASS_EXCLUSIVE"
    CLASS_PRESERVING = "CLASS_PRESERVING"


def round2(x: float) -> float:
    """Round half away from zero to two decimals, reading the value as its shortest decimal repr."""
    return float(Decimal(repr(float(x))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class PromptSample:
    sample_id: str
    image_id: str
    norm_box: tuple[float, float, float, float]
    label: str
    split_tag: SplitTag

    def to_json(self) -> dict:
        return {"sample_id": self.sample_id, "image_id": self.image_id, "norm_box": list(self.norm_box),
                "label": self.label, "split_tag": self.split_tag.value}

    @classmethod
    def from_json(cls, d) -> "PromptSample":
        return cls(d["sample_id"], d["image_id"], tuple(d["norm_box"]), d["label"], SplitTag(d["split_tag"]))


def filter_bbox_area(corpus: Corpus, min_frac: float = 0.002, max_frac: float = 0.5) -> Corpus:
    """Keep boxes whose area ratio lies in ``[min_frac, max_frac]`` (boundaries kept)."""
    images = corpus.image_index()
    kept = []
    for a in corpus.annotations:
        im = images[a.image_id]
        frac = a.area / (im.width * im.height)
        if min_frac <= frac <= max_frac:
            kept.append(a)
    return corpus.with_annotations(kept, dropped_area=len(corpus.annotations) - len(kept))


def split_images(image_ids: Iterable[str], train_frac: float = 0.8, seed: int = 0) -> dict[str, str]:
    if not 0 < train_frac < 1:
        raise ValueError("train_frac must be in (0, 1)")
    ids = sorted(set(image_ids))
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = math.floor(len(ids) * train_frac + 1e-9)
    out = {}
    for rank, i in enumerate(order):
        out[ids[i]] = TRAIN if rank < n_train else TEST
    return out


@dataclass
class TaggedPools:
    samples: list[PromptSample]
    dropped_train_unseen: int = 0
    dropped_degenerate: int = 0

    def pool(self, tag: SplitTag) -> list[PromptSample]:
        return [s for s in self.samples if s.split_tag == tag]


def normalize_box(box, width, height) -> tuple[float, float, float, float]:
    x1, y1, x2, y2 = box
    return (round2(x1 / width), round2(y1 / height), round2(x2 / width), round2(y2 / height))


def tag_samples(corpus: Corpus, image_split: dict[str, str], label_split: LabelSplit) -> TaggedPools:
    """Assign TRAIN_SEEN / TEST_SEEN / TEST_UNSEEN; train-image unseen-label samples are dropped."""
    images = corpus.image_index()
    out = TaggedPools([])
    for a in corpus.annotations:
        side = image_split[a.image_id]
        group = label_split.group(a.raw_label)
        if side == TRAIN and group == UNSEEN:
            out.dropped_train_unseen += 1
            continue
        if side == TRAIN:
            tag = SplitTag.TRAIN_SEEN
        else:
            tag = SplitTag.TEST_SEEN if group == SEEN else SplitTag.TEST_UNSEEN
        im = images[a.image_id]
        nb = normalize_box(a.box, im.width, im.height)
        if not (nb[0] < nb[2] and nb[1] < nb[3]):
            out.dropped_degenerate += 1
            continue
        out.samples.append(PromptSample(a.annotation_id, a.image_id, nb, a.raw_label, tag))
    if out.dropped_degenerate:
        logger.info("dropped %d boxes degenerate after rounding", out.dropped_degenerate)
    return out


def samples_from_corpus(corpus: Corpus, tag: SplitTag = SplitTag.TEST_UNSEEN) -> list[PromptSample]:
    """Every annotation as a sample under one tag (used for out-of-distribution pools)."""
    images = corpus.image_index()
    out = []
    for a in corpus.annotations:
        im = images[a.image_id]
        nb = normalize_box(a.box, im.width, im.height)
        if nb[0] < nb[2] and nb[1] < nb[3]:
            out.append(PromptSample(a.annotation_id, a.image_id, nb, a.raw_label, tag))
    return out


def write_samples(samples: Iterable[PromptSample], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        for s in samples:
            f.write(json.dumps(s.to_json(), sort_keys=True) + "\n")
    os.replace(tmp, path)
    return path


def read_samples(path) -> list[PromptSample]:
    with open(path, encoding="utf-8") as f:
        return [PromptSample.from_json(json.loads(line)) for line in f if line.strip()]


# ---------------------------------------------------------------------------
# rendering

@dataclass(frozen=True)
class RenderedPrompt:
    bos_token: int
    image_slot: int
    text_prefix_tokens: tuple[int, ...]
    label_tokens: tuple[int, ...]
    eos_token: int

    @property
    def length(self) -> int:
        return 1 + self.image_slot + len(self.text_prefix_tokens) + len(self.label_tokens) + 1

    @property
    def text_start(self) -> int:
        return 1 + self.image_slot

    @property
    def label_start(self) -> int:
        return self.text_start + len(self.text_prefix_tokens)

    @property
    def loss_mask(self) -> tuple[bool, ...]:
        """Per sequence position: True on the label tokens and the newline EOS only."""
        n_off = self.label_start
        return (False,) * n_off + (True,) * (len(self.label_tokens) + 1)

    def token_ids(self) -> list[int | None]:
        """Sequence layout with ``None`` at the visual slots."""
        return ([self.bos_token] + [None] * self.image_slot + list(self.text_prefix_tokens)
                + list(self.label_tokens) + [self.eos_token])


def format_box(norm_box, template: str = DEFAULT_TEMPLATE) -> str:
    x1, y1, x2, y2 = (f"{v:.2f}" for v in norm_box)
    return template.format(x1=x1, y1=y1, x2=x2, y2=y2)


def render_text(sample: PromptSample, label: str | None = None, template: str = DEFAULT_TEMPLATE) -> str:
    label = sample.label if label is None else label
    return f"{format_box(sample.norm_box, template)} {label}\n"


def render_prompt(sample: PromptSample, tokenizer, image_slot: int, label: str | None = None,
                  template: str = DEFAULT_TEMPLATE) -> RenderedPrompt:
    """Tokenise ``bbox:[[..]] <label>\\n``; the label is encoded with its leading space."""
    label = sample.label if label is None else label
    prefix = tokenizer.encode(format_box(sample.norm_box, template))
    label_tokens = tokenizer.encode(" " + label)
    if not label_tokens:
        raise RenderError(f"label {label!r} tokenizes to nothing")
    return RenderedPrompt(tokenizer.bos_id, image_slot, tuple(prefix), tuple(label_tokens), tokenizer.newline_id)


# ---------------------------------------------------------------------------
# ablation subsets

@dataclass(frozen=True)
class AblationSubset:
    method: AblationMethod
    proportion: float
    sample_ids: frozenset
    seed: int
    labels: frozenset = field(default=frozenset())

    def digest(self) -> str:
        return hashlib.sha256("\n".join(sorted(self.sample_ids)).encode()).hexdigest()

    def manifest(self) -> dict:
        return {"method": self.method.value, "proportion": self.proportion, "seed": self.seed,
                "sample_ids_digest": self.digest(), "n_samples": len(self.sample_ids), "n_labels": len(self.labels)}


def _check_proportion(p):
    if not any(abs(p - q) < 1e-12 for q in ABLATION_PROPORTIONS):
        raise ValueError(f"proportion {p} not in {ABLATION_PROPORTIONS}")


def _by_label(pool: Sequence[PromptSample]) -> dict[str, list[str]]:
    groups = defaultdict(list)
    for s in pool:
        groups[s.label].append(s.sample_id)
    return {k: sorted(v) for k, v in sorted(groups.items())}


def _exclusive_labels(labels: list[str], p: float, seed: int) -> list[str]:
    order = np.random.default_rng(seed).permutation(len(labels))
    n_keep = math.ceil(len(labels) * p - 1e-9)
    return [labels[i] for i in order[:n_keep]]


def build_ablation_subsets(pool: Sequence[PromptSample], method: AblationMethod | str, proportion: float,
                           seed: int = 0) -> AblationSubset:
    """Class-exclusive (keep a nested label prefix) or class-preserving (same size, all labels)."""
    method = AblationMethod(method)
    _check_proportion(proportion)
    groups = _by_label(pool)
    labels = list(groups)
    kept_labels = _exclusive_labels(labels, proportion, seed)
    if method == AblationMethod.CLASS_EXCLUSIVE:
        ids = frozenset(i for lab in kept_labels for i in groups[lab])
        return AblationSubset(method, proportion, ids, seed, frozenset(kept_labels))

    budget = sum(len(groups[lab]) for lab in kept_labels)
    quotas = _preserving_quotas({lab: len(v) for lab, v in groups.items()}, budget, seed)
    rng = np.random.default_rng([seed, 1])
    ids = set()
    for lab in labels:
        q = quotas[lab]
        if q:
            members = groups[lab]
            pick = rng.choice(len(members), size=q, replace=False)
            ids.update(members[i] for i in pick)
    return AblationSubset(method, proportion, frozenset(ids), seed, frozenset(lab for lab in labels if quotas[lab]))


def _preserving_quotas(counts: dict[str, int], budget: int, seed: int) -> dict[str, int]:
    """Per-label sample counts summing to exactly ``budget``, proportional to label frequency."""
    labels = list(counts)
    n = np.array([counts[lab] for lab in labels], dtype=np.int64)
    total = int(n.sum())
    budget = min(budget, total)
    if total == 0:
        return {lab: 0 for lab in labels}
    rng = np.random.default_rng([seed, 2])
    exact = n * budget / total
    q = np.floor(exact + 1e-9).astype(np.int64)
    frac = exact - q
    floor_one = budget >= len(labels)
    if not floor_one:
        logger.warning("budget %d below label count %d; dropping the one-per-label floor", budget, len(labels))
    else:
        q = np.maximum(q, 1)
    q = np.minimum(q, n)
    remainder = budget - int(q.sum())
    if remainder > 0:
        tiebreak = rng.random(len(labels))
        for i in np.lexsort((tiebreak, -frac)):
            if remainder == 0:
                break
            if q[i] < n[i]:
                q[i] += 1
                remainder -= 1
        while remainder > 0:
            room = np.flatnonzero(q < n)
            i = int(rng.choice(room))
            q[i] += 1
            remainder -= 1
    while remainder < 0:
        lo = 1 if floor_one else 0
        over = np.flatnonzero(q > lo)
        i = int(rng.choice(over))
        q[i] -= 1
        remainder += 1
    return {lab: int(v) for lab, v in zip(labels, q)}
