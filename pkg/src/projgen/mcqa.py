"""Four-choice QA construction, loss-ranking scoring and the accuracy metrics built on it."""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
import os
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from projgen.prompts import DEFAULT_TEMPLATE, PromptSample, RenderError
from projgen.train import masked_lm_loss, sample_inputs

logger = logging.getLogger(__name__)

N_CHOICES = 4
CHANCE = 100.0 / N_CHOICES


class MCQAError(ValueError):
    pass


class Group(str, enum.Enum):
    SEEN = "SEEN"
    UNSEEN = "UNSEEN"
    OOD = "OOD"


@dataclass(frozen=True)
class MCQAItem:
    item_id: str
    image_id: str
    norm_box: tuple[float, float, float, float]
    choices: tuple[str, str, str, str]
    answer_index: int
    group: Group

    def __post_init__(self):
        if len(self.choices) != N_CHOICES or len(set(self.choices)) != N_CHOICES:
            raise MCQAError(f"item {self.item_id}: need {N_CHOICES} distinct choices, got {self.choices}")
        if not 0 <= self.answer_index < N_CHOICES:
            raise MCQAError(f"item {self.item_id}: answer_index {self.answer_index} out of range")

    @property
    def answer(self) -> str:
        return self.choices[self.answer_index]

    def as_sample(self) -> PromptSample:
        from projgen.prompts import SplitTag

        tag = SplitTag.TEST_SEEN if self.group == Group.SEEN else SplitTag.TEST_UNSEEN
        return PromptSample(self.item_id, self.image_id, self.norm_box, self.answer, tag)

    def to_json(self) -> dict:
        return {"item_id": self.item_id, "image_id": self.image_id, "norm_box": list(self.norm_box),
                "choices": list(self.choices), "answer_index": self.answer_index, "group": self.group.value}

    @classmethod
    def from_json(cls, d) -> "MCQAItem":
        return cls(d["item_id"], d["image_id"], tuple(d["norm_box"]), tuple(d["choices"]),
                   int(d["answer_index"]), Group(d["group"]))


def build_mcqa(pool: Sequence[PromptSample], group: Group | str, min_count: int = 20, cap: int = 200,
               seed: int = 0) -> list[MCQAItem]:
    """Filter classes below ``min_count``, cap the rest at ``cap`` instances, then add 3 distractors
    drawn from the surviving labels of the same group and place the answer uniformly at random."""
    group = Group(group)
    by_label = defaultdict(list)
    for s in pool:
        by_label[s.label].append(s)
    kept = {lab: sorted(v, key=lambda s: s.sample_id) for lab, v in sorted(by_label.items()) if len(v) >= min_count}
    labels = sorted(kept)
    if len(labels) < N_CHOICES:
        raise MCQAError(f"group {group.value} has {len(labels)} eligible labels; need at least {N_CHOICES}")
    rng = np.random.default_rng([seed, 11])
    chosen = []
    for lab in labels:
        members = kept[lab]
        if len(members) > cap:
            idx = np.sort(rng.choice(len(members), size=cap, replace=False))
            members = [members[i] for i in idx]
        chosen.extend(members)
    items = []
    for s in sorted(chosen, key=lambda s: s.sample_id):
        others = [lab for lab in labels if lab != s.label]
        distractors = [others[i] for i in rng.choice(len(others), size=N_CHOICES - 1, replace=False)]
        pos = int(rng.integers(N_CHOICES))
        choices = distractors[:pos] + [s.label] + distractors[pos:]
        items.append(MCQAItem(s.sample_id, s.image_id, s.norm_box, tuple(choices), pos, group))
    return items


def dedup_similar_labels(labels: Sequence[str], embeddings: Mapping[str, np.ndarray],
                         counts: Mapping[str, int] | None = None, threshold: float = 0.9) -> list[str]:
    """Greedy pass by descending frequency (ties by label); drop a label whose cosine with any kept
    label exceeds ``threshold``."""
    counts = counts or {}
    order = sorted(dict.fromkeys(labels), key=lambda lab: (-counts.get(lab, 0), lab))
    kept, kept_vecs = [], []
    for lab in order:
        v = np.asarray(embeddings[lab], dtype=np.float64)
        v = v / np.linalg.norm(v)
        if kept_vecs and float(np.max(np.stack(kept_vecs) @ v)) > threshold:
            continue
        kept.append(lab)
        kept_vecs.append(v)
    return kept


def write_items(items: Iterable[MCQAItem], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        for it in items:
            f.write(json.dumps(it.to_json(), sort_keys=True) + "\n")
    os.replace(tmp, path)
    return path


def read_items(path) -> list[MCQAItem]:
    with open(path, encoding="utf-8") as f:
        return [MCQAItem.from_json(json.loads(line)) for line in f if line.strip()]


# ---------------------------------------------------------------------------
# scoring


@dataclass(frozen=True)
class ScoredItem:
    item: MCQAItem
    losses: tuple[float, ...]
    predicted: int

    @property
    def correct(self) -> bool:
        return self.predicted == self.item.answer_index


def argmin_first(values: Sequence[float]) -> int:
    best = 0
    for i, v in enumerate(values):
        if v < values[best]:
            best = i
    return best


@torch.no_grad()
def score_item(item: MCQAItem, projection, encoder, lm, template: str = DEFAULT_TEMPLATE,
               features=None) -> ScoredItem | None:
    """Masked loss of each choice rendered as the label; the lowest loss wins (ties -> lowest index)."""
    sample = item.as_sample()
    patches = features(sample) if features is not None else encoder.encode(item.image_id, item.norm_box).patches
    losses = []
    for choice in item.choices:
        try:
            embeds, targets, mask = sample_inputs(sample, projection, patches, lm, label=choice, template=template)
        except RenderError as e:
            logger.warning("skipping item %s: %s", item.item_id, e)
            return None
        losses.append(float(masked_lm_loss(lm.forward(embeds), targets, mask)))
    return ScoredItem(item, tuple(losses), argmin_first(losses))


def score_items(items: Sequence[MCQAItem], projection, encoder, lm, template: str = DEFAULT_TEMPLATE):
    from projgen.train import FeatureCache

    features = FeatureCache(encoder)
    out = []
    for it in items:
        r = score_item(it, projection, encoder, lm, template, features)
        if r is not None:
            out.append(r)
    return out


# ---------------------------------------------------------------------------
# metrics


def per_class(results: Iterable[ScoredItem]) -> dict[str, tuple[int, int]]:
    tally = defaultdict(lambda: [0, 0])
    for r in results:
        t = tally[r.item.answer]
        t[0] += 1
        t[1] += int(r.correct)
    return {lab: (n, c) for lab, (n, c) in sorted(tally.items())}


def macro_accuracy(results) -> float:
    """Mean of per-class accuracies, in percent. Accepts scored items or a ``label -> (n, correct)`` map."""
    table = results if isinstance(results, Mapping) else per_class(results)
    table = {k: v for k, v in table.items() if v[0] > 0}
    if not table:
        raise MCQAError("no scored items")
    return 100.0 * float(np.mean([c / n for n, c in table.values()]))


def relative_performance(seen_acc: float | None, unseen_acc: float | None) -> float | None:
    if seen_acc is None or unseen_acc is None or seen_acc == 0:
        return None
    return 100.0 * unseen_acc / seen_acc


def rgr(accuracy: float | None, chance: float = CHANCE) -> float | None:
    if accuracy is None:
        return None
    return 100.0 * (accuracy - chance) / chance


# ---------------------------------------------------------------------------
# reports

# the last four columns follow the usual seen / unseen / relative / gain-over-chance table layout
REPORT_COLUMNS = ("encoder", "lm", "rgr_seen", "seen_acc", "unseen_acc", "rel_perf", "rgr_unseen")


def fmt1(x: float | None) -> str:
    return "N/A" if x is None else f"{x:.1f}"


@dataclass
class GroupReport:
    group: Group
    per_class: dict[str, tuple[int, int]]
    macro_accuracy: float

    @property
    def n_classes(self) -> int:
        return len(self.per_class)

    @property
    def n_items(self) -> int:
        return sum(n for n, _ in self.per_class.values())

    def to_json(self) -> dict:
        return {"group": self.group.value, "macro_accuracy": round(self.macro_accuracy, 6),
                "n_classes": self.n_classes, "n_items": self.n_items,
                "per_class": {lab: {"n_items": n, "n_correct": c, "accuracy": round(100.0 * c / n, 6)}
                              for lab, (n, c) in self.per_class.items()}}


@dataclass
class EvalReport:
    encoder: str
    lm: str
    groups: dict[Group, GroupReport] = field(default_factory=dict)

    def acc(self, group: Group) -> float | None:
        g = self.groups.get(group)
        return None if g is None else g.macro_accuracy

    @property
    def unseen_like(self) -> Group:
        # out-of-distribution runs report in the unseen column
        return Group.UNSEEN if Group.UNSEEN in self.groups or Group.OOD not in self.groups else Group.OOD

    def row(self) -> dict[str, str]:
        seen, unseen = self.acc(Group.SEEN), self.acc(self.unseen_like)
        return {"encoder": self.encoder, "lm": self.lm, "seen_acc": fmt1(seen), "unseen_acc": fmt1(unseen),
                "rel_perf": fmt1(relative_performance(seen, unseen)), "rgr_seen": fmt1(rgr(seen)),
                "rgr_unseen": fmt1(rgr(unseen))}

    def to_json(self) -> dict:
        return {"encoder": self.encoder, "lm": self.lm,
                "groups": {g.value: r.to_json() for g, r in sorted(self.groups.items(), key=lambda kv: kv[0].value)},
                "summary": self.row()}


def make_report(encoder_id: str, lm_id: str, results_by_group: Mapping[Group, Sequence[ScoredItem]]) -> EvalReport:
    rep = EvalReport(encoder_id, lm_id)
    for g, results in results_by_group.items():
        g = Group(g)
        if not results:
            logger.warning("group %s has no scored items; omitted from the report", g.value)
            continue
        table = per_class(results)
        rep.groups[g] = GroupReport(g, table, macro_accuracy(table))
    if not rep.groups:
        raise MCQAError("no group produced any result")
    return rep


def report_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow(r.row())
    return buf.getvalue()


def emit_report(report: EvalReport, out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for g, gr in report.groups.items():
        paths[g.value] = _atomic_write(out_dir / f"report_{g.value.lower()}.json",
                                       json.dumps(gr.to_json(), indent=1, sort_keys=True) + "\n")
    paths["summary"] = _atomic_write(out_dir / "report.json", json.dumps(report.to_json(), indent=1, sort_keys=True) + "\n")
    paths["csv"] = _atomic_write(out_dir / "report.csv", report_csv([report]))
    return paths


def _atomic_write(path: Path, text: str) -> Path:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)
    return path
