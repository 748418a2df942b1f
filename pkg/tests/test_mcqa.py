import itertools
import logging
from collections import Counter

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from projgen.bridge import Projection
from projgen.mcqa import (Group, MCQAError, MCQAItem, ScoredItem, argmin_first, build_mcqa, dedup_similar_labels,
                          emit_report, macro_accuracy, make_report, read_items, relative_performance, report_csv,
                          rgr, score_item, score_items, write_items)
from projgen.prompts import PromptSample, SplitTag, samples_from_corpus
from projgen.train import masked_lm_loss, sample_inputs


def _pool(counts, tag=SplitTag.TEST_SEEN):
    return [PromptSample(f"{lab}-{i:04d}", f"im-{lab}-{i}", (0.1, 0.1, 0.5, 0.5), lab, tag)
            for lab, n in counts.items() for i in range(n)]


def test_min_count_and_cap():
    pool = _pool({"a": 19, "b": 20, "c": 500, "d": 30, "e": 25})
    items = build_mcqa(pool, Group.SEEN, min_count=20, cap=200)
    per = Counter(it.answer for it in items)
    assert "a" not in per
    assert per == {"b": 20, "c": 200, "d": 30, "e": 25}
    assert all("a" not in it.choices for it in items)


def test_items_are_well_formed_and_pure():
    pool = _pool({k: 25 for k in "abcdef"})
    for it in build_mcqa(pool, "SEEN", min_count=20):
        assert len(set(it.choices)) == 4
        assert it.choices[it.answer_index] == it.answer
        assert set(it.choices) <= set("abcdef")
        assert it.group == Group.SEEN


def test_too_few_labels():
    with pytest.raises(MCQAError):
        build_mcqa(_pool({"a": 30, "b": 30, "c": 30}), Group.UNSEEN)


def test_build_is_seeded():
    pool = _pool({k: 30 for k in "abcdefg"})
    assert build_mcqa(pool, Group.SEEN, seed=3) == build_mcqa(list(reversed(pool)), Group.SEEN, seed=3)
    assert build_mcqa(pool, Group.SEEN, seed=3) != build_mcqa(pool, Group.SEEN, seed=4)


def test_answer_positions_uniform():
    pool = _pool({f"l{k}": 1000 for k in range(10)})
    items = build_mcqa(pool, Group.SEEN, cap=1000, seed=0)
    assert len(items) == 10_000
    freq = np.bincount([it.answer_index for it in items], minlength=4) / len(items)
    assert np.all(np.abs(freq - 0.25) <= 0.02)


def test_item_roundtrip(tmp_path):
    items = build_mcqa(_pool({k: 20 for k in "abcd"}), Group.OOD)
    assert read_items(write_items(items, tmp_path / "m.jsonl")) == items


def test_item_validation():
    with pytest.raises(MCQAError):
        MCQAItem("x", "im", (0, 0, 1, 1), ("a", "a", "b", "c"), 0, Group.SEEN)
    with pytest.raises(MCQAError):
        MCQAItem("x", "im", (0, 0, 1, 1), ("a", "b", "c", "d"), 4, Group.SEEN)


def test_dedup_is_greedy_not_transitive():
    t = np.arccos(0.95)
    emb = {"A": np.array([1.0, 0.0]), "B": np.array([np.cos(t), np.sin(t)]),
           "C": np.array([np.cos(2 * t), np.sin(2 * t)])}
    assert emb["A"] @ emb["C"] < 0.9
    assert dedup_similar_labels(["A", "B", "C"], emb, {"A": 3, "B": 2, "C": 1}) == ["A", "C"]
    # frequency decides which member of a near-duplicate pair survives
    assert dedup_similar_labels(["A", "B"], emb, {"A": 1, "B": 5}) == ["B"]


@pytest.mark.parametrize("values,expected", [((0.9, 0.2, 0.5, 0.7), 1), ((0.3, 0.3, 0.9, 0.9), 0),
                                             ((1.0, 1.0, 1.0, 0.5), 3)])
def test_argmin_first(values, expected):
    assert argmin_first(values) == expected


_ids = itertools.count()


def _scored(label, correct):
    choices = (label, "x1", "x2", "x3")
    item = MCQAItem(f"{label}{next(_ids)}", "im", (0, 0, 1, 1), choices, 0, Group.SEEN)
    return ScoredItem(item, (0, 1, 1, 1), 0 if correct else 1)


def test_macro_accuracy_examples():
    rs = [_scored("A", True)] * 3 + [_scored("B", False)]
    assert macro_accuracy(rs) == 50.0
    assert macro_accuracy([_scored("A", True)] + [_scored("A", False)] * 3) == 25.0
    assert macro_accuracy({"A": (2, 2)}) == 100.0
    with pytest.raises(MCQAError):
        macro_accuracy([])


def test_metric_examples():
    assert relative_performance(84.2, 74.2) == pytest.approx(88.1, abs=0.05)
    assert relative_performance(77.3, 66.9) == pytest.approx(86.5, abs=0.05)
    assert relative_performance(60.0, 60.0) == 100.0
    assert relative_performance(0.0, 10.0) is None
    assert rgr(50) == 100.0 and rgr(25) == 0.0
    assert rgr(74.2) == pytest.approx(196.8, abs=0.1)


def _report_for(seen_acc, unseen_acc):
    # build a report whose macro accuracies are exactly the targets (1000 items per class)
    def results(acc, group):
        out = []
        for i in range(1000):
            it = MCQAItem(f"{group.value}{i}", "im", (0, 0, 1, 1), ("a", "b", "c", "d"), 0, group)
            out.append(ScoredItem(it, (0, 1, 1, 1), 0 if i < acc * 10 else 1))
        return out

    return make_report("enc", "lm", {Group.SEEN: results(seen_acc, Group.SEEN),
                                     Group.UNSEEN: results(unseen_acc, Group.UNSEEN)})


def test_csv_row_format():
    text = report_csv([_report_for(84.2, 74.2)])
    header, row = text.strip().splitlines()
    assert row.endswith(",84.2,74.2,88.1,196.8")
    assert row == "enc,lm,236.8,84.2,74.2,88.1,196.8"
    assert header.split(",")[-4:] == ["seen_acc", "unseen_acc", "rel_perf", "rgr_unseen"]


def test_ood_only_report_has_na_seen(caplog):
    it = MCQAItem("o", "im", (0, 0, 1, 1), ("a", "b", "c", "d"), 0, Group.OOD)
    with caplog.at_level(logging.WARNING):
        rep = make_report("enc", "lm", {Group.OOD: [ScoredItem(it, (0, 1, 1, 1), 0)], Group.SEEN: []})
    assert "SEEN" in caplog.text
    assert Group.SEEN not in rep.groups
    row = rep.row()
    assert row["seen_acc"] == "N/A" and row["rel_perf"] == "N/A"
    assert row["unseen_acc"] == "100.0"


def test_emit_report_files(tmp_path):
    paths = emit_report(_report_for(60.0, 50.0), tmp_path)
    assert (tmp_path / "report_seen.json").exists() and (tmp_path / "report_unseen.json").exists()
    assert paths["csv"].read_text().splitlines()[1] == "enc,lm,140.0,60.0,50.0,83.3,100.0"


@pytest.fixture(scope="module")
def scoring_setup(tiny_world, tiny_backends):
    enc, lm = tiny_backends
    pool = samples_from_corpus(tiny_world.corpus, SplitTag.TEST_SEEN)
    items = build_mcqa(pool, Group.SEEN, min_count=5, cap=3, seed=1)
    params = Projection(enc.d_v, lm.d_lm, seed=4).to_params()
    return items, params, enc, lm


def test_true_choice_loss_matches_training_loss(scoring_setup):
    items, params, enc, lm = scoring_setup
    for it in items[:10]:
        scored = score_item(it, params, enc, lm)
        sample = it.as_sample()
        feats = enc.encode(sample.image_id, sample.norm_box).patches
        e, t, m = sample_inputs(sample, params, feats, lm)
        with torch.no_grad():
            train_loss = float(masked_lm_loss(lm.forward(e), t, m))
        assert scored.losses[it.answer_index] == train_loss


def test_score_items_is_deterministic(scoring_setup):
    items, params, enc, lm = scoring_setup
    a = score_items(items[:20], params, enc, lm)
    b = score_items(items[:20], params, enc, lm)
    assert a == b


def test_unrenderable_item_is_skipped(scoring_setup, caplog):
    items, params, enc, lm = scoring_setup

    class NoLabelTokens:
        def __init__(self, tok):
            self.tok = tok
            self.bos_id, self.newline_id = tok.bos_id, tok.newline_id

        def encode(self, text):
            return [] if text.startswith(" ") else self.tok.encode(text)

    class Wrapped:
        def __init__(self, lm):
            self.lm, self.tokenizer = lm, NoLabelTokens(lm.tokenizer)

        def __getattr__(self, name):
            return getattr(self.lm, name)

    with caplog.at_level(logging.WARNING):
        assert score_item(items[0], params, enc, Wrapped(lm)) is None
    assert "skipping" in caplog.text


@settings(max_examples=40, deadline=None)
@given(st.dictionaries(st.sampled_from("abcdefgh"), st.integers(0, 40), min_size=4), st.integers(0, 50))
def test_build_properties(counts, seed):
    pool = _pool(counts)
    eligible = {k for k, n in counts.items() if n >= 20}
    if len(eligible) < 4:
        with pytest.raises(MCQAError):
            build_mcqa(pool, Group.SEEN, seed=seed)
        return
    items = build_mcqa(pool, Group.SEEN, seed=seed)
    assert {it.answer for it in items} == eligible
    assert all(set(it.choices) <= eligible for it in items)
    assert len({it.item_id for it in items}) == len(items)
