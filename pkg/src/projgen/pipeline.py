"""Stage DAG over a run directory, gated by content digests recorded in ``manifest.json``."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from projgen import __version__
from projgen.bridge import (HFCausalLM, HFVisionEncoder, LatentRegionEncoder, ProjectionParams,
                            TinyCausalLM, WordTokenizer, RandomPatchEncoder, planted_pieces)
from projgen.config import ConfigError, RunConfig, SourceConfig
from projgen.corpus import (Corpus, ingest_openimages_like, ingest_vg_like, load_corpus, merge_corpora,
                            persist_corpus)
from projgen.labels import (EmbeddingCache, LabelSplit, LabelVocab, TableEmbedder, dedup_synsets_by_lemma,
                            embed_labels, filter_rare_labels, make_provider, split_labels)
from projgen.mcqa import Group, build_mcqa, dedup_similar_labels, emit_report, make_report, read_items, \
    score_items, write_items, fmt1
from projgen import probe as pr
from projgen.prompts import (AblationMethod, SplitTag, build_ablation_subsets, filter_bbox_area, read_samples,
                             samples_from_corpus, split_images, tag_samples, write_samples)
from projgen.synthetic import SyntheticWorld, make_world
from projgen.train import config_dict, train_projection

logger = logging.getLogger(__name__)

STAGES = ("ingest", "label-split", "build-prompts", "train", "eval", "ablate", "probe", "report")
UPSTREAM = {
    "ingest": (),
    "label-split": ("ingest",),
    "build-prompts": ("label-split",),
    "train": ("build-prompts",),
    "eval": ("train",),
    "ablate": ("build-prompts",),
    "probe": ("train",),
    "report": (),
}
# config sections each stage depends on (beyond its upstream artifacts)
SECTIONS = {
    "ingest": ("sources", "ood"),
    "label-split": ("filters.min_label_count", "seeds.split_seed", "embedding", "seen_cluster"),
    "build-prompts": ("filters", "seeds.split_seed", "seeds.mcqa_seed", "embedding"),
    "train": ("backend", "train", "seeds.train_seed", "template"),
    "eval": ("backend", "template"),
    "ablate": ("backend", "train", "ablation", "seeds.train_seed", "template"),
    "probe": ("backend", "probe", "seeds.probe_seed", "embedding", "template"),
    "report": (),
}


class DependencyError(RuntimeError):
    """An upstream stage is missing or its artifacts no longer match the recorded digests."""


class StaleError(DependencyError):
    pass


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)
    return path


def _section(cfg: dict, dotted: str):
    node = cfg
    for part in dotted.split("."):
        node = node[part]
    return node


class Pipeline:
    def __init__(self, config: RunConfig, run_dir=None):
        self.cfg = config
        self.dir = Path(run_dir or config.output_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.dir / "manifest.json"
        self._worlds: list[SyntheticWorld] | None = None
        self._backends = None

    # -- manifest ----------------------------------------------------------

    def manifest(self) -> dict:
        if self.manifest_path.exists():
            return json.loads(self.manifest_path.read_text())
        return {"tool_version": __version__, "config_digest": self.cfg.digest(), "stages": {}}

    def _save_manifest(self, m: dict):
        m["tool_version"] = __version__
        m["config_digest"] = self.cfg.digest()
        atomic_write(self.manifest_path, json.dumps(m, indent=1, sort_keys=True) + "\n")

    def params_digest(self, stage: str) -> str:
        d = self.cfg.to_dict()
        part = {s: _section(d, s) for s in SECTIONS[stage]}
        return hashlib.sha256(json.dumps(part, sort_keys=True).encode()).hexdigest()

    def _check_upstream(self, stage: str, m: dict) -> dict[str, str]:
        inputs = {}
        for up in UPSTREAM[stage]:
            marker = m["stages"].get(up)
            if marker is None:
                raise DependencyError(f"stage {stage!r} needs {up!r}, which has not run")
            for rel, dig in marker["outputs"].items():
                p = self.dir / rel
                if not p.exists():
                    raise StaleError(f"artifact {rel} of stage {up!r} is missing")
                if file_digest(p) != dig:
                    raise StaleError(f"artifact {rel} of stage {up!r} changed since it was recorded")
                inputs[rel] = dig
        return inputs

    REPORT_SOURCES = ("eval/report.csv", "eval/ood/report.csv", "ablate/curve.csv", "probe/seen/curves.csv",
                      "probe/seen/exemplars.csv", "probe/unseen/curves.csv", "probe/unseen/exemplars.csv")

    def _report_inputs(self) -> dict[str, str]:
        return {rel: file_digest(self.dir / rel) for rel in self.REPORT_SOURCES if (self.dir / rel).exists()}

    def _up_to_date(self, stage: str, m: dict, inputs: dict) -> bool:
        marker = m["stages"].get(stage)
        if not marker or marker.get("inputs") != inputs or marker.get("params") != self.params_digest(stage):
            return False
        return all((self.dir / rel).exists() and file_digest(self.dir / rel) == dig
                   for rel, dig in marker["outputs"].items())

    def run_stage(self, stage: str, force: bool = False) -> str:
        """Run one stage; returns ``"ran"`` or ``"up-to-date"``."""
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}")
        m = self.manifest()
        inputs = self._report_inputs() if stage == "report" else self._check_upstream(stage, m)
        if not force and self._up_to_date(stage, m, inputs):
            logger.info("%s: up-to-date", stage)
            return "up-to-date"
        t0 = time.perf_counter()
        outputs = getattr(self, "_" + stage.replace("-", "_"))()
        rel = {str(Path(p).relative_to(self.dir)): file_digest(p) for p in sorted(outputs)}
        m = self.manifest()
        m["stages"][stage] = {"inputs": inputs, "outputs": rel, "params": self.params_digest(stage),
                              "wall_s": round(time.perf_counter() - t0, 3)}
        self._save_manifest(m)
        return "ran"

    def run_all(self, stages=STAGES, force: bool = False) -> dict[str, str]:
        return {s: self.run_stage(s, force) for s in stages}

    # -- shared helpers -------------------------------------------------------

    def worlds(self) -> list[SyntheticWorld]:
        if self._worlds is None:
            srcs = [s for s in self.cfg.sources if s.kind == "synthetic"]
            if self.cfg.ood is not None and self.cfg.ood.kind == "synthetic":
                srcs.append(self.cfg.ood)
            self._worlds = [make_world(s.synthetic) for s in srcs]
        return self._worlds

    def _ingest_source(self, s: SourceConfig, world_idx) -> Corpus:
        if s.kind == "synthetic":
            return self.worlds()[world_idx].corpus
        if s.kind == "vg":
            return ingest_vg_like(s.regions, s.image_meta)
        if s.kind == "openimages":
            return ingest_openimages_like(s.boxes, s.class_descriptions, s.image_meta)
        return load_corpus(s.corpus)

    def provider(self):
        spec = dict(self.cfg.embedding)
        if spec.get("id") == "planted":
            table = {}
            for w in self.worlds():
                table.update(w.latents)
            return TableEmbedder(table, provider_id="planted-" + "-".join(str(w.cfg.seed) for w in self.worlds()))
        return make_provider(spec)

    def embed(self, labels):
        cache = EmbeddingCache(self.dir / "labels" / "embedding_cache.json")
        out = embed_labels(labels, self.provider(), cache)
        cache.save()
        return out

    def embed_texts(self, texts):
        prov = self.provider()
        return prov.embed(list(texts))

    def split(self) -> LabelSplit:
        return LabelSplit.load(self.dir / "labels" / "split.json")

    def all_labels(self) -> list[str]:
        labels = set(self.split().assignment)
        ood = self.dir / "prompts" / "ood.jsonl"
        if ood.exists():
            labels.update(s.label for s in read_samples(ood))
        return sorted(labels)

    def backends(self):
        if self._backends is not None:
            return self._backends
        b = self.cfg.backend
        if b.kind == "hf":
            images = {}
            for corpus_path in (self.dir / "labels" / "corpus.jsonl", self.dir / "ingest" / "ood_corpus.jsonl"):
                if corpus_path.exists():
                    for im in load_corpus(corpus_path).images:
                        images[im.image_id] = os.path.join(b.image_root or "", im.uri or im.image_id)
            enc = HFVisionEncoder(b.encoder_id, images, feature_layer=b.hf_feature_layer)
            lm = HFCausalLM.from_pretrained(b.lm_id, dtype=b.hf_dtype)
            self._backends = (enc, lm)
            return self._backends
        labels = self.all_labels()
        tok = WordTokenizer.from_labels(labels, vocab_size=b.vocab_size)
        lm_cfg = b.lm
        worlds = self.worlds()
        if worlds:
            latents, regions = {}, {}
            for w in worlds:
                latents.update(w.latents)
                regions.update(w.regions)
            planted = planted_pieces(tok, {lab: latents[lab] for lab in labels if lab in latents}, lm_cfg.seed)
            enc = LatentRegionEncoder(latents, regions, b.d_v, b.num_patches, b.noise_scale, b.seed)
            lm = TinyCausalLM(tok, lm_cfg, planted)
        else:
            enc = RandomPatchEncoder(b.d_v, b.num_patches, b.seed)
            lm = TinyCausalLM(tok, lm_cfg)
        self._backends = (enc, lm)
        return self._backends

    def _train_cfg(self):
        import dataclasses

        return dataclasses.replace(self.cfg.train, seed=self.cfg.seeds.train_seed)

    # -- stages ---------------------------------------------------------------

    def _ingest(self):
        out = self.dir / "ingest"
        n_syn = 0
        parts = []
        for s in self.cfg.sources:
            parts.append(self._ingest_source(s, n_syn))
            n_syn += s.kind == "synthetic"
        corpus = parts[0] if len(parts) == 1 else merge_corpora(parts)
        paths = [persist_corpus(corpus, out / "corpus.jsonl")]
        if self.cfg.ood is not None:
            ood = self._ingest_source(self.cfg.ood, n_syn)
            paths.append(persist_corpus(ood, out / "ood_corpus.jsonl"))
        return paths

    def _label_split(self):
        out = self.dir / "labels"
        corpus = load_corpus(self.dir / "ingest" / "corpus.jsonl")
        corpus, vocab = dedup_synsets_by_lemma(corpus)
        corpus, vocab = filter_rare_labels(corpus, vocab, self.cfg.filters.min_label_count)
        emb = self.embed(vocab.labels())
        split = split_labels(vocab, emb, seed=self.cfg.seeds.split_seed, provider_id=self.provider().provider_id,
                             seen_cluster=self.cfg.seen_cluster)
        paths = [persist_corpus(corpus, out / "corpus.jsonl"),
                 atomic_write(out / "vocab.json", json.dumps(vocab.to_json(), indent=1, sort_keys=True) + "\n")]
        split.save(out / "split.json")
        paths.append(out / "split.json")
        return paths

    def _build_prompts(self):
        f = self.cfg.filters
        seeds = self.cfg.seeds
        corpus = load_corpus(self.dir / "labels" / "corpus.jsonl")
        corpus = filter_bbox_area(corpus, f.area_min, f.area_max)
        split = self.split()
        image_split = split_images([im.image_id for im in corpus.images], f.train_frac, seeds.split_seed)
        pools = tag_samples(corpus, image_split, split)
        pdir, mdir = self.dir / "prompts", self.dir / "mcqa"
        paths = []
        stats = {"dropped_train_unseen": pools.dropped_train_unseen, "dropped_degenerate": pools.dropped_degenerate,
                 "dropped_area": corpus.provenance.counters.get("dropped_area", 0)}
        for tag in SplitTag:
            pool = pools.pool(tag)
            stats[tag.value] = len(pool)
            paths.append(write_samples(pool, pdir / f"{tag.value.lower()}.jsonl"))
        for tag, group in ((SplitTag.TEST_SEEN, Group.SEEN), (SplitTag.TEST_UNSEEN, Group.UNSEEN)):
            items = build_mcqa(pools.pool(tag), group, f.mcqa_min_count, f.mcqa_cap, seeds.mcqa_seed)
            stats[f"mcqa_{group.value}"] = len(items)
            paths.append(write_items(items, mdir / f"{group.value.lower()}.jsonl"))
        ood_path = self.dir / "ingest" / "ood_corpus.jsonl"
        if ood_path.exists():
            ood = filter_bbox_area(load_corpus(ood_path), f.area_min, f.area_max)
            ood, vocab = dedup_synsets_by_lemma(ood)
            samples = samples_from_corpus(ood, SplitTag.TEST_UNSEEN)
            counts = vocab.counts()
            kept = set(dedup_similar_labels(sorted(counts), self.embed(sorted(counts)), counts, f.dedup_threshold))
            train_labels = set(split.assignment)
            samples = [s for s in samples if s.label in kept and s.label not in train_labels]
            stats["ood_labels"] = len({s.label for s in samples})
            paths.append(write_samples(samples, pdir / "ood.jsonl"))
            items = build_mcqa(samples, Group.OOD, f.mcqa_min_count, f.mcqa_cap, seeds.mcqa_seed)
            stats[f"mcqa_{Group.OOD.value}"] = len(items)
            paths.append(write_items(items, mdir / "ood.jsonl"))
        paths.append(atomic_write(pdir / "stats.json", json.dumps(stats, indent=1, sort_keys=True) + "\n"))
        return paths

    def _train(self):
        enc, lm = self.backends()
        pool = read_samples(self.dir / "prompts" / "train_seen.jsonl")
        out = self.dir / "train"
        cfg = self._train_cfg()
        res = train_projection(pool, enc, lm, cfg, log_path=out / "log.csv", checkpoint_path=out / "projection",
                               template=self.cfg.template)
        atomic_write(out / "train_config.json", json.dumps(config_dict(cfg), indent=1, sort_keys=True) + "\n")
        return [out / "log.csv", out / "projection.npz", out / "projection.json", out / "train_config.json"]

    def _mcqa_sets(self) -> dict[Group, list]:
        sets = {}
        for g in Group:
            p = self.dir / "mcqa" / f"{g.value.lower()}.jsonl"
            if p.exists():
                sets[g] = read_items(p)
        return sets

    def _evaluate(self, params, out_dir: Path, groups=None):
        enc, lm = self.backends()
        sets = self._mcqa_sets()
        results = {g: score_items(items, params, enc, lm, self.cfg.template) for g, items in sets.items() if groups is None or g in groups}
        report = make_report(self.cfg.backend.encoder_id, self.cfg.backend.lm_id, results)
        return report, list(emit_report(report, out_dir).values())

    def _eval(self):
        params = ProjectionParams.load(self.dir / "train" / "projection")
        report, paths = self._evaluate(params, self.dir / "eval", (Group.SEEN, Group.UNSEEN))
        sets = self._mcqa_sets()
        if Group.OOD in sets:
            enc, lm = self.backends()
            ood = make_report(self.cfg.backend.encoder_id, self.cfg.backend.lm_id,
                              {Group.OOD: score_items(sets[Group.OOD], params, enc, lm, self.cfg.template)})
            paths += list(emit_report(ood, self.dir / "eval" / "ood").values())
        return paths

    def _ablate(self):
        enc, lm = self.backends()
        pool = read_samples(self.dir / "prompts" / "train_seen.jsonl")
        a = self.cfg.ablation
        rows, paths = [], []
        for method in a.methods:
            for p in a.proportions:
                sub = build_ablation_subsets(pool, method, p, a.seed)
                run = self.dir / "ablate" / f"{AblationMethod(method).value.lower()}_{p:g}"
                samples = [s for s in pool if s.sample_id in sub.sample_ids]
                paths.append(atomic_write(run / "subset.json", json.dumps(sub.manifest(), indent=1, sort_keys=True) + "\n"))
                res = train_projection(samples, enc, lm, self._train_cfg(), log_path=run / "log.csv",
                                       checkpoint_path=run / "projection", template=self.cfg.template)
                paths += [run / "log.csv", run / "projection.npz", run / "projection.json"]
                report, rp = self._evaluate(res.params, run, (Group.SEEN, Group.UNSEEN))
                paths += rp
                rows.append({"method": AblationMethod(method).value, "proportion": f"{p:g}",
                             "n_samples": len(samples), "n_labels": len(sub.labels),
                             "seen_acc": fmt1(report.acc(Group.SEEN)), "unseen_acc": fmt1(report.acc(Group.UNSEEN))})
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["method", "proportion", "n_samples", "n_labels", "seen_acc", "unseen_acc"],
                           lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        paths.append(atomic_write(self.dir / "ablate" / "curve.csv", buf.getvalue()))
        return paths

    def _probe(self):
        enc, lm = self.backends()
        params = ProjectionParams.load(self.dir / "train" / "projection")
        pc = self.cfg.probe
        split = self.split()
        emb = self.embed(sorted(split.assignment))
        paths = []
        summary = {}
        for tag, group in ((SplitTag.TEST_SEEN, "seen"), (SplitTag.TEST_UNSEEN, "unseen")):
            pool = read_samples(self.dir / "prompts" / f"{tag.value.lower()}.jsonl")
            prefixes = pr.build_visual_prefixes(pool, group)
            rng = np.random.default_rng([self.cfg.seeds.probe_seed, len(group)])
            if len(prefixes) > pc.max_prefixes:
                keep = np.sort(rng.choice(len(prefixes), size=pc.max_prefixes, replace=False))
                prefixes = [prefixes[i] for i in keep]
            records = pr.extract_all(prefixes, params, enc, lm, pc.top_k, self.cfg.template)
            profiles = pr.aggregate_key_profiles(records)
            group_labels = sorted(split.seen if group == "seen" else split.unseen)
            coherence = pr.key_semantic_similarity(profiles, emb, group_labels, lm.num_layers, self.cfg.seeds.probe_seed)
            reader = pr.ValueReader(lm)
            alignment = pr.value_alignment(records, lm, self.embed_texts, self.cfg.seeds.probe_seed, reader)
            exemplars = pr.select_qualitative_pairs(profiles, reader, emb, pc.coherence_min, pc.n_exemplars)
            try:
                perm = pr.permutation_check(records, lm, pc.permutation_n, self.cfg.seeds.probe_seed, reader)
            except pr.ProbeError as e:
                perm = {"skipped": str(e)}
            out = self.dir / "probe" / group
            paths.append(pr.write_text(out / "curves.csv", pr.curves_csv(coherence, alignment)))
            paths.append(pr.write_text(out / "raw_values.json", json.dumps(pr.raw_values(coherence, alignment),
                                                                            sort_keys=True) + "\n"))
            paths.append(pr.write_text(out / "exemplars.csv", pr.exemplar_csv(exemplars)))
            paths.append(pr.write_text(out / "records.jsonl", "".join(json.dumps(asdict(r), sort_keys=True) + "\n"
                                                                       for r in records)))
            real_agree, n_real = alignment.rate(pr.REAL)
            base_agree, n_base = alignment.rate(pr.BASELINE)
            summary[group] = {"n_prefixes": len(prefixes), "n_records": len(records),
                              "unique_keys": pr.unique_key_counts(profiles),
                              "coherence_mean_real": coherence.means(pr.REAL),
                              "coherence_mean_baseline": coherence.means(pr.BASELINE),
                              "agreement_real": [real_agree, n_real], "agreement_baseline": [base_agree, n_base],
                              "permutation": perm}
        paths.append(pr.write_text(self.dir / "probe" / "summary.json",
                                   json.dumps(_nan_safe(summary), indent=1, sort_keys=True) + "\n"))
        return paths

    def _report(self):
        out = self.dir / "report"
        gaps = []
        paths = []

        def copy(src: Path, name: str, what: str):
            if src.exists():
                paths.append(atomic_write(out / name, src.read_text()))
            else:
                gaps.append(f"{what}: {src.relative_to(self.dir)} missing")

        copy(self.dir / "eval" / "report.csv", "table_main.csv", "seen/unseen table")
        copy(self.dir / "eval" / "ood" / "report.csv", "table_ood.csv", "out-of-distribution table")
        copy(self.dir / "ablate" / "curve.csv", "fig_ablation.csv", "ablation curve")
        for group in ("seen", "unseen"):
            copy(self.dir / "probe" / group / "curves.csv", f"fig_probe_{group}.csv", f"probe curves ({group})")
            copy(self.dir / "probe" / group / "exemplars.csv", f"table_exemplars_{group}.csv", f"exemplars ({group})")
        paths.append(atomic_write(out / "gaps.txt", "".join(g + "\n" for g in gaps)))
        for g in gaps:
            logger.warning("report gap: %s", g)
        return paths


def _nan_safe(x):
    if isinstance(x, dict):
        return {k: _nan_safe(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_nan_safe(v) for v in x]
    if isinstance(x, float) and x != x:
        return None
    return x

