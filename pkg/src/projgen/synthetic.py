"""Planted synthetic world: labels with hierarchical latent semantics, a detection corpus over
synthetic images, and matching reference backends.

Labels form ``n_super`` well separated super-clusters (recovered by the 2-way label split) each
divided into ``n_sub`` tighter sub-clusters. Region features are a fixed linear map of the label
latent and the reference LM embeds each label token as another linear map of the same latent, so
a single linear projection decodes every label, seen or not.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from projgen.bridge import TinyLMConfig, make_reference_backends
from projgen.corpus import Corpus, ImageRecord, Provenance, RegionAnnotation, Source
from projgen.labels import TableEmbedder
from projgen.prompts import normalize_box

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


@dataclass
class SyntheticConfig:
    n_super: int = 2
    n_sub: int = 4
    labels_per_sub: int = 6
    latent_dim: int = 16
    n_images: int = 6000
    max_objects: int = 3
    # spread of sub-cluster centres around their super centre, and labels around their sub centre
    sub_spread: float = 1.0
    label_spread: float = 0.6
    # fraction of boxes drawn outside the area filter bounds
    odd_box_frac: float = 0.02
    seed: int = 0


def _words(n: int, rng) -> list[str]:
    out: list[str] = []
    seen = set()
    while len(out) < n:
        w = "".join(rng.choice(list(_CONSONANTS)) + rng.choice(list(_VOWELS)) for _ in range(int(rng.integers(2, 4))))
        if w not in seen:
            seen.add(w)
            out.append(w)
    return out


def _unit(v):
    return v / np.linalg.norm(v)


@dataclass
class SyntheticWorld:
    cfg: SyntheticConfig
    latents: dict[str, np.ndarray]
    super_of: dict[str, int]
    sub_of: dict[str, int]
    corpus: Corpus = None
    regions: dict = field(default_factory=dict)

    @property
    def labels(self) -> list[str]:
        return sorted(self.latents)

    def embedder(self) -> TableEmbedder:
        return TableEmbedder(self.latents, provider_id=f"planted-s{self.cfg.seed}")

    def backends(self, seed: int = 0, d_v: int = 16, num_patches: int = 32, lm_cfg: TinyLMConfig | None = None,
                 noise_scale: float = 0.3, labels=None, vocab_size: int | None = 512):
        return make_reference_backends(seed=seed, labels=labels or self.labels, d_v=d_v, num_patches=num_patches,
                                       lm_cfg=lm_cfg, latents=self.latents, regions=self.regions,
                                       noise_scale=noise_scale, vocab_size=vocab_size)


def make_world(cfg: SyntheticConfig = SyntheticConfig()) -> SyntheticWorld:
    rng = np.random.default_rng([cfg.seed, 101])
    n_labels = cfg.n_super * cfg.n_sub * cfg.labels_per_sub
    names = sorted(_words(n_labels, rng))
    order = rng.permutation(n_labels)
    d = cfg.latent_dim
    # orthogonal super centres keep the top-level split unambiguous
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    latents, super_of, sub_of = {}, {}, {}
    k = 0
    for s in range(cfg.n_super):
        centre = Q[:, s]
        for j in range(cfg.n_sub):
            sub = _unit(centre + cfg.sub_spread * rng.standard_normal(d) / math.sqrt(d))
            for _ in range(cfg.labels_per_sub):
                name = names[order[k]]
                latents[name] = _unit(sub + cfg.label_spread * rng.standard_normal(d) / math.sqrt(d))
                super_of[name] = s
                sub_of[name] = s * cfg.n_sub + j
                k += 1
    world = SyntheticWorld(cfg, latents, super_of, sub_of)
    world.corpus, world.regions = _make_corpus(world, rng)
    return world


def _make_corpus(world: SyntheticWorld, rng):
    cfg = world.cfg
    labels = world.labels
    images, anns, regions = [], [], {}
    for i in range(cfg.n_images):
        image_id = f"syn{i:06d}"
        W, H = int(rng.integers(200, 641)), int(rng.integers(200, 641))
        images.append(ImageRecord(image_id, W, H, f"synthetic://{image_id}"))
        used = set()
        for j in range(int(rng.integers(1, cfg.max_objects + 1))):
            label = labels[int(rng.integers(len(labels)))]
            if rng.random() < cfg.odd_box_frac:
                frac = float(rng.choice([0.0005, 0.8]))
            else:
                frac = float(np.exp(rng.uniform(np.log(0.01), np.log(0.3))))
            aspect = float(np.exp(rng.uniform(-0.5, 0.5)))
            w = min(W, max(2, round(math.sqrt(frac * W * H * aspect))))
            h = min(H, max(2, round(frac * W * H / w)))
            x1 = int(rng.integers(0, W - w + 1))
            y1 = int(rng.integers(0, H - h + 1))
            box = (x1, y1, x1 + w, y1 + h)
            nb = normalize_box(box, W, H)
            if nb in used:
                continue
            used.add(nb)
            anns.append(RegionAnnotation(f"{image_id}_{j}", image_id, box, label, Source.SYNTHETIC))
            regions[(image_id, nb)] = label
    corpus = Corpus(tuple(images), tuple(anns), Provenance(source=Source.SYNTHETIC.value,
                                                          counters={"generator_seed": cfg.seed}))
    return corpus, regions
