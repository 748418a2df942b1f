"""Strict run configuration: nested dataclasses loaded from YAML or JSON, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from projgen.bridge import TinyLMConfig
from projgen.prompts import ABLATION_PROPORTIONS, DEFAULT_TEMPLATE, AblationMethod
from projgen.synthetic import SyntheticConfig
from projgen.train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class SourceConfig:
    kind: str = "synthetic"  # synthetic | vg | openimages | corpus
    regions: str | None = None
    image_meta: str | None = None
    boxes: str | None = None
    class_descriptions: str | None = None
    corpus: str | None = None
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)

    def __post_init__(self):
        need = {"vg": ("regions", "image_meta"), "openimages": ("boxes", "class_descriptions", "image_meta"),
                "corpus": ("corpus",), "synthetic": ()}
        if self.kind not in need:
            raise ConfigError(f"unknown source kind {self.kind!r}")
        missing = [k for k in need[self.kind] if getattr(self, k) is None]
        if missing:
            raise ConfigError(f"source {self.kind!r} requires {missing}")


@dataclass
class FilterConfig:
    min_label_count: int = 10
    area_min: float = 0.002
    area_max: float = 0.5
    train_frac: float = 0.8
    mcqa_min_count: int = 20
    mcqa_cap: int = 200
    dedup_threshold: float = 0.9

    def __post_init__(self):
        if not 0 <= self.area_min < self.area_max <= 1:
            raise ConfigError("need 0 <= area_min < area_max <= 1")
        if not 0 < self.train_frac < 1:
            raise ConfigError("train_frac must be in (0, 1)")
        if self.min_label_count < 1 or self.mcqa_min_count < 1 or self.mcqa_cap < 1:
            raise ConfigError("counts must be positive")
        if not -1 <= self.dedup_threshold <= 1:
            raise ConfigError("dedup_threshold must be a cosine in [-1, 1]")


@dataclass
class SeedConfig:
    split_seed: int = 0
    mcqa_seed: int = 0
    train_seed: int = 0
    probe_seed: int = 0


@dataclass
class BackendConfig:
    kind: str = "reference"  # reference | hf
    encoder_id: str = "latent-ref"
    lm_id: str = "tiny-ref"
    seed: int = 0
    d_v: int = 16
    num_patches: int = 32
    noise_scale: float = 0.3
    # reference tokenizer is padded with filler words up to this size (None: labels + template only)
    vocab_size: int | None = 512
    lm: TinyLMConfig = field(default_factory=TinyLMConfig)
    hf_dtype: str = "float32"
    hf_feature_layer: int = -2
    image_root: str | None = None

    def __post_init__(self):
        if self.kind not in ("reference", "hf"):
            raise ConfigError(f"unknown backend kind {self.kind!r}")
        if self.d_v < 1 or self.num_patches < 0:
            raise ConfigError("d_v must be positive and num_patches non-negative")


@dataclass
class AblationConfig:
    methods: list[str] = field(default_factory=lambda: [m.value for m in AblationMethod])
    proportions: list[float] = field(default_factory=lambda: list(ABLATION_PROPORTIONS))
    seed: int = 0

    def __post_init__(self):
        for m in self.methods:
            try:
                AblationMethod(m)
            except ValueError:
                raise ConfigError(f"unknown ablation method {m!r}") from None
        for p in self.proportions:
            if not any(abs(p - q) < 1e-12 for q in ABLATION_PROPORTIONS):
                raise ConfigError(f"ablation proportion {p} not in {ABLATION_PROPORTIONS}")


@dataclass
class ProbeConfig:
    top_k: int = 3
    max_prefixes: int = 400
    coherence_min: float = 0.5
    n_exemplars: int = 10
    permutation_n: int = 2000

    def __post_init__(self):
        if self.top_k < 1 or self.max_prefixes < 1:
            raise ConfigError("top_k and max_prefixes must be positive")


@dataclass
class RunConfig:
    name: str = "run"
    output_dir: str = "runs/run"
    # prompt text before the label; must contain {x1} {y1} {x2} {y2}
    template: str = DEFAULT_TEMPLATE
    # force which k-means cluster becomes SEEN (None: the larger one)
    seen_cluster: int | None = None
    sources: list[SourceConfig] = field(default_factory=lambda: [SourceConfig()])
    ood: SourceConfig | None = None
    filters: FilterConfig = field(default_factory=FilterConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)
    embedding: dict = field(default_factory=lambda: {"id": "planted"})
    backend: BackendConfig = field(default_factory=BackendConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def __post_init__(self):
        for key in ("{x1}", "{y1}", "{x2}", "{y2}"):
            if key not in self.template:
                raise ConfigError(f"template lacks {key}")
        if self.seen_cluster not in (None, 0, 1):
            raise ConfigError("seen_cluster must be 0, 1 or null")
        if not self.sources:
            raise ConfigError("at least one corpus source is required")
        if self.embedding.get("id") == "planted" and any(s.kind != "synthetic" for s in self.sources):
            raise ConfigError("the planted embedder only exists for synthetic sources")

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or origin is types.UnionType:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _build(inner[0], value, where)
    if dataclasses.is_dataclass(tp):
        if isinstance(value, tp):
            return value
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping for {tp.__name__}")
        hints = typing.get_type_hints(tp)
        names = {f.name for f in dataclasses.fields(tp)}
        unknown = sorted(set(value) - names)
        if unknown:
            raise ConfigError(f"{where}: unknown keys {unknown}")
        kwargs = {k: _build(hints[k], v, f"{where}.{k}") for k, v in value.items()}
        try:
            return tp(**kwargs)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{where}: {e}") from e
    if origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        item_tp = args[0] if args else typing.Any
        out = [_build(item_tp, v, f"{where}[{i}]") for i, v in enumerate(value)]
        return tuple(out) if origin is tuple else out
    if tp is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if tp in (int, float, str, bool) and not isinstance(value, tp):
        raise ConfigError(f"{where}: expected {tp.__name__}, got {type(value).__name__}")
    if tp is dict and not isinstance(value, dict):
        raise ConfigError(f"{where}: expected a mapping")
    return value


def config_from_dict(d: dict) -> RunConfig:
    return _build(RunConfig, d, "config")


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    return config_from_dict(data or {})
