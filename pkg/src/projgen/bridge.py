"""Frozen vision encoder / frozen causal LM interfaces, the trainable linear projection, and
small deterministic reference backends.

The reference LM is a pre-LayerNorm decoder with tied input/output embeddings. Its FFN is either
plain (``h = f(K x)``, ``out = V h``) or gated (``h = f(W_gate x) * (W_up x)``, ``out = W_down h``);
in both cases ``h`` is the vector of memory coefficients weighting the value columns.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

PLAIN = "plain"
GATED = "gated"

ACTIVATIONS: dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "gelu": F.gelu,
    "relu": F.relu,
    "silu": F.silu,
}


class ConfigError(ValueError):
    pass


class AssemblyError(ValueError):
    pass


# ---------------------------------------------------------------------------
# tokenizer

PRETOKENIZE = re.compile(r"\n| ?[A-Za-z]+| ?\d| ?[^\sA-Za-z\d]")
FILLER_PREFIX = "<w"


class WordTokenizer:
    """Word-level tokenizer for the reference LM: space-prefixed words, single digits, punctuation."""

    specials = ("<bos>", "<unk>", "\n")

    def __init__(self, pieces: Sequence[str]):
        vocab = list(self.specials)
        seen = set(vocab)
        for p in pieces:
            if p not in seen:
                vocab.append(p)
                seen.add(p)
        self.vocab = vocab
        self.index = {p: i for i, p in enumerate(vocab)}
        self.bos_id = 0
        self.unk_id = 1
        self.newline_id = 2

    @classmethod
    def from_labels(cls, labels: Sequence[str], extra_text: Sequence[str] = (),
                    vocab_size: int | None = None) -> "WordTokenizer":
        """Vocabulary covering the prompt template and ``labels``, optionally padded with filler
        words (``<w0>``, ``<w1>``, ...) that no text encodes to, up to ``vocab_size`` entries."""
        base = ["bbox", ":", "[", "]", ",", ".", *"0123456789"]
        pieces = list(base)
        for text in list(extra_text) + sorted(" " + lab for lab in labels):
            pieces.extend(PRETOKENIZE.findall(text))
        tok = cls(pieces)
        if vocab_size is not None and vocab_size > tok.vocab_size:
            n = vocab_size - tok.vocab_size
            tok = cls(pieces + [f"{FILLER_PREFIX}{i}>" for i in range(n)])
        return tok

    def filler_pieces(self) -> list[str]:
        return [p for p in self.vocab if p.startswith(FILLER_PREFIX)]

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(p, self.unk_id) for p in PRETOKENIZE.findall(text)]

    def id_to_token(self, i: int) -> str:
        return self.vocab[i]

    def decode(self, ids) -> str:
        return "".join(self.vocab[i] for i in ids)

    def to_json(self) -> dict:
        return {"vocab": self.vocab}

    @classmethod
    def from_json(cls, d) -> "WordTokenizer":
        return cls(d["vocab"][len(cls.specials):])


# ---------------------------------------------------------------------------
# vision side

@dataclass
class VisionFeatures:
    """Patch tokens only; any summary/CLS token has already been removed."""

    patches: torch.Tensor

    @property
    def num_patches(self) -> int:
        return self.patches.shape[0]

    @property
    def d_v(self) -> int:
        return self.patches.shape[1]


class VisionEncoder(Protocol):
    d_v: int
    num_patches: int

    def encode(self, image_id: str, norm_box) -> VisionFeatures: ...


def _seed_from(*parts) -> int:
    h = hashlib.sha256("\x00".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little")


class RandomPatchEncoder:
    """Deterministic pseudo-features from the image descriptor alone (no semantic content)."""

    def __init__(self, d_v: int = 16, num_patches: int = 8, seed: int = 0):
        self.d_v, self.num_patches, self.seed = d_v, num_patches, seed

    def encode(self, image_id, norm_box):
        rng = np.random.default_rng(_seed_from(self.seed, image_id, *norm_box))
        return VisionFeatures(torch.from_numpy(rng.standard_normal((self.num_patches, self.d_v))))

    def param_digest(self) -> str:
        return hashlib.sha256(f"random-patch:{self.d_v}:{self.num_patches}:{self.seed}".encode()).hexdigest()


class LatentRegionEncoder:
    """Region encoder for planted synthetic images.

    The pixel content of a region is the latent vector ``z`` of the object drawn there; the encoder
    emits ``A z + noise_scale * eps`` for every patch, with ``A`` a fixed random matrix and ``eps``
    seeded by the region identity.
    """

    def __init__(self, latents: dict[str, np.ndarray], regions: dict[tuple, str], d_v: int = 16,
                 num_patches: int = 8, noise_scale: float = 0.3, seed: int = 0):
        self.d_v, self.num_patches, self.noise_scale, self.seed = d_v, num_patches, noise_scale, seed
        self.latents = latents
        self.regions = regions
        latent_dim = len(next(iter(latents.values())))
        rng = np.random.default_rng([seed, 17])
        self.A = rng.standard_normal((d_v, latent_dim)) / math.sqrt(latent_dim)

    def encode(self, image_id, norm_box):
        key = (image_id, tuple(round(float(v), 2) for v in norm_box))
        label = self.regions.get(key)
        rng = np.random.default_rng(_seed_from(self.seed, *key))
        noise = rng.standard_normal((self.num_patches, self.d_v))
        if label is None:
            return VisionFeatures(torch.from_numpy(noise))
        signal = self.A @ self.latents[label] * math.sqrt(self.d_v)
        return VisionFeatures(torch.from_numpy(signal[None, :] + self.noise_scale * noise))

    def param_digest(self) -> str:
        return _array_digest([self.A])


class HFVisionEncoder:
    """Pretrained ViT-style encoder from ``transformers``; the leading CLS token is dropped."""

    def __init__(self, model_name: str, images: dict[str, str] | None = None, feature_layer: int = -2,
                 drop_cls: bool = True, device: str = "cpu"):
        from transformers import AutoImageProcessor, AutoModel

        self.model = AutoModel.from_pretrained(model_name).to(device).eval()
        if hasattr(self.model, "vision_model"):
            self.model = self.model.vision_model
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.processor = AutoImageProcessor.from_pretrained(model_name)
        self.images = images or {}
        self.feature_layer, self.drop_cls, self.device = feature_layer, drop_cls, device
        cfg = self.model.config
        self.d_v = cfg.hidden_size
        side = cfg.image_size // cfg.patch_size
        self.num_patches = side * side

    @torch.no_grad()
    def encode(self, image_id, norm_box):
        from PIL import Image

        img = Image.open(self.images.get(image_id, image_id)).convert("RGB")
        pixels = self.processor(images=img, return_tensors="pt")["pixel_values"].to(self.device)
        out = self.model(pixel_values=pixels, output_hidden_states=True)
        hidden = out.hidden_states[self.feature_layer][0]
        if self.drop_cls:
            hidden = hidden[1:]
        return VisionFeatures(hidden[-self.num_patches:].cpu())

    def param_digest(self) -> str:
        return module_digest(self.model)


# ---------------------------------------------------------------------------
# projection

@dataclass
class ProjectionParams:
    weight: np.ndarray
    bias: np.ndarray | None
    seed: int = 0
    step: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def d_lm(self) -> int:
        return self.weight.shape[0]

    @property
    def d_v(self) -> int:
        return self.weight.shape[1]

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)
            if self.bias.shape != (self.weight.shape[0],):
                raise ConfigError(f"bias shape {self.bias.shape} does not match weight {self.weight.shape}")
        if not np.all(np.isfinite(self.weight)) or (self.bias is not None and not np.all(np.isfinite(self.bias))):
            raise ConfigError("projection has non-finite entries")

    def digest(self) -> str:
        return _array_digest([self.weight] + ([self.bias] if self.bias is not None else []))

    def save(self, path) -> Path:
        """Checkpoint as ``<path>.npz`` plus ``<path>.json`` manifest."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays = {"weight": self.weight}
        if self.bias is not None:
            arrays["bias"] = self.bias
        npz = path.with_suffix(".npz")
        tmp = path.with_suffix(".tmp.npz")
        np.savez(tmp, **arrays)
        os.replace(tmp, npz)
        manifest = {"d_v": self.d_v, "d_lm": self.d_lm, "has_bias": self.bias is not None, "seed": self.seed,
                    "step": self.step, "digest": self.digest(), **self.meta}
        path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
        return npz

    @classmethod
    def load(cls, path) -> "ProjectionParams":
        path = Path(path)
        manifest = json.loads(path.with_suffix(".json").read_text())
        with np.load(path.with_suffix(".npz")) as z:
            weight = z["weight"]
            bias = z["bias"] if "bias" in z.files else None
        meta = {k: v for k, v in manifest.items() if k not in {"d_v", "d_lm", "has_bias", "seed", "step", "digest"}}
        p = cls(weight, bias, manifest["seed"], manifest["step"], meta)
        if p.digest() != manifest["digest"]:
            raise ConfigError(f"{path}: checkpoint digest mismatch")
        return p


class Projection(nn.Module):
    """The only trainable module: ``out = patches @ weight.T + bias``."""

    def __init__(self, d_v: int, d_lm: int, bias: bool = True, seed: int = 0, dtype=torch.float64):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.weight = nn.Parameter(torch.randn(d_lm, d_v, generator=g, dtype=dtype) / math.sqrt(d_v))
        self.bias = nn.Parameter(torch.zeros(d_lm, dtype=dtype)) if bias else None
        self.seed = seed

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        out = patches.to(self.weight.dtype) @ self.weight.T
        return out + self.bias if self.bias is not None else out

    @classmethod
    def from_params(cls, params: ProjectionParams, dtype=torch.float64) -> "Projection":
        m = cls(params.d_v, params.d_lm, bias=params.bias is not None, seed=params.seed, dtype=dtype)
        with torch.no_grad():
            m.weight.copy_(torch.from_numpy(params.weight))
            if params.bias is not None:
                m.bias.copy_(torch.from_numpy(params.bias))
        return m

    def to_params(self, step: int = 0, **meta) -> ProjectionParams:
        w = self.weight.detach().cpu().double().numpy().copy()
        b = None if self.bias is None else self.bias.detach().cpu().double().numpy().copy()
        return ProjectionParams(w, b, self.seed, step, dict(meta))


def project(features: VisionFeatures | torch.Tensor, params: ProjectionParams) -> torch.Tensor:
    patches = features.patches if isinstance(features, VisionFeatures) else features
    if patches.shape[-1] != params.d_v:
        raise ConfigError(f"feature dim {patches.shape[-1]} != projection input dim {params.d_v}")
    w = torch.from_numpy(params.weight).to(torch.float64)
    out = patches.to(torch.float64) @ w.T
    if params.bias is not None:
        out = out + torch.from_numpy(params.bias)
    return out


# ---------------------------------------------------------------------------
# language model side

@dataclass
class LMForwardTrace:
    logits: torch.Tensor
    positions: tuple[int, ...]
    # [num_layers, len(positions), d_ffn]
    coefficients: torch.Tensor
    # FFN inputs (post-norm residual) at those positions, [num_layers, len(positions), d_lm]
    ffn_inputs: torch.Tensor


class LanguageModel(Protocol):
    num_layers: int
    d_lm: int
    d_ffn: int
    vocab_size: int
    bos_id: int
    newline_id: int
    tokenizer: object

    def token_embed(self, ids) -> torch.Tensor: ...

    def forward(self, embeds: torch.Tensor) -> torch.Tensor: ...

    def traced_forward(self, embeds: torch.Tensor, positions: Sequence[int]) -> LMForwardTrace: ...

    def unembed(self, vec) -> torch.Tensor: ...

    def value_vector(self, layer: int, index: int) -> torch.Tensor: ...

    def key_vector(self, layer: int, index: int) -> torch.Tensor: ...


def ffn_memory_coefficients(x, layer_params: dict, arch: str = PLAIN, activation: str = "gelu"):
    """Memory coefficients of one FFN for input ``x`` (shape ``[..., d]``).

    ``layer_params`` holds ``key`` (plain) or ``gate`` and ``up`` (gated), each ``[d_ffn, d]``.
    """
    act = ACTIVATIONS[activation]
    x = torch.as_tensor(x)
    if arch == PLAIN:
        return act(x @ torch.as_tensor(layer_params["key"]).T)
    if arch == GATED:
        gate = x @ torch.as_tensor(layer_params["gate"]).T
        up = x @ torch.as_tensor(layer_params["up"]).T
        return act(gate) * up
    raise ConfigError(f"unknown FFN arch {arch!r}")


@dataclass
class TinyLMConfig:
    d_lm: int = 32
    num_layers: int = 2
    num_heads: int = 2
    d_ffn: int = 64
    arch: str = PLAIN
    activation: str = "gelu"
    max_len: int = 1024
    seed: int = 0
    # scales for generic token rows, planted label rows, FFN output and query weights; the small
    # defaults keep the residual stream close to linear in the visual tokens
    embed_scale: float = 0.1
    planted_scale: float = 0.25
    ffn_scale: float = 0.2
    attn_scale: float = 0.2
    pos_scale: float = 0.1


class TinyCausalLM(nn.Module):
    """Reference frozen LM. Parameters are drawn once from ``seed`` and never updated."""

    def __init__(self, tokenizer: WordTokenizer, cfg: TinyLMConfig = TinyLMConfig(),
                 planted: dict[str, np.ndarray] | None = None):
        super().__init__()
        if cfg.arch not in (PLAIN, GATED):
            raise ConfigError(f"unknown FFN arch {cfg.arch!r}")
        if cfg.d_lm % cfg.num_heads:
            raise ConfigError("d_lm must be divisible by num_heads")
        self.cfg = cfg
        self.tokenizer = tokenizer
        d, m, V = cfg.d_lm, cfg.d_ffn, tokenizer.vocab_size
        g = torch.Generator().manual_seed(cfg.seed)

        def rand(*shape, std=1.0):
            return torch.randn(*shape, generator=g, dtype=torch.float64) * std

        emb = rand(V, d, std=cfg.embed_scale)
        if planted:
            # planted rows: token embedding = scaled image of a label latent under a fixed map
            latent_dim = len(next(iter(planted.values())))
            B = rand(d, latent_dim, std=1.0 / math.sqrt(latent_dim))
            for piece, z in planted.items():
                if piece in tokenizer.index:
                    v = B @ torch.as_tensor(z, dtype=torch.float64)
                    emb[tokenizer.index[piece]] = v / v.norm() * math.sqrt(d) * cfg.planted_scale
        self.register_buffer("tok_emb", emb)
        self.register_buffer("pos_emb", rand(cfg.max_len, d, std=cfg.pos_scale))
        buffers = {}
        for i in range(cfg.num_layers):
            buffers[f"wq{i}"] = rand(d, d, std=cfg.attn_scale / math.sqrt(d))
            buffers[f"wk{i}"] = rand(d, d, std=1 / math.sqrt(d))
            buffers[f"wv{i}"] = rand(d, d, std=1 / math.sqrt(d))
            buffers[f"wo{i}"] = rand(d, d, std=1 / math.sqrt(d))
            if cfg.arch == PLAIN:
                buffers[f"key{i}"] = rand(m, d, std=1 / math.sqrt(d))
            else:
                buffers[f"gate{i}"] = rand(m, d, std=1 / math.sqrt(d))
                buffers[f"up{i}"] = rand(m, d, std=1 / math.sqrt(d))
            buffers[f"down{i}"] = rand(d, m, std=cfg.ffn_scale / math.sqrt(m))
        for k, v in buffers.items():
            self.register_buffer(k, v)
        self.act = ACTIVATIONS[cfg.activation]
        self.eval()

    # metadata
    @property
    def num_layers(self):
        return self.cfg.num_layers

    @property
    def d_lm(self):
        return self.cfg.d_lm

    @property
    def d_ffn(self):
        return self.cfg.d_ffn

    @property
    def arch(self):
        return self.cfg.arch

    @property
    def activation(self):
        return self.cfg.activation

    @property
    def vocab_size(self):
        return self.tok_emb.shape[0]

    @property
    def bos_id(self):
        return self.tokenizer.bos_id

    @property
    def newline_id(self):
        return self.tokenizer.newline_id

    @property
    def dtype(self):
        return self.tok_emb.dtype

    def layer_params(self, i: int) -> dict[str, torch.Tensor]:
        names = ["wq", "wk", "wv", "wo", "down"] + (["key"] if self.arch == PLAIN else ["gate", "up"])
        return {n: getattr(self, f"{n}{i}") for n in names}

    def token_embed(self, ids) -> torch.Tensor:
        return self.tok_emb[torch.as_tensor(ids, dtype=torch.long)]

    def unembed(self, vec) -> torch.Tensor:
        return torch.as_tensor(vec, dtype=self.dtype) @ self.tok_emb.T

    def value_vector(self, layer, index):
        return getattr(self, f"down{layer}")[:, index]

    def key_vector(self, layer, index):
        name = "key" if self.arch == PLAIN else "gate"
        return getattr(self, f"{name}{layer}")[index]

    def _ffn(self, i, x):
        p = self.layer_params(i)
        h = ffn_memory_coefficients(x, p, self.arch, self.activation)
        return h, h @ p["down"].T

    def _run(self, embeds, positions=None):
        squeeze = embeds.dim() == 2
        x = embeds[None] if squeeze else embeds
        B, T, d = x.shape
        H = self.cfg.num_heads
        x = x + self.pos_emb[:T]
        causal = torch.ones(T, T, dtype=torch.bool).tril()
        coefs, inputs = [], []
        for i in range(self.num_layers):
            p = self.layer_params(i)
            a = F.layer_norm(x, (d,))
            q = (a @ p["wq"].T).view(B, T, H, d // H).transpose(1, 2)
            k = (a @ p["wk"].T).view(B, T, H, d // H).transpose(1, 2)
            v = (a @ p["wv"].T).view(B, T, H, d // H).transpose(1, 2)
            scores = (q @ k.transpose(-1, -2)) / math.sqrt(d // H)
            scores = scores.masked_fill(~causal, float("-inf"))
            att = torch.softmax(scores, dim=-1) @ v
            x = x + att.transpose(1, 2).reshape(B, T, d) @ p["wo"].T
            f_in = F.layer_norm(x, (d,))
            h, out = self._ffn(i, f_in)
            if positions is not None:
                coefs.append(h[:, positions])
                inputs.append(f_in[:, positions])
            x = x + out
        logits = F.layer_norm(x, (d,)) @ self.tok_emb.T
        if squeeze:
            logits = logits[0]
            coefs = [c[0] for c in coefs]
            inputs = [c[0] for c in inputs]
        return logits, coefs, inputs

    def forward(self, embeds: torch.Tensor) -> torch.Tensor:
        return self._run(embeds)[0]

    @torch.no_grad()
    def traced_forward(self, embeds, positions) -> LMForwardTrace:
        positions = [p if p >= 0 else embeds.shape[-2] + p for p in positions]
        logits, coefs, inputs = self._run(embeds, list(positions))
        return LMForwardTrace(logits, tuple(positions), torch.stack(coefs), torch.stack(inputs))

    def param_digest(self) -> str:
        return module_digest(self)


class HFCausalLM:
    """Adapter over a ``transformers`` causal LM (Llama/Qwen style, gated MLP with ``down_proj``).

    Memory coefficients are read as the input of each layer's down projection, which is exactly the
    vector weighting the value columns whatever the MLP variant.
    """

    def __init__(self, model, tokenizer, layers_attr: str = "model.layers", mlp_attr: str = "mlp",
                 down_attr: str = "down_proj"):
        self.model = model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.tokenizer = tokenizer
        layers = self.model
        for part in layers_attr.split("."):
            layers = getattr(layers, part)
        self.layers = list(layers)
        self.mlp_attr, self.down_attr = mlp_attr, down_attr
        cfg = self.model.config
        self.num_layers = len(self.layers)
        self.d_lm = cfg.hidden_size
        self.d_ffn = cfg.intermediate_size
        self.vocab_size = cfg.vocab_size
        self.arch = GATED if hasattr(self._mlp(0), "gate_proj") else PLAIN
        self.activation = getattr(cfg, "hidden_act", "silu")

    @classmethod
    def from_pretrained(cls, model_name: str, dtype: str = "float32", device: str = "cpu", **kw):
        from transformers import AutoModelForCausalLM, AutoTokenizer

        model = AutoModelForCausalLM.from_pretrained(model_name, dtype=getattr(torch, dtype)).to(device)
        return cls(model, HFTokenizerView(AutoTokenizer.from_pretrained(model_name)), **kw)

    def _mlp(self, i):
        return getattr(self.layers[i], self.mlp_attr)

    def _down(self, i):
        return getattr(self._mlp(i), self.down_attr)

    @property
    def bos_id(self):
        return self.tokenizer.bos_id

    @property
    def newline_id(self):
        return self.tokenizer.newline_id

    @property
    def dtype(self):
        return self.model.get_input_embeddings().weight.dtype

    def token_embed(self, ids):
        emb = self.model.get_input_embeddings()
        return emb(torch.as_tensor(ids, dtype=torch.long, device=emb.weight.device))

    def forward(self, embeds):
        squeeze = embeds.dim() == 2
        x = embeds[None] if squeeze else embeds
        logits = self.model(inputs_embeds=x.to(self.dtype)).logits
        return logits[0] if squeeze else logits

    def _output_matrix(self):
        return self.model.get_output_embeddings().weight

    def unembed(self, vec):
        W = self._output_matrix()
        return torch.as_tensor(vec, dtype=W.dtype, device=W.device) @ W.T

    def value_vector(self, layer, index):
        return self._down(layer).weight[:, index]

    def key_vector(self, layer, index):
        mlp = self._mlp(layer)
        lin = mlp.gate_proj if self.arch == GATED else getattr(mlp, "up_proj", None) or mlp.c_fc
        return lin.weight[index]

    def layer_params(self, i):
        mlp = self._mlp(i)
        if self.arch == GATED:
            return {"gate": mlp.gate_proj.weight, "up": mlp.up_proj.weight, "down": self._down(i).weight}
        return {"down": self._down(i).weight}

    @torch.no_grad()
    def traced_forward(self, embeds, positions):
        T = embeds.shape[-2]
        positions = [p if p >= 0 else T + p for p in positions]
        coefs, inputs, handles = [], [], []

        def grab(store):
            def hook(module, args):
                h = args[0]
                store.append(h[0, positions] if h.dim() == 3 else h[positions])
            return hook

        for i in range(self.num_layers):
            handles.append(self._mlp(i).register_forward_pre_hook(grab(inputs)))
            handles.append(self._down(i).register_forward_pre_hook(grab(coefs)))
        try:
            logits = self.forward(embeds)
        finally:
            for h in handles:
                h.remove()
        return LMForwardTrace(logits, tuple(positions), torch.stack(coefs), torch.stack(inputs))

    def param_digest(self) -> str:
        return module_digest(self.model)


class HFTokenizerView:
    """Minimal view of a Hugging Face tokenizer: encode without specials plus BOS/newline ids."""

    def __init__(self, tok):
        self.tok = tok
        self.bos_id = tok.bos_token_id if tok.bos_token_id is not None else tok.eos_token_id
        self.newline_id = tok.encode("\n", add_special_tokens=False)[-1]
        self.vocab_size = len(tok)

    def encode(self, text):
        return self.tok.encode(text, add_special_tokens=False)

    def id_to_token(self, i):
        return self.tok.convert_ids_to_tokens(int(i))

    def decode(self, ids):
        return self.tok.decode(list(ids))


# ---------------------------------------------------------------------------
# assembly


def assemble_input(visual_embeds: torch.Tensor, rendered, lm) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """``[BOS] + visual + prefix + label + EOS`` embeddings, next-token targets and the loss mask.

    ``targets[t]`` is the id at ``t + 1`` (``-100`` where undefined); ``mask[t]`` is True exactly when
    that target is a label token or the EOS.
    """
    P = visual_embeds.shape[0] if visual_embeds is not None else 0
    if P != rendered.image_slot:
        raise AssemblyError(f"image_slot {rendered.image_slot} but {P} visual embeddings")
    text_ids = list(rendered.text_prefix_tokens) + list(rendered.label_tokens) + [rendered.eos_token]
    bos = lm.token_embed([rendered.bos_token])
    text = lm.token_embed(text_ids)
    parts = [bos]
    if P:
        parts.append(visual_embeds.to(text.dtype))
    parts.append(text)
    embeds = torch.cat(parts, dim=0)
    T = embeds.shape[0]
    targets = torch.full((T,), -100, dtype=torch.long)
    start = 1 + P
    targets[start - 1:T - 1] = torch.as_tensor(text_ids, dtype=torch.long)
    mask = torch.zeros(T, dtype=torch.bool)
    first_label = start + len(rendered.text_prefix_tokens)
    mask[first_label - 1:T - 1] = True
    return embeds, targets, mask


def collate(items: Sequence[tuple[torch.Tensor, torch.Tensor, torch.Tensor]]):
    """Right-pad a list of assembled sequences into a batch."""
    T = max(e.shape[0] for e, _, _ in items)
    d = items[0][0].shape[1]
    B = len(items)
    embeds = torch.zeros(B, T, d, dtype=items[0][0].dtype)
    targets = torch.full((B, T), -100, dtype=torch.long)
    mask = torch.zeros(B, T, dtype=torch.bool)
    for b, (e, t, m) in enumerate(items):
        n = e.shape[0]
        embeds[b, :n] = e
        targets[b, :n] = t
        mask[b, :n] = m
    return embeds, targets, mask


# ---------------------------------------------------------------------------
# digests, registry


def _array_digest(arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(np.asarray(a))
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def module_digest(module: nn.Module) -> str:
    state = module.state_dict()
    return _array_digest([state[k].detach().cpu().float().numpy() if state[k].dtype == torch.bfloat16
                          else state[k].detach().cpu().numpy() for k in sorted(state)])


def planted_pieces(tokenizer: WordTokenizer, latents: dict[str, np.ndarray], seed: int = 0) -> dict[str, np.ndarray]:
    """Latent for every single-piece label, plus a random latent for each filler word so that the
    filler rows live in the same semantic space as the labels."""
    out = {" " + lab: z for lab, z in latents.items() if len(PRETOKENIZE.findall(" " + lab)) == 1}
    fillers = tokenizer.filler_pieces()
    if fillers and latents:
        dim = len(next(iter(latents.values())))
        rng = np.random.default_rng([seed, 23])
        for piece in fillers:
            z = rng.standard_normal(dim)
            out[piece] = z / np.linalg.norm(z)
    return out


def make_reference_backends(seed: int = 0, labels: Sequence[str] = ("dog", "cat", "car", "mug"),
                            d_v: int = 16, num_patches: int = 8, lm_cfg: TinyLMConfig | None = None,
                            latents: dict[str, np.ndarray] | None = None,
                            regions: dict[tuple, str] | None = None, noise_scale: float = 0.3,
                            vocab_size: int | None = None):
    """Tiny frozen encoder + LM pair.

    With ``latents`` (label -> latent vector) the pair is planted: region features are linear in the
    latent, and the LM's token embedding of each single-word label is a linear image of the same
    latent, so one linear projection serves every label.
    """
    lm_cfg = lm_cfg or TinyLMConfig(seed=seed)
    tok = WordTokenizer.from_labels(labels, vocab_size=vocab_size)
    planted = None
    if latents is not None:
        planted = planted_pieces(tok, latents, lm_cfg.seed)
        encoder = LatentRegionEncoder(latents, regions or {}, d_v, num_patches, noise_scale, seed)
    else:
        encoder = RandomPatchEncoder(d_v, num_patches, seed)
    lm = TinyCausalLM(tok, lm_cfg, planted)
    return encoder, lm
