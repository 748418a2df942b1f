import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from projgen.bridge import (GATED, PLAIN, AssemblyError, ConfigError, HFCausalLM, LatentRegionEncoder, Projection,
                            ProjectionParams, RandomPatchEncoder, TinyCausalLM, TinyLMConfig, VisionFeatures,
                            WordTokenizer, assemble_input, collate, ffn_memory_coefficients, project)
from projgen.prompts import PromptSample, SplitTag, render_prompt


def test_tokenizer_words_digits_punctuation():
    tok = WordTokenizer.from_labels(["grape", "red car"])
    ids = tok.encode("bbox:[[0.12]] red car\n")
    assert tok.decode(ids) == "bbox:[[0.12]] red car\n"
    assert tok.unk_id not in ids
    assert tok.encode(" zebra") == [tok.unk_id]


def test_tokenizer_filler_padding():
    tok = WordTokenizer.from_labels(["grape"], vocab_size=64)
    assert tok.vocab_size == 64
    assert len(tok.filler_pieces()) == 64 - WordTokenizer.from_labels(["grape"]).vocab_size
    # filler words are never produced by encoding text
    assert not set(tok.encode("bbox:[[0.10]] grape <w0>\n")) & {tok.index[p] for p in tok.filler_pieces()}
    assert WordTokenizer.from_json(tok.to_json()).vocab == tok.vocab


def test_projection_identity_and_zero():
    patches = torch.randn(5, 4, dtype=torch.float64)
    ident = ProjectionParams(np.eye(4), np.zeros(4))
    assert torch.equal(project(patches, ident), patches)
    zero = ProjectionParams(np.zeros((3, 4)), np.array([1.0, 2.0, 3.0]))
    assert torch.equal(project(patches, zero), torch.tensor([[1.0, 2.0, 3.0]] * 5, dtype=torch.float64))


def test_projection_matches_matmul():
    rng = np.random.default_rng(0)
    x, w, b = rng.standard_normal((3, 4)), rng.standard_normal((5, 4)), rng.standard_normal(5)
    out = project(torch.from_numpy(x), ProjectionParams(w, b)).numpy()
    assert np.allclose(out, x @ w.T + b, atol=1e-6)
    # module and params snapshot agree
    m = Projection.from_params(ProjectionParams(w, b))
    assert torch.allclose(m(torch.from_numpy(x)), torch.from_numpy(out))


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
def test_projection_affine(alpha, beta, seed):
    g = torch.Generator().manual_seed(seed)
    a, b = torch.randn(2, 4, generator=g, dtype=torch.float64), torch.randn(2, 4, generator=g, dtype=torch.float64)
    p = ProjectionParams(np.random.default_rng(seed).standard_normal((3, 4)), np.arange(3.0))
    lhs = project(alpha * a + beta * b, p)
    rhs = alpha * project(a, p) + beta * project(b, p) - (alpha + beta - 1) * torch.from_numpy(p.bias)
    assert torch.allclose(lhs, rhs, atol=1e-9)


def test_projection_dim_mismatch():
    with pytest.raises(ConfigError):
        project(torch.zeros(2, 3), ProjectionParams(np.zeros((4, 5)), None))


def test_checkpoint_roundtrip_and_tamper(tmp_path):
    p = ProjectionParams(np.random.default_rng(1).standard_normal((3, 2)), np.ones(3), seed=4, step=9, meta={"a": 1})
    p.save(tmp_path / "proj")
    q = ProjectionParams.load(tmp_path / "proj")
    assert np.array_equal(q.weight, p.weight) and q.step == 9 and q.meta == {"a": 1}
    np.savez(tmp_path / "proj.npz", weight=p.weight + 1e-9, bias=p.bias)
    with pytest.raises(ConfigError, match="digest"):
        ProjectionParams.load(tmp_path / "proj")


def test_encoders_are_deterministic():
    enc = RandomPatchEncoder(d_v=4, num_patches=3, seed=1)
    a = enc.encode("im", (0.1, 0.2, 0.3, 0.4)).patches
    assert torch.equal(a, enc.encode("im", (0.1, 0.2, 0.3, 0.4)).patches)
    assert not torch.equal(a, enc.encode("im", (0.1, 0.2, 0.3, 0.5)).patches)
    lat = {"dog": np.array([1.0, 0.0]), "cat": np.array([0.0, 1.0])}
    le = LatentRegionEncoder(lat, {("im", (0.1, 0.2, 0.3, 0.4)): "dog"}, d_v=6, num_patches=2, noise_scale=0.0)
    f = le.encode("im", (0.1, 0.2, 0.3, 0.4)).patches.numpy()
    assert np.allclose(f[0], le.A @ lat["dog"] * np.sqrt(6))


def test_assembly_layout():
    tok = WordTokenizer.from_labels(["red car"])
    lm = TinyCausalLM(tok, TinyLMConfig(d_lm=8, d_ffn=8))
    # 6 prefix tokens with a short custom template, 2 label tokens
    s = PromptSample("s", "im", (0.1, 0.2, 0.3, 0.4), "red car", SplitTag.TRAIN_SEEN)
    r = render_prompt(s, tok, 4, template="{x1}{y1}{x2}{y2}")
    r = type(r)(r.bos_token, 4, r.text_prefix_tokens[:6], r.label_tokens, r.eos_token)
    embeds, targets, mask = assemble_input(torch.zeros(4, 8, dtype=torch.float64), r, lm)
    assert embeds.shape == (14, 8)
    assert int(mask.sum()) == 3
    masked = targets[mask].tolist()
    assert masked[:2] == list(r.label_tokens)
    assert masked[-1] == tok.newline_id
    assert targets[-1] == -100
    with pytest.raises(AssemblyError):
        assemble_input(torch.zeros(3, 8, dtype=torch.float64), r, lm)


def test_collate_pads():
    a = (torch.ones(3, 2), torch.tensor([1, 2, -100]), torch.tensor([False, True, False]))
    b = (torch.ones(5, 2), torch.tensor([1, 2, 3, 4, -100]), torch.tensor([False, True, True, True, False]))
    e, t, m = collate([a, b])
    assert e.shape == (2, 5, 2)
    assert t[0, 3:].tolist() == [-100, -100]
    assert m.sum() == 4


def test_plain_relu_coefficients():
    K = torch.tensor([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    h = ffn_memory_coefficients(torch.tensor([1.0, 0.0]), {"key": K}, PLAIN, "relu")
    assert h.tolist() == [1.0, 0.0, 0.0]


def test_gated_formula_and_zero_input():
    g = torch.Generator().manual_seed(0)
    gate, up = torch.randn(5, 3, generator=g), torch.randn(5, 3, generator=g)
    x = torch.randn(3, generator=g)
    h = ffn_memory_coefficients(x, {"gate": gate, "up": up}, GATED, "silu")
    assert torch.allclose(h, torch.nn.functional.silu(gate @ x) * (up @ x))
    assert torch.equal(ffn_memory_coefficients(torch.zeros(3), {"gate": gate, "up": up}, GATED, "silu"), torch.zeros(5))
    assert torch.equal(ffn_memory_coefficients(torch.zeros(3), {"key": gate}, PLAIN, "gelu"), torch.zeros(5))


@pytest.mark.parametrize("arch", [PLAIN, GATED])
def test_traced_forward_matches_forward(arch):
    tok = WordTokenizer.from_labels(["a", "b"])
    lm = TinyCausalLM(tok, TinyLMConfig(d_lm=8, d_ffn=10, arch=arch, activation="silu" if arch == GATED else "gelu"))
    embeds = torch.randn(7, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(3))
    tr = lm.traced_forward(embeds, [-1, 2])
    assert torch.equal(tr.logits, lm.forward(embeds))
    assert tr.positions == (6, 2)
    assert tr.coefficients.shape == (2, 2, 10)
    for layer in range(2):
        h = ffn_memory_coefficients(tr.ffn_inputs[layer], lm.layer_params(layer), arch, lm.activation)
        assert torch.allclose(h, tr.coefficients[layer], atol=1e-12)


def test_unembed_and_value_vectors():
    lm = TinyCausalLM(WordTokenizer.from_labels(["a"]), TinyLMConfig(d_lm=8, d_ffn=6))
    v = lm.value_vector(1, 4)
    assert torch.equal(v, lm.down1[:, 4])
    assert torch.allclose(lm.unembed(v), lm.tok_emb @ v)
    assert torch.equal(lm.key_vector(0, 2), lm.key0[2])


def test_lm_is_seeded():
    tok = WordTokenizer.from_labels(["a"])
    assert TinyCausalLM(tok, TinyLMConfig(seed=3)).param_digest() == TinyCausalLM(tok, TinyLMConfig(seed=3)).param_digest()
    assert TinyCausalLM(tok, TinyLMConfig(seed=3)).param_digest() != TinyCausalLM(tok, TinyLMConfig(seed=4)).param_digest()


class _Tok:
    bos_id, newline_id, vocab_size = 1, 2, 64

    def encode(self, text):
        return [3 + (ord(c) % 60) for c in text]

    def id_to_token(self, i):
        return f"t{i}"


@pytest.fixture(scope="module")
def hf_llama():
    transformers = pytest.importorskip("transformers")
    cfg = transformers.LlamaConfig(vocab_size=64, hidden_size=16, intermediate_size=24, num_hidden_layers=2,
                                   num_attention_heads=2, num_key_value_heads=2, max_position_embeddings=64)
    torch.manual_seed(0)
    model = transformers.LlamaForCausalLM(cfg)
    return HFCausalLM(model, _Tok())


def test_hf_gated_coefficients_reconstruct_ffn(hf_llama):
    lm = hf_llama
    assert lm.arch == GATED
    embeds = torch.randn(6, 16, generator=torch.Generator().manual_seed(1))
    outputs = []
    hook = lm._mlp(1).register_forward_hook(lambda m, a, out: outputs.append(out[0, -1]))
    try:
        tr = lm.traced_forward(embeds, [-1])
    finally:
        hook.remove()
    h = tr.coefficients[1, 0]
    recomputed = ffn_memory_coefficients(tr.ffn_inputs[1, 0], lm.layer_params(1), GATED, lm.activation)
    assert torch.allclose(h, recomputed, atol=1e-5)
    assert torch.allclose(h @ lm._down(1).weight.T, outputs[0], atol=1e-5)
    assert torch.allclose(lm.unembed(lm.value_vector(1, 3)), lm._output_matrix() @ lm._down(1).weight[:, 3])


def test_features_dataclass():
    f = VisionFeatures(torch.zeros(4, 3))
    assert (f.num_patches, f.d_v) == (4, 3)
