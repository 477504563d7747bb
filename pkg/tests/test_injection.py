import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from maskadapt.encoder import EncoderSpec
from maskadapt.errors import ShapeError
from maskadapt.injection import (
    AlreadyAttachedError,
    CrossAttentionSite,
    ImageProjections,
    InjectionConfig,
    Reference,
    TokenMask,
    attach,
    attention,
    attention_weights,
    decoupled_attention,
    masked_image_branch,
    masked_multi_reference_attention,
    pixel_mask_to_token_mask,
)

from oracles import decoupled_oracle, masked_oracle, max_abs_diff

D = torch.float64


def rand(*shape, g):
    return torch.randn(*shape, generator=g, dtype=D)


def instance(seed, m=3, n=4, d=2, dp=3, lt=5):
    g = torch.Generator().manual_seed(seed)
    return dict(q=rand(m, d, g=g), k=rand(lt, d, g=g), v=rand(lt, d, g=g), tokens=rand(n, dp, g=g),
                w_k=rand(dp, d, g=g), w_v=rand(dp, d, g=g))


def test_gamma_zero_is_base_bitwise():
    x = instance(0)
    z = decoupled_attention(x["q"], x["k"], x["v"], x["tokens"], x["w_k"], x["w_v"], 0.0)
    assert torch.equal(z, attention(x["q"], x["k"], x["v"]))


def test_zero_tokens_contribute_nothing():
    x = instance(1)
    z = decoupled_attention(x["q"], x["k"], x["v"], torch.zeros_like(x["tokens"]), x["w_k"], x["w_v"], 2.0)
    assert torch.equal(z, attention(x["q"], x["k"], x["v"]))


def test_hand_set_oracle():
    q = torch.tensor([[1.0, 0.0], [0.5, -1.0]], dtype=D)
    k = torch.tensor([[1.0, 1.0], [0.0, 2.0]], dtype=D)
    v = torch.tensor([[1.0, 2.0], [3.0, -1.0]], dtype=D)
    tokens = torch.tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], dtype=D)
    w_k = torch.tensor([[0.5, 0.0], [1.0, -1.0]], dtype=D)
    w_v = torch.tensor([[2.0, 1.0], [0.0, 1.0]], dtype=D)
    z = decoupled_attention(q, k, v, tokens, w_k, w_v, 0.7)
    assert max_abs_diff(z, decoupled_oracle(q, k, v, tokens, w_k, w_v, 0.7)) <= 1e-10


def test_shape_errors():
    x = instance(2)
    with pytest.raises(ShapeError):
        decoupled_attention(x["q"], x["k"], x["v"], x["tokens"][:, :2], x["w_k"], x["w_v"], 1.0)
    with pytest.raises(ShapeError):
        attention(x["q"], x["k"], x["v"][:2])
    with pytest.raises(ShapeError):
        masked_image_branch(x["q"], x["tokens"], torch.ones(3), x["w_k"], x["w_v"], "train_bias")


@pytest.mark.parametrize("mode", ["train_bias", "infer_multiplicative"])
def test_all_ones_mask_reduces(mode):
    x = instance(3)
    ref = Reference(x["tokens"], TokenMask.ones(4), 0.8)
    z = masked_multi_reference_attention(x["q"], x["k"], x["v"], [ref], x["w_k"], x["w_v"], mode)
    expect = decoupled_attention(x["q"], x["k"], x["v"], x["tokens"], x["w_k"], x["w_v"], 0.8)
    assert torch.equal(z, expect)


def test_all_zero_mask_infer_is_zero():
    x = instance(4)
    branch = masked_image_branch(x["q"], x["tokens"], torch.zeros(4), x["w_k"], x["w_v"], "infer_multiplicative")
    assert torch.count_nonzero(branch) == 0


def test_all_zero_mask_train_warns_and_falls_back():
    x = instance(5)
    with pytest.warns(UserWarning, match="all-zero"):
        branch = masked_image_branch(x["q"], x["tokens"], torch.zeros(4), x["w_k"], x["w_v"], "train_bias")
    unmasked = attention(x["q"], x["tokens"] @ x["w_k"], x["tokens"] @ x["w_v"])
    assert torch.allclose(branch, unmasked, atol=1e-12)


def test_empty_refs_is_base():
    x = instance(6)
    z = masked_multi_reference_attention(x["q"], x["k"], x["v"], [], x["w_k"], x["w_v"], "train_bias")
    assert torch.equal(z, attention(x["q"], x["k"], x["v"]))


@pytest.mark.parametrize("mode", ["train_bias", "infer_multiplicative"])
def test_two_refs_complementary(mode):
    x = instance(7, n=3)
    g = torch.Generator().manual_seed(70)
    other = rand(3, 3, g=g)
    m1, m2 = [1.0, 1.0, 0.0], [0.0, 0.0, 1.0]
    refs = [Reference(x["tokens"], torch.tensor(m1), 0.6), Reference(other, torch.tensor(m2), 1.3)]
    z = masked_multi_reference_attention(x["q"], x["k"], x["v"], refs, x["w_k"], x["w_v"], mode)
    expect = masked_oracle(x["q"], x["k"], x["v"], [(x["tokens"], m1, 0.6), (other, m2, 1.3)],
                           x["w_k"], x["w_v"], mode)
    assert max_abs_diff(z, expect) <= 1e-10


def test_train_bias_underflow():
    g = torch.Generator().manual_seed(8)
    q, keys = rand(4, 3, g=g), rand(6, 3, g=g)
    m = torch.tensor([1.0, 0.0, 1.0, 0.0, 0.0, 1.0], dtype=D)
    w = attention_weights(q, keys, (m - 1) * 1e4)
    bg = w[:, m == 0]
    assert torch.all((bg == 0) | (bg < 1e-300))
    assert torch.allclose(w.sum(-1), torch.ones(4, dtype=D))


def test_infer_rows_sum_at_most_one():
    g = torch.Generator().manual_seed(9)
    q, keys = rand(5, 2, g=g), rand(4, 2, g=g)
    m = torch.tensor([1.0, 0.0, 1.0, 0.0], dtype=D)
    w = attention_weights(q, keys) * m
    assert torch.all(w.sum(-1) <= 1 + 1e-15)
    assert torch.allclose(attention_weights(q, keys).sum(-1), torch.ones(5, dtype=D))


def test_renormalize_flag():
    x = instance(10)
    m = torch.tensor([1.0, 1.0, 0.0, 0.0])
    plain = masked_image_branch(x["q"], x["tokens"], m, x["w_k"], x["w_v"], "infer_multiplicative")
    renorm = masked_image_branch(x["q"], x["tokens"], m, x["w_k"], x["w_v"], "infer_multiplicative",
                                 renormalize=True)
    assert not torch.allclose(plain, renorm)
    biased = masked_image_branch(x["q"], x["tokens"], m, x["w_k"], x["w_v"], "train_bias")
    assert torch.allclose(renorm, biased, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), drop=st.integers(0, 3))
def test_zeroed_token_contributes_nothing(seed, drop):
    x = instance(seed)
    m = torch.ones(4, dtype=D)
    m[drop] = 0
    branch = masked_image_branch(x["q"], x["tokens"], m, x["w_k"], x["w_v"], "infer_multiplicative")
    # a masked-out token's value row can be anything
    tokens = x["tokens"].clone()
    keys = tokens @ x["w_k"]
    vals = tokens @ x["w_v"]
    vals[drop] += 100.0
    assert torch.allclose((attention_weights(x["q"], keys) * m) @ vals, branch, atol=1e-10)
    # unmasking it adds exactly its own weighted value row
    full = masked_image_branch(x["q"], x["tokens"], torch.ones(4, dtype=D), x["w_k"], x["w_v"],
                               "infer_multiplicative")
    w = attention_weights(x["q"], keys)
    own = w[:, drop:drop + 1] * (x["tokens"] @ x["w_v"])[drop:drop + 1]
    assert torch.allclose(full - branch, own, atol=1e-10)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), gamma=st.floats(0, 5), s1=st.floats(0, 3), s2=st.floats(0, 3),
       mode=st.sampled_from(["train_bias", "infer_multiplicative"]))
def test_linearity_in_scales(seed, gamma, s1, s2, mode):
    x = instance(seed)
    q, k, v = x["q"], x["k"], x["v"]
    base = attention(q, k, v)
    one = decoupled_attention(q, k, v, x["tokens"], x["w_k"], x["w_v"], 1.0) - base
    zg = decoupled_attention(q, k, v, x["tokens"], x["w_k"], x["w_v"], gamma) - base
    assert torch.allclose(zg, gamma * one, atol=1e-10)
    g = torch.Generator().manual_seed(seed + 1)
    other = rand(4, 3, g=g)
    m1 = torch.tensor([1.0, 0.0, 1.0, 1.0])
    m2 = torch.tensor([0.0, 1.0, 1.0, 0.0])

    def z(a, b):
        refs = [Reference(x["tokens"], m1, a), Reference(other, m2, b)]
        return masked_multi_reference_attention(q, k, v, refs, x["w_k"], x["w_v"], mode) - base

    assert torch.allclose(z(s1, s2), s1 * z(1.0, 0.0) + s2 * z(0.0, 1.0), atol=1e-9)


def test_batched_masks():
    x = instance(11)
    tokens = torch.stack([x["tokens"], -x["tokens"]])
    masks = torch.tensor([[1.0, 0.0, 1.0, 0.0], [0.0, 1.0, 1.0, 1.0]])
    q = torch.stack([x["q"], x["q"]])
    out = masked_image_branch(q, tokens, masks, x["w_k"], x["w_v"], "train_bias")
    for b in range(2):
        one = masked_image_branch(x["q"], tokens[b], masks[b], x["w_k"], x["w_v"], "train_bias")
        assert torch.allclose(out[b], one, atol=1e-12)


# --- config / masks / sites ---------------------------------------------------

def test_injection_config_validation():
    with pytest.raises(ValueError):
        InjectionConfig(gamma=-1)
    with pytest.raises(ValueError):
        InjectionConfig(ref_scales=(1.0, -0.5))
    with pytest.raises(ValueError):
        InjectionConfig(neg_bias=0)
    with pytest.raises(ValueError):
        InjectionConfig(mode="soft")
    with pytest.raises(ValueError):
        InjectionConfig(scope="mid_only")


def test_token_mask_validation():
    with pytest.raises(ValueError):
        TokenMask(torch.tensor([0.0, 0.5]))
    assert len(TokenMask.ones(5)) == 5


def test_pixel_mask_examples():
    spec = EncoderSpec(28, 28, 14, 8, 2, k=1)
    assert pixel_mask_to_token_mask(np.ones((28, 28)), spec).values.tolist() == [1, 1, 1, 1, 1]
    assert pixel_mask_to_token_mask(np.zeros((28, 28)), spec).values.tolist() == [1, 0, 0, 0, 0]
    assert pixel_mask_to_token_mask(np.zeros((28, 28)), spec, cls_foreground=False).values.tolist() == [0] * 5
    patch = np.zeros(196, bool)
    patch[:118] = True  # 118/196 = 60%
    m = np.zeros((28, 28), bool)
    m[:14, :14] = patch.reshape(14, 14)
    assert pixel_mask_to_token_mask(m, spec, 0.5).values.tolist() == [1, 1, 0, 0, 0]
    assert pixel_mask_to_token_mask(m, spec, 0.61).values.tolist() == [1, 0, 0, 0, 0]
    with pytest.raises(ShapeError):
        pixel_mask_to_token_mask(np.ones((28, 27)), spec)


def test_pixel_mask_count_oracle(rng):
    spec = EncoderSpec(32, 32, 8, 8, 2, k=1)
    m = rng.random((32, 32)) < 0.5
    tm = pixel_mask_to_token_mask(m, spec, 0.5).values.tolist()
    expect = [1.0]
    for r in range(4):
        for c in range(4):
            count = sum(bool(m[r * 8 + i, c * 8 + j]) for i in range(8) for j in range(8))
            expect.append(1.0 if count / 64 >= 0.5 else 0.0)
    assert tm == expect


SITES = [CrossAttentionSite("down.0", "down", 8, 6), CrossAttentionSite("down.1", "down", 8, 6),
         CrossAttentionSite("mid.0", "mid", 8, 6), CrossAttentionSite("up.0", "up", 8, 6),
         CrossAttentionSite("up.1", "up", 8, 6)]


def test_attach_scopes():
    assert attach(ImageProjections(), SITES, "up_blocks") == ["up.0", "up.1"]
    p = ImageProjections()
    assert len(attach(p, SITES, "full_blocks")) == 5
    with pytest.raises(AlreadyAttachedError):
        attach(p, SITES, "full_blocks")
    with pytest.raises(ValueError):
        attach(ImageProjections(), SITES, "left_blocks")
    with pytest.raises(ValueError):
        CrossAttentionSite("x", "side", 1, 1)


def test_attach_fresh_pairs_and_init_from():
    p = ImageProjections(seed=1)
    attach(p, SITES, "full_blocks")
    ids = [id(t) for s in p.site_ids() for t in p.pair(s)]
    assert len(set(ids)) == 10
    wk, wv = torch.randn(6, 8), torch.randn(6, 8)
    q = ImageProjections()
    q.attach(SITES, "up_blocks", init_from={"up.0": (wk, wv)})
    assert torch.equal(q.pair("up.0")[0], wk) and q.pair("up.0")[0] is not wk
    assert not torch.equal(q.pair("up.1")[0], wk)


def test_from_tensors():
    p = ImageProjections.from_tensors("up_blocks", {"up.0": (torch.ones(2, 3), torch.zeros(2, 3))})
    assert p.site_ids() == ["up.0"] and p.scope == "up_blocks"
    with pytest.raises(ValueError):
        ImageProjections.from_tensors("up_blocks", {"foo": (torch.ones(1, 1), torch.ones(1, 1))})
