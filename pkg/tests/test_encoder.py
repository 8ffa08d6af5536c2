import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from persam.autodiff import DimensionError, Tensor, numerical_grad, relative_error
from persam.autodiff import tensor as T
from persam.encoder import (
    ClinicalEmbedder,
    EncoderConfig,
    MultimodalEncoder,
    PatchExtractor,
    assemble_tokens,
    clinical_to_patch_attention,
)


@pytest.fixture
def cfg():
    return EncoderConfig.tiny(dropout=0.0)


def test_config_defaults_and_validation():
    full = EncoderConfig()
    assert (full.R, full.L, full.M, full.C, full.layers, full.heads) == (512, 100, 2, 3, 2, 8)
    assert full.clinical_dims == [18, 10] and full.n_tokens == 105
    with pytest.raises(ValueError):
        EncoderConfig(R=30)
    with pytest.raises(ValueError):
        EncoderConfig(M=3)
    with pytest.raises(ValueError):
        EncoderConfig(L=0)


def test_zero_patch_through_zeroed_head_is_zero(cfg):
    f = PatchExtractor(cfg, np.random.default_rng(0))
    f.proj.weight.data[...] = 0.0
    f.proj.bias.data[...] = 0.0
    out = f(np.zeros(cfg.patch_shape))
    np.testing.assert_array_equal(out.data, np.zeros(cfg.R))


def test_patch_embedding_deterministic_and_batched(cfg):
    f = PatchExtractor(cfg, np.random.default_rng(0))
    x = np.random.default_rng(1).random((3,) + cfg.patch_shape)
    np.testing.assert_array_equal(f(x[0]).data, f(x[0]).data)
    np.testing.assert_allclose(f(x).data[1], f(x[1]).data, rtol=1e-12)


def test_patch_wrong_shape(cfg):
    f = PatchExtractor(cfg, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        f(np.zeros((9, 8, 3)))


def test_patch_grad_first_conv(cfg):
    f = PatchExtractor(cfg, np.random.default_rng(0))
    x = np.random.default_rng(2).random(cfg.patch_shape)

    def loss():
        return T.tsum(f(x))

    loss().backward()
    w = f.conv1.weight
    assert relative_error(w.grad, numerical_grad(loss, w)) < 1e-4


def test_clinical_zero_input_zero_head(cfg):
    g = ClinicalEmbedder(cfg, np.random.default_rng(0))
    last = g.mlps[0].layers[-1]
    last.weight.data[...] = 0.0
    last.bias.data[...] = 0.0
    np.testing.assert_array_equal(g(np.zeros(18), 0).data, np.zeros(cfg.R))


def test_clinical_index_and_dim_errors(cfg):
    g = ClinicalEmbedder(cfg, np.random.default_rng(0))
    with pytest.raises(IndexError):
        g(np.zeros(18), 2)
    with pytest.raises(DimensionError):
        g(np.zeros(10), 0)


def test_clinical_sensitivity(cfg):
    g = ClinicalEmbedder(cfg, np.random.default_rng(0))
    t = np.random.default_rng(3).normal(size=10)
    base = g(t, 1).data
    for i in range(10):
        t2 = t.copy()
        t2[i] += 0.5
        assert not np.allclose(g(t2, 1).data, base)


def test_separate_parameters_per_factor(cfg):
    g = ClinicalEmbedder(cfg, np.random.default_rng(0))
    assert g.mlps[0].layers[0].weight.shape == (18, cfg.clinical_hidden)
    assert g.mlps[1].layers[0].weight.shape == (10, cfg.clinical_hidden)


def test_assemble_zero_features():
    R = 4
    cls = Tensor(np.arange(2 * R, dtype=float).reshape(2, R) + 1)
    H = assemble_tokens(Tensor(np.zeros((3, R))), Tensor(np.zeros((2, R))), cls,
                        Tensor(np.zeros(R)), Tensor(np.zeros((2, R))))
    np.testing.assert_array_equal(H.tokens.data[:5], 0.0)
    np.testing.assert_array_equal(H.classes.data, cls.data)


def test_assemble_layout_and_type_embeddings():
    R = 3
    p = Tensor(np.array([[1.0, 0, 0], [2.0, 0, 0]]))
    t = Tensor(np.array([[3.0, 0, 0]]))
    c = Tensor(np.array([[4.0, 0, 0]]))
    e_p = Tensor(np.array([0, 1.0, 0]))
    e_t = Tensor(np.array([[0, 0, 1.0]]))
    H = assemble_tokens(p, t, c, e_p, e_t)
    assert (H.L, H.M, H.C) == (2, 1, 1)
    np.testing.assert_array_equal(H.tokens.data[:, 0], [1, 2, 3, 4])  # [p1, p2, t1, cls1]
    np.testing.assert_array_equal(H.tokens.data[0] - p.data[0], H.tokens.data[1] - p.data[1])
    np.testing.assert_array_equal(H.tokens.data[3], c.data[0])  # class slot gets no embedding
    np.testing.assert_array_equal(H.tokens.data[2] - t.data[0], e_t.data[0])


def test_assemble_count_mismatch():
    R = 3
    with pytest.raises(DimensionError):
        assemble_tokens(Tensor(np.zeros((2, R))), Tensor(np.zeros((2, R))), Tensor(np.zeros((1, R))),
                        Tensor(np.zeros(R)), Tensor(np.zeros((1, R))))


def test_full_scale_token_count():
    cfg = EncoderConfig(R=16, heads=8, clinical_hidden=8)  # L=100, M=2, C=3
    enc = MultimodalEncoder(cfg, np.random.default_rng(0))
    H = assemble_tokens(Tensor(np.zeros((100, 16))), Tensor(np.zeros((2, 16))), enc.class_tokens,
                        enc.type_patch, enc.type_clinical)
    assert H.tokens.shape == (105, 16)


def _encoded(cfg, seed, perm=None):
    rng = np.random.default_rng(seed)
    enc = MultimodalEncoder(cfg, np.random.default_rng(seed + 100))
    hp = rng.normal(size=(cfg.L, cfg.R))
    if perm is not None:
        hp = hp[perm]
    ht = rng.normal(size=(cfg.M, cfg.R))
    return enc(Tensor(hp), Tensor(ht))


def test_encode_shapes_and_probability_rows(cfg):
    H, maps = _encoded(cfg, 0)
    assert H.tokens.shape == (cfg.n_tokens, cfg.R)
    assert len(maps) == cfg.layers
    for A in maps:
        assert A.shape == (cfg.heads, cfg.n_tokens, cfg.n_tokens)
        np.testing.assert_allclose(A.sum(axis=-1), 1.0, atol=1e-9)
        assert A.min() >= 0.0


@given(st.integers(0, 10_000))
def test_encode_permutation_equivariance(seed):
    cfg = EncoderConfig.tiny(dropout=0.0)
    perm = np.random.default_rng(seed).permutation(cfg.L)
    H, _ = _encoded(cfg, seed % 7)
    Hp, _ = _encoded(cfg, seed % 7, perm)
    np.testing.assert_allclose(Hp.patches.data, H.patches.data[perm], atol=1e-9)
    np.testing.assert_allclose(Hp.tokens.data[cfg.L:], H.tokens.data[cfg.L:], atol=1e-9)


def test_clinical_to_patch_subset_of_softmax_row(cfg):
    H, maps = _encoded(cfg, 1)
    for m in range(cfg.M):
        v = clinical_to_patch_attention(maps, m, cfg.L, cfg.M)
        assert v.shape == (cfg.L,) and v.min() >= 0.0 and v.sum() <= 1.0 + 1e-12
    with pytest.raises(IndexError):
        clinical_to_patch_attention(maps, cfg.M, cfg.L, cfg.M)


def test_clinical_to_patch_uniform_when_attention_degenerate(cfg):
    enc = MultimodalEncoder(cfg, np.random.default_rng(0))
    for block in enc.transformer.blocks:
        block.attn.q.weight.data[...] = 0.0
        block.attn.k.weight.data[...] = 0.0
    rng = np.random.default_rng(1)
    _, maps = enc(Tensor(rng.normal(size=(cfg.L, cfg.R))), Tensor(rng.normal(size=(cfg.M, cfg.R))))
    v = clinical_to_patch_attention(maps, 0, cfg.L, cfg.M)
    np.testing.assert_allclose(v, 1.0 / cfg.n_tokens, atol=1e-12)


def test_clinical_to_patch_moves_with_record(cfg):
    from persam.model import ModelConfig, PersAM
    from persam.gradsuite import tiny_bag

    mc = ModelConfig(encoder=cfg, clf_hidden=8)
    model = PersAM(mc, 0).eval()
    bag = tiny_bag(mc, 0)
    base = model.clinical_to_patch(model(bag))
    bag.records = [r + 1.0 for r in bag.records]
    assert not np.allclose(model.clinical_to_patch(model(bag)), base)


def test_class_tokens_trainable_in_encoder_group(cfg):
    enc = MultimodalEncoder(cfg, np.random.default_rng(0))
    groups = dict((n, g) for n, _, g in enc.named_parameters())
    assert groups["class_tokens"] == "enc" and groups["type_patch"] == "enc"
    assert enc.class_tokens.shape == (cfg.C, cfg.R)


def test_type_embeddings_start_at_zero(cfg):
    enc = MultimodalEncoder(cfg, np.random.default_rng(0))
    assert not enc.type_patch.data.any() and not enc.type_clinical.data.any()
