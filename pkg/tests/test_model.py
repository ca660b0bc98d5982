"""Tests for the two-stage network: epoch encoder, context fusion,
whole-night aggregator, MTL heads, and the bundle container."""

import numpy as np
import pytest

from somn.autodiff import (
    REL_TOL,
    Adam,
    Tensor,
    backward,
    finite_difference_check,
    masked_cross_entropy,
    softmax,
    tensor_sum,
)
from somn.errors import DataError
from somn.model import (
    AggregatorConfig,
    EncoderConfig,
    ModelBundle,
    aggregate,
    aggregate_features,
    aggregator_param_count,
    base_feature_dim,
    encode_epoch,
    encode_epochs,
    encoder_param_count,
    fuse_context,
    init_aggregator_params,
    init_bundle,
    init_encoder_params,
    init_mlp_head_params,
    init_mtl_params,
    load_bundle,
    mlp_head,
    mlp_head_param_count,
    mtl_heads,
    save_bundle,
)

SMALL = EncoderConfig(n_layers=1, n_heads=2, d_model=8, d_ff=16,
                      patch_len_samples=5, samples_per_epoch=15)


def n_values(params):
    return sum(p.data.size for p in params.values())


# ---------------------------------------------------------------- encoder


def test_default_patch_grid():
    cfg = EncoderConfig()
    assert cfg.samples_per_epoch == 750
    assert cfg.n_patches == 30
    assert cfg.patch_dim == 225


def test_config_rejects_bad_shapes():
    with pytest.raises(ValueError):
        EncoderConfig(patch_len_samples=29)
    with pytest.raises(ValueError):
        EncoderConfig(d_model=130)


def test_encoder_param_count_frozen():
    # patch 225*128+128, six blocks of 198272 each, final norm 256
    cfg = EncoderConfig()
    assert encoder_param_count(cfg) == 1218816
    assert n_values(init_encoder_params(cfg, seed=0)) == 1218816


def test_mlp_head_param_count_frozen():
    cfg = EncoderConfig()
    assert mlp_head_param_count(cfg) == 984581
    assert n_values(init_mlp_head_params(cfg, seed=0)) == 984581


@pytest.mark.parametrize("seed", range(3))
def test_param_count_matches_init_for_random_configs(seed):
    rng = np.random.default_rng(seed + 100)
    heads = int(rng.choice([1, 2, 4]))
    cfg = EncoderConfig(
        n_layers=int(rng.integers(1, 4)),
        n_heads=heads,
        d_model=heads * int(rng.integers(2, 6)),
        d_ff=int(rng.integers(4, 32)),
        patch_len_samples=5,
        samples_per_epoch=5 * int(rng.integers(2, 7)),
    )
    assert n_values(init_encoder_params(cfg, seed)) == encoder_param_count(cfg)


def test_encode_epochs_shapes_and_dtype():
    params = init_encoder_params(SMALL, seed=1)
    x = np.random.default_rng(0).standard_normal((3, 9, 15))
    tokens, pooled = encode_epochs(params, SMALL, x)
    assert tokens.shape == (3, 3, 8)
    assert pooled.shape == (3, 8)
    assert tokens.dtype == np.float32

    tok1, pool1 = encode_epoch(params, SMALL, x[0])
    assert tok1.shape == (3, 8)
    assert pool1.shape == (8,)
    assert np.array_equal(pool1.data, pooled.data[0])


def test_encode_epochs_rejects_wrong_lengths():
    params = init_encoder_params(SMALL, seed=1)
    with pytest.raises(ValueError):
        encode_epochs(params, SMALL, np.zeros((2, 9, 20), dtype=np.float32))
    with pytest.raises(ValueError):
        encode_epochs(params, SMALL, np.zeros((2, 4, 15), dtype=np.float32))


@pytest.mark.parametrize("seed", range(4))
def test_epoch_permutation_equivariance(seed):
    """Epochs in a batch do not see each other: permuting the batch
    permutes the outputs bit-for-bit."""
    rng = np.random.default_rng(seed)
    params = init_encoder_params(SMALL, seed=7)
    x = rng.standard_normal((5, 9, 15)).astype(np.float32)
    perm = rng.permutation(5)
    _, pooled = encode_epochs(params, SMALL, x)
    _, pooled_p = encode_epochs(params, SMALL, x[perm])
    assert np.array_equal(pooled_p.data, pooled.data[perm])


def test_mlp_head_output_shape_and_softmax():
    params = init_mlp_head_params(SMALL, seed=2, hidden=6)
    tokens = Tensor(np.random.default_rng(1).standard_normal((2, 3, 8)).astype(np.float32))
    logits = mlp_head(params, tokens)
    assert logits.shape == (2, 5)
    probs = softmax(logits, axis=-1).data
    assert np.allclose(probs.sum(axis=-1), 1.0, atol=1e-6)

    single = mlp_head(params, Tensor(tokens.data[0]))
    assert single.shape == (5,)
    assert np.array_equal(single.data, logits.data[0])


def test_mlp_head_zero_weights_gives_uniform():
    params = init_mlp_head_params(SMALL, seed=2, hidden=6)
    for p in params.values():
        p.data[...] = 0.0
    tokens = Tensor(np.random.default_rng(3).standard_normal((4, 3, 8)).astype(np.float32))
    probs = softmax(mlp_head(params, tokens), axis=-1).data
    assert np.allclose(probs, 0.2, atol=1e-7)


def test_mlp_head_rejects_mismatched_tokens():
    params = init_mlp_head_params(SMALL, seed=2)
    with pytest.raises(ValueError):
        mlp_head(params, Tensor(np.zeros((2, 4, 8), dtype=np.float32)))


def test_encoder_gradcheck_through_full_block():
    params32 = init_encoder_params(SMALL, seed=11)
    names = list(params32)
    weights = Tensor(np.random.default_rng(9).standard_normal((2, 8)), dtype=np.float64)
    x0 = np.random.default_rng(10).standard_normal((2, 9, 15))

    checked = ["patch.w", "block0.ln1.g", "block0.attn.wq", "block0.attn.bo",
               "block0.ffn.w1", "final_ln.b"]
    inputs = [Tensor(x0, requires_grad=True, dtype=np.float64)]
    inputs += [Tensor(params32[n].data.astype(np.float64), requires_grad=True,
                      dtype=np.float64) for n in checked]

    def f(x, *checked_params):
        params = {n: Tensor(params32[n].data, dtype=np.float64) for n in names}
        for n, p in zip(checked, checked_params):
            params[n] = p
        _, pooled = encode_epochs(params, SMALL, x)
        return tensor_sum(pooled * weights)

    assert finite_difference_check(f, inputs, max_coords=10) < REL_TOL


# ----------------------------------------------------------------- fusion


def test_fuse_context_both_dims_and_order():
    rng = np.random.default_rng(5)
    emb = rng.standard_normal((10, 128)).astype(np.float32)
    clin = np.array([0.5, 1.0, -0.25], dtype=np.float32)
    ev = (rng.random((10, 7)) < 0.2).astype(np.uint8)
    fused = fuse_context(emb, clin, ev)
    assert fused.shape == (10, 138)
    assert fused.dtype == np.float32
    assert np.array_equal(fused[:, :128], emb)
    assert np.array_equal(fused[:, 128:131], np.tile(clin, (10, 1)))
    assert np.array_equal(fused[:, 131:], ev.astype(np.float32))


def test_fuse_context_none_is_identity():
    emb = np.zeros((4, 128), dtype=np.float32)
    assert fuse_context(emb) is emb


def test_fuse_context_clinical_broadcast():
    emb = np.ones((6, 128), dtype=np.float32)
    fused = fuse_context(emb, clinical=np.array([1.0, 0.0, 2.0]))
    assert fused.shape == (6, 131)
    assert (fused[:, 128:] == fused[0, 128:]).all()


def test_fuse_context_row_mismatch():
    emb = np.zeros((10, 128), dtype=np.float32)
    with pytest.raises(ValueError):
        fuse_context(emb, events=np.zeros((9, 7)))
    with pytest.raises(ValueError):
        fuse_context(emb, clinical=np.zeros(4))


# -------------------------------------------------------------- aggregator

AGG = AggregatorConfig(in_dim=12, n_layers=3, d_hidden=16, kernel=3)


def test_default_receptive_field_is_73():
    assert AggregatorConfig(in_dim=138).receptive_field == 73
    assert AGG.receptive_field == 7


def test_aggregate_shapes():
    params = init_aggregator_params(AGG, seed=0)
    rng = np.random.default_rng(2)
    seq = rng.standard_normal((2, 40, 12)).astype(np.float32)
    logits, feats = aggregate_features(params, AGG, seq)
    assert logits.shape == (2, 40, 5)
    assert feats.shape == (2, 40, 16)

    # batch-of-one and batch-of-two run GEMMs of different shapes, so
    # agreement is numeric, not bitwise
    single = aggregate(params, AGG, seq[0])
    assert single.shape == (40, 5)
    assert np.allclose(single.data, logits.data[0], rtol=1e-5, atol=1e-6)


def test_aggregate_rejects_wrong_width():
    params = init_aggregator_params(AGG, seed=0)
    with pytest.raises(ValueError):
        aggregate(params, AGG, np.zeros((40, 13), dtype=np.float32))


def test_aggregator_param_count_matches_init():
    assert n_values(init_aggregator_params(AGG, seed=1)) == aggregator_param_count(AGG)
    big = AggregatorConfig(in_dim=138)
    assert n_values(init_aggregator_params(big, seed=1)) == aggregator_param_count(big)


@pytest.mark.parametrize("seed", range(4))
def test_aggregate_locality_probe(seed):
    """Logits at epoch t only see inputs within the receptive field:
    +/-3 epochs for the small 3-layer kernel-3 stack used here."""
    rng = np.random.default_rng(seed)
    params = init_aggregator_params(AGG, seed=9)
    seq = rng.standard_normal((30, 12)).astype(np.float32)
    half = (AGG.receptive_field - 1) // 2
    t0 = 12
    base = aggregate(params, AGG, seq).data

    far = seq.copy()
    far[t0 + half + 1:] = rng.standard_normal(far[t0 + half + 1:].shape)
    moved = aggregate(params, AGG, far).data
    assert np.array_equal(moved[: t0 + 1], base[: t0 + 1])

    near = seq.copy()
    near[t0 + half] += 1.0
    assert not np.array_equal(aggregate(params, AGG, near).data[t0], base[t0])


def test_aggregate_pad_extension_keeps_scored_logits():
    # zero tail of at least half the receptive field makes further
    # padding invisible to every scored epoch
    rng = np.random.default_rng(8)
    params = init_aggregator_params(AGG, seed=9)
    t_valid, half = 20, 3
    body = rng.standard_normal((t_valid, 12)).astype(np.float32)
    short = np.zeros((t_valid + half, 12), dtype=np.float32)
    short[:t_valid] = body
    long = np.zeros((64, 12), dtype=np.float32)
    long[:t_valid] = body
    a = aggregate(params, AGG, short).data[:t_valid]
    b = aggregate(params, AGG, long).data[:t_valid]
    assert a.tobytes() == b.tobytes()


# -------------------------------------------------------------- MTL heads


def test_mtl_heads_shapes():
    params = init_mtl_params(16, seed=3)
    rng = np.random.default_rng(4)
    feats = Tensor(rng.standard_normal((2, 10, 16)).astype(np.float32))
    mask = np.ones((2, 10), dtype=bool)
    ev, sex, age, bmi = mtl_heads(params, feats, mask)
    assert ev.shape == (2, 10, 7)
    assert sex.shape == age.shape == bmi.shape == (2,)

    ev1, sex1, age1, bmi1 = mtl_heads(params, Tensor(feats.data[0]), mask[0])
    assert ev1.shape == (10, 7)
    assert sex1.shape == () and age1.shape == () and bmi1.shape == ()
    assert np.array_equal(ev1.data, ev.data[0])
    assert float(sex1.data) == float(sex.data[0])


def test_mtl_subject_heads_ignore_padding_bitwise():
    params = init_mtl_params(16, seed=3)
    rng = np.random.default_rng(6)
    feats = rng.standard_normal((12, 16)).astype(np.float32)
    mask = np.ones(12, dtype=bool)
    _, sex_a, age_a, bmi_a = mtl_heads(params, Tensor(feats), mask)

    # appended rows carry garbage values but are masked out
    padded = np.concatenate([feats, rng.standard_normal((30, 16)).astype(np.float32)])
    mask_p = np.concatenate([mask, np.zeros(30, dtype=bool)])
    _, sex_b, age_b, bmi_b = mtl_heads(params, Tensor(padded), mask_p)

    assert sex_a.data.tobytes() == sex_b.data.tobytes()
    assert age_a.data.tobytes() == age_b.data.tobytes()
    assert bmi_a.data.tobytes() == bmi_b.data.tobytes()


def test_mtl_zero_features_sex_probability_half():
    params = init_mtl_params(16, seed=0)
    feats = Tensor(np.zeros((5, 16), dtype=np.float32))
    _, sex, _, _ = mtl_heads(params, feats, np.ones(5, dtype=bool))
    assert float(sex.data) == 0.0
    assert 1.0 / (1.0 + np.exp(-float(sex.data))) == 0.5


def test_mtl_all_false_mask_rejected():
    params = init_mtl_params(16, seed=0)
    feats = Tensor(np.zeros((2, 5, 16), dtype=np.float32))
    mask = np.ones((2, 5), dtype=bool)
    mask[1] = False
    with pytest.raises(DataError):
        mtl_heads(params, feats, mask)


# ------------------------------------------------------------------ bundle


def small_bundle(context_mode, seed=3):
    return init_bundle(SMALL, context_mode, seed=seed, kernel=3,
                       n_agg_layers=3, d_hidden=16)


def test_base_feature_dim_modes():
    assert base_feature_dim(SMALL, "pooled") == 8
    assert base_feature_dim(SMALL, "flat") == 24
    with pytest.raises(ValueError):
        base_feature_dim(SMALL, "tokens")


def test_bundle_wires_context_width():
    assert small_bundle("none").aggregator_cfg.in_dim == 8
    assert small_bundle("clinical").aggregator_cfg.in_dim == 11
    assert small_bundle("event").aggregator_cfg.in_dim == 15
    assert small_bundle("both").aggregator_cfg.in_dim == 18
    mtl = small_bundle("mtl")
    assert mtl.aggregator_cfg.in_dim == 8
    assert mtl.mtl_params is not None
    assert small_bundle("none").mtl_params is None


def test_bundle_rejects_width_mismatch():
    b = small_bundle("both")
    with pytest.raises(ValueError):
        ModelBundle(
            encoder_cfg=b.encoder_cfg,
            aggregator_cfg=AggregatorConfig(in_dim=17, n_layers=3, d_hidden=16, kernel=3),
            context_mode="both",
            encoder_params=b.encoder_params,
            head_params=b.head_params,
            aggregator_params=b.aggregator_params,
        )


def test_bundle_mtl_mode_needs_heads():
    b = small_bundle("mtl")
    with pytest.raises(ValueError):
        ModelBundle(
            encoder_cfg=b.encoder_cfg,
            aggregator_cfg=b.aggregator_cfg,
            context_mode="mtl",
            encoder_params=b.encoder_params,
            head_params=b.head_params,
            aggregator_params=b.aggregator_params,
            mtl_params=None,
        )


def test_bundle_save_load_roundtrip(tmp_path):
    bundle = small_bundle("mtl", seed=5)
    bundle.set_frozen(True)
    save_bundle(bundle, tmp_path / "model")
    loaded = load_bundle(tmp_path / "model")

    assert loaded.encoder_cfg == bundle.encoder_cfg
    assert loaded.aggregator_cfg == bundle.aggregator_cfg
    assert loaded.context_mode == "mtl"
    assert loaded.encoder_frozen is True
    for name, p in bundle.encoder_params.items():
        assert loaded.encoder_params[name].data.tobytes() == p.data.tobytes()
        assert loaded.encoder_params[name].requires_grad is False
    for name, p in bundle.aggregator_params.items():
        assert loaded.aggregator_params[name].data.tobytes() == p.data.tobytes()
    for name, p in bundle.mtl_params.items():
        assert loaded.mtl_params[name].data.tobytes() == p.data.tobytes()

    save_bundle(loaded, tmp_path / "again")
    first = (tmp_path / "model" / "params.somn").read_bytes()
    second = (tmp_path / "again" / "params.somn").read_bytes()
    assert first == second


def test_frozen_encoder_is_bitwise_inert_in_stage2():
    """An optimizer step on the aggregator must not move one encoder byte."""
    bundle = small_bundle("none", seed=13)
    bundle.set_frozen(True)
    before = {n: p.data.tobytes() for n, p in bundle.encoder_params.items()}

    rng = np.random.default_rng(0)
    feats = rng.standard_normal((1, 12, 8)).astype(np.float32)
    labels = rng.integers(0, 5, size=(1, 12))
    mask = np.ones((1, 12), dtype=bool)

    logits = aggregate(bundle.aggregator_params, bundle.aggregator_cfg, feats)
    loss = masked_cross_entropy(logits, labels, mask, reduction="seq_sum_batch_mean")
    opt = Adam(bundle.aggregator_params, lr=1e-3)
    backward(loss, params=list(bundle.aggregator_params.values()))
    opt.step()

    after = {n: p.data.tobytes() for n, p in bundle.encoder_params.items()}
    assert before == after
    moved = [n for n, p in bundle.aggregator_params.items()
             if p.grad is not None and np.any(p.grad)]
    assert moved, "aggregator should actually have trained"
