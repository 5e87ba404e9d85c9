import numpy as np
import pytest

from ahmsa.errors import ConfigError, ValidationError
from ahmsa.model import (
    ModelConfig,
    channel_attention,
    downsample,
    feed_forward,
    forward,
    init_model,
    load_checkpoint,
    msa_block,
    patch_embed,
    save_checkpoint,
    spatial_attention,
    tiny_config,
)
from ahmsa.tensor import Tensor

from gradcheck import relative_error


def small_config():
    """Cheap config with a 4x4 entry grid, for unit-level checks."""
    return ModelConfig(h_flow=8, w_flow=8, patch_size=2, embed_channels=12,
                       heads=3, blocks_per_layer=(1, 1, 1), channel_reduction=4,
                       ffn_expansion=2)


def rand_maps(rng, b, cfg):
    return rng.uniform(-1, 1, (b, cfg.h_flow, cfg.w_flow, 3)).astype(np.float32)


# -- config validation ----------------------------------------------------------


def test_default_config_is_valid():
    ModelConfig().validate()


@pytest.mark.parametrize("overrides,fragment", [
    (dict(embed_channels=97), "divisible by heads"),
    (dict(patch_size=5), "not divisible by patch_size"),
    (dict(blocks_per_layer=(2, 2)), "entries"),
    (dict(n_layers=4), "top level"),
    (dict(heads=0), "must be positive"),
    (dict(channel_reduction=5), "channel_reduction"),
])
def test_config_validation_names_invariant(overrides, fragment):
    from dataclasses import replace
    cfg = replace(ModelConfig(), **overrides)
    with pytest.raises(ConfigError, match=fragment):
        cfg.validate()


def test_config_validation_lists_all_problems():
    cfg = ModelConfig(embed_channels=97, patch_size=5)
    with pytest.raises(ConfigError) as err:
        cfg.validate()
    assert "divisible by heads" in str(err.value)
    assert "patch_size" in str(err.value)


# -- init_model ----------------------------------------------------------------------


def test_init_same_seed_bit_identical():
    a = init_model(ModelConfig(), seed=5)
    b = init_model(ModelConfig(), seed=5)
    for name, t in a.named_parameters().items():
        assert t.data.tobytes() == b.named_parameters()[name].data.tobytes(), name


def test_init_different_seed_differs():
    a = init_model(ModelConfig(), seed=5)
    b = init_model(ModelConfig(), seed=6)
    assert any(
        t.data.tobytes() != b.named_parameters()[name].data.tobytes()
        for name, t in a.named_parameters().items()
    )


def test_init_default_shapes():
    params = init_model(ModelConfig(), seed=0)
    assert params.patch_w.shape == (96, 3, 7, 7)
    assert params.head_w.shape == (96, 3)
    assert [len(level) for level in params.levels] == [2, 2, 8]
    assert len(params.transitions) == 2
    blk = params.levels[0][0]
    assert blk.ca_w1.shape == (24, 96, 1, 1)
    assert blk.ff_w1.shape == (384, 96, 1, 1)
    assert blk.q_w.shape == (96, 96, 1, 1)


def test_init_rejects_invalid_config():
    with pytest.raises(ConfigError):
        init_model(ModelConfig(embed_channels=10), seed=0)


def test_init_biases_zero_ln_unit():
    params = init_model(ModelConfig(), seed=3)
    blk = params.levels[0][0]
    assert np.all(blk.ca_b1.data == 0.0)
    assert np.all(blk.ln_ca.gamma.data == 1.0)
    assert np.all(blk.ln_ca.beta.data == 0.0)


# -- patch_embed ------------------------------------------------------------------------


def test_patch_embed_shape():
    params = init_model(ModelConfig(), seed=1)
    rng = np.random.default_rng(0)
    out = patch_embed(Tensor(rng.standard_normal((2, 3, 28, 28)).astype(np.float32)),
                      params)
    assert out.shape == (2, 96, 4, 4)


def test_patch_embed_zero_input_zero_bias():
    params = init_model(ModelConfig(), seed=1)
    out = patch_embed(Tensor(np.zeros((1, 3, 28, 28), dtype=np.float32)), params)
    np.testing.assert_array_equal(out.data, 0.0)


def test_patch_embed_locality():
    params = init_model(ModelConfig(), seed=2)
    rng = np.random.default_rng(1)
    base = rng.standard_normal((1, 3, 28, 28)).astype(np.float32)
    bumped = base.copy()
    bumped[:, :, 7:14, 14:21] += 1.0  # patch cell (1, 2)
    a = patch_embed(Tensor(base), params).data
    b = patch_embed(Tensor(bumped), params).data
    diff = np.abs(a - b).sum(axis=1)[0]
    assert diff[1, 2] > 0.0
    mask = np.ones((4, 4), dtype=bool)
    mask[1, 2] = False
    assert diff[mask].max() == 0.0


def test_patch_embed_rejects_wrong_dims():
    params = init_model(ModelConfig(), seed=1)
    with pytest.raises(ValidationError):
        patch_embed(Tensor(np.zeros((1, 3, 27, 28), dtype=np.float32)), params)


# -- channel attention ----------------------------------------------------------------------


def test_channel_attention_zero_input():
    params = init_model(small_config(), seed=4)
    blk = params.levels[0][0]
    x = Tensor(np.zeros((2, 12, 4, 4), dtype=np.float32))
    out = channel_attention(x, blk)
    np.testing.assert_array_equal(out.data, 0.0)


def test_channel_attention_weights_in_unit_interval():
    params = init_model(small_config(), seed=4)
    blk = params.levels[0][0]
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((2, 12, 4, 4)).astype(np.float32))
    out = channel_attention(x, blk)
    ratio = out.data / np.where(np.abs(x.data) < 1e-12, 1.0, x.data)
    gated = ratio[np.abs(x.data) >= 1e-12]
    assert np.all(gated > 0.0) and np.all(gated < 1.0)


def test_channel_attention_symmetric_channels():
    cfg = small_config()
    params = init_model(cfg, seed=4)
    blk = params.levels[0][0]
    # make the MLP treat channels 0 and 1 identically
    blk.ca_w1.data[:, 1, :, :] = blk.ca_w1.data[:, 0, :, :]
    blk.ca_w2.data[1] = blk.ca_w2.data[0]
    blk.ca_b2.data[1] = blk.ca_b2.data[0]
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 12, 4, 4)).astype(np.float32)
    x[0, 1] = x[0, 0]  # identical spatial content
    out = channel_attention(Tensor(x), blk)
    np.testing.assert_allclose(out.data[0, 0], out.data[0, 1], rtol=1e-6)


# -- spatial attention ----------------------------------------------------------------------


def test_spatial_attention_single_token_is_projected_v():
    from ahmsa.tensor import conv2d
    params = init_model(small_config(), seed=5)
    blk = params.levels[2][0]
    rng = np.random.default_rng(4)
    x = Tensor(rng.standard_normal((2, 12, 1, 1)).astype(np.float32))
    out = spatial_attention(x, blk, heads=3)
    v = conv2d(x, blk.v_w, blk.v_b)
    expected = conv2d(v, blk.o_w, blk.o_b)
    np.testing.assert_allclose(out.data, expected.data, atol=1e-6)


def test_spatial_attention_rows_sum_to_one():
    params = init_model(small_config(), seed=5)
    blk = params.levels[0][0]
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((2, 12, 4, 4)).astype(np.float32))
    _, weights = spatial_attention(x, blk, heads=3, return_weights=True)
    assert weights.shape == (2, 3, 16, 16)
    np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-6)


def _permute_grid(arr: np.ndarray, perm: np.ndarray) -> np.ndarray:
    b, c, h, w = arr.shape
    flat = arr.reshape(b, c, h * w)[:, :, perm]
    return flat.reshape(b, c, h, w)


def test_spatial_attention_permutation_equivariant():
    params = init_model(small_config(), seed=6)
    blk = params.levels[0][0]
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 12, 4, 4)).astype(np.float32)
    perm = rng.permutation(16)
    out = spatial_attention(Tensor(x), blk, heads=3).data
    out_perm = spatial_attention(Tensor(_permute_grid(x, perm)), blk, heads=3).data
    assert np.abs(out_perm - _permute_grid(out, perm)).max() < 1e-5


# -- feed forward -------------------------------------------------------------------------------


def test_feed_forward_zero_preserving_and_shape():
    params = init_model(small_config(), seed=7)
    blk = params.levels[0][0]
    zero = Tensor(np.zeros((1, 12, 4, 4), dtype=np.float32))
    np.testing.assert_array_equal(feed_forward(zero, blk).data, 0.0)
    rng = np.random.default_rng(7)
    x = Tensor(rng.standard_normal((3, 12, 4, 4)).astype(np.float32))
    assert feed_forward(x, blk).shape == x.shape


def test_feed_forward_positionwise():
    params = init_model(small_config(), seed=7)
    blk = params.levels[0][0]
    rng = np.random.default_rng(8)
    x = rng.standard_normal((1, 12, 4, 4)).astype(np.float32)
    perm = rng.permutation(16)
    a = feed_forward(Tensor(_permute_grid(x, perm)), blk).data
    b = _permute_grid(feed_forward(Tensor(x), blk).data, perm)
    assert np.abs(a - b).max() < 1e-6


# -- msa_block -----------------------------------------------------------------------------------


def test_msa_block_shape_preserved_at_every_level():
    cfg = small_config()
    params = init_model(cfg, seed=8)
    rng = np.random.default_rng(9)
    for level, side in enumerate((4, 2, 1)):
        x = Tensor(rng.standard_normal((2, 12, side, side)).astype(np.float32))
        out = msa_block(x, params.levels[level][0], cfg.heads)
        assert out.shape == x.shape


def test_msa_block_permutation_equivariant():
    params = init_model(small_config(), seed=9)
    blk = params.levels[0][0]
    rng = np.random.default_rng(10)
    x = rng.standard_normal((2, 12, 4, 4)).astype(np.float32)
    perm = rng.permutation(16)
    out = msa_block(Tensor(x), blk, heads=3).data
    out_perm = msa_block(Tensor(_permute_grid(x, perm)), blk, heads=3).data
    assert np.abs(out_perm - _permute_grid(out, perm)).max() < 1e-5


def test_msa_block_zeroed_weights_is_identity():
    params = init_model(small_config(), seed=10)
    blk = params.levels[0][0]
    for tensor in (blk.ca_w1, blk.ca_b1, blk.ca_w2, blk.ca_b2, blk.q_w, blk.q_b,
                   blk.k_w, blk.k_b, blk.v_w, blk.v_b, blk.o_w, blk.o_b,
                   blk.ff_w1, blk.ff_b1, blk.ff_w2, blk.ff_b2,
                   blk.ln_ca.gamma, blk.ln_ca.beta, blk.ln_sa.gamma,
                   blk.ln_sa.beta, blk.ln_ff.gamma, blk.ln_ff.beta):
        tensor.data[...] = 0.0
    rng = np.random.default_rng(11)
    x = rng.standard_normal((2, 12, 4, 4)).astype(np.float32)
    out = msa_block(Tensor(x), blk, heads=3)
    np.testing.assert_allclose(out.data, x, atol=1e-7)


# -- downsample -----------------------------------------------------------------------------------


def test_downsample_shapes():
    cfg = small_config()
    params = init_model(cfg, seed=11)
    rng = np.random.default_rng(12)
    x = Tensor(rng.standard_normal((2, 12, 4, 4)).astype(np.float32))
    y = downsample(x, params.transitions[0], 2)
    assert y.shape == (2, 12, 2, 2)
    z = downsample(y, params.transitions[1], 2)
    assert z.shape == (2, 12, 1, 1)


def test_downsample_rejects_indivisible_grid():
    params = init_model(small_config(), seed=11)
    x = Tensor(np.zeros((1, 12, 3, 3), dtype=np.float32))
    with pytest.raises(ConfigError):
        downsample(x, params.transitions[0], 2)


def test_downsample_hot_cell_survives_into_quadrant():
    cfg = small_config()
    params = init_model(cfg, seed=12)
    tr = params.transitions[0]
    # identity-like conv: center tap one on the matching channel, zero bias
    tr.conv_w.data[...] = 0.0
    for c in range(12):
        tr.conv_w.data[c, c, 1, 1] = 1.0
    tr.conv_b.data[...] = 0.0
    tr.ln.gamma.data[...] = 1.0
    tr.ln.beta.data[...] = 0.0
    x = np.zeros((1, 12, 4, 4), dtype=np.float32)
    x[0, 5, 1, 1] = 7.0  # hot cell in the top-left quadrant
    out = downsample(Tensor(x), tr, 2).data
    assert out[0, 5, 0, 0] > 0.0
    zeroed = out.copy()
    zeroed[0, 5, 0, 0] = 0.0
    assert np.abs(zeroed).max() == 0.0


# -- forward --------------------------------------------------------------------------------------


def test_forward_default_shape_trace():
    params = init_model(ModelConfig(), seed=13)
    rng = np.random.default_rng(13)
    trace = []
    logits = forward(rand_maps(rng, 4, ModelConfig()), params, trace=trace)
    assert logits.shape == (4, 3)
    assert np.all(np.isfinite(logits.data))
    assert trace == [(4, 3, 28, 28), (4, 96, 4, 4), (4, 96, 2, 2),
                     (4, 96, 1, 1), (4, 3)]


def test_forward_identical_samples_identical_rows():
    cfg = small_config()
    params = init_model(cfg, seed=14)
    rng = np.random.default_rng(14)
    one = rng.uniform(-1, 1, (1, cfg.h_flow, cfg.w_flow, 3)).astype(np.float32)
    batch = np.concatenate([one, one], axis=0)
    logits = forward(batch, params).data
    np.testing.assert_array_equal(logits[0], logits[1])


def test_forward_batch_independence():
    cfg = small_config()
    params = init_model(cfg, seed=15)
    rng = np.random.default_rng(15)
    batch = rand_maps(rng, 3, cfg)
    base = forward(batch, params).data
    perturbed = batch.copy()
    perturbed[2] += 0.5
    out = forward(perturbed, params).data
    assert out[0].tobytes() == base[0].tobytes()
    assert out[1].tobytes() == base[1].tobytes()
    assert out[2].tobytes() != base[2].tobytes()


def test_forward_deterministic():
    cfg = small_config()
    params = init_model(cfg, seed=16)
    rng = np.random.default_rng(16)
    batch = rand_maps(rng, 2, cfg)
    assert forward(batch, params).data.tobytes() == forward(batch, params).data.tobytes()


def test_forward_rejects_empty_batch():
    params = init_model(small_config(), seed=16)
    with pytest.raises(ValidationError):
        forward(np.zeros((0, 8, 8, 3), dtype=np.float32), params)


def test_forward_total_blocks_default_config(monkeypatch):
    import ahmsa.model as model_mod

    params = init_model(ModelConfig(), seed=17)
    assert sum(len(level) for level in params.levels) == 12

    calls = []
    original = model_mod.msa_block
    monkeypatch.setattr(model_mod, "msa_block",
                        lambda x, blk, heads: calls.append(1) or original(x, blk, heads))
    rng = np.random.default_rng(17)
    forward(rand_maps(rng, 1, ModelConfig()), params)
    assert len(calls) == 12


@pytest.mark.parametrize("blocks", [(1, 1, 8), (3, 3, 8), (4, 4, 8),
                                    (6, 6, 8), (8, 8, 8)])
def test_forward_ablation_block_counts(blocks):
    from dataclasses import replace
    cfg = replace(ModelConfig(), embed_channels=12, blocks_per_layer=blocks)
    params = init_model(cfg, seed=18)
    rng = np.random.default_rng(18)
    logits = forward(rand_maps(rng, 2, cfg), params)
    assert logits.shape == (2, 3)
    assert np.all(np.isfinite(logits.data))


# -- checkpoint ----------------------------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path):
    cfg = small_config()
    params = init_model(cfg, seed=19)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params)
    loaded = load_checkpoint(path)
    for name, t in params.named_parameters().items():
        assert t.data.tobytes() == loaded.named_parameters()[name].data.tobytes(), name
    rng = np.random.default_rng(19)
    batch = rand_maps(rng, 2, cfg)
    assert forward(batch, params).data.tobytes() == forward(batch, loaded).data.tobytes()


def test_checkpoint_header(tmp_path):
    params = init_model(small_config(), seed=20)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params)
    raw = path.read_bytes()
    assert raw[:4] == b"AHMC"
    assert raw[4] == 1
    import json as _json
    import struct as _struct
    (n,) = _struct.unpack_from("<I", raw, 5)
    cfg = _json.loads(raw[9:9 + n])
    assert cfg["embed_channels"] == 12


def test_checkpoint_rejects_truncation(tmp_path):
    params = init_model(small_config(), seed=21)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params)
    raw = path.read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(raw[:-8])
    with pytest.raises(ValidationError, match="truncated"):
        load_checkpoint(tmp_path / "cut.ckpt")


def test_checkpoint_rejects_bad_magic(tmp_path):
    params = init_model(small_config(), seed=21)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params)
    raw = path.read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(ValidationError, match="magic"):
        load_checkpoint(tmp_path / "bad.ckpt")


# -- end-to-end gradient check --------------------------------------------------------------------


def test_end_to_end_gradients_match_finite_differences():
    from ahmsa.tensor import cross_entropy

    # seed chosen so no relu/argmax kink falls inside the 1e-3 FD window
    cfg = tiny_config()
    params = init_model(cfg, seed=0, dtype=np.float64)
    rng = np.random.default_rng(0)
    batch = rng.uniform(-1, 1, (2, 28, 28, 3))
    labels = np.array([0, 2])

    loss = cross_entropy(forward(batch, params), labels)
    loss.backward()

    step = 1e-3
    worst = ("", 0.0)
    for name, tensor in params.named_parameters().items():
        analytic = tensor.grad.copy()
        numeric = np.zeros_like(analytic)
        flat = tensor.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(cross_entropy(forward(batch, params), labels).data)
            flat[i] = orig - step
            fm = float(cross_entropy(forward(batch, params), labels).data)
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * step)
        err = relative_error(analytic, numeric)
        if err > worst[1]:
            worst = (name, err)
        assert err < 1e-3, f"{name}: rel error {err:.2e}"
    print(f"worst end-to-end gradient error: {worst[0]} at {worst[1]:.2e}")
