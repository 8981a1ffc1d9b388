import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from segfuse.errors import ConfigError, DomainError, ShapeError
from segfuse.fusion import (
    AttentionBlock,
    FusionConfig,
    build_fusion,
    from_patches,
    fuse,
    position_codes,
    positional_encode,
    self_attention_block,
    to_patches,
    dihedral,
    train_fusion,
    weighted_mean_baseline,
)
from segfuse.tensor import Tensor, bce_with_logits, gradient_check

TOY = FusionConfig(input_size=32, token_grid=4, token_dim=12, n_heads=2, n_layers=2)


@pytest.fixture
def rng():
    return np.random.default_rng(3)


def _jitter(model, rng):
    # zero biases put ReLU inputs exactly on the kink; move off it before finite differences
    for p in model.parameters():
        p.data = p.data + 0.05 * rng.standard_normal(p.shape)


def test_config_validation():
    with pytest.raises(ConfigError):
        FusionConfig(token_dim=30, n_heads=4)
    with pytest.raises(ConfigError):
        FusionConfig(input_size=100, token_grid=16)


def test_patches_round_trip(rng):
    masks = rng.random((2, 32, 32))
    cols = to_patches(masks, 4)
    assert cols.shape == (2, 64, 16)
    assert np.array_equal(cols[0, :, 0], masks[0, :8, :8].ravel())
    assert np.array_equal(cols[1, :, 5], masks[1, 8:16, 8:16].ravel())
    back = from_patches(Tensor(cols.transpose(0, 2, 1)), 4).data
    assert np.array_equal(back, masks)


def test_token_counts():
    model = build_fusion(FusionConfig(input_size=256, token_grid=16), seed=0)
    z = np.zeros((1, 256, 256))
    tokens = model.tokenize(z, z)
    assert tokens.shape == (1, 512, 32)


def test_zero_masks_give_modality_embeddings():
    model = build_fusion(TOY, seed=1)
    z = np.zeros((1, 32, 32))
    tokens = model.tokenize(z, z).data[0]
    n = TOY.n_tokens
    assert np.array_equal(tokens[:n], np.tile(model.modality.data[0], (n, 1)))
    assert np.array_equal(tokens[n:], np.tile(model.modality.data[1], (n, 1)))


def test_indivisible_mask_rejected():
    model = build_fusion(TOY)
    with pytest.raises(ConfigError):
        model(np.zeros((30, 30)), np.zeros((30, 30)))
    with pytest.raises(ShapeError):
        model(np.zeros((32, 32)), np.zeros((16, 16)))


def test_position_codes():
    codes = position_codes(TOY)
    chunk = 2 * (TOY.token_dim // 6)
    # row 0, col 0, modality 0: sin(0)=0 in even slots, cos(0)=1 in odd slots
    assert np.array_equal(codes[0, 0::2], np.zeros(TOY.token_dim // 2))
    assert np.array_equal(codes[0, 1::2], np.ones(TOY.token_dim // 2))
    assert codes[TOY.n_tokens, 2 * chunk] != 0.0
    dist = np.linalg.norm(codes[:, None] - codes[None], axis=-1)
    np.fill_diagonal(dist, np.inf)
    assert dist.min() > 1e-6


def test_positional_encode_is_additive(rng):
    x = Tensor(rng.standard_normal((2 * TOY.n_tokens, TOY.token_dim)))
    once = positional_encode(x, TOY).data
    twice = positional_encode(positional_encode(x, TOY), TOY).data
    assert np.allclose(twice - once, once - x.data)
    assert not np.allclose(twice, once)


def test_single_token_attends_to_itself(rng):
    block = AttentionBlock(8, 2, 2, rng)
    _, weights = self_attention_block(Tensor(rng.standard_normal((1, 8))), block)
    assert np.array_equal(weights.data, np.ones((2, 1, 1)))


def test_attention_rows_are_distributions(rng):
    block = AttentionBlock(8, 2, 2, rng)
    _, weights = self_attention_block(Tensor(rng.standard_normal((3, 10, 8)) * 4), block)
    assert np.all(weights.data >= 0)
    assert np.max(np.abs(weights.data.sum(axis=-1) - 1.0)) < 1e-9


def test_attention_block_is_permutation_equivariant(rng):
    block = AttentionBlock(12, 3, 2, rng)
    x = rng.standard_normal((9, 12))
    perm = rng.permutation(9)
    out, _ = self_attention_block(Tensor(x), block)
    out_p, _ = self_attention_block(Tensor(x[perm]), block)
    assert np.allclose(out_p.data, out.data[perm], atol=1e-12)


def test_attention_block_dimension_mismatch(rng):
    with pytest.raises(ShapeError):
        AttentionBlock(10, 3, 2, rng)
    block = AttentionBlock(8, 2, 2, rng)
    with pytest.raises(ShapeError):
        self_attention_block(Tensor(np.zeros((4, 6))), block)


def test_attention_block_gradient(rng):
    block = AttentionBlock(8, 2, 2, rng)
    _jitter(block, rng)
    x = Tensor(rng.standard_normal((2, 5, 8)), requires_grad=True)
    target = rng.standard_normal((2, 5, 8))

    def loss():
        out, _ = self_attention_block(x, block)
        d = out - Tensor(target)
        return (d * d).mean()

    params = dict(block.named_parameters())
    params["x"] = x
    assert gradient_check(loss, params) < 1e-4


def test_fusion_gradient_32(rng):
    model = build_fusion(TOY, seed=2)
    _jitter(model, rng)
    static, temporal = rng.random((32, 32)), rng.random((32, 32))
    gt = (rng.random((32, 32)) > 0.5).astype(float)
    assert gradient_check(lambda: bce_with_logits(model(static, temporal), gt), model.named_parameters()) < 1e-4


@pytest.mark.parametrize("cfg", [TOY, FusionConfig(input_size=64, token_grid=16, token_dim=32, n_layers=1),
                                 FusionConfig(input_size=48, token_grid=6, token_dim=18, n_heads=3, n_layers=0)])
def test_output_shape(rng, cfg):
    model = build_fusion(cfg)
    s = rng.random((cfg.input_size, cfg.input_size))
    assert fuse(model, s, s).shape == s.shape
    assert fuse(model, np.stack([s, s, s]), np.stack([s, s, s])).shape == (3,) + s.shape


def test_zero_parameters_give_constant_map(rng):
    model = build_fusion(TOY)
    model.load_state_dict({k: np.zeros_like(v) for k, v in model.state_dict().items()})
    out = fuse(model, rng.random((32, 32)), rng.random((32, 32)))
    assert np.all(out == out.flat[0])


def test_fusion_reads_temporal_input(rng):
    model = build_fusion(TOY, seed=4)
    static, temporal = rng.random((32, 32)), rng.random((32, 32))
    shuffled = rng.permutation(temporal.ravel()).reshape(32, 32)
    assert not np.allclose(fuse(model, static, temporal), fuse(model, static, shuffled))


def _pairs(rng, n, size=32):
    yy, xx = np.mgrid[0:size, 0:size]
    gt = np.zeros((n, size, size))
    for i in range(n):
        cx, cy, r = rng.uniform(8, 24, 2).tolist() + [rng.uniform(4, 8)]
        gt[i] = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    static = np.clip(gt + 0.3 * rng.standard_normal(gt.shape), 0, 1)
    temporal = np.clip(np.roll(gt, 2, axis=2) * 0.9 + 0.05, 0, 1)
    return static, temporal, gt


def test_training_reduces_loss_over_seeds():
    first, last = [], []
    for seed in range(3):
        rng = np.random.default_rng(seed)
        model = build_fusion(TOY, seed=seed)
        hist = train_fusion(model, *_pairs(rng, 8), epochs=5, batch_size=4, seed=seed)
        first.append(hist.entries[0]["train_loss"])
        last.append(hist.entries[-1]["train_loss"])
    assert np.mean(last) <= np.mean(first)


def test_zero_epochs_and_missing_gt(rng):
    model = build_fusion(TOY, seed=0)
    s, t, g = _pairs(rng, 4)
    before = model.state_dict()
    assert len(train_fusion(model, s, t, g, epochs=0)) == 0
    assert all(np.array_equal(before[k], v) for k, v in model.state_dict().items())
    with pytest.raises(ConfigError):
        train_fusion(model, s, t, None)


def test_training_is_deterministic():
    runs = []
    for _ in range(2):
        model = build_fusion(TOY, seed=9)
        hist = train_fusion(model, *_pairs(np.random.default_rng(1), 6), epochs=2, seed=9)
        runs.append((hist.to_json(), model.state_dict()))
    assert runs[0][0] == runs[1][0]
    assert all(np.array_equal(runs[0][1][k], runs[1][1][k]) for k in runs[0][1])


# -- weighted mean baseline ---------------------------------------------------

def test_weighted_mean_endpoints(rng):
    s, t = rng.random((16, 16)), rng.random((16, 16))
    assert np.array_equal(weighted_mean_baseline(s, t, 1.0), (s >= 0.5).astype(np.uint8))
    assert np.array_equal(weighted_mean_baseline(s, t, 0.0), (t >= 0.5).astype(np.uint8))
    for a in (0.1, 0.5, 0.9):
        assert np.array_equal(weighted_mean_baseline(s, s, a), (s >= 0.5).astype(np.uint8))


def test_weighted_mean_alpha_range():
    z = np.zeros((4, 4))
    for a in (-0.1, 1.1, float("nan")):
        with pytest.raises(DomainError):
            weighted_mean_baseline(z, z, a)


unit = st.floats(0.0, 1.0)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (6, 6), elements=unit), arrays(np.float64, (6, 6), elements=unit),
       st.floats(0.0, 1.0), st.integers(0, 35), st.floats(0.0, 1.0), st.booleans())
def test_weighted_mean_is_monotone(s, t, alpha, pixel, bump, on_static):
    before = weighted_mean_baseline(s, t, alpha)
    s2, t2 = s.copy(), t.copy()
    target = s2 if on_static else t2
    i, j = divmod(pixel, 6)
    target[i, j] = target[i, j] + bump * (1.0 - target[i, j])
    after = weighted_mean_baseline(s2, t2, alpha)
    assert after[i, j] >= before[i, j]


def test_dihedral_covers_the_eight_symmetries(rng):
    a = rng.standard_normal((2, 5, 5))
    images = [dihedral(a, k) for k in range(8)]
    assert np.array_equal(images[0], a)
    assert all(not np.array_equal(images[i], images[j]) for i in range(8) for j in range(i))
    assert np.array_equal(dihedral(dihedral(a, 1), 3), a)
    assert np.array_equal(dihedral(dihedral(a, 5), 5), a)
    with pytest.raises(DomainError):
        dihedral(a, 8)


def test_augmented_training_is_deterministic_and_differs():
    def run(augment):
        model = build_fusion(TOY, seed=4)
        hist = train_fusion(model, *_pairs(np.random.default_rng(2), 6), epochs=2, seed=4, augment=augment)
        return hist.to_json(), model.state_dict()

    (h1, p1), (h2, p2), (h3, _) = run(True), run(True), run(False)
    assert h1 == h2 and all(np.array_equal(p1[k], p2[k]) for k in p1)
    assert h1 != h3
