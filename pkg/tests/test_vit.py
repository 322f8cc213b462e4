import numpy as np
import pytest

from defectvit.tensor import Tensor
from defectvit.vit import (
    ConfigError,
    ViTConfig,
    encode,
    init_vit_weights,
    multi_head_self_attention,
    patchify,
    unpatchify,
)


def test_config_invariants():
    cfg = ViTConfig(64, 8, 32, 4, 2)
    assert cfg.num_patches == 64
    with pytest.raises(ConfigError):
        ViTConfig(image_size=60, patch_size=8)
    with pytest.raises(ConfigError):
        ViTConfig(embed_dim=30, num_heads=4)


def test_patchify_tiny_order():
    img = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    p = patchify(img, 1)
    assert p.shape == (4, 1)
    np.testing.assert_array_equal(p.data[:, 0], [1, 2, 3, 4])


def test_patchify_whole_image():
    img = np.arange(16.0).reshape(1, 4, 4)
    p = patchify(Tensor(img), 4)
    np.testing.assert_array_equal(p.data, img.reshape(1, 16))


def test_patchify_roundtrip(rng):
    img = rng.random((2, 12, 12))
    p = patchify(Tensor(img, dtype=np.float64), 4).data
    assert p.shape == (9, 2 * 16)
    np.testing.assert_array_equal(unpatchify(p, 4, 2), img)


def test_patchify_rejects_bad_size():
    with pytest.raises(ConfigError):
        patchify(Tensor(np.zeros((1, 10, 10))), 4)


def _naive_attention(x, w, heads):
    n, d = x.shape
    dh = d // heads
    q, k, v = (x @ w[f"w{c}"] + w[f"b{c}"] for c in "qkv")
    out = np.zeros((n, d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(n):
            s = np.array([q[i, sl] @ k[j, sl] for j in range(n)]) / np.sqrt(dh)
            e = np.exp(s - s.max())
            a = e / e.sum()
            out[i, sl] = sum(a[j] * v[j, sl] for j in range(n))
    return out @ w["wo"] + w["bo"]


def _attn_weights(rng, d):
    w = {}
    for c in "qkvo":
        w[f"w{c}"] = rng.normal(0, 0.3, (d, d))
        w[f"b{c}"] = rng.normal(0, 0.1, d)
    return w


def test_attention_matches_naive_loop(rng):
    x = rng.normal(size=(6, 8))
    w = _attn_weights(rng, 8)
    tw = {k: Tensor(v, dtype=np.float64) for k, v in w.items()}
    out, attn = multi_head_self_attention(Tensor(x, dtype=np.float64), tw, 2, return_attention=True)
    np.testing.assert_allclose(out.data, _naive_attention(x, w, 2), atol=1e-5)
    np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-6)


def test_single_token_attention(rng):
    x = rng.normal(size=(1, 4))
    w = _attn_weights(rng, 4)
    tw = {k: Tensor(v, dtype=np.float64) for k, v in w.items()}
    out, attn = multi_head_self_attention(Tensor(x, dtype=np.float64), tw, 2, return_attention=True)
    np.testing.assert_allclose(attn, 1.0)
    v = x @ w["wv"] + w["bv"]
    np.testing.assert_allclose(out.data, v @ w["wo"] + w["bo"], atol=1e-12)


def test_attention_head_divisibility(rng):
    w = {k: Tensor(v) for k, v in _attn_weights(rng, 6).items()}
    with pytest.raises(ConfigError):
        multi_head_self_attention(Tensor(np.zeros((3, 6))), w, 4)


def test_encode_shape_and_finite(rng):
    cfg = ViTConfig(64, 8, 32, 4, 2)
    w = init_vit_weights(cfg, rng)
    out = encode(Tensor(rng.random((1, 64, 64))), cfg, w)
    assert out.shape == (64, 32)
    assert np.all(np.isfinite(out.data))
    batched = encode(Tensor(rng.random((3, 1, 64, 64))), cfg, w)
    assert batched.shape == (3, 64, 32)


def test_encode_deterministic_without_dropout(rng):
    cfg = ViTConfig(32, 8, 16, 2, 1, dropout_rate=0.0)
    w = init_vit_weights(cfg, rng)
    img = Tensor(rng.random((1, 32, 32)))
    np.testing.assert_array_equal(encode(img, cfg, w).data, encode(img, cfg, w).data)


def test_encode_weight_mismatch(rng):
    cfg = ViTConfig(32, 8, 16, 2, 1)
    w = init_vit_weights(ViTConfig(32, 8, 24, 2, 1), rng)
    with pytest.raises(ConfigError):
        encode(Tensor(rng.random((1, 32, 32))), cfg, w)


def _permute_patches(img, perm, p):
    patches = patchify(Tensor(img, dtype=np.float64), p).data
    return unpatchify(patches[perm], p, img.shape[0])


def test_permutation_equivariance_only_without_positions(rng):
    cfg = ViTConfig(32, 8, 16, 4, 2, dropout_rate=0.0)
    w = {k: Tensor(v.data, dtype=np.float64) for k, v in init_vit_weights(cfg, rng).items()}
    w["vit.patch.pos"] = Tensor(rng.normal(0, 0.5, (cfg.num_patches, 16)), dtype=np.float64)
    img = rng.random((1, 32, 32))
    perm = rng.permutation(cfg.num_patches)
    permuted = _permute_patches(img, perm, 8)

    base = encode(Tensor(img, dtype=np.float64), cfg, w).data
    moved = encode(Tensor(permuted, dtype=np.float64), cfg, w).data
    assert not np.allclose(moved, base[perm], atol=1e-6)

    w["vit.patch.pos"] = Tensor(np.zeros((cfg.num_patches, 16)), dtype=np.float64)
    base = encode(Tensor(img, dtype=np.float64), cfg, w).data
    moved = encode(Tensor(permuted, dtype=np.float64), cfg, w).data
    np.testing.assert_allclose(moved, base[perm], atol=1e-10)


def test_gradient_reaches_every_encoder_weight(rng):
    cfg = ViTConfig(32, 8, 16, 2, 2)
    w = init_vit_weights(cfg, rng)
    encode(Tensor(rng.random((1, 32, 32))), cfg, w, training=True, key=(1, 1)).sum().backward()
    for name, t in w.items():
        assert t.grad is not None, name
