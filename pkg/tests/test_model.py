"""Encoder forward/backward contracts: shapes, norms, determinism, variant
wiring, init, checkpoints."""

import numpy as np
import pytest

from headsim.model import (
    VARIANTS,
    EncoderConfig,
    encode,
    encode_backward,
    encode_identity,
    load_checkpoint,
    parameter_count,
    parameter_init,
    param_shapes,
    patchify,
    project_and_normalize,
    save_checkpoint,
)


def analytic_parameter_count(cfg: EncoderConfig) -> int:
    """Independent summation of layer shapes (kept deliberately explicit)."""
    d = cfg.embed_dim
    h = int(cfg.embed_dim * cfg.mlp_ratio)
    n = (cfg.image_size // cfg.patch_size) ** 2
    prefix = 2 if cfg.variant == "dual_cls" else 1
    patch_dim = cfg.patch_size * cfg.patch_size * 3

    total = prefix * d  # learnable prefix tokens
    total += patch_dim * d + d  # patch embedding
    total += (prefix + n) * d  # positions
    per_block = (
        (2 * d)  # norm1
        + (d * 3 * d + 3 * d)  # qkv
        + (d * d + d)  # attn out
        + (2 * d)  # norm2
        + (d * h + h)  # mlp in
        + (h * d + d)  # mlp out
    )
    total += cfg.depth * per_block
    total += 2 * d  # final norm
    total += d * d + d  # identity projection
    if cfg.variant != "shared":
        total += d * d + d  # head projection
    return total


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            EncoderConfig(image_size=60, patch_size=8)
        with pytest.raises(ValueError):
            EncoderConfig(embed_dim=100, num_heads=3)
        with pytest.raises(ValueError):
            EncoderConfig(variant="triple_cls")

    def test_prefix_tokens(self):
        assert EncoderConfig(variant="dual_cls").num_prefix_tokens == 2
        for variant in ("shared", "dual_head_split", "dual_head_both"):
            assert EncoderConfig(variant=variant).num_prefix_tokens == 1

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_parameter_count_formula(self, variant):
        cfg = EncoderConfig(
            image_size=64, patch_size=8, embed_dim=128, depth=4, num_heads=4, variant=variant
        )
        assert parameter_count(cfg) == analytic_parameter_count(cfg)


class TestInit:
    def test_deterministic(self):
        cfg = EncoderConfig(image_size=16, patch_size=8, embed_dim=32, depth=2, num_heads=2)
        a = parameter_init(cfg, seed=5)
        b = parameter_init(cfg, seed=5)
        assert sorted(a) == sorted(b)
        for k in a:
            assert np.array_equal(a[k], b[k]), k

    def test_seed_changes_weights(self):
        cfg = EncoderConfig(image_size=16, patch_size=8, embed_dim=32, depth=1, num_heads=2)
        a = parameter_init(cfg, seed=5)
        b = parameter_init(cfg, seed=6)
        assert not np.array_equal(a["patch_embed.weight"], b["patch_embed.weight"])

    def test_cls_tokens_distinct(self):
        cfg = EncoderConfig(image_size=16, patch_size=8, embed_dim=32, depth=1, num_heads=2)
        params = parameter_init(cfg, seed=0)
        cls = params["cls_tokens"]
        assert cls.shape == (2, 32)
        assert not np.array_equal(cls[0], cls[1])

    def test_truncation_and_moments(self):
        cfg = EncoderConfig(image_size=32, patch_size=8, embed_dim=64, depth=2, num_heads=2)
        params = parameter_init(cfg, seed=1)
        w = params["block0.attn.qkv_weight"]
        assert np.abs(w).max() <= 0.04 + 1e-9  # 2 sigma * std
        assert abs(w.std() - 0.0176) < 0.002  # truncation at 2 sigma shrinks std to ~0.88 sigma
        assert np.array_equal(params["block0.mlp.bias1"], np.zeros_like(params["block0.mlp.bias1"]))
        assert np.array_equal(params["block0.norm1.gamma"], np.ones(64, dtype=np.float32))


class TestPatchify:
    def test_roundtrip_values(self):
        rng = np.random.default_rng(0)
        imgs = rng.uniform(size=(2, 8, 8, 3)).astype(np.float32)
        patches = patchify(imgs, 4)
        assert patches.shape == (2, 4, 48)
        # patch 1 of image 0 is the top-right 4x4 block, row-major
        block = imgs[0, 0:4, 4:8, :].reshape(-1)
        assert np.array_equal(patches[0, 1], block)


class TestProjectAndNormalize:
    def test_identity_projection_of_unit_vector(self):
        v = np.zeros(8)
        v[3] = 1.0
        out = project_and_normalize(v, np.eye(8), np.zeros(8))
        np.testing.assert_allclose(out, v, atol=1e-6)

    def test_input_scale_invariance_with_zero_bias(self):
        rng = np.random.default_rng(1)
        v = rng.standard_normal(8)
        w = rng.standard_normal((8, 8))
        a = project_and_normalize(v, w, np.zeros(8))
        b = project_and_normalize(7.0 * v, w, np.zeros(8))
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_zero_vector_is_deterministic(self):
        out = project_and_normalize(np.zeros(8), np.zeros((8, 8)), np.zeros(8))
        assert np.array_equal(out, np.zeros(8))
        assert np.array_equal(
            out, project_and_normalize(np.zeros(8), np.zeros((8, 8)), np.zeros(8))
        )


class TestEncode:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_unit_norms_and_shapes(self, variant):
        cfg = EncoderConfig(
            image_size=16, patch_size=8, embed_dim=32, depth=2, num_heads=2, variant=variant
        )
        params = parameter_init(cfg, seed=3)
        rng = np.random.default_rng(0)
        imgs = rng.uniform(size=(5, 16, 16, 3)).astype(np.float32)
        pair, cache = encode(cfg, params, imgs)
        assert cache is None
        assert pair.z_id.shape == (5, 32)
        np.testing.assert_allclose(np.linalg.norm(pair.z_id, axis=1), 1.0, atol=1e-5)
        np.testing.assert_allclose(np.linalg.norm(pair.z_head, axis=1), 1.0, atol=1e-5)
        if variant == "shared":
            assert pair.z_head is pair.z_id
        else:
            assert not np.allclose(pair.z_id, pair.z_head)

    def test_deterministic_and_per_sample_independent(self):
        cfg = EncoderConfig(image_size=16, patch_size=8, embed_dim=32, depth=2, num_heads=2)
        params = parameter_init(cfg, seed=3)
        rng = np.random.default_rng(1)
        imgs = rng.uniform(size=(4, 16, 16, 3)).astype(np.float32)
        a, _ = encode(cfg, params, imgs)
        b, _ = encode(cfg, params, imgs)
        assert np.array_equal(a.z_id, b.z_id)

        doubled, _ = encode(cfg, params, np.concatenate([imgs, imgs]))
        np.testing.assert_array_equal(doubled.z_id[:4], doubled.z_id[4:])

        two_same, _ = encode(cfg, params, np.stack([imgs[0], imgs[0]]))
        assert np.array_equal(two_same.z_id[0], two_same.z_id[1])

    def test_shape_mismatch_raises(self):
        cfg = EncoderConfig(image_size=16, patch_size=8, embed_dim=32, depth=1, num_heads=2)
        params = parameter_init(cfg, seed=0)
        with pytest.raises(ValueError):
            encode(cfg, params, np.zeros((2, 8, 8, 3), dtype=np.float32))

    def test_non_finite_parameters_raise(self):
        cfg = EncoderConfig(image_size=16, patch_size=8, embed_dim=32, depth=1, num_heads=2)
        params = parameter_init(cfg, seed=0)
        params["proj_id.weight"][0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            encode(cfg, params, np.zeros((1, 16, 16, 3), dtype=np.float32))

    def test_identity_path_matches_and_skips_head(self, monkeypatch):
        cfg = EncoderConfig(image_size=16, patch_size=8, embed_dim=32, depth=1, num_heads=2)
        params = parameter_init(cfg, seed=0)
        rng = np.random.default_rng(2)
        imgs = rng.uniform(size=(3, 16, 16, 3)).astype(np.float32)
        pair, _ = encode(cfg, params, imgs)
        z = encode_identity(cfg, params, imgs)
        np.testing.assert_array_equal(z, pair.z_id)
        # the inference path must never read the head projection
        params.pop("proj_head.weight")
        params.pop("proj_head.bias")
        np.testing.assert_array_equal(encode_identity(cfg, params, imgs), z)


class TestGradientFlowAcrossTokens:
    def test_each_cls_token_reaches_both_outputs(self):
        # attention mixes the prefix tokens, so perturbing either token's
        # initialization must move both embeddings (finite differences).
        cfg = EncoderConfig(
            image_size=8, patch_size=4, embed_dim=16, depth=1, num_heads=2, mlp_ratio=2.0
        )
        params = parameter_init(cfg, seed=4, dtype=np.float64)
        rng = np.random.default_rng(0)
        imgs = rng.uniform(size=(2, 8, 8, 3))
        base, _ = encode(cfg, params, imgs)
        h = 1e-4
        for token in (0, 1):
            params["cls_tokens"][token, 3] += h
            moved, _ = encode(cfg, params, imgs)
            params["cls_tokens"][token, 3] -= h
            d_id = np.abs(moved.z_id - base.z_id).max()
            d_head = np.abs(moved.z_head - base.z_head).max()
            assert d_id > 1e-9, f"token {token} does not reach z_id"
            assert d_head > 1e-9, f"token {token} does not reach z_head"


class TestBackwardAgainstFiniteDifferences:
    def test_sum_of_embeddings_objective(self, tiny_encoder):
        cfg, params = tiny_encoder
        params = {k: v.copy() for k, v in params.items()}
        rng = np.random.default_rng(7)
        imgs = rng.uniform(size=(3, 8, 8, 3))
        w_id = rng.standard_normal((3, cfg.embed_dim))
        w_head = rng.standard_normal((3, cfg.embed_dim))

        def objective():
            pair, cache = encode(cfg, params, imgs, want_cache=True)
            return float((pair.z_id * w_id).sum() + (pair.z_head * w_head).sum()), cache

        value, cache = objective()
        grads = encode_backward(cfg, params, cache, w_id, w_head)
        h = 1e-6
        for name in ("patch_embed.weight", "block0.attn.qkv_weight", "pos_embed", "cls_tokens"):
            flat = params[name].reshape(-1)
            for i in rng.choice(flat.size, size=5, replace=False):
                orig = flat[i]
                flat[i] = orig + h
                up, _ = objective()
                flat[i] = orig - h
                dn, _ = objective()
                flat[i] = orig
                fd = (up - dn) / (2 * h)
                assert grads[name].reshape(-1)[i] == pytest.approx(fd, abs=1e-5), name


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        cfg = EncoderConfig(image_size=16, patch_size=8, embed_dim=32, depth=1, num_heads=2)
        params = parameter_init(cfg, seed=9)
        m = {k: np.full_like(v, 0.5) for k, v in params.items()}
        v = {k: np.full_like(val, 0.25) for k, val in params.items()}
        path = tmp_path / "ck.npz"
        save_checkpoint(
            path, cfg, params, opt_m=m, opt_v=v, opt_count=17, epoch=3, step=51, extra={"note": "x"}
        )
        ck = load_checkpoint(path)
        assert ck.config == cfg
        assert ck.epoch == 3 and ck.step == 51 and ck.opt_count == 17
        assert ck.extra == {"note": "x"}
        for k in params:
            assert np.array_equal(ck.params[k], params[k])
            assert np.array_equal(ck.opt_m[k], m[k])
