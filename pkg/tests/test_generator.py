import numpy as np
import pytest
import torch

from bodyreshape import generator as gen
from bodyreshape.errors import InvalidInputError, NotReadyError
from bodyreshape.warpfield import WarpField, identity_field, identity_grid


@pytest.fixture(scope="module")
def small_gen():
    torch.manual_seed(0)
    return gen.Generator(gen.GeneratorConfig(input_resolution=128))


def rand_inputs(res, batch=1, seed=0):
    g = torch.Generator().manual_seed(seed)
    i_f = torch.rand(batch, 3, res, res, generator=g) * 2 - 1
    i_b = torch.rand(batch, 3, res, res, generator=g) * 2 - 1
    a = (torch.rand(batch, 1, res, res, generator=g) > 0.5).float()
    return i_f, i_b, a


class TestConfig:
    def test_channel_list_length_enforced(self):
        with pytest.raises(InvalidInputError):
            gen.GeneratorConfig(encoder_channels=(64, 128, 256))

    def test_full_model_block_counts_enforced(self):
        with pytest.raises(InvalidInputError):
            gen.GeneratorConfig(bottleneck_blocks=5)
        with pytest.raises(InvalidInputError):
            gen.GeneratorConfig(decoder_layers=3)

    def test_variant_switches(self):
        assert gen.variant_config("full").background_conv == "gated"
        assert gen.variant_config("G-").background_conv == "vanilla"
        assert gen.variant_config("M+").fusion_mode == "masked_add"
        assert gen.variant_config("C-").fusion_mode == "last_layer_only"
        base = gen.variant_config("full").fingerprint()
        for v in ("G-", "M+", "C-"):
            assert gen.variant_config(v).fingerprint() != base


class TestEncoders:
    @pytest.mark.parametrize("res,chans", [(256, (64, 128, 256, 512)), (512, (64, 128, 256, 512))])
    def test_pyramid_shape_contract(self, res, chans):
        torch.manual_seed(0)
        enc = gen.Encoder(3, chans, gated=False)
        with torch.no_grad():
            pyr = enc(torch.zeros(1, 3, res, res))
        for i, p in enumerate(pyr):
            assert tuple(p.shape) == (1, chans[i], res // 2**i, res // 2**i)

    def test_background_encoder_same_contract(self, small_gen):
        i_f, i_b, a = rand_inputs(128)
        with torch.no_grad():
            f_pyr = small_gen.fg_encoder(i_f)
            b_pyr = small_gen.bg_encoder(torch.cat([i_b, a], dim=1))
        for fp, bp in zip(f_pyr, b_pyr):
            assert fp.shape == bp.shape

    def test_all_masked_input_finite(self, small_gen):
        a = torch.ones(1, 1, 128, 128)
        i_b = torch.zeros(1, 3, 128, 128)
        with torch.no_grad():
            pyr = small_gen.bg_encoder(torch.cat([i_b, a], dim=1))
        assert all(torch.isfinite(p).all() for p in pyr)

    def test_gate_values_in_unit_interval(self, small_gen):
        x = torch.randn(1, 4, 128, 128)
        with torch.no_grad():
            for layer in small_gen.bg_encoder.layers:
                g = layer.gate(x)
                assert float(g.min()) > 0.0 and float(g.max()) < 1.0
                x = layer(x)

    def test_inference_determinism(self, small_gen):
        i_f, _, _ = rand_inputs(128, seed=3)
        with torch.no_grad():
            a = small_gen.fg_encoder(i_f)
            b = small_gen.fg_encoder(i_f)
        for pa, pb in zip(a, b):
            assert torch.equal(pa, pb)

    def test_bottleneck_has_six_residual_blocks(self, small_gen):
        assert len(small_gen.bottleneck) == 6
        assert all(isinstance(m, gen.ResidualBlock) for m in small_gen.bottleneck)


class TestFuse:
    def test_identity_field_add_is_sum(self):
        f = torch.randn(2, 16, 32, 32)
        b = torch.randn(2, 16, 32, 32)
        grid = torch.from_numpy(identity_grid(32, 32)).float().unsqueeze(0)
        out = gen.fuse(f, b, grid, "add")
        assert (out - (f + b)).abs().max() <= 1e-6

    def test_zero_foreground_returns_background(self):
        b = torch.randn(1, 8, 16, 16)
        grid = torch.from_numpy(identity_grid(16, 16)).float().unsqueeze(0)
        out = gen.fuse(torch.zeros(1, 8, 16, 16), b, grid, "add")
        assert torch.equal(out, b)

    def test_masked_add_matches_compositional_oracle(self):
        rng = np.random.default_rng(0)
        h = w = 32
        from bodyreshape.warpfield import apply_warp_features, apply_warp_image

        grid = identity_grid(h, w) + rng.standard_normal((h, w, 2)) * 1.5
        field = WarpField(grid, np.ones((h, w), dtype=bool))
        f = rng.standard_normal((h // 2, w // 2, 6))
        b = rng.standard_normal((h // 2, w // 2, 6))
        fg_mask = (rng.random((h, w)) > 0.4).astype(np.float64)

        out = gen.fuse_field(
            torch.from_numpy(f.transpose(2, 0, 1)).double(),
            torch.from_numpy(b.transpose(2, 0, 1)).double(),
            field,
            "masked_add",
            fg_mask=fg_mask,
        )
        # oracle composed from already-tested primitives
        warped_f = apply_warp_features(f, field)
        warped_mask_full = apply_warp_image(fg_mask, field)
        m_small = warped_mask_full.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
        oracle = b + warped_f * m_small[..., None]
        got = out.squeeze(0).numpy().transpose(1, 2, 0)
        assert np.abs(got - oracle).max() < 1e-9

    def test_shape_mismatch_rejected(self):
        grid = torch.from_numpy(identity_grid(8, 8)).float().unsqueeze(0)
        with pytest.raises(InvalidInputError):
            gen.fuse(torch.zeros(1, 4, 8, 8), torch.zeros(1, 5, 8, 8), grid, "add")


class TestGenerate:
    def test_output_shape_and_range(self, small_gen):
        i_f, i_b, a = rand_inputs(128, seed=1)
        grids = gen.field_to_grids(identity_field(128, 128), small_gen.level_resolutions(128, 128))
        with torch.no_grad():
            out = small_gen(i_f, i_b, a, grids)
        assert tuple(out.shape) == (1, 3, 128, 128)
        assert float(out.min()) >= -1.0 and float(out.max()) <= 1.0

    def test_variant_forward_smoke(self):
        for variant in ("G-", "M+", "C-"):
            torch.manual_seed(0)
            g = gen.Generator(gen.variant_config(variant, input_resolution=64))
            i_f, i_b, a = rand_inputs(64, seed=2)
            grids = gen.field_to_grids(identity_field(64, 64), g.level_resolutions(64, 64))
            with torch.no_grad():
                out = g(i_f, i_b, a, grids, fg_mask=(i_f.abs().sum(1, keepdim=True) > 0).float())
            assert tuple(out.shape) == (1, 3, 64, 64)

    def test_generate_convenience_requires_weights(self):
        with pytest.raises(NotReadyError):
            gen.load_checkpoint("/nonexistent/ck.pt")

    def test_encoded_cache_path_matches_forward(self, small_gen):
        i_f, i_b, a = rand_inputs(128, seed=7)
        grids = gen.field_to_grids(identity_field(128, 128), small_gen.level_resolutions(128, 128))
        with torch.no_grad():
            direct = small_gen(i_f, i_b, a, grids)
            cached = small_gen.forward_encoded(small_gen.fg_encoder(i_f), i_b, a, grids)
        assert torch.equal(direct, cached)


class TestComposite:
    def test_empty_mask_returns_input_exactly(self):
        rng = np.random.default_rng(0)
        img = rng.standard_normal((16, 16, 3)).astype(np.float32)
        out = gen.composite(img, rng.standard_normal((16, 16, 3)).astype(np.float32), np.zeros((16, 16)))
        assert np.array_equal(out, img)

    def test_full_mask_returns_generated_exactly(self):
        rng = np.random.default_rng(1)
        g = rng.standard_normal((16, 16, 3)).astype(np.float32)
        out = gen.composite(rng.standard_normal((16, 16, 3)).astype(np.float32), g, np.ones((16, 16)))
        assert np.array_equal(out, g)

    def test_checkerboard_matches_pixel_oracle(self):
        rng = np.random.default_rng(2)
        img = rng.standard_normal((8, 8, 3))
        g = rng.standard_normal((8, 8, 3))
        a = np.indices((8, 8)).sum(axis=0) % 2
        out = gen.composite(img, g, a)
        for y in range(8):
            for x in range(8):
                expected = g[y, x] if a[y, x] else img[y, x]
                assert np.array_equal(out[y, x], expected)

    def test_idempotent(self):
        rng = np.random.default_rng(3)
        img = rng.standard_normal((8, 8, 3))
        g = rng.standard_normal((8, 8, 3))
        a = (rng.random((8, 8)) > 0.5).astype(np.uint8)
        once = gen.composite(img, g, a)
        twice = gen.composite(img, once, a)
        assert np.array_equal(once, twice)

    def test_resolution_mismatch(self):
        with pytest.raises(InvalidInputError):
            gen.composite(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)), np.zeros((4, 4)))


class TestDiscriminator:
    def test_patch_map_extent(self):
        d = gen.PatchDiscriminator()
        with torch.no_grad():
            scores = d(torch.zeros(1, 3, 256, 256))
        assert scores.shape[-1] >= 4 and scores.shape[-2] >= 4

    def test_six_spectrally_normalized_layers(self):
        d = gen.PatchDiscriminator()
        convs = d.conv_layers()
        assert len(convs) == 6
        for conv in convs:
            assert gen.weight_spectral_norm(conv) <= 1.01

    def test_purity(self):
        d = gen.PatchDiscriminator().eval()  # inference mode freezes the norm estimates
        x = torch.randn(1, 3, 128, 128)
        with torch.no_grad():
            assert torch.equal(d(x), d(x))


class TestGradientFlow:
    def test_one_step_decreases_recovery_loss(self):
        torch.manual_seed(4)
        g = gen.Generator(gen.GeneratorConfig(input_resolution=64))
        i_f, i_b, a = rand_inputs(64, batch=2, seed=5)
        target = torch.rand(2, 3, 64, 64) * 2 - 1
        rng = np.random.default_rng(0)
        grid = identity_grid(64, 64) + rng.standard_normal((64, 64, 2)) * 1.0
        field = WarpField(grid, np.ones((64, 64), dtype=bool))
        grids = gen.field_to_grids(field, g.level_resolutions(64, 64))
        opt = torch.optim.Adam(g.parameters(), lr=2e-4)

        def loss():
            out = g(i_f, i_b, a, grids)
            comp = gen.composite(target, out, a)
            return (comp - target).abs().mean()

        l0 = loss()
        l0.backward()
        opt.step()
        l1 = loss()
        assert float(l1) < float(l0)


class TestCheckpoints:
    def test_fingerprint_verified(self, tmp_path, small_gen):
        path = tmp_path / "ck.pt"
        gen.save_checkpoint(path, small_gen, meta={"step": 3})
        loaded = gen.load_checkpoint(path)
        with torch.no_grad():
            i_f, i_b, a = rand_inputs(128, seed=9)
            grids = gen.field_to_grids(identity_field(128, 128), small_gen.level_resolutions(128, 128))
            assert torch.equal(small_gen(i_f, i_b, a, grids), loaded(i_f, i_b, a, grids))

    def test_tampered_fingerprint_rejected(self, tmp_path, small_gen):
        path = tmp_path / "ck.pt"
        gen.save_checkpoint(path, small_gen)
        payload = torch.load(path, map_location="cpu", weights_only=False)
        payload["config_fingerprint"] = "0" * 16
        torch.save(payload, path)
        with pytest.raises(NotReadyError):
            gen.load_checkpoint(path)
