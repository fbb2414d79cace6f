import numpy as np
import pytest

from bodyreshape import body_model as bm
from bodyreshape import evalsuite as ev
from bodyreshape.errors import DependencyError, InvalidInputError, NumericError

from conftest import make_scene


def gaussian_stats(mean, cov, count=100):
    return ev.FidStats(mean=np.asarray(mean, dtype=np.float64), covariance=np.asarray(cov, dtype=np.float64), count=count)


class TestFid:
    def test_self_distance_zero(self):
        rng = np.random.default_rng(0)
        d = 16
        a = rng.standard_normal((50, d))
        cov = np.cov(a, rowvar=False)
        stats = gaussian_stats(a.mean(0), cov)
        assert abs(ev.fid(stats, stats)) <= 1e-6

    def test_isotropic_closed_form(self):
        d = 8
        mu = np.linspace(-1, 1, d)
        a = gaussian_stats(np.zeros(d), np.eye(d))
        b = gaussian_stats(mu, np.eye(d))
        assert abs(ev.fid(a, b) - mu @ mu) <= 1e-6

    def test_scaled_isotropic_closed_form(self):
        # N(0, s1 I) vs N(0, s2 I): d * (s1 + s2 - 2 sqrt(s1 s2))
        d = 6
        a = gaussian_stats(np.zeros(d), 2.0 * np.eye(d))
        b = gaussian_stats(np.zeros(d), 0.5 * np.eye(d))
        expected = d * (2.0 + 0.5 - 2.0 * np.sqrt(1.0))
        assert abs(ev.fid(a, b) - expected) <= 1e-6

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        d = 12
        x = rng.standard_normal((60, d))
        y = rng.standard_normal((80, d)) * 1.5 + 0.3
        sa = gaussian_stats(x.mean(0), np.cov(x, rowvar=False))
        sb = gaussian_stats(y.mean(0), np.cov(y, rowvar=False))
        assert abs(ev.fid(sa, sb) - ev.fid(sb, sa)) <= 1e-6

    def test_dimension_mismatch(self):
        a = gaussian_stats(np.zeros(4), np.eye(4))
        b = gaussian_stats(np.zeros(5), np.eye(5))
        with pytest.raises(InvalidInputError):
            ev.fid(a, b)

    def test_non_psd_rejected(self):
        bad = np.eye(4)
        bad[0, 0] = -1.0
        stats = gaussian_stats(np.zeros(4), bad)
        good = gaussian_stats(np.zeros(4), np.eye(4))
        with pytest.raises(NumericError):
            ev.fid(stats, good)

    def test_reference_scores_present(self):
        assert ev.REFERENCE_FID_SCORES["liquid_warping"] == 89.41673
        assert ev.REFERENCE_FID_SCORES["ours"] == 80.28321


class TestExtractFeatures:
    def _images(self, n, seed=0):
        rng = np.random.default_rng(seed)
        return [rng.standard_normal((24, 24, 3)).astype(np.float32) for _ in range(n)]

    def test_order_invariance(self):
        imgs = self._images(12)
        emb = ev.RandomProjectionEmbedder(dim=32, patch=8)
        s1 = ev.extract_features(imgs, emb)
        s2 = ev.extract_features(list(reversed(imgs)), emb)
        assert np.allclose(s1.mean, s2.mean, atol=1e-10)
        assert np.allclose(s1.covariance, s2.covariance, atol=1e-10)
        assert s1.count == s2.count

    def test_merge_identity(self):
        rng = np.random.default_rng(3)
        feats = rng.standard_normal((40, 10))
        full = ev.FeatureAccumulator(10)
        full.update(feats)
        a = ev.FeatureAccumulator(10)
        b = ev.FeatureAccumulator(10)
        a.update(feats[:17])
        b.update(feats[17:])
        merged = a.merge(b)
        sf = full.finalize()
        sm = merged.finalize()
        assert np.abs(sf.mean - sm.mean).max() <= 1e-8
        assert np.abs(sf.covariance - sm.covariance).max() <= 1e-8

    def test_fixture_features_match_naive_oracle(self, tmp_path):
        rng = np.random.default_rng(4)
        feats = rng.standard_normal((30, 6))
        path = tmp_path / "features.npy"
        np.save(path, feats)
        emb = ev.FixtureEmbedder(path)
        stats = ev.extract_features([np.zeros((4, 4, 3))] * 30, emb, batch_size=7)
        # naive oracle
        mean = feats.mean(axis=0)
        cov = np.cov(feats, rowvar=False)
        assert np.abs(stats.mean - mean).max() <= 1e-10
        assert np.abs(stats.covariance - cov).max() <= 1e-8

    def test_missing_embedder_rejected(self):
        with pytest.raises(DependencyError):
            ev.extract_features([np.zeros((4, 4, 3))], None)

    def test_count_minimum(self):
        emb = ev.RandomProjectionEmbedder(dim=8, patch=4)
        with pytest.raises(InvalidInputError):
            ev.extract_features([np.zeros((8, 8, 3))], emb)


class TestDirectWarpBaseline:
    def test_identity_edit_reproduces_input(self, model, scene_record):
        out = ev.direct_warp_baseline(scene_record, scene_record.fit.beta, model=model)
        assert np.abs(out - scene_record.image).max() <= 1e-6

    def test_differs_from_neural_path(self, model, calibration, scene_record):
        import torch

        from bodyreshape.generator import Generator, GeneratorConfig
        from bodyreshape.pipeline import ReshapePipeline

        torch.manual_seed(0)
        res = scene_record.image.shape[0]
        gen_net = Generator(GeneratorConfig(input_resolution=res)).eval()
        pipeline = ReshapePipeline(model, calibration, generator=gen_net)
        sliders = bm.SemanticSliders(d_weight=12.0)
        neural = pipeline.reshape(scene_record, sliders)
        direct = ev.direct_warp_baseline(scene_record, neural.beta_edited, model=model)
        assert np.abs(neural.image - direct).mean() > 0.0

    def test_seam_metric_positive(self, scene_record):
        boundary = ev.mask_boundary(scene_record.mask.mask)
        assert ev.seam_metric(scene_record.image, boundary) > 0.0


class TestLatency:
    def test_bookkeeping_fields(self, model, calibration, scene_record):
        import torch

        from bodyreshape.generator import Generator, GeneratorConfig
        from bodyreshape.pipeline import ReshapePipeline

        torch.manual_seed(0)
        res = scene_record.image.shape[0]
        gen_net = Generator(GeneratorConfig(input_resolution=res)).eval()
        pipeline = ReshapePipeline(model, calibration, generator=gen_net)

        class _FakePipeline:
            def preprocess(self, image, image_id):
                from bodyreshape.pipeline import PreprocessOutcome

                return PreprocessOutcome(record=scene_record, candidate_bboxes=[scene_record.mask.bbox])

            def encode_foreground_cache(self, record):
                return pipeline.encode_foreground_cache(record)

            def reshape(self, record, sliders, cache=None):
                return pipeline.reshape(record, sliders, cache)

        report = ev.measure_latency(_FakePipeline(), scene_record.image, runs=5)
        assert report["runs"] >= 5
        assert report["reshape_s"] > 0 and report["preprocess_s"] >= 0
        assert "reshape_variance_s2" in report and report["cold_included"]
