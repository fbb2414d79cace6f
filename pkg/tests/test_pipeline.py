import numpy as np
import pytest
import torch

from bodyreshape import body_model as bm
from bodyreshape.errors import InvalidInputError, NotReadyError
from bodyreshape.fitting import FitConfig
from bodyreshape.generator import Generator, GeneratorConfig
from bodyreshape.ingest import FixtureInitialEstimator, FixtureKeypointDetector, FixturePersonSegmenter
from bodyreshape.pipeline import ReshapePipeline

from conftest import make_scene, write_scene_fixtures

RES = 128


@pytest.fixture(scope="module")
def pipeline(model, calibration):
    torch.manual_seed(1)
    generator = Generator(GeneratorConfig(input_resolution=RES)).eval()
    return ReshapePipeline(model, calibration, generator=generator, target_resolution=RES)


class TestReshape:
    def test_zero_sliders_identity_outside_mask(self, pipeline, model):
        record = make_scene(model, seed=900, resolution=RES)
        out = pipeline.reshape(record, bm.SemanticSliders())
        outside = out.union.a == 0
        assert np.array_equal(out.image[outside], record.image[outside])
        # identity field everywhere
        from bodyreshape.warpfield import identity_grid

        assert np.array_equal(out.field.grid, identity_grid(RES, RES))

    def test_edit_changes_foreground_region_only(self, pipeline, model):
        record = make_scene(model, seed=901, resolution=RES)
        out = pipeline.reshape(record, bm.SemanticSliders(d_weight=15.0))
        outside = out.union.a == 0
        assert np.array_equal(out.image[outside], record.image[outside])
        inside = out.union.a > 0
        assert np.abs(out.image[inside] - record.image[inside]).mean() > 0.0

    def test_cache_reuse_consistent(self, pipeline, model):
        record = make_scene(model, seed=902, resolution=RES)
        cache = pipeline.encode_foreground_cache(record)
        a = pipeline.reshape(record, bm.SemanticSliders(d_height=8.0), cache)
        b = pipeline.reshape(record, bm.SemanticSliders(d_height=8.0), cache)
        assert np.array_equal(a.image, b.image)
        c = pipeline.reshape(record, bm.SemanticSliders(d_height=8.0))
        assert np.array_equal(a.image, c.image)

    def test_requires_generator(self, model, calibration):
        bare = ReshapePipeline(model, calibration, generator=None)
        record = make_scene(model, seed=903, resolution=RES)
        with pytest.raises(NotReadyError):
            bare.reshape(record, bm.SemanticSliders())

    def test_edited_beta_follows_sliders(self, pipeline, model, calibration):
        record = make_scene(model, seed=904, resolution=RES)
        out = pipeline.reshape(record, bm.SemanticSliders(d_weight=10.0))
        dw = bm.measure_weight(model, out.beta_edited) - bm.measure_weight(model, record.fit.beta)
        assert 5.0 <= dw <= 15.0


class TestPreprocess:
    def test_end_to_end_with_fixtures(self, model, calibration, tmp_path):
        fdir = tmp_path / "fixtures"
        idir = tmp_path / "images"
        ids = write_scene_fixtures(model, [910], fdir, idir, resolution=192)
        torch.manual_seed(0)
        pipeline = ReshapePipeline(
            model,
            calibration,
            generator=Generator(GeneratorConfig(input_resolution=RES)).eval(),
            keypoint_adapter=FixtureKeypointDetector(fdir),
            segment_adapter=FixturePersonSegmenter(fdir),
            initial_estimator=FixtureInitialEstimator(fdir),
            fit_config=FitConfig(iters=(10, 2)),
            target_resolution=RES,
        )
        from bodyreshape.ingest import load_image_file

        image = load_image_file(idir / f"{ids[0]}.png")
        outcome = pipeline.preprocess(image, ids[0])
        rec = outcome.record
        assert rec.status == "ready"
        assert rec.image.shape == (RES, RES, 3)
        assert rec.fit is not None and rec.fit.camera.image_size == (RES, RES)
        assert set(outcome.stage_seconds) >= {"detect", "crop", "initial_estimate", "fit"}
        # a reshape on the preprocessed record works end to end
        out = pipeline.reshape(rec, bm.SemanticSliders(d_weight=-10.0))
        assert out.image.shape == (RES, RES, 3)

    def test_no_adapters_not_ready(self, model, calibration):
        pipeline = ReshapePipeline(model, calibration)
        with pytest.raises(NotReadyError):
            pipeline.preprocess(np.zeros((64, 64, 3), dtype=np.float32), "x")
