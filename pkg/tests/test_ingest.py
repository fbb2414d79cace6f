import json
import sys

import cv2
import numpy as np
import pytest

from bodyreshape import body_model as bm
from bodyreshape import ingest
from bodyreshape.errors import DependencyError, InvalidInputError
from bodyreshape.fitting import Keypoints2D, PersonMask

from conftest import make_scene, write_scene_fixtures


@pytest.fixture(scope="module")
def fixture_env(model, tmp_path_factory):
    root = tmp_path_factory.mktemp("fixtures")
    fdir = root / "fixtures"
    idir = root / "images"
    ids = write_scene_fixtures(model, [600, 601], fdir, idir, resolution=160, two_person_id="pair")
    return fdir, idir, ids


class TestFixtureAdapters:
    def test_keypoint_replay_identical(self, fixture_env):
        fdir, idir, ids = fixture_env
        det = ingest.FixtureKeypointDetector(fdir)
        img = ingest.load_image_file(idir / f"{ids[0]}.png")
        a = det.detect(img, ids[0])
        b = det.detect(img, ids[0])
        assert len(a) == 1
        assert np.array_equal(a[0].points, b[0].points)
        assert np.array_equal(a[0].confidence, b[0].confidence)

    def test_keypoint_format_parsed(self, fixture_env):
        fdir, idir, ids = fixture_env
        det = ingest.FixtureKeypointDetector(fdir)
        kp = det.detect(None, ids[0])[0]
        assert kp.points.shape == (25, 2)
        assert kp.confidence.min() >= 0.0 and kp.confidence.max() <= 1.0

    def test_blank_image_empty_detection(self, tmp_path):
        (tmp_path / "blank_keypoints.json").write_text(json.dumps({"version": 1.3, "people": []}))
        det = ingest.FixtureKeypointDetector(tmp_path)
        assert det.detect(None, "blank") == []

    def test_missing_fixture_is_dependency_error(self, tmp_path):
        det = ingest.FixtureKeypointDetector(tmp_path)
        with pytest.raises(DependencyError):
            det.detect(None, "nothing")

    def test_mask_replay_identical(self, fixture_env):
        fdir, idir, ids = fixture_env
        seg = ingest.FixturePersonSegmenter(fdir)
        a = seg.segment(None, ids[0])
        b = seg.segment(None, ids[0])
        assert len(a) == 1
        assert np.array_equal(a[0].mask, b[0].mask)
        assert a[0].bbox == b[0].bbox

    def test_blank_image_no_masks(self, tmp_path):
        seg = ingest.FixturePersonSegmenter(tmp_path)
        assert seg.segment(None, "blank") == []

    def test_two_person_fixture(self, fixture_env):
        fdir, idir, ids = fixture_env
        seg = ingest.FixturePersonSegmenter(fdir)
        masks = seg.segment(None, "pair")
        assert len(masks) == 2
        b0, b1 = masks[0].bbox, masks[1].bbox
        # disjoint-majority boxes: centers land in different halves
        assert abs((b0[0] + b0[2] / 2) - (b1[0] + b1[2] / 2)) > 20

    def test_initial_estimate_replay(self, fixture_env):
        fdir, idir, ids = fixture_env
        est = ingest.FixtureInitialEstimator(fdir)
        beta, theta, cam = est.estimate(None, ids[0])
        assert beta.beta.shape == (10,)
        assert theta.theta.shape == (72,)
        assert cam.image_size == (224, 224)

    def test_initial_estimate_projects_into_crop(self, fixture_env, model):
        from bodyreshape.rendering import project

        fdir, idir, ids = fixture_env
        est = ingest.FixtureInitialEstimator(fdir)
        beta, theta, cam = est.estimate(None, ids[0])
        j = bm.joints(model, beta, theta)
        proj = project(j, cam)
        assert proj.min() >= -5 and proj.max() <= 229

    def test_command_adapter_runs_external_process(self, fixture_env):
        fdir, idir, ids = fixture_env
        payload_path = fdir / f"{ids[0]}_keypoints.json"
        det = ingest.CommandKeypointDetector([sys.executable, "-c", "import sys;print(open(sys.argv[1]).read())"])
        kps = det.detect_file(payload_path)
        assert len(kps) == 1 and kps[0].points.shape == (25, 2)

    def test_command_adapter_failure_is_dependency_error(self):
        det = ingest.CommandKeypointDetector(["/nonexistent-binary"])
        with pytest.raises(DependencyError):
            det.detect_file("x.png")


class TestFilterRecord:
    def _record_with_visible(self, model, n_visible):
        rec = make_scene(model, seed=33, resolution=128)
        conf = np.zeros(25)
        pairs = [d for d, _ in __import__("bodyreshape.fitting", fromlist=["skeleton_mapping"]).skeleton_mapping("body25")]
        for d in pairs[:n_visible]:
            conf[d] = 0.9
        rec.keypoints = Keypoints2D(rec.keypoints.points, conf, "body25")
        return rec

    def test_five_visible_rejected(self, model):
        rec = self._record_with_visible(model, 5)
        verdict, reason = ingest.filter_record(rec, model)
        assert verdict == "reject" and reason == "keypoints<6"

    def test_six_visible_accepted(self, model):
        rec = self._record_with_visible(model, 6)
        verdict, reason = ingest.filter_record(rec, model)
        assert verdict == "accept" and reason is None

    def test_low_coverage_rejected(self, model):
        rec = make_scene(model, seed=34, resolution=128)
        # move the fitted body far off its mask: silhouette no longer covers it
        bad_cam = bm.CameraParams(
            scale=rec.fit.camera.scale,
            translation=np.asarray(rec.fit.camera.translation) + np.array([90.0, 0.0]),
            image_size=rec.fit.camera.image_size,
        )
        rec.fit = type(rec.fit)(
            beta=rec.fit.beta,
            theta=rec.fit.theta,
            camera=bad_cam,
            final_joint_energy=0.0,
            final_silhouette_energy=0.0,
            iterations_run=(0, 0),
        )
        verdict, reason = ingest.filter_record(rec, model)
        assert verdict == "reject" and reason == "coverage<0.5"

    def test_good_fit_accepted(self, model, scene_record):
        verdict, reason = ingest.filter_record(scene_record, model)
        assert verdict == "accept"


class TestCropAndResize:
    def test_output_resolution(self, model):
        rec = make_scene(model, seed=35, resolution=200)
        out = ingest.crop_and_resize(rec, 128)
        assert out.image.shape == (128, 128, 3)
        assert out.mask.mask.shape == (128, 128)

    def test_keypoint_round_trip(self, model):
        rec = make_scene(model, seed=36, resolution=200)
        out = ingest.crop_and_resize(rec, 256)
        back = out.crop.invert(out.keypoints.points)
        assert np.abs(back - rec.keypoints.points).max() <= 0.5

    def test_mask_area_ratio_preserved(self, model):
        rec = make_scene(model, seed=37, resolution=200)
        out = ingest.crop_and_resize(rec, 256)
        cx, cy, side = ingest.square_crop_window(rec.mask.bbox)
        in_ratio = rec.mask.mask.sum() / side**2
        out_ratio = out.mask.mask.sum() / 256**2
        assert abs(out_ratio - in_ratio) / in_ratio <= 0.02

    def test_camera_transform_consistent(self, model):
        from bodyreshape.rendering import project

        rec = make_scene(model, seed=38, resolution=200)
        out = ingest.crop_and_resize(rec, 256)
        j = bm.joints(model, rec.fit.beta, rec.fit.theta)
        before = out.crop.apply(project(j, rec.fit.camera))
        after = project(j, out.fit.camera)
        assert np.abs(before - after).max() < 1e-6

    def test_degenerate_bbox_rejected(self, model):
        rec = make_scene(model, seed=39, resolution=128)
        tiny = np.zeros((128, 128), dtype=np.uint8)
        tiny[5:7, 5:7] = 1
        rec.mask = PersonMask.from_array(tiny)
        with pytest.raises(InvalidInputError):
            ingest.crop_and_resize(rec, 128)


class TestManifest:
    def test_round_trip(self, model, tmp_path):
        rec = make_scene(model, seed=40, resolution=96)
        rec.image_path = str(tmp_path / "img.png")
        ingest.save_image_file(rec.image, rec.image_path)
        cv2.imwrite(rec.image_path + ".mask.png", rec.mask.mask * 255)
        manifest = ingest.Manifest(records=[ingest.record_to_row(rec)], split="all")
        path = tmp_path / "manifest.jsonl"
        ingest.save_manifest(manifest, path)
        loaded = ingest.load_manifest(path)
        assert loaded.split == "all" and len(loaded.records) == 1
        rec2 = ingest.row_to_record(loaded.records[0], load_image=True)
        assert rec2.image.shape == rec.image.shape
        assert np.array_equal(rec2.mask.mask, rec.mask.mask)
        assert np.allclose(rec2.fit.beta.beta, rec.fit.beta.beta)

    def test_duplicate_ids_rejected(self):
        with pytest.raises(InvalidInputError):
            ingest.Manifest(records=[{"image_id": "a"}, {"image_id": "a"}])

    @pytest.mark.parametrize("n", [20, 21, 40])
    def test_split_ratio_and_disjointness(self, n):
        rows = [{"image_id": f"r{i}"} for i in range(n)]
        manifest = ingest.Manifest(records=rows)
        train, test = ingest.split_manifest(manifest, 0.85, seed=1)
        assert abs(len(train.records) - 0.85 * n) <= 1
        assert len(train.records) + len(test.records) == n
        ids_train = {r["image_id"] for r in train.records}
        ids_test = {r["image_id"] for r in test.records}
        assert not (ids_train & ids_test)
        assert train.split == "train" and test.split == "test"

    def test_status_monotone(self, model):
        rec = make_scene(model, seed=41, resolution=96)
        rec.status = "raw"
        rec.advance("annotated")
        rec.advance("fitted")
        with pytest.raises(InvalidInputError):
            rec.advance("raw")


class TestImageIO:
    def test_decode_reject_garbage(self):
        with pytest.raises(InvalidInputError):
            ingest.decode_image_bytes(b"not an image")

    def test_png_round_trip_lossless(self):
        rng = np.random.default_rng(0)
        img = (rng.integers(0, 256, (32, 32, 3)) / 127.5 - 1.0).astype(np.float32)
        data = ingest.encode_image_png(img)
        back = ingest.decode_image_bytes(data)
        assert np.abs(back - img).max() < 1e-6
