import io

import numpy as np
import pytest
import torch
from fastapi.testclient import TestClient

from bodyreshape import body_model as bm
from bodyreshape.fitting import FitConfig
from bodyreshape.generator import Generator, GeneratorConfig
from bodyreshape.ingest import (
    FixtureInitialEstimator,
    FixtureKeypointDetector,
    FixturePersonSegmenter,
    decode_image_bytes,
)
from bodyreshape.pipeline import ReshapePipeline
from bodyreshape.server import SessionService, create_app

from conftest import write_scene_fixtures

RES = 128


@pytest.fixture(scope="module")
def served(model, calibration, tmp_path_factory):
    root = tmp_path_factory.mktemp("server_fixtures")
    fdir = root / "fixtures"
    idir = root / "images"
    ids = write_scene_fixtures(model, [700, 701], fdir, idir, resolution=192, two_person_id="pair")
    torch.manual_seed(0)
    generator = Generator(GeneratorConfig(input_resolution=RES)).eval()
    pipeline = ReshapePipeline(
        model,
        calibration,
        generator=generator,
        keypoint_adapter=FixtureKeypointDetector(fdir),
        segment_adapter=FixturePersonSegmenter(fdir),
        initial_estimator=FixtureInitialEstimator(fdir),
        fit_config=FitConfig(iters=(12, 2)),
        target_resolution=RES,
    )
    service = SessionService(pipeline)
    app = create_app(service, synchronous=True)
    client = TestClient(app)
    return client, idir, ids


def upload(client, idir, image_id):
    data = (idir / f"{image_id}.png").read_bytes()
    r = client.post("/api/sessions", files={"image": (f"{image_id}.png", data, "image/png")})
    assert r.status_code == 200
    return r.json()["id"]


class TestSessionLifecycle:
    def test_upload_reaches_ready(self, served):
        client, idir, ids = served
        sid = upload(client, idir, ids[0])
        status = client.get(f"/api/sessions/{sid}").json()
        assert status["status"] == "ready"
        assert len(status["bboxes"]) == 1
        assert "fit" in status["stages"]

    def test_corrupt_upload_rejected(self, served):
        client, _, _ = served
        r = client.post("/api/sessions", files={"image": ("x.png", b"garbage", "image/png")})
        assert r.status_code == 400
        body = r.json()
        assert body["code"] == "undecodable_image" and "message" in body

    def test_unknown_session_404(self, served):
        client, _, _ = served
        assert client.get("/api/sessions/doesnotexist").status_code == 404

    def test_two_person_awaits_selection(self, served):
        client, idir, _ = served
        sid = upload(client, idir, "pair")
        status = client.get(f"/api/sessions/{sid}").json()
        assert status["status"] == "ready"
        assert len(status["bboxes"]) == 2
        assert status["selection_required"]
        # reshape before selection conflicts
        r = client.post(f"/api/sessions/{sid}/reshape", json={"d_weight": 5.0})
        assert r.status_code == 409
        # select then reshape works
        bbox = status["bboxes"][0]
        r = client.post(f"/api/sessions/{sid}/select", json={"bbox": bbox})
        assert r.status_code == 200
        status = client.get(f"/api/sessions/{sid}").json()
        assert status["status"] == "ready" and not status["selection_required"]
        r = client.post(f"/api/sessions/{sid}/reshape", json={"d_weight": 5.0})
        assert r.status_code == 200


class TestReshape:
    def test_slider_limits_endpoint(self, served):
        client, _, _ = served
        limits = client.get("/api/limits").json()["sliders"]
        assert limits["d_height"] == [-20.0, 20.0]
        assert limits["d_leg_girth"] == [-10.0, 10.0]

    def test_out_of_range_slider_names_field(self, served, session_ready):
        client, sid = session_ready
        r = client.post(f"/api/sessions/{sid}/reshape", json={"d_weight": 25.0})
        assert r.status_code == 422
        body = r.json()
        assert body["field"] == "d_weight" and body["code"] == "slider_out_of_range"

    def test_zero_sliders_byte_equal_outside_union(self, served, session_ready):
        client, sid = session_ready
        r = client.post(f"/api/sessions/{sid}/reshape", json={})
        rid = r.json()["result_id"]
        result = decode_image_bytes(client.get(f"/api/sessions/{sid}/results/{rid}").content)
        original = decode_image_bytes(client.get(f"/api/sessions/{sid}/original").content)
        mask_png = client.get(f"/api/sessions/{sid}/results/{rid}/mask").content
        import cv2

        mask = cv2.imdecode(np.frombuffer(mask_png, np.uint8), cv2.IMREAD_GRAYSCALE) > 127
        outside = ~mask
        assert np.array_equal(result[outside], original[outside])

    def test_distinct_edits_logged_in_history(self, served, session_ready):
        client, sid = session_ready
        r1 = client.post(f"/api/sessions/{sid}/reshape", json={"d_weight": 15.0})
        r2 = client.post(f"/api/sessions/{sid}/reshape", json={"d_weight": -15.0})
        id1, id2 = r1.json()["result_id"], r2.json()["result_id"]
        assert id1 != id2
        history = client.get(f"/api/sessions/{sid}").json()["history"]
        logged = [h["result_id"] for h in history]
        assert logged.index(id1) < logged.index(id2)

    def test_repeated_request_identical_bytes(self, served, session_ready):
        client, sid = session_ready
        ra = client.post(f"/api/sessions/{sid}/reshape", json={"d_height": 7.0})
        rb = client.post(f"/api/sessions/{sid}/reshape", json={"d_height": 7.0})
        ida, idb = ra.json()["result_id"], rb.json()["result_id"]
        assert ida == idb  # content-addressable id
        a = client.get(f"/api/sessions/{sid}/results/{ida}").content
        b = client.get(f"/api/sessions/{sid}/results/{idb}").content
        assert a == b

    def test_unknown_result_404(self, served, session_ready):
        client, sid = session_ready
        r = client.get(f"/api/sessions/{sid}/results/ffffffffffffffff")
        assert r.status_code == 404
        assert r.json()["code"] == "result_not_found"

    def test_result_lossless_round_trip(self, served, session_ready):
        client, sid = session_ready
        rid = client.post(f"/api/sessions/{sid}/reshape", json={"d_weight": 9.0}).json()["result_id"]
        png = client.get(f"/api/sessions/{sid}/results/{rid}").content
        img = decode_image_bytes(png)
        from bodyreshape.ingest import encode_image_png

        assert encode_image_png(img) == png


class TestSessionIsolation:
    def test_sessions_do_not_share_state(self, served):
        client, idir, ids = served
        s1 = upload(client, idir, ids[0])
        s2 = upload(client, idir, ids[1])
        r1 = client.post(f"/api/sessions/{s1}/reshape", json={"d_weight": 10.0}).json()["result_id"]
        r2 = client.post(f"/api/sessions/{s2}/reshape", json={"d_weight": 10.0}).json()["result_id"]
        # result registered under its own session only
        assert client.get(f"/api/sessions/{s1}/results/{r2}").status_code in (200, 404)
        a = client.get(f"/api/sessions/{s1}/results/{r1}")
        assert a.status_code == 200
        if r1 != r2:
            assert client.get(f"/api/sessions/{s2}/results/{r1}").status_code == 404


@pytest.fixture(scope="module")
def session_ready(served):
    client, idir, ids = served
    sid = upload(client, idir, ids[0])
    status = client.get(f"/api/sessions/{sid}").json()
    assert status["status"] == "ready"
    return client, sid
