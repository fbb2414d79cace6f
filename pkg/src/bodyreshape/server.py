"""HTTP service wrapping the pipeline into interactive editing sessions.

Upload an image, poll preprocessing status, optionally pick a person by
bounding box, then drive the four semantic sliders; results are cached by
content hash so identical requests return identical bytes.  Slider edits are
absolute (relative to the original fit), matching slider UI semantics.
"""

from __future__ import annotations

import hashlib
import threading
import time
import uuid
from dataclasses import dataclass, field as dc_field

import numpy as np
from fastapi import FastAPI, Request, UploadFile
from fastapi.responses import JSONResponse, Response

from .body_model import SemanticSliders
from .errors import BodyReshapeError, InvalidInputError
from .ingest import decode_image_bytes, encode_image_png
from .pipeline import ReshapePipeline

DEFAULT_MAX_UPLOAD = 16 * 1024 * 1024
SESSION_TTL_S = 3600.0


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str, field: str | None = None):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message
        self.field = field

    def payload(self) -> dict:
        body = {"code": self.code, "message": self.message}
        if self.field:
            body["field"] = self.field
        return body


@dataclass
class Session:
    id: str
    image: np.ndarray
    image_key: str = ""  # adapter lookup key (source filename stem)
    status: str = "preprocessing"  # preprocessing | fitting | ready | failed
    error: str | None = None
    candidates: list[tuple[int, int, int, int]] = dc_field(default_factory=list)
    selected: int | None = None
    record: object | None = None
    cache: dict | None = None
    stages: dict = dc_field(default_factory=dict)
    history: list[dict] = dc_field(default_factory=list)
    results: dict[str, bytes] = dc_field(default_factory=dict)
    result_masks: dict[str, bytes] = dc_field(default_factory=dict)
    created_at: float = dc_field(default_factory=time.time)
    lock: threading.RLock = dc_field(default_factory=threading.RLock)


class SessionStore:
    def __init__(self, ttl_s: float = SESSION_TTL_S):
        self._sessions: dict[str, Session] = {}
        self._lock = threading.Lock()
        self.ttl_s = ttl_s

    def create(self, image: np.ndarray, image_key: str | None = None) -> Session:
        session = Session(id=uuid.uuid4().hex[:16], image=image)
        session.image_key = image_key or session.id
        with self._lock:
            self._evict()
            self._sessions[session.id] = session
        return session

    def get(self, session_id: str) -> Session:
        with self._lock:
            session = self._sessions.get(session_id)
        if session is None:
            raise ApiError(404, "session_not_found", f"unknown session {session_id}")
        return session

    def _evict(self) -> None:
        now = time.time()
        stale = [k for k, s in self._sessions.items() if now - s.created_at > self.ttl_s]
        for k in stale:
            del self._sessions[k]


class SessionService:
    """Pipeline + store + the threading rules (per-session serialization,
    one generator at a time)."""

    def __init__(self, pipeline: ReshapePipeline, store: SessionStore | None = None):
        self.pipeline = pipeline
        self.store = store or SessionStore()
        self._inference_lock = threading.Lock()

    # -- session lifecycle ----------------------------------------------------

    def create_session(self, image_bytes: bytes, background: bool = True, image_key: str | None = None) -> Session:
        if len(image_bytes) > DEFAULT_MAX_UPLOAD:
            raise ApiError(413, "upload_too_large", "image exceeds the size limit")
        try:
            image = decode_image_bytes(image_bytes)
        except InvalidInputError as exc:
            raise ApiError(400, "undecodable_image", str(exc))
        session = self.store.create(image, image_key=image_key)
        if background:
            threading.Thread(target=self._preprocess, args=(session, None), daemon=True).start()
        else:
            self._preprocess(session, None)
        return session

    def _preprocess(self, session: Session, bbox) -> None:
        try:
            t0 = time.time()
            masks, _ = self.pipeline.detect_people(session.image, session.image_key)
            with session.lock:
                session.stages["detect"] = time.time() - t0
                session.candidates = [m.bbox for m in masks]
            if not masks:
                with session.lock:
                    session.status = "failed"
                    session.error = "no person"
                return
            if len(masks) > 1 and bbox is None:
                # multiple candidates: ready for selection, fit deferred
                with session.lock:
                    session.status = "ready"
                return
            self._fit(session, bbox)
        except BodyReshapeError as exc:
            with session.lock:
                session.status = "failed"
                session.error = str(exc)

    def _fit(self, session: Session, bbox) -> None:
        with session.lock:
            session.status = "fitting"
        outcome = self.pipeline.preprocess(session.image, session.image_key, selected_bbox=bbox)
        with self._inference_lock:
            cache = self.pipeline.encode_foreground_cache(outcome.record)
        with session.lock:
            session.record = outcome.record
            session.cache = cache
            session.stages.update(outcome.stage_seconds)
            session.status = "ready"

    def select_person(self, session_id: str, bbox: tuple[int, int, int, int], background: bool = True) -> None:
        session = self.store.get(session_id)
        with session.lock:
            if session.status not in ("ready", "failed"):
                raise ApiError(409, "not_ready", f"session is {session.status}")
            session.record = None
            session.cache = None
        if background:
            threading.Thread(target=self._safe_fit, args=(session, bbox), daemon=True).start()
        else:
            self._safe_fit(session, bbox)

    def _safe_fit(self, session: Session, bbox) -> None:
        try:
            self._fit(session, bbox)
        except BodyReshapeError as exc:
            with session.lock:
                session.status = "failed"
                session.error = str(exc)

    # -- editing ----------------------------------------------------------------

    def reshape(self, session_id: str, slider_values: dict) -> str:
        session = self.store.get(session_id)
        sliders = _validate_sliders(slider_values)
        # the session lock is held end to end: requests on one session are
        # serialized in arrival order and history order matches processing order
        with session.lock:
            if session.status != "ready":
                raise ApiError(409, "not_ready", f"session is {session.status}")
            if session.record is None:
                raise ApiError(409, "selection_required", "multiple people detected; select one first")
            with self._inference_lock:
                outcome = self.pipeline.reshape(session.record, sliders, session.cache)
            png = encode_image_png(outcome.image)
            result_id = hashlib.sha256(png).hexdigest()[:16]
            session.results[result_id] = png
            session.result_masks[result_id] = _encode_mask_png(outcome.union.a)
            session.history.append({"sliders": sliders.as_dict(), "result_id": result_id})
        return result_id

    def get_result(self, session_id: str, result_id: str) -> bytes:
        session = self.store.get(session_id)
        with session.lock:
            data = session.results.get(result_id)
        if data is None:
            raise ApiError(404, "result_not_found", f"unknown result {result_id}")
        return data

    def get_result_mask(self, session_id: str, result_id: str) -> bytes:
        session = self.store.get(session_id)
        with session.lock:
            data = session.result_masks.get(result_id)
        if data is None:
            raise ApiError(404, "result_not_found", f"unknown result {result_id}")
        return data

    def status_payload(self, session_id: str) -> dict:
        session = self.store.get(session_id)
        with session.lock:
            payload = {
                "id": session.id,
                "status": session.status,
                "bboxes": [list(b) for b in session.candidates],
                "stages": dict(session.stages),
                "history": list(session.history),
                "selection_required": session.status == "ready" and session.record is None,
            }
            if session.error:
                payload["error"] = session.error
        return payload

    def original_png(self, session_id: str) -> bytes:
        session = self.store.get(session_id)
        with session.lock:
            if session.record is None:
                raise ApiError(409, "not_ready", "no fitted record yet")
            return encode_image_png(session.record.image)


def _validate_sliders(values: dict) -> SemanticSliders:
    clean: dict[str, float] = {}
    for name in SemanticSliders.RANGES:
        raw = values.get(name, 0.0)
        try:
            clean[name] = float(raw)
        except (TypeError, ValueError):
            raise ApiError(422, "invalid_slider", f"{name} is not a number", field=name)
    for name, (lo, hi) in SemanticSliders.RANGES.items():
        if not (lo <= clean[name] <= hi):
            raise ApiError(422, "slider_out_of_range", f"{name}={clean[name]} outside [{lo}, {hi}]", field=name)
    return SemanticSliders(**clean)


def _encode_mask_png(mask: np.ndarray) -> bytes:
    import cv2

    ok, buf = cv2.imencode(".png", (np.asarray(mask) > 0).astype(np.uint8) * 255)
    if not ok:
        raise ApiError(500, "encode_failed", "mask encoding failed")
    return buf.tobytes()


# ---------------------------------------------------------------------------
# FastAPI wiring
# ---------------------------------------------------------------------------


def create_app(service: SessionService, synchronous: bool = False) -> FastAPI:
    """Build the HTTP app.  ``synchronous`` makes preprocessing block the
    request (useful for tests and the CLI mirror)."""
    app = FastAPI(title="bodyreshape", version="0.1.0")

    @app.exception_handler(ApiError)
    async def _api_error(_request: Request, exc: ApiError):
        return JSONResponse(status_code=exc.status, content=exc.payload())

    @app.exception_handler(BodyReshapeError)
    async def _domain_error(_request: Request, exc: BodyReshapeError):
        return JSONResponse(status_code=422, content={"code": "invalid_input", "message": str(exc)})

    @app.get("/api/limits")
    def limits():
        return {"sliders": {k: list(v) for k, v in SemanticSliders.RANGES.items()}}

    @app.post("/api/sessions")
    async def create_session(image: UploadFile):
        data = await image.read()
        stem = (image.filename or "").rsplit("/", 1)[-1].rsplit(".", 1)[0] or None
        session = service.create_session(data, background=not synchronous, image_key=stem)
        return {"id": session.id}

    @app.get("/api/sessions/{session_id}")
    def session_status(session_id: str):
        return service.status_payload(session_id)

    @app.post("/api/sessions/{session_id}/select")
    async def select_person(session_id: str, body: dict):
        bbox = body.get("bbox")
        if not isinstance(bbox, (list, tuple)) or len(bbox) != 4:
            raise ApiError(422, "invalid_bbox", "bbox must be [x, y, width, height]", field="bbox")
        service.select_person(session_id, tuple(int(v) for v in bbox), background=not synchronous)
        return {"status": "fitting"}

    @app.post("/api/sessions/{session_id}/reshape")
    def reshape(session_id: str, body: dict):
        result_id = service.reshape(session_id, body)
        return {"result_id": result_id}

    @app.get("/api/sessions/{session_id}/results/{result_id}")
    def get_result(session_id: str, result_id: str):
        return Response(content=service.get_result(session_id, result_id), media_type="image/png")

    @app.get("/api/sessions/{session_id}/results/{result_id}/mask")
    def get_result_mask(session_id: str, result_id: str):
        return Response(content=service.get_result_mask(session_id, result_id), media_type="image/png")

    @app.get("/api/sessions/{session_id}/original")
    def get_original(session_id: str):
        return Response(content=service.original_png(session_id), media_type="image/png")

    return app
