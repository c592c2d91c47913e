"""HTTP session server: live interactive-refinement sessions over JSON,
with binary slice payloads for the viewer.

Endpoints (all JSON unless noted):

    POST   /sessions                       {volume, checkpoint, label?}
    GET    /sessions/{id}
    POST   /sessions/{id}/hints            {points: [[z,y,x], ...]}
    POST   /sessions/{id}/step
    GET    /sessions/{id}/slice?plane=&index=&layer=   (binary, see below)
    GET    /sessions/{id}/suggestions
    GET    /sessions/{id}/metrics
    DELETE /sessions/{id}

Slice payloads are raw little-endian grids prefixed with an 8-byte header
(uint32 rows, uint32 cols); the dtype ("f32" or "i32") is in the X-Dtype
response header. One step runs at a time per session: concurrent step or
hint submissions receive 409.
"""
from __future__ import annotations

import math
import threading
import uuid
from dataclasses import dataclass

import numpy as np
from fastapi import FastAPI, HTTPException, Response
from pydantic import BaseModel

from .session import InteractiveSession


class CreateSessionRequest(BaseModel):
    volume: str
    checkpoint: str
    label: str | None = None


class HintsRequest(BaseModel):
    points: list[list[int]]


@dataclass
class _Entry:
    session: InteractiveSession
    lock: threading.Lock


def _clean(value):
    if isinstance(value, float) and math.isnan(value):
        return None
    return value


def _report_dict(report) -> dict:
    d = report.to_dict()
    return {k: _clean(v) for k, v in d.items()}


def create_app(static_dir: str | None = None) -> FastAPI:
    app = FastAPI(title="ivseg session server")
    sessions: dict[str, _Entry] = {}
    registry_lock = threading.Lock()
    app.state.sessions = sessions

    def get_entry(session_id: str) -> _Entry:
        entry = sessions.get(session_id)
        if entry is None:
            raise HTTPException(404, f"no session {session_id}")
        return entry

    @app.post("/sessions", status_code=201)
    def create_session(req: CreateSessionRequest):
        try:
            session = InteractiveSession.open(req.checkpoint, req.volume, req.label)
        except FileNotFoundError as e:
            raise HTTPException(404, str(e))
        except ValueError as e:
            raise HTTPException(400, str(e))
        session_id = uuid.uuid4().hex
        with registry_lock:
            sessions[session_id] = _Entry(session=session, lock=threading.Lock())
        return {"id": session_id, "shape": list(session.shape), "step": 0}

    @app.get("/sessions/{session_id}")
    def get_state(session_id: str):
        entry = get_entry(session_id)
        s = entry.session
        return {
            "id": session_id,
            "shape": list(s.shape),
            "step": s.step_count,
            "busy": entry.lock.locked(),
            "hint_count": s.hint_count,
            "pending_hints": len(s.pending_hints),
            "has_label": s.label is not None,
            "history": [_report_dict(r) for r in s.history],
        }

    @app.post("/sessions/{session_id}/hints")
    def submit_hints(session_id: str, req: HintsRequest):
        entry = get_entry(session_id)
        if not entry.lock.acquire(blocking=False):
            raise HTTPException(409, "session is busy")
        try:
            for p in req.points:
                if len(p) != 3:
                    raise HTTPException(400, f"point {p} must be [z, y, x]")
            try:
                accepted = entry.session.add_hints([tuple(p) for p in req.points])
            except ValueError as e:
                raise HTTPException(400, str(e))
            return {
                "accepted": accepted,
                "pending": len(entry.session.pending_hints),
                "hint_count": entry.session.hint_count,
            }
        finally:
            entry.lock.release()

    @app.post("/sessions/{session_id}/step")
    def step(session_id: str):
        entry = get_entry(session_id)
        if not entry.lock.acquire(blocking=False):
            raise HTTPException(409, "a step is already running")
        try:
            report = entry.session.step()
            return {
                "report": _report_dict(report),
                "step": entry.session.step_count,
                "suggestions": entry.session.suggestions,
            }
        finally:
            entry.lock.release()

    @app.get("/sessions/{session_id}/slice")
    def get_slice(session_id: str, plane: str, index: int, layer: str = "image"):
        entry = get_entry(session_id)
        try:
            grid = entry.session.get_slice(plane, index, layer)
        except ValueError as e:
            raise HTTPException(400, str(e))
        dtype = "i32" if grid.dtype == np.int32 else "f32"
        header = np.array(grid.shape, dtype="<u4").tobytes()
        payload = grid.astype("<i4" if dtype == "i32" else "<f4").tobytes()
        return Response(
            content=header + payload,
            media_type="application/octet-stream",
            headers={"X-Dtype": dtype, "X-Shape": f"{grid.shape[0]},{grid.shape[1]}"},
        )

    @app.get("/sessions/{session_id}/suggestions")
    def get_suggestions(session_id: str):
        return {"suggestions": get_entry(session_id).session.suggestions}

    @app.get("/sessions/{session_id}/metrics")
    def get_metrics(session_id: str):
        s = get_entry(session_id).session
        return {"history": [_report_dict(r) for r in s.history]}

    @app.delete("/sessions/{session_id}", status_code=204)
    def delete_session(session_id: str):
        get_entry(session_id)
        with registry_lock:
            sessions.pop(session_id, None)
        return Response(status_code=204)

    if static_dir:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=static_dir, html=True), name="ui")
    return app
