"""HTTP enrolment/verification service backed by a trained checkpoint.

Endpoints (JSON bodies, UTF-8):

    POST   /api/v1/enroll      {user_id, events: [{key_code, press_ms, release_ms}]}
    POST   /api/v1/verify      same body -> {distance, threshold, accepted, model_checksum}
    GET    /api/v1/users       [{user_id, sessions_enrolled}]
    DELETE /api/v1/users/{id}  204
    GET    /api/v1/health      {model_checksum, uptime_s}

A verification compares the probe embedding against the mean distance to all
enrolled embeddings of the claimed user and accepts iff distance <= threshold.
The threshold is per-user when calibrated, otherwise the global threshold
shipped in the checkpoint metadata (or an explicit service default).
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse, Response
from pydantic import BaseModel, Field

from . import evaluation
from .data import RawKeystrokeEvent, Session, extract_features
from .errors import KeyformerError
from .model import ModelWeights, distance, forward_embed
from .store import MAX_ENROLMENTS, TemplateStore
from .training import load_checkpoint

DEFAULT_THRESHOLD = 1.0  # permissive fallback when nothing is calibrated


@dataclass
class ServiceConfig:
    model_path: str
    store_path: str
    bind: str = "127.0.0.1:8000"
    threshold: Optional[float] = None      # overrides checkpoint global threshold
    cors_origins: List[str] = None

    @classmethod
    def load(cls, path=None, **overrides) -> "ServiceConfig":
        doc = {}
        if path is not None:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        doc.update({k: v for k, v in overrides.items() if v is not None})
        doc.setdefault("model_path", None)
        doc.setdefault("store_path", None)
        env = {"model_path": os.environ.get("KEYFORMER_MODEL"),
               "store_path": os.environ.get("KEYFORMER_STORE"),
               "bind": os.environ.get("KEYFORMER_BIND")}
        for k, v in env.items():
            if v:
                doc[k] = v
        if not doc.get("model_path") or not doc.get("store_path"):
            raise KeyformerError("service config requires model_path and store_path")
        known = {"model_path", "store_path", "bind", "threshold", "cors_origins"}
        return cls(**{k: v for k, v in doc.items() if k in known})


class EventIn(BaseModel):
    key_code: int = Field(ge=0, le=255)
    press_ms: float = Field(ge=0)
    release_ms: float = Field(ge=0)


class SessionIn(BaseModel):
    user_id: str = Field(min_length=1)
    events: List[EventIn]


def _embed_events(weights: ModelWeights, user_id: str, events: List[EventIn]) -> np.ndarray:
    evs = [RawKeystrokeEvent(e.key_code, e.press_ms, e.release_ms) for e in events]
    evs.sort(key=lambda e: e.press_time)
    session = Session(subject_id=user_id, session_id="live", events=evs)
    fs = extract_features(session, length=weights.config.L)
    return forward_embed(weights, fs)


def create_app(config: ServiceConfig) -> FastAPI:
    checkpoint = load_checkpoint(config.model_path)
    weights = checkpoint.weights
    weights.check_finite()
    store = TemplateStore(config.store_path)
    model_checksum = weights.checksum()
    default_threshold = (config.threshold if config.threshold is not None
                         else checkpoint.global_threshold
                         if checkpoint.global_threshold is not None
                         else DEFAULT_THRESHOLD)
    started = time.monotonic()

    app = FastAPI(title="keystroke verification service")
    app.state.store = store
    app.state.weights = weights
    app.state.default_threshold = default_threshold
    if config.cors_origins:
        app.add_middleware(CORSMiddleware, allow_origins=list(config.cors_origins),
                           allow_methods=["*"], allow_headers=["*"])

    @app.exception_handler(RequestValidationError)
    async def malformed_body(_req: Request, exc: RequestValidationError):
        fields = [{"loc": ".".join(str(p) for p in e["loc"]), "msg": e["msg"]}
                  for e in exc.errors()]
        return JSONResponse(status_code=400,
                            content={"error": "malformed request body", "fields": fields})

    def _reject_short(body: SessionIn):
        if len(body.events) < 2:
            return JSONResponse(
                status_code=422,
                content={"error": "at least 2 events are required to compute "
                                  "inter-key timing features"})
        for i, e in enumerate(body.events):
            if e.release_ms < e.press_ms:
                return JSONResponse(
                    status_code=400,
                    content={"error": "malformed request body",
                             "fields": [{"loc": f"events.{i}.release_ms",
                                         "msg": "release_ms precedes press_ms"}]})
        return None

    @app.post("/api/v1/enroll")
    def enroll(body: SessionIn):
        bad = _reject_short(body)
        if bad is not None:
            return bad
        emb = _embed_events(weights, body.user_id, body.events)
        rec = store.enroll(body.user_id, emb)
        return {"user_id": rec.user_id, "sessions_enrolled": rec.sessions_enrolled}

    @app.post("/api/v1/verify")
    def verify(body: SessionIn):
        bad = _reject_short(body)
        if bad is not None:
            return bad
        rec = store.get(body.user_id)
        if rec is None:
            return JSONResponse(status_code=404,
                                content={"error": f"unknown user {body.user_id!r}"})
        emb = _embed_events(weights, body.user_id, body.events)
        dist = float(np.mean([distance(emb, e) for e in rec.embeddings]))
        threshold = rec.threshold if rec.threshold is not None else default_threshold
        return {"distance": dist, "threshold": threshold,
                "accepted": bool(dist <= threshold), "model_checksum": model_checksum}

    @app.get("/api/v1/users")
    def users():
        return [{"user_id": r.user_id, "sessions_enrolled": r.sessions_enrolled}
                for r in store.users()]

    @app.delete("/api/v1/users/{user_id}")
    def delete_user(user_id: str):
        if not store.delete(user_id):
            return JSONResponse(status_code=404,
                                content={"error": f"unknown user {user_id!r}"})
        return Response(status_code=204)

    @app.get("/api/v1/health")
    def health():
        return {"model_checksum": model_checksum,
                "uptime_s": time.monotonic() - started}

    return app


def set_threshold(store: TemplateStore, user_id: str,
                  fixed: Optional[float] = None,
                  scores_path=None,
                  default: Optional[float] = None) -> float:
    """Set a user's decision threshold.

    Priority: explicit fixed value; else calibrate at the user's EER point
    from a scores file (genuine + impostor rows for that user); else fall
    back to the supplied default (normally the checkpoint global threshold).
    """
    if fixed is not None:
        store.set_threshold(user_id, fixed)
        return float(fixed)
    if scores_path is not None:
        table = evaluation.read_scores(scores_path)
        if user_id not in table or not table[user_id]["genuine"] or \
                not table[user_id]["impostor"]:
            raise KeyformerError(
                f"scores file has no genuine+impostor rows for user {user_id!r}")
        r = evaluation.compute_eer(table[user_id]["genuine"], table[user_id]["impostor"])
        store.set_threshold(user_id, r.threshold)
        return r.threshold
    if default is None:
        raise KeyformerError("no calibration data and no default threshold")
    store.set_threshold(user_id, default)
    return float(default)


def serve(config: ServiceConfig) -> None:
    """Run the service under uvicorn (blocking)."""
    import uvicorn

    host, _, port = config.bind.partition(":")
    app = create_app(config)
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port or 8000), log_level="info")
