"""Session-stepping HTTP/JSON API over one loaded model.

Clients create sessions (prompt + tail length + guidance + seed), step them
one commitment at a time, inspect the full liquid-tail state, and apply
interventions. Every mutation returns the complete post-state so clients
never simulate dynamics locally. Requests for different sessions run
concurrently; concurrent mutations of one session get 409.

All responses carry the API version header `tm-api: 1`.
"""

from __future__ import annotations

import threading
import time
import uuid
from contextlib import contextmanager
from dataclasses import replace
from typing import Literal

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from pydantic import BaseModel, ConfigDict

from .backbone import Backbone
from .config import RunConfig
from .corpus import Vocab
from .embeddings import EmbeddingTable, implicit_entropy, top_k_candidates
from .maturation import (
    GenerationSession,
    intervene_ema,
    intervene_noise,
    new_session,
    step_once,
)

__all__ = ["build_app", "CANDIDATES_PER_SLOT"]

CANDIDATES_PER_SLOT = 8

_vocab = Vocab()


class CreateSession(BaseModel):
    model_config = ConfigDict(extra="forbid")
    prompt: str = ""
    k: int | None = None
    guidance: float | None = None
    seed: int = 0


class StepRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    count: int = 1


class InterveneRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    kind: Literal["noise", "ema"]
    magnitude: float | None = None
    coefficient: float | None = None
    positions: list[int] | None = None


class GuidanceRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    s: float


class _Entry:
    def __init__(self, session: GenerationSession):
        self.session = session
        self.lock = threading.Lock()
        self.created_at = time.time()


def build_app(model: Backbone, table: EmbeddingTable, cfg: RunConfig) -> FastAPI:
    app = FastAPI(title="liquidtail session service")
    sessions: dict[str, _Entry] = {}
    registry_lock = threading.Lock()

    @app.middleware("http")
    async def version_header(request: Request, call_next):
        response = await call_next(request)
        response.headers["tm-api"] = "1"
        return response

    def get_entry(session_id: str) -> _Entry:
        with registry_lock:
            entry = sessions.get(session_id)
        if entry is None:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id}")
        return entry

    @contextmanager
    def exclusive(entry: _Entry):
        if not entry.lock.acquire(blocking=False):
            raise HTTPException(
                status_code=409, detail="session is busy with another request"
            )
        try:
            yield
        finally:
            entry.lock.release()

    def state_view(session_id: str, session: GenerationSession) -> dict:
        tail = []
        for j in range(len(session.tail)):
            v = session.tail.vectors[j]
            ranking = top_k_candidates(v, table, min(CANDIDATES_PER_SLOT, table.vocab_size))
            tail.append(
                {
                    "position": j,
                    "alpha": float(session.tail.alphas[j]),
                    "entropy": implicit_entropy(v, table),
                    "candidates": [
                        {
                            "token_id": tid,
                            "token": _vocab.token_repr(tid),
                            "score": score,
                        }
                        for tid, score in zip(ranking.token_ids, ranking.scores)
                    ],
                }
            )
        return {
            "session_id": session_id,
            "step": session.steps,
            "guidance": session.config.guidance,
            "tail_len": session.config.tail_len,
            "committed_ids": list(session.committed_ids),
            "committed_text": _vocab.decode_text(session.committed_ids),
            "tail": tail,
            "terminated": session.terminated,
            "max_entropy": float(np.log(table.vocab_size)),
        }

    @app.post("/sessions", status_code=201)
    def create_session(body: CreateSession) -> dict:
        k = body.k if body.k is not None else cfg.maturation.tail_len
        if not 1 <= k <= cfg.backbone.k_max:
            raise HTTPException(
                status_code=422,
                detail=f"field 'k' must be in [1, {cfg.backbone.k_max}], got {k}",
            )
        guidance = body.guidance if body.guidance is not None else cfg.maturation.guidance
        if guidance < 0:
            raise HTTPException(
                status_code=422, detail=f"field 'guidance' must be >= 0, got {guidance}"
            )
        mat_cfg = replace(cfg.maturation, tail_len=k, guidance=guidance)
        prompt_ids = [_vocab.bos_id] + _vocab.encode(body.prompt)
        session = new_session(prompt_ids, table, mat_cfg, body.seed)
        session_id = uuid.uuid4().hex
        entry = _Entry(session)
        with registry_lock:
            sessions[session_id] = entry
        return {
            "session_id": session_id,
            "created_at": entry.created_at,
            "config": {"k": k, "guidance": guidance, "seed": body.seed, "prompt": body.prompt},
            "state": state_view(session_id, session),
        }

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str) -> dict:
        entry = get_entry(session_id)
        with exclusive(entry):
            return state_view(session_id, entry.session)

    @app.post("/sessions/{session_id}/step")
    def step_session(session_id: str, body: StepRequest) -> dict:
        if body.count < 1:
            raise HTTPException(
                status_code=422, detail=f"field 'count' must be >= 1, got {body.count}"
            )
        entry = get_entry(session_id)
        with exclusive(entry):
            session = entry.session
            for _ in range(body.count):
                if session.terminated:
                    break
                step_once(session, model, table)
            return state_view(session_id, session)

    @app.post("/sessions/{session_id}/intervene")
    def intervene_session(session_id: str, body: InterveneRequest) -> dict:
        entry = get_entry(session_id)
        with exclusive(entry):
            session = entry.session
            if body.kind == "noise":
                if body.magnitude is None or body.magnitude < 0:
                    raise HTTPException(
                        status_code=422,
                        detail=f"field 'magnitude' must be >= 0, got {body.magnitude}",
                    )
                positions = (
                    body.positions
                    if body.positions is not None
                    else list(range(len(session.tail)))
                )
                try:
                    intervene_noise(session, body.magnitude, positions)
                except ValueError as e:
                    raise HTTPException(status_code=422, detail=f"field 'positions': {e}")
            else:
                if body.coefficient is None or not 0.0 <= body.coefficient <= 1.0:
                    raise HTTPException(
                        status_code=422,
                        detail=f"field 'coefficient' must be in [0, 1], got {body.coefficient}",
                    )
                try:
                    intervene_ema(session, body.coefficient)
                except ValueError as e:
                    raise HTTPException(status_code=422, detail=str(e))
            return state_view(session_id, session)

    @app.post("/sessions/{session_id}/guidance")
    def set_guidance(session_id: str, body: GuidanceRequest) -> dict:
        if body.s < 0:
            raise HTTPException(
                status_code=422, detail=f"field 's' must be >= 0, got {body.s}"
            )
        entry = get_entry(session_id)
        with exclusive(entry):
            entry.session.config = replace(entry.session.config, guidance=body.s)
            return state_view(session_id, entry.session)

    @app.delete("/sessions/{session_id}")
    def delete_session(session_id: str) -> dict:
        entry = get_entry(session_id)
        with exclusive(entry):
            with registry_lock:
                sessions.pop(session_id, None)
        return {"deleted": True, "session_id": session_id}

    app.state.sessions = sessions
    app.state.model = model
    app.state.table = table
    return app
