"""Session service: attack runs exposed to browsers and scripted clients.

One session wraps one stepwise attack engine.  The service persists every
session under its own directory (manifest, per-generation engine
snapshots, an append-only event log, and the final result), so a restart
resumes each session at its recorded state and a recorded session can be
replayed deterministically through a fresh engine.

HTTP surface (JSON bodies, images as base64 PNG):

    POST /sessions                   create, returns id + status
    GET  /sessions/{id}/generation   current selection request
    POST /sessions/{id}/selection    submit chosen indices (idempotent)
    GET  /sessions/{id}/result       final document, once finished
    GET  /healthz

``create_classifier_app`` additionally serves a classifier behind the
label-only wire protocol (POST /classify) so remote-classifier setups
can be exercised end to end.
"""

from __future__ import annotations

import io
import json
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.responses import JSONResponse

from percepta.attack import (
    AttackEngine,
    AttackProblem,
    BisectionConfig,
    ReferenceLabelError,
)
from percepta.bench import PRESET_PERCEPTION
from percepta.classifiers import (
    ClassifierSpec,
    LinearSpec,
    MlpSpec,
    RemoteSpec,
    RemoteTransportError,
    classify_batch,
    load_weights,
    spec_from_document,
)
from percepta.fitness import NormKind
from percepta.images import (
    black_square_png_base64,
    from_png_base64,
    to_png_base64,
    to_png_bytes,
)
from percepta.selection import SelectionRequest, SelectionResponse

AWAITING = "awaiting_selection"
COMPUTING = "computing"
FINISHED = "finished"
ABORTED = "aborted"


# -- wire documents ---------------------------------------------------------


def classifier_from_document(doc: dict) -> ClassifierSpec:
    kind = doc.get("kind")
    if kind == "linear":
        return LinearSpec(weight=np.asarray(doc["weight"]), bias=np.asarray(doc["bias"]))
    if kind == "mlp_file":
        return load_weights(doc["path"])
    if kind == "mlp_inline":
        return spec_from_document(doc["document"])
    if kind == "remote":
        return RemoteSpec(url=doc["url"], timeout_ms=int(doc.get("timeout_ms", 10_000)))
    raise ValueError(f"unknown classifier kind {kind!r}")


def classifier_to_document(spec: ClassifierSpec, source_doc: Optional[dict]) -> dict:
    if source_doc is not None:
        return source_doc
    if isinstance(spec, LinearSpec):
        return {"kind": "linear", "weight": spec.weight.tolist(), "bias": spec.bias.tolist()}
    if isinstance(spec, RemoteSpec):
        return {"kind": "remote", "url": spec.url, "timeout_ms": spec.timeout_ms}
    raise ValueError("network specs need their originating document or file path")


def problem_from_document(doc: dict) -> AttackProblem:
    try:
        reference = from_png_base64(doc["reference_png"])
        classifier = classifier_from_document(doc["classifier"])
        problem = AttackProblem(
            reference=reference,
            reference_label=int(doc["reference_label"]),
            classifier=classifier,
            target_label=doc.get("target_label"),
            parameterization=doc.get("parameterization", "per_pixel"),
            iterations=int(doc.get("iterations", PRESET_PERCEPTION["iterations"])),
            strategy_overrides=doc.get(
                "strategy_overrides",
                {
                    "population_size": PRESET_PERCEPTION["population_size"],
                    "parent_count": PRESET_PERCEPTION["parent_count"],
                },
            ),
            luminance_only=bool(doc.get("luminance_only", False)),
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed problem document: {exc}") from exc
    problem.validate()
    return problem


# -- persistence ------------------------------------------------------------


@dataclass
class SessionRecord:
    session_id: str
    engine: AttackEngine
    problem_doc: dict
    settings_doc: dict
    status: str
    created_at: float
    updated_at: float
    abort_reason: Optional[str] = None
    acks: dict = field(default_factory=dict)  # generation -> response document
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)


class SessionStore:
    """Directory-backed session registry with lazy crash recovery."""

    def __init__(self, root: Union[str, Path], timeout_seconds: float = 24 * 3600.0):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.timeout_seconds = timeout_seconds
        self._sessions: dict[str, SessionRecord] = {}
        self._registry_lock = threading.Lock()

    # paths
    def _dir(self, session_id: str) -> Path:
        return self.root / session_id

    def _manifest_path(self, session_id: str) -> Path:
        return self._dir(session_id) / "manifest.json"

    def _events_path(self, session_id: str) -> Path:
        return self._dir(session_id) / "events.ndjson"

    def _snapshot_paths(self, session_id: str, generation: int) -> tuple[Path, Path]:
        base = self._dir(session_id) / "snapshots"
        return base / f"gen_{generation:05d}.json", base / f"gen_{generation:05d}.npz"

    def _append_event(self, session_id: str, event: dict) -> None:
        event = {"ts": time.time(), **event}
        with open(self._events_path(session_id), "a") as f:
            f.write(json.dumps(event) + "\n")

    def _write_manifest(self, record: SessionRecord) -> None:
        doc = {
            "session_id": record.session_id,
            "problem": record.problem_doc,
            "settings": record.settings_doc,
            "status": record.status,
            "created_at": record.created_at,
            "updated_at": record.updated_at,
            "abort_reason": record.abort_reason,
            "acks": {str(k): v for k, v in record.acks.items()},
        }
        self._manifest_path(record.session_id).write_text(json.dumps(doc, indent=1))

    def _snapshot(self, record: SessionRecord) -> None:
        meta, arrays = record.engine.snapshot()
        meta_path, npz_path = self._snapshot_paths(
            record.session_id, record.engine.generation
        )
        meta_path.parent.mkdir(parents=True, exist_ok=True)
        meta_path.write_text(json.dumps(meta))
        buf = io.BytesIO()
        np.savez_compressed(buf, **arrays)
        npz_path.write_bytes(buf.getvalue())

    # lifecycle
    def create(self, body: dict) -> SessionRecord:
        problem_doc = body.get("problem")
        if not isinstance(problem_doc, dict):
            raise ValueError("request body must carry a problem document")
        problem = problem_from_document(problem_doc)
        settings_doc = {
            "seed": int(body.get("seed", 0)),
            "fitness": body.get("fitness", "L1"),
            "bisection": body.get("bisection"),
        }
        bisection = None
        if settings_doc["bisection"]:
            bisection = BisectionConfig(
                max_steps=int(settings_doc["bisection"].get("max_steps", 200)),
                min_interval=float(settings_doc["bisection"].get("min_interval", 1 / 255)),
            )
        session_id = uuid.uuid4().hex
        engine = AttackEngine(
            problem,
            bisection=bisection,
            rng_seed=settings_doc["seed"],
            fitness_kind=NormKind(settings_doc["fitness"]),
            session_id=session_id,
        )
        now = time.time()
        record = SessionRecord(
            session_id=session_id,
            engine=engine,
            problem_doc=problem_doc,
            settings_doc=settings_doc,
            status=COMPUTING,
            created_at=now,
            updated_at=now,
        )
        self._dir(session_id).mkdir(parents=True)
        with record.lock:
            self._append_event(session_id, {"type": "created", "seed": settings_doc["seed"]})
            self._advance_to_rest(record)
        with self._registry_lock:
            self._sessions[session_id] = record
        return record

    def _advance_to_rest(self, record: SessionRecord) -> None:
        """Run the engine until it needs a human or the session is over."""
        record.status = COMPUTING
        fallbacks_before = len(record.engine.fallback_generations)
        request = record.engine.awaiting_request()
        for generation in record.engine.fallback_generations[fallbacks_before:]:
            self._append_event(
                record.session_id,
                {"type": "metric_fallback", "generation": generation},
            )
        if request is not None:
            record.status = AWAITING
        else:
            result = record.engine.result()
            (self._dir(record.session_id) / "result.json").write_text(
                json.dumps(result.to_document())
            )
            (self._dir(record.session_id) / "adversarial.png").write_bytes(
                to_png_bytes(result.adversarial)
            )
            record.status = FINISHED
            self._append_event(record.session_id, {"type": "finished"})
        record.updated_at = time.time()
        self._snapshot(record)
        self._write_manifest(record)

    def get(self, session_id: str) -> SessionRecord:
        with self._registry_lock:
            record = self._sessions.get(session_id)
        if record is None:
            record = self._recover(session_id)
        self._enforce_timeout(record)
        return record

    def _enforce_timeout(self, record: SessionRecord) -> None:
        with record.lock:
            if record.status in (FINISHED, ABORTED):
                return
            if time.time() - record.updated_at > self.timeout_seconds:
                record.status = ABORTED
                record.abort_reason = "session timed out"
                self._append_event(record.session_id, {"type": "aborted", "reason": "timeout"})
                self._write_manifest(record)

    def _recover(self, session_id: str) -> SessionRecord:
        manifest_path = self._manifest_path(session_id)
        if not manifest_path.exists():
            raise KeyError(session_id)
        doc = json.loads(manifest_path.read_text())
        problem = problem_from_document(doc["problem"])
        snapshots = sorted((self._dir(session_id) / "snapshots").glob("gen_*.json"))
        if not snapshots:
            raise KeyError(session_id)
        meta = json.loads(snapshots[-1].read_text())
        arrays = dict(np.load(snapshots[-1].with_suffix(".npz"), allow_pickle=False))
        bisection = None
        if doc["settings"].get("bisection"):
            b = doc["settings"]["bisection"]
            bisection = BisectionConfig(
                max_steps=int(b.get("max_steps", 200)),
                min_interval=float(b.get("min_interval", 1 / 255)),
            )
        engine = AttackEngine.restore(
            problem, meta, arrays, bisection=bisection, session_id=session_id
        )
        record = SessionRecord(
            session_id=session_id,
            engine=engine,
            problem_doc=doc["problem"],
            settings_doc=doc["settings"],
            status=doc["status"],
            created_at=doc["created_at"],
            updated_at=doc["updated_at"],
            abort_reason=doc.get("abort_reason"),
            acks={int(k): v for k, v in doc.get("acks", {}).items()},
        )
        with self._registry_lock:
            self._sessions.setdefault(session_id, record)
        return self._sessions[session_id]

    # request/response documents
    def generation_document(self, record: SessionRecord) -> dict:
        with record.lock:
            if record.status != AWAITING:
                raise StatusConflict(record.status)
            request = record.engine.awaiting_request()
            assert request is not None
            return request_to_document(
                request, total_generations=record.engine.problem.iterations
            )

    def submit(self, record: SessionRecord, body: dict) -> dict:
        with record.lock:
            if record.status != AWAITING:
                raise StatusConflict(record.status)
            generation = int(body.get("generation", -1))
            expected = record.engine.generation + 1
            if generation in record.acks:
                return record.acks[generation]  # duplicate: first outcome stands
            if generation != expected:
                raise ValueError(
                    f"selection targets generation {generation}, expected {expected}"
                )
            chosen = [int(i) for i in body.get("chosen", [])]
            final_pick = body.get("final_pick")
            response = SelectionResponse(
                chosen=chosen,
                final_pick=None if final_pick is None else int(final_pick),
            )
            record.engine.submit(response, ranked=bool(body.get("ranked", False)))
            event = {
                "type": "selection",
                "generation": generation,
                "chosen": chosen,
                "final_pick": final_pick,
            }
            if body.get("display_order") is not None:
                # the UI shuffles tile positions per generation; keep the
                # permutation so recorded choices can be audited later
                event["display_order"] = [int(i) for i in body["display_order"]]
            self._append_event(record.session_id, event)
            self._advance_to_rest(record)
            next_generation = record.engine.generation
            if record.status == AWAITING:
                next_generation += 1  # the generation now waiting for a choice
            ack = {
                "session_id": record.session_id,
                "status": record.status,
                "generation": next_generation,
            }
            record.acks[generation] = ack
            self._write_manifest(record)
            return ack

    def result_document(self, record: SessionRecord) -> dict:
        with record.lock:
            if record.status == ABORTED:
                raise SessionAborted(record.abort_reason or "aborted")
            if record.status != FINISHED:
                raise StatusConflict(record.status)
            result = record.engine.result()
            doc = result.to_document()
            doc["session_id"] = record.session_id
            doc["reference_label"] = record.engine.problem.reference_label
            png = to_png_base64(result.adversarial)
            doc["adversarial_png"] = png
            # fresh check on the re-ingested artifact, not the in-memory array
            doc["png_label"] = classify_batch(
                record.engine.problem.classifier,
                [from_png_base64(png).ravel()],
                record.engine.ledger,
            )[0]
            return doc

    def replay(self, session_id: str) -> np.ndarray:
        """Re-run a finished session's log through a fresh engine."""
        manifest = json.loads(self._manifest_path(session_id).read_text())
        problem = problem_from_document(manifest["problem"])
        bisection = None
        if manifest["settings"].get("bisection"):
            b = manifest["settings"]["bisection"]
            bisection = BisectionConfig(
                max_steps=int(b.get("max_steps", 200)),
                min_interval=float(b.get("min_interval", 1 / 255)),
            )
        engine = AttackEngine(
            problem,
            bisection=bisection,
            rng_seed=manifest["settings"]["seed"],
            fitness_kind=NormKind(manifest["settings"].get("fitness", "L1")),
        )
        events = [
            json.loads(line)
            for line in self._events_path(session_id).read_text().splitlines()
        ]
        for event in events:
            if event["type"] != "selection":
                continue
            request = engine.awaiting_request()
            if request is None or request.generation != event["generation"]:
                raise RuntimeError(
                    f"log expects generation {event['generation']} but the engine "
                    f"is at {None if request is None else request.generation}"
                )
            engine.submit(
                SelectionResponse(
                    chosen=[int(i) for i in event["chosen"]],
                    final_pick=None
                    if event.get("final_pick") is None
                    else int(event["final_pick"]),
                ),
                ranked=False,
            )
        if engine.awaiting_request() is not None:
            raise RuntimeError("replay log ended before the session did")
        return engine.result().adversarial


class StatusConflict(RuntimeError):
    def __init__(self, status: str):
        super().__init__(status)
        self.status = status


class SessionAborted(RuntimeError):
    pass


def request_to_document(request: SelectionRequest, total_generations: int) -> dict:
    candidates = []
    for cand in request.candidates:
        candidates.append(
            {
                "index": cand.index,
                "selectable": cand.selectable,
                # same-class candidates are hidden behind a black square
                "png": to_png_base64(cand.image)
                if cand.selectable
                else black_square_png_base64(cand.image),
            }
        )
    return {
        "session_id": request.session_id,
        "generation": request.generation,
        "total_generations": total_generations,
        "k_required": request.k_required,
        "reference_png": to_png_base64(request.reference_image),
        "candidates": candidates,
    }


# -- HTTP apps --------------------------------------------------------------


def create_app(store: SessionStore) -> FastAPI:
    app = FastAPI(title="percepta session service")

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.post("/sessions")
    def create_session(body: dict):
        try:
            record = store.create(body)
        except ReferenceLabelError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        except RemoteTransportError as exc:
            raise HTTPException(status_code=502, detail=str(exc))
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return {"session_id": record.session_id, "status": record.status}

    def fetch(session_id: str) -> SessionRecord:
        try:
            return store.get(session_id)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id}")

    @app.get("/sessions/{session_id}/generation")
    def get_generation(session_id: str):
        record = fetch(session_id)
        try:
            return store.generation_document(record)
        except StatusConflict as exc:
            raise HTTPException(
                status_code=409, detail=f"session is {exc.status}, not awaiting a selection"
            )

    @app.post("/sessions/{session_id}/selection")
    def submit_selection(session_id: str, body: dict):
        record = fetch(session_id)
        try:
            return store.submit(record, body)
        except StatusConflict as exc:
            raise HTTPException(
                status_code=409, detail=f"session is {exc.status}, not awaiting a selection"
            )
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))

    @app.get("/sessions/{session_id}/result")
    def get_result(session_id: str):
        record = fetch(session_id)
        try:
            return store.result_document(record)
        except SessionAborted as exc:
            raise HTTPException(status_code=410, detail=f"session aborted: {exc}")
        except StatusConflict as exc:
            raise HTTPException(status_code=409, detail=f"session is {exc.status}, not finished")

    return app


def create_classifier_app(spec: ClassifierSpec) -> FastAPI:
    """Serve one classifier behind the label-only wire protocol."""
    app = FastAPI(title="percepta classifier")

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.post("/classify")
    def classify(body: dict):
        instances = body.get("instances")
        if not isinstance(instances, list) or not instances:
            return JSONResponse(
                status_code=400, content={"detail": "body must carry instances"}
            )
        try:
            labels = classify_batch(spec, [np.asarray(row, dtype=float) for row in instances])
        except ValueError as exc:
            return JSONResponse(status_code=400, content={"detail": str(exc)})
        return {"labels": labels}

    return app
