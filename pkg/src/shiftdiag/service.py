"""In-process HTTP API that the web console drives.

POST /api/datasets stores an uploaded CSV (with the analysis spec used to
read it) under an unguessable id and returns a column summary; POST
/api/decompose runs the exact code path of the command line on two stored
datasets and returns the canonical result document, byte-identical to the
CLI's output for the same inputs. Everything is in memory: uploads are
immutable, evicted after an idle timeout, and size-capped. Handlers are
synchronous; the numeric work runs on a small bounded pool with a hard
per-request timeout, which is plenty for desk-scale studies.
"""

import json
import secrets
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass, field, replace
from pathlib import Path

from fastapi import Body, FastAPI, File, Form, Request, UploadFile
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, Response
from fastapi.staticfiles import StaticFiles

from . import __version__
from .cli import ENGINE, adjusted_block, decomposition_document, dumps_document
from .datamodel import AnalysisSpec, loads_dataset, summarize, validate_pair
from .decomp import estimate_components
from .errors import (
    AdjustmentError,
    SelectionEventError,
    ShiftDiagError,
    ValidationError,
)
from .inference import component_summaries, jackknife_covariance
from .selectadj import adjust_components

DEFAULT_IDLE_TIMEOUT = 3600.0
DEFAULT_MAX_DATASET_BYTES = 50 * 1024 * 1024
DEFAULT_MAX_STORE_BYTES = 512 * 1024 * 1024
DEFAULT_REQUEST_TIMEOUT = 120.0
DEFAULT_WORKERS = 2


class ServiceError(Exception):
    """Request-level failure with a fixed HTTP status and error code."""

    def __init__(self, status: int, code: str, message: str, detail=None):
        super().__init__(message)
        self.status = status
        self.code = code
        self.detail = detail


@dataclass
class StoredDataset:
    text: str
    summary: dict
    size: int
    last_used: float


@dataclass
class SessionStore:
    """In-memory dataset store: opaque 128-bit ids, idle eviction, size caps.

    All access goes through one lock; entries are never replaced, so a
    stored dataset cannot change under a concurrent reader.
    """

    idle_timeout: float = DEFAULT_IDLE_TIMEOUT
    max_dataset_bytes: int = DEFAULT_MAX_DATASET_BYTES
    max_store_bytes: int = DEFAULT_MAX_STORE_BYTES
    clock: callable = time.monotonic
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    _items: dict = field(default_factory=dict, repr=False)

    def _sweep(self, now: float) -> None:
        stale = [key for key, item in self._items.items() if now - item.last_used > self.idle_timeout]
        for key in stale:
            del self._items[key]

    def put(self, text: str, summary: dict, *, size: int | None = None) -> str:
        size = len(text.encode("utf-8")) if size is None else size
        now = self.clock()
        with self._lock:
            self._sweep(now)
            if size > self.max_dataset_bytes:
                raise ServiceError(
                    413, "oversize", f"dataset of {size} bytes exceeds the {self.max_dataset_bytes}-byte cap"
                )
            held = sum(item.size for item in self._items.values())
            if held + size > self.max_store_bytes:
                raise ServiceError(
                    413, "oversize", "session store capacity exhausted; retry after idle datasets expire"
                )
            dataset_id = secrets.token_hex(16)
            self._items[dataset_id] = StoredDataset(text=text, summary=summary, size=size, last_used=now)
        return dataset_id

    def get(self, dataset_id: str) -> StoredDataset:
        now = self.clock()
        with self._lock:
            self._sweep(now)
            item = self._items.get(dataset_id)
            if item is None:
                raise ServiceError(404, "unknown_dataset", f"no dataset with id {dataset_id!r}")
            item.last_used = now
            return item

    def __len__(self) -> int:
        with self._lock:
            return len(self._items)


# -- pipeline ----------------------------------------------------------------


def run_decomposition(store: SessionStore, payload: dict) -> str:
    """Resolve the request against the store and produce the document text.

    Pure given the store contents, and shared verbatim with the CLI from
    the spec onward, so service and CLI outputs are byte-identical.
    """
    if not isinstance(payload, dict):
        raise ValidationError("request body must be a JSON object")
    ids = {}
    for key in ("original_id", "replication_id"):
        value = payload.get(key)
        if not isinstance(value, str) or not value:
            raise ValidationError(f"{key} must be a dataset id string")
        ids[key] = value
    spec = AnalysisSpec.from_dict(payload.get("spec"))
    selection = payload.get("selection")
    if selection is not None:
        if not isinstance(selection, dict) or "alpha0" not in selection:
            raise ValidationError("selection must be an object with 'alpha0'")
        spec = spec.with_selection(float(selection["alpha0"]))
    level = payload.get("level")
    if level is not None:
        spec = replace(spec, ci_level=float(level))

    original = store.get(ids["original_id"])
    replication = store.get(ids["replication_id"])
    d1 = loads_dataset(original.text, spec, source="<original upload>")
    d2 = loads_dataset(replication.text, spec, source="<replication upload>")
    validate_pair(d1, d2, spec)

    dec = estimate_components(d1, d2, spec)
    vec, cov = jackknife_covariance(d1, d2, spec)
    rows = component_summaries(vec, cov, spec.ci_level)
    adjusted = None
    if spec.selection is not None:
        model, adj = adjust_components(vec, cov, spec)
        adjusted = adjusted_block(model, adj, rows)
    return dumps_document(decomposition_document(spec, dec, rows, adjusted))


def _default_console_dir() -> Path:
    return Path(__file__).resolve().parents[2] / "frontend" / "dist"


def create_app(
    store: SessionStore | None = None,
    *,
    workers: int = DEFAULT_WORKERS,
    timeout: float = DEFAULT_REQUEST_TIMEOUT,
    static_dir: Path | str | None = None,
) -> FastAPI:
    store = store if store is not None else SessionStore()
    pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="shiftdiag-api")
    app = FastAPI(title=ENGINE, version=__version__, docs_url=None, redoc_url=None, openapi_url=None)
    app.state.store = store

    def fail(exc: ServiceError) -> JSONResponse:
        return JSONResponse(
            status_code=exc.status,
            content={"code": exc.code, "message": str(exc), "detail": exc.detail},
        )

    @app.exception_handler(ServiceError)
    def service_error(request: Request, exc: ServiceError):
        return fail(exc)

    @app.exception_handler(ShiftDiagError)
    def pipeline_error(request: Request, exc: ShiftDiagError):
        if isinstance(exc, ValidationError):
            wrapped = ServiceError(400, "validation_error", str(exc))
        elif isinstance(exc, SelectionEventError):
            wrapped = ServiceError(409, "selection_event_absent", str(exc))
        elif isinstance(exc, AdjustmentError):
            wrapped = ServiceError(422, "adjustment_failed", str(exc))
        else:
            # balance infeasibility (message names the constraint label),
            # singular designs, jackknife failure budget
            wrapped = ServiceError(422, "infeasible", str(exc))
        return fail(wrapped)

    @app.exception_handler(RequestValidationError)
    def request_error(request: Request, exc: RequestValidationError):
        return fail(ServiceError(400, "validation_error", "malformed request", detail=str(exc)))

    @app.get("/api/health")
    def health():
        return {"status": "ok", "datasets": len(store)}

    @app.get("/api/version")
    def version():
        return {"engine": ENGINE, "version": __version__}

    @app.post("/api/datasets")
    def post_dataset(file: UploadFile = File(...), spec: str = Form(...)):
        body = file.file.read(store.max_dataset_bytes + 1)
        if len(body) > store.max_dataset_bytes:
            raise ServiceError(
                413, "oversize", f"upload exceeds the {store.max_dataset_bytes}-byte cap"
            )
        try:
            text = body.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ServiceError(400, "validation_error", f"CSV must be UTF-8: {exc}") from None
        try:
            raw = json.loads(spec)
        except json.JSONDecodeError as exc:
            raise ServiceError(400, "validation_error", f"spec is not valid JSON: {exc}") from None
        parsed = AnalysisSpec.from_dict(raw)
        dataset = loads_dataset(text, parsed, source=file.filename or "<upload>")
        summary = summarize(dataset, parsed)
        dataset_id = store.put(text, summary, size=len(body))
        return {"id": dataset_id, "summary": summary}

    @app.post("/api/decompose")
    def post_decompose(payload: dict = Body(...)):
        future = pool.submit(run_decomposition, store, payload)
        try:
            text = future.result(timeout=timeout)
        except FutureTimeout:
            future.cancel()
            raise ServiceError(
                503, "timeout", f"decomposition did not finish within {timeout:g} s"
            ) from None
        return Response(content=text, media_type="application/json")

    console = Path(static_dir) if static_dir is not None else _default_console_dir()
    if console.is_dir():
        app.mount("/", StaticFiles(directory=console, html=True), name="console")
    return app
