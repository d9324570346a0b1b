"""HTTP micro-service: localisation, retrieval and multi-product search.

Endpoints (multipart/form-data with parts ``image`` and ``params``):

    POST /v1/localise     -> {"detections": [...]}
    POST /v1/retrieve     -> {"database", "results": [...], "degraded"}
    POST /v1/multisearch  -> {"groups": [...], "degraded"}
    GET  /v1/health       -> instance status

Handlers keep no per-request state, so identically configured instances return
identical bodies and can sit behind any load balancer. Errors are JSON
``{"code", "message"}``.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from starlette.concurrency import run_in_threadpool
from starlette.datastructures import UploadFile

from cxsearch.errors import (
    ConfigError,
    CxSearchError,
    DecodeError,
    DetectorError,
    EmptyCrop,
    EmptyDescriptorSet,
    NoShardsAvailable,
    TooSmall,
    UnknownModel,
)
from cxsearch.imaging import decode_image
from cxsearch.localiser import (
    DEFAULT_CATEGORIES,
    DEFAULT_EXCLUSIONS,
    DetectorRegistry,
    FixtureDetector,
    SubprocessDetector,
    WholeFrameDetector,
    detect,
)
from cxsearch.pipeline import CategoryDatabases, SearchOptions, load_database_registry, multi_search

log = logging.getLogger(__name__)

_MULTIPART_SLACK = 64 * 1024  # allowance for the params part and multipart framing


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8080
    instance_id: str = "cxsearch-0"
    databases: str | None = None
    detectors: dict[str, Any] = field(default_factory=dict)
    categories: tuple[str, ...] = DEFAULT_CATEGORIES
    exclusions: tuple[tuple[str, str], ...] = DEFAULT_EXCLUSIONS
    max_image_bytes: int = 10 * 1024 * 1024
    max_top_k: int = 100
    base_dir: Path = Path(".")

    def validate(self) -> None:
        if self.max_image_bytes <= 0 or self.max_top_k <= 0:
            raise ConfigError("limits must be positive")
        if not 0 < self.port < 65536:
            raise ConfigError(f"invalid port {self.port}")
        models = self.detectors.get("models", {})
        if not isinstance(models, dict):
            raise ConfigError("detectors.models must be an object")
        default = self.detectors.get("default")
        if default is not None and default not in models:
            raise ConfigError(f"default detector {default!r} is not configured")

    @classmethod
    def from_file(cls, path: str | Path) -> ServiceConfig:
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read service config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("service config must be a JSON object")
        limits = doc.get("limits", {})
        try:
            cfg = cls(
                host=doc.get("host", cls.host),
                port=int(doc.get("port", cls.port)),
                instance_id=str(doc.get("instance_id", cls.instance_id)),
                databases=doc.get("databases"),
                detectors=doc.get("detectors", {}),
                categories=tuple(doc.get("categories", DEFAULT_CATEGORIES)),
                exclusions=tuple(tuple(p) for p in doc.get("exclusions", DEFAULT_EXCLUSIONS)),
                max_image_bytes=int(limits.get("max_image_bytes", cls.max_image_bytes)),
                max_top_k=int(limits.get("max_top_k", cls.max_top_k)),
                base_dir=path.parent,
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid service config {path}: {exc}") from exc
        cfg.validate()
        return cfg


def build_registry(cfg: ServiceConfig) -> DetectorRegistry:
    reg = DetectorRegistry(cfg.categories)
    for name, spec in cfg.detectors.get("models", {}).items():
        kind = spec.get("type")
        if kind == "fixture":
            det = FixtureDetector.from_file(cfg.base_dir / spec["annotations"])
        elif kind == "wholeframe":
            det = WholeFrameDetector(spec.get("categories", cfg.categories))
        elif kind == "subprocess":
            det = SubprocessDetector(spec["command"], float(spec.get("timeout", 30.0)))
        else:
            raise ConfigError(f"detector {name!r} has unknown type {kind!r}")
        reg.register(name, det)
    if cfg.detectors.get("default"):
        reg.set_default(cfg.detectors["default"])
    return reg


@dataclass
class ServiceState:
    config: ServiceConfig
    registry: DetectorRegistry
    databases: CategoryDatabases

    @classmethod
    def from_config(cls, cfg: ServiceConfig) -> ServiceState:
        try:
            registry = build_registry(cfg)
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"cannot build detector registry: {exc}") from exc
        dbs = load_database_registry(cfg.base_dir / cfg.databases) if cfg.databases else CategoryDatabases({})
        return cls(cfg, registry, dbs)


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


def _error(status: int, code: str, message: str) -> JSONResponse:
    return JSONResponse({"code": code, "message": message}, status_code=status)


def _map_error(exc: Exception) -> ApiError:
    if isinstance(exc, ApiError):
        return exc
    if isinstance(exc, UnknownModel):
        return ApiError(404, "unknown_model", str(exc))
    if isinstance(exc, (DecodeError, TooSmall)):
        return ApiError(422, "undecodable_image", str(exc))
    if isinstance(exc, (EmptyDescriptorSet, EmptyCrop)):
        return ApiError(422, "no_features", str(exc))
    if isinstance(exc, NoShardsAvailable):
        return ApiError(503, "no_shards_available", str(exc))
    if isinstance(exc, DetectorError):
        return ApiError(502, "detector_error", str(exc))
    if isinstance(exc, CxSearchError):
        return ApiError(500, "internal_error", str(exc))
    raise exc


async def _read_request(request: Request, cfg: ServiceConfig) -> tuple[bytes, dict]:
    ctype = request.headers.get("content-type", "")
    if not ctype.startswith("multipart/form-data"):
        raise ApiError(400, "bad_request", "expected multipart/form-data")
    length = request.headers.get("content-length")
    if length is not None and length.isdigit() and int(length) > cfg.max_image_bytes + _MULTIPART_SLACK:
        raise ApiError(413, "payload_too_large", f"request exceeds {cfg.max_image_bytes} image bytes")
    try:
        form = await request.form(max_files=2, max_fields=4)
    except Exception as exc:  # starlette raises several parser exception types
        raise ApiError(400, "bad_request", f"malformed multipart body: {exc}") from exc
    image = form.get("image")
    if image is None:
        raise ApiError(400, "bad_request", "missing 'image' part")
    blob = await image.read() if isinstance(image, UploadFile) else image.encode()
    if len(blob) > cfg.max_image_bytes:
        raise ApiError(413, "payload_too_large", f"image exceeds {cfg.max_image_bytes} bytes")
    raw = form.get("params")
    if raw is None:
        return blob, {}
    if isinstance(raw, UploadFile):
        raw = (await raw.read()).decode("utf-8", errors="replace")
    try:
        params = json.loads(raw) if raw.strip() else {}
    except ValueError as exc:
        raise ApiError(400, "bad_request", f"params is not valid JSON: {exc}") from exc
    if not isinstance(params, dict):
        raise ApiError(400, "bad_request", "params must be a JSON object")
    return blob, params


def _param(params: Mapping, name: str, kind: type, default: Any) -> Any:
    value = params.get(name, default)
    if value is None:
        return None
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or isinstance(value, bool):
        raise ApiError(400, "bad_request", f"param {name!r} must be {kind.__name__}")
    return value


def _top_k(params: Mapping, cfg: ServiceConfig) -> int:
    top_k = _param(params, "top_k", int, 10)
    if not 1 <= top_k <= cfg.max_top_k:
        raise ApiError(400, "bad_request", f"top_k must be within [1, {cfg.max_top_k}]")
    return top_k


def create_app(state: ServiceState) -> FastAPI:
    cfg = state.config
    app = FastAPI(title="cxsearch", version="0.1.0")
    app.state.cx = state

    @app.exception_handler(ApiError)
    async def _api_error(_: Request, exc: ApiError) -> JSONResponse:
        return _error(exc.status, exc.code, exc.message)

    async def _run(fn):
        try:
            return await run_in_threadpool(fn)
        except Exception as exc:
            raise _map_error(exc) from exc

    @app.post("/v1/localise")
    async def localise(request: Request) -> JSONResponse:
        blob, params = await _read_request(request, cfg)
        model = _param(params, "model", str, None)
        conf = _param(params, "conf_thresh", float, 0.0)

        def work():
            img = decode_image(blob)
            return detect(state.registry, model, img, conf)

        dets = await _run(work)
        return JSONResponse({"detections": [d.to_dict() for d in dets]})

    @app.post("/v1/retrieve")
    async def retrieve(request: Request) -> JSONResponse:
        blob, params = await _read_request(request, cfg)
        name = _param(params, "database", str, None)
        if name is None:
            raise ApiError(400, "bad_request", "param 'database' is required")
        if name not in state.databases:
            raise ApiError(404, "unknown_database", f"unknown database {name!r}")
        top_k = _top_k(params, cfg)
        db = state.databases[name]

        outcome = await _run(lambda: db.retrieve(decode_image(blob), top_k))
        return JSONResponse(
            {
                "database": name,
                "results": [{"image_id": r.image_id, "distance": r.distance} for r in outcome.results],
                "degraded": outcome.degraded,
            }
        )

    @app.post("/v1/multisearch")
    async def multisearch(request: Request) -> JSONResponse:
        blob, params = await _read_request(request, cfg)
        opts = SearchOptions(
            model=_param(params, "model", str, None),
            conf_thresh=_param(params, "conf_thresh", float, 0.0),
            top_k=_top_k(params, cfg),
            exclusions=cfg.exclusions,
        )
        start = time.perf_counter()
        result = await _run(lambda: multi_search(decode_image(blob), state.databases, state.registry, opts))
        elapsed = f"{1000 * (time.perf_counter() - start):.1f}"
        return JSONResponse(result.to_dict(), headers={"X-Elapsed-Ms": elapsed})

    @app.get("/v1/health")
    async def health() -> JSONResponse:
        dbs = {
            name: {
                "images": db.shards.n_images,
                "shards": [
                    {"word_range": list(s.word_range), "available": s.usable} for s in db.shards.shards
                ],
            }
            for name, db in state.databases.items()
        }
        body = {
            "status": "ok",
            "instance_id": cfg.instance_id,
            "models": state.registry.names(),
            "default_model": state.registry.default,
            "databases": dbs,
        }
        # not ready while either registry is empty: no endpoint beyond health could succeed fully
        if len(state.registry) == 0 or len(state.databases) == 0:
            body["status"] = "not-ready"
            return JSONResponse(body, status_code=503)
        return JSONResponse(body)

    return app


def serve(cfg: ServiceConfig) -> None:
    """Run until SIGINT/SIGTERM; in-flight requests finish before exit."""
    import signal

    import uvicorn

    app = create_app(ServiceState.from_config(cfg))
    # uvicorn drains requests on SIGINT/SIGTERM, then re-raises the signal through the
    # handler that was installed before it; a no-op there turns the drain into exit 0
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: None)
    uvicorn.run(app, host=cfg.host, port=cfg.port, log_level="info", timeout_graceful_shutdown=30)
