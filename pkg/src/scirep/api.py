"""HTTP gateway.

The root-level routes follow the published project API. Everything else
lives under ``/v1/``.
"""

from __future__ import annotations

import contextlib
import functools
import json
import threading
import uuid
from collections.abc import AsyncIterator, Callable
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from typing import Any

from fastapi import FastAPI, Request
from fastapi.concurrency import run_in_threadpool
from fastapi.encoders import jsonable_encoder
from fastapi.responses import JSONResponse, Response
from starlette.datastructures import UploadFile

from scirep.errors import JobNotFound, ScirepError, UsageError
from scirep.service import Scirep

ZIP_MEDIA_TYPE = "application/zip"


@functools.cache
def api_schema() -> dict[str, Any]:
    """JSON Schema for every response body the gateway publishes."""
    return json.loads(resources.files("scirep").joinpath("schemas/api.json").read_text())


@dataclass
class Job:
    id: str
    kind: str
    future: Future[Any] = field(repr=False)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"jobId": self.id, "kind": self.kind}
        if not self.future.done():
            out["status"] = "running"
            return out
        exc = self.future.exception()
        if exc is None:
            out["status"] = "succeeded"
            result = self.future.result()
            out["result"] = None if isinstance(result, bytes) else result
        else:
            out["status"] = "failed"
            err = exc if isinstance(exc, ScirepError) else ScirepError(str(exc))
            out["error"] = err.to_dict()
        return out


class JobTable:
    def __init__(self, workers: int = 4) -> None:
        self._pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="scirep-job")
        self._jobs: dict[str, Job] = {}
        self._guard = threading.Lock()

    def submit(self, kind: str, fn: Callable[[], Any]) -> Job:
        job = Job(str(uuid.uuid4()), kind, self._pool.submit(fn))
        with self._guard:
            self._jobs[job.id] = job
        return job

    def get(self, job_id: str) -> Job:
        with self._guard:
            job = self._jobs.get(job_id)
        if job is None:
            raise JobNotFound(f"no job {job_id!r}", job_id=job_id)
        return job

    def shutdown(self) -> None:
        # wait for in-flight builds and runs
        self._pool.shutdown(wait=True)


def _error_response(err: ScirepError) -> JSONResponse:
    return JSONResponse(jsonable_encoder(err.to_dict(), custom_encoder={bytes: lambda b: b.hex()}),
                        status_code=err.http_status)


async def _json_body(request: Request) -> dict[str, Any]:
    raw = await request.body()
    if not raw.strip():
        return {}
    try:
        body = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise UsageError(f"request body is not JSON: {exc.msg}") from exc
    if not isinstance(body, dict):
        raise UsageError("request body must be a JSON object")
    return body


def _form_text(value: Any, *keys: str) -> str:
    """Accept either a plain string or a JSON object carrying one of ``keys``."""
    if value is None or isinstance(value, UploadFile):
        return ""
    text = str(value)
    try:
        parsed = json.loads(text)
    except json.JSONDecodeError:
        return text
    if isinstance(parsed, dict):
        for k in keys:
            if parsed.get(k):
                return str(parsed[k])
        return ""
    return text if not isinstance(parsed, str) else parsed


def _truthy(value: str | None) -> bool:
    return (value or "").lower() in {"1", "true", "yes"}


def create_app(service: Scirep | None = None, *, job_workers: int = 4) -> FastAPI:
    svc_holder: dict[str, Scirep] = {}
    jobs = JobTable(job_workers)

    def svc() -> Scirep:
        if "svc" not in svc_holder:
            svc_holder["svc"] = service or Scirep()
        return svc_holder["svc"]

    @contextlib.asynccontextmanager
    async def lifespan(_: FastAPI) -> AsyncIterator[None]:
        yield
        jobs.shutdown()

    app = FastAPI(title="scirep", lifespan=lifespan)
    app.state.jobs = jobs

    @app.exception_handler(ScirepError)
    async def _on_error(_: Request, exc: ScirepError) -> JSONResponse:
        return _error_response(exc)

    async def long_op(request: Request, kind: str, fn: Callable[[], Any],
                      media_type: str | None = None) -> Response:
        if _truthy(request.query_params.get("async")):
            job = jobs.submit(kind, fn)
            return JSONResponse(job.to_dict(), status_code=202)
        result = await run_in_threadpool(fn)
        if isinstance(result, bytes):
            return Response(result, media_type=media_type or ZIP_MEDIA_TYPE)
        return JSONResponse(result)

    # -- published surface --

    @app.post("/project", status_code=201)
    async def create_project(request: Request) -> JSONResponse:
        body = await _json_body(request)
        seed = body.get("seed")
        result = await run_in_threadpool(
            svc().create_project, body.get("name") or "", body.get("description") or "",
            body.get("experimentKind") or "standard", seed,
        )
        return JSONResponse(result, status_code=201)

    @app.post("/{project_id}/uploadfile", status_code=201)
    async def upload_file(project_id: str, request: Request) -> JSONResponse:
        form = await request.form()
        upload = form.get("file")
        if not isinstance(upload, UploadFile):
            raise UsageError("multipart field 'file' is required")
        parent = _form_text(form.get("parentDirectory"), "path", "name")
        name = _form_text(form.get("fileInformation"), "name", "fileName") or upload.filename or ""
        data = await upload.read()
        result = await run_in_threadpool(svc().upload_file, project_id, parent, name, data)
        return JSONResponse(result, status_code=201)

    async def _archive_bytes(request: Request) -> bytes:
        if request.headers.get("content-type", "").startswith("multipart/"):
            form = await request.form()
            upload = form.get("file")
            if not isinstance(upload, UploadFile):
                raise UsageError("multipart field 'file' is required")
            return await upload.read()
        return await request.body()

    @app.post("/{project_id}/uploadproject")
    async def upload_project(project_id: str, request: Request) -> JSONResponse:
        data = await _archive_bytes(request)
        return JSONResponse(await run_in_threadpool(svc().import_archive, project_id, data))

    @app.post("/{project_id}/uploadgitproject")
    async def upload_git_project(project_id: str, request: Request) -> JSONResponse:
        body = await _json_body(request)
        repo, location = body.get("repositorySelected"), body.get("projectLocation")
        if not repo or not location:
            raise UsageError("repositorySelected and projectLocation are required")
        return JSONResponse(await run_in_threadpool(svc().import_remote, project_id, repo, location))

    @app.post("/{project_id}/build-docker-image")
    async def build_image(project_id: str, request: Request) -> Response:
        body = await _json_body(request)
        return await long_op(request, "build", lambda: svc().build(project_id, body))

    @app.post("/{project_id}/run-container")
    async def run_container(project_id: str, request: Request) -> Response:
        body = await _json_body(request)
        tag, command = body.get("tagId"), body.get("command")
        db = body.get("dbConfiguration") if body.get("DBhas", True) else None
        normalizers = list(body.get("normalizers") or ())
        return await long_op(request, "run", lambda: svc().run(
            project_id, tag, command, db, normalizers, bool(body.get("networkNone", False))))

    @app.get("/{project_id}/package")
    async def package(project_id: str, request: Request) -> Response:
        body = await _json_body(request)
        tag = request.query_params.get("tagId") or body.get("tagId")
        commands = request.query_params.getlist("command") or body.get("commands") or []
        if isinstance(commands, str):
            commands = [commands]
        db = body.get("dbConfiguration")
        created_at = request.query_params.get("createdAt") or body.get("createdAt")
        return await long_op(request, "package",
                             lambda: svc().package(project_id, tag, commands, db, created_at))

    # -- versioned extensions --

    @app.get("/v1/health")
    async def health() -> JSONResponse:
        return JSONResponse(await run_in_threadpool(svc().health))

    @app.get("/v1/schema")
    async def schema() -> JSONResponse:
        return JSONResponse(api_schema())

    @app.get("/v1/projects")
    async def projects() -> JSONResponse:
        return JSONResponse(await run_in_threadpool(svc().list_projects))

    @app.get("/v1/projects/{project_id}/tree")
    async def tree(project_id: str) -> JSONResponse:
        return JSONResponse(await run_in_threadpool(svc().tree, project_id))

    @app.post("/v1/projects/{project_id}/entries")
    async def entries(project_id: str, request: Request) -> JSONResponse:
        body = await _json_body(request)
        if not body.get("action") or "path" not in body:
            raise UsageError("action and path are required")
        return JSONResponse(await run_in_threadpool(
            svc().manage_entry, project_id, body["action"], body["path"], body.get("newPath")))

    @app.post("/v1/projects/{project_id}/infer")
    async def infer(project_id: str) -> JSONResponse:
        return JSONResponse(await run_in_threadpool(svc().infer, project_id))

    @app.post("/v1/projects/{project_id}/overrides")
    async def overrides(project_id: str, request: Request) -> JSONResponse:
        body = await _json_body(request)
        return JSONResponse(await run_in_threadpool(svc().override, project_id, body))

    @app.put("/v1/projects/{project_id}/dataset")
    async def dataset(project_id: str, request: Request) -> JSONResponse:
        form = await request.form()
        replacements = []
        for key, value in form.multi_items():
            if isinstance(value, UploadFile):
                replacements.append((key, await value.read()))
        if not replacements:
            raise UsageError("upload at least one file; the field name is the project path")
        return JSONResponse(await run_in_threadpool(svc().replace_dataset, project_id, replacements))

    @app.get("/v1/projects/{project_id}/executions")
    async def executions(project_id: str) -> JSONResponse:
        return JSONResponse(await run_in_threadpool(svc().executions, project_id))

    @app.post("/v1/projects/{project_id}/executions/{execution_id}/golden")
    async def golden(project_id: str, execution_id: str) -> JSONResponse:
        return JSONResponse(await run_in_threadpool(svc().mark_golden, project_id, execution_id))

    @app.get("/v1/projects/{project_id}/executions/{execution_id}/validation")
    async def validation(project_id: str, execution_id: str, request: Request) -> JSONResponse:
        norms = request.query_params.getlist("normalizer")
        return JSONResponse(await run_in_threadpool(svc().validate, project_id, execution_id, norms))

    @app.post("/v1/verify")
    async def verify(request: Request) -> JSONResponse:
        data = await _archive_bytes(request)
        smoke = _truthy(request.query_params.get("smoke"))
        return JSONResponse(await run_in_threadpool(svc().verify, data, smoke))

    @app.get("/v1/jobs/{job_id}")
    async def job_status(job_id: str) -> JSONResponse:
        return JSONResponse(jobs.get(job_id).to_dict())

    @app.get("/v1/jobs/{job_id}/result")
    async def job_result(job_id: str) -> Response:
        job = jobs.get(job_id)
        if not job.future.done():
            return JSONResponse(job.to_dict(), status_code=202)
        exc = job.future.exception()
        if exc is not None:
            if isinstance(exc, ScirepError):
                return _error_response(exc)
            raise exc
        result = job.future.result()
        if isinstance(result, bytes):
            return Response(result, media_type=ZIP_MEDIA_TYPE)
        return JSONResponse(result)

    return app
