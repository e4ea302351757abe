"""Thin client for a Docker-compatible engine's HTTP API."""

from __future__ import annotations

import contextlib
import hashlib
import io
import json
import logging
import os
import re
import struct
import tarfile
import threading
import time
import uuid
from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path, PurePosixPath
from typing import Any
from urllib.parse import quote

import httpx

from scirep.envgen import DbServiceSpec
from scirep.errors import (
    BuildFailed,
    DbStartupTimeout,
    EngineError,
    EngineUnreachable,
    ImageNotFound,
    InvalidTag,
)

log = logging.getLogger(__name__)

DEFAULT_ENGINE_HOST = "unix:///var/run/docker.sock"
OWNER_LABEL = "scirep.owner"
PROJECT_LABEL = "scirep.project"
_TAG = re.compile(r"^[a-z0-9]+(?:(?:[._]|__|-+)[a-z0-9]+)*(?:/[a-z0-9]+(?:(?:[._]|__|-+)[a-z0-9]+)*)*"
                  r"(?::[\w][\w.-]{0,127})?$")
_STEP = re.compile(r"^Step \d+/\d+ : (.*)$")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds")


def validate_tag(tag_id: str) -> str:
    # the engine caps a full reference at 255 characters
    if not tag_id or len(tag_id) > 255 or not _TAG.match(tag_id):
        raise InvalidTag(f"invalid image tag {tag_id!r}: lowercase letters, digits and . _ - only",
                         tag_id=tag_id)
    return tag_id


def tag_from_name(name: str) -> str:
    """Best-effort conversion of free text into a valid tag."""
    tag = re.sub(r"[^a-z0-9._-]+", "-", name.lower()).strip("._-")
    tag = re.sub(r"[._-]{2,}", "-", tag)[:128].rstrip("._-")
    return tag or "experiment"


def engine_host_from_env() -> str:
    return os.environ.get("SCIREP_ENGINE_HOST") or os.environ.get("DOCKER_HOST") or DEFAULT_ENGINE_HOST


@dataclass(frozen=True)
class ImageRef:
    tag_id: str
    engine_image_id: str
    built_at: str
    build_log_digest: str
    build_log: str = field(default="", compare=False, repr=False)

    def to_dict(self) -> dict[str, Any]:
        return {"tag_id": self.tag_id, "engine_image_id": self.engine_image_id,
                "built_at": self.built_at, "build_log_digest": self.build_log_digest}


@dataclass(frozen=True)
class RunRequest:
    tag_id: str
    command: str
    db_attach: DbServiceSpec | None = None
    db_seed: tuple[str, bytes] | None = None
    project_id: str = ""
    env: tuple[tuple[str, str], ...] = ()
    network_none: bool = False
    publish_db_port: bool = False

    def __post_init__(self) -> None:
        if not self.command or not self.command.strip():
            raise ValueError("command must be non-empty")


@dataclass(frozen=True)
class RunResult:
    exit_code: int
    console_log: bytes
    wall_time: float
    changed_files: tuple[tuple[str, bytes], ...] = ()
    started_at: str = ""
    finished_at: str = ""
    db_ready_at: str | None = None
    workdir: str = ""


def demux_logs(raw: bytes) -> bytes:
    """Strip the engine's 8-byte stream frame headers, keeping frame order.

    Output from a TTY container is not framed and is returned unchanged.
    """
    if len(raw) < 8 or raw[0] not in (0, 1, 2) or raw[1:4] != b"\x00\x00\x00":
        return raw
    out = bytearray()
    pos = 0
    while pos + 8 <= len(raw):
        size = struct.unpack(">I", raw[pos + 4:pos + 8])[0]
        out += raw[pos + 8:pos + 8 + size]
        pos += 8 + size
    return bytes(out)


def context_tar(dockerfile_text: str, files_dir: Path | None) -> bytes:
    """Build context: ``Dockerfile`` at the root, the project tree under ``files/``."""
    buf = io.BytesIO()
    with tarfile.open(fileobj=buf, mode="w", format=tarfile.PAX_FORMAT) as tar:
        data = dockerfile_text.encode()
        info = tarfile.TarInfo("Dockerfile")
        info.size = len(data)
        info.mode = 0o644
        tar.addfile(info, io.BytesIO(data))
        dir_info = tarfile.TarInfo("files")
        dir_info.type = tarfile.DIRTYPE
        dir_info.mode = 0o755
        tar.addfile(dir_info)
        if files_dir is not None:
            for path in sorted(files_dir.rglob("*")):
                rel = path.relative_to(files_dir).as_posix()
                if path.name.startswith(".upload-"):
                    continue
                ti = tarfile.TarInfo(f"files/{rel}")
                if path.is_dir():
                    ti.type = tarfile.DIRTYPE
                    ti.mode = 0o755
                    tar.addfile(ti)
                elif path.is_file():
                    content = path.read_bytes()
                    ti.size = len(content)
                    ti.mode = 0o755 if os.access(path, os.X_OK) else 0o644
                    tar.addfile(ti, io.BytesIO(content))
    return buf.getvalue()


def single_file_tar(name: str, data: bytes) -> bytes:
    buf = io.BytesIO()
    with tarfile.open(fileobj=buf, mode="w") as tar:
        info = tarfile.TarInfo(name)
        info.size = len(data)
        info.mode = 0o644
        tar.addfile(info, io.BytesIO(data))
    return buf.getvalue()


class EngineClient:
    """Synchronous engine client.

    ``host`` accepts ``unix:///path``, ``tcp://host:port`` or an http(s) URL;
    ``transport`` lets tests substitute an in-process engine.
    """

    def __init__(self, host: str | None = None, *, transport: httpx.BaseTransport | None = None,
                 max_parallel_runs: int = 4, db_poll_interval: float = 1.0) -> None:
        self.host = host or engine_host_from_env()
        if transport is None:
            if self.host.startswith("unix://"):
                transport = httpx.HTTPTransport(uds=self.host[len("unix://"):])
                base_url = "http://engine"
            elif self.host.startswith("tcp://"):
                base_url = "http://" + self.host[len("tcp://"):]
            else:
                base_url = self.host
        else:
            base_url = "http://engine"
        self._http = httpx.Client(base_url=base_url, transport=transport,
                                  timeout=httpx.Timeout(30.0, read=None))
        self._build_locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()
        self._run_slots = threading.BoundedSemaphore(max_parallel_runs)
        self.db_poll_interval = db_poll_interval

    def close(self) -> None:
        self._http.close()

    # -- low-level --

    def _request(self, method: str, path: str, **kw: Any) -> httpx.Response:
        try:
            return self._http.request(method, path, **kw)
        except httpx.TransportError as exc:
            raise EngineUnreachable(f"container engine at {self.host} unreachable: {exc}",
                                    host=self.host) from exc

    @contextlib.contextmanager
    def _stream(self, method: str, path: str, **kw: Any) -> Iterator[httpx.Response]:
        try:
            with self._http.stream(method, path, **kw) as resp:
                yield resp
        except httpx.TransportError as exc:
            raise EngineUnreachable(f"container engine at {self.host} unreachable: {exc}",
                                    host=self.host) from exc

    @staticmethod
    def _message(resp: httpx.Response) -> str:
        try:
            return resp.json().get("message", resp.text)
        except (ValueError, AttributeError):
            return resp.text

    def _check(self, resp: httpx.Response, what: str) -> httpx.Response:
        if resp.status_code >= 400:
            raise EngineError(f"{what}: {resp.status_code} {self._message(resp)}",
                              status=resp.status_code)
        return resp

    def _labels(self, project_id: str) -> dict[str, str]:
        return {OWNER_LABEL: "scirep", PROJECT_LABEL: project_id}

    # -- health --

    def engine_health(self) -> dict[str, Any]:
        try:
            resp = self._http.get("/version", timeout=5.0)
            resp.raise_for_status()
            info = resp.json()
        except (httpx.HTTPError, ValueError) as exc:
            return {"reachable": False, "version": None, "api_version": None, "error": str(exc)}
        return {"reachable": True, "version": info.get("Version"),
                "api_version": info.get("ApiVersion"), "error": None}

    # -- images --

    def inspect_image(self, tag_id: str) -> dict[str, Any]:
        resp = self._request("GET", f"/images/{quote(tag_id, safe='')}/json")
        if resp.status_code == 404:
            raise ImageNotFound(f"image {tag_id!r} not found in engine", tag_id=tag_id)
        return self._check(resp, "inspect image").json()

    def image_exists(self, tag_id: str) -> bool:
        try:
            self.inspect_image(tag_id)
        except ImageNotFound:
            return False
        return True

    def pull_image(self, ref: str) -> None:
        name, _, tag = ref.partition(":")
        with self._stream("POST", "/images/create",
                          params={"fromImage": name, "tag": tag or "latest"}) as resp:
            if resp.status_code >= 400:
                resp.read()
                raise EngineError(f"pull {ref}: {self._message(resp)}", ref=ref)
            for line in resp.iter_lines():
                if line.strip() and "error" in (msg := json.loads(line)):
                    raise EngineError(f"pull {ref}: {msg['error']}", ref=ref)

    def ensure_image(self, ref: str) -> None:
        if not self.image_exists(ref):
            self.pull_image(ref)

    def remove_image(self, tag_id: str, force: bool = True) -> None:
        resp = self._request("DELETE", f"/images/{quote(tag_id, safe='')}", params={"force": int(force)})
        if resp.status_code == 404:
            raise ImageNotFound(f"image {tag_id!r} not found in engine", tag_id=tag_id)
        self._check(resp, "remove image")

    def build_image(self, project_id: str, dockerfile_text: str, tag_id: str,
                    files_dir: Path | None = None) -> ImageRef:
        validate_tag(tag_id)
        with self._guard:
            lock = self._build_locks.setdefault(project_id, threading.Lock())
        with lock:
            return self._build(project_id, dockerfile_text, tag_id, files_dir)

    def _build(self, project_id: str, dockerfile_text: str, tag_id: str,
               files_dir: Path | None) -> ImageRef:
        body = context_tar(dockerfile_text, files_dir)
        params = {"t": tag_id, "rm": 1, "forcerm": 1,
                  "labels": json.dumps(self._labels(project_id))}
        log_lines: list[str] = []
        step = "FROM"
        image_id = None
        with self._stream("POST", "/build", params=params, content=body,
                          headers={"Content-Type": "application/x-tar"}) as resp:
            if resp.status_code >= 400:
                resp.read()
                raise BuildFailed(step, self._message(resp))
            for line in resp.iter_lines():
                if not line.strip():
                    continue
                try:
                    msg = json.loads(line)
                except ValueError:
                    log_lines.append(line)
                    continue
                if "stream" in msg:
                    text = msg["stream"]
                    log_lines.append(text)
                    m = _STEP.match(text.strip())
                    if m:
                        step = m.group(1)
                if "aux" in msg and isinstance(msg["aux"], dict) and "ID" in msg["aux"]:
                    image_id = msg["aux"]["ID"]
                if "error" in msg:
                    log_lines.append(msg["error"] + "\n")
                    excerpt = "".join(log_lines[-20:])
                    raise BuildFailed(step, excerpt)
        build_log = "".join(log_lines)
        if image_id is None:
            image_id = self.inspect_image(tag_id)["Id"]
        return ImageRef(tag_id, image_id, _now(), hashlib.sha256(build_log.encode()).hexdigest(), build_log)

    def export_image(self, tag_id: str) -> bytes:
        self.inspect_image(tag_id)
        resp = self._request("GET", f"/images/{quote(tag_id, safe='')}/get")
        if resp.status_code == 404:
            raise ImageNotFound(f"image {tag_id!r} not found in engine", tag_id=tag_id)
        return self._check(resp, "export image").content

    def load_image(self, archive: bytes) -> list[str]:
        resp = self._check(self._request("POST", "/images/load", content=archive,
                                         headers={"Content-Type": "application/x-tar"},
                                         params={"quiet": 1}), "load image")
        loaded = []
        for line in resp.text.splitlines():
            if not line.strip():
                continue
            msg = json.loads(line)
            if "error" in msg:
                raise EngineError(f"load image: {msg['error']}")
            text = msg.get("stream", "")
            for prefix in ("Loaded image: ", "Loaded image ID: "):
                if text.startswith(prefix):
                    loaded.append(text[len(prefix):].strip())
        return loaded

    # -- containers --

    def list_containers(self, project_id: str | None = None) -> list[dict[str, Any]]:
        label = f"{PROJECT_LABEL}={project_id}" if project_id is not None else OWNER_LABEL
        resp = self._check(self._request("GET", "/containers/json",
                                         params={"all": 1, "filters": json.dumps({"label": [label]})}),
                           "list containers")
        return resp.json() or []

    def _remove_container(self, cid: str) -> None:
        try:
            self._request("DELETE", f"/containers/{cid}", params={"force": 1, "v": 1})
        except EngineUnreachable:
            log.warning("could not remove container %s", cid)

    def _create_container(self, config: dict[str, Any], name: str | None = None) -> str:
        params = {"name": name} if name else None
        resp = self._request("POST", "/containers/create", json=config, params=params)
        if resp.status_code == 404:
            raise ImageNotFound(f"image {config.get('Image')!r} not found", tag_id=config.get("Image"))
        return self._check(resp, "create container").json()["Id"]

    def _start(self, cid: str) -> None:
        self._check(self._request("POST", f"/containers/{cid}/start"), "start container")

    def _exec(self, cid: str, cmd: Iterable[str]) -> int:
        resp = self._check(self._request("POST", f"/containers/{cid}/exec",
                                         json={"Cmd": list(cmd), "AttachStdout": True,
                                               "AttachStderr": True}), "exec create")
        eid = resp.json()["Id"]
        self._check(self._request("POST", f"/exec/{eid}/start", json={"Detach": False, "Tty": False}),
                    "exec start")
        info = self._check(self._request("GET", f"/exec/{eid}/json"), "exec inspect").json()
        code = info.get("ExitCode")
        return -1 if code is None else int(code)

    def _container_running(self, cid: str) -> bool:
        resp = self._request("GET", f"/containers/{cid}/json")
        if resp.status_code >= 400:
            return False
        return bool(resp.json().get("State", {}).get("Running"))

    def _logs(self, cid: str) -> bytes:
        resp = self._check(self._request("GET", f"/containers/{cid}/logs",
                                         params={"stdout": 1, "stderr": 1}), "logs")
        return demux_logs(resp.content)

    def _harvest(self, cid: str, workdir: str) -> tuple[tuple[str, bytes], ...]:
        resp = self._check(self._request("GET", f"/containers/{cid}/changes"), "changes")
        root = PurePosixPath(workdir)
        changed = {
            c["Path"] for c in (resp.json() or [])
            if c.get("Kind") in (0, 1) and PurePosixPath(c["Path"]).is_relative_to(root)
            and PurePosixPath(c["Path"]) != root
        }
        if not changed:
            return ()
        resp = self._request("GET", f"/containers/{cid}/archive", params={"path": workdir})
        self._check(resp, "archive")
        out = []
        with tarfile.open(fileobj=io.BytesIO(resp.content)) as tar:
            for member in tar.getmembers():
                if not member.isfile():
                    continue
                # the archive is rooted at the workdir's own basename
                parts = PurePosixPath(member.name).parts[1:]
                if not parts:
                    continue
                rel = PurePosixPath(*parts)
                if str(root / rel) in changed:
                    fh = tar.extractfile(member)
                    out.append((rel.as_posix(), fh.read() if fh else b""))
        return tuple(sorted(out))

    def _start_db(self, spec: DbServiceSpec, network: str, project_id: str,
                  seed: tuple[str, bytes] | None, publish: bool) -> tuple[str, str]:
        assert spec.image is not None
        self.ensure_image(spec.image)
        host_config: dict[str, Any] = {"NetworkMode": network}
        config: dict[str, Any] = {
            "Image": spec.image,
            "Env": [f"{k}={v}" for k, v in spec.env],
            "Labels": self._labels(project_id),
            "HostConfig": host_config,
            "NetworkingConfig": {"EndpointsConfig": {network: {"Aliases": [spec.network_alias]}}},
        }
        if publish and spec.host_port and spec.container_port:
            port = f"{spec.container_port}/tcp"
            config["ExposedPorts"] = {port: {}}
            host_config["PortBindings"] = {port: [{"HostPort": str(spec.host_port)}]}
        cid = self._create_container(config)
        try:
            if seed is not None and spec.seed_mount:
                self._check(self._request(
                    "PUT", f"/containers/{cid}/archive", params={"path": spec.seed_mount},
                    content=single_file_tar(PurePosixPath(seed[0]).name, seed[1]),
                    headers={"Content-Type": "application/x-tar"}), "copy seed data")
            self._start(cid)
            deadline = time.monotonic() + spec.timeout_s
            while True:
                if spec.probe and self._exec(cid, spec.probe) == 0:
                    return cid, _now()
                if not spec.probe and self._container_running(cid):
                    return cid, _now()
                if time.monotonic() >= deadline or not self._container_running(cid):
                    tail = self._logs(cid)[-2000:].decode(errors="replace")
                    raise DbStartupTimeout(
                        f"{spec.engine} not ready after {spec.timeout_s:.0f}s", log_excerpt=tail)
                time.sleep(self.db_poll_interval)
        except BaseException:
            self._remove_container(cid)
            raise

    def run_container(self, request: RunRequest) -> RunResult:
        info = self.inspect_image(request.tag_id)
        workdir = (info.get("Config") or {}).get("WorkingDir") or "/"
        with self._run_slots:
            return self._run(request, workdir)

    def _run(self, request: RunRequest, workdir: str) -> RunResult:
        labels = self._labels(request.project_id)
        env = dict(request.env)
        network_id = None
        db_cid = None
        cid = None
        db_ready_at = None
        service = request.db_attach if request.db_attach and not request.db_attach.no_service else None
        if request.db_attach is not None:
            env.update(dict(request.db_attach.client_env))
        try:
            if request.network_none and service is None:
                network_mode = "none"
            elif service is not None:
                name = f"scirep-{uuid.uuid4().hex[:12]}"
                resp = self._check(self._request("POST", "/networks/create", json={
                    "Name": name, "Labels": labels, "Internal": request.network_none,
                    "CheckDuplicate": True}), "create network")
                network_id = resp.json()["Id"]
                network_mode = name
                db_cid, db_ready_at = self._start_db(service, name, request.project_id,
                                                     request.db_seed, request.publish_db_port)
            else:
                network_mode = "bridge"
            cid = self._create_container({
                "Image": request.tag_id,
                "Cmd": ["/bin/sh", "-c", request.command],
                "Env": [f"{k}={v}" for k, v in sorted(env.items())],
                "Labels": labels,
                "Tty": False,
                "AttachStdout": True,
                "AttachStderr": True,
                "HostConfig": {"NetworkMode": network_mode},
            })
            started_at = _now()
            t0 = time.monotonic()
            self._start(cid)
            waited = self._check(self._request("POST", f"/containers/{cid}/wait"), "wait").json()
            wall = time.monotonic() - t0
            finished_at = _now()
            console = self._logs(cid)
            changed = self._harvest(cid, workdir)
            return RunResult(int(waited.get("StatusCode", -1)), console, wall, changed,
                             started_at, finished_at, db_ready_at, workdir)
        finally:
            for c in (cid, db_cid):
                if c is not None:
                    self._remove_container(c)
            if network_id is not None:
                try:
                    self._request("DELETE", f"/networks/{network_id}")
                except EngineUnreachable:
                    log.warning("could not remove network %s", network_id)
