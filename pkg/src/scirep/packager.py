"""Self-contained research capsules.

Zip layout::

    image.tar             exported experiment image
    runExperiment.sh      POSIX launcher
    runExperiment.bat     Windows launcher
    db/image.tar          database engine image (service databases only)
    db/seed/<file>        database seed data (service databases only)
    manifest.json         metadata and member checksums

The launchers never rebuild; they load ``image.tar`` and run the commands.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import shlex
import zipfile
from collections.abc import Sequence
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import PurePosixPath
from typing import Any

from scirep.engine import EngineClient, RunRequest
from scirep.envgen import DatabaseConfig, DbServiceSpec, plan_db_service
from scirep.errors import CorruptPackage, ImageNotFound, LayoutViolation, UsageError
from scirep.inference import effective_report
from scirep.runner import ExperimentRunner
from scirep.store import ProjectStore

FORMAT_VERSION = 1
REQUIRED_MEMBERS = ("image.tar", "runExperiment.sh", "runExperiment.bat", "manifest.json")
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass(frozen=True)
class ArtifactPackage:
    data: bytes
    manifest: dict[str, Any]

    @property
    def sha256(self) -> str:
        return _sha(self.data)


def _creation_time(created_at: str | None) -> str:
    if created_at:
        return created_at
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    moment = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return moment.isoformat(timespec="seconds")


def render_sh(tag_id: str, commands: Sequence[str], service: DbServiceSpec | None = None,
              seed_name: str | None = None) -> str:
    q = shlex.quote
    lines = [
        "#!/bin/sh",
        "# Re-executes the packaged experiment. Needs only a Docker-compatible engine.",
        "# Set SCIREP_ENGINE to use another engine CLI (default: docker).",
        "set -u",
        'HERE=$(cd "$(dirname "$0")" && pwd)',
        'ENGINE=${SCIREP_ENGINE:-docker}',
        f"TAG={q(tag_id)}",
        "",
        '$ENGINE load -i "$HERE/image.tar" >/dev/null || { echo "runExperiment: cannot load image.tar" >&2; exit 125; }',
    ]
    run_args = ""
    if service is not None and not service.no_service:
        lines += [
            'NET="scirep-net-$$"',
            'DB="scirep-db-$$"',
            'cleanup() { $ENGINE rm -f "$DB" >/dev/null 2>&1; $ENGINE network rm "$NET" >/dev/null 2>&1; }',
            "trap cleanup EXIT",
            '$ENGINE load -i "$HERE/db/image.tar" >/dev/null || { echo "runExperiment: cannot load db/image.tar" >&2; exit 125; }',
            '$ENGINE network create "$NET" >/dev/null || exit 125',
            '$ENGINE create --name "$DB" --network "$NET" --network-alias '
            + q(service.network_alias)
            + "".join(f" -e {q(f'{k}={v}')}" for k, v in service.env)
            + f" {q(service.image or '')} >/dev/null || exit 125",
        ]
        if seed_name and service.seed_mount:
            lines.append(f'$ENGINE cp "$HERE/db/seed/{seed_name}" '
                         f'"$DB:{service.seed_mount}/{seed_name}" || exit 125')
        lines += [
            '$ENGINE start "$DB" >/dev/null || exit 125',
            "tries=0",
            f'until $ENGINE exec "$DB" {" ".join(q(a) for a in service.probe)} >/dev/null 2>&1; do',
            "  tries=$((tries + 1))",
            f'  if [ "$tries" -ge {int(service.timeout_s)} ]; then echo "runExperiment: database not ready" >&2; exit 124; fi',
            "  sleep 1",
            "done",
        ]
        run_args = ' --network "$NET"'
    env_pairs = list(service.client_env) if service is not None else []
    run_args += "".join(f" -e {q(f'{k}={v}')}" for k, v in env_pairs)
    lines.append("")
    lines.append("status=0")
    for cmd in commands:
        lines.append(f'$ENGINE run --rm{run_args} "$TAG" /bin/sh -c {q(cmd)}')
        lines.append("status=$?")
    lines.append('exit "$status"')
    return "\n".join(lines) + "\n"


def _bat_quote(arg: str) -> str:
    return '"' + arg.replace("%", "%%").replace('"', '\\"') + '"'


def render_bat(tag_id: str, commands: Sequence[str], service: DbServiceSpec | None = None,
               seed_name: str | None = None) -> str:
    lines = [
        "@echo off",
        "rem Re-executes the packaged experiment. Needs only a Docker-compatible engine.",
        "rem Set SCIREP_ENGINE to use another engine CLI (default: docker).",
        "setlocal",
        'set "HERE=%~dp0"',
        'if "%SCIREP_ENGINE%"=="" (set "ENGINE=docker") else (set "ENGINE=%SCIREP_ENGINE%")',
        f'set "TAG={tag_id}"',
        '%ENGINE% load -i "%HERE%image.tar" >nul',
        "if errorlevel 1 (echo runExperiment: cannot load image.tar 1>&2 & exit /b 125)",
    ]
    run_args = ""
    if service is not None and not service.no_service:
        lines += [
            'set "NET=scirep-net-%RANDOM%"',
            'set "DB=scirep-db-%RANDOM%"',
            '%ENGINE% load -i "%HERE%db\\image.tar" >nul',
            "if errorlevel 1 (echo runExperiment: cannot load db\\image.tar 1>&2 & exit /b 125)",
            "%ENGINE% network create %NET% >nul",
            f"%ENGINE% create --name %DB% --network %NET% --network-alias {service.network_alias}"
            + "".join(f" -e {_bat_quote(f'{k}={v}')}" for k, v in service.env)
            + f" {service.image} >nul",
        ]
        if seed_name and service.seed_mount:
            lines.append(f'%ENGINE% cp "%HERE%db\\seed\\{seed_name}" %DB%:{service.seed_mount}/{seed_name}')
        lines += [
            "%ENGINE% start %DB% >nul",
            "set /a TRIES=0",
            ":waitdb",
            f"%ENGINE% exec %DB% {' '.join(_bat_quote(a) for a in service.probe)} >nul 2>&1",
            "if not errorlevel 1 goto dbready",
            "set /a TRIES+=1",
            f"if %TRIES% geq {int(service.timeout_s)} (echo runExperiment: database not ready 1>&2 & set STATUS=124 & goto cleanup)",
            "timeout /t 1 /nobreak >nul",
            "goto waitdb",
            ":dbready",
        ]
        run_args = " --network %NET%"
    env_pairs = list(service.client_env) if service is not None else []
    run_args += "".join(f" -e {_bat_quote(f'{k}={v}')}" for k, v in env_pairs)
    lines.append("set STATUS=0")
    for cmd in commands:
        lines.append(f"%ENGINE% run --rm{run_args} %TAG% /bin/sh -c {_bat_quote(cmd)}")
        lines.append("set STATUS=%ERRORLEVEL%")
    lines.append(":cleanup")
    if service is not None and not service.no_service:
        lines.append("%ENGINE% rm -f %DB% >nul 2>&1")
        lines.append("%ENGINE% network rm %NET% >nul 2>&1")
    lines.append("if not defined SCIREP_NO_PAUSE pause")
    lines.append("exit /b %STATUS%")
    return "\r\n".join(lines) + "\r\n"


def _zip(members: dict[str, bytes]) -> bytes:
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        for name in sorted(members):
            info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
            info.create_system = 3
            mode = 0o755 if name.endswith((".sh", ".bat")) else 0o644
            info.external_attr = (0o100000 | mode) << 16
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, members[name])
    return buf.getvalue()


class Packager:
    def __init__(self, store: ProjectStore, engine: EngineClient, runner: ExperimentRunner) -> None:
        self.store = store
        self.engine = engine
        self.runner = runner

    def package(self, project_id: str, tag_id: str, commands: Sequence[str],
                db: DatabaseConfig | None = None, created_at: str | None = None) -> ArtifactPackage:
        project = self.store.get_project(project_id)
        commands = [c for c in commands if c and c.strip()]
        if not commands:
            raise UsageError("package needs at least one command")
        image_info = self.engine.inspect_image(tag_id)
        image_tar = self.engine.export_image(tag_id)
        members: dict[str, bytes] = {"image.tar": image_tar}

        service = plan_db_service(db) if db is not None else None
        seed_name = None
        if service is not None and not service.no_service:
            assert service.image is not None
            self.engine.ensure_image(service.image)
            members["db/image.tar"] = self.engine.export_image(service.image)
            if db is not None and db.seed_data:
                seed_name = PurePosixPath(db.seed_data).name
                members[f"db/seed/{seed_name}"] = self.store.read_file(project_id, db.seed_data)

        members["runExperiment.sh"] = render_sh(tag_id, commands, service, seed_name).encode()
        members["runExperiment.bat"] = render_bat(tag_id, commands, service, seed_name).encode()

        try:
            dockerfile = self.store.get_image(project_id, tag_id).dockerfile
        except ImageNotFound:
            # image built outside scirep
            dockerfile = None
        report = effective_report(self.store, project_id).to_dict()
        golden = self.runner.golden(project_id)
        manifest = {
            "format_version": FORMAT_VERSION,
            "created_at": _creation_time(created_at),
            "engine_version": self.engine.engine_health().get("version"),
            "project": project.to_dict(),
            "tag_id": tag_id,
            "image_id": image_info.get("Id"),
            "commands": commands,
            "database": db.to_dict() if db is not None else None,
            "db_service": service.to_dict() if service is not None else None,
            "dockerfile": dockerfile,
            "inference_report": report,
            "golden": None if golden is None else {
                "execution_id": golden.id,
                "command": golden.command,
                "exit_code": golden.exit_code,
                "console_sha256": _sha(golden.console_log),
            },
            "members": {name: _sha(data) for name, data in sorted(members.items())},
        }
        members["manifest.json"] = (json.dumps(manifest, sort_keys=True, indent=2) + "\n").encode()
        return ArtifactPackage(_zip(members), manifest)


@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""


@dataclass
class VerificationReport:
    checks: list[Check] = field(default_factory=list)
    manifest: dict[str, Any] = field(default_factory=dict)
    smoke_console: bytes | None = None

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    def to_dict(self) -> dict[str, Any]:
        return {"ok": self.ok,
                "checks": [{"name": c.name, "ok": c.ok, "detail": c.detail} for c in self.checks]}


def read_package(data: bytes) -> tuple[zipfile.ZipFile, dict[str, Any]]:
    try:
        zf = zipfile.ZipFile(io.BytesIO(data))
        names = set(zf.namelist())
    except zipfile.BadZipFile as exc:
        raise CorruptPackage(f"not a zip archive: {exc}") from exc
    for member in REQUIRED_MEMBERS:
        if member not in names:
            raise LayoutViolation(f"missing member {member}", member=member)
    try:
        manifest = json.loads(zf.read("manifest.json"))
    except (ValueError, zipfile.BadZipFile) as exc:
        raise CorruptPackage(f"unreadable manifest.json: {exc}") from exc
    for member in manifest.get("members", {}):
        if member not in names:
            raise LayoutViolation(f"missing member {member}", member=member)
    return zf, manifest


def verify_package(data: bytes, *, smoke: bool = False, engine: EngineClient | None = None) -> VerificationReport:
    """Check layout and checksums; with ``smoke`` also load and run the capsule."""
    zf, manifest = read_package(data)
    report = VerificationReport(manifest=manifest)
    declared: dict[str, str] = manifest.get("members", {})
    report.checks.append(Check("format_version", manifest.get("format_version") == FORMAT_VERSION,
                               str(manifest.get("format_version"))))
    for name in sorted(declared):
        try:
            actual = _sha(zf.read(name))
        except zipfile.BadZipFile as exc:
            report.checks.append(Check(f"checksum:{name}", False, str(exc)))
            continue
        report.checks.append(Check(f"checksum:{name}", actual == declared[name],
                                   "" if actual == declared[name] else f"expected {declared[name]}, got {actual}"))
    extra = sorted(set(zf.namelist()) - set(declared) - {"manifest.json"})
    report.checks.append(Check("no_undeclared_members", not extra, ", ".join(extra)))

    if smoke:
        if engine is None:
            raise UsageError("smoke run needs an engine")
        golden = manifest.get("golden")
        engine.load_image(zf.read("image.tar"))
        service = None
        seed = None
        if manifest.get("db_service"):
            service = DbServiceSpec.from_dict(manifest["db_service"])
            if not service.no_service:
                engine.load_image(zf.read("db/image.tar"))
                seeds = [n for n in zf.namelist() if n.startswith("db/seed/")]
                if seeds:
                    seed = (PurePosixPath(seeds[0]).name, zf.read(seeds[0]))
        console = b""
        for cmd in manifest.get("commands", []):
            result = engine.run_container(RunRequest(manifest["tag_id"], cmd, service, seed,
                                                     manifest.get("project", {}).get("id", "")))
            console += result.console_log
        report.smoke_console = console
        if golden is None:
            report.checks.append(Check("smoke_run", False, "manifest has no golden checksum"))
        else:
            got = _sha(console)
            report.checks.append(Check("smoke_run", got == golden["console_sha256"],
                                       f"console sha256 {got}"))
    return report
