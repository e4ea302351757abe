"""One facade over store, inference, envgen, engine, runner and packager.

Both the HTTP gateway and the CLI call these methods, so the JSON they emit
for the same operation is the same document.
"""

from __future__ import annotations

import json
import os
from collections.abc import Mapping, Sequence
from pathlib import Path
from typing import Any

from scirep.engine import EngineClient, RunRequest, engine_host_from_env, tag_from_name, validate_tag
from scirep.envgen import DatabaseConfig, plan_environment, render_dockerfile
from scirep.errors import UsageError
from scirep.inference import (
    InferenceReport,
    UserEdits,
    apply_overrides,
    effective_report,
    infer,
    save_overrides,
)
from scirep.packager import Packager, verify_package
from scirep.runner import ExperimentRunner
from scirep.store import ExperimentKind, ProjectStore

DEFAULT_STORAGE_ROOT = "~/.scirep"


def storage_root_from_env() -> Path:
    return Path(os.environ.get("SCIREP_STORAGE_ROOT") or DEFAULT_STORAGE_ROOT).expanduser()


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False, default=str)


def _db_from(raw: Mapping[str, Any] | None) -> DatabaseConfig | None:
    if not raw:
        return None
    return DatabaseConfig.from_dict(dict(raw))


class Scirep:
    def __init__(self, storage_root: str | os.PathLike[str] | None = None,
                 engine_host: str | None = None, *, engine: EngineClient | None = None,
                 store: ProjectStore | None = None) -> None:
        self.store = store or ProjectStore(Path(storage_root) if storage_root else storage_root_from_env())
        self.engine = engine or EngineClient(engine_host or engine_host_from_env())
        self.runner = ExperimentRunner(self.store, self.engine)
        self.packager = Packager(self.store, self.engine, self.runner)

    def close(self) -> None:
        self.engine.close()

    # -- projects and files --

    def create_project(self, name: str, description: str = "", experiment_kind: str = "standard",
                       seed: int | None = None) -> dict[str, Any]:
        try:
            kind = ExperimentKind(experiment_kind)
        except ValueError:
            raise UsageError(f"unknown experiment kind {experiment_kind!r}",
                             allowed=[k.value for k in ExperimentKind]) from None
        if seed is not None and (isinstance(seed, bool) or not isinstance(seed, int)):
            raise UsageError(f"seed must be an integer, got {seed!r}")
        project = self.store.create_project(name, description, kind, seed)
        return {"projectUuid": project.id, "project": project.to_dict()}

    def list_projects(self) -> dict[str, Any]:
        return {"projects": [p.to_dict() for p in self.store.list_projects()]}

    def tree(self, project_id: str) -> dict[str, Any]:
        return {"projectUuid": project_id, "tree": [e.to_dict() for e in self.store.get_tree(project_id)]}

    def upload_file(self, project_id: str, parent_dir: str, file_name: str, data: bytes) -> dict[str, Any]:
        entry = self.store.upload_file(project_id, parent_dir, file_name, data)
        return {"projectUuid": project_id, "entry": entry.to_dict()}

    def import_archive(self, project_id: str, data: bytes) -> dict[str, Any]:
        entries = self.store.import_archive(project_id, data)
        return {"projectUuid": project_id, "entries": [e.to_dict() for e in entries]}

    def import_remote(self, project_id: str, repository: str, location: str) -> dict[str, Any]:
        entries = self.store.import_remote(project_id, repository, location)
        project = self.store.get_project(project_id)
        return {"projectUuid": project_id, "entries": [e.to_dict() for e in entries],
                "commit": project.remote_commit}

    def manage_entry(self, project_id: str, action: str, path: str, new_path: str | None = None) -> dict[str, Any]:
        tree = self.store.manage_entry(project_id, action, path, new_path)
        return {"projectUuid": project_id, "tree": [e.to_dict() for e in tree]}

    def replace_dataset(self, project_id: str, replacements: Sequence[tuple[str, bytes]]) -> dict[str, Any]:
        tree = self.runner.replace_dataset(project_id, replacements)
        return {"projectUuid": project_id, "tree": [e.to_dict() for e in tree],
                "stale_images": [i.tag_id for i in self.store.list_images(project_id) if i.stale]}

    # -- inference --

    def infer(self, project_id: str) -> dict[str, Any]:
        infer(self.store, project_id)
        return {"projectUuid": project_id, "report": effective_report(self.store, project_id).to_dict()}

    def override(self, project_id: str, edits: Mapping[str, Any]) -> dict[str, Any]:
        report = save_overrides(self.store, project_id, UserEdits.from_dict(edits))
        return {"projectUuid": project_id, "report": report.to_dict()}

    # -- environment --

    def _current_report(self, project_id: str) -> InferenceReport:
        fresh = infer(self.store, project_id)
        raw = self.store.get_project_field(project_id, "overrides")
        return apply_overrides(fresh, UserEdits.from_dict(json.loads(raw))) if raw else fresh

    def plan(self, project_id: str, form: Mapping[str, Any] | None = None) -> dict[str, Any]:
        form = dict(form or {})
        project = self.store.get_project(project_id)
        db = _db_from(form.get("dbConfiguration"))
        if form.get("dockerfile"):
            return {"dockerfile": form["dockerfile"], "warnings": [], "db": db.to_dict() if db else None,
                    "environment": None}
        spec = plan_environment(
            self._current_report(project_id), project, db,
            build_commands=list(form.get("buildCommands", ())),
            base_image=form.get("baseImage") or "ubuntu:20.04",
            strict=bool(form.get("strict", False)),
        )
        return {"dockerfile": render_dockerfile(spec), "warnings": list(spec.warnings),
                "db": db.to_dict() if db else None, "environment": spec.to_dict()}

    def build(self, project_id: str, body: Mapping[str, Any] | None = None) -> dict[str, Any]:
        """Build the project's image.

        An empty body means: infer, plan and render. ``configurationForm`` may
        supply build commands, a base image, a tag, or a literal Dockerfile.
        """
        body = dict(body or {})
        form = dict(body.get("configurationForm") or {})
        if body.get("dbConfiguration") and body.get("DBhas", True):
            form.setdefault("dbConfiguration", body["dbConfiguration"])
        project = self.store.get_project(project_id)
        tag = validate_tag(form.get("tagId") or body.get("tagId") or tag_from_name(project.name))
        planned = self.plan(project_id, form)
        image = self.engine.build_image(project_id, planned["dockerfile"], tag, self.store.files_dir(project_id))
        locks = (planned["environment"] or {}).get("lock_commands") or {}
        lock_report = self._lock_report(project_id, tag, locks) if locks else None
        self.store.record_image(project_id, tag, image.engine_image_id, image.built_at,
                                image.build_log_digest, planned["dockerfile"], lock_report)
        if planned["db"] is not None:
            self.store.set_project_fields(project_id, db_config=json.dumps(planned["db"], sort_keys=True))
        return {"projectUuid": project_id, "imageId": image.engine_image_id, "tagId": tag,
                "dockerfile": planned["dockerfile"], "warnings": planned["warnings"],
                "buildLogDigest": image.build_log_digest, "lockReport": lock_report}

    def _lock_report(self, project_id: str, tag: str, locks: Mapping[str, str]) -> dict[str, str]:
        """Record what the package managers actually resolved for unpinned packages."""
        out = {}
        for lang, command in sorted(locks.items()):
            result = self.engine.run_container(RunRequest(tag, command, project_id=project_id))
            text = result.console_log.decode("utf-8", errors="replace")
            out[lang] = text if result.exit_code == 0 else f"lock command failed ({result.exit_code}):\n{text}"
        return out

    def _stored_db(self, project_id: str) -> DatabaseConfig | None:
        raw = self.store.get_project_field(project_id, "db_config")
        return DatabaseConfig.from_dict(json.loads(raw)) if raw else None

    # -- execution --

    def run(self, project_id: str, tag_id: str, command: str, db_configuration: Mapping[str, Any] | None = None,
            normalizers: Sequence[str] = (), network_none: bool = False) -> dict[str, Any]:
        if not tag_id or not command:
            raise UsageError("run-container needs tagId and command")
        db = _db_from(db_configuration) or self._stored_db(project_id)
        record = self.runner.execute(project_id, tag_id, command, db=db, normalizers=normalizers,
                                     network_none=network_none)
        return {
            "projectUuid": project_id,
            "executionId": record.id,
            "exitCode": record.exit_code,
            "logs": record.console_log.decode("utf-8", errors="replace"),
            "replication": record.replication,
            "validation": record.validation.to_dict() if record.validation else None,
        }

    def executions(self, project_id: str) -> dict[str, Any]:
        return {"projectUuid": project_id,
                "executions": [r.to_dict() for r in self.runner.list_executions(project_id)]}

    def mark_golden(self, project_id: str, execution_id: str) -> dict[str, Any]:
        self.runner.mark_golden(project_id, execution_id)
        return {"projectUuid": project_id, "golden": execution_id}

    def validate(self, project_id: str, execution_id: str, normalizers: Sequence[str] = ()) -> dict[str, Any]:
        try:
            result = self.runner.validate_execution(project_id, execution_id, normalizers)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        return {"projectUuid": project_id, "executionId": execution_id, "validation": result.to_dict()}

    # -- packaging --

    def package(self, project_id: str, tag_id: str | None, commands: Sequence[str],
                db_configuration: Mapping[str, Any] | None = None, created_at: str | None = None) -> bytes:
        if not tag_id:
            images = self.store.list_images(project_id)
            if len(images) != 1:
                raise UsageError("tagId is required when the project has zero or several images")
            tag_id = images[0].tag_id
        if not commands:
            golden = self.runner.golden(project_id)
            if golden is None:
                raise UsageError("commands are required when no golden execution exists")
            commands = [golden.command]
        db = _db_from(db_configuration) or self._stored_db(project_id)
        return self.packager.package(project_id, tag_id, list(commands), db, created_at).data

    def verify(self, data: bytes, smoke: bool = False) -> dict[str, Any]:
        report = verify_package(data, smoke=smoke, engine=self.engine if smoke else None)
        return report.to_dict()

    def health(self) -> dict[str, Any]:
        return {"status": "ok", "engine": self.engine.engine_health(), "storage_root": str(self.store.root)}
