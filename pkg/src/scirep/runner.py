"""Executions, golden runs and reproducibility validation.

Run evidence lives under ``<storage_root>/<project>/runs/<execution_id>/``::

    record.json    metadata, deterministic key order
    console.log    raw console bytes
    files/...      files the run created or changed in the workdir
"""

from __future__ import annotations

import difflib
import enum
import hashlib
import json
import re
import uuid
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from scirep.engine import EngineClient, ImageRef, RunRequest, RunResult
from scirep.envgen import DatabaseConfig, plan_db_service
from scirep.errors import ExecutionNotFound, ScirepError, StaleImage
from scirep.store import FileEntry, ProjectStore, normalize_relpath


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds")


# -- normalizers --

_ISO8601 = re.compile(
    r"\d{4}-\d{2}-\d{2}[T ]\d{2}:\d{2}(?::\d{2}(?:[.,]\d+)?)?(?:Z|[+-]\d{2}:?\d{2})?"
)
_TEMP_PATH = re.compile(r"(?:/tmp|/var/tmp|/var/folders|/private/var/folders)/[^\s'\":]*")


@dataclass(frozen=True)
class Normalizer:
    """A recorded, explicitly enabled rewrite applied to console text before comparison."""

    name: str
    pattern: str | None = None

    def apply(self, text: str) -> str:
        if self.name == "timestamps":
            return _ISO8601.sub("<TIMESTAMP>", text)
        if self.name == "temp_paths":
            return _TEMP_PATH.sub("<TMP>", text)
        if self.name == "regex":
            rx = re.compile(self.pattern or "")
            return "".join(line for line in text.splitlines(keepends=True) if not rx.search(line))
        raise ValueError(f"unknown normalizer {self.name!r}")

    @property
    def label(self) -> str:
        return f"regex:{self.pattern}" if self.name == "regex" else self.name

    @classmethod
    def parse(cls, spec: str | Normalizer) -> Normalizer:
        if isinstance(spec, Normalizer):
            return spec
        if spec.startswith("regex:"):
            re.compile(spec[len("regex:"):])
            return cls("regex", spec[len("regex:"):])
        if spec in ("timestamps", "temp_paths"):
            return cls(spec)
        raise ValueError(f"unknown normalizer {spec!r}")


def normalize(data: bytes, normalizers: Sequence[Normalizer]) -> bytes:
    if not normalizers:
        return data
    text = data.decode("utf-8", errors="surrogateescape")
    for n in normalizers:
        text = n.apply(text)
    return text.encode("utf-8", errors="surrogateescape")


# -- records --


class ValidationStatus(str, enum.Enum):
    Reproduced = "Reproduced"
    NotReproduced = "NotReproduced"
    NoGolden = "NoGolden"


class FileDiffKind(str, enum.Enum):
    missing = "missing"
    extra = "extra"
    content_mismatch = "content_mismatch"


@dataclass(frozen=True)
class ConsoleDiff:
    first_divergent_line: int  # 1-based
    unified_diff: str

    def to_dict(self) -> dict[str, Any]:
        return {"first_divergent_line": self.first_divergent_line, "unified_diff": self.unified_diff}


@dataclass(frozen=True)
class ValidationResult:
    status: ValidationStatus
    console_diff: ConsoleDiff | None = None
    file_diffs: tuple[tuple[str, FileDiffKind], ...] = ()
    normalization: tuple[str, ...] = ()
    golden_id: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "status": self.status.value,
            "console_diff": self.console_diff.to_dict() if self.console_diff else None,
            "file_diffs": [{"path": p, "kind": k.value} for p, k in self.file_diffs],
            "normalization": list(self.normalization),
            "golden_id": self.golden_id,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ValidationResult:
        cd = d.get("console_diff")
        return cls(
            ValidationStatus(d["status"]),
            ConsoleDiff(cd["first_divergent_line"], cd["unified_diff"]) if cd else None,
            tuple((f["path"], FileDiffKind(f["kind"])) for f in d.get("file_diffs", ())),
            tuple(d.get("normalization", ())),
            d.get("golden_id"),
        )


@dataclass(frozen=True)
class ExecutionRecord:
    id: str
    project_id: str
    image: ImageRef
    command: str
    started: str
    finished: str
    result: RunResult | None
    golden: bool = False
    replication: bool = False
    validation: ValidationResult | None = None
    error: dict[str, Any] | None = None
    seq: int = 0

    @property
    def console_log(self) -> bytes:
        return self.result.console_log if self.result else b""

    @property
    def exit_code(self) -> int | None:
        return self.result.exit_code if self.result else None

    @property
    def file_hashes(self) -> dict[str, str]:
        if self.result is None:
            return {}
        return {p: _sha(b) for p, b in self.result.changed_files}

    def to_dict(self) -> dict[str, Any]:
        r = self.result
        return {
            "id": self.id,
            "project_id": self.project_id,
            "seq": self.seq,
            "image": self.image.to_dict(),
            "command": self.command,
            "started": self.started,
            "finished": self.finished,
            "golden": self.golden,
            "replication": self.replication,
            "exit_code": r.exit_code if r else None,
            "wall_time": r.wall_time if r else None,
            "console_sha256": _sha(r.console_log) if r else None,
            "files": [{"path": p, "sha256": _sha(b), "size": len(b)} for p, b in r.changed_files] if r else [],
            "command_started_at": r.started_at if r else None,
            "db_ready_at": r.db_ready_at if r else None,
            "workdir": r.workdir if r else None,
            "validation": self.validation.to_dict() if self.validation else None,
            "error": self.error,
        }


def _console_diff(golden: bytes, candidate: bytes) -> ConsoleDiff | None:
    if golden == candidate:
        return None
    g = golden.decode("utf-8", errors="replace").splitlines(keepends=True)
    c = candidate.decode("utf-8", errors="replace").splitlines(keepends=True)
    first = next((i for i, (a, b) in enumerate(zip(g, c)) if a != b), min(len(g), len(c)))
    if first == min(len(g), len(c)) and len(g) == len(c):
        # decoded lines agree but bytes differ (invalid UTF-8 or line endings)
        first = next((i for i, (a, b) in enumerate(zip(golden.splitlines(True), candidate.splitlines(True)))
                      if a != b), 0)
    diff = "".join(difflib.unified_diff(g, c, "golden", "candidate", n=3))
    return ConsoleDiff(first + 1, diff)


def validate(candidate: ExecutionRecord, golden: ExecutionRecord,
             normalizers: Iterable[str | Normalizer] = ()) -> ValidationResult:
    """Compare a run with the golden run.

    Console logs are byte-compared after applying ``normalizers`` in order;
    output files are compared by path and content hash.
    """
    norms = [Normalizer.parse(n) for n in normalizers]
    cdiff = _console_diff(normalize(golden.console_log, norms), normalize(candidate.console_log, norms))
    g, c = golden.file_hashes, candidate.file_hashes
    diffs = [(p, FileDiffKind.missing) for p in g.keys() - c.keys()]
    diffs += [(p, FileDiffKind.extra) for p in c.keys() - g.keys()]
    diffs += [(p, FileDiffKind.content_mismatch) for p in g.keys() & c.keys() if g[p] != c[p]]
    status = ValidationStatus.Reproduced if cdiff is None and not diffs else ValidationStatus.NotReproduced
    return ValidationResult(status, cdiff, tuple(sorted(diffs)), tuple(n.label for n in norms), golden.id)


class ExperimentRunner:
    def __init__(self, store: ProjectStore, engine: EngineClient) -> None:
        self.store = store
        self.engine = engine

    def _run_dir(self, project_id: str, execution_id: str) -> Path:
        return self.store.runs_dir(project_id) / execution_id

    def _write_record(self, record: ExecutionRecord) -> None:
        run_dir = self._run_dir(record.project_id, record.id)
        run_dir.mkdir(parents=True, exist_ok=True)
        if record.result is not None:
            (run_dir / "console.log").write_bytes(record.result.console_log)
            for path, data in record.result.changed_files:
                target = run_dir / "files" / normalize_relpath(path)
                target.parent.mkdir(parents=True, exist_ok=True)
                target.write_bytes(data)
        tmp = run_dir / "record.json.tmp"
        tmp.write_text(json.dumps(record.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
        tmp.replace(run_dir / "record.json")

    def _persist(self, record: ExecutionRecord) -> ExecutionRecord:
        with self.store.transaction() as conn:
            seq = conn.execute("SELECT COALESCE(MAX(seq), 0) + 1 FROM executions WHERE project_id = ?",
                               (record.project_id,)).fetchone()[0]
            record = replace(record, seq=seq)
            # evidence goes to disk before the row becomes visible to readers
            self._write_record(record)
            conn.execute("INSERT INTO executions (id, project_id, seq, golden, replication) VALUES (?, ?, ?, 0, ?)",
                         (record.id, record.project_id, seq, int(record.replication)))
        return record

    def execute(self, project_id: str, tag_id: str, command: str, *, db: DatabaseConfig | None = None,
                normalizers: Iterable[str | Normalizer] = (), validate_replication: bool = False,
                network_none: bool = False) -> ExecutionRecord:
        """Run ``command`` in the project's image and persist the evidence.

        A nonzero exit code is recorded, not raised. Backend failures are
        recorded too and then re-raised. When a golden run exists the new
        record is validated against it, except for replication runs unless
        ``validate_replication`` is set.
        """
        project = self.store.get_project(project_id)
        image_rec = self.store.get_image(project_id, tag_id)
        if image_rec.stale:
            raise StaleImage(f"image {tag_id!r} predates a dataset change; rebuild it", tag_id=tag_id)
        image = ImageRef(image_rec.tag_id, image_rec.engine_image_id, image_rec.built_at,
                         image_rec.build_log_digest)
        service = seed = None
        if db is not None:
            service = plan_db_service(db)
            if db.seed_data and not service.no_service:
                seed = (db.seed_data, self.store.read_file(project_id, db.seed_data))
        env = (("SEED", str(project.seed)),) if project.seed is not None else ()
        request = RunRequest(tag_id, command, service, seed, project_id, env, network_none)
        execution_id = str(uuid.uuid4())
        started = _now()
        try:
            result = self.engine.run_container(request)
        except ScirepError as exc:
            self._persist(ExecutionRecord(execution_id, project_id, image, command, started, _now(), None,
                                          replication=project.replication, error=exc.to_dict()))
            raise
        record = ExecutionRecord(execution_id, project_id, image, command, started, _now(), result,
                                 replication=project.replication)
        golden = self.golden(project_id)
        if golden is not None and (not project.replication or validate_replication):
            record = replace(record, validation=validate(record, golden, normalizers))
        return self._persist(record)

    def _load(self, project_id: str, execution_id: str, golden: bool, seq: int) -> ExecutionRecord:
        run_dir = self._run_dir(project_id, execution_id)
        raw = json.loads((run_dir / "record.json").read_text(encoding="utf-8"))
        result = None
        if raw["exit_code"] is not None:
            files = tuple((f["path"], (run_dir / "files" / f["path"]).read_bytes()) for f in raw["files"])
            result = RunResult(raw["exit_code"], (run_dir / "console.log").read_bytes(), raw["wall_time"],
                               files, raw.get("command_started_at") or "", raw["finished"],
                               raw.get("db_ready_at"), raw.get("workdir") or "")
        img = raw["image"]
        return ExecutionRecord(
            raw["id"], raw["project_id"],
            ImageRef(img["tag_id"], img["engine_image_id"], img["built_at"], img["build_log_digest"]),
            raw["command"], raw["started"], raw["finished"], result, golden, raw["replication"],
            ValidationResult.from_dict(raw["validation"]) if raw.get("validation") else None,
            raw.get("error"), seq,
        )

    def get_execution(self, project_id: str, execution_id: str) -> ExecutionRecord:
        self.store.get_project(project_id)
        with self.store.transaction() as conn:
            row = conn.execute("SELECT golden, seq FROM executions WHERE id = ? AND project_id = ?",
                               (execution_id, project_id)).fetchone()
        if row is None:
            raise ExecutionNotFound(f"no execution {execution_id!r} in project {project_id}",
                                    execution_id=execution_id)
        return self._load(project_id, execution_id, bool(row["golden"]), row["seq"])

    def list_executions(self, project_id: str) -> list[ExecutionRecord]:
        self.store.get_project(project_id)
        with self.store.transaction() as conn:
            rows = conn.execute("SELECT id, golden, seq FROM executions WHERE project_id = ? ORDER BY seq",
                                (project_id,)).fetchall()
        return [self._load(project_id, r["id"], bool(r["golden"]), r["seq"]) for r in rows]

    def golden(self, project_id: str) -> ExecutionRecord | None:
        with self.store.transaction() as conn:
            row = conn.execute("SELECT id, seq FROM executions WHERE project_id = ? AND golden = 1",
                               (project_id,)).fetchone()
        return None if row is None else self._load(project_id, row["id"], True, row["seq"])

    def mark_golden(self, project_id: str, execution_id: str) -> None:
        self.store.get_project(project_id)
        with self.store.lock(project_id):
            with self.store.transaction() as conn:
                exists = conn.execute("SELECT 1 FROM executions WHERE id = ? AND project_id = ?",
                                      (execution_id, project_id)).fetchone()
                if exists is None:
                    raise ExecutionNotFound(f"no execution {execution_id!r} in project {project_id}",
                                            execution_id=execution_id)
                previous = [r[0] for r in conn.execute(
                    "SELECT id FROM executions WHERE project_id = ? AND golden = 1", (project_id,))]
                conn.execute("UPDATE executions SET golden = (id = ?) WHERE project_id = ?",
                             (execution_id, project_id))
            for eid in {*previous, execution_id}:
                self._write_record(self.get_execution(project_id, eid))

    def validate_execution(self, project_id: str, execution_id: str,
                           normalizers: Iterable[str | Normalizer] = ()) -> ValidationResult:
        candidate = self.get_execution(project_id, execution_id)
        golden = self.golden(project_id)
        if golden is None:
            return ValidationResult(ValidationStatus.NoGolden,
                                    normalization=tuple(Normalizer.parse(n).label for n in normalizers))
        return validate(candidate, golden, normalizers)

    def replace_dataset(self, project_id: str, replacements: Iterable[tuple[str, bytes]]) -> list[FileEntry]:
        """Swap dataset contents in place; later runs count as replication runs.

        Every image of the project becomes stale until rebuilt, since the
        dataset is baked into the image at build time.
        """
        with self.store.lock(project_id):
            tree = self.store.replace_contents(project_id, list(replacements))
            self.store.mark_images_stale(project_id)
            self.store.set_project_fields(project_id, replication=1)
        return tree

