"""Project store: metadata in SQLite, file bytes on disk.

Layout under the storage root::

    scirep.db
    <project_id>/files/...   experiment tree
    <project_id>/runs/...    execution outputs (owned by the runner)
"""

from __future__ import annotations

import contextlib
import enum
import hashlib
import io
import json
import os
import re
import shutil
import sqlite3
import stat
import subprocess
import tempfile
import threading
import uuid
import zipfile
from collections.abc import Iterable, Iterator
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path, PurePosixPath
from typing import Any

import httpx

from scirep.errors import (
    CorruptArchive,
    DestinationExists,
    EmptyName,
    ImageNotFound,
    InvalidPath,
    ParentNotADirectory,
    PathNotFound,
    ProjectNotFound,
    RemoteUnreachable,
    SeedMissingForAiKind,
    UnsupportedRepositoryKind,
    ZipSlipDetected,
)

SCHEMA = """
CREATE TABLE IF NOT EXISTS projects (
    id TEXT PRIMARY KEY,
    name TEXT NOT NULL,
    description TEXT NOT NULL,
    experiment_kind TEXT NOT NULL,
    seed INTEGER,
    created_at TEXT NOT NULL,
    remote_kind TEXT,
    remote_location TEXT,
    remote_commit TEXT,
    replication INTEGER NOT NULL DEFAULT 0,
    report TEXT,
    overrides TEXT,
    db_config TEXT,
    deleted INTEGER NOT NULL DEFAULT 0
);
CREATE TABLE IF NOT EXISTS files (
    project_id TEXT NOT NULL,
    path TEXT NOT NULL,
    kind TEXT NOT NULL,
    size INTEGER NOT NULL,
    checksum TEXT,
    PRIMARY KEY (project_id, path)
);
CREATE TABLE IF NOT EXISTS images (
    project_id TEXT NOT NULL,
    tag_id TEXT NOT NULL,
    engine_image_id TEXT NOT NULL,
    built_at TEXT NOT NULL,
    build_log_digest TEXT NOT NULL,
    dockerfile TEXT NOT NULL,
    stale INTEGER NOT NULL DEFAULT 0,
    lock_report TEXT,
    PRIMARY KEY (project_id, tag_id)
);
CREATE TABLE IF NOT EXISTS executions (
    id TEXT PRIMARY KEY,
    project_id TEXT NOT NULL,
    seq INTEGER NOT NULL,
    golden INTEGER NOT NULL DEFAULT 0,
    replication INTEGER NOT NULL DEFAULT 0
);
"""

_READABLE_FIELDS = frozenset({
    "name", "description", "experiment_kind", "seed", "created_at", "remote_kind",
    "remote_location", "remote_commit", "replication", "report", "overrides", "db_config",
})

_GIT_URL = re.compile(r"^(?:(?:https?|ssh|git|file)://\S+|[\w.-]+@[\w.-]+:\S+)$")
_ZENODO_ID = re.compile(r"(?:zenodo\.|/records?/)(\d+)")


class ExperimentKind(str, enum.Enum):
    standard = "standard"
    ai_nondeterministic = "ai_nondeterministic"


class RepositoryKind(str, enum.Enum):
    github = "github"
    zenodo_like = "zenodo_like"

    @classmethod
    def parse(cls, value: str) -> RepositoryKind:
        aliases = {"github": cls.github, "git": cls.github, "zenodo": cls.zenodo_like,
                   "zenodo_like": cls.zenodo_like, "figshare": cls.zenodo_like}
        try:
            return aliases[value.strip().lower()]
        except KeyError:
            raise UnsupportedRepositoryKind(f"unsupported repository kind {value!r}") from None


@dataclass(frozen=True)
class Project:
    id: str
    name: str
    description: str
    experiment_kind: ExperimentKind
    seed: int | None
    created_at: str
    root: Path
    remote_location: str | None = None
    remote_commit: str | None = None
    replication: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "name": self.name,
            "description": self.description,
            "experiment_kind": self.experiment_kind.value,
            "seed": self.seed,
            "created_at": self.created_at,
            "remote_location": self.remote_location,
            "remote_commit": self.remote_commit,
            "replication": self.replication,
        }


@dataclass(frozen=True)
class FileEntry:
    path: str
    kind: str  # "file" | "directory"
    size: int
    checksum: str | None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class ImageRecord:
    project_id: str
    tag_id: str
    engine_image_id: str
    built_at: str
    build_log_digest: str
    dockerfile: str
    stale: bool
    # language -> resolved package versions captured after the build
    lock_report: dict[str, str] | None = None


def utcnow() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def normalize_relpath(path: str) -> str:
    """Normalize a project-relative path, rejecting anything that could escape.

    Backslashes count as separators so archives made on Windows cannot sneak
    ``..\\`` past the check. The empty string denotes the project root.
    """
    if "\x00" in path:
        raise InvalidPath("NUL byte in path", path=path)
    p = path.replace("\\", "/")
    if p.startswith("/") or re.match(r"^[A-Za-z]:", p):
        raise InvalidPath(f"absolute path not allowed: {path!r}", path=path)
    parts = [s for s in p.split("/") if s not in ("", ".")]
    if ".." in parts:
        raise InvalidPath(f"parent traversal not allowed: {path!r}", path=path)
    return "/".join(parts)


def _parents(path: str) -> list[str]:
    parts = path.split("/")
    return ["/".join(parts[:i]) for i in range(1, len(parts))]


class ProjectStore:
    def __init__(self, root: str | os.PathLike[str], http_client: httpx.Client | None = None,
                 zenodo_api: str = "https://zenodo.org") -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.db_path = self.root / "scirep.db"
        self._http = http_client
        self.zenodo_api = zenodo_api.rstrip("/")
        self._locks: dict[str, threading.RLock] = {}
        self._locks_guard = threading.Lock()
        with self._connect() as conn:
            conn.executescript(SCHEMA)

    # -- plumbing --

    @contextlib.contextmanager
    def _connect(self) -> Iterator[sqlite3.Connection]:
        conn = sqlite3.connect(self.db_path, timeout=30, isolation_level=None)
        conn.row_factory = sqlite3.Row
        conn.execute("PRAGMA journal_mode=WAL")
        try:
            yield conn
        finally:
            conn.close()

    @contextlib.contextmanager
    def transaction(self) -> Iterator[sqlite3.Connection]:
        with self._connect() as conn:
            conn.execute("BEGIN IMMEDIATE")
            try:
                yield conn
            except BaseException:
                conn.execute("ROLLBACK")
                raise
            conn.execute("COMMIT")

    def lock(self, project_id: str) -> threading.RLock:
        """Per-project write lock; different projects never contend."""
        with self._locks_guard:
            return self._locks.setdefault(project_id, threading.RLock())

    def project_dir(self, project_id: str) -> Path:
        return self.root / project_id

    def files_dir(self, project_id: str) -> Path:
        return self.project_dir(project_id) / "files"

    def runs_dir(self, project_id: str) -> Path:
        return self.project_dir(project_id) / "runs"

    def _row_to_project(self, row: sqlite3.Row) -> Project:
        return Project(
            id=row["id"],
            name=row["name"],
            description=row["description"],
            experiment_kind=ExperimentKind(row["experiment_kind"]),
            seed=row["seed"],
            created_at=row["created_at"],
            root=self.files_dir(row["id"]),
            remote_location=row["remote_location"],
            remote_commit=row["remote_commit"],
            replication=bool(row["replication"]),
        )

    # -- projects --

    def create_project(self, name: str, description: str = "",
                       experiment_kind: ExperimentKind | str = ExperimentKind.standard,
                       seed: int | None = None) -> Project:
        if not name or not name.strip():
            raise EmptyName("project name must be non-empty")
        kind = ExperimentKind(experiment_kind)
        if kind is ExperimentKind.ai_nondeterministic and seed is None:
            raise SeedMissingForAiKind("ai_nondeterministic projects need a seed")
        if kind is ExperimentKind.standard and seed is not None:
            raise SeedMissingForAiKind("a seed is only meaningful for ai_nondeterministic projects")
        project_id = str(uuid.uuid4())
        created = utcnow()
        self.files_dir(project_id).mkdir(parents=True)
        self.runs_dir(project_id).mkdir()
        with self.transaction() as conn:
            conn.execute(
                "INSERT INTO projects (id, name, description, experiment_kind, seed, created_at)"
                " VALUES (?, ?, ?, ?, ?, ?)",
                (project_id, name, description, kind.value, seed, created),
            )
        return self.get_project(project_id)

    def get_project(self, project_id: str) -> Project:
        with self._connect() as conn:
            row = conn.execute(
                "SELECT * FROM projects WHERE id = ? AND deleted = 0", (project_id,)
            ).fetchone()
        if row is None:
            raise ProjectNotFound(f"no project {project_id!r}", project_id=project_id)
        return self._row_to_project(row)

    def list_projects(self) -> list[Project]:
        with self._connect() as conn:
            rows = conn.execute(
                "SELECT * FROM projects WHERE deleted = 0 ORDER BY created_at, id"
            ).fetchall()
        return [self._row_to_project(r) for r in rows]

    def delete_project(self, project_id: str) -> None:
        self.get_project(project_id)
        with self.lock(project_id):
            with self.transaction() as conn:
                # the row stays as a tombstone so the id is never handed out again
                conn.execute("UPDATE projects SET deleted = 1 WHERE id = ?", (project_id,))
                conn.execute("DELETE FROM files WHERE project_id = ?", (project_id,))
                conn.execute("DELETE FROM images WHERE project_id = ?", (project_id,))
            shutil.rmtree(self.project_dir(project_id), ignore_errors=True)

    def set_project_fields(self, project_id: str, **fields: Any) -> None:
        allowed = {"remote_kind", "remote_location", "remote_commit", "replication",
                   "report", "overrides", "db_config"}
        unknown = set(fields) - allowed
        if unknown:
            raise ValueError(f"not settable: {sorted(unknown)}")
        self.get_project(project_id)
        cols = ", ".join(f"{k} = ?" for k in fields)
        with self.transaction() as conn:
            conn.execute(f"UPDATE projects SET {cols} WHERE id = ?", (*fields.values(), project_id))

    def get_project_field(self, project_id: str, field: str) -> Any:
        if field not in _READABLE_FIELDS:
            raise ValueError(f"unknown project field {field!r}")
        self.get_project(project_id)
        with self._connect() as conn:
            row = conn.execute(f"SELECT {field} FROM projects WHERE id = ?", (project_id,)).fetchone()
        return row[0]

    # -- tree reads --

    def get_tree(self, project_id: str) -> list[FileEntry]:
        self.get_project(project_id)
        with self._connect() as conn:
            rows = conn.execute(
                "SELECT path, kind, size, checksum FROM files WHERE project_id = ? ORDER BY path",
                (project_id,),
            ).fetchall()
        return [FileEntry(r["path"], r["kind"], r["size"], r["checksum"]) for r in rows]

    def read_file(self, project_id: str, path: str) -> bytes:
        rel = normalize_relpath(path)
        entry = self._entry(project_id, rel)
        if entry is None or entry.kind != "file":
            raise PathNotFound(f"no file {rel!r}", path=rel)
        return (self.files_dir(project_id) / rel).read_bytes()

    def tree_digest(self, project_id: str) -> str:
        h = hashlib.sha256()
        for e in self.get_tree(project_id):
            h.update(f"{e.path}\0{e.kind}\0{e.checksum or ''}\n".encode())
        return h.hexdigest()

    def _entry(self, project_id: str, rel: str, conn: sqlite3.Connection | None = None) -> FileEntry | None:
        if conn is None:
            with self._connect() as c:
                return self._entry(project_id, rel, c)
        row = conn.execute(
            "SELECT path, kind, size, checksum FROM files WHERE project_id = ? AND path = ?",
            (project_id, rel),
        ).fetchone()
        return None if row is None else FileEntry(row["path"], row["kind"], row["size"], row["checksum"])

    # -- tree writes --

    def _ensure_dirs(self, conn: sqlite3.Connection, project_id: str, rel: str) -> list[FileEntry]:
        """Create ``rel``'s ancestors as directories; fail if one is a file."""
        created = []
        base = self.files_dir(project_id)
        for parent in _parents(rel):
            entry = self._entry(project_id, parent, conn)
            if entry is None:
                (base / parent).mkdir(exist_ok=True)
                conn.execute(
                    "INSERT INTO files (project_id, path, kind, size, checksum) VALUES (?, ?, 'directory', 0, NULL)",
                    (project_id, parent),
                )
                created.append(FileEntry(parent, "directory", 0, None))
            elif entry.kind != "directory":
                raise ParentNotADirectory(f"{parent!r} is a file", path=parent)
        return created

    def _write(self, conn: sqlite3.Connection, project_id: str, rel: str, data: bytes) -> FileEntry:
        if not rel:
            raise InvalidPath("empty file path")
        existing = self._entry(project_id, rel, conn)
        if existing is not None and existing.kind == "directory":
            raise DestinationExists(f"{rel!r} is a directory", path=rel)
        self._ensure_dirs(conn, project_id, rel)
        target = self.files_dir(project_id) / rel
        fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=".upload-")
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, target)
        entry = FileEntry(rel, "file", len(data), sha256_hex(data))
        conn.execute(
            "INSERT OR REPLACE INTO files (project_id, path, kind, size, checksum) VALUES (?, ?, 'file', ?, ?)",
            (project_id, rel, entry.size, entry.checksum),
        )
        return entry

    def upload_file(self, project_id: str, parent_dir: str, file_name: str, data: bytes) -> FileEntry:
        self.get_project(project_id)
        parent = normalize_relpath(parent_dir)
        if not file_name or "/" in file_name.replace("\\", "/") or file_name in (".", ".."):
            raise InvalidPath(f"invalid file name {file_name!r}", path=file_name)
        rel = normalize_relpath(f"{parent}/{file_name}" if parent else file_name)
        with self.lock(project_id), self.transaction() as conn:
            if parent:
                entry = self._entry(project_id, parent, conn)
                if entry is not None and entry.kind != "directory":
                    raise ParentNotADirectory(f"{parent!r} is a file", path=parent)
            return self._write(conn, project_id, rel, data)

    def write_files(self, project_id: str, files: Iterable[tuple[str, bytes]]) -> list[FileEntry]:
        """Write many files in one transaction (paths normalized and checked up front)."""
        self.get_project(project_id)
        staged = [(normalize_relpath(p), d) for p, d in files]
        with self.lock(project_id), self.transaction() as conn:
            out: list[FileEntry] = []
            for rel, data in staged:
                out.extend(self._ensure_dirs(conn, project_id, rel))
                out.append(self._write(conn, project_id, rel, data))
            return out

    def import_archive(self, project_id: str, zip_bytes: bytes) -> list[FileEntry]:
        self.get_project(project_id)
        try:
            zf = zipfile.ZipFile(io.BytesIO(zip_bytes))
            bad = zf.testzip()
        except (zipfile.BadZipFile, zipfile.LargeZipFile, EOFError, OSError) as exc:
            raise CorruptArchive(f"not a readable zip archive: {exc}") from exc
        if bad is not None:
            raise CorruptArchive(f"corrupt member {bad!r}", member=bad)
        members: list[tuple[str, bool, zipfile.ZipInfo]] = []
        for info in zf.infolist():
            mode = info.external_attr >> 16
            if stat.S_ISLNK(mode):
                raise ZipSlipDetected(f"symlink member {info.filename!r}", member=info.filename)
            try:
                rel = normalize_relpath(info.filename)
            except InvalidPath:
                raise ZipSlipDetected(f"member escapes project root: {info.filename!r}",
                                      member=info.filename) from None
            if not rel:
                continue
            members.append((rel, info.is_dir(), info))
        files = {rel for rel, is_dir, _ in members if not is_dir}
        for rel in files:
            for parent in _parents(rel):
                if parent in files:
                    raise CorruptArchive(f"{parent!r} is both a file and a directory", member=parent)
        with self.lock(project_id), self.transaction() as conn:
            created: list[FileEntry] = []
            for rel, is_dir, info in sorted(members, key=lambda m: m[0]):
                if is_dir:
                    created.extend(self._mkdir(conn, project_id, rel, exist_ok=True))
                else:
                    created.extend(self._ensure_dirs(conn, project_id, rel))
                    created.append(self._write(conn, project_id, rel, zf.read(info)))
        return sorted(set(created), key=lambda e: e.path)

    def import_remote(self, project_id: str, repository_kind: RepositoryKind | str,
                      location: str) -> list[FileEntry]:
        self.get_project(project_id)
        kind = repository_kind if isinstance(repository_kind, RepositoryKind) else RepositoryKind.parse(repository_kind)
        location = location.strip()
        if kind is RepositoryKind.github:
            if not _GIT_URL.match(location):
                raise UnsupportedRepositoryKind(f"malformed repository location {location!r}",
                                                location=location)
            files, commit = self._clone(location)
        else:
            match = _ZENODO_ID.search(location)
            if not match:
                raise UnsupportedRepositoryKind(f"cannot find a record id in {location!r}",
                                                location=location)
            files, commit = self._fetch_record(match.group(1)), None
        entries: list[FileEntry] = []
        archives = [(p, d) for p, d in files if kind is RepositoryKind.zenodo_like and p.endswith(".zip")]
        plain = [(p, d) for p, d in files if (p, d) not in archives]
        with self.lock(project_id):
            entries.extend(self.write_files(project_id, plain))
            for _, data in archives:
                entries.extend(self.import_archive(project_id, data))
            self.set_project_fields(project_id, remote_kind=kind.value,
                                    remote_location=location, remote_commit=commit)
        return sorted(set(entries), key=lambda e: e.path)

    def _clone(self, location: str) -> tuple[list[tuple[str, bytes]], str]:
        env = {**os.environ, "GIT_TERMINAL_PROMPT": "0"}
        with tempfile.TemporaryDirectory(prefix="scirep-clone-") as tmp:
            dest = Path(tmp) / "repo"
            try:
                subprocess.run(["git", "clone", "--depth", "1", "--quiet", location, str(dest)],
                               check=True, capture_output=True, env=env, timeout=600)
                commit = subprocess.run(["git", "-C", str(dest), "rev-parse", "HEAD"], check=True,
                                        capture_output=True, text=True, env=env).stdout.strip()
            except (subprocess.CalledProcessError, subprocess.TimeoutExpired, FileNotFoundError) as exc:
                stderr = getattr(exc, "stderr", b"") or b""
                if isinstance(stderr, bytes):
                    stderr = stderr.decode(errors="replace")
                raise RemoteUnreachable(f"clone of {location!r} failed: {stderr.strip() or exc}",
                                        location=location) from exc
            files = []
            for path in sorted(dest.rglob("*")):
                rel = path.relative_to(dest).as_posix()
                if rel == ".git" or rel.startswith(".git/") or path.is_symlink() or not path.is_file():
                    continue
                files.append((rel, path.read_bytes()))
        return files, commit

    def _fetch_record(self, record_id: str) -> list[tuple[str, bytes]]:
        client = self._http or httpx.Client(timeout=60, follow_redirects=True)
        try:
            resp = client.get(f"{self.zenodo_api}/api/records/{record_id}")
            resp.raise_for_status()
            files = []
            for item in resp.json().get("files", []):
                name = item.get("key") or item.get("filename")
                link = item.get("links", {}).get("self") or item.get("links", {}).get("download")
                if not name or not link:
                    continue
                data = client.get(link)
                data.raise_for_status()
                files.append((name, data.content))
        except (httpx.HTTPError, ValueError) as exc:
            raise RemoteUnreachable(f"record {record_id} unavailable: {exc}", record=record_id) from exc
        finally:
            if self._http is None:
                client.close()
        return files

    def _mkdir(self, conn: sqlite3.Connection, project_id: str, rel: str,
               exist_ok: bool = False) -> list[FileEntry]:
        created = self._ensure_dirs(conn, project_id, rel)
        existing = self._entry(project_id, rel, conn)
        if existing is not None:
            if exist_ok and existing.kind == "directory":
                return created
            raise DestinationExists(f"{rel!r} already exists", path=rel)
        (self.files_dir(project_id) / rel).mkdir()
        conn.execute(
            "INSERT INTO files (project_id, path, kind, size, checksum) VALUES (?, ?, 'directory', 0, NULL)",
            (project_id, rel),
        )
        return [*created, FileEntry(rel, "directory", 0, None)]

    def manage_entry(self, project_id: str, action: str, path: str,
                     new_path: str | None = None) -> list[FileEntry]:
        self.get_project(project_id)
        rel = normalize_relpath(path)
        if not rel:
            raise InvalidPath("the project root cannot be managed")
        with self.lock(project_id), self.transaction() as conn:
            if action == "mkdir":
                self._mkdir(conn, project_id, rel)
            elif action == "delete":
                self._require(conn, project_id, rel)
                conn.execute(
                    "DELETE FROM files WHERE project_id = ? AND (path = ? OR path LIKE ? ESCAPE '\\')",
                    (project_id, rel, _like_prefix(rel)),
                )
                target = self.files_dir(project_id) / rel
                if target.is_dir():
                    shutil.rmtree(target)
                else:
                    target.unlink()
            elif action in ("rename", "move"):
                if not new_path:
                    raise InvalidPath(f"{action} needs a destination")
                dest = new_path
                if action == "rename" and "/" not in new_path.replace("\\", "/"):
                    parent = PurePosixPath(rel).parent.as_posix()
                    dest = new_path if parent == "." else f"{parent}/{new_path}"
                dest = normalize_relpath(dest)
                if action == "rename" and PurePosixPath(dest).parent != PurePosixPath(rel).parent:
                    raise InvalidPath("rename keeps the parent directory; use move", path=dest)
                self._move(conn, project_id, rel, dest)
            else:
                raise InvalidPath(f"unknown action {action!r}")
        return self.get_tree(project_id)

    def _require(self, conn: sqlite3.Connection, project_id: str, rel: str) -> FileEntry:
        entry = self._entry(project_id, rel, conn)
        if entry is None:
            raise PathNotFound(f"no entry {rel!r}", path=rel)
        return entry

    def _move(self, conn: sqlite3.Connection, project_id: str, src: str, dest: str) -> None:
        self._require(conn, project_id, src)
        if not dest:
            raise InvalidPath("destination cannot be the project root")
        if dest == src or dest.startswith(src + "/"):
            raise InvalidPath(f"cannot move {src!r} into itself", path=dest)
        if self._entry(project_id, dest, conn) is not None:
            raise DestinationExists(f"{dest!r} already exists", path=dest)
        self._ensure_dirs(conn, project_id, dest)
        base = self.files_dir(project_id)
        rows = conn.execute(
            "SELECT path FROM files WHERE project_id = ? AND (path = ? OR path LIKE ? ESCAPE '\\')",
            (project_id, src, _like_prefix(src)),
        ).fetchall()
        for row in rows:
            new = dest + row["path"][len(src):]
            conn.execute("UPDATE files SET path = ? WHERE project_id = ? AND path = ?",
                         (new, project_id, row["path"]))
        os.rename(base / src, base / dest)

    def replace_contents(self, project_id: str, replacements: Iterable[tuple[str, bytes]]) -> list[FileEntry]:
        """Swap the bytes of existing files without touching paths."""
        self.get_project(project_id)
        staged = [(normalize_relpath(p), d) for p, d in replacements]
        with self.lock(project_id), self.transaction() as conn:
            for rel, _ in staged:
                entry = self._entry(project_id, rel, conn)
                if entry is None or entry.kind != "file":
                    raise PathNotFound(f"no file {rel!r}", path=rel)
            for rel, data in staged:
                self._write(conn, project_id, rel, data)
        return self.get_tree(project_id)

    # -- images --

    def record_image(self, project_id: str, tag_id: str, engine_image_id: str, built_at: str,
                     build_log_digest: str, dockerfile: str,
                     lock_report: dict[str, str] | None = None) -> ImageRecord:
        lock = None if lock_report is None else json.dumps(lock_report, sort_keys=True)
        with self.transaction() as conn:
            conn.execute(
                "INSERT OR REPLACE INTO images VALUES (?, ?, ?, ?, ?, ?, 0, ?)",
                (project_id, tag_id, engine_image_id, built_at, build_log_digest, dockerfile, lock),
            )
        return self.get_image(project_id, tag_id)

    def get_image(self, project_id: str, tag_id: str) -> ImageRecord:
        with self._connect() as conn:
            row = conn.execute("SELECT * FROM images WHERE project_id = ? AND tag_id = ?",
                               (project_id, tag_id)).fetchone()
        if row is None:
            raise ImageNotFound(f"no image {tag_id!r} built for project {project_id}", tag_id=tag_id)
        return ImageRecord(row["project_id"], row["tag_id"], row["engine_image_id"], row["built_at"],
                           row["build_log_digest"], row["dockerfile"], bool(row["stale"]),
                           json.loads(row["lock_report"]) if row["lock_report"] else None)

    def list_images(self, project_id: str) -> list[ImageRecord]:
        with self._connect() as conn:
            tags = [r[0] for r in conn.execute(
                "SELECT tag_id FROM images WHERE project_id = ? ORDER BY tag_id", (project_id,))]
        return [self.get_image(project_id, t) for t in tags]

    def mark_images_stale(self, project_id: str) -> None:
        with self.transaction() as conn:
            conn.execute("UPDATE images SET stale = 1 WHERE project_id = ?", (project_id,))

    # -- reports --

    def save_report(self, project_id: str, report: dict[str, Any]) -> None:
        self.set_project_fields(project_id, report=json.dumps(report, sort_keys=True))

    def load_report(self, project_id: str) -> dict[str, Any] | None:
        raw = self.get_project_field(project_id, "report")
        return None if raw is None else json.loads(raw)


def _like_prefix(rel: str) -> str:
    escaped = rel.replace("\\", "\\\\").replace("%", "\\%").replace("_", "\\_")
    return escaped + "/%"
