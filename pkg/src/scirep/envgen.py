"""Container build recipes from inference reports.

``plan_environment`` is a pure function of its inputs and ``render_dockerfile``
emits stanzas in a fixed order::

    FROM / apt update / apt install / setup / language packages / ENV / WORKDIR / COPY / build
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import PurePosixPath
from typing import Any

from scirep.errors import InvalidDatabaseConfig, MissingCredentials, UnregisteredLanguage
from scirep.inference.model import DependencySpec, Ecosystem, InferenceReport
from scirep.inference.registry import Registry, default_registry
from scirep.store import ExperimentKind, Project

DEFAULT_BASE_IMAGE = "ubuntu:20.04"
DEFAULT_WORKDIR = "/files"
DEFAULT_COPY_ROOT = "./files"
SEED_INIT_DIR = "/docker-entrypoint-initdb.d"
DB_HOST_ALIAS = "db"


class DbEngine(str, enum.Enum):
    MySQL = "MySQL"
    PostgreSQL = "PostgreSQL"
    SQLite = "SQLite"
    MongoDB = "MongoDB"

    @classmethod
    def parse(cls, value: str) -> DbEngine:
        for member in cls:
            if member.value.lower() == value.strip().lower():
                return member
        aliases = {"postgres": cls.PostgreSQL, "mongo": cls.MongoDB, "sqlite3": cls.SQLite}
        try:
            return aliases[value.strip().lower()]
        except KeyError:
            raise InvalidDatabaseConfig(f"unsupported database engine {value!r}") from None


@dataclass(frozen=True)
class DatabaseConfig:
    engine: DbEngine
    version: str = "latest"
    database_name: str | None = None
    username: str | None = None
    password: str | None = None
    host_port: int | None = None
    seed_data: str | None = None

    def validate(self) -> None:
        if self.engine is DbEngine.SQLite:
            if any(v is not None for v in (self.username, self.password, self.host_port)):
                raise InvalidDatabaseConfig("SQLite is file-based: no credentials or port")
            return
        missing = [k for k in ("database_name", "username", "password", "host_port")
                   if getattr(self, k) in (None, "")]
        if missing:
            raise MissingCredentials(f"{self.engine.value} needs {', '.join(missing)}", missing=missing)

    def to_dict(self) -> dict[str, Any]:
        return {
            "engine": self.engine.value,
            "version": self.version,
            "database_name": self.database_name,
            "username": self.username,
            "password": self.password,
            "host_port": self.host_port,
            "seed_data": self.seed_data,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> DatabaseConfig:
        port = d.get("host_port", d.get("port"))
        return cls(
            engine=DbEngine.parse(d["engine"]),
            version=str(d.get("version") or "latest"),
            database_name=d.get("database_name", d.get("database")),
            username=d.get("username", d.get("user")),
            password=d.get("password"),
            host_port=int(port) if port not in (None, "") else None,
            seed_data=d.get("seed_data"),
        )


@dataclass(frozen=True)
class EnvironmentSpec:
    base_image: str = DEFAULT_BASE_IMAGE
    system_packages: tuple[str, ...] = ()
    setup_commands: tuple[str, ...] = ()
    language_install_commands: tuple[str, ...] = ()
    workdir: str = DEFAULT_WORKDIR
    copy_root: str = DEFAULT_COPY_ROOT
    build_commands: tuple[str, ...] = ()
    env_vars: tuple[tuple[str, str], ...] = ()
    db: DatabaseConfig | None = None
    strict: bool = False
    warnings: tuple[str, ...] = ()
    # some packages (tzdata via r-base) prompt during install unless debconf is told not to
    apt_noninteractive: bool = False
    # language -> command printing the resolved versions of unpinned packages
    lock_commands: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        if not self.base_image:
            raise ValueError("base_image must be non-empty")
        if not PurePosixPath(self.workdir).is_absolute():
            raise ValueError(f"workdir must be absolute, got {self.workdir!r}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "base_image": self.base_image,
            "system_packages": list(self.system_packages),
            "setup_commands": list(self.setup_commands),
            "language_install_commands": list(self.language_install_commands),
            "workdir": self.workdir,
            "copy_root": self.copy_root,
            "build_commands": list(self.build_commands),
            "env_vars": dict(self.env_vars),
            "db": self.db.to_dict() if self.db else None,
            "strict": self.strict,
            "warnings": list(self.warnings),
            "apt_noninteractive": self.apt_noninteractive,
            "lock_commands": dict(self.lock_commands),
        }


def _dedupe(items: list[str]) -> tuple[str, ...]:
    return tuple(dict.fromkeys(items))


def _format_package(dep: DependencySpec, toolchain: dict[str, Any]) -> str:
    if dep.version is None:
        return toolchain.get("package_format", "{name}").format(name=dep.name)
    fmt_key = "specifier_format" if dep.is_specifier else "pinned_format"
    fmt = toolchain.get(fmt_key) or toolchain.get("pinned_format") or "{name}"
    return fmt.format(name=dep.name, version=dep.version)


def _toolchain_blocks(lang: str, registry: Registry) -> list[dict[str, Any]]:
    toolchain = registry[lang].toolchain
    parent = toolchain.get("extends")
    return [*(_toolchain_blocks(parent, registry) if parent else []), toolchain]


def plan_environment(report: InferenceReport, project: Project | None = None,
                     db: DatabaseConfig | None = None, *, build_commands: list[str] | tuple[str, ...] = (),
                     base_image: str = DEFAULT_BASE_IMAGE, strict: bool = False,
                     registry: Registry | None = None) -> EnvironmentSpec:
    """Plan the image: union of toolchains, package installs, seed and DB settings."""
    registry = registry or default_registry()
    languages = sorted(report.language_ids, key=lambda x: (x not in registry, registry.order_of(x)
                                                           if x in registry else 0, x))
    for lang in languages:
        if lang not in registry:
            raise UnregisteredLanguage(f"no toolchain registered for {lang!r}", language=lang)
    if db is not None:
        db.validate()

    packages: list[str] = []
    setup: list[str] = []
    noninteractive = False
    for lang in languages:
        for block in _toolchain_blocks(lang, registry):
            packages += block.get("system_packages", [])
            setup += block.get("setup_commands", [])
            noninteractive = noninteractive or bool(block.get("apt_noninteractive"))

    conflicted = {name for name, _ in report.conflicts}
    warnings: list[str] = []
    installs: list[str] = []
    locks: dict[str, str] = {}
    system_deps: list[str] = []
    by_language: dict[str, list[DependencySpec]] = {}
    for dep in report.dependencies:
        if dep.name in conflicted:
            continue
        if dep.ecosystem is Ecosystem.system_package:
            system_deps.append(dep.name if dep.version is None else f"{dep.name}={dep.version}")
        else:
            by_language.setdefault(dep.language or "", []).append(dep)
    for name, versions in report.conflicts:
        warnings.append(f"not installed: conflicting pins for {name} ({', '.join(versions)}); add an override")

    for lang in sorted(by_language, key=lambda x: (registry.order_of(x) if x in registry else 99, x)):
        deps = by_language[lang]
        if lang not in registry:
            warnings.extend(f"not installed: {d.name} has no installer language" for d in deps)
            continue
        toolchain = registry[lang].toolchain
        if toolchain.get("resolved_by"):
            warnings.extend(f"{d.name}: resolved by {toolchain['resolved_by']}" for d in deps)
            continue
        if "install_command" not in toolchain:
            warnings.extend(f"not installed: {lang} has no package installer for {d.name}" for d in deps)
            continue
        if lang not in report.language_ids:
            for block in _toolchain_blocks(lang, registry):
                packages += block.get("system_packages", [])
                setup += block.get("setup_commands", [])
                noninteractive = noninteractive or bool(block.get("apt_noninteractive"))
        packages += toolchain.get("manager_packages", [])
        pinned_cmd = toolchain.get("pinned_install_command")
        batch = [d for d in deps if not (pinned_cmd and d.version)]
        if batch:
            sep = toolchain.get("package_separator", " ")
            installs.append(toolchain["install_command"].format(
                packages=sep.join(_format_package(d, toolchain) for d in batch)))
        if any(d.version is None or d.is_specifier for d in deps) and toolchain.get("lock_command"):
            locks[lang] = toolchain["lock_command"]
        pinned = [d for d in deps if pinned_cmd and d.version]
        if pinned:
            installs += toolchain.get("pinned_prerequisites", [])
            installs += [pinned_cmd.format(name=d.name, version=d.version) for d in pinned]

    packages += system_deps
    env: dict[str, str] = {}
    if project is not None and project.experiment_kind is ExperimentKind.ai_nondeterministic:
        env["SEED"] = str(project.seed)
    if db is not None and db.engine is DbEngine.SQLite:
        packages.append("sqlite3")
        if db.seed_data:
            env["SCIREP_DB_FILE"] = f"{DEFAULT_WORKDIR}/{db.seed_data}"

    return EnvironmentSpec(
        base_image=base_image,
        system_packages=_dedupe(packages),
        setup_commands=_dedupe(setup),
        language_install_commands=tuple(installs),
        build_commands=tuple(build_commands),
        env_vars=tuple(sorted(env.items())),
        db=db,
        strict=strict,
        warnings=tuple(warnings),
        apt_noninteractive=noninteractive,
        lock_commands=tuple(sorted(locks.items())),
    )


def render_dockerfile(spec: EnvironmentSpec) -> str:
    lines = [f"FROM {spec.base_image}"]
    lines.append("RUN apt update" if spec.strict else "RUN apt update && apt upgrade -y")
    if spec.system_packages:
        prefix = "DEBIAN_FRONTEND=noninteractive " if spec.apt_noninteractive else ""
        lines.append(f"RUN {prefix}apt install -y " + " ".join(spec.system_packages))
    lines += [f"RUN {c}" for c in spec.setup_commands]
    lines += [f"RUN {c}" for c in spec.language_install_commands]
    lines += [f"ENV {k}={json.dumps(v) if (' ' in v or not v) else v}" for k, v in spec.env_vars]
    lines.append(f"WORKDIR {spec.workdir}")
    lines.append(f"COPY {spec.copy_root} .")
    lines += [f"RUN {c}" for c in spec.build_commands]
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class DbServiceSpec:
    engine: str
    image: str | None = None
    env: tuple[tuple[str, str], ...] = ()
    container_port: int | None = None
    host_port: int | None = None
    seed_file: str | None = None
    seed_mount: str | None = None
    probe: tuple[str, ...] = ()
    client_env: tuple[tuple[str, str], ...] = ()
    network_alias: str = DB_HOST_ALIAS
    # SQLite: no separate service, the database file lives in the project tree
    no_service: bool = False
    timeout_s: float = 60.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "engine": self.engine,
            "image": self.image,
            "env": dict(self.env),
            "container_port": self.container_port,
            "host_port": self.host_port,
            "seed_file": self.seed_file,
            "seed_mount": self.seed_mount,
            "probe": list(self.probe),
            "client_env": dict(self.client_env),
            "network_alias": self.network_alias,
            "no_service": self.no_service,
            "timeout_s": self.timeout_s,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> DbServiceSpec:
        return cls(
            engine=d["engine"], image=d.get("image"), env=tuple(sorted(d.get("env", {}).items())),
            container_port=d.get("container_port"), host_port=d.get("host_port"),
            seed_file=d.get("seed_file"), seed_mount=d.get("seed_mount"),
            probe=tuple(d.get("probe", ())), client_env=tuple(sorted(d.get("client_env", {}).items())),
            network_alias=d.get("network_alias", DB_HOST_ALIAS), no_service=bool(d.get("no_service")),
            timeout_s=float(d.get("timeout_s", 60.0)),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


_ENGINE_IMAGES = {DbEngine.PostgreSQL: ("postgres", 5432), DbEngine.MySQL: ("mysql", 3306),
                  DbEngine.MongoDB: ("mongo", 27017)}


def plan_db_service(db: DatabaseConfig) -> DbServiceSpec:
    db.validate()
    if db.engine is DbEngine.SQLite:
        env = (("SCIREP_DB_FILE", f"{DEFAULT_WORKDIR}/{db.seed_data}"),) if db.seed_data else ()
        return DbServiceSpec(engine=db.engine.value, no_service=True, seed_file=db.seed_data, client_env=env)
    image_name, port = _ENGINE_IMAGES[db.engine]
    if db.engine is DbEngine.PostgreSQL:
        env = {"POSTGRES_DB": db.database_name, "POSTGRES_USER": db.username,
               "POSTGRES_PASSWORD": db.password}
        # TCP only answers once the init scripts have finished
        probe = ("pg_isready", "-h", "127.0.0.1", "-U", db.username, "-d", db.database_name)
    elif db.engine is DbEngine.MySQL:
        env = {"MYSQL_DATABASE": db.database_name, "MYSQL_USER": db.username,
               "MYSQL_PASSWORD": db.password, "MYSQL_ROOT_PASSWORD": db.password}
        probe = ("mysqladmin", "ping", "-h", "127.0.0.1", f"-u{db.username}", f"-p{db.password}", "--silent")
    else:
        env = {"MONGO_INITDB_DATABASE": db.database_name, "MONGO_INITDB_ROOT_USERNAME": db.username,
               "MONGO_INITDB_ROOT_PASSWORD": db.password}
        probe = ("sh", "-c", "mongosh --quiet --eval 'db.runCommand({ping:1})' "
                             "|| mongo --quiet --eval 'db.runCommand({ping:1})'")
    client_env = {"DB_ENGINE": db.engine.value, "DB_HOST": DB_HOST_ALIAS, "DB_PORT": str(port),
                  "DB_NAME": db.database_name, "DB_USER": db.username, "DB_PASSWORD": db.password}
    return DbServiceSpec(
        engine=db.engine.value,
        image=f"{image_name}:{db.version}",
        env=tuple(sorted(env.items())),
        container_port=port,
        host_port=db.host_port,
        seed_file=db.seed_data,
        seed_mount=SEED_INIT_DIR if db.seed_data else None,
        probe=probe,
        client_env=tuple(sorted(client_env.items())),
    )

