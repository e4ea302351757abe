"""Command-line front end over the same facade the HTTP gateway uses."""

from __future__ import annotations

import errno
import hashlib
import json
import os
import socket
import sys
import tempfile
from collections.abc import Sequence
from pathlib import Path
from typing import Any

import click

from scirep.errors import PortInUse, ScirepError, StorageUnwritable, UsageError
from scirep.service import Scirep, canonical_json, storage_root_from_env


class Context:
    def __init__(self, as_json: bool, storage_root: str | None, engine_host: str | None) -> None:
        self.as_json = as_json
        self.storage_root = storage_root
        self.engine_host = engine_host
        self._svc: Scirep | None = None

    @property
    def svc(self) -> Scirep:
        if self._svc is None:
            self._svc = Scirep(self.storage_root, self.engine_host)
        return self._svc

    def emit(self, result: dict[str, Any], human: str | None = None) -> None:
        if self.as_json or human is None:
            click.echo(canonical_json(result))
        else:
            click.echo(human)


pass_ctx = click.make_pass_decorator(Context)


def _load_json_arg(value: str | None) -> dict[str, Any] | None:
    """A JSON object given inline or as a path to a file."""
    if not value:
        return None
    text = Path(value).read_text() if os.path.isfile(value) else value
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"not a JSON object or file: {value!r}") from exc
    if not isinstance(data, dict):
        raise UsageError("expected a JSON object")
    return data


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--json", "as_json", is_flag=True, help="Machine-readable output.")
@click.option("--storage-root", envvar="SCIREP_STORAGE_ROOT", default=None)
@click.option("--engine-host", envvar="SCIREP_ENGINE_HOST", default=None)
@click.pass_context
def cli(ctx: click.Context, as_json: bool, storage_root: str | None, engine_host: str | None) -> None:
    """Turn an experiment into a rebuildable, verifiable container artifact."""
    ctx.obj = Context(as_json, storage_root, engine_host)


@cli.command()
@click.option("--name", required=True)
@click.option("--description", default="")
@click.option("--kind", "experiment_kind", type=click.Choice(["standard", "ai_nondeterministic"]),
              default="standard")
@click.option("--seed", type=int, default=None)
@pass_ctx
def init(c: Context, name: str, description: str, experiment_kind: str, seed: int | None) -> None:
    """Create a project."""
    result = c.svc.create_project(name, description, experiment_kind, seed)
    c.emit(result, result["projectUuid"])


@cli.command()
@click.argument("project")
@click.argument("file", type=click.Path(exists=True, dir_okay=False))
@click.option("--parent", default="", help="Directory inside the project.")
@click.option("--name", default=None, help="Stored file name; defaults to the local name.")
@pass_ctx
def add(c: Context, project: str, file: str, parent: str, name: str | None) -> None:
    """Upload one file."""
    result = c.svc.upload_file(project, parent, name or Path(file).name, Path(file).read_bytes())
    c.emit(result, result["entry"]["path"])


@cli.command("import")
@click.argument("project")
@click.argument("source")
@click.option("--repository", default=None,
              help="Remote kind (github, zenodo_like). Without it SOURCE is a local zip.")
@pass_ctx
def import_(c: Context, project: str, source: str, repository: str | None) -> None:
    """Import a zip archive or a remote repository."""
    if repository:
        result = c.svc.import_remote(project, repository, source)
    else:
        path = Path(source)
        if not path.is_file():
            raise UsageError(f"no such archive: {source}")
        result = c.svc.import_archive(project, path.read_bytes())
    c.emit(result, f"{len(result['entries'])} entries")


@cli.command()
@click.argument("project")
@pass_ctx
def infer(c: Context, project: str) -> None:
    """Infer languages and dependencies."""
    result = c.svc.infer(project)
    langs = ", ".join(h["language"] for h in result["report"]["languages"])
    c.emit(result, langs or "(no languages)")


@cli.command()
@click.argument("project")
@click.argument("edits")
@pass_ctx
def override(c: Context, project: str, edits: str) -> None:
    """Apply user edits (JSON object or file) to the inference report."""
    c.emit(c.svc.override(project, _load_json_arg(edits) or {}))


@cli.command()
@click.argument("project")
@click.option("--tag", default=None)
@click.option("--build-command", "build_commands", multiple=True)
@click.option("--base-image", default=None)
@click.option("--strict", is_flag=True, help="Skip the blanket apt upgrade.")
@click.option("--dockerfile", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--db-config", default=None, help="Database configuration as JSON or a JSON file.")
@click.option("--form", default=None, help="A full build request body as JSON or a JSON file.")
@click.option("--dry-run", is_flag=True, help="Print the Dockerfile without building.")
@pass_ctx
def build(c: Context, project: str, tag: str | None, build_commands: Sequence[str], base_image: str | None,
          strict: bool, dockerfile: str | None, db_config: str | None, form: str | None,
          dry_run: bool) -> None:
    """Generate the Dockerfile and build the image."""
    body = _load_json_arg(form) or {}
    cfg = dict(body.get("configurationForm") or {})
    if tag:
        cfg["tagId"] = tag
    if build_commands:
        cfg["buildCommands"] = list(build_commands)
    if base_image:
        cfg["baseImage"] = base_image
    if strict:
        cfg["strict"] = True
    if dockerfile:
        cfg["dockerfile"] = Path(dockerfile).read_text()
    db = _load_json_arg(db_config)
    if db:
        body["DBhas"], body["dbConfiguration"] = True, db
    body["configurationForm"] = cfg
    if dry_run:
        if db:
            cfg.setdefault("dbConfiguration", db)
        planned = c.svc.plan(project, cfg)
        c.emit(planned, planned["dockerfile"].rstrip("\n"))
        return
    result = c.svc.build(project, body)
    c.emit(result, result["tagId"])


@cli.command()
@click.argument("project")
@click.argument("tag")
@click.argument("command")
@click.option("--normalizer", "normalizers", multiple=True)
@click.option("--db-config", default=None)
@click.option("--network-none", is_flag=True)
@pass_ctx
def run(c: Context, project: str, tag: str, command: str, normalizers: Sequence[str],
        db_config: str | None, network_none: bool) -> None:
    """Execute COMMAND in a fresh container from TAG."""
    result = c.svc.run(project, tag, command, _load_json_arg(db_config), list(normalizers), network_none)
    if c.as_json:
        c.emit(result)
        return
    click.echo(result["logs"], nl=False)
    summary = f"execution {result['executionId']} exited {result['exitCode']}"
    if result["validation"]:
        summary += f"; {result['validation']['status']}"
    click.echo(summary, err=True)


@cli.command()
@click.argument("project")
@click.argument("execution")
@pass_ctx
def golden(c: Context, project: str, execution: str) -> None:
    """Mark an execution as the golden one."""
    result = c.svc.mark_golden(project, execution)
    c.emit(result, execution)


@cli.command()
@click.argument("project")
@click.argument("execution")
@click.option("--normalizer", "normalizers", multiple=True)
@pass_ctx
def validate(c: Context, project: str, execution: str, normalizers: Sequence[str]) -> None:
    """Compare an execution with the golden one."""
    result = c.svc.validate(project, execution, list(normalizers))
    v = result["validation"]
    human = v["status"]
    if v.get("console_diff"):
        human += "\n" + v["console_diff"]["unified_diff"]
    c.emit(result, human)


@cli.command()
@click.argument("project")
@click.option("--tag", default=None)
@click.option("--command", "commands", multiple=True)
@click.option("--db-config", default=None)
@click.option("--created-at", default=None, help="Timestamp written into the manifest.")
@click.option("-o", "--output", type=click.Path(dir_okay=False), default=None)
@pass_ctx
def package(c: Context, project: str, tag: str | None, commands: Sequence[str], db_config: str | None,
            created_at: str | None, output: str | None) -> None:
    """Write the research artifact zip."""
    data = c.svc.package(project, tag, list(commands), _load_json_arg(db_config), created_at)
    out = Path(output or f"{project}.zip")
    out.write_bytes(data)
    c.emit({"path": str(out), "sha256": hashlib.sha256(data).hexdigest(), "size": len(data)}, str(out))


@cli.command()
@click.argument("archive", type=click.Path(exists=True, dir_okay=False))
@click.option("--smoke", is_flag=True, help="Also load the image and replay the commands.")
@pass_ctx
def verify(c: Context, archive: str, smoke: bool) -> None:
    """Check a research artifact zip."""
    result = c.svc.verify(Path(archive).read_bytes(), smoke)
    lines = [f"{'ok' if ch['ok'] else 'FAIL'} {ch['name']}" for ch in result["checks"]]
    c.emit(result, "\n".join(lines))
    if not result["ok"]:
        sys.exit(1)


@cli.command()
@click.argument("project")
@pass_ctx
def tree(c: Context, project: str) -> None:
    """List project files."""
    result = c.svc.tree(project)
    c.emit(result, "\n".join(e["path"] + ("/" if e["kind"] == "dir" else "") for e in result["tree"]))


@cli.command()
@click.argument("project")
@click.argument("action", type=click.Choice(["mkdir", "delete", "rename", "move"]))
@click.argument("path")
@click.argument("new_path", required=False)
@pass_ctx
def manage(c: Context, project: str, action: str, path: str, new_path: str | None) -> None:
    """Create, delete, rename or move a project entry."""
    c.emit(c.svc.manage_entry(project, action, path, new_path))


@cli.command()
@click.argument("project")
@click.argument("replacements", nargs=-1, required=True)
@pass_ctx
def dataset(c: Context, project: str, replacements: Sequence[str]) -> None:
    """Swap dataset files: each argument is PROJECT_PATH=LOCAL_FILE."""
    pairs = []
    for item in replacements:
        dest, sep, local = item.partition("=")
        if not sep or not Path(local).is_file():
            raise UsageError(f"expected PROJECT_PATH=LOCAL_FILE, got {item!r}")
        pairs.append((dest, Path(local).read_bytes()))
    c.emit(c.svc.replace_dataset(project, pairs))


@cli.command()
@pass_ctx
def projects(c: Context) -> None:
    """List projects."""
    result = c.svc.list_projects()
    c.emit(result, "\n".join(f"{p['id']}  {p['name']}" for p in result["projects"]))


@cli.command()
@click.argument("project")
@pass_ctx
def executions(c: Context, project: str) -> None:
    """List a project's executions."""
    result = c.svc.executions(project)
    rows = [f"{e['id']}  exit={e['exit_code']}{'  golden' if e['golden'] else ''}"
            for e in result["executions"]]
    c.emit(result, "\n".join(rows))


@cli.command()
@pass_ctx
def health(c: Context) -> None:
    """Report storage and engine status."""
    c.emit(c.svc.health())


def check_serve_preconditions(host: str, port: int, storage_root: Path) -> None:
    try:
        storage_root.mkdir(parents=True, exist_ok=True)
        with tempfile.NamedTemporaryFile(dir=storage_root):
            pass
    except OSError as exc:
        raise StorageUnwritable(f"storage root {storage_root} is not writable: {exc.strerror}",
                                path=str(storage_root)) from exc
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        try:
            s.bind((host, port))
        except OSError as exc:
            if exc.errno in (errno.EADDRINUSE, errno.EACCES):
                raise PortInUse(f"port {port} on {host} is unavailable", port=port) from exc
            raise


@cli.command()
@click.option("--host", default="127.0.0.1")
@click.option("--port", envvar="SCIREP_PORT", type=int, default=8000)
@pass_ctx
def serve(c: Context, host: str, port: int) -> None:
    """Run the HTTP gateway."""
    import uvicorn

    from scirep.api import create_app

    root = Path(c.storage_root).expanduser() if c.storage_root else storage_root_from_env()
    check_serve_preconditions(host, port, root)
    uvicorn.run(create_app(Scirep(root, c.engine_host)), host=host, port=port,
                timeout_graceful_shutdown=600)


def main(argv: Sequence[str] | None = None) -> int:
    try:
        cli.main(args=list(argv) if argv is not None else None, prog_name="scirep", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except click.Abort:
        return 1
    except UsageError as exc:
        click.echo(canonical_json(exc.to_dict()), err=True)
        return 2
    except ScirepError as exc:
        click.echo(canonical_json(exc.to_dict()), err=True)
        return 1
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
