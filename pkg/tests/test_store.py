from __future__ import annotations

import io
import subprocess
import zipfile
from pathlib import Path

import httpx
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from conftest import fixture_tree
from oracles import zip_members
from scirep.errors import (
    CorruptArchive,
    DestinationExists,
    EmptyName,
    InvalidPath,
    ParentNotADirectory,
    PathNotFound,
    ProjectNotFound,
    RemoteUnreachable,
    SeedMissingForAiKind,
    UnsupportedRepositoryKind,
    ZipSlipDetected,
)
from scirep.store import ExperimentKind, ProjectStore, RepositoryKind, normalize_relpath


def make_zip(members: dict[str, bytes], *, symlink: str | None = None) -> bytes:
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        for name, data in members.items():
            zf.writestr(name, data)
        if symlink:
            info = zipfile.ZipInfo(symlink)
            info.external_attr = (0o120777) << 16
            zf.writestr(info, "/etc/passwd")
    return buf.getvalue()


def paths(store: ProjectStore, pid: str, kind: str | None = None) -> list[str]:
    return [e.path for e in store.get_tree(pid) if kind is None or e.kind == kind]


class TestCreate:
    def test_standard_project_starts_empty(self, store: ProjectStore) -> None:
        p = store.create_project("E3-repro", "bidirectional BFS", ExperimentKind.standard)
        assert p.name == "E3-repro"
        assert store.get_tree(p.id) == []

    def test_empty_name(self, store: ProjectStore) -> None:
        with pytest.raises(EmptyName):
            store.create_project("", "x")
        with pytest.raises(EmptyName):
            store.create_project("   ")

    def test_ai_kind_keeps_seed(self, store: ProjectStore) -> None:
        p = store.create_project("ai-run", "", ExperimentKind.ai_nondeterministic, 42)
        assert p.seed == 42

    def test_ai_kind_without_seed(self, store: ProjectStore) -> None:
        with pytest.raises(SeedMissingForAiKind):
            store.create_project("ai-run", "", ExperimentKind.ai_nondeterministic)

    def test_ids_are_unique_and_listed_in_creation_order(self, store: ProjectStore) -> None:
        ids = [store.create_project(f"p{i}").id for i in range(5)]
        assert len(set(ids)) == 5
        assert [p.id for p in store.list_projects()] == ids

    def test_state_survives_reopen(self, store: ProjectStore) -> None:
        pid = store.create_project("p").id
        store.upload_file(pid, "src", "a.py", b"print(1)\n")
        again = ProjectStore(store.root)
        assert again.read_file(pid, "src/a.py") == b"print(1)\n"


class TestUpload:
    def test_path_is_joined(self, store: ProjectStore) -> None:
        pid = store.create_project("p").id
        entry = store.upload_file(pid, "src", "bbfs_node.cpp", b"int main(){}")
        assert entry.path == "src/bbfs_node.cpp"
        assert entry.kind == "file"
        assert entry.size == 12

    def test_traversal_rejected(self, store: ProjectStore) -> None:
        pid = store.create_project("p").id
        with pytest.raises(InvalidPath):
            store.upload_file(pid, ".", "../../etc/passwd", b"x")

    def test_overwrite_changes_checksum(self, store: ProjectStore) -> None:
        pid = store.create_project("p").id
        a = store.upload_file(pid, "src", "a.py", b"one")
        b = store.upload_file(pid, "src", "a.py", b"two")
        assert a.checksum != b.checksum
        assert store.read_file(pid, "src/a.py") == b"two"
        assert paths(store, pid, "file") == ["src/a.py"]

    def test_parent_that_is_a_file(self, store: ProjectStore) -> None:
        pid = store.create_project("p").id
        store.upload_file(pid, "", "data", b"x")
        with pytest.raises(ParentNotADirectory):
            store.upload_file(pid, "data", "f.txt", b"y")

    def test_unknown_project(self, store: ProjectStore) -> None:
        with pytest.raises(ProjectNotFound):
            store.upload_file("nope", "", "a", b"")

    @settings(max_examples=200, suppress_health_check=[HealthCheck.function_scoped_fixture])
    @given(data=st.binary(max_size=4096))
    def test_round_trip_identity(self, store: ProjectStore, data: bytes) -> None:
        pid = store.list_projects()[0].id if store.list_projects() else store.create_project("rt").id
        store.upload_file(pid, "d", "blob.bin", data)
        assert store.read_file(pid, "d/blob.bin") == data


ADVERSARIAL = st.lists(
    st.sampled_from(["..", ".", "", "a", "b", "/", "\\", "C:", "..\\..", "%2e%2e", "\x00", "~", "a/../..",
                     "//server", "x" * 3]),
    min_size=1, max_size=6,
).map(lambda parts: "/".join(parts))


class TestPathSafety:
    @settings(max_examples=500, suppress_health_check=[HealthCheck.function_scoped_fixture])
    @given(parent=ADVERSARIAL, name=ADVERSARIAL)
    def test_no_entry_escapes_root(self, store: ProjectStore, parent: str, name: str) -> None:
        pid = store.list_projects()[0].id if store.list_projects() else store.create_project("fuzz").id
        root = store.files_dir(pid).resolve()
        try:
            store.upload_file(pid, parent, name, b"x")
        except (InvalidPath, ParentNotADirectory, DestinationExists):
            pass
        for entry in store.get_tree(pid):
            assert (root / entry.path).resolve().is_relative_to(root)
        for p in store.root.rglob("*"):
            assert p.resolve().is_relative_to(store.root.resolve())

    @pytest.mark.parametrize("bad", ["/etc/passwd", "../x", "a/../../x", "C:/x", "a\x00b", "..\\x"])
    def test_normalize_rejects(self, bad: str) -> None:
        with pytest.raises(InvalidPath):
            normalize_relpath(bad)

    @pytest.mark.parametrize(("raw", "norm"), [("a//b", "a/b"), ("./a/./b", "a/b"), ("a\\b", "a/b"), ("", ""),
                                               (".", "")])
    def test_normalize_accepts(self, raw: str, norm: str) -> None:
        assert normalize_relpath(raw) == norm


class TestArchive:
    def test_structure_preserved(self, store: ProjectStore) -> None:
        pid = store.create_project("p").id
        store.import_archive(pid, make_zip({"src/a.cpp": b"int x;", "data/edges.txt": b"1 2\n"}))
        assert paths(store, pid, "file") == ["data/edges.txt", "src/a.cpp"]
        assert set(paths(store, pid, "directory")) == {"data", "src"}

    def test_zip_slip_aborts_everything(self, store: ProjectStore) -> None:
        pid = store.create_project("p").id
        with pytest.raises(ZipSlipDetected):
            store.import_archive(pid, make_zip({"ok.txt": b"fine", "../x": b"evil"}))
        assert store.get_tree(pid) == []

    def test_symlink_member_rejected(self, store: ProjectStore) -> None:
        pid = store.create_project("p").id
        with pytest.raises(ZipSlipDetected):
            store.import_archive(pid, make_zip({"a.txt": b"1"}, symlink="link"))
        assert store.get_tree(pid) == []

    def test_corrupt(self, store: ProjectStore) -> None:
        pid = store.create_project("p").id
        with pytest.raises(CorruptArchive):
            store.import_archive(pid, b"PK\x03\x04 definitely not a zip")

    def test_e7_layout_matches_zip_oracle(self, store: ProjectStore) -> None:
        data = make_zip(fixture_tree("e7_mini"))
        pid = store.create_project("e7").id
        store.import_archive(pid, data)
        assert set(paths(store, pid, "file")) == zip_members(data)
        assert "pom.xml" in paths(store, pid)

    @settings(max_examples=60, suppress_health_check=[HealthCheck.function_scoped_fixture])
    @given(tree=st.dictionaries(
        st.lists(st.text("abcxyz_", min_size=1, max_size=4), min_size=1, max_size=3).map("/".join),
        st.binary(max_size=64), max_size=8))
    def test_round_trip(self, tmp_path_factory: pytest.TempPathFactory, tree: dict[str, bytes]) -> None:
        # a path cannot be both a file and a directory
        if any(other.startswith(p + "/") for p in tree for other in tree):
            return
        store = ProjectStore(tmp_path_factory.mktemp("rt"))
        pid = store.create_project("p").id
        data = make_zip(tree)
        store.import_archive(pid, data)
        assert set(paths(store, pid, "file")) == zip_members(data)
        for path, content in tree.items():
            assert store.read_file(pid, path) == content


class TestRemote:
    def test_github_kind_clones_and_records_commit(self, store: ProjectStore, tmp_path: Path) -> None:
        repo = tmp_path / "origin"
        repo.mkdir()
        (repo / "run.sh").write_text("echo hi\n")
        env = {"GIT_AUTHOR_NAME": "t", "GIT_AUTHOR_EMAIL": "t@x", "GIT_COMMITTER_NAME": "t",
               "GIT_COMMITTER_EMAIL": "t@x", "PATH": "/usr/bin:/bin"}
        for cmd in (["git", "init", "-q"], ["git", "add", "."], ["git", "commit", "-qm", "init"]):
            subprocess.run(cmd, cwd=repo, check=True, env=env)
        head = subprocess.run(["git", "rev-parse", "HEAD"], cwd=repo, capture_output=True, text=True,
                              check=True).stdout.strip()
        pid = store.create_project("remote").id
        store.import_remote(pid, RepositoryKind.github, f"file://{repo}")
        assert paths(store, pid, "file") == ["run.sh"]
        assert store.get_project(pid).remote_commit == head

    def test_not_a_url(self, store: ProjectStore) -> None:
        pid = store.create_project("p").id
        with pytest.raises(UnsupportedRepositoryKind):
            store.import_remote(pid, "github", "not a url")

    def test_unknown_kind(self, store: ProjectStore) -> None:
        pid = store.create_project("p").id
        with pytest.raises(UnsupportedRepositoryKind):
            store.import_remote(pid, "svn", "https://x/y")

    def test_unreachable_host(self, store: ProjectStore) -> None:
        pid = store.create_project("p").id
        with pytest.raises(RemoteUnreachable):
            store.import_remote(pid, "github", "https://unreachable.invalid/org/repo")

    def test_zenodo_like_record(self, tmp_path: Path) -> None:
        files = {"analysis.R": b"library(ggplot2)\n"}

        def handler(request: httpx.Request) -> httpx.Response:
            if request.url.path == "/api/records/123":
                return httpx.Response(200, json={"files": [
                    {"key": k, "links": {"self": f"https://zenodo.test/files/{k}"}} for k in files]})
            if request.url.path.startswith("/files/"):
                return httpx.Response(200, content=files[request.url.path.split("/")[-1]])
            return httpx.Response(404)

        store = ProjectStore(tmp_path, http_client=httpx.Client(transport=httpx.MockTransport(handler)),
                             zenodo_api="https://zenodo.test")
        pid = store.create_project("z").id
        store.import_remote(pid, "zenodo", "https://doi.org/10.5281/zenodo.123")
        assert store.read_file(pid, "analysis.R") == files["analysis.R"]


class TestManage:
    @pytest.fixture
    def pid(self, store: ProjectStore) -> str:
        pid = store.create_project("p").id
        store.write_files(pid, [("a.txt", b"a"), ("data/x/1.txt", b"1"), ("data/2.txt", b"2"),
                                ("src/m.py", b"")])
        return pid

    def test_rename(self, store: ProjectStore, pid: str) -> None:
        store.manage_entry(pid, "rename", "a.txt", "b.txt")
        files = paths(store, pid, "file")
        assert "b.txt" in files and "a.txt" not in files

    def test_delete_directory_removes_descendants(self, store: ProjectStore, pid: str) -> None:
        store.manage_entry(pid, "delete", "data")
        assert not [p for p in paths(store, pid) if p == "data" or p.startswith("data/")]
        assert not (store.files_dir(pid) / "data").exists()

    def test_move_onto_occupied(self, store: ProjectStore, pid: str) -> None:
        with pytest.raises(DestinationExists):
            store.manage_entry(pid, "move", "a.txt", "data/2.txt")

    def test_move_directory(self, store: ProjectStore, pid: str) -> None:
        store.manage_entry(pid, "move", "data", "src/data")
        assert "src/data/x/1.txt" in paths(store, pid)
        assert store.read_file(pid, "src/data/x/1.txt") == b"1"

    def test_mkdir_and_missing(self, store: ProjectStore, pid: str) -> None:
        store.manage_entry(pid, "mkdir", "out/logs")
        assert {"out", "out/logs"} <= set(paths(store, pid, "directory"))
        with pytest.raises(PathNotFound):
            store.manage_entry(pid, "delete", "ghost")


class TestTree:
    def test_fresh_project_is_empty(self, store: ProjectStore) -> None:
        assert store.get_tree(store.create_project("p").id) == []

    def test_lexicographic_order(self, store: ProjectStore) -> None:
        pid = store.create_project("p").id
        store.upload_file(pid, "", "z.txt", b"")
        store.upload_file(pid, "", "a.txt", b"")
        assert paths(store, pid, "file") == ["a.txt", "z.txt"]

    def test_deleted_project(self, store: ProjectStore) -> None:
        pid = store.create_project("p").id
        store.delete_project(pid)
        with pytest.raises(ProjectNotFound):
            store.get_tree(pid)

    def test_pure_read(self, store: ProjectStore) -> None:
        pid = store.create_project("p").id
        store.write_files(pid, sorted(fixture_tree("e7_mini").items()))
        assert store.get_tree(pid) == store.get_tree(pid)
