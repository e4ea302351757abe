from __future__ import annotations

import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fixture_tree
from oracles import oracle_dependencies, oracle_languages
from scirep.errors import ProjectNotFound, UnknownLanguage
from scirep.inference import (
    DependencySource,
    DependencySpec,
    Ecosystem,
    UserEdits,
    analyze_tree,
    apply_overrides,
    default_registry,
    detect_languages,
    infer,
    rule_holds,
)
from scirep.inference.model import InferenceReport

FIXTURES = ["e3_mini", "e7_mini", "e4_postgres", "e28_sqlite", "py_requests", "r_sample", "nb_sample",
            "perl_sample"]


def lang_ids(report: InferenceReport) -> set[str]:
    return report.language_ids


def package_set(report: InferenceReport) -> set[tuple[str, str | None, str]]:
    return {(d.name, d.version, d.source.value) for d in report.dependencies
            if d.ecosystem is Ecosystem.language_package}


def canonical(report: InferenceReport) -> str:
    return json.dumps(report.to_dict(), sort_keys=True)


def shuffled(tree: dict[str, bytes], rng: random.Random) -> dict[str, bytes]:
    items = list(tree.items())
    rng.shuffle(items)
    return dict(items)


def assert_sound(report: InferenceReport, tree_paths: set[str]) -> None:
    registry = default_registry()
    for hit in report.languages:
        assert hit.evidence
        for ev in hit.evidence:
            assert ev.path in tree_paths
            assert rule_holds(registry[hit.language], ev.rule, ev.path, tree_paths), (hit.language, ev)


# -- a generator of plausible project trees, shared with the acceptance suite --

SNIPPETS = {
    ".py": ["import numpy as np", "from requests import get", "import os, sys", "import json",
            "from . import sibling", "import sklearn.svm", "x = 1", "# import notreal", "import yaml",
            "__import__('importlib')"],
    ".R": ["library(ggplot2)", "require(data.table)", "library(stats)", "x <- dplyr::filter(df)", "# library(no)"],
    ".pl": ["use strict;", "use JSON::PP;", "use Moose;", "require Data::Dumper;", "print 1;"],
    ".cpp": ["#include <vector>", "int main() { return 0; }"],
    ".sh": ["echo run", "./out data.txt"],
    ".java": ["class A {}"],
    ".zzz": ["opaque"],
    ".txt": ["1 2", "hello"],
}
SPECIAL = {
    "requirements.txt": ["numpy==1.24.4", "pandas>=1.5", "requests", "# comment", "Flask==2.0.1"],
    "pom.xml": ['<project><dependencies><dependency><groupId>junit</groupId><artifactId>junit</artifactId>'
                '<version>4.13.2</version></dependency></dependencies></project>'],
    "Makefile": ["all:\n\tg++ a.cpp"],
}


@st.composite
def project_trees(draw: st.DrawFn) -> dict[str, bytes]:
    n = draw(st.integers(0, 7))
    tree: dict[str, bytes] = {}
    for i in range(n):
        directory = draw(st.sampled_from(["", "src/", "lib/pkg/", "scripts/"]))
        if draw(st.integers(0, 5)) == 0:
            name = draw(st.sampled_from(sorted(SPECIAL)))
            lines = draw(st.lists(st.sampled_from(SPECIAL[name]), min_size=1, max_size=3))
        else:
            ext = draw(st.sampled_from(sorted(SNIPPETS)))
            name = f"f{i}{ext}"
            lines = draw(st.lists(st.sampled_from(SNIPPETS[ext]), max_size=4))
        tree[directory + name] = ("\n".join(lines) + "\n").encode()
    return tree


MUTATIONS = st.sampled_from(["add_opaque", "add_source", "drop", "rename", "rewrite"])


def mutate(tree: dict[str, bytes], op: str, rng: random.Random) -> dict[str, bytes]:
    out = dict(tree)
    if op == "add_opaque":
        out[f"extra/blob{rng.randrange(10**6)}.zzz"] = b"\x00\x01"
    elif op == "add_source":
        ext = rng.choice(sorted(SNIPPETS))
        out[f"m{rng.randrange(10**6)}{ext}"] = (rng.choice(SNIPPETS[ext]) + "\n").encode()
    elif op == "drop" and out:
        del out[rng.choice(sorted(out))]
    elif op == "rename" and out:
        old = rng.choice(sorted(out))
        out[f"moved/{old}"] = out.pop(old)
    elif op == "rewrite" and out:
        target = rng.choice(sorted(out))
        out[target] = out[target] + b"import scipy\n"
    return out


def check_invariants(tree: dict[str, bytes], rng: random.Random) -> None:
    report = analyze_tree(tree)
    assert canonical(report) == canonical(analyze_tree(shuffled(tree, rng)))
    assert_sound(report, set(tree))
    grown = {**tree, f"zz_unregistered_{rng.randrange(10**6)}.qqq": b"data"}
    assert lang_ids(report) <= lang_ids(analyze_tree(grown))


class TestDetect:
    def test_e3_is_cpp(self) -> None:
        assert lang_ids(analyze_tree(fixture_tree("e3_mini"))) == {"Cpp"}

    def test_java_with_shell_scripts(self) -> None:
        hits = detect_languages(["pom.xml", "src/Main.java", "scripts/run.sh"])
        assert {h.language for h in hits} == {"JavaMaven", "UnixShell"}

    def test_empty(self) -> None:
        assert detect_languages([]) == ()

    def test_unknown_extension_only(self) -> None:
        report = analyze_tree({"notes.qqq": b"import numpy"})
        assert report.languages == () and report.dependencies == () and report.unresolved_imports == ()

    @pytest.mark.parametrize("name", FIXTURES)
    def test_fixture_languages_match_oracle(self, name: str) -> None:
        tree = fixture_tree(name)
        assert lang_ids(analyze_tree(tree)) == oracle_languages(list(tree))


class TestExtract:
    def test_import_without_manifest(self) -> None:
        report = analyze_tree({"fetch.py": b"import requests\n"})
        assert package_set(report) == {("requests", None, "import_scan")}

    def test_manifest_pin(self) -> None:
        report = analyze_tree({"requirements.txt": b"requests==2.28.1\n", "a.py": b"import requests\n"})
        (dep,) = report.dependencies
        assert (dep.name, dep.version, dep.source) == ("requests", "2.28.1", DependencySource.manifest)
        assert dep.provenance == ("a.py", "requirements.txt")

    def test_cpp_has_no_packages(self) -> None:
        assert analyze_tree(fixture_tree("e3_mini")).dependencies == ()

    def test_stdlib_excluded(self) -> None:
        report = analyze_tree({"a.py": b"import os\nimport json\nfrom collections import deque\n"})
        assert report.dependencies == ()

    def test_alias_table(self) -> None:
        report = analyze_tree({"q.py": b"import psycopg2\nimport sklearn.svm\n"})
        assert {d.name for d in report.dependencies} == {"psycopg2-binary", "scikit-learn"}

    def test_local_package_is_not_a_dependency(self) -> None:
        report = analyze_tree(fixture_tree("py_requests"))
        assert "pkg" not in {d.name for d in report.dependencies}

    def test_notebook_markdown_ignored(self) -> None:
        assert package_set(analyze_tree(fixture_tree("nb_sample"))) == {("matplotlib", None, "import_scan")}

    def test_shell_contributes_no_packages(self) -> None:
        report = analyze_tree({"run.sh": b"pip install numpy\nimport x\n"})
        assert lang_ids(report) == {"UnixShell"} and report.dependencies == ()

    def test_e7_manifest(self) -> None:
        report = analyze_tree(fixture_tree("e7_mini"))
        assert report.manifests_found == ("pom.xml",)
        assert package_set(report) == {("junit:junit", "4.13.2", "manifest")}

    def test_malformed_manifest_does_not_stop_others(self) -> None:
        tree = {"pom.xml": b"<project><dependencies>", "Main.java": b"class M {}",
                "requirements.txt": b"numpy==1.24.4\n", "a.py": b"import yaml\n"}
        report = analyze_tree(tree)
        assert [p for p, _ in report.manifest_errors] == ["pom.xml"]
        assert package_set(report) == {("numpy", "1.24.4", "manifest"), ("PyYAML", None, "import_scan")}

    def test_conflicting_pins_reported(self) -> None:
        tree = {"a/requirements.txt": b"numpy==1.24.4\n", "b/requirements.txt": b"numpy==1.26.0\n"}
        report = analyze_tree(tree)
        assert report.conflicts == (("numpy", ("1.24.4", "1.26.0")),)

    def test_dynamic_import_is_unresolved(self) -> None:
        report = analyze_tree({"a.py": b"import importlib\nmod = importlib.import_module(name)\n"})
        assert report.dependencies == ()
        assert report.unresolved_imports

    @pytest.mark.parametrize("name", FIXTURES)
    def test_fixture_dependencies_match_oracle(self, name: str) -> None:
        tree = fixture_tree(name)
        assert package_set(analyze_tree(tree)) == oracle_dependencies(tree)


class TestInferStored:
    def test_persisted(self, store) -> None:
        pid = store.create_project("e3").id
        store.write_files(pid, sorted(fixture_tree("e3_mini").items()))
        report = infer(store, pid)
        assert InferenceReport.from_dict(store.load_report(pid)) == report

    def test_missing_project(self, store) -> None:
        with pytest.raises(ProjectNotFound):
            infer(store, "ghost")


class TestOverrides:
    def test_add_system_package(self) -> None:
        report = analyze_tree(fixture_tree("e7_mini"))
        edits = UserEdits(add_dependencies=[DependencySpec("libgomp1", ecosystem=Ecosystem.system_package,
                                                           source=DependencySource.user_override)])
        out = apply_overrides(report, edits)
        assert "libgomp1" in {d.name for d in out.dependencies}

    def test_remove_language(self) -> None:
        report = analyze_tree(fixture_tree("e7_mini"))
        out = apply_overrides(report, UserEdits(remove_languages=["UnixShell"]))
        assert lang_ids(out) == {"JavaMaven"}

    def test_override_pin_wins(self) -> None:
        report = analyze_tree(fixture_tree("py_requests"))
        edits = UserEdits.from_dict({"add_dependencies": [{"name": "numpy", "version": "1.26.4",
                                                           "language": "Python"}]})
        (numpy,) = [d for d in apply_overrides(report, edits).dependencies if d.name == "numpy"]
        assert (numpy.version, numpy.source) == ("1.26.4", DependencySource.user_override)

    def test_unknown_language(self) -> None:
        with pytest.raises(UnknownLanguage):
            apply_overrides(InferenceReport(), UserEdits(add_languages=["COBOL"]))

    def test_removing_language_drops_its_packages(self) -> None:
        report = analyze_tree(fixture_tree("py_requests"))
        assert apply_overrides(report, UserEdits(remove_languages=["Python"])).dependencies == ()

    def test_report_round_trips(self) -> None:
        for name in FIXTURES:
            report = analyze_tree(fixture_tree(name))
            assert InferenceReport.from_dict(json.loads(json.dumps(report.to_dict()))) == report


class TestProperties:
    @settings(max_examples=150, deadline=None)
    @given(tree=project_trees(), seed=st.integers(0, 2**32 - 1))
    def test_invariants_on_generated_trees(self, tree: dict[str, bytes], seed: int) -> None:
        check_invariants(tree, random.Random(seed))

    @settings(max_examples=100, deadline=None)
    @given(tree=project_trees(), ops=st.lists(MUTATIONS, min_size=1, max_size=4), seed=st.integers(0, 2**32 - 1))
    def test_invariants_after_mutation(self, tree: dict[str, bytes], ops: list[str], seed: int) -> None:
        rng = random.Random(seed)
        for op in ops:
            tree = mutate(tree, op, rng)
            check_invariants(tree, rng)

    @pytest.mark.parametrize("name", FIXTURES)
    def test_fixture_shuffles(self, name: str) -> None:
        tree = fixture_tree(name)
        rng = random.Random(name)
        for _ in range(10):
            check_invariants(tree, rng)
