"""Language and dependency inference over a project tree."""

from __future__ import annotations

import json
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field
from typing import Any

from scirep.errors import UnknownLanguage
from scirep.inference.detect import detect_languages, rule_holds
from scirep.inference.model import (
    USER_OVERRIDE_RULE,
    DependencySource,
    DependencySpec,
    Ecosystem,
    Evidence,
    InferenceReport,
    LanguageHit,
)
from scirep.inference.registry import BUILTIN_LANGUAGES, Registry, default_registry
from scirep.inference.scan import DependencyScan, extract_dependencies
from scirep.store import ProjectStore

__all__ = [
    "BUILTIN_LANGUAGES",
    "DependencyScan",
    "DependencySource",
    "DependencySpec",
    "Ecosystem",
    "Evidence",
    "InferenceReport",
    "LanguageHit",
    "Registry",
    "UserEdits",
    "analyze_tree",
    "apply_overrides",
    "default_registry",
    "detect_languages",
    "extract_dependencies",
    "infer",
    "rule_holds",
]


class StoredTree(Mapping[str, bytes]):
    """Lazy path -> bytes view of a project's files; reads only what is asked for."""

    def __init__(self, store: ProjectStore, project_id: str) -> None:
        self._store = store
        self._project_id = project_id
        self._paths = [e.path for e in store.get_tree(project_id) if e.kind == "file"]

    def __getitem__(self, path: str) -> bytes:
        if path not in self._paths:
            raise KeyError(path)
        return self._store.read_file(self._project_id, path)

    def __iter__(self) -> Iterator[str]:
        return iter(self._paths)

    def __len__(self) -> int:
        return len(self._paths)


def analyze_tree(tree: Mapping[str, bytes], registry: Registry | None = None) -> InferenceReport:
    registry = registry or default_registry()
    languages = detect_languages(tree.keys(), registry)
    scan = extract_dependencies(tree, languages, registry)
    return InferenceReport(
        languages=languages,
        dependencies=scan.dependencies,
        manifests_found=scan.manifests_found,
        unresolved_imports=scan.unresolved_imports,
        conflicts=scan.conflicts,
        manifest_errors=tuple(sorted((e.path, e.message) for e in scan.errors)),
    )


def infer(store: ProjectStore, project_id: str, registry: Registry | None = None) -> InferenceReport:
    """Run both inference stages over the stored tree and persist the report."""
    report = analyze_tree(StoredTree(store, project_id), registry)
    store.save_report(project_id, report.to_dict())
    return report


@dataclass
class UserEdits:
    add_languages: list[str] = field(default_factory=list)
    remove_languages: list[str] = field(default_factory=list)
    add_dependencies: list[DependencySpec] = field(default_factory=list)
    # plain names remove every ecosystem; (name, ecosystem) pairs are targeted
    remove_dependencies: list[str | tuple[str, str]] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "add_languages": sorted(self.add_languages),
            "remove_languages": sorted(self.remove_languages),
            "add_dependencies": [d.to_dict() for d in self.add_dependencies],
            "remove_dependencies": [list(r) if isinstance(r, tuple) else r for r in self.remove_dependencies],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> UserEdits:
        adds = []
        for raw in d.get("add_dependencies", ()):
            raw = dict(raw)
            raw["source"] = DependencySource.user_override.value
            adds.append(DependencySpec.from_dict(raw))
        return cls(
            add_languages=list(d.get("add_languages", ())),
            remove_languages=list(d.get("remove_languages", ())),
            add_dependencies=adds,
            remove_dependencies=[tuple(r) if isinstance(r, list) else r
                                 for r in d.get("remove_dependencies", ())],
        )

    def merged_with(self, later: UserEdits) -> UserEdits:
        return UserEdits(
            self.add_languages + later.add_languages,
            self.remove_languages + later.remove_languages,
            self.add_dependencies + later.add_dependencies,
            self.remove_dependencies + later.remove_dependencies,
        )


def _matches_removal(dep: DependencySpec, removals: Iterable[str | tuple[str, str]]) -> bool:
    for r in removals:
        if isinstance(r, tuple):
            if dep.name == r[0] and dep.ecosystem.value == r[1]:
                return True
        elif dep.name == r:
            return True
    return False


def apply_overrides(report: InferenceReport, edits: UserEdits,
                    registry: Registry | None = None) -> InferenceReport:
    """Apply user corrections to an inferred report.

    Added dependencies win over inferred entries with the same name and
    ecosystem (including both sides of an inferred pin conflict). Removing a
    language also drops the inferred dependencies that language would install.
    """
    registry = registry or default_registry()
    for lang in (*edits.add_languages, *edits.remove_languages):
        if lang not in registry:
            raise UnknownLanguage(f"unknown language {lang!r}", language=lang)
    removed = set(edits.remove_languages)

    hits = {h.language: h for h in report.languages if h.language not in removed}
    for lang in edits.add_languages:
        if lang not in hits and lang not in removed:
            hits[lang] = LanguageHit(lang, (Evidence("", USER_OVERRIDE_RULE),))

    overrides = [
        DependencySpec(d.name, d.version, d.ecosystem, DependencySource.user_override, d.language,
                       d.provenance)
        for d in edits.add_dependencies
    ]
    override_keys = {(d.name.lower(), d.ecosystem) for d in overrides}
    kept = [
        d for d in report.dependencies
        if (d.name.lower(), d.ecosystem) not in override_keys
        and not _matches_removal(d, edits.remove_dependencies)
        and not (d.language in removed and d.source is not DependencySource.user_override)
    ]
    overrides = [d for d in overrides if not _matches_removal(d, edits.remove_dependencies)]
    # later overrides of the same key replace earlier ones
    last: dict[tuple[str, Ecosystem], DependencySpec] = {}
    for d in overrides:
        last[(d.name.lower(), d.ecosystem)] = d
    deps = tuple(sorted([*kept, *last.values()], key=DependencySpec.sort_key))

    live_names = {d.name for d in deps}
    settled = {d.name for d in last.values()} | {
        d if isinstance(d, str) else d[0] for d in edits.remove_dependencies
    }
    conflicts = tuple(c for c in report.conflicts if c[0] not in settled and c[0] in live_names)
    conflict_names = {c[0] for c in report.conflicts} - {c[0] for c in conflicts}
    unresolved = tuple(u for u in report.unresolved_imports if u[1] not in conflict_names)
    return InferenceReport(
        languages=tuple(sorted(hits.values(), key=lambda h: h.language)),
        dependencies=deps,
        manifests_found=report.manifests_found,
        unresolved_imports=unresolved,
        conflicts=conflicts,
        manifest_errors=report.manifest_errors,
    )


def effective_report(store: ProjectStore, project_id: str) -> InferenceReport:
    """The persisted inferred report with the persisted user edits applied."""
    raw = store.load_report(project_id)
    report = InferenceReport.from_dict(raw) if raw is not None else infer(store, project_id)
    edits_raw = store.get_project_field(project_id, "overrides")
    if edits_raw:
        report = apply_overrides(report, UserEdits.from_dict(json.loads(edits_raw)))
    return report


def save_overrides(store: ProjectStore, project_id: str, edits: UserEdits) -> InferenceReport:
    """Persist ``edits`` (accumulating with earlier ones) and return the effective report."""
    raw = store.get_project_field(project_id, "overrides")
    combined = UserEdits.from_dict(json.loads(raw)).merged_with(edits) if raw else edits
    # validate before persisting
    base = store.load_report(project_id)
    report = InferenceReport.from_dict(base) if base is not None else infer(store, project_id)
    result = apply_overrides(report, combined)
    store.set_project_fields(project_id, overrides=json.dumps(combined.to_dict(), sort_keys=True))
    return result

