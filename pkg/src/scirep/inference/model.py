from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Any


class Ecosystem(str, enum.Enum):
    system_package = "system_package"
    language_package = "language_package"


class DependencySource(str, enum.Enum):
    manifest = "manifest"
    import_scan = "import_scan"
    user_override = "user_override"


USER_OVERRIDE_RULE = "user_override"


@dataclass(frozen=True, order=True)
class Evidence:
    path: str
    rule: str


@dataclass(frozen=True)
class LanguageHit:
    language: str
    evidence: tuple[Evidence, ...]

    def to_dict(self) -> dict[str, Any]:
        return {"language": self.language,
                "evidence": [{"path": e.path, "rule": e.rule} for e in self.evidence]}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> LanguageHit:
        return cls(d["language"], tuple(Evidence(e["path"], e["rule"]) for e in d["evidence"]))


@dataclass(frozen=True)
class DependencySpec:
    name: str
    version: str | None = None
    ecosystem: Ecosystem = Ecosystem.language_package
    source: DependencySource = DependencySource.import_scan
    # which toolchain installs it; None for system packages
    language: str | None = None
    provenance: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("dependency name must be non-empty")
        object.__setattr__(self, "ecosystem", Ecosystem(self.ecosystem))
        object.__setattr__(self, "source", DependencySource(self.source))
        if self.source is DependencySource.manifest and not self.provenance:
            raise ValueError(f"manifest dependency {self.name!r} needs a manifest path in provenance")

    def sort_key(self) -> tuple[str, ...]:
        return (self.ecosystem.value, self.language or "", self.name.lower(), self.version or "",
                self.source.value)

    @property
    def is_specifier(self) -> bool:
        return bool(self.version) and self.version[0] in "<>=!~"

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "version": self.version,
            "ecosystem": self.ecosystem.value,
            "source": self.source.value,
            "language": self.language,
            "provenance": list(self.provenance),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> DependencySpec:
        return cls(d["name"], d.get("version"), Ecosystem(d.get("ecosystem", "language_package")),
                   DependencySource(d.get("source", "user_override")), d.get("language"),
                   tuple(d.get("provenance", ())))


@dataclass(frozen=True)
class InferenceReport:
    languages: tuple[LanguageHit, ...] = ()
    dependencies: tuple[DependencySpec, ...] = ()
    manifests_found: tuple[str, ...] = ()
    unresolved_imports: tuple[tuple[str, str], ...] = ()
    conflicts: tuple[tuple[str, tuple[str, ...]], ...] = ()
    manifest_errors: tuple[tuple[str, str], ...] = field(default=())

    @property
    def language_ids(self) -> set[str]:
        return {h.language for h in self.languages}

    def to_dict(self) -> dict[str, Any]:
        return {
            "languages": [h.to_dict() for h in self.languages],
            "dependencies": [d.to_dict() for d in self.dependencies],
            "manifests_found": list(self.manifests_found),
            "unresolved_imports": [list(u) for u in self.unresolved_imports],
            "conflicts": [{"name": n, "versions": list(v)} for n, v in self.conflicts],
            "manifest_errors": [{"path": p, "message": m} for p, m in self.manifest_errors],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> InferenceReport:
        return cls(
            languages=tuple(LanguageHit.from_dict(h) for h in d.get("languages", ())),
            dependencies=tuple(DependencySpec.from_dict(x) for x in d.get("dependencies", ())),
            manifests_found=tuple(d.get("manifests_found", ())),
            unresolved_imports=tuple((u[0], u[1]) for u in d.get("unresolved_imports", ())),
            conflicts=tuple((c["name"], tuple(c["versions"])) for c in d.get("conflicts", ())),
            manifest_errors=tuple((e["path"], e["message"]) for e in d.get("manifest_errors", ())),
        )
