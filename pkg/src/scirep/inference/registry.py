"""Language registry loaded from JSON rule files.

The bundled ``languages.json`` covers the built-in languages; additional files
with the same format can be layered on top with :meth:`Registry.extend`.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any

BUILTIN_LANGUAGES = ("Cpp", "Python", "R", "JavaMaven", "Perl", "UnixShell", "JupyterNotebook")


@dataclass(frozen=True)
class StructureRule:
    name: str
    requires_extensions: tuple[str, ...] = ()


@dataclass(frozen=True)
class ImportPattern:
    regex: re.Pattern[str]
    split: str | None = None
    unresolved: bool = False


@dataclass(frozen=True)
class LanguageRules:
    language: str
    extensions: tuple[str, ...]
    extensions_require_any: tuple[str, ...] = ()
    structure_files: tuple[StructureRule, ...] = ()
    line_comment: str | None = None
    module_separator: str | None = None
    import_patterns: tuple[ImportPattern, ...] = ()
    manifests: tuple[tuple[str, str], ...] = ()
    stdlib: frozenset[str] = frozenset()
    aliases: dict[str, str] = field(default_factory=dict)
    notebook_cells_as: str | None = None
    toolchain: dict[str, Any] = field(default_factory=dict)

    @property
    def rule_names(self) -> list[str]:
        names = [f"extension:{e}" for e in self.extensions]
        names += [f"structure:{s.name}" for s in self.structure_files]
        return names


def _read_stdlib(ref: str | None, base: Path | None) -> frozenset[str]:
    if not ref:
        return frozenset()
    if base is not None and (base / ref).exists():
        text = (base / ref).read_text(encoding="utf-8")
    else:
        text = resources.files("scirep.inference").joinpath(ref).read_text(encoding="utf-8")
    return frozenset(
        line.strip() for line in text.splitlines() if line.strip() and not line.startswith("#")
    )


def _parse_language(raw: dict[str, Any], base: Path | None) -> LanguageRules:
    return LanguageRules(
        language=raw["language"],
        extensions=tuple(raw.get("extensions", ())),
        extensions_require_any=tuple(raw.get("extensions_require_any", ())),
        structure_files=tuple(
            StructureRule(s["name"], tuple(s.get("requires_extensions", ())))
            for s in raw.get("structure_files", ())
        ),
        line_comment=raw.get("line_comment"),
        module_separator=raw.get("module_separator"),
        import_patterns=tuple(
            ImportPattern(re.compile(p["pattern"], re.MULTILINE), p.get("split"), bool(p.get("unresolved")))
            for p in raw.get("import_patterns", ())
        ),
        manifests=tuple((m["file"], m["parser"]) for m in raw.get("manifests", ())),
        stdlib=_read_stdlib(raw.get("stdlib_exclusions_ref"), base),
        aliases=dict(raw.get("aliases", {})),
        notebook_cells_as=raw.get("notebook_cells_as"),
        toolchain=dict(raw.get("toolchain", {})),
    )


class Registry:
    def __init__(self, languages: list[LanguageRules]) -> None:
        self._by_id: dict[str, LanguageRules] = {}
        for lang in languages:
            if not lang.extensions and not lang.structure_files:
                raise ValueError(f"language {lang.language!r} has no detection rule")
            self._by_id[lang.language] = lang

    @classmethod
    def from_file(cls, path: str | Path) -> Registry:
        path = Path(path)
        raw = json.loads(path.read_text(encoding="utf-8"))
        return cls([_parse_language(x, path.parent) for x in raw["languages"]])

    @classmethod
    def from_data(cls, raw: dict[str, Any]) -> Registry:
        return cls([_parse_language(x, None) for x in raw["languages"]])

    def extend(self, other: Registry) -> Registry:
        """Return a registry with ``other``'s languages added (or replacing same ids)."""
        merged = dict(self._by_id)
        merged.update(other._by_id)
        return Registry(list(merged.values()))

    def __contains__(self, language: object) -> bool:
        return language in self._by_id

    def __getitem__(self, language: str) -> LanguageRules:
        return self._by_id[language]

    def __iter__(self):
        return iter(self._by_id.values())

    @property
    def ids(self) -> list[str]:
        return list(self._by_id)

    def order_of(self, language: str) -> int:
        return self.ids.index(language)


@lru_cache(maxsize=1)
def default_registry() -> Registry:
    raw = json.loads(
        resources.files("scirep.inference").joinpath("languages.json").read_text(encoding="utf-8")
    )
    return Registry.from_data(raw)
