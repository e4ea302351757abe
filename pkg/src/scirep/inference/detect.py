"""First stage: which languages does a tree use?"""

from __future__ import annotations

from collections.abc import Iterable
from pathlib import PurePosixPath

from scirep.inference.model import Evidence, LanguageHit
from scirep.inference.registry import LanguageRules, Registry, default_registry


def _basename(path: str) -> str:
    return PurePosixPath(path).name


def _has_extension(paths: Iterable[str], extensions: Iterable[str]) -> bool:
    exts = tuple(extensions)
    return any(p.endswith(exts) for p in paths)


def rule_holds(rules: LanguageRules, rule: str, path: str, tree_paths: set[str]) -> bool:
    """Replay one named rule against ``path`` within ``tree_paths``."""
    if path not in tree_paths:
        return False
    kind, _, arg = rule.partition(":")
    if kind == "extension":
        if arg not in rules.extensions or not path.endswith(arg):
            return False
        if rules.extensions_require_any:
            return any(_basename(p) in rules.extensions_require_any for p in tree_paths)
        return True
    if kind == "structure":
        for s in rules.structure_files:
            if s.name == arg and _basename(path) == arg:
                return not s.requires_extensions or _has_extension(tree_paths, s.requires_extensions)
        return False
    return False


def detect_languages(paths: Iterable[str], registry: Registry | None = None) -> tuple[LanguageHit, ...]:
    """Detect languages from file paths.

    The result is sorted by language id with sorted evidence, so it does not
    depend on the order ``paths`` are enumerated in.
    """
    registry = registry or default_registry()
    tree = set(paths)
    ordered = sorted(tree)
    hits = []
    for rules in registry:
        evidence: list[Evidence] = []
        for path in ordered:
            for rule in rules.rule_names:
                if rule_holds(rules, rule, path, tree):
                    evidence.append(Evidence(path, rule))
        if evidence:
            hits.append(LanguageHit(rules.language, tuple(sorted(evidence))))
    return tuple(sorted(hits, key=lambda h: h.language))
