"""Second stage: dependencies from manifests and line-based import scanning."""

from __future__ import annotations

import json
import re
import xml.etree.ElementTree as ET
from collections import defaultdict
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import PurePosixPath

from packaging.requirements import InvalidRequirement, Requirement
from packaging.utils import canonicalize_name

from scirep.errors import ManifestParseError
from scirep.inference.model import DependencySource, DependencySpec, Ecosystem, LanguageHit
from scirep.inference.registry import LanguageRules, Registry, default_registry

_CPAN_LINE = re.compile(
    r"""^\s*(?:requires|recommends)\s+['"](?P<name>[\w:]+)['"]"""
    r"""(?:\s*(?:,|=>)\s*['"]?(?P<version>[^'";\s]+)['"]?)?\s*;"""
)


@dataclass
class DependencyScan:
    dependencies: tuple[DependencySpec, ...] = ()
    manifests_found: tuple[str, ...] = ()
    unresolved_imports: tuple[tuple[str, str], ...] = ()
    conflicts: tuple[tuple[str, tuple[str, ...]], ...] = ()
    errors: list[ManifestParseError] = field(default_factory=list)


def _text(data: bytes) -> str:
    return data.decode("utf-8", errors="replace")


def _strip_comment_lines(text: str, comment: str | None) -> str:
    if not comment:
        return text
    return "\n".join("" if line.lstrip().startswith(comment) else line for line in text.splitlines())


def notebook_code(data: bytes) -> str:
    nb = json.loads(data)
    chunks = []
    for cell in nb.get("cells", []):
        if cell.get("cell_type") != "code":
            continue
        src = cell.get("source", "")
        chunks.append("".join(src) if isinstance(src, list) else str(src))
    return "\n".join(chunks)


def scan_imports(text: str, rules: LanguageRules) -> tuple[list[str], list[str]]:
    """Return (resolved module names, unresolved symbols) found in ``text``."""
    text = _strip_comment_lines(text, rules.line_comment)
    found: list[str] = []
    unresolved: list[str] = []
    for pat in rules.import_patterns:
        for m in pat.regex.finditer(text):
            raw = m.group("name")
            names = raw.split(pat.split) if pat.split else [raw]
            for name in names:
                name = re.split(r"\s+as\s+", name.strip())[0].strip()
                if not name:
                    continue
                (unresolved if pat.unresolved else found).append(name)
    return found, unresolved


def _local_modules(paths: Iterable[str], rules: LanguageRules) -> set[str]:
    local: set[str] = set()
    for path in paths:
        p = PurePosixPath(path)
        if rules.language == "Python" and p.suffix == ".py":
            local.add(p.stem)
            local.update(p.parts[:-1])
        elif rules.language == "Perl" and p.suffix == ".pm":
            parts = p.with_suffix("").parts
            for i in range(len(parts)):
                local.add("::".join(parts[i:]))
        elif rules.language == "R" and p.suffix in (".R", ".r"):
            local.add(p.stem)
    return local


def _top_level(name: str, rules: LanguageRules) -> str:
    if rules.module_separator:
        return name.split(rules.module_separator)[0]
    return name


def parse_requirements(path: str, text: str, tree: Mapping[str, bytes],
                       seen: set[str] | None = None) -> tuple[list[DependencySpec], list[str]]:
    """Parse a pip requirements file (following ``-r`` includes inside the tree)."""
    seen = seen if seen is not None else set()
    seen.add(path)
    deps: list[DependencySpec] = []
    unresolved: list[str] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = re.sub(r"(^|\s)#.*$", "", raw).strip()
        if not line:
            continue
        if line.startswith(("-r ", "--requirement")):
            inc = line.split(None, 1)[1].strip() if " " in line else line.split("=", 1)[-1]
            target = str(PurePosixPath(path).parent / inc) if "/" in path else inc
            target = target.removeprefix("./")
            if target in tree and target not in seen:
                sub, sub_unres = parse_requirements(target, _text(tree[target]), tree, seen)
                deps += sub
                unresolved += sub_unres
            else:
                unresolved.append(line)
            continue
        if line.startswith("-"):
            unresolved.append(line)
            continue
        try:
            req = Requirement(line)
        except InvalidRequirement as exc:
            raise ManifestParseError(path, f"line {lineno}: {exc}", line=lineno) from exc
        if req.url:
            unresolved.append(line)
            continue
        specs = list(req.specifier)
        if len(specs) == 1 and specs[0].operator in ("==", "===") and "*" not in specs[0].version:
            version: str | None = specs[0].version
        else:
            version = str(req.specifier) or None
        deps.append(DependencySpec(req.name, version, Ecosystem.language_package,
                                   DependencySource.manifest, "Python", (path,)))
    return deps, unresolved


def _strip_ns(tag: str) -> str:
    return tag.rsplit("}", 1)[-1]


def parse_pom(path: str, text: str) -> list[DependencySpec]:
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        line = exc.position[0] if exc.position else None
        raise ManifestParseError(path, f"malformed XML: {exc}", line=line) from exc
    if _strip_ns(root.tag) != "project":
        raise ManifestParseError(path, "root element is not <project>")

    def child(el: ET.Element, name: str) -> ET.Element | None:
        for c in el:
            if _strip_ns(c.tag) == name:
                return c
        return None

    props: dict[str, str] = {}
    props_el = child(root, "properties")
    if props_el is not None:
        props = {_strip_ns(c.tag): (c.text or "").strip() for c in props_el}
    deps_el = child(root, "dependencies")
    out = []
    for dep in [] if deps_el is None else deps_el:
        if _strip_ns(dep.tag) != "dependency":
            continue
        g, a, v = (child(dep, k) for k in ("groupId", "artifactId", "version"))
        if g is None or a is None or not (g.text or "").strip() or not (a.text or "").strip():
            raise ManifestParseError(path, "dependency without groupId/artifactId")
        version = (v.text or "").strip() if v is not None else None
        if version:
            version = re.sub(r"\$\{([^}]+)\}", lambda m: props.get(m.group(1), m.group(0)), version)
        out.append(DependencySpec(f"{g.text.strip()}:{a.text.strip()}", version or None,
                                  Ecosystem.language_package, DependencySource.manifest,
                                  "JavaMaven", (path,)))
    return out


def parse_cpanfile(path: str, text: str) -> list[DependencySpec]:
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line or not line.startswith(("requires", "recommends")):
            continue
        m = _CPAN_LINE.match(line)
        if m is None:
            raise ManifestParseError(path, f"line {lineno}: cannot parse {raw.strip()!r}", line=lineno)
        version = m.group("version")
        out.append(DependencySpec(m.group("name"), None if version in (None, "0") else version,
                                  Ecosystem.language_package, DependencySource.manifest, "Perl", (path,)))
    return out


def _dedup_key(dep: DependencySpec) -> tuple[str, str]:
    name = canonicalize_name(dep.name) if dep.language == "Python" else dep.name
    return name, dep.ecosystem.value


def merge_dependencies(specs: Iterable[DependencySpec]) -> tuple[
        tuple[DependencySpec, ...], tuple[tuple[str, tuple[str, ...]], ...], list[tuple[str, str]]]:
    """Deduplicate by (name, ecosystem).

    Manifest pins beat import-scan hits for the same name. Distinct pins for one
    name are all kept and reported as a conflict instead of being merged.
    """
    groups: dict[tuple[str, str], list[DependencySpec]] = defaultdict(list)
    for s in specs:
        groups[_dedup_key(s)].append(s)
    merged: list[DependencySpec] = []
    conflicts: list[tuple[str, tuple[str, ...]]] = []
    flagged: list[tuple[str, str]] = []
    for key in sorted(groups):
        group = groups[key]
        manifest = [s for s in group if s.source is DependencySource.manifest]
        provenance = tuple(sorted({p for s in group for p in s.provenance}))
        pins = sorted({s.version for s in manifest if s.version})
        if len(pins) > 1:
            first = manifest[0]
            for pin in pins:
                paths = tuple(sorted({p for s in manifest if s.version == pin for p in s.provenance}))
                merged.append(DependencySpec(first.name, pin, first.ecosystem, DependencySource.manifest,
                                             first.language, paths))
                flagged.extend((p, first.name) for p in paths)
            conflicts.append((first.name, tuple(pins)))
        elif manifest:
            first = manifest[0]
            merged.append(DependencySpec(first.name, pins[0] if pins else None, first.ecosystem,
                                         DependencySource.manifest, first.language, provenance))
        else:
            first = min(group, key=lambda s: s.name)
            merged.append(DependencySpec(first.name, None, first.ecosystem, DependencySource.import_scan,
                                         first.language, provenance))
    return tuple(sorted(merged, key=DependencySpec.sort_key)), tuple(conflicts), flagged


def extract_dependencies(tree: Mapping[str, bytes], languages: Iterable[LanguageHit],
                         registry: Registry | None = None) -> DependencyScan:
    """Collect dependencies for the detected languages.

    A malformed manifest is recorded in ``errors`` and the remaining manifests
    are still processed.
    """
    registry = registry or default_registry()
    paths = sorted(tree)
    specs: list[DependencySpec] = []
    unresolved: set[tuple[str, str]] = set()
    manifests: set[str] = set()
    errors: list[ManifestParseError] = []
    detected = sorted({h.language for h in languages})

    for lang_id in detected:
        rules = registry[lang_id]
        for manifest_name, parser in rules.manifests:
            for path in paths:
                if PurePosixPath(path).name != manifest_name:
                    continue
                manifests.add(path)
                text = _text(tree[path])
                try:
                    if parser == "requirements":
                        found, unres = parse_requirements(path, text, tree)
                        unresolved.update((path, u) for u in unres)
                    elif parser == "maven_pom":
                        found = parse_pom(path, text)
                    elif parser == "cpanfile":
                        found = parse_cpanfile(path, text)
                    else:
                        raise ManifestParseError(path, f"no parser named {parser!r}")
                except ManifestParseError as exc:
                    errors.append(exc)
                    continue
                specs.extend(found)

        scan_rules = registry[rules.notebook_cells_as] if rules.notebook_cells_as else rules
        if not scan_rules.import_patterns:
            continue
        local = _local_modules(paths, scan_rules)
        for path in paths:
            if not path.endswith(rules.extensions):
                continue
            try:
                text = notebook_code(tree[path]) if rules.notebook_cells_as else _text(tree[path])
            except (ValueError, AttributeError) as exc:
                errors.append(ManifestParseError(path, f"unreadable notebook: {exc}"))
                continue
            found_names, unres = scan_imports(text, scan_rules)
            unresolved.update((path, u) for u in unres)
            for name in found_names:
                if name.startswith("."):
                    continue
                top = _top_level(name, scan_rules)
                if top in scan_rules.stdlib or name in scan_rules.stdlib or top in local or name in local:
                    continue
                package = scan_rules.aliases.get(top, top)
                specs.append(DependencySpec(package, None, Ecosystem.language_package,
                                            DependencySource.import_scan, scan_rules.language, (path,)))

    deps, conflicts, flagged = merge_dependencies(specs)
    unresolved.update(flagged)
    return DependencyScan(deps, tuple(sorted(manifests)), tuple(sorted(unresolved)), conflicts, errors)
