"""
Kernel isolation: for every __global__ function in a repository, compute its
dependency closure (quoted headers and device functions), then write a
self-contained unit folder with kernel.cu, the copied headers, and the
parameter manifest.
"""

# Standard
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Set, Tuple
import json
import os
import posixpath
import re
import shutil

# Local
from .constants import (
    EXTRACT_MANIFEST,
    KERNEL_FILE,
    PARAMS_FILE,
    UNIT_FILE,
    UNITS_DIR,
)
from .corpus_miner import (
    ManifestWriter,
    RepoStatus,
    SourceFile,
    list_sources,
    load_mine_manifest,
)
from .log import log
from .parse_cuda_sources import (
    FunctionDecl,
    IncludeDirective,
    Qualifier,
    read_source,
    scan_directives,
    scan_includes,
    scan_text,
    write_source,
)

## Repository index ############################################################


class RepoIndex:
    """Lazily scanned view over the source files of one repository"""

    def __init__(self, repo_dir: str, files: List[SourceFile]):
        self.repo_dir = repo_dir
        self.files = sorted(files, key=lambda source: source.relative_path)
        self.by_path = {source.relative_path: source for source in self.files}
        self._texts: Dict[str, str] = {}
        self._includes: Dict[str, List[IncludeDirective]] = {}
        self.file_diagnostics: Dict[str, List[str]] = {}
        self.decls: Dict[str, List[FunctionDecl]] = {}
        self.device_defs: Dict[str, List[FunctionDecl]] = {}
        for source in self.files:
            diagnostics = []
            decls = scan_text(self.text(source.relative_path), source, diagnostics)
            self.decls[source.relative_path] = decls
            self.file_diagnostics[source.relative_path] = diagnostics
            for decl in decls:
                if decl.qualifier == Qualifier.DEVICE:
                    self.device_defs.setdefault(decl.name, []).append(decl)

    @classmethod
    def from_dir(cls, repo_dir: str, repo_index: int = -1) -> "RepoIndex":
        return cls(repo_dir, list_sources(repo_dir, repo_index))

    def text(self, rel_path: str) -> str:
        if rel_path not in self._texts:
            self._texts[rel_path] = read_source(os.path.join(self.repo_dir, rel_path))
        return self._texts[rel_path]

    def includes(self, rel_path: str) -> List[IncludeDirective]:
        if rel_path not in self._includes:
            self._includes[rel_path] = scan_includes(self.text(rel_path))
        return self._includes[rel_path]

    @property
    def kernels(self) -> List[FunctionDecl]:
        return [
            decl
            for source in self.files
            for decl in self.decls[source.relative_path]
            if decl.qualifier == Qualifier.GLOBAL
        ]

    def resolve_include(self, includer: str, target: str) -> Optional[str]:
        """Resolve a quoted include against the includer's directory, then the
        repository root, then a unique path-suffix match
        """
        relative = posixpath.normpath(
            posixpath.join(posixpath.dirname(includer), target)
        )
        if relative in self.by_path:
            return relative
        rooted = posixpath.normpath(target)
        if rooted in self.by_path:
            return rooted
        suffix = "/" + rooted.lstrip("./")
        matches = [path for path in self.by_path if path.endswith(suffix)]
        if len(matches) == 1:
            return matches[0]
        return None

    def find_basename(self, basename: str) -> Optional[str]:
        for source in self.files:
            if posixpath.basename(source.relative_path) == basename:
                return source.relative_path
        return None


## Types #######################################################################


class ExtractStatus(str, Enum):
    OK = "ok"
    NON_BUILDABLE = "non_buildable"
    FAILED = "failed"


@dataclass
class KernelUnit:
    id: str
    entry: FunctionDecl
    deps: List[SourceFile]
    device_fns: List[FunctionDecl]
    folder: str
    include_root: str = "."
    buildable: bool = True
    flags: Tuple[str, ...] = ()
    diagnostics: List[str] = field(default_factory=list)

    @property
    def function_name(self) -> str:
        return self.entry.name

    @property
    def repo_index(self) -> int:
        return self.entry.source_file.repo_index

    @property
    def params(self):
        return self.entry.params

    @property
    def include_dir(self) -> str:
        return os.path.normpath(os.path.join(self.folder, self.include_root))

    @property
    def repo_dir(self) -> str:
        """Units live in <corpus_root>/units/<id>, repos in <corpus_root>/<index>"""
        corpus_root = os.path.dirname(os.path.dirname(os.path.abspath(self.folder)))
        return os.path.join(corpus_root, str(self.repo_index))

    def params_manifest(self) -> dict:
        return {
            "function": self.entry.name,
            "params": [param.to_manifest() for param in self.entry.params],
        }

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "entry": self.entry.to_dict(),
            "deps": [
                {"path": dep.relative_path, "kind": dep.kind} for dep in self.deps
            ],
            "device_fns": [decl.to_dict() for decl in self.device_fns],
            "include_root": self.include_root,
            "buildable": self.buildable,
            "flags": list(self.flags),
            "diagnostics": list(self.diagnostics),
        }

    @classmethod
    def from_dict(cls, record: dict, folder: str) -> "KernelUnit":
        entry = FunctionDecl.from_dict(record["entry"])
        return cls(
            id=record["id"],
            entry=entry,
            deps=[
                SourceFile(entry.source_file.repo_index, dep["path"], dep["kind"])
                for dep in record["deps"]
            ],
            device_fns=[FunctionDecl.from_dict(decl) for decl in record["device_fns"]],
            folder=folder,
            include_root=record["include_root"],
            buildable=record["buildable"],
            flags=tuple(record["flags"]),
            diagnostics=list(record["diagnostics"]),
        )

    def save(self):
        with open(os.path.join(self.folder, PARAMS_FILE), "w") as handle:
            json.dump(self.params_manifest(), handle, indent=2)
            handle.write("\n")
        with open(os.path.join(self.folder, UNIT_FILE), "w") as handle:
            json.dump(self.to_dict(), handle, indent=2, sort_keys=True)
            handle.write("\n")

    @classmethod
    def load(cls, folder: str) -> "KernelUnit":
        with open(os.path.join(folder, UNIT_FILE), "r") as handle:
            return cls.from_dict(json.load(handle), folder)


def unit_id(decl: FunctionDecl) -> str:
    """Stable id from repo index, source path and function name"""
    path = re.sub(r"[^A-Za-z0-9]+", "_", decl.source_file.relative_path)
    return f"{decl.source_file.repo_index}-{path}-{decl.name}"


## Closure #####################################################################


def _pick_definition(
    candidates: List[FunctionDecl], entry_path: str, deps: Set[str]
) -> FunctionDecl:
    for decl in candidates:
        if decl.source_file.relative_path == entry_path:
            return decl
    for decl in candidates:
        if decl.source_file.relative_path in deps:
            return decl
    return min(candidates, key=lambda decl: decl.sort_key)


def closure(
    entry: FunctionDecl,
    repo: RepoIndex,
    diagnostics: Optional[List[str]] = None,
) -> Tuple[List[SourceFile], List[FunctionDecl]]:
    """Compute the fixed point of quoted includes and called device functions
    reachable from a global function. Returns the dependency files (entry file
    first, the rest by path) and the device functions ordered by location.
    """
    entry_path = entry.source_file.relative_path
    deps = {entry_path}
    file_queue = [entry_path]
    name_queue = sorted(entry.identifiers.intersection(repo.device_defs))
    seen_names: Set[str] = set()
    reached: Dict[Tuple[str, int], FunctionDecl] = {}
    unresolved: Set[Tuple[str, str]] = set()

    while file_queue or name_queue:
        while file_queue:
            path = file_queue.pop(0)
            for include in repo.includes(path):
                if include.system:
                    continue
                resolved = repo.resolve_include(path, include.target)
                if resolved is None:
                    if (path, include.target) not in unresolved:
                        unresolved.add((path, include.target))
                        message = f"{path}: unresolved include \"{include.target}\""
                        log.warning("%s (entry %s)", message, entry)
                        if diagnostics is not None:
                            diagnostics.append(message)
                elif resolved not in deps:
                    deps.add(resolved)
                    file_queue.append(resolved)

        while name_queue:
            name = name_queue.pop(0)
            if name in seen_names:
                continue
            seen_names.add(name)
            decl = _pick_definition(repo.device_defs[name], entry_path, deps)
            reached[decl.sort_key] = decl
            decl_path = decl.source_file.relative_path
            if decl_path not in deps:
                deps.add(decl_path)
                file_queue.append(decl_path)
            name_queue.extend(
                sorted(decl.identifiers.intersection(repo.device_defs) - seen_names)
            )

    dep_files = [repo.by_path[entry_path]] + [
        repo.by_path[path] for path in sorted(deps - {entry_path})
    ]
    device_fns = [reached[key] for key in sorted(reached)]
    return dep_files, device_fns


def include_reachable(start: str, repo: RepoIndex) -> Set[str]:
    """Files reachable from start through resolvable quoted includes"""
    reached = set()
    queue = [start]
    while queue:
        path = queue.pop(0)
        for include in repo.includes(path):
            if include.system:
                continue
            resolved = repo.resolve_include(path, include.target)
            if resolved and resolved not in reached and resolved != start:
                reached.add(resolved)
                queue.append(resolved)
    return reached


## Isolation ###################################################################


def _common_dir(paths: List[str]) -> str:
    split = [[part for part in path.split("/") if part] for path in paths]
    common = []
    for parts in zip(*split):
        if len(set(parts)) != 1:
            break
        common.append(parts[0])
    return "/".join(common)


def _inlined_functions(
    entry: FunctionDecl,
    device_fns: List[FunctionDecl],
    repo: RepoIndex,
) -> List[FunctionDecl]:
    """Device functions kernel.cu must define itself. kernel.cu carries the
    include lines of the entry file and of every inlined function's file, so a
    function reachable from any of those includes compiles from its header and
    is dropped. Dropping one can drop include lines, hence the fixed point.
    """
    entry_path = entry.source_file.relative_path
    inlined = list(device_fns)
    while True:
        sources = {entry_path} | {decl.source_file.relative_path for decl in inlined}
        headers = set()
        for path in sources:
            headers |= include_reachable(path, repo)
        headers.discard(entry_path)
        kept = [
            decl for decl in inlined if decl.source_file.relative_path not in headers
        ]
        if len(kept) == len(inlined):
            return inlined
        inlined = kept


def _dependency_order(inlined: List[FunctionDecl]) -> List[FunctionDecl]:
    """Callees before callers, otherwise by location"""
    ordered = sorted(inlined, key=lambda decl: decl.sort_key)
    by_name = {}
    for decl in ordered:
        by_name.setdefault(decl.name, decl)

    result: List[FunctionDecl] = []
    visited: Set[Tuple[str, int]] = set()

    def visit(decl: FunctionDecl):
        if decl.sort_key in visited:
            return
        visited.add(decl.sort_key)
        for name in sorted(decl.identifiers.intersection(by_name)):
            visit(by_name[name])
        result.append(decl)

    for decl in ordered:
        visit(decl)
    return result


def _kernel_source(
    entry: FunctionDecl,
    inlined: List[FunctionDecl],
    repo: RepoIndex,
) -> str:
    entry_path = entry.source_file.relative_path
    lines = scan_directives(repo.text(entry_path))
    for path in sorted({decl.source_file.relative_path for decl in inlined}):
        if path == entry_path:
            continue
        for include in repo.includes(path):
            if include.line not in lines:
                lines.append(include.line)

    chunks = ["\n".join(lines)] if lines else []
    for decl in _dependency_order(inlined):
        chunks.append(decl.text(repo.text(decl.source_file.relative_path)))
    chunks.append(entry.text(repo.text(entry_path)))
    return "\n\n".join(chunks) + "\n"


def isolate(
    entry: FunctionDecl,
    deps: List[SourceFile],
    device_fns: List[FunctionDecl],
    repo: RepoIndex,
    units_root: str,
    diagnostics: Optional[List[str]] = None,
    taken: Optional[Set[str]] = None,
) -> KernelUnit:
    """Write the unit folder for a closed kernel candidate. A folder collision
    retries once with a suffixed id, a second one raises FileExistsError.
    """
    base_id = unit_id(entry)
    taken = taken if taken is not None else set()
    for candidate_id in (base_id, f"{base_id}-1"):
        folder = os.path.join(units_root, candidate_id)
        if candidate_id in taken or os.path.exists(folder):
            log.debug("Unit id %s is taken", candidate_id)
            continue
        os.makedirs(folder)
        taken.add(candidate_id)
        break
    else:
        raise FileExistsError(f"Unit folder collision for {base_id}")

    entry_path = entry.source_file.relative_path
    entry_dir = posixpath.dirname(entry_path)
    copied = [dep.relative_path for dep in deps[1:]]
    ancestor = _common_dir([entry_dir] + [posixpath.dirname(p) for p in copied])
    include_root = posixpath.relpath(entry_dir or ".", ancestor or ".")
    os.makedirs(os.path.join(folder, include_root), exist_ok=True)
    for path in copied:
        target = os.path.join(folder, posixpath.relpath(path, ancestor or "."))
        os.makedirs(os.path.dirname(target), exist_ok=True)
        shutil.copyfile(os.path.join(repo.repo_dir, path), target)

    inlined = _inlined_functions(entry, device_fns, repo)
    write_source(
        os.path.join(folder, KERNEL_FILE), _kernel_source(entry, inlined, repo)
    )

    flags = set(entry.flags)
    for decl in device_fns:
        flags.update(decl.flags)
    unit = KernelUnit(
        id=candidate_id,
        entry=entry,
        deps=deps,
        device_fns=device_fns,
        folder=folder,
        include_root=include_root,
        buildable=not entry.is_template,
        flags=tuple(sorted(flags)),
        diagnostics=list(diagnostics or []),
    )
    unit.save()
    log.debug("Isolated %s into %s", entry, folder)
    return unit


## Stage #######################################################################


def extract_repo(
    repo_index: int, repo_dir: str, units_root: str
) -> Tuple[List[KernelUnit], List[dict]]:
    """Isolate every global function of one repository"""
    repo = RepoIndex.from_dir(repo_dir, repo_index)
    units = []
    records = []
    taken: Set[str] = set()
    for entry in repo.kernels:
        diagnostics = list(repo.file_diagnostics[entry.source_file.relative_path])
        record = {
            "id": unit_id(entry),
            "repo_index": repo_index,
            "source": entry.source_file.relative_path,
            "function": entry.name,
        }
        try:
            deps, device_fns = closure(entry, repo, diagnostics)
            if entry.is_template:
                diagnostics.append("template kernel: instantiation unknown")
            unit = isolate(
                entry, deps, device_fns, repo, units_root, diagnostics, taken
            )
        except FileExistsError as err:
            log.warning("Failed to isolate %s: %s", entry, err)
            record.update(
                status=ExtractStatus.FAILED.value,
                diagnostics=diagnostics + [str(err)],
                flags=list(entry.flags),
            )
            records.append(record)
            continue
        units.append(unit)
        record.update(
            id=unit.id,
            status=(
                ExtractStatus.OK if unit.buildable else ExtractStatus.NON_BUILDABLE
            ).value,
            diagnostics=unit.diagnostics,
            flags=list(unit.flags),
        )
        records.append(record)
    log.debug("Repo %d: %d kernel candidates", repo_index, len(records))
    return units, records


def extract_corpus(corpus_root: str, workers: int = 1) -> List[KernelUnit]:
    """Extract every downloaded repository of a corpus into
    <corpus_root>/units and write the extract manifest
    """
    units_root = os.path.join(corpus_root, UNITS_DIR)
    if os.path.exists(units_root):
        shutil.rmtree(units_root)
    os.makedirs(units_root)

    refs = [
        ref
        for ref in load_mine_manifest(corpus_root)
        if ref.status == RepoStatus.DOWNLOADED
        and os.path.isdir(os.path.join(corpus_root, str(ref.index)))
    ]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(
            pool.map(
                lambda ref: extract_repo(
                    ref.index, os.path.join(corpus_root, str(ref.index)), units_root
                ),
                refs,
            )
        )

    writer = ManifestWriter(os.path.join(corpus_root, EXTRACT_MANIFEST))
    units = []
    for repo_units, records in results:
        units.extend(repo_units)
        for record in records:
            writer.append(record)

    log.info(
        "Extracted %d units (%d buildable) from %d repos",
        len(units),
        sum(unit.buildable for unit in units),
        len(refs),
    )
    return units


def load_units(corpus_root: str) -> List[KernelUnit]:
    """Load every isolated unit, ordered by id"""
    units_root = os.path.join(corpus_root, UNITS_DIR)
    if not os.path.isdir(units_root):
        return []
    return [
        KernelUnit.load(os.path.join(units_root, name))
        for name in sorted(os.listdir(units_root))
        if os.path.exists(os.path.join(units_root, name, UNIT_FILE))
    ]
