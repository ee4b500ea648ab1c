"""
The ordered catalog of error-driven repairs applied between failed compiles.
Each rule reads the compiler output, and either edits the unit folder or
declines. The first rule that changes something wins.
"""

# Standard
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple
import os
import posixpath
import re
import shutil

# Local
from .constants import KERNEL_FILE
from .kernel_extractor import KernelUnit, RepoIndex
from .log import log
from .parse_cuda_sources import (
    find_definition_span,
    read_source,
    scan_text,
    write_source,
)


@dataclass
class FixResult:
    rule: str
    description: str
    changed_files: List[str] = field(default_factory=list)


## Diagnostics #################################################################

_MISSING_FILE_RES = (
    re.compile(r"([\w./+-]+): No such file or directory"),
    re.compile(r'cannot open source file "([^"]+)"'),
)
_UNDEFINED_RES = (
    re.compile(r'identifier "(\w+)" is undefined'),
    re.compile(r"undefined reference to [`'\"]?(\w+)"),
    re.compile(r"'(\w+)' was not declared in this scope"),
    re.compile(r"use of undeclared identifier '(\w+)'"),
)
_DUPLICATE_MAIN_RE = re.compile(
    r"multiple definition of [`'\"]?main\b"
    r"|redefinition of [^\n]*\bmain\b"
    r'|function "main" has already been defined'
)

STD_HEADERS = {
    "printf": "cstdio",
    "fprintf": "cstdio",
    "puts": "cstdio",
    "malloc": "cstdlib",
    "free": "cstdlib",
    "exit": "cstdlib",
    "abs": "cstdlib",
    "memcpy": "cstring",
    "memset": "cstring",
    "strlen": "cstring",
    "sqrt": "cmath",
    "sqrtf": "cmath",
    "exp": "cmath",
    "expf": "cmath",
    "log": "cmath",
    "logf": "cmath",
    "pow": "cmath",
    "powf": "cmath",
    "fabs": "cmath",
    "fabsf": "cmath",
    "floor": "cmath",
    "ceil": "cmath",
    "assert": "cassert",
    "FLT_MAX": "cfloat",
    "INT_MAX": "climits",
}


def missing_files(output: str) -> List[str]:
    found = []
    for regex in _MISSING_FILE_RES:
        for match in regex.finditer(output):
            if match.group(1) not in found:
                found.append(match.group(1))
    return found


def undefined_identifiers(output: str) -> List[str]:
    found = []
    for line in output.splitlines():
        for regex in _UNDEFINED_RES:
            for match in regex.finditer(line):
                if match.group(1) not in found:
                    found.append(match.group(1))
    return found


## Helpers #####################################################################


def _kernel_path(unit: KernelUnit) -> str:
    return os.path.join(unit.folder, KERNEL_FILE)


def _insert_after_directives(text: str, snippet: str) -> str:
    """Insert before the first line that is neither blank nor a directive"""
    lines = text.split("\n")
    idx = 0
    while idx < len(lines) and (
        not lines[idx].strip() or lines[idx].lstrip().startswith("#")
    ):
        idx += 1
    return "\n".join(lines[:idx] + [snippet, ""] + lines[idx:])


## Rules #######################################################################


def fix_missing_include(
    unit: KernelUnit, output: str, repo: RepoIndex
) -> Optional[FixResult]:
    """Copy a file the compiler could not open from elsewhere in the repo"""
    for target in missing_files(output):
        found = repo.find_basename(posixpath.basename(target))
        if found is None:
            continue
        dest = os.path.abspath(os.path.join(unit.include_dir, target))
        if not dest.startswith(os.path.abspath(unit.folder) + os.sep):
            dest = os.path.join(unit.folder, posixpath.basename(target))
        if os.path.exists(dest):
            continue
        os.makedirs(os.path.dirname(dest), exist_ok=True)
        shutil.copyfile(os.path.join(repo.repo_dir, found), dest)
        return FixResult(
            rule="missing_include",
            description=f"copied {found} for missing {target}",
            changed_files=[dest],
        )
    return None


def fix_undefined_device_function(
    unit: KernelUnit, output: str, repo: RepoIndex
) -> Optional[FixResult]:
    """Insert the definition of an undefined device function into kernel.cu.
    The definition goes right after the leading directives, ahead of every
    function already in the file, so it precedes its first use.
    """
    path = _kernel_path(unit)
    text = read_source(path)
    defined = {decl.name for decl in scan_text(text, unit.entry.source_file)}
    for name in undefined_identifiers(output):
        if name in defined or name not in repo.device_defs:
            continue
        # first definition by location when several files define it
        decl = min(repo.device_defs[name], key=lambda decl: decl.sort_key)
        source = decl.text(repo.text(decl.source_file.relative_path))
        write_source(path, _insert_after_directives(text, source))
        # later builds of this unit see the function as part of its closure
        unit.device_fns.append(decl)
        unit.save()
        return FixResult(
            rule="undefined_device_function",
            description=f"inserted {decl} into {KERNEL_FILE}",
            changed_files=[path],
        )
    return None


def fix_duplicate_main(
    unit: KernelUnit, output: str, repo: RepoIndex
) -> Optional[FixResult]:
    """Strip main() out of copied dependency files"""
    if not _DUPLICATE_MAIN_RE.search(output):
        return None
    changed = []
    for dep in unit.deps[1:]:
        for root, _, files in os.walk(unit.folder):
            for fname in files:
                if fname != posixpath.basename(dep.relative_path):
                    continue
                path = os.path.join(root, fname)
                text = read_source(path)
                span = find_definition_span(text, "main")
                if span is None:
                    continue
                write_source(path, text[: span[0]] + text[span[1] :])
                changed.append(path)
    if not changed:
        return None
    return FixResult(
        rule="duplicate_main",
        description=f"stripped main from {len(changed)} copied file(s)",
        changed_files=sorted(changed),
    )


def fix_std_header(
    unit: KernelUnit, output: str, repo: RepoIndex
) -> Optional[FixResult]:
    """Add a standard header include for a known library identifier"""
    path = _kernel_path(unit)
    text = read_source(path)
    for name in undefined_identifiers(output):
        header = STD_HEADERS.get(name)
        if header is None:
            continue
        line = f"#include <{header}>"
        if line in text:
            continue
        write_source(path, line + "\n" + text)
        return FixResult(
            rule="std_header",
            description=f"added {line} for {name}",
            changed_files=[path],
        )
    return None


FixRule = Callable[[KernelUnit, str, RepoIndex], Optional[FixResult]]

FIX_RULES: Tuple[FixRule, ...] = (
    fix_missing_include,
    fix_undefined_device_function,
    fix_duplicate_main,
    fix_std_header,
)


def apply_fix_rules(
    unit: KernelUnit,
    output: str,
    repo: RepoIndex,
    rules: Tuple[FixRule, ...] = FIX_RULES,
) -> Optional[FixResult]:
    """Apply the first rule that changes the unit, None for no-change"""
    for rule in rules:
        result = rule(unit, output, repo)
        if result is not None:
            log.warning("Fix for %s: %s (%s)", unit.id, result.rule, result.description)
            return result
    log.debug("No fix rule matched for %s", unit.id)
    return None
