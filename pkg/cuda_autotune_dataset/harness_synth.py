"""
This module holds the harness generation that turns an isolated kernel plus a
launch configuration into a main.cu timing program. Scalar parameters get their
values from a name-based role table; pointer parameters become zeroed device
buffers sized to the matrix.
"""

# Standard
from dataclasses import dataclass
from typing import Iterable, List, Tuple
import fnmatch
import os
import re

# Local
from .constants import HARNESS_FILE, HARNESS_LAUNCHES, HARNESS_TEMPLATE
from .kernel_extractor import KernelUnit
from .launch import LaunchConfig
from .log import log
from .parse_cuda_sources import ParamSpec, Role
from .template_compiler import TemplateCompiler


class UnsupportedParameterError(ValueError):
    """Raised when a kernel parameter cannot be initialized by the harness"""


## Roles #######################################################################


@dataclass(frozen=True)
class RoleRule:
    patterns: Tuple[str, ...]
    role: Role

    def matches(self, name: str) -> bool:
        lowered = name.lower()
        return any(fnmatch.fnmatchcase(lowered, pattern) for pattern in self.patterns)


@dataclass(frozen=True)
class RoleTable:
    """Ordered name-pattern rules, first match wins"""

    rules: Tuple[RoleRule, ...]
    default: Role = Role.STATIC_ONE

    def lookup(self, name: str) -> Role:
        for rule in self.rules:
            if rule.matches(name):
                return rule.role
        return self.default


DEFAULT_ROLE_TABLE = RoleTable(
    rules=(
        RoleRule(("w", "width", "cols", "n_cols", "ncols", "nx"), Role.WIDTH),
        RoleRule(("h", "height", "rows", "n_rows", "nrows", "ny"), Role.HEIGHT),
        RoleRule(("n", "size", "len", "length", "count", "num*"), Role.SIZE),
        RoleRule(("k",), Role.K_LIKE),
        RoleRule(("stride", "inc*", "offset"), Role.STATIC_ONE),
    )
)


def infer_role(param: ParamSpec, table: RoleTable = DEFAULT_ROLE_TABLE) -> Role:
    if param.is_pointer:
        return Role.BUFFER
    return table.lookup(param.name)


def assign_roles(
    params: Iterable[ParamSpec], table: RoleTable = DEFAULT_ROLE_TABLE
) -> List[ParamSpec]:
    params = list(params)
    for param in params:
        param.role = infer_role(param, table)
    return params


def matched_by_rule(param: ParamSpec, table: RoleTable = DEFAULT_ROLE_TABLE) -> bool:
    """Whether a scalar parameter hit an explicit rule rather than the default"""
    return any(rule.matches(param.name) for rule in table.rules)


## Types #######################################################################

_QUALIFIER_RE = re.compile(
    r"\b(const|volatile|__restrict__|__restrict|restrict|register)\b"
)

KNOWN_SCALARS = {
    "bool",
    "char",
    "signed char",
    "unsigned char",
    "short",
    "short int",
    "unsigned short",
    "unsigned short int",
    "int",
    "signed",
    "signed int",
    "unsigned",
    "unsigned int",
    "long",
    "long int",
    "unsigned long",
    "unsigned long int",
    "long long",
    "long long int",
    "unsigned long long",
    "unsigned long long int",
    "float",
    "double",
    "long double",
    "size_t",
    "std::size_t",
    "ptrdiff_t",
    "int8_t",
    "int16_t",
    "int32_t",
    "int64_t",
    "uint8_t",
    "uint16_t",
    "uint32_t",
    "uint64_t",
}


def _strip_qualifiers(type_text: str) -> str:
    text = _QUALIFIER_RE.sub(" ", type_text)
    text = re.sub(r"\s+", " ", text).strip()
    return re.sub(r"\s*\*", "*", text)


def scalar_type(param: ParamSpec) -> str:
    base = _strip_qualifiers(param.type_text)
    if "&" in base:
        raise UnsupportedParameterError(
            f"Reference parameter [{param.name}: {param.type_text}]"
        )
    if base not in KNOWN_SCALARS:
        raise UnsupportedParameterError(
            f"Parameter [{param.name}] has unsupported by-value type [{param.type_text}]"
        )
    return base


def element_type(param: ParamSpec) -> str:
    """Base type of a pointer or array parameter, void sized as bytes"""
    text = param.type_text
    if "[" in text:
        text = text[: text.index("[")]
    else:
        idx = text.rindex("*")
        text = text[:idx] + text[idx + 1 :]
    base = _strip_qualifiers(text)
    if "&" in base:
        raise UnsupportedParameterError(
            f"Reference parameter [{param.name}: {param.type_text}]"
        )
    if base in ("", "void"):
        return "char"
    return base


## Generation ##################################################################


def scalar_value(role: Role, launch: LaunchConfig) -> int:
    matrix = launch.matrix
    return {
        Role.WIDTH: matrix.width,
        Role.HEIGHT: matrix.height,
        Role.SIZE: matrix.elements,
        Role.K_LIKE: matrix.width,
        Role.STATIC_ONE: 1,
    }[role]


def generate_main(
    unit: KernelUnit,
    launch: LaunchConfig,
    table: RoleTable = DEFAULT_ROLE_TABLE,
) -> str:
    """Render the timing harness source for one unit and launch"""
    params = assign_roles(unit.params, table)
    elements = launch.matrix.elements
    declarations = []
    releases = []
    arguments = []
    for position, param in enumerate(params):
        var = f"arg{position}"
        arguments.append(var)
        if param.role == Role.BUFFER:
            elem = element_type(param)
            size = f"{elements} * sizeof({elem})"
            declarations.extend(
                [
                    f"    {elem} *{var} = NULL;",
                    f"    cudaMalloc((void **)&{var}, {size});",
                    f"    cudaMemset((void *){var}, 0, {size});",
                ]
            )
            releases.append(f"    cudaFree({var});")
        else:
            declarations.append(
                f"    {scalar_type(param)} {var} = {scalar_value(param.role, launch)};"
            )

    with open(HARNESS_TEMPLATE, "r") as handle:
        template = TemplateCompiler(handle.read())
    grid = launch.grid
    block = launch.block
    return template(
        {
            "FUNCTION": unit.function_name,
            "UNIT_ID": unit.id,
            "MATRIX": launch.matrix.label,
            "BLOCK_X": str(block.x),
            "BLOCK_Y": str(block.y),
            "BLOCK_Z": str(block.z),
            "GRID_X": str(grid[0]),
            "GRID_Y": str(grid[1]),
            "GRID_Z": str(grid[2]),
            "DECLARATIONS": "\n".join(declarations),
            "ARGUMENTS": ", ".join(arguments),
            "LAUNCHES": str(HARNESS_LAUNCHES),
            "RELEASES": "\n".join(releases),
        }
    )


def write_harness(
    unit: KernelUnit,
    launch: LaunchConfig,
    table: RoleTable = DEFAULT_ROLE_TABLE,
) -> str:
    """Write main.cu into the unit folder and return its path"""
    source = generate_main(unit, launch, table)
    path = os.path.join(unit.folder, HARNESS_FILE)
    with open(path, "w") as handle:
        handle.write(source)
    log.debug("Wrote harness for %s at %s", unit.id, launch.label)
    return path
