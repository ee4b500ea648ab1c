"""
This utility module holds the lexical scanner for CUDA/C++ sources. It turns a
file into a token stream (comments and string literals never produce
identifiers), finds every __global__ and __device__ function definition with
its brace-balanced span and parameter list, and extracts include directives.

It is deliberately not a C++ grammar: signatures synthesized by macros are not
seen, and templates are only detected, never instantiated.
"""

# Standard
from dataclasses import dataclass, field
from enum import Enum
from typing import FrozenSet, List, NamedTuple, Optional, Sequence, Tuple
import os
import re

# Local
from .corpus_miner import SourceFile
from .log import log

## Tokenizer ###################################################################

_TOKEN_RE = re.compile(
    r"""
    (?P<comment>//[^\n]*|/\*.*?\*/)
  | (?P<open_comment>/\*.*)
  | (?P<directive>\#(?:\\\r?\n|[^\n])*)
  | (?P<string>"(?:\\.|[^"\\\n])*"|'(?:\\.|[^'\\\n])*')
  | (?P<ident>[A-Za-z_]\w*)
  | (?P<number>\.?[0-9](?:[eEpP][+-]|[\w.])*)
  | (?P<space>\s+)
  | (?P<punct>::|->|.)
    """,
    re.VERBOSE | re.DOTALL,
)
_SKIPPED_KINDS = ("comment", "open_comment", "space")


class Token(NamedTuple):
    kind: str
    text: str
    start: int
    end: int


def tokenize(text: str) -> List[Token]:
    """Split source text into significant tokens. Offsets index into text."""
    return [
        Token(match.lastgroup, match.group(), match.start(), match.end())
        for match in _TOKEN_RE.finditer(text)
        if match.lastgroup not in _SKIPPED_KINDS
    ]


def read_source(path: str) -> str:
    """Read a source file so that string offsets equal byte offsets"""
    with open(path, "rb") as handle:
        return handle.read().decode("latin-1")


def write_source(path: str, text: str):
    with open(path, "wb") as handle:
        handle.write(text.encode("latin-1"))


## Types #######################################################################


class Qualifier(str, Enum):
    GLOBAL = "global"
    DEVICE = "device"


class Role(str, Enum):
    UNKNOWN = "unknown"
    BUFFER = "buffer"
    WIDTH = "width"
    HEIGHT = "height"
    SIZE = "size"
    K_LIKE = "k_like"
    STATIC_ONE = "static_one"


@dataclass
class ParamSpec:
    name: str
    type_text: str
    is_pointer: bool
    role: Role = Role.UNKNOWN

    def to_manifest(self) -> dict:
        return {"name": self.name, "type": self.type_text, "pointer": self.is_pointer}


@dataclass
class FunctionDecl:
    name: str
    qualifier: Qualifier
    source_file: SourceFile
    body_span: Tuple[int, int]
    params: List[ParamSpec] = field(default_factory=list)
    is_template: bool = False
    flags: Tuple[str, ...] = ()
    identifiers: FrozenSet[str] = frozenset()

    def __str__(self) -> str:
        return f"{self.source_file.relative_path}:{self.name}"

    @property
    def sort_key(self) -> Tuple[str, int]:
        return (self.source_file.relative_path, self.body_span[0])

    def text(self, source_text: str) -> str:
        return source_text[self.body_span[0] : self.body_span[1]]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "qualifier": self.qualifier.value,
            "source": self.source_file.relative_path,
            "kind": self.source_file.kind,
            "repo_index": self.source_file.repo_index,
            "body_span": list(self.body_span),
            "params": [param.to_manifest() for param in self.params],
            "template": self.is_template,
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, record: dict) -> "FunctionDecl":
        return cls(
            name=record["name"],
            qualifier=Qualifier(record["qualifier"]),
            source_file=SourceFile(
                record["repo_index"], record["source"], record["kind"]
            ),
            body_span=tuple(record["body_span"]),
            params=[
                ParamSpec(param["name"], param["type"], param["pointer"])
                for param in record["params"]
            ],
            is_template=record.get("template", False),
            flags=tuple(record.get("flags", ())),
        )


class IncludeDirective(NamedTuple):
    target: str
    system: bool
    line: str


## Includes and directives #####################################################

_INCLUDE_RE = re.compile(r'#\s*include\s*([<"])([^>"]+)[>"]')
_DEFINE_RE = re.compile(r"#\s*define\b")


def scan_directives(text: str) -> List[str]:
    """The #include and #define directive lines of a file, in source order"""
    return [
        tok.text.rstrip()
        for tok in tokenize(text)
        if tok.kind == "directive"
        and (_INCLUDE_RE.match(tok.text) or _DEFINE_RE.match(tok.text))
    ]


def scan_includes(text: str) -> List[IncludeDirective]:
    includes = []
    for tok in tokenize(text):
        if tok.kind != "directive":
            continue
        match = _INCLUDE_RE.match(tok.text)
        if match:
            includes.append(
                IncludeDirective(
                    target=match.group(2).strip(),
                    system=match.group(1) == "<",
                    line=tok.text.rstrip(),
                )
            )
    return includes


## Functions ###################################################################

_QUALIFIERS = {"__global__": Qualifier.GLOBAL, "__device__": Qualifier.DEVICE}
_DECL_KEYWORDS = {
    "__global__",
    "__device__",
    "__host__",
    "__forceinline__",
    "__noinline__",
    "inline",
    "static",
    "extern",
}
_ATTRIBUTE_CALLS = {"__launch_bounds__", "__attribute__", "__declspec", "alignas"}
_BOUNDARY_PUNCT = {";", "{", "}", ")", ":"}
_TEXTURE_IDENTS = {
    "texture",
    "cudaTextureObject_t",
    "tex1Dfetch",
    "tex1D",
    "tex2D",
    "tex3D",
}
_TYPE_WORDS = {
    "void",
    "bool",
    "char",
    "short",
    "int",
    "long",
    "float",
    "double",
    "signed",
    "unsigned",
    "size_t",
    "const",
    "volatile",
}
_OPEN_CLOSE = {"(": ")", "[": "]", "{": "}", "<": ">"}


def _is_punct(tok: Token, *texts: str) -> bool:
    return tok.kind == "punct" and tok.text in texts


def _match_close(toks: Sequence[Token], open_idx: int) -> Optional[int]:
    """Index of the token closing toks[open_idx], None when the file ends first"""
    open_text = toks[open_idx].text
    close_text = _OPEN_CLOSE[open_text]
    depth = 0
    for idx in range(open_idx, len(toks)):
        tok = toks[idx]
        if tok.kind != "punct":
            continue
        if tok.text == open_text:
            depth += 1
        elif tok.text == close_text:
            depth -= 1
            if depth == 0:
                return idx
    return None


def _decl_start(toks: Sequence[Token], idx: int) -> int:
    """Walk back from a qualifier to the first token of its declaration"""
    while idx > 0:
        prev = toks[idx - 1]
        if prev.kind == "directive" or _is_punct(prev, *_BOUNDARY_PUNCT):
            break
        idx -= 1
    return idx


def _join_type(toks: Sequence[Token]) -> str:
    text = ""
    for tok in toks:
        if not text or tok.text in ("*", "&", "&&", ",", ">", "::", "[", "]"):
            text += tok.text
        elif text.endswith(("<", "::", "[")):
            text += tok.text
        else:
            text += " " + tok.text
    return text


def _split_params(toks: Sequence[Token]) -> List[List[Token]]:
    groups = [[]]
    depth = 0
    for tok in toks:
        if tok.kind == "punct" and tok.text in ("(", "[", "{", "<"):
            depth += 1
        elif tok.kind == "punct" and tok.text in (")", "]", "}", ">"):
            depth -= 1
        elif depth == 0 and _is_punct(tok, ","):
            groups.append([])
            continue
        groups[-1].append(tok)
    return groups


def parse_params(toks: Sequence[Token]) -> List[ParamSpec]:
    """Parse the tokens between a signature's parentheses"""
    groups = _split_params(toks)
    if len(groups) == 1 and (
        not groups[0] or [tok.text for tok in groups[0]] == ["void"]
    ):
        return []

    params = []
    for position, group in enumerate(groups):
        # Drop default values
        for idx, tok in enumerate(group):
            if _is_punct(tok, "="):
                group = group[:idx]
                break
        if not group or _is_punct(group[0], "."):
            continue

        # Peel trailing array declarators off so the name is last
        suffix = []
        while group and _is_punct(group[-1], "]"):
            open_idx = max(
                idx for idx, tok in enumerate(group) if _is_punct(tok, "[")
            )
            suffix = group[open_idx:] + suffix
            group = group[:open_idx]

        last = group[-1]
        if len(group) >= 2 and last.kind == "ident" and last.text not in _TYPE_WORDS:
            name = last.text
            type_toks = group[:-1] + suffix
        else:
            name = f"arg{position}"
            type_toks = group + suffix
        type_text = _join_type(type_toks)
        params.append(
            ParamSpec(
                name=name,
                type_text=type_text,
                is_pointer="*" in type_text or "[" in type_text,
            )
        )
    return params


class _Unbalanced(Exception):
    def __init__(self, offset: int):
        super().__init__(offset)
        self.offset = offset


def _parse_function(
    toks: Sequence[Token], q_idx: int, source_file: SourceFile
) -> Tuple[Optional[FunctionDecl], int]:
    """Try to parse a function definition around the qualifier at q_idx and
    return it (or None) along with the index to resume scanning from
    """
    start_idx = _decl_start(toks, q_idx)
    flags = set()

    # Find the name: the identifier right before the parameter list
    idx = q_idx + 1
    name_idx = None
    while idx < len(toks):
        tok = toks[idx]
        if _is_punct(tok, ";", "=", "{", "}"):
            return None, idx
        if _is_punct(tok, "("):
            prev = toks[idx - 1]
            if prev.kind == "ident" and prev.text in _ATTRIBUTE_CALLS:
                if prev.text == "__launch_bounds__":
                    flags.add("launch_bounds")
                close = _match_close(toks, idx)
                if close is None:
                    raise _Unbalanced(tok.start)
                idx = close + 1
                continue
            if prev.kind == "ident" and prev.text not in _DECL_KEYWORDS:
                name_idx = idx - 1
            break
        idx += 1
    if name_idx is None:
        return None, q_idx + 1

    params_open = name_idx + 1
    params_close = _match_close(toks, params_open)
    if params_close is None:
        raise _Unbalanced(toks[params_open].start)

    # Skip trailing qualifiers up to the body or the end of a prototype
    idx = params_close + 1
    while idx < len(toks) and not _is_punct(toks[idx], "{", ";", "="):
        idx += 1
    if idx >= len(toks):
        raise _Unbalanced(toks[params_close].end)
    if not _is_punct(toks[idx], "{"):
        return None, idx + 1

    body_open = idx
    body_close = _match_close(toks, body_open)
    if body_close is None:
        raise _Unbalanced(toks[body_open].start)

    header = toks[start_idx:body_open]
    body = toks[body_open:body_close]
    qualifier = (
        Qualifier.GLOBAL
        if any(tok.text == "__global__" for tok in header)
        else Qualifier.DEVICE
    )
    body_texts = [tok.text for tok in body]
    for pos, text in enumerate(body_texts[:-1]):
        if text == "extern" and body_texts[pos + 1] == "__shared__":
            flags.add("extern_shared")
    if _TEXTURE_IDENTS.intersection(body_texts) or _TEXTURE_IDENTS.intersection(
        tok.text for tok in header
    ):
        flags.add("texture")

    decl = FunctionDecl(
        name=toks[name_idx].text,
        qualifier=qualifier,
        source_file=source_file,
        body_span=(toks[start_idx].start, toks[body_close].end),
        params=parse_params(toks[params_open + 1 : params_close]),
        is_template=any(tok.text == "template" for tok in header),
        flags=tuple(sorted(flags)),
        identifiers=frozenset(tok.text for tok in body if tok.kind == "ident"),
    )
    return decl, body_close + 1


def scan_text(
    text: str,
    source_file: SourceFile,
    diagnostics: Optional[List[str]] = None,
) -> List[FunctionDecl]:
    """Find every __global__/__device__ function defined in the text. On
    unbalanced delimiters the functions closed so far are returned and a
    diagnostic is recorded.
    """
    toks = tokenize(text)
    decls = []
    idx = 0
    while idx < len(toks):
        tok = toks[idx]
        if tok.kind == "ident" and tok.text in _QUALIFIERS:
            try:
                decl, idx = _parse_function(toks, idx, source_file)
            except _Unbalanced as err:
                line = text.count("\n", 0, err.offset) + 1
                message = (
                    f"{source_file.relative_path}: unbalanced delimiters from "
                    f"line {line} to end of file"
                )
                log.warning(message)
                if diagnostics is not None:
                    diagnostics.append(message)
                break
            if decl is not None:
                log.debug("Found %s function %s", decl.qualifier.value, decl)
                decls.append(decl)
        else:
            idx += 1
    return decls


def scan_functions(
    source_file: SourceFile,
    repo_dir: str,
    diagnostics: Optional[List[str]] = None,
) -> List[FunctionDecl]:
    """Scan one source file of a repository for global and device functions"""
    path = os.path.join(repo_dir, source_file.relative_path)
    log.debug("Scanning %s", path)
    return scan_text(read_source(path), source_file, diagnostics)


## Definitions by name #########################################################


def find_definition_span(text: str, name: str) -> Optional[Tuple[int, int]]:
    """Span of the first (qualified or not) function definition named name"""
    toks = tokenize(text)
    for idx, tok in enumerate(toks[:-1]):
        if tok.kind != "ident" or tok.text != name:
            continue
        if not _is_punct(toks[idx + 1], "("):
            continue
        if idx > 0 and _is_punct(toks[idx - 1], ".", "->", "=", "(", ","):
            continue
        params_close = _match_close(toks, idx + 1)
        if params_close is None:
            return None
        body_open = params_close + 1
        while body_open < len(toks) and toks[body_open].kind == "ident":
            body_open += 1
        if body_open >= len(toks) or not _is_punct(toks[body_open], "{"):
            continue
        body_close = _match_close(toks, body_open)
        if body_close is None:
            return None
        return toks[_decl_start(toks, idx)].start, toks[body_close].end
    return None
