"""Parse update-block responses and apply them to a C-like source tree.

A response holds any number of directives, each a header line followed by a
fenced code body::

    UPDATE FUNCTION `Name`:
    ```
    <whole function definition>
    ```
    UPDATE VARIABLE `Name`:      (global definition statement)
    ADD MEMBER TO `Name`:        (member lines for a struct)

Location uses a lexer-lite scan: comments and string/char literals are
blanked out, then braces, parentheses and statement boundaries are read
off the masked text. No preprocessing or semantic analysis is done.
"""

from __future__ import annotations

import enum
import functools
import json
import re
import shlex
import subprocess
import textwrap
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

HEADER_SUFFIXES = (".h", ".hh", ".hpp", ".hxx")

_OPENERS = {"{": "}", "(": ")", "[": "]"}
_CLOSERS = {v: k for k, v in _OPENERS.items()}


class PatchError(Exception):
    reason = "PatchError"


class NotFound(PatchError):
    reason = "NotFound"


class AmbiguousMatch(PatchError):
    reason = "AmbiguousMatch"


class BlockKind(str, enum.Enum):
    FUNCTION_REWRITE = "FunctionRewrite"
    VARIABLE_REWRITE = "VariableRewrite"
    STRUCT_MEMBER_ADD = "StructMemberAdd"


_HEADER_KINDS = {
    "UPDATE FUNCTION": BlockKind.FUNCTION_REWRITE,
    "UPDATE VARIABLE": BlockKind.VARIABLE_REWRITE,
    "ADD MEMBER TO": BlockKind.STRUCT_MEMBER_ADD,
}
_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")


@dataclass(frozen=True)
class UpdateBlock:
    kind: BlockKind
    target_name: str
    body: str

    def problem(self) -> str | None:
        """Why this block cannot be applied as-is, or None."""
        if not _IDENT.match(self.target_name):
            return "InvalidTargetName"
        if not self.body.strip():
            return "EmptyBody"
        if self.kind in (BlockKind.FUNCTION_REWRITE, BlockKind.STRUCT_MEMBER_ADD):
            if lex_violations(self.body) or bracket_violations(self.body):
                return "UnbalancedBody"
        if self.kind is BlockKind.FUNCTION_REWRITE:
            if not re.search(rf"\b{re.escape(self.target_name)}\s*\(", mask_code(self.body).masked):
                return "BodyMissingTarget"
        return None

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "target": self.target_name, "body": self.body}

    @classmethod
    def from_dict(cls, d: dict) -> "UpdateBlock":
        return cls(BlockKind(d["kind"]), d["target"], d["body"])


@dataclass(frozen=True)
class MalformedBlock:
    """Error record for a header whose fenced body is missing or unclosed."""

    index: int
    line: int
    message: str
    reason: str = "MalformedBlock"


@dataclass
class ParseResult:
    blocks: list[UpdateBlock]
    errors: list[MalformedBlock]

    @property
    def ok(self) -> bool:
        return not self.errors


_HEADER_RE = re.compile(
    r"^[ \t>#*_]*(UPDATE\s+FUNCTION|UPDATE\s+VARIABLE|ADD\s+MEMBER\s+TO)\s+"
    r"[`'\"]?([^`'\"\s:*]+)[`'\"]?[ \t*]*:?[ \t*]*$"
)
_FENCE_OPEN_RE = re.compile(r"^\s*```+\s*([A-Za-z0-9_+#-]*)\s*$")
_FENCE_CLOSE_RE = re.compile(r"^\s*```+\s*$")


def parse_update_blocks(text: str) -> ParseResult:
    """Extract update blocks in document order; never raises.

    Prose outside blocks is dropped. A header not followed (after blank
    lines) by a fence, or a fence that never closes, yields a
    :class:`MalformedBlock` record; blocks before it are still returned.
    """
    lines = text.splitlines()
    blocks: list[UpdateBlock] = []
    errors: list[MalformedBlock] = []
    index = 0
    i = 0
    while i < len(lines):
        m = _HEADER_RE.match(lines[i])
        if not m:
            i += 1
            continue
        header_line = i
        kind = _HEADER_KINDS[" ".join(m.group(1).split())]
        name = m.group(2)
        j = i + 1
        while j < len(lines) and not lines[j].strip():
            j += 1
        if j >= len(lines) or not _FENCE_OPEN_RE.match(lines[j]):
            errors.append(MalformedBlock(index, header_line + 1, f"header for {name!r} has no fenced body"))
            index += 1
            i = header_line + 1
            continue
        k = j + 1
        while k < len(lines) and not _FENCE_CLOSE_RE.match(lines[k]):
            k += 1
        if k >= len(lines):
            errors.append(MalformedBlock(index, header_line + 1, f"fence for {name!r} is never closed"))
            break
        body = "\n".join(lines[j + 1 : k])
        if not body.strip():
            errors.append(MalformedBlock(index, header_line + 1, f"body for {name!r} is empty"))
        else:
            blocks.append(UpdateBlock(kind, name, body))
        index += 1
        i = k + 1
    return ParseResult(blocks, errors)


# --- lexer-lite -----------------------------------------------------------


@dataclass
class Masked:
    masked: str
    errors: list[tuple[int, str]]  # (offset, message)


_LEX_START = re.compile(r"//|/\*|[\"']")


@functools.lru_cache(maxsize=512)
def mask_code(text: str) -> Masked:
    """Blank comments and string/char literals, preserving offsets and newlines."""
    out = list(text)
    errors: list[tuple[int, str]] = []
    n = len(text)

    def blank(a: int, b: int) -> None:
        out[a:b] = [c if c == "\n" else " " for c in text[a:b]]

    m = _LEX_START.search(text)
    while m:
        i = m.start()
        tok = m.group(0)
        if tok == "//":
            end = text.find("\n", i)
            end = n if end < 0 else end
        elif tok == "/*":
            end = text.find("*/", i + 2)
            if end < 0:
                errors.append((i, "unterminated block comment"))
                end = n
            else:
                end += 2
        else:
            j = i + 1
            while j < n and text[j] != tok and text[j] != "\n":
                j += 2 if text[j] == "\\" and j + 1 < n and text[j + 1] != "\n" else 1
            if j >= n or text[j] == "\n":
                kind = "string" if tok == '"' else "character"
                errors.append((i, f"unterminated {kind} literal"))
                end = j
            else:
                end = j + 1
        blank(i, end)
        m = _LEX_START.search(text, end)
    return Masked("".join(out), errors)


def _line_of(text: str, offset: int) -> int:
    return text.count("\n", 0, offset) + 1


def lex_violations(text: str) -> list[tuple[int, str]]:
    return [(_line_of(text, off), msg) for off, msg in mask_code(text).errors]


def bracket_violations(text: str, masked: str | None = None) -> list[tuple[int, str]]:
    """Unbalanced ``{}()[]`` outside comments and literals, as (line, message)."""
    if masked is None:
        masked = mask_code(text).masked
    stack: list[tuple[str, int]] = []
    found: list[tuple[int, str]] = []
    for pos, ch in enumerate(masked):
        if ch in _OPENERS:
            stack.append((ch, pos))
        elif ch in _CLOSERS:
            want = _CLOSERS[ch]
            if stack and stack[-1][0] == want:
                stack.pop()
            elif any(op == want for op, _ in stack):
                while stack[-1][0] != want:
                    op, at = stack.pop()
                    found.append((_line_of(text, at), f"unclosed {op!r}"))
                stack.pop()
            else:
                found.append((_line_of(text, pos), f"unmatched {ch!r}"))
    for op, at in stack:
        found.append((_line_of(text, at), f"unclosed {op!r}"))
    return sorted(found)


class _Scan:
    """Masked text plus a per-offset (brace depth, paren depth) table.

    Build through :func:`_scan`, which caches by text.
    """

    def __init__(self, text: str):
        self.text = text
        self.masked = mask_code(text).masked
        brace = paren = 0
        self.brace = [0] * (len(text) + 1)
        self.paren = [0] * (len(text) + 1)
        for i, ch in enumerate(self.masked):
            self.brace[i] = brace
            self.paren[i] = paren
            if ch == "{":
                brace += 1
            elif ch == "}":
                brace = max(brace - 1, 0)
            elif ch == "(" or ch == "[":
                paren += 1
            elif ch == ")" or ch == "]":
                paren = max(paren - 1, 0)
        self.brace[len(text)] = brace
        self.paren[len(text)] = paren

    def at_top(self, pos: int) -> bool:
        return self.brace[pos] == 0 and self.paren[pos] == 0

    def match_forward(self, pos: int) -> int | None:
        """Offset of the bracket closing the one at ``pos``."""
        opener = self.masked[pos]
        closer = _OPENERS[opener]
        depth = 0
        for j in range(pos, len(self.masked)):
            c = self.masked[j]
            if c == opener:
                depth += 1
            elif c == closer:
                depth -= 1
                if depth == 0:
                    return j
        return None

    def match_backward(self, pos: int) -> int | None:
        closer = self.masked[pos]
        opener = _CLOSERS[closer]
        depth = 0
        for j in range(pos, -1, -1):
            c = self.masked[j]
            if c == closer:
                depth += 1
            elif c == opener:
                depth -= 1
                if depth == 0:
                    return j
        return None

    def skip_space(self, pos: int) -> int:
        while pos < len(self.masked) and self.masked[pos].isspace():
            pos += 1
        return pos

    def prev_nonspace(self, pos: int) -> int:
        pos -= 1
        while pos >= 0 and self.masked[pos].isspace():
            pos -= 1
        return pos

    def statement_boundary(self, pos: int) -> int:
        """Offset just past the previous ``;``, ``}`` or preprocessor line."""
        head = self.masked[:pos]
        boundary = max(head.rfind(";"), head.rfind("}")) + 1
        line_start = boundary
        in_directive = False
        for line in re.finditer(r"[^\n]*\n", head[boundary:]):
            chunk = line.group(0)
            if in_directive or chunk.lstrip().startswith("#"):
                line_start = boundary + line.end()
                in_directive = chunk.rstrip("\n").endswith("\\")
        return line_start

    def iter_identifier(self, name: str) -> Iterator[re.Match]:
        for m in re.finditer(rf"(?<![A-Za-z0-9_]){re.escape(name)}(?![A-Za-z0-9_])", self.masked):
            if self.at_top(m.start()):
                yield m


@functools.lru_cache(maxsize=512)
def _scan(text: str) -> _Scan:
    return _Scan(text)


@dataclass(frozen=True)
class FunctionSpan:
    name: str
    start: int  # first code character of the signature
    doc_start: int  # includes comments between the previous statement and start
    end: int  # one past the closing brace


def _function_definitions(scan: _Scan, name: str | None = None) -> list[FunctionSpan]:
    masked = scan.masked
    if name is None:
        pattern = re.compile(r"(?<![A-Za-z0-9_])([A-Za-z_][A-Za-z0-9_]*)\s*\(")
    else:
        pattern = re.compile(rf"(?<![A-Za-z0-9_])({re.escape(name)})\s*\(")
    spans: list[FunctionSpan] = []
    pos = 0
    while True:
        m = pattern.search(masked, pos)
        if not m:
            break
        pos = m.end()
        if not scan.at_top(m.start()):
            continue
        paren = m.end() - 1
        close = scan.match_forward(paren)
        if close is None:
            continue
        after = scan.skip_space(close + 1)
        if after >= len(masked) or masked[after] != "{":
            continue
        end = scan.match_forward(after)
        if end is None:
            continue
        boundary = scan.statement_boundary(m.start())
        start = scan.skip_space(boundary)
        doc_start = boundary
        while doc_start < start and scan.text[doc_start].isspace():
            doc_start += 1
        spans.append(FunctionSpan(m.group(1), start, doc_start, end + 1))
        pos = end + 1
    return spans


def locate_function(file_text: str, name: str) -> tuple[int, int]:
    """(start, end) character span of the definition of ``name``.

    Declarations (prototypes ending in ``;``) and mentions inside comments or
    strings are ignored. Raises NotFound or AmbiguousMatch.
    """
    spans = _function_definitions(_scan(file_text), name)
    if not spans:
        raise NotFound(f"function {name!r} not defined")
    if len(spans) > 1:
        raise AmbiguousMatch(f"function {name!r} defined {len(spans)} times")
    return spans[0].start, spans[0].end


def list_function_definitions(file_text: str) -> list[str]:
    return [s.name for s in _function_definitions(_scan(file_text))]


def _variable_statements(scan: _Scan, name: str) -> list[tuple[int, int, bool]]:
    """(start, end, is_definition) for file-scope statements declaring ``name``."""
    found = []
    masked = scan.masked
    for m in scan.iter_identifier(name):
        nxt = scan.skip_space(m.end())
        if nxt >= len(masked) or masked[nxt] not in "=[;,":
            continue
        boundary = scan.statement_boundary(m.start())
        start = scan.skip_space(boundary)
        prefix = masked[start : m.start()]
        if not re.search(r"[A-Za-z_]", prefix) or "(" in prefix or "{" in prefix:
            continue
        if re.match(r"\s*(typedef|return)\b", prefix):
            continue
        j = m.end()
        depth = 0
        end = None
        while j < len(masked):
            c = masked[j]
            if c in "{([":
                depth += 1
            elif c in "})]":
                depth -= 1
                if depth < 0:
                    break
            elif c == ";" and depth == 0:
                end = j + 1
                break
            j += 1
        if end is None:
            continue
        is_def = "=" in masked[m.end() : end]
        found.append((start, end, is_def))
    return found


def variable_initializer(tree: "SourceTree", name: str) -> str | None:
    """Initializer text of the unique file-scope definition of ``name``, if any."""
    hits = []
    for path, text in tree.files.items():
        scan = _scan(text)
        for start, end, is_def in _variable_statements(scan, name):
            if is_def:
                eq = scan.masked.index("=", start)
                hits.append(text[eq + 1 : end - 1].strip())
    return hits[0] if len(hits) == 1 else None


def _define_lines(text: str, name: str) -> list[tuple[int, int]]:
    spans = []
    for m in re.finditer(rf"^[ \t]*#[ \t]*define[ \t]+{re.escape(name)}\b(?:[^\n]*\\\n)*[^\n]*", text, re.M):
        spans.append((m.start(), m.end()))
    return spans


def _struct_bodies(scan: _Scan, name: str) -> list[int]:
    """Offsets of the closing brace of struct ``name`` definitions."""
    masked = scan.masked
    closes: set[int] = set()
    for m in scan.iter_identifier(name):
        before = scan.prev_nonspace(m.start())
        if before >= 0 and masked[before] == "}":
            opener = scan.match_backward(before)
            if opener is not None:
                head = masked[scan.statement_boundary(opener) : opener]
                if re.search(r"\b(struct|union)\b", head):
                    closes.add(before)
            continue
        keyword = re.search(r"\b(struct|union)\s*$", masked[: m.start()])
        nxt = scan.skip_space(m.end())
        if keyword and nxt < len(masked) and masked[nxt] == "{":
            end = scan.match_forward(nxt)
            if end is not None:
                closes.add(end)
    return sorted(closes)


# --- source tree ------------------------------------------------------------


@dataclass(frozen=True)
class SourceTree:
    files: dict[str, str]

    def __post_init__(self):
        object.__setattr__(self, "files", dict(self.files))

    @staticmethod
    def is_header(path: str) -> bool:
        return path.lower().endswith(HEADER_SUFFIXES)

    def kind(self, path: str) -> str:
        return "header" if self.is_header(path) else "implementation"

    def paths(self) -> list[str]:
        return list(self.files)

    def replace(self, path: str, text: str) -> "SourceTree":
        files = dict(self.files)
        files[path] = text
        return SourceTree(files)

    @classmethod
    def load(cls, root: str | Path, patterns: Sequence[str] = ("*.c", "*.h", "*.cc", "*.cpp", "*.hpp")) -> "SourceTree":
        root = Path(root)
        if not root.is_dir():
            raise FileNotFoundError(f"source directory {root} does not exist")
        found = sorted({p for pat in patterns for p in root.rglob(pat) if p.is_file()})
        return cls({p.relative_to(root).as_posix(): p.read_bytes().decode("utf-8") for p in found})

    def render(self, root: str | Path) -> None:
        root = Path(root)
        for rel, text in self.files.items():
            dest = root / rel
            dest.parent.mkdir(parents=True, exist_ok=True)
            dest.write_bytes(text.encode("utf-8"))


@dataclass
class AppliedEdit:
    block: int
    file: str
    byte_span: tuple[int, int]


@dataclass
class Rejection:
    block: int
    reason: str
    detail: str = ""


@dataclass
class PatchOutcome:
    tree: SourceTree
    applied: list[AppliedEdit] = field(default_factory=list)
    rejected: list[Rejection] = field(default_factory=list)

    @property
    def all_applied(self) -> bool:
        return not self.rejected


def _byte_span(text: str, start: int, end: int) -> tuple[int, int]:
    b0 = len(text[:start].encode("utf-8"))
    return b0, b0 + len(text[start:end].encode("utf-8"))


def _single(matches: list[tuple[str, int, int]], what: str) -> tuple[str, int, int]:
    if not matches:
        raise NotFound(f"{what} not found")
    if len(matches) > 1:
        files = sorted({f for f, _, _ in matches})
        raise AmbiguousMatch(f"{what} matched {len(matches)} times in {files}")
    return matches[0]


def _starts_with_comment(body: str) -> bool:
    return body.lstrip().startswith(("//", "/*"))


def _apply_function(tree: SourceTree, block: UpdateBlock) -> tuple[str, int, int, str]:
    matches = []
    for path, text in tree.files.items():
        for span in _function_definitions(_scan(text), block.target_name):
            start = span.doc_start if _starts_with_comment(block.body) else span.start
            matches.append((path, start, span.end))
    path, start, end = _single(matches, f"function {block.target_name!r}")
    return path, start, end, block.body.strip()


def _apply_variable(tree: SourceTree, block: UpdateBlock) -> tuple[str, int, int, str]:
    defs, decls = [], []
    for path, text in tree.files.items():
        for start, end, is_def in _variable_statements(_scan(text), block.target_name):
            (defs if is_def else decls).append((path, start, end))
    if not defs and not decls:
        for path, text in tree.files.items():
            decls.extend((path, s, e) for s, e in _define_lines(text, block.target_name))
    path, start, end = _single(defs or decls, f"variable {block.target_name!r}")
    return path, start, end, block.body.strip()


def _apply_member(tree: SourceTree, block: UpdateBlock) -> tuple[str, int, int, str]:
    matches = []
    for path, text in tree.files.items():
        matches.extend((path, close, close) for close in _struct_bodies(_scan(text), block.target_name))
    path, close, _ = _single(matches, f"struct {block.target_name!r}")
    text = tree.files[path]
    line_start = text.rfind("\n", 0, close) + 1
    member_lines = [ln for ln in text[text.rfind("{", 0, close) + 1 : line_start].splitlines() if ln.strip()]
    indent = re.match(r"[ \t]*", member_lines[-1]).group(0) if member_lines else "    "
    lines = textwrap.dedent(block.body).strip("\n").splitlines()
    inserted = "\n".join(indent + ln if ln.strip() else "" for ln in lines) + "\n"
    if text[line_start:close].strip():
        # closing brace shares its line with code; open a fresh line for it
        return path, close, close, "\n" + inserted
    return path, line_start, line_start, inserted


_APPLIERS = {
    BlockKind.FUNCTION_REWRITE: _apply_function,
    BlockKind.VARIABLE_REWRITE: _apply_variable,
    BlockKind.STRUCT_MEMBER_ADD: _apply_member,
}


def apply_patch(tree: SourceTree, blocks: Iterable[UpdateBlock]) -> PatchOutcome:
    """Apply blocks in order; failures are per-block rejections, never fatal."""
    outcome = PatchOutcome(tree)
    for idx, block in enumerate(blocks):
        problem = block.problem()
        if problem:
            outcome.rejected.append(Rejection(idx, problem))
            continue
        try:
            path, start, end, replacement = _APPLIERS[block.kind](outcome.tree, block)
        except PatchError as exc:
            outcome.rejected.append(Rejection(idx, exc.reason, str(exc)))
            continue
        text = outcome.tree.files[path]
        outcome.applied.append(AppliedEdit(idx, path, _byte_span(text, start, end)))
        outcome.tree = outcome.tree.replace(path, text[:start] + replacement + text[end:])
    return outcome


@dataclass(frozen=True)
class Violation:
    file: str
    line: int
    message: str

    def to_dict(self) -> dict:
        return {"file": self.file, "line": self.line, "message": self.message}


def validate_syntax(tree: SourceTree) -> list[Violation]:
    """Every structural violation in the tree; an empty list means ok."""
    violations = []
    for path, text in tree.files.items():
        lexed = mask_code(text)
        for off, msg in lexed.errors:
            violations.append(Violation(path, _line_of(text, off), msg))
        for line, msg in bracket_violations(text, lexed.masked):
            violations.append(Violation(path, line, msg))
    return violations


def rejection_records(candidate: str, parsed: ParseResult, outcome: PatchOutcome | None) -> list[dict]:
    records = [
        {"candidate": candidate, "block": e.index, "reason": e.reason, "detail": e.message} for e in parsed.errors
    ]
    if outcome is not None:
        records += [
            {"candidate": candidate, "block": r.block, "reason": r.reason, "detail": r.detail} for r in outcome.rejected
        ]
    return records


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


@dataclass
class CompileHook:
    """Optional external build step, e.g. ``"make -C {dir}"``. Off when command is None."""

    command: str | None = None
    timeout_s: float = 600.0

    @property
    def enabled(self) -> bool:
        return bool(self.command)

    def run(self, tree_dir: str | Path) -> tuple[bool, str]:
        if not self.command:
            return True, "compile hook disabled"
        argv = shlex.split(self.command.format(dir=str(tree_dir)))
        try:
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout_s)
        except (OSError, subprocess.TimeoutExpired) as exc:
            return False, str(exc)
        return proc.returncode == 0, proc.stdout + proc.stderr
