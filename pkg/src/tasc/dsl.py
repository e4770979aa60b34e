"""Text format for caremap sets: lexer, parser, canonical serializer, JSON export.

Files use the `.tasc` extension, UTF-8, `#` line comments. A file holds any
number of `caremap "<id>" { ... }` blocks plus top-level `link` statements
joining an exit of one caremap to the entry of another.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from tasc import criteria as C
from tasc.model import (
    ActivityClass,
    Caremap,
    CaremapSet,
    ContentType,
    DecisionAspect,
    Duration,
    Edge,
    ModelError,
    MultiLevelLink,
    Node,
    NodeKind,
)

MAX_DIAGNOSTICS = 25

ID_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_-]*\Z")
DATE_RE = re.compile(r"\d{4}-\d{2}-\d{2}\Z")


@dataclass(frozen=True)
class SourceSpan:
    file: str
    line: int  # 1-based
    column: int  # 1-based
    length: int = 1


class Severity(Enum):
    ERROR = "error"
    WARNING = "warning"


@dataclass(frozen=True)
class ParseDiagnostic:
    severity: Severity
    code: str
    message: str
    span: SourceSpan

    def render(self) -> str:
        s = self.span
        return f"{s.file}:{s.line}:{s.column}: {self.severity.value}[{self.code}]: {self.message}"


@dataclass
class ParseResult:
    set: Optional[CaremapSet]
    diagnostics: list[ParseDiagnostic]

    @property
    def ok(self) -> bool:
        return self.set is not None


class ParseFailure(ValueError):
    def __init__(self, diagnostics: list[ParseDiagnostic]):
        super().__init__("\n".join(d.render() for d in diagnostics))
        self.diagnostics = diagnostics


# --- lexer ------------------------------------------------------------------

_SYMBOLS = ("->", "..", "<=", ">=", "==", "!=", "{", "}", "[", "]", "(", ")",
            ";", ":", ",", ".", "<", ">")


@dataclass(frozen=True)
class Token:
    kind: str  # word | string | number | date | symbol | eof
    text: str
    line: int
    column: int

    def span(self, file: str) -> SourceSpan:
        return SourceSpan(file, self.line, self.column, max(1, len(self.text)))


class _LexError(ValueError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(message)
        self.message = message
        self.line = line
        self.column = column


def _tokenize(text: str) -> list[Token]:
    tokens: list[Token] = []
    i, line, col = 0, 1, 1
    n = len(text)
    while i < n:
        c = text[i]
        if c == "\n":
            i += 1
            line += 1
            col = 1
            continue
        if c in " \t\r":
            i += 1
            col += 1
            continue
        if c == "#":
            while i < n and text[i] != "\n":
                i += 1
            continue
        if c == '"':
            start_line, start_col = line, col
            i += 1
            col += 1
            buf = []
            while i < n and text[i] != '"':
                if text[i] == "\n":
                    raise _LexError("unterminated string", start_line, start_col)
                if text[i] == "\\" and i + 1 < n:
                    i += 1
                    col += 1
                buf.append(text[i])
                i += 1
                col += 1
            if i >= n:
                raise _LexError("unterminated string", start_line, start_col)
            i += 1
            col += 1
            tokens.append(Token("string", "".join(buf), start_line, start_col))
            continue
        m = re.match(r"\d{4}-\d{2}-\d{2}(?![\d.])", text[i:])
        if m:
            tokens.append(Token("date", m.group(0), line, col))
            i += len(m.group(0))
            col += len(m.group(0))
            continue
        if c.isdigit() or (c == "-" and i + 1 < n and text[i + 1].isdigit()):
            # stop a decimal point that begins a '..' range operator
            m = re.match(r"-?\d+(\.\d+)?", text[i:])
            assert m
            tokens.append(Token("number", m.group(0), line, col))
            i += len(m.group(0))
            col += len(m.group(0))
            continue
        if c.isalpha() or c == "_":
            start_col = col
            buf = [c]
            i += 1
            col += 1
            # words cover identifiers and unit strings like mmol/L or kg/m2
            while i < n:
                ch = text[i]
                if ch == "-" and i + 1 < n and text[i + 1] == ">":
                    break
                if ch.isalnum() or ch in "_%/-":
                    buf.append(ch)
                    i += 1
                    col += 1
                else:
                    break
            tokens.append(Token("word", "".join(buf), line, start_col))
            continue
        if c == "%":
            tokens.append(Token("word", "%", line, col))
            i += 1
            col += 1
            continue
        for sym in _SYMBOLS:
            if text.startswith(sym, i):
                tokens.append(Token("symbol", sym, line, col))
                i += len(sym)
                col += len(sym)
                break
        else:
            raise _LexError(f"unexpected character {c!r}", line, col)
    tokens.append(Token("eof", "", line, col))
    return tokens


# --- parser -----------------------------------------------------------------

_KIND_KEYWORDS = {
    "entry": NodeKind.ENTRY_POINT,
    "exit": NodeKind.EXIT_POINT,
    "exclusion": NodeKind.EXCLUSION_POINT,
    "activity": NodeKind.ACTIVITY,
    "decision": NodeKind.DECISION,
}

_META_KEYWORDS = ("title", "scenario", "date", "version", "team", "evidence", "variance_log")

_CLASS_BY_NAME = {ac.value: ac for ac in ActivityClass}
_ASPECT_BY_NAME = {a.value: a for a in DecisionAspect}
_CONTENT_BY_NAME = {ct.value: ct for ct in ContentType}


class _Bail(Exception):
    """Stop after the diagnostic limit is hit."""


class _Resync(Exception):
    """Jump to the next statement boundary after a syntax error."""


@dataclass
class _RawEdge:
    from_id: str
    to_id: str
    criterion: Optional[C.Criterion]
    annotation: Optional[str]
    token: Token


class Parser:
    def __init__(self, text: str, filename: str = "<input>"):
        self.filename = filename
        self.diagnostics: list[ParseDiagnostic] = []
        self.pos = 0
        try:
            self.tokens = _tokenize(text)
        except _LexError as e:
            self.tokens = [Token("eof", "", e.line, e.column)]
            self._error("E-SYNTAX", e.message, Token("eof", "", e.line, e.column))

    # -- token plumbing

    def _peek(self, ahead: int = 0) -> Token:
        return self.tokens[min(self.pos + ahead, len(self.tokens) - 1)]

    def _next(self) -> Token:
        tok = self._peek()
        if tok.kind != "eof":
            self.pos += 1
        return tok

    def _at_word(self, *words: str) -> bool:
        t = self._peek()
        return t.kind == "word" and t.text in words

    def _at_symbol(self, sym: str) -> bool:
        t = self._peek()
        return t.kind == "symbol" and t.text == sym

    def _expect_symbol(self, sym: str) -> Token:
        t = self._peek()
        if not self._at_symbol(sym):
            self._error("E-SYNTAX", f"expected {sym!r}, found {t.text or 'end of input'!r}", t)
            raise _Resync()
        return self._next()

    def _expect_id(self, what: str = "identifier") -> Token:
        t = self._peek()
        if t.kind != "word" or not ID_RE.match(t.text):
            self._error("E-SYNTAX", f"expected {what}, found {t.text or 'end of input'!r}", t)
            raise _Resync()
        return self._next()

    def _expect_string(self, what: str = "string") -> Token:
        t = self._peek()
        if t.kind != "string":
            self._error("E-SYNTAX", f"expected {what}, found {t.text or 'end of input'!r}", t)
            raise _Resync()
        return self._next()

    def _error(self, code: str, message: str, token: Token) -> None:
        self.diagnostics.append(
            ParseDiagnostic(Severity.ERROR, code, message, token.span(self.filename))
        )
        if len(self.diagnostics) >= MAX_DIAGNOSTICS:
            raise _Bail()

    def _warn(self, code: str, message: str, token: Token) -> None:
        self.diagnostics.append(
            ParseDiagnostic(Severity.WARNING, code, message, token.span(self.filename))
        )

    def _resync_stmt(self) -> None:
        while True:
            t = self._peek()
            if t.kind == "eof":
                return
            if t.kind == "symbol" and t.text in (";", "}"):
                if t.text == ";":
                    self._next()
                return
            self._next()

    # -- grammar

    def parse(self) -> ParseResult:
        caremaps: list[Caremap] = []
        links: list[MultiLevelLink] = []
        try:
            while self._peek().kind != "eof":
                if self._at_word("caremap"):
                    cm = self._parse_caremap()
                    if cm is not None:
                        if any(existing.id == cm.id for existing in caremaps):
                            self._error("E-DUP", f"duplicate caremap id {cm.id!r}", self._peek())
                        else:
                            caremaps.append(cm)
                elif self._at_word("link"):
                    link = self._parse_link()
                    if link is not None:
                        links.append(link)
                else:
                    t = self._peek()
                    self._error(
                        "E-SYNTAX",
                        f"expected 'caremap' or 'link', found {t.text or 'end of input'!r}",
                        t,
                    )
                    self._next()
        except _Bail:
            pass
        if any(d.severity is Severity.ERROR for d in self.diagnostics):
            return ParseResult(None, self.diagnostics)
        try:
            cmset = CaremapSet(tuple(caremaps), tuple(links))
        except ModelError as e:
            self.diagnostics.append(
                ParseDiagnostic(Severity.ERROR, "E-MODEL", str(e), SourceSpan(self.filename, 1, 1))
            )
            return ParseResult(None, self.diagnostics)
        return ParseResult(cmset, self.diagnostics)

    def _parse_link(self) -> Optional[MultiLevelLink]:
        try:
            self._next()  # link
            from_cm = self._expect_id("caremap id").text
            self._expect_symbol(".")
            from_node = self._expect_id("node id").text
            self._expect_symbol("->")
            to_cm = self._expect_id("caremap id").text
            self._expect_symbol(".")
            to_node = self._expect_id("node id").text
            if self._at_symbol(";"):
                self._next()
            return MultiLevelLink(from_cm, from_node, to_cm, to_node)
        except _Resync:
            self._resync_stmt()
            return None

    def _parse_caremap(self) -> Optional[Caremap]:
        self._next()  # caremap
        try:
            id_tok = self._expect_string("caremap id string")
            if not ID_RE.match(id_tok.text):
                self._error("E-SYNTAX", f"caremap id {id_tok.text!r} is not a valid identifier", id_tok)
            self._expect_symbol("{")
        except _Resync:
            self._resync_stmt()
            return None
        cm_id = id_tok.text
        meta: dict[str, object] = {}
        nodes: list[Node] = []
        node_ids: dict[str, Token] = {}
        raw_edges: list[_RawEdge] = []

        while not self._at_symbol("}") and self._peek().kind != "eof":
            try:
                self._parse_stmt(meta, nodes, node_ids, raw_edges)
            except _Resync:
                self._resync_stmt()
        if self._at_symbol("}"):
            self._next()
        else:
            self._error("E-SYNTAX", "unclosed caremap block", self._peek())

        edges = self._finish_edges(cm_id, node_ids, raw_edges)
        self._check_decision_units(cm_id, nodes, edges)
        if any(d.severity is Severity.ERROR for d in self.diagnostics):
            return None
        try:
            return Caremap(
                id=cm_id,
                title=str(meta.get("title", "")),
                scenario=meta.get("scenario"),  # type: ignore[arg-type]
                date=meta.get("date"),  # type: ignore[arg-type]
                version=meta.get("version"),  # type: ignore[arg-type]
                team=meta.get("team"),  # type: ignore[arg-type]
                evidence_refs=tuple(meta.get("evidence", ())),  # type: ignore[arg-type]
                variance_log_ref=meta.get("variance_log"),  # type: ignore[arg-type]
                nodes=tuple(nodes),
                edges=edges,
            )
        except ModelError as e:
            self._error("E-MODEL", str(e), id_tok)
            return None

    def _parse_stmt(self, meta, nodes, node_ids, raw_edges) -> None:
        t = self._peek()
        if t.kind == "word" and t.text in _META_KEYWORDS:
            self._parse_meta(meta)
        elif t.kind == "word" and (t.text in _KIND_KEYWORDS or t.text == "nested"):
            self._parse_decl(nodes, node_ids)
        elif t.kind == "word" and ID_RE.match(t.text):
            self._parse_edge(raw_edges)
        elif self._at_symbol(";"):
            self._next()
        else:
            self._error("E-SYNTAX", f"unexpected {t.text or 'end of input'!r} in caremap block", t)
            raise _Resync()

    def _parse_meta(self, meta: dict) -> None:
        key_tok = self._next()
        key = key_tok.text
        if key in meta:
            self._error("E-DUP", f"duplicate {key!r} metadata", key_tok)
        if key in ("title", "scenario", "team", "variance_log"):
            meta[key] = self._expect_string().text
        elif key == "date":
            t = self._peek()
            if t.kind != "date":
                self._error("E-SYNTAX", f"expected ISO date (YYYY-MM-DD), found {t.text!r}", t)
                raise _Resync()
            meta[key] = self._next().text
        elif key == "version":
            t = self._peek()
            if t.kind != "number" or not t.text.isdigit() or int(t.text) < 1:
                self._error("E-SYNTAX", f"version must be an integer >= 1, found {t.text!r}", t)
                raise _Resync()
            meta[key] = int(self._next().text)
        elif key == "evidence":
            refs = [self._expect_string().text]
            while self._at_symbol(","):
                self._next()
                refs.append(self._expect_string().text)
            meta[key] = tuple(refs)
        self._terminate_stmt()

    def _terminate_stmt(self) -> None:
        if self._at_symbol(";"):
            self._next()
        elif not self._at_symbol("}"):
            t = self._peek()
            self._error("E-SYNTAX", f"expected ';', found {t.text or 'end of input'!r}", t)
            raise _Resync()

    def _parse_decl(self, nodes: list[Node], node_ids: dict[str, Token]) -> None:
        nested = False
        if self._at_word("nested"):
            nested = True
            self._next()
            if not self._at_word("activity", "decision"):
                t = self._peek()
                self._error("E-SYNTAX", f"expected 'activity' or 'decision' after 'nested', found {t.text!r}", t)
                raise _Resync()
        kw_tok = self._next()
        kind = _KIND_KEYWORDS[kw_tok.text]
        if nested:
            kind = (
                NodeKind.NESTED_ACTIVITY if kind is NodeKind.ACTIVITY else NodeKind.NESTED_DECISION
            )
        id_tok = self._expect_id("node id")
        label = ""
        if self._peek().kind == "string":
            label = self._next().text
        elif kind in (NodeKind.ACTIVITY, NodeKind.NESTED_ACTIVITY, NodeKind.DECISION, NodeKind.NESTED_DECISION):
            t = self._peek()
            self._error("E-SYNTAX", f"{kw_tok.text} {id_tok.text!r} needs a label string", t)
            raise _Resync()
        nested_ref = None
        if nested:
            if not self._at_word("ref"):
                t = self._peek()
                self._error("E-SYNTAX", f"nested {kw_tok.text} needs 'ref <caremap-id>'", t)
                raise _Resync()
            self._next()
            nested_ref = self._expect_id("caremap id").text
        content_type, activity_class, aspect, duration, annotation = self._parse_tags(kind, id_tok)
        self._terminate_stmt()

        if id_tok.text in node_ids:
            self._error("E-DUP", f"duplicate node id {id_tok.text!r}", id_tok)
            return
        node_ids[id_tok.text] = id_tok
        try:
            nodes.append(
                Node(
                    id=id_tok.text,
                    kind=kind,
                    label=label,
                    content_type=content_type,
                    activity_class=activity_class,
                    aspect=aspect,
                    nested_ref=nested_ref,
                    duration=duration,
                    annotation=annotation,
                )
            )
        except ModelError as e:
            self._error("E-MODEL", str(e), id_tok)

    def _parse_tags(self, kind: NodeKind, id_tok: Token):
        content_type = activity_class = aspect = duration = annotation = None
        while self._at_symbol("["):
            open_tok = self._next()
            t = self._peek()
            if t.kind == "word" and t.text in _CONTENT_BY_NAME:
                if content_type is not None:
                    self._error("E-DUP", "duplicate content-type tag", t)
                content_type = _CONTENT_BY_NAME[self._next().text]
            elif self._at_word("aspect"):
                self._next()
                self._expect_symbol(":")
                name_tok = self._expect_id("decision aspect")
                if name_tok.text not in _ASPECT_BY_NAME:
                    self._error(
                        "E-TAG",
                        f"unknown aspect {name_tok.text!r}; expected one of {sorted(_ASPECT_BY_NAME)}",
                        name_tok,
                    )
                else:
                    aspect = _ASPECT_BY_NAME[name_tok.text]
            elif self._at_word("class"):
                self._next()
                self._expect_symbol(":")
                t2 = self._peek()
                if t2.kind == "string":
                    activity_class = self._next().text  # free-text class
                else:
                    name_tok = self._expect_id("activity class")
                    if name_tok.text in _CLASS_BY_NAME:
                        activity_class = _CLASS_BY_NAME[name_tok.text]
                    else:
                        self._error(
                            "E-TAG",
                            f"unknown activity class {name_tok.text!r}; quote it for a free-text class",
                            name_tok,
                        )
            elif self._at_word("duration"):
                self._next()
                self._expect_symbol(":")
                num_tok = self._peek()
                if num_tok.kind != "number":
                    self._error("E-SYNTAX", f"expected duration value, found {num_tok.text!r}", num_tok)
                    raise _Resync()
                self._next()
                unit_tok = self._peek()
                if unit_tok.kind != "word":
                    self._error("E-SYNTAX", "duration needs a unit word", unit_tok)
                    raise _Resync()
                self._next()
                duration = Duration(float(num_tok.text), unit_tok.text)
            elif self._at_word("note"):
                self._next()
                self._expect_symbol(":")
                annotation = self._expect_string().text
            else:
                self._error("E-TAG", f"unknown tag {t.text!r}", t if t.kind != "eof" else open_tok)
                raise _Resync()
            self._expect_symbol("]")
        return content_type, activity_class, aspect, duration, annotation

    def _parse_edge(self, raw_edges: list[_RawEdge]) -> None:
        from_tok = self._expect_id("node id")
        self._expect_symbol("->")
        to_tok = self._expect_id("node id")
        criterion: Optional[C.Criterion] = None
        if self._at_word("when"):
            self._next()
            criterion = self._parse_criterion()
        elif self._at_word("otherwise"):
            self._next()
            criterion = C.OTHERWISE
        annotation = None
        if self._at_word("note"):
            self._next()
            annotation = self._expect_string().text
        self._terminate_stmt()
        raw_edges.append(_RawEdge(from_tok.text, to_tok.text, criterion, annotation, from_tok))

    # criterion grammar: or > and > not > atom
    def _parse_criterion(self) -> C.Criterion:
        expr = self._parse_or()
        return expr

    def _parse_or(self) -> C.Criterion:
        parts = [self._parse_and()]
        while self._at_word("or"):
            self._next()
            parts.append(self._parse_and())
        return parts[0] if len(parts) == 1 else C.Or(tuple(parts))

    def _parse_and(self) -> C.Criterion:
        parts = [self._parse_not()]
        while self._at_word("and"):
            self._next()
            parts.append(self._parse_not())
        return parts[0] if len(parts) == 1 else C.And(tuple(parts))

    def _parse_not(self) -> C.Criterion:
        if self._at_word("not"):
            self._next()
            return C.Not(self._parse_not())
        return self._parse_atom()

    def _parse_atom(self) -> C.Criterion:
        t = self._peek()
        if self._at_symbol("("):
            self._next()
            inner = self._parse_or()
            self._expect_symbol(")")
            return inner
        if self._at_word("otherwise"):
            self._error("E-SYNTAX", "'otherwise' cannot be nested inside a criterion", t)
            raise _Resync()
        name_tok = self._expect_id("variable or predicate name")
        if self._at_symbol("("):
            self._next()
            args: list[C.Literal] = []
            if not self._at_symbol(")"):
                args.append(self._parse_literal())
                while self._at_symbol(","):
                    self._next()
                    args.append(self._parse_literal())
            self._expect_symbol(")")
            return C.Predicate(name_tok.text, tuple(args))
        if self._at_word("in"):
            self._next()
            low = self._parse_number()
            self._expect_symbol("..")
            high = self._parse_number()
            unit = self._parse_unit()
            return C.InRange(name_tok.text, low, high, unit)
        op_tok = self._peek()
        if op_tok.kind == "symbol" and op_tok.text in ("<", "<=", ">", ">=", "==", "!="):
            self._next()
            val_tok = self._peek()
            if val_tok.kind == "number":
                value: C.Literal = self._parse_number()
                unit = self._parse_unit()
            elif val_tok.kind in ("word", "string"):
                if op_tok.text not in ("==", "!="):
                    self._error("E-SYNTAX", "categorical values allow only == and !=", val_tok)
                    raise _Resync()
                value = self._next().text
                unit = None
            else:
                self._error("E-SYNTAX", f"expected comparison value, found {val_tok.text!r}", val_tok)
                raise _Resync()
            return C.Comparison(name_tok.text, op_tok.text, value, unit)
        self._error("E-SYNTAX", f"expected comparison, 'in', or '(', found {op_tok.text!r}", op_tok)
        raise _Resync()

    def _parse_number(self) -> float:
        t = self._peek()
        if t.kind != "number":
            self._error("E-SYNTAX", f"expected number, found {t.text or 'end of input'!r}", t)
            raise _Resync()
        self._next()
        return float(t.text)

    def _parse_unit(self) -> Optional[str]:
        t = self._peek()
        if t.kind == "word" and t.text not in ("and", "or", "not", "when", "otherwise", "note", "in"):
            self._next()
            return t.text
        return None

    def _parse_literal(self) -> C.Literal:
        t = self._peek()
        if t.kind == "number":
            self._next()
            f = float(t.text)
            return int(f) if f == int(f) else f
        if t.kind in ("word", "string"):
            self._next()
            return t.text
        self._error("E-SYNTAX", f"expected literal, found {t.text or 'end of input'!r}", t)
        raise _Resync()

    # -- post-parse assembly

    def _finish_edges(
        self, cm_id: str, node_ids: dict[str, Token], raw_edges: list[_RawEdge]
    ) -> tuple[Edge, ...]:
        edges: list[Edge] = []
        groups: dict[tuple[str, str], list[_RawEdge]] = {}
        for raw in raw_edges:
            bad = False
            for end in (raw.from_id, raw.to_id):
                if end not in node_ids:
                    self._error("E-UNDEF", f"edge references undeclared node {end!r}", raw.token)
                    bad = True
            if not bad:
                groups.setdefault((raw.from_id, raw.to_id), []).append(raw)
        for (from_id, to_id), group in groups.items():
            # edge ids derive from content so canonical output is independent
            # of declaration order
            group.sort(key=lambda r: C.criterion_text(r.criterion) if r.criterion else "")
            seen: set[str] = set()
            for k, raw in enumerate(group):
                key = C.criterion_text(raw.criterion) if raw.criterion else ""
                if key in seen:
                    self._error(
                        "E-DUP",
                        f"duplicate edge {from_id} -> {to_id}"
                        + (f" with criterion {key!r}" if key else ""),
                        raw.token,
                    )
                    continue
                seen.add(key)
                edge_id = f"{from_id}->{to_id}" if k == 0 else f"{from_id}->{to_id}#{k + 1}"
                edges.append(Edge(edge_id, from_id, to_id, raw.criterion, raw.annotation))
        edges.sort(key=lambda e: e.id)
        return tuple(edges)

    def _check_decision_units(self, cm_id: str, nodes: list[Node], edges: tuple[Edge, ...]) -> None:
        from tasc.model import DECISION_KINDS

        decision_ids = {n.id for n in nodes if n.kind in DECISION_KINDS}
        units_by_decision: dict[str, dict[str, str]] = {}
        for e in edges:
            if e.from_id not in decision_ids or e.criterion is None:
                continue
            units = units_by_decision.setdefault(e.from_id, {})
            for var, unit in _comparison_units(e.criterion):
                if unit is None:
                    continue
                if var in units and units[var] != unit:
                    self._error(
                        "E-UNIT",
                        f"decision {e.from_id!r}: variable {var!r} compared in both "
                        f"{units[var]!r} and {unit!r}",
                        Token("word", var, 1, 1),
                    )
                else:
                    units[var] = unit


def _comparison_units(criterion: C.Criterion):
    if isinstance(criterion, (C.Comparison, C.InRange)):
        yield criterion.var, criterion.unit
    elif isinstance(criterion, (C.And, C.Or)):
        for child in criterion.children:
            yield from _comparison_units(child)
    elif isinstance(criterion, C.Not):
        yield from _comparison_units(criterion.child)


def parse(text: str, filename: str = "<input>") -> ParseResult:
    return Parser(text, filename).parse()


def parse_or_raise(text: str, filename: str = "<input>") -> CaremapSet:
    result = parse(text, filename)
    if result.set is None:
        raise ParseFailure([d for d in result.diagnostics if d.severity is Severity.ERROR])
    return result.set


# --- canonical serializer ---------------------------------------------------

_KIND_ORDER = {
    NodeKind.ENTRY_POINT: 0,
    NodeKind.EXIT_POINT: 1,
    NodeKind.EXCLUSION_POINT: 2,
    NodeKind.ACTIVITY: 3,
    NodeKind.NESTED_ACTIVITY: 4,
    NodeKind.DECISION: 5,
    NodeKind.NESTED_DECISION: 6,
}

_KIND_SYNTAX = {
    NodeKind.ENTRY_POINT: "entry",
    NodeKind.EXIT_POINT: "exit",
    NodeKind.EXCLUSION_POINT: "exclusion",
    NodeKind.ACTIVITY: "activity",
    NodeKind.NESTED_ACTIVITY: "nested activity",
    NodeKind.DECISION: "decision",
    NodeKind.NESTED_DECISION: "nested decision",
}


def _quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def _node_line(n: Node) -> str:
    parts = [_KIND_SYNTAX[n.kind], n.id]
    if n.label:
        parts.append(_quote(n.label))
    if n.nested_ref:
        parts.append(f"ref {n.nested_ref}")
    if n.content_type:
        parts.append(f"[{n.content_type.value}]")
    if n.activity_class is not None:
        if isinstance(n.activity_class, ActivityClass):
            parts.append(f"[class: {n.activity_class.value}]")
        else:
            parts.append(f"[class: {_quote(n.activity_class)}]")
    if n.aspect:
        parts.append(f"[aspect: {n.aspect.value}]")
    if n.duration:
        parts.append(f"[duration: {C.format_number(n.duration.value)} {n.duration.unit}]")
    if n.annotation:
        parts.append(f"[note: {_quote(n.annotation)}]")
    return " ".join(parts) + ";"


def _edge_line(e: Edge) -> str:
    parts = [f"{e.from_id} -> {e.to_id}"]
    if isinstance(e.criterion, C.Otherwise):
        parts.append("otherwise")
    elif e.criterion is not None:
        parts.append(f"when {C.criterion_text(e.criterion)}")
    if e.annotation:
        parts.append(f"note {_quote(e.annotation)}")
    return " ".join(parts) + ";"


def serialize(cmset: CaremapSet) -> str:
    """Canonical text form: stable ordering, fixed indentation, idempotent."""
    lines: list[str] = []
    for cm in sorted(cmset.caremaps, key=lambda c: c.id):
        lines.append(f"caremap {_quote(cm.id)} {{")
        if cm.title:
            lines.append(f"  title {_quote(cm.title)};")
        if cm.scenario:
            lines.append(f"  scenario {_quote(cm.scenario)};")
        if cm.date:
            lines.append(f"  date {cm.date};")
        if cm.version is not None:
            lines.append(f"  version {cm.version};")
        if cm.team:
            lines.append(f"  team {_quote(cm.team)};")
        if cm.evidence_refs:
            lines.append("  evidence " + ", ".join(_quote(r) for r in cm.evidence_refs) + ";")
        if cm.variance_log_ref:
            lines.append(f"  variance_log {_quote(cm.variance_log_ref)};")
        for n in sorted(cm.nodes, key=lambda n: (_KIND_ORDER[n.kind], n.id)):
            lines.append("  " + _node_line(n))
        for e in sorted(cm.edges, key=lambda e: e.id):
            lines.append("  " + _edge_line(e))
        lines.append("}")
        lines.append("")
    for link in sorted(
        cmset.links,
        key=lambda l: (l.from_caremap, l.from_exit_node, l.to_caremap, l.to_entry_node),
    ):
        lines.append(
            f"link {link.from_caremap}.{link.from_exit_node} -> "
            f"{link.to_caremap}.{link.to_entry_node};"
        )
    if lines and lines[-1] == "":
        lines.pop()
    return "\n".join(lines) + "\n"


# --- JSON export ------------------------------------------------------------


def _node_json(n: Node) -> dict:
    out: dict = {"id": n.id, "kind": n.kind.value, "label": n.label}
    if n.content_type:
        out["content_type"] = n.content_type.value
    if n.activity_class is not None:
        if isinstance(n.activity_class, ActivityClass):
            out["activity_class"] = n.activity_class.value
        else:
            out["activity_class"] = {"other": n.activity_class}
    if n.aspect:
        out["aspect"] = n.aspect.value
    if n.nested_ref:
        out["nested_ref"] = n.nested_ref
    if n.duration:
        out["duration"] = {"unit": n.duration.unit, "value": n.duration.value}
    if n.annotation:
        out["annotation"] = n.annotation
    return out


def _edge_json(e: Edge) -> dict:
    out: dict = {"id": e.id, "from": e.from_id, "to": e.to_id}
    if isinstance(e.criterion, C.Otherwise):
        out["otherwise"] = True
    elif e.criterion is not None:
        out["criterion"] = C.criterion_text(e.criterion)
    if e.annotation:
        out["annotation"] = e.annotation
    return out


def to_json(cmset: CaremapSet) -> str:
    """Canonical JSON document (sorted keys, stable arrays), schema v1."""
    doc = {
        "tasc_schema": 1,
        "caremaps": [
            {
                "id": cm.id,
                "title": cm.title,
                **({"scenario": cm.scenario} if cm.scenario else {}),
                **({"date": cm.date} if cm.date else {}),
                **({"version": cm.version} if cm.version is not None else {}),
                **({"team": cm.team} if cm.team else {}),
                **({"evidence_refs": list(cm.evidence_refs)} if cm.evidence_refs else {}),
                **({"variance_log_ref": cm.variance_log_ref} if cm.variance_log_ref else {}),
                "nodes": [
                    _node_json(n)
                    for n in sorted(cm.nodes, key=lambda n: (_KIND_ORDER[n.kind], n.id))
                ],
                "edges": [_edge_json(e) for e in sorted(cm.edges, key=lambda e: e.id)],
            }
            for cm in sorted(cmset.caremaps, key=lambda c: c.id)
        ],
        "links": [
            {
                "from_caremap": l.from_caremap,
                "from_exit_node": l.from_exit_node,
                "to_caremap": l.to_caremap,
                "to_entry_node": l.to_entry_node,
            }
            for l in sorted(
                cmset.links,
                key=lambda l: (l.from_caremap, l.from_exit_node, l.to_caremap, l.to_entry_node),
            )
        ],
    }
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"
