"""Concrete syntax, AST, desugaring and normalization for lambda-actor programs.

Source files (``.lact``) use an Erlang-flavoured surface syntax::

    letrec
      loop = fun(P) -> receive {ping, Q} -> send(Q, pong), loop(P) end.
    in S = spawn(fun() -> loop(self())), send(S, {ping, self()}).

Pipeline: ``parse`` produces a surface AST that still contains sugar
(sequences, bindings, tuple and list literals, wildcards); ``desugar``
rewrites the sugar into core nodes; ``normalize`` resolves letrec-bound
lowercase names, renames binders apart, puts constructor arguments and
case scrutinees into variable form, and assigns preorder labels.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterator, Optional, Union


class SyntaxErrorAt(Exception):
    """Parse or validation error carrying a source location."""

    def __init__(self, message: str, line: int = 0, col: int = 0):
        super().__init__(f"{line}:{col}: {message}" if line else message)
        self.message = message
        self.line = line
        self.col = col


class ParseError(SyntaxErrorAt):
    pass


class FreeVariable(SyntaxErrorAt):
    def __init__(self, name: str, span: Optional["Span"]):
        line, col = (span.line, span.col) if span else (0, 0)
        super().__init__(f"free variable {name}", line, col)
        self.name = name
        self.span = span


class UnknownArity(SyntaxErrorAt):
    def __init__(self, name: str, arities: tuple[int, int], span: Optional["Span"]):
        line, col = (span.line, span.col) if span else (0, 0)
        super().__init__(
            f"constructor {name} used with arities {arities[0]} and {arities[1]}", line, col
        )
        self.name = name


class DuplicateProbe(SyntaxErrorAt):
    pass


@dataclass(frozen=True)
class Span:
    line: int
    col: int

    def __str__(self) -> str:
        return f"{self.line}:{self.col}"


# ---------------------------------------------------------------------------
# AST

def _meta():
    return field(default=None, compare=False, repr=False, kw_only=True)


def _label():
    return field(default=-1, compare=False, repr=False, kw_only=True)


@dataclass(frozen=True)
class PVar:
    name: str
    # True when the variable is already bound where the pattern occurs, so the
    # occurrence checks against the bound value instead of binding a new one.
    ref: bool = field(default=False, compare=False)
    span: Optional[Span] = _meta()


@dataclass(frozen=True)
class PCtor:
    name: str
    args: tuple["Pattern", ...] = ()
    span: Optional[Span] = _meta()


@dataclass(frozen=True)
class PWild:
    span: Optional[Span] = _meta()


@dataclass(frozen=True)
class PTuple:
    items: tuple["Pattern", ...]
    span: Optional[Span] = _meta()


@dataclass(frozen=True)
class PList:
    items: tuple["Pattern", ...]
    tail: Optional["Pattern"] = None
    span: Optional[Span] = _meta()


Pattern = Union[PVar, PCtor, PWild, PTuple, PList]


def pattern_depth(p: Pattern) -> int:
    """Nesting depth: variables have depth 0, constructors 1 + max child depth."""
    if isinstance(p, (PVar, PWild)):
        return 0
    if isinstance(p, PCtor):
        return 1 + max((pattern_depth(a) for a in p.args), default=0)
    if isinstance(p, PTuple):
        return 1 + max((pattern_depth(a) for a in p.items), default=0)
    if isinstance(p, PList):
        # [a, b | T] is cons(a, cons(b, T))
        depth = pattern_depth(p.tail) if p.tail is not None else 1
        for item in reversed(p.items):
            depth = 1 + max(pattern_depth(item), depth)
        return depth
    raise TypeError(p)


def pattern_vars(p: Pattern) -> list[str]:
    """Variable names of a pattern, in order of first occurrence."""
    out: list[str] = []

    def walk(q: Pattern) -> None:
        if isinstance(q, PVar):
            if q.name not in out:
                out.append(q.name)
        elif isinstance(q, PCtor):
            for a in q.args:
                walk(a)
        elif isinstance(q, PTuple):
            for a in q.items:
                walk(a)
        elif isinstance(q, PList):
            for a in q.items:
                walk(a)
            if q.tail is not None:
                walk(q.tail)

    walk(p)
    return out


@dataclass(frozen=True)
class Var:
    name: str
    span: Optional[Span] = _meta()
    label: int = _label()


@dataclass(frozen=True)
class Ctor:
    name: str
    args: tuple["Expr", ...] = ()
    # written with parentheses, e.g. ``f()``; matters when ``f`` turns out to
    # be a letrec-bound function rather than a constructor
    call: bool = False
    span: Optional[Span] = _meta()
    label: int = _label()


@dataclass(frozen=True)
class App:
    fn: "Expr"
    args: tuple["Expr", ...] = ()
    span: Optional[Span] = _meta()
    label: int = _label()


@dataclass(frozen=True)
class Fun:
    params: tuple[str, ...]
    body: "Expr"
    span: Optional[Span] = _meta()
    label: int = _label()


@dataclass(frozen=True)
class Letrec:
    bindings: tuple[tuple[str, Fun], ...]
    body: "Expr"
    span: Optional[Span] = _meta()
    label: int = _label()


@dataclass(frozen=True)
class Case:
    scrutinee: "Expr"
    clauses: tuple[tuple[Pattern, "Expr"], ...]
    span: Optional[Span] = _meta()
    label: int = _label()


@dataclass(frozen=True)
class Receive:
    clauses: tuple[tuple[Pattern, "Expr"], ...]
    span: Optional[Span] = _meta()
    label: int = _label()


@dataclass(frozen=True)
class Send:
    target: "Expr"
    payload: "Expr"
    span: Optional[Span] = _meta()
    label: int = _label()


@dataclass(frozen=True)
class Spawn:
    thunk: "Expr"
    span: Optional[Span] = _meta()
    label: int = _label()


@dataclass(frozen=True)
class SelfPid:
    span: Optional[Span] = _meta()
    label: int = _label()


@dataclass(frozen=True)
class Choice:
    thunks: tuple["Expr", ...]
    span: Optional[Span] = _meta()
    label: int = _label()


@dataclass(frozen=True)
class Probe:
    tag: str
    body: "Expr"
    span: Optional[Span] = _meta()
    label: int = _label()


# sugar, removed by desugar


@dataclass(frozen=True)
class Seq:
    items: tuple["Expr", ...]
    span: Optional[Span] = _meta()
    label: int = _label()


@dataclass(frozen=True)
class Bind:
    pattern: Pattern
    value: "Expr"
    span: Optional[Span] = _meta()
    label: int = _label()


@dataclass(frozen=True)
class Tuple:
    items: tuple["Expr", ...]
    span: Optional[Span] = _meta()
    label: int = _label()


@dataclass(frozen=True)
class ListLit:
    items: tuple["Expr", ...]
    tail: Optional["Expr"] = None
    span: Optional[Span] = _meta()
    label: int = _label()


Expr = Union[
    Var, Ctor, App, Fun, Letrec, Case, Receive, Send, Spawn, SelfPid, Choice, Probe,
    Seq, Bind, Tuple, ListLit,
]

VALUE_NODES = (Fun, Ctor)
CALL_NODES = (App, Send, Spawn)


def children(e: Expr) -> tuple[Expr, ...]:
    """Direct sub-expressions, left to right."""
    if isinstance(e, (Var, SelfPid)):
        return ()
    if isinstance(e, Ctor):
        return e.args
    if isinstance(e, App):
        return (e.fn, *e.args)
    if isinstance(e, Fun):
        return (e.body,)
    if isinstance(e, Letrec):
        return (*(f for _, f in e.bindings), e.body)
    if isinstance(e, Case):
        return (e.scrutinee, *(b for _, b in e.clauses))
    if isinstance(e, Receive):
        return tuple(b for _, b in e.clauses)
    if isinstance(e, Send):
        return (e.target, e.payload)
    if isinstance(e, Spawn):
        return (e.thunk,)
    if isinstance(e, Choice):
        return e.thunks
    if isinstance(e, Probe):
        return (e.body,)
    if isinstance(e, Seq):
        return e.items
    if isinstance(e, Bind):
        return (e.value,)
    if isinstance(e, Tuple):
        return e.items
    if isinstance(e, ListLit):
        return (*e.items, e.tail) if e.tail is not None else e.items
    raise TypeError(e)


def walk(e: Expr) -> Iterator[Expr]:
    """Preorder traversal."""
    stack = [e]
    while stack:
        node = stack.pop()
        yield node
        stack.extend(reversed(children(node)))


def call_operands(e: Expr) -> tuple[Expr, ...]:
    """Operands evaluated left to right before a call-like node fires."""
    if isinstance(e, App):
        return (e.fn, *e.args)
    if isinstance(e, Send):
        return (e.target, e.payload)
    if isinstance(e, Spawn):
        return (e.thunk,)
    raise TypeError(e)


def _pattern_free(p: Pattern, bound: frozenset[str], out: set[str]) -> None:
    if isinstance(p, PVar):
        if p.ref and p.name not in bound:
            out.add(p.name)
    elif isinstance(p, PCtor):
        for a in p.args:
            _pattern_free(a, bound, out)
    elif isinstance(p, PTuple):
        for a in p.items:
            _pattern_free(a, bound, out)
    elif isinstance(p, PList):
        for a in p.items:
            _pattern_free(a, bound, out)
        if p.tail is not None:
            _pattern_free(p.tail, bound, out)


def _pattern_binders(p: Pattern) -> set[str]:
    out: set[str] = set()

    def go(q: Pattern) -> None:
        if isinstance(q, PVar):
            if not q.ref:
                out.add(q.name)
        elif isinstance(q, (PCtor, PTuple, PList)):
            for a in (q.args if isinstance(q, PCtor) else q.items):
                go(a)
            if isinstance(q, PList) and q.tail is not None:
                go(q.tail)

    go(p)
    return out


def free_vars(e: Expr) -> frozenset[str]:
    """Free variables; clause patterns bind their variables in the clause body.

    Pattern variables marked ``ref`` (already bound at the pattern's site)
    count as uses.
    """
    out: set[str] = set()
    _free(e, frozenset(), out)
    return frozenset(out)


def _free(e: Expr, bound: frozenset[str], out: set[str]) -> None:
    if isinstance(e, Var):
        if e.name not in bound:
            out.add(e.name)
    elif isinstance(e, Fun):
        _free(e.body, bound | set(e.params), out)
    elif isinstance(e, Letrec):
        inner = bound | {name for name, _ in e.bindings}
        for _, f in e.bindings:
            _free(f, inner, out)
        _free(e.body, inner, out)
    elif isinstance(e, (Case, Receive)):
        if isinstance(e, Case):
            _free(e.scrutinee, bound, out)
        for pat, body in e.clauses:
            _pattern_free(pat, bound, out)
            _free(body, bound | _pattern_binders(pat), out)
    elif isinstance(e, Seq):
        scope = bound
        for item in e.items:
            if isinstance(item, Bind):
                _free(item.value, scope, out)
                _pattern_free(item.pattern, scope, out)
                scope = scope | _pattern_binders(item.pattern)
            else:
                _free(item, scope, out)
    else:
        for c in children(e):
            _free(c, bound, out)


# ---------------------------------------------------------------------------
# Lexer

KEYWORDS = {
    "fun", "receive", "case", "of", "end", "letrec", "in",
    "send", "spawn", "self", "choice", "probe",
}

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<nl>\n)
  | (?P<comment>%[^\n]*)
  | (?P<arrow>->)
  | (?P<punct>[(){}\[\],;.=|])
  | (?P<var>(?:[A-Z]|_[A-Za-z0-9])[A-Za-z0-9_']*)
  | (?P<wild>_)
  | (?P<atom>[a-z][A-Za-z0-9_']*)
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str  # 'var' 'atom' 'kw' 'wild' 'punct' 'arrow' 'eof'
    text: str
    line: int
    col: int


@dataclass(frozen=True)
class Pragma:
    """A ``%! ...`` structured comment."""

    text: str
    line: int
    col: int


def tokenize(source: str) -> tuple[list[Token], list[Pragma]]:
    tokens: list[Token] = []
    pragmas: list[Pragma] = []
    pos, line, line_start = 0, 1, 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if m is None:
            raise ParseError(f"unexpected character {source[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        text = m.group()
        col = pos - line_start + 1
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind == "comment":
            if text.startswith("%!"):
                pragmas.append(Pragma(text[2:].strip(), line, col))
        elif kind == "ws":
            pass
        elif kind == "atom" and text in KEYWORDS:
            tokens.append(Token("kw", text, line, col))
        else:
            tokens.append(Token(kind, text, line, col))
        pos = m.end()
    tokens.append(Token("eof", "", line, pos - line_start + 1))
    return tokens, pragmas


# ---------------------------------------------------------------------------
# Parser


class _Parser:
    def __init__(self, tokens: list[Token]):
        self.toks = tokens
        self.i = 0

    @property
    def tok(self) -> Token:
        return self.toks[self.i]

    def peek(self, k: int = 1) -> Token:
        return self.toks[min(self.i + k, len(self.toks) - 1)]

    def at(self, kind: str, text: Optional[str] = None) -> bool:
        t = self.tok
        return t.kind == kind and (text is None or t.text == text)

    def at_punct(self, text: str) -> bool:
        return self.at("punct", text)

    def advance(self) -> Token:
        t = self.tok
        self.i += 1
        return t

    def error(self, msg: str) -> ParseError:
        t = self.tok
        found = "end of input" if t.kind == "eof" else repr(t.text)
        return ParseError(f"{msg}, found {found}", t.line, t.col)

    def expect(self, kind: str, text: Optional[str] = None) -> Token:
        if not self.at(kind, text):
            raise self.error(f"expected {text or kind}")
        return self.advance()

    def span(self) -> Span:
        return Span(self.tok.line, self.tok.col)

    # program := seq ['.'] EOF
    def program(self) -> Expr:
        e = self.seq()
        if self.at_punct("."):
            self.advance()
        if not self.at("eof"):
            t = self.tok
            raise ParseError(f"unknown top-level form starting with {t.text!r}", t.line, t.col)
        return e

    def seq(self) -> Expr:
        sp = self.span()
        items = [self.seq_item()]
        while self.at_punct(","):
            self.advance()
            items.append(self.seq_item())
        if isinstance(items[-1], Bind):
            b = items[-1]
            raise ParseError("a binding must be followed by an expression",
                             b.span.line if b.span else 0, b.span.col if b.span else 0)
        if len(items) == 1:
            return items[0]
        return Seq(tuple(items), span=sp)

    def seq_item(self) -> Expr:
        sp = self.span()
        e = self.expr()
        if self.at_punct("="):
            self.advance()
            pat = self.expr_to_pattern(e)
            return Bind(pat, self.expr(), span=sp)
        return e

    def expr_to_pattern(self, e: Expr) -> Pattern:
        if isinstance(e, Var):
            if e.name == "_":
                return PWild(span=e.span)
            return PVar(e.name, span=e.span)
        if isinstance(e, Ctor):
            return PCtor(e.name, tuple(self.expr_to_pattern(a) for a in e.args), span=e.span)
        if isinstance(e, Tuple):
            return PTuple(tuple(self.expr_to_pattern(a) for a in e.items), span=e.span)
        if isinstance(e, ListLit):
            tail = self.expr_to_pattern(e.tail) if e.tail is not None else None
            return PList(tuple(self.expr_to_pattern(a) for a in e.items), tail, span=e.span)
        line, col = (e.span.line, e.span.col) if getattr(e, "span", None) else (0, 0)
        raise ParseError("left-hand side of '=' is not a pattern", line, col)

    def expr(self) -> Expr:
        e = self.primary()
        while self.at_punct("("):
            sp = self.span()
            args = self.arglist()
            e = App(e, args, span=getattr(e, "span", None) or sp)
        return e

    def arglist(self) -> tuple[Expr, ...]:
        self.expect("punct", "(")
        args: list[Expr] = []
        if not self.at_punct(")"):
            args.append(self.expr())
            while self.at_punct(","):
                self.advance()
                args.append(self.expr())
        self.expect("punct", ")")
        return tuple(args)

    def primary(self) -> Expr:
        t = self.tok
        sp = Span(t.line, t.col)
        if t.kind == "var":
            self.advance()
            return Var(t.text, span=sp)
        if t.kind == "wild":
            self.advance()
            return Var("_", span=sp)
        if t.kind == "atom":
            self.advance()
            if self.at_punct("("):
                return Ctor(t.text, self.arglist(), call=True, span=sp)
            return Ctor(t.text, (), span=sp)
        if t.kind == "punct":
            if t.text == "(":
                self.advance()
                e = self.seq()
                self.expect("punct", ")")
                return e
            if t.text == "{":
                self.advance()
                items: list[Expr] = []
                if not self.at_punct("}"):
                    items.append(self.expr())
                    while self.at_punct(","):
                        self.advance()
                        items.append(self.expr())
                self.expect("punct", "}")
                return Tuple(tuple(items), span=sp)
            if t.text == "[":
                self.advance()
                items = []
                tail = None
                if not self.at_punct("]"):
                    items.append(self.expr())
                    while self.at_punct(","):
                        self.advance()
                        items.append(self.expr())
                    if self.at_punct("|"):
                        self.advance()
                        tail = self.expr()
                self.expect("punct", "]")
                return ListLit(tuple(items), tail, span=sp)
        if t.kind == "kw":
            handler = getattr(self, f"kw_{t.text}", None)
            if handler is not None:
                self.advance()
                return handler(sp)
        raise self.error("expected an expression")

    def params(self) -> tuple[str, ...]:
        self.expect("punct", "(")
        names: list[str] = []
        if not self.at_punct(")"):
            names.append(self.param())
            while self.at_punct(","):
                self.advance()
                names.append(self.param())
        self.expect("punct", ")")
        return tuple(names)

    def param(self) -> str:
        if self.at("var") or self.at("wild"):
            return self.advance().text
        raise self.error("expected a parameter variable")

    def kw_fun(self, sp: Span) -> Expr:
        params = self.params()
        self.expect("arrow")
        return Fun(params, self.expr(), span=sp)

    def kw_letrec(self, sp: Span) -> Expr:
        bindings: list[tuple[str, Fun]] = []
        while not self.at("kw", "in"):
            if not (self.at("atom") or self.at("var")):
                raise self.error("expected a letrec binding name or 'in'")
            name_tok = self.advance()
            bsp = Span(name_tok.line, name_tok.col)
            if self.at_punct("("):
                params = self.params()
                self.expect("punct", "=")
                body = self.seq()
                fun = Fun(params, body, span=bsp)
            else:
                self.expect("punct", "=")
                fsp = self.span()
                self.expect("kw", "fun")
                params = self.params()
                self.expect("arrow")
                fun = Fun(params, self.seq(), span=fsp)
            self.expect("punct", ".")
            bindings.append((name_tok.text, fun))
        self.expect("kw", "in")
        if not bindings:
            raise ParseError("letrec without bindings", sp.line, sp.col)
        return Letrec(tuple(bindings), self.seq(), span=sp)

    def clauses(self) -> tuple[tuple[Pattern, Expr], ...]:
        out = [self.clause()]
        while self.at_punct(";"):
            self.advance()
            if self.at("kw", "end"):
                break
            out.append(self.clause())
        self.expect("kw", "end")
        return tuple(out)

    def clause(self) -> tuple[Pattern, Expr]:
        pat = self.pattern()
        self.expect("arrow")
        return pat, self.seq()

    def pattern(self) -> Pattern:
        t = self.tok
        sp = Span(t.line, t.col)
        if t.kind == "var":
            self.advance()
            return PVar(t.text, span=sp)
        if t.kind == "wild":
            self.advance()
            return PWild(span=sp)
        if t.kind == "atom":
            self.advance()
            args: tuple[Pattern, ...] = ()
            if self.at_punct("("):
                args = self.pattern_list(")")
            return PCtor(t.text, args, span=sp)
        if t.kind == "punct" and t.text == "{":
            return PTuple(self.pattern_list("}"), span=sp)
        if t.kind == "punct" and t.text == "[":
            self.advance()
            items: list[Pattern] = []
            tail = None
            if not self.at_punct("]"):
                items.append(self.pattern())
                while self.at_punct(","):
                    self.advance()
                    items.append(self.pattern())
                if self.at_punct("|"):
                    self.advance()
                    tail = self.pattern()
            self.expect("punct", "]")
            return PList(tuple(items), tail, span=sp)
        raise self.error("expected a pattern")

    def pattern_list(self, close: str) -> tuple[Pattern, ...]:
        self.advance()  # opening bracket
        items: list[Pattern] = []
        if not self.at_punct(close):
            items.append(self.pattern())
            while self.at_punct(","):
                self.advance()
                items.append(self.pattern())
        self.expect("punct", close)
        return tuple(items)

    def kw_case(self, sp: Span) -> Expr:
        scrut = self.expr()
        self.expect("kw", "of")
        return Case(scrut, self.clauses(), span=sp)

    def kw_receive(self, sp: Span) -> Expr:
        return Receive(self.clauses(), span=sp)

    def kw_send(self, sp: Span) -> Expr:
        self.expect("punct", "(")
        target = self.expr()
        self.expect("punct", ",")
        payload = self.expr()
        self.expect("punct", ")")
        return Send(target, payload, span=sp)

    def kw_spawn(self, sp: Span) -> Expr:
        self.expect("punct", "(")
        thunk = self.expr()
        self.expect("punct", ")")
        return Spawn(thunk, span=sp)

    def kw_self(self, sp: Span) -> Expr:
        self.expect("punct", "(")
        self.expect("punct", ")")
        return SelfPid(span=sp)

    def kw_choice(self, sp: Span) -> Expr:
        args = self.arglist()
        if not args:
            raise ParseError("choice needs at least one alternative", sp.line, sp.col)
        return Choice(args, span=sp)

    def kw_probe(self, sp: Span) -> Expr:
        self.expect("punct", "(")
        tag = self.expect("atom").text
        if self.at_punct(","):
            self.advance()
            body = self.seq()
        else:
            body = Ctor("ok", (), span=sp)
        self.expect("punct", ")")
        return Probe(tag, body, span=sp)


def parse(source: str) -> Expr:
    """Parse program text into a surface AST (sugar still present)."""
    tokens, _ = tokenize(source)
    return _Parser(tokens).program()


def parse_pattern(source: str) -> Pattern:
    tokens, _ = tokenize(source)
    p = _Parser(tokens)
    pat = p.pattern()
    if not p.at("eof"):
        raise p.error("trailing input after pattern")
    return pat


def pragmas(source: str) -> list[Pragma]:
    return tokenize(source)[1]


# ---------------------------------------------------------------------------
# Pretty printer (surface syntax; parse(pretty(e)) == e)


def pretty_pattern(p: Pattern) -> str:
    if isinstance(p, PVar):
        return p.name
    if isinstance(p, PWild):
        return "_"
    if isinstance(p, PCtor):
        if not p.args:
            return p.name
        return f"{p.name}({', '.join(pretty_pattern(a) for a in p.args)})"
    if isinstance(p, PTuple):
        return "{" + ", ".join(pretty_pattern(a) for a in p.items) + "}"
    if isinstance(p, PList):
        inner = ", ".join(pretty_pattern(a) for a in p.items)
        if p.tail is not None:
            inner += " | " + pretty_pattern(p.tail)
        return f"[{inner}]"
    raise TypeError(p)


def pretty(e: Expr) -> str:
    """Render an AST back to source text."""
    return _pp(e)


def _pp_clauses(clauses) -> str:
    return "; ".join(f"{pretty_pattern(p)} -> {_pp_seq(b)}" for p, b in clauses)


def _pp_seq(e: Expr) -> str:
    # a position that accepts a comma sequence without parentheses
    if isinstance(e, Seq):
        return ", ".join(_pp_item(i) for i in e.items)
    return _pp(e)


def _pp_item(e: Expr) -> str:
    if isinstance(e, Bind):
        return f"{pretty_pattern(e.pattern)} = {_pp(e.value)}"
    return _pp(e)


def _pp(e: Expr) -> str:
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Ctor):
        if not e.args and not e.call:
            return e.name
        return f"{e.name}({', '.join(_pp(a) for a in e.args)})"
    if isinstance(e, App):
        fn = _pp(e.fn)
        if not isinstance(e.fn, (Var, App)):
            fn = f"({fn})"
        return f"{fn}({', '.join(_pp(a) for a in e.args)})"
    if isinstance(e, Fun):
        return f"fun({', '.join(e.params)}) -> {_pp(e.body)}"
    if isinstance(e, Letrec):
        binds = " ".join(
            f"{name} = fun({', '.join(f.params)}) -> {_pp_seq(f.body)}." for name, f in e.bindings
        )
        return f"(letrec {binds} in {_pp_seq(e.body)})"
    if isinstance(e, Case):
        return f"case {_pp(e.scrutinee)} of {_pp_clauses(e.clauses)} end"
    if isinstance(e, Receive):
        return f"receive {_pp_clauses(e.clauses)} end"
    if isinstance(e, Send):
        return f"send({_pp(e.target)}, {_pp(e.payload)})"
    if isinstance(e, Spawn):
        return f"spawn({_pp(e.thunk)})"
    if isinstance(e, SelfPid):
        return "self()"
    if isinstance(e, Choice):
        return f"choice({', '.join(_pp(a) for a in e.thunks)})"
    if isinstance(e, Probe):
        return f"probe({e.tag}, {_pp_seq(e.body)})"
    if isinstance(e, Seq):
        return f"({_pp_seq(e)})"
    if isinstance(e, Bind):
        raise ValueError("a binding can only appear inside a sequence")
    if isinstance(e, Tuple):
        return "{" + ", ".join(_pp(a) for a in e.items) + "}"
    if isinstance(e, ListLit):
        inner = ", ".join(_pp(a) for a in e.items)
        if e.tail is not None:
            inner += " | " + _pp(e.tail)
        return f"[{inner}]"
    raise TypeError(e)


# ---------------------------------------------------------------------------
# Desugaring


def tuple_name(n: int) -> str:
    return f"tuple{n}"


class _Fresh:
    def __init__(self, prefix: str):
        self.prefix = prefix
        self.n = 0

    def __call__(self) -> str:
        self.n += 1
        return f"{self.prefix}@{self.n}"


def desugar(e: Expr) -> Expr:
    """Rewrite sequences, bindings, tuple/list literals and wildcards."""
    return _Desugar().expr(e)


class _Desugar:
    def __init__(self):
        self.fresh = _Fresh("_")

    def pattern(self, p: Pattern) -> Pattern:
        if isinstance(p, PWild):
            return PVar(self.fresh(), span=p.span)
        if isinstance(p, PVar):
            return p
        if isinstance(p, PCtor):
            return PCtor(p.name, tuple(self.pattern(a) for a in p.args), span=p.span)
        if isinstance(p, PTuple):
            return PCtor(tuple_name(len(p.items)), tuple(self.pattern(a) for a in p.items), span=p.span)
        if isinstance(p, PList):
            acc = self.pattern(p.tail) if p.tail is not None else PCtor("nil", (), span=p.span)
            for item in reversed(p.items):
                acc = PCtor("cons", (self.pattern(item), acc), span=p.span)
            return acc
        raise TypeError(p)

    def clauses(self, cs):
        return tuple((self.pattern(p), self.expr(b)) for p, b in cs)

    def expr(self, e: Expr) -> Expr:
        sp = getattr(e, "span", None)
        if isinstance(e, Var):
            return e
        if isinstance(e, Ctor):
            return Ctor(e.name, tuple(self.expr(a) for a in e.args), e.call, span=sp)
        if isinstance(e, App):
            return App(self.expr(e.fn), tuple(self.expr(a) for a in e.args), span=sp)
        if isinstance(e, Fun):
            params = tuple(self.fresh() if p == "_" else p for p in e.params)
            return Fun(params, self.expr(e.body), span=sp)
        if isinstance(e, Letrec):
            binds = tuple((n, self.expr(f)) for n, f in e.bindings)
            return Letrec(binds, self.expr(e.body), span=sp)
        if isinstance(e, Case):
            return Case(self.expr(e.scrutinee), self.clauses(e.clauses), span=sp)
        if isinstance(e, Receive):
            return Receive(self.clauses(e.clauses), span=sp)
        if isinstance(e, Send):
            return Send(self.expr(e.target), self.expr(e.payload), span=sp)
        if isinstance(e, Spawn):
            return Spawn(self.expr(e.thunk), span=sp)
        if isinstance(e, SelfPid):
            return e
        if isinstance(e, Choice):
            return Choice(tuple(self.expr(a) for a in e.thunks), span=sp)
        if isinstance(e, Probe):
            return Probe(e.tag, self.expr(e.body), span=sp)
        if isinstance(e, Tuple):
            return Ctor(tuple_name(len(e.items)), tuple(self.expr(a) for a in e.items), span=sp)
        if isinstance(e, ListLit):
            acc = self.expr(e.tail) if e.tail is not None else Ctor("nil", (), span=sp)
            for item in reversed(e.items):
                acc = Ctor("cons", (self.expr(item), acc), span=sp)
            return acc
        if isinstance(e, Seq):
            return self.sequence(list(e.items))
        if isinstance(e, Bind):
            raise ParseError("a binding must be followed by an expression")
        raise TypeError(e)

    def sequence(self, items: list[Expr]) -> Expr:
        head, rest = items[0], items[1:]
        if not rest:
            return self.expr(head)
        tail = self.sequence(rest)
        sp = getattr(head, "span", None)
        if isinstance(head, Bind):
            pat = self.pattern(head.pattern)
            value = self.expr(head.value)
            if isinstance(pat, PVar):
                return App(Fun((pat.name,), tail, span=sp), (value,), span=sp)
            return Case(value, ((pat, tail),), span=sp)
        return App(Fun((self.fresh(),), tail, span=sp), (self.expr(head),), span=sp)


# ---------------------------------------------------------------------------
# Normalization


@dataclass
class Program:
    """A closed, normalized, labelled program."""

    root: Expr
    sigma: dict[str, int]
    probes: dict[str, int]
    nodes: list[Expr]
    pragmas: list[Pragma] = field(default_factory=list)
    source: str = ""

    def node(self, label: int) -> Expr:
        return self.nodes[label]

    def __len__(self) -> int:
        return len(self.nodes)

    @cached_property
    def fv(self) -> tuple[frozenset[str], ...]:
        return tuple(free_vars(n) for n in self.nodes)

    @cached_property
    def parent(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for n in self.nodes:
            for c in children(n):
                out[c.label] = n.label
        return out

    @cached_property
    def probe_tag(self) -> dict[int, str]:
        return {label: tag for tag, label in self.probes.items()}

    @cached_property
    def spawn_labels(self) -> list[int]:
        return [n.label for n in self.nodes if isinstance(n, Spawn)]

    def enclosing_probes(self, label: int) -> list[str]:
        """Probe tags of the probe expressions lexically enclosing ``label``."""
        tags = []
        cur = self.parent.get(label)
        while cur is not None:
            node = self.nodes[cur]
            if isinstance(node, Probe):
                tags.append(node.tag)
            cur = self.parent.get(cur)
        return tags

    @cached_property
    def max_receive_depth(self) -> int:
        depths = [
            pattern_depth(p)
            for n in self.nodes if isinstance(n, Receive)
            for p, _ in n.clauses
        ]
        return max(depths, default=0)

    def span(self, label: int) -> Optional[Span]:
        return getattr(self.nodes[label], "span", None)

    def describe(self, label: int) -> str:
        """Short human-readable description of a node, e.g. ``receive@12:5``."""
        node = self.nodes[label]
        kind = {
            Var: "var", Ctor: "ctor", App: "app", Fun: "fun", Letrec: "letrec",
            Case: "case", Receive: "receive", Send: "send", Spawn: "spawn",
            SelfPid: "self", Choice: "choice", Probe: "probe",
        }[type(node)]
        if isinstance(node, Var):
            kind = f"var {node.name}"
        elif isinstance(node, Ctor):
            kind = node.name
        elif isinstance(node, Probe):
            kind = f"probe {node.tag}"
        sp = self.span(label)
        return f"{kind}@{sp}" if sp else kind


def normalize(e: Expr, *, source: str = "", pragmas_: Optional[list[Pragma]] = None) -> Program:
    """Resolve names, rename binders apart, ANF-convert and label a desugared AST."""
    counts: dict[str, int] = {}
    _Resolver(counts=counts).expr(e, {})
    resolved = _Resolver(counts=counts, rename=True).expr(e, {})
    free = sorted(free_vars(resolved))
    if free:
        raise FreeVariable(free[0], _first_use(resolved, free[0]))
    anf = _Anf().expr(resolved)
    labeller = _Labeller()
    root = labeller.expr(anf)
    nodes = labeller.nodes
    sigma: dict[str, int] = {}
    first_use: dict[str, Optional[Span]] = {}

    def note_ctor(name: str, arity: int, span: Optional[Span]) -> None:
        if name in sigma and sigma[name] != arity:
            raise UnknownArity(name, (sigma[name], arity), span)
        sigma.setdefault(name, arity)
        first_use.setdefault(name, span)

    def note_pattern(p: Pattern) -> None:
        if isinstance(p, PCtor):
            note_ctor(p.name, len(p.args), p.span)
            for a in p.args:
                note_pattern(a)

    probes: dict[str, int] = {}
    for n in nodes:
        if isinstance(n, Ctor):
            note_ctor(n.name, len(n.args), n.span)
        elif isinstance(n, (Case, Receive)):
            for p, _ in n.clauses:
                note_pattern(p)
        elif isinstance(n, Probe):
            if n.tag in probes:
                sp = n.span or Span(0, 0)
                raise DuplicateProbe(f"probe tag {n.tag} used twice", sp.line, sp.col)
            probes[n.tag] = n.label
    return Program(root, sigma, probes, nodes, list(pragmas_ or []), source)


def _first_use(e: Expr, name: str) -> Optional[Span]:
    for n in walk(e):
        if isinstance(n, Var) and n.name == name:
            return n.span
    return None


class _Resolver:
    """Scope walk: letrec-bound lowercase names, pattern refs, binder renaming.

    The first pass (``rename=False``) counts binder sites per name; the second
    renames names bound at more than one site to ``name#k``.
    """

    def __init__(self, counts: dict[str, int], rename: bool = False):
        self.counts = counts
        self.rename = rename
        self.seen: dict[str, int] = {}

    def bind(self, name: str) -> str:
        if not self.rename:
            self.counts[name] = self.counts.get(name, 0) + 1
            return name
        if self.counts.get(name, 0) <= 1:
            return name
        k = self.seen.get(name, 0) + 1
        self.seen[name] = k
        return f"{name}#{k}"

    def pattern(self, p: Pattern, env: dict[str, str], local: dict[str, str]) -> Pattern:
        if isinstance(p, PVar):
            if p.name in local:
                return PVar(local[p.name], span=p.span)
            if p.name in env:
                return PVar(env[p.name], ref=True, span=p.span)
            local[p.name] = self.bind(p.name)
            return PVar(local[p.name], span=p.span)
        if isinstance(p, PCtor):
            return PCtor(p.name, tuple(self.pattern(a, env, local) for a in p.args), span=p.span)
        raise TypeError(p)

    def clauses(self, cs, env):
        out = []
        for pat, body in cs:
            local: dict[str, str] = {}
            new_pat = self.pattern(pat, env, local)
            out.append((new_pat, self.expr(body, {**env, **local})))
        return tuple(out)

    def expr(self, e: Expr, env: dict[str, str]) -> Expr:
        sp = getattr(e, "span", None)
        if isinstance(e, Var):
            return Var(env.get(e.name, e.name), span=sp)
        if isinstance(e, Ctor):
            args = tuple(self.expr(a, env) for a in e.args)
            if e.name in env:
                if e.call:
                    return App(Var(env[e.name], span=sp), args, span=sp)
                return Var(env[e.name], span=sp)
            return Ctor(e.name, args, e.call, span=sp)
        if isinstance(e, App):
            return App(self.expr(e.fn, env), tuple(self.expr(a, env) for a in e.args), span=sp)
        if isinstance(e, Fun):
            if len(set(e.params)) != len(e.params):
                line, col = (sp.line, sp.col) if sp else (0, 0)
                raise SyntaxErrorAt("duplicate parameter name", line, col)
            inner = dict(env)
            params = []
            for p in e.params:
                inner[p] = self.bind(p)
                params.append(inner[p])
            return Fun(tuple(params), self.expr(e.body, inner), span=sp)
        if isinstance(e, Letrec):
            inner = dict(env)
            for name, _ in e.bindings:
                inner[name] = self.bind(name)
            binds = tuple((inner[n], self.expr(f, inner)) for n, f in e.bindings)
            return Letrec(binds, self.expr(e.body, inner), span=sp)
        if isinstance(e, Case):
            return Case(self.expr(e.scrutinee, env), self.clauses(e.clauses, env), span=sp)
        if isinstance(e, Receive):
            return Receive(self.clauses(e.clauses, env), span=sp)
        if isinstance(e, Send):
            return Send(self.expr(e.target, env), self.expr(e.payload, env), span=sp)
        if isinstance(e, Spawn):
            return Spawn(self.expr(e.thunk, env), span=sp)
        if isinstance(e, SelfPid):
            return e
        if isinstance(e, Choice):
            return Choice(tuple(self.expr(a, env) for a in e.thunks), span=sp)
        if isinstance(e, Probe):
            return Probe(e.tag, self.expr(e.body, env), span=sp)
        raise TypeError(f"unexpected {type(e).__name__} after desugaring")


class _Anf:
    """Make constructor arguments and case scrutinees variables; wrap choice
    alternatives in zero-argument applications."""

    def __init__(self):
        self.fresh = _Fresh("V")

    def expr(self, e: Expr) -> Expr:
        sp = getattr(e, "span", None)
        if isinstance(e, (Var, SelfPid)):
            return e
        if isinstance(e, Ctor):
            args = [self.expr(a) for a in e.args]
            pending: list[tuple[str, Expr]] = []
            simple: list[Expr] = []
            for a in args:
                if isinstance(a, Var):
                    simple.append(a)
                else:
                    v = self.fresh()
                    pending.append((v, a))
                    simple.append(Var(v, span=getattr(a, "span", sp)))
            out: Expr = Ctor(e.name, tuple(simple), span=sp)
            for v, a in reversed(pending):
                out = App(Fun((v,), out, span=sp), (a,), span=sp)
            return out
        if isinstance(e, App):
            return App(self.expr(e.fn), tuple(self.expr(a) for a in e.args), span=sp)
        if isinstance(e, Fun):
            return Fun(e.params, self.expr(e.body), span=sp)
        if isinstance(e, Letrec):
            return Letrec(tuple((n, self.expr(f)) for n, f in e.bindings), self.expr(e.body), span=sp)
        if isinstance(e, Case):
            clauses = tuple((p, self.expr(b)) for p, b in e.clauses)
            scrut = self.expr(e.scrutinee)
            if isinstance(scrut, Var):
                return Case(scrut, clauses, span=sp)
            v = self.fresh()
            return App(Fun((v,), Case(Var(v, span=sp), clauses, span=sp), span=sp), (scrut,), span=sp)
        if isinstance(e, Receive):
            return Receive(tuple((p, self.expr(b)) for p, b in e.clauses), span=sp)
        if isinstance(e, Send):
            return Send(self.expr(e.target), self.expr(e.payload), span=sp)
        if isinstance(e, Spawn):
            return Spawn(self.expr(e.thunk), span=sp)
        if isinstance(e, Choice):
            return Choice(
                tuple(App(self.expr(a), (), span=getattr(a, "span", sp)) for a in e.thunks), span=sp
            )
        if isinstance(e, Probe):
            return Probe(e.tag, self.expr(e.body), span=sp)
        raise TypeError(e)


class _Labeller:
    def __init__(self):
        self.nodes: list[Expr] = []

    def expr(self, e: Expr) -> Expr:
        label = len(self.nodes)
        self.nodes.append(e)  # placeholder, replaced below
        if isinstance(e, (Var, SelfPid)):
            out = replace(e, label=label)
        elif isinstance(e, Ctor):
            out = replace(e, args=tuple(self.expr(a) for a in e.args), label=label)
        elif isinstance(e, App):
            fn = self.expr(e.fn)
            out = replace(e, fn=fn, args=tuple(self.expr(a) for a in e.args), label=label)
        elif isinstance(e, Fun):
            out = replace(e, body=self.expr(e.body), label=label)
        elif isinstance(e, Letrec):
            binds = tuple((n, self.expr(f)) for n, f in e.bindings)
            out = replace(e, bindings=binds, body=self.expr(e.body), label=label)
        elif isinstance(e, Case):
            scrut = self.expr(e.scrutinee)
            out = replace(e, scrutinee=scrut,
                          clauses=tuple((p, self.expr(b)) for p, b in e.clauses), label=label)
        elif isinstance(e, Receive):
            out = replace(e, clauses=tuple((p, self.expr(b)) for p, b in e.clauses), label=label)
        elif isinstance(e, Send):
            target = self.expr(e.target)
            out = replace(e, target=target, payload=self.expr(e.payload), label=label)
        elif isinstance(e, Spawn):
            out = replace(e, thunk=self.expr(e.thunk), label=label)
        elif isinstance(e, Choice):
            out = replace(e, thunks=tuple(self.expr(a) for a in e.thunks), label=label)
        elif isinstance(e, Probe):
            out = replace(e, body=self.expr(e.body), label=label)
        else:
            raise TypeError(e)
        self.nodes[label] = out
        return out


def validate(e: Expr) -> list[SyntaxErrorAt]:
    """Report problems that would stop normalization, without raising."""
    errors: list[SyntaxErrorAt] = []
    try:
        d = desugar(e)
        counts: dict[str, int] = {}
        resolved = _Resolver(counts=counts).expr(d, {})
        for name in sorted(free_vars(resolved)):
            errors.append(FreeVariable(name, _first_use(resolved, name)))
        if not errors:
            normalize(d)
    except SyntaxErrorAt as exc:
        errors.append(exc)
    return errors


def load(source: str) -> Program:
    """parse, desugar and normalize in one go."""
    tokens, prag = tokenize(source)
    ast = _Parser(tokens).program()
    return normalize(desugar(ast), source=source, pragmas_=prag)
