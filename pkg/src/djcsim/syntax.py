"""Abstract syntax, surface parser, printer and static checks for DJC programs."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Union

# ---------------------------------------------------------------------------
# Values


@dataclass(frozen=True, slots=True)
class Ref:
    id: int


@dataclass(frozen=True, slots=True)
class Nat:
    n: int


@dataclass(frozen=True, slots=True)
class Bool:
    b: bool


@dataclass(frozen=True, slots=True)
class Unit:
    pass


@dataclass(frozen=True, slots=True)
class Null:
    pass


Value = Union[Ref, Nat, Bool, Unit, Null]

UNIT = Unit()
NULL = Null()
TRUE = Bool(True)
FALSE = Bool(False)

PRIM_TYPES = ("Bool", "Nat", "Unit")
INTRINSICS = ("start", "join", "interrupt", "interrupted")
PRIMS = {"eq": 2, "succ": 1, "pred": 1}


def value_text(v: Value) -> str:
    """Render a value the way trace records and reports spell it."""
    if isinstance(v, Ref):
        return f"r{v.id}"
    if isinstance(v, Nat):
        return str(v.n)
    if isinstance(v, Bool):
        return "true" if v.b else "false"
    if isinstance(v, Unit):
        return "()"
    return "null"


def parse_value_text(s: str) -> Value:
    if s == "()":
        return UNIT
    if s == "true":
        return TRUE
    if s == "false":
        return FALSE
    if s == "null":
        return NULL
    if s.startswith("r") and s[1:].isdigit():
        return Ref(int(s[1:]))
    if s.isdigit():
        return Nat(int(s))
    raise ValueError(f"bad value literal {s!r}")


def default_value(type_tag: str) -> Value:
    if type_tag == "Nat":
        return Nat(0)
    if type_tag == "Bool":
        return FALSE
    if type_tag == "Unit":
        return UNIT
    return NULL


# ---------------------------------------------------------------------------
# Expressions

Pos = tuple[int, int]


@dataclass(frozen=True, slots=True)
class Var:
    name: str
    pos: Pos | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True, slots=True)
class Lit:
    value: Value
    pos: Pos | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True, slots=True)
class New:
    cls: str
    args: tuple
    pos: Pos | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True, slots=True)
class GetField:
    target: object
    field: str
    pos: Pos | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True, slots=True)
class SetField:
    target: object
    field: str
    value: object
    pos: Pos | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True, slots=True)
class Let:
    name: str
    type: str
    bound: object
    body: object
    pos: Pos | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True, slots=True)
class If:
    cond: object
    then: object
    orelse: object
    pos: Pos | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True, slots=True)
class Call:
    target: object
    method: str
    args: tuple
    pos: Pos | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True, slots=True)
class MonitorEnter:
    target: object
    pos: Pos | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True, slots=True)
class MonitorExit:
    target: object
    pos: Pos | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True, slots=True)
class Intrinsic:
    op: str
    target: object
    pos: Pos | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True, slots=True)
class Prim:
    op: str
    args: tuple
    pos: Pos | None = field(default=None, compare=False, repr=False)


Expr = Union[Var, Lit, New, GetField, SetField, Let, If, Call, MonitorEnter, MonitorExit, Intrinsic, Prim]


def is_value(e: object) -> bool:
    return type(e) is Lit


# ---------------------------------------------------------------------------
# Declarations


@dataclass(frozen=True, slots=True)
class FieldDecl:
    name: str
    type: str
    volatile: bool = False


@dataclass(frozen=True, slots=True)
class MethodDef:
    name: str
    params: tuple[tuple[str, str], ...]
    ret: str
    body: object
    pos: Pos | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class ClassDef:
    name: str
    fields: tuple[FieldDecl, ...]
    ctor: object | None
    methods: tuple[MethodDef, ...]
    pos: Pos | None = field(default=None, compare=False, repr=False)

    def field_names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.fields)

    def get_field(self, name: str) -> FieldDecl | None:
        for f in self.fields:
            if f.name == name:
                return f
        return None

    def get_method(self, name: str) -> MethodDef | None:
        for m in self.methods:
            if m.name == name:
                return m
        return None

    @property
    def is_thread(self) -> bool:
        return self.get_method("run") is not None

    def constructor(self) -> object:
        """The constructor body; a class without `init` copies each argument into its field."""
        if self.ctor is not None:
            return self.ctor
        body: object = Lit(UNIT)
        for f in reversed(self.fields):
            assign = SetField(Var("this"), f.name, Var(f.name))
            body = assign if isinstance(body, Lit) else Let("_", "Unit", assign, body)
        return body


@dataclass(frozen=True)
class Program:
    classes: tuple[ClassDef, ...]
    _index: dict = field(default=None, init=False, compare=False, repr=False, hash=False)

    def __post_init__(self) -> None:
        index: dict[str, ClassDef] = {}
        for c in self.classes:
            index.setdefault(c.name, c)
        object.__setattr__(self, "_index", index)

    def cls(self, name: str) -> ClassDef | None:
        return self._index.get(name)

    def __hash__(self) -> int:
        return hash(self.classes)


class ParseError(Exception):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"{line}:{col}: {message}")
        self.line = line
        self.col = col
        self.message = message


class LookupFailure(Exception):
    pass


def lookup_method(p: Program, class_name: str, method: str) -> MethodDef:
    c = p.cls(class_name)
    if c is None:
        raise LookupFailure(f"no class {class_name}")
    m = c.get_method(method)
    if m is None:
        raise LookupFailure(f"class {class_name} has no method {method}")
    return m


# ---------------------------------------------------------------------------
# Tokenizer

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+) |
    (?P<nl>\n) |
    (?P<comment>//[^\n]*) |
    (?P<ref>\#[0-9]+) |
    (?P<nat>[0-9]+) |
    (?P<name>[A-Za-z_][A-Za-z0-9_]*) |
    (?P<sym>:=|[{}();:,.=])
    """,
    re.VERBOSE,
)


@dataclass(slots=True)
class Token:
    kind: str  # name, nat, ref, sym, eof
    text: str
    line: int
    col: int


def tokenize(text: str) -> list[Token]:
    tokens: list[Token] = []
    line, line_start, i = 1, 0, 0
    while i < len(text):
        m = _TOKEN_RE.match(text, i)
        if m is None:
            raise ParseError(f"unexpected character {text[i]!r}", line, i - line_start + 1)
        kind = m.lastgroup
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind not in ("ws", "comment"):
            tokens.append(Token(kind, m.group(), line, i - line_start + 1))
        i = m.end()
    tokens.append(Token("eof", "", line, i - line_start + 1))
    return tokens


KEYWORDS = {"class", "volatile", "init", "let", "in", "if", "then", "else", "new", "this", "true", "false", "null"}


class _Parser:
    def __init__(self, text: str):
        self.toks = tokenize(text)
        self.i = 0

    @property
    def tok(self) -> Token:
        return self.toks[self.i]

    def peek(self, k: int = 1) -> Token:
        return self.toks[min(self.i + k, len(self.toks) - 1)]

    def fail(self, msg: str, tok: Token | None = None) -> ParseError:
        t = tok or self.tok
        return ParseError(msg, t.line, t.col)

    def at(self, text: str) -> bool:
        t = self.tok
        return t.text == text and t.kind in ("sym", "name")

    def expect(self, text: str) -> Token:
        if not self.at(text):
            got = self.tok.text or "end of input"
            raise self.fail(f"expected {text!r}, got {got!r}")
        t = self.tok
        self.i += 1
        return t

    def name(self, what: str = "name") -> Token:
        t = self.tok
        if t.kind != "name" or t.text in KEYWORDS:
            raise self.fail(f"expected {what}, got {t.text or 'end of input'!r}")
        self.i += 1
        return t

    def type_tag(self) -> str:
        return self.name("type").text

    # program structure

    def program(self) -> Program:
        classes = []
        while self.tok.kind != "eof":
            classes.append(self.class_def())
        return Program(tuple(classes))

    def class_def(self) -> ClassDef:
        start = self.expect("class")
        cname = self.name("class name").text
        self.expect("{")
        fields: list[FieldDecl] = []
        ctor = None
        methods: list[MethodDef] = []
        while True:
            if self.at("volatile") or (self.tok.kind == "name" and self.peek().text == ":" and not methods and ctor is None):
                vol = False
                if self.at("volatile"):
                    self.i += 1
                    vol = True
                fname = self.name("field name").text
                self.expect(":")
                ftype = self.type_tag()
                self.expect(";")
                fields.append(FieldDecl(fname, ftype, vol))
            elif self.at("init") and ctor is None and not methods:
                self.i += 1
                self.expect("=")
                ctor = self.expr()
                self.expect(";")
            else:
                break
        while not self.at("}"):
            methods.append(self.method())
            if self.at(";"):
                self.i += 1
        self.expect("}")
        return ClassDef(cname, tuple(fields), ctor, tuple(methods), (start.line, start.col))

    def method(self) -> MethodDef:
        t = self.name("method name")
        self.expect("(")
        params: list[tuple[str, str]] = []
        if not self.at(")"):
            while True:
                pname = self.name("parameter name").text
                self.expect(":")
                params.append((pname, self.type_tag()))
                if not self.at(","):
                    break
                self.i += 1
        self.expect(")")
        self.expect(":")
        ret = self.type_tag()
        self.expect("=")
        body = self.expr()
        return MethodDef(t.text, tuple(params), ret, body, (t.line, t.col))

    # expressions

    def expr(self) -> object:
        t = self.tok
        pos = (t.line, t.col)
        if self.at("let"):
            self.i += 1
            name = self.name("variable").text
            self.expect(":")
            ty = self.type_tag()
            self.expect("=")
            bound = self.expr()
            self.expect("in")
            body = self.expr()
            return Let(name, ty, bound, body, pos)
        if self.at("if"):
            self.i += 1
            cond = self.expr()
            self.expect("then")
            then = self.expr()
            self.expect("else")
            orelse = self.expr()
            return If(cond, then, orelse, pos)
        e = self.postfix()
        if self.at(":="):
            if not isinstance(e, GetField):
                raise self.fail("left side of ':=' must be a field access")
            self.i += 1
            value = self.expr()
            return SetField(e.target, e.field, value, e.pos)
        return e

    def args(self) -> tuple:
        self.expect("(")
        out = []
        if not self.at(")"):
            while True:
                out.append(self.expr())
                if not self.at(","):
                    break
                self.i += 1
        self.expect(")")
        return tuple(out)

    def postfix(self) -> object:
        e = self.primary()
        while self.at("."):
            self.i += 1
            t = self.tok
            pos = (t.line, t.col)
            if t.kind != "name":
                raise self.fail("expected member name after '.'")
            self.i += 1
            if t.text == "monitorenter":
                e = MonitorEnter(e, pos)
            elif t.text == "monitorexit":
                e = MonitorExit(e, pos)
            elif self.at("("):
                args = self.args()
                if t.text in INTRINSICS:
                    if args:
                        raise ParseError(f"{t.text}() takes no arguments", t.line, t.col)
                    e = Intrinsic(t.text, e, pos)
                else:
                    e = Call(e, t.text, args, pos)
            else:
                e = GetField(e, t.text, pos)
        return e

    def primary(self) -> object:
        t = self.tok
        pos = (t.line, t.col)
        if t.kind == "nat":
            self.i += 1
            return Lit(Nat(int(t.text)), pos)
        if t.kind == "ref":
            self.i += 1
            return Lit(Ref(int(t.text[1:])), pos)
        if self.at("("):
            if self.peek().text == ")":
                self.i += 2
                return Lit(UNIT, pos)
            self.i += 1
            e = self.expr()
            self.expect(")")
            return e
        if self.at("{"):
            self.i += 1
            items = [self.expr()]
            while self.at(";"):
                self.i += 1
                if self.at("}"):
                    break
                items.append(self.expr())
            self.expect("}")
            body = items[-1]
            for item in reversed(items[:-1]):
                body = Let("_", "Unit", item, body, pos)
            return body
        if t.kind == "name":
            if t.text == "true":
                self.i += 1
                return Lit(TRUE, pos)
            if t.text == "false":
                self.i += 1
                return Lit(FALSE, pos)
            if t.text == "null":
                self.i += 1
                return Lit(NULL, pos)
            if t.text == "this":
                self.i += 1
                return Var("this", pos)
            if t.text == "new":
                self.i += 1
                cname = self.name("class name").text
                return New(cname, self.args(), pos)
            if t.text in PRIMS and self.peek().text == "(":
                self.i += 1
                return Prim(t.text, self.args(), pos)
            if t.text not in KEYWORDS:
                self.i += 1
                return Var(t.text, pos)
        raise self.fail(f"unexpected {t.text or 'end of input'!r}")


def parse_program(text: str) -> Program:
    return _Parser(text).program()


def parse_expr(text: str) -> object:
    p = _Parser(text)
    e = p.expr()
    if p.tok.kind != "eof":
        raise p.fail(f"trailing input {p.tok.text!r}")
    return e


# ---------------------------------------------------------------------------
# Printer

_LOW = (Let, If, SetField)


def _wrap(e: object) -> str:
    s = print_expr(e)
    return f"({s})" if isinstance(e, _LOW) else s


def _lit_source(v: Value) -> str:
    if isinstance(v, Ref):
        return f"#{v.id}"
    return value_text(v)


def print_expr(e: object) -> str:
    t = type(e)
    if t is Var:
        return e.name
    if t is Lit:
        return _lit_source(e.value)
    if t is New:
        return f"new {e.cls}({', '.join(print_expr(a) for a in e.args)})"
    if t is GetField:
        return f"{_wrap(e.target)}.{e.field}"
    if t is SetField:
        return f"{_wrap(e.target)}.{e.field} := {print_expr(e.value)}"
    if t is Let:
        return f"let {e.name} : {e.type} = {print_expr(e.bound)} in {print_expr(e.body)}"
    if t is If:
        return f"if {print_expr(e.cond)} then {print_expr(e.then)} else {print_expr(e.orelse)}"
    if t is Call:
        return f"{_wrap(e.target)}.{e.method}({', '.join(print_expr(a) for a in e.args)})"
    if t is MonitorEnter:
        return f"{_wrap(e.target)}.monitorenter"
    if t is MonitorExit:
        return f"{_wrap(e.target)}.monitorexit"
    if t is Intrinsic:
        return f"{_wrap(e.target)}.{e.op}()"
    if t is Prim:
        return f"{e.op}({', '.join(print_expr(a) for a in e.args)})"
    raise TypeError(f"not an expression: {e!r}")


def print_program(p: Program) -> str:
    out = []
    for c in p.classes:
        out.append(f"class {c.name} {{")
        for f in c.fields:
            out.append(f"  {'volatile ' if f.volatile else ''}{f.name}: {f.type};")
        if c.ctor is not None:
            out.append(f"  init = {print_expr(c.ctor)};")
        for m in c.methods:
            params = ", ".join(f"{n}: {ty}" for n, ty in m.params)
            out.append(f"  {m.name}({params}): {m.ret} = {print_expr(m.body)}")
        out.append("}")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# Substitution and traversal


def substitute(e: object, bindings: dict[str, object]) -> object:
    """Replace free occurrences of names by values; binders shadow."""
    if not bindings:
        return e
    t = type(e)
    if t is Var:
        v = bindings.get(e.name)
        if v is None:
            return e
        return v if type(v) is Lit else Lit(v)
    if t is Lit:
        return e
    if t is Let:
        bound = substitute(e.bound, bindings)
        if e.name in bindings:
            inner = {k: v for k, v in bindings.items() if k != e.name}
        else:
            inner = bindings
        return Let(e.name, e.type, bound, substitute(e.body, inner), e.pos)
    if t is GetField:
        return GetField(substitute(e.target, bindings), e.field, e.pos)
    if t is SetField:
        return SetField(substitute(e.target, bindings), e.field, substitute(e.value, bindings), e.pos)
    if t is If:
        return If(substitute(e.cond, bindings), substitute(e.then, bindings), substitute(e.orelse, bindings), e.pos)
    if t is Call:
        return Call(substitute(e.target, bindings), e.method, tuple(substitute(a, bindings) for a in e.args), e.pos)
    if t is New:
        return New(e.cls, tuple(substitute(a, bindings) for a in e.args), e.pos)
    if t is Prim:
        return Prim(e.op, tuple(substitute(a, bindings) for a in e.args), e.pos)
    if t is MonitorEnter:
        return MonitorEnter(substitute(e.target, bindings), e.pos)
    if t is MonitorExit:
        return MonitorExit(substitute(e.target, bindings), e.pos)
    if t is Intrinsic:
        return Intrinsic(e.op, substitute(e.target, bindings), e.pos)
    raise TypeError(f"not an expression: {e!r}")


def children(e: object) -> tuple:
    t = type(e)
    if t in (Var, Lit):
        return ()
    if t is Let:
        return (e.bound, e.body)
    if t is GetField:
        return (e.target,)
    if t is SetField:
        return (e.target, e.value)
    if t is If:
        return (e.cond, e.then, e.orelse)
    if t is Call:
        return (e.target,) + e.args
    if t in (New, Prim):
        return e.args
    return (e.target,)


def walk(e: object) -> Iterator[object]:
    stack = [e]
    while stack:
        x = stack.pop()
        yield x
        stack.extend(reversed(children(x)))


def binders(e: object) -> list[str]:
    return sorted(x.name for x in walk(e) if type(x) is Let)


def size(e: object) -> int:
    return sum(1 for _ in walk(e))


# ---------------------------------------------------------------------------
# Redex decomposition (evaluation contexts)


def _ident(x: object) -> object:
    return x


def decompose(e: object) -> tuple[object, Callable[[object], object]]:
    """Split `e` into its active redex and a function plugging a replacement back.

    Argument lists go left to right; a call's target is evaluated after its
    arguments, and a field assignment evaluates its right-hand side first.
    A value decomposes to itself.
    """
    t = type(e)
    if t is Let:
        if type(e.bound) is not Lit:
            r, plug = decompose(e.bound)
            return r, lambda x: Let(e.name, e.type, plug(x), e.body, e.pos)
        return e, _ident
    if t is If:
        if type(e.cond) is not Lit:
            r, plug = decompose(e.cond)
            return r, lambda x: If(plug(x), e.then, e.orelse, e.pos)
        return e, _ident
    if t is GetField:
        if type(e.target) is not Lit:
            r, plug = decompose(e.target)
            return r, lambda x: GetField(plug(x), e.field, e.pos)
        return e, _ident
    if t is SetField:
        if type(e.value) is not Lit:
            r, plug = decompose(e.value)
            return r, lambda x: SetField(e.target, e.field, plug(x), e.pos)
        if type(e.target) is not Lit:
            r, plug = decompose(e.target)
            return r, lambda x: SetField(plug(x), e.field, e.value, e.pos)
        return e, _ident
    if t is Call:
        for i, a in enumerate(e.args):
            if type(a) is not Lit:
                r, plug = decompose(a)
                return r, lambda x, i=i, plug=plug: Call(e.target, e.method, e.args[:i] + (plug(x),) + e.args[i + 1:], e.pos)
        if type(e.target) is not Lit:
            r, plug = decompose(e.target)
            return r, lambda x: Call(plug(x), e.method, e.args, e.pos)
        return e, _ident
    if t is New or t is Prim:
        for i, a in enumerate(e.args):
            if type(a) is not Lit:
                r, plug = decompose(a)
                if t is New:
                    return r, lambda x, i=i, plug=plug: New(e.cls, e.args[:i] + (plug(x),) + e.args[i + 1:], e.pos)
                return r, lambda x, i=i, plug=plug: Prim(e.op, e.args[:i] + (plug(x),) + e.args[i + 1:], e.pos)
        return e, _ident
    if t is MonitorEnter or t is MonitorExit or t is Intrinsic:
        if type(e.target) is not Lit:
            r, plug = decompose(e.target)
            if t is MonitorEnter:
                return r, lambda x: MonitorEnter(plug(x), e.pos)
            if t is MonitorExit:
                return r, lambda x: MonitorExit(plug(x), e.pos)
            return r, lambda x: Intrinsic(e.op, plug(x), e.pos)
        return e, _ident
    return e, _ident


def eval_prim(op: str, args: tuple[Value, ...]) -> Value | None:
    """Evaluate a builtin; None means the arguments are ill-typed (stuck)."""
    if op == "eq":
        return Bool(args[0] == args[1])
    (a,) = args
    if not isinstance(a, Nat):
        return None
    if op == "succ":
        return Nat(a.n + 1)
    return Nat(max(a.n - 1, 0))


# ---------------------------------------------------------------------------
# Validation


@dataclass(frozen=True, slots=True)
class Violation:
    kind: str
    message: str
    where: str

    def __str__(self) -> str:
        return f"{self.where}: {self.kind}: {self.message}"


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    def __bool__(self) -> bool:
        return bool(self.violations)

    def __len__(self) -> int:
        return len(self.violations)

    def __iter__(self) -> Iterator[Violation]:
        return iter(self.violations)

    def kinds(self) -> list[str]:
        return [v.kind for v in self.violations]


class ValidationError(Exception):
    def __init__(self, report: ValidationReport):
        super().__init__("; ".join(str(v) for v in report))
        self.report = report


def _static_type(p: Program, e: object, env: dict[str, str]) -> str | None:
    t = type(e)
    if t is Var:
        return env.get(e.name)
    if t is Lit:
        v = e.value
        if isinstance(v, Nat):
            return "Nat"
        if isinstance(v, Bool):
            return "Bool"
        if isinstance(v, Unit):
            return "Unit"
        return None
    if t is New:
        return e.cls
    if t is GetField:
        c = p.cls(_static_type(p, e.target, env) or "")
        f = c.get_field(e.field) if c else None
        return f.type if f else None
    if t is SetField:
        return _static_type(p, e.value, env)
    if t is Call:
        c = p.cls(_static_type(p, e.target, env) or "")
        m = c.get_method(e.method) if c else None
        return m.ret if m else None
    if t is Let:
        return _static_type(p, e.body, {**env, e.name: e.type})
    if t is If:
        return _static_type(p, e.then, env) or _static_type(p, e.orelse, env)
    if t is Prim:
        return "Bool" if e.op == "eq" else "Nat"
    if t is Intrinsic:
        return "Bool" if e.op == "interrupted" else "Unit"
    return "Unit"


def validate_program(p: Program, require_main: bool = True) -> ValidationReport:
    """Check names, arities and scoping; an empty report means the program is runnable."""
    out: list[Violation] = []

    def bad(kind: str, msg: str, where: str) -> None:
        out.append(Violation(kind, msg, where))

    seen: set[str] = set()
    for c in p.classes:
        if c.name in seen:
            bad("duplicate class", f"class {c.name} defined twice", c.name)
        seen.add(c.name)
        if c.name in PRIM_TYPES:
            bad("reserved name", f"class may not be named {c.name}", c.name)

    def check_type(ty: str, where: str) -> None:
        if ty not in PRIM_TYPES and p.cls(ty) is None:
            bad("unknown class", f"type {ty} is not a defined class", where)

    all_fields = {f.name for c in p.classes for f in c.fields}
    all_methods = {m.name for c in p.classes for m in c.methods}

    def check_expr(e: object, env: dict[str, str], where: str) -> None:
        t = type(e)
        loc = f"{where}@{e.pos[0]}:{e.pos[1]}" if getattr(e, "pos", None) else where
        if t is Var:
            if e.name not in env:
                bad("unbound variable", f"{e.name} is not in scope", loc)
            return
        if t is Lit:
            if isinstance(e.value, Ref):
                bad("reference literal", "reference literals are runtime-only", loc)
            return
        if t is Let:
            check_type(e.type, loc)
            check_expr(e.bound, env, where)
            check_expr(e.body, {**env, e.name: e.type}, where)
            return
        if t is New:
            c = p.cls(e.cls)
            if c is None:
                bad("unknown class", f"new of undefined class {e.cls}", loc)
            elif len(e.args) != len(c.fields):
                bad("arity", f"new {e.cls} takes {len(c.fields)} arguments, got {len(e.args)}", loc)
        elif t in (GetField, SetField):
            c = p.cls(_static_type(p, e.target, env) or "")
            if c is not None:
                if c.get_field(e.field) is None:
                    bad("unresolved field", f"class {c.name} has no field {e.field}", loc)
            elif e.field not in all_fields:
                bad("unresolved field", f"no class declares field {e.field}", loc)
        elif t is Call:
            c = p.cls(_static_type(p, e.target, env) or "")
            if c is not None:
                m = c.get_method(e.method)
                if m is None:
                    bad("unresolved method", f"class {c.name} has no method {e.method}", loc)
                elif len(m.params) != len(e.args):
                    bad("arity", f"{c.name}.{e.method} takes {len(m.params)} arguments, got {len(e.args)}", loc)
            elif e.method not in all_methods:
                bad("unresolved method", f"no class declares method {e.method}", loc)
        elif t is Intrinsic:
            c = p.cls(_static_type(p, e.target, env) or "")
            if c is not None and not c.is_thread:
                bad("unresolved method", f"{e.op}() needs a class with run(), {c.name} has none", loc)
        elif t is Prim:
            if len(e.args) != PRIMS[e.op]:
                bad("arity", f"{e.op} takes {PRIMS[e.op]} arguments", loc)
        for ch in children(e):
            check_expr(ch, env, where)

    for c in p.classes:
        names: set[str] = set()
        for f in c.fields:
            if f.name in names:
                bad("duplicate field", f"field {f.name} declared twice in {c.name}", c.name)
            names.add(f.name)
            check_type(f.type, f"{c.name}.{f.name}")
        mnames: set[str] = set()
        for m in c.methods:
            where = f"{c.name}.{m.name}"
            if m.name in mnames:
                bad("overloading not supported", f"method {m.name} defined twice in {c.name}", where)
            mnames.add(m.name)
            if m.name in INTRINSICS:
                bad("reserved name", f"{m.name} is a thread intrinsic", where)
            pnames = [n for n, _ in m.params]
            if len(set(pnames)) != len(pnames):
                bad("duplicate parameter", f"parameter names repeat in {m.name}", where)
            if m.name == "run" and m.params:
                bad("arity", "run() takes no parameters", where)
            for _, ty in m.params:
                check_type(ty, where)
            check_type(m.ret, where)
            env = {"this": c.name, **dict(m.params)}
            check_expr(m.body, env, where)
        if c.ctor is not None:
            env = {"this": c.name, **{f.name: f.type for f in c.fields}}
            check_expr(c.ctor, env, f"{c.name}.init")

    if require_main:
        main = p.cls("Main")
        if main is None or main.get_method("run") is None:
            bad("missing entry", "program needs class Main with run()", "program")
    return ValidationReport(out)


def load_program(text: str, require_main: bool = True) -> Program:
    """Parse and validate, raising on any problem."""
    p = parse_program(text)
    report = validate_program(p, require_main)
    if report:
        raise ValidationError(report)
    return p


def free_vars(e: object, bound: Iterable[str] = ()) -> set[str]:
    out: set[str] = set()

    def go(x: object, env: frozenset[str]) -> None:
        t = type(x)
        if t is Var:
            if x.name not in env:
                out.add(x.name)
        elif t is Let:
            go(x.bound, env)
            go(x.body, env | {x.name})
        else:
            for ch in children(x):
                go(ch, env)

    go(e, frozenset(bound))
    return out
