"""Seeded generator of small, terminating concurrent programs for property testing."""

from __future__ import annotations

import random
from dataclasses import dataclass

from .syntax import Intrinsic, Lit, Program, Var, load_program, walk


@dataclass(frozen=True)
class GenConfig:
    max_classes: int = 4
    max_threads: int = 3
    max_exprs: int = 40
    max_ops: int = 5


def expr_count(p: Program) -> int:
    """Compound expression nodes across all method bodies and constructors (variables and literals excluded)."""
    n = 0
    for c in p.classes:
        bodies = [m.body for m in c.methods] + ([c.ctor] if c.ctor is not None else [])
        for b in bodies:
            n += sum(1 for x in walk(b) if type(x) not in (Var, Lit))
    return n


class _Gen:
    def __init__(self, rng: random.Random, cfg: GenConfig):
        self.rng = rng
        self.cfg = cfg
        self.plain = [f"f{i}" for i in range(rng.randint(1, 3))]
        self.vol = rng.random() < 0.6
        self.flag = rng.random() < 0.4
        self.bump = rng.random() < 0.5

    def data_fields(self) -> list[str]:
        out = [f"{f}: Nat;" for f in self.plain]
        if self.vol:
            out.append("volatile v: Nat;")
        if self.flag:
            out.append("ok: Bool;")
        return out

    def data_args(self) -> str:
        args = ["0"] * len(self.plain)
        if self.vol:
            args.append("0")
        if self.flag:
            args.append(self.rng.choice(["true", "false"]))
        return ", ".join(args)

    def simple(self, d: str, thread: bool) -> str:
        r = self.rng
        f, g = r.choice(self.plain), r.choice(self.plain)
        choices = [
            lambda: f"{d}.{f} := {r.randint(1, 3)}",
            lambda: f"{d}.{f} := succ({d}.{g})",
            lambda: f"let x: Nat = {d}.{f} in {d}.{g} := x",
        ]
        if self.vol:
            choices += [lambda: f"{d}.v := {r.randint(1, 3)}", lambda: f"{d}.{f} := {d}.v"]
        if self.bump:
            choices.append(lambda: f"{d}.bump()")
        if thread:
            choices.append(lambda: f"if this.interrupted() then {d}.{f} := 7 else ()")
        return r.choice(choices)()

    def op(self, d: str, thread: bool) -> str:
        r = self.rng
        k = r.random()
        if k < 0.3:
            body = "; ".join(self.simple(d, thread) for _ in range(r.randint(1, 2)))
            if r.random() < 0.2:
                return f"{{ {d}.monitorenter; {d}.monitorenter; {body}; {d}.monitorexit; {d}.monitorexit; () }}"
            return f"{{ {d}.monitorenter; {body}; {d}.monitorexit; () }}"
        if k < 0.4 and self.flag:
            return f"if {d}.ok then {self.simple(d, thread)} else {self.simple(d, thread)}"
        if k < 0.5:
            f = r.choice(self.plain)
            return f"let t: Data = new Data({self.data_args()}) in {{ t.{f} := 2; {d}.{f} := t.{f} }}"
        return self.simple(d, thread)

    def ops(self, d: str, thread: bool) -> list[str]:
        return [self.op(d, thread) for _ in range(self.rng.randint(1, self.cfg.max_ops))]

    def program(self) -> str:
        r = self.rng
        n_workers = r.randint(0, min(2, self.cfg.max_threads - 1, self.cfg.max_classes - 2))
        worker_classes = [f"W{i}" for i in range(1, n_workers + 1)] if r.random() < 0.6 else ["W1"] * n_workers
        out = ["class Data {"]
        out += ["  " + x for x in self.data_fields()]
        if self.bump:
            out.append(f"  bump(): Unit = {{ this.{self.plain[0]} := succ(this.{self.plain[0]}); () }}")
        out.append("}")
        for cname in dict.fromkeys(worker_classes):
            out.append(f"class {cname} {{ d: Data;")
            out.append(f"  run(): Unit = {{ {'; '.join(self.ops('this.d', True))}; () }}")
            out.append("}")
        main: list[str] = [f"this.d := new Data({self.data_args()})"]
        names = [f"w{i}" for i in range(len(worker_classes))]
        lets = "".join(f"let {n}: {c} = new {c}(this.d) in " for n, c in zip(names, worker_classes))
        body = [f"{n}.start()" for n in names]
        body += self.ops("this.d", True)
        for n in names:
            if r.random() < 0.1:
                body.append(f"{n}.interrupt()")
            if r.random() < 0.8:
                body.append(f"{n}.join()")
        if names and r.random() < 0.5:
            body += self.ops("this.d", True)[:2]
        out.append("class Main { d: Data;")
        out.append(f"  run(): Unit = {{ {main[0]}; {lets}{{ {'; '.join(body)}; () }} }}")
        out.append("}")
        return "\n".join(out) + "\n"


def generate(seed: int, cfg: GenConfig = GenConfig()) -> tuple[str, Program]:
    """A valid program within the size bounds; retries with derived seeds until the bounds hold."""
    rng = random.Random(seed)
    for _ in range(200):
        src = _Gen(rng, cfg).program()
        p = load_program(src)
        if len(p.classes) <= cfg.max_classes and expr_count(p) <= cfg.max_exprs:
            return src, p
    raise RuntimeError(f"could not generate a program within bounds for seed {seed}")


def thread_count(p: Program) -> int:
    """Upper bound on threads: Main plus one per start() call site."""
    n = 1
    for c in p.classes:
        for m in c.methods:
            n += sum(1 for x in walk(m.body) if type(x) is Intrinsic and x.op == "start")
    return n
