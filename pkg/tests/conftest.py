import functools

import pytest

from actorcheck import BENCHMARKS, benchmark_source
from actorcheck import syntax as S
from actorcheck.cli import Options, build


@functools.lru_cache(maxsize=None)
def pipeline(name: str, simplify: bool = True):
    """Cached verification pipeline for a bundled benchmark."""
    return build(benchmark_source(name), Options(simplify=simplify), file=f"{name}.lact")


@functools.lru_cache(maxsize=None)
def program(name: str) -> S.Program:
    return S.load(benchmark_source(name))


@pytest.fixture(params=BENCHMARKS)
def bench(request):
    return request.param


# -- building concrete values by hand -------------------------------------------

from actorcheck.machine import CTerm, Closure, Pid, VAddr  # noqa: E402

# one constructor node per shape used by the hand-built values below
TERM_SOURCE = "choice(fun() -> a, fun() -> b, fun() -> c, fun(X) -> succ(X), fun(X, Y) -> {X, Y})"
ALPHABET = {"a": 0, "b": 0, "c": 0, "succ": 1, "tuple2": 2}


class TermBuilder:
    """Allocates closures for closed terms over ``ALPHABET`` in a fresh store."""

    def __init__(self):
        self.program = S.load(TERM_SOURCE)
        self.ctor = {}
        for n in self.program.nodes:
            if isinstance(n, S.Ctor):
                self.ctor.setdefault(n.name, n)
        self.store: dict = {}
        self.owner = Pid(999, ())
        self.n = 0

    def build(self, term):
        """``term`` is an atom name or a ``(name, *args)`` tuple."""
        if isinstance(term, str):
            term = (term,)
        name, args = term[0], term[1:]
        node = self.ctor[name]
        env = []
        for var, arg in zip(node.args, args):
            self.n += 1
            addr = VAddr(self.owner, var.name, CTerm(str(self.n), ()), ())
            self.store[addr] = self.build(arg)
            env.append((var.name, addr))
        return Closure(node.label, tuple(sorted(env)))


def cterm(term) -> CTerm:
    if isinstance(term, str):
        term = (term,)
    return CTerm(term[0], tuple(cterm(a) for a in term[1:]))


# -- acceptance summary -----------------------------------------------------------

# criterion number -> (passed, detail), filled in by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
