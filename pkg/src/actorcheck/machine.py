"""Concrete time-stamped CESK* machine for lambda-actor programs.

A global state maps pids to process states, pids to mailboxes, and keeps a
store split into a value part and a continuation part.  Process states are
``(control, env, kont_addr, time)`` where control is a program label or a
pid returned as a value.

The same record types (pids, addresses, closures, continuations, process
states) are reused by the abstract interpreter: under k-CFA an abstract pid
is just a pid whose contour has been truncated, and so on.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

from . import syntax as S

Contour = tuple[int, ...]


def cached_hash(cls):
    """Memoize the dataclass-generated hash; these records nest deeply and
    are used as set and dict keys throughout the analysis."""
    compute = cls.__hash__

    def __hash__(self):
        try:
            return self.__dict__["_hash"]
        except KeyError:
            h = compute(self)
            object.__setattr__(self, "_hash", h)
            return h

    cls.__hash__ = __hash__
    return cls


# ---------------------------------------------------------------------------
# Record types


@cached_hash
@dataclass(frozen=True)
class Pid:
    loc: int
    time: Contour

    def __repr__(self) -> str:
        return f"Pid({self.loc},{list(self.time)})"


@cached_hash
@dataclass(frozen=True)
class CTerm:
    """A resolved constructor term (or, abstractly, a depth-bounded one)."""

    name: str
    args: tuple["Data", ...] = ()

    def __repr__(self) -> str:
        if not self.args:
            return self.name
        return f"{self.name}({','.join(map(repr, self.args))})"


@dataclass(frozen=True)
class FunData:
    """Resolved form of a function closure: only its code location is kept."""

    loc: int

    def __repr__(self) -> str:
        return f"fun@{self.loc}"


class _Wild:
    __slots__ = ()

    def __repr__(self) -> str:
        return "_"

    def __reduce__(self):
        return "WILD"


WILD = _Wild()

Data = Union[CTerm, Pid, FunData, _Wild]


@cached_hash
@dataclass(frozen=True)
class VAddr:
    pid: Pid
    var: str
    data: Data
    time: Contour


Env = tuple[tuple[str, VAddr], ...]  # sorted by variable name


@cached_hash
@dataclass(frozen=True)
class KAddr:
    pid: Pid
    loc: int
    env: Env
    time: Contour


class _Star:
    __slots__ = ()

    def __repr__(self) -> str:
        return "STAR"

    def __reduce__(self):
        return "STAR"


STAR = _Star()
KontAddr = Union[KAddr, _Star]


@cached_hash
@dataclass(frozen=True)
class Closure:
    loc: int
    env: Env


Value = Union[Closure, Pid]


class _Stop:
    __slots__ = ()

    def __repr__(self) -> str:
        return "Stop"

    def __reduce__(self):
        return "STOP"


STOP = _Stop()


@cached_hash
@dataclass(frozen=True)
class Arg:
    index: int
    call: int
    done: tuple[Value, ...]
    env: Env
    next: KontAddr


Kont = Union[_Stop, Arg]


@dataclass(frozen=True)
class ErrorCtl:
    reason: str
    loc: int


Control = Union[int, Pid, ErrorCtl]


@cached_hash
@dataclass(frozen=True)
class ProcState:
    control: Control
    env: Env
    kont: KontAddr
    time: Contour


def error_state(reason: str, loc: int) -> ProcState:
    return ProcState(ErrorCtl(reason, loc), (), STAR, ())


class DanglingAddress(Exception):
    pass


# ---------------------------------------------------------------------------
# Environments


def env_get(env: Env, name: str) -> VAddr:
    for k, v in env:
        if k == name:
            return v
    raise KeyError(name)


def env_has(env: Env, name: str) -> bool:
    return any(k == name for k, _ in env)


def env_extend(env: Env, pairs: Iterable[tuple[str, VAddr]]) -> Env:
    merged = dict(env)
    merged.update(pairs)
    return tuple(sorted(merged.items()))


def env_restrict(env: Env, names: frozenset[str]) -> Env:
    return tuple((k, v) for k, v in env if k in names)


# ---------------------------------------------------------------------------
# Time and pids


def tick(loc: int, t: Contour) -> Contour:
    return (loc,) + t


def new_pid(parent: Pid, spawn_loc: int, t: Contour) -> Pid:
    return Pid(spawn_loc, t + tick(parent.loc, parent.time))


def initial_pid(program: S.Program) -> Pid:
    return Pid(program.root.label, ())


# ---------------------------------------------------------------------------
# Global state


@dataclass
class State:
    procs: dict[Pid, ProcState]
    mailboxes: dict[Pid, tuple[Value, ...]]
    vstore: dict[VAddr, Value]
    kstore: dict[KontAddr, Kont]


@dataclass
class Outcome:
    """The effect of one rule firing for one process."""

    rule: str
    after: ProcState
    vwrites: tuple[tuple[VAddr, Value], ...] = ()
    kwrites: tuple[tuple[KAddr, Kont], ...] = ()
    mailbox: Optional[tuple[Value, ...]] = None  # replaces the firing process's mailbox
    received: Optional[Value] = None
    sent: Optional[tuple[Pid, Value]] = None
    child: Optional[tuple[Pid, ProcState]] = None


@dataclass
class Transition:
    pid: Pid
    before: ProcState
    outcome: Outcome
    state: State

    @property
    def rule(self) -> str:
        return self.outcome.rule

    @property
    def after(self) -> ProcState:
        return self.outcome.after


@dataclass
class Trace:
    states: list[State]
    steps: list[Transition] = field(default_factory=list)

    @property
    def rules(self) -> list[str]:
        return [t.rule for t in self.steps]


class Machine:
    """The concrete transition rules, bound to one normalized program."""

    def __init__(self, program: S.Program):
        self.program = program
        self.nodes = program.nodes
        self.fv = program.fv

    # -- Init -------------------------------------------------------------

    def init(self) -> State:
        root = self.program.root
        pid = initial_pid(self.program)
        return State(
            procs={pid: ProcState(root.label, (), STAR, ())},
            mailboxes={pid: ()},
            vstore={},
            kstore={STAR: STOP},
        )

    # -- auxiliary functions ----------------------------------------------

    def value_of(self, q: ProcState) -> Optional[Value]:
        """The value held by a process whose control is a value term."""
        c = q.control
        if isinstance(c, Pid):
            return c
        if isinstance(c, int) and isinstance(self.nodes[c], S.VALUE_NODES):
            return Closure(c, q.env)
        return None

    def lookup(self, store: dict, addr) -> Value:
        try:
            return store[addr]
        except KeyError:
            raise DanglingAddress(repr(addr)) from None

    def resolve(self, store: dict[VAddr, Value], value: Value) -> Data:
        if isinstance(value, Pid):
            return value
        node = self.nodes[value.loc]
        if isinstance(node, S.Fun):
            return FunData(value.loc)
        if isinstance(node, S.Ctor):
            args = []
            for a in node.args:
                try:
                    addr = env_get(value.env, a.name)
                except KeyError:
                    raise DanglingAddress(f"{a.name} unbound in closure at {value.loc}") from None
                args.append(self.resolve(store, self.lookup(store, addr)))
            return CTerm(node.name, tuple(args))
        raise TypeError(f"label {value.loc} is not a value term")

    def match(self, pat: S.Pattern, value: Value, env: Env, store) -> Optional[dict[str, Value]]:
        if isinstance(pat, S.PVar):
            if env_has(env, pat.name):
                bound = self.lookup(store, env_get(env, pat.name))
                if self.resolve(store, bound) != self.resolve(store, value):
                    return None
            return {pat.name: value}
        if isinstance(pat, S.PCtor):
            if not isinstance(value, Closure):
                return None
            node = self.nodes[value.loc]
            if not isinstance(node, S.Ctor) or node.name != pat.name or len(node.args) != len(pat.args):
                return None
            theta: dict[str, Value] = {}
            for sub, arg in zip(pat.args, node.args):
                sub_value = self.lookup(store, env_get(value.env, arg.name))
                part = self.match(sub, sub_value, env, store)
                if part is None:
                    return None
                for k, v in part.items():
                    if k in theta and theta[k] != v:
                        return None
                    theta[k] = v
            return theta
        raise TypeError(pat)

    def mmatch(self, patterns, mailbox, env, store):
        """First-in-first-fireable-out extraction; None means block.

        Returns ``(index, substitution, remaining mailbox)`` with a 1-based
        pattern index.
        """
        found = self._mmatch_at(patterns, mailbox, env, store)
        return None if found is None else found[:3]

    def _mmatch_at(self, patterns, mailbox, env, store):
        for j, msg in enumerate(mailbox):
            for i, pat in enumerate(patterns):
                theta = self.match(pat, msg, env, store)
                if theta is not None:
                    return i + 1, theta, mailbox[:j] + mailbox[j + 1:], j
        return None

    def bind(self, pid: Pid, q_time: Contour, theta: dict[str, Value], store):
        writes = []
        for name in sorted(theta):
            d = theta[name]
            writes.append((VAddr(pid, name, self.resolve(store, d), q_time), d))
        return writes

    # -- rules ------------------------------------------------------------

    def outcomes(self, pid: Pid, q: ProcState, state: State) -> list[Outcome]:
        c = q.control
        if isinstance(c, ErrorCtl):
            return []
        value = self.value_of(q)
        if value is not None:
            return self._return(pid, q, value, state)
        node = self.nodes[c]
        fv = self.fv
        if isinstance(node, S.CALL_NODES):
            first = S.call_operands(node)[0]
            b = KAddr(pid, first.label, q.env, q.time)
            kont = Arg(0, c, (), q.env, q.kont)
            after = ProcState(first.label, env_restrict(q.env, fv[first.label]), b, q.time)
            return [Outcome("FunEval", after, kwrites=((b, kont),))]
        if isinstance(node, S.Var):
            d = self.lookup(state.vstore, env_get(q.env, node.name))
            if isinstance(d, Pid):
                return [Outcome("Vars", ProcState(d, (), q.kont, q.time))]
            return [Outcome("Vars", ProcState(d.loc, d.env, q.kont, q.time))]
        if isinstance(node, S.Letrec):
            addrs = [(name, VAddr(pid, name, FunData(f.label), q.time)) for name, f in node.bindings]
            env = env_extend(q.env, addrs)
            writes = tuple(
                (addr, Closure(f.label, env_restrict(env, fv[f.label])))
                for (_, addr), (_, f) in zip(addrs, node.bindings)
            )
            body = node.body.label
            after = ProcState(body, env_restrict(env, fv[body]), q.kont, q.time)
            return [Outcome("Letrec", after, vwrites=writes)]
        if isinstance(node, S.Case):
            d = self.lookup(state.vstore, env_get(q.env, node.scrutinee.name))
            for pat, body in node.clauses:
                theta = self.match(pat, d, q.env, state.vstore)
                if theta is not None:
                    writes = self.bind(pid, q.time, theta, state.vstore)
                    env = env_extend(q.env, [(a.var, a) for a, _ in writes])
                    after = ProcState(body.label, env_restrict(env, fv[body.label]), q.kont, q.time)
                    return [Outcome("Case", after, vwrites=tuple(writes))]
            return [Outcome("Error", error_state("case_clause", c))]
        if isinstance(node, S.Receive):
            patterns = [p for p, _ in node.clauses]
            mailbox = state.mailboxes[pid]
            found = self._mmatch_at(patterns, mailbox, q.env, state.vstore)
            if found is None:
                return []
            i, theta, rest, j = found
            body = node.clauses[i - 1][1]
            writes = self.bind(pid, q.time, theta, state.vstore)
            env = env_extend(q.env, [(a.var, a) for a, _ in writes])
            after = ProcState(body.label, env_restrict(env, fv[body.label]), q.kont, q.time)
            return [Outcome("Receive", after, vwrites=tuple(writes), mailbox=rest, received=mailbox[j])]
        if isinstance(node, S.SelfPid):
            return [Outcome("Self", ProcState(pid, (), q.kont, q.time))]
        if isinstance(node, S.Choice):
            return [
                Outcome("Choice", ProcState(t.label, env_restrict(q.env, fv[t.label]), q.kont, q.time))
                for t in node.thunks
            ]
        if isinstance(node, S.Probe):
            body = node.body.label
            return [Outcome("Probe", ProcState(body, env_restrict(q.env, fv[body]), q.kont, q.time))]
        raise TypeError(f"no rule for {type(node).__name__}")

    def _return(self, pid: Pid, q: ProcState, value: Value, state: State) -> list[Outcome]:
        kont = self.lookup(state.kstore, q.kont)
        if kont is STOP:
            return []
        call = self.nodes[kont.call]
        ops = S.call_operands(call)
        fv = self.fv
        if kont.index < len(ops) - 1:
            nxt = ops[kont.index + 1]
            b = KAddr(pid, nxt.label, kont.env, q.time)
            k2 = Arg(kont.index + 1, kont.call, kont.done + (value,), kont.env, kont.next)
            after = ProcState(nxt.label, env_restrict(kont.env, fv[nxt.label]), b, q.time)
            return [Outcome("ArgEval", after, kwrites=((b, k2),))]
        values = kont.done + (value,)
        if isinstance(call, S.App):
            fn, args = values[0], values[1:]
            if not isinstance(fn, Closure) or not isinstance(self.nodes[fn.loc], S.Fun):
                return [Outcome("Error", error_state("not_a_function", kont.call))]
            fun = self.nodes[fn.loc]
            if len(fun.params) != len(args):
                return [Outcome("Error", error_state("arity", kont.call))]
            writes = tuple(
                (VAddr(pid, x, self.resolve(state.vstore, d), q.time), d)
                for x, d in zip(fun.params, args)
            )
            env = env_extend(fn.env, [(a.var, a) for a, _ in writes])
            body = fun.body.label
            after = ProcState(body, env_restrict(env, fv[body]), kont.next, tick(kont.call, q.time))
            return [Outcome("Apply", after, vwrites=writes)]
        if isinstance(call, S.Send):
            target, msg = values
            if not isinstance(target, Pid):
                return [Outcome("Error", error_state("send_to_non_pid", kont.call))]
            after = ProcState(q.control, q.env, kont.next, q.time)
            return [Outcome("Send", after, sent=(target, msg))]
        if isinstance(call, S.Spawn):
            (thunk,) = values
            if not isinstance(thunk, Closure) or not isinstance(self.nodes[thunk.loc], S.Fun) \
                    or self.nodes[thunk.loc].params:
                return [Outcome("Error", error_state("spawn_non_function", kont.call))]
            child = new_pid(pid, kont.call, q.time)
            body = self.nodes[thunk.loc].body.label
            child_q = ProcState(body, env_restrict(thunk.env, fv[body]), STAR, ())
            after = ProcState(child, (), kont.next, q.time)
            return [Outcome("Spawn", after, child=(child, child_q))]
        raise TypeError(call)

    # -- global steps -----------------------------------------------------

    def enabled(self, state: State) -> list[tuple[Pid, Outcome]]:
        out = []
        for pid in sorted(state.procs, key=_pid_key):
            for o in self.outcomes(pid, state.procs[pid], state):
                out.append((pid, o))
        return out

    def apply(self, state: State, pid: Pid, o: Outcome) -> State:
        procs = dict(state.procs)
        procs[pid] = o.after
        mailboxes = state.mailboxes
        if o.mailbox is not None or o.sent is not None or o.child is not None:
            mailboxes = dict(mailboxes)
        if o.mailbox is not None:
            mailboxes[pid] = o.mailbox
        if o.sent is not None:
            target, msg = o.sent
            mailboxes[target] = mailboxes[target] + (msg,)
        if o.child is not None:
            child, child_q = o.child
            procs[child] = child_q
            mailboxes[child] = ()
        vstore = state.vstore
        if o.vwrites:
            vstore = dict(vstore)
            vstore.update(o.vwrites)
        kstore = state.kstore
        if o.kwrites:
            kstore = dict(kstore)
            kstore.update(o.kwrites)
        return State(procs, mailboxes, vstore, kstore)

    def successors(self, state: State) -> list[Transition]:
        return [
            Transition(pid, state.procs[pid], o, self.apply(state, pid, o))
            for pid, o in self.enabled(state)
        ]

    def step(self, state: State) -> list[State]:
        return [t.state for t in self.successors(state)]

    def run(self, seed: int, max_steps: int, state: Optional[State] = None) -> Trace:
        """Resolve nondeterminism pseudo-randomly: pick an enabled (pid, rule)
        pair uniformly, then one of its alternatives uniformly."""
        rng = random.Random(seed)
        state = state or self.init()
        trace = Trace([state])
        for _ in range(max_steps):
            enabled = self.enabled(state)
            if not enabled:
                break
            groups: dict[tuple[Pid, str], list[Outcome]] = {}
            for pid, o in enabled:
                groups.setdefault((pid, o.rule), []).append(o)
            keys = list(groups)
            pid, rule = keys[rng.randrange(len(keys))]
            options = groups[(pid, rule)]
            o = options[rng.randrange(len(options))]
            before = state.procs[pid]
            state = self.apply(state, pid, o)
            trace.steps.append(Transition(pid, before, o, state))
            trace.states.append(state)
        return trace

    def dump_trace(self, trace: Trace) -> str:
        """One JSON object per line: step, pid, rule, control label, probe tag."""
        lines = []
        for i, t in enumerate(trace.steps):
            ctl = t.after.control
            entry = {
                "step": i,
                "pid": repr(t.pid),
                "rule": t.rule,
                "control_label": ctl if isinstance(ctl, int) else repr(ctl),
            }
            if isinstance(ctl, int) and ctl in self.program.probe_tag:
                entry["probe_tag"] = self.program.probe_tag[ctl]
            lines.append(json.dumps(entry, sort_keys=True))
        return "\n".join(lines) + ("\n" if lines else "")


def _pid_key(p: Pid):
    return (p.loc, len(p.time), p.time)


# module-level conveniences mirroring the operation names


def init(program: S.Program) -> State:
    return Machine(program).init()


def step(program: S.Program, state: State) -> list[State]:
    return Machine(program).step(state)


def run(program: S.Program, seed: int, max_steps: int) -> Trace:
    return Machine(program).run(seed, max_steps)
