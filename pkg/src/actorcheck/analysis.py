"""Abstract interpretation of the actor machine.

The abstract rules mirror :class:`actorcheck.machine.Machine` with
set-valued stores.  Following the usual widening, there is a single global
copy of the value store, the continuation store and the mailboxes, so the
fixpoint is a map from abstract pids to sets of abstract process states plus
those global components.  The engine is a worklist over (pid, state) pairs
with per-address dependency tracking.
"""

from __future__ import annotations

import itertools
import json
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

from . import syntax as S
from .absdomains import AbstractionConfig, MailboxSet, Substitution, abs_match, may_fail
from .machine import (
    STAR, STOP, Arg, Closure, Env, ErrorCtl, FunData, KAddr, Kont, KontAddr, Pid, ProcState, State,
    VAddr, Value, cached_hash, env_extend, env_get, env_restrict, error_state, initial_pid,
)

CARRIER_BOUND = 10_000_000


class AbstractionNotFinite(Exception):
    pass


# ---------------------------------------------------------------------------
# Results


@dataclass(frozen=True)
class RecvEffect:
    msg: Value


@dataclass(frozen=True)
class SendEffect:
    target: Pid
    msg: Value


@dataclass(frozen=True)
class SpawnEffect:
    child: Pid
    child_state: ProcState


Effect = Union[RecvEffect, SendEffect, SpawnEffect]


@cached_hash
@dataclass(frozen=True)
class AbsTransition:
    pid_class: Pid
    before: ProcState
    after: ProcState
    rule: str
    effect: Optional[Effect] = None


@dataclass
class GlobalAbsState:
    procs: dict[Pid, set[ProcState]] = field(default_factory=dict)
    mailboxes: dict[Pid, frozenset] = field(default_factory=dict)
    vstore: dict[VAddr, set[Value]] = field(default_factory=dict)
    kstore: dict[KontAddr, set[Kont]] = field(default_factory=dict)

    def copy(self) -> "GlobalAbsState":
        return GlobalAbsState(
            {p: set(s) for p, s in self.procs.items()},
            dict(self.mailboxes),
            {a: set(s) for a, s in self.vstore.items()},
            {a: set(s) for a, s in self.kstore.items()},
        )

    def leq(self, other: "GlobalAbsState") -> bool:
        def sub(a: dict, b: dict) -> bool:
            return all(v <= b.get(k, set()) for k, v in a.items())

        return (
            sub(self.procs, other.procs)
            and sub(self.mailboxes, other.mailboxes)
            and sub(self.vstore, other.vstore)
            and sub(self.kstore, other.kstore)
        )

    def __eq__(self, other):
        if not isinstance(other, GlobalAbsState):
            return NotImplemented
        return self.leq(other) and other.leq(self)

    def pairs(self) -> list[tuple[Pid, ProcState]]:
        return sorted(
            ((p, q) for p, qs in self.procs.items() for q in qs), key=repr
        )


# ---------------------------------------------------------------------------
# Rules


@dataclass
class AbsOutcome:
    rule: str
    after: ProcState
    vwrites: tuple[tuple[VAddr, Value], ...] = ()
    kwrites: tuple[tuple[KAddr, Kont], ...] = ()
    mailbox: Optional[frozenset] = None
    effect: Optional[Effect] = None


class _View:
    """Read access to a global state, optionally recording what was read."""

    def __init__(self, nodes, state: GlobalAbsState, reads: Optional[set] = None):
        self.nodes = nodes
        self.state = state
        self.reads = reads

    def values(self, addr) -> Iterable[Value]:
        if self.reads is not None:
            self.reads.add(("v", addr))
        return self.state.vstore.get(addr, ())

    def konts(self, addr) -> Iterable[Kont]:
        if self.reads is not None:
            self.reads.add(("k", addr))
        return self.state.kstore.get(addr, ())

    def mailbox(self, pid: Pid) -> frozenset:
        if self.reads is not None:
            self.reads.add(("m", pid))
        return self.state.mailboxes.get(pid, frozenset())


class AbstractMachine:
    """The abstract transition rules for one program and configuration."""

    def __init__(self, program: S.Program, config: AbstractionConfig):
        self.program = program
        self.config = config
        self.nodes = program.nodes
        self.fv = program.fv
        if not isinstance(config.mailbox, MailboxSet):
            # the global widening relies on receive never shrinking a mailbox
            raise AbstractionNotFinite(f"unsupported mailbox abstraction {config.mailbox!r}")
        n_labels = len(program.nodes)
        if config.time.carrier_size(n_labels) > CARRIER_BOUND:
            raise AbstractionNotFinite(f"{config.time!r} has too many contours for {n_labels} labels")

    def init(self) -> GlobalAbsState:
        pid = initial_pid(self.program)
        q = ProcState(self.program.root.label, (), STAR, self.config.time.t0_hat)
        return GlobalAbsState(
            procs={pid: {q}},
            mailboxes={pid: self.config.mailbox.bottom},
            vstore={},
            kstore={STAR: {STOP}},
        )

    def value_of(self, q: ProcState) -> Optional[Value]:
        c = q.control
        if isinstance(c, Pid):
            return c
        if isinstance(c, int) and isinstance(self.nodes[c], S.VALUE_NODES):
            return Closure(c, q.env)
        return None

    def _bindings(self, view, pid: Pid, t, theta: Substitution):
        """Every way of allocating addresses for a substitution: one per
        choice of abstract datum for each bound variable."""
        choices = []
        for name, d in theta:
            data = sorted(self.config.data.resolve_hat(view, d), key=repr)
            choices.append([(VAddr(pid, name, delta, t), d) for delta in data])
        return [tuple(c) for c in itertools.product(*choices)]

    def _continue(self, rule, q, body: S.Expr, writes):
        env = env_extend(q.env, [(a.var, a) for a, _ in writes])
        after = ProcState(body.label, env_restrict(env, self.fv[body.label]), q.kont, q.time)
        return AbsOutcome(rule, after, vwrites=tuple(writes))

    def outcomes(self, pid: Pid, q: ProcState, view: _View) -> list[AbsOutcome]:
        c = q.control
        if isinstance(c, ErrorCtl):
            return []
        value = self.value_of(q)
        if value is not None:
            return self._return(pid, q, value, view)
        node = self.nodes[c]
        fv = self.fv
        if isinstance(node, S.CALL_NODES):
            first = S.call_operands(node)[0]
            b = KAddr(pid, first.label, q.env, q.time)
            kont = Arg(0, c, (), q.env, q.kont)
            after = ProcState(first.label, env_restrict(q.env, fv[first.label]), b, q.time)
            return [AbsOutcome("FunEval", after, kwrites=((b, kont),))]
        if isinstance(node, S.Var):
            out = []
            for d in sorted(view.values(env_get(q.env, node.name)), key=repr):
                if isinstance(d, Pid):
                    out.append(AbsOutcome("Vars", ProcState(d, (), q.kont, q.time)))
                else:
                    out.append(AbsOutcome("Vars", ProcState(d.loc, d.env, q.kont, q.time)))
            return out
        if isinstance(node, S.Letrec):
            addrs = [
                (name, VAddr(pid, name, self.config.data.alpha(FunData(f.label)), q.time))
                for name, f in node.bindings
            ]
            env = env_extend(q.env, addrs)
            writes = tuple(
                (addr, Closure(f.label, env_restrict(env, fv[f.label])))
                for (_, addr), (_, f) in zip(addrs, node.bindings)
            )
            body = node.body.label
            after = ProcState(body, env_restrict(env, fv[body]), q.kont, q.time)
            return [AbsOutcome("Letrec", after, vwrites=writes)]
        if isinstance(node, S.Case):
            out = []
            error = False
            for d in sorted(view.values(env_get(q.env, node.scrutinee.name)), key=repr):
                for pat, body in node.clauses:
                    for theta in sorted(abs_match(view, pat, d), key=repr):
                        for writes in self._bindings(view, pid, q.time, theta):
                            out.append(self._continue("Case", q, body, writes))
                if all(may_fail(view, pat, d) for pat, _ in node.clauses):
                    error = True
            if error:
                out.append(AbsOutcome("Error", error_state("case_clause", c)))
            return out
        if isinstance(node, S.Receive):
            patterns = [p for p, _ in node.clauses]
            out = []
            mailbox = view.mailbox(pid)
            mb = self.config.mailbox
            for r in mb.matches(view, patterns, mailbox):
                if not mb.leq(mailbox, r.mailbox):
                    # replacing a global mailbox by a smaller one would break
                    # the monotonicity the widened fixpoint relies on
                    raise AbstractionNotFinite("mailbox abstraction shrank under receive")
                body = node.clauses[r.index - 1][1]
                for writes in self._bindings(view, pid, q.time, r.subst):
                    o = self._continue("Receive", q, body, writes)
                    o.mailbox = r.mailbox
                    o.effect = RecvEffect(r.message)
                    out.append(o)
            return out
        if isinstance(node, S.SelfPid):
            return [AbsOutcome("Self", ProcState(pid, (), q.kont, q.time))]
        if isinstance(node, S.Choice):
            return [
                AbsOutcome("Choice", ProcState(t.label, env_restrict(q.env, fv[t.label]), q.kont, q.time))
                for t in node.thunks
            ]
        if isinstance(node, S.Probe):
            body = node.body.label
            return [AbsOutcome("Probe", ProcState(body, env_restrict(q.env, fv[body]), q.kont, q.time))]
        raise TypeError(f"no rule for {type(node).__name__}")

    def _return(self, pid: Pid, q: ProcState, value: Value, view: _View) -> list[AbsOutcome]:
        out = []
        for kont in sorted(view.konts(q.kont), key=repr):
            if kont is STOP:
                continue
            out.extend(self._return_to(pid, q, value, kont, view))
        return out

    def _return_to(self, pid, q, value, kont: Arg, view) -> list[AbsOutcome]:
        call = self.nodes[kont.call]
        ops = S.call_operands(call)
        fv = self.fv
        time = self.config.time
        if kont.index < len(ops) - 1:
            nxt = ops[kont.index + 1]
            b = KAddr(pid, nxt.label, kont.env, q.time)
            k2 = Arg(kont.index + 1, kont.call, kont.done + (value,), kont.env, kont.next)
            after = ProcState(nxt.label, env_restrict(kont.env, fv[nxt.label]), b, q.time)
            return [AbsOutcome("ArgEval", after, kwrites=((b, k2),))]
        values = kont.done + (value,)
        if isinstance(call, S.App):
            fn, args = values[0], values[1:]
            if not isinstance(fn, Closure) or not isinstance(self.nodes[fn.loc], S.Fun):
                return [AbsOutcome("Error", error_state("not_a_function", kont.call))]
            fun = self.nodes[fn.loc]
            if len(fun.params) != len(args):
                return [AbsOutcome("Error", error_state("arity", kont.call))]
            body = fun.body.label
            t2 = time.tick_hat(kont.call, q.time)
            out = []
            theta = tuple(zip(fun.params, args))
            for writes in self._bindings(view, pid, q.time, theta):
                env = env_extend(fn.env, [(a.var, a) for a, _ in writes])
                after = ProcState(body, env_restrict(env, fv[body]), kont.next, t2)
                out.append(AbsOutcome("Apply", after, vwrites=writes))
            return out
        if isinstance(call, S.Send):
            target, msg = values
            if not isinstance(target, Pid):
                return [AbsOutcome("Error", error_state("send_to_non_pid", kont.call))]
            after = ProcState(q.control, q.env, kont.next, q.time)
            return [AbsOutcome("Send", after, effect=SendEffect(target, msg))]
        if isinstance(call, S.Spawn):
            (thunk,) = values
            if not isinstance(thunk, Closure) or not isinstance(self.nodes[thunk.loc], S.Fun) \
                    or self.nodes[thunk.loc].params:
                return [AbsOutcome("Error", error_state("spawn_non_function", kont.call))]
            child = time.new_pid_hat(pid, kont.call, q.time)
            body = self.nodes[thunk.loc].body.label
            child_q = ProcState(body, env_restrict(thunk.env, fv[body]), STAR, time.t0_hat)
            after = ProcState(child, (), kont.next, q.time)
            return [AbsOutcome("Spawn", after, effect=SpawnEffect(child, child_q))]
        raise TypeError(call)

    # -- applying outcomes --------------------------------------------------

    def join_outcome(self, g: GlobalAbsState, pid: Pid, o: AbsOutcome) -> set:
        """Join an outcome's facts into ``g``; returns the keys that grew."""
        changed = set()
        if o.after not in g.procs.setdefault(pid, set()):
            g.procs[pid].add(o.after)
            changed.add(("p", pid))
        for addr, d in o.vwrites:
            vals = g.vstore.setdefault(addr, set())
            if d not in vals:
                vals.add(d)
                changed.add(("v", addr))
        for addr, k in o.kwrites:
            ks = g.kstore.setdefault(addr, set())
            if k not in ks:
                ks.add(k)
                changed.add(("k", addr))
        mb = self.config.mailbox
        if o.mailbox is not None:
            # the receive result is at least the mailbox the rule read; joining
            # equals replacement unless other facts were joined in meanwhile
            current = g.mailboxes.get(pid, mb.bottom)
            new = mb.join(current, o.mailbox)
            if new != current:
                g.mailboxes[pid] = new
                changed.add(("m", pid))
        eff = o.effect
        if isinstance(eff, SendEffect):
            current = g.mailboxes.get(eff.target, mb.bottom)
            new = mb.enq_hat(eff.msg, current)
            if new != current:
                g.mailboxes[eff.target] = new
                changed.add(("m", eff.target))
        elif isinstance(eff, SpawnEffect):
            if eff.child not in g.mailboxes:
                g.mailboxes[eff.child] = mb.bottom
            qs = g.procs.setdefault(eff.child, set())
            if eff.child_state not in qs:
                qs.add(eff.child_state)
                changed.add(("p", eff.child))
        return changed


def _transition(pid, q, o: AbsOutcome) -> AbsTransition:
    return AbsTransition(pid, q, o.after, o.rule, o.effect)


# ---------------------------------------------------------------------------
# Fixpoint


@dataclass
class AnalysisResult:
    program: S.Program
    config: AbstractionConfig
    state: GlobalAbsState
    transitions: frozenset[AbsTransition]
    init_pid: Pid
    init_state: ProcState
    iterations: int = 0
    _msg_cache: dict = field(default_factory=dict, repr=False)

    @property
    def pid_classes(self) -> list[Pid]:
        return sorted(self.state.procs, key=repr)

    def message_data(self, value: Value) -> frozenset:
        """Message abstraction of an abstract value over the final store."""
        if value not in self._msg_cache:
            view = _View(self.program.nodes, self.state)
            self._msg_cache[value] = self.config.msg_data.resolve_hat(view, value)
        return self._msg_cache[value]

    def sorted_transitions(self) -> list[AbsTransition]:
        return sorted(self.transitions, key=repr)

    def to_json(self) -> dict:
        prog = self.program
        state_ids: dict[tuple[Pid, ProcState], int] = {}
        states = []
        for pid, q in self.state.pairs():
            state_ids[(pid, q)] = len(states)
            states.append(_state_json(prog, pid, q))
        trans = []
        for t in self.sorted_transitions():
            entry = {
                "pid_class": repr(t.pid_class),
                "from": state_ids[(t.pid_class, t.before)],
                "to": state_ids[(t.pid_class, t.after)],
                "rule": t.rule,
            }
            eff = t.effect
            if isinstance(eff, RecvEffect):
                entry["messages"] = sorted(map(repr, self.message_data(eff.msg)))
            elif isinstance(eff, SendEffect):
                entry["target"] = repr(eff.target)
                entry["messages"] = sorted(map(repr, self.message_data(eff.msg)))
            elif isinstance(eff, SpawnEffect):
                entry["child"] = repr(eff.child)
                entry["child_state"] = state_ids[(eff.child, eff.child_state)]
            trans.append(entry)
        return {
            "config": self.config.describe(),
            "pid_classes": [repr(p) for p in self.pid_classes],
            "states": states,
            "transitions": trans,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1)


def _state_json(prog: S.Program, pid: Pid, q: ProcState) -> dict:
    c = q.control
    out = {"pid_class": repr(pid), "time": list(q.time)}
    if isinstance(c, int):
        out["label"] = c
        out["control"] = prog.describe(c)
        if c in prog.probe_tag:
            out["probe"] = prog.probe_tag[c]
    elif isinstance(c, Pid):
        out["control"] = f"pid {c!r}"
    else:
        out["control"] = f"error {c.reason} at {prog.describe(c.loc)}"
    return out


def analyze(program: S.Program, config: AbstractionConfig) -> AnalysisResult:
    """Least fixpoint of the abstract rules under global widening."""
    m = AbstractMachine(program, config)
    g = m.init()
    transitions: set[AbsTransition] = set()
    deps: dict[tuple, set[tuple[Pid, ProcState]]] = defaultdict(set)
    work: deque[tuple[Pid, ProcState]] = deque()
    queued: set[tuple[Pid, ProcState]] = set()
    seen: set[tuple[Pid, ProcState]] = set()

    def push(item):
        if item not in queued:
            queued.add(item)
            work.append(item)

    for item in g.pairs():
        push(item)
    iterations = 0
    while work:
        item = work.popleft()
        queued.discard(item)
        seen.add(item)
        iterations += 1
        pid, q = item
        reads: set = set()
        view = _View(program.nodes, g, reads)
        outs = m.outcomes(pid, q, view)
        for key in reads:
            deps[key].add(item)
        for o in outs:
            transitions.add(_transition(pid, q, o))
            changed = m.join_outcome(g, pid, o)
            for key in changed:
                if key[0] == "p":
                    for q2 in g.procs[key[1]]:
                        if (key[1], q2) not in seen:
                            push((key[1], q2))
                else:
                    for dep in deps.get(key, ()):
                        push(dep)
    init_pid = initial_pid(program)
    init_state = ProcState(program.root.label, (), STAR, config.time.t0_hat)
    return AnalysisResult(program, config, g, frozenset(transitions), init_pid, init_state, iterations)


def abstract_step(program: S.Program, g: GlobalAbsState, config: AbstractionConfig):
    """Fire every enabled abstract rule once against ``g`` and join the results."""
    m = AbstractMachine(program, config)
    view = _View(program.nodes, g)
    new = g.copy()
    transitions = set()
    for pid, q in g.pairs():
        for o in m.outcomes(pid, q, view):
            transitions.add(_transition(pid, q, o))
            m.join_outcome(new, pid, o)
    return new, transitions


def init_abs(program: S.Program, config: AbstractionConfig) -> GlobalAbsState:
    return AbstractMachine(program, config).init()


# ---------------------------------------------------------------------------
# Abstraction of concrete states


class Abstractor:
    """Pointwise abstraction of concrete machine components."""

    def __init__(self, config: AbstractionConfig):
        self.config = config
        self._env_cache: dict = {}

    def pid(self, p: Pid) -> Pid:
        return Pid(p.loc, self.config.time.alpha(p.time))

    def vaddr(self, a: VAddr) -> VAddr:
        return VAddr(self.pid(a.pid), a.var, self.config.data.alpha(a.data), self.config.time.alpha(a.time))

    def env(self, env: Env) -> Env:
        hit = self._env_cache.get(env)
        if hit is None:
            hit = tuple((k, self.vaddr(a)) for k, a in env)
            self._env_cache[env] = hit
        return hit

    def value(self, d: Value) -> Value:
        if isinstance(d, Pid):
            return self.pid(d)
        return Closure(d.loc, self.env(d.env))

    def kaddr(self, a: KontAddr) -> KontAddr:
        if a is STAR:
            return STAR
        return KAddr(self.pid(a.pid), a.loc, self.env(a.env), self.config.time.alpha(a.time))

    def kont(self, k: Kont) -> Kont:
        if k is STOP:
            return STOP
        return Arg(k.index, k.call, tuple(self.value(d) for d in k.done), self.env(k.env), self.kaddr(k.next))

    def proc(self, q: ProcState) -> ProcState:
        c = q.control
        if isinstance(c, Pid):
            c = self.pid(c)
        return ProcState(c, self.env(q.env), self.kaddr(q.kont), self.config.time.alpha(q.time))

    def effect(self, o) -> Optional[Effect]:
        """Abstract effect of a concrete :class:`machine.Outcome`."""
        if o.received is not None:
            return RecvEffect(self.value(o.received))
        if o.sent is not None:
            return SendEffect(self.pid(o.sent[0]), self.value(o.sent[1]))
        if o.child is not None:
            return SpawnEffect(self.pid(o.child[0]), self.proc(o.child[1]))
        return None

    def transition(self, t) -> AbsTransition:
        """Abstraction of a concrete :class:`machine.Transition`."""
        return AbsTransition(self.pid(t.pid), self.proc(t.before), self.proc(t.after), t.rule, self.effect(t.outcome))

    def state(self, s: State) -> GlobalAbsState:
        g = GlobalAbsState()
        for p, q in s.procs.items():
            g.procs.setdefault(self.pid(p), set()).add(self.proc(q))
        mb = self.config.mailbox
        for p, m in s.mailboxes.items():
            ap = self.pid(p)
            g.mailboxes[ap] = mb.join(g.mailboxes.get(ap, mb.bottom), mb.alpha(m, self.value))
        for a, d in s.vstore.items():
            g.vstore.setdefault(self.vaddr(a), set()).add(self.value(d))
        for a, k in s.kstore.items():
            g.kstore.setdefault(self.kaddr(a), set()).add(self.kont(k))
        return g

    def written(self, t) -> GlobalAbsState:
        """Abstraction of the components a concrete step writes.

        ``alpha(after) <= alpha(before) | written(t)`` pointwise, since every
        other component is either unchanged or shrinks.
        """
        g = GlobalAbsState()
        o = t.outcome
        g.procs[self.pid(t.pid)] = {self.proc(o.after)}
        mb = self.config.mailbox
        if o.sent is not None:
            g.mailboxes[self.pid(o.sent[0])] = mb.alpha((o.sent[1],), self.value)
        if o.child is not None:
            child, child_q = o.child
            g.procs.setdefault(self.pid(child), set()).add(self.proc(child_q))
            g.mailboxes.setdefault(self.pid(child), mb.bottom)
        for a, d in o.vwrites:
            g.vstore.setdefault(self.vaddr(a), set()).add(self.value(d))
        for a, k in o.kwrites:
            g.kstore.setdefault(self.kaddr(a), set()).add(self.kont(k))
        return g


def alpha_cfa(state: State, config: AbstractionConfig) -> GlobalAbsState:
    return Abstractor(config).state(state)
