"""Actor communicating systems built from the abstract analysis.

An ACS has one control automaton per pid-class; its rules are labelled
``τ`` (internal step), ``?m`` (receive), ``ι!m`` (send to a pid-class) or
``νι.q`` (spawn a process of class ι starting in state q).  Counting how
many processes of each class sit in each state, and how many copies of each
message wait in each class's mailboxes, gives the vector semantics used by
:mod:`actorcheck.vas`.
"""

from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

from . import syntax as S
from .absdomains import AbstractionConfig
from .analysis import AnalysisResult, RecvEffect, SendEffect, SpawnEffect, Abstractor
from .machine import WILD, CTerm, Data, ErrorCtl, Machine, Pid, ProcState, State, cached_hash

# ---------------------------------------------------------------------------
# Types


@dataclass(frozen=True)
class Tau:
    def __repr__(self) -> str:
        return "tau"


TAU = Tau()


@cached_hash
@dataclass(frozen=True)
class Recv:
    msg: Data


@cached_hash
@dataclass(frozen=True)
class SendTo:
    target: Pid
    msg: Data


@cached_hash
@dataclass(frozen=True)
class Nu:
    child: Pid
    child_state: ProcState


Label = Union[Tau, Recv, SendTo, Nu]


@cached_hash
@dataclass(frozen=True)
class ACSRule:
    pid_class: Pid
    before: ProcState
    label: Label
    after: ProcState


@cached_hash
@dataclass(frozen=True)
class StatePlace:
    pid_class: Pid
    state: ProcState


@cached_hash
@dataclass(frozen=True)
class MsgPlace:
    pid_class: Pid
    msg: Data


Place = Union[StatePlace, MsgPlace]
Marking = Counter  # Place -> count, zero entries omitted


@dataclass
class ACS:
    pid_classes: frozenset[Pid]
    states: frozenset[ProcState]
    messages: frozenset[Data]
    rules: frozenset[ACSRule]
    init_pid: Pid
    init_state: ProcState
    program: Optional[S.Program] = field(default=None, compare=False, repr=False)
    # for a simplified ACS: each rule's run of rules in the original ACS
    origin: Optional[dict] = field(default=None, compare=False, repr=False)

    def state_places(self) -> set[StatePlace]:
        out = {StatePlace(self.init_pid, self.init_state)}
        for r in self.rules:
            out.add(StatePlace(r.pid_class, r.before))
            out.add(StatePlace(r.pid_class, r.after))
            if isinstance(r.label, Nu):
                out.add(StatePlace(r.label.child, r.label.child_state))
        return out

    def message_places(self) -> set[MsgPlace]:
        out = set()
        for r in self.rules:
            if isinstance(r.label, Recv):
                out.add(MsgPlace(r.pid_class, r.label.msg))
            elif isinstance(r.label, SendTo):
                out.add(MsgPlace(r.label.target, r.label.msg))
        return out

    def places(self) -> list[Place]:
        """Places in the support of the rules and the initial marking."""
        return sorted(self.state_places(), key=repr) + sorted(self.message_places(), key=repr)

    @property
    def dimension(self) -> int:
        return len(self.pid_classes) * (len(self.states) + len(self.messages))

    def names(self) -> "Names":
        return Names(self)

    def sorted_rules(self) -> list[ACSRule]:
        return sorted(self.rules, key=repr)

    def stats(self) -> dict:
        return {
            "pid_classes": len(self.pid_classes),
            "states": len(self.states),
            "messages": len(self.messages),
            "rules": len(self.rules),
            "places": len(self.places()),
        }

    def to_json(self) -> dict:
        n = self.names()
        states = []
        for sp in sorted(self.state_places(), key=lambda p: n.place(p)):
            entry = {"pid_class": n.pid(sp.pid_class), "name": n.state(sp.pid_class, sp.state)}
            tag = n.probe_of(sp.state)
            if tag is not None:
                entry["probe"] = tag
            states.append(entry)
        rules = [
            {
                "pid_class": n.pid(r.pid_class),
                "from": n.state(r.pid_class, r.before),
                "label": n.label(r.label),
                "to": n.state(r.pid_class, r.after),
            }
            for r in self.rules
        ]
        rules.sort(key=lambda d: (d["pid_class"], d["from"], d["label"], d["to"]))
        return {
            "pid_classes": sorted(n.pid(p) for p in self.pid_classes),
            "states": states,
            "messages": sorted({show_data(m) for m in self.messages}),
            "rules": rules,
            "init": {"pid_class": n.pid(self.init_pid), "state": n.state(self.init_pid, self.init_state)},
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1)


# ---------------------------------------------------------------------------
# Naming


def show_data(d: Data) -> str:
    """Erlang-style rendering of an abstract datum."""
    if d is WILD:
        return "_"
    if isinstance(d, CTerm):
        if d.name.startswith("tuple") and d.name[5:].isdigit() and len(d.args) == int(d.name[5:]):
            return "{" + ",".join(show_data(a) for a in d.args) + "}"
        if d.name == "nil" and not d.args:
            return "[]"
        if d.name == "cons" and len(d.args) == 2:
            items, tail = [], d
            while isinstance(tail, CTerm) and tail.name == "cons" and len(tail.args) == 2:
                items.append(show_data(tail.args[0]))
                tail = tail.args[1]
            inner = ",".join(items)
            if isinstance(tail, CTerm) and tail.name == "nil" and not tail.args:
                return f"[{inner}]"
            return f"[{inner}|{show_data(tail)}]"
        if not d.args:
            return d.name
        return f"{d.name}({','.join(show_data(a) for a in d.args)})"
    return "_"


class Names:
    """Deterministic, human-readable names for pid-classes, states and places."""

    def __init__(self, acs: ACS):
        self.acs = acs
        self.program = acs.program
        self._pid: dict[Pid, str] = {}
        for p in sorted(acs.pid_classes | {acs.init_pid}, key=repr):
            self._pid[p] = self._pid_name(p)
        by_class: dict[Pid, list[ProcState]] = defaultdict(list)
        for sp in acs.state_places():
            by_class[sp.pid_class].append(sp.state)
        self._state: dict[tuple[Pid, ProcState], str] = {}
        for p, qs in by_class.items():
            counts: Counter = Counter()
            for q in sorted(qs, key=repr):
                base = self._control_name(q)
                counts[base] += 1
                name = base if counts[base] == 1 else f"{base}#{counts[base]}"
                self._state[(p, q)] = name

    def _describe(self, label: int) -> str:
        if self.program is None:
            return f"l{label}"
        return self.program.describe(label).replace(" ", "_")

    def _pid_name(self, p: Pid) -> str:
        if p == self.acs.init_pid:
            return "init"
        base = self._describe(p.loc)
        if p.time:
            base += "<" + ".".join(map(str, p.time)) + ">"
        return base

    def _control_name(self, q: ProcState) -> str:
        c = q.control
        if isinstance(c, int):
            return self._describe(c)
        if isinstance(c, Pid):
            return f"pid({self.pid(c)})"
        if isinstance(c, ErrorCtl):
            return f"error({c.reason},{self._describe(c.loc)})"
        return repr(c)

    def pid(self, p: Pid) -> str:
        if p not in self._pid:
            self._pid[p] = self._pid_name(p)
        return self._pid[p]

    def state(self, p: Pid, q: ProcState) -> str:
        if (p, q) not in self._state:
            self._state[(p, q)] = self._control_name(q) + "#?"
        return self._state[(p, q)]

    def probe_of(self, q: ProcState) -> Optional[str]:
        if self.program is None or not isinstance(q.control, int):
            return None
        return self.program.probe_tag.get(q.control)

    def label(self, lab: Label) -> str:
        if isinstance(lab, Tau):
            return "tau"
        if isinstance(lab, Recv):
            return f"?{show_data(lab.msg)}"
        if isinstance(lab, SendTo):
            return f"{self.pid(lab.target)}!{show_data(lab.msg)}"
        return f"nu {self.pid(lab.child)}.{self.state(lab.child, lab.child_state)}"

    def place(self, pl: Place) -> str:
        if isinstance(pl, StatePlace):
            return f"{self.pid(pl.pid_class)}/{self.state(pl.pid_class, pl.state)}"
        return f"{self.pid(pl.pid_class)}/?{show_data(pl.msg)}"


# ---------------------------------------------------------------------------
# Generation


def generate_acs(result: AnalysisResult) -> ACS:
    """One rule per abstract transition, per abstract message for communication."""
    rules: set[ACSRule] = set()
    messages: set[Data] = set()
    for t in result.transitions:
        eff = t.effect
        if isinstance(eff, RecvEffect):
            for m in result.message_data(eff.msg):
                messages.add(m)
                rules.add(ACSRule(t.pid_class, t.before, Recv(m), t.after))
        elif isinstance(eff, SendEffect):
            for m in result.message_data(eff.msg):
                messages.add(m)
                rules.add(ACSRule(t.pid_class, t.before, SendTo(eff.target, m), t.after))
        elif isinstance(eff, SpawnEffect):
            rules.add(ACSRule(t.pid_class, t.before, Nu(eff.child, eff.child_state), t.after))
        else:
            rules.add(ACSRule(t.pid_class, t.before, TAU, t.after))
    states = frozenset(q for qs in result.state.procs.values() for q in qs)
    return ACS(
        pid_classes=frozenset(result.state.procs),
        states=states,
        messages=frozenset(messages),
        rules=frozenset(rules),
        init_pid=result.init_pid,
        init_state=result.init_state,
        program=result.program,
    )


def message_alpha(machine: Machine, config: AbstractionConfig, state: State, msg) -> Data:
    return config.msg_data.alpha(machine.resolve(state.vstore, msg))


def alpha_acs(state: State, config: AbstractionConfig, program: S.Program) -> Marking:
    """Count processes per (pid-class, state) and messages per (pid-class, message)."""
    ab = Abstractor(config)
    machine = Machine(program)
    out: Marking = Counter()
    for p, q in state.procs.items():
        out[StatePlace(ab.pid(p), ab.proc(q))] += 1
    for p, mailbox in state.mailboxes.items():
        ap = ab.pid(p)
        for d in mailbox:
            out[MsgPlace(ap, message_alpha(machine, config, state, d))] += 1
    return out


def concrete_rule(machine: Machine, ab: Abstractor, config: AbstractionConfig, t) -> ACSRule:
    """The ACS rule simulating a concrete :class:`machine.Transition`."""
    o = t.outcome
    # the data stored at an address is part of the address, so resolving in
    # the post-state gives the same term as in the pre-state
    store_state = t.state
    if o.received is not None:
        label: Label = Recv(message_alpha(machine, config, store_state, o.received))
    elif o.sent is not None:
        label = SendTo(ab.pid(o.sent[0]), message_alpha(machine, config, store_state, o.sent[1]))
    elif o.child is not None:
        label = Nu(ab.pid(o.child[0]), ab.proc(o.child[1]))
    else:
        label = TAU
    return ACSRule(ab.pid(t.pid), ab.proc(t.before), label, ab.proc(t.after))


def rule_delta(r: ACSRule) -> Counter:
    """The vector of a rule: state move plus message/spawn effects."""
    delta: Counter = Counter()
    delta[StatePlace(r.pid_class, r.before)] -= 1
    delta[StatePlace(r.pid_class, r.after)] += 1
    lab = r.label
    if isinstance(lab, Recv):
        delta[MsgPlace(r.pid_class, lab.msg)] -= 1
    elif isinstance(lab, SendTo):
        delta[MsgPlace(lab.target, lab.msg)] += 1
    elif isinstance(lab, Nu):
        delta[StatePlace(lab.child, lab.child_state)] += 1
    return Counter({k: v for k, v in delta.items() if v != 0})


def fire(marking: Marking, r: ACSRule) -> Optional[Marking]:
    """Fire ``r`` if a process sits in its source state (and, for a receive,
    the message is there); ``None`` when it is not enabled."""
    if marking[StatePlace(r.pid_class, r.before)] < 1:
        return None
    if isinstance(r.label, Recv) and marking[MsgPlace(r.pid_class, r.label.msg)] < 1:
        return None
    out = Counter(marking)
    out.update(rule_delta(r))
    return +out


def expand(acs: ACS, rules: Iterable[ACSRule]) -> list[ACSRule]:
    """Rewrite a run of a simplified ACS into the run of the ACS it came from."""
    if acs.origin is None:
        return list(rules)
    return [orig for r in rules for orig in acs.origin[r]]


# ---------------------------------------------------------------------------
# Simplification


def probe_states(acs: ACS) -> set[StatePlace]:
    if acs.program is None:
        return set()
    tags = acs.program.probe_tag
    return {sp for sp in acs.state_places() if isinstance(sp.state.control, int) and sp.state.control in tags}


def default_protected(acs: ACS, keep_comm_endpoints: bool = False) -> set[StatePlace]:
    """Probe states and the initial state; optionally every endpoint of a
    communication or spawn rule as well."""
    out = probe_states(acs) | {StatePlace(acs.init_pid, acs.init_state)}
    if keep_comm_endpoints:
        for r in acs.rules:
            if not isinstance(r.label, Tau):
                out.add(StatePlace(r.pid_class, r.before))
                out.add(StatePlace(r.pid_class, r.after))
                if isinstance(r.label, Nu):
                    out.add(StatePlace(r.label.child, r.label.child_state))
    return out


def simplify(acs: ACS, protected: Optional[Iterable[StatePlace]] = None) -> ACS:
    """Contract unprotected states that only take part in internal steps.

    Two contractions are applied until neither fires, visiting states in a
    fixed order:

    * a state whose only way in is one ``τ`` rule from another state is
      merged into that predecessor (the ``τ`` can always be delayed until
      the process leaves the state);
    * a state whose only way out is one ``τ`` rule to another state is
      merged into that successor (the ``τ`` can always fire immediately).

    Either way, every marking reachable before is matched, on the protected
    places and on all message places, by one reachable after, and
    vice versa, so coverability of targets over those places is unchanged.
    """
    protect = set(default_protected(acs) if protected is None else protected)
    protect.add(StatePlace(acs.init_pid, acs.init_state))
    rules = {r for r in acs.rules if not _tau_loop(r)}
    origin = dict(acs.origin) if acs.origin is not None else {r: (r,) for r in acs.rules}
    order = sorted((sp for sp in acs.state_places() if sp not in protect), key=repr)
    changed = True
    while changed:
        changed = False
        incoming, outgoing = _index(rules)
        for sp in order:
            ins, outs = incoming.get(sp, ()), outgoing.get(sp, ())
            if not ins and not outs:
                continue
            if len(ins) == 1 and _tau_into(ins[0], sp):
                tau = ins[0]
                pred = tau.before
                if pred == sp.state:
                    continue
                rules.discard(tau)
                for r in outs:
                    rules.discard(r)
                    new = ACSRule(r.pid_class, pred, r.label, r.after)
                    origin.setdefault(new, origin[tau] + origin[r])
                    rules.add(new)
            elif len(outs) == 1 and isinstance(outs[0].label, Tau) and outs[0].after != sp.state:
                tau = outs[0]
                rules.discard(tau)
                for r in ins:
                    rules.discard(r)
                    new = _redirect(r, sp, tau.after)
                    # every process the rule puts into sp moves on at once
                    origin.setdefault(new, origin[r] + origin[tau] * rule_delta(r)[sp])
                    rules.add(new)
            else:
                continue
            rules = {r for r in rules if not _tau_loop(r)}
            incoming, outgoing = _index(rules)
            changed = True
    used = {sp.state for sp in _state_places(rules, acs)}
    return ACS(
        pid_classes=acs.pid_classes,
        states=frozenset(used),
        messages=acs.messages,
        rules=frozenset(rules),
        init_pid=acs.init_pid,
        init_state=acs.init_state,
        program=acs.program,
        origin={r: origin[r] for r in rules},
    )


def _index(rules) -> tuple[dict, dict]:
    incoming: dict[StatePlace, list] = defaultdict(list)
    outgoing: dict[StatePlace, list] = defaultdict(list)
    for r in rules:
        outgoing[StatePlace(r.pid_class, r.before)].append(r)
        incoming[StatePlace(r.pid_class, r.after)].append(r)
        if isinstance(r.label, Nu):
            incoming[StatePlace(r.label.child, r.label.child_state)].append(r)
    return incoming, outgoing


def _tau_loop(r: ACSRule) -> bool:
    return isinstance(r.label, Tau) and r.before == r.after


def _tau_into(r: ACSRule, sp: StatePlace) -> bool:
    return isinstance(r.label, Tau) and r.pid_class == sp.pid_class and r.after == sp.state


def _redirect(r: ACSRule, sp: StatePlace, succ: ProcState) -> ACSRule:
    after = succ if (r.pid_class == sp.pid_class and r.after == sp.state) else r.after
    label = r.label
    if isinstance(label, Nu) and label.child == sp.pid_class and label.child_state == sp.state:
        label = Nu(label.child, succ)
    return ACSRule(r.pid_class, r.before, label, after)


def _state_places(rules, acs: ACS) -> set[StatePlace]:
    tmp = ACS(acs.pid_classes, acs.states, acs.messages, frozenset(rules), acs.init_pid, acs.init_state)
    return tmp.state_places()


# ---------------------------------------------------------------------------
# DOT export


def _dot_quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def to_dot(acs: ACS) -> str:
    n = acs.names()
    lines = ["digraph acs {", "  rankdir=LR;"]
    by_class: dict[Pid, set[ProcState]] = defaultdict(set)
    for sp in acs.state_places():
        by_class[sp.pid_class].add(sp.state)
    node_id = lambda p, q: _dot_quote(n.place(StatePlace(p, q)))  # noqa: E731
    for i, p in enumerate(sorted(by_class, key=n.pid)):
        lines.append(f"  subgraph cluster_{i} {{")
        lines.append(f"    label={_dot_quote(n.pid(p))};")
        for q in sorted(by_class[p], key=lambda q: n.state(p, q)):
            attrs = [f"label={_dot_quote(n.state(p, q))}"]
            if p == acs.init_pid and q == acs.init_state:
                attrs.append("shape=doublecircle")
            elif n.probe_of(q) is not None:
                attrs.append("shape=box")
            lines.append(f"    {node_id(p, q)} [{', '.join(attrs)}];")
        lines.append("  }")
    edges = sorted(
        (node_id(r.pid_class, r.before), node_id(r.pid_class, r.after), n.label(r.label))
        for r in acs.rules
    )
    for a, b, lab in edges:
        lines.append(f"  {a} -> {b} [label={_dot_quote(lab)}];")
    lines.append("}")
    return "\n".join(lines) + "\n"
