"""Pluggable abstractions of data, time and mailboxes.

Each abstraction pairs an abstraction map from the concrete domain with the
abstract counterparts of the machine's auxiliary operations:

* data: ``alpha`` on resolved terms and ``resolve_hat`` on abstract values;
* time: ``alpha`` on contours, ``tick_hat`` and ``new_pid_hat``;
* mailboxes: ``alpha``, ``enq_hat`` and ``mmatch_hat`` plus a lattice
  structure (``bottom``, ``leq``, ``join``).

Operations that look through the abstract store take a *view*: any object
with a ``nodes`` list (the program's labelled nodes) and a ``values(addr)``
method returning the abstract values stored at a value address.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional, Protocol

from . import syntax as S
from .machine import (
    WILD, Closure, Contour, CTerm, Data, Pid, Value, env_get,
)

RESOLVE_LIMIT = 10_000
MAX_DATA_DEPTH = 3

Substitution = tuple[tuple[str, Value], ...]  # sorted by variable


class StoreView(Protocol):
    nodes: list

    def values(self, addr) -> Iterable[Value]: ...


class DictView:
    """A store view over a plain ``addr -> set of values`` mapping."""

    def __init__(self, nodes, store):
        self.nodes = nodes
        self.store = store

    def values(self, addr):
        return self.store.get(addr, ())


# ---------------------------------------------------------------------------
# Data


class DataAbstraction:
    depth: int = 0

    def alpha(self, data: Data) -> Data:
        raise NotImplementedError

    def resolve_hat(self, view: StoreView, value: Value) -> frozenset[Data]:
        raise NotImplementedError

    def carrier(self, sigma: dict[str, int]) -> Iterator[Data]:
        raise NotImplementedError


class DataTrivial(DataAbstraction):
    """Every datum is abstracted to ``_``."""

    depth = 0

    def alpha(self, data):
        return WILD

    def resolve_hat(self, view, value):
        return frozenset((WILD,))

    def carrier(self, sigma):
        yield WILD

    def __repr__(self) -> str:
        return "data_trivial()"

    def __eq__(self, other):
        return isinstance(other, DataTrivial)

    def __hash__(self):
        return hash("data_trivial")


class DataDepth(DataAbstraction):
    """Terms cut off below constructor depth ``depth``; pids and functions are ``_``."""

    def __init__(self, depth: int):
        if depth < 0:
            raise ValueError("depth must be non-negative")
        if depth > MAX_DATA_DEPTH:
            raise ValueError(f"data depth above {MAX_DATA_DEPTH} is not supported")
        self.depth = depth

    def __repr__(self) -> str:
        return f"data_depth({self.depth})"

    def __eq__(self, other):
        return isinstance(other, DataDepth) and other.depth == self.depth

    def __hash__(self):
        return hash(("data_depth", self.depth))

    def alpha(self, data: Data) -> Data:
        return truncate(data, self.depth)

    def resolve_hat(self, view: StoreView, value: Value) -> frozenset[Data]:
        out = _resolve_depth(view, value, self.depth)
        return out if out is not None else frozenset((WILD,))

    def carrier(self, sigma: dict[str, int]) -> Iterator[Data]:
        return iter(enumerate_terms(sigma, self.depth))


def truncate(data: Data, depth: int) -> Data:
    if depth == 0 or not isinstance(data, CTerm):
        return WILD
    return CTerm(data.name, tuple(truncate(a, depth - 1) for a in data.args))


def _resolve_depth(view: StoreView, value: Value, depth: int) -> Optional[frozenset[Data]]:
    # None signals that the result set grew beyond RESOLVE_LIMIT
    if depth == 0 or not isinstance(value, Closure):
        return frozenset((WILD,))
    node = view.nodes[value.loc]
    if not isinstance(node, S.Ctor):
        return frozenset((WILD,))
    choices = []
    size = 1
    for a in node.args:
        alts: set[Data] = set()
        for d in view.values(env_get(value.env, a.name)):
            sub = _resolve_depth(view, d, depth - 1)
            if sub is None:
                return None
            alts |= sub
        if not alts:
            return frozenset()
        size *= len(alts)
        if size > RESOLVE_LIMIT:
            return None
        choices.append(sorted(alts, key=repr))
    return frozenset(CTerm(node.name, combo) for combo in itertools.product(*choices))


def enumerate_terms(sigma: dict[str, int], depth: int) -> list[Data]:
    """All elements of the depth-bounded term domain, ``_`` first."""
    if depth == 0:
        return [WILD]
    smaller = enumerate_terms(sigma, depth - 1)
    out: list[Data] = [WILD]
    for name in sorted(sigma):
        for combo in itertools.product(smaller, repeat=sigma[name]):
            out.append(CTerm(name, combo))
    return out


def count_terms(sigma: dict[str, int], depth: int) -> int:
    if depth == 0:
        return 1
    smaller = count_terms(sigma, depth - 1)
    return 1 + sum(smaller ** arity for arity in sigma.values())


def data_trivial() -> DataAbstraction:
    return DataTrivial()


def data_depth(depth: int, sigma: Optional[dict[str, int]] = None) -> DataAbstraction:
    # sigma only matters for carrier enumeration, which takes it explicitly
    return DataDepth(depth)


# ---------------------------------------------------------------------------
# Time


class TimeAbstraction:
    """Contours truncated to their ``k`` most recent labels."""

    def __init__(self, k: int):
        if k < 0:
            raise ValueError("k must be non-negative")
        self.k = k

    def __repr__(self) -> str:
        return f"time_kcfa({self.k})"

    def __eq__(self, other):
        return isinstance(other, TimeAbstraction) and other.k == self.k

    def __hash__(self):
        return hash(("kcfa", self.k))

    t0_hat: Contour = ()

    def alpha(self, t: Contour) -> Contour:
        return t[: self.k]

    def tick_hat(self, loc: int, t: Contour) -> Contour:
        return ((loc,) + t)[: self.k]

    def new_pid_hat(self, parent: Pid, spawn_loc: int, t: Contour) -> Pid:
        return Pid(spawn_loc, (t + (parent.loc,) + parent.time)[: self.k])

    def carrier(self, labels: Iterable[int]) -> Iterator[Contour]:
        labels = sorted(labels)
        for n in range(self.k + 1):
            yield from itertools.product(labels, repeat=n)

    def carrier_size(self, n_labels: int) -> int:
        return sum(n_labels ** n for n in range(self.k + 1))


def time_kcfa(k: int) -> TimeAbstraction:
    return TimeAbstraction(k)


# ---------------------------------------------------------------------------
# Matching


def subst_merge(a: Substitution, b: Substitution) -> Optional[Substitution]:
    merged = dict(a)
    for k, v in b:
        if k in merged and merged[k] != v:
            return None
        merged[k] = v
    return tuple(sorted(merged.items(), key=lambda kv: kv[0]))


def abs_match(view: StoreView, pat: S.Pattern, value: Value) -> frozenset[Substitution]:
    """All abstract substitutions under which ``pat`` may match ``value``.

    Pattern variables always match (a bound variable is not compared against
    its binding); constructor arguments are looked up in the store and every
    stored alternative is tried.
    """
    if isinstance(pat, S.PVar):
        return frozenset({((pat.name, value),)})
    if isinstance(pat, S.PCtor):
        if not isinstance(value, Closure):
            return frozenset()
        node = view.nodes[value.loc]
        if not isinstance(node, S.Ctor) or node.name != pat.name or len(node.args) != len(pat.args):
            return frozenset()
        results: set[Substitution] = {()}
        for sub, arg in zip(pat.args, node.args):
            alts: set[Substitution] = set()
            for d in view.values(env_get(value.env, arg.name)):
                alts |= abs_match(view, sub, d)
            results = {
                m for r in results for a in alts if (m := subst_merge(r, a)) is not None
            }
            if not results:
                break
        return frozenset(results)
    raise TypeError(pat)


def may_fail(view: StoreView, pat: S.Pattern, value: Value) -> bool:
    """Over-approximates whether some concretisation of ``value`` fails to match."""
    if _has_repeat(pat):
        return True
    return _may_fail(view, pat, value)


def _may_fail(view, pat, value) -> bool:
    if isinstance(pat, S.PVar):
        return pat.ref
    if not isinstance(value, Closure):
        return True
    node = view.nodes[value.loc]
    if not isinstance(node, S.Ctor) or node.name != pat.name or len(node.args) != len(pat.args):
        return True
    for sub, arg in zip(pat.args, node.args):
        if any(_may_fail(view, sub, d) for d in view.values(env_get(value.env, arg.name))):
            return True
    return False


def _has_repeat(pat: S.Pattern) -> bool:
    seen: list[str] = []

    def go(p) -> bool:
        if isinstance(p, S.PVar):
            if p.name in seen:
                return True
            seen.append(p.name)
            return False
        return any(go(a) for a in p.args)

    return go(pat)


# ---------------------------------------------------------------------------
# Mailboxes


@dataclass(frozen=True)
class MatchResult:
    index: int  # 1-based pattern index
    subst: Substitution
    mailbox: frozenset
    message: Value


class MailboxSet:
    """Mailboxes as the set of values they have ever held (order and
    multiplicity forgotten, extraction never removes anything)."""

    bottom: frozenset = frozenset()

    def __repr__(self) -> str:
        return "mailbox_set()"

    def __eq__(self, other):
        return isinstance(other, MailboxSet)

    def __hash__(self):
        return hash("mailbox_set")

    def leq(self, a: frozenset, b: frozenset) -> bool:
        return a <= b

    def join(self, a: frozenset, b: frozenset) -> frozenset:
        return a | b

    def alpha(self, mailbox: Iterable, alpha_value) -> frozenset:
        return frozenset(alpha_value(d) for d in mailbox)

    def enq_hat(self, value: Value, mailbox: frozenset) -> frozenset:
        return mailbox | {value}

    def matches(self, view: StoreView, patterns, mailbox: frozenset) -> list[MatchResult]:
        out = []
        for d in sorted(mailbox, key=repr):
            for i, pat in enumerate(patterns):
                for theta in abs_match(view, pat, d):
                    out.append(MatchResult(i + 1, theta, mailbox, d))
        return out

    def mmatch_hat(self, view: StoreView, patterns, mailbox: frozenset):
        return {(r.index, r.subst, r.mailbox) for r in self.matches(view, patterns, mailbox)}


def mailbox_set() -> MailboxSet:
    return MailboxSet()


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AbstractionConfig:
    data: DataAbstraction
    time: TimeAbstraction
    mailbox: MailboxSet
    msg_data: DataAbstraction

    @classmethod
    def standard(cls, program: S.Program, k: int = 0, data_depth_: int = 0,
                 msg_depth: Optional[int] = None) -> "AbstractionConfig":
        """k-CFA time, depth-bounded data, set mailboxes; the message depth
        defaults to the deepest receive pattern of the program."""
        if msg_depth is None:
            msg_depth = program.max_receive_depth
        data = data_trivial() if data_depth_ == 0 else data_depth(data_depth_)
        return cls(data, time_kcfa(k), mailbox_set(), data_depth(msg_depth))

    def describe(self) -> dict:
        return {
            "data": repr(self.data),
            "time": repr(self.time),
            "mailbox": repr(self.mailbox),
            "msg_data": repr(self.msg_data),
        }
