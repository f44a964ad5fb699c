"""Vector addition systems and coverability.

Markings and rule vectors are sparse ``{place_name: int}`` dicts at the API
boundary and dense tuples inside the engines.  Coverability is decided by the
classic backward algorithm for well-structured systems: the set of markings
that can reach the upward closure of the target is itself upward closed, and
is computed as a finite antichain of minimal elements.
"""

from __future__ import annotations

import heapq
import itertools
import json
import re
from fractions import Fraction
from math import gcd
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.optimize import linprog

from .acsgen import ACS, ACSRule, Place, StatePlace, rule_delta

DEFAULT_LIMIT = 1_000_000
_FAR = 1 << 40

SparseVec = dict[str, int]


class VASFormatError(ValueError):
    pass


@dataclass(frozen=True)
class VASRule:
    name: str
    delta: tuple[tuple[str, int], ...]  # sorted by place name, no zeros

    def as_dict(self) -> SparseVec:
        return dict(self.delta)


@dataclass
class VAS:
    places: list[str]
    rules: list[VASRule]
    # optional descriptions of rules, e.g. the ACS rule they encode
    notes: dict[str, str] = field(default_factory=dict, compare=False)
    # optional hints: sets of places whose total might be invariant-bounded
    groups: list[frozenset[str]] = field(default_factory=list, compare=False)

    def __post_init__(self):
        self.index = {p: i for i, p in enumerate(self.places)}
        if len(self.index) != len(self.places):
            raise ValueError("duplicate place names")
        for r in self.rules:
            for p, _ in r.delta:
                if p not in self.index:
                    raise ValueError(f"rule {r.name} mentions unknown place {p}")

    def dense(self, m: SparseVec) -> tuple[int, ...]:
        v = [0] * len(self.places)
        for p, c in m.items():
            if p not in self.index:
                if c:
                    raise KeyError(p)
                continue
            v[self.index[p]] = c
        return tuple(v)

    def sparse(self, v: Sequence[int]) -> SparseVec:
        return {p: c for p, c in zip(self.places, v) if c}

    def rule(self, name: str) -> VASRule:
        for r in self.rules:
            if r.name == name:
                return r
        raise KeyError(name)


@dataclass(frozen=True)
class CoverQuery:
    target: tuple[tuple[str, int], ...]
    expectation: Optional[str] = None

    @classmethod
    def of(cls, target: SparseVec, expectation: Optional[str] = None) -> "CoverQuery":
        items = tuple(sorted((p, c) for p, c in target.items() if c))
        if any(c < 0 for _, c in items):
            raise ValueError("target entries must be non-negative")
        if not items:
            raise ValueError("target must have a positive entry")
        return cls(items, expectation)

    def as_dict(self) -> SparseVec:
        return dict(self.target)


def make_rule(name: str, delta: SparseVec) -> VASRule:
    return VASRule(name, tuple(sorted((p, c) for p, c in delta.items() if c)))


# ---------------------------------------------------------------------------
# From ACS


@dataclass
class Encoding:
    """A VAS together with its initial marking and the place naming used."""

    vas: VAS
    init: SparseVec
    place_names: dict[Place, str]
    # VAS rule name -> ACS rule; the second half of a split rule maps to None
    acs_rules: dict[str, Optional[ACSRule]] = field(default_factory=dict)

    def acs_run(self, witness: Iterable[str]) -> list[ACSRule]:
        return [r for r in (self.acs_rules[w] for w in witness) if r is not None]


def acs_to_vas(acs: ACS) -> tuple[VAS, SparseVec]:
    enc = encode(acs)
    return enc.vas, enc.init


def encode(acs: ACS) -> Encoding:
    names = acs.names()
    place_names = {pl: _safe(names.place(pl)) for pl in acs.places()}
    if len(set(place_names.values())) != len(place_names):
        raise ValueError("place names are not unique")
    rules = []
    notes = {}
    acs_rules = sorted(
        acs.rules,
        key=lambda r: (names.pid(r.pid_class), names.state(r.pid_class, r.before),
                       names.label(r.label), names.state(r.pid_class, r.after)),
    )
    aux_places = []
    by_name: dict[str, Optional[ACSRule]] = {}
    for i, r in enumerate(acs_rules):
        name = f"r{i}"
        note = (
            f"{names.pid(r.pid_class)}: {names.state(r.pid_class, r.before)}"
            f" --{names.label(r.label)}--> {names.state(r.pid_class, r.after)}"
        )
        vector = rule_delta(r)
        delta = {place_names[pl]: c for pl, c in vector.items()}
        by_name[name] = r
        if vector.get(StatePlace(r.pid_class, r.before), 0) >= 0:
            # The vector cancels on the rule's own source state (a self-loop,
            # or a spawn into the parent's state) and would no longer require
            # a process there; route it through a private place.
            here = place_names[StatePlace(r.pid_class, r.before)]
            aux = f"{here}~{name}"
            aux_places.append(aux)
            # rN parks the process, rN' applies the rule's effect
            delta[here] = delta.get(here, 0) + 1
            delta[aux] = -1
            rules.append(make_rule(name, {here: -1, aux: 1}))
            rules.append(make_rule(name + "'", delta))
            by_name[name] = None
            by_name[name + "'"] = r
            notes[name] = note + " (guard)"
            notes[name + "'"] = note + " (effect)"
            continue
        rules.append(make_rule(name, delta))
        notes[name] = note
    places = sorted(list(place_names.values()) + aux_places)
    by_class: dict = {}
    for pl, name in place_names.items():
        if isinstance(pl, StatePlace):
            by_class.setdefault(pl.pid_class, set()).add(name)
    groups = [frozenset(g) for _, g in sorted(by_class.items(), key=lambda kv: repr(kv[0]))]
    vas = VAS(places, rules, notes, groups)
    init = {place_names[StatePlace(acs.init_pid, acs.init_state)]: 1}
    return Encoding(vas, init, place_names, by_name)


def _safe(name: str) -> str:
    return re.sub(r"\s+", "_", name)


# ---------------------------------------------------------------------------
# Semantics


def step(vas: VAS, marking: SparseVec, rule: VASRule | str) -> Optional[SparseVec]:
    if isinstance(rule, str):
        rule = vas.rule(rule)
    out = dict(marking)
    for p, d in rule.delta:
        c = out.get(p, 0) + d
        if c < 0:
            return None
        out[p] = c
    return {p: c for p, c in out.items() if c}


def covers(marking: SparseVec, target: SparseVec) -> bool:
    return all(marking.get(p, 0) >= c for p, c in target.items())


class _Packed:
    """Markings packed into one integer, one lane per place.

    Each lane holds ``GUARD + count``; adding a rule's packed delta borrows
    from a lane's guard bit exactly when that count would go negative, so
    enabledness is a single mask test.  Lanes are wide enough for the counts
    a bounded search can produce.
    """

    WIDTH = 40

    def __init__(self, vas: VAS):
        self.vas = vas
        self.n = len(vas.places)
        self.guard = sum(1 << (self.WIDTH * i + self.WIDTH - 1) for i in range(self.n))
        self.lane = (1 << (self.WIDTH - 1)) - 1

    def pack(self, dense: Sequence[int]) -> int:
        return self.guard + sum(c << (self.WIDTH * i) for i, c in enumerate(dense))

    def unpack(self, v: int) -> tuple[int, ...]:
        return tuple((v >> (self.WIDTH * i)) & self.lane for i in range(self.n))

    def delta(self, r: VASRule) -> int:
        return sum(d << (self.WIDTH * self.vas.index[p]) for p, d in r.delta)

    def covers(self, v: int, target: int) -> bool:
        # target is packed without guard bits
        return (v - target) & self.guard == self.guard


def _bfs(vas: VAS, init: SparseVec, node_budget: int, target: Optional[SparseVec] = None):
    """Breadth-first search over packed markings; stops early once a marking
    covering ``target`` is seen.  Returns ``(seen, exhausted, hit)``."""
    if node_budget <= 0:
        raise ValueError("node_budget must be positive")
    pk = _Packed(vas)
    deltas = [d for d in (pk.delta(r) for r in vas.rules) if d]
    guard = pk.guard
    goal = None if target is None else pk.pack(vas.dense(target)) - guard
    start = pk.pack(vas.dense(init))
    seen = {start: None}
    if goal is not None and pk.covers(start, goal):
        return pk, list(seen), False, True
    queue = deque([start])
    while queue:
        v = queue.popleft()
        for d in deltas:
            w = v + d
            if w & guard != guard or w in seen:
                continue
            if len(seen) >= node_budget:
                return pk, list(seen), False, False
            seen[w] = None
            if goal is not None and (w - goal) & guard == guard:
                return pk, list(seen), False, True
            queue.append(w)
    return pk, list(seen), True, False


def forward_explore(vas: VAS, init: SparseVec, node_budget: int):
    """Breadth-first enumeration of reachable markings.

    Returns ``(markings, exhausted)`` where ``exhausted`` is true when the
    whole reachable set was enumerated within the budget.  Markings are in
    BFS order.
    """
    pk, seen, exhausted, _ = _bfs(vas, init, node_budget)
    return [vas.sparse(pk.unpack(v)) for v in seen], exhausted


def forward_cover(vas: VAS, init: SparseVec, target: SparseVec, node_budget: int) -> Optional[bool]:
    """The same search used as a coverability oracle: true once a covering
    marking is found, false if the reachable set is exhausted without one,
    ``None`` if the budget runs out first."""
    _, _, exhausted, hit = _bfs(vas, init, node_budget, target)
    if hit:
        return True
    return False if exhausted else None


def _dense_delta(vas: VAS, r: VASRule) -> tuple[tuple[int, int], ...]:
    return tuple((vas.index[p], d) for p, d in r.delta)


def _apply(v: tuple[int, ...], delta) -> Optional[tuple[int, ...]]:
    w = list(v)
    for i, d in delta:
        w[i] += d
        if w[i] < 0:
            return None
    return tuple(w)


# ---------------------------------------------------------------------------
# Backward coverability


COVERABLE = "COVERABLE"
UNCOVERABLE = "UNCOVERABLE"
UNKNOWN = "UNKNOWN"


@dataclass
class CoverResult:
    verdict: str
    witness: list[str] = field(default_factory=list)  # rule names, replayable from init
    final: Optional[SparseVec] = None  # marking reached by the witness
    target: Optional[SparseVec] = None  # the target that was covered
    basis: list[SparseVec] = field(default_factory=list)  # certificate when uncoverable
    explored: int = 0

    @property
    def coverable(self) -> bool:
        return self.verdict == COVERABLE


def coverable(vas: VAS, init: SparseVec, query: CoverQuery, limit: int = DEFAULT_LIMIT) -> CoverResult:
    return coverable_any(vas, init, [query], limit)


def coverable_any(vas: VAS, init: SparseVec, queries: Iterable[CoverQuery],
                  limit: int = DEFAULT_LIMIT) -> CoverResult:
    """Decide whether some marking covering one of the targets is reachable.

    The backward search starts from all targets at once; the upward closure
    of their union is what gets saturated.
    """
    engine = _Backward(vas, init, limit)
    return engine.run([vas.dense(q.as_dict()) for q in queries])


class _Backward:
    def __init__(self, vas: VAS, init: SparseVec, limit: int, use_invariants: bool = True):
        self.vas = vas
        self.init = vas.dense(init)
        self.limit = limit
        self.n = len(vas.places)
        self.deltas = [_dense_delta(vas, r) for r in vas.rules]
        self.dist = self._distances()
        self.markable = self.dist < _FAR
        self.invariants = invariants(vas, init) if use_invariants else []
        if self.invariants:
            self.inv_matrix = np.array([y for y, _ in self.invariants], dtype=np.int64)
            self.inv_bounds = np.array([b for _, b in self.invariants], dtype=np.int64)

    def _distances(self) -> np.ndarray:
        """For each place, a lower-bound-style estimate of how many rule
        firings it takes from init to mark it; ``_FAR`` if it can never be
        marked (rules are assumed to fire as soon as all their inputs are
        markable, which over-approximates markability)."""
        dist = np.where(np.array(self.init) > 0, 0, _FAR).astype(np.int64)
        changed = True
        while changed:
            changed = False
            for d in self.deltas:
                pre = [dist[i] for i, c in d if c < 0]
                if any(x >= _FAR for x in pre):
                    continue
                reach = max(pre, default=0) + 1
                for i, c in d:
                    if c > 0 and reach < dist[i]:
                        dist[i] = reach
                        changed = True
        return dist

    def _feasible(self, m: np.ndarray) -> bool:
        if (m[~self.markable] > 0).any():
            return False
        if self.invariants and (self.inv_matrix @ m > self.inv_bounds).any():
            return False
        return True

    def run(self, targets: list[tuple[int, ...]]) -> CoverResult:
        init = np.array(self.init, dtype=np.int64)
        basis = _Antichain(self.n)
        parent: dict[tuple[int, ...], Optional[tuple[int, tuple[int, ...]]]] = {}
        # best-first by estimated distance from init; the saturated
        # antichain does not depend on the order
        heap: list[tuple[int, int, tuple[int, ...]]] = []
        counter = itertools.count()

        def insert(m: np.ndarray, link) -> Optional[tuple[int, ...]]:
            key = basis.insert(m)
            if key is None:
                return None
            parent.setdefault(key, link)
            heapq.heappush(heap, (int(self.dist @ m), next(counter), key))
            return key

        for t in targets:
            tv = np.array(t, dtype=np.int64)
            if not self._feasible(tv):
                continue
            key = insert(tv, None)
            if key is not None and (tv <= init).all():
                return self._witness(key, parent, 0)
        explored = 0
        while heap:
            _, _, b = heapq.heappop(heap)
            if not basis.alive(b):
                continue
            explored += 1
            if basis.inserted > self.limit:
                return CoverResult(UNKNOWN, explored=explored)
            for ri, d in enumerate(self.deltas):
                if not any(c > 0 and b[i] > 0 for i, c in d):
                    continue
                m = np.array(b, dtype=np.int64)
                for i, c in d:
                    m[i] = max(b[i] - c, 0) if c > 0 else b[i] - c
                if not self._feasible(m):
                    continue
                key = insert(m, (ri, b))
                if key is not None and (m <= init).all():
                    return self._witness(key, parent, explored)
        certificate = sorted((self.vas.sparse(k) for k in basis.elements()), key=lambda s: sorted(s.items()))
        return CoverResult(UNCOVERABLE, basis=certificate, explored=explored)

    def _witness(self, m, parent, explored) -> CoverResult:
        names = []
        cur = self.init
        node = m
        while parent[node] is not None:
            ri, nxt = parent[node]
            cur = _apply(cur, self.deltas[ri])
            if cur is None:
                raise AssertionError("witness replay failed")
            names.append(self.vas.rules[ri].name)
            node = nxt
        target = self.vas.sparse(node)
        final = self.vas.sparse(cur)
        if not covers(final, target):
            raise AssertionError("witness does not reach the target")
        return CoverResult(COVERABLE, witness=names, final=final, target=target, explored=explored)


class _Antichain:
    """Minimal elements of an upward-closed set of markings."""

    def __init__(self, n: int):
        self.rows = np.zeros((64, n), dtype=np.int64)
        self.live = np.zeros(64, dtype=bool)
        self.keys: list[tuple[int, ...]] = []
        self.index: dict[tuple[int, ...], int] = {}
        self.size = 0
        self.inserted = 0

    def alive(self, key) -> bool:
        i = self.index.get(key)
        return i is not None and bool(self.live[i])

    def insert(self, m: np.ndarray) -> Optional[tuple[int, ...]]:
        """Add ``m`` unless it is already covered; drop elements above it."""
        rows, live = self.rows[: self.size], self.live[: self.size]
        if self.size:
            if ((rows <= m).all(axis=1) & live).any():
                return None
            above = (rows >= m).all(axis=1) & live
            if above.any():
                self.live[: self.size][above] = False
        if self.size == len(self.rows):
            self._grow()
        key = tuple(int(x) for x in m)
        self.rows[self.size] = m
        self.live[self.size] = True
        self.index[key] = self.size
        self.keys.append(key)
        self.size += 1
        self.inserted += 1
        return key

    def _grow(self) -> None:
        live = self.live[: self.size]
        if live.sum() * 2 < self.size:
            # compact instead of growing when most rows are dead
            keep = np.flatnonzero(live)
            self.rows[: len(keep)] = self.rows[keep]
            self.keys = [self.keys[i] for i in keep]
            self.live[:] = False
            self.live[: len(keep)] = True
            self.size = len(keep)
            self.index = {k: i for i, k in enumerate(self.keys)}
            return
        self.rows = np.vstack([self.rows, np.zeros_like(self.rows)])
        self.live = np.concatenate([self.live, np.zeros_like(self.live)])

    def elements(self) -> list[tuple[int, ...]]:
        return [k for i, k in enumerate(self.keys) if self.live[i]]


def invariants(vas: VAS, init: SparseVec, max_places: int = 2000) -> list[tuple[tuple[int, ...], int]]:
    """Integer vectors ``y >= 0`` with ``y . r <= 0`` for every rule, paired
    with the bound ``y . init``.

    Along any run ``y . marking`` never increases, so no marking with a
    larger weighted sum is reachable.  One linear program per place looks
    for the invariant giving that place the tightest bound; solutions are
    rounded to rationals and re-checked exactly before use.
    """
    n = len(vas.places)
    if n == 0 or n > max_places or not vas.rules:
        return []
    m0 = np.array(vas.dense(init), dtype=float)
    R = np.zeros((len(vas.rules), n))
    for j, r in enumerate(vas.rules):
        for p, d in r.delta:
            R[j, vas.index[p]] = d
    exact_rules = [_dense_delta(vas, r) for r in vas.rules]
    init_dense = vas.dense(init)
    found: dict[tuple[int, ...], int] = {}
    covered = np.zeros(n, dtype=bool)
    for p in range(n):
        if covered[p]:
            continue
        bounds = [(0, None)] * n
        bounds[p] = (1, None)
        # tie-break towards sparse invariants
        res = linprog(m0 + 1e-4, A_ub=R, b_ub=np.zeros(len(vas.rules)), bounds=bounds, method="highs")
        if res.status != 0:
            continue
        y = _integral(res.x)
        if y is None or not all(sum(y[i] * d for i, d in r) <= 0 for r in exact_rules):
            continue
        bound = sum(a * b for a, b in zip(y, init_dense))
        found.setdefault(y, bound)
        covered |= np.array(y) > 0
    return sorted(found.items())


def _integral(x) -> Optional[tuple[int, ...]]:
    fracs = [Fraction(float(v)).limit_denominator(1000) if v > 1e-9 else Fraction(0) for v in x]
    den = 1
    for f in fracs:
        den = den * f.denominator // gcd(den, f.denominator)
    ys = tuple(int(f * den) for f in fracs)
    return ys if any(ys) else None


def replay(vas: VAS, init: SparseVec, witness: Iterable[str]) -> Optional[SparseVec]:
    m: Optional[SparseVec] = dict(init)
    for name in witness:
        m = step(vas, m, name)
        if m is None:
            return None
    return m


# ---------------------------------------------------------------------------
# Text and JSON formats


def dumps_text(vas: VAS, init: Optional[SparseVec] = None,
               targets: Iterable[CoverQuery] = ()) -> str:
    lines = [f"place {p}" for p in vas.places]
    for r in vas.rules:
        note = vas.notes.get(r.name)
        if note:
            lines.append(f"# {note}")
        deltas = " ".join(f"{p}{'+' if d > 0 else '-'}{abs(d)}" for p, d in r.delta)
        lines.append(f"rule {r.name}: {deltas}".rstrip())
    if init is not None:
        lines.append("init " + " ".join(f"{p}={c}" for p, c in sorted(init.items()) if c))
    for q in targets:
        lines.append("target " + " ".join(f"{p}={c}" for p, c in q.target))
    return "\n".join(lines) + "\n"


_DELTA_RE = re.compile(r"^(?P<place>\S+?)(?P<sign>[+-])(?P<n>\d+)$")
_ASSIGN_RE = re.compile(r"^(?P<place>\S+)=(?P<n>\d+)$")


def loads_text(text: str) -> tuple[VAS, Optional[SparseVec], list[CoverQuery]]:
    places: list[str] = []
    rules: list[VASRule] = []
    init: Optional[SparseVec] = None
    targets: list[CoverQuery] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        head, _, rest = line.partition(" ")
        if head == "place":
            if not rest or " " in rest.strip():
                raise VASFormatError(f"line {lineno}: bad place declaration")
            places.append(rest.strip())
        elif head == "rule":
            name, colon, body = rest.partition(":")
            if not colon or not name.strip():
                raise VASFormatError(f"line {lineno}: expected 'rule <name>: ...'")
            delta: SparseVec = {}
            for tok in body.split():
                m = _DELTA_RE.match(tok)
                if m is None:
                    raise VASFormatError(f"line {lineno}: bad delta {tok!r}")
                n = int(m["n"]) * (1 if m["sign"] == "+" else -1)
                delta[m["place"]] = delta.get(m["place"], 0) + n
            rules.append(make_rule(name.strip(), delta))
        elif head in ("init", "target"):
            vec: SparseVec = {}
            for tok in rest.split():
                m = _ASSIGN_RE.match(tok)
                if m is None:
                    raise VASFormatError(f"line {lineno}: bad assignment {tok!r}")
                vec[m["place"]] = int(m["n"])
            if head == "init":
                init = vec
            else:
                targets.append(CoverQuery.of(vec))
        else:
            raise VASFormatError(f"line {lineno}: unknown directive {head!r}")
    try:
        vas = VAS(places, rules)
    except ValueError as e:
        raise VASFormatError(str(e)) from None
    return vas, init, targets


def to_json(vas: VAS, init: Optional[SparseVec] = None, targets: Iterable[CoverQuery] = ()) -> dict:
    out: dict = {
        "places": list(vas.places),
        "rules": [{"name": r.name, "delta": dict(r.delta)} for r in vas.rules],
    }
    if init is not None:
        out["init"] = dict(sorted(init.items()))
    targets = list(targets)
    if targets:
        out["targets"] = [dict(q.target) for q in targets]
    return out


def from_json(data: dict) -> tuple[VAS, Optional[SparseVec], list[CoverQuery]]:
    vas = VAS(list(data["places"]), [make_rule(r["name"], r["delta"]) for r in data["rules"]])
    init = data.get("init")
    targets = [CoverQuery.of(t) for t in data.get("targets", [])]
    return vas, init, targets


def dumps_json(vas: VAS, init=None, targets=()) -> str:
    return json.dumps(to_json(vas, init, targets), sort_keys=True, indent=1)
