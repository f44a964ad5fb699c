import json
import random
import time

import pytest
from hypothesis import given, settings, strategies as st

from actorcheck.acsgen import TAU, ACSRule, MsgPlace, Nu, Recv, SendTo, StatePlace
from actorcheck.machine import Pid
from actorcheck.vas import (
    COVERABLE, UNCOVERABLE, UNKNOWN, VAS, CoverQuery, VASFormatError, acs_to_vas, coverable,
    coverable_any, covers, dumps_json, dumps_text, encode, forward_cover, forward_explore,
    from_json, invariants, loads_text, make_rule, replay, step,
)

from conftest import pipeline
from test_acsgen import P0, mini, q


def vas1(*deltas: int) -> VAS:
    return VAS(["p"], [make_rule(f"r{i}", {"p": d}) for i, d in enumerate(deltas)])


# -- step and forward exploration --------------------------------------------------


def test_step_examples():
    v = VAS(["p", "q"], [make_rule("inc", {"p": 1}), make_rule("dec", {"p": -1}),
                         make_rule("move", {"p": -1, "q": 1})])
    assert step(v, {"p": 0}, "inc") == {"p": 1}
    assert step(v, {"p": 0}, "dec") is None
    assert step(v, {"p": 2, "q": 0}, "move") == {"p": 1, "q": 1}


def test_forward_explore_examples():
    assert forward_explore(vas1(-1), {"p": 0}, 100) == ([{}], True)
    markings, exhausted = forward_explore(vas1(1), {}, 5)
    assert len(markings) == 5 and not exhausted
    with pytest.raises(ValueError):
        forward_explore(vas1(1), {}, 0)


def test_forward_cover_agrees_with_enumeration():
    rng = random.Random(1)
    for _ in range(100):
        v, init, target = random_instance(rng, places=4, rules=6, span=1)
        markings, exhausted = forward_explore(v, init, 2000)
        hit = any(covers(m, target.as_dict()) for m in markings)
        answer = forward_cover(v, init, target.as_dict(), 2000)
        if hit:
            assert answer is True
        elif exhausted:
            assert answer is False


# -- coverability --------------------------------------------------------------------


def test_coverable_examples():
    r = coverable(vas1(1), {"p": 0}, CoverQuery.of({"p": 2}))
    assert r.verdict == COVERABLE and r.witness == ["r0", "r0"]
    r = coverable(vas1(-1), {"p": 0}, CoverQuery.of({"p": 1}))
    assert r.verdict == UNCOVERABLE


def test_target_already_covered_by_init():
    r = coverable(vas1(-1), {"p": 3}, CoverQuery.of({"p": 2}))
    assert r.verdict == COVERABLE and r.witness == []


def test_server_error_is_uncoverable():
    p = pipeline("server")
    enc = encode(p.acs)
    bad = p.program.probes["bad"]
    places = [enc.place_names[sp] for sp in p.acs.state_places() if sp.state.control == bad]
    assert places
    r = coverable_any(enc.vas, enc.init, [CoverQuery.of({pl: 1}) for pl in places])
    assert r.verdict == UNCOVERABLE


def test_limit_gives_unknown_not_uncoverable():
    # c can be pumped, but only through many backward rounds
    v = VAS(["a", "b", "c"], [
        make_rule("x", {"a": -1, "b": 2}), make_rule("y", {"b": -1, "c": 2}),
        make_rule("z", {"c": -3, "a": 1}),
    ])
    target = CoverQuery.of({"c": 50})
    assert coverable(v, {"a": 1}, target, limit=100).verdict == UNKNOWN
    res = coverable(v, {"a": 1}, target)
    assert res.verdict == COVERABLE
    check_witness(v, {"a": 1}, target, res)


def random_instance(rng: random.Random, places: int = 6, rules: int = 8, span: int = 2):
    n = rng.randint(1, places)
    names = [f"p{i}" for i in range(n)]
    rs = [
        make_rule(f"t{j}", {p: rng.randint(-span, span) for p in names if rng.random() < 0.5})
        for j in range(rng.randint(1, rules))
    ]
    init = {p: rng.randint(0, 2) for p in names}
    target = {p: rng.randint(0, 3) for p in names}
    if not any(target.values()):
        target[names[0]] = 1
    return VAS(names, rs), {p: c for p, c in init.items() if c}, CoverQuery.of(target)


def check_witness(v, init, target, res):
    final = replay(v, init, res.witness)
    assert final is not None and covers(final, target.as_dict())


def test_random_differential_against_forward_search():
    """Backward answers agree with exhaustive forward search on 500 random VAS."""
    rng = random.Random(2024)
    start = time.perf_counter()
    decided = 0
    for _ in range(500):
        v, init, target = random_instance(rng)
        res = coverable(v, init, target)
        oracle = forward_cover(v, init, target.as_dict(), 100_000)
        if res.verdict == COVERABLE:
            check_witness(v, init, target, res)
        if oracle is not None:
            decided += 1
            assert res.verdict == (COVERABLE if oracle else UNCOVERABLE)
        else:
            assert res.verdict != UNKNOWN
    assert decided >= 250
    assert time.perf_counter() - start < 120


def test_certificate_is_closed_under_predecessors():
    rng = random.Random(7)
    checked = 0
    for _ in range(200):
        v, init, target = random_instance(rng, places=4, rules=5)
        res = coverable(v, init, target)
        if res.verdict != UNCOVERABLE:
            continue
        checked += 1
        basis = [v.dense(b) for b in res.basis]
        init_d = v.dense(init)
        assert not any(all(a <= b for a, b in zip(e, init_d)) for e in basis)
        invs = invariants(v, init)
        markable = markable_places(v, init)
        for e in basis:
            for r in v.rules:
                d = v.dense(r.as_dict())
                if not any(c > 0 and x > 0 for c, x in zip(d, e)):
                    continue
                pred = [max(x - c, 0) if c > 0 else x - c for x, c in zip(e, d)]
                dominated = any(all(a <= b for a, b in zip(f, pred)) for f in basis)
                dominated = dominated or any(sum(y * x for y, x in zip(yv, pred)) > bound for yv, bound in invs)
                dominated = dominated or any(x > 0 and p not in markable for x, p in zip(pred, v.places))
                assert dominated
    assert checked > 20


def markable_places(v: VAS, init) -> set:
    """Places that can hold a token in some run, over-approximated by
    ignoring how many tokens each rule consumes."""
    marked = {p for p, c in init.items() if c}
    changed = True
    while changed:
        changed = False
        for r in v.rules:
            if all(p in marked for p, c in r.delta if c < 0):
                for p, c in r.delta:
                    if c > 0 and p not in marked:
                        marked.add(p)
                        changed = True
    return marked


def test_monotonicity_in_the_initial_marking():
    rng = random.Random(99)
    seen = 0
    while seen < 100:
        v, init, target = random_instance(rng)
        res = coverable(v, init, target)
        if res.verdict != COVERABLE:
            continue
        seen += 1
        bigger = {p: init.get(p, 0) + rng.randint(0, 2) for p in v.places}
        res2 = coverable(v, bigger, target)
        assert res2.verdict == COVERABLE
        check_witness(v, bigger, target, res2)


def test_invariants_bound_reachable_markings():
    rng = random.Random(5)
    for _ in range(60):
        v, init, _ = random_instance(rng, places=4, rules=5)
        invs = invariants(v, init)
        markings, _ = forward_explore(v, init, 3000)
        for y, bound in invs:
            assert all(y_i >= 0 for y_i in y)
            for r in v.rules:
                assert sum(y[v.index[p]] * d for p, d in r.delta) <= 0
            assert bound == sum(y[v.index[p]] * c for p, c in init.items())
            for m in markings:
                assert sum(y[v.index[p]] * c for p, c in m.items()) <= bound


def test_multiple_targets_any_coverable():
    v = vas1(-1)
    r = coverable_any(v, {"p": 1}, [CoverQuery.of({"p": 5}), CoverQuery.of({"p": 1})])
    assert r.verdict == COVERABLE and r.target == {"p": 1}


def test_cover_query_validation():
    with pytest.raises(ValueError):
        CoverQuery.of({"p": 0})
    with pytest.raises(ValueError):
        CoverQuery.of({"p": -1})


# -- from ACS --------------------------------------------------------------------------


P1 = Pid(1, ())


def image(*rules: ACSRule):
    enc = encode(mini(*rules))
    name = {v: k for k, v in enc.place_names.items()}
    out = []
    for r in enc.vas.rules:
        out.append((r.name, {name.get(p, p): c for p, c in r.delta}))
    return enc, out


def test_encode_tau():
    _, rules = image(ACSRule(P0, q(0), TAU, q(1)))
    assert rules == [("r0", {StatePlace(P0, q(0)): -1, StatePlace(P0, q(1)): 1})]


def test_encode_receive():
    _, rules = image(ACSRule(P0, q(0), Recv("m"), q(1)))
    assert rules == [("r0", {StatePlace(P0, q(0)): -1, StatePlace(P0, q(1)): 1, MsgPlace(P0, "m"): -1})]


def test_encode_send():
    _, rules = image(ACSRule(P0, q(0), SendTo(P1, "m"), q(1)))
    assert rules == [("r0", {StatePlace(P0, q(0)): -1, StatePlace(P0, q(1)): 1, MsgPlace(P1, "m"): 1})]


def test_encode_spawn():
    _, rules = image(ACSRule(P0, q(0), Nu(P1, q(5)), q(1)))
    assert rules == [("r0", {StatePlace(P0, q(0)): -1, StatePlace(P0, q(1)): 1, StatePlace(P1, q(5)): 1})]


def test_encode_splits_rules_that_cancel_on_their_source():
    # a receive loop keeps its guard through a private place
    enc, rules = image(ACSRule(P0, q(0), Recv("m"), q(0)))
    (r0, guard), (r1, effect) = rules
    here = StatePlace(P0, q(0))
    aux = next(p for p in guard if p != here)
    assert guard == {here: -1, aux: 1}
    assert effect == {aux: -1, here: 1, MsgPlace(P0, "m"): -1}
    assert enc.acs_run([r0, r1]) == [ACSRule(P0, q(0), Recv("m"), q(0))]
    # a process in its own state spawning a sibling into that same state
    enc, rules = image(ACSRule(P0, q(0), Nu(P0, q(0)), q(0)))
    (_, guard), (_, effect) = rules
    assert guard[StatePlace(P0, q(0))] == -1
    assert effect[StatePlace(P0, q(0))] == 2
    assert replay(enc.vas, {}, ["r0"]) is None


def test_encode_initial_marking_and_places():
    vas, init = acs_to_vas(mini(ACSRule(P0, q(0), SendTo(P0, "m"), q(1))))
    assert sum(init.values()) == 1
    assert len(vas.places) == 3


def test_encoding_keeps_every_acs_rule(bench):
    p = pipeline(bench)
    mapped = [r for r in p.encoding.acs_rules.values() if r is not None]
    assert sorted(mapped, key=repr) == p.acs.sorted_rules()


# -- formats ---------------------------------------------------------------------------


@st.composite
def vases(draw):
    n = draw(st.integers(1, 5))
    places = [f"p{i}" for i in range(n)]
    rules = []
    for j in range(draw(st.integers(0, 6))):
        delta = {p: draw(st.integers(-3, 3)) for p in places}
        rules.append(make_rule(f"r{j}", delta))
    init = {p: draw(st.integers(0, 3)) for p in places}
    init = {p: c for p, c in init.items() if c}
    targets = [CoverQuery.of({places[0]: draw(st.integers(1, 4))})]
    return VAS(places, rules), init, targets


@settings(max_examples=100, deadline=None)
@given(vases())
def test_text_round_trip(case):
    v, init, targets = case
    v2, init2, targets2 = loads_text(dumps_text(v, init, targets))
    assert v2 == v and init2 == init and targets2 == targets


@settings(max_examples=100, deadline=None)
@given(vases())
def test_json_round_trip(case):
    v, init, targets = case
    v2, init2, targets2 = from_json(json.loads(dumps_json(v, init, targets)))
    assert v2 == v and init2 == init and targets2 == targets


def test_text_format_of_encoded_benchmark(bench):
    p = pipeline(bench)
    text = dumps_text(p.encoding.vas, p.encoding.init)
    v2, init2, _ = loads_text(text)
    assert v2 == p.encoding.vas and init2 == p.encoding.init


@pytest.mark.parametrize("text", [
    "place\n",
    "place a b\n",
    "place a\nrule : a+1\n",
    "place a\nrule r a+1\n",
    "place a\nrule r: a*1\n",
    "place a\nrule r: b+1\n",
    "place a\ninit a=-1\n",
    "place a\nfoo a\n",
    "place a\nplace a\n",
])
def test_text_format_errors(text):
    with pytest.raises(VASFormatError):
        loads_text(text)
