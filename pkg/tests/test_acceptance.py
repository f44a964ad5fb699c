"""End-to-end acceptance checks, one test per criterion.

Each test records a pass/fail line that is printed in the terminal summary.
"""

import json
import os
import random
import re
import subprocess
import sys
import time

from actorcheck import BENCHMARKS, benchmark_source
from actorcheck import syntax as S
from actorcheck.cli import POSSIBLE_VIOLATION, VERIFIED, Options, build, trace_check
from actorcheck.machine import Machine
from actorcheck.vas import COVERABLE, UNCOVERABLE, coverable, covers, forward_cover, replay

from conftest import ACCEPTANCE, ALPHABET, pipeline
from test_machine import check_fiffo
from test_vas import random_instance


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (ok, detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def verdicts(pipe) -> dict[str, str]:
    return {q.name: q.verdict for q in pipe.report.queries}


def test_reslock_mutual_exclusion():
    start = time.perf_counter()
    pipe = build(benchmark_source("reslock"), Options(k=0, data_depth=0, msg_depth=2))
    elapsed = time.perf_counter() - start
    v = verdicts(pipe)
    record(1, v == {"mutex": VERIFIED} and elapsed < 60, f"reslock mutex {v['mutex']} in {elapsed:.1f}s")


def test_server_counting_beats_control_flow():
    pipe = pipeline("server")
    bad = pipe.program.probes["bad"]
    cfa_reaches = any(q.control == bad for qs in pipe.result.state.procs.values() for q in qs)
    v = verdicts(pipe)["reinit"]
    record(2, v == VERIFIED and cfa_reaches,
           f"server reinit {v}; error state in control-flow graph: {cfa_reaches}")


def reaches(machine: Machine, seed: int, label: int, steps: int = 300) -> bool:
    trace = machine.run(seed, steps)
    return any(t.state.procs[t.pid].control == label for t in trace.steps)


def test_probe_detection_on_a_stutter_that_forwards_everything():
    # same program, but every message reaches no_a: the probe must be seen
    src = benchmark_source("stutter").replace("receive _ -> unstut(F) end.", "unstut(F).")
    p = S.load(src)
    assert any(reaches(Machine(p), seed, p.probes["bad"]) for seed in range(20))


def test_stutter_is_inconclusive_but_concretely_safe():
    pipe = pipeline("stutter")
    (q,) = pipe.report.queries
    final = replay(pipe.encoding.vas, pipe.encoding.init, q.witness) if q.witness else None
    replays = final is not None and all(final.get(p, 0) >= c for p, c in q.covered.items())
    bad = pipe.program.probes["bad"]
    machine = Machine(pipe.program)
    hits = sum(reaches(machine, seed, bad) for seed in range(500))
    record(3, q.verdict == POSSIBLE_VIOLATION and replays and hits == 0,
           f"stutter saw_a {q.verdict}, witness of {len(q.witness)} steps replays: {replays}; "
           f"probe hit in {hits}/500 concrete runs")


def test_howait_is_inconclusive():
    v = verdicts(pipeline("howait"))["early_return"]
    record(4, v == POSSIBLE_VIOLATION, f"howait early_return {v}")


def test_reslock_simplification_ratio():
    simp, full = pipeline("reslock"), pipeline("reslock", simplify=False)
    before = simp.report.stats["places_before"]
    after = simp.report.stats["places_after"]
    ratio = after / before
    same = verdicts(simp) == verdicts(full)
    record(5, ratio <= 0.25 and same,
           f"reslock places {before} -> {after} (ratio {ratio:.3f}); verdicts unchanged without simplification: {same}")


_SOUNDNESS: dict[str, dict] = {}


def soundness(name: str) -> dict:
    if name not in _SOUNDNESS:
        p = pipeline(name)
        _SOUNDNESS[name] = trace_check(p.program, p.config, p.result, p.acs_full, 200, 300, every_state=True)
    return _SOUNDNESS[name]


def kinds(tc: dict, prefix: str) -> int:
    return sum(1 for d in tc["details"] if d["kind"].startswith(prefix))


def test_control_flow_soundness():
    counts = {}
    for name in BENCHMARKS:
        tc = soundness(name)
        # details is truncated; any violation at all makes it non-empty
        counts[name] = (kinds(tc, "cfa"), tc["steps"])
    bad = sum(c for c, _ in counts.values())
    record(6, bad == 0, "control-flow violations " + ", ".join(
        f"{n}={c}/{s} steps" for n, (c, s) in counts.items()))


def test_acs_soundness():
    counts = {}
    for name in BENCHMARKS:
        tc = soundness(name)
        counts[name] = (kinds(tc, "acs"), tc["steps"])
    bad = sum(c for c, _ in counts.values())
    record(7, bad == 0, "counter-system violations " + ", ".join(
        f"{n}={c}/{s} steps" for n, (c, s) in counts.items()))


def test_coverability_differential():
    rng = random.Random(31337)
    start = time.perf_counter()
    decided = agree = replayed = coverable_count = 0
    for _ in range(500):
        v, init, target = random_instance(rng)
        res = coverable(v, init, target)
        if res.verdict == COVERABLE:
            coverable_count += 1
            final = replay(v, init, res.witness)
            replayed += final is not None and covers(final, target.as_dict())
        oracle = forward_cover(v, init, target.as_dict(), 100_000)
        if oracle is not None:
            decided += 1
            agree += res.verdict == (COVERABLE if oracle else UNCOVERABLE)
    elapsed = time.perf_counter() - start
    record(8, agree == decided and replayed == coverable_count and elapsed < 120,
           f"{agree}/{decided} decided instances agree, {replayed}/{coverable_count} witnesses replay, "
           f"{elapsed:.1f}s")


def random_pattern(rng: random.Random, depth: int = 2) -> S.Pattern:
    roll = rng.random()
    if depth == 0 or roll < 0.4:
        return S.PVar(rng.choice("XY")) if rng.random() < 0.4 else S.PCtor(rng.choice("abc"))
    if roll < 0.7:
        return S.PCtor("succ", (random_pattern(rng, depth - 1),))
    return S.PCtor("tuple2", (random_pattern(rng, depth - 1), random_pattern(rng, depth - 1)))


def random_term(rng: random.Random, depth: int = 2):
    names = [n for n, a in ALPHABET.items() if depth > 0 or a == 0]
    name = rng.choice(names)
    return (name, *(random_term(rng, depth - 1) for _ in range(ALPHABET[name])))


def test_fiffo_property_suite():
    rng = random.Random(2718)
    failed = nonempty = 0
    for _ in range(1000):
        patterns = [random_pattern(rng) for _ in range(rng.randint(1, 3))]
        terms = [random_term(rng) for _ in range(rng.randint(0, 5))]
        nonempty += bool(terms)
        try:
            check_fiffo(patterns, terms)
        except AssertionError:
            failed += 1
    record(9, failed == 0, f"{1000 - failed}/1000 mailbox instances ({nonempty} non-empty) "
           "satisfy the matching postconditions")


_TIMINGS = re.compile(r'"timings": \{[^}]*\}')


def verify_json(path: str, hashseed: str) -> str:
    env = dict(os.environ, PYTHONHASHSEED=hashseed)
    out = subprocess.run([sys.executable, "-m", "actorcheck.cli", "verify", "--json", path],
                         capture_output=True, text=True, env=env)
    assert out.returncode in (0, 1, 3), out.stderr
    return _TIMINGS.sub('"timings": {}', out.stdout)


def test_reports_are_deterministic(tmp_path):
    differ = []
    for name in BENCHMARKS:
        path = tmp_path / f"{name}.lact"
        path.write_text(benchmark_source(name))
        first, second = verify_json(str(path), "1"), verify_json(str(path), "2")
        json.loads(first)
        if first != second:
            differ.append(name)
    record(10, not differ, "byte-identical --json reports modulo timings for "
           f"{len(BENCHMARKS) - len(differ)}/{len(BENCHMARKS)} benchmarks")
