import pytest

from actorcheck import BENCHMARKS, benchmark_source
from actorcheck import syntax as S
from actorcheck.absdomains import AbstractionConfig
from actorcheck.acsgen import generate_acs, show_data
from actorcheck.analysis import (
    Abstractor, RecvEffect, SendEffect, SpawnEffect, abstract_step, alpha_cfa,
    analyze, init_abs,
)
from actorcheck.cli import trace_check
from actorcheck.machine import Machine, Pid, ProcState, STAR

from conftest import pipeline, program


def analysed(source: str, **kw):
    p = S.load(source)
    cfg = AbstractionConfig.standard(p, **kw)
    return p, cfg, analyze(p, cfg)


def test_value_program():
    p, cfg, r = analysed("ok")
    assert len(r.transitions) <= 1
    (pid,) = r.pid_classes
    assert any(isinstance(q.control, int) and isinstance(p.nodes[q.control], S.Ctor)
               for q in r.state.procs[pid])


def test_reslock_has_three_pid_classes():
    r = pipeline("reslock").result
    assert len(r.pid_classes) == 3
    p = program("reslock")
    spawn_sites = {c.loc for c in r.pid_classes if c.loc in p.spawn_labels}
    assert len(spawn_sites) == 2
    assert r.init_pid in r.pid_classes


def test_server_transition_graph():
    p = program("server")
    r = pipeline("server").result
    server = next(c for c in r.pid_classes if c != r.init_pid)
    recv = [t for t in r.transitions if t.pid_class == server and isinstance(t.effect, RecvEffect)]
    received = {show_data(d) for t in recv for d in r.message_data(t.effect.msg)}
    assert received == {"{init,_,a}", "{set,b}"}
    sends = [t for t in r.transitions if t.pid_class == server and isinstance(t.effect, SendEffect)]
    assert any(t.effect.target == r.init_pid for t in sends)
    # the widened mailbox keeps the init message, so the error probe is reached
    bad = p.probes["bad"]
    assert any(q.control == bad for q in r.state.procs[server])


def test_alpha_of_initial_state_is_abstract_initial_state():
    for name in BENCHMARKS:
        p = program(name)
        cfg = AbstractionConfig.standard(p)
        assert alpha_cfa(Machine(p).init(), cfg) == init_abs(p, cfg)


def test_one_step_successor_is_below_fixpoint():
    p = program("reslock")
    r = pipeline("reslock").result
    m = Machine(p)
    for s in m.step(m.init()):
        assert alpha_cfa(s, r.config).leq(r.state)


def test_alpha_merges_pids_with_equal_site_and_truncated_time():
    ab = Abstractor(AbstractionConfig.standard(S.load("ok"), k=1))
    assert ab.pid(Pid(5, (1, 2))) == ab.pid(Pid(5, (1, 3))) == Pid(5, (1,))
    assert ab.pid(Pid(5, (1,))) != ab.pid(Pid(6, (1,)))


def test_self_rule():
    p, cfg, r = analysed("self()")
    (t,) = [t for t in r.transitions if t.rule == "Self"]
    assert t.after == ProcState(t.pid_class, (), t.before.kont, t.before.time)


def test_spawn_rule_k0():
    p, cfg, r = analysed("spawn(fun() -> ok)")
    (t,) = [t for t in r.transitions if t.rule == "Spawn"]
    assert isinstance(t.effect, SpawnEffect)
    site = p.spawn_labels[0]
    assert t.effect.child == Pid(site, ())
    child_q = t.effect.child_state
    assert child_q.kont is STAR and child_q.time == ()
    assert r.state.mailboxes[t.effect.child] == frozenset()


@pytest.mark.parametrize("name", BENCHMARKS)
def test_fixpoint_is_stable(name):
    r = pipeline(name).result
    new, transitions = abstract_step(r.program, r.state, r.config)
    assert new == r.state
    assert transitions <= r.transitions


@pytest.mark.parametrize("name", ["server", "howait", "stutter"])
def test_naive_iteration_is_a_chain_reaching_the_fixpoint(name):
    r = pipeline(name).result
    g = init_abs(r.program, r.config)
    steps = 0
    while True:
        new, _ = abstract_step(r.program, g, r.config)
        assert g.leq(new)
        steps += 1
        if new == g:
            break
        g = new
        assert steps < 10_000
    assert g == r.state


@pytest.mark.parametrize("name", BENCHMARKS)
def test_analysis_is_deterministic(name):
    src = benchmark_source(name)
    a = analyze(S.load(src), AbstractionConfig.standard(S.load(src)))
    b = analyze(S.load(src), AbstractionConfig.standard(S.load(src)))
    assert a.transitions == b.transitions
    assert a.dumps() == b.dumps()


@pytest.mark.parametrize("k", [0, 1, 2])
def test_pid_class_bound(bench, k):
    p = program(bench)
    cfg = AbstractionConfig.standard(p, k=k)
    r = analyze(p, cfg)
    n_times = cfg.time.carrier_size(len(p.nodes))
    assert len(r.pid_classes) <= 1 + len(p.spawn_labels) * n_times


@pytest.mark.parametrize("k, depth", [(0, 0), (1, 1)])
def test_soundness_along_short_runs(bench, k, depth):
    p = program(bench)
    cfg = AbstractionConfig.standard(p, k, depth)
    r = analyze(p, cfg)
    report = trace_check(p, cfg, r, generate_acs(r), runs=10, steps=200, every_state=True)
    assert report["violations"] == 0, report["details"]


def test_json_export_shape():
    r = pipeline("server").result
    doc = r.to_json()
    assert {"pid_classes", "states", "transitions"} <= set(doc)
    assert all("rule" in t for t in doc["transitions"])
