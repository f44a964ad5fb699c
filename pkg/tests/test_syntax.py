import pytest
from hypothesis import given, settings, strategies as st

from actorcheck import BENCHMARKS, benchmark_source
from actorcheck import syntax as S

from conftest import program


def fig1_source() -> str:
    """The reslock benchmark with its closing wrapper removed, leaving N free."""
    src = benchmark_source("reslock")
    cut = src.index("% closes the program")
    return src[:cut] + "in  C = cell_start(), add_to_cell(N, C).\n"


# -- parse ---------------------------------------------------------------------


def test_parse_identity_function():
    assert S.parse("fun(X) -> X") == S.Fun(("X",), S.Var("X"))


def test_parse_send():
    assert S.parse("send(P, ok)") == S.Send(S.Var("P"), S.Ctor("ok", ()))


def test_parse_reslock_letrec_has_fifteen_bindings():
    ast = S.parse(fig1_source())
    assert isinstance(ast, S.Letrec)
    assert len(ast.bindings) == 15


def test_validate_reports_free_n():
    errors = S.validate(S.parse(fig1_source()))
    assert [type(e) for e in errors] == [S.FreeVariable]
    assert "N" in str(errors[0])


def test_closed_reslock_validates_cleanly():
    assert S.validate(S.parse(benchmark_source("reslock"))) == []


@pytest.mark.parametrize("text", ["fun(X ->", "receive end", "case X of end", "send(P)", "}"])
def test_parse_errors_carry_position(text):
    with pytest.raises(S.ParseError) as info:
        S.parse(text)
    assert info.value.line >= 1


# -- desugar -------------------------------------------------------------------


def test_sequence_becomes_application_of_fresh_function():
    e = S.desugar(S.parse("fun(A, B) -> (A, B)"))
    app = e.body
    assert isinstance(app, S.App)
    assert isinstance(app.fn, S.Fun) and len(app.fn.params) == 1
    assert app.fn.params[0] not in ("A", "B")
    assert app.fn.body == S.Var("B")
    assert app.args == (S.Var("A"),)


def test_cons_literal():
    assert S.desugar(S.parse("[A|B]")) == S.Ctor("cons", (S.Var("A"), S.Var("B")))


def test_tuple_literal():
    assert S.desugar(S.parse("{a, b}")) == S.Ctor("tuple2", (S.Ctor("a"), S.Ctor("b")))


def test_wildcards_become_distinct_fresh_variables():
    e = S.desugar(S.parse("receive {_, _} -> ok end"))
    (pat, _), = e.clauses
    names = [a.name for a in pat.args]
    assert len(set(names)) == 2


# -- normalize -----------------------------------------------------------------


def test_constructor_argument_is_let_bound():
    p = S.load("letrec f = fun(X) -> X. in succ(f(zero))")
    succ = next(n for n in p.nodes if isinstance(n, S.Ctor) and n.name == "succ")
    assert all(isinstance(a, S.Var) for a in succ.args)
    binder = p.nodes[p.parent[succ.label]]
    assert isinstance(binder, S.Fun) and binder.params == (succ.args[0].name,)


def test_clause_binders_are_renamed_apart():
    p = S.load("case a of X -> X; Y -> case Y of X -> X end end")
    bound = [pat.name for n in p.nodes if isinstance(n, S.Case) for pat, _ in n.clauses]
    assert "X#1" in bound and "X#2" in bound


def test_inconsistent_arity_rejected():
    with pytest.raises(S.UnknownArity):
        S.load("case a(b) of a -> ok end")


def test_duplicate_probe_rejected():
    with pytest.raises(S.DuplicateProbe):
        S.load("choice(fun() -> probe(t, a), fun() -> probe(t, b))")


# -- free_vars -----------------------------------------------------------------


def test_free_vars_basic():
    assert S.free_vars(S.Var("X")) == {"X"}
    assert S.free_vars(S.Fun(("X",), S.Var("X"))) == frozenset()


def test_free_vars_fig1_root():
    assert S.free_vars(S.parse(fig1_source())) == {"N"}


def test_clause_patterns_bind_in_body():
    assert S.free_vars(S.parse("receive {a, X} -> X end")) == frozenset()
    assert S.free_vars(S.parse("case Y of {a, X} -> X end")) == {"Y"}


# -- normalized-form invariants over the benchmarks -----------------------------


def binders(p: S.Program) -> list[str]:
    out = []
    for n in p.nodes:
        if isinstance(n, S.Fun):
            out.extend(n.params)
        elif isinstance(n, S.Letrec):
            out.extend(name for name, _ in n.bindings)
        elif isinstance(n, (S.Case, S.Receive)):
            for pat, _ in n.clauses:
                out.extend(v for v in S.pattern_vars(pat) if not _is_ref(pat, v))
    return out


def _is_ref(pat, name):
    if isinstance(pat, S.PVar):
        return pat.name == name and pat.ref
    return any(_is_ref(a, name) for a in pat.args)


@pytest.mark.parametrize("name", BENCHMARKS)
def test_normal_form(name):
    p = program(name)
    names = binders(p)
    assert len(names) == len(set(names))
    for n in p.nodes:
        if isinstance(n, S.Ctor):
            assert all(isinstance(a, S.Var) for a in n.args)
        if isinstance(n, S.Case):
            assert isinstance(n.scrutinee, S.Var)
    assert S.free_vars(p.root) == frozenset()


@pytest.mark.parametrize("name", BENCHMARKS)
def test_labels_dense_and_stable(name):
    src = benchmark_source(name)
    a, b = S.load(src), S.load(src)
    assert [n.label for n in a.nodes] == list(range(len(a.nodes)))
    assert [(type(n).__name__, n.label) for n in a.nodes] == [(type(n).__name__, n.label) for n in b.nodes]
    assert a.root.label == 0


@pytest.mark.parametrize("name", BENCHMARKS)
def test_benchmark_round_trip(name):
    ast = S.parse(benchmark_source(name))
    assert S.parse(S.pretty(ast)) == ast


# -- parse . pretty round trip on generated ASTs --------------------------------

_atoms = st.sampled_from(["a", "ok", "zero", "succ", "lock", "nil2"])
_vars = st.sampled_from(["X", "Y", "Zs", "Acc", "P"])
_tags = st.sampled_from(["t", "crit", "err"])


def _patterns():
    leaf = st.one_of(_vars.map(S.PVar), _atoms.map(S.PCtor), st.just(S.PWild()))
    return st.recursive(
        leaf,
        lambda sub: st.one_of(
            st.tuples(_atoms, st.lists(sub, min_size=1, max_size=3)).map(lambda t: S.PCtor(t[0], tuple(t[1]))),
            st.lists(sub, min_size=1, max_size=3).map(lambda xs: S.PTuple(tuple(xs))),
            st.tuples(st.lists(sub, max_size=2), st.none() | _vars.map(S.PVar)).map(
                lambda t: S.PList(tuple(t[0]), t[1] if t[0] else None)),
        ),
        max_leaves=5,
    )


def _clauses(body):
    return st.lists(st.tuples(_patterns(), body), min_size=1, max_size=2).map(tuple)


def _exprs():
    leaf = st.one_of(_vars.map(S.Var), _atoms.map(S.Ctor), st.just(S.SelfPid()))
    params = st.lists(_vars, max_size=2, unique=True).map(tuple)

    def extend(sub):
        return st.one_of(
            st.tuples(_atoms, st.lists(sub, min_size=1, max_size=2)).map(
                lambda t: S.Ctor(t[0], tuple(t[1]), True)),
            st.tuples(_vars.map(S.Var), st.lists(sub, max_size=2)).map(lambda t: S.App(t[0], tuple(t[1]))),
            st.tuples(params, sub).map(lambda t: S.Fun(*t)),
            st.tuples(sub, _clauses(sub)).map(lambda t: S.Case(*t)),
            _clauses(sub).map(S.Receive),
            st.tuples(sub, sub).map(lambda t: S.Send(*t)),
            sub.map(S.Spawn),
            st.lists(sub.map(lambda b: S.Fun((), b)), min_size=1, max_size=2).map(lambda xs: S.Choice(tuple(xs))),
            st.tuples(_tags, sub).map(lambda t: S.Probe(*t)),
            st.lists(sub, min_size=2, max_size=3).map(lambda xs: S.Tuple(tuple(xs))),
            st.lists(sub, max_size=2).map(lambda xs: S.ListLit(tuple(xs))),
            st.tuples(_vars, sub, sub).map(lambda t: S.Seq((S.Bind(S.PVar(t[0]), t[1]), t[2]))),
            st.tuples(st.sampled_from(["f", "g"]), params, sub, sub).map(
                lambda t: S.Letrec(((t[0], S.Fun(t[1], t[2])),), t[3])),
        )

    return st.recursive(leaf, extend, max_leaves=12)


@settings(max_examples=300, deadline=None)
@given(_exprs())
def test_parse_pretty_round_trip(e):
    once = S.parse(S.pretty(e))
    assert S.parse(S.pretty(once)) == once
    assert once == e
