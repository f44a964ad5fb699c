"""Command-line driver: parse, analyze, build the ACS, simplify, encode as a
VAS and answer the coverability queries declared in the source.

Queries are declared in structured comments::

    %! query mutex: probecount critical >= 2 expect verified

Query grammar (atoms joined by ``and``)::

    probecount TAG >= K              processes at the ``probe(TAG, ...)`` point
    msgcount SELECTOR PATTERN >= K   messages matching PATTERN in the mailboxes
                                     of the selected pid-classes

    SELECTOR := any | init | probe:TAG | spawn:LINE:COL

``probe:TAG`` selects pid-classes whose spawn site lies inside a
``probe(TAG, ...)`` expression; ``spawn:LINE:COL`` selects the pid-classes of
the spawn expression at that source position.  Pattern variables act as
wildcards.
"""

from __future__ import annotations

import argparse
import itertools
import json
import re
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

from . import syntax as S
from .absdomains import AbstractionConfig
from .acsgen import (
    ACS, alpha_acs, concrete_rule, default_protected, generate_acs, rule_delta, simplify,
    to_dot,
)
from .analysis import AbstractionNotFinite, Abstractor, analyze
from .machine import WILD, CTerm, Data, Machine
from .vas import (
    COVERABLE, DEFAULT_LIMIT, UNCOVERABLE, UNKNOWN, CoverQuery, VASFormatError,
    coverable_any, dumps_text, encode, from_json, loads_text, replay,
)

EXIT_OK, EXIT_VIOLATION, EXIT_INPUT, EXIT_LIMIT = 0, 1, 2, 3

VERIFIED = "VERIFIED"
POSSIBLE_VIOLATION = "POSSIBLE-VIOLATION"

EXPECTATIONS = {"verified": VERIFIED, "inconclusive": POSSIBLE_VIOLATION, "falsified": POSSIBLE_VIOLATION}


class QueryError(Exception):
    def __init__(self, message: str, line: int = 0, col: int = 0):
        super().__init__(message)
        self.line = line
        self.col = col

    def __str__(self) -> str:
        msg = super().__str__()
        return f"{self.line}:{self.col}: {msg}" if self.line else msg


class UnknownProbe(QueryError):
    pass


class PatternTooDeep(QueryError):
    pass


# ---------------------------------------------------------------------------
# Queries


@dataclass(frozen=True)
class ProbeCount:
    tag: str
    k: int


@dataclass(frozen=True)
class MsgCount:
    selector: str
    pattern: S.Pattern
    k: int
    pattern_text: str = field(default="", compare=False)


Atom = Union[ProbeCount, MsgCount]


@dataclass(frozen=True)
class Query:
    name: str
    atoms: tuple[Atom, ...]
    expectation: Optional[str] = None
    text: str = ""
    line: int = 0


_SELECTOR_RE = re.compile(r"^(any|init|probe:[a-z][A-Za-z0-9_']*|spawn:\d+:\d+)$")
_ATOM_RE = re.compile(
    r"""^\s*(?:
        probecount\s+(?P<tag>[a-z][A-Za-z0-9_']*)
      | msgcount\s+(?P<sel>\S+)\s+(?P<pat>.+?)
    )\s*>=\s*(?P<k>\d+)\s*$""",
    re.VERBOSE,
)


def parse_query_expr(text: str, line: int = 0, col: int = 0) -> tuple[Atom, ...]:
    atoms = []
    for part in re.split(r"\band\b", text):
        m = _ATOM_RE.match(part)
        if m is None:
            raise QueryError(f"malformed query atom {part.strip()!r}", line, col)
        k = int(m["k"])
        if k < 1:
            raise QueryError("query thresholds must be at least 1", line, col)
        if m["tag"]:
            atoms.append(ProbeCount(m["tag"], k))
            continue
        sel = m["sel"]
        if not _SELECTOR_RE.match(sel):
            raise QueryError(f"bad pid-class selector {sel!r}", line, col)
        try:
            pat = S.parse_pattern(m["pat"])
        except S.SyntaxErrorAt as e:
            raise QueryError(f"bad message pattern {m['pat']!r}: {e}", line, col) from None
        atoms.append(MsgCount(sel, _desugar_pattern(pat), k, m["pat"].strip()))
    return tuple(atoms)


def _desugar_pattern(p: S.Pattern) -> S.Pattern:
    return S._Desugar().pattern(p)


_PRAGMA_RE = re.compile(
    r"^query\s+(?P<name>[A-Za-z_][A-Za-z0-9_]*)\s*:\s*(?P<expr>.*?)"
    r"(?:\s+expect\s+(?P<exp>\w+))?\s*$"
)


def parse_query(text: str, line: int = 0, col: int = 0) -> Query:
    """Parse ``query <name>: <expr> [expect <verified|inconclusive|falsified>]``."""
    m = _PRAGMA_RE.match(text.strip())
    if m is None:
        raise QueryError(f"malformed query pragma {text.strip()!r}", line, col)
    exp = m["exp"]
    if exp is not None and exp not in EXPECTATIONS:
        raise QueryError(f"unknown expectation {exp!r}", line, col)
    atoms = parse_query_expr(m["expr"], line, col)
    return Query(m["name"], atoms, exp, m["expr"].strip(), line)


def queries_of(program: S.Program) -> list[Query]:
    out = []
    names = set()
    for pr in program.pragmas:
        text = pr.text.strip()
        if not text.startswith("query"):
            continue
        q = parse_query(text, pr.line, pr.col)
        if q.name in names:
            raise QueryError(f"duplicate query name {q.name!r}", pr.line, pr.col)
        names.add(q.name)
        out.append(q)
    return out


def data_may_match(pat: S.Pattern, d: Data) -> bool:
    """Whether some concretisation of the abstract datum matches the pattern."""
    if isinstance(pat, S.PVar) or d is WILD:
        return True
    if isinstance(pat, S.PCtor):
        if not isinstance(d, CTerm) or d.name != pat.name or len(d.args) != len(pat.args):
            return False
        return all(data_may_match(p, a) for p, a in zip(pat.args, d.args))
    return False


def _selected(acs: ACS, selector: str, line: int) -> set:
    prog = acs.program
    if selector == "any":
        return set(acs.pid_classes)
    if selector == "init":
        return {acs.init_pid}
    kind, _, rest = selector.partition(":")
    if kind == "probe":
        if rest not in prog.probes:
            raise UnknownProbe(f"unknown probe tag {rest!r}", line)
        return {p for p in acs.pid_classes if p != acs.init_pid and rest in prog.enclosing_probes(p.loc)}
    ln, col = map(int, rest.split(":"))
    sites = {
        lab for lab in prog.spawn_labels
        if (sp := prog.span(lab)) is not None and (sp.line, sp.col) == (ln, col)
    }
    if not sites:
        raise QueryError(f"no spawn expression at {ln}:{col}", line)
    return {p for p in acs.pid_classes if p.loc in sites}


def atom_places(atom: Atom, acs: ACS, msg_depth: int, line: int = 0) -> list:
    prog = acs.program
    if isinstance(atom, ProbeCount):
        if atom.tag not in prog.probes:
            raise UnknownProbe(f"unknown probe tag {atom.tag!r}", line)
        label = prog.probes[atom.tag]
        return sorted(
            (sp for sp in acs.state_places() if sp.state.control == label), key=repr
        )
    depth = S.pattern_depth(atom.pattern)
    if depth > msg_depth:
        raise PatternTooDeep(
            f"pattern {atom.pattern_text!r} has depth {depth} but messages are "
            f"abstracted at depth {msg_depth}; raise -M", line
        )
    pids = _selected(acs, atom.selector, line)
    return sorted(
        (mp for mp in acs.message_places() if mp.pid_class in pids and data_may_match(atom.pattern, mp.msg)),
        key=repr,
    )


def compositions(k: int, n: int):
    """All ways of writing k as an ordered sum of n non-negative integers."""
    if n == 0:
        return
    for cuts in itertools.combinations(range(k + n - 1), n - 1):
        parts, prev = [], -1
        for c in cuts + (k + n - 1,):
            parts.append(c - prev - 1)
            prev = c
        yield tuple(parts)


def compile_query(query: Query, acs: ACS, msg_depth: Optional[int] = None,
                  place_names: Optional[dict] = None) -> list[CoverQuery]:
    """Targets whose union of upward closures is the set of violating markings.

    A count over several places is split into one target per distribution of
    the threshold over those places; a conjunction takes the pointwise
    maximum of one target per atom.  An empty list means no place can ever
    contribute, so the query holds trivially.
    """
    if msg_depth is None:
        msg_depth = acs.program.max_receive_depth
    if place_names is None:
        place_names = encode(acs).place_names
    per_atom = []
    for atom in query.atoms:
        places = atom_places(atom, acs, msg_depth, query.line)
        targets = []
        for comp in compositions(atom.k, len(places)):
            targets.append({place_names[pl]: c for pl, c in zip(places, comp) if c})
        per_atom.append(targets)
    out = set()
    for combo in itertools.product(*per_atom):
        merged: dict[str, int] = {}
        for t in combo:
            for p, c in t.items():
                merged[p] = max(merged.get(p, 0), c)
        out.add(tuple(sorted(merged.items())))
    exp = EXPECTATIONS.get(query.expectation) if query.expectation else None
    return [CoverQuery(t, exp) for t in sorted(out)]


# ---------------------------------------------------------------------------
# Pipeline


@dataclass
class QueryResult:
    name: str
    text: str
    verdict: str
    expectation: Optional[str] = None
    targets: int = 0
    witness: list[str] = field(default_factory=list)
    witness_rules: list[str] = field(default_factory=list)
    covered: Optional[dict] = None
    explored: int = 0

    @property
    def met(self) -> Optional[bool]:
        if self.expectation is None:
            return None
        return EXPECTATIONS[self.expectation] == self.verdict

    def to_json(self) -> dict:
        out = {
            "name": self.name,
            "query": self.text,
            "verdict": self.verdict,
            "targets": self.targets,
            "explored": self.explored,
        }
        if self.expectation is not None:
            out["expect"] = self.expectation
            out["expectation_met"] = self.met
        if self.verdict == POSSIBLE_VIOLATION:
            out["witness"] = self.witness
            out["witness_rules"] = self.witness_rules
            out["covered"] = self.covered
        return out


@dataclass
class Report:
    file: str
    config: dict
    queries: list[QueryResult]
    stats: dict
    timings: dict
    trace_check: Optional[dict] = None

    def exit_code(self) -> int:
        if any(q.verdict == UNKNOWN for q in self.queries):
            return EXIT_LIMIT
        for q in self.queries:
            if q.met is False or (q.expectation is None and q.verdict == POSSIBLE_VIOLATION):
                return EXIT_VIOLATION
        if self.trace_check and self.trace_check["violations"]:
            return EXIT_VIOLATION
        return EXIT_OK

    def to_json(self) -> dict:
        out = {
            "file": self.file,
            "config": self.config,
            "queries": [q.to_json() for q in self.queries],
            "stats": self.stats,
            "timings": self.timings,
            "exit_code": self.exit_code(),
        }
        if self.trace_check is not None:
            out["trace_check"] = self.trace_check
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1)

    def text(self) -> str:
        lines = [f"file: {self.file}"]
        lines.append("config: " + ", ".join(f"{k}={v}" for k, v in sorted(self.config.items())))
        st = self.stats
        lines.append(
            f"acs: {st['pid_classes']} pid-classes, {st['states']} states, {st['messages']} messages, "
            f"{st['rules']} rules; places {st['places_before']} -> {st['places_after']} after simplification"
        )
        for q in self.queries:
            exp = ""
            if q.expectation is not None:
                exp = f"  (expect {q.expectation}: {'ok' if q.met else 'MISMATCH'})"
            lines.append(f"query {q.name}: {q.text}")
            lines.append(f"  {q.verdict}{exp}")
            if q.verdict == POSSIBLE_VIOLATION:
                lines.append(f"  abstract witness ({len(q.witness)} steps), covering {q.covered}:")
                for w in q.witness_rules:
                    lines.append(f"    {w}")
        if self.trace_check is not None:
            tc = self.trace_check
            lines.append(
                f"trace check: {tc['runs']} runs, {tc['steps']} steps, {tc['violations']} violations"
            )
        lines.append("timings: " + ", ".join(f"{k}={v:.3f}s" for k, v in sorted(self.timings.items())))
        return "\n".join(lines) + "\n"


@dataclass
class Options:
    k: int = 0
    data_depth: int = 0
    msg_depth: Optional[int] = None
    simplify: bool = True
    limit: int = DEFAULT_LIMIT
    trace_check: int = 0
    trace_steps: int = 300
    extra_queries: tuple[str, ...] = ()


@dataclass
class Pipeline:
    """Every intermediate artifact of one verification run."""

    program: S.Program
    config: AbstractionConfig
    queries: list[Query]
    result: object = None
    acs_full: Optional[ACS] = None
    acs: Optional[ACS] = None
    encoding: object = None
    report: Optional[Report] = None


def build(source: str, opts: Options, file: str = "<input>") -> Pipeline:
    timings: dict[str, float] = {}
    t = time.perf_counter()
    program = S.load(source)
    queries = queries_of(program)
    for i, extra in enumerate(opts.extra_queries):
        if not extra.strip().startswith("query"):
            extra = f"query cli{i + 1}: {extra}"
        queries.append(parse_query(extra))
    timings["parse"] = time.perf_counter() - t

    t = time.perf_counter()
    config = AbstractionConfig.standard(program, opts.k, opts.data_depth, opts.msg_depth)
    result = analyze(program, config)
    timings["analysis"] = time.perf_counter() - t

    t = time.perf_counter()
    acs_full = generate_acs(result)
    acs = simplify(acs_full, default_protected(acs_full)) if opts.simplify else acs_full
    enc = encode(acs)
    timings["acs"] = time.perf_counter() - t

    t = time.perf_counter()
    results = []
    for q in queries:
        targets = compile_query(q, acs, config.msg_data.depth, enc.place_names)
        results.append(_answer(q, targets, enc, opts.limit))
    timings["coverability"] = time.perf_counter() - t

    stats = acs.stats()
    stats["places_before"] = len(acs_full.places())
    stats["places_after"] = len(acs.places())
    stats["rules_before"] = len(acs_full.rules)
    stats["pid_classes"] = len(acs.pid_classes)
    stats["dimension"] = acs_full.dimension
    stats["labels"] = len(program.nodes)
    stats["abstract_states"] = sum(len(v) for v in result.state.procs.values())
    trace = None
    if opts.trace_check:
        t = time.perf_counter()
        trace = trace_check(program, config, result, acs_full, opts.trace_check, opts.trace_steps)
        timings["trace_check"] = time.perf_counter() - t
    report = Report(file, _config_json(opts, config), results, stats, timings, trace)
    return Pipeline(program, config, queries, result, acs_full, acs, enc, report)


def _config_json(opts: Options, config: AbstractionConfig) -> dict:
    return {
        "k": opts.k,
        "data_depth": opts.data_depth,
        "msg_depth": config.msg_data.depth,
        "simplify": opts.simplify,
        "limit_nodes": opts.limit,
    }


def _answer(q: Query, targets: list[CoverQuery], enc, limit: int) -> QueryResult:
    res = QueryResult(q.name, q.text, VERIFIED, q.expectation, targets=len(targets))
    if not targets:
        return res
    cov = coverable_any(enc.vas, enc.init, targets, limit)
    res.explored = cov.explored
    if cov.verdict == UNCOVERABLE:
        return res
    if cov.verdict == UNKNOWN:
        res.verdict = UNKNOWN
        return res
    assert cov.verdict == COVERABLE
    final = replay(enc.vas, enc.init, cov.witness)
    if final is None or not any(all(final.get(p, 0) >= c for p, c in t.target) for t in targets):
        raise AssertionError("coverability witness failed to replay")
    res.verdict = POSSIBLE_VIOLATION
    res.witness = list(cov.witness)
    res.witness_rules = [enc.vas.notes.get(w, w) for w in cov.witness]
    res.covered = dict(sorted(cov.target.items()))
    return res


# ---------------------------------------------------------------------------
# Soundness checks along concrete runs


def trace_check(program, config, result, acs: ACS, runs: int, steps: int, seed0: int = 0,
                every_state: bool = False) -> dict:
    """Replay seeded concrete runs against the analysis and the ACS.

    Every concrete step must be matched by an abstract transition with the
    abstracted active components, every visited state must be below the
    fixpoint, and a VAS marking sequence dominating the counter abstraction
    must be constructible rule by rule.  Only the last state of each run is
    compared with the fixpoint unless ``every_state`` is set; then the first
    state and the components written by each step are compared, which covers
    every visited state because the abstraction is pointwise.
    """
    machine = Machine(program)
    ab = Abstractor(config)
    acs_rules = set(acs.rules)
    violations = []
    total = 0
    for seed in range(seed0, seed0 + runs):
        trace = machine.run(seed, steps)
        marking = alpha_acs(trace.states[0], config, program)
        if every_state and not ab.state(trace.states[0]).leq(result.state):
            violations.append({"seed": seed, "step": 0, "kind": "cfa-state"})
        for i, t in enumerate(trace.steps):
            total += 1
            if ab.transition(t) not in result.transitions:
                violations.append({"seed": seed, "step": i, "kind": "cfa-transition"})
                break
            rule = concrete_rule(machine, ab, config, t)
            if rule not in acs_rules:
                violations.append({"seed": seed, "step": i, "kind": "acs-rule"})
                break
            marking.update(rule_delta(rule))
            if any(c < 0 for c in marking.values()):
                violations.append({"seed": seed, "step": i, "kind": "acs-negative"})
                break
            after = alpha_acs(t.state, config, program)
            if any(marking[p] < c for p, c in after.items()):
                violations.append({"seed": seed, "step": i, "kind": "acs-domination"})
                break
            if every_state and not ab.written(t).leq(result.state):
                violations.append({"seed": seed, "step": i, "kind": "cfa-state"})
                break
        if not ab.state(trace.states[-1]).leq(result.state):
            violations.append({"seed": seed, "step": len(trace.steps), "kind": "cfa-state"})
    return {"runs": runs, "steps": total, "violations": len(violations), "details": violations[:20]}


# ---------------------------------------------------------------------------
# Argument parsing


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="actorcheck", description="Verify safety properties of lambda-actor programs.")
    sub = ap.add_subparsers(dest="command")

    v = sub.add_parser("verify", help="run the full verification pipeline")
    v.add_argument("file")
    v.add_argument("-k", type=int, default=0, help="contour length (default 0)")
    v.add_argument("-D", type=int, default=0, dest="data_depth", help="data depth (default 0)")
    v.add_argument("-M", type=int, default=None, dest="msg_depth",
                   help="message depth (default: deepest receive pattern)")
    v.add_argument("-q", "--query", action="append", default=[],
                   help="extra query, 'EXPR' or 'query NAME: EXPR [expect ...]'")
    v.add_argument("--no-simplify", action="store_true")
    v.add_argument("--dot", metavar="FILE", help="write the ACS as a DOT graph")
    v.add_argument("--acs-json", metavar="FILE", help="write the ACS as JSON")
    v.add_argument("--analysis-json", metavar="FILE", help="write the analysis result as JSON")
    v.add_argument("--vas", metavar="FILE", help="write the VAS in text format")
    v.add_argument("--trace-check", type=int, default=0, metavar="N",
                   help="also check soundness along N seeded concrete runs")
    v.add_argument("--limit-nodes", type=int, default=DEFAULT_LIMIT, metavar="N",
                   help="coverability resource limit (basis elements)")
    v.add_argument("--json", action="store_true", help="print the report as JSON")

    r = sub.add_parser("run", help="run the concrete interpreter and dump the trace")
    r.add_argument("file")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--steps", type=int, default=1000)

    c = sub.add_parser("cover", help="decide coverability for a VAS file (text or JSON)")
    c.add_argument("file")
    c.add_argument("--limit-nodes", type=int, default=DEFAULT_LIMIT, metavar="N")
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0] not in ("verify", "run", "cover", "-h", "--help"):
        argv.insert(0, "verify")
    ap = _parser()
    args = ap.parse_args(argv)
    if args.command is None:
        ap.print_help()
        return EXIT_INPUT
    try:
        if args.command == "verify":
            return _cmd_verify(args)
        if args.command == "run":
            return _cmd_run(args)
        return _cmd_cover(args)
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


def _read(path: str) -> str:
    return Path(path).read_text()


def _cmd_verify(args) -> int:
    source = _read(args.file)
    opts = Options(
        k=args.k, data_depth=args.data_depth, msg_depth=args.msg_depth,
        simplify=not args.no_simplify, limit=args.limit_nodes,
        trace_check=args.trace_check, extra_queries=tuple(args.query),
    )
    try:
        pipe = build(source, opts, file=args.file)
    except (S.SyntaxErrorAt, QueryError) as e:
        print(f"{args.file}:{e}", file=sys.stderr)
        return EXIT_INPUT
    except (ValueError, AbstractionNotFinite) as e:
        print(f"{args.file}: {e}", file=sys.stderr)
        return EXIT_INPUT
    if args.dot:
        Path(args.dot).write_text(to_dot(pipe.acs))
    if args.acs_json:
        Path(args.acs_json).write_text(pipe.acs.dumps() + "\n")
    if args.analysis_json:
        Path(args.analysis_json).write_text(pipe.result.dumps() + "\n")
    if args.vas:
        Path(args.vas).write_text(dumps_text(pipe.encoding.vas, pipe.encoding.init))
    report = pipe.report
    if args.json:
        print(report.dumps())
    else:
        print(report.text(), end="")
    return report.exit_code()


def _cmd_run(args) -> int:
    try:
        program = S.load(_read(args.file))
    except S.SyntaxErrorAt as e:
        print(f"{args.file}:{e}", file=sys.stderr)
        return EXIT_INPUT
    m = Machine(program)
    sys.stdout.write(m.dump_trace(m.run(args.seed, args.steps)))
    return EXIT_OK


def _cmd_cover(args) -> int:
    text = _read(args.file)
    try:
        if text.lstrip().startswith("{"):
            vas, init, targets = from_json(json.loads(text))
        else:
            vas, init, targets = loads_text(text)
    except (VASFormatError, ValueError, KeyError) as e:
        print(f"{args.file}: {e}", file=sys.stderr)
        return EXIT_INPUT
    if init is None or not targets:
        print(f"{args.file}: need an init line and at least one target", file=sys.stderr)
        return EXIT_INPUT
    code = EXIT_OK
    for t in targets:
        res = coverable_any(vas, init, [t], args.limit_nodes)
        desc = " ".join(f"{p}={c}" for p, c in t.target)
        print(f"target {desc}: {res.verdict}")
        if res.verdict == COVERABLE:
            print("  witness: " + (" ".join(res.witness) or "(empty)"))
            code = max(code, EXIT_VIOLATION)
        elif res.verdict == UNKNOWN:
            code = EXIT_LIMIT
    return code


if __name__ == "__main__":
    sys.exit(main())
