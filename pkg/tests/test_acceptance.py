"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v -s`` (or without ``-s``; the
lines are written straight to the terminal either way).
"""

import math
import os
import random
import string
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from coalneg.cli import main
from coalneg.corpus import RunArtifactWriter, load_scenario, stats
from coalneg.domain import OutcomeLabel as L
from coalneg.engine import EngineConfig, run_negotiation
from coalneg.evaluation import score
from coalneg.llm import FunctionBackend, ScriptedBackend
from coalneg.parsing import SCHEMA_KEYWORDS, Schema, parse_decision
from coalneg.retrieval import ClauseIndex, EmbeddingVector, cosine, top_k

from conftest import FIXTURE_DIR, MINI_SCENARIO, SCRIPT_DIR, tagged, write_scenario

COUNTS_DIR = FIXTURE_DIR.parent / "counts"


@pytest.fixture
def report(capsys):
    def emit(n, name, ok, detail=""):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n}: {name}" + (f" ({detail})" if detail else ""))
        assert ok, f"criterion {n} failed: {detail}"
    return emit


# ---------------------------------------------------------------------------
# 1. protocol oracle equivalence

S, O, R, C = tagged("SUPPORT"), tagged("OPPOSE"), tagged("REFINE"), tagged("COMPROMISE")

# Each case: (name, h_lo, replies for steps 1..4 in order, expected label per HI step).
# Step 1 is A's first pick, step 2 B's, and so on. Steps not under test just get SUPPORT.
CASES = [
    ("immediate support", 3, [S, S, S, S], [2, 2, 2, 2]),
    ("insist then support", 3, [O, S, S, S, S, S], [2, 2, 2, 2]),
    ("insist then oppose", 3, [O, S, O, S, S, S], [0, 2, 2, 2]),
    ("withdraw", 3, [O, O, S, S, S], [0, 2, 2, 2]),
    ("refine accepted", 3, [O, R, tagged("Narrower."), S, S, S, S], [1, 2, 2, 2]),
    ("refine rejected", 3, [O, R, tagged("Narrower."), O, S, S, S], [0, 2, 2, 2]),
    # step 1 withdrawn, then B trades it back during step 2
    ("compromise accepted", 3, [O, O, O, C, tagged("@1"), S, S, S], [1, 2, 2, 2]),
    ("compromise rejected", 3, [O, O, O, C, tagged("@1"), O, S, S], [0, 0, 2, 2]),
    ("empty-ledger compromise", 3, [O, C, tagged("Middle ground."), S, S, S, S], [1, 2, 2, 2]),
    ("parse fallback", 3, ["no tags", "still none", O, S, S, S], [0, 2, 2, 2]),
    ("hallucinated id", 3, [O, O, O, C, tagged("Z9"), tagged("Z9"), S, S, S], [1, 2, 2, 2]),
    ("round exhaustion", 5, [O, R, tagged("v1"), O, R, tagged("v2"), O, S, S, S], [0, 2, 2, 2]),
]


def _four_statement(tmp_path):
    stmts = [{"id": sid, "party": sid[0], "text": f"Statement {sid}.", "importance": 5}
             for sid in ("A1", "A2", "B1", "B2")]
    return load_scenario(write_scenario(tmp_path, statements=stmts))


def _expected_order(seed=111):
    # independent replay of the seeded picks: proposers alternate A, B, A, B
    remaining = {"A": ["A1", "A2"], "B": ["B1", "B2"]}
    order = []
    for step, party in enumerate("ABAB", start=1):
        pool = remaining[party]
        pick = pool[0] if len(pool) == 1 else random.Random(f"{seed}:select:{step}").choice(pool)
        pool.remove(pick)
        order.append(pick)
    return order


def test_criterion_1_protocol_oracle(tmp_path, report):
    t0 = time.perf_counter()
    corpus = _four_statement(tmp_path)
    order = _expected_order()
    failures = []
    for name, h_lo, replies, labels in CASES:
        replies = [r.replace("@1", order[0]) for r in replies]
        backend = ScriptedBackend.queue(replies)
        res = run_negotiation(corpus, EngineConfig(variant="hmdp-base", h_lo=h_lo), backend)
        want = {sid: L(code) for sid, code in zip(order, labels)}
        if res.trajectory.hi_order != order or res.outcomes != want or backend.remaining:
            failures.append(name)
    elapsed = time.perf_counter() - t0
    report(1, "protocol oracle equivalence",
           not failures and elapsed < 5.0,
           f"{len(CASES) - len(failures)}/{len(CASES)} scripts match, {elapsed:.2f}s"
           + (f"; mismatched: {failures}" if failures else ""))


# ---------------------------------------------------------------------------
# 2. structural invariants

MOVES = [S, O, R, C, tagged("A new wording."), tagged("FG1"), tagged("LP2"), "junk",
         tagged("Keep it short.")]


def _random_backend(seed):
    rnd = random.Random(seed)
    return FunctionBackend(lambda req: rnd.choice(MOVES))


def test_criterion_2_structural_invariants(tmp_path, report):
    t0 = time.perf_counter()
    corpus = load_scenario(MINI_SCENARIO)
    variants = ["hmdp", "hmdp-lo", "hmdp-base"]
    problems = []
    for i in range(200):
        variant = variants[i % 3]
        h_lo = 1 + i % 5
        cfg = EngineConfig(variant=variant, h_lo=h_lo, seed=111, ground_truth_feedback=bool(i % 2))
        res = run_negotiation(corpus, cfg, _random_backend(i))
        if any(ep.rounds > h_lo for ep in res.trajectory.episodes):
            problems.append(f"run {i}: episode exceeds h_lo")
        if list(res.outcomes) != ["FG1", "FG2", "LP1", "LP2"]:
            problems.append(f"run {i}: outcomes not total")
        calls = res.events.calls()
        purposes = {c["purpose"] for c in calls}
        if variant == "hmdp-base" and purposes & {"select", "critique_lo", "critique_hi"}:
            problems.append(f"run {i}: base variant used select/critique")
        if variant == "hmdp-lo" and "critique_hi" in purposes:
            problems.append(f"run {i}: LO variant used HI critique")
        if i < 30:
            # byte-identical reruns
            blobs = []
            for tag in ("a", "b"):
                writer = RunArtifactWriter(tmp_path / f"{i}{tag}", corpus.id, "digest")
                run_negotiation(corpus, cfg, _random_backend(i), writer=writer)
                blobs.append(writer.path.read_bytes())
            if blobs[0] != blobs[1]:
                problems.append(f"run {i}: rerun differs")
    elapsed = time.perf_counter() - t0
    report(2, "structural invariants over 200 randomized runs",
           not problems and elapsed < 60.0, f"{elapsed:.2f}s" + (f"; {problems[:3]}" if problems else ""))


# ---------------------------------------------------------------------------
# 3. retrieval correctness

def _brute(q, entries, k):
    qn = math.sqrt(sum(x * x for x in q))
    scored = []
    for cid, v in entries:
        vn = math.sqrt(sum(x * x for x in v))
        scored.append((cid, sum(a * b for a, b in zip(q, v)) / (qn * vn)))
    scored.sort(key=lambda p: (-p[1], p[0]))
    return scored[:k]


def test_criterion_3_retrieval(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    bad = 0
    for trial in range(500):
        n, dim = int(rng.integers(1, 40)), int(rng.integers(2, 12))
        raw = rng.standard_normal((n, dim))
        if trial % 5 == 0 and n > 1:
            raw[1] = raw[0] * 2.0  # exact ties, broken by id
        entries = [(f"c{j:03d}", EmbeddingVector(raw[j])) for j in range(n)]
        idx = ClauseIndex(entries)
        q = EmbeddingVector(rng.standard_normal(dim))
        plain = [(c, list(v.values)) for c, v in entries]
        for k in (1, 3, 5, 17):
            got = top_k(q, idx, k)
            want = _brute(list(q.values), plain, k)
            if [c for c, _ in got] != [c for c, _ in want] or \
                    any(abs(a - b) > 1e-9 for (_, a), (_, b) in zip(got, want)):
                # accept order swaps only where scores tie to rounding
                if [round(s, 9) for _, s in got] != [round(s, 9) for _, s in want]:
                    bad += 1
        a, b = EmbeddingVector(rng.standard_normal(dim)), EmbeddingVector(rng.standard_normal(dim))
        if abs(cosine(a, a) - 1.0) > 1e-9 or cosine(a, b) != cosine(b, a):
            bad += 1
        factor = float(rng.uniform(0.01, 100))
        if [c for c, _ in top_k(q, idx, 5)] != [c for c, _ in top_k(q, idx.scaled(factor), 5)]:
            bad += 1
    elapsed = time.perf_counter() - t0
    report(3, "retrieval correctness on 500 random indices", bad == 0 and elapsed < 10.0,
           f"{bad} mismatches, {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# 4. metric exactness

def _labels(codes):
    return {f"s{i}": L(c) for i, c in enumerate(codes)}


def test_criterion_4_metrics(report):
    worked = score(_labels([2, 1, 1, 0]), _labels([2, 2, 1, 0])).macro_f1
    checks = {
        "worked example 7/9": abs(worked - 7 / 9) < 1e-12,
        "identity": score(_labels([2, 2, 1, 0]), _labels([2, 2, 1, 0])).macro_f1 == 1.0,
        "disjoint": score(_labels([1, 2, 0]), _labels([0, 1, 2])).macro_f1 == 0.0,
    }
    rnd = random.Random(4)
    perm_ok = True
    for _ in range(100):
        n = rnd.randint(1, 50)
        g = [rnd.randint(0, 2) for _ in range(n)]
        p = [rnd.randint(0, 2) for _ in range(n)]
        idx = list(range(n))
        rnd.shuffle(idx)
        a = score(_labels(p), _labels(g)).macro_f1_exact
        b = score(_labels([p[i] for i in idx]), _labels([g[i] for i in idx])).macro_f1_exact
        perm_ok &= a == b and isinstance(a, Fraction)
    checks["permutation invariance"] = perm_ok
    failed = [k for k, v in checks.items() if not v]
    report(4, "metric exactness", not failed, f"macro F1 {worked!r}" + (f"; failed {failed}" if failed else ""))


# ---------------------------------------------------------------------------
# 5. dataset statistics fidelity

# (scenario dir, party id, included, partly included, not included, total) as published
PUBLISHED_COUNTS = [
    ("austria-2013", "SDP", 103, 405, 217, 725),
    ("austria-2013", "APP", 219, 615, 328, 1162),
    ("germany-2013", "CDU", 594, 1354, 625, 2574),
    ("germany-2013", "SDP", 559, 1517, 822, 2898),
    ("iceland-2013", "IP", 7, 54, 58, 119),
    ("iceland-2013", "PP", 12, 62, 43, 117),
    ("ireland-2011", "FG", 332, 710, 458, 1500),
    ("ireland-2011", "LP", 330, 791, 314, 1435),
    ("netherlands-2012", "PPFD", 121, 782, 810, 1713),
    ("netherlands-2012", "LP", 159, 1147, 1452, 2758),
    ("portugal-2011", "SDP", 55, 843, 1795, 2693),
    ("portugal-2011", "CDS-PP", 3, 219, 843, 1065),
]


def test_criterion_5_dataset_counts(report):
    cache = {}
    mismatches = []
    cells = 0
    for slug, pid, inc, part, not_, total in PUBLISHED_COUNTS:
        if slug not in cache:
            cache[slug] = stats(load_scenario(COUNTS_DIR / slug / "scenario.yaml"))
        got = cache[slug][pid]
        for name, want, have in (("included", inc, got.included), ("partly", part, got.partly_included),
                                 ("not", not_, got.not_included), ("total", total, got.total)):
            cells += 1
            if want != have:
                mismatches.append(f"{slug}/{pid} {name}: table {want}, labels give {have}")
    report(5, "dataset statistics fidelity", not mismatches,
           f"{cells - len(mismatches)}/{cells} cells match" + (f"; {mismatches}" if mismatches else ""))


# ---------------------------------------------------------------------------
# 6. parser totality fuzz

FRAGMENTS = ["<ANSWER>", "</ANSWER>", "<REASON>", "</REASON>", "<answer", "ANSWER>", "</", "<", ">",
             "< ANSWER >", "</ Answer>", "SUPPORT", "OPPOSE", "REFINE", "COMPROMISE", "included",
             "partly", "not", "\n", "\x00", "é", "💥", "<<ANSWER>>", "<ANSWER/>"]
SAFE = "bdfhjkmqvwxyz0123456789 ,.!?-"  # cannot spell any keyword


def test_criterion_6_parser_fuzz(report):
    t0 = time.perf_counter()
    rnd = random.Random(6)
    crashes = 0
    for _ in range(10_000):
        parts = [rnd.choice(FRAGMENTS) if rnd.random() < 0.4 else
                 "".join(rnd.choices(string.printable, k=rnd.randint(0, 8))) for _ in range(rnd.randint(0, 12))]
        text = "".join(parts)
        for schema in Schema:
            try:
                d = parse_decision(text, schema)
                assert d.valid or d.diagnostic
            except Exception:  # noqa: BLE001 - the point is that nothing escapes
                crashes += 1
    wrong = 0
    keyword_schemas = [Schema.Stance, Schema.FourWay, Schema.LabelTriple]
    for _ in range(3_000):
        schema = rnd.choice(keyword_schemas)
        kw = rnd.choice(SCHEMA_KEYWORDS[schema])
        pre = "".join(rnd.choices(SAFE, k=rnd.randint(0, 15)))
        post = "".join(rnd.choices(SAFE, k=rnd.randint(0, 15)))
        kw_cased = kw.lower() if rnd.random() < 0.3 else kw
        reason = "".join(rnd.choices(SAFE, k=rnd.randint(0, 20)))
        text = f"<REASON>{reason}</REASON><ANSWER>{pre} {kw_cased} {post}</ANSWER>"
        d = parse_decision(text, schema)
        if not (d.valid and d.keyword == kw):
            wrong += 1
    elapsed = time.perf_counter() - t0
    report(6, "parser totality fuzz", crashes == 0 and wrong == 0 and elapsed < 30.0,
           f"{crashes} crashes, {wrong} misparses, {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# 7. end-to-end scripted pipeline

def _pipeline(out: Path) -> tuple[list[int], str]:
    mini = str(MINI_SCENARIO)

    def scripted(name):
        return f"scripted:{SCRIPT_DIR / name}"

    codes = [main(["annotate", "--scenario", mini, "--backend", scripted("annotate.jsonl"),
                   "--out", str(out), "--run-id", "annotate"])]
    runs = []
    for variant in ("hmdp", "hmdp-lo", "hmdp-base"):
        codes.append(main(["negotiate", "--scenario", mini, "--variant", variant, "--run-id", variant,
                           "--backend", scripted(f"negotiate-{variant}.jsonl"), "--out", str(out)]))
        runs.append(out / "ireland-2011-mini" / variant)
    for kind in ("classifier", "openneg"):
        codes.append(main(["baseline", "--scenario", mini, "--kind", kind, "--run-id", kind,
                           "--backend", scripted(f"{kind}.jsonl"), "--out", str(out)]))
        runs.append(out / "ireland-2011-mini" / kind)
    gold = out / "ireland-2011-mini" / "annotate" / "labels.jsonl"
    codes.append(main(["eval", *map(str, runs), "--gold", str(gold), "--out", str(out / "report")]))
    return codes, (out / "report" / "table.csv").read_text(encoding="utf-8")


def _tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_7_end_to_end(tmp_path, report, monkeypatch, capsys):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    codes_a, table = _pipeline(tmp_path / "a")
    codes_b, _ = _pipeline(tmp_path / "b")
    rows = table.splitlines()[1:]
    methods = [r.split(",")[0] for r in rows]
    identical = _tree(tmp_path / "a") == _tree(tmp_path / "b")
    ok = (set(codes_a) == {0} and set(codes_b) == {0} and identical
          and methods == ["hMDP", "hMDP-LO", "hMDP-Base", "Classifier", "OpenNeg"])
    report(7, "end-to-end scripted pipeline", ok,
           f"exit codes {codes_a}, {len(rows)} method rows, reruns identical={identical}")


# ---------------------------------------------------------------------------
# 8. live smoke (manual, credentialed; non-gating)

@pytest.mark.skipif(not os.environ.get("COALNEG_SMOKE_PROFILE"),
                    reason="set COALNEG_SMOKE_PROFILE=<profile> with COALNEG_<PROFILE>_* credentials")
def test_criterion_8_live_smoke(tmp_path, report):
    from coalneg.llm import backend_from_spec
    profile = os.environ["COALNEG_SMOKE_PROFILE"]
    stmts = [{"id": "A1", "party": "A", "text": "We will build more public housing.", "importance": 7},
             {"id": "B1", "party": "B", "text": "We will cut income tax.", "importance": 7}]
    corpus = load_scenario(write_scenario(tmp_path, statements=stmts))
    writer = RunArtifactWriter(tmp_path / "run", corpus.id, "smoke")
    res = run_negotiation(corpus, EngineConfig(variant="hmdp-base"), backend_from_spec(f"http:{profile}"),
                          writer=writer)
    ok = len(res.outcomes) == 2 and all(ep.turns for ep in res.trajectory.episodes)
    report(8, "live smoke against an HTTP backend", ok, f"outcomes {dict(res.outcomes)}")
