"""Retrieval-augmented gold-label annotation.

For every manifesto statement the ``k`` most similar agreement clauses are
retrieved and a classifier backend is asked whether the statement is not,
partly, or fully included in them.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from .corpus import CorpusStats, PartyCounts, ScenarioCorpus, write_labels
from .domain import AgreementClause, OutcomeLabel, Statement
from .events import EventLog
from .llm import Backend, BackendError, CallSettings, Message
from .parsing import Schema, decide
from .prompts import TemplateId, TemplateRegistry, default_registry
from .retrieval import ClauseIndex, EmbeddingProvider, build_index, top_k

logger = logging.getLogger(__name__)

DEFAULT_CONTEXT_CHARS = 6000


class AnnotationError(RuntimeError):
    pass


@dataclass(frozen=True)
class AnnotationRecord:
    statement_id: str
    label: OutcomeLabel
    context_clause_ids: tuple[str, ...]
    raw_answer: str
    backend_id: str
    fallback: bool = False
    scores: tuple[float, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {"statement_id": self.statement_id, "label": int(self.label),
                "context_clause_ids": list(self.context_clause_ids),
                "scores": [round(s, 12) for s in self.scores],
                "raw_answer": self.raw_answer, "backend_id": self.backend_id,
                "fallback": self.fallback}


def fit_budget(texts: Sequence[str], budget: int) -> tuple[list[str], bool]:
    """Trim the longest texts first until the total length fits ``budget``.

    Finds the largest per-text cap ``c`` with ``sum(min(len, c)) <= budget``;
    every text longer than ``c`` is cut to ``c`` characters.
    """
    lengths = [len(t) for t in texts]
    if sum(lengths) <= budget:
        return list(texts), False
    lo, hi = 0, max(lengths)
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if sum(min(n, mid) for n in lengths) <= budget:
            lo = mid
        else:
            hi = mid - 1
    return [t if len(t) <= lo else t[:lo] for t in texts], True


def annotate_statement(
    statement: Statement,
    index: ClauseIndex,
    k: int,
    classifier: Backend,
    *,
    clauses: Mapping[str, AgreementClause],
    provider: EmbeddingProvider,
    party_name: str = "",
    registry: TemplateRegistry | None = None,
    settings: CallSettings | None = None,
    events: EventLog | None = None,
    context_chars: int = DEFAULT_CONTEXT_CHARS,
) -> AnnotationRecord:
    """Label one statement against its top-``k`` agreement clauses."""
    if len(index) == 0:
        raise AnnotationError("agreement index is empty; nothing to annotate against")
    registry = registry or default_registry()
    settings = settings or CallSettings()
    events = events if events is not None else EventLog()
    hits = top_k(provider.embed(statement.text), index, k)
    ids = [cid for cid, _ in hits]
    texts, trimmed = fit_budget([clauses[cid].text for cid in ids], context_chars)
    if trimmed:
        logger.info("clause context for %s trimmed to %d chars", statement.id, context_chars)
        events.emit("context_trimmed", statement_id=statement.id, budget=context_chars)
    ctx = {"PARTY": party_name or statement.party_id, "STATEMENT": statement.text,
           "CONTEXT": list(zip(ids, texts))}
    system, user = registry.render(TemplateId.AnnotationLabel, ctx, statement.language)
    msgs = [Message("system", system), Message("user", user)]
    try:
        d = decide(classifier, settings, msgs, Schema.LabelTriple, events,
                   purpose="annotate", statement_id=statement.id)
    except BackendError as exc:
        events.emit("parse_fallback", purpose="annotate", statement_id=statement.id,
                    diagnostics=[f"backend failure: {exc}"])
        return AnnotationRecord(statement.id, OutcomeLabel.NotIncluded, tuple(ids), "",
                                getattr(classifier, "backend_id", ""), True,
                                tuple(s for _, s in hits))
    return AnnotationRecord(statement.id, d.value, tuple(ids), d.parsed.answer_raw,
                            getattr(classifier, "backend_id", ""), d.fallback,
                            tuple(s for _, s in hits))


@dataclass
class AnnotationResult:
    records: dict[str, AnnotationRecord]
    stats: CorpusStats
    events: EventLog
    report: dict[str, Any] = field(default_factory=dict)

    @property
    def labels(self) -> dict[str, OutcomeLabel]:
        return {sid: r.label for sid, r in self.records.items()}


def annotate_corpus(
    corpus: ScenarioCorpus,
    k: int,
    classifier: Backend,
    *,
    provider: EmbeddingProvider,
    index: ClauseIndex | None = None,
    registry: TemplateRegistry | None = None,
    settings: CallSettings | None = None,
    workers: int = 1,
    include_fallbacks: bool = False,
    context_chars: int = DEFAULT_CONTEXT_CHARS,
    out_dir: str | Path | None = None,
) -> AnnotationResult:
    """Annotate every statement of both parties once; results keep corpus order."""
    if not corpus.agreement:
        raise AnnotationError("scenario has no agreement clauses")
    index = index or build_index(corpus.agreement, provider)
    clauses = {c.id: c for c in corpus.agreement}
    events = EventLog()
    statements = corpus.statements()
    # queue-driven scripts answer in call order, so they need a single worker
    if getattr(classifier, "sequential", False):
        workers = 1

    def one(s: Statement) -> AnnotationRecord:
        return annotate_statement(s, index, k, classifier, clauses=clauses, provider=provider,
                                  party_name=corpus.party(s.party_id).name, registry=registry,
                                  settings=settings, events=events, context_chars=context_chars)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(one, statements))
    else:
        records = [one(s) for s in statements]
    by_id = {r.statement_id: r for r in records}

    owner = {s.id: s.party_id for s in statements}
    counts = {p.id: [0, 0, 0] for p in corpus.parties}
    for r in records:
        if r.fallback and not include_fallbacks:
            continue
        counts[owner[r.statement_id]][int(r.label)] += 1
    stats = CorpusStats({pid: PartyCounts(c[2], c[1], c[0]) for pid, c in counts.items()})

    n = len(records)
    fallbacks = sum(r.fallback for r in records)
    top_scores = [r.scores[0] for r in records if r.scores]
    mean_sim = [sum(r.scores) / len(r.scores) for r in records if r.scores]
    report = {
        "scenario": corpus.id,
        "k": k,
        "statements": n,
        "label_counts": stats.to_dict(),
        "fallbacks": fallbacks,
        "fallback_rate": fallbacks / n if n else 0.0,
        "include_fallbacks": include_fallbacks,
        "mean_evidence_similarity": round(sum(mean_sim) / len(mean_sim), 12) if mean_sim else None,
        "mean_top1_similarity": round(sum(top_scores) / len(top_scores), 12) if top_scores else None,
        "fallback_statements": [r.statement_id for r in records if r.fallback],
    }
    result = AnnotationResult(by_id, stats, events, report)
    if out_dir is not None:
        write_annotation(result, out_dir)
    return result


def write_annotation(result: AnnotationResult, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_labels(out / "labels.jsonl", result.labels)
    with open(out / "annotations.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for r in result.records.values():
            fh.write(json.dumps(r.to_dict(), ensure_ascii=False) + "\n")
    (out / "report.json").write_text(json.dumps(result.report, indent=2, ensure_ascii=False) + "\n",
                                     encoding="utf-8")
    return out
