"""Two ablation baselines: a one-shot classifier and free-form negotiation with a judge."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable

from .corpus import ScenarioCorpus
from .domain import OutcomeLabel, Party, Statement
from .events import EventLog
from .llm import Backend, BackendError, CallSettings, Message
from .parsing import _ANSWER_RE, Schema, decide
from .prompts import TemplateId, TemplateRegistry, default_registry
from .retrieval import ClauseIndex, EmbeddingProvider, build_index, top_k

logger = logging.getLogger(__name__)

DEFAULT_ROUNDS = 3
NO_CONTEXT = "(none)"


class BaselineError(ValueError):
    pass


class BaselineKind(str, Enum):
    Classifier = "classifier"
    OpenNeg = "openneg"

    @property
    def display(self) -> str:
        return "Classifier" if self is BaselineKind.Classifier else "OpenNeg"

    @classmethod
    def parse(cls, text: str) -> BaselineKind:
        for kind in cls:
            if text.lower() in (kind.value, kind.display.lower()):
                return kind
        raise BaselineError(f"unknown baseline kind {text!r}; expected one of: "
                            + ", ".join(k.value for k in cls))


@dataclass
class BaselineRun:
    kind: BaselineKind
    predictions: dict[str, OutcomeLabel]
    transcripts: dict[str, list[dict[str, str]]] = field(default_factory=dict)
    fallbacks: dict[str, bool] = field(default_factory=dict)
    events: EventLog = field(default_factory=EventLog)

    def summary(self) -> dict[str, Any]:
        counts = {label.phrase: 0 for label in OutcomeLabel}
        for label in self.predictions.values():
            counts[label.phrase] += 1
        return {
            "kind": self.kind.display,
            "label_counts": counts,
            "fallback_statements": sorted(s for s, f in self.fallbacks.items() if f),
            "event_counts": self.events.counts(),
            "backend_calls": len(self.events.calls()),
        }


def classify_statement(
    statement: Statement,
    backend: Backend,
    *,
    party: str,
    opposing: str,
    context: list[tuple[str, str]] | None = None,
    registry: TemplateRegistry | None = None,
    settings: CallSettings | None = None,
    events: EventLog | None = None,
) -> tuple[OutcomeLabel, bool]:
    """Predict the statement's fate from a single prompt. Returns (label, fallback)."""
    registry = registry or default_registry()
    settings = settings or CallSettings()
    events = events if events is not None else EventLog()
    ctx = {"PARTY": party, "OPPOSING-PARTY": opposing, "STATEMENT": statement.text,
           "CONTEXT": context if context else NO_CONTEXT}
    system, user = registry.render(TemplateId.ClassifierBaseline, ctx, statement.language)
    try:
        d = decide(backend, settings, [Message("system", system), Message("user", user)],
                   Schema.LabelTriple, events, purpose="classify", statement_id=statement.id)
    except BackendError as exc:
        events.emit("parse_fallback", purpose="classify", statement_id=statement.id,
                    diagnostics=[f"backend failure: {exc}"])
        return OutcomeLabel.NotIncluded, True
    return d.value, d.fallback


def _turn_text(reply: str) -> str:
    # party turns are free-form; keep the ANSWER body if the model used tags anyway
    hits = _ANSWER_RE.findall(reply)
    return hits[-1].strip() if hits else reply.strip()


def _format_transcript(transcript: list[dict[str, str]]) -> str:
    if not transcript:
        return "(no messages yet)"
    return "\n".join(f"{t['party']}: {t['text']}" for t in transcript)


def open_negotiation(
    statement: Statement,
    parties: tuple[Party, Party],
    backend: Backend,
    rounds: int = DEFAULT_ROUNDS,
    judge: Backend | None = None,
    *,
    registry: TemplateRegistry | None = None,
    settings: CallSettings | None = None,
    events: EventLog | None = None,
) -> tuple[OutcomeLabel, list[dict[str, str]], bool]:
    """Free-form exchange over one statement, labeled by a separate judge.

    ``parties`` is (owner, other); the owner speaks first in each exchange.
    Returns (label, transcript, fallback).
    """
    if rounds < 1:
        raise BaselineError(f"rounds must be >= 1, got {rounds}")
    registry = registry or default_registry()
    settings = settings or CallSettings()
    events = events if events is not None else EventLog()
    judge = judge or backend
    owner, other = parties
    transcript: list[dict[str, str]] = []
    for exchange in range(1, rounds + 1):
        for speaker, listener in ((owner, other), (other, owner)):
            ctx = {"PARTY": speaker.name, "OPPOSING-PARTY": listener.name,
                   "STATEMENT": statement.text, "OWNER": owner.name,
                   "TRANSCRIPT": _format_transcript(transcript)}
            system, user = registry.render(TemplateId.OpenNegTurn, ctx, statement.language)
            events.emit("backend_call", purpose="openneg_turn", reask=False,
                        statement_id=statement.id, exchange=exchange, party=speaker.id)
            reply = backend.complete(settings.request([Message("system", system),
                                                       Message("user", user)])).content
            transcript.append({"party": speaker.name, "text": _turn_text(reply)})

    ctx = {"PARTY": owner.name, "OPPOSING-PARTY": other.name, "STATEMENT": statement.text,
           "TRANSCRIPT": _format_transcript(transcript)}
    system, user = registry.render(TemplateId.OpenNegJudge, ctx, statement.language)
    try:
        d = decide(judge, settings, [Message("system", system), Message("user", user)],
                   Schema.AgreementJudgment, events, purpose="openneg_judge",
                   statement_id=statement.id)
    except BackendError as exc:
        events.emit("parse_fallback", purpose="openneg_judge", statement_id=statement.id,
                    diagnostics=[f"backend failure: {exc}"])
        return OutcomeLabel.NotIncluded, transcript, True
    return d.value, transcript, d.fallback


def _run_pool(fn: Callable[[Statement], Any], statements: list[Statement], workers: int,
              backends: tuple[Backend, ...]) -> list[Any]:
    if any(getattr(b, "sequential", False) for b in backends):
        workers = 1
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, statements))
    return [fn(s) for s in statements]


def run_classifier(
    corpus: ScenarioCorpus,
    backend: Backend,
    *,
    k: int | None = None,
    provider: EmbeddingProvider | None = None,
    index: ClauseIndex | None = None,
    registry: TemplateRegistry | None = None,
    settings: CallSettings | None = None,
    workers: int = 1,
) -> BaselineRun:
    """Classifier baseline over every statement; ``k`` opts into retrieved clause context."""
    events = EventLog()
    clauses = {c.id: c for c in corpus.agreement}
    if k is not None:
        if provider is None:
            raise BaselineError("retrieved context needs an embedding provider")
        index = index or build_index(corpus.agreement, provider)

    def one(s: Statement) -> tuple[OutcomeLabel, bool]:
        context = None
        if k is not None:
            context = [(cid, clauses[cid].text) for cid, _ in top_k(provider.embed(s.text), index, k)]
        return classify_statement(s, backend, party=corpus.party(s.party_id).name,
                                  opposing=corpus.other(s.party_id).name, context=context,
                                  registry=registry, settings=settings, events=events)

    statements = corpus.statements()
    results = _run_pool(one, statements, workers, (backend,))
    run = BaselineRun(BaselineKind.Classifier, {}, events=events)
    for s, (label, fb) in zip(statements, results):
        run.predictions[s.id] = label
        run.fallbacks[s.id] = fb
    return run


def run_open_negotiation(
    corpus: ScenarioCorpus,
    backend: Backend,
    judge: Backend | None = None,
    *,
    rounds: int = DEFAULT_ROUNDS,
    registry: TemplateRegistry | None = None,
    settings: CallSettings | None = None,
    workers: int = 1,
) -> BaselineRun:
    events = EventLog()
    judge = judge or backend

    def one(s: Statement):
        parties = (corpus.party(s.party_id), corpus.other(s.party_id))
        return open_negotiation(s, parties, backend, rounds, judge, registry=registry,
                                settings=settings, events=events)

    statements = corpus.statements()
    results = _run_pool(one, statements, workers, (backend, judge))
    run = BaselineRun(BaselineKind.OpenNeg, {}, events=events)
    for s, (label, transcript, fb) in zip(statements, results):
        run.predictions[s.id] = label
        run.transcripts[s.id] = transcript
        run.fallbacks[s.id] = fb
    return run
