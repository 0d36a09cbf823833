"""Parsing of ``<REASON>…</REASON><ANSWER>…</ANSWER>`` model replies.

:func:`parse_decision` never raises; malformed replies come back with
``valid=False`` and a diagnostic.  :func:`decide` wraps a backend call with
the re-ask-once-then-default policy shared by every caller.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Sequence

from .domain import Oppose, OutcomeLabel, Support
from .events import EventLog
from .llm import Backend, CallSettings, Message, text_digest


class Schema(str, Enum):
    Stance = "stance"
    FourWay = "four_way"
    LabelTriple = "label_triple"
    RefinedText = "refined_text"
    CompromisePick = "compromise_pick"
    AgreementJudgment = "agreement_judgment"


_ANSWER_RE = re.compile(r"<\s*ANSWER\s*>((?:(?!<\s*ANSWER\s*>).)*?)<\s*/\s*ANSWER\s*>",
                        re.IGNORECASE | re.DOTALL)
_REASON_RE = re.compile(r"<\s*REASON\s*>((?:(?!<\s*REASON\s*>).)*?)<\s*/\s*REASON\s*>",
                        re.IGNORECASE | re.DOTALL)

_MOVE_WORDS = {
    "SUPPORT": re.compile(r"\bsupports?\b", re.IGNORECASE),
    "OPPOSE": re.compile(r"\bopposes?\b", re.IGNORECASE),
    "REFINE": re.compile(r"\brefines?\b", re.IGNORECASE),
    "COMPROMISE": re.compile(r"\bcompromises?\b", re.IGNORECASE),
}
# highest precedence first; a hedged answer resolves to the least agreeable move
_FOUR_WAY_ORDER = ("REFINE", "COMPROMISE", "OPPOSE", "SUPPORT")
_STANCE_ORDER = ("OPPOSE", "SUPPORT")

# alternation is ordered longest-first so "partly included" never matches "included"
_LABEL_RE = re.compile(
    r"\b(not\s+included|partly\s+included|partially\s+included|included)\b", re.IGNORECASE)
_LABEL_WORDS = {
    "not included": OutcomeLabel.NotIncluded,
    "partly included": OutcomeLabel.PartlyIncluded,
    "partially included": OutcomeLabel.PartlyIncluded,
    "included": OutcomeLabel.Included,
}

SCHEMA_KEYWORDS: dict[Schema, tuple[str, ...]] = {
    Schema.Stance: ("SUPPORT", "OPPOSE"),
    Schema.FourWay: ("SUPPORT", "OPPOSE", "REFINE", "COMPROMISE"),
    Schema.LabelTriple: ("not included", "partly included", "included"),
    Schema.AgreementJudgment: ("not included", "partly included", "included"),
}


@dataclass(frozen=True)
class ParsedDecision:
    reason: str
    answer_raw: str
    value: Any = None
    valid: bool = False
    diagnostic: str = ""
    keyword: str = ""

    def to_tagged(self) -> str:
        return f"<REASON>{self.reason}</REASON>\n<ANSWER>{self.answer_raw}</ANSWER>"


def _last(regex: re.Pattern[str], text: str) -> str | None:
    found = regex.findall(text)
    return found[-1] if found else None


def _moves_in(answer: str, order: Sequence[str]) -> list[str]:
    return [word for word in order if _MOVE_WORDS[word].search(answer)]


def _labels_in(answer: str) -> list[OutcomeLabel]:
    return [_LABEL_WORDS[re.sub(r"\s+", " ", m.lower())] for m in _LABEL_RE.findall(answer)]


def parse_decision(content: str, expected: Schema) -> ParsedDecision:
    """Extract the last well-formed REASON/ANSWER pair and map it onto ``expected``."""
    try:
        return _parse(content if isinstance(content, str) else str(content), Schema(expected))
    except Exception as exc:  # noqa: BLE001 - the parser is total by contract
        return ParsedDecision("", "", diagnostic=f"internal parse error: {exc!r}")


def _parse(content: str, schema: Schema) -> ParsedDecision:
    reason = (_last(_REASON_RE, content) or "").strip()
    answer = _last(_ANSWER_RE, content)
    if answer is None:
        return ParsedDecision(reason, "", diagnostic="missing ANSWER tag")
    raw = answer.strip()
    if not raw:
        return ParsedDecision(reason, raw, diagnostic="empty ANSWER tag")

    if schema in (Schema.Stance, Schema.FourWay):
        order = _STANCE_ORDER if schema is Schema.Stance else _FOUR_WAY_ORDER
        found = _moves_in(raw, order)
        if not found:
            return ParsedDecision(reason, raw, diagnostic=f"no {'/'.join(order)} keyword in ANSWER")
        word = found[0]
        value = {"SUPPORT": Support(), "OPPOSE": Oppose()}.get(word, word)
        return ParsedDecision(reason, raw, value, True, keyword=word)

    if schema in (Schema.LabelTriple, Schema.AgreementJudgment):
        labels = _labels_in(raw)
        if not labels and raw in ("0", "1", "2"):
            labels = [OutcomeLabel(int(raw))]
        if not labels:
            return ParsedDecision(reason, raw, diagnostic="no label phrase in ANSWER")
        label = min(labels)
        return ParsedDecision(reason, raw, label, True, keyword=label.phrase)

    # free text: refined statement or a picked statement id
    return ParsedDecision(reason, raw, raw, True, keyword=raw)


def match_identifier(answer: str, candidates: Sequence[str]) -> str | None:
    """Resolve a model's id answer against ``candidates``.

    Exact match wins; otherwise exactly one candidate must appear as a
    standalone token in the answer.
    """
    stripped = answer.strip().strip("'\"`.[]()")
    if stripped in candidates:
        return stripped
    hits = [c for c in candidates
            if re.search(r"(?<![\w-])" + re.escape(c) + r"(?![\w-])", answer)]
    return hits[0] if len(hits) == 1 else None


# ---------------------------------------------------------------------------
# shared call-and-parse policy

_REMINDERS = {
    Schema.Stance: "the ANSWER must contain exactly one of SUPPORT or OPPOSE",
    Schema.FourWay: "the ANSWER must contain exactly one of SUPPORT, OPPOSE, COMPROMISE or REFINE",
    Schema.LabelTriple: "the ANSWER must be one of: not included, partly included, included",
    Schema.AgreementJudgment: "the ANSWER must be one of: not included, partly included, included",
    Schema.RefinedText: "the ANSWER must contain the full text of the refined statement",
    Schema.CompromisePick: "the ANSWER must contain only the id of the chosen statement",
}

FALLBACKS: dict[Schema, Any] = {
    Schema.Stance: Oppose(),
    Schema.FourWay: Oppose(),
    Schema.LabelTriple: OutcomeLabel.NotIncluded,
    Schema.AgreementJudgment: OutcomeLabel.NotIncluded,
}


def format_reminder(schema: Schema, extra: str = "") -> str:
    text = ("Reminder: reply using exactly the format <REASON>...</REASON> "
            f"<ANSWER>...</ANSWER>; {_REMINDERS[schema]}.")
    return f"{text} {extra}".rstrip()


@dataclass(frozen=True)
class Decision:
    parsed: ParsedDecision
    value: Any
    fallback: bool
    prompt_digest: str
    response_digest: str
    calls: int


def decide(
    backend: Backend,
    settings: CallSettings,
    messages: Sequence[Message],
    schema: Schema,
    events: EventLog,
    *,
    purpose: str,
    validate: Callable[[ParsedDecision], str | None] | None = None,
    reminder_extra: str = "",
    **tags: Any,
) -> Decision:
    """Call ``backend``; on an unusable reply re-ask once, then fall back.

    The fallback is ``Oppose`` for stance-like schemas and ``NotIncluded``
    for label schemas; other schemas come back with ``value=None`` and the
    caller picks its own default.  A ``parse_fallback`` event is logged.
    """
    messages = list(messages)
    request = settings.request(messages)
    first_digest = request.digest
    diagnostics = []
    parsed = None
    reply = ""
    for attempt in (1, 2):
        if attempt == 2:
            last = messages[-1]
            messages[-1] = Message(last.role, last.content + "\n\n" +
                                   format_reminder(schema, reminder_extra))
            request = settings.request(messages)
        events.emit("backend_call", purpose=purpose, reask=attempt == 2, **tags)
        reply = backend.complete(request).content
        parsed = parse_decision(reply, schema)
        diagnostic = parsed.diagnostic if not parsed.valid else (validate(parsed) if validate else None)
        if diagnostic is None:
            return Decision(parsed, parsed.value, False, first_digest, text_digest(reply), attempt)
        diagnostics.append(diagnostic)
        if attempt == 1:
            events.emit("reask", purpose=purpose, diagnostic=diagnostic, **tags)
    assert parsed is not None
    events.emit("parse_fallback", purpose=purpose, schema=schema.value,
                diagnostics=diagnostics, **tags)
    return Decision(parsed, FALLBACKS.get(schema), True, first_digest, text_digest(reply), 2)

