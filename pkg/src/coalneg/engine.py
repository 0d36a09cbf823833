"""Two-level negotiation loop.

The high (HI) level picks which of the proposer's statements goes on the
table next; the low (LO) level negotiates that statement for at most
``h_lo`` rounds.  Policies are natural-language memos refined by a critique
call after each episode (LO) and, with ground-truth feedback, after each HI
step.

LO protocol, one backend decision per round:

====================  ===============================================
round                 decision
====================  ===============================================
responder             SUPPORT -> agreement; OPPOSE -> proposer's turn
proposer              SUPPORT (insist), OPPOSE (withdraw), REFINE
                      (new text) or COMPROMISE (concede a ledger entry)
responder             evaluates the insisted / refined / traded
                      statement; OPPOSE hands the turn back to the
                      proposer while rounds remain
====================  ===============================================

Agreement on the original text gives ``Included``, on a refined text
``PartlyIncluded``; no agreement within the budget gives ``NotIncluded``.
An accepted compromise makes the current statement ``Included`` and lifts
the conceded statement from ``NotIncluded`` to ``compromise_upgrade``.
"""

from __future__ import annotations

import logging
import random
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Mapping, Sequence

from .corpus import RunArtifactWriter, ScenarioCorpus
from .domain import (
    Compromise,
    NegotiationAction,
    Oppose,
    OutcomeLabel,
    Refine,
    Statement,
    Support,
    action_from_dict,
)
from .events import EventLog
from .llm import Backend, BackendError, CallSettings, Message
from .parsing import Decision, Schema, decide, match_identifier, parse_decision
from .prompts import TemplateId, TemplateRegistry, default_registry

logger = logging.getLogger(__name__)


class EngineError(RuntimeError):
    pass


class NegotiationAborted(EngineError):
    def __init__(self, hi_step: int, cause: Exception):
        self.hi_step = hi_step
        self.cause = cause
        super().__init__(f"negotiation aborted at HI step {hi_step}: {cause}")


class Variant(str, Enum):
    HMDP = "hmdp"
    HMDP_LO = "hmdp-lo"
    HMDP_BASE = "hmdp-base"

    @property
    def display(self) -> str:
        return {"hmdp": "hMDP", "hmdp-lo": "hMDP-LO", "hmdp-base": "hMDP-Base"}[self.value]

    @classmethod
    def parse(cls, value: str | Variant) -> Variant:
        if isinstance(value, Variant):
            return value
        key = str(value).strip().lower()
        for v in cls:
            if key in (v.value, v.display.lower()):
                return v
        raise ValueError(f"unknown variant {value!r}; choose one of: {', '.join(v.value for v in cls)}")


@dataclass(frozen=True)
class EngineConfig:
    variant: Variant = Variant.HMDP
    h_lo: int = 3
    temperature: float = 0.5
    seed: int = 111
    ground_truth_feedback: bool = False
    memo_budget: int = 1200
    reflection_budget: int = 1600
    critique_log_size: int = 20
    compromise_upgrade: OutcomeLabel = OutcomeLabel.PartlyIncluded
    max_output_tokens: int = 1024
    model_id: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        object.__setattr__(self, "compromise_upgrade", OutcomeLabel(self.compromise_upgrade))
        if self.h_lo < 1:
            raise ValueError(f"h_lo must be >= 1, got {self.h_lo}")
        if self.memo_budget < 1 or self.reflection_budget < 1:
            raise ValueError("memo and reflection budgets must be positive")

    def to_dict(self) -> dict[str, Any]:
        return {
            "variant": self.variant.value, "h_lo": self.h_lo, "temperature": self.temperature,
            "seed": self.seed, "ground_truth_feedback": self.ground_truth_feedback,
            "memo_budget": self.memo_budget, "reflection_budget": self.reflection_budget,
            "critique_log_size": self.critique_log_size,
            "compromise_upgrade": int(self.compromise_upgrade),
            "max_output_tokens": self.max_output_tokens, "model_id": self.model_id,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> EngineConfig:
        known = cls.__dataclass_fields__
        return cls(**{k: v for k, v in d.items() if k in known})

    def call_settings(self) -> CallSettings:
        return CallSettings(self.temperature, self.seed, self.max_output_tokens, self.model_id)


@dataclass(frozen=True)
class AgentPolicy:
    party_id: str
    hi_memo: str = ""
    lo_memo: str = ""
    critique_log: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {"party_id": self.party_id, "hi_memo": self.hi_memo, "lo_memo": self.lo_memo,
                "critique_log": list(self.critique_log)}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> AgentPolicy:
        return cls(d["party_id"], d["hi_memo"], d["lo_memo"], tuple(d["critique_log"]))


@dataclass(frozen=True)
class LedgerEntry:
    statement_id: str
    owner: str
    explanation: str

    def to_dict(self) -> dict[str, str]:
        return {"statement_id": self.statement_id, "owner": self.owner, "explanation": self.explanation}


@dataclass(frozen=True)
class TurnRecord:
    hi_step: int
    lo_round: int
    acting_party: str
    action: NegotiationAction
    reason: str
    prompt_digest: str
    response_digest: str
    fallback: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {"hi_step": self.hi_step, "lo_round": self.lo_round,
                "acting_party": self.acting_party, "action": self.action.to_dict(),
                "reason": self.reason, "prompt_digest": self.prompt_digest,
                "response_digest": self.response_digest, "fallback": self.fallback}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> TurnRecord:
        return cls(d["hi_step"], d["lo_round"], d["acting_party"], action_from_dict(d["action"]),
                   d["reason"], d["prompt_digest"], d["response_digest"], d.get("fallback", False))


@dataclass(frozen=True)
class Episode:
    hi_step: int
    statement_id: str
    proposer: str
    turns: tuple[TurnRecord, ...]
    outcome: OutcomeLabel
    agreed_text: str
    upgrades: tuple[tuple[str, int, int], ...] = ()  # (statement id, old code, new code)

    @property
    def rounds(self) -> int:
        return max((t.lo_round for t in self.turns), default=0)

    def to_dict(self) -> dict[str, Any]:
        return {"hi_step": self.hi_step, "statement_id": self.statement_id,
                "proposer": self.proposer, "turns": [t.to_dict() for t in self.turns],
                "outcome": int(self.outcome), "agreed_text": self.agreed_text,
                "upgrades": [list(u) for u in self.upgrades]}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Episode:
        return cls(d["hi_step"], d["statement_id"], d["proposer"],
                   tuple(TurnRecord.from_dict(t) for t in d["turns"]), OutcomeLabel(d["outcome"]),
                   d["agreed_text"], tuple(tuple(u) for u in d.get("upgrades", [])))


@dataclass
class Trajectory:
    episodes: list[Episode] = field(default_factory=list)

    @property
    def hi_order(self) -> list[str]:
        return [e.statement_id for e in self.episodes]

    def to_dict(self) -> dict[str, Any]:
        return {"hi_order": self.hi_order, "lo_episodes": [e.to_dict() for e in self.episodes]}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Trajectory:
        return cls([Episode.from_dict(e) for e in d["lo_episodes"]])


@dataclass
class NegotiationState:
    proposer: str
    remaining: dict[str, list[str]]
    opposed_ledger: dict[str, list[LedgerEntry]]
    outcomes_so_far: dict[str, OutcomeLabel] = field(default_factory=dict)
    last_explanations: dict[str, str] = field(default_factory=dict)
    last_feedback: dict[str, str] = field(default_factory=dict)
    current_statement: Statement | None = None
    round: int = 1

    def to_dict(self) -> dict[str, Any]:
        return {
            "proposer": self.proposer,
            "remaining": {p: list(v) for p, v in self.remaining.items()},
            "opposed_ledger": {p: [e.to_dict() for e in v] for p, v in self.opposed_ledger.items()},
            "outcomes_so_far": {k: int(v) for k, v in self.outcomes_so_far.items()},
            "last_explanations": dict(self.last_explanations),
            "last_feedback": dict(self.last_feedback),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> NegotiationState:
        return cls(
            proposer=d["proposer"],
            remaining={p: list(v) for p, v in d["remaining"].items()},
            opposed_ledger={p: [LedgerEntry(**e) for e in v] for p, v in d["opposed_ledger"].items()},
            outcomes_so_far={k: OutcomeLabel(v) for k, v in d["outcomes_so_far"].items()},
            last_explanations=dict(d["last_explanations"]),
            last_feedback=dict(d["last_feedback"]),
        )


# ---------------------------------------------------------------------------
# rewards and memos

def reward_lo(outcome: OutcomeLabel) -> tuple[bool, str]:
    """Episode success flag plus a one-sentence status usable as reflection."""
    outcome = OutcomeLabel(outcome)
    if outcome is OutcomeLabel.Included:
        return True, "The parties reached agreement on the statement as proposed; it is included."
    if outcome is OutcomeLabel.PartlyIncluded:
        return True, "The parties agreed on a refined version of the statement; it is partly included."
    return False, "The negotiation over the statement failed; it is not included."


def reward_hi(outcomes_so_far: Mapping[str, OutcomeLabel], gold: Mapping[str, OutcomeLabel]) -> int:
    """Number of dealt statements whose simulated label equals the gold label."""
    missing = [sid for sid in outcomes_so_far if sid not in gold]
    if missing:
        raise EngineError(f"no gold label for dealt statement(s): {', '.join(missing[:5])}")
    return sum(1 for sid, label in outcomes_so_far.items() if gold[sid] == label)


_SENTENCE_SPLIT = re.compile(r"(?<=[.!?])\s+")


def _sentences(text: str) -> list[str]:
    return [s for s in _SENTENCE_SPLIT.split(text.strip()) if s]


def append_memo(memo: str, note: str, budget: int) -> str:
    """Append ``note``; evict oldest sentences until the memo fits ``budget`` chars."""
    parts = _sentences(memo) + _sentences(note)
    while parts and len(" ".join(parts)) > budget:
        parts.pop(0)
    if not parts:
        return " ".join(_sentences(note))[:budget]
    return " ".join(parts)


# ---------------------------------------------------------------------------
# the engine

@dataclass
class NegotiationResult:
    trajectory: Trajectory
    outcomes: dict[str, OutcomeLabel]
    policies: dict[str, AgentPolicy]
    events: EventLog
    reward_trace: list[dict[str, Any]]

    def summary(self) -> dict[str, Any]:
        counts = {label.name: 0 for label in OutcomeLabel}
        for label in self.outcomes.values():
            counts[label.name] += 1
        ev = self.events.counts()
        return {
            "label_counts": counts,
            "statements": len(self.outcomes),
            "reward_trace": self.reward_trace,
            "event_counts": ev,
            "fallbacks": ev.get("parse_fallback", 0),
            "hallucinated_ids": ev.get("hallucinated_id", 0),
            "backend_calls": ev.get("backend_call", 0),
            "fallback_statements": sorted({e["statement_id"] for e in self.events.of_kind("parse_fallback")
                                           if "statement_id" in e}),
        }


class Negotiation:
    """One stateful, strictly sequential negotiation run over a scenario."""

    def __init__(self, corpus: ScenarioCorpus, config: EngineConfig, backend: Backend, *,
                 registry: TemplateRegistry | None = None, writer: RunArtifactWriter | None = None):
        self.corpus = corpus
        self.config = config
        self.backend = backend
        self.registry = registry or default_registry()
        self.writer = writer
        self.settings = config.call_settings()
        self.events = EventLog()
        self.statements = corpus.statement_index()
        self.party_ids = [p.id for p in corpus.parties]
        if config.ground_truth_feedback:
            gold = corpus.gold_labels or {}
            missing = [sid for sid in self.statements if sid not in gold]
            if missing:
                raise EngineError(
                    f"ground-truth feedback needs gold labels for every statement; missing {missing[:5]}")
        self.state = NegotiationState(
            proposer=self.party_ids[0],
            remaining={pid: [s.id for s in corpus.manifestos[pid].statements] for pid in self.party_ids},
            opposed_ledger={pid: [] for pid in self.party_ids},
        )
        self.policies = {pid: AgentPolicy(pid) for pid in self.party_ids}
        self.trajectory = Trajectory()
        self.reward_trace: list[dict[str, Any]] = []
        self.completed_steps = 0

    # -- helpers -----------------------------------------------------------

    @property
    def h_hi(self) -> int:
        return len(self.statements)

    def _name(self, party_id: str) -> str:
        return self.corpus.party(party_id).name

    def _base_context(self, party_id: str) -> dict[str, str]:
        return {"PARTY": self._name(party_id),
                "OPPOSING-PARTY": self._name(self.corpus.other(party_id).id)}

    def _rng(self, purpose: str, hi_step: int) -> random.Random:
        return random.Random(f"{self.config.seed}:{purpose}:{hi_step}")

    def _messages(self, template: TemplateId, context: Mapping[str, Any], language: str) -> list[Message]:
        system, user = self.registry.render(template, context, language)
        return [Message("system", system), Message("user", user)]

    def reflection(self, party_id: str) -> str:
        """Negotiation status shown to an agent, bounded by the reflection budget."""
        if self.config.variant is Variant.HMDP_BASE:
            return "No information about the rest of the negotiation is available."
        policy = self.policies[party_id]
        feedback = self.state.last_feedback.get(party_id, "No statement has been negotiated yet.")
        memos = [m for m in (policy.hi_memo if self.config.variant is Variant.HMDP else "",
                             policy.lo_memo) if m]
        if not memos:
            return feedback[-self.config.reflection_budget:]
        notes = " ".join(memos)
        room = self.config.reflection_budget - len(feedback) - len(" Your strategy notes: ")
        if room <= 0:
            return feedback[-self.config.reflection_budget:]
        # oldest memo content goes first
        return f"{feedback} Your strategy notes: {notes[-room:]}"

    # -- HI level ----------------------------------------------------------

    def next_proposer(self, hi_step: int) -> str:
        preferred = self.party_ids[(hi_step - 1) % 2]
        if self.state.remaining[preferred]:
            return preferred
        return self.party_ids[hi_step % 2]

    def select_statement(self, agent: AgentPolicy, state: NegotiationState, rng: random.Random,
                         hi_step: int = 0) -> Statement:
        remaining = state.remaining[agent.party_id]
        if not remaining:
            raise EngineError(f"party {agent.party_id!r} has no remaining statements")
        if self.config.variant is not Variant.HMDP or len(remaining) == 1:
            return self.statements[rng.choice(remaining)]

        listing = [(sid, self.statements[sid].text) for sid in remaining]
        ctx = {**self._base_context(agent.party_id), "LIST": listing,
               "REFLECTION": self.reflection(agent.party_id)}
        language = self.statements[remaining[0]].language
        offered: list[str] = []

        def validate(parsed) -> str | None:
            if match_identifier(parsed.answer_raw, remaining) is None:
                offered.append(parsed.answer_raw)
                return f"unknown statement id {parsed.answer_raw!r}"
            return None

        d = decide(self.backend, self.settings, self._messages(TemplateId.StatementSelect, ctx, language),
                   Schema.CompromisePick, self.events, purpose="select", validate=validate,
                   reminder_extra="Valid ids: " + ", ".join(remaining) + ".",
                   hi_step=hi_step, party=agent.party_id)
        if d.fallback:
            pick = rng.choice(remaining)
            if offered:
                self.events.emit("hallucinated_id", purpose="select", hi_step=hi_step,
                                 party=agent.party_id, offered=offered, fallback_pick=pick)
            return self.statements[pick]
        return self.statements[match_identifier(d.parsed.answer_raw, remaining)]

    # -- LO level ----------------------------------------------------------

    def _turn(self, hi_step: int, lo_round: int, party: str, action: NegotiationAction,
              d: Decision, fallback: bool | None = None) -> TurnRecord:
        return TurnRecord(hi_step, lo_round, party, action, d.parsed.reason, d.prompt_digest,
                          d.response_digest, d.fallback if fallback is None else fallback)

    def run_lo_episode(self, statement: Statement, proposer: str, responder: str,
                       hi_step: int) -> Episode:
        cfg = self.config
        state = self.state
        state.current_statement = statement
        tags = {"hi_step": hi_step, "statement_id": statement.id}
        lang = statement.language
        turns: list[TurnRecord] = []
        text = statement.text
        refined = False
        offer: LedgerEntry | None = None
        you_did = "proposed"
        they_did = "proposed"
        explanation = f"it is part of the manifesto of the {self._name(proposer)}"
        upgrades: list[tuple[str, int, int]] = []
        outcome = OutcomeLabel.NotIncluded
        rnd = 0

        while True:
            # responder's stance round
            rnd += 1
            state.round = rnd
            if offer is not None:
                ctx = {**self._base_context(responder),
                       "COMPROMISE-STATEMENT": self.statements[offer.statement_id].text,
                       "STATEMENT": text}
                msgs = self._messages(TemplateId.CompromiseFollowUp, ctx, lang)
            else:
                ctx = {**self._base_context(responder), "ACTION": they_did, "STATEMENT": text,
                       "EXPLANATION": explanation, "STATEMENT-SCORE": str(statement.importance),
                       "REFLECTION": self.reflection(responder)}
                msgs = self._messages(TemplateId.InitialQuery, ctx, lang)
            d = decide(self.backend, self.settings, msgs, Schema.Stance, self.events,
                       purpose="stance", party=responder, lo_round=rnd, **tags)
            turns.append(self._turn(hi_step, rnd, responder, d.value, d))
            state.last_explanations[responder] = d.parsed.reason
            if isinstance(d.value, Support):
                if offer is not None:
                    outcome = OutcomeLabel.Included
                    old = state.outcomes_so_far[offer.statement_id]
                    new = max(old, cfg.compromise_upgrade)
                    state.outcomes_so_far[offer.statement_id] = new
                    state.opposed_ledger[proposer].remove(offer)
                    upgrades.append((offer.statement_id, int(old), int(new)))
                    self.events.emit("compromise_upgrade", conceded=offer.statement_id,
                                     old=int(old), new=int(new), party=proposer, **tags)
                else:
                    outcome = OutcomeLabel.PartlyIncluded if refined else OutcomeLabel.Included
                break
            objection = d.parsed.reason or "they did not give a reason"
            if rnd >= cfg.h_lo:
                break

            # proposer's four-way round
            rnd += 1
            state.round = rnd
            ctx = {**self._base_context(proposer), "ACTION": you_did, "STATEMENT": text,
                   "OPPOSING-PARTY-EXPLANATION": objection,
                   "STATEMENT-SCORE": str(statement.importance),
                   "REFLECTION": self.reflection(proposer)}
            msgs = self._messages(TemplateId.FollowUp, ctx, lang)
            d = decide(self.backend, self.settings, msgs, Schema.FourWay, self.events,
                       purpose="four_way", party=proposer, lo_round=rnd, **tags)
            state.last_explanations[proposer] = d.parsed.reason
            move = d.value
            followup = msgs + [Message("assistant", d.parsed.to_tagged())]
            offer = None

            if move == "COMPROMISE":
                chips = [e for e in state.opposed_ledger[proposer] if e.owner == responder]
                if chips:
                    entry, pick_fallback = self._pick_compromise(chips, followup, proposer, rnd, tags)
                    turns.append(self._turn(hi_step, rnd, proposer, Compromise(entry.statement_id), d,
                                            d.fallback or pick_fallback))
                    offer = entry
                    you_did = "offered a compromise on"
                    they_did = "offered a compromise on"
                    explanation = d.parsed.reason or explanation
                else:
                    self.events.emit("empty_ledger", party=proposer, lo_round=rnd, **tags)
                    move = "REFINE"

            if move == "REFINE":
                new_text, refine_fallback, rd = self._refine(text, followup, proposer, rnd, tags)
                if new_text is None:
                    # no usable refinement: treat as a withdrawal
                    turns.append(self._turn(hi_step, rnd, proposer, Oppose(), d, True))
                    break
                turns.append(self._turn(hi_step, rnd, proposer, Refine(new_text), d,
                                        d.fallback or refine_fallback))
                text = new_text
                refined = True
                you_did = they_did = "proposed a refined version of"
                explanation = rd.parsed.reason or d.parsed.reason or explanation
            elif isinstance(move, Oppose):
                turns.append(self._turn(hi_step, rnd, proposer, Oppose(), d))
                break
            elif isinstance(move, Support):
                turns.append(self._turn(hi_step, rnd, proposer, Support(), d))
                you_did = "insisted on"
                they_did = "insists on"
                explanation = d.parsed.reason or explanation
            if rnd >= cfg.h_lo:
                break

        if outcome is OutcomeLabel.NotIncluded:
            reason = state.last_explanations.get(responder, "")
            state.opposed_ledger[responder].append(LedgerEntry(statement.id, proposer, reason))
        state.current_statement = None
        return Episode(hi_step, statement.id, proposer, tuple(turns), outcome, text, tuple(upgrades))

    def _refine(self, current: str, followup: list[Message], proposer: str, rnd: int,
                tags: dict[str, Any]) -> tuple[str | None, bool, Decision]:
        _, user = self.registry.render(TemplateId.Refinement, self._base_context(proposer),
                                       self.statements[tags["statement_id"]].language)
        msgs = followup + [Message("user", user)]

        def validate(parsed) -> str | None:
            if parsed.answer_raw.strip() == current.strip():
                return "refined text is identical to the current statement"
            return None

        d = decide(self.backend, self.settings, msgs, Schema.RefinedText, self.events,
                   purpose="refine_text", validate=validate, party=proposer, lo_round=rnd, **tags)
        if d.fallback:
            return None, True, d
        return d.parsed.answer_raw, False, d

    def _pick_compromise(self, chips: list[LedgerEntry], followup: list[Message], proposer: str,
                         rnd: int, tags: dict[str, Any]) -> tuple[LedgerEntry, bool]:
        ids = [e.statement_id for e in chips]
        listing = [(e.statement_id, self.statements[e.statement_id].text) for e in chips]
        ctx = {**self._base_context(proposer), "LIST": listing}
        _, user = self.registry.render(TemplateId.CompromisePick, ctx,
                                       self.statements[tags["statement_id"]].language)
        msgs = followup + [Message("user", user)]
        offered: list[str] = []

        def validate(parsed) -> str | None:
            if match_identifier(parsed.answer_raw, ids) is None:
                offered.append(parsed.answer_raw)
                return f"unknown statement id {parsed.answer_raw!r}"
            return None

        d = decide(self.backend, self.settings, msgs, Schema.CompromisePick, self.events,
                   purpose="compromise_pick", validate=validate,
                   reminder_extra="Valid ids: " + ", ".join(ids) + ".",
                   party=proposer, lo_round=rnd, **tags)
        if d.fallback:
            pick = self._rng("compromise", tags["hi_step"]).choice(ids)
            if offered:
                self.events.emit("hallucinated_id", purpose="compromise_pick", party=proposer,
                                 offered=offered, fallback_pick=pick, **tags)
            return chips[ids.index(pick)], True
        return chips[ids.index(match_identifier(d.parsed.answer_raw, ids))], False

    # -- critique ----------------------------------------------------------

    def critique_update(self, policy: AgentPolicy, trajectory_slice: Sequence[str], reward: str,
                        level: str, hi_step: int = 0) -> AgentPolicy:
        """Ask the backend for a strategy note and append it to the LO or HI memo."""
        level = level.upper()
        if level not in ("LO", "HI"):
            raise ValueError(f"level must be LO or HI, got {level!r}")
        variant = self.config.variant
        if variant is Variant.HMDP_BASE or (variant is Variant.HMDP_LO and level == "HI"):
            return policy
        if not trajectory_slice:
            raise EngineError("critique needs a non-empty trajectory slice")
        memo = policy.lo_memo if level == "LO" else policy.hi_memo
        ctx = {**self._base_context(policy.party_id),
               "LEVEL": "choice of the next statement (high level)" if level == "HI"
               else "moves while negotiating one statement (low level)",
               "TRAJECTORY": "\n".join(trajectory_slice), "REWARD": reward, "MEMO": memo or "(none yet)"}
        purpose = f"critique_{level.lower()}"
        msgs = self._messages(TemplateId.Critique, ctx, self.corpus.language)
        self.events.emit("backend_call", purpose=purpose, reask=False, hi_step=hi_step,
                         party=policy.party_id)
        try:
            reply = self.backend.complete(self.settings.request(msgs)).content
        except BackendError as exc:
            self.events.emit("critique_skipped", level=level, hi_step=hi_step,
                             party=policy.party_id, reason=str(exc))
            return policy
        parsed = parse_decision(reply, Schema.RefinedText)
        if not parsed.valid:
            self.events.emit("critique_skipped", level=level, hi_step=hi_step,
                             party=policy.party_id, reason=parsed.diagnostic)
            return policy
        note = parsed.answer_raw
        log = (policy.critique_log + (note,))[-self.config.critique_log_size:]
        budget = self.config.memo_budget
        if level == "LO":
            return replace(policy, lo_memo=append_memo(policy.lo_memo, note, budget), critique_log=log)
        return replace(policy, hi_memo=append_memo(policy.hi_memo, note, budget), critique_log=log)

    def _episode_lines(self, ep: Episode) -> list[str]:
        lines = [f"Statement {ep.statement_id} raised by {self._name(ep.proposer)}."]
        for t in ep.turns:
            move = t.action.kind.upper()
            lines.append(f"round {t.lo_round}: {self._name(t.acting_party)} chose {move}"
                         + (f" because {t.reason}" if t.reason else ""))
        lines.append(f"Result: {ep.outcome.phrase}.")
        return lines

    # -- HI loop -----------------------------------------------------------

    def run(self) -> NegotiationResult:
        for hi_step in range(self.completed_steps + 1, self.h_hi + 1):
            mark = len(self.events)
            try:
                records = self._step(hi_step)
            except BackendError as exc:
                raise NegotiationAborted(hi_step, exc) from exc
            if self.writer is not None:
                step_events = self.events.events[mark:]
                self.writer.write_many(records + [{"type": "events", "hi_step": hi_step,
                                                   "events": step_events},
                                                  self._checkpoint(hi_step)])
            self.completed_steps = hi_step
        return self.result()

    def _step(self, hi_step: int) -> list[dict[str, Any]]:
        state = self.state
        proposer = self.next_proposer(hi_step)
        responder = self.corpus.other(proposer).id
        state.proposer = proposer
        statement = self.select_statement(self.policies[proposer], state,
                                          self._rng("select", hi_step), hi_step)
        state.remaining[proposer].remove(statement.id)
        ep = self.run_lo_episode(statement, proposer, responder, hi_step)
        state.outcomes_so_far[statement.id] = ep.outcome
        self.trajectory.episodes.append(ep)

        success, feedback = reward_lo(ep.outcome)
        status = f"Last statement ({statement.id}, raised by {self._name(proposer)}): {feedback}"
        for pid in self.party_ids:
            state.last_feedback[pid] = status
        self.policies[proposer] = self.critique_update(
            self.policies[proposer], self._episode_lines(ep), feedback, "LO", hi_step)

        trace: dict[str, Any] = {"hi_step": hi_step, "statement_id": statement.id,
                                 "lo_success": success}
        if self.config.ground_truth_feedback:
            gold = self.corpus.gold_labels or {}
            matches = reward_hi(state.outcomes_so_far, gold)
            dealt = len(state.outcomes_so_far)
            trace.update(hi_reward=matches, hi_ratio=matches / dealt)
            lines = [f"step {e.hi_step}: {self._name(e.proposer)} raised {e.statement_id}; "
                     f"simulated {state.outcomes_so_far[e.statement_id].phrase}, "
                     f"real agreement {gold[e.statement_id].phrase}"
                     for e in self.trajectory.episodes]
            reward = (f"{matches} of {dealt} negotiated statements match the real coalition "
                      f"agreement ({matches / dealt:.0%}).")
            self.policies[proposer] = self.critique_update(self.policies[proposer], lines, reward,
                                                           "HI", hi_step)
        self.reward_trace.append(trace)
        return [{"type": "turn", **t.to_dict()} for t in ep.turns] + \
               [{"type": "episode", **ep.to_dict()}]

    def _checkpoint(self, hi_step: int) -> dict[str, Any]:
        return {"type": "checkpoint", "hi_step": hi_step, "state": self.state.to_dict(),
                "policies": {p: pol.to_dict() for p, pol in self.policies.items()},
                "reward_trace": list(self.reward_trace)}

    def restore(self, records: Sequence[Mapping[str, Any]]) -> int:
        """Rebuild engine state from previously written run records; returns steps restored."""
        checkpoints = [r for r in records if r.get("type") == "checkpoint"]
        if not checkpoints:
            return 0
        cp = checkpoints[-1]
        last = cp["hi_step"]
        self.state = NegotiationState.from_dict(cp["state"])
        self.policies = {p: AgentPolicy.from_dict(d) for p, d in cp["policies"].items()}
        self.reward_trace = list(cp["reward_trace"])
        self.trajectory = Trajectory([Episode.from_dict(r)
                                      for r in records
                                      if r.get("type") == "episode" and r["hi_step"] <= last])
        self.events = EventLog()
        for r in records:
            if r.get("type") == "events" and r["hi_step"] <= last:
                self.events.extend(r["events"])
        self.completed_steps = last
        return last

    def result(self) -> NegotiationResult:
        order = [s.id for s in self.corpus.statements()]
        outcomes = {sid: self.state.outcomes_so_far[sid] for sid in order
                    if sid in self.state.outcomes_so_far}
        return NegotiationResult(self.trajectory, outcomes, dict(self.policies), self.events,
                                 list(self.reward_trace))


def run_negotiation(corpus: ScenarioCorpus, config: EngineConfig, backend: Backend, *,
                    registry: TemplateRegistry | None = None,
                    writer: RunArtifactWriter | None = None,
                    resume_records: Sequence[Mapping[str, Any]] | None = None) -> NegotiationResult:
    """Run (or resume) a full negotiation; every statement of both parties gets one label."""
    neg = Negotiation(corpus, config, backend, registry=registry, writer=writer)
    if resume_records:
        neg.restore(resume_records)
    return neg.run()
