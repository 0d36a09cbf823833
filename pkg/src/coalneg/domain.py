"""Core value types shared by every part of the simulator.

All values are frozen dataclasses; ``to_dict``/``from_dict`` give a plain-JSON
form used by the corpus files and run artifacts.
"""

from __future__ import annotations

import unicodedata
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Any, ClassVar, Union


class DomainError(ValueError):
    """A value violates a domain invariant."""


def normalize_text(text: str) -> str:
    return unicodedata.normalize("NFC", text)


class OutcomeLabel(IntEnum):
    NotIncluded = 0
    PartlyIncluded = 1
    Included = 2

    @property
    def phrase(self) -> str:
        return _LABEL_PHRASES[self]


_LABEL_PHRASES = {
    OutcomeLabel.NotIncluded: "not included",
    OutcomeLabel.PartlyIncluded: "partly included",
    OutcomeLabel.Included: "included",
}


def label_from_code(code: int) -> OutcomeLabel:
    """Map an integer code in {0, 1, 2} to its :class:`OutcomeLabel`."""
    # bool is an int subclass; True must not sneak in as PartlyIncluded
    if isinstance(code, bool) or not isinstance(code, int):
        raise DomainError(f"label code must be an integer, got {code!r}")
    try:
        return OutcomeLabel(code)
    except ValueError:
        raise DomainError(f"invalid label code {code}; expected one of 0, 1, 2") from None


@dataclass(frozen=True)
class Party:
    id: str
    name: str
    country: str
    election_year: int

    def __post_init__(self) -> None:
        if not self.id or not self.id.strip():
            raise DomainError("party id must be non-empty")
        if not 1900 <= self.election_year <= 2100:
            raise DomainError(f"election year {self.election_year} outside [1900, 2100]")

    def to_dict(self) -> dict[str, Any]:
        return {"id": self.id, "name": self.name, "country": self.country,
                "election_year": self.election_year}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Party:
        return cls(d["id"], d["name"], d["country"], int(d["election_year"]))


DEFAULT_IMPORTANCE = 5


@dataclass(frozen=True)
class Statement:
    id: str
    party_id: str
    text: str
    importance: int = DEFAULT_IMPORTANCE
    language: str = "en"

    def __post_init__(self) -> None:
        if not self.id:
            raise DomainError("statement id must be non-empty")
        if not self.text.strip():
            raise DomainError(f"statement {self.id!r} has empty text")
        if isinstance(self.importance, bool) or not isinstance(self.importance, int) \
                or not 1 <= self.importance <= 10:
            raise DomainError(f"statement {self.id!r}: importance {self.importance!r} not in [1, 10]")
        object.__setattr__(self, "text", normalize_text(self.text))

    def to_dict(self) -> dict[str, Any]:
        return {"id": self.id, "party": self.party_id, "text": self.text,
                "importance": self.importance, "language": self.language}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Statement:
        return cls(d["id"], d["party"], d["text"],
                   d.get("importance", DEFAULT_IMPORTANCE), d.get("language", "en"))


@dataclass(frozen=True)
class Manifesto:
    party_id: str
    statements: tuple[Statement, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "statements", tuple(self.statements))
        if not self.statements:
            raise DomainError(f"manifesto of {self.party_id!r} has no statements")
        seen: set[str] = set()
        for s in self.statements:
            if s.id in seen:
                raise DomainError(f"duplicate statement id {s.id!r} in manifesto of {self.party_id!r}")
            seen.add(s.id)

    def __len__(self) -> int:
        return len(self.statements)

    def get(self, statement_id: str) -> Statement:
        for s in self.statements:
            if s.id == statement_id:
                return s
        raise KeyError(statement_id)

    def to_dict(self) -> dict[str, Any]:
        return {"party": self.party_id, "statements": [s.to_dict() for s in self.statements]}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Manifesto:
        return cls(d["party"], tuple(Statement.from_dict(s) for s in d["statements"]))


@dataclass(frozen=True)
class AgreementClause:
    id: str
    text: str

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise DomainError(f"agreement clause {self.id!r} has empty text")
        object.__setattr__(self, "text", normalize_text(self.text))

    def to_dict(self) -> dict[str, Any]:
        return {"id": self.id, "text": self.text}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> AgreementClause:
        return cls(d["id"], d["text"])


# Negotiation moves.  Support/Oppose double as the two stances.

@dataclass(frozen=True)
class Support:
    kind: ClassVar[str] = "support"

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind}


@dataclass(frozen=True)
class Oppose:
    kind: ClassVar[str] = "oppose"

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind}


@dataclass(frozen=True)
class Refine:
    new_text: str
    kind: ClassVar[str] = "refine"

    def __post_init__(self) -> None:
        if not self.new_text.strip():
            raise DomainError("refine action needs non-empty text")

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "new_text": self.new_text}


@dataclass(frozen=True)
class Compromise:
    conceded_statement_id: str
    kind: ClassVar[str] = "compromise"

    def __post_init__(self) -> None:
        if not self.conceded_statement_id:
            raise DomainError("compromise action needs a conceded statement id")

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "conceded_statement_id": self.conceded_statement_id}


NegotiationAction = Union[Support, Oppose, Refine, Compromise]


def action_from_dict(d: dict[str, Any]) -> NegotiationAction:
    kind = d.get("kind")
    if kind == "support":
        return Support()
    if kind == "oppose":
        return Oppose()
    if kind == "refine":
        return Refine(d["new_text"])
    if kind == "compromise":
        return Compromise(d["conceded_statement_id"])
    raise DomainError(f"unknown action kind {kind!r}")


class LabelSource(str, Enum):
    Gold = "gold"
    Annotated = "annotated"
    Simulated = "simulated"


@dataclass(frozen=True)
class LabeledStatement:
    statement_id: str
    label: OutcomeLabel
    source: LabelSource
    evidence: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if self.evidence is not None:
            object.__setattr__(self, "evidence", tuple(self.evidence))
        if (self.evidence is not None) != (self.source is LabelSource.Annotated):
            raise DomainError("evidence must be present exactly when source is Annotated")

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"statement_id": self.statement_id, "label": int(self.label),
                             "source": self.source.value}
        if self.evidence is not None:
            d["evidence"] = list(self.evidence)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> LabeledStatement:
        ev = d.get("evidence")
        return cls(d["statement_id"], label_from_code(d["label"]), LabelSource(d["source"]),
                   tuple(ev) if ev is not None else None)
