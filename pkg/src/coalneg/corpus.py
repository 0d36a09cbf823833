"""Scenario ingestion, dataset statistics and run-artifact persistence.

File grammar (all line-delimited JSON, UTF-8):

* statements: ``{"id", "party", "text", "importance"?, "language"?}``
* agreement:  ``{"id", "text"}``
* labels:     ``{"statement_id", "label"}`` with ``label`` in {0, 1, 2}

A scenario manifest (YAML or JSON) names the country, year, the two parties
and the paths of those files relative to the manifest.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping

import yaml

from .domain import (
    AgreementClause,
    DomainError,
    Manifesto,
    OutcomeLabel,
    Party,
    Statement,
    label_from_code,
)


class CorpusError(ValueError):
    """Invalid corpus input, optionally positioned at ``path:line:column``."""

    def __init__(self, message: str, path: str | os.PathLike | None = None,
                 line: int | None = None, column: int | None = None):
        self.path = str(path) if path is not None else None
        self.line = line
        self.column = column
        self.reason = message
        where = ""
        if self.path:
            where = self.path
            if line is not None:
                where += f":{line}"
                if column is not None:
                    where += f":{column}"
            where += ": "
        super().__init__(where + message)


@dataclass(frozen=True)
class ScenarioCorpus:
    id: str
    country: str
    year: int
    parties: tuple[Party, Party]
    manifestos: Mapping[str, Manifesto]
    agreement: tuple[AgreementClause, ...]
    gold_labels: Mapping[str, OutcomeLabel] | None = None
    language: str = "en"
    source: Path | None = field(default=None, compare=False)
    settings: Mapping[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if len(self.parties) != 2:
            raise CorpusError(f"a scenario needs exactly two parties, got {len(self.parties)}")
        ids = [p.id for p in self.parties]
        if ids[0] == ids[1]:
            raise CorpusError(f"duplicate party id {ids[0]!r}")
        for pid in ids:
            if pid not in self.manifestos:
                raise CorpusError(f"party {pid!r} has no manifesto")
        if self.gold_labels is not None:
            known = set(self.statement_index())
            for sid, label in self.gold_labels.items():
                if sid not in known:
                    raise CorpusError(f"gold label for unknown statement id {sid!r}")
                if not isinstance(label, OutcomeLabel):
                    raise CorpusError(f"label for {sid!r} is not an OutcomeLabel")

    def party(self, party_id: str) -> Party:
        for p in self.parties:
            if p.id == party_id:
                return p
        raise KeyError(party_id)

    def other(self, party_id: str) -> Party:
        a, b = self.parties
        return b if a.id == party_id else a

    def statements(self) -> list[Statement]:
        """All statements, first party's manifesto first."""
        return [s for p in self.parties for s in self.manifestos[p.id].statements]

    def statement_index(self) -> dict[str, Statement]:
        return {s.id: s for s in self.statements()}

    def with_labels(self, labels: Mapping[str, OutcomeLabel] | None) -> ScenarioCorpus:
        return ScenarioCorpus(self.id, self.country, self.year, self.parties, self.manifestos,
                              self.agreement, labels, self.language, self.source, self.settings)


@dataclass(frozen=True)
class PartyCounts:
    included: int
    partly_included: int
    not_included: int

    @property
    def total(self) -> int:
        return self.included + self.partly_included + self.not_included

    def as_row(self) -> dict[str, int]:
        return {"Included": self.included, "PartlyIncluded": self.partly_included,
                "NotIncluded": self.not_included, "total": self.total}


@dataclass(frozen=True)
class CorpusStats:
    parties: Mapping[str, PartyCounts]

    def __getitem__(self, party_id: str) -> PartyCounts:
        return self.parties[party_id]

    @property
    def overall(self) -> PartyCounts:
        return PartyCounts(sum(c.included for c in self.parties.values()),
                           sum(c.partly_included for c in self.parties.values()),
                           sum(c.not_included for c in self.parties.values()))

    def to_dict(self) -> dict[str, dict[str, int]]:
        return {pid: c.as_row() for pid, c in self.parties.items()}


# ---------------------------------------------------------------------------
# reading

def _iter_jsonl(path: Path) -> Iterator[tuple[int, dict[str, Any]]]:
    try:
        fh = open(path, encoding="utf-8")
    except FileNotFoundError:
        raise CorpusError("file not found", path) from None
    except OSError as exc:
        raise CorpusError(f"cannot read file: {exc}", path) from None
    with fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"malformed record: {exc.msg}", path, lineno, exc.colno) from None
            if not isinstance(obj, dict):
                raise CorpusError("record must be a JSON object", path, lineno, 1)
            yield lineno, obj


def _field(obj: dict[str, Any], name: str, path: Path, lineno: int, kind: type = str) -> Any:
    if name not in obj:
        raise CorpusError(f"missing field {name!r}", path, lineno, 1)
    value = obj[name]
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise CorpusError(f"field {name!r} must be an integer, got {value!r}", path, lineno, 1)
    if kind is str and not isinstance(value, str):
        raise CorpusError(f"field {name!r} must be a string, got {value!r}", path, lineno, 1)
    return value


def read_statements(path: Path, default_language: str = "en") -> list[Statement]:
    out: list[Statement] = []
    for lineno, obj in _iter_jsonl(path):
        try:
            out.append(Statement(
                _field(obj, "id", path, lineno),
                _field(obj, "party", path, lineno),
                _field(obj, "text", path, lineno),
                _field(obj, "importance", path, lineno, int) if "importance" in obj else 5,
                obj.get("language", default_language),
            ))
        except DomainError as exc:
            raise CorpusError(str(exc), path, lineno, 1) from None
    return out


def read_agreement(path: Path) -> list[AgreementClause]:
    out: list[AgreementClause] = []
    seen: set[str] = set()
    for lineno, obj in _iter_jsonl(path):
        cid = _field(obj, "id", path, lineno)
        if cid in seen:
            raise CorpusError(f"duplicate clause id {cid!r}", path, lineno, 1)
        seen.add(cid)
        try:
            out.append(AgreementClause(cid, _field(obj, "text", path, lineno)))
        except DomainError as exc:
            raise CorpusError(str(exc), path, lineno, 1) from None
    return out


def read_labels(path: str | os.PathLike) -> dict[str, OutcomeLabel]:
    """Read a gold-label file; order of first appearance is preserved."""
    path = Path(path)
    out: dict[str, OutcomeLabel] = {}
    for lineno, obj in _iter_jsonl(path):
        sid = _field(obj, "statement_id", path, lineno)
        code = _field(obj, "label", path, lineno, int)
        if sid in out:
            raise CorpusError(f"duplicate label for statement id {sid!r}", path, lineno, 1)
        try:
            out[sid] = label_from_code(code)
        except DomainError as exc:
            raise CorpusError(str(exc), path, lineno, 1) from None
    return out


def write_labels(path: str | os.PathLike, labels: Mapping[str, OutcomeLabel]) -> Path:
    """Write labels in the gold-label grammar, in mapping order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for sid, label in labels.items():
            fh.write(json.dumps({"statement_id": sid, "label": int(label)}, ensure_ascii=False) + "\n")
    return path


def _read_manifest(path: Path) -> dict[str, Any]:
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise CorpusError("scenario manifest not found", path) from None
    except OSError as exc:
        raise CorpusError(f"cannot read manifest: {exc}", path) from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        if mark is not None:
            raise CorpusError(f"malformed manifest: {getattr(exc, 'problem', exc)}",
                              path, mark.line + 1, mark.column + 1) from None
        raise CorpusError(f"malformed manifest: {exc}", path) from None
    if not isinstance(data, dict):
        raise CorpusError("manifest must be a mapping", path)
    return data


def load_scenario(manifest_path: str | os.PathLike) -> ScenarioCorpus:
    """Load and fully validate a scenario from its manifest file."""
    path = Path(manifest_path)
    m = _read_manifest(path)
    base = path.parent
    for key in ("country", "year", "parties", "statements"):
        if key not in m:
            raise CorpusError(f"manifest missing key {key!r}", path)
    country = str(m["country"])
    year = m["year"]
    if isinstance(year, bool) or not isinstance(year, int):
        raise CorpusError(f"year must be an integer, got {year!r}", path)
    language = str(m.get("language", "en"))
    raw_parties = m["parties"]
    if not isinstance(raw_parties, list) or len(raw_parties) != 2:
        raise CorpusError("manifest must list exactly two parties", path)
    try:
        parties = tuple(Party(str(p["id"]), str(p.get("name", p["id"])), country, year)
                        for p in raw_parties)
    except (KeyError, TypeError):
        raise CorpusError("each party needs an 'id'", path) from None
    except DomainError as exc:
        raise CorpusError(str(exc), path) from None
    party_ids = {p.id for p in parties}

    stmt_path = base / m["statements"]
    statements = read_statements(stmt_path, language)
    by_party: dict[str, list[Statement]] = {pid: [] for pid in party_ids}
    seen: set[str] = set()
    for s in statements:
        if s.party_id not in party_ids:
            raise CorpusError(f"statement {s.id!r} references unknown party {s.party_id!r}", stmt_path)
        if s.id in seen:
            raise CorpusError(f"duplicate statement id {s.id!r}", stmt_path)
        seen.add(s.id)
        by_party[s.party_id].append(s)
    try:
        manifestos = {pid: Manifesto(pid, tuple(by_party[pid])) for pid in (p.id for p in parties)}
    except DomainError as exc:
        raise CorpusError(str(exc), stmt_path) from None

    agreement: list[AgreementClause] = []
    if m.get("agreement"):
        agreement = read_agreement(base / m["agreement"])

    gold = None
    if m.get("labels"):
        label_path = base / m["labels"]
        gold = read_labels(label_path)
        for sid in gold:
            if sid not in seen:
                raise CorpusError(f"label for unknown statement id {sid!r}", label_path)

    return ScenarioCorpus(
        id=str(m.get("id", path.stem)),
        country=country,
        year=year,
        parties=parties,  # type: ignore[arg-type]
        manifestos=manifestos,
        agreement=tuple(agreement),
        gold_labels=gold,
        language=language,
        source=path.resolve(),
        settings=dict(m.get("engine") or {}),
    )


def stats(corpus: ScenarioCorpus, labels: Mapping[str, OutcomeLabel] | None = None) -> CorpusStats:
    """Per-party label counts over the gold labels, or ``labels`` if given."""
    labels = corpus.gold_labels if labels is None else labels
    if not labels:
        raise CorpusError("stats need a non-empty label map")
    owner = {s.id: s.party_id for s in corpus.statements()}
    counts = {p.id: [0, 0, 0] for p in corpus.parties}
    for sid, label in labels.items():
        if sid not in owner:
            raise CorpusError(f"label for unknown statement id {sid!r}")
        counts[owner[sid]][int(label)] += 1
    return CorpusStats({pid: PartyCounts(included=c[2], partly_included=c[1], not_included=c[0])
                        for pid, c in counts.items()})


# ---------------------------------------------------------------------------
# run artifacts

class RunArtifactWriter:
    """Append-only JSONL sink.

    Each record is stamped with the scenario id, config digest and a
    monotonically increasing ``seq``.  Appends are serialized by a lock so
    several threads may share one writer.
    """

    def __init__(self, sink: str | os.PathLike, scenario_id: str, config_digest: str,
                 filename: str = "records.jsonl"):
        self.dir = Path(sink)
        self.path = self.dir / filename
        self.scenario_id = scenario_id
        self.config_digest = config_digest
        self._lock = threading.Lock()
        self._seq = 0
        if self.path.exists():
            _drop_torn_tail(self.path)
            for rec in read_run_artifacts(self.path):
                self._seq = max(self._seq, int(rec.get("seq", 0)))

    @property
    def seq(self) -> int:
        return self._seq

    def _stamp(self, record: Any, seq: int) -> str:
        body = record.to_dict() if hasattr(record, "to_dict") else record
        if not isinstance(body, dict):
            raise TypeError(f"run record must serialize to a mapping, got {type(body).__name__}")
        stamped = {"seq": seq, "scenario": self.scenario_id, "config_digest": self.config_digest,
                   **body}
        return json.dumps(stamped, ensure_ascii=False, sort_keys=False, allow_nan=False)

    def write(self, record: Any) -> Path:
        return self.write_many([record])

    def write_many(self, records: Iterable[Any]) -> Path:
        """Append several records with a single flush (used for atomic HI steps)."""
        with self._lock:
            lines = []
            seq = self._seq
            for rec in records:
                seq += 1
                lines.append(self._stamp(rec, seq))
            self.dir.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
                fh.write("".join(line + "\n" for line in lines))
                fh.flush()
            self._seq = seq
        return self.path


def _drop_torn_tail(path: Path) -> None:
    data = path.read_bytes()
    if data and not data.endswith(b"\n"):
        with open(path, "r+b") as fh:
            fh.truncate(data.rfind(b"\n") + 1)


def write_run_artifact(record: Any, sink: str | os.PathLike, scenario_id: str = "",
                       config_digest: str = "") -> Path:
    """One-shot append of ``record`` into ``sink/records.jsonl``."""
    return RunArtifactWriter(sink, scenario_id, config_digest).write(record)


def read_run_artifacts(path: str | os.PathLike) -> list[dict[str, Any]]:
    """Read all complete records; a torn trailing line (interrupted write) is ignored."""
    path = Path(path)
    if path.is_dir():
        path = path / "records.jsonl"
    out = []
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError as exc:
            if lineno == len(lines):
                break
            raise CorpusError(f"malformed record: {exc.msg}", path, lineno, exc.colno) from None
    return out
