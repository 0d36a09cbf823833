"""Scoring predicted outcome labels against gold, result tables and projection export."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

from .corpus import ScenarioCorpus
from .domain import OutcomeLabel
from .retrieval import EmbeddingProvider

logger = logging.getLogger(__name__)

CLASSES = tuple(OutcomeLabel)
METHOD_ORDER = ("hMDP", "hMDP-LO", "hMDP-Base", "Classifier", "OpenNeg")


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix3:
    """counts[gold][pred] over the three outcome classes."""

    counts: tuple[tuple[int, int, int], ...]

    def __post_init__(self) -> None:
        if len(self.counts) != 3 or any(len(r) != 3 for r in self.counts):
            raise EvaluationError("confusion matrix must be 3x3")
        if any(c < 0 for r in self.counts for c in r):
            raise EvaluationError("confusion matrix entries must be non-negative")

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[OutcomeLabel, OutcomeLabel]]) -> ConfusionMatrix3:
        m = [[0, 0, 0] for _ in range(3)]
        for gold, pred in pairs:
            m[int(gold)][int(pred)] += 1
        return cls(tuple(tuple(r) for r in m))

    @property
    def total(self) -> int:
        return sum(map(sum, self.counts))

    @property
    def trace(self) -> int:
        return sum(self.counts[i][i] for i in range(3))

    def tp(self, c: int) -> int:
        return self.counts[c][c]

    def predicted(self, c: int) -> int:
        return sum(self.counts[g][c] for g in range(3))

    def support(self, c: int) -> int:
        return sum(self.counts[c])


@dataclass(frozen=True)
class ClassScore:
    precision: Fraction
    recall: Fraction
    f1: Fraction
    support: int

    def to_dict(self) -> dict[str, Any]:
        return {"precision": float(self.precision), "recall": float(self.recall),
                "f1": float(self.f1), "support": self.support}


@dataclass(frozen=True)
class ScoreReport:
    matrix: ConfusionMatrix3
    per_class: dict[OutcomeLabel, ClassScore]
    macro_f1_exact: Fraction
    accuracy_exact: Fraction
    n_scored: int
    n_excluded_fallbacks: int = 0
    n_unmatched: int = 0

    @property
    def macro_f1(self) -> float:
        return float(self.macro_f1_exact)

    @property
    def accuracy(self) -> float:
        return float(self.accuracy_exact)

    def to_dict(self) -> dict[str, Any]:
        return {
            "macro_f1": self.macro_f1,
            "accuracy": self.accuracy,
            "per_class": {c.phrase: s.to_dict() for c, s in self.per_class.items()},
            "confusion": [list(r) for r in self.matrix.counts],
            "n_scored": self.n_scored,
            "n_excluded_fallbacks": self.n_excluded_fallbacks,
            "n_unmatched": self.n_unmatched,
        }


def _ratio(num: int, den: int) -> Fraction:
    return Fraction(num, den) if den else Fraction(0)


def score(predictions: Mapping[str, OutcomeLabel], gold: Mapping[str, OutcomeLabel], *,
          fallbacks: Mapping[str, bool] | None = None,
          exclude_fallbacks: bool = False) -> ScoreReport:
    """Macro F1 and accuracy over the statements present in both maps.

    Zero denominators give 0 for precision, recall and F1; absent classes
    still count toward the macro average.
    """
    shared = sorted(set(predictions) & set(gold))
    if not shared:
        raise EvaluationError("predictions and gold share no statement ids")
    excluded = 0
    if exclude_fallbacks and fallbacks:
        kept = [s for s in shared if not fallbacks.get(s, False)]
        excluded = len(shared) - len(kept)
        shared = kept
        if not shared:
            raise EvaluationError("every shared prediction is a fallback; nothing left to score")
    unmatched = len(set(predictions) ^ set(gold))
    m = ConfusionMatrix3.from_pairs((gold[s], predictions[s]) for s in shared)
    per_class = {}
    for c in CLASSES:
        i = int(c)
        p = _ratio(m.tp(i), m.predicted(i))
        r = _ratio(m.tp(i), m.support(i))
        f1 = 2 * p * r / (p + r) if p + r else Fraction(0)
        per_class[c] = ClassScore(p, r, f1, m.support(i))
    macro = sum((s.f1 for s in per_class.values()), Fraction(0)) / len(CLASSES)
    return ScoreReport(m, per_class, macro, Fraction(m.trace, m.total), m.total, excluded, unmatched)


# ---------------------------------------------------------------------------
# tables

TableKey = tuple[str, str, str, str]  # (country, party, method, engine)


@dataclass(frozen=True)
class ResultTable:
    columns: tuple[tuple[str, str], ...]           # (country, party)
    rows: tuple[tuple[str, str], ...]              # (method, engine)
    cells: dict[tuple[str, str, str, str], ScoreReport]
    metric: str = "macro_f1"

    def value(self, row: tuple[str, str], col: tuple[str, str]) -> float | None:
        rep = self.cells.get((col[0], col[1], row[0], row[1]))
        return None if rep is None else getattr(rep, self.metric)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "engine"] + [f"{c}/{p}" for c, p in self.columns])
        for row in self.rows:
            vals = [self.value(row, col) for col in self.columns]
            w.writerow(list(row) + ["" if v is None else f"{v:.4f}" for v in vals])
        return buf.getvalue()

    def to_json(self) -> dict[str, Any]:
        return {
            "metric": self.metric,
            "columns": [{"country": c, "party": p} for c, p in self.columns],
            "rows": [{"method": m, "engine": e,
                      "cells": [None if (v := self.value((m, e), col)) is None else v
                                for col in self.columns]}
                     for m, e in self.rows],
            "reports": [{"country": k[0], "party": k[1], "method": k[2], "engine": k[3],
                         **rep.to_dict()} for k, rep in sorted(self.cells.items())],
        }

    def write(self, out_dir: str | Path, stem: str = "table") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
        csv_path.write_text(self.to_csv(), encoding="utf-8")
        json_path.write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")
        return csv_path, json_path


def _method_rank(method: str) -> tuple[int, str]:
    return (METHOD_ORDER.index(method), "") if method in METHOD_ORDER else (len(METHOD_ORDER), method)


def build_table(reports: Iterable[tuple[TableKey, ScoreReport]] | Mapping[TableKey, ScoreReport],
                metric: str = "macro_f1") -> ResultTable:
    """Methods as rows, (country, party) as sorted columns; duplicate keys are an error."""
    items = reports.items() if isinstance(reports, Mapping) else reports
    cells: dict[TableKey, ScoreReport] = {}
    for key, rep in items:
        key = tuple(key)
        if key in cells:
            raise EvaluationError(f"duplicate table key {key!r}")
        cells[key] = rep
    columns = tuple(sorted({(k[0], k[1]) for k in cells}))
    rows = tuple(sorted({(k[2], k[3]) for k in cells}, key=lambda r: (_method_rank(r[0]), r[1])))
    return ResultTable(columns, rows, cells, metric)


# ---------------------------------------------------------------------------
# distribution export

@dataclass(frozen=True)
class ProjectedPoint:
    id: str
    x: float
    y: float
    role: str

    def to_dict(self) -> dict[str, Any]:
        return {"id": self.id, "x": self.x, "y": self.y, "role": self.role}


def pca_basis(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and the top-2 principal axes (rows), with a deterministic sign."""
    mean = matrix.mean(axis=0)
    _, _, vt = np.linalg.svd(matrix - mean, full_matrices=False)
    axes = np.zeros((2, matrix.shape[1]))
    axes[: min(2, vt.shape[0])] = vt[:2]
    for a in axes:
        # largest-magnitude component positive
        if a[np.argmax(np.abs(a))] < 0:
            a *= -1
    return mean, axes


def export_distribution(corpus: ScenarioCorpus, labels: Mapping[str, OutcomeLabel],
                        provider: EmbeddingProvider,
                        out_path: str | Path | None = None) -> list[ProjectedPoint]:
    """Agreement clauses and included statements projected on the clauses' first two PCs."""
    if not corpus.agreement:
        raise EvaluationError("no agreement clauses to project")
    clause_vecs = np.vstack([provider.embed(c.text).values for c in corpus.agreement])
    mean, axes = pca_basis(clause_vecs)
    points = [ProjectedPoint(c.id, float(x), float(y), "agreement")
              for c, (x, y) in zip(corpus.agreement, (clause_vecs - mean) @ axes.T)]
    included = [s for s in corpus.statements() if labels.get(s.id) == OutcomeLabel.Included]
    if included:
        svecs = np.vstack([provider.embed(s.text).values for s in included])
        if svecs.shape[1] != clause_vecs.shape[1]:
            raise EvaluationError("statement and clause embeddings differ in dimension")
        points += [ProjectedPoint(s.id, float(x), float(y), "included-statement")
                   for s, (x, y) in zip(included, (svecs - mean) @ axes.T)]
    if out_path is not None:
        with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
            for p in points:
                fh.write(json.dumps(p.to_dict()) + "\n")
    return points
