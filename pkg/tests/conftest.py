from __future__ import annotations

import json
from pathlib import Path

import pytest

from coalneg.corpus import load_scenario

FIXTURE_DIR = Path(__file__).resolve().parents[1] / "src" / "coalneg" / "data" / "fixtures"
MINI_SCENARIO = FIXTURE_DIR / "ireland-2011-mini" / "scenario.yaml"
SCRIPT_DIR = Path(__file__).resolve().parent / "fixtures" / "scripts"


def tagged(answer: str, reason: str = "r") -> str:
    return f"<REASON>{reason}</REASON><ANSWER>{answer}</ANSWER>"


def write_scenario(root: Path, *, statements, agreement=(), labels=None, parties=None,
                   extra: str = "") -> Path:
    """Write a small scenario directory and return the manifest path."""
    root.mkdir(parents=True, exist_ok=True)
    parties = parties or [("A", "Alpha Party"), ("B", "Beta Party")]
    lines = ["id: test-scenario", "country: Testland", "year: 2020", "language: en", "parties:"]
    lines += [f"  - {{id: {pid}, name: {name}}}" for pid, name in parties]
    lines.append("statements: statements.jsonl")
    with open(root / "statements.jsonl", "w", encoding="utf-8") as fh:
        for s in statements:
            fh.write(json.dumps(s) + "\n")
    if agreement:
        lines.append("agreement: agreement.jsonl")
        with open(root / "agreement.jsonl", "w", encoding="utf-8") as fh:
            for c in agreement:
                fh.write(json.dumps(c) + "\n")
    if labels is not None:
        lines.append("labels: labels.jsonl")
        with open(root / "labels.jsonl", "w", encoding="utf-8") as fh:
            for sid, code in labels.items():
                fh.write(json.dumps({"statement_id": sid, "label": code}) + "\n")
    path = root / "scenario.yaml"
    path.write_text("\n".join(lines) + "\n" + extra, encoding="utf-8")
    return path


@pytest.fixture
def mini_path() -> Path:
    return MINI_SCENARIO


@pytest.fixture
def mini():
    return load_scenario(MINI_SCENARIO)
