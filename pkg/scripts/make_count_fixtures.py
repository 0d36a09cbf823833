"""Regenerate the count-only dataset fixtures under src/coalneg/data/counts/.

Each country becomes a scenario whose manifestos hold placeholder statements
and whose label file carries exactly the published per-class counts.
Statements beyond the labeled count stay unlabeled.
"""

from __future__ import annotations

import json
import random
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1] / "src" / "coalneg" / "data" / "counts"

# (slug, country, year, language, [(party id, name, included, partly, not, total), ...])
COUNTRIES = [
    ("austria-2013", "Austria", 2013, "de", [
        ("SDP", "Social Democratic Party", 103, 405, 217, 725),
        ("APP", "Austrian People's Party", 219, 615, 328, 1162)]),
    ("germany-2013", "Germany", 2013, "de", [
        ("CDU", "Christian Democratic Union", 594, 1354, 625, 2574),
        ("SDP", "Social Democratic Party", 559, 1517, 822, 2898)]),
    ("iceland-2013", "Iceland", 2013, "is", [
        ("IP", "Independence Party", 7, 54, 58, 119),
        ("PP", "Progressive Party", 12, 62, 43, 117)]),
    ("ireland-2011", "Ireland", 2011, "en", [
        ("FG", "Fine Gael", 332, 710, 458, 1500),
        ("LP", "Labour Party", 330, 791, 314, 1435)]),
    ("netherlands-2012", "Netherlands", 2012, "nl", [
        ("PPFD", "People's Party for Freedom and Democracy", 121, 782, 810, 1713),
        ("LP", "Labour Party", 159, 1147, 1452, 2758)]),
    ("portugal-2011", "Portugal", 2011, "pt", [
        ("SDP", "Social Democratic Party", 55, 843, 1795, 2693),
        ("CDS-PP", "CDS - People's Party", 3, 219, 843, 1065)]),
]


def main() -> None:
    rng = random.Random(111)
    for slug, country, year, lang, parties in COUNTRIES:
        out = ROOT / slug
        out.mkdir(parents=True, exist_ok=True)
        stmts, labels = [], []
        for pid, _name, inc, part, not_, total in parties:
            labeled = inc + part + not_
            if labeled > total:
                raise SystemExit(f"{slug}/{pid}: more labels ({labeled}) than statements ({total})")
            ids = [f"{pid}-{i:04d}" for i in range(1, total + 1)]
            for sid in ids:
                stmts.append({"id": sid, "party": pid, "text": f"Placeholder statement {sid}.",
                              "language": lang})
            codes = [2] * inc + [1] * part + [0] * not_
            rng.shuffle(codes)
            labels.extend({"statement_id": sid, "label": c} for sid, c in zip(ids, codes))
        (out / "statements.jsonl").write_text(
            "".join(json.dumps(s, ensure_ascii=False) + "\n" for s in stmts), encoding="utf-8")
        (out / "labels.jsonl").write_text(
            "".join(json.dumps(r) + "\n" for r in labels), encoding="utf-8")
        (out / "agreement.jsonl").write_text(
            json.dumps({"id": "C1", "text": "Placeholder agreement clause."}) + "\n", encoding="utf-8")
        manifest = [f"id: {slug}", f"country: {country}", f"year: {year}", f"language: {lang}",
                    "parties:"]
        manifest += [f'  - {{id: "{pid}", name: "{name}"}}' for pid, name, *_ in parties]
        manifest += ["statements: statements.jsonl", "agreement: agreement.jsonl",
                     "labels: labels.jsonl", ""]
        (out / "scenario.yaml").write_text("\n".join(manifest), encoding="utf-8")


if __name__ == "__main__":
    main()
