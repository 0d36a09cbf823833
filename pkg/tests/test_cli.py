import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from coalneg.cli import EXIT_FAIL, EXIT_OK, main, read_manifest
from coalneg.corpus import read_labels

from conftest import MINI_SCENARIO, SCRIPT_DIR, tagged, write_scenario

MINI = str(MINI_SCENARIO)


@pytest.fixture(autouse=True)
def _pinned_clock(monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")


def _script(name):
    return f"scripted:{SCRIPT_DIR / name}"


def _only_run(root: Path) -> Path:
    (run,) = [p for p in (root / "ireland-2011-mini").iterdir() if p.is_dir()]
    return run


def _negotiate(out, variant="hmdp-base", *extra):
    code = main(["negotiate", "--scenario", MINI, "--variant", variant,
                 "--backend", _script(f"negotiate-{variant}.jsonl"), "--out", str(out), *extra])
    assert code == EXIT_OK
    return _only_run(out)


def test_annotate_happy_path(tmp_path, capsys):
    code = main(["annotate", "--scenario", MINI, "--backend", _script("annotate.jsonl"),
                 "--out", str(tmp_path), "--k", "2"])
    assert code == EXIT_OK
    run = _only_run(tmp_path)
    assert run.name.startswith("annotate-")
    labels = read_labels(run / "labels.jsonl")
    assert list(labels) == ["FG1", "FG2", "LP1", "LP2"]
    meta = read_manifest(run)
    assert meta["config"]["k"] == 2 and meta["method"] == "Annotation"
    # progress goes to stderr so stdout stays machine readable
    assert "annotated 4 statements" in capsys.readouterr().err


@pytest.mark.parametrize("variant,calls", [("hmdp-base", 10), ("hmdp-lo", 14), ("hmdp", 16)])
def test_negotiate_variants(tmp_path, variant, calls):
    run = _negotiate(tmp_path, variant)
    assert len(read_labels(run / "outcomes.jsonl")) == 4
    summary = json.loads((run / "summary.json").read_text())
    assert summary["backend_calls"] == calls
    assert read_manifest(run)["config"]["variant"] == variant


def _support_script(path, n):
    path.write_text("\n".join(json.dumps({"key": "*next*", "response": tagged("SUPPORT")})
                              for _ in range(n)) + "\n")
    return f"scripted:{path}"


def test_flags_round_trip_into_manifest(tmp_path):
    assert main(["negotiate", "--scenario", MINI, "--variant", "hmdp-base", "--seed", "7",
                 "--temperature", "0.2", "--h-lo", "4", "--out", str(tmp_path),
                 "--backend", _support_script(tmp_path / "s.jsonl", 4)]) == EXIT_OK
    run = _only_run(tmp_path)
    cfg = read_manifest(run)["config"]
    assert (cfg["seed"], cfg["temperature"], cfg["h_lo"]) == (7, 0.2, 4)
    assert read_manifest(run)["seed"] == 7


def test_scenario_engine_section_is_used_unless_overridden(tmp_path):
    path = write_scenario(tmp_path / "scn", statements=[
        {"id": "A1", "party": "A", "text": "a", "importance": 1},
        {"id": "B1", "party": "B", "text": "b", "importance": 1}], extra="engine:\n  h_lo: 5\n  seed: 9\n")
    out = tmp_path / "runs"
    for extra in ([], ["--seed", "3"]):
        assert main(["negotiate", "--scenario", str(path), "--variant", "hmdp-base",
                     "--backend", _support_script(tmp_path / "s.jsonl", 2), "--out", str(out),
                     *extra]) == EXIT_OK
    metas = sorted((read_manifest(p)["config"]["seed"], read_manifest(p)["config"]["h_lo"])
                   for p in (out / "test-scenario").iterdir())
    assert metas == [(3, 5), (9, 5)]


def test_runs_are_deterministic(tmp_path):
    a = _negotiate(tmp_path / "a")
    b = _negotiate(tmp_path / "b")
    assert a.name == b.name
    for name in ("run.meta", "outcomes.jsonl", "summary.json", "records.jsonl"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_missing_scenario_fails_cleanly(tmp_path, capsys):
    code = main(["negotiate", "--scenario", str(tmp_path / "nope.yaml"), "--variant", "hmdp",
                 "--backend", _script("negotiate-hmdp.jsonl"), "--out", str(tmp_path / "runs")])
    assert code == EXIT_FAIL
    assert not (tmp_path / "runs").exists()
    assert "nope.yaml" in capsys.readouterr().err


def test_unknown_variant_lists_choices(tmp_path, capsys):
    with pytest.raises(SystemExit) as err:
        main(["negotiate", "--scenario", MINI, "--variant", "greedy",
              "--backend", _script("negotiate-hmdp.jsonl"), "--out", str(tmp_path)])
    assert err.value.code == 2
    assert "hmdp, hmdp-lo, hmdp-base" in capsys.readouterr().err
    assert not any(tmp_path.iterdir())


def test_unknown_baseline_kind(tmp_path, capsys):
    code = main(["baseline", "--scenario", MINI, "--kind", "oracle",
                 "--backend", _script("classifier.jsonl"), "--out", str(tmp_path)])
    assert code == 2
    assert "classifier, openneg" in capsys.readouterr().err


def test_unknown_backend_scheme(tmp_path):
    assert main(["negotiate", "--scenario", MINI, "--backend", "pigeon:x",
                 "--out", str(tmp_path)]) == EXIT_FAIL


def test_baselines_write_artifacts(tmp_path):
    assert main(["baseline", "--scenario", MINI, "--kind", "classifier",
                 "--backend", _script("classifier.jsonl"), "--out", str(tmp_path)]) == EXIT_OK
    assert main(["baseline", "--scenario", MINI, "--kind", "openneg",
                 "--backend", _script("openneg.jsonl"), "--out", str(tmp_path)]) == EXIT_OK
    runs = {p.name.split("-")[0]: p for p in (tmp_path / "ireland-2011-mini").iterdir()}
    assert set(runs) == {"classifier", "openneg"}
    lines = (runs["openneg"] / "transcripts.jsonl").read_text().splitlines()
    assert len(lines) == 4 and all(len(json.loads(ln)["turns"]) == 6 for ln in lines)
    assert read_manifest(runs["openneg"])["backends"]["judge"] == "scripted:openneg"


def test_eval_table(tmp_path, capsys):
    runs = [_negotiate(tmp_path / v, v) for v in ("hmdp", "hmdp-lo", "hmdp-base")]
    for kind in ("classifier", "openneg"):
        main(["baseline", "--scenario", MINI, "--kind", kind, "--backend", _script(f"{kind}.jsonl"),
              "--out", str(tmp_path / kind)])
        runs.append(_only_run(tmp_path / kind))
    capsys.readouterr()
    assert main(["eval", *map(str, runs), "--out", str(tmp_path / "tables")]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "method,engine,Ireland/FG,Ireland/LP"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["hMDP", "hMDP-LO", "hMDP-Base", "Classifier",
                                                     "OpenNeg"]
    data = json.loads((tmp_path / "tables" / "table.json").read_text())
    assert len(data["reports"]) == 10


def test_eval_against_gold_file(tmp_path, capsys):
    run = _negotiate(tmp_path / "r")
    # identity: gold equal to the predictions
    assert main(["eval", str(run), "--gold", str(run / "outcomes.jsonl"), "--metric", "accuracy"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[1].endswith("1.0000,1.0000")


def test_eval_worked_example_seven_ninths(tmp_path, capsys):
    # party A owns all four statements so one cell carries the whole example
    stmts = [{"id": f"a{i}", "party": "A", "text": f"s{i}", "importance": 1} for i in range(4)]
    stmts.append({"id": "b0", "party": "B", "text": "t", "importance": 1})
    path = write_scenario(tmp_path / "scn", statements=stmts)
    out = tmp_path / "runs"
    assert main(["negotiate", "--scenario", str(path), "--variant", "hmdp-base",
                 "--backend", _support_script(tmp_path / "s.jsonl", 5), "--out", str(out)]) == EXIT_OK
    (run,) = (out / "test-scenario").iterdir()

    def labels(path, codes):
        path.write_text("".join(json.dumps({"statement_id": f"a{i}", "label": c}) + "\n"
                                for i, c in enumerate(codes)))

    labels(tmp_path / "gold.jsonl", [2, 2, 1, 0])
    labels(run / "outcomes.jsonl", [2, 1, 1, 0])
    capsys.readouterr()
    assert main(["eval", str(run), "--gold", str(tmp_path / "gold.jsonl")]) == EXIT_OK
    csv_out = capsys.readouterr().out.splitlines()
    assert csv_out[0] == "method,engine,Testland/A"
    assert csv_out[1].endswith(f",{7 / 9:.4f}")


def test_eval_missing_gold_file(tmp_path, capsys):
    run = _negotiate(tmp_path / "r")
    assert main(["eval", str(run), "--gold", str(tmp_path / "none.jsonl")]) == EXIT_FAIL
    assert "gold label file not found" in capsys.readouterr().err


def test_eval_without_any_gold(tmp_path):
    path = write_scenario(tmp_path / "scn", statements=[
        {"id": "A1", "party": "A", "text": "a", "importance": 1},
        {"id": "B1", "party": "B", "text": "b", "importance": 1}])
    out = tmp_path / "runs"
    assert main(["negotiate", "--scenario", str(path), "--variant", "hmdp-base",
                 "--backend", _support_script(tmp_path / "s.jsonl", 2), "--out", str(out)]) == EXIT_OK
    (run,) = (out / "test-scenario").iterdir()
    assert main(["eval", str(run)]) == EXIT_FAIL


def test_resume_after_crash(tmp_path, capsys):
    lines = (SCRIPT_DIR / "negotiate-hmdp-base.jsonl").read_text().splitlines()
    # same file stem, so the backend id (and the config digest) stays the same
    (tmp_path / "p1").mkdir()
    (tmp_path / "p2").mkdir()
    (tmp_path / "p1" / "s.jsonl").write_text("\n".join(lines[:5]) + "\n")
    (tmp_path / "p2" / "s.jsonl").write_text("\n".join(lines[5:]) + "\n")
    out = tmp_path / "runs"
    base = ["negotiate", "--scenario", MINI, "--variant", "hmdp-base", "--out", str(out)]
    assert main(base + ["--backend", f"scripted:{tmp_path / 'p1' / 's.jsonl'}"]) == EXIT_FAIL
    assert "HI step 3" in capsys.readouterr().err
    run = _only_run(out)
    assert not (run / "outcomes.jsonl").exists()
    assert main(base + ["--backend", f"scripted:{tmp_path / 'p2' / 's.jsonl'}",
                        "--resume", run.name]) == EXIT_OK

    ref = _negotiate(tmp_path / "ref")
    assert (run / "outcomes.jsonl").read_bytes() == (ref / "outcomes.jsonl").read_bytes()
    episodes = [json.loads(x)["hi_step"] for x in (run / "records.jsonl").read_text().splitlines()
                if json.loads(x)["type"] == "episode"]
    assert episodes == [1, 2, 3, 4]


def test_resume_refuses_changed_config(tmp_path, capsys):
    run = _negotiate(tmp_path)
    code = main(["negotiate", "--scenario", MINI, "--variant", "hmdp-base", "--seed", "5",
                 "--backend", _script("negotiate-hmdp-base.jsonl"), "--out", str(tmp_path),
                 "--resume", run.name])
    assert code == EXIT_FAIL and "configuration differs" in capsys.readouterr().err


def test_sweep(tmp_path, capsys):
    spec = f"scripted:{SCRIPT_DIR}/negotiate-{{variant}}.jsonl"
    code = main(["sweep", "--scenario", MINI, "--variant", "hmdp", "--variant", "hmdp-base",
                 "--backend", spec, "--out", str(tmp_path)])
    assert code == EXIT_OK
    rows = capsys.readouterr().out.splitlines()
    assert [r.split(",")[0] for r in rows[1:]] == ["hMDP", "hMDP-Base"]
    assert (tmp_path / "sweep.csv").exists()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "coalneg", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "negotiate" in proc.stdout
    if shutil.which("coalneg"):
        assert subprocess.run(["coalneg", "--version"], capture_output=True).returncode == 0
