"""Command-line entry point: ``coalneg {annotate,negotiate,baseline,eval,sweep}``.

Every command writes ``run.meta`` into ``<out>/<scenario>/<run-id>/`` before
doing any work, so each artifact directory describes how it was produced.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from . import __version__
from .annotation import AnnotationError, annotate_corpus
from .baselines import BaselineError, BaselineKind, run_classifier, run_open_negotiation
from .corpus import (CorpusError, RunArtifactWriter, ScenarioCorpus, load_scenario, read_labels,
                     read_run_artifacts, write_labels)
from .domain import OutcomeLabel
from .engine import EngineConfig, EngineError, Variant, run_negotiation
from .evaluation import EvaluationError, build_table, score
from .llm import Backend, BackendError, CallSettings, backend_from_spec
from .prompts import TemplateError, default_registry
from .retrieval import DEFAULT_K, HashEmbeddingProvider, HttpEmbeddingProvider, RetrievalError

logger = logging.getLogger("coalneg")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
META_FILE = "run.meta"


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_FAIL):
        super().__init__(message)
        self.code = code


def _canonical(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def _timestamp() -> str:
    # SOURCE_DATE_EPOCH pins the stamp so reruns can be byte-identical
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = (_dt.datetime.fromtimestamp(int(epoch), _dt.timezone.utc) if epoch
            else _dt.datetime.now(_dt.timezone.utc))
    return when.strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass
class RunManifest:
    command: str
    method: str
    scenario_id: str
    scenario_path: str
    config: dict[str, Any]
    backends: dict[str, str]
    model_ids: dict[str, str]
    template_digest: str
    seed: int | None
    code_version: str = __version__
    timestamp: str = field(default_factory=_timestamp)

    @property
    def digest(self) -> str:
        body = {k: v for k, v in self.to_dict().items() if k not in ("timestamp", "digest")}
        return hashlib.sha256(_canonical(body).encode("utf-8")).hexdigest()

    def to_dict(self) -> dict[str, Any]:
        return {"command": self.command, "method": self.method, "scenario_id": self.scenario_id,
                "scenario_path": self.scenario_path, "config": self.config,
                "backends": self.backends, "model_ids": self.model_ids,
                "template_digest": self.template_digest, "seed": self.seed,
                "code_version": self.code_version, "timestamp": self.timestamp}

    def write(self, run_dir: Path) -> Path:
        run_dir.mkdir(parents=True, exist_ok=True)
        path = run_dir / META_FILE
        path.write_text(json.dumps({**self.to_dict(), "digest": self.digest}, indent=2,
                                   ensure_ascii=False) + "\n", encoding="utf-8")
        return path


def read_manifest(run_dir: str | Path) -> dict[str, Any]:
    path = Path(run_dir) / META_FILE
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CliError(f"{run_dir}: not a run directory (no {META_FILE})") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: malformed run manifest: {exc}") from None


# ---------------------------------------------------------------------------
# shared plumbing

def _load(path: str) -> ScenarioCorpus:
    return load_scenario(path)


def _backend(spec: str) -> Backend:
    try:
        return backend_from_spec(spec)
    except (ValueError, OSError, BackendError) as exc:
        raise CliError(f"backend {spec!r}: {exc}") from None


def _model_id(backend: Backend) -> str:
    profile = getattr(backend, "profile", None)
    return getattr(profile, "model", "") if profile is not None else ""


def _embedder(spec: str):
    if spec == "hash":
        return HashEmbeddingProvider()
    kind, _, profile = spec.partition(":")
    if kind == "http" and profile:
        return HttpEmbeddingProvider.from_env(profile)
    raise CliError(f"unknown embedder {spec!r}; expected hash or http:<profile>", EXIT_USAGE)


def _resolve(args: argparse.Namespace, corpus: ScenarioCorpus, names: Sequence[str],
             defaults: Mapping[str, Any]) -> dict[str, Any]:
    """CLI flag > scenario ``engine:`` section > built-in default."""
    out = {}
    for name in names:
        cli = getattr(args, name, None)
        if cli is not None:
            out[name] = cli
        elif name in corpus.settings:
            out[name] = corpus.settings[name]
        else:
            out[name] = defaults[name]
    return out


def _run_dir(args: argparse.Namespace, corpus: ScenarioCorpus, manifest: RunManifest,
             prefix: str) -> Path:
    run_id = args.run_id or f"{prefix}-{manifest.digest[:10]}"
    return Path(args.out) / corpus.id / run_id


def _write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def _warn_fallbacks(ids: Sequence[str]) -> None:
    if ids:
        print(f"warning: {len(ids)} statement(s) fell back to the default label: "
              + ", ".join(ids[:10]) + (" ..." if len(ids) > 10 else ""), file=sys.stderr)


# ---------------------------------------------------------------------------
# commands

def cmd_annotate(args: argparse.Namespace) -> int:
    corpus = _load(args.scenario)
    backend = _backend(args.backend)
    provider = _embedder(args.embedder)
    cfg = _resolve(args, corpus, ("k", "temperature", "seed"),
                   {"k": DEFAULT_K, "temperature": 0.5, "seed": 111})
    cfg.update(include_fallbacks=args.include_fallbacks, embedder=provider.provider_id)
    manifest = RunManifest("annotate", "Annotation", corpus.id, str(corpus.source), cfg,
                           {"classifier": getattr(backend, "backend_id", "")},
                           {"classifier": _model_id(backend)}, default_registry().digest,
                           cfg["seed"])
    run_dir = _run_dir(args, corpus, manifest, "annotate")
    manifest.write(run_dir)
    settings = CallSettings(cfg["temperature"], cfg["seed"], model_id=_model_id(backend))
    result = annotate_corpus(corpus, int(cfg["k"]), backend, provider=provider, settings=settings,
                             workers=args.workers, include_fallbacks=args.include_fallbacks,
                             out_dir=run_dir)
    _warn_fallbacks(result.report["fallback_statements"])
    print(f"annotated {len(result.records)} statements -> {run_dir / 'labels.jsonl'}", file=sys.stderr)
    return EXIT_OK


def _engine_config(args: argparse.Namespace, corpus: ScenarioCorpus, backend: Backend) -> EngineConfig:
    d = EngineConfig()
    cfg = _resolve(args, corpus, ("variant", "h_lo", "temperature", "seed", "ground_truth_feedback"),
                   {"variant": d.variant.value, "h_lo": d.h_lo, "temperature": d.temperature,
                    "seed": d.seed, "ground_truth_feedback": d.ground_truth_feedback})
    extra = {k: v for k, v in corpus.settings.items()
             if k in EngineConfig.__dataclass_fields__ and k not in cfg}
    try:
        return EngineConfig.from_dict({**extra, **cfg, "model_id": _model_id(backend)})
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from None


def _write_outcomes(run_dir: Path, outcomes: Mapping[str, OutcomeLabel]) -> None:
    write_labels(run_dir / "outcomes.jsonl", outcomes)


def cmd_negotiate(args: argparse.Namespace) -> int:
    negotiate(args)
    return EXIT_OK


def negotiate(args: argparse.Namespace) -> Path:
    corpus = _load(args.scenario)
    backend = _backend(args.backend)
    config = _engine_config(args, corpus, backend)
    manifest = RunManifest("negotiate", config.variant.display, corpus.id, str(corpus.source),
                           config.to_dict(), {"negotiator": getattr(backend, "backend_id", "")},
                           {"negotiator": config.model_id}, default_registry().digest, config.seed)
    resume_records = None
    if args.resume:
        run_dir = Path(args.out) / corpus.id / args.resume
        old = read_manifest(run_dir)
        if old.get("digest") != manifest.digest:
            raise CliError(f"cannot resume {args.resume}: configuration differs from the original run")
        records_path = run_dir / "records.jsonl"
        resume_records = read_run_artifacts(records_path) if records_path.exists() else []
    else:
        run_dir = _run_dir(args, corpus, manifest, config.variant.value)
        if (run_dir / "records.jsonl").exists():
            (run_dir / "records.jsonl").unlink()
        manifest.write(run_dir)
    writer = RunArtifactWriter(run_dir, corpus.id, manifest.digest)
    result = run_negotiation(corpus, config, backend, writer=writer, resume_records=resume_records)
    _write_outcomes(run_dir, result.outcomes)
    summary = {"method": config.variant.display, **result.summary()}
    _write_json(run_dir / "summary.json", summary)
    _warn_fallbacks(summary["fallback_statements"])
    print(f"negotiated {len(result.outcomes)} statements ({config.variant.display}) -> {run_dir}", file=sys.stderr)
    return run_dir


def cmd_baseline(args: argparse.Namespace) -> int:
    try:
        kind = BaselineKind.parse(args.kind)
    except BaselineError as exc:
        raise CliError(str(exc), EXIT_USAGE) from None
    corpus = _load(args.scenario)
    backend = _backend(args.backend)
    judge = _backend(args.judge_backend) if args.judge_backend else backend
    cfg = _resolve(args, corpus, ("temperature", "seed"), {"temperature": 0.5, "seed": 111})
    cfg["kind"] = kind.value
    if kind is BaselineKind.OpenNeg:
        cfg["rounds"] = args.rounds
    elif args.k is not None:
        cfg["k"] = args.k
        cfg["embedder"] = args.embedder
    backends = {"negotiator": getattr(backend, "backend_id", "")}
    models = {"negotiator": _model_id(backend)}
    if kind is BaselineKind.OpenNeg:
        backends["judge"] = getattr(judge, "backend_id", "")
        models["judge"] = _model_id(judge)
    manifest = RunManifest("baseline", kind.display, corpus.id, str(corpus.source), cfg, backends,
                           models, default_registry().digest, cfg["seed"])
    run_dir = _run_dir(args, corpus, manifest, kind.value)
    manifest.write(run_dir)
    settings = CallSettings(cfg["temperature"], cfg["seed"], model_id=_model_id(backend))
    if kind is BaselineKind.Classifier:
        provider = _embedder(args.embedder) if args.k is not None else None
        run = run_classifier(corpus, backend, k=args.k, provider=provider, settings=settings,
                             workers=args.workers)
    else:
        if args.rounds < 1:
            raise CliError(f"--rounds must be >= 1, got {args.rounds}", EXIT_USAGE)
        run = run_open_negotiation(corpus, backend, judge, rounds=args.rounds, settings=settings,
                                   workers=args.workers)
        with open(run_dir / "transcripts.jsonl", "w", encoding="utf-8", newline="\n") as fh:
            for sid, turns in run.transcripts.items():
                fh.write(json.dumps({"statement_id": sid, "turns": turns}, ensure_ascii=False) + "\n")
    _write_outcomes(run_dir, run.predictions)
    summary = {"method": kind.display, **run.summary()}
    _write_json(run_dir / "summary.json", summary)
    _warn_fallbacks(summary["fallback_statements"])
    print(f"{kind.display}: {len(run.predictions)} statements -> {run_dir}", file=sys.stderr)
    return EXIT_OK


def _engine_label(meta: Mapping[str, Any]) -> str:
    models = meta.get("model_ids", {})
    backends = meta.get("backends", {})
    role = "negotiator" if "negotiator" in backends else next(iter(backends), "")
    return models.get(role) or backends.get(role, "")


def evaluate_runs(run_dirs: Sequence[str | Path], gold_path: str | None = None, *,
                  exclude_fallbacks: bool = False, metric: str = "macro_f1"):
    cells = []
    for rd in run_dirs:
        rd = Path(rd)
        meta = read_manifest(rd)
        outcomes_path = rd / "outcomes.jsonl"
        if not outcomes_path.exists():
            raise CliError(f"{rd}: run has no outcomes.jsonl (incomplete run?)")
        predictions = read_labels(outcomes_path)
        corpus = load_scenario(meta["scenario_path"])
        if gold_path:
            gold = read_labels(gold_path)
        elif corpus.gold_labels:
            gold = corpus.gold_labels
        else:
            raise CliError(f"no gold labels for scenario {corpus.id}; pass --gold")
        summary_path = rd / "summary.json"
        fallback_ids = set()
        if summary_path.exists():
            fallback_ids = set(json.loads(summary_path.read_text(encoding="utf-8"))
                               .get("fallback_statements", []))
        for party in corpus.parties:
            ids = {s.id for s in corpus.manifestos[party.id].statements}
            p = {s: v for s, v in predictions.items() if s in ids}
            g = {s: v for s, v in gold.items() if s in ids}
            if not (set(p) & set(g)):
                continue
            rep = score(p, g, fallbacks={s: s in fallback_ids for s in p},
                        exclude_fallbacks=exclude_fallbacks)
            cells.append(((corpus.country, party.id, meta["method"], _engine_label(meta)), rep))
    return build_table(cells, metric)


def cmd_eval(args: argparse.Namespace) -> int:
    if args.gold and not Path(args.gold).exists():
        raise CliError(f"gold label file not found: {args.gold}")
    table = evaluate_runs(args.runs, args.gold, exclude_fallbacks=args.exclude_fallbacks,
                          metric=args.metric)
    sys.stdout.write(table.to_csv())
    if args.out:
        csv_path, _ = table.write(args.out, args.stem)
        print(f"table written to {csv_path}", file=sys.stderr)
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    """Negotiate every (scenario, variant, backend) combination, then evaluate them together.

    Backend specs may contain ``{scenario}`` and ``{variant}`` which are filled
    per combination (useful for per-run scripts).
    """
    jobs = []
    for scenario in args.scenario:
        corpus_id = _load(scenario).id
        for variant in args.variant:
            for spec in args.backend:
                jobs.append((scenario, Variant.parse(variant).value,
                             spec.format(scenario=corpus_id, variant=Variant.parse(variant).value)))

    def one(job):
        scenario, variant, spec = job
        ns = argparse.Namespace(scenario=scenario, backend=spec, variant=variant, h_lo=args.h_lo,
                                temperature=args.temperature, seed=args.seed,
                                ground_truth_feedback=args.ground_truth_feedback, out=args.out,
                                resume=None, run_id=None)
        return negotiate(ns)

    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            run_dirs = list(pool.map(one, jobs))
    else:
        run_dirs = [one(j) for j in jobs]
    table = evaluate_runs(run_dirs, args.gold, metric=args.metric)
    sys.stdout.write(table.to_csv())
    table.write(args.out, "sweep")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

def _on_off(text: str) -> bool:
    if text.lower() in ("on", "true", "1", "yes"):
        return True
    if text.lower() in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on or off, got {text!r}")


def _variant(text: str) -> str:
    try:
        return Variant.parse(text).value
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coalneg", description="Simulated coalition negotiations.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, backend=True):
        sp.add_argument("--scenario", required=True, help="path to a scenario.yaml")
        if backend:
            sp.add_argument("--backend", required=True,
                            help="scripted:<path>, scripted-strict:<path> or http:<profile>")
        sp.add_argument("--out", default="runs", help="artifact root (default: runs)")
        sp.add_argument("--run-id", default=None)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--temperature", type=float, default=None)
        sp.add_argument("--workers", type=int, default=1)

    a = sub.add_parser("annotate", help="label statements against retrieved agreement clauses")
    common(a)
    a.add_argument("--k", type=int, default=None)
    a.add_argument("--embedder", default="hash", help="hash or http:<profile>")
    a.add_argument("--include-fallbacks", action="store_true")
    a.set_defaults(func=cmd_annotate)

    n = sub.add_parser("negotiate", help="run the two-level negotiation")
    common(n)
    n.add_argument("--variant", type=_variant, default=None)
    n.add_argument("--h-lo", dest="h_lo", type=int, default=None)
    n.add_argument("--gt-feedback", dest="ground_truth_feedback", type=_on_off, default=None)
    n.add_argument("--resume", metavar="RUN_ID", default=None)
    n.set_defaults(func=cmd_negotiate)

    b = sub.add_parser("baseline", help="run the classifier or open-negotiation baseline")
    common(b)
    b.add_argument("--kind", required=True, help="classifier or openneg")
    b.add_argument("--judge-backend", default=None)
    b.add_argument("--rounds", type=int, default=3)
    b.add_argument("--k", type=int, default=None, help="add top-k clause context (classifier)")
    b.add_argument("--embedder", default="hash")
    b.set_defaults(func=cmd_baseline)

    e = sub.add_parser("eval", help="score run directories against gold labels")
    e.add_argument("runs", nargs="+", help="run directories")
    e.add_argument("--gold", default=None, help="gold label file (default: scenario labels)")
    e.add_argument("--out", default=None)
    e.add_argument("--stem", default="table")
    e.add_argument("--metric", choices=("macro_f1", "accuracy"), default="macro_f1")
    e.add_argument("--exclude-fallbacks", action="store_true")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="negotiate a scenario x variant x backend grid and evaluate")
    s.add_argument("--scenario", action="append", required=True)
    s.add_argument("--variant", action="append", type=_variant, required=True)
    s.add_argument("--backend", action="append", required=True)
    s.add_argument("--out", default="runs")
    s.add_argument("--gold", default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--temperature", type=float, default=None)
    s.add_argument("--h-lo", dest="h_lo", type=int, default=None)
    s.add_argument("--gt-feedback", dest="ground_truth_feedback", type=_on_off, default=None)
    s.add_argument("--metric", choices=("macro_f1", "accuracy"), default="macro_f1")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (CorpusError, TemplateError, RetrievalError, EvaluationError, AnnotationError,
            BaselineError, EngineError, BackendError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
