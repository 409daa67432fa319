#!/usr/bin/env python3
"""
Claim Verification CLI
Verify single claims, run strategies over datasets, replay fixtures, run ablations and score traces.
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import yaml

# Add current directory to path for imports
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from batch_runner import BatchRun, RunManifest, fixture_digests, load_traces, run_batch, write_traces
from claim_verifier import Claim, ClaimVerifier, CrossFormat, VerdictTrace
from config.settings import RunConfig, Settings, resolve_run_config, settings as default_settings
from evaluator import build_report, items_from_predictions, items_from_traces, render_table
from utils.errors import ClaimCheckError, ConfigError
from utils.file_handlers import (
    DatasetFile,
    DatasetFormat,
    load_dataset,
    load_predictions,
    load_rankings,
    sample_per_challenge,
    stratified_sample,
)
from utils.llm_gateway import Backend, LLMGateway, ScriptedBackend, create_gateway
from utils.prompts import Label, Strategy
from utils.search import DEFAULT_SITE, KnowledgeGrounder, Provider

log = logging.getLogger(__name__)

EXIT_OK, EXIT_ERROR, EXIT_UNKNOWN = 0, 1, 2
DEFAULT_TRACES_DIR = Path("traces")
ABLATION_VARIANTS = [v.value for v in CrossFormat] + ["self-answers", "knowledge-source"]


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _add_run_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="TOML run configuration file")
    parser.add_argument("--strategy", choices=[s.value for s in Strategy], help="prompting strategy")
    parser.add_argument("--backend", help="live | replay:PATH[,PATH] | scripted")
    parser.add_argument("--script", help="YAML script of completions for the scripted backend")
    parser.add_argument("--providers", help="grounding provider order, e.g. cache,websearch or offline")
    parser.add_argument("--corpus", help="offline corpus JSONL {question, answer, url}")
    parser.add_argument("--cache", help="grounding cache file")
    parser.add_argument("--site-restriction", help="domain prepended to search queries ('none' to disable)")
    parser.add_argument("--restriction-mode", choices=["prefix", "site_operator"])
    parser.add_argument("--snippet-max-chars", type=int)
    parser.add_argument("--parallelism", type=int)
    parser.add_argument("--claim-timeout", dest="claim_timeout_s", type=float)
    parser.add_argument("--record", help="record every completion into traces/NAME.ndjson")
    parser.add_argument("--out", help="output path")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")


def _add_dataset_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--dataset", help="dataset file")
    parser.add_argument("--format", dest="dataset_format", choices=[f.value for f in DatasetFormat])
    parser.add_argument("--sample-n", type=int, help="stratified sample size")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--per-challenge", action="store_const", const=True, default=None,
                        help="apply --sample-n within each challenge instead of over the whole dataset")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="claimcheck", description="Logic-guided claim verification")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    verify = commands.add_parser("verify", help="verify one claim")
    verify.add_argument("claim_text", help="claim to verify")
    verify.add_argument("--claim-id", default="claim-1")
    _add_run_flags(verify)

    run = commands.add_parser("run", help="run a strategy over a dataset")
    _add_run_flags(run)
    _add_dataset_flags(run)

    score = commands.add_parser("score", help="score trace files")
    score.add_argument("traces", nargs="+", help="trace files, one system each")
    score.add_argument("--external", action="append", default=[], metavar="NAME=PATH",
                       help="extra system from an {id, label} JSONL prediction file")
    score.add_argument("--rankings", help="explanation ranking CSV (annotator,item,criterion,system,rank)")
    score.add_argument("--alpha-metric", choices=["ordinal", "interval"], default="ordinal")
    score.add_argument("--json", dest="json_out", help="write the report as JSON")
    score.add_argument("-v", "--verbose", action="store_true")

    ablate = commands.add_parser("ablate", help="run an ablation")
    ablate.add_argument("--variant", required=True, choices=ABLATION_VARIANTS)
    ablate.add_argument("--folk-traces", help="trace file of a previous FOLK run")
    _add_run_flags(ablate)
    _add_dataset_flags(ablate)

    record = commands.add_parser("record-fixtures", help="record a replay trace from a completion script")
    record.add_argument("--script", default="fixtures/table1_script.yaml")
    record.add_argument("--out", default="fixtures/table1.ndjson")
    record.add_argument("-v", "--verbose", action="store_true")
    return parser


RUN_FLAG_KEYS = (
    "strategy", "backend", "providers", "corpus", "cache", "site_restriction", "restriction_mode",
    "snippet_max_chars", "parallelism", "claim_timeout_s", "out",
    "dataset", "dataset_format", "sample_n", "seed", "per_challenge",
)


def _run_config(args: argparse.Namespace) -> RunConfig:
    flags = {key: getattr(args, key, None) for key in RUN_FLAG_KEYS}
    return resolve_run_config(flags, getattr(args, "config", None))


def load_script(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            script = yaml.safe_load(f) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read completion script {path}: {e}") from e
    if not isinstance(script.get("completions"), list):
        raise ConfigError(f"completion script {path} needs a 'completions' list")
    return script


def build_gateway(config: RunConfig, settings: Settings, script_path: Optional[str] = None) -> LLMGateway:
    scripted = None
    if config.backend_kind == Backend.SCRIPTED:
        if not script_path:
            raise ConfigError("scripted backend needs --script")
        scripted = ScriptedBackend(queue=[str(c) for c in load_script(script_path)["completions"]])
    return create_gateway(config.backend_kind, settings, trace_paths=config.replay_paths, scripted=scripted)


def build_verifier(config: RunConfig, settings: Settings, gateway: LLMGateway, **grounding_overrides) -> ClaimVerifier:
    grounding = config.grounding_config(**grounding_overrides)
    grounder = KnowledgeGrounder.from_config(grounding, settings, gateway=gateway)
    return ClaimVerifier(gateway, grounder, claim_timeout_s=config.effective_timeout_s)


def _fixtures(config: RunConfig) -> Dict[str, str]:
    paths = list(config.replay_paths) + [config.corpus]
    return fixture_digests([p for p in paths if p and Path(p).exists()])


def load_claims(config: RunConfig) -> Tuple[List[Claim], Optional[str]]:
    if not config.dataset:
        raise UsageError("--dataset is required")
    diagnostics: List[str] = []
    dataset = DatasetFile(path=config.dataset, format=DatasetFormat(config.dataset_format))
    claims = load_dataset(dataset, diagnostics)
    for message in diagnostics:
        log.warning("dataset_diagnostic %s", message)

    if config.sample_n is None:
        return claims, None
    if config.per_challenge:
        return sample_per_challenge(claims, config.sample_n, config.seed), f"per_challenge n={config.sample_n} seed={config.seed}"
    return stratified_sample(claims, config.sample_n, config.seed), f"per_dataset n={config.sample_n} seed={config.seed}"


def format_trace(trace: VerdictTrace) -> str:
    """Human-readable trace in the block order Predicates, QA, Prediction, Explanation."""
    lines = [f"Claim: {trace.claim.text}", f"Strategy: {trace.variant or trace.strategy.value}"]
    decomposition = trace.decomposition or {}
    if decomposition.get("predicates"):
        lines.append("Predicates:")
        lines.extend(f"  {p}" for p in decomposition["predicates"])
    if trace.grounded:
        lines.append("Question-answering:")
        for qa in trace.grounded:
            lines.append(f"  Q: {qa.question}")
            lines.append(f"  A: {qa.answer}")
            if qa.source_url:
                lines.append(f"     [{qa.provider.value}] {qa.source_url}")
    lines.append("Prediction:")
    parsed = trace.parsed or {}
    for judgment in parsed.get("predicate_judgments", []):
        reason = f" because {judgment['reason']}" if judgment["reason"] else ""
        lines.append(f"  {judgment['predicate']} is {judgment['value']}{reason}")
    if trace.clause_value is not None:
        lines.append(f"  Clause value: {trace.clause_value.value} ({trace.consistency_flag.value})")
    lines.append(f"  Label: {trace.final_label.value}")
    if parsed.get("explanation"):
        lines.extend(["Explanation:", f"  {parsed['explanation']}"])
    if trace.citations:
        lines.append("Citations:")
        lines.extend(f"  {url}" for url in trace.citations)
    for error in trace.errors:
        lines.append(f"Error [{error.stage}] {error.type}: {error.message}")
    return "\n".join(lines)


def _finish_recording(gateway: LLMGateway):
    path = gateway.finalize_session()
    if path is not None:
        print(f"Recorded completions: {path}")


def _output_path(config: RunConfig, default_name: str) -> Path:
    return Path(config.out) if config.out else DEFAULT_TRACES_DIR / default_name


def cmd_verify(args, settings: Settings) -> int:
    config = _run_config(args)
    if config.strategy is None:
        raise UsageError("--strategy is required")
    config.validate_for(settings)

    gateway = build_gateway(config, settings, args.script)
    if args.record:
        gateway.record_session(args.record, DEFAULT_TRACES_DIR)
    verifier = build_verifier(config, settings, gateway)
    trace = verifier.verify_claim(Claim(id=args.claim_id, text=args.claim_text), config.strategy)
    _finish_recording(gateway)

    print(format_trace(trace))
    if config.out:
        write_traces(config.out, _manifest(config, [trace]), [trace])
    return EXIT_UNKNOWN if trace.final_label == Label.UNKNOWN else EXIT_OK


def _manifest(config: RunConfig, traces: Sequence[VerdictTrace]):
    return RunManifest(strategy=config.strategy, config_digest=config.digest(),
                       fixture_digests=dict(sorted(_fixtures(config).items())), claim_count=len(traces))


def _summary(run: BatchRun, path: Path):
    labels: Dict[str, int] = {}
    for trace in run.traces:
        labels[trace.final_label.value] = labels.get(trace.final_label.value, 0) + 1
    failed = sum(1 for t in run.traces if t.errors)
    name = run.manifest.variant or run.manifest.strategy.value
    print(f"{name}: {len(run.traces)} claims -> {path}")
    print("  " + ", ".join(f"{k}={v}" for k, v in sorted(labels.items())) + f", errors={failed}")


def cmd_run(args, settings: Settings) -> int:
    config = _run_config(args)
    if config.strategy is None:
        raise UsageError("--strategy is required")
    config.validate_for(settings)
    claims, sampling = load_claims(config)

    gateway = build_gateway(config, settings, args.script)
    if args.record:
        gateway.record_session(args.record, DEFAULT_TRACES_DIR)
    verifier = build_verifier(config, settings, gateway)
    run = run_batch(claims, config.strategy, verifier, parallelism=config.parallelism,
                    config_digest=config.digest(), fixtures=_fixtures(config), sampling=sampling, show_progress=True)
    _finish_recording(gateway)

    path = write_traces(_output_path(config, f"{config.strategy.value}.ndjson"), run.manifest, run.traces)
    _summary(run, path)
    return EXIT_OK


def _system_name(path: str, traces_manifest, taken: Dict[str, int]) -> str:
    name = traces_manifest.variant or traces_manifest.strategy.value
    if name in taken:
        name = f"{name} ({Path(path).stem})"
    taken[name] = 1
    return name


def cmd_score(args, settings: Settings) -> int:
    items_by_system, digests, taken = {}, {}, {}
    claims_by_id: Dict[str, Claim] = {}
    for path in args.traces:
        manifest, traces = load_traces(path)
        name = _system_name(path, manifest, taken)
        items_by_system[name] = items_from_traces(traces)
        digests[name] = manifest.config_digest
        for trace in traces:
            claims_by_id.setdefault(trace.claim.id, trace.claim)

    for entry in args.external:
        name, sep, path = entry.partition("=")
        if not sep or not name or not path:
            raise UsageError(f"--external expects NAME=PATH, got {entry!r}")
        items_by_system[name] = items_from_predictions(load_predictions(path), list(claims_by_id.values()))

    sheets = load_rankings(args.rankings) if args.rankings else None
    report = build_report(items_by_system, sheets, digests, alpha_metric=args.alpha_metric)
    print(render_table(report), end="")
    for message in report.diagnostics:
        print(f"note: {message}", file=sys.stderr)
    if args.json_out:
        Path(args.json_out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.json_out).write_text(report.model_dump_json(indent=2), encoding="utf-8")
    return EXIT_OK


def cmd_ablate(args, settings: Settings) -> int:
    config = _run_config(args)
    config.validate_for(settings)

    folk_traces: Dict[str, VerdictTrace] = {}
    if args.folk_traces:
        _, traces = load_traces(args.folk_traces)
        folk_traces = {t.claim.id: t for t in traces}

    if config.dataset:
        claims, sampling = load_claims(config)
    elif folk_traces:
        claims, sampling = [t.claim for t in folk_traces.values()], None
    else:
        raise UsageError("ablation needs --dataset or --folk-traces")

    gateway = build_gateway(config, settings, args.script)
    if args.record:
        gateway.record_session(args.record, DEFAULT_TRACES_DIR)
    common = dict(parallelism=config.parallelism, config_digest=config.digest(), fixtures=_fixtures(config),
                  sampling=sampling, show_progress=True)
    runs: List[Tuple[str, BatchRun]] = []

    if args.variant in (v.value for v in CrossFormat):
        if not folk_traces:
            raise UsageError(f"--variant {args.variant} needs --folk-traces")
        variant = CrossFormat(args.variant)
        verifier = ClaimVerifier(gateway, None, claim_timeout_s=config.effective_timeout_s)
        runs.append((args.variant, run_batch(claims, variant.strategy, verifier, variant=variant,
                                             folk_traces=folk_traces, **common)))
    elif args.variant == "self-answers":
        verifier = build_verifier(config, settings, gateway, provider_order=(Provider.SELF_ANSWER,))
        runs.append(("folk-self-answers", run_batch(claims, Strategy.FOLK, verifier, **common)))
    else:
        site = config.grounding_config().site_restriction or DEFAULT_SITE
        restricted = build_verifier(config, settings, gateway, site_restriction=site)
        open_web = build_verifier(config, settings, gateway, site_restriction=None)
        runs.append(("folk-restricted", run_batch(claims, Strategy.FOLK, restricted, **common)))
        runs.append(("folk-open-web", run_batch(claims, Strategy.FOLK, open_web, **common)))
    _finish_recording(gateway)

    items_by_system = {}
    for name, run in runs:
        if run.manifest.variant is None:
            run.manifest.variant = name
        base = _output_path(config, f"{args.variant}.ndjson")
        path = base if len(runs) == 1 else base.with_name(f"{base.stem}-{name}{base.suffix}")
        write_traces(path, run.manifest, run.traces)
        _summary(run, path)
        items_by_system[name] = items_from_traces(run.traces)
    print(render_table(build_report(items_by_system)), end="")
    return EXIT_OK


def cmd_record_fixtures(args, settings: Settings) -> int:
    """Replay a completion script through the FOLK pipeline and record it as a replay trace."""
    script = load_script(args.script)
    script_dir = Path(args.script).parent
    strategy = Strategy(script.get("strategy", Strategy.FOLK.value))
    corpus = script.get("corpus")
    if not script.get("claim"):
        raise ConfigError(f"completion script {args.script} needs a 'claim'")

    config = RunConfig(
        strategy=strategy,
        backend="scripted",
        providers="offline" if corpus else "cache",
        corpus=(script_dir / corpus) if corpus else None,
    )
    gateway = create_gateway(Backend.SCRIPTED, settings, scripted=ScriptedBackend(queue=[str(c) for c in script["completions"]]))
    out = Path(args.out)
    gateway.record_session(out.stem, out.parent)
    verifier = build_verifier(config, settings, gateway)
    trace = verifier.verify_claim(Claim(id=script.get("id", "claim-1"), text=script["claim"]), strategy)
    path = gateway.finalize_session()

    print(f"Recorded {gateway.call_count} completions to {path}")
    if trace.errors:
        for error in trace.errors:
            print(f"Error [{error.stage}] {error.type}: {error.message}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


COMMANDS = {
    "verify": cmd_verify,
    "run": cmd_run,
    "score": cmd_score,
    "ablate": cmd_ablate,
    "record-fixtures": cmd_record_fixtures,
}


def main(argv: Optional[Sequence[str]] = None, settings: Optional[Settings] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s %(message)s",
        stream=sys.stderr,
    )

    try:
        return COMMANDS[args.command](args, settings or default_settings)
    except (UsageError, ConfigError) as e:
        print(f"claimcheck: error: {e}", file=sys.stderr)
        return EXIT_ERROR
    except ClaimCheckError as e:
        print(f"claimcheck: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_ERROR
    except KeyboardInterrupt:
        print("\nOperation cancelled by user.", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
