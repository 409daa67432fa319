"""
Batch Runner
Runs a strategy over many claims on a bounded worker pool and reads/writes versioned trace files.
"""

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Sequence, Tuple, Union

from pydantic import BaseModel, ValidationError
from tqdm import tqdm

from claim_verifier import Claim, ClaimVerifier, CrossFormat, VerdictTrace
from utils.errors import ConfigError, FormatError, StorageFailure
from utils.prompts import Strategy

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class RunManifest(BaseModel):
    """Top-line record of a trace file; no timestamps so replayed runs are byte-identical."""

    record_type: Literal["manifest"] = "manifest"
    schema_version: int = SCHEMA_VERSION
    strategy: Strategy
    variant: Optional[str] = None
    config_digest: str = ""
    fixture_digests: Dict[str, str] = {}
    claim_count: int = 0
    sampling: Optional[str] = None


class BatchRun(BaseModel):
    manifest: RunManifest
    traces: List[VerdictTrace]


def file_digest(path: Union[str, Path]) -> str:
    sha = hashlib.sha256()
    try:
        with open(path, "rb") as f:
            for block in iter(lambda: f.read(1 << 16), b""):
                sha.update(block)
    except OSError as e:
        raise StorageFailure(f"cannot digest {path}: {e}") from e
    return sha.hexdigest()


def fixture_digests(paths: Sequence[Union[str, Path, None]]) -> Dict[str, str]:
    return {Path(p).name: file_digest(p) for p in paths if p}


def run_batch(
    claims: Sequence[Claim],
    strategy: Strategy,
    verifier: ClaimVerifier,
    parallelism: int = 1,
    config_digest: str = "",
    fixtures: Optional[Dict[str, str]] = None,
    sampling: Optional[str] = None,
    variant: Optional[CrossFormat] = None,
    folk_traces: Optional[Mapping[str, VerdictTrace]] = None,
    show_progress: bool = False,
) -> BatchRun:
    """One trace per claim, in input order; per-claim failures stay inside their trace."""
    if parallelism < 1:
        raise ConfigError("parallelism must be >= 1")
    ids = [c.id for c in claims]
    if len(set(ids)) != len(ids):
        raise ConfigError("claim ids must be unique within a run")

    if variant is not None:
        verifier.check_folk_artifacts(claims, folk_traces or {})
        strategy = variant.strategy

        def work(claim: Claim) -> VerdictTrace:
            return verifier.reason_from_folk(claim, variant, folk_traces[claim.id])
    else:
        def work(claim: Claim) -> VerdictTrace:
            return verifier.verify_claim(claim, strategy)

    manifest = RunManifest(
        strategy=strategy,
        variant=variant.value if variant else None,
        config_digest=config_digest,
        fixture_digests=dict(sorted((fixtures or {}).items())),
        claim_count=len(claims),
        sampling=sampling,
    )
    log.info("batch_started strategy=%s claims=%d parallelism=%d", strategy.value, len(claims), parallelism)

    traces: List[Optional[VerdictTrace]] = [None] * len(claims)
    with tqdm(total=len(claims), desc=f"{strategy.value}", disable=not show_progress) as progress:
        if parallelism == 1:
            for i, claim in enumerate(claims):
                traces[i] = work(claim)
                progress.update(1)
        else:
            with ThreadPoolExecutor(max_workers=parallelism) as pool:
                futures = {pool.submit(work, claim): i for i, claim in enumerate(claims)}
                for future, i in futures.items():
                    traces[i] = future.result()
                    progress.update(1)

    failed = sum(1 for t in traces if t.errors)
    log.info("batch_finished strategy=%s claims=%d failed=%d", strategy.value, len(traces), failed)
    return BatchRun(manifest=manifest, traces=traces)


def _dumps(record: Dict[str, Any]) -> str:
    return json.dumps(record, sort_keys=True, ensure_ascii=False)


def write_traces(path: Union[str, Path], manifest: RunManifest, traces: Sequence[VerdictTrace]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            f.write(_dumps(manifest.model_dump(mode="json")) + "\n")
            for trace in traces:
                f.write(_dumps(trace.model_dump(mode="json")) + "\n")
    except OSError as e:
        raise StorageFailure(f"cannot write traces to {path}: {e}") from e
    log.info("traces_written path=%s count=%d", path, len(traces))
    return path


def load_traces(path: Union[str, Path]) -> Tuple[RunManifest, List[VerdictTrace]]:
    manifest: Optional[RunManifest] = None
    traces: List[VerdictTrace] = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                    if record.get("record_type") == "manifest":
                        if manifest is not None:
                            raise FormatError("second manifest record", line=line_no, path=str(path))
                        manifest = RunManifest.model_validate(record)
                    else:
                        traces.append(VerdictTrace.model_validate(record))
                except (json.JSONDecodeError, ValidationError, AttributeError) as e:
                    raise FormatError(f"bad trace record: {e}", line=line_no, path=str(path)) from e
    except OSError as e:
        raise StorageFailure(f"cannot read traces from {path}: {e}") from e

    if manifest is None:
        raise FormatError("trace file has no manifest record", path=str(path))
    if manifest.schema_version != SCHEMA_VERSION:
        raise FormatError(f"unsupported trace schema version {manifest.schema_version}", path=str(path))
    return manifest, traces


def normalize_trace_record(trace: VerdictTrace) -> Dict[str, Any]:
    """Trace as a plain dict with wall-clock fields removed, for run-to-run comparison."""
    record = trace.model_dump(mode="json")
    record.pop("timings", None)
    for completion in record.get("completions", []):
        completion.pop("latency_ms", None)
    return record


def normalized_dump(run: BatchRun) -> str:
    lines = [_dumps(run.manifest.model_dump(mode="json"))]
    lines.extend(_dumps(normalize_trace_record(t)) for t in run.traces)
    return "\n".join(lines) + "\n"
