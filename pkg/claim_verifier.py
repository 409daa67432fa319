"""
Claim Verifier
Runs the decompose -> ground -> reason stages for one claim under a prompting strategy
and assembles the full verdict trace.
"""

import logging
import time
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import requests
from pydantic import BaseModel, Field, ValidationError, field_validator

from utils.errors import ClaimCheckError, ConfigError, MissingFolkArtifacts
from utils.fol import Truth, evaluate_clause
from utils.llm_gateway import CompletionResult, LLMGateway
from utils.prompts import (
    Decomposition,
    Label,
    ParsedVerdict,
    Phase,
    Strategy,
    build_decompose_prompt,
    build_reasoning_prompt,
    parse_decomposition,
    parse_verdict,
)
from utils.search import GroundedQA, KnowledgeGrounder

log = logging.getLogger(__name__)

# failures recorded in the trace instead of raised
STAGE_ERRORS = (ClaimCheckError, requests.RequestException, ValidationError)


class GoldLabel(str, Enum):
    SUPPORTED = "SUPPORTED"
    NOT_SUPPORTED = "NOT_SUPPORTED"
    UNLABELED = "Unlabeled"


class Dataset(str, Enum):
    HOVER = "HoVER"
    FEVEROUS = "FEVEROUS"
    SCIFACT_OPEN = "SciFactOpen"
    CUSTOM = "Custom"


class Challenge(str, Enum):
    TWO_HOP = "2hop"
    THREE_HOP = "3hop"
    FOUR_HOP = "4hop"
    NUMERICAL = "numerical"
    MULTIHOP = "multihop"
    TEXT_AND_TABLE = "text_and_table"
    SCIENTIFIC = "scientific"
    NONE = "none"


class ConsistencyFlag(str, Enum):
    CONSISTENT = "Consistent"
    MISMATCH = "LabelClauseMismatch"
    NOT_APPLICABLE = "NotApplicable"


class CrossFormat(str, Enum):
    """Ablations that reason in a baseline format over FOLK's questions and answers."""

    COT_WITH_FOLK_QUESTIONS = "cot-with-folk-questions"
    SELFASK_WITH_FOLK_QUESTIONS = "selfask-with-folk-questions"

    @property
    def strategy(self) -> Strategy:
        return Strategy.COT if self == CrossFormat.COT_WITH_FOLK_QUESTIONS else Strategy.SELF_ASK


class Claim(BaseModel):
    id: str = Field(min_length=1)
    text: str
    gold_label: GoldLabel = GoldLabel.UNLABELED
    dataset: Dataset = Dataset.CUSTOM
    challenge: Challenge = Challenge.NONE

    @field_validator("text")
    @classmethod
    def _non_empty(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("claim text is empty")
        return value


class PromptRecord(BaseModel):
    phase: Phase
    text: str


class StageError(BaseModel):
    stage: str
    type: str
    message: str


class VerdictTrace(BaseModel):
    claim: Claim
    strategy: Strategy
    variant: Optional[str] = None
    decomposition: Optional[Dict[str, Any]] = None
    grounded: List[GroundedQA] = []
    prompts: List[PromptRecord] = []
    completions: List[CompletionResult] = []
    parsed: Optional[Dict[str, Any]] = None
    clause_value: Optional[Truth] = None
    final_label: Label = Label.UNKNOWN
    consistency_flag: ConsistencyFlag = ConsistencyFlag.NOT_APPLICABLE
    citations: List[str] = []
    timings: Dict[str, int] = {}
    errors: List[StageError] = []

    def decomposition_obj(self) -> Optional[Decomposition]:
        if not self.decomposition:
            return None
        return Decomposition.from_dict(self.decomposition)


def distinct_citations(grounded: Sequence[GroundedQA]) -> List[str]:
    seen, urls = set(), []
    for qa in grounded:
        if qa.source_url and qa.source_url not in seen:
            seen.add(qa.source_url)
            urls.append(qa.source_url)
    return urls


def aggregate(strategy: Strategy, parsed: ParsedVerdict) -> Tuple[Optional[Truth], ConsistencyFlag]:
    """Clause value and label/clause consistency for a parsed verdict."""
    if strategy != Strategy.FOLK:
        return None, ConsistencyFlag.NOT_APPLICABLE

    clause = parsed.predicate_judgments.clause()
    clause_value = evaluate_clause(clause, parsed.predicate_judgments) if clause else Truth.UNKNOWN
    consistent = (
        (clause_value == Truth.TRUE and parsed.label == Label.SUPPORTED)
        or (clause_value == Truth.FALSE and parsed.label == Label.NOT_SUPPORTED)
    )
    return clause_value, ConsistencyFlag.CONSISTENT if consistent else ConsistencyFlag.MISMATCH


class ClaimTimeout(ClaimCheckError):
    """The per-claim deadline passed between stages."""


class _Run:
    """Mutable accumulator for one claim's trace."""

    def __init__(self, claim: Claim, strategy: Strategy, variant: Optional[str], timeout_s: Optional[float]):
        self.claim = claim
        self.strategy = strategy
        self.variant = variant
        self.started = time.perf_counter()
        self.deadline = self.started + timeout_s if timeout_s else None
        self.stage = "init"
        self.decomposition: Optional[Decomposition] = None
        self.grounded: List[GroundedQA] = []
        self.prompts: List[PromptRecord] = []
        self.completions: List[CompletionResult] = []
        self.parsed: Optional[ParsedVerdict] = None
        self.timings: Dict[str, int] = {}
        self.errors: List[StageError] = []

    def enter(self, stage: str):
        if self.deadline is not None and time.perf_counter() > self.deadline:
            raise ClaimTimeout(f"claim {self.claim.id} exceeded its deadline before {stage}")
        self.stage = stage
        self._stage_started = time.perf_counter()

    def leave(self):
        self.timings[self.stage] = int((time.perf_counter() - self._stage_started) * 1000)

    def fail(self, error: Exception):
        self.errors.append(StageError(stage=self.stage, type=type(error).__name__, message=str(error)))
        log.warning("claim_failed id=%s stage=%s error=%s", self.claim.id, self.stage, type(error).__name__, exc_info=error)

    def trace(self) -> VerdictTrace:
        self.timings["total"] = int((time.perf_counter() - self.started) * 1000)
        clause_value, flag, label = None, ConsistencyFlag.NOT_APPLICABLE, Label.UNKNOWN
        if self.parsed is not None and not self.errors:
            clause_value, flag = aggregate(self.strategy, self.parsed)
            label = self.parsed.label
        return VerdictTrace(
            claim=self.claim,
            strategy=self.strategy,
            variant=self.variant,
            decomposition=self.decomposition.to_dict() if self.decomposition else None,
            grounded=self.grounded,
            prompts=self.prompts,
            completions=self.completions,
            parsed=self.parsed.to_dict() if self.parsed else None,
            clause_value=clause_value,
            final_label=label,
            consistency_flag=flag,
            citations=distinct_citations(self.grounded),
            timings=self.timings,
            errors=self.errors,
        )


class ClaimVerifier:
    def __init__(self, gateway: LLMGateway, grounder: Optional[KnowledgeGrounder] = None,
                 claim_timeout_s: Optional[float] = None):
        self.gateway = gateway
        self.grounder = grounder
        self.claim_timeout_s = claim_timeout_s

    def _complete(self, run: _Run, phase: Phase, prompt: str) -> str:
        run.prompts.append(PromptRecord(phase=phase, text=prompt))
        result = self.gateway.complete(prompt, deadline=run.deadline)
        run.completions.append(result)
        return result.text

    def _ground(self, run: _Run, questions: Sequence[str]):
        if self.grounder is None:
            raise ConfigError("no grounding configured for a decomposing strategy")
        for question in questions:
            if run.deadline is not None and time.perf_counter() > run.deadline:
                raise ClaimTimeout(f"claim {run.claim.id} exceeded its deadline while grounding")
            run.grounded.append(self.grounder.ground_question(question))

    def _reason(self, run: _Run, strategy: Strategy):
        run.enter("reason")
        prompt = build_reasoning_prompt(strategy, run.claim.text, run.decomposition, run.grounded)
        run.parsed = parse_verdict(strategy, self._complete(run, Phase.REASON, prompt))
        run.leave()

    def verify_claim(self, claim: Claim, strategy: Strategy) -> VerdictTrace:
        """Full run of one claim; stage errors end up in the trace, never raised."""
        run = _Run(claim, strategy, None, self.claim_timeout_s)
        try:
            if strategy != Strategy.DIRECT:
                run.enter("decompose")
                completion = self._complete(run, Phase.DECOMPOSE, build_decompose_prompt(strategy, claim.text))
                run.decomposition = parse_decomposition(strategy, completion)
                run.leave()

                run.enter("ground")
                self._ground(run, run.decomposition.questions)
                run.leave()

            self._reason(run, strategy)
        except STAGE_ERRORS as e:
            run.fail(e)

        trace = run.trace()
        log.info("claim_verified id=%s strategy=%s label=%s", claim.id, strategy.value, trace.final_label.value)
        return trace

    def check_folk_artifacts(self, claims: Sequence[Claim], folk_traces: Mapping[str, VerdictTrace]):
        missing = []
        for claim in claims:
            trace = folk_traces.get(claim.id)
            decomposition = trace.decomposition_obj() if trace else None
            if decomposition is None or len(trace.grounded) != len(decomposition.questions):
                missing.append(claim.id)
        if missing:
            raise MissingFolkArtifacts(f"no complete FOLK decomposition for claims {missing}")

    def reason_from_folk(self, claim: Claim, variant: CrossFormat, folk_trace: VerdictTrace) -> VerdictTrace:
        """Baseline-format reasoning over FOLK's questions and grounded answers (one gateway call)."""
        strategy = variant.strategy
        run = _Run(claim, strategy, variant.value, self.claim_timeout_s)
        folk = folk_trace.decomposition_obj()
        # predicates are dropped: the baseline templates only see questions and answers
        run.decomposition = Decomposition(questions=folk.questions, diagnostics=folk.diagnostics)
        run.grounded = list(folk_trace.grounded)
        try:
            self._reason(run, strategy)
        except STAGE_ERRORS as e:
            run.fail(e)
        return run.trace()

    def cross_format_run(self, claims: Sequence[Claim], variant: CrossFormat,
                         folk_traces: Mapping[str, VerdictTrace]) -> List[VerdictTrace]:
        self.check_folk_artifacts(claims, folk_traces)
        return [self.reason_from_folk(claim, variant, folk_traces[claim.id]) for claim in claims]
