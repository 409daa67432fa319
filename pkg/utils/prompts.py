"""
Prompt Kit
Builds the few-shot decomposition and reasoning prompts from the template assets in prompts/
and parses completions back into decompositions and verdicts.
"""

import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple

from utils.errors import EmptyClause, MalformedPredicate, MissingContext, NoQuestions, UnsupportedPhase
from utils.fol import (
    CONNECTIVE,
    DESCRIPTION_MARK,
    Judgment,
    Predicate,
    PredicateClause,
    Truth,
    TruthAssignment,
    normalize_whitespace,
    parse_clause,
    parse_predicate,
)

if TYPE_CHECKING:
    from utils.search import GroundedQA

log = logging.getLogger(__name__)

PROMPTS_DIR = Path(__file__).resolve().parent.parent / "prompts"

EXAMPLE_SEPARATOR = "------"
RESPONSE_CUE = ">>>>>>"
CLAIM_SLOT = "{claim}"
CONTEXT_SLOT = "{context}"
QUESTION_PREFIX = "Followup Question:"
PREDICATES_HEADER = "Predicates:"
EXPLANATION_HEADER = "Explanation:"
MIN_SHOTS, MAX_SHOTS = 4, 6


class Strategy(str, Enum):
    DIRECT = "direct"
    COT = "cot"
    SELF_ASK = "selfask"
    FOLK = "folk"


class Phase(str, Enum):
    DECOMPOSE = "decompose"
    REASON = "reason"


class Label(str, Enum):
    SUPPORTED = "SUPPORTED"
    NOT_SUPPORTED = "NOT_SUPPORTED"
    UNKNOWN = "Unknown"

    @classmethod
    def parse(cls, text: Optional[str]) -> "Label":
        """Canonicalize a label token; SUPPORT(S) and REFUTE(S|D) are synonyms."""
        token = (text or "").strip().strip("[]").strip().upper().replace(" ", "_")
        if token in ("SUPPORTED", "SUPPORT", "SUPPORTS"):
            return cls.SUPPORTED
        if token in ("NOT_SUPPORTED", "REFUTE", "REFUTES", "REFUTED"):
            return cls.NOT_SUPPORTED
        return cls.UNKNOWN


LABEL_TOKEN = re.compile(r"\[\s*(NOT_SUPPORTED|NOT SUPPORTED|SUPPORTED|SUPPORTS|SUPPORT|REFUTED|REFUTES|REFUTE)\s*\]")
REASONS_HEADER = re.compile(r"Here are the reasons\s*[:,]\s*")
JUDGMENT_TAIL = re.compile(r"^is\s+(?P<value>[A-Za-z_]+)\.?(?:\s+because\b\s*(?P<reason>.*))?$", re.DOTALL)


@dataclass(frozen=True)
class PromptTemplate:
    strategy: Strategy
    phase: Phase
    preamble: str
    shots: Tuple[str, ...]
    stub: str
    example_separator: str = EXAMPLE_SEPARATOR
    response_cue: str = RESPONSE_CUE

    @classmethod
    def from_text(cls, strategy: Strategy, phase: Phase, text: str) -> "PromptTemplate":
        preamble, _, body = text.partition("\n\n")
        blocks = body.split(f"\n{EXAMPLE_SEPARATOR}\n")
        if len(blocks) < 2 or CLAIM_SLOT not in blocks[-1]:
            raise ValueError(f"template {strategy.value}/{phase.value} has no claim slot after its shots")
        if not blocks[-1].rstrip("\n").endswith(RESPONSE_CUE):
            raise ValueError(f"template {strategy.value}/{phase.value} does not end with the response cue")
        template = cls(strategy=strategy, phase=phase, preamble=preamble, shots=tuple(blocks[:-1]), stub=blocks[-1])
        if not MIN_SHOTS <= len(template.shots) <= MAX_SHOTS:
            log.warning("shot_count_outside_range template=%s/%s shots=%d", strategy.value, phase.value, len(template.shots))
        return template

    def render(self, claim: str, context: str = "") -> str:
        stub = self.stub.replace(CLAIM_SLOT, claim).replace(CONTEXT_SLOT, context)
        body = f"\n{self.example_separator}\n".join(self.shots + (stub,))
        return f"{self.preamble}\n\n{body}"


TEMPLATE_FILES: Dict[Tuple[Strategy, Phase], str] = {
    (Strategy.COT, Phase.DECOMPOSE): "cot_decompose.txt",
    # Self-Ask decomposes exactly like CoT
    (Strategy.SELF_ASK, Phase.DECOMPOSE): "cot_decompose.txt",
    (Strategy.FOLK, Phase.DECOMPOSE): "folk_decompose.txt",
    (Strategy.DIRECT, Phase.REASON): "direct_reason.txt",
    (Strategy.COT, Phase.REASON): "cot_reason.txt",
    (Strategy.SELF_ASK, Phase.REASON): "selfask_reason.txt",
    (Strategy.FOLK, Phase.REASON): "folk_reason.txt",
}


@lru_cache(maxsize=None)
def load_template(strategy: Strategy, phase: Phase, prompts_dir: Path = PROMPTS_DIR) -> PromptTemplate:
    filename = TEMPLATE_FILES.get((strategy, phase))
    if filename is None:
        raise UnsupportedPhase(f"{strategy.value} has no {phase.value} template")
    text = (Path(prompts_dir) / filename).read_text(encoding="utf-8")
    return PromptTemplate.from_text(strategy, phase, text)


@dataclass(frozen=True)
class Decomposition:
    predicates: Optional[PredicateClause] = None
    questions: Tuple[str, ...] = ()
    diagnostics: Tuple[str, ...] = field(default=(), compare=False)

    def to_dict(self) -> dict:
        return {
            "predicates": [p.render() for p in self.predicates] if self.predicates else [],
            "questions": list(self.questions),
            "diagnostics": list(self.diagnostics),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Decomposition":
        lines = data.get("predicates") or []
        clause = parse_clause("\n".join(lines)) if lines else None
        return cls(predicates=clause, questions=tuple(data.get("questions") or ()),
                   diagnostics=tuple(data.get("diagnostics") or ()))


@dataclass(frozen=True)
class ParsedVerdict:
    label: Label
    predicate_judgments: TruthAssignment = TruthAssignment()
    explanation: str = ""
    stated_clause_value: Optional[Truth] = None
    diagnostics: Tuple[str, ...] = field(default=(), compare=False)

    def to_dict(self) -> dict:
        return {
            "label": self.label.value,
            "predicate_judgments": [
                {"predicate": p.head, "value": j.value.value, "reason": j.reason}
                for p, j in self.predicate_judgments.entries
            ],
            "explanation": self.explanation,
            "stated_clause_value": self.stated_clause_value.value if self.stated_clause_value else None,
            "diagnostics": list(self.diagnostics),
        }


def normalize_completion(text: str) -> str:
    """CRLF to LF, trailing spaces stripped."""
    lines = text.replace("\r\n", "\n").replace("\r", "\n").split("\n")
    return "\n".join(line.rstrip() for line in lines)


def _first_block(text: str) -> Tuple[str, bool]:
    """Cut a completion at the first example separator (runaway continuation)."""
    lines = text.split("\n")
    for i, line in enumerate(lines):
        if line.strip() == EXAMPLE_SEPARATOR:
            return "\n".join(lines[:i]), True
    return text, False


def _one_line(text: str) -> str:
    return normalize_whitespace(text)


def _split_head(line: str) -> Optional[Tuple[str, str]]:
    """Split  Name(args) rest  at the parenthesis closing the first group."""
    open_idx = line.find("(")
    if open_idx <= 0:
        return None
    depth = 0
    for i in range(open_idx, len(line)):
        if line[i] == "(":
            depth += 1
        elif line[i] == ")":
            depth -= 1
            if depth == 0:
                return line[:i + 1], line[i + 1:].strip()
    return None


def build_decompose_prompt(strategy: Strategy, claim: str) -> str:
    if strategy == Strategy.DIRECT:
        raise UnsupportedPhase("direct prompting has no decomposition phase")
    return load_template(strategy, Phase.DECOMPOSE).render(claim=_one_line(claim))


def parse_decomposition(strategy: Strategy, completion: str) -> Decomposition:
    text, truncated = _first_block(normalize_completion(completion))
    diagnostics: List[str] = []
    if truncated:
        diagnostics.append("completion truncated at example separator")

    lines = text.split("\n")
    questions = tuple(
        line.strip()[len(QUESTION_PREFIX):].strip()
        for line in lines
        if line.strip().startswith(QUESTION_PREFIX) and line.strip()[len(QUESTION_PREFIX):].strip()
    )

    clause = None
    if strategy == Strategy.FOLK:
        header = next((i for i, line in enumerate(lines) if line.strip().startswith(PREDICATES_HEADER)), None)
        if header is None:
            diagnostics.append("no Predicates: header in completion")
        else:
            block = [lines[header].strip()[len(PREDICATES_HEADER):]]
            for line in lines[header + 1:]:
                if line.strip().startswith(QUESTION_PREFIX):
                    break
                block.append(line)
            try:
                clause = parse_clause("\n".join(block))
                diagnostics.extend(clause.diagnostics)
            except EmptyClause as e:
                diagnostics.append(f"empty predicate clause: {e}")
        if clause is not None and len(clause) != len(questions):
            diagnostics.append(f"{len(clause)} predicates but {len(questions)} follow-up questions")

    if not questions:
        raise NoQuestions("no 'Followup Question:' line in completion")
    return Decomposition(predicates=clause, questions=questions, diagnostics=tuple(diagnostics))


def build_reasoning_prompt(
    strategy: Strategy,
    claim: str,
    decomposition: Optional[Decomposition] = None,
    qa: Sequence["GroundedQA"] = (),
) -> str:
    template = load_template(strategy, Phase.REASON)
    claim = _one_line(claim)

    if strategy == Strategy.DIRECT:
        return template.render(claim=claim)

    if strategy == Strategy.COT:
        # answers only
        context = "".join(f"{_one_line(item.answer)}\n" for item in qa)
    elif strategy == Strategy.SELF_ASK:
        context = "".join(f"{_one_line(item.question)} {_one_line(item.answer)}\n" for item in qa)
    else:
        if decomposition is None or decomposition.predicates is None:
            raise MissingContext("FOLK reasoning needs a non-empty predicate clause")
        predicate_lines = "\n".join(p.render() for p in decomposition.predicates)
        qa_lines = "".join(f"{_one_line(item.question)} {_one_line(item.answer)}\n" for item in qa)
        context = f"{predicate_lines}\n\n{qa_lines}"
    return template.render(claim=claim, context=context)


def _find_label(text: str, diagnostics: List[str]) -> Label:
    tokens = [Label.parse(m.group(1)) for m in LABEL_TOKEN.finditer(text)]
    if not tokens:
        return Label.UNKNOWN
    if len(set(tokens)) > 1:
        diagnostics.append(f"conflicting label tokens {[t.value for t in tokens]}; first occurrence used")
    return tokens[0]


def _find_explanation(strategy: Strategy, text: str) -> str:
    lines = text.split("\n")
    explanation_at = next((i for i, line in enumerate(lines) if line.strip().startswith(EXPLANATION_HEADER)), None)
    reasons = REASONS_HEADER.search(text)

    if explanation_at is not None and (strategy == Strategy.FOLK or reasons is None):
        first = lines[explanation_at].strip()[len(EXPLANATION_HEADER):]
        return "\n".join([first] + lines[explanation_at + 1:]).strip()
    if reasons is not None:
        return text[reasons.end():].strip()
    return ""


STATED_VALUE = re.compile(r"^(?:true|false|unknown)\.?$", re.IGNORECASE)


def _stated_clause_value(line: str) -> Optional[Truth]:
    """Value of a  p1 && ... && pn is V.  line, or None when line is anything else."""
    if CONNECTIVE not in line:
        return None
    clause_text, sep, value = line.rpartition(" is ")
    if not sep or not STATED_VALUE.match(value.strip()):
        return None
    for piece in clause_text.split(CONNECTIVE):
        split = _split_head(piece.strip())
        if split is None or split[1] not in ("", ".") or DESCRIPTION_MARK in piece:
            return None
        try:
            parse_predicate(split[0])
        except MalformedPredicate:
            return None
    return Truth.from_text(value)


def _parse_judgments(text: str, diagnostics: List[str]) -> Tuple[TruthAssignment, Optional[Truth]]:
    pairs: List[Tuple[Predicate, Judgment]] = []
    seen = set()
    stated: Optional[Truth] = None

    for raw in text.split("\n"):
        line = raw.strip()
        if not line or line.startswith(EXPLANATION_HEADER):
            if line.startswith(EXPLANATION_HEADER):
                break
            continue
        if LABEL_TOKEN.search(line):
            continue

        clause_value = _stated_clause_value(line)
        if clause_value is not None:
            stated = clause_value
            continue

        split = _split_head(line)
        if split is None:
            continue
        head, rest = split
        try:
            predicate = parse_predicate(head)
        except MalformedPredicate:
            diagnostics.append(f"unparseable judgment head: {line}")
            continue

        match = JUDGMENT_TAIL.match(rest)
        if match and match.group("value").lower() in ("true", "false", "unknown"):
            judgment = Judgment(Truth.from_text(match.group("value")), (match.group("reason") or "").strip())
        else:
            diagnostics.append(f"unparseable judgment degraded to Unknown: {line}")
            judgment = Judgment(Truth.UNKNOWN, line)

        if predicate.identity in seen:
            # a bare repeat of an already judged head is the one-predicate clause line
            if not judgment.reason and judgment.value != Truth.UNKNOWN:
                stated = judgment.value
            continue
        seen.add(predicate.identity)
        pairs.append((predicate, judgment))

    return TruthAssignment.from_pairs(pairs), stated


def parse_verdict(strategy: Strategy, completion: str) -> ParsedVerdict:
    text, truncated = _first_block(normalize_completion(completion))
    diagnostics: List[str] = []
    if truncated:
        diagnostics.append("completion truncated at example separator")

    label = _find_label(text, diagnostics)
    judgments, stated = TruthAssignment(), None
    if strategy == Strategy.FOLK:
        judgments, stated = _parse_judgments(text, diagnostics)

    return ParsedVerdict(
        label=label,
        predicate_judgments=judgments,
        explanation=_find_explanation(strategy, text),
        stated_clause_value=stated,
        diagnostics=tuple(diagnostics),
    )


def render_verdict(verdict: ParsedVerdict) -> str:
    """FOLK-format verdict block; parse_verdict(FOLK, ...) reads it back unchanged."""
    lines = ["Prediction:"]
    heads = []
    for predicate, judgment in verdict.predicate_judgments.entries:
        line = f"{predicate.head} is {judgment.value.value}"
        if judgment.reason:
            line += f" because {judgment.reason}"
        lines.append(line)
        heads.append(predicate.head)
    if heads and verdict.stated_clause_value is not None:
        lines.append(f"{f' {CONNECTIVE} '.join(heads)} is {verdict.stated_clause_value.value}.")
    if verdict.label != Label.UNKNOWN:
        lines.append(f"The claim is [{verdict.label.value}].")
    if verdict.explanation:
        lines.extend(["", EXPLANATION_HEADER, verdict.explanation])
    return "\n".join(lines)
