"""
Evaluator
Scores verdict traces (macro-F1 per challenge) and explanation rankings
(Mean Average Rank, Krippendorff's alpha), and renders the report tables.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import krippendorff
import numpy as np
from pydantic import BaseModel
from sklearn.metrics import f1_score

from claim_verifier import Challenge, Claim, GoldLabel, VerdictTrace
from utils.errors import DegenerateData, FormatError, LengthMismatch
from utils.prompts import Label

log = logging.getLogger(__name__)

BINARY = (Label.SUPPORTED.value, Label.NOT_SUPPORTED.value)
ALL_COLUMN = "All"
AVG_ROW = "Avg"


def macro_f1(pred: Sequence, gold: Sequence) -> float:
    """Unweighted mean F1 over SUPPORTED / NOT_SUPPORTED.

    A class is scored when it occurs in gold or in pred; Unknown predictions are
    plain misses for their gold class and never form a class of their own.
    """
    if len(pred) != len(gold):
        raise LengthMismatch(f"{len(pred)} predictions for {len(gold)} gold labels")
    pred = [getattr(p, "value", p) for p in pred]
    gold = [getattr(g, "value", g) for g in gold]
    labels = [c for c in BINARY if c in gold or c in pred]
    if not labels:
        return 0.0
    return float(f1_score(gold, pred, labels=labels, average="macro", zero_division=0))


def confusion_counts(pred: Sequence, gold: Sequence) -> Dict[str, Dict[str, int]]:
    counts: Dict[str, Dict[str, int]] = {g: {p: 0 for p in BINARY + (Label.UNKNOWN.value,)} for g in BINARY}
    for p, g in zip(pred, gold):
        counts[getattr(g, "value", g)][getattr(p, "value", p)] += 1
    return counts


@dataclass(frozen=True)
class RankingSheet:
    """Ranks given by annotators to each system's explanation of each item, for one criterion."""

    criterion: str
    annotators: Tuple[str, ...]
    items: Tuple[str, ...]
    systems: Tuple[str, ...]
    ranks: np.ndarray = field(compare=False)  # [annotator, item, system]

    def __post_init__(self):
        expected = (len(self.annotators), len(self.items), len(self.systems))
        if self.ranks.shape != expected:
            raise FormatError(f"ranking sheet {self.criterion}: shape {self.ranks.shape} != {expected}")
        if np.isnan(self.ranks).any():
            raise FormatError(f"ranking sheet {self.criterion}: unfilled (annotator, item, system) cells")
        if (self.ranks < 1).any() or (self.ranks > len(self.systems)).any():
            raise FormatError(f"ranking sheet {self.criterion}: ranks must lie in 1..{len(self.systems)}")

    @classmethod
    def from_cells(cls, criterion: str, cells: Mapping[Tuple[str, str, str], int]) -> "RankingSheet":
        annotators = tuple(OrderedDict.fromkeys(a for a, _, _ in cells))
        items = tuple(OrderedDict.fromkeys(i for _, i, _ in cells))
        systems = tuple(OrderedDict.fromkeys(s for _, _, s in cells))
        ranks = np.full((len(annotators), len(items), len(systems)), np.nan)
        for (a, i, s), rank in cells.items():
            ranks[annotators.index(a), items.index(i), systems.index(s)] = rank
        return cls(criterion=criterion, annotators=annotators, items=items, systems=systems, ranks=ranks)

    def reliability_data(self) -> np.ndarray:
        """Annotators x units, one unit per (item, system)."""
        return self.ranks.reshape(len(self.annotators), -1)


def mean_average_rank(sheet: RankingSheet) -> Dict[str, Dict[str, float]]:
    """system -> {annotator: MAR, ..., "Avg": mean of the annotator MARs}; lower is better."""
    per_annotator = sheet.ranks.mean(axis=1)  # [annotator, system]
    result: Dict[str, Dict[str, float]] = {}
    for s, system in enumerate(sheet.systems):
        row = {annotator: float(per_annotator[a, s]) for a, annotator in enumerate(sheet.annotators)}
        row[AVG_ROW] = float(per_annotator[:, s].mean())
        result[system] = row
    return result


def krippendorff_alpha(sheet: RankingSheet, metric: str = "ordinal",
                       diagnostics: Optional[List[str]] = None) -> float:
    if metric not in ("ordinal", "interval"):
        raise ValueError(f"unsupported alpha metric {metric!r}")
    if len(sheet.annotators) < 2 or len(sheet.items) < 2:
        raise DegenerateData("alpha needs at least two annotators and two items")

    data = sheet.reliability_data()
    if np.unique(data).size < 2:
        # no expected disagreement; alpha is 1 by convention
        message = f"{sheet.criterion}: every rank identical, alpha set to 1.0"
        log.info("alpha_degenerate criterion=%s", sheet.criterion)
        if diagnostics is not None:
            diagnostics.append(message)
        return 1.0
    return float(krippendorff.alpha(reliability_data=data, level_of_measurement=metric))


class ScoredItem(BaseModel):
    id: str
    challenge: Challenge
    gold: GoldLabel
    pred: Label


def items_from_traces(traces: Sequence[VerdictTrace]) -> List[ScoredItem]:
    return [
        ScoredItem(id=t.claim.id, challenge=t.claim.challenge, gold=t.claim.gold_label, pred=t.final_label)
        for t in traces
    ]


def items_from_predictions(predictions: Mapping[str, Label], claims: Sequence[Claim]) -> List[ScoredItem]:
    """Score externally produced labels against the gold labels of claims; absent ids are Unknown."""
    return [
        ScoredItem(id=c.id, challenge=c.challenge, gold=c.gold_label, pred=predictions.get(c.id, Label.UNKNOWN))
        for c in claims
    ]


class SystemScore(BaseModel):
    name: str
    macro_f1: Dict[str, float]
    confusion: Dict[str, Dict[str, int]]
    scored: int
    unknown_count: int
    unlabeled_skipped: int = 0


class ExplanationScore(BaseModel):
    criterion: str
    mar: Dict[str, Dict[str, float]]
    alpha: float


class EvalReport(BaseModel):
    systems: List[SystemScore] = []
    challenges: List[str] = []
    explanations: List[ExplanationScore] = []
    manifest_digests: Dict[str, str] = {}
    diagnostics: List[str] = []


def score_system(name: str, items: Sequence[ScoredItem], challenges: Sequence[str]) -> SystemScore:
    labeled = [i for i in items if i.gold != GoldLabel.UNLABELED]
    scores: Dict[str, float] = {}
    for challenge in challenges:
        subset = [i for i in labeled if i.challenge.value == challenge]
        if subset:
            scores[challenge] = macro_f1([i.pred for i in subset], [i.gold for i in subset])
    scores[ALL_COLUMN] = macro_f1([i.pred for i in labeled], [i.gold for i in labeled])
    return SystemScore(
        name=name,
        macro_f1=scores,
        confusion=confusion_counts([i.pred for i in labeled], [i.gold for i in labeled]),
        scored=len(labeled),
        unknown_count=sum(1 for i in labeled if i.pred == Label.UNKNOWN),
        unlabeled_skipped=len(items) - len(labeled),
    )


def build_report(
    items_by_system: Mapping[str, Sequence[ScoredItem]],
    sheets: Optional[Mapping[str, RankingSheet]] = None,
    manifest_digests: Optional[Mapping[str, str]] = None,
    alpha_metric: str = "ordinal",
) -> EvalReport:
    present = {i.challenge for items in items_by_system.values() for i in items if i.challenge != Challenge.NONE}
    challenges = [c.value for c in Challenge if c in present]

    report = EvalReport(challenges=challenges, manifest_digests=dict(manifest_digests or {}))
    for name, items in items_by_system.items():
        report.systems.append(score_system(name, items, challenges))

    for criterion, sheet in (sheets or {}).items():
        alpha = krippendorff_alpha(sheet, alpha_metric, report.diagnostics)
        report.explanations.append(ExplanationScore(criterion=criterion, mar=mean_average_rank(sheet), alpha=alpha))
    return report


def render_table(report: EvalReport) -> str:
    """Fixed-width macro-F1 table (x100) followed by the MAR / alpha table when rankings were scored."""
    columns = report.challenges + [ALL_COLUMN]
    name_width = max([len("System")] + [len(s.name) for s in report.systems]) + 2
    lines = ["System".ljust(name_width) + "".join(c.rjust(10) for c in columns) + "Unknown".rjust(10)]
    lines.append("-" * len(lines[0]))
    for system in report.systems:
        cells = [f"{system.macro_f1[c] * 100:.2f}" if c in system.macro_f1 else "-" for c in columns]
        lines.append(system.name.ljust(name_width) + "".join(c.rjust(10) for c in cells)
                     + str(system.unknown_count).rjust(10))

    for explanation in report.explanations:
        systems = list(explanation.mar)
        raters = list(next(iter(explanation.mar.values()))) if systems else []
        width = max([len("Rater")] + [len(r) for r in raters]) + 2
        lines.extend(["", f"{explanation.criterion} (MAR, lower is better)"])
        lines.append("Rater".ljust(width) + "".join(s.rjust(12) for s in systems))
        for rater in raters:
            lines.append(rater.ljust(width) + "".join(f"{explanation.mar[s][rater]:.2f}".rjust(12) for s in systems))
        lines.append(f"alpha = {explanation.alpha:.2f}")
    return "\n".join(lines) + "\n"
