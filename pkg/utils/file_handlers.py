"""
File Handlers
Loads claim datasets (HoVER, FEVEROUS, SciFact-Open, generic JSONL), prediction files and
explanation ranking sheets, and draws label-balanced samples.
"""

import csv
import hashlib
import json
import logging
import math
from collections import OrderedDict
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

from pydantic import BaseModel

from claim_verifier import Challenge, Claim, Dataset, GoldLabel
from utils.errors import FormatError, InsufficientClass, StorageFailure
from utils.prompts import Label

log = logging.getLogger(__name__)


class DatasetFormat(str, Enum):
    HOVER_JSON = "hover"
    FEVEROUS_JSON = "feverous"
    SCIFACT_JSON = "scifact"
    GENERIC_JSONL = "jsonl"


class FieldMapping(BaseModel):
    """Which source keys hold the id, claim text, label and challenge information."""

    id: str = "id"
    text: str = "claim"
    label: str = "label"
    challenge: Optional[str] = None


DEFAULT_FIELDS: Dict[DatasetFormat, FieldMapping] = {
    DatasetFormat.HOVER_JSON: FieldMapping(id="uid", challenge="num_hops"),
    DatasetFormat.FEVEROUS_JSON: FieldMapping(challenge="challenge"),
    DatasetFormat.SCIFACT_JSON: FieldMapping(label="evidence"),
    DatasetFormat.GENERIC_JSONL: FieldMapping(challenge="challenge"),
}

DEFAULT_LABELS: Dict[str, GoldLabel] = {
    "SUPPORTED": GoldLabel.SUPPORTED,
    "SUPPORTS": GoldLabel.SUPPORTED,
    "SUPPORT": GoldLabel.SUPPORTED,
    "NOT_SUPPORTED": GoldLabel.NOT_SUPPORTED,
    "REFUTES": GoldLabel.NOT_SUPPORTED,
    "REFUTED": GoldLabel.NOT_SUPPORTED,
    "REFUTE": GoldLabel.NOT_SUPPORTED,
    "CONTRADICT": GoldLabel.NOT_SUPPORTED,
}

DATASET_OF = {
    DatasetFormat.HOVER_JSON: Dataset.HOVER,
    DatasetFormat.FEVEROUS_JSON: Dataset.FEVEROUS,
    DatasetFormat.SCIFACT_JSON: Dataset.SCIFACT_OPEN,
    DatasetFormat.GENERIC_JSONL: Dataset.CUSTOM,
}


class DatasetFile(BaseModel):
    path: Path
    format: DatasetFormat = DatasetFormat.GENERIC_JSONL
    label_mapping: Dict[str, GoldLabel] = {}
    fields: Optional[FieldMapping] = None

    def field_mapping(self) -> FieldMapping:
        return self.fields or DEFAULT_FIELDS[self.format]

    def map_label(self, raw: Any) -> Optional[GoldLabel]:
        if raw is None:
            return None
        key = str(raw).strip().upper().replace(" ", "_")
        mapping = {k.strip().upper().replace(" ", "_"): v for k, v in self.label_mapping.items()} or DEFAULT_LABELS
        return mapping.get(key)


def _records(path: Path) -> Iterator[Tuple[int, dict]]:
    """(line_or_index, record) pairs from a JSON array or a JSONL file."""
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise StorageFailure(f"cannot read {path}: {e}") from e

    if text.lstrip().startswith("["):
        try:
            rows = json.loads(text)
        except json.JSONDecodeError as e:
            raise FormatError(f"invalid JSON: {e.msg}", line=e.lineno, path=str(path)) from e
        for index, row in enumerate(rows, start=1):
            if not isinstance(row, dict):
                raise FormatError("record is not an object", line=index, path=str(path))
            yield index, row
        return

    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as e:
            raise FormatError(f"invalid JSON: {e.msg}", line=line_no, path=str(path)) from e
        if not isinstance(row, dict):
            raise FormatError("record is not an object", line=line_no, path=str(path))
        yield line_no, row


def _hover_challenge(value: Any) -> Challenge:
    try:
        return Challenge(f"{int(value)}hop")
    except (TypeError, ValueError):
        return Challenge.NONE


def _feverous_challenge(value: Any) -> Challenge:
    text = str(value or "").lower()
    if "numer" in text:
        return Challenge.NUMERICAL
    if "multi" in text:
        return Challenge.MULTIHOP
    if "table" in text:
        return Challenge.TEXT_AND_TABLE
    return Challenge.NONE


def _scifact_label(evidence: Any) -> Optional[GoldLabel]:
    """SUPPORTED / NOT_SUPPORTED only when every evidence entry agrees."""
    if not evidence:
        return None
    labels = set()
    for entry in (evidence.values() if isinstance(evidence, dict) else evidence):
        for item in (entry if isinstance(entry, list) else [entry]):
            if isinstance(item, dict):
                labels.add(str(item.get("label", "")).upper())
    if labels == {"SUPPORT"}:
        return GoldLabel.SUPPORTED
    if labels == {"CONTRADICT"}:
        return GoldLabel.NOT_SUPPORTED
    return None


class DatasetLoader:
    """Maps source records of one dataset file onto Claims."""

    def __init__(self, dataset_file: DatasetFile):
        self.file = dataset_file
        self.fields = dataset_file.field_mapping()
        self.diagnostics: List[str] = []

    def _skip(self, where: int, reason: str):
        self.diagnostics.append(f"{self.file.path}:{where}: skipped, {reason}")

    def load(self) -> List[Claim]:
        fmt = self.file.format
        claims: List[Claim] = []
        for where, row in _records(Path(self.file.path)):
            if self.fields.id not in row or self.fields.text not in row:
                raise FormatError(f"missing '{self.fields.id}' or '{self.fields.text}'", line=where, path=str(self.file.path))
            claim_id, text = str(row[self.fields.id]), str(row[self.fields.text] or "")
            if not claim_id.strip() or not text.strip():
                self._skip(where, "empty id or claim text")
                continue

            raw_challenge = row.get(self.fields.challenge) if self.fields.challenge else None
            if fmt == DatasetFormat.HOVER_JSON:
                challenge = _hover_challenge(raw_challenge)
            elif fmt == DatasetFormat.FEVEROUS_JSON:
                challenge = _feverous_challenge(raw_challenge)
            elif fmt == DatasetFormat.SCIFACT_JSON:
                challenge = Challenge.SCIENTIFIC
            else:
                try:
                    challenge = Challenge(raw_challenge) if raw_challenge else Challenge.NONE
                except ValueError:
                    challenge = Challenge.NONE

            if fmt == DatasetFormat.SCIFACT_JSON:
                gold = _scifact_label(row.get(self.fields.label))
                if gold is None:
                    self._skip(where, "evidence missing or mixed")
                    continue
            else:
                raw_label = row.get(self.fields.label)
                gold = self.file.map_label(raw_label)
                if gold is None:
                    if raw_label is None and fmt == DatasetFormat.GENERIC_JSONL:
                        gold = GoldLabel.UNLABELED
                    else:
                        self._skip(where, f"label {raw_label!r} has no binary mapping")
                        continue

            claims.append(Claim(id=claim_id, text=text, gold_label=gold, dataset=DATASET_OF[fmt], challenge=challenge))

        if self.diagnostics:
            log.warning("dataset_records_skipped path=%s count=%d", self.file.path, len(self.diagnostics))
        log.info("dataset_loaded path=%s format=%s claims=%d", self.file.path, fmt.value, len(claims))
        return claims


def load_dataset(dataset_file: DatasetFile, diagnostics: Optional[List[str]] = None) -> List[Claim]:
    loader = DatasetLoader(dataset_file)
    claims = loader.load()
    if diagnostics is not None:
        diagnostics.extend(loader.diagnostics)
    return claims


def _sample_key(seed: int, claim_id: str) -> str:
    return hashlib.sha256(f"{seed}:{claim_id}".encode("utf-8")).hexdigest()


def stratified_sample(claims: List[Claim], n: int, seed: int) -> List[Claim]:
    """n claims with a balanced binary label split, returned in input order.

    Each class is ordered by sha256("seed:id") and the first ceil(n/2) SUPPORTED and
    floor(n/2) NOT_SUPPORTED are taken; the halves swap when SUPPORTED is the short class.
    """
    if n < 1:
        raise ValueError("sample size must be positive")
    by_label: Dict[GoldLabel, List[Claim]] = {GoldLabel.SUPPORTED: [], GoldLabel.NOT_SUPPORTED: []}
    for claim in claims:
        if claim.gold_label in by_label:
            by_label[claim.gold_label].append(claim)

    supported, refuted = by_label[GoldLabel.SUPPORTED], by_label[GoldLabel.NOT_SUPPORTED]
    take_s, take_n = math.ceil(n / 2), n // 2
    if len(supported) < take_s and take_s != take_n:
        take_s, take_n = take_n, take_s
    if len(supported) < take_s or len(refuted) < take_n:
        raise InsufficientClass(
            f"need {take_s} SUPPORTED and {take_n} NOT_SUPPORTED, have {len(supported)} and {len(refuted)}"
        )

    chosen = set()
    for pool, take in ((supported, take_s), (refuted, take_n)):
        ranked = sorted(pool, key=lambda c: _sample_key(seed, c.id))
        chosen.update(c.id for c in ranked[:take])
    return [c for c in claims if c.id in chosen]


def sample_per_challenge(claims: List[Claim], n: int, seed: int) -> List[Claim]:
    """stratified_sample applied within every challenge tag; input order kept."""
    groups: "OrderedDict[Challenge, List[Claim]]" = OrderedDict()
    for claim in claims:
        groups.setdefault(claim.challenge, []).append(claim)
    chosen = set()
    for challenge, group in groups.items():
        try:
            chosen.update(c.id for c in stratified_sample(group, n, seed))
        except InsufficientClass as e:
            raise InsufficientClass(f"challenge {challenge.value}: {e}") from e
    return [c for c in claims if c.id in chosen]


def load_predictions(path: Union[str, Path]) -> Dict[str, Label]:
    """{id, label} JSONL produced by an external system."""
    predictions: Dict[str, Label] = {}
    for line_no, row in _records(Path(path)):
        if "id" not in row or "label" not in row:
            raise FormatError("prediction record needs 'id' and 'label'", line=line_no, path=str(path))
        predictions[str(row["id"])] = Label.parse(str(row["label"]))
    return predictions


RANKING_COLUMNS = ("annotator", "item", "criterion", "system", "rank")


def load_rankings(csv_path: Union[str, Path]):
    """criterion -> RankingSheet from an (annotator,item,criterion,system,rank) CSV."""
    from evaluator import RankingSheet

    cells: Dict[str, Dict[Tuple[str, str, str], int]] = OrderedDict()
    try:
        with open(csv_path, "r", encoding="utf-8", newline="") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames is None or any(c not in reader.fieldnames for c in RANKING_COLUMNS):
                raise FormatError(f"ranking sheet header must contain {','.join(RANKING_COLUMNS)}", line=1, path=str(csv_path))
            for line_no, row in enumerate(reader, start=2):
                try:
                    rank = int(row["rank"])
                except (TypeError, ValueError):
                    raise FormatError(f"rank {row['rank']!r} is not an integer", line=line_no, path=str(csv_path)) from None
                key = (row["annotator"].strip(), row["item"].strip(), row["system"].strip())
                sheet = cells.setdefault(row["criterion"].strip(), OrderedDict())
                if key in sheet:
                    raise FormatError(f"duplicate cell {key}", line=line_no, path=str(csv_path))
                sheet[key] = rank
    except OSError as e:
        raise StorageFailure(f"cannot read {csv_path}: {e}") from e

    return {criterion: RankingSheet.from_cells(criterion, ranks) for criterion, ranks in cells.items()}
