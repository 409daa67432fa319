"""
Predicate Clauses
Grammar, parser, printer and three-valued evaluator for conjunctive predicate clauses
of the form  Name(arg, arg) ::: description  joined by  &&.
"""

import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Tuple

from utils.errors import EmptyClause, MalformedPredicate, MissingAssignment

log = logging.getLogger(__name__)

DESCRIPTION_MARK = ":::"
CONNECTIVE = "&&"


class Truth(str, Enum):
    TRUE = "True"
    FALSE = "False"
    UNKNOWN = "Unknown"

    @classmethod
    def from_text(cls, text: str) -> "Truth":
        value = text.strip().rstrip(".").lower()
        if value == "true":
            return cls.TRUE
        if value == "false":
            return cls.FALSE
        return cls.UNKNOWN

    @classmethod
    def from_bool(cls, value: bool) -> "Truth":
        return cls.TRUE if value else cls.FALSE


def normalize_whitespace(text: str) -> str:
    return " ".join(text.split())


def _is_digit_group_comma(text: str, index: int) -> bool:
    """A comma between two digits (70,000) is part of an argument."""
    return 0 < index < len(text) - 1 and text[index - 1].isdigit() and text[index + 1].isdigit()


def _split_top_level(text: str, separator: str) -> List[str]:
    """Split on separator occurrences outside parentheses."""
    pieces, depth, start, i = [], 0, 0, 0
    while i < len(text):
        ch = text[i]
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth = max(depth - 1, 0)
        elif depth == 0 and text.startswith(separator, i):
            if separator != "," or not _is_digit_group_comma(text, i):
                pieces.append(text[start:i])
                start = i + len(separator)
                i = start
                continue
        i += 1
    pieces.append(text[start:])
    return pieces


@dataclass(frozen=True)
class Predicate:
    name: str
    args: Tuple[str, ...]
    description: str = ""

    def __post_init__(self):
        name = normalize_whitespace(self.name)
        args = tuple(normalize_whitespace(a) for a in self.args)
        if not name or "(" in name or ")" in name or CONNECTIVE in name or ":" in name:
            raise MalformedPredicate(f"invalid predicate name: {self.name!r}")
        if not args or any(not a for a in args):
            raise MalformedPredicate(f"empty argument in {name}{self.args!r}")
        object.__setattr__(self, "name", name)
        object.__setattr__(self, "args", args)
        object.__setattr__(self, "description", normalize_whitespace(self.description))

    @property
    def identity(self) -> Tuple[str, Tuple[str, ...]]:
        # descriptions are not part of identity
        return (self.name, self.args)

    @property
    def head(self) -> str:
        return f"{self.name}({', '.join(self.args)})"

    def render(self) -> str:
        if self.description:
            return f"{self.head} {DESCRIPTION_MARK} {self.description}"
        return self.head


def parse_predicate(line: str) -> Predicate:
    """Parse one  Name(arg, ...) [::: description]  line."""
    text = normalize_whitespace(line)
    head, _, description = text.partition(DESCRIPTION_MARK)
    head = head.strip()

    open_idx = head.find("(")
    if open_idx < 0:
        raise MalformedPredicate(f"no parentheses in {line!r}")

    depth, close_idx = 0, None
    for i in range(open_idx, len(head)):
        if head[i] == "(":
            depth += 1
        elif head[i] == ")":
            depth -= 1
            if depth == 0:
                close_idx = i
                break
    if close_idx is None:
        raise MalformedPredicate(f"unbalanced parentheses in {line!r}")

    trailing = head[close_idx + 1:].strip()
    if trailing not in ("", "."):
        raise MalformedPredicate(f"unexpected text after predicate head in {line!r}")

    name = head[:open_idx].strip()
    if not name:
        raise MalformedPredicate(f"empty predicate name in {line!r}")
    args = tuple(a.strip() for a in _split_top_level(head[open_idx + 1:close_idx], ","))
    return Predicate(name=name, args=args, description=description.strip())


def normalize_line(line: str) -> str:
    """Whitespace-normalized form of a predicate line, used for round-trip comparison."""
    text = normalize_whitespace(line)
    head, sep, description = text.partition(DESCRIPTION_MARK)
    head = head.strip()
    head = re.sub(r"\s+\(", "(", head, count=1)
    head = re.sub(r"\(\s+", "(", head)
    head = re.sub(r"\s+\)", ")", head)
    head = re.sub(
        r"\s*,\s*",
        lambda m: m.group(0) if m.group(0) == "," and _is_digit_group_comma(m.string, m.start()) else ", ",
        head,
    )
    if head.endswith(")."):
        head = head[:-1]
    description = description.strip()
    if sep and description:
        return f"{head} {DESCRIPTION_MARK} {description}"
    return head


@dataclass(frozen=True)
class PredicateClause:
    """Ordered conjunction p1 && ... && pn, n >= 1."""

    predicates: Tuple[Predicate, ...]
    diagnostics: Tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "predicates", tuple(self.predicates))
        if not self.predicates:
            raise EmptyClause("a clause needs at least one predicate")
        seen = set()
        for predicate in self.predicates:
            if predicate.identity in seen:
                raise MalformedPredicate(f"duplicate predicate {predicate.head}")
            seen.add(predicate.identity)

    def __len__(self) -> int:
        return len(self.predicates)

    def __iter__(self):
        return iter(self.predicates)

    @property
    def heads(self) -> List[str]:
        return [p.head for p in self.predicates]


def parse_clause(block: str) -> PredicateClause:
    """Parse every predicate line of a block; unparseable lines become diagnostics."""
    predicates: List[Predicate] = []
    diagnostics: List[str] = []
    seen = set()

    for raw in block.splitlines():
        line = raw.strip()
        if not line:
            continue
        pieces = [line] if DESCRIPTION_MARK in line else _split_top_level(line, CONNECTIVE)
        for piece in pieces:
            piece = piece.strip()
            if not piece:
                continue
            try:
                predicate = parse_predicate(piece)
            except MalformedPredicate as e:
                diagnostics.append(f"skipped line: {e}")
                continue
            if predicate.identity in seen:
                diagnostics.append(f"duplicate predicate dropped: {predicate.head}")
                continue
            seen.add(predicate.identity)
            predicates.append(predicate)

    if not predicates:
        raise EmptyClause(f"no predicate parsed from block ({len(diagnostics)} diagnostics)")
    if diagnostics:
        log.debug("clause_diagnostics count=%d", len(diagnostics))
    return PredicateClause(predicates=tuple(predicates), diagnostics=tuple(diagnostics))


def render_clause(clause: PredicateClause) -> str:
    return f" {CONNECTIVE} ".join(clause.heads)


@dataclass(frozen=True)
class Judgment:
    value: Truth
    reason: str = ""


@dataclass(frozen=True)
class TruthAssignment:
    """Truth values keyed by predicate identity, in judgment order."""

    entries: Tuple[Tuple[Predicate, Judgment], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))

    @classmethod
    def from_pairs(cls, pairs: Iterable[Tuple[Predicate, Judgment]]) -> "TruthAssignment":
        """First entry wins for a repeated identity."""
        kept: Dict[Tuple[str, Tuple[str, ...]], Tuple[Predicate, Judgment]] = {}
        for predicate, judgment in pairs:
            kept.setdefault(predicate.identity, (predicate, judgment))
        return cls(entries=tuple(kept.values()))

    @classmethod
    def covering(cls, clause: PredicateClause, known: Optional[Dict[Tuple[str, Tuple[str, ...]], Judgment]] = None) -> "TruthAssignment":
        """Assignment for every predicate of clause; absent entries become Unknown."""
        known = known or {}
        return cls(entries=tuple((p, known.get(p.identity, Judgment(Truth.UNKNOWN))) for p in clause))

    def get(self, predicate: Predicate) -> Optional[Judgment]:
        for candidate, judgment in self.entries:
            if candidate.identity == predicate.identity:
                return judgment
        return None

    def __len__(self) -> int:
        return len(self.entries)

    def clause(self) -> Optional[PredicateClause]:
        if not self.entries:
            return None
        return PredicateClause(predicates=tuple(p for p, _ in self.entries))


def evaluate_clause(clause: PredicateClause, assignment: TruthAssignment) -> Truth:
    """Three-valued conjunction: False dominates, then Unknown, else True."""
    values = []
    for predicate in clause:
        judgment = assignment.get(predicate)
        if judgment is None:
            raise MissingAssignment(f"no truth value for {predicate.head}")
        values.append(judgment.value)

    if Truth.FALSE in values:
        return Truth.FALSE
    if Truth.UNKNOWN in values:
        return Truth.UNKNOWN
    return Truth.TRUE
