"""
Errors
Exception hierarchy shared by the claimcheck modules.
"""

from typing import Optional


class ClaimCheckError(Exception):
    """Base class for every error raised by claimcheck."""


# Predicate clauses
class MalformedPredicate(ClaimCheckError):
    """A decomposition line is not a usable predicate."""


class EmptyClause(ClaimCheckError):
    """No line of a predicate block parsed."""


class MissingAssignment(ClaimCheckError):
    """A predicate of the clause has no truth-assignment entry."""


# Prompts
class UnsupportedPhase(ClaimCheckError):
    """The strategy has no template for the requested phase."""


class NoQuestions(ClaimCheckError):
    """A decomposition completion yielded zero follow-up questions."""


class MissingContext(ClaimCheckError):
    """A reasoning prompt was requested without the context it needs."""


# LLM gateway
class BackendUnavailable(ClaimCheckError):
    """The live completion endpoint failed after bounded retries."""


class ReplayMiss(ClaimCheckError):
    """The replay store holds no completion for a request tag."""

    def __init__(self, tag: str, message: Optional[str] = None):
        self.tag = tag
        super().__init__(message or f"no recorded completion for tag {tag}")


class StorageFailure(ClaimCheckError):
    """A trace, cache or report file could not be written or read."""


# Grounding
class GroundingMiss(ClaimCheckError):
    """No provider produced an answer for a question."""


class ProviderUnavailable(ClaimCheckError):
    """The web-search provider failed and nothing else answered."""


# Pipeline
class MissingFolkArtifacts(ClaimCheckError):
    """An ablation run found no FOLK decomposition for a claim."""


# Evaluation
class FormatError(ClaimCheckError):
    """A dataset or ranking file does not match its declared format."""

    def __init__(self, message: str, line: Optional[int] = None, path: Optional[str] = None):
        self.line = line
        self.path = path
        where = ""
        if path:
            where = f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


class InsufficientClass(ClaimCheckError):
    """A label class is too small for the requested stratified sample."""


class LengthMismatch(ClaimCheckError):
    """Prediction and gold label lists differ in length."""


class DegenerateData(ClaimCheckError):
    """Agreement is undefined because there is no expected disagreement."""


# Configuration
class ConfigError(ClaimCheckError):
    """The run configuration is invalid or incomplete."""
