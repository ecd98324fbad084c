"""Exception hierarchy shared across the toolkit.

Two mixin bases drive the CLI exit-code contract: ``ConfigError`` maps to
exit 2, ``DataError`` to exit 3. Everything else exits 1.
"""


class EmbedForgeError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(EmbedForgeError):
    """Invalid configuration (CLI exit code 2)."""


class DataError(EmbedForgeError):
    """Invalid or missing input data (CLI exit code 3)."""


# --- vecmath ---------------------------------------------------------------


class ZeroVector(EmbedForgeError):
    """All-zero vector where a direction is required."""


class DimensionMismatch(EmbedForgeError):
    """Vectors or matrices with incompatible dimensions."""


# --- embedder --------------------------------------------------------------


class InstructionOnPassage(EmbedForgeError):
    """Instruction text supplied for a non-query role."""


# --- objectives ------------------------------------------------------------


class NonPositiveTemperature(EmbedForgeError):
    """Softmax temperature must be > 0."""


class NonSquareMatrix(EmbedForgeError):
    """In-batch contrastive loss needs a square score matrix."""


class ShapeMismatch(EmbedForgeError):
    """Array shapes do not line up."""


# --- datamix ---------------------------------------------------------------


class MalformedJson(DataError):
    """A pair file line is not valid JSON."""

    def __init__(self, line_no: int, detail: str = ""):
        self.line_no = line_no
        super().__init__(f"line {line_no}: malformed JSON{': ' + detail if detail else ''}")


class MissingField(DataError):
    """A pair file line lacks a required field."""

    def __init__(self, line_no: int, field: str):
        self.line_no = line_no
        self.field = field
        super().__init__(f"line {line_no}: missing required field {field!r}")


class InvalidPair(DataError):
    """A text pair violates its invariants."""


class QuotaExceedsPool(DataError):
    """A source quota asks for more pairs than the pool holds."""

    def __init__(self, source: str, quota: int, pool: int):
        self.source = source
        super().__init__(f"source {source!r}: quota {quota} exceeds pool size {pool}")


class EmptyCorpus(DataError):
    """Mining or retrieval over an empty corpus."""


# --- trainer ---------------------------------------------------------------


class BadMagic(DataError):
    """Checkpoint file does not start with the expected magic bytes."""


class UnsupportedVersion(DataError):
    """Checkpoint format version not understood."""


class TruncatedFile(DataError):
    """Checkpoint file ends before its declared payload."""


class StageOrder(EmbedForgeError):
    """Training stages invoked out of order."""


# --- evalkit ---------------------------------------------------------------


class UnknownDocId(DataError):
    """Relevance judgments reference a document missing from the corpus."""


class CountMismatch(EmbedForgeError):
    """Parallel embedding sets of unequal size."""


class GoldNotBijective(EmbedForgeError):
    """Gold alignment is not a permutation."""


class DegenerateInput(EmbedForgeError):
    """Statistic undefined for the given input (e.g. constant sequence)."""


class EmptySection(EmbedForgeError):
    """Report aggregation over an empty section."""
