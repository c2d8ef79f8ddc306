"""Exception types shared across the toolkit."""


class DialcauseError(Exception):
    """Base class for all toolkit errors."""


class MalformedRecord(DialcauseError):
    """A corpus line could not be parsed; carries the line number."""

    def __init__(self, line_no: int, reason: str):
        self.line_no = line_no
        self.reason = reason
        super().__init__(f"line {line_no}: {reason}")


class DanglingAnnotation(DialcauseError):
    """A cause annotation points at an index it cannot point at."""

    def __init__(self, line_no: int, reason: str):
        self.line_no = line_no
        self.reason = reason
        super().__init__(f"line {line_no}: {reason}")


class InsufficientData(DialcauseError):
    """Requested split or sample cannot be formed from the given data."""


class DegenerateInput(DialcauseError):
    """Metric input has no content to measure (e.g. no n-grams)."""


class SingleClassData(DialcauseError):
    """Training data contains only one label."""


class NoPositives(DialcauseError):
    """Evaluation set contains no positive examples."""


class NoCandidates(DialcauseError):
    """No candidate utterance exists (response index too small)."""


class NoEligibleCandidates(DialcauseError):
    """Negative sampling has no pool to draw from."""


class MisalignedInputs(DialcauseError):
    """Predictions and gold annotations do not cover the same pairs."""


class MissingFallback(DialcauseError):
    """Candidate set lacks the preceding-utterance-only response."""


class EncoderFailure(DialcauseError):
    """Encoder adapter failed; carries the offending input."""


class GeneratorFailure(DialcauseError):
    """Generator adapter failed for a candidate."""


class AdapterHandshakeError(DialcauseError):
    """Subprocess adapter did not complete the handshake."""


class KTooLarge(DialcauseError):
    """Matched-random perturbation needs more non-causes than exist."""


class InsufficientSamples(DialcauseError):
    """Too few samples for a counting estimate."""


class DivergenceError(DialcauseError):
    """Self-training validation collapsed; carries the trace so far."""

    def __init__(self, message: str, trace=None):
        self.trace = trace
        super().__init__(message)


class CheckpointError(DialcauseError):
    """Checkpoint directory is missing or malformed."""
