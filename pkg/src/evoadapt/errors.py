"""Exception types shared across the package.

Wire-facing errors carry a stable ``kind`` string so that error payloads
produced by a remote worker and by the in-process backend are
indistinguishable to callers.
"""

from __future__ import annotations


# --- feature store ---------------------------------------------------------

class StoreError(Exception):
    pass


class BadMagic(StoreError):
    pass


class VersionMismatch(StoreError):
    pass


class ShapeMismatch(StoreError):
    pass


class LabelOutOfRange(StoreError):
    pass


class NormOutOfRange(StoreError):
    pass


class InsufficientSamples(StoreError):
    pass


class InvalidSpec(StoreError):
    pass


# --- adaptation algorithms -------------------------------------------------

class AdaptationError(Exception):
    pass


class MissingClass(AdaptationError):
    pass


class TopkOutOfRange(AdaptationError):
    pass


class EmptyChannelSet(AdaptationError):
    pass


class NonFinite(AdaptationError):
    pass


class SingularCovariance(AdaptationError):
    pass


class LengthMismatch(AdaptationError):
    pass


class EmptyInput(AdaptationError):
    pass


# --- execution fabric / workers --------------------------------------------

class ExecutionError(Exception):
    """Failure while executing candidate code.

    ``kind`` is the wire-protocol error tag; ``hyperparams`` is attached by
    the fitness driver so the failing grid point is visible to callers.
    """

    kind = "ExecutionError"

    def __init__(self, message: str = "", hyperparams=None):
        super().__init__(message)
        self.hyperparams = hyperparams


class CandidateError(ExecutionError):
    kind = "CandidateError"


class DefinitionMissing(CandidateError):
    kind = "DefinitionMissing"


class InvalidOutput(ExecutionError):
    kind = "InvalidOutput"


class Timeout(ExecutionError):
    kind = "Timeout"


class WorkerCrash(ExecutionError):
    kind = "WorkerCrash"


class UnknownDataset(ExecutionError):
    kind = "UnknownDataset"


class UnknownHandle(ExecutionError):
    kind = "UnknownHandle"


class InfrastructureError(Exception):
    pass


class SpawnFailure(InfrastructureError):
    pass


WIRE_ERRORS = {
    cls.kind: cls
    for cls in (
        CandidateError,
        DefinitionMissing,
        InvalidOutput,
        Timeout,
        WorkerCrash,
        UnknownDataset,
        UnknownHandle,
    )
}


def error_from_wire(kind: str, message: str) -> ExecutionError:
    """Rehydrate a wire error payload into the matching exception type."""
    return WIRE_ERRORS.get(kind, ExecutionError)(message)


# --- LLM gateway ------------------------------------------------------------

class GatewayError(Exception):
    pass


class AuthError(GatewayError):
    pass


class NoThoughts(ValueError):
    pass


class NoCode(ValueError):
    pass


class InvalidPromptSpec(ValueError):
    pass


# --- evolution engine --------------------------------------------------------

class InvalidCombination(ValueError):
    pass


class EmptyPopulation(ValueError):
    pass


class ParseExhausted(Exception):
    pass


class NoViableCandidates(Exception):
    pass


# --- downstream evaluation ---------------------------------------------------

class NoViableTrial(Exception):
    pass


class DimensionMismatch(ValueError):
    pass
