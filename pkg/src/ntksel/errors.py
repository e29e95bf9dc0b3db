"""Exception and warning types shared across the engine."""


class NtkselError(Exception):
    """Base class for all engine errors."""


class ConfigError(NtkselError):
    """A pipeline configuration violates one of its invariants."""


class DimMismatch(NtkselError):
    """Vector or matrix shape disagrees with the expected dimension."""


class NonFiniteValue(NtkselError):
    """A vector entry is NaN or infinite."""


# -- feature store ---------------------------------------------------------

class StoreError(NtkselError):
    """Base class for binary feature container errors."""


class DuplicateId(StoreError):
    """Two records in one file share a sample id."""


class BadMagic(StoreError):
    """File does not start with the container magic bytes."""


class TruncatedFile(StoreError):
    """File ends mid-record or holds fewer records than its header claims."""


class CountMismatch(StoreError):
    """Streamed record count differs from the header count."""


class IoError(StoreError):
    """Wrapped OS-level read/write failure."""


# -- projection ------------------------------------------------------------

class OverlapError(NtkselError):
    """Chunked projection received two chunks covering the same index."""


class CoverageError(NtkselError):
    """Chunked projection input does not cover the full source range."""


# -- toy model -------------------------------------------------------------

class NonFiniteGradient(NtkselError):
    """Backpropagation produced NaN or infinite gradient entries."""


class NoHiddenLayer(NtkselError):
    """Embedding requested from a network without hidden layers."""


class DivergenceError(NtkselError):
    """Training loss became non-finite."""


class SizeCapExceeded(NtkselError):
    """Materializing this Jacobian would exceed the configured entry cap."""


# -- kernel ----------------------------------------------------------------

class SeedMismatch(NtkselError):
    """Feature sets were projected under different random projections."""


class ZeroNorm(NtkselError):
    """Cosine similarity requested against a zero matrix."""


class DegenerateVariance(NtkselError):
    """Correlation is undefined because one value list is constant."""


# -- preselect / select ----------------------------------------------------

class EmptyCandidates(NtkselError):
    """Candidate set is empty."""


class MTooLarge(NtkselError):
    """Requested pre-selection size exceeds the candidate count."""


class EmptyMatrix(NtkselError):
    """Kernel matrix has no rows or no columns."""


class NTooLarge(NtkselError):
    """Requested selection size exceeds the scored candidate count."""


# -- dynamics probe --------------------------------------------------------

class NegativeCosine(NtkselError):
    """Kernel cosine dropped to zero or below; stability bound hypotheses fail."""


class SparseCheckpoints(UserWarning):
    """Checkpoint spacing too coarse for reliable finite differences."""


# -- krr -------------------------------------------------------------------

class SingularSystem(NtkselError):
    """Unregularized kernel system is numerically singular."""


class AsymmetricKernel(NtkselError):
    """Kernel matrix passed to the solver is not symmetric."""


# -- cli / demo ------------------------------------------------------------

class DemoAssertionFailed(NtkselError):
    """Synthetic demo did not show selection signal above chance."""


class IdentityCheckFailed(NtkselError):
    """A kernel-trace algebraic identity failed its tolerance."""


class StageError(NtkselError):
    """Pipeline stage failure, tagged with the stage name."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
