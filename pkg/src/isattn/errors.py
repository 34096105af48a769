"""Exception taxonomy shared by all isattn modules."""


class IsaError(Exception):
    """Base class for every error raised by this package."""


class LayoutError(IsaError):
    """Tensor/block dimension mismatch."""


class InputError(IsaError):
    """Non-finite or otherwise invalid numeric input."""


class BlockIndexError(IsaError):
    """Block index out of range."""


class ContractError(IsaError):
    """Caller violated an operation precondition (unsorted/duplicate/overlapping indices, empty mask row, ...)."""


class ConfigError(IsaError):
    """Hyperparameter or configuration value outside its legal range."""


class FormatError(IsaError):
    """Malformed tensor container or sidecar file."""


class DegenerateRowError(IsaError):
    """A query row ended up with an empty (fully masked) key set."""


class NumericError(IsaError):
    """A computation produced non-finite outputs."""
