"""Exception types shared across the package.

Everything derives from TwoTowerError so callers (the CLI, mainly) can
catch package failures in one clause; each class also keeps the builtin
parent that best matches how standard library code would classify it.
"""


class TwoTowerError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(TwoTowerError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(TwoTowerError, ArithmeticError):
    """A public numeric operation produced or received NaN/Inf entries."""


class DegenerateEmbeddingError(TwoTowerError, ArithmeticError):
    """A row to be projected onto the unit sphere has (near-)zero norm."""


class TapeError(TwoTowerError, RuntimeError):
    """An activation tape does not match the network/inputs it is used with."""


class ShardError(TwoTowerError, ValueError):
    """Invalid shard plan: bad axis, non-divisible dimension, or core count."""


class VarianceUnestimableError(TwoTowerError, RuntimeError):
    """Per-microbatch gradient variance requested with fewer than 2 replicas."""


class UpdateSequenceError(TwoTowerError, RuntimeError):
    """Fused moment updates arrived out of order or with inconsistent K."""


class ConfigError(TwoTowerError, ValueError):
    """A config document is malformed, incomplete, or inconsistent."""


class DivergenceError(TwoTowerError, RuntimeError):
    """Training aborted: loss became non-finite or blew past the guard."""


class CheckpointError(TwoTowerError, ValueError):
    """A checkpoint file is malformed or has an unsupported version."""
