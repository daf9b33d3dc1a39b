"""Exception types raised across the package."""


class PdcError(Exception):
    """Base class for all package errors."""


class ShapeError(PdcError, ValueError):
    """Array extents are inconsistent with an operation."""


class StateError(PdcError, RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""


class NoMassError(PdcError, ValueError):
    def __init__(self, joint):
        super().__init__(f"response map for joint {joint} has no mass (all zero)")
        self.joint = joint


class DegeneratePartError(PdcError, ValueError):
    def __init__(self, part, box):
        super().__init__(f"part {part} has a degenerate box after clamping: {box}")
        self.part = part
        self.box = box


class ConfigError(PdcError, ValueError):
    """Invalid or unknown configuration."""


class ProtocolError(PdcError, ValueError):
    """An evaluation or split protocol cannot be satisfied."""


class NumericError(PdcError, FloatingPointError):
    """Non-finite values appeared during training."""


class CheckpointError(PdcError, ValueError):
    """A checkpoint is malformed or incompatible with the model."""
