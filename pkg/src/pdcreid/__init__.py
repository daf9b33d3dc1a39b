"""Pose-driven deep convolutional person re-identification on numpy."""
from .errors import (CheckpointError, ConfigError, DegeneratePartError, NoMassError, NumericError,
                     PdcError, ProtocolError, ShapeError, StateError)
from .kernels import BACKEND

__version__ = "0.1.0"
