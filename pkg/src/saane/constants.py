"""Constants for SAANE."""

from __future__ import annotations

from pathlib import Path
from typing import Tuple, Union

from typing_extensions import Literal, TypeAlias

__all__ = [
    "PathHint",
    "Modality",
    "DEFAULT_SPP_LEVELS",
    "SPATIAL_KERNEL_SIZE",
    "FEATURES_MAGIC",
    "FEATURES_VERSION",
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
    "EXIT_USAGE",
    "EXIT_DATA",
    "EXIT_CHECK",
    "GRADCHECK_TOLERANCE",
]

#: A type hint for paths accepted by readers and writers
PathHint: TypeAlias = Union[str, Path]

#: A type hint for the two input streams, appearance (``a``) and semantic (``s``)
Modality: TypeAlias = Literal["a", "s"]

#: Pyramid grid sizes giving 30 bins per channel
DEFAULT_SPP_LEVELS: Tuple[int, ...] = (4, 3, 2, 1)

#: Side length of the spatial attention filters
SPATIAL_KERNEL_SIZE = 7

#: Leading bytes of a feature (and embedding) container
FEATURES_MAGIC = b"SAFM"
FEATURES_VERSION = 1

#: Leading bytes of a checkpoint
CHECKPOINT_MAGIC = b"SACK"
CHECKPOINT_VERSION = 1

#: Exit code for command line usage errors
EXIT_USAGE = 1
#: Exit code for unreadable or inconsistent data
EXIT_DATA = 2
#: Exit code for a failed numerical check
EXIT_CHECK = 3

#: The gradient check fails at or above this relative error
GRADCHECK_TOLERANCE = 1e-4
