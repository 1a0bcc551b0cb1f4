"""Binary containers for feature maps, embeddings, and checkpoints, plus run manifests.

All numbers are little-endian and reals are 32-bit on disk.

Feature container::

    "SAFM" | version u16 | count u32 | count x record
    record: frame_id u32 | class_id u32 | condition_id u32 | appearance block | semantic block
    block:  C u32 | H u32 | W u32 | C*H*W float32, channel-major then row-major

Embeddings use the same container with the embedding as a ``len x 1 x 1``
appearance block and an empty ``0 x 1 x 1`` semantic block.

Checkpoint::

    "SACK" | version u16 | manifest length u32 | manifest (UTF-8 JSON) | count u32 | count x parameter
    parameter: name length u16 | name (UTF-8) | rank u8 | rank x extent u32 | float32 values
"""

from __future__ import annotations

import csv
import logging
import os
import struct
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from .config import RunConfig
from .constants import (
    CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
    FEATURES_MAGIC,
    FEATURES_VERSION,
    PathHint,
)
from .head import Embedding
from .network import SAANE, ArchitectureMismatchError
from .version import get_version

if TYPE_CHECKING:
    from .trainer import EpochStatistics

__all__ = [
    "FormatError",
    "FeatureRecord",
    "CheckpointManifest",
    "RunManifest",
    "atomic_write",
    "write_features",
    "read_features",
    "write_embeddings",
    "read_embeddings",
    "write_checkpoint",
    "read_checkpoint",
    "save_model",
    "load_model",
    "write_manifest",
    "manifest_path",
    "write_epoch_log",
]

logger = logging.getLogger(__name__)

_FLOAT = np.dtype("<f4")


class FormatError(ValueError):
    """Raised when a file does not follow its binary layout."""

    def __init__(self, message: str, offset: int):
        """Initialize the error with the byte offset where reading failed."""
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class FeatureRecord:
    """The appearance and semantic feature maps of one frame."""

    frame_id: int
    class_id: int
    condition_id: int
    appearance: np.ndarray
    semantic: np.ndarray

    def __post_init__(self) -> None:
        if self.appearance.ndim != 3 or self.semantic.ndim != 3:
            raise ValueError(
                f"frame {self.frame_id}: maps must be C x H x W, got shapes "
                f"{self.appearance.shape} and {self.semantic.shape}"
            )
        if self.appearance.shape[1:] != self.semantic.shape[1:]:
            raise ValueError(
                f"frame {self.frame_id}: appearance map {self.appearance.shape} and semantic map "
                f"{self.semantic.shape} must share H x W"
            )


@contextmanager
def atomic_write(path: PathHint, mode: str = "wb") -> Iterator:
    """Open a temporary file next to ``path`` and move it into place on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    kwargs = {} if "b" in mode else {"encoding": "utf-8", "newline": ""}
    handle = tempfile.NamedTemporaryFile(
        mode, dir=path.parent, prefix=f".{path.name}.", suffix=".tmp", delete=False, **kwargs
    )
    try:
        with handle:
            yield handle
        os.replace(handle.name, path)
    except BaseException:
        Path(handle.name).unlink(missing_ok=True)
        raise


def _pack_block(array: np.ndarray) -> bytes:
    c, h, w = array.shape
    return struct.pack("<III", c, h, w) + np.ascontiguousarray(array, dtype=_FLOAT).tobytes()


def write_features(records: Sequence[FeatureRecord], path: PathHint) -> None:
    """Write feature records to a container file.

    :raises ValueError: if two records share a frame identifier or an identifier is negative
    """
    seen = set()
    for record in records:
        for value in (record.frame_id, record.class_id, record.condition_id):
            if not 0 <= value < 2**32:
                raise ValueError(
                    f"identifier {value} of frame {record.frame_id} does not fit in 32 unsigned bits"
                )
        if record.frame_id in seen:
            raise ValueError(f"duplicate frame identifier {record.frame_id}")
        seen.add(record.frame_id)
    with atomic_write(path) as file:
        file.write(FEATURES_MAGIC + struct.pack("<HI", FEATURES_VERSION, len(records)))
        for record in records:
            file.write(struct.pack("<III", record.frame_id, record.class_id, record.condition_id))
            file.write(_pack_block(record.appearance))
            file.write(_pack_block(record.semantic))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise FormatError(
                f"truncated file: needed {n} bytes for {what}, {len(self.data) - self.offset} left",
                self.offset,
            )
        rv = self.data[self.offset : self.offset + n]
        self.offset += n
        return rv

    def unpack(self, fmt: str, what: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def block(self, what: str) -> np.ndarray:
        c, h, w = self.unpack("<III", f"{what} header")
        values = self.take(4 * c * h * w, f"{what} values")
        return np.frombuffer(values, dtype=_FLOAT).astype(np.float32).reshape(c, h, w)

    def header(self, magic: bytes, version: int, what: str) -> None:
        found = self.take(len(magic), "magic")
        if found != magic:
            raise FormatError(f"not a {what}: expected magic {magic!r}, found {found!r}", 0)
        (found_version,) = self.unpack("<H", "format version")
        if found_version != version:
            raise FormatError(
                f"unsupported {what} version {found_version} (expected {version})", len(magic)
            )


def read_features(path: PathHint) -> List[FeatureRecord]:
    """Read feature records from a container file.

    :raises FormatError: on bad magic, an unsupported version, or truncation
    """
    reader = _Reader(Path(path).read_bytes())
    reader.header(FEATURES_MAGIC, FEATURES_VERSION, "feature file")
    (count,) = reader.unpack("<I", "record count")
    rv = []
    for i in range(count):
        frame_id, class_id, condition_id = reader.unpack("<III", f"record {i} identifiers")
        start = reader.offset
        appearance = reader.block(f"record {i} appearance map")
        semantic = reader.block(f"record {i} semantic map")
        try:
            rv.append(FeatureRecord(frame_id, class_id, condition_id, appearance, semantic))
        except ValueError as e:
            raise FormatError(str(e), start) from e
    if reader.offset != len(reader.data):
        raise FormatError(f"{len(reader.data) - reader.offset} unexpected trailing bytes", reader.offset)
    return rv


def write_embeddings(
    embeddings: Sequence[Embedding],
    path: PathHint,
    *,
    class_ids: Optional[Sequence[int]] = None,
    condition_ids: Optional[Sequence[int]] = None,
) -> None:
    """Write embeddings, keyed by their source frame, to a container file."""
    records = [
        FeatureRecord(
            frame_id=embedding.source_id,
            class_id=0 if class_ids is None else class_ids[i],
            condition_id=0 if condition_ids is None else condition_ids[i],
            appearance=np.asarray(embedding.values, dtype=np.float32).reshape(-1, 1, 1),
            semantic=np.zeros((0, 1, 1), dtype=np.float32),
        )
        for i, embedding in enumerate(embeddings)
    ]
    write_features(records, path)


def read_embeddings(path: PathHint) -> List[Embedding]:
    """Read embeddings from a container file.

    :raises FormatError: if the file is malformed or holds feature maps rather than embeddings
    """
    rv = []
    offset = len(FEATURES_MAGIC) + struct.calcsize("<HI")
    for record in read_features(path):
        appearance_offset = offset + struct.calcsize("<III")
        if record.appearance.shape[1:] != (1, 1):
            raise FormatError(
                f"frame {record.frame_id} holds a {record.appearance.shape} map, not an embedding",
                appearance_offset,
            )
        rv.append(Embedding(values=record.appearance.reshape(-1), source_id=record.frame_id))
        offset = appearance_offset + 2 * struct.calcsize("<III")
        offset += _FLOAT.itemsize * (record.appearance.size + record.semantic.size)
    return rv


class CheckpointManifest(BaseModel):
    """The header of a checkpoint."""

    format_version: int = CHECKPOINT_VERSION
    config: RunConfig
    config_digest: str
    architecture_digest: str
    step: int = Field(0, ge=0, description="The number of optimizer steps taken")
    seed: int
    package_version: str = Field(default_factory=get_version)


def write_checkpoint(
    path: PathHint, manifest: CheckpointManifest, state: Mapping[str, np.ndarray]
) -> None:
    """Write a manifest and named parameter values to a checkpoint file."""
    header = manifest.model_dump_json().encode("utf-8")
    with atomic_write(path) as file:
        file.write(CHECKPOINT_MAGIC + struct.pack("<HI", CHECKPOINT_VERSION, len(header)))
        file.write(header)
        file.write(struct.pack("<I", len(state)))
        for name, values in state.items():
            encoded = name.encode("utf-8")
            values = np.asarray(values)
            file.write(struct.pack("<H", len(encoded)) + encoded)
            file.write(struct.pack(f"<B{values.ndim}I", values.ndim, *values.shape))
            file.write(np.ascontiguousarray(values, dtype=_FLOAT).tobytes())


def read_checkpoint(path: PathHint) -> Tuple[CheckpointManifest, Dict[str, np.ndarray]]:
    """Read a checkpoint file.

    :raises FormatError: on bad magic, an unsupported version, truncation, or a bad manifest
    """
    reader = _Reader(Path(path).read_bytes())
    reader.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, "checkpoint")
    (length,) = reader.unpack("<I", "manifest length")
    start = reader.offset
    try:
        manifest = CheckpointManifest.model_validate_json(reader.take(length, "manifest"))
    except ValueError as e:
        if isinstance(e, FormatError):
            raise
        raise FormatError(f"invalid checkpoint manifest: {e}", start) from e
    (count,) = reader.unpack("<I", "parameter count")
    state: Dict[str, np.ndarray] = {}
    for i in range(count):
        (name_length,) = reader.unpack("<H", f"parameter {i} name length")
        name = reader.take(name_length, f"parameter {i} name").decode("utf-8")
        (rank,) = reader.unpack("<B", f"{name} rank")
        shape = reader.unpack(f"<{rank}I", f"{name} shape")
        size = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(reader.take(4 * size, f"{name} values"), dtype=_FLOAT)
        state[name] = values.astype(np.float32).reshape(shape)
    if reader.offset != len(reader.data):
        raise FormatError(f"{len(reader.data) - reader.offset} unexpected trailing bytes", reader.offset)
    return manifest, state


def save_model(model: SAANE, path: PathHint, step: int = 0) -> CheckpointManifest:
    """Write a model's configuration and parameters to a checkpoint."""
    manifest = CheckpointManifest(
        config=model.config,
        config_digest=model.config.digest(),
        architecture_digest=model.architecture_digest(),
        step=step,
        seed=model.config.seed,
    )
    write_checkpoint(path, manifest, model.state_dict())
    return manifest


def load_model(
    path: PathHint, config: Optional[RunConfig] = None, *, dtype=np.float32
) -> Tuple[SAANE, CheckpointManifest]:
    """Rebuild a model from a checkpoint.

    :param path: The checkpoint file
    :param config: A configuration to build the model from instead of the stored one.
        It may differ from the stored one only in settings that leave the
        parameter census unchanged.
    :param dtype: The real type of the rebuilt parameters
    :raises ArchitectureMismatchError: if ``config`` implies a different parameter census
    """
    manifest, state = read_checkpoint(path)
    if config is None:
        config = manifest.config
    model = SAANE(config, rng=np.random.default_rng(config.seed), dtype=dtype)
    if config.digest() != manifest.config_digest:
        if model.architecture_digest() != manifest.architecture_digest:
            raise ArchitectureMismatchError(
                f"configuration {config.digest()[:12]} builds a different network than the one "
                f"stored in {path} (configuration {manifest.config_digest[:12]})"
            )
        logger.warning("configuration differs from the one stored in %s; parameters still fit", path)
    model.load_state_dict(state)
    return model, manifest


class RunManifest(BaseModel):
    """Everything needed to reproduce one command line run."""

    command: str
    package_version: str = Field(default_factory=get_version)
    seed: Optional[int] = None
    config_digest: Optional[str] = None
    config: Optional[RunConfig] = None
    format_versions: Dict[str, int] = Field(
        default_factory=lambda: {"features": FEATURES_VERSION, "checkpoint": CHECKPOINT_VERSION}
    )
    inputs: Dict[str, str] = Field(default_factory=dict)
    outputs: Dict[str, str] = Field(default_factory=dict)
    parameters: Dict[str, object] = Field(default_factory=dict)


def write_manifest(manifest: RunManifest, path: PathHint) -> None:
    """Write a run manifest as indented JSON."""
    with atomic_write(path, "w") as file:
        file.write(manifest.model_dump_json(indent=2))
        file.write("\n")


def manifest_path(output: PathHint) -> Path:
    """Get where the manifest for an output file or directory goes."""
    output = Path(output)
    if output.is_dir():
        return output.joinpath("manifest.json")
    return output.with_name(output.name + ".manifest.json")


def write_epoch_log(rows: Sequence["EpochStatistics"], path: PathHint) -> None:
    """Write one CSV row per epoch: epoch, mean_loss, active_triplet_fraction, wall_seconds."""
    with atomic_write(path, "w") as file:
        writer = csv.writer(file, lineterminator="\n")
        writer.writerow(["epoch", "mean_loss", "active_triplet_fraction", "wall_seconds"])
        for row in rows:
            writer.writerow(
                [
                    row.epoch,
                    f"{row.mean_loss:.6f}",
                    f"{row.active_triplet_fraction:.6f}",
                    f"{row.wall_seconds:.3f}",
                ]
            )
