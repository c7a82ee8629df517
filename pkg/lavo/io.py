"""Serialize model checkpoints to/from files on disk."""

import json
import os
import struct

import numpy as np

from . import settings
from . import utils
from ._errors import CheckpointFormatError
from ._errors import CorruptCheckpointError
from ._errors import UnsupportedVersionError

MAGIC = b"LAVO"

# magic, u32 format version, u64 header length, all little-endian
_PREAMBLE = struct.Struct("<4sIQ")


def _index_entry(name, entry):
    # [rows, cols, offset], all non-negative ints
    if not isinstance(entry, list) or len(entry) != 3:
        raise ValueError(f'tensor "{name}" index entry {entry!r} is not [rows, cols, offset]')
    if not all(isinstance(v, int) and not isinstance(v, bool) and v >= 0 for v in entry):
        raise ValueError(f'tensor "{name}" index entry {entry!r} holds a non-count value')
    return tuple(entry)


class Checkpoint:
    """
    A model configuration plus named float32 tensors.

    Parameters
    ----------
    config : dict
        JSON-serializable model configuration
    tensors : dict
        maps tensor name to a two-dimensional array; insertion order is the
        payload order
    """

    def __init__(self, config, tensors):
        """Create checkpoint."""
        self.config = dict(config)
        self.tensors = {
            name: np.ascontiguousarray(np.atleast_2d(t), dtype="<f4")
            for name, t in tensors.items()
        }

    def to_bytes(self):
        """
        Encode the checkpoint in its on-disk format.

        Returns
        -------
        data : bytes
        """
        index = {}
        offset = 0
        for name, tensor in self.tensors.items():
            rows, cols = tensor.shape
            index[name] = [rows, cols, offset]
            offset += rows * cols * 4

        header = json.dumps(
            {"config": self.config, "tensors": index}, sort_keys=True, separators=(",", ":")
        ).encode("utf-8")
        preamble = _PREAMBLE.pack(MAGIC, settings.checkpoint_version, len(header))
        payload = b"".join(t.tobytes() for t in self.tensors.values())
        return preamble + header + payload

    @classmethod
    def from_bytes(cls, data):
        """
        Decode a checkpoint from its on-disk format.

        Parameters
        ----------
        data : bytes

        Returns
        -------
        checkpoint : Checkpoint
        """
        if len(data) < 4 or data[:4] != MAGIC:
            raise CheckpointFormatError("not a lavo checkpoint (bad magic bytes)")
        if len(data) < _PREAMBLE.size:
            raise CorruptCheckpointError("checkpoint is truncated inside its preamble")
        _, version, header_len = _PREAMBLE.unpack_from(data)
        if version != settings.checkpoint_version:
            raise UnsupportedVersionError(
                f"checkpoint format version {version} is not supported "
                f"(expected {settings.checkpoint_version})"
            )

        start = _PREAMBLE.size
        if len(data) < start + header_len:
            raise CorruptCheckpointError("checkpoint is truncated inside its header")
        try:
            header = json.loads(data[start : start + header_len].decode("utf-8"))
            config, index = header["config"], header["tensors"]
            entries = [(name, *_index_entry(name, entry)) for name, entry in index.items()]
        except (UnicodeDecodeError, ValueError, KeyError, TypeError, AttributeError) as e:
            raise CorruptCheckpointError(f"checkpoint header is unreadable: {e}") from e

        payload = data[start + header_len :]
        expected = 0
        tensors = {}
        for name, rows, cols, offset in sorted(entries, key=lambda entry: entry[3]):
            if offset != expected:
                raise CorruptCheckpointError(f'tensor "{name}" overlaps or leaves a gap')
            size = rows * cols * 4
            expected = offset + size
            if expected > len(payload):
                raise CorruptCheckpointError(f'checkpoint is truncated inside tensor "{name}"')
            flat = np.frombuffer(payload, dtype="<f4", count=rows * cols, offset=offset)
            tensors[name] = flat.reshape(rows, cols)
        if expected != len(payload):
            raise CorruptCheckpointError(
                f"payload holds {len(payload)} bytes but the index describes {expected}"
            )

        # tensors were read in offset order, which is the writer's order
        return cls(config, tensors)


def save_checkpoint(checkpoint, filepath=None):
    """
    Save a checkpoint to disk.

    Parameters
    ----------
    checkpoint : Checkpoint
        the checkpoint to save
    filepath : string
        path to the file including extension. if None, use default data
        folder + model.lavo

    Returns
    -------
    filepath : string
        where the checkpoint was written
    """
    # default filepath if none was provided
    if filepath is None:
        filepath = os.path.join(settings.data_folder, "model.lavo")

    utils.make_folder(filepath)
    with open(filepath, "wb") as f:
        f.write(checkpoint.to_bytes())
    utils.log(f'Saved checkpoint with {len(checkpoint.tensors)} tensors at "{filepath}"')
    return filepath


def load_checkpoint(filepath):
    """
    Load a checkpoint from disk.

    Parameters
    ----------
    filepath : string
        path to the checkpoint file

    Returns
    -------
    checkpoint : Checkpoint
    """
    with open(filepath, "rb") as f:
        data = f.read()
    checkpoint = Checkpoint.from_bytes(data)
    utils.log(f'Loaded checkpoint with {len(checkpoint.tensors)} tensors from "{filepath}"')
    return checkpoint
