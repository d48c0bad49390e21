"""Binary envelope of named blocks, used for checkpoints and fit exports.

Same magic as the dataset format, distinguished by the version field:
version 1 files are datasets, version 2 files are block envelopes.  Each
block is either a float64 column-major matrix or a UTF-8 text payload.
"""

from __future__ import annotations

import struct

import numpy as np

from .data import MAGIC
from .errors import DataFormatError

BLOCKS_VERSION = 2
_HEAD = struct.Struct("<4sII")
_MATRIX = 0
_TEXT = 1


def write_blocks(path, matrices=None, texts=None):
    matrices = matrices or {}
    texts = texts or {}
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, BLOCKS_VERSION, len(matrices) + len(texts)))
        for name, values in matrices.items():
            arr = np.asarray(values, dtype="<f8")
            if arr.ndim != 2:
                raise DataFormatError(f"block {name!r} must be a 2-D matrix")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<BH", _MATRIX, len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
            fh.write(np.asfortranarray(arr).tobytes(order="F"))
        for name, text in texts.items():
            encoded = name.encode("utf-8")
            payload = text.encode("utf-8")
            fh.write(struct.pack("<BH", _TEXT, len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


def read_blocks(path):
    """Returns (matrices, texts) dicts."""
    with open(path, "rb") as fh:
        raw = fh.read(_HEAD.size)
        if len(raw) != _HEAD.size:
            raise DataFormatError(f"{path}: truncated header")
        magic, version, n_blocks = _HEAD.unpack(raw)
        if magic != MAGIC:
            raise DataFormatError(f"{path}: bad magic {magic!r}")
        if version != BLOCKS_VERSION:
            raise DataFormatError(f"{path}: not a block envelope (version {version})")
        matrices, texts = {}, {}
        for _ in range(n_blocks):
            kind, name_len = struct.unpack("<BH", fh.read(3))
            name = fh.read(name_len).decode("utf-8")
            if kind == _MATRIX:
                rows, cols = struct.unpack("<II", fh.read(8))
                buf = fh.read(rows * cols * 8)
                if len(buf) != rows * cols * 8:
                    raise DataFormatError(f"{path}: truncated matrix block {name!r}")
                matrices[name] = (
                    np.frombuffer(buf, dtype="<f8").reshape((rows, cols), order="F").copy()
                )
            elif kind == _TEXT:
                (size,) = struct.unpack("<Q", fh.read(8))
                texts[name] = fh.read(size).decode("utf-8")
            else:
                raise DataFormatError(f"{path}: unknown block kind {kind}")
    return matrices, texts
