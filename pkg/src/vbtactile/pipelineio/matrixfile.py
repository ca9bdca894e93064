"""Binary container for conversion (H) and solve (K) matrices.

Layout, little-endian::

    magic     8 bytes   b"TAC3DH1\\0"
    version   uint32
    kind      4 bytes   b"H\\0\\0\\0" or b"K\\0\\0\\0"
    n         uint32    marker count N
    rows      uint32    marker grid rows
    cols      uint32    marker grid columns
    dtype     4 bytes   b"f64\\0"
    w         float64   regularisation weight (0 for H)
    geometry  16 bytes  ASCII geometry digest, zero padded
    payload   3N * 3N float64, row-major
    crc       uint32    CRC32 of every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from vbtactile.errors import IoFailure, ParseError, VersionMismatch

__all__ = ["MAGIC", "VERSION", "MatrixFile", "write_matrix", "read_matrix"]

MAGIC = b"TAC3DH1\0"
VERSION = 1
_HEAD = struct.Struct("<8sI4sIII4sd16s")


@dataclass(frozen=True)
class MatrixFile:
    matrix: np.ndarray
    kind: str = "H"
    rows: int = 0
    cols: int = 0
    w: float = 0.0
    geometry: str = ""

    @property
    def n_markers(self) -> int:
        return self.matrix.shape[0] // 3


def write_matrix(path, mf: MatrixFile):
    A = np.ascontiguousarray(mf.matrix, dtype="<f8")
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] % 3:
        raise ValueError(f"matrix must be 3N x 3N, got {A.shape}")
    if mf.kind not in ("H", "K"):
        raise ValueError("kind must be 'H' or 'K'")
    head = _HEAD.pack(MAGIC, VERSION, mf.kind.encode().ljust(4, b"\0"), A.shape[0] // 3, mf.rows, mf.cols,
                      b"f64\0", float(mf.w), mf.geometry.encode("ascii")[:16].ljust(16, b"\0"))
    body = head + A.tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(body + struct.pack("<I", zlib.crc32(body)))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_matrix(path) -> MatrixFile:
    """Parse and checksum a matrix file.

    Raises
    ------
    ParseError
        Bad magic, truncated payload or checksum mismatch.
    VersionMismatch
        Unsupported format version.
    """
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if len(data) < _HEAD.size + 4:
        raise ParseError("file shorter than header", field="header")
    magic, version, kind, n, rows, cols, dtype, w, geom = _HEAD.unpack_from(data)
    if magic != MAGIC:
        raise ParseError("bad magic", field="magic")
    if version != VERSION:
        raise VersionMismatch(f"matrix format version {version}, expected {VERSION}")
    if dtype != b"f64\0":
        raise ParseError(f"unsupported dtype {dtype!r}", field="dtype")
    size = (3 * n) ** 2 * 8
    if len(data) != _HEAD.size + size + 4:
        raise ParseError(f"payload has {len(data) - _HEAD.size - 4} bytes, expected {size}", field="payload")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if crc != zlib.crc32(data[:-4]):
        raise ParseError("checksum mismatch", field="crc")
    A = np.frombuffer(data, dtype="<f8", count=(3 * n) ** 2, offset=_HEAD.size).reshape(3 * n, 3 * n)
    return MatrixFile(A.astype(float), kind.rstrip(b"\0").decode(), rows, cols, w,
                      geom.rstrip(b"\0").decode("ascii"))
