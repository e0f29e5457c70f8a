"""On-disk formats: binary matrices, key/value text files, atomic writes.

Binary matrix layout (all little-endian)::

    8 bytes   magic  b"ADVMAT01"
    uint64    rows
    uint64    cols
    float64   rows*cols values, row-major

Vectors are stored as 1 x n matrices.
"""

import hashlib
import io
import os
import struct
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .errors import ParseError

MAGIC = b"ADVMAT01"
_DIMS = struct.Struct("<QQ")


def write_matrix(stream, array):
    a = np.asarray(array, dtype="<f8")
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ValueError(f"expected a 1-D or 2-D array, got shape {a.shape}")
    stream.write(MAGIC)
    stream.write(_DIMS.pack(*a.shape))
    stream.write(np.ascontiguousarray(a).tobytes(order="C"))


def read_matrix(stream):
    magic = stream.read(len(MAGIC))
    if magic != MAGIC:
        raise ParseError(f"bad matrix magic {magic!r}")
    header = stream.read(_DIMS.size)
    if len(header) != _DIMS.size:
        raise ParseError("truncated matrix header")
    rows, cols = _DIMS.unpack(header)
    nbytes = rows * cols * 8
    payload = stream.read(nbytes)
    if len(payload) != nbytes:
        raise ParseError(f"truncated matrix payload: expected {nbytes} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f8").reshape(rows, cols).astype(np.float64)


def save_matrix(path, array):
    with atomic_write(path, "wb") as fh:
        write_matrix(fh, array)


def load_matrix(path):
    with open(path, "rb") as fh:
        return read_matrix(fh)


def format_kv(items):
    """Render an ordered mapping as ``key=value`` lines."""
    lines = []
    for key, value in items.items():
        key = str(key)
        value = _kv_value(value)
        if "=" in key or "\n" in key or not key.strip():
            raise ValueError(f"invalid key {key!r}")
        if "\n" in value:
            raise ValueError(f"value for {key!r} contains a newline")
        lines.append(f"{key}={value}\n")
    return "".join(lines)


def _kv_value(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(_kv_value(v) for v in value)
    return str(value)


def parse_kv(text):
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    items = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"expected key=value, got {raw!r}", line=lineno)
        key, value = line.split("=", 1)
        items[key.strip()] = value.strip()
    return items


def read_kv(path):
    return parse_kv(Path(path).read_text(encoding="utf-8"))


def write_kv(path, items, header=None):
    text = format_kv(items)
    if header:
        text = "".join(f"# {h}\n" for h in header.splitlines()) + text
    with atomic_write(path, "w") as fh:
        fh.write(text)


@contextmanager
def atomic_write(path, mode="w"):
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        kwargs = {"encoding": "utf-8", "newline": ""} if "b" not in mode else {}
        with os.fdopen(fd, mode, **kwargs) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def sha256_file(path, chunk=1 << 20):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        while block := fh.read(chunk):
            h.update(block)
    return h.hexdigest()


def sha256_arrays(*arrays):
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(np.asarray(a, dtype="<f8"))
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def matrix_bytes(array):
    buf = io.BytesIO()
    write_matrix(buf, array)
    return buf.getvalue()
