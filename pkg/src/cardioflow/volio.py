"""VOLF3D volume/flow file format and dataset manifests.

A VOLF3D file is a single text header line

    VOLF3D v1 <dx> <dy> <dz> <channels>\n

followed by channels*dx*dy*dz little-endian 32-bit floats, channel-major
with the last spatial axis varying fastest.  Manifests list one relative
(es, ed, flow) path triple per line, tab-separated, with ``#`` comments.
"""

from __future__ import annotations

import os
from typing import List, Tuple

import numpy as np

from .errors import FormatError

_MAGIC = "VOLF3D"
_VERSION = "v1"


def write_volume(path, values: np.ndarray) -> None:
    """Write (d, h, w) or (c, d, h, w) float data; 3-D input is one channel."""
    arr = np.asarray(values, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise FormatError(f"cannot serialize array of shape {values.shape}")
    c, dx, dy, dz = arr.shape
    header = f"{_MAGIC} {_VERSION} {dx} {dy} {dz} {c}\n"
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    os.replace(tmp, path)


def read_volume(path) -> np.ndarray:
    """Read a VOLF3D file as (c, dx, dy, dz) float32."""
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").strip()
        parts = header.split()
        if len(parts) != 6 or parts[0] != _MAGIC:
            raise FormatError(f"{path}: not a VOLF3D file (header {header!r})")
        if parts[1] != _VERSION:
            raise FormatError(f"{path}: unsupported VOLF3D version {parts[1]!r}")
        try:
            dx, dy, dz, c = (int(p) for p in parts[2:])
        except ValueError:
            raise FormatError(f"{path}: malformed header {header!r}") from None
        count = c * dx * dy * dz
        payload = fh.read(count * 4)
        if len(payload) != count * 4:
            raise FormatError(f"{path}: expected {count * 4} payload bytes, found {len(payload)}")
        return np.frombuffer(payload, dtype="<f4").reshape(c, dx, dy, dz).copy()


def write_manifest(path, triples: List[Tuple[str, str, str]], comments: List[str] = ()) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        for es, ed, flow in triples:
            fh.write(f"{es}\t{ed}\t{flow}\n")
    os.replace(tmp, path)


def read_manifest(path) -> List[Tuple[str, str, str]]:
    triples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 tab-separated paths, got {len(fields)}")
            triples.append((fields[0], fields[1], fields[2]))
    return triples
