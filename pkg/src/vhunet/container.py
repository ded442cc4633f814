"""Binary tensor container and PGM preview writer.

Container layout (all integers little-endian):
  magic "VHUT", version u8 = 1, entry count u32, then per entry:
  name length u16, UTF-8 name bytes, ndim u8, ndim x u32 extents,
  row-major float64 payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

_MAGIC = b"VHUT"
_VERSION = 1


def write_vhut(path, entries) -> None:
    """Write named float64 arrays; ``entries`` is a dict or (name, array) pairs."""
    items = list(entries.items()) if isinstance(entries, dict) else list(entries)
    chunks = [_MAGIC, struct.pack("<B", _VERSION), struct.pack("<I", len(items))]
    seen = set()
    for name, arr in items:
        if name in seen:
            raise DataError(f"duplicate tensor name '{name}'")
        seen.add(name)
        # not ascontiguousarray: that would silently promote 0-d to 1-d
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise DataError(f"tensor name too long ({len(raw)} bytes)")
        if arr.ndim > 0xFF:
            raise DataError(f"tensor '{name}' has too many dimensions ({arr.ndim})")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        for extent in arr.shape:
            chunks.append(struct.pack("<I", extent))
        chunks.append(arr.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_vhut(path) -> dict:
    """Read a container back into an ordered name -> float64 array dict."""
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read container {path}: {e}") from e
    view = memoryview(blob)
    pos = 0

    def need(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise DataError(f"truncated container {path} at byte {pos}")
        piece = view[pos:pos + n]
        pos += n
        return piece

    if bytes(need(4)) != _MAGIC:
        raise DataError(f"{path} is not a tensor container (bad magic)")
    version = need(1)[0]
    if version != _VERSION:
        raise DataError(f"unsupported container version {version} in {path}")
    (count,) = struct.unpack("<I", need(4))
    out: dict = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", need(2))
        name = bytes(need(name_len)).decode("utf-8")
        if name in out:
            raise DataError(f"duplicate tensor name '{name}' in {path}")
        ndim = need(1)[0]
        shape = struct.unpack(f"<{ndim}I", need(4 * ndim)) if ndim else ()
        n_items = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        payload = need(8 * n_items)
        arr = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
        out[name] = arr
    if pos != len(view):
        raise DataError(f"{len(view) - pos} trailing bytes in container {path}")
    return out


def write_pgm(path, image: np.ndarray) -> None:
    """16-bit binary PGM preview; intensities min-max mapped onto [0, 65535]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2:
        raise DataError(f"PGM preview needs a single 2D image, got shape {img.shape}")
    lo, hi = float(img.min()), float(img.max())
    if hi > lo:
        scaled = (img - lo) / (hi - lo) * 65535.0
    else:
        scaled = np.zeros_like(img)
    pixels = np.round(scaled).astype(">u2")
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode("ascii")
    Path(path).write_bytes(header + pixels.tobytes())
