"""File formats: PDIT tensor dumps and binary PGM images.

PDIT layout (all integers little-endian):
    bytes 0..3   magic "PDIT"
    bytes 4..7   version (u32, currently 1)
    bytes 8..11  rank (u32)
    bytes 12..15 reserved (u32, zero)
    then rank extents as u32, then the payload as little-endian float64
    in row-major order.

PGM files are the binary "P5" flavour with maxval 255; on import any
nonzero pixel counts as foreground.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"PDIT"
VERSION = 1


def tensor_to_bytes(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype=np.float64)
    header = MAGIC + struct.pack("<III", VERSION, a.ndim, 0)
    extents = struct.pack(f"<{a.ndim}I", *a.shape) if a.ndim else b""
    payload = a.astype("<f8").tobytes()
    return header + extents + payload


def tensor_from_bytes(data: bytes) -> np.ndarray:
    if len(data) < 16 or data[:4] != MAGIC:
        raise ValueError("not a PDIT tensor file (bad magic)")
    version, rank, _reserved = struct.unpack("<III", data[4:16])
    if version != VERSION:
        raise ValueError(f"unsupported PDIT version {version}")
    offset = 16 + 4 * rank
    shape = struct.unpack(f"<{rank}I", data[16:offset]) if rank else ()
    count = int(np.prod(shape)) if rank else 1
    expected = offset + 8 * count
    if len(data) != expected:
        raise ValueError(f"PDIT payload size mismatch: {len(data)} != {expected}")
    flat = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
    return flat.astype(np.float64).reshape(shape)


def write_tensor(path, a: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(tensor_to_bytes(a))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return tensor_from_bytes(f.read())


def pgm_to_bytes(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError("PGM export needs a 2-D array")
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def pgm_from_bytes(data: bytes) -> np.ndarray:
    # Header: "P5", whitespace/comment-separated width, height, maxval.
    if not data.startswith(b"P5"):
        raise ValueError("not a binary PGM (P5) file")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"PGM maxval must be 255, got {maxval}")
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    return pixels.reshape(h, w).copy()


def write_pgm(path, img: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(pgm_to_bytes(img))


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        return pgm_from_bytes(f.read())
