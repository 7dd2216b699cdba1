"""Binary netpbm (P5/P6) encoding with offset-aware parse errors."""
from __future__ import annotations

import numpy as np


class PNMError(ValueError):
    """Malformed netpbm data; ``offset`` is the byte position where parsing failed."""

    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


def encode(arr: np.ndarray, maxval: int) -> bytes:
    """Encode ``(H, W)`` as P5 or ``(H, W, 3)`` as P6; ``maxval > 255`` writes big-endian 16-bit."""
    arr = np.asarray(arr)
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode array of shape {arr.shape} as netpbm")
    if not 0 < maxval < 65536:
        raise ValueError(f"maxval must be in [1, 65535], got {maxval}")
    if arr.min(initial=0) < 0 or arr.max(initial=0) > maxval:
        raise ValueError(f"values must lie in [0, {maxval}]")
    dtype = ">u2" if maxval > 255 else "u1"
    header = b"%s\n%d %d\n%d\n" % (magic, arr.shape[1], arr.shape[0], maxval)
    return header + arr.astype(dtype).tobytes()


def decode(buf: bytes) -> np.ndarray:
    pos = 0
    tokens = []
    n = len(buf)
    while len(tokens) < 4:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PNMError("truncated netpbm header", pos)
        tokens.append((buf[start:pos], start))
    if pos >= n:
        raise PNMError("missing separator after netpbm header", pos)
    pos += 1
    magic, mo = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise PNMError(f"unsupported netpbm magic {magic!r}", mo)
    try:
        width, height, maxval = (int(t) for t, _ in tokens[1:])
    except ValueError:
        bad = next(o for t, o in tokens[1:] if not t.isdigit())
        raise PNMError("non-numeric netpbm header field", bad) from None
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise PNMError("invalid netpbm dimensions or maxval", tokens[1][1])
    chans = 3 if magic == b"P6" else 1
    itemsize = 2 if maxval > 255 else 1
    need = width * height * chans * itemsize
    if n - pos < need:
        raise PNMError(f"pixel data truncated: expected {need} bytes, found {n - pos}", n)
    data = np.frombuffer(buf, dtype=">u2" if itemsize == 2 else "u1", count=width * height * chans, offset=pos)
    if data.max(initial=0) > maxval:
        raise PNMError("pixel value exceeds maxval", pos)
    shape = (height, width, 3) if chans == 3 else (height, width)
    return data.reshape(shape).astype(np.uint16 if itemsize == 2 else np.uint8)
