"""Binary netpbm I/O: P6 color images and P5 label maps (maxval 255)."""

from __future__ import annotations

import numpy as np

from .errors import DataError, FormatError

_WHITESPACE = b" \t\r\n"


def write_ppm(path, image) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise FormatError(f"{path}: P6 needs uint8 HxWx3 data, "
                          f"got {image.dtype} {image.shape}")
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def write_pgm(path, gray) -> None:
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise FormatError(f"{path}: P5 needs uint8 HxW data, "
                          f"got {gray.dtype} {gray.shape}")
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


class _Scanner:
    def __init__(self, path):
        self.path = path
        try:
            with open(path, "rb") as fh:
                self.data = fh.read()
        except OSError as exc:
            raise DataError(f"cannot read {path}: {exc.strerror}") from None
        self.offset = 0

    def fail(self, message, at=None):
        at = self.offset if at is None else at
        raise FormatError(f"{self.path}: {message} at byte {at}")

    def token(self):
        """Next whitespace-delimited token, skipping # comments."""
        while self.offset < len(self.data):
            byte = self.data[self.offset:self.offset + 1]
            if byte in (b"#",):
                end = self.data.find(b"\n", self.offset)
                if end < 0:
                    self.fail("unterminated comment")
                self.offset = end + 1
            elif byte in _WHITESPACE:
                self.offset += 1
            else:
                break
        if self.offset >= len(self.data):
            self.fail("unexpected end of header")
        start = self.offset
        while (self.offset < len(self.data)
               and self.data[self.offset:self.offset + 1] not in _WHITESPACE):
            self.offset += 1
        return self.data[start:self.offset], start

    def integer(self, what):
        tok, at = self.token()
        self.last_token_at = at
        try:
            value = int(tok)
        except ValueError:
            self.fail(f"{what} is not an integer ({tok!r})", at=at)
        if value <= 0:
            self.fail(f"{what} must be positive, got {value}", at=at)
        return value


def _read_netpbm(path, magic, channels):
    s = _Scanner(path)
    tok, at = s.token()
    if tok != magic:
        s.fail(f"bad magic {tok!r}, expected {magic.decode()!r}", at=at)
    w = s.integer("width")
    h = s.integer("height")
    maxval = s.integer("maxval")
    if maxval != 255:
        s.fail(f"unsupported maxval {maxval}", at=s.last_token_at)
    if s.offset >= len(s.data) or s.data[s.offset:s.offset + 1] not in _WHITESPACE:
        s.fail("missing whitespace before pixel data")
    s.offset += 1
    need = w * h * channels
    if len(s.data) - s.offset < need:
        s.fail(f"pixel data truncated (needed {need} bytes, "
               f"have {len(s.data) - s.offset})")
    if len(s.data) - s.offset > need:
        s.fail(f"{len(s.data) - s.offset - need} trailing bytes",
               at=s.offset + need)
    flat = np.frombuffer(s.data, dtype=np.uint8, count=need, offset=s.offset)
    shape = (h, w, channels) if channels > 1 else (h, w)
    return flat.reshape(shape).copy()


def read_ppm(path):
    return _read_netpbm(path, b"P6", 3)


def read_pgm(path):
    return _read_netpbm(path, b"P5", 1)
