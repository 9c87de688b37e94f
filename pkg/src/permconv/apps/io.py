"""Binary tensor and kernel files plus 8-bit PGM/PPM images.

Tensor file layout (little-endian)::

    b"PHLT" | u16 version | u16 rank | rank x u64 dims | prod(dims) x f64

Kernel checkpoint layout (little-endian)::

    b"PHLK" | u16 version | u16 d | u16 s | u16 reserved | u32 c_in | u32 c_out
    | d x f64 scales | embedded tensor file holding the c_out x c_in x t weights
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..filterops import PermutohedralKernel
from ..lattice import filter_size

TENSOR_MAGIC = b"PHLT"
KERNEL_MAGIC = b"PHLK"
VERSION = 1


class FormatError(ValueError):
    """Malformed file; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def _read_exact(buf: bytes, pos: int, size: int, what: str) -> bytes:
    if pos + size > len(buf):
        raise FormatError(f"truncated {what}: need {size} bytes, {len(buf) - pos} left", pos)
    return buf[pos:pos + size]


def encode_tensor(array) -> bytes:
    a = np.asarray(array, dtype="<f8")
    head = TENSOR_MAGIC + struct.pack("<HH", VERSION, a.ndim)
    head += struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes(order="C")


def decode_tensor(buf: bytes, pos: int = 0) -> tuple[np.ndarray, int]:
    """Parse one tensor starting at ``pos``; returns (array, end position)."""
    magic = _read_exact(buf, pos, 4, "magic")
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}", pos)
    version, rank = struct.unpack("<HH", _read_exact(buf, pos + 4, 4, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported tensor version {version}", pos + 4)
    p = pos + 8
    dims = struct.unpack(f"<{rank}Q", _read_exact(buf, p, 8 * rank, "dims"))
    p += 8 * rank
    count = 1
    for k in dims:
        count *= k
    payload = _read_exact(buf, p, 8 * count, "payload")
    array = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
    return array, p + 8 * count


def write_tensor(path, array) -> None:
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    array, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after tensor payload", end)
    return array


@dataclass
class KernelCheckpoint:
    kernel: PermutohedralKernel
    scales: np.ndarray

    def __post_init__(self):
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(-1)
        if self.scales.size != self.kernel.d:
            raise ValueError(f"{self.scales.size} scales for a d={self.kernel.d} kernel")

    def encode(self) -> bytes:
        k = self.kernel
        head = KERNEL_MAGIC + struct.pack("<HHHHII", VERSION, k.d, k.s, 0, k.c_in, k.c_out)
        head += self.scales.astype("<f8").tobytes()
        return head + encode_tensor(k.weights)

    @classmethod
    def decode(cls, buf: bytes) -> "KernelCheckpoint":
        magic = _read_exact(buf, 0, 4, "magic")
        if magic != KERNEL_MAGIC:
            raise FormatError(f"bad kernel magic {magic!r}", 0)
        version, d, s, _, c_in, c_out = struct.unpack("<HHHHII", _read_exact(buf, 4, 16, "header"))
        if version != VERSION:
            raise FormatError(f"unsupported kernel version {version}", 4)
        if d < 1:
            raise FormatError("kernel dimension must be >= 1", 6)
        pos = 20
        scales = np.frombuffer(_read_exact(buf, pos, 8 * d, "scales"), dtype="<f8").astype(np.float64)
        pos += 8 * d
        weights, end = decode_tensor(buf, pos)
        expected = (c_out, c_in, filter_size(d, s))
        if weights.shape != expected:
            raise FormatError(f"weight tensor {weights.shape} does not match header {expected}", pos)
        if end != len(buf):
            raise FormatError(f"{len(buf) - end} trailing bytes after weights", end)
        return cls(PermutohedralKernel(d, s, weights), scales)


def write_checkpoint(path, kernel: PermutohedralKernel, scales) -> None:
    Path(path).write_bytes(KernelCheckpoint(kernel, scales).encode())


def read_checkpoint(path) -> KernelCheckpoint:
    return KernelCheckpoint.decode(Path(path).read_bytes())


def _pnm_tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    """Read ``count`` whitespace-separated integers after the magic, skipping comments."""
    pos, out = 2, []
    while len(out) < count:
        if pos >= len(buf):
            raise FormatError("truncated image header", pos)
        c = buf[pos:pos + 1]
        if c.isspace():
            pos += 1
        elif c == b"#":
            nl = buf.find(b"\n", pos)
            pos = len(buf) if nl < 0 else nl + 1
        else:
            start = pos
            while pos < len(buf) and buf[pos:pos + 1].isdigit():
                pos += 1
            if start == pos:
                raise FormatError(f"unexpected byte {c!r} in image header", start)
            out.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError("header must end with one whitespace byte", pos)
    return out, pos + 1


def decode_image(buf: bytes) -> np.ndarray:
    """Binary PGM (P5) or PPM (P6), 8-bit, as floats in [0, 1].

    Gray images come back as H x W, color as H x W x 3.
    """
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported image magic {magic!r}", 0)
    (w, h, maxval), pos = _pnm_tokens(buf, 3)
    if not 0 < maxval < 256:
        raise FormatError(f"only 8-bit images are supported (maxval {maxval})", pos - 1)
    ch = 1 if magic == b"P5" else 3
    data = _read_exact(buf, pos, w * h * ch, "pixel data")
    img = np.frombuffer(data, dtype=np.uint8).astype(np.float64) / maxval
    return img.reshape(h, w) if ch == 1 else img.reshape(h, w, 3)


def encode_image(img) -> bytes:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    if a.ndim == 2:
        magic = b"P5"
    elif a.ndim == 3 and a.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot store an image of shape {a.shape}")
    q = np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)
    head = b"%s\n%d %d\n255\n" % (magic, a.shape[1], a.shape[0])
    return head + q.tobytes()


def read_image(path) -> np.ndarray:
    try:
        return decode_image(Path(path).read_bytes())
    except FormatError as exc:
        raise FormatError(f"{path}: {exc.args[0].rsplit(' (at byte', 1)[0]}", exc.offset) from None


def write_image(path, img) -> None:
    Path(path).write_bytes(encode_image(img))
