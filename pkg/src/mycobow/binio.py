"""Little-endian binary primitives shared by the model file formats."""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError


class Reader:
    """Cursor over one fully-read binary blob; raises FormatError on truncation."""

    def __init__(self, blob: bytes, name: str = "<blob>"):
        self.blob = blob
        self.pos = 0
        self.name = name

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.blob):
            raise FormatError(f"{self.name}: truncated at byte {self.pos}")
        out = self.blob[self.pos:self.pos + count]
        self.pos += count
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def text(self) -> str:
        return self.take(self.u16()).decode("utf-8")

    def f32_array(self, *shape) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 0
        raw = self.take(4 * count)
        return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()

    def f64_array(self, *shape) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 0
        raw = self.take(8 * count)
        return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()

    def i64_array(self, *shape) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 0
        raw = self.take(8 * count)
        return np.frombuffer(raw, dtype="<i8").reshape(shape).copy()

    def done(self) -> None:
        if self.pos != len(self.blob):
            raise FormatError(
                f"{self.name}: {len(self.blob) - self.pos} trailing bytes"
            )


class Writer:
    def __init__(self):
        self.parts = []

    def raw(self, data: bytes):
        self.parts.append(data)

    def u8(self, value: int):
        self.parts.append(struct.pack("<B", value))

    def u16(self, value: int):
        self.parts.append(struct.pack("<H", value))

    def u32(self, value: int):
        self.parts.append(struct.pack("<I", value))

    def f64(self, value: float):
        self.parts.append(struct.pack("<d", value))

    def text(self, value: str):
        data = value.encode("utf-8")
        self.u16(len(data))
        self.raw(data)

    def f32_array(self, arr: np.ndarray):
        self.parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    def f64_array(self, arr: np.ndarray):
        self.parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    def i64_array(self, arr: np.ndarray):
        self.parts.append(np.ascontiguousarray(arr, dtype="<i8").tobytes())

    def tobytes(self) -> bytes:
        return b"".join(self.parts)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.tobytes())
