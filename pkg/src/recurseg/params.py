"""Named parameter storage and its flat binary container format.

Container layout (everything little-endian):
  magic   4 bytes  b"RSG1"
  dtype   u8       0 = float32, 1 = float64
  count   u32
  entry*  u16 name length, name bytes (utf-8), u8 rank,
          rank * u32 extents, raw values

Round trips are bit-exact.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .autodiff import Tensor, default_dtype

MAGIC = b"RSG1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class ContainerError(ValueError):
    """Malformed or truncated parameter container."""


class ParamStore:
    """Insertion-ordered map of unique names to trainable tensors.

    Also owns per-parameter optimizer moments (lazily created by the
    optimizer) so checkpoints can carry them.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def add(self, name: str, value, requires_grad: bool = True) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        # np.array keeps 0-d scalars 0-d, unlike ascontiguousarray
        v = np.array(value, dtype=default_dtype(), order="C")
        t = Tensor(v, requires_grad=requires_grad)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def group(self, prefix: str) -> dict[str, Tensor]:
        """All entries under `prefix.`, keyed by the remaining suffix."""
        dot = prefix + "."
        return {k[len(dot):]: v for k, v in self._params.items() if k.startswith(dot)}

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def count_values(self) -> int:
        return sum(p.value.size for p in self._params.values())

    def to_bytes(self) -> bytes:
        dtypes = {p.value.dtype for p in self._params.values()}
        if len(dtypes) > 1:
            raise ContainerError(f"mixed dtypes in store: {sorted(map(str, dtypes))}")
        dtype = dtypes.pop() if dtypes else np.dtype("float32")
        if dtype not in _CODES:
            raise ContainerError(f"unsupported dtype {dtype}")
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<BI", _CODES[dtype], len(self._params)))
        wire = _DTYPES[_CODES[dtype]]
        for name, p in self._params.items():
            nb = name.encode("utf-8")
            buf.write(struct.pack("<H", len(nb)))
            buf.write(nb)
            buf.write(struct.pack("<B", p.value.ndim))
            for ext in p.value.shape:
                buf.write(struct.pack("<I", ext))
            buf.write(np.ascontiguousarray(p.value, dtype=wire).tobytes())
        return buf.getvalue()

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_stream(cls, fh) -> "ParamStore":
        def need(n, what):
            data = fh.read(n)
            if len(data) != n:
                raise ContainerError(f"truncated container while reading {what}")
            return data

        magic = need(4, "magic")
        if magic != MAGIC:
            raise ContainerError(f"bad magic {magic!r}, expected {MAGIC!r}; wrong format or version")
        code, count = struct.unpack("<BI", need(5, "header"))
        if code not in _DTYPES:
            raise ContainerError(f"unknown dtype code {code}")
        wire = _DTYPES[code]
        store = cls()
        for _ in range(count):
            (nlen,) = struct.unpack("<H", need(2, "name length"))
            name = need(nlen, "name").decode("utf-8")
            (rank,) = struct.unpack("<B", need(1, "rank"))
            shape = struct.unpack(f"<{rank}I", need(4 * rank, "extents"))
            n = int(np.prod(shape)) if rank else 1
            raw = need(n * wire.itemsize, f"values of {name!r}")
            native = np.float32 if code == 0 else np.float64
            arr = np.frombuffer(raw, dtype=wire).reshape(shape).astype(native, copy=True)
            if name in store._params:
                raise ContainerError(f"duplicate parameter name {name!r} in container")
            # keep the container's dtype regardless of the ambient default
            store._params[name] = Tensor(arr, requires_grad=True)
        return store

    @classmethod
    def from_bytes(cls, data: bytes) -> "ParamStore":
        return cls.from_stream(io.BytesIO(data))

    @classmethod
    def load(cls, path) -> "ParamStore":
        with open(path, "rb") as fh:
            return cls.from_stream(fh)
