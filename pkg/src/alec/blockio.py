"""Little-endian binary container for named arrays, grouped into sections.

Layout (all integers little-endian):

    magic     4 bytes
    version   u32
    meta_len  u32, then meta_len bytes of UTF-8 JSON
    n_sections u32
    per section:
        tag_len u16 + tag bytes
        n_entries u32
        per entry:
            name_len u16 + name bytes
            dtype tag u8  (1=float32, 2=float64, 3=int64, 4=uint8)
            ndim u8, then ndim x u64 extents
            raw array bytes ('<' byte order, C order)

Used for model checkpoints (magic ``ALEC``) and body-template array blobs
(magic ``ALTB``).
"""

import io
import json
import struct

import numpy as np

_DTYPE_TAGS = {1: "<f4", 2: "<f8", 3: "<i8", 4: "u1"}
_TAG_FOR = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("int64"): 3, np.dtype("uint8"): 4}

CHECKPOINT_MAGIC = b"ALEC"
BLOB_MAGIC = b"ALTB"


class FormatError(ValueError):
    pass


def write_blocks(path, magic, meta, sections, version=1):
    """sections: {tag: {name: ndarray}}; meta: JSON-serializable dict."""
    buf = io.BytesIO()
    buf.write(magic)
    buf.write(struct.pack("<I", version))
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(sections)))
    for tag, entries in sections.items():
        tb = tag.encode("utf-8")
        buf.write(struct.pack("<H", len(tb)))
        buf.write(tb)
        buf.write(struct.pack("<I", len(entries)))
        for name, arr in entries.items():
            arr = np.ascontiguousarray(arr)
            if arr.dtype not in _TAG_FOR:
                if arr.dtype.kind == "i":
                    arr = arr.astype(np.int64)
                else:
                    raise FormatError(f"unsupported dtype {arr.dtype} for entry '{name}'")
            nb = name.encode("utf-8")
            buf.write(struct.pack("<H", len(nb)))
            buf.write(nb)
            buf.write(struct.pack("<BB", _TAG_FOR[arr.dtype], arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            buf.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def read_blocks(path, magic):
    """Returns (version, meta dict, {tag: {name: ndarray}}). Raises FormatError
    on a wrong magic string or a truncated/corrupt file."""
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data, path)
    got = r.take(4)
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
    version = r.u32()
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    sections = {}
    for _ in range(r.u32()):
        tag = r.take(r.u16()).decode("utf-8")
        entries = {}
        for _ in range(r.u32()):
            name = r.take(r.u16()).decode("utf-8")
            dtag, ndim = struct.unpack("<BB", r.take(2))
            if dtag not in _DTYPE_TAGS:
                raise FormatError(f"{path}: unknown dtype tag {dtag}")
            shape = struct.unpack(f"<{ndim}Q", r.take(8 * ndim))
            dt = np.dtype(_DTYPE_TAGS[dtag])
            n = int(np.prod(shape)) if ndim else 1
            raw = r.take(n * dt.itemsize)
            entries[name] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
        sections[tag] = entries
    return version, meta, sections


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated file (wanted {n} bytes at offset {self.pos})")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u16(self):
        return struct.unpack("<H", self.take(2))[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]
