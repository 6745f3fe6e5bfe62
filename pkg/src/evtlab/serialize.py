"""Weight container.

Layout::

    b"EVTWGT"                  magic
    u8                         version (1)
    u64 little-endian          manifest length in bytes
    manifest                   UTF-8 lines "name<TAB>d0,d1,...<TAB>byte offset"
    blobs                      little-endian float64 arrays, offsets relative to blob start
"""

import struct

import numpy as np

from evtlab.errors import FormatError

MAGIC = b"EVTWGT"
VERSION = 1
_HEADER = struct.Struct("<6sBQ")


def dumps_weights(arrays):
    """Encode ``{name: array}`` (insertion order kept) into container bytes."""
    lines, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        if any(c in name for c in "\t\n"):
            raise ValueError(f"tensor name {name!r} contains a tab or newline")
        a = np.asarray(arr, dtype="<f8", order="C")  # ascontiguousarray would promote 0-d to 1-d
        lines.append(f"{name}\t{','.join(str(d) for d in a.shape)}\t{offset}")
        blobs.append(a.tobytes())
        offset += a.nbytes
    manifest = ("\n".join(lines) + "\n").encode("utf-8") if lines else b""
    return _HEADER.pack(MAGIC, VERSION, len(manifest)) + manifest + b"".join(blobs)


def loads_weights(data):
    if len(data) < _HEADER.size:
        raise FormatError("file is shorter than the container header")
    magic, version, mlen = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    start = _HEADER.size
    if start + mlen > len(data):
        raise FormatError("manifest runs past the end of the file")
    try:
        manifest = data[start:start + mlen].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"manifest is not UTF-8: {exc}") from None
    blob = data[start + mlen:]
    out = {}
    for i, line in enumerate(manifest.splitlines()):
        parts = line.split("\t")
        label = f"manifest entry {i} ({parts[0]!r})"
        if len(parts) != 3:
            raise FormatError(f"{label}: expected 3 tab-separated fields, got {len(parts)}")
        name, shape_txt, off_txt = parts
        try:
            shape = tuple(int(d) for d in shape_txt.split(",")) if shape_txt else ()
            offset = int(off_txt)
        except ValueError:
            raise FormatError(f"{label}: shape or offset is not an integer") from None
        if any(d < 0 for d in shape) or offset < 0:
            raise FormatError(f"{label}: negative shape or offset")
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(blob):
            raise FormatError(f"{label}: data runs past the end of the file")
        if name in out:
            raise FormatError(f"{label}: duplicate tensor name")
        out[name] = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape).astype(np.float64)
    return out


def save_weights(path, arrays):
    with open(path, "wb") as fh:
        fh.write(dumps_weights(arrays))


def load_weights(path):
    with open(path, "rb") as fh:
        return loads_weights(fh.read())
