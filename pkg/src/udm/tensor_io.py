"""Binary tensor files, checkpoints and lossy image previews.

Single tensor layout (all little-endian)::

    offset 0   4 bytes   magic b"UDMT"
    offset 4   u16       format version (1)
    offset 6   u16       rank r
    offset 8   r x u32   dims
    then       f64       payload, row-major, prod(dims) values

A 3x4x4 tensor therefore takes 8 + 12 = 20 header bytes and 384 payload
bytes. Checkpoints reuse the magic and version with rank ``0xFFFF`` as a
marker, followed by a u32 entry count and, per entry, a u16 name length,
the UTF-8 name and an embedded (rank, dims, payload) record.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .denoiser import LowRankAdapter
from .errors import FormatError, UdmError

MAGIC = b"UDMT"
VERSION = 1
DIRECTORY_MARK = 0xFFFF


def _encode_record(array) -> bytes:
    a = np.ascontiguousarray(array, dtype="<f8")
    if a.ndim >= DIRECTORY_MARK:
        raise UdmError("tensor rank too large", code="bad_shape")
    head = struct.pack("<H", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


def _decode_record(buf: bytes, pos: int):
    if pos + 2 > len(buf):
        raise FormatError("file truncated in rank field", code="truncated")
    (rank,) = struct.unpack_from("<H", buf, pos)
    pos += 2
    if pos + 4 * rank > len(buf):
        raise FormatError("file truncated in dims", code="truncated")
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    n = int(np.prod(dims, dtype=np.int64)) * 8
    if pos + n > len(buf):
        raise FormatError(f"payload needs {n} bytes, {len(buf) - pos} present", code="truncated")
    data = np.frombuffer(buf, dtype="<f8", count=n // 8, offset=pos).reshape(dims)
    return data.astype(np.float64), pos + n


def _check_head(buf: bytes):
    if len(buf) < 6:
        raise FormatError("file shorter than its header", code="truncated")
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", code="bad_magic")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}", code="bad_version")


def write_tensor(path, tensor) -> None:
    Path(path).write_bytes(MAGIC + struct.pack("<H", VERSION) + _encode_record(tensor))


def read_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    _check_head(buf)
    if struct.unpack_from("<H", buf, 6)[0] == DIRECTORY_MARK:
        raise FormatError("file is a checkpoint directory, not a tensor", code="bad_kind")
    data, end = _decode_record(buf, 6)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes", code="trailing_bytes")
    return data


def write_entries(path, entries: dict) -> None:
    parts = [MAGIC, struct.pack("<HHI", VERSION, DIRECTORY_MARK, len(entries))]
    for name, value in entries.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + _encode_record(value))
    Path(path).write_bytes(b"".join(parts))


def read_entries(path) -> dict:
    buf = Path(path).read_bytes()
    _check_head(buf)
    if len(buf) < 12 or struct.unpack_from("<H", buf, 6)[0] != DIRECTORY_MARK:
        raise FormatError("not a checkpoint directory", code="bad_kind")
    (count,) = struct.unpack_from("<I", buf, 8)
    pos = 12
    out = {}
    for _ in range(count):
        if pos + 2 > len(buf):
            raise FormatError("file truncated in entry name", code="truncated")
        (n,) = struct.unpack_from("<H", buf, pos)
        name = buf[pos + 2 : pos + 2 + n].decode("utf-8")
        out[name], pos = _decode_record(buf, pos + 2 + n)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes", code="trailing_bytes")
    return out


def save_checkpoint(path, state) -> None:
    """Adapter, initializer weights, step and optimizer moments."""
    a = state.adapter
    entries = {
        "U": a.U,
        "V": a.V,
        "gate": np.atleast_1d(np.asarray(a.gate, dtype=np.float64)),
        "init_weights": np.asarray(state.init_weights, dtype=np.float64),
        "step": np.array([state.step], dtype=np.float64),
        "loss_trace": np.asarray(state.loss_trace, dtype=np.float64),
    }
    for key, (m, v) in sorted(state.moments.items()):
        entries[f"m_{key}"] = np.atleast_1d(m)
        entries[f"v_{key}"] = np.atleast_1d(v)
    write_entries(path, entries)


def load_checkpoint(path):
    from .training import TrainState

    e = read_entries(path)
    gate = e["gate"]
    adapter = LowRankAdapter(e["U"], e["V"], float(gate[0]) if gate.size == 1 else gate)
    moments = {}
    for name in e:
        if name.startswith("m_"):
            key = name[2:]
            m, v = e[name], e[f"v_{key}"]
            if m.size == 1 and key not in ("U", "V"):
                m, v = m[0], v[0]
            moments[key] = (m, v)
    return TrainState(
        adapter,
        tuple(float(w) for w in e["init_weights"]),
        moments,
        int(e["step"][0]),
        [float(v) for v in e["loss_trace"]],
    )


def to_bytes_255(tensor) -> np.ndarray:
    """Clip to [0, 1], scale to 0..255 and round half up."""
    x = np.clip(np.asarray(tensor, dtype=np.float64), 0.0, 1.0)
    return np.floor(x * 255.0 + 0.5).astype(np.uint8)


def write_image_preview(tensor, path) -> None:
    """Binary PGM for one channel, PPM for three; lossy and never read back."""
    x = np.asarray(tensor, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] not in (1, 3):
        raise UdmError(f"preview needs 1 or 3 channels, got shape {x.shape}", code="bad_channels")
    c, h, w = x.shape
    pixels = to_bytes_255(x)
    if c == 1:
        head, body = b"P5", pixels[0]
    else:
        head, body = b"P6", np.transpose(pixels, (1, 2, 0))
    Path(path).write_bytes(head + f"\n{w} {h}\n255\n".encode("ascii") + body.tobytes())
