"""Binary checkpoint I/O.

Layout (little-endian throughout): 4-byte magic ("VGAN" for parameters,
"VGST" for optimizer state), format version u32, then per-record: name length
u32 + UTF-8 name, rank u32, extents u64[rank], raw float32 values. Records
run to end of file. Values are stored as float32 regardless of the in-memory
element type; loading into a float64 model upcasts.
"""

import struct

import numpy as np

from vgan.engine import Tensor
from vgan.optim import AdamState

PARAMS_MAGIC = b"VGAN"
STATE_MAGIC = b"VGST"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed checkpoint file; message carries the failing byte offset."""


def _write_record(fh, name, arr):
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    arr = np.asarray(arr)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(
            f"truncated while reading {what} at byte {fh.tell() - len(buf)}: "
            f"expected {n} bytes, got {len(buf)}"
        )
    return buf


def _read_records(fh):
    records = {}
    while True:
        head = fh.read(4)
        if head == b"":
            return records
        if len(head) != 4:
            raise CheckpointError(
                f"truncated record header at byte {fh.tell() - len(head)}"
            )
        (name_len,) = struct.unpack("<I", head)
        name = _read_exact(fh, name_len, "record name").decode("utf-8")
        (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
        extents = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, "extents"))
        count = 1
        for e in extents:
            count *= e
        raw = _read_exact(fh, 4 * count, f"payload of '{name}'")
        records[name] = np.frombuffer(raw, dtype="<f4").reshape(extents).copy()


def save_params(path, params, magic=PARAMS_MAGIC):
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        for name, p in params.items():
            _write_record(fh, name, p.data if isinstance(p, Tensor) else p)


def load_params(path, expect_magic=PARAMS_MAGIC):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != expect_magic:
            raise CheckpointError(
                f"bad magic at byte 0: expected {expect_magic!r}, got {magic!r}"
            )
        version = struct.unpack("<I", _read_exact(fh, 4, "version"))[0]
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported format version {version}")
        return _read_records(fh)


def save_adam_state(path, state):
    records = {"t": np.float32(state.t)}
    for hp in ("lr", "beta1", "beta2", "eps"):
        records[hp] = np.float32(getattr(state, hp))
    for name, arr in state.m.items():
        records[f"m.{name}"] = arr
    for name, arr in state.v.items():
        records[f"v.{name}"] = arr
    save_params(path, records, magic=STATE_MAGIC)


def load_adam_state(path):
    records = load_params(path, expect_magic=STATE_MAGIC)
    required = ("lr", "beta1", "beta2", "eps", "t")
    absent = [hp for hp in required if hp not in records]
    if absent:
        raise CheckpointError(f"state file lacks records {absent}")
    state = AdamState(
        lr=float(records.pop("lr")),
        beta1=float(records.pop("beta1")),
        beta2=float(records.pop("beta2")),
        eps=float(records.pop("eps")),
        t=int(records.pop("t")),
    )
    for name, arr in records.items():
        if name.startswith("m."):
            state.m[name[2:]] = arr
        elif name.startswith("v."):
            state.v[name[2:]] = arr
        else:
            raise CheckpointError(f"unexpected state record '{name}'")
    return state


def restore_params(model_params, records, dtype=None):
    """Copy loaded records into an existing parameter mapping, shape-checked."""
    missing = set(model_params) - set(records)
    extra = set(records) - set(model_params)
    if missing or extra:
        raise CheckpointError(
            f"parameter set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}"
        )
    for name, p in model_params.items():
        arr = records[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(
                f"shape mismatch for '{name}': checkpoint {arr.shape}, model {p.data.shape}"
            )
        p.data = arr.astype(dtype or p.data.dtype)
