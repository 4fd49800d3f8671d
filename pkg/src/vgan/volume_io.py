"""Raw binary volume container and dataset manifests.

Layout: magic "VVOL", version u32, channel count u32, three extents u64,
dtype tag u32 (0 = float32, 1 = uint8), then the little-endian payload in
channel-major, row-major spatial order. Deliberately not a medical imaging
format; converters from NIfTI and friends are an extension point.
"""

import json
import struct
from pathlib import Path

import numpy as np

from .data import VolumeSample

MAGIC = b"VVOL"
VERSION = 1

_TAG_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_DTYPE_TO_TAG = {np.dtype("float32"): 0, np.dtype("uint8"): 1}


class VolumeFormatError(ValueError):
    pass


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise VolumeFormatError(
            f"truncated file: expected {n} bytes for {what} at offset "
            f"{fh.tell() - len(data)}, got {len(data)}"
        )
    return data


def save_volume(path, array):
    """Write a [C,D,H,W] or [D,H,W] array; dtype float32 or uint8."""
    arr = np.asarray(array)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise VolumeFormatError(f"expected 3 or 4 dims, got shape {arr.shape}")
    tag = _DTYPE_TO_TAG.get(arr.dtype)
    if tag is None:
        raise VolumeFormatError(f"unsupported dtype {arr.dtype}")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, arr.shape[0]))
        fh.write(struct.pack("<3Q", *arr.shape[1:]))
        fh.write(struct.pack("<I", tag))
        fh.write(np.ascontiguousarray(arr).tobytes())


def _read_header(fh):
    magic = fh.read(4)
    if magic != MAGIC:
        raise VolumeFormatError(
            f"bad magic at byte 0: expected {MAGIC!r}, got {magic!r}"
        )
    version, channels = struct.unpack("<II", _read_exact(fh, 8, "header"))
    if version != VERSION:
        raise VolumeFormatError(f"unsupported version {version}")
    extents = struct.unpack("<3Q", _read_exact(fh, 24, "extents"))
    (tag,) = struct.unpack("<I", _read_exact(fh, 4, "dtype tag"))
    if tag not in _TAG_TO_DTYPE:
        raise VolumeFormatError(f"unknown dtype tag {tag}")
    return channels, extents, tag


def inspect_volume(path):
    """Header fields without reading the payload."""
    with open(path, "rb") as fh:
        channels, extents, tag = _read_header(fh)
    return {
        "channels": channels,
        "extents": extents,
        "dtype": "float32" if tag == 0 else "uint8",
    }


def load_volume(path):
    """Read a volume back as [C,D,H,W]."""
    with open(path, "rb") as fh:
        channels, extents, tag = _read_header(fh)
        dtype = _TAG_TO_DTYPE[tag]
        count = channels * extents[0] * extents[1] * extents[2]
        raw = _read_exact(fh, count * dtype.itemsize, "payload")
        trailing = fh.read(1)
        if trailing:
            raise VolumeFormatError(
                f"unexpected trailing bytes at offset {fh.tell() - 1}"
            )
    return np.frombuffer(raw, dtype=dtype).reshape((channels,) + extents).copy()


def save_sample(directory, sample):
    """Write one sample's image and labels; returns its manifest entry."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    image_name = f"{sample.id}_img.vvol"
    label_name = f"{sample.id}_lbl.vvol"
    save_volume(directory / image_name, sample.image)
    save_volume(directory / label_name, sample.labels)
    return {
        "id": sample.id,
        "image": image_name,
        "labels": label_name,
        "grade": sample.grade,
    }


def load_sample(entry, base_dir):
    base = Path(base_dir)
    image = load_volume(base / entry["image"])
    labels = load_volume(base / entry["labels"])[0]
    return VolumeSample(entry["id"], entry["grade"], image, labels)


def write_manifest(path, entries):
    with open(path, "w") as fh:
        json.dump(entries, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path):
    with open(path) as fh:
        entries = json.load(fh)
    if not isinstance(entries, list):
        raise VolumeFormatError("manifest must be a JSON list")
    return entries


def save_dataset(directory, samples, manifest_name="manifest.json"):
    entries = [save_sample(directory, s) for s in samples]
    manifest = Path(directory) / manifest_name
    write_manifest(manifest, entries)
    return manifest


def load_dataset(manifest_path):
    manifest_path = Path(manifest_path)
    entries = read_manifest(manifest_path)
    return [load_sample(e, manifest_path.parent) for e in entries]
