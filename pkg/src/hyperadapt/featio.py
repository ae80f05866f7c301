"""On-disk formats: feature arrays, phoneme token files, corpus manifests,
and model checkpoints.

Feature file layout (16-byte header, little-endian, then raw C-order data):

    offset  size  field
    0       4     magic "HAF1"
    4       1     dtype code (1=f32, 2=f64, 3=i32, 4=i64)
    5       1     rank (1 or 2)
    6       2     reserved (zero)
    8       4     dim0 (u32)
    12      4     dim1 (u32, 1 for rank-1 arrays)

Checkpoint layout: 8-byte magic "HACKPT01", u32 metadata length, canonical
JSON metadata (sorted keys, compact separators), then tensor payloads
concatenated in the order given by the metadata's "tensors" index. The
metadata carries the step counter, a config echo, and quantization ranges;
the same bytes always come back out after a load/save round trip.
"""

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

FEATURE_MAGIC = b"HAF1"
CHECKPOINT_MAGIC = b"HACKPT01"

_DTYPE_TO_CODE = {
    np.dtype(np.float32): 1,
    np.dtype(np.float64): 2,
    np.dtype(np.int32): 3,
    np.dtype(np.int64): 4,
}
_CODE_TO_DTYPE = {v: k for k, v in _DTYPE_TO_CODE.items()}


def _dtype_code(arr, where):
    code = _DTYPE_TO_CODE.get(arr.dtype)
    if code is None:
        raise InputError(f"{where}: unsupported dtype {arr.dtype} (need f32/f64/i32/i64)")
    return code


def write_array(path, arr):
    arr = np.ascontiguousarray(arr)
    code = _dtype_code(arr, str(path))
    if arr.ndim not in (1, 2):
        raise InputError(f"{path}: rank {arr.ndim} not writable (need 1 or 2)")
    dim0 = arr.shape[0]
    dim1 = arr.shape[1] if arr.ndim == 2 else 1
    header = FEATURE_MAGIC + struct.pack("<BBHII", code, arr.ndim, 0, dim0, dim1)
    payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(payload)
    os.replace(tmp, path)


def read_array(path):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16:
        raise InputError(f"{path}: truncated header ({len(blob)} bytes)")
    if blob[:4] != FEATURE_MAGIC:
        raise InputError(f"{path}: bad magic {blob[:4]!r}")
    code, rank, _reserved, dim0, dim1 = struct.unpack("<BBHII", blob[4:16])
    dtype = _CODE_TO_DTYPE.get(code)
    if dtype is None:
        raise InputError(f"{path}: unknown dtype code {code}")
    if rank not in (1, 2):
        raise InputError(f"{path}: unsupported rank {rank}")
    shape = (dim0,) if rank == 1 else (dim0, dim1)
    count = dim0 * (dim1 if rank == 2 else 1)
    expected = 16 + count * dtype.itemsize
    if len(blob) != expected:
        raise InputError(f"{path}: payload is {len(blob) - 16} bytes, header promises {expected - 16}")
    arr = np.frombuffer(blob, dtype=dtype.newbyteorder("<"), count=count, offset=16)
    return arr.astype(dtype, copy=True).reshape(shape)


def write_phonemes(path, ids):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise InputError(f"{path}: phoneme ids must be 1-D")
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as f:
        f.write(" ".join(str(int(i)) for i in ids))
        f.write("\n")
    os.replace(tmp, path)


def read_phonemes(path):
    with open(path) as f:
        text = f.read()
    try:
        ids = [int(tok) for tok in text.split()]
    except ValueError as e:
        raise InputError(f"{path}: non-integer phoneme token ({e})") from None
    if not ids:
        raise InputError(f"{path}: empty phoneme sequence")
    return np.asarray(ids, dtype=np.int64)


# -----------------------------------------------------------------------------
# manifest
# -----------------------------------------------------------------------------

_ENTRY_KEYS = {"utt_id", "speaker", "split", "phonemes", "mel", "f0", "energy", "durations", "embedding"}
_REQUIRED_KEYS = {"utt_id", "speaker", "split", "phonemes", "mel", "f0", "energy"}


@dataclass
class ManifestEntry:
    """One utterance: ids plus feature paths relative to the manifest file."""

    utt_id: str
    speaker: str
    split: str
    phonemes: str
    mel: str
    f0: str
    energy: str
    durations: str = ""
    embedding: str = ""

    def to_record(self):
        rec = {
            "utt_id": self.utt_id,
            "speaker": self.speaker,
            "split": self.split,
            "phonemes": self.phonemes,
            "mel": self.mel,
            "f0": self.f0,
            "energy": self.energy,
        }
        if self.durations:
            rec["durations"] = self.durations
        if self.embedding:
            rec["embedding"] = self.embedding
        return rec

    def paths(self):
        out = [self.phonemes, self.mel, self.f0, self.energy]
        if self.durations:
            out.append(self.durations)
        if self.embedding:
            out.append(self.embedding)
        return out


def write_manifest(path, entries):
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as f:
        for e in entries:
            f.write(json.dumps(e.to_record(), sort_keys=True))
            f.write("\n")
    os.replace(tmp, path)


def read_manifest(path, check_paths=True):
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    seen = set()
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise InputError(f"{path}:{lineno}: bad record ({e})") from None
            unknown = set(rec) - _ENTRY_KEYS
            if unknown:
                raise InputError(f"{path}:{lineno}: unknown manifest keys {sorted(unknown)}")
            missing = _REQUIRED_KEYS - set(rec)
            if missing:
                raise InputError(f"{path}:{lineno}: missing manifest keys {sorted(missing)}")
            entry = ManifestEntry(**rec)
            if entry.utt_id in seen:
                raise InputError(f"{path}:{lineno}: duplicate utterance id {entry.utt_id}")
            seen.add(entry.utt_id)
            if check_paths:
                for rel in entry.paths():
                    full = os.path.join(base, rel)
                    if not os.path.exists(full):
                        raise InputError(f"{path}:{lineno}: missing feature file {rel}")
            entries.append(entry)
    return entries


def manifest_dir(path):
    return os.path.dirname(os.path.abspath(path))


# -----------------------------------------------------------------------------
# checkpoints
# -----------------------------------------------------------------------------


def write_checkpoint(path, meta, tensors):
    """meta: JSON-serializable dict (step, config echo, quantization ranges).
    tensors: name -> ndarray. Tensor bytes are appended in sorted-name order.
    """
    names = sorted(tensors)
    index = []
    payloads = []
    for name in names:
        arr = np.ascontiguousarray(tensors[name])
        code = _dtype_code(arr, f"checkpoint tensor {name}")
        payloads.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
        index.append({"name": name, "dtype": code, "shape": list(arr.shape)})
    full_meta = dict(meta)
    if "tensors" in full_meta:
        raise InputError("checkpoint meta may not define the reserved key 'tensors'")
    full_meta["tensors"] = index
    meta_bytes = json.dumps(full_meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(meta_bytes)))
        f.write(meta_bytes)
        for blob in payloads:
            f.write(blob)
    os.replace(tmp, path)


def read_checkpoint(path):
    """Returns (meta, tensors) with the 'tensors' index stripped from meta."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12 or blob[:8] != CHECKPOINT_MAGIC:
        raise InputError(f"{path}: not a checkpoint (bad magic or truncated)")
    (meta_len,) = struct.unpack("<I", blob[8:12])
    if len(blob) < 12 + meta_len:
        raise InputError(f"{path}: truncated metadata")
    try:
        meta = json.loads(blob[12 : 12 + meta_len].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise InputError(f"{path}: unreadable metadata ({e})") from None
    index = meta.pop("tensors", None)
    if index is None:
        raise InputError(f"{path}: metadata missing tensor index")
    tensors = {}
    offset = 12 + meta_len
    for item in index:
        dtype = _CODE_TO_DTYPE.get(item.get("dtype"))
        if dtype is None:
            raise InputError(f"{path}: tensor {item.get('name')}: unknown dtype code")
        shape = tuple(item["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(blob):
            raise InputError(f"{path}: tensor {item['name']}: payload truncated")
        arr = np.frombuffer(blob, dtype=dtype.newbyteorder("<"), count=count, offset=offset)
        tensors[item["name"]] = arr.astype(dtype, copy=True).reshape(shape)
        offset += nbytes
    if offset != len(blob):
        raise InputError(f"{path}: {len(blob) - offset} trailing bytes after last tensor")
    return meta, tensors
