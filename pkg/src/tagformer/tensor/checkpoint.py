"""Checkpoint file format.

A plain-text header of ``key: value`` lines followed by the raw arrays::

    TAGFORMER-CHECKPOINT
    format_version: 1
    model_type: transformer
    model_config: {...json...}
    metadata: {...json...}
    payload_sha256: <hex>
    entries: <n>
    entry: <name>\t<param|buffer>\t<d0,d1,...>\t<byte offset>\t<byte length>
    ...
    end_header

Arrays are little-endian float32, concatenated in declaration order.
Offsets are relative to the first byte after the header.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import IntegrityError

MAGIC = "TAGFORMER-CHECKPOINT"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")


@dataclass
class Checkpoint:
    model_type: str
    model_config: dict
    params: dict  # name -> array, in declaration order
    buffers: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for kind, arrays in (("param", ckpt.params), ("buffer", ckpt.buffers)):
        for name, arr in arrays.items():
            if "\t" in name or "\n" in name:
                raise ValueError(f"invalid tensor name {name!r}")
            raw = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
            shape = ",".join(str(d) for d in np.shape(arr))
            entries.append(f"entry: {name}\t{kind}\t{shape}\t{offset}\t{len(raw)}")
            chunks.append(raw)
            offset += len(raw)
    payload = b"".join(chunks)
    header = [
        MAGIC,
        f"format_version: {FORMAT_VERSION}",
        f"model_type: {ckpt.model_type}",
        f"model_config: {json.dumps(ckpt.model_config, sort_keys=True)}",
        f"metadata: {json.dumps(ckpt.metadata, sort_keys=True)}",
        f"payload_sha256: {hashlib.sha256(payload).hexdigest()}",
        f"entries: {len(entries)}",
        *entries,
        "end_header",
    ]
    blob = ("\n".join(header) + "\n").encode("utf-8") + payload
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise IntegrityError(f"cannot read checkpoint {path}: {exc}") from exc

    def fail(msg):
        raise IntegrityError(f"corrupt checkpoint {path}: {msg}")

    marker = b"\nend_header\n"
    end = blob.find(marker)
    if not blob.startswith(MAGIC.encode()) or end < 0:
        fail("missing header")
    try:
        lines = blob[:end].decode("utf-8").split("\n")
    except UnicodeDecodeError:
        fail("header is not UTF-8")
    payload = blob[end + len(marker):]

    fields, entries = {}, []
    for line in lines[1:]:
        key, sep, value = line.partition(": ")
        if not sep:
            fail(f"bad header line {line!r}")
        if key == "entry":
            entries.append(value)
        else:
            fields[key] = value
    try:
        version = int(fields["format_version"])
        if version != FORMAT_VERSION:
            fail(f"unsupported format_version {version}")
        n_entries = int(fields["entries"])
        config = json.loads(fields["model_config"])
        metadata = json.loads(fields["metadata"])
        digest = fields["payload_sha256"]
        model_type = fields["model_type"]
    except (KeyError, ValueError) as exc:
        fail(f"bad header field ({exc})")
    if n_entries != len(entries):
        fail("entry count mismatch")
    if hashlib.sha256(payload).hexdigest() != digest:
        fail("payload checksum mismatch")

    params, buffers = {}, {}
    for entry in entries:
        try:
            name, kind, shape_s, off_s, nbytes_s = entry.split("\t")
            shape = tuple(int(d) for d in shape_s.split(",")) if shape_s else ()
            off, nbytes = int(off_s), int(nbytes_s)
        except ValueError:
            fail(f"bad entry {entry!r}")
        if nbytes != int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize or off + nbytes > len(payload):
            fail(f"entry {name} out of bounds")
        arr = np.frombuffer(payload, dtype=_DTYPE, count=nbytes // 4, offset=off).reshape(shape)
        target = params if kind == "param" else buffers
        target[name] = arr.astype(np.float32)
    return Checkpoint(model_type, config, params, buffers, metadata)
