"""Binary tensor container and model checkpoints.

Layout (all integers little-endian):

* magic ``SDNC``; format version u32 (currently 1)
* config length u32, then UTF-8 JSON config record
* entry count u32, then per tensor: name length u16 + UTF-8 name,
  flavor u8 (0 parameter, 1 buffer), dtype tag u8, rank u8,
  ``rank`` dims as u32, raw little-endian payload.

Roundtrips are bitwise exact.  Malformed files raise
:class:`~segdistill.errors.FormatError` naming the path and byte offset.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import DataError, FormatError
from .models import (EnsembleConfig, Model, ModelConfig, build_ensemble,
                     build_model)

MAGIC = b"SDNC"
VERSION = 1

_TAG_TO_DTYPE = {1: np.dtype("<f4"), 2: np.dtype("<f8"),
                 3: np.dtype("u1"), 4: np.dtype("<i8")}
_DTYPE_TO_TAG = {np.dtype(np.float32): 1, np.dtype(np.float64): 2,
                 np.dtype(np.uint8): 3, np.dtype(np.int64): 4}

PARAM, BUFFER = 0, 1


def write_tensor_file(path, config: dict, entries) -> None:
    """``entries``: iterable of (name, flavor, ndarray)."""
    entries = list(entries)
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(entries)))
        for name, flavor, arr in entries:
            arr = np.ascontiguousarray(arr)
            tag = _DTYPE_TO_TAG.get(arr.dtype)
            if tag is None:
                raise FormatError(f"{path}: dtype {arr.dtype} is not storable")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BBB", flavor, tag, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


class _Reader:
    def __init__(self, path):
        self.path = path
        try:
            with open(path, "rb") as fh:
                self.data = fh.read()
        except OSError as exc:
            raise DataError(f"cannot read {path}: {exc.strerror}") from None
        self.offset = 0

    def fail(self, message, at=None):
        at = self.offset if at is None else at
        raise FormatError(f"{self.path}: {message} at byte {at}")

    def take(self, n):
        if self.offset + n > len(self.data):
            self.fail(f"unexpected end of file (needed {n} bytes)")
        out = self.data[self.offset:self.offset + n]
        self.offset += n
        return out

    def u8(self):
        return self.take(1)[0]

    def u16(self):
        return struct.unpack("<H", self.take(2))[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def read_tensor_file(path):
    """Returns (config dict, list of (name, flavor, ndarray))."""
    r = _Reader(path)
    if r.take(4) != MAGIC:
        r.fail(f"bad magic, expected {MAGIC!r}", at=0)
    version = r.u32()
    if version != VERSION:
        r.fail(f"unsupported format version {version}", at=4)
    blob_len = r.u32()
    blob_at = r.offset
    try:
        config = json.loads(r.take(blob_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        r.fail(f"invalid config record ({exc})", at=blob_at)
    count = r.u32()
    entries = []
    for _ in range(count):
        name_len = r.u16()
        name_at = r.offset
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            r.fail("tensor name is not valid UTF-8", at=name_at)
        flavor = r.u8()
        if flavor not in (PARAM, BUFFER):
            r.fail(f"unknown entry flavor {flavor}", at=r.offset - 1)
        tag = r.u8()
        dtype = _TAG_TO_DTYPE.get(tag)
        if dtype is None:
            r.fail(f"unknown dtype tag {tag}", at=r.offset - 1)
        rank = r.u8()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        length = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
        payload_at = r.offset
        payload = r.take(length)
        arr = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
        entries.append((name, flavor, arr, payload_at))
    if r.offset != len(r.data):
        r.fail(f"{len(r.data) - r.offset} trailing bytes")
    return config, [(n, f, a) for n, f, a, _ in entries]


# ---------------------------------------------------------------------------
# model checkpoints

def save_model(path, model: Model) -> None:
    entries = [(name, PARAM, p.data) for name, p in model.params.items()]
    entries += [(name, BUFFER, buf) for name, buf in model.buffers.items()]
    write_tensor_file(path, _config_record(model), entries)


def _config_record(model):
    from dataclasses import asdict
    return asdict(model.config)


def rebuild_from_config(config: dict) -> Model:
    """Instantiate an untrained model matching a checkpoint config record."""
    kind = config.get("kind")
    if kind == "ensemble":
        cfg = EnsembleConfig(
            fusion_maps=tuple(config["fusion_maps"]),
            num_classes=int(config["num_classes"]),
            dtype=config["dtype"],
            dense=config["dense"], sparse=config["sparse"])
        dense = rebuild_from_config(config["dense"])
        sparse = rebuild_from_config(config["sparse"])
        return build_ensemble(dense, sparse, fusion_maps=cfg.fusion_maps)
    cfg = ModelConfig(
        kind=kind,
        num_blocks=int(config["num_blocks"]),
        feature_maps=int(config["feature_maps"]),
        kernel=int(config["kernel"]),
        num_classes=int(config["num_classes"]),
        input_channels=int(config["input_channels"]),
        dropout_p=float(config["dropout_p"]),
        dtype=config["dtype"],
        class_space=config.get("class_space", "full"),
        object_class_ids=tuple(config.get("object_class_ids", ())))
    return build_model(cfg)


def load_model(path) -> Model:
    """Rebuild the architecture from the config record, then restore every
    parameter and buffer bitwise."""
    config, entries = read_tensor_file(path)
    try:
        model = rebuild_from_config(config)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: config record is incomplete ({exc})") from None
    seen = set()
    for name, flavor, arr in entries:
        target = model.params.get(name) if flavor == PARAM else None
        if flavor == PARAM:
            if target is None:
                raise FormatError(f"{path}: unexpected parameter {name!r}")
            dest = target.data
        else:
            if name not in model.buffers:
                raise FormatError(f"{path}: unexpected buffer {name!r}")
            dest = model.buffers[name]
        if tuple(dest.shape) != tuple(arr.shape) or dest.dtype != arr.dtype:
            raise FormatError(f"{path}: entry {name!r} has shape {arr.shape} "
                              f"{arr.dtype}, model expects {tuple(dest.shape)} "
                              f"{dest.dtype}")
        dest[...] = arr
        seen.add((name, flavor))
    expect = {(n, PARAM) for n in model.params} | {(n, BUFFER) for n in model.buffers}
    missing = expect - seen
    if missing:
        raise FormatError(f"{path}: missing entries {sorted(n for n, _ in missing)[:4]}")
    return model
