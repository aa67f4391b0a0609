"""``PIBC`` tensor container and network (de)serialization.

Layout (integers big-endian, tensor data little-endian float32)::

    "PIBC" | version u16 | meta_len u32 | meta JSON | n_tensors u32 |
    n_tensors x (name_len u16 | name | dtype u8 (1 = f32) | ndim u8 | dims u32... | data)

Tensors are written in sorted name order and metadata as canonical JSON,
so save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import InfoPlaneTrace, NetworkSpec, TrainedNetwork, build_stages
from .errors import BadMagic, CheckpointVersionError, DataError, TruncatedFile
from .units import DigitalReadout, FaultSpec

MAGIC = b"PIBC"
VERSION = 1
DTYPE_F32 = 1


@dataclass
class Checkpoint:
    meta: dict = field(default_factory=dict)
    tensors: dict = field(default_factory=dict)


def _canonical(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def dumps(ckpt: Checkpoint) -> bytes:
    blob = _canonical(ckpt.meta)
    out = [MAGIC, struct.pack(">HI", VERSION, len(blob)), blob, struct.pack(">I", len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name], dtype="<f4")
        key = name.encode("utf-8")
        if arr.ndim > 255 or len(key) > 0xFFFF:
            raise DataError(f"tensor {name!r} cannot be stored")
        out.append(struct.pack(">H", len(key)) + key + struct.pack(">BB", DTYPE_F32, arr.ndim))
        out.append(struct.pack(f">{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedFile(f"checkpoint ends at byte {len(self.raw)}, needed {self.pos + n}")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(raw: bytes) -> Checkpoint:
    r = _Reader(bytes(raw))
    if r.take(4) != MAGIC:
        raise BadMagic("not a PIBC checkpoint")
    version, meta_len = r.unpack(">HI")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, this build reads {VERSION}")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"corrupt checkpoint metadata: {exc}") from None
    (count,) = r.unpack(">I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack(">H")
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise DataError("tensor name is not UTF-8") from None
        dtype, ndim = r.unpack(">BB")
        if dtype != DTYPE_F32:
            raise DataError(f"tensor {name!r} has unsupported dtype code {dtype}")
        shape = r.unpack(f">{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(r.take(4 * n), "<f4").reshape(shape).copy()
    if r.pos != len(r.raw):
        raise DataError(f"{len(r.raw) - r.pos} trailing bytes after the last tensor")
    return Checkpoint(meta, tensors)


def save(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(dumps(ckpt))


def load(path) -> Checkpoint:
    try:
        return loads(Path(path).read_bytes())
    except FileNotFoundError:
        raise DataError(f"no checkpoint at {path}") from None


# -- networks -------------------------------------------------------------------


def _put_stats(tensors: dict, prefix: str, stats) -> None:
    if stats is not None:
        tensors[prefix + ".mean"], tensors[prefix + ".std"] = stats


def _get_stats(tensors: dict, prefix: str):
    if prefix + ".mean" not in tensors:
        return None
    return (tensors[prefix + ".mean"].astype(np.float64), tensors[prefix + ".std"].astype(np.float64))


def network_to_checkpoint(net: TrainedNetwork, device_seed: int, extra: dict | None = None) -> Checkpoint:
    """Everything needed to rebuild ``net`` on devices regenerated from ``device_seed``."""
    tensors = {}
    faults = []
    for l, stage in enumerate(net.stages):
        for k, v in stage.params().items():
            tensors[f"unit{l}.{k}"] = v
        _put_stats(tensors, f"unit{l}.in", stage.in_stats)
        if stage.kind == "optical":
            _put_stats(tensors, f"unit{l}.speckle", stage.speckle_stats)
            faults.append(None)
        else:
            faults.append(stage.unit.fault.to_dict())
    if net.final_readout is not None:
        tensors["readout.W"], tensors["readout.b"] = net.final_readout.W, net.final_readout.b
    _put_stats(tensors, "readout", net.readout_stats)
    meta = {"kind": "network", "spec": net.spec.to_dict(), "device_seed": int(device_seed), "faults": faults,
            "trace": [list(r) for r in net.trace.records]}
    if extra:
        meta["extra"] = extra
    return Checkpoint(meta, tensors)


def network_from_checkpoint(ckpt: Checkpoint) -> TrainedNetwork:
    meta, t = ckpt.meta, ckpt.tensors
    if meta.get("kind") != "network":
        raise DataError("checkpoint does not hold a network")
    spec = NetworkSpec.from_dict(meta["spec"])
    net = TrainedNetwork(spec, build_stages(spec, meta["device_seed"]))
    for l, stage in enumerate(net.stages):
        names = ("W",) if stage.kind == "memristor" else ("W", "b")
        try:
            stage.set_params({k: t[f"unit{l}.{k}"].astype(np.float64) for k in names})
        except KeyError as exc:
            raise DataError(f"checkpoint lacks tensor {exc}") from None
        stage.in_stats = _get_stats(t, f"unit{l}.in")
        if stage.kind == "optical":
            stage.speckle_stats = _get_stats(t, f"unit{l}.speckle")
        elif meta["faults"][l]:
            stage.unit.inject_fault(FaultSpec.from_dict(meta["faults"][l]))
    if "readout.W" in t:
        net.final_readout = DigitalReadout(t["readout.W"].astype(np.float64), t["readout.b"].astype(np.float64))
    net.readout_stats = _get_stats(t, "readout")
    net.trace = InfoPlaneTrace([tuple(r) for r in meta.get("trace", [])])
    return net
