"""One-way message frames and the master-versioned role table.

Wire format (network byte order): a 20-byte header
    version u8, kind u8, stream_id u16, tag u64, source u16,
    dest_role u16, payload_len u32
followed by the payload.  Tensor payloads encode rank u8, one u32 per
dim, then the float32 values little-endian.  Control payloads are
UTF-8 JSON bodies.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional

import numpy as np

WIRE_VERSION = 1
_HEADER = struct.Struct(">BBHQHHI")
HEADER_LEN = _HEADER.size


class WireError(ValueError):
    """Malformed frames or payloads."""


class Kind(IntEnum):
    DATA = 0
    ALMOST_FULL = 1
    ROLE_UPDATE = 2
    HEARTBEAT = 3
    SKIP = 4
    ACK = 5


@dataclass
class Message:
    """A tagged one-way frame between devices.

    Data frames carry a tensor payload plus the name of the value it
    holds; control frames carry a small JSON body.
    """

    kind: Kind
    tag: int = 0
    source: int = 0
    dest_role: int = 0
    stream_id: int = 0
    layer: str = ""                       # transported value name (data/skip)
    tensor: Optional[np.ndarray] = None
    body: dict = field(default_factory=dict)
    # modeled bookkeeping, not serialized: virtual path times, see runtime
    meta: dict = field(default_factory=dict)

    def payload_bytes(self) -> int:
        if self.tensor is None:
            return len(self._body_bytes())
        return 1 + 4 * self.tensor.ndim + 4 * self.tensor.size + len(self.layer.encode()) + 1

    def _body_bytes(self) -> bytes:
        doc = dict(self.body)
        if self.layer:
            doc["layer"] = self.layer
        return json.dumps(doc, sort_keys=True).encode()


def encode_tensor(arr: np.ndarray, layer: str) -> bytes:
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim > 255:
        raise WireError("tensor rank exceeds wire format limit")
    name = layer.encode()
    if len(name) > 255:
        raise WireError("layer name exceeds 255 bytes")
    head = bytes([len(name)]) + name + bytes([arr.ndim])
    dims = b"".join(struct.pack(">I", d) for d in arr.shape)
    return head + dims + arr.astype("<f4").tobytes()


def decode_tensor(buf: bytes) -> tuple[np.ndarray, str]:
    if not buf:
        raise WireError("empty tensor payload")
    nlen = buf[0]
    name = buf[1:1 + nlen].decode()
    off = 1 + nlen
    rank = buf[off]
    off += 1
    dims = []
    for _ in range(rank):
        (d,) = struct.unpack_from(">I", buf, off)
        dims.append(d)
        off += 4
    count = 1
    for d in dims:
        count *= d
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=off)
    if data.size != count:
        raise WireError("tensor payload truncated")
    return data.reshape(dims).astype(np.float32), name


def encode(msg: Message) -> bytes:
    if msg.kind == Kind.DATA:
        if msg.tensor is None:
            raise WireError("data frames must carry a tensor")
        payload = encode_tensor(msg.tensor, msg.layer)
    else:
        payload = msg._body_bytes()
    header = _HEADER.pack(WIRE_VERSION, int(msg.kind), msg.stream_id, msg.tag,
                          msg.source, msg.dest_role, len(payload))
    return header + payload


def decode(frame: bytes) -> Message:
    if len(frame) < HEADER_LEN:
        raise WireError(f"frame too short: {len(frame)} bytes")
    version, kind, stream_id, tag, source, dest_role, plen = _HEADER.unpack_from(frame)
    if version != WIRE_VERSION:
        raise WireError(f"unsupported wire version {version}")
    payload = frame[HEADER_LEN:]
    if len(payload) != plen:
        raise WireError(f"payload length mismatch: header {plen}, got {len(payload)}")
    kind = Kind(kind)
    if kind == Kind.DATA:
        tensor, layer = decode_tensor(payload)
        return Message(kind=kind, tag=tag, source=source, dest_role=dest_role,
                       stream_id=stream_id, layer=layer, tensor=tensor)
    body = json.loads(payload.decode()) if payload else {}
    layer = body.pop("layer", "")
    return Message(kind=kind, tag=tag, source=source, dest_role=dest_role,
                   stream_id=stream_id, layer=layer, body=body)


@dataclass
class RoleEntry:
    address: str
    task_id: str
    master: bool = False
    recorder: bool = False


@dataclass
class IPTable:
    """Shared device -> (address, task, flags) map, master-versioned.

    The version increases on every accepted update; only the master may
    publish one.  Exactly one master; one recorder per active stream.
    """

    version: int
    entries: dict[int, RoleEntry]

    def validate(self) -> "IPTable":
        masters = [d for d, e in self.entries.items() if e.master]
        if len(masters) != 1:
            raise WireError(f"expected exactly one master, got {masters}")
        return self

    def master_device(self) -> int:
        return next(d for d, e in self.entries.items() if e.master)

    def recorder_devices(self) -> list[int]:
        return sorted(d for d, e in self.entries.items() if e.recorder)

    def device_for_task(self, task_id: str) -> Optional[int]:
        for d, e in self.entries.items():
            if e.task_id == task_id:
                return d
        return None

    def to_body(self) -> dict:
        return {
            "version": self.version,
            "entries": {
                str(d): {"address": e.address, "task_id": e.task_id,
                         "master": e.master, "recorder": e.recorder}
                for d, e in self.entries.items()
            },
        }

    @staticmethod
    def from_body(body: dict) -> "IPTable":
        return IPTable(
            version=int(body["version"]),
            entries={
                int(d): RoleEntry(**e) for d, e in body["entries"].items()
            },
        ).validate()

    def copy(self) -> "IPTable":
        return IPTable(self.version,
                       {d: RoleEntry(e.address, e.task_id, e.master, e.recorder)
                        for d, e in self.entries.items()})
