"""Control-channel record layout.

Every record is 64 bytes, little-endian, fields in this order::

    kind                    u8
    src_ep                  u32 tenant, u32 ip, u16 port
    dst_ep                  u32 tenant, u32 ip, u16 port
    initiator_channel_key   u32
    responder_channel_key   u32
    read_mr                 u32
    read_capacity           u32
    initial_credit          u32
    reason                  u16
    ctrl_ack                u32   cumulative control bytes consumed from the peer
    (zero padding to 64)

For CREDIT and CLOSE records the two key fields name the recipient's
channel (``responder_channel_key``) and the sender's channel
(``initiator_channel_key``); ``initial_credit`` carries the credit amount.
A CREDIT whose recipient key is 0 acknowledges control-channel space only.
"""

from __future__ import annotations

import dataclasses
import enum
import struct

from ..endpoint import EP_STRUCT, NULL_EP, Endpoint

__all__ = ["ControlKind", "ControlMessage", "CONTROL_RECORD_SIZE"]

CONTROL_RECORD_SIZE = 64

_HEAD = struct.Struct("<B")
_BODY = struct.Struct("<IIIIIHI")
_USED = _HEAD.size + 2 * EP_STRUCT.size + _BODY.size
_PAD = bytes(CONTROL_RECORD_SIZE - _USED)


class ControlKind(enum.IntEnum):
    CONN_REQ = 1
    CONN_RESP = 2
    CREDIT = 3
    CLOSE = 4
    REFUSE = 5


@dataclasses.dataclass
class ControlMessage:
    kind: ControlKind
    src_ep: Endpoint = NULL_EP
    dst_ep: Endpoint = NULL_EP
    initiator_channel_key: int = 0
    responder_channel_key: int = 0
    read_mr: int = 0
    read_capacity: int = 0
    initial_credit: int = 0
    reason: int = 0
    ctrl_ack: int = 0

    def pack(self) -> bytes:
        return b"".join((
            _HEAD.pack(int(self.kind)), self.src_ep.pack(), self.dst_ep.pack(),
            _BODY.pack(self.initiator_channel_key, self.responder_channel_key, self.read_mr,
                       self.read_capacity, self.initial_credit, self.reason,
                       self.ctrl_ack & 0xFFFFFFFF),
            _PAD,
        ))

    @classmethod
    def unpack(cls, raw) -> "ControlMessage":
        if len(raw) != CONTROL_RECORD_SIZE:
            raise ValueError(f"control record must be {CONTROL_RECORD_SIZE} bytes, got {len(raw)}")
        (kind,) = _HEAD.unpack_from(raw, 0)
        pos = _HEAD.size
        src = Endpoint.unpack(*EP_STRUCT.unpack_from(raw, pos))
        dst = Endpoint.unpack(*EP_STRUCT.unpack_from(raw, pos + EP_STRUCT.size))
        ik, rk, mr, cap, credit, reason, ack = _BODY.unpack_from(raw, pos + 2 * EP_STRUCT.size)
        return cls(ControlKind(kind), src, dst, ik, rk, mr, cap, credit, reason, ack)
