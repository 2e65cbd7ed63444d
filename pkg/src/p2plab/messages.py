"""Application message model shared by the transport codecs and the simulator.

Sizes are the load-bearing property here: repeated-element messages are a
count prefix plus fixed-size units (36-byte inventory vectors, 30-byte
address records, 81-byte block headers) and the handshake messages have
pinned sizes so byte-level behaviour is deterministic. Field semantics are
only modelled as far as the node behaviours need them (ping nonces, header
timestamps, gossiped addresses).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

MSG_VERSION = 1
MSG_VERACK = 2
MSG_PING = 3
MSG_PONG = 4
MSG_INV = 5
MSG_GETDATA = 6
MSG_ADDR = 7
MSG_HEADERS = 8
MSG_GETHEADERS = 9
MSG_BLOCK = 10

TYPE_NAMES = {
    MSG_VERSION: "version",
    MSG_VERACK: "verack",
    MSG_PING: "ping",
    MSG_PONG: "pong",
    MSG_INV: "inv",
    MSG_GETDATA: "getdata",
    MSG_ADDR: "addr",
    MSG_HEADERS: "headers",
    MSG_GETHEADERS: "getheaders",
    MSG_BLOCK: "block",
}
TYPE_IDS = {v: k for k, v in TYPE_NAMES.items()}

INV_VEC_SIZE = 36
ADDR_ENTRY_SIZE = 30
BLOCK_HEADER_SIZE = 81
PING_BODY_SIZE = 8
# Handshake bodies are pinned so payload sizes are reproducible. The legacy
# plaintext framing serialises VERSION one byte shorter than the v2 body,
# which puts the legacy first payload at exactly 126 bytes on the wire.
VERSION_BODY_SIZE_V2 = 103
VERSION_BODY_SIZE_V1 = 102
GETHEADERS_BODY_SIZE = 69

MAX_INV_ENTRIES = 50_000

V1_MAGIC = b"\xf9\xbe\xb4\xd9"
V1_HEADER_SIZE = 24


class MessageError(Exception):
    pass


def encode_count(n: int) -> bytes:
    """Variable-length count: 1 byte below 253, else 0xfd + 2-byte LE."""
    if n < 0:
        raise MessageError("negative count")
    if n < 253:
        return bytes([n])
    if n <= 0xFFFF:
        return b"\xfd" + n.to_bytes(2, "little")
    raise MessageError(f"count {n} exceeds the 2-byte encoding cap")


def decode_count(data: bytes) -> tuple[int, int]:
    """Returns (count, bytes consumed)."""
    if not data:
        raise MessageError("empty count field")
    if data[0] < 253:
        return data[0], 1
    if data[0] == 0xFD:
        if len(data) < 3:
            raise MessageError("truncated 3-byte count")
        return int.from_bytes(data[1:3], "little"), 3
    raise MessageError("count encodings beyond 2^16-1 are not modelled")


@dataclass(frozen=True)
class AddrEntry:
    """One gossiped address: timestamp, service bits, 16-byte IP, port."""

    timestamp: int
    services: int
    ip: bytes
    port: int

    def encode(self) -> bytes:
        if len(self.ip) != 16:
            raise MessageError("address entries carry 16-byte IPs")
        return (
            struct.pack("<IQ", self.timestamp & 0xFFFFFFFF, self.services)
            + self.ip
            + self.port.to_bytes(2, "big")
        )

    @classmethod
    def decode(cls, data: bytes) -> "AddrEntry":
        ts, services = struct.unpack("<IQ", data[:12])
        return cls(ts, services, data[12:28], int.from_bytes(data[28:30], "big"))


@dataclass(frozen=True)
class BlockHeader:
    """81-byte header record; `timestamp` drives staleness checks."""

    height: int
    prev_hash: bytes
    merkle_root: bytes
    timestamp: int
    bits: int = 0
    nonce: int = 0

    def encode(self) -> bytes:
        return (
            struct.pack("<I", self.height & 0xFFFFFFFF)
            + self.prev_hash
            + self.merkle_root
            + struct.pack("<III", self.timestamp & 0xFFFFFFFF, self.bits, self.nonce)
            + b"\x00"
        )

    @classmethod
    def decode(cls, data: bytes) -> "BlockHeader":
        height = struct.unpack("<I", data[0:4])[0]
        ts, bits, nonce = struct.unpack("<III", data[68:80])
        return cls(height, data[4:36], data[36:68], ts, bits, nonce)


@dataclass(frozen=True)
class Message:
    type_id: int
    # Type-specific payload views; only the fields a type uses are set.
    nonce: int = 0
    inv: tuple = ()  # (kind, 32-byte hash) pairs
    addrs: tuple = ()  # AddrEntry
    headers: tuple = ()  # BlockHeader
    locator: bytes = b"\x00" * 32
    stop: bytes = b"\x00" * 32
    services: int = 0
    height: int = 0
    user_agent: str = ""
    raw_body: bytes = b""  # block payloads and unknown types

    @property
    def name(self) -> str:
        return TYPE_NAMES.get(self.type_id, f"type{self.type_id}")

    def body(self) -> bytes:
        """Serialized v2 body bytes."""
        return _encode_body(self, v1=False)

    def v1_body(self) -> bytes:
        return _encode_body(self, v1=True)


def ping(nonce: int) -> Message:
    return Message(MSG_PING, nonce=nonce)


def pong(nonce: int) -> Message:
    return Message(MSG_PONG, nonce=nonce)


def verack() -> Message:
    return Message(MSG_VERACK)


def version(services: int, height: int, nonce: int, user_agent: str) -> Message:
    return Message(
        MSG_VERSION,
        services=services,
        height=height,
        nonce=nonce,
        user_agent=user_agent[:64],
    )


def inv(entries) -> Message:
    return Message(MSG_INV, inv=tuple(entries))


def getdata(entries) -> Message:
    return Message(MSG_GETDATA, inv=tuple(entries))


def addr(entries) -> Message:
    return Message(MSG_ADDR, addrs=tuple(entries))


def headers(entries) -> Message:
    return Message(MSG_HEADERS, headers=tuple(entries))


def getheaders(locator: bytes, stop: bytes = b"\x00" * 32) -> Message:
    return Message(MSG_GETHEADERS, locator=locator, stop=stop)


def block(raw_body: bytes) -> Message:
    return Message(MSG_BLOCK, raw_body=raw_body)


def _pack_user_agent(ua: str, width: int) -> bytes:
    raw = ua.encode()[: width - 1]
    return bytes([len(raw)]) + raw + bytes(width - 1 - len(raw))


def _unpack_user_agent(data: bytes) -> str:
    n = data[0]
    return data[1 : 1 + n].decode(errors="replace")


def _encode_body(msg: Message, v1: bool) -> bytes:
    t = msg.type_id
    if t == MSG_VERSION:
        ua_width = 71 if not v1 else 70
        body = (
            struct.pack("<IQQQI", 2, msg.services, 0, msg.nonce, msg.height)
            + _pack_user_agent(msg.user_agent, ua_width)
        )
        want = VERSION_BODY_SIZE_V1 if v1 else VERSION_BODY_SIZE_V2
        assert len(body) == want, (len(body), want)
        return body
    if t == MSG_VERACK:
        return b""
    if t in (MSG_PING, MSG_PONG):
        return msg.nonce.to_bytes(PING_BODY_SIZE, "little")
    if t in (MSG_INV, MSG_GETDATA):
        if len(msg.inv) > MAX_INV_ENTRIES:
            raise MessageError("inventory count over cap")
        out = [encode_count(len(msg.inv))]
        for kind, h in msg.inv:
            out.append(struct.pack("<I", kind) + h)
        return b"".join(out)
    if t == MSG_ADDR:
        out = [encode_count(len(msg.addrs))]
        out.extend(entry.encode() for entry in msg.addrs)
        return b"".join(out)
    if t == MSG_HEADERS:
        out = [encode_count(len(msg.headers))]
        out.extend(h.encode() for h in msg.headers)
        return b"".join(out)
    if t == MSG_GETHEADERS:
        body = struct.pack("<I", 2) + b"\x01" + msg.locator + msg.stop
        assert len(body) == GETHEADERS_BODY_SIZE
        return body
    if t == MSG_BLOCK:
        return msg.raw_body
    raise MessageError(f"cannot encode type {t}")


def parse_body(type_id: int, body: bytes, v1: bool = False) -> Message:
    if type_id == MSG_VERSION:
        _, services, _, nonce, height = struct.unpack("<IQQQI", body[:32])
        return Message(
            MSG_VERSION,
            services=services,
            nonce=nonce,
            height=height,
            user_agent=_unpack_user_agent(body[32:]),
        )
    if type_id == MSG_VERACK:
        return verack()
    if type_id in (MSG_PING, MSG_PONG):
        if len(body) != PING_BODY_SIZE:
            raise MessageError("bad ping/pong body size")
        return Message(type_id, nonce=int.from_bytes(body, "little"))
    if type_id in (MSG_INV, MSG_GETDATA):
        n, off = decode_count(body)
        entries = []
        for _ in range(n):
            kind = struct.unpack("<I", body[off : off + 4])[0]
            entries.append((kind, body[off + 4 : off + 36]))
            off += INV_VEC_SIZE
        return Message(type_id, inv=tuple(entries))
    if type_id == MSG_ADDR:
        n, off = decode_count(body)
        entries = []
        for _ in range(n):
            entries.append(AddrEntry.decode(body[off : off + ADDR_ENTRY_SIZE]))
            off += ADDR_ENTRY_SIZE
        return Message(type_id, addrs=tuple(entries))
    if type_id == MSG_HEADERS:
        n, off = decode_count(body)
        entries = []
        for _ in range(n):
            entries.append(BlockHeader.decode(body[off : off + BLOCK_HEADER_SIZE]))
            off += BLOCK_HEADER_SIZE
        return Message(type_id, headers=tuple(entries))
    if type_id == MSG_GETHEADERS:
        return Message(MSG_GETHEADERS, locator=body[5:37], stop=body[37:69])
    if type_id == MSG_BLOCK:
        return block(body)
    raise MessageError(f"cannot parse type {type_id}")
