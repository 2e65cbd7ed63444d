"""Packet codec and connection-establishment state machines.

A v2 wire packet is a 3-byte encrypted length descriptor followed by the
ciphertext of (1-byte flags || contents) and a 16-byte tag, so the wire
always carries exactly 20 bytes more than the serialized contents. The
handshake runs in one and a half round trips:

  1. initiator:  public key || garbage
  2. responder:  public key || garbage || garbage terminator || VERSION packet
  3. initiator:  garbage terminator || VERSION packet

where the VERSION packets are empty-contents packets that complete version
negotiation. The legacy v1 transport is plaintext with a 24-byte header
(magic, command, length, checksum); its VERSION handshake payload is always
126 bytes, which is what the first-payload protocol discriminator keys on.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from random import Random

from . import cipher, messages
from .cipher import (
    ContentCipherStream,
    KeyMaterial,
    KeyPair,
    LengthCipherStream,
    TERMINATOR_SIZE,
)

WIRE_OVERHEAD = 20  # length descriptor + flags + tag
MIN_WIRE_SIZE = 20
MAX_WIRE_SIZE = cipher.MAX_CONTENTS_LEN + 19
DECOY_FLAG = 0x80

GARBAGE_MAX = 512
# The legacy VERSION payload is exactly this long; the initiator's first v2
# flight (64-byte key + garbage) must never collide with it, so the garbage
# sampler skips the one length that would.
V1_FIRST_PAYLOAD_SIZE = 126
_FORBIDDEN_GARBAGE_LEN = V1_FIRST_PAYLOAD_SIZE - cipher.PUBLIC_KEY_SIZE
# A peer whose terminator has not appeared after this many bytes is dropped.
GARBAGE_SEARCH_LIMIT = 4096


class TransportError(Exception):
    """Base class; every decode-side failure means close the connection."""


class TooLargeError(TransportError):
    """Decoded length descriptor disagrees with the framing."""


class AuthFailure(TransportError):
    """Packet tag did not verify."""


class OversizeContentsError(TransportError):
    pass


class ProtocolError(TransportError):
    """Handshake violation (bad key length, missing terminator, bad VERSION)."""


class Protocol(enum.Enum):
    V1 = "v1"
    V2 = "v2"


class Role(enum.Enum):
    INITIATOR = "initiator"
    RESPONDER = "responder"


class Phase(enum.IntEnum):
    KEY_EXCHANGE = 0
    VERSION_NEGOTIATION = 1
    APPLICATION = 2


class FallbackDecision(enum.Enum):
    RETRY_V1 = "retry_v1"
    GIVE_UP = "give_up"


@dataclass(frozen=True)
class PacketContents:
    """Decrypted view of one packet: flags byte plus serialized contents."""

    flags: int = 0
    contents: bytes = b""

    @property
    def is_decoy(self) -> bool:
        return bool(self.flags & DECOY_FLAG)

    @property
    def is_empty(self) -> bool:
        return len(self.contents) == 0

    @property
    def type_id(self) -> int | None:
        if not self.contents:
            return None
        if self.contents[0] != 0:
            return self.contents[0]
        return int.from_bytes(self.contents[1:3], "big")

    @property
    def message_body(self) -> bytes:
        if not self.contents:
            return b""
        return self.contents[1:] if self.contents[0] != 0 else self.contents[3:]

    @classmethod
    def empty(cls) -> "PacketContents":
        return cls()

    @classmethod
    def decoy(cls, padding: bytes = b"") -> "PacketContents":
        return cls(flags=DECOY_FLAG, contents=padding)

    @classmethod
    def for_message(cls, msg: messages.Message) -> "PacketContents":
        return cls(contents=encode_type_id(msg.type_id) + msg.body())

    def to_message(self) -> messages.Message:
        if self.is_empty:
            raise ProtocolError("empty packet carries no message")
        return messages.parse_body(self.type_id, self.message_body)


def encode_type_id(type_id: int) -> bytes:
    """Short 1-byte form for ids 1..255, 3-byte long form above that."""
    if 1 <= type_id <= 255:
        return bytes([type_id])
    if type_id <= 0xFFFF:
        return b"\x00" + type_id.to_bytes(2, "big")
    raise ProtocolError(f"type id {type_id} not encodable")


@dataclass(frozen=True)
class WirePacket:
    encrypted_length: bytes
    ciphertext: bytes

    @property
    def wire(self) -> bytes:
        return self.encrypted_length + self.ciphertext

    def __len__(self) -> int:
        return len(self.encrypted_length) + len(self.ciphertext)


class V2Codec:
    """Directional pair of length/content streams for one endpoint."""

    def __init__(self, material: KeyMaterial, role: Role):
        if role is Role.INITIATOR:
            send_len, send_content = (
                material.initiator_length_key,
                material.initiator_content_key,
            )
            recv_len, recv_content = (
                material.responder_length_key,
                material.responder_content_key,
            )
        else:
            send_len, send_content = (
                material.responder_length_key,
                material.responder_content_key,
            )
            recv_len, recv_content = (
                material.initiator_length_key,
                material.initiator_content_key,
            )
        self.send_length = LengthCipherStream(send_len)
        self.send_content = ContentCipherStream(send_content)
        self.recv_length = LengthCipherStream(recv_len)
        self.recv_content = ContentCipherStream(recv_content)

    def encode(self, pkt: PacketContents) -> WirePacket:
        if len(pkt.contents) > cipher.MAX_CONTENTS_LEN:
            raise OversizeContentsError(f"{len(pkt.contents)} byte contents")
        enc_len = self.send_length.encrypt_length(len(pkt.contents))
        ct = self.send_content.aead_seal(enc_len, bytes([pkt.flags]) + pkt.contents)
        return WirePacket(enc_len, ct)

    def decode(self, wire: bytes) -> PacketContents:
        if len(wire) < MIN_WIRE_SIZE:
            raise TooLargeError(f"{len(wire)}-byte fragment below minimum packet size")
        decoded_len = self.recv_length.decrypt_length(wire[:3])
        if decoded_len != len(wire) - WIRE_OVERHEAD:
            # A replayed or corrupted descriptor decodes to garbage under the
            # advanced keystream; framing disagreement is fatal.
            self.recv_length.unusable = True
            self.recv_content.unusable = True
            raise TooLargeError(
                f"declared {decoded_len} bytes, framing holds {len(wire) - WIRE_OVERHEAD}"
            )
        try:
            plain = self.recv_content.aead_open(wire[:3], wire[3:])
        except cipher.AuthFailureError as exc:
            self.recv_length.unusable = True
            raise AuthFailure(str(exc)) from None
        return PacketContents(flags=plain[0], contents=plain[1:])


@dataclass
class TransportSession:
    """Established connection endpoint, either plaintext v1 or encrypted v2."""

    protocol: Protocol
    role: Role
    codec: V2Codec | None = None
    session_id: bytes = b""
    must_disconnect: bool = False

    def encode_packet(self, pkt: PacketContents) -> bytes:
        if self.protocol is not Protocol.V2:
            raise ProtocolError("v1 sessions use encode_message")
        return self.codec.encode(pkt).wire

    def decode_packet(self, wire: bytes) -> PacketContents:
        if self.protocol is not Protocol.V2:
            raise ProtocolError("v1 sessions use decode_segment")
        try:
            return self.codec.decode(wire)
        except TransportError:
            self.must_disconnect = True
            raise

    def encode_message(self, msg: messages.Message, decoy: bool = False) -> bytes:
        if self.protocol is Protocol.V1:
            return encode_v1_message(msg)
        pkt = PacketContents.decoy() if decoy else PacketContents.for_message(msg)
        return self.encode_packet(pkt)

    def decode_segment(self, data: bytes) -> list[messages.Message]:
        """Parse a segment that may hold several back-to-back packets.

        Decoy packets are dropped here. Any framing or authentication
        failure marks the session must-disconnect and re-raises.
        """
        if self.protocol is Protocol.V1:
            try:
                return decode_v1_segment(data)
            except messages.MessageError as exc:
                self.must_disconnect = True
                raise ProtocolError(str(exc)) from None
        out = []
        offset = 0
        while offset < len(data):
            decoded_len = self.codec.recv_length.decrypt_length(data[offset : offset + 3])
            end = offset + decoded_len + WIRE_OVERHEAD
            if decoded_len > cipher.MAX_CONTENTS_LEN or end > len(data):
                self.must_disconnect = True
                self.codec.recv_length.unusable = True
                self.codec.recv_content.unusable = True
                raise TooLargeError(f"declared {decoded_len} bytes, segment exhausted")
            try:
                plain = self.codec.recv_content.aead_open(
                    data[offset : offset + 3], data[offset + 3 : end]
                )
            except cipher.AuthFailureError as exc:
                self.must_disconnect = True
                raise AuthFailure(str(exc)) from None
            pkt = PacketContents(flags=plain[0], contents=plain[1:])
            if not pkt.is_decoy and not pkt.is_empty:
                out.append(pkt.to_message())
            offset = end
        return out


def sample_garbage_len(rng: Random) -> int:
    n = rng.randint(0, GARBAGE_MAX - 1)
    # skip the single length that would masquerade as a v1 VERSION payload
    return n if n != _FORBIDDEN_GARBAGE_LEN else GARBAGE_MAX


@dataclass
class HandshakeState:
    """Three-flight connection establishment for one endpoint.

    Drive with ``step``: the initiator calls ``step(None)`` to produce the
    first flight, then each side feeds received bytes in and sends whatever
    comes back out until ``phase`` is APPLICATION, at which point ``session``
    is ready.
    """

    role: Role
    rng: Random
    backend: cipher.KeyExchangeBackend | None = None
    decoy_count: int = 0
    decoy_size: int = 32
    local: KeyPair | None = None
    phase: Phase = Phase.KEY_EXCHANGE
    remote_public: bytes = b""
    material: KeyMaterial | None = None
    session: TransportSession | None = None
    _pending_garbage: bytes = field(default=b"", repr=False)
    _sent_first_flight: bool = False
    _seen_remote_terminator: bool = False
    _sent_version: bool = False

    def __post_init__(self):
        if self.local is None:
            self.local = cipher.generate_keypair(self.rng, self.backend)

    @property
    def session_id(self) -> bytes:
        return self.material.session_id if self.material else b""

    def _derive(self, initiator_pub: bytes, responder_pub: bytes) -> None:
        secret = cipher.key_exchange(self.local, self.remote_public, self.backend)
        self.material = cipher.derive_key_material(secret, initiator_pub, responder_pub)
        self.session = TransportSession(
            Protocol.V2,
            self.role,
            codec=V2Codec(self.material, self.role),
            session_id=self.material.session_id,
        )

    def _version_flight(self) -> bytes:
        """Our garbage terminator, empty VERSION packet and optional decoys."""
        term = (
            self.material.initiator_garbage_terminator
            if self.role is Role.INITIATOR
            else self.material.responder_garbage_terminator
        )
        out = [term, self.session.encode_packet(PacketContents.empty())]
        for _ in range(self.decoy_count):
            pad = self.rng.randbytes(self.decoy_size)
            out.append(self.session.encode_packet(PacketContents.decoy(pad)))
        self._sent_version = True
        return b"".join(out)

    def _absorb_version_packet(self, data: bytes) -> None:
        pkt = self.session.decode_packet(data)
        if not pkt.is_empty:
            raise ProtocolError("version negotiation expects an empty packet")
        self._seen_remote_terminator = True

    def _find_terminator(self, haystack: bytes, terminator: bytes) -> int:
        idx = haystack.find(terminator)
        if idx < 0 or idx > GARBAGE_SEARCH_LIMIT:
            raise ProtocolError("garbage terminator not found within bound")
        return idx

    def step(self, incoming: bytes | None) -> bytes:
        if self.phase is Phase.APPLICATION:
            raise ProtocolError("handshake already complete")
        if self.role is Role.INITIATOR:
            return self._step_initiator(incoming)
        return self._step_responder(incoming)

    def _step_initiator(self, incoming: bytes | None) -> bytes:
        if incoming is None:
            if self._sent_first_flight:
                raise ProtocolError("first flight already sent")
            self._sent_first_flight = True
            garbage = self.rng.randbytes(sample_garbage_len(self.rng))
            return self.local.public_encoding + garbage
        if not self._sent_first_flight:
            raise ProtocolError("initiator must send the first flight")
        # flight 2: responder pub || garbage || terminator || VERSION packet
        if len(incoming) < cipher.PUBLIC_KEY_SIZE:
            raise ProtocolError("short key-exchange flight")
        self.remote_public = incoming[: cipher.PUBLIC_KEY_SIZE]
        self._derive(self.local.public_encoding, self.remote_public)
        rest = incoming[cipher.PUBLIC_KEY_SIZE :]
        idx = self._find_terminator(rest, self.material.responder_garbage_terminator)
        self.phase = Phase.VERSION_NEGOTIATION
        self._absorb_version_packet(rest[idx + TERMINATOR_SIZE :])
        flight = self._version_flight()
        self.phase = Phase.APPLICATION
        return flight

    def _step_responder(self, incoming: bytes | None) -> bytes:
        if incoming is None:
            raise ProtocolError("responder waits for the initiator")
        if not self.remote_public:
            # flight 1: initiator pub || garbage (terminator arrives later)
            if len(incoming) < cipher.PUBLIC_KEY_SIZE:
                raise ProtocolError("short key-exchange flight")
            self.remote_public = incoming[: cipher.PUBLIC_KEY_SIZE]
            self._pending_garbage = incoming[cipher.PUBLIC_KEY_SIZE :]
            self._derive(self.remote_public, self.local.public_encoding)
            garbage = self.rng.randbytes(sample_garbage_len(self.rng))
            self.phase = Phase.VERSION_NEGOTIATION
            return self.local.public_encoding + garbage + self._version_flight()
        # flight 3: terminator || VERSION packet, possibly preceded by garbage
        buffered = self._pending_garbage + incoming
        idx = self._find_terminator(buffered, self.material.initiator_garbage_terminator)
        self._absorb_version_packet(buffered[idx + TERMINATOR_SIZE :])
        self._pending_garbage = b""
        self.phase = Phase.APPLICATION
        return b""


def run_handshake(
    initiator: HandshakeState, responder: HandshakeState
) -> tuple[TransportSession, TransportSession]:
    """Drive both states to completion in-memory (tests and local tools)."""
    flight1 = initiator.step(None)
    flight2 = responder.step(flight1)
    flight3 = initiator.step(flight2)
    responder.step(flight3)
    return initiator.session, responder.session


def v1_fallback_decision(phase_at_close: Phase, countermeasure_c3c: bool) -> FallbackDecision:
    """Initiator-side rule after a v2 attempt dies.

    A close (FIN or RST) during the key-exchange window triggers a plaintext
    retry; the no-retry countermeasure disables that, and a close after key
    exchange never retries.
    """
    if countermeasure_c3c:
        return FallbackDecision.GIVE_UP
    if phase_at_close is Phase.KEY_EXCHANGE:
        return FallbackDecision.RETRY_V1
    return FallbackDecision.GIVE_UP


@dataclass(frozen=True)
class ProtocolGuess:
    protocol: Protocol
    ambiguous: bool = False


def first_payload_protocol(first_payload_len: int) -> ProtocolGuess:
    """Classify a connection attempt from its first payload length.

    The legacy handshake opens with exactly 126 bytes; the v2 handshake opens
    with a 64-byte key plus garbage and never serialises to that length.
    Lengths below the key size cannot be a well-formed opening of either kind
    and are flagged ambiguous (still treated as v2 candidates).
    """
    if first_payload_len == V1_FIRST_PAYLOAD_SIZE:
        return ProtocolGuess(Protocol.V1)
    ambiguous = first_payload_len < cipher.PUBLIC_KEY_SIZE
    return ProtocolGuess(Protocol.V2, ambiguous=ambiguous)


def encode_v1_message(msg: messages.Message) -> bytes:
    import hashlib

    body = msg.v1_body()
    command = msg.name.encode().ljust(12, b"\x00")
    checksum = hashlib.sha256(body).digest()[:4]
    return (
        messages.V1_MAGIC
        + command
        + len(body).to_bytes(4, "little")
        + checksum
        + body
    )


def decode_v1_segment(data: bytes) -> list[messages.Message]:
    import hashlib

    out = []
    offset = 0
    while offset < len(data):
        header = data[offset : offset + messages.V1_HEADER_SIZE]
        if len(header) < messages.V1_HEADER_SIZE or header[:4] != messages.V1_MAGIC:
            raise messages.MessageError("bad v1 header")
        command = header[4:16].rstrip(b"\x00").decode(errors="replace")
        body_len = int.from_bytes(header[16:20], "little")
        body = data[offset + messages.V1_HEADER_SIZE : offset + messages.V1_HEADER_SIZE + body_len]
        if len(body) != body_len:
            raise messages.MessageError("truncated v1 body")
        if hashlib.sha256(body).digest()[:4] != header[20:24]:
            raise messages.MessageError("v1 checksum mismatch")
        type_id = messages.TYPE_IDS.get(command)
        if type_id is None:
            raise messages.MessageError(f"unknown v1 command {command!r}")
        out.append(messages.parse_body(type_id, body, v1=True))
        offset += messages.V1_HEADER_SIZE + body_len
    return out


def hexdump(data: bytes, width: int = 16) -> str:
    """Trace-friendly hex dump."""
    lines = []
    for i in range(0, len(data), width):
        chunk = data[i : i + width]
        hexpart = " ".join(f"{b:02x}" for b in chunk)
        text = "".join(chr(b) if 32 <= b < 127 else "." for b in chunk)
        lines.append(f"{i:08x}  {hexpart:<{width * 3}} {text}")
    return "\n".join(lines)
