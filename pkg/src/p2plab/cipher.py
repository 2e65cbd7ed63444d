"""Symmetric primitives and key schedule for the encrypted v2 transport.

The content cipher is ChaCha20-Poly1305 (RFC 8439) and the packet-length
cipher is the raw ChaCha20 block function keystream, both provided by the
``cryptography`` package. Key derivation is HKDF-SHA256. The key exchange
is a pluggable backend; the default backend is a deterministic commutative
hash construction, good enough for every behaviour studied here (nothing
in the lab depends on the hardness of the exchange, only on the symmetric
layer). A toy modular-exponentiation backend is included to show the
interface supports a "real" Diffie-Hellman shape.

All derivation labels and domain-separation constants are defined below.
They are local conventions of this lab and make both simulated endpoints
agree; wire compatibility with any production node is a non-goal.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from random import Random

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

PUBLIC_KEY_SIZE = 64
PRIVATE_KEY_SIZE = 32
SECRET_SIZE = 32
TAG_SIZE = 16
TERMINATOR_SIZE = 16
LENGTH_FIELD_SIZE = 3
MAX_CONTENTS_LEN = 2**24 - 1

# Keys rotate after this many packets to limit what a compromised key exposes.
REKEY_INTERVAL = 224

# HKDF conventions shared by both endpoints of a session.
HKDF_SALT = b"p2plab/v2/hkdf-salt/v1"
KD_INITIATOR_LENGTH = b"initiator-length-key"
KD_RESPONDER_LENGTH = b"responder-length-key"
KD_INITIATOR_CONTENT = b"initiator-content-key"
KD_RESPONDER_CONTENT = b"responder-content-key"
KD_SESSION_ID = b"session-id"
KD_INITIATOR_TERMINATOR = b"initiator-garbage-terminator"
KD_RESPONDER_TERMINATOR = b"responder-garbage-terminator"

# One-way step applied to a stream key at each rotation boundary.
REKEY_TAG = b"p2plab/v2/rekey/v1"

_EXCHANGE_PUB_LABEL = b"p2plab/v2/exchange-pub/v1"
_EXCHANGE_SECRET_LABEL = b"p2plab/v2/exchange-secret/v1"


class CipherError(Exception):
    """Base class for symmetric-layer failures."""


class MalformedKeyError(CipherError):
    """A key encoding had the wrong length."""


class LengthRangeError(CipherError):
    """Packet length outside the 3-byte encodable range."""


class AuthFailureError(CipherError):
    """AEAD tag verification failed; the stream is no longer usable."""


class TooShortError(CipherError):
    """Ciphertext shorter than the authentication tag."""


class StreamUnusableError(CipherError):
    """Operation attempted on a stream after an authentication failure."""


@dataclass(frozen=True)
class SharedSecret:
    data: bytes

    def __post_init__(self) -> None:
        if len(self.data) != SECRET_SIZE:
            raise MalformedKeyError(f"shared secret must be {SECRET_SIZE} bytes")


@dataclass(frozen=True)
class KeyPair:
    private_key: bytes
    public_encoding: bytes

    def __post_init__(self) -> None:
        if len(self.private_key) != PRIVATE_KEY_SIZE:
            raise MalformedKeyError(f"private key must be {PRIVATE_KEY_SIZE} bytes")
        if len(self.public_encoding) != PUBLIC_KEY_SIZE:
            raise MalformedKeyError(f"public encoding must be {PUBLIC_KEY_SIZE} bytes")


@dataclass(frozen=True)
class KeyMaterial:
    """The per-session symmetric keys, session id and garbage terminators."""

    initiator_length_key: bytes
    responder_length_key: bytes
    initiator_content_key: bytes
    responder_content_key: bytes
    session_id: bytes
    initiator_garbage_terminator: bytes
    responder_garbage_terminator: bytes


class KeyExchangeBackend:
    """Interface for the asymmetric exchange.

    Backends must be symmetric: ``shared_secret(a, pub_b)`` equals
    ``shared_secret(b, pub_a)`` for keypairs a, b.
    """

    name = "abstract"

    def generate_keypair(self, rng: Random) -> KeyPair:
        raise NotImplementedError

    def shared_secret(self, local: KeyPair, remote_public: bytes) -> SharedSecret:
        raise NotImplementedError


class HashExchange(KeyExchangeBackend):
    """Deterministic test exchange.

    The public encoding is a hash expansion of the private scalar and the
    secret is a hash over the unordered pair of public encodings, which is
    commutative by construction.
    """

    name = "hash"

    def generate_keypair(self, rng: Random) -> KeyPair:
        priv = rng.randbytes(PRIVATE_KEY_SIZE)
        pub = hashlib.sha512(_EXCHANGE_PUB_LABEL + priv).digest()
        return KeyPair(priv, pub)

    def shared_secret(self, local: KeyPair, remote_public: bytes) -> SharedSecret:
        _check_public(remote_public)
        lo, hi = sorted((local.public_encoding, remote_public))
        return SharedSecret(hashlib.sha256(_EXCHANGE_SECRET_LABEL + lo + hi).digest())


# Fixed 512-bit odd modulus derived from a label. Commutativity of modular
# exponentiation does not require primality, so this suffices for the lab.
_DH_MODULUS = (
    int.from_bytes(hashlib.sha512(b"p2plab/v2/dh-modulus/v1").digest(), "big")
    | (1 << 511)
    | 1
)
_DH_GENERATOR = 5


class ModExpExchange(KeyExchangeBackend):
    """Classic integer Diffie-Hellman over a fixed 512-bit modulus."""

    name = "modexp"

    def generate_keypair(self, rng: Random) -> KeyPair:
        priv = rng.randbytes(PRIVATE_KEY_SIZE)
        scalar = int.from_bytes(priv, "big") | 1
        point = pow(_DH_GENERATOR, scalar, _DH_MODULUS)
        return KeyPair(priv, point.to_bytes(PUBLIC_KEY_SIZE, "big"))

    def shared_secret(self, local: KeyPair, remote_public: bytes) -> SharedSecret:
        _check_public(remote_public)
        scalar = int.from_bytes(local.private_key, "big") | 1
        point = pow(int.from_bytes(remote_public, "big"), scalar, _DH_MODULUS)
        digest = hashlib.sha256(
            _EXCHANGE_SECRET_LABEL + point.to_bytes(PUBLIC_KEY_SIZE, "big")
        ).digest()
        return SharedSecret(digest)


BACKENDS: dict[str, KeyExchangeBackend] = {
    "hash": HashExchange(),
    "modexp": ModExpExchange(),
}
DEFAULT_BACKEND = BACKENDS["hash"]


def _check_public(encoding: bytes) -> None:
    if len(encoding) != PUBLIC_KEY_SIZE:
        raise MalformedKeyError(
            f"public encoding must be {PUBLIC_KEY_SIZE} bytes, got {len(encoding)}"
        )


def key_exchange(
    local: KeyPair, remote_public: bytes, backend: KeyExchangeBackend | None = None
) -> SharedSecret:
    return (backend or DEFAULT_BACKEND).shared_secret(local, remote_public)


def _hkdf(secret: SharedSecret, label: bytes, context: bytes, length: int) -> bytes:
    kdf = HKDF(
        algorithm=hashes.SHA256(),
        length=length,
        salt=HKDF_SALT,
        info=label + b"|" + context,
    )
    return kdf.derive(secret.data)


def derive_key_material(
    secret: SharedSecret, initiator_pub: bytes, responder_pub: bytes
) -> KeyMaterial:
    """Derive the four stream keys, session id and garbage terminators."""
    _check_public(initiator_pub)
    _check_public(responder_pub)
    ctx = initiator_pub + responder_pub
    return KeyMaterial(
        initiator_length_key=_hkdf(secret, KD_INITIATOR_LENGTH, ctx, 32),
        responder_length_key=_hkdf(secret, KD_RESPONDER_LENGTH, ctx, 32),
        initiator_content_key=_hkdf(secret, KD_INITIATOR_CONTENT, ctx, 32),
        responder_content_key=_hkdf(secret, KD_RESPONDER_CONTENT, ctx, 32),
        session_id=_hkdf(secret, KD_SESSION_ID, ctx, 32),
        initiator_garbage_terminator=_hkdf(
            secret, KD_INITIATOR_TERMINATOR, ctx, TERMINATOR_SIZE
        ),
        responder_garbage_terminator=_hkdf(
            secret, KD_RESPONDER_TERMINATOR, ctx, TERMINATOR_SIZE
        ),
    )


def chacha20_keystream(key: bytes, counter: int, nonce12: bytes, nbytes: int) -> bytes:
    """Raw ChaCha20 block-function keystream (RFC 8439 numbering)."""
    full_nonce = counter.to_bytes(4, "little") + nonce12
    enc = Cipher(algorithms.ChaCha20(key, full_nonce), mode=None).encryptor()
    return enc.update(bytes(nbytes))


def aead_encrypt(key: bytes, nonce12: bytes, aad: bytes, plaintext: bytes) -> bytes:
    """One-shot ChaCha20-Poly1305 seal; returns ciphertext || 16-byte tag."""
    return ChaCha20Poly1305(key).encrypt(nonce12, plaintext, aad)


def aead_decrypt(key: bytes, nonce12: bytes, aad: bytes, ct_and_tag: bytes) -> bytes:
    return ChaCha20Poly1305(key).decrypt(nonce12, ct_and_tag, aad)


def rekey(old_key: bytes) -> bytes:
    """One-way key rotation step; the old key is unrecoverable from the new."""
    return hashlib.sha256(old_key + REKEY_TAG).digest()


@dataclass
class CipherStream:
    """One direction of one packet stream; single-owner mutable.

    ``block_counter`` counts packets processed over the stream's lifetime and
    never decreases. ``packets_since_rekey`` stays in [0, REKEY_INTERVAL) and
    doubles as the per-epoch nonce counter, so both endpoints stay in lockstep
    as long as they process the same packet sequence.
    """

    key: bytes
    block_counter: int = 0
    packets_since_rekey: int = 0
    epoch: int = 0
    unusable: bool = field(default=False, repr=False)

    def _nonce(self) -> bytes:
        return self.packets_since_rekey.to_bytes(4, "little") + self.epoch.to_bytes(
            8, "little"
        )

    def _check_usable(self) -> None:
        if self.unusable:
            raise StreamUnusableError("stream flagged unusable after a failed open")

    def _advance(self) -> None:
        self.block_counter += 1
        self.packets_since_rekey += 1
        self.maybe_rekey()

    def maybe_rekey(self) -> "CipherStream":
        """Rotate the key once the packet cadence is reached."""
        if self.packets_since_rekey >= REKEY_INTERVAL:
            self.key = rekey(self.key)
            self.packets_since_rekey = 0
            self.epoch += 1
        return self

    def key_fingerprint(self) -> str:
        return hashlib.sha256(self.key).hexdigest()[:16]


class LengthCipherStream(CipherStream):
    """Encrypts the 3-byte length descriptor with block-function keystream."""

    def _keystream3(self) -> bytes:
        nonce12 = self.epoch.to_bytes(8, "little") + bytes(4)
        return chacha20_keystream(
            self.key, self.packets_since_rekey, nonce12, LENGTH_FIELD_SIZE
        )

    def encrypt_length(self, length: int) -> bytes:
        self._check_usable()
        if not 0 <= length <= MAX_CONTENTS_LEN:
            raise LengthRangeError(f"length {length} outside [0, 2^24-1]")
        ks = self._keystream3()
        out = bytes(a ^ b for a, b in zip(length.to_bytes(3, "little"), ks))
        self._advance()
        return out

    def decrypt_length(self, data: bytes) -> int:
        self._check_usable()
        if len(data) != LENGTH_FIELD_SIZE:
            raise LengthRangeError("length descriptor must be 3 bytes")
        ks = self._keystream3()
        self._advance()
        return int.from_bytes(bytes(a ^ b for a, b in zip(data, ks)), "little")


class ContentCipherStream(CipherStream):
    """Seals/opens packet contents with ChaCha20-Poly1305."""

    def aead_seal(self, associated_data: bytes, plaintext: bytes) -> bytes:
        self._check_usable()
        out = aead_encrypt(self.key, self._nonce(), associated_data, plaintext)
        self._advance()
        return out

    def aead_open(self, associated_data: bytes, ct_and_tag: bytes) -> bytes:
        self._check_usable()
        if len(ct_and_tag) < TAG_SIZE:
            raise TooShortError(f"ciphertext {len(ct_and_tag)} bytes < tag size")
        try:
            out = aead_decrypt(self.key, self._nonce(), associated_data, ct_and_tag)
        except InvalidTag:
            self.unusable = True
            raise AuthFailureError("tag mismatch") from None
        self._advance()
        return out


def generate_keypair(rng: Random, backend: KeyExchangeBackend | None = None) -> KeyPair:
    return (backend or DEFAULT_BACKEND).generate_keypair(rng)
