"""Cryptographic primitives for the transport: signatures, AEAD, Diffie-Hellman
key agreement, and the HMAC-based key expansion that produces directional
key sets.

Everything here is a pure function of its inputs plus an optional injectable
``random.Random`` for reproducible key generation in tests.
"""

from __future__ import annotations

import hashlib
import hmac
import secrets
from dataclasses import dataclass
from random import Random

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

AEAD_KEY_LEN = 16  # AES-128-GCM
NONCE_LEN = 12  # 4-byte IV prefix + 8-byte sequence number
KEY_MATERIAL_LEN = 40  # 16 + 16 + 4 + 4
GCM_TAG_LEN = 16

LABEL_INITIAL = b"QUIC key expansion"
LABEL_FORWARD_SECURE = b"QUIC forward secure key expansion"
# The config signature label; one constant used by both signer and verifier.
LABEL_SCFG_SIGNATURE = b"QUIC Server Config Signature"

_HASH_LEN = 32


class CryptoError(Exception):
    """Raised for unusable crypto inputs (bad lengths, unknown groups)."""


# ---------------------------------------------------------------------------
# Signature scheme (ECDSA-P256-SHA256 behind a keygen/sign/verify interface)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SignatureKeyPair:
    """Public/secret key pair. ``pk`` is a SEC1 uncompressed point, ``sk``
    the 32-byte private scalar."""

    pk: bytes
    sk: bytes


_P256_ORDER = 0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551


def kg(lam: int = 128, rng: Random | None = None) -> SignatureKeyPair:
    """Generate a signing key pair at the requested security level.

    Only the 128-bit level (P-256) is supported. Passing ``rng`` makes the
    result reproducible; otherwise the key is drawn from the OS CSPRNG.
    """
    if lam != 128:
        raise CryptoError(f"unsupported security parameter: {lam}")
    if rng is None:
        priv = ec.generate_private_key(ec.SECP256R1())
    else:
        scalar = rng.randrange(1, _P256_ORDER)
        priv = ec.derive_private_key(scalar, ec.SECP256R1())
    pk = priv.public_key().public_bytes(Encoding.X962, PublicFormat.UncompressedPoint)
    sk = priv.private_numbers().private_value.to_bytes(32, "big")
    return SignatureKeyPair(pk=pk, sk=sk)


def sign(sk: bytes, m: bytes) -> bytes:
    priv = ec.derive_private_key(int.from_bytes(sk, "big"), ec.SECP256R1())
    return priv.sign(m, ec.ECDSA(hashes.SHA256()))


def ver(pk: bytes, m: bytes, sigma: bytes) -> bool:
    """Verify a signature. Returns False (never raises) on any malformed or
    mismatching input."""
    try:
        pub = ec.EllipticCurvePublicKey.from_encoded_point(ec.SECP256R1(), pk)
        pub.verify(sigma, m, ec.ECDSA(hashes.SHA256()))
        return True
    except (InvalidSignature, ValueError, TypeError):
        return False


# ---------------------------------------------------------------------------
# AEAD (AES-128-GCM: 128-bit key, 96-bit nonce, 128-bit tag)
# ---------------------------------------------------------------------------

def aead_seal(key: bytes, nonce: bytes, header: bytes, m: bytes) -> bytes:
    """Seal ``m`` under ``key``/``nonce`` authenticating ``header``.

    Returns ciphertext followed by the 16-byte tag.
    """
    if len(key) != AEAD_KEY_LEN:
        raise CryptoError(f"AEAD key must be {AEAD_KEY_LEN} bytes")
    if len(nonce) != NONCE_LEN:
        raise CryptoError(f"nonce must be {NONCE_LEN} bytes")
    return AESGCM(key).encrypt(nonce, m, header)


def aead_open(key: bytes, nonce: bytes, header: bytes, c: bytes) -> bytes | None:
    """Open a sealed payload. Returns None on any authentication failure;
    the caller is expected to drop the packet."""
    if len(key) != AEAD_KEY_LEN or len(nonce) != NONCE_LEN:
        return None
    try:
        return AESGCM(key).decrypt(nonce, c, header)
    except Exception:
        return None


# ---------------------------------------------------------------------------
# Diffie-Hellman groups
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DhKeyPair:
    group_id: int
    secret: bytes
    public: bytes


class X25519Group:
    """Production group: X25519. Public values are the raw 32-byte u-coordinate."""

    group_id = 1

    def keypair(self, rng: Random | None = None) -> DhKeyPair:
        raw = rng.randbytes(32) if rng is not None else secrets.token_bytes(32)
        priv = X25519PrivateKey.from_private_bytes(raw)
        pub = priv.public_key().public_bytes_raw()
        return DhKeyPair(self.group_id, raw, pub)

    def validate_public(self, public: bytes) -> None:
        if len(public) != 32:
            raise CryptoError("x25519 public value must be 32 bytes")
        if public == b"\x00" * 32:
            raise CryptoError("degenerate x25519 public value")

    def shared(self, secret: bytes, peer_public: bytes) -> bytes:
        self.validate_public(peer_public)
        priv = X25519PrivateKey.from_private_bytes(secret)
        out = priv.exchange(X25519PublicKey.from_public_bytes(peer_public))
        if out == b"\x00" * 32:
            raise CryptoError("x25519 produced an all-zero shared secret")
        return out


class ModGroup:
    """Tiny multiplicative group mod a prime, only for brute-force oracle
    tests. Elements are 4-byte big-endian integers."""

    group_id = 2

    def __init__(self, generator: int = 2, prime: int = 23):
        self.generator = generator
        self.prime = prime

    def keypair(self, rng: Random | None = None) -> DhKeyPair:
        r = rng if rng is not None else Random(secrets.randbits(64))
        x = r.randrange(1, self.prime - 1)
        y = pow(self.generator, x, self.prime)
        return DhKeyPair(self.group_id, x.to_bytes(4, "big"), y.to_bytes(4, "big"))

    def validate_public(self, public: bytes) -> None:
        if len(public) != 4:
            raise CryptoError("mod-group public value must be 4 bytes")
        y = int.from_bytes(public, "big")
        if y <= 1 or y >= self.prime - 1:
            raise CryptoError("degenerate mod-group element")

    def shared(self, secret: bytes, peer_public: bytes) -> bytes:
        self.validate_public(peer_public)
        x = int.from_bytes(secret, "big")
        y = int.from_bytes(peer_public, "big")
        return pow(y, x, self.prime).to_bytes(4, "big")


GROUPS = {g.group_id: g for g in (X25519Group(), ModGroup())}


def dh_keypair(group_id: int = 1, rng: Random | None = None) -> DhKeyPair:
    try:
        group = GROUPS[group_id]
    except KeyError:
        raise CryptoError(f"unknown DH group {group_id}") from None
    return group.keypair(rng)


def dh_shared(pair: DhKeyPair, peer_public: bytes) -> bytes:
    group = GROUPS.get(pair.group_id)
    if group is None:
        raise CryptoError(f"unknown DH group {pair.group_id}")
    return group.shared(pair.secret, peer_public)


# ---------------------------------------------------------------------------
# Key expansion and key sets
# ---------------------------------------------------------------------------

def extract_expand(ipm: bytes, nonc: bytes, cid: int, m: bytes, l: int,
                   init: int) -> bytes:
    """Expand shared key material into ``l`` bytes of output.

    ``ms = HMAC-SHA256(nonc, ipm)`` is the extracted secret; the output is
    the chained expansion ``T(i) = HMAC(ms, T(i-1) || info || 0x0i)`` with
    ``info = label || 0x00 || cid || m``. The label differs between the
    initial (``init=1``) and forward-secure (``init=0``) derivations, so the
    two schedules can never collide.
    """
    if l < 0:
        raise CryptoError("negative output length")
    if l > 255 * _HASH_LEN:
        raise CryptoError("expansion output too long")
    ms = hmac.new(nonc, ipm, hashlib.sha256).digest()
    label = LABEL_INITIAL if init else LABEL_FORWARD_SECURE
    info = label + b"\x00" + cid.to_bytes(8, "big") + m
    out = b""
    block = b""
    counter = 1
    while len(out) < l:
        block = hmac.new(ms, block + info + bytes([counter]), hashlib.sha256).digest()
        out += block
        counter += 1
    return out[:l]


@dataclass(frozen=True)
class KeySet:
    """Directional keys for one epoch: two 128-bit keys plus two 4-byte IV
    prefixes. Packets addressed *to* the client use (k_c, iv_c); packets
    addressed *to* the server use (k_s, iv_s)."""

    k_c: bytes
    k_s: bytes
    iv_c: bytes
    iv_s: bytes

    def __post_init__(self):
        if len(self.k_c) != 16 or len(self.k_s) != 16:
            raise CryptoError("keys must be 16 bytes")
        if len(self.iv_c) != 4 or len(self.iv_s) != 4:
            raise CryptoError("IV prefixes must be 4 bytes")

    def serialize(self) -> bytes:
        return self.k_c + self.k_s + self.iv_c + self.iv_s


NULL_KEYS = KeySet(b"\x00" * 16, b"\x00" * 16, b"\x00" * 4, b"\x00" * 4)


def split_keys(material: bytes) -> KeySet:
    """Slice 40 bytes of expansion output into a KeySet. The slicing is
    role-independent: both peers derive identical key sets from identical
    material."""
    if len(material) != KEY_MATERIAL_LEN:
        raise CryptoError(f"key material must be {KEY_MATERIAL_LEN} bytes")
    return KeySet(
        k_c=material[0:16],
        k_s=material[16:32],
        iv_c=material[32:36],
        iv_s=material[36:40],
    )


def get_iv(keys: KeySet, role: str, direction: str, sqn: int) -> bytes:
    """Build the 12-byte nonce for a packet: 4-byte role-selected IV prefix
    followed by the 8-byte big-endian sequence number.

    A sender uses the destination-role prefix (client sends with iv_s,
    server with iv_c); a receiver uses its own-role prefix, which is the
    same value the sender chose.
    """
    if role not in ("client", "server"):
        raise CryptoError(f"bad role {role!r}")
    if direction not in ("send", "receive"):
        raise CryptoError(f"bad direction {direction!r}")
    if role == "client":
        prefix = keys.iv_s if direction == "send" else keys.iv_c
    else:
        prefix = keys.iv_c if direction == "send" else keys.iv_s
    return prefix + sqn.to_bytes(8, "big")


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()
