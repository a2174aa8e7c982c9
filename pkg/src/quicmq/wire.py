"""Wire formats: packet headers, frames, and the tag-length-value handshake
messages.

Clear header layout (all integers big-endian):

    flags(1) || cid(8) || [version(4) iff flags bit0] ||
    [div_nonce(32) iff flags bit1] || sqn(8)

Flags bits 2-3 carry the key epoch (0 = cleartext handshake, 1 = initial
keys, 2 = forward-secure keys). The body of every packet is an AEAD
ciphertext of ``marker(1) || frames`` followed by the 16-byte tag; the full
encoded header is the associated data, so any header bit-flip breaks the
seal. Cleartext handshake packets are sealed under the all-zero key set,
which buys nothing but format uniformity and integrity under a known key.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .crypto import GCM_TAG_LEN, KeySet, aead_open, aead_seal, get_iv

VERSION = b"Q001"

EPOCH_CLEAR = 0
EPOCH_IK = 1
EPOCH_K = 2

# First plaintext byte inside the seal: application data vs handshake-internal
# key exchange payloads.
MARKER_DATA = 0x01
MARKER_HANDSHAKE = 0x00

FLAG_VERSION = 0x01
FLAG_DIV_NONCE = 0x02

MAX_NACK_RANGES = 256

HANDSHAKE_STREAM_ID = 1

# On-wire datagram budget for handshake packets: 1392 bytes total including
# the 42 bytes of simulated Ethernet/IP/UDP overhead, 1350 for the packet.
HANDSHAKE_PACKET_LEN = 1350
LINK_OVERHEAD = 42
HANDSHAKE_DATAGRAM_LEN = HANDSHAKE_PACKET_LEN + LINK_OVERHEAD


class WireError(Exception):
    """Malformed or truncated wire data."""


@dataclass(frozen=True)
class PacketHeader:
    cid: int
    sqn: int
    epoch: int = EPOCH_CLEAR
    version: bytes | None = None
    div_nonce: bytes | None = None


def encode_header(h: PacketHeader) -> bytes:
    flags = (h.epoch & 0x03) << 2
    out = bytearray()
    if h.version is not None:
        if len(h.version) != 4:
            raise WireError("version field must be 4 bytes")
        flags |= FLAG_VERSION
    if h.div_nonce is not None:
        if len(h.div_nonce) != 32:
            raise WireError("div_nonce must be 32 bytes")
        flags |= FLAG_DIV_NONCE
    out.append(flags)
    out += h.cid.to_bytes(8, "big")
    if h.version is not None:
        out += h.version
    if h.div_nonce is not None:
        out += h.div_nonce
    out += h.sqn.to_bytes(8, "big")
    return bytes(out)


def decode_header(data: bytes) -> tuple[PacketHeader, int]:
    """Decode the clear header, returning it with its encoded length."""
    if len(data) < 9:
        raise WireError("truncated header")
    flags = data[0]
    pos = 1
    cid = int.from_bytes(data[pos:pos + 8], "big")
    pos += 8
    version = None
    div_nonce = None
    if flags & FLAG_VERSION:
        if len(data) < pos + 4:
            raise WireError("truncated version")
        version = data[pos:pos + 4]
        pos += 4
    if flags & FLAG_DIV_NONCE:
        if len(data) < pos + 32:
            raise WireError("truncated div_nonce")
        div_nonce = data[pos:pos + 32]
        pos += 32
    if len(data) < pos + 8:
        raise WireError("truncated sqn")
    sqn = int.from_bytes(data[pos:pos + 8], "big")
    pos += 8
    epoch = (flags >> 2) & 0x03
    return PacketHeader(cid, sqn, epoch, version, div_nonce), pos


# ---------------------------------------------------------------------------
# Frames
# ---------------------------------------------------------------------------

KIND_STREAM = 0x01
KIND_ACK = 0x02
KIND_WINDOW_UPDATE = 0x03
KIND_RST_STREAM = 0x04
KIND_PING = 0x05
KIND_CLOSE = 0x06


@dataclass(frozen=True)
class StreamFrame:
    stream_id: int
    offset: int
    data: bytes
    fin: bool = False


@dataclass(frozen=True)
class AckFrame:
    largest_observed: int
    delay_us: int = 0
    # NACK ranges are inclusive (start, end) sqn pairs below largest_observed.
    nack_ranges: tuple[tuple[int, int], ...] = ()


@dataclass(frozen=True)
class WindowUpdateFrame:
    stream_id: int  # 0 addresses the connection-level window
    byte_offset: int


@dataclass(frozen=True)
class RstStreamFrame:
    stream_id: int
    final_offset: int
    error_code: int


@dataclass(frozen=True)
class PingFrame:
    pass


@dataclass(frozen=True)
class CloseFrame:
    error_code: int = 0
    reason: bytes = b""


Frame = StreamFrame | AckFrame | WindowUpdateFrame | RstStreamFrame | PingFrame | CloseFrame


def encode_frame(f: Frame) -> bytes:
    if isinstance(f, StreamFrame):
        return (
            bytes([KIND_STREAM])
            + struct.pack(">IQB I".replace(" ", ""), f.stream_id, f.offset, 1 if f.fin else 0, len(f.data))
            + f.data
        )
    if isinstance(f, AckFrame):
        if len(f.nack_ranges) > MAX_NACK_RANGES:
            raise WireError(f"ack with {len(f.nack_ranges)} NACK ranges")
        out = bytes([KIND_ACK]) + struct.pack(
            ">QQH", f.largest_observed, f.delay_us, len(f.nack_ranges)
        )
        for start, end in f.nack_ranges:
            out += struct.pack(">QQ", start, end)
        return out
    if isinstance(f, WindowUpdateFrame):
        return bytes([KIND_WINDOW_UPDATE]) + struct.pack(">IQ", f.stream_id, f.byte_offset)
    if isinstance(f, RstStreamFrame):
        return bytes([KIND_RST_STREAM]) + struct.pack(
            ">IQI", f.stream_id, f.final_offset, f.error_code
        )
    if isinstance(f, PingFrame):
        return bytes([KIND_PING])
    if isinstance(f, CloseFrame):
        return bytes([KIND_CLOSE]) + struct.pack(">IH", f.error_code, len(f.reason)) + f.reason
    raise WireError(f"unknown frame {f!r}")


def encode_frames(frames: list[Frame]) -> bytes:
    return b"".join(encode_frame(f) for f in frames)


def decode_frames(data: bytes) -> list[Frame]:
    frames: list[Frame] = []
    pos = 0
    n = len(data)
    while pos < n:
        kind = data[pos]
        pos += 1
        if kind == KIND_STREAM:
            if n - pos < 17:
                raise WireError("truncated STREAM frame")
            stream_id, offset, fin, dlen = struct.unpack_from(">IQBI", data, pos)
            pos += 17
            if n - pos < dlen:
                raise WireError("truncated STREAM data")
            frames.append(StreamFrame(stream_id, offset, data[pos:pos + dlen], bool(fin)))
            pos += dlen
        elif kind == KIND_ACK:
            if n - pos < 18:
                raise WireError("truncated ACK frame")
            largest, delay, count = struct.unpack_from(">QQH", data, pos)
            pos += 18
            if count > MAX_NACK_RANGES:
                raise WireError(f"ack with {count} NACK ranges")
            if n - pos < 16 * count:
                raise WireError("truncated NACK ranges")
            ranges = []
            for _ in range(count):
                start, end = struct.unpack_from(">QQ", data, pos)
                pos += 16
                ranges.append((start, end))
            frames.append(AckFrame(largest, delay, tuple(ranges)))
        elif kind == KIND_WINDOW_UPDATE:
            if n - pos < 12:
                raise WireError("truncated WINDOW_UPDATE")
            stream_id, byte_offset = struct.unpack_from(">IQ", data, pos)
            pos += 12
            frames.append(WindowUpdateFrame(stream_id, byte_offset))
        elif kind == KIND_RST_STREAM:
            if n - pos < 16:
                raise WireError("truncated RST_STREAM")
            stream_id, final_offset, code = struct.unpack_from(">IQI", data, pos)
            pos += 16
            frames.append(RstStreamFrame(stream_id, final_offset, code))
        elif kind == KIND_PING:
            frames.append(PingFrame())
        elif kind == KIND_CLOSE:
            if n - pos < 6:
                raise WireError("truncated CLOSE")
            code, rlen = struct.unpack_from(">IH", data, pos)
            pos += 6
            if n - pos < rlen:
                raise WireError("truncated CLOSE reason")
            frames.append(CloseFrame(code, data[pos:pos + rlen]))
            pos += rlen
        else:
            raise WireError(f"unknown frame kind 0x{kind:02x}")
    return frames


# ---------------------------------------------------------------------------
# Packet sealing
# ---------------------------------------------------------------------------

def seal_packet(header: PacketHeader, plaintext: bytes, keys: KeySet, role: str) -> bytes:
    """Seal ``plaintext`` (marker byte plus frames) into a full packet."""
    hdr = encode_header(header)
    nonce = get_iv(keys, role, "send", header.sqn)
    key = keys.k_s if role == "client" else keys.k_c
    return hdr + aead_seal(key, nonce, hdr, plaintext)


def open_packet_body(header: PacketHeader, header_len: int, packet: bytes,
                     keys: KeySet, role: str) -> bytes | None:
    """Open the sealed body of an already-decoded packet; None on failure."""
    hdr = packet[:header_len]
    body = packet[header_len:]
    if len(body) < GCM_TAG_LEN:
        return None
    nonce = get_iv(keys, role, "receive", header.sqn)
    key = keys.k_c if role == "client" else keys.k_s
    return aead_open(key, nonce, hdr, body)


# ---------------------------------------------------------------------------
# Handshake messages: 4-byte kind tag followed by a tag-length-value list
# (4-byte ASCII tag, 4-byte big-endian length, value), carried in STREAM
# frames on the reserved handshake stream.
# ---------------------------------------------------------------------------

MSG_CHLO = "CHLO"
MSG_REJ = "REJ\x00"
MSG_SHLO = "SHLO"

TAG_STK = "STK\x00"
TAG_SCID = "SCID"
TAG_NONC = "NONC"
TAG_PUBC = "PUBC"
TAG_PUBS = "PUBS"
TAG_SCFG = "SCFG"
TAG_PROF = "PROF"
TAG_VER = "VER\x00"
TAG_PAD = "PAD\x00"


@dataclass
class HandshakeMessage:
    kind: str
    fields: dict[str, bytes] = field(default_factory=dict)

    def encode(self) -> bytes:
        if len(self.kind) != 4:
            raise WireError("message kind tag must be 4 chars")
        out = bytearray(self.kind.encode("ascii"))
        for tag, value in self.fields.items():
            if len(tag) != 4:
                raise WireError(f"field tag {tag!r} must be 4 chars")
            out += tag.encode("ascii")
            out += len(value).to_bytes(4, "big")
            out += value
        return bytes(out)

    def encoded_len(self) -> int:
        return 4 + sum(8 + len(v) for v in self.fields.values())

    def padded(self, target_len: int) -> "HandshakeMessage":
        """Return a copy padded with a PAD field to exactly ``target_len``
        encoded bytes."""
        base = self.encoded_len()
        need = target_len - base
        if need < 8:
            raise WireError(f"cannot pad message of {base} bytes to {target_len}")
        fields = dict(self.fields)
        fields[TAG_PAD] = b"\x00" * (need - 8)
        return HandshakeMessage(self.kind, fields)

    @classmethod
    def decode(cls, data: bytes) -> "HandshakeMessage":
        if len(data) < 4:
            raise WireError("truncated handshake message")
        kind = data[:4].decode("ascii", errors="replace")
        if kind not in (MSG_CHLO, MSG_REJ, MSG_SHLO):
            raise WireError(f"unknown handshake message kind {kind!r}")
        fields: dict[str, bytes] = {}
        pos = 4
        while pos < len(data):
            if len(data) - pos < 8:
                raise WireError("truncated TLV header")
            tag = data[pos:pos + 4].decode("ascii", errors="replace")
            vlen = int.from_bytes(data[pos + 4:pos + 8], "big")
            pos += 8
            if len(data) - pos < vlen:
                raise WireError("truncated TLV value")
            fields[tag] = data[pos:pos + vlen]
            pos += vlen
        return cls(kind, fields)
