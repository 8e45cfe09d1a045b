"""Framing and serialization for messages between owner, user, and the two clouds.

Every message travels as one frame:

    length  u32 BE   bytes following this field (= 21 + payload size)
    type    u8       message type from the registry below
    session 16 bytes
    seq     u32 BE   subprotocol-instance or result-row number (0 for control)
    payload bytes

Integers are fixed-width big-endian: ciphertexts and partial decryptions
occupy ceil(2K/8) bytes, plaintext residues ceil(K/8) bytes, where K is the
modulus bit length.  Frame encoding/decoding is pure; socket plumbing lives
in `pprq.net`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .paillier import Ciphertext, PartialDecryption, PublicKey

# Message-type registry.  These values are part of the external interface
# between the daemons and clients and must not be renumbered.
MSG_HELLO = 0x01
MSG_QUERY_SHARE_C1 = 0x02  # {k, alpha1, beta1}
MSG_QUERY_SHARE_C2 = 0x03  # {alpha2, beta2}
MSG_ENC_SHARES = 0x04  # {E(alpha2), E(beta2)}
MSG_SCP_TAU = 0x10
MSG_SCP_S = 0x11
MSG_SCP_G = 0x12
MSG_SCP_C = 0x13
MSG_SMP_AB = 0x20
MSG_SMP_H = 0x21
MSG_TSCP_DEC = 0x28  # threshold comparison: ciphertext + share-1 partial
MSG_TSMP_AB = 0x29  # threshold multiplication: both operands + partials
MSG_XYZ_BATCH = 0x30
MSG_RESULT_ROW_P1 = 0x31  # {x_i, Y_i}
MSG_P2_ROW = 0x32  # {X', Y', W'}
MSG_PHI_ROW = 0x33
MSG_GAMMA_ROW = 0x34
MSG_RHAT_ROW = 0x35
MSG_DONE = 0x3F
MSG_ERROR = 0xF0
MSG_PING = 0xFF

KNOWN_TYPES = frozenset(
    v for k, v in list(globals().items()) if k.startswith("MSG_")
)

HEADER_LEN = 21  # type + session + seq
MAX_FRAME_LEN = 1 << 24  # hard cap on the length field

ROLE_USER = 1
ROLE_CLOUD1 = 2

ERR_UNAUTHORIZED = 1
ERR_KEY_MISMATCH = 2
ERR_MALFORMED = 3
ERR_INTERNAL = 4


class FrameError(Exception):
    """Raised on malformed, truncated, oversized, or unknown-type frames."""


@dataclass(frozen=True)
class Frame:
    msg_type: int
    session_id: bytes  # 16 bytes
    seq: int
    payload: bytes = b""


def encode_frame(frame: Frame) -> bytes:
    if len(frame.session_id) != 16:
        raise FrameError("session id must be 16 bytes")
    length = HEADER_LEN + len(frame.payload)
    if length > MAX_FRAME_LEN:
        raise FrameError(f"frame of {length} bytes exceeds the {MAX_FRAME_LEN} cap")
    if frame.msg_type not in KNOWN_TYPES:
        raise FrameError(f"unknown message type 0x{frame.msg_type:02x}")
    return (
        struct.pack(">IB", length, frame.msg_type)
        + frame.session_id
        + struct.pack(">I", frame.seq)
        + frame.payload
    )


def decode_frame(raw: bytes) -> Frame:
    if len(raw) < 4 + HEADER_LEN:
        raise FrameError("truncated frame")
    (length,) = struct.unpack_from(">I", raw)
    if length > MAX_FRAME_LEN:
        raise FrameError(f"frame of {length} bytes exceeds the {MAX_FRAME_LEN} cap")
    if len(raw) != 4 + length:
        raise FrameError(f"frame length field says {length}, got {len(raw) - 4} bytes")
    msg_type = raw[4]
    if msg_type not in KNOWN_TYPES:
        raise FrameError(f"unknown message type 0x{msg_type:02x}")
    session_id = raw[5:21]
    (seq,) = struct.unpack_from(">I", raw, 21)
    return Frame(msg_type, session_id, seq, raw[25:])


# -- fixed-width integers -----------------------------------------------------


def residue_width(bits: int) -> int:
    return (bits + 7) // 8


def ciphertext_width(bits: int) -> int:
    return (2 * bits + 7) // 8


def serialize_residue(x: int, bits: int) -> bytes:
    try:
        return x.to_bytes(residue_width(bits), "big")
    except OverflowError:
        raise FrameError(f"residue does not fit in {residue_width(bits)} bytes") from None


def deserialize_residue(raw: bytes, bits: int) -> int:
    if len(raw) != residue_width(bits):
        raise FrameError(f"expected {residue_width(bits)} residue bytes, got {len(raw)}")
    return int.from_bytes(raw, "big")


def serialize_ciphertext(c: Ciphertext, bits: int) -> bytes:
    try:
        return c.value.to_bytes(ciphertext_width(bits), "big")
    except OverflowError:
        raise FrameError(f"ciphertext does not fit in {ciphertext_width(bits)} bytes") from None


def deserialize_ciphertext(raw: bytes, bits: int) -> Ciphertext:
    if len(raw) != ciphertext_width(bits):
        raise FrameError(f"expected {ciphertext_width(bits)} ciphertext bytes, got {len(raw)}")
    value = int.from_bytes(raw, "big")
    if value == 0:
        raise FrameError("zero is not a valid ciphertext")
    return Ciphertext(value)


def serialize_partial(p: PartialDecryption, bits: int) -> bytes:
    return p.value.to_bytes(ciphertext_width(bits), "big")


def deserialize_partial(raw: bytes, bits: int, index: int) -> PartialDecryption:
    if len(raw) != ciphertext_width(bits):
        raise FrameError(f"expected {ciphertext_width(bits)} partial bytes, got {len(raw)}")
    return PartialDecryption(int.from_bytes(raw, "big"), index)


class _Reader:
    """Cursor over a payload; raises FrameError on underrun or leftovers."""

    def __init__(self, payload: bytes):
        self.buf = payload
        self.off = 0

    def take(self, count: int) -> bytes:
        if self.off + count > len(self.buf):
            raise FrameError("truncated payload")
        out = self.buf[self.off : self.off + count]
        self.off += count
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self.take(8))[0]

    def residue(self, bits: int) -> int:
        return deserialize_residue(self.take(residue_width(bits)), bits)

    def ciphertext(self, bits: int) -> Ciphertext:
        return deserialize_ciphertext(self.take(ciphertext_width(bits)), bits)

    def partial(self, bits: int, index: int) -> PartialDecryption:
        return deserialize_partial(self.take(ciphertext_width(bits)), bits, index)

    def finish(self) -> None:
        if self.off != len(self.buf):
            raise FrameError("trailing bytes in payload")


# -- control payloads ----------------------------------------------------------


def pack_hello_user(proto: int, user_id: str, user_pk: PublicKey | None = None) -> bytes:
    uid = user_id.encode()
    out = struct.pack(">BBH", ROLE_USER, proto, len(uid)) + uid
    if user_pk is None:
        return out + b"\x00"
    return (
        out
        + b"\x01"
        + struct.pack(">I", user_pk.bits)
        + serialize_residue(user_pk.n, user_pk.bits)
    )


def pack_hello_cloud1(proto: int, user_id: str, pk: PublicKey, m: int, n_rows: int, w: int) -> bytes:
    uid = user_id.encode()
    return (
        struct.pack(">BBH", ROLE_CLOUD1, proto, len(uid))
        + uid
        + struct.pack(">IIQI", pk.bits, m, n_rows, w)
        + serialize_residue(pk.n, pk.bits)
    )


@dataclass(frozen=True)
class Hello:
    role: int
    proto: int
    user_id: str
    user_pk: PublicKey | None = None
    pk: PublicKey | None = None
    m: int = 0
    n_rows: int = 0
    w: int = 0


def parse_hello(payload: bytes) -> Hello:
    r = _Reader(payload)
    role, proto = r.u8(), r.u8()
    uid = r.take(r.u16()).decode()
    if role == ROLE_USER:
        user_pk = None
        if r.u8():
            bits = r.u32()
            user_pk = PublicKey(r.residue(bits), bits)
        r.finish()
        return Hello(role, proto, uid, user_pk=user_pk)
    if role == ROLE_CLOUD1:
        bits, m, n_rows, w = r.u32(), r.u32(), r.u64(), r.u32()
        pk = PublicKey(r.residue(bits), bits)
        r.finish()
        return Hello(role, proto, uid, pk=pk, m=m, n_rows=n_rows, w=w)
    raise FrameError(f"unknown hello role {role}")


def pack_query_share_c1(k: int, alpha1: int, beta1: int, bits: int) -> bytes:
    return (
        struct.pack(">I", k)
        + serialize_residue(alpha1, bits)
        + serialize_residue(beta1, bits)
    )


def parse_query_share_c1(payload: bytes, bits: int) -> tuple[int, int, int]:
    r = _Reader(payload)
    k = r.u32()
    alpha1, beta1 = r.residue(bits), r.residue(bits)
    r.finish()
    return k, alpha1, beta1


def pack_query_share_c2(alpha2: int, beta2: int, bits: int) -> bytes:
    return serialize_residue(alpha2, bits) + serialize_residue(beta2, bits)


def parse_query_share_c2(payload: bytes, bits: int) -> tuple[int, int]:
    r = _Reader(payload)
    alpha2, beta2 = r.residue(bits), r.residue(bits)
    r.finish()
    return alpha2, beta2


def pack_enc_shares(enc_alpha2: Ciphertext, enc_beta2: Ciphertext, bits: int) -> bytes:
    return serialize_ciphertext(enc_alpha2, bits) + serialize_ciphertext(enc_beta2, bits)


def parse_enc_shares(payload: bytes, bits: int) -> tuple[Ciphertext, Ciphertext]:
    r = _Reader(payload)
    a, b = r.ciphertext(bits), r.ciphertext(bits)
    r.finish()
    return a, b


def pack_error(code: int, message: str) -> bytes:
    return struct.pack(">H", code) + message.encode()


def parse_error(payload: bytes) -> tuple[int, str]:
    r = _Reader(payload)
    code = r.u16()
    return code, r.buf[r.off :].decode(errors="replace")


def pack_ping_info(bits: int, m: int, n_rows: int, w: int) -> bytes:
    return struct.pack(">IIQI", bits, m, n_rows, w)


def parse_ping_info(payload: bytes) -> tuple[int, int, int, int]:
    r = _Reader(payload)
    out = (r.u32(), r.u32(), r.u64(), r.u32())
    r.finish()
    return out


# -- subprotocol payloads -------------------------------------------------------


def pack_decrypt_request(ct: Ciphertext, partial: PartialDecryption | None, bits: int) -> bytes:
    out = serialize_ciphertext(ct, bits)
    if partial is not None:
        out += serialize_partial(partial, bits)
    return out


def parse_decrypt_request(
    payload: bytes, bits: int, with_partial: bool, partial_index: int = 1
) -> tuple[Ciphertext, PartialDecryption | None]:
    r = _Reader(payload)
    ct = r.ciphertext(bits)
    partial = r.partial(bits, partial_index) if with_partial else None
    r.finish()
    return ct, partial


def pack_operand_pair(
    a: Ciphertext,
    pa: PartialDecryption | None,
    b: Ciphertext,
    pb: PartialDecryption | None,
    bits: int,
) -> bytes:
    return pack_decrypt_request(a, pa, bits) + pack_decrypt_request(b, pb, bits)


def parse_operand_pair(payload: bytes, bits: int, with_partial: bool, partial_index: int = 1):
    r = _Reader(payload)
    a = r.ciphertext(bits)
    pa = r.partial(bits, partial_index) if with_partial else None
    b = r.ciphertext(bits)
    pb = r.partial(bits, partial_index) if with_partial else None
    r.finish()
    return a, pa, b, pb


def pack_ciphertext_payload(ct: Ciphertext, bits: int) -> bytes:
    return serialize_ciphertext(ct, bits)


def parse_ciphertext_payload(payload: bytes, bits: int) -> Ciphertext:
    r = _Reader(payload)
    ct = r.ciphertext(bits)
    r.finish()
    return ct


# -- batch and row payloads -----------------------------------------------------
#
# The permuted matrices travel row-major in one or more XYZ_BATCH frames, each
# carrying a contiguous run of rows so the whole batch stays under the frame
# cap.  Protocol 1 rows hold (X cells, Y cells under the user key, Z mask
# ciphertext); protocol 2 rows hold (X cells, W cells, mask ciphertext plus
# its share-1 partial).


@dataclass(frozen=True)
class BatchChunk:
    proto: int
    total_rows: int
    start: int
    w: int
    user_bits: int  # 0 for protocol 2
    rows: list

    def row_struct(self) -> str:
        return "xyz" if self.proto == 1 else "xwz"


def _p1_row_bytes(w: int, bits: int, user_bits: int) -> int:
    return w * ciphertext_width(bits) + w * ciphertext_width(user_bits) + ciphertext_width(bits)


def _p2_row_bytes(w: int, bits: int) -> int:
    return 2 * w * ciphertext_width(bits) + 2 * ciphertext_width(bits)


def batch_chunk_rows(proto: int, w: int, bits: int, user_bits: int, budget: int = 1 << 20) -> int:
    per_row = _p1_row_bytes(w, bits, user_bits) if proto == 1 else _p2_row_bytes(w, bits)
    return max(1, budget // per_row)


def pack_batch_chunk(chunk: BatchChunk, bits: int) -> bytes:
    out = [
        struct.pack(
            ">BIIIII",
            chunk.proto,
            chunk.total_rows,
            chunk.start,
            len(chunk.rows),
            chunk.w,
            chunk.user_bits,
        )
    ]
    for row in chunk.rows:
        if chunk.proto == 1:
            x_cells, y_cells, z = row
            out.extend(serialize_ciphertext(c, bits) for c in x_cells)
            out.extend(serialize_ciphertext(c, chunk.user_bits) for c in y_cells)
            out.append(serialize_ciphertext(z, bits))
        else:
            x_cells, w_cells, (z_ct, z_partial) = row
            out.extend(serialize_ciphertext(c, bits) for c in x_cells)
            out.extend(serialize_ciphertext(c, bits) for c in w_cells)
            out.append(serialize_ciphertext(z_ct, bits))
            out.append(serialize_partial(z_partial, bits))
    return b"".join(out)


def parse_batch_chunk(payload: bytes, bits: int) -> BatchChunk:
    r = _Reader(payload)
    proto, total, start, count, w, user_bits = (
        r.u8(),
        r.u32(),
        r.u32(),
        r.u32(),
        r.u32(),
        r.u32(),
    )
    rows = []
    for _ in range(count):
        if proto == 1:
            x_cells = [r.ciphertext(bits) for _ in range(w)]
            y_cells = [r.ciphertext(user_bits) for _ in range(w)]
            rows.append((x_cells, y_cells, r.ciphertext(bits)))
        else:
            x_cells = [r.ciphertext(bits) for _ in range(w)]
            w_cells = [r.ciphertext(bits) for _ in range(w)]
            rows.append((x_cells, w_cells, (r.ciphertext(bits), r.partial(bits, 1))))
    r.finish()
    return BatchChunk(proto, total, start, w, user_bits, rows)


def pack_result_row_p1(x_values: list[int], y_cells: list[Ciphertext], bits: int, user_bits: int) -> bytes:
    out = [struct.pack(">I", len(x_values))]
    out.extend(serialize_residue(x, bits) for x in x_values)
    out.extend(serialize_ciphertext(c, user_bits) for c in y_cells)
    return b"".join(out)


def parse_result_row_p1(payload: bytes, bits: int, user_bits: int):
    r = _Reader(payload)
    w = r.u32()
    xs = [r.residue(bits) for _ in range(w)]
    ys = [r.ciphertext(user_bits) for _ in range(w)]
    r.finish()
    return xs, ys


def pack_p2_row(
    x_cells: list[Ciphertext],
    y_cells: list[Ciphertext],
    w_partials: list[PartialDecryption],
    bits: int,
) -> bytes:
    out = [struct.pack(">I", len(x_cells))]
    out.extend(serialize_ciphertext(c, bits) for c in x_cells)
    out.extend(serialize_ciphertext(c, bits) for c in y_cells)
    out.extend(serialize_partial(p, bits) for p in w_partials)
    return b"".join(out)


def parse_p2_row(payload: bytes, bits: int):
    r = _Reader(payload)
    w = r.u32()
    xs = [r.ciphertext(bits) for _ in range(w)]
    ys = [r.ciphertext(bits) for _ in range(w)]
    ps = [r.partial(bits, 2) for _ in range(w)]
    r.finish()
    return xs, ys, ps


def pack_phi_row(
    phi_partials: list[PartialDecryption], hprime_cells: list[Ciphertext], bits: int
) -> bytes:
    out = [struct.pack(">I", len(phi_partials))]
    out.extend(serialize_partial(p, bits) for p in phi_partials)
    out.extend(serialize_ciphertext(c, bits) for c in hprime_cells)
    return b"".join(out)


def parse_phi_row(payload: bytes, bits: int):
    r = _Reader(payload)
    w = r.u32()
    phis = [r.partial(bits, 1) for _ in range(w)]
    hps = [r.ciphertext(bits) for _ in range(w)]
    r.finish()
    return phis, hps


def pack_residue_row(values: list[int], bits: int) -> bytes:
    return struct.pack(">I", len(values)) + b"".join(
        serialize_residue(v, bits) for v in values
    )


def parse_residue_row(payload: bytes, bits: int) -> list[int]:
    r = _Reader(payload)
    w = r.u32()
    out = [r.residue(bits) for _ in range(w)]
    r.finish()
    return out
