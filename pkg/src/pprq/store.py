"""Plaintext CSV ingestion and the encrypted-table format served by the primary cloud.

The owner runs this once: parse a rectangular CSV of non-negative integers,
encrypt it cell by cell under the table key, and write the result to a
``.pprq`` file.  Tables are immutable after load; concurrent readers are safe.

File layout (all integers big-endian):

    magic   "PPRQ"
    version u16 = 1
    K       u32   modulus bit length
    m       u32   attribute domain bit length
    n       u64   record count
    w       u32   attribute count
    N       ceil(K/8) bytes
    cells   n*w ciphertexts, row-major, ceil(2K/8) bytes each

Total size is therefore 26 + ceil(K/8) + n*w*ceil(2K/8) bytes.
"""

from __future__ import annotations

import csv
import random
import struct
from dataclasses import dataclass

from .paillier import Ciphertext, PublicKey, encrypt
from .wire import (
    ciphertext_width,
    deserialize_ciphertext,
    deserialize_residue,
    residue_width,
    serialize_ciphertext,
    serialize_residue,
)

TABLE_MAGIC = b"PPRQ"
TABLE_VERSION = 1


class TableError(Exception):
    """Raised on invalid plaintext input or a corrupt table file."""


@dataclass(frozen=True)
class PlainTable:
    """A rectangular n x w matrix of integers, each in [0, 2^m)."""

    m: int
    rows: tuple[tuple[int, ...], ...]

    @property
    def n(self) -> int:
        return len(self.rows)

    @property
    def w(self) -> int:
        return len(self.rows[0])


@dataclass(frozen=True)
class EncryptedTable:
    """Attribute-wise encryption of a PlainTable under the owner's key."""

    bits: int
    m: int
    n_modulus: int
    cells: tuple[tuple[Ciphertext, ...], ...]

    @property
    def n(self) -> int:
        return len(self.cells)

    @property
    def w(self) -> int:
        return len(self.cells[0])

    @property
    def public_key(self) -> PublicKey:
        return PublicKey(self.n_modulus, self.bits)


def plain_table(rows, m: int) -> PlainTable:
    """Validate raw rows into a PlainTable; report offending cells 1-based."""
    if not rows:
        raise TableError("no records")
    width = len(rows[0])
    if width == 0:
        raise TableError("no attributes")
    bound = 1 << m
    checked = []
    for i, row in enumerate(rows):
        if len(row) != width:
            raise TableError(f"ragged row {i + 1}: {len(row)} cells, expected {width}")
        for j, value in enumerate(row):
            if not isinstance(value, int) or isinstance(value, bool):
                raise TableError(f"non-integer cell at row {i + 1}, column {j + 1}")
            if not 0 <= value < bound:
                raise TableError(
                    f"value {value} at row {i + 1}, column {j + 1} outside [0, 2^{m})"
                )
        checked.append(tuple(row))
    return PlainTable(m, tuple(checked))


def ingest_csv(path, m: int) -> PlainTable:
    """Parse a CSV of base-10 non-negative integers into a PlainTable."""
    rows = []
    with open(path, newline="") as fh:
        for i, record in enumerate(csv.reader(fh)):
            if not record or (len(record) == 1 and not record[0].strip()):
                continue  # skip blank lines
            parsed = []
            for j, cell in enumerate(record):
                text = cell.strip()
                try:
                    value = int(text, 10)
                except ValueError:
                    raise TableError(
                        f"non-integer cell {text!r} at row {i + 1}, column {j + 1}"
                    ) from None
                if value < 0:
                    raise TableError(f"negative value at row {i + 1}, column {j + 1}")
                parsed.append(value)
            rows.append(parsed)
    return plain_table(rows, m)


def encrypt_table(
    pk: PublicKey, table: PlainTable, rng: random.Random | None = None
) -> EncryptedTable:
    """Encrypt every cell with a fresh nonce."""
    cells = tuple(
        tuple(encrypt(pk, value, rng=rng) for value in row) for row in table.rows
    )
    return EncryptedTable(pk.bits, table.m, pk.n, cells)


def table_size(bits: int, n: int, w: int) -> int:
    return 26 + residue_width(bits) + n * w * ciphertext_width(bits)


def table_to_bytes(table: EncryptedTable) -> bytes:
    out = [
        TABLE_MAGIC,
        struct.pack(">HIIQI", TABLE_VERSION, table.bits, table.m, table.n, table.w),
        serialize_residue(table.n_modulus, table.bits),
    ]
    for row in table.cells:
        out.extend(serialize_ciphertext(c, table.bits) for c in row)
    return b"".join(out)


def table_from_bytes(raw: bytes) -> EncryptedTable:
    if len(raw) < 26 or raw[:4] != TABLE_MAGIC:
        raise TableError("not a table file (bad magic)")
    version, bits, m, n, w = struct.unpack_from(">HIIQI", raw, 4)
    if version != TABLE_VERSION:
        raise TableError(f"unsupported table version {version}")
    expected = table_size(bits, n, w)
    if len(raw) != expected:
        raise TableError(f"table file is {len(raw)} bytes, header implies {expected}")
    n_modulus = deserialize_residue(raw[26 : 26 + residue_width(bits)], bits)
    if n_modulus.bit_length() != bits:
        raise TableError("modulus width disagrees with the header bit length")
    cw = ciphertext_width(bits)
    off = 26 + residue_width(bits)
    cells = []
    for _ in range(n):
        row = []
        for _ in range(w):
            row.append(deserialize_ciphertext(raw[off : off + cw], bits))
            off += cw
        cells.append(tuple(row))
    return EncryptedTable(bits, m, n_modulus, tuple(cells))


def save_table(path, table: EncryptedTable) -> None:
    with open(path, "wb") as fh:
        fh.write(table_to_bytes(table))


def load_table(path) -> EncryptedTable:
    with open(path, "rb") as fh:
        return table_from_bytes(fh.read())
