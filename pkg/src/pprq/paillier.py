"""Additively homomorphic (Paillier) cryptosystem with a 2-of-2 threshold mode.

Provides key generation, encryption/decryption, the two homomorphic
operations (ciphertext addition and multiplication by a plaintext constant),
and an additive two-party split of the decryption exponent for deployments
where no single party may decrypt on its own.

Key material is immutable and every operation is a pure function of its
inputs plus an optional randomness source, so keys and ciphertexts may be
shared freely between threads.  Randomness defaults to the system CSPRNG;
callers pass a seeded ``random.Random`` only in tests.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass, field
from math import gcd, lcm

try:
    from gmpy2 import invert as _gmpy_invert
    from gmpy2 import is_prime as _gmpy_is_prime
    from gmpy2 import powmod as _powmod

    def _invert(a: int, n: int) -> int:
        return int(_gmpy_invert(a, n))

    def _probably_prime(n: int) -> bool:
        # 64 Miller-Rabin rounds: error probability <= 4^-64 = 2^-128
        return bool(_gmpy_is_prime(n, 64))

except ImportError:  # pragma: no cover - gmpy2 is a declared dependency
    _powmod = pow

    def _invert(a: int, n: int) -> int:
        return pow(a, -1, n)

    def _probably_prime(n: int, _rounds: int = 64) -> bool:
        if n < 2:
            return False
        for p in (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37):
            if n % p == 0:
                return n == p
        d, s = n - 1, 0
        while d % 2 == 0:
            d //= 2
            s += 1
        rng = random.SystemRandom()
        for _ in range(_rounds):
            a = rng.randrange(2, n - 1)
            x = pow(a, d, n)
            if x in (1, n - 1):
                continue
            for _ in range(s - 1):
                x = x * x % n
                if x == n - 1:
                    break
            else:
                return False
        return True


SUPPORTED_BITS = (512, 1024, 2048)

_SYSRAND = random.SystemRandom()


class PaillierError(Exception):
    """Base class for cryptosystem failures."""


class MalformedCiphertext(PaillierError):
    """Raised when a value is not a usable ciphertext under the given key."""


@dataclass(frozen=True)
class PublicKey:
    """Public key: composite modulus ``n`` of exactly ``bits`` bits.

    The generator is fixed to ``n + 1``, which makes encryption a single
    modular multiplication plus one exponentiation for the nonce.
    """

    n: int
    bits: int
    nsquare: int = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "nsquare", self.n * self.n)

    @property
    def g(self) -> int:
        return self.n + 1


@dataclass(frozen=True)
class SecretKey:
    """Secret key: Carmichael value ``lam`` and decryption factor ``mu``.

    ``p`` and ``q`` are retained so decryption can run separately modulo
    p^2 and q^2; the result is identical to the textbook
    L(c^lam mod n^2) * mu mod n formula but roughly three times faster.
    """

    lam: int
    mu: int
    n: int
    p: int
    q: int
    # cached CRT constants, derived from p and q
    hp: int = field(init=False, repr=False, compare=False)
    hq: int = field(init=False, repr=False, compare=False)
    p_inv_q: int = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        p, q, n = self.p, self.q, self.n
        # h_p = (L_p((1+n)^(p-1) mod p^2))^-1 mod p, with L_p(u) = (u-1)/p
        hp = _invert((p - 1) * q % p, p)
        hq = _invert((q - 1) * p % q, q)
        object.__setattr__(self, "hp", hp)
        object.__setattr__(self, "hq", hq)
        object.__setattr__(self, "p_inv_q", _invert(p, q))

    @property
    def public_key(self) -> PublicKey:
        return PublicKey(self.n, self.n.bit_length())


@dataclass(frozen=True)
class KeyShare:
    """One additive share of the combined decryption exponent.

    The two shares sum (mod n*lam) to the exponent d with d = 0 (mod lam)
    and d = 1 (mod n); either share alone reveals nothing about d.
    """

    index: int  # 1 or 2
    exponent: int
    n: int

    @property
    def public_key(self) -> PublicKey:
        return PublicKey(self.n, self.n.bit_length())


@dataclass(frozen=True)
class Ciphertext:
    """An element of the multiplicative group modulo n^2, coprime to n."""

    value: int


@dataclass(frozen=True)
class PartialDecryption:
    """One party's contribution to a threshold decryption."""

    value: int
    index: int


def _random_prime(bits: int, rng: random.Random) -> int:
    # Top two bits forced to 1 so the product of two such primes always has
    # exactly 2*bits bits; low bit forced to make the candidate odd.
    top = (1 << (bits - 1)) | (1 << (bits - 2))
    while True:
        cand = rng.getrandbits(bits) | top | 1
        if _probably_prime(cand):
            return cand


def generate_primes(bits: int, rng: random.Random | None = None) -> tuple[int, int]:
    """Two distinct primes of ``bits // 2`` bits whose product has ``bits`` bits."""
    if bits not in SUPPORTED_BITS:
        raise ValueError(f"unsupported key size {bits}; expected one of {SUPPORTED_BITS}")
    rng = rng or _SYSRAND
    p = _random_prime(bits // 2, rng)
    while True:
        q = _random_prime(bits // 2, rng)
        if q != p:
            return p, q


def keypair_from_primes(p: int, q: int) -> tuple[PublicKey, SecretKey]:
    """Build a standard keypair from an existing prime pair."""
    n = p * q
    lam = lcm(p - 1, q - 1)
    # mu = (L(g^lam mod n^2))^-1 mod n; with g = n+1 this reduces to lam^-1.
    mu = _invert(lam % n, n)
    return PublicKey(n, n.bit_length()), SecretKey(lam, mu, n, p, q)


def keygen(bits: int, rng: random.Random | None = None) -> tuple[PublicKey, SecretKey]:
    """Generate a fresh keypair with a modulus of exactly ``bits`` bits."""
    p, q = generate_primes(bits, rng)
    return keypair_from_primes(p, q)


def _combined_exponent(p: int, q: int) -> tuple[int, int]:
    """The exponent d with d = 0 (mod lam), d = 1 (mod n), and the split modulus n*lam."""
    n = p * q
    lam = lcm(p - 1, q - 1)
    # gcd(lam, n) == 1 for distinct equal-length primes, so lam is invertible
    d = lam * _invert(lam % n, n)
    return d, n * lam


def threshold_from_primes(
    p: int, q: int, rng: random.Random | None = None
) -> tuple[PublicKey, KeyShare, KeyShare]:
    """Split the decryption exponent for an existing prime pair into two shares."""
    rng = rng or _SYSRAND
    n = p * q
    d, split_mod = _combined_exponent(p, q)
    d1 = rng.randrange(split_mod)
    d2 = (d - d1) % split_mod
    return PublicKey(n, n.bit_length()), KeyShare(1, d1, n), KeyShare(2, d2, n)


def threshold_keygen(
    bits: int, rng: random.Random | None = None
) -> tuple[PublicKey, KeyShare, KeyShare]:
    """Generate a fresh key whose decryption capability is split 2-of-2."""
    p, q = generate_primes(bits, rng)
    return threshold_from_primes(p, q, rng)


def _draw_nonce(pk: PublicKey, rng: random.Random) -> int:
    while True:
        r = rng.randrange(1, pk.n)
        if gcd(r, pk.n) == 1:
            return r


def encrypt(
    pk: PublicKey,
    m: int,
    nonce: int | None = None,
    rng: random.Random | None = None,
) -> Ciphertext:
    """Encrypt ``m`` in [0, n) as (1 + m*n) * nonce^n mod n^2.

    A fresh random nonce is drawn unless one is supplied, so two encryptions
    of the same plaintext are distinct except with negligible probability.
    """
    if not 0 <= m < pk.n:
        raise ValueError("plaintext out of range [0, n)")
    if nonce is None:
        nonce = _draw_nonce(pk, rng or _SYSRAND)
    elif not 0 < nonce < pk.n or gcd(nonce, pk.n) != 1:
        raise ValueError("nonce must lie in (0, n) and be coprime to n")
    n2 = pk.nsquare
    return Ciphertext(int((1 + m * pk.n) * _powmod(nonce, pk.n, n2) % n2))


def _check_ciphertext(n: int, nsquare: int, c: Ciphertext) -> int:
    v = c.value
    if not 0 < v < nsquare or gcd(v, n) != 1:
        raise MalformedCiphertext("ciphertext not in the residue group modulo n^2")
    return v


def decrypt(sk: SecretKey, c: Ciphertext) -> int:
    """Recover the plaintext; equals L(c^lam mod n^2) * mu mod n."""
    v = _check_ciphertext(sk.n, sk.n * sk.n, c)
    p, q = sk.p, sk.q
    psq, qsq = p * p, q * q
    mp = (int(_powmod(v, p - 1, psq)) - 1) // p * sk.hp % p
    mq = (int(_powmod(v, q - 1, qsq)) - 1) // q * sk.hq % q
    return (mp + (mq - mp) * sk.p_inv_q % q * p) % sk.n


def decrypt_textbook(sk: SecretKey, c: Ciphertext) -> int:
    """Reference decryption via the direct formula; used to cross-check `decrypt`."""
    n2 = sk.n * sk.n
    v = _check_ciphertext(sk.n, n2, c)
    return (int(_powmod(v, sk.lam, n2)) - 1) // sk.n * sk.mu % sk.n


def hom_add(pk: PublicKey, a: Ciphertext, b: Ciphertext) -> Ciphertext:
    """Ciphertext of the sum (mod n) of the two plaintexts."""
    return Ciphertext(a.value * b.value % pk.nsquare)


def hom_neg(pk: PublicKey, a: Ciphertext) -> Ciphertext:
    """Ciphertext of the negated plaintext (group inverse modulo n^2)."""
    return Ciphertext(_invert(a.value, pk.nsquare))


def hom_sub(pk: PublicKey, a: Ciphertext, b: Ciphertext) -> Ciphertext:
    return hom_add(pk, a, hom_neg(pk, b))


def add_plain(pk: PublicKey, a: Ciphertext, k: int) -> Ciphertext:
    """Add the public constant ``k`` to the plaintext without re-randomizing.

    Only for values that stay local or are re-blinded before transmission.
    """
    return Ciphertext(a.value * (1 + k % pk.n * pk.n) % pk.nsquare)


def plain_ciphertext(pk: PublicKey, k: int) -> Ciphertext:
    """The deterministic, unrandomized encryption of ``k`` (nonce 1)."""
    return Ciphertext((1 + k % pk.n * pk.n) % pk.nsquare)


def scalar_mul(pk: PublicKey, a: Ciphertext, u: int) -> Ciphertext:
    """Ciphertext of plaintext * u (mod n), computed as a^u mod n^2."""
    if not 0 <= u < pk.n:
        raise ValueError("scalar out of range [0, n)")
    return Ciphertext(int(_powmod(a.value, u, pk.nsquare)))


def partial_decrypt(share: KeyShare, c: Ciphertext) -> PartialDecryption:
    """This share's contribution c^d_i mod n^2 toward a joint decryption."""
    nsq = share.n * share.n
    v = _check_ciphertext(share.n, nsq, c)
    return PartialDecryption(int(_powmod(v, share.exponent, nsq)), share.index)


def combine(pk: PublicKey, a: PartialDecryption, b: PartialDecryption) -> int:
    """Merge the two parties' partial decryptions into the plaintext."""
    if a.index == b.index:
        raise ValueError("need partial decryptions from two distinct shares")
    u = a.value * b.value % pk.nsquare
    return (u - 1) // pk.n % pk.n


# -- key files ---------------------------------------------------------------
#
# Binary layout: magic "PPQK", version u16 BE, role byte, then length-prefixed
# (u32 BE) big-endian integers in a fixed order per role:
#   role 0 (public):  bits, n
#   role 1 (secret):  bits, n, lam, mu, p, q
#   role 2/3 (share): bits, n, exponent        (role encodes the share index)

KEY_MAGIC = b"PPQK"
KEY_VERSION = 1
ROLE_PUBLIC, ROLE_SECRET, ROLE_SHARE1, ROLE_SHARE2 = 0, 1, 2, 3


class KeyFormatError(PaillierError):
    """Raised when a key file cannot be parsed."""


def _pack_int(x: int) -> bytes:
    raw = x.to_bytes((x.bit_length() + 7) // 8 or 1, "big")
    return struct.pack(">I", len(raw)) + raw


def _unpack_ints(buf: bytes, count: int) -> list[int]:
    vals, off = [], 0
    for _ in range(count):
        if off + 4 > len(buf):
            raise KeyFormatError("truncated key file")
        (length,) = struct.unpack_from(">I", buf, off)
        off += 4
        if off + length > len(buf):
            raise KeyFormatError("truncated key file")
        vals.append(int.from_bytes(buf[off : off + length], "big"))
        off += length
    if off != len(buf):
        raise KeyFormatError("trailing bytes in key file")
    return vals


def key_to_bytes(key: PublicKey | SecretKey | KeyShare) -> bytes:
    if isinstance(key, PublicKey):
        role, fields = ROLE_PUBLIC, [key.bits, key.n]
    elif isinstance(key, SecretKey):
        role, fields = ROLE_SECRET, [key.n.bit_length(), key.n, key.lam, key.mu, key.p, key.q]
    elif isinstance(key, KeyShare):
        role = ROLE_SHARE1 if key.index == 1 else ROLE_SHARE2
        fields = [key.n.bit_length(), key.n, key.exponent]
    else:
        raise TypeError(f"not key material: {type(key).__name__}")
    body = b"".join(_pack_int(f) for f in fields)
    return KEY_MAGIC + struct.pack(">HB", KEY_VERSION, role) + body


def key_from_bytes(raw: bytes) -> PublicKey | SecretKey | KeyShare:
    if len(raw) < 7 or raw[:4] != KEY_MAGIC:
        raise KeyFormatError("not a key file (bad magic)")
    version, role = struct.unpack_from(">HB", raw, 4)
    if version != KEY_VERSION:
        raise KeyFormatError(f"unsupported key file version {version}")
    body = raw[7:]
    if role == ROLE_PUBLIC:
        bits, n = _unpack_ints(body, 2)
        return PublicKey(n, bits)
    if role == ROLE_SECRET:
        _bits, n, lam, mu, p, q = _unpack_ints(body, 6)
        return SecretKey(lam, mu, n, p, q)
    if role in (ROLE_SHARE1, ROLE_SHARE2):
        _bits, n, exponent = _unpack_ints(body, 3)
        return KeyShare(1 if role == ROLE_SHARE1 else 2, exponent, n)
    raise KeyFormatError(f"unknown key role {role}")


def save_key(path, key: PublicKey | SecretKey | KeyShare) -> None:
    with open(path, "wb") as fh:
        fh.write(key_to_bytes(key))


def load_key(path) -> PublicKey | SecretKey | KeyShare:
    with open(path, "rb") as fh:
        return key_from_bytes(fh.read())
