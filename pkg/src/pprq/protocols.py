"""Interactive two-party subprotocols over homomorphic ciphertexts.

Two building blocks, each between an *initiator* (holds ciphertexts, never
decrypts) and a *responder* (holds the decryption capability, never sees the
operands):

* ``compare_*``: given E(x), E(y) with x, y in [0, 2^m), produce E(c) with
  c = 1 iff x >= y, revealed to neither party.  The initiator flips a fair
  coin between evaluating x >= y and y >= x + 1, forms the encrypted
  difference d, and walks its m low bits: each round it sends the blinded
  quotient, the responder answers with an encryption of the blinded value's
  parity, and the initiator unblinds the parity, accumulates the bit, and
  halves the quotient.  A final blinded zero-test of d minus the accumulated
  bits decides the chosen orientation.  A round's bit is wrong only when the
  blind lands in the top 2^m values of [0, N) and wraps, so a full run is
  correct except with probability about m / 2^(K-m).

* ``multiply_*``: given E(a), E(b), produce E(a*b mod N) via the blinding
  identity a*b = (a+ra)(b+rb) - a*rb - b*ra - ra*rb.  Exact; one round.

Both blocks have threshold variants: when the initiator holds key share 1 it
attaches its partial decryption to every ciphertext it sends for opening, and
the responder (holding share 2) completes the opening instead of decrypting.
The responder's view is identical either way.

State machines are message driven - each call consumes one incoming message
and returns the next outgoing one - so the same core runs in-process and
over the wire unchanged.  A state object has a single owner and must not be
shared between concurrent contexts; distinct instances are independent.
"""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass, field
from typing import NamedTuple

from .paillier import (
    Ciphertext,
    KeyShare,
    PartialDecryption,
    PublicKey,
    SecretKey,
    add_plain,
    combine,
    decrypt,
    encrypt,
    hom_add,
    hom_neg,
    hom_sub,
    partial_decrypt,
    plain_ciphertext,
    scalar_mul,
)

_SYSRAND = random.SystemRandom()


class ProtocolError(Exception):
    """Raised on out-of-order messages or inconsistent protocol state."""


class Orientation(enum.Enum):
    """Which relation the comparison actually evaluates (hidden from the responder)."""

    GEQ = "x>=y"
    LT = "y>=x+1"


class DecryptRequest(NamedTuple):
    """A ciphertext sent to the responder for opening.

    ``partial`` is the initiator's share-1 partial decryption in threshold
    mode, ``None`` otherwise.
    """

    ciphertext: Ciphertext
    partial: PartialDecryption | None


@dataclass
class ComparisonResult:
    """Encrypted comparison outcome: decrypts to 1 iff x >= y."""

    c_enc: Ciphertext


@dataclass
class CompareInitiator:
    """Initiator-side comparison state.

    ``delta`` holds E(floor(d / 2^i)) and ``dprime`` holds E(d mod 2^i) after
    round i, provided no blind wrapped.  ``inv2`` is 2^-1 mod N so halving an
    even encrypted value is a single exponentiation.  The blind itself is
    discarded once the round message is built; only its parity is kept.
    """

    pk: PublicKey
    m: int
    orientation: Orientation
    d_enc: Ciphertext
    delta: Ciphertext
    dprime: Ciphertext
    inv2: int
    rng: random.Random
    share: KeyShare | None = None
    blind_bound: int = 0
    i: int = 0
    blind_parity: int | None = field(default=None, repr=False)
    finished: bool = False


@dataclass
class CompareResponder:
    """Responder-side comparison state: decryption capability and a round counter."""

    pk: PublicKey
    key: SecretKey | KeyShare
    m: int
    rng: random.Random
    i: int = 0


def _open(pk: PublicKey, key: SecretKey | KeyShare, request: DecryptRequest) -> int:
    if isinstance(key, KeyShare):
        if request.partial is None:
            raise ProtocolError("threshold responder needs the peer's partial decryption")
        return combine(pk, request.partial, partial_decrypt(key, request.ciphertext))
    return decrypt(key, request.ciphertext)


def _outgoing(state, ct: Ciphertext) -> DecryptRequest:
    if state.share is not None:
        return DecryptRequest(ct, partial_decrypt(state.share, ct))
    return DecryptRequest(ct, None)


def _next_blinded_quotient(state: CompareInitiator) -> DecryptRequest:
    r = state.rng.randrange(state.blind_bound)
    state.blind_parity = r & 1
    state.i += 1
    return _outgoing(state, hom_add(state.pk, state.delta, encrypt(state.pk, r, rng=state.rng)))


def compare_start(
    pk: PublicKey,
    enc_x: Ciphertext,
    enc_y: Ciphertext,
    m: int,
    rng: random.Random | None = None,
    *,
    share: KeyShare | None = None,
    orientation: Orientation | None = None,
    blind_bound: int | None = None,
) -> tuple[CompareInitiator, DecryptRequest]:
    """Begin a comparison of two encrypted values in [0, 2^m).

    Returns the initiator state and the first round's message.  ``orientation``
    and ``blind_bound`` override the coin flip and the blind range; they exist
    for tests only and must never be set in production, where the orientation
    is a fair coin and blinds are uniform over [0, N).
    """
    rng = rng or _SYSRAND
    if not 0 < m < pk.bits - 2:
        raise ValueError(f"domain bits m={m} must satisfy 0 < m < K-2 = {pk.bits - 2}")
    if orientation is None:
        orientation = Orientation.GEQ if rng.getrandbits(1) else Orientation.LT
    if orientation is Orientation.GEQ:
        d_enc = hom_sub(pk, enc_x, enc_y)
    else:
        d_enc = hom_sub(pk, enc_y, add_plain(pk, enc_x, 1))
    state = CompareInitiator(
        pk=pk,
        m=m,
        orientation=orientation,
        d_enc=d_enc,
        delta=d_enc,
        dprime=plain_ciphertext(pk, 0),
        inv2=pow(2, -1, pk.n),
        rng=rng,
        share=share,
        blind_bound=blind_bound if blind_bound is not None else pk.n,
    )
    return state, _next_blinded_quotient(state)


def compare_reply_parity(resp: CompareResponder, request: DecryptRequest) -> Ciphertext:
    """Responder round i: open the blinded value, answer E(1) if odd else E(0)."""
    resp.i += 1
    if resp.i > resp.m:
        raise ProtocolError("parity rounds exhausted; expected the final zero-test")
    return encrypt(resp.pk, _open(resp.pk, resp.key, request) & 1, rng=resp.rng)


def compare_absorb_parity(
    state: CompareInitiator, enc_parity: Ciphertext
) -> tuple[DecryptRequest, bool]:
    """Consume the round's parity reply; emit the next round or the final zero-test.

    Returns ``(request, final)`` where ``final`` marks the zero-test message.
    An even blind leaves the parity as the bit; an odd blind flips it.  The
    extracted bit is scaled into the accumulator and subtracted from the
    quotient, which is then exactly halved (the difference is always even).
    """
    pk = state.pk
    if state.finished or state.i > state.m:
        raise ProtocolError("comparison already past its final round")
    if state.blind_parity == 0:
        enc_bit = enc_parity
    else:
        enc_bit = add_plain(pk, hom_neg(pk, enc_parity), 1)
    state.blind_parity = None
    state.dprime = hom_add(pk, state.dprime, scalar_mul(pk, enc_bit, 1 << (state.i - 1)))
    state.delta = scalar_mul(pk, hom_sub(pk, state.delta, enc_bit), state.inv2)
    if state.i < state.m:
        return _next_blinded_quotient(state), False
    gap = hom_sub(pk, state.d_enc, state.dprime)
    # a zero multiplier would turn any gap into a false "equal"
    g_prime = scalar_mul(pk, gap, state.rng.randrange(1, pk.n))
    state.i += 1
    return _outgoing(state, g_prime), True


def compare_reply_zero_test(resp: CompareResponder, request: DecryptRequest) -> Ciphertext:
    """Responder final round: E(1) iff the masked gap opens to zero."""
    resp.i += 1
    if resp.i != resp.m + 1:
        raise ProtocolError(f"zero-test arrived at round {resp.i}, expected {resp.m + 1}")
    return encrypt(resp.pk, 1 if _open(resp.pk, resp.key, request) == 0 else 0, rng=resp.rng)


def compare_finish(state: CompareInitiator, enc_flag: Ciphertext) -> ComparisonResult:
    """Map the responder's flag back through the orientation coin."""
    if state.finished:
        raise ProtocolError("comparison already finished")
    if state.i <= state.m:
        raise ProtocolError("comparison has rounds left; zero-test not yet emitted")
    state.finished = True
    if state.orientation is Orientation.GEQ:
        return ComparisonResult(enc_flag)
    return ComparisonResult(add_plain(state.pk, hom_neg(state.pk, enc_flag), 1))


# -- multiplication -------------------------------------------------------------


@dataclass
class MultiplyInitiator:
    """Initiator-side multiplication state: operands and their blinds."""

    pk: PublicKey
    enc_a: Ciphertext
    enc_b: Ciphertext
    r_a: int
    r_b: int
    rng: random.Random
    share: KeyShare | None = None
    finished: bool = False


def multiply_start(
    pk: PublicKey,
    enc_a: Ciphertext,
    enc_b: Ciphertext,
    rng: random.Random | None = None,
    *,
    share: KeyShare | None = None,
) -> tuple[MultiplyInitiator, tuple[DecryptRequest, DecryptRequest]]:
    """Blind both operands and emit them for the responder to open and multiply."""
    rng = rng or _SYSRAND
    r_a, r_b = rng.randrange(pk.n), rng.randrange(pk.n)
    state = MultiplyInitiator(pk, enc_a, enc_b, r_a, r_b, rng, share)
    a_blind = hom_add(pk, enc_a, encrypt(pk, r_a, rng=rng))
    b_blind = hom_add(pk, enc_b, encrypt(pk, r_b, rng=rng))
    return state, (_outgoing(state, a_blind), _outgoing(state, b_blind))


def multiply_respond(
    pk: PublicKey,
    key: SecretKey | KeyShare,
    request_a: DecryptRequest,
    request_b: DecryptRequest,
    rng: random.Random | None = None,
) -> Ciphertext:
    """Open both blinded operands and return a fresh encryption of their product."""
    rng = rng or _SYSRAND
    h = _open(pk, key, request_a) * _open(pk, key, request_b) % pk.n
    return encrypt(pk, h, rng=rng)


def multiply_finish(state: MultiplyInitiator, enc_product: Ciphertext) -> Ciphertext:
    """Strip the cross terms: E((a+ra)(b+rb)) - a*rb - b*ra - ra*rb = E(a*b)."""
    if state.finished:
        raise ProtocolError("multiplication already finished")
    state.finished = True
    pk, n = state.pk, state.pk.n
    s = hom_add(pk, enc_product, scalar_mul(pk, state.enc_a, (n - state.r_b) % n))
    s = hom_add(pk, s, scalar_mul(pk, state.enc_b, (n - state.r_a) % n))
    return hom_add(pk, s, hom_neg(pk, encrypt(pk, state.r_a * state.r_b % n, rng=state.rng)))


# -- in-process drivers ----------------------------------------------------------


def run_compare(
    pk: PublicKey,
    responder_key: SecretKey | KeyShare,
    enc_x: Ciphertext,
    enc_y: Ciphertext,
    m: int,
    *,
    rng_initiator: random.Random | None = None,
    rng_responder: random.Random | None = None,
    initiator_share: KeyShare | None = None,
    orientation: Orientation | None = None,
    blind_bound: int | None = None,
) -> ComparisonResult:
    """Run a full comparison with both parties in this process."""
    resp = CompareResponder(pk, responder_key, m, rng_responder or _SYSRAND)
    state, request = compare_start(
        pk,
        enc_x,
        enc_y,
        m,
        rng_initiator,
        share=initiator_share,
        orientation=orientation,
        blind_bound=blind_bound,
    )
    final = False
    while not final:
        request, final = compare_absorb_parity(state, compare_reply_parity(resp, request))
    return compare_finish(state, compare_reply_zero_test(resp, request))


def run_multiply(
    pk: PublicKey,
    responder_key: SecretKey | KeyShare,
    enc_a: Ciphertext,
    enc_b: Ciphertext,
    *,
    rng_initiator: random.Random | None = None,
    rng_responder: random.Random | None = None,
    initiator_share: KeyShare | None = None,
) -> Ciphertext:
    """Run a full multiplication with both parties in this process."""
    state, (req_a, req_b) = multiply_start(
        pk, enc_a, enc_b, rng_initiator, share=initiator_share
    )
    h = multiply_respond(pk, responder_key, req_a, req_b, rng_responder)
    return multiply_finish(state, h)
