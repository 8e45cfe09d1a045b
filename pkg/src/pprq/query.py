"""Range-query orchestration across the four principals.

The owner outsources an attribute-wise encrypted table to the primary cloud
(C1).  A user (Bob) splits a private query {k, alpha, beta} additively
between the two clouds, which jointly evaluate the predicate
alpha <= t[k] <= beta per record under encryption, blind and permute the
table, and stream exactly the matching rows back.  C1 alone sees the
permutation; C2 alone can (partially) decrypt; neither learns which stored
records matched.

Two variants:

* protocol 1: C2 holds the full table key; matched rows reach the user as a
  blinded residue plus the blind encrypted under the user's own key, so
  recovery costs the user w decryptions per row.
* protocol 2: the table key is split between the clouds, which pass each
  matched row through a partial-decryption relay; the user receives additive
  shares and recovers rows without a single decryption.

Per-record subprotocol instances are independent and are pipelined over the
cloud-to-cloud channel in windows of ``window`` instances.  Frame ``seq``
fields identify the instance: seq = row * (w + 3) + slot + 1, with slots
(lower bound test, upper bound test, mask product, w masked cells).
Result-row frames reuse ``seq`` as the output row number so the user can
pair the two clouds' streams.
"""

from __future__ import annotations

import random
import secrets
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterator

from . import wire
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
    keygen,
    partial_decrypt,
)
from .protocols import (
    CompareResponder,
    DecryptRequest,
    ProtocolError,
    compare_absorb_parity,
    compare_finish,
    compare_reply_parity,
    compare_reply_zero_test,
    compare_start,
    multiply_finish,
    multiply_respond,
    multiply_start,
)
from .store import EncryptedTable
from .wire import Frame

_SYSRAND = random.SystemRandom()


class QueryRejected(ProtocolError):
    """A cloud refused the session (authorization or configuration mismatch)."""

    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class RangeQuery:
    """A private range query: match records whose attribute k lies in [alpha, beta].

    ``k`` is 1-based.  alpha > beta is tolerated and yields the empty set.
    """

    k: int
    alpha: int
    beta: int


@dataclass(frozen=True)
class QueryShares:
    """Additive sharing of the bounds: the attribute index goes only to C1."""

    k: int
    alpha1: int
    beta1: int
    alpha2: int
    beta2: int


def split_query(
    query: RangeQuery,
    n_modulus: int,
    rng: random.Random | None = None,
    m: int | None = None,
) -> QueryShares:
    """Split both bounds uniformly mod N; validates the domain when m is known."""
    rng = rng or _SYSRAND
    if m is not None:
        bound = 1 << m
        if not (0 <= query.alpha < bound and 0 <= query.beta < bound):
            raise ValueError(f"query bounds must lie in [0, 2^{m})")
    alpha1 = rng.randrange(n_modulus)
    beta1 = rng.randrange(n_modulus)
    return QueryShares(
        query.k,
        alpha1,
        beta1,
        (query.alpha - alpha1) % n_modulus,
        (query.beta - beta1) % n_modulus,
    )


def reconstruct_bounds(
    pk: PublicKey,
    alpha1: int,
    beta1: int,
    enc_alpha2: Ciphertext,
    enc_beta2: Ciphertext,
    rng: random.Random | None = None,
) -> tuple[Ciphertext, Ciphertext]:
    """C1: add its plaintext shares into C2's encrypted shares."""
    rng = rng or _SYSRAND
    return (
        hom_add(pk, encrypt(pk, alpha1, rng=rng), enc_alpha2),
        hom_add(pk, encrypt(pk, beta1, rng=rng), enc_beta2),
    )


def permute_rows(rows: list, pi: list[int]) -> list:
    """Apply a permutation given as an index array: output t comes from input pi[t]."""
    return [rows[s] for s in pi]


def _instance_seq(row: int, slot: int, w: int) -> int:
    return row * (w + 3) + slot + 1


# -- windowed subprotocol driver (C1 side) --------------------------------------


class _CompareJob:
    """One comparison instance adapted to frame-in/frame-out stepping."""

    def __init__(self, pk, enc_x, enc_y, m, rng, share, session_id, seq):
        self.share = share
        self.session_id = session_id
        self.seq = seq
        self.bits = pk.bits
        self.state, request = compare_start(pk, enc_x, enc_y, m, rng, share=share)
        self.frame = self._wrap(request, final=False)
        self.awaiting_flag = False
        self.result: Ciphertext | None = None

    def _wrap(self, request: DecryptRequest, final: bool) -> Frame:
        if self.share is not None:
            msg_type = wire.MSG_TSCP_DEC
        else:
            msg_type = wire.MSG_SCP_G if final else wire.MSG_SCP_TAU
        payload = wire.pack_decrypt_request(request.ciphertext, request.partial, self.bits)
        return Frame(msg_type, self.session_id, self.seq, payload)

    def absorb(self, reply: Frame) -> bool:
        ct = wire.parse_ciphertext_payload(reply.payload, self.bits)
        if self.awaiting_flag:
            self.result = compare_finish(self.state, ct).c_enc
            self.frame = None
            return True
        request, final = compare_absorb_parity(self.state, ct)
        self.awaiting_flag = final
        self.frame = self._wrap(request, final)
        return False


class _MultiplyJob:
    """One multiplication instance: a single exchange."""

    def __init__(self, pk, enc_a, enc_b, rng, share, session_id, seq):
        self.bits = pk.bits
        self.seq = seq
        self.state, (req_a, req_b) = multiply_start(pk, enc_a, enc_b, rng, share=share)
        msg_type = wire.MSG_TSMP_AB if share is not None else wire.MSG_SMP_AB
        payload = wire.pack_operand_pair(
            req_a.ciphertext, req_a.partial, req_b.ciphertext, req_b.partial, self.bits
        )
        self.frame = Frame(msg_type, session_id, seq, payload)
        self.result: Ciphertext | None = None

    def absorb(self, reply: Frame) -> bool:
        self.result = multiply_finish(
            self.state, wire.parse_ciphertext_payload(reply.payload, self.bits)
        )
        self.frame = None
        return True


def _run_jobs(jobs: list, channel, window: int) -> None:
    """Advance jobs in lockstep waves, at most ``window`` instances in flight."""
    for start in range(0, len(jobs), window):
        live = list(jobs[start : start + window])
        while live:
            replies = channel.request([job.frame for job in live])
            by_seq = {f.seq: f for f in replies}
            live = [job for job in live if not job.absorb(by_seq[job.seq])]


def evaluate_mask(
    pk: PublicKey,
    table: EncryptedTable,
    col: int,
    enc_alpha: Ciphertext,
    enc_beta: Ciphertext,
    channel,
    *,
    session_id: bytes,
    rng: random.Random | None = None,
    share: KeyShare | None = None,
    window: int = 8,
) -> tuple[list[Ciphertext], list[list[Ciphertext]]]:
    """Jointly compute the encrypted match bit and masked copy of every record.

    For record i: lower = E([t_ik >= alpha]), upper = E([beta >= t_ik]),
    mask_i = E(lower * upper), and masked cell (i, j) decrypts to t_ij when
    the record matches and 0 otherwise.  Only the caller (C1) sees any of
    these ciphertexts.
    """
    rng = rng or _SYSRAND
    n, w, m = table.n, table.w, table.m

    lower_jobs, upper_jobs = [], []
    for i in range(n):
        t = table.cells[i][col]
        lower_jobs.append(
            _CompareJob(pk, t, enc_alpha, m, rng, share, session_id, _instance_seq(i, 0, w))
        )
        upper_jobs.append(
            _CompareJob(pk, enc_beta, t, m, rng, share, session_id, _instance_seq(i, 1, w))
        )
    _run_jobs(lower_jobs + upper_jobs, channel, window)

    mask_jobs = [
        _MultiplyJob(
            pk,
            lower_jobs[i].result,
            upper_jobs[i].result,
            rng,
            share,
            session_id,
            _instance_seq(i, 2, w),
        )
        for i in range(n)
    ]
    _run_jobs(mask_jobs, channel, window)
    mask = [job.result for job in mask_jobs]

    cell_jobs = [
        _MultiplyJob(
            pk,
            table.cells[i][j],
            mask[i],
            rng,
            share,
            session_id,
            _instance_seq(i, 3 + j, w),
        )
        for i in range(n)
        for j in range(w)
    ]
    _run_jobs(cell_jobs, channel, window)
    masked = [[cell_jobs[i * w + j].result for j in range(w)] for i in range(n)]
    return mask, masked


# -- protocol 1 local steps ------------------------------------------------------


def protocol1_mask_permute(
    pk: PublicKey,
    user_pk: PublicKey,
    masked: list[list[Ciphertext]],
    mask: list[Ciphertext],
    rng: random.Random | None = None,
):
    """C1: blind every masked cell, encrypt the blinds under the user's key,
    and permute rows.  Returns (X, Y, Z, pi)."""
    rng = rng or _SYSRAND
    n, w = len(masked), len(masked[0])
    blinded, enc_blinds = [], []
    for i in range(n):
        row_r = [rng.randrange(pk.n) for _ in range(w)]
        blinded.append(
            [hom_add(pk, masked[i][j], encrypt(pk, row_r[j], rng=rng)) for j in range(w)]
        )
        enc_blinds.append([encrypt(user_pk, r, rng=rng) for r in row_r])
    pi = list(range(n))
    rng.shuffle(pi)
    return (
        permute_rows(blinded, pi),
        permute_rows(enc_blinds, pi),
        permute_rows(mask, pi),
        pi,
    )


def protocol1_filter_rows(sk: SecretKey, rows) -> list[tuple[list[int], list[Ciphertext]]]:
    """C2: keep rows whose mask bit decrypts to 1; open their blinded cells."""
    out = []
    for x_cells, y_cells, z in rows:
        if decrypt(sk, z) == 1:
            out.append(([decrypt(sk, c) for c in x_cells], y_cells))
    return out


def protocol1_recover(
    user_sk: SecretKey,
    n_modulus: int,
    entries,
    m: int | None = None,
) -> tuple[list[list[int]], int, list[str]]:
    """User: strip the blinds; returns (records, decryptions performed, warnings)."""
    records, count, warnings = [], 0, []
    for x_values, y_cells in entries:
        row = []
        for j, (x, y) in enumerate(zip(x_values, y_cells)):
            blind = decrypt(user_sk, y)
            count += 1
            value = (x - blind) % n_modulus
            if m is not None and value >= (1 << m):
                warnings.append(
                    f"recovered value at column {j + 1} exceeds the attribute domain; "
                    "corrupted or tampered response"
                )
            row.append(value)
        records.append(row)
    return records, count, warnings


# -- protocol 2 local steps ------------------------------------------------------


def protocol2_mask_permute(
    pk: PublicKey,
    share1: KeyShare,
    masked: list[list[Ciphertext]],
    mask: list[Ciphertext],
    rng: random.Random | None = None,
):
    """C1: blind cells, keep the blinds encrypted under the table key, attach a
    share-1 partial to every mask bit, and permute rows.  Returns (X, W, Z, pi)."""
    rng = rng or _SYSRAND
    n, w = len(masked), len(masked[0])
    blinded, enc_blinds = [], []
    for i in range(n):
        row_r = [rng.randrange(pk.n) for _ in range(w)]
        blinded.append(
            [hom_add(pk, masked[i][j], encrypt(pk, row_r[j], rng=rng)) for j in range(w)]
        )
        enc_blinds.append([encrypt(pk, r, rng=rng) for r in row_r])
    z_pairs = [(mask_ct, partial_decrypt(share1, mask_ct)) for mask_ct in mask]
    pi = list(range(n))
    rng.shuffle(pi)
    return (
        permute_rows(blinded, pi),
        permute_rows(enc_blinds, pi),
        permute_rows(z_pairs, pi),
        pi,
    )


def protocol2_filter_blind(
    pk: PublicKey,
    share2: KeyShare,
    rows,
    rng: random.Random | None = None,
) -> Iterator[tuple[list[Ciphertext], list[Ciphertext], list[PartialDecryption]]]:
    """C2: complete each mask-bit decryption; re-blind matching rows and partially
    decrypt the blind sums.  Yields (X', Y', W') per matching row."""
    rng = rng or _SYSRAND
    for x_cells, w_cells, (z_ct, z_partial) in rows:
        bit = combine(pk, z_partial, partial_decrypt(share2, z_ct))
        if bit != 1:
            continue
        fresh = [encrypt(pk, rng.randrange(pk.n), rng=rng) for _ in x_cells]
        x_prime = [hom_add(pk, x, f) for x, f in zip(x_cells, fresh)]
        y_prime = [hom_add(pk, w, f) for w, f in zip(w_cells, fresh)]
        w_prime = [partial_decrypt(share2, y) for y in y_prime]
        yield x_prime, y_prime, w_prime


def protocol2_unblind(
    pk: PublicKey,
    share1: KeyShare,
    x_prime: list[Ciphertext],
    y_prime: list[Ciphertext],
    w_prime: list[PartialDecryption],
    rng: random.Random | None = None,
):
    """C1: open the summed blinds, strip them, re-blind with fresh values known
    only to C1, and partially decrypt.  Returns (Phi, H', rhat)."""
    rng = rng or _SYSRAND
    blind_sums = [
        combine(pk, partial_decrypt(share1, y), wp) for y, wp in zip(y_prime, w_prime)
    ]
    cleaned = [add_plain(pk, x, -h) for x, h in zip(x_prime, blind_sums)]
    rhat = [rng.randrange(pk.n) for _ in cleaned]
    h_prime = [
        hom_add(pk, c, encrypt(pk, r, rng=rng)) for c, r in zip(cleaned, rhat)
    ]
    phi = [partial_decrypt(share1, h) for h in h_prime]
    return phi, h_prime, rhat


def protocol2_final_share(
    pk: PublicKey,
    share2: KeyShare,
    phi: list[PartialDecryption],
    h_prime: list[Ciphertext],
) -> list[int]:
    """C2: finish each relay decryption; the results are uniformly blinded residues."""
    return [combine(pk, p, partial_decrypt(share2, h)) for p, h in zip(phi, h_prime)]


def protocol2_recover(
    n_modulus: int,
    gamma_rows: dict[int, list[int]],
    rhat_rows: dict[int, list[int]],
) -> list[list[int]]:
    """User: subtract the two clouds' streams, paired by row sequence number."""
    if set(gamma_rows) != set(rhat_rows):
        raise ProtocolError("unmatched result-row streams from the two clouds")
    records = []
    for seq in sorted(gamma_rows):
        records.append(
            [(g - r) % n_modulus for g, r in zip(gamma_rows[seq], rhat_rows[seq])]
        )
    return records


def generate_user_keypair(
    table_pk: PublicKey, rng: random.Random | None = None, bits: int | None = None
) -> tuple[PublicKey, SecretKey]:
    """User keypair for protocol 1; its modulus must exceed the table modulus so
    blinds drawn mod N decrypt exactly under the user key."""
    bits = bits or table_pk.bits
    while True:
        pk, sk = keygen(bits, rng)
        if pk.n > table_pk.n:
            return pk, sk


# -- secondary cloud (C2): reactive session --------------------------------------

_SUBPROTOCOL_TYPES = frozenset(
    (wire.MSG_SCP_TAU, wire.MSG_SCP_G, wire.MSG_TSCP_DEC, wire.MSG_SMP_AB, wire.MSG_TSMP_AB)
)


class SecondaryCloudSession:
    """Per-query state on C2: answers decryption rounds, filters the permuted
    batch, and (protocol 2) relays partial decryptions.

    ``handle`` maps one incoming frame to a list of ``(destination, frame)``
    pairs with destination ``"c1"`` or ``"user"``.  It never stores an opened
    blinded value beyond producing its reply.
    """

    def __init__(
        self,
        key: SecretKey | KeyShare,
        *,
        rng: random.Random | None = None,
        allowlist: set[str] | None = None,
    ):
        self.key = key
        self.pk = key.public_key
        self.rng = rng or _SYSRAND
        self.allowlist = allowlist
        self.proto: int | None = None
        self.m = 0
        self.n_rows = 0
        self.w = 0
        self.user_bits = 0
        self.shares: tuple[int, int] | None = None
        self.session_id = b"\x00" * 16
        self.cmp_states: dict[int, CompareResponder] = {}
        self.batch_rows: list | None = None
        self.rows_received = 0
        self.dead = False

    def _fail(self, dest: str, code: int, message: str) -> list[tuple[str, Frame]]:
        self.dead = True
        return [(dest, Frame(wire.MSG_ERROR, self.session_id, 0, wire.pack_error(code, message)))]

    def _allowed(self, user_id: str) -> bool:
        return self.allowlist is None or user_id in self.allowlist

    def handle(self, frame: Frame) -> list[tuple[str, Frame]]:
        if self.dead:
            return []
        self.session_id = frame.session_id
        try:
            return self._dispatch(frame)
        except QueryRejected as exc:
            return self._fail("user", exc.code, str(exc))
        except (ProtocolError, wire.FrameError) as exc:
            return self._fail("c1", wire.ERR_MALFORMED, str(exc))

    def _dispatch(self, frame: Frame) -> list[tuple[str, Frame]]:
        t = frame.msg_type
        if t == wire.MSG_HELLO:
            return self._on_hello(wire.parse_hello(frame.payload))
        if t == wire.MSG_QUERY_SHARE_C2:
            self.shares = wire.parse_query_share_c2(frame.payload, self.pk.bits)
            return []
        if t in _SUBPROTOCOL_TYPES:
            return self._on_subprotocol(frame)
        if t == wire.MSG_XYZ_BATCH:
            return self._on_batch_chunk(frame)
        if t == wire.MSG_PHI_ROW:
            return self._on_phi(frame)
        if t == wire.MSG_DONE:
            # protocol 2: C1 finished relaying; the user's stream is complete
            return [("user", Frame(wire.MSG_DONE, self.session_id, 0))]
        if t == wire.MSG_ERROR:
            self.dead = True
            return []
        raise ProtocolError(f"unexpected message type 0x{t:02x}")

    def _on_hello(self, hello: wire.Hello) -> list[tuple[str, Frame]]:
        threshold = isinstance(self.key, KeyShare)
        if hello.proto not in (1, 2):
            raise QueryRejected(wire.ERR_MALFORMED, f"unknown protocol {hello.proto}")
        if hello.proto == 2 and not threshold:
            raise QueryRejected(
                wire.ERR_KEY_MISMATCH, "protocol 2 requires a key share, not a full secret key"
            )
        if hello.proto == 1 and threshold:
            raise QueryRejected(
                wire.ERR_KEY_MISMATCH, "protocol 1 requires the full secret key"
            )
        if not self._allowed(hello.user_id):
            raise QueryRejected(wire.ERR_UNAUTHORIZED, f"user {hello.user_id!r} not authorized")
        if self.proto is not None and hello.proto != self.proto:
            raise QueryRejected(wire.ERR_MALFORMED, "protocol changed mid-session")
        self.proto = hello.proto
        if hello.role == wire.ROLE_USER:
            return []
        # primary cloud announcing table parameters and expecting the bound shares
        if hello.pk is None or hello.pk.n != self.pk.n:
            raise QueryRejected(wire.ERR_KEY_MISMATCH, "table key does not match this cloud's key")
        if self.shares is None:
            raise ProtocolError("no query shares for this session")
        self.m, self.n_rows, self.w = hello.m, hello.n_rows, hello.w
        alpha2, beta2 = self.shares
        payload = wire.pack_enc_shares(
            encrypt(self.pk, alpha2, rng=self.rng),
            encrypt(self.pk, beta2, rng=self.rng),
            self.pk.bits,
        )
        return [("c1", Frame(wire.MSG_ENC_SHARES, self.session_id, 0, payload))]

    def _on_subprotocol(self, frame: Frame) -> list[tuple[str, Frame]]:
        t, bits = frame.msg_type, self.pk.bits
        if t in (wire.MSG_SMP_AB, wire.MSG_TSMP_AB):
            a, pa, b, pb = wire.parse_operand_pair(
                frame.payload, bits, with_partial=(t == wire.MSG_TSMP_AB)
            )
            h = multiply_respond(
                self.pk, self.key, DecryptRequest(a, pa), DecryptRequest(b, pb), self.rng
            )
            payload = wire.pack_ciphertext_payload(h, bits)
            return [("c1", Frame(wire.MSG_SMP_H, self.session_id, frame.seq, payload))]
        ct, part = wire.parse_decrypt_request(
            frame.payload, bits, with_partial=(t == wire.MSG_TSCP_DEC)
        )
        state = self.cmp_states.get(frame.seq)
        if state is None:
            state = self.cmp_states[frame.seq] = CompareResponder(
                self.pk, self.key, self.m, self.rng
            )
        final = t == wire.MSG_SCP_G or (t == wire.MSG_TSCP_DEC and state.i >= state.m)
        request = DecryptRequest(ct, part)
        if final:
            reply = compare_reply_zero_test(state, request)
            del self.cmp_states[frame.seq]
            out_type = wire.MSG_SCP_C
        else:
            reply = compare_reply_parity(state, request)
            out_type = wire.MSG_SCP_S
        payload = wire.pack_ciphertext_payload(reply, bits)
        return [("c1", Frame(out_type, self.session_id, frame.seq, payload))]

    def _on_batch_chunk(self, frame: Frame) -> list[tuple[str, Frame]]:
        chunk = wire.parse_batch_chunk(frame.payload, self.pk.bits)
        if chunk.proto != self.proto or chunk.w != self.w or chunk.total_rows != self.n_rows:
            raise ProtocolError("batch header disagrees with the session parameters")
        if self.batch_rows is None:
            self.batch_rows = [None] * chunk.total_rows
            self.user_bits = chunk.user_bits
        if chunk.start + len(chunk.rows) > chunk.total_rows:
            raise ProtocolError("batch chunk exceeds the announced row count")
        for offset, row in enumerate(chunk.rows):
            if self.batch_rows[chunk.start + offset] is not None:
                raise ProtocolError("duplicate batch row")
            self.batch_rows[chunk.start + offset] = row
            self.rows_received += 1
        if self.rows_received < chunk.total_rows:
            return []
        rows = self.batch_rows
        self.batch_rows = None
        return self._finish_batch(rows)

    def _finish_batch(self, rows) -> list[tuple[str, Frame]]:
        out: list[tuple[str, Frame]] = []
        if self.proto == 1:
            matches = protocol1_filter_rows(self.key, rows)
            for ordinal, (x_values, y_cells) in enumerate(matches, start=1):
                payload = wire.pack_result_row_p1(
                    x_values, y_cells, self.pk.bits, self.user_bits
                )
                out.append(
                    ("user", Frame(wire.MSG_RESULT_ROW_P1, self.session_id, ordinal, payload))
                )
            out.append(("user", Frame(wire.MSG_DONE, self.session_id, 0)))
            out.append(("c1", Frame(wire.MSG_DONE, self.session_id, 0)))
            return out
        ordinal = 0
        for x_prime, y_prime, w_prime in protocol2_filter_blind(
            self.pk, self.key, rows, self.rng
        ):
            ordinal += 1
            payload = wire.pack_p2_row(x_prime, y_prime, w_prime, self.pk.bits)
            out.append(("c1", Frame(wire.MSG_P2_ROW, self.session_id, ordinal, payload)))
        out.append(("c1", Frame(wire.MSG_DONE, self.session_id, 0)))
        return out

    def _on_phi(self, frame: Frame) -> list[tuple[str, Frame]]:
        phi, h_prime = wire.parse_phi_row(frame.payload, self.pk.bits)
        gammas = protocol2_final_share(self.pk, self.key, phi, h_prime)
        payload = wire.pack_residue_row(gammas, self.pk.bits)
        return [("user", Frame(wire.MSG_GAMMA_ROW, self.session_id, frame.seq, payload))]


# -- primary cloud (C1): driving session ------------------------------------------


class PrimaryCloudSession:
    """Per-query driver on C1: holds the table, runs the joint predicate
    evaluation against C2, blinds and permutes, and relays results.

    ``channel`` abstracts the C2 link (in-process or socket); frames for the
    user go through ``emit_user``.  The permutation, mask vector, and masked
    table never leave this object.
    """

    def __init__(
        self,
        table: EncryptedTable,
        *,
        share: KeyShare | None = None,
        rng: random.Random | None = None,
        allowlist: set[str] | None = None,
        window: int = 8,
    ):
        self.table = table
        self.pk = table.public_key
        self.share = share
        self.rng = rng or _SYSRAND
        self.allowlist = allowlist
        self.window = max(1, window)
        # retained for post-run inspection and tests
        self.mask: list[Ciphertext] | None = None
        self.masked: list[list[Ciphertext]] | None = None
        self.permutation: list[int] | None = None
        self.batch_rows: list | None = None

    def validate_user(self, hello: wire.Hello) -> None:
        if hello.proto not in (1, 2):
            raise QueryRejected(wire.ERR_MALFORMED, f"unknown protocol {hello.proto}")
        if self.allowlist is not None and hello.user_id not in self.allowlist:
            raise QueryRejected(wire.ERR_UNAUTHORIZED, f"user {hello.user_id!r} not authorized")
        if hello.proto == 2 and self.share is None:
            raise QueryRejected(
                wire.ERR_KEY_MISMATCH, "protocol 2 requires this cloud to hold a key share"
            )
        if hello.proto == 1:
            if hello.user_pk is None:
                raise QueryRejected(wire.ERR_MALFORMED, "protocol 1 needs the user's public key")
            if hello.user_pk.n <= self.pk.n:
                raise QueryRejected(
                    wire.ERR_KEY_MISMATCH,
                    "user modulus must exceed the table modulus for exact unblinding",
                )

    def run(
        self,
        hello: wire.Hello,
        session_id: bytes,
        k: int,
        alpha1: int,
        beta1: int,
        channel,
        emit_user: Callable[[Frame], None],
    ) -> None:
        self.validate_user(hello)
        table = self.table
        if not 1 <= k <= table.w:
            raise QueryRejected(wire.ERR_MALFORMED, f"attribute index {k} outside [1, {table.w}]")
        proto = hello.proto
        share = self.share if proto == 2 else None

        hello_payload = wire.pack_hello_cloud1(
            proto, hello.user_id, self.pk, table.m, table.n, table.w
        )
        (reply,) = channel.request([Frame(wire.MSG_HELLO, session_id, 0, hello_payload)])
        if reply.msg_type != wire.MSG_ENC_SHARES:
            raise ProtocolError(f"expected bound shares, got type 0x{reply.msg_type:02x}")
        enc_alpha2, enc_beta2 = wire.parse_enc_shares(reply.payload, self.pk.bits)
        enc_alpha, enc_beta = reconstruct_bounds(
            self.pk, alpha1, beta1, enc_alpha2, enc_beta2, self.rng
        )

        self.mask, self.masked = evaluate_mask(
            self.pk,
            table,
            k - 1,
            enc_alpha,
            enc_beta,
            channel,
            session_id=session_id,
            rng=self.rng,
            share=share,
            window=self.window,
        )

        if proto == 1:
            x_rows, y_rows, z_rows, self.permutation = protocol1_mask_permute(
                self.pk, hello.user_pk, self.masked, self.mask, self.rng
            )
            self.batch_rows = list(zip(x_rows, y_rows, z_rows))
            self._send_batch(channel, session_id, 1, self.batch_rows, hello.user_pk.bits)
            for frame in channel.read_stream():
                raise ProtocolError(f"unexpected frame 0x{frame.msg_type:02x} after batch")
            emit_user(Frame(wire.MSG_DONE, session_id, 0))
            return

        x_rows, w_rows, z_rows, self.permutation = protocol2_mask_permute(
            self.pk, self.share, self.masked, self.mask, self.rng
        )
        self.batch_rows = list(zip(x_rows, w_rows, z_rows))
        self._send_batch(channel, session_id, 2, self.batch_rows, 0)
        matched = [
            (frame.seq, wire.parse_p2_row(frame.payload, self.pk.bits))
            for frame in channel.read_stream()
            if frame.msg_type == wire.MSG_P2_ROW
        ]
        rhat_frames = []
        for seq, (x_prime, y_prime, w_prime) in matched:
            phi, h_prime, rhat = protocol2_unblind(
                self.pk, self.share, x_prime, y_prime, w_prime, self.rng
            )
            channel.send(
                Frame(
                    wire.MSG_PHI_ROW,
                    session_id,
                    seq,
                    wire.pack_phi_row(phi, h_prime, self.pk.bits),
                )
            )
            rhat_frames.append(
                Frame(
                    wire.MSG_RHAT_ROW,
                    session_id,
                    seq,
                    wire.pack_residue_row(rhat, self.pk.bits),
                )
            )
        channel.send(Frame(wire.MSG_DONE, session_id, 0))
        for frame in rhat_frames:
            emit_user(frame)
        emit_user(Frame(wire.MSG_DONE, session_id, 0))

    def _send_batch(self, channel, session_id, proto, rows, user_bits) -> None:
        chunk_rows = wire.batch_chunk_rows(proto, self.table.w, self.pk.bits, user_bits)
        for start in range(0, len(rows), chunk_rows):
            chunk = wire.BatchChunk(
                proto, len(rows), start, self.table.w, user_bits, rows[start : start + chunk_rows]
            )
            channel.send(
                Frame(
                    wire.MSG_XYZ_BATCH,
                    session_id,
                    0,
                    wire.pack_batch_chunk(chunk, self.pk.bits),
                )
            )


# -- user (Bob): query client ------------------------------------------------------


class UserAgent:
    """The querying user: splits the bounds, then collects and recovers rows.

    Purely reactive after the initial frames; pair up the two clouds' streams
    by row sequence number.  Counts its own decryptions.
    """

    def __init__(
        self,
        query: RangeQuery,
        table_pk: PublicKey,
        proto: int,
        user_id: str,
        *,
        rng: random.Random | None = None,
        user_keys: tuple[PublicKey, SecretKey] | None = None,
        m: int | None = None,
        session_id: bytes | None = None,
    ):
        if proto == 1 and user_keys is None:
            raise ValueError("protocol 1 needs the user's keypair")
        self.query = query
        self.pk = table_pk
        self.proto = proto
        self.user_id = user_id
        self.rng = rng or _SYSRAND
        self.user_keys = user_keys
        self.m = m
        self.session_id = session_id or secrets.token_bytes(16)
        self.shares = split_query(query, table_pk.n, self.rng, m=m)
        self.decrypt_count = 0
        self.warnings: list[str] = []
        self.errors: list[tuple[int, str]] = []
        self._p1_records: list[list[int]] = []
        self._gamma: dict[int, list[int]] = {}
        self._rhat: dict[int, list[int]] = {}
        self.done_c1 = False
        self.done_c2 = False

    def frames_for_c2(self) -> list[Frame]:
        payload = wire.pack_query_share_c2(self.shares.alpha2, self.shares.beta2, self.pk.bits)
        return [
            Frame(wire.MSG_HELLO, self.session_id, 0, wire.pack_hello_user(self.proto, self.user_id)),
            Frame(wire.MSG_QUERY_SHARE_C2, self.session_id, 0, payload),
        ]

    def frames_for_c1(self) -> list[Frame]:
        user_pk = self.user_keys[0] if self.proto == 1 else None
        payload = wire.pack_query_share_c1(
            self.shares.k, self.shares.alpha1, self.shares.beta1, self.pk.bits
        )
        return [
            Frame(
                wire.MSG_HELLO,
                self.session_id,
                0,
                wire.pack_hello_user(self.proto, self.user_id, user_pk),
            ),
            Frame(wire.MSG_QUERY_SHARE_C1, self.session_id, 0, payload),
        ]

    def handle(self, frame: Frame, origin: str) -> None:
        t = frame.msg_type
        if t == wire.MSG_ERROR:
            self.errors.append(wire.parse_error(frame.payload))
            self.done_c1 = self.done_c2 = True
            return
        if t == wire.MSG_DONE:
            if origin == "c1":
                self.done_c1 = True
            else:
                self.done_c2 = True
            return
        if t == wire.MSG_RESULT_ROW_P1:
            user_pk, user_sk = self.user_keys
            xs, ys = wire.parse_result_row_p1(frame.payload, self.pk.bits, user_pk.bits)
            records, count, warnings = protocol1_recover(
                user_sk, self.pk.n, [(xs, ys)], m=self.m
            )
            self.decrypt_count += count
            self.warnings.extend(warnings)
            self._p1_records.extend(records)
            return
        if t == wire.MSG_GAMMA_ROW:
            self._gamma[frame.seq] = wire.parse_residue_row(frame.payload, self.pk.bits)
            return
        if t == wire.MSG_RHAT_ROW:
            self._rhat[frame.seq] = wire.parse_residue_row(frame.payload, self.pk.bits)
            return
        raise ProtocolError(f"unexpected message type 0x{t:02x} from {origin}")

    @property
    def finished(self) -> bool:
        return self.done_c1 and self.done_c2

    def records(self) -> list[list[int]]:
        if self.errors:
            code, message = self.errors[0]
            raise QueryRejected(code, message)
        if self.proto == 1:
            return list(self._p1_records)
        records = protocol2_recover(self.pk.n, self._gamma, self._rhat)
        if self.m is not None:
            for row in records:
                for j, value in enumerate(row):
                    if value >= (1 << self.m):
                        self.warnings.append(
                            f"recovered value at column {j + 1} exceeds the attribute domain; "
                            "corrupted or tampered response"
                        )
        return records


# -- in-process execution -----------------------------------------------------------


@dataclass
class QueryTrace:
    """Frames crossing the cloud-to-cloud link, with their encoded sizes."""

    to_c2: list[tuple[Frame, int]] = field(default_factory=list)
    from_c2: list[tuple[Frame, int]] = field(default_factory=list)
    to_user_from_c2: list[tuple[Frame, int]] = field(default_factory=list)

    def c2_profile(self) -> list[tuple[int, int]]:
        """(type, size) sequence of everything C2 received and sent, in order."""
        merged = [("in", f, s) for f, s in self.to_c2]
        merged += [("out", f, s) for f, s in self.from_c2 + self.to_user_from_c2]
        return [(f.msg_type, s) for _, f, s in merged]


class LocalChannel:
    """C1's view of C2 with both sessions in this process.

    Every frame is round-tripped through its wire encoding so in-process runs
    exercise exactly the bytes the daemons would exchange.
    """

    def __init__(self, c2: SecondaryCloudSession, deliver_user, trace: QueryTrace | None = None):
        self.c2 = c2
        self.deliver_user = deliver_user
        self.trace = trace
        self.inbox: deque[Frame] = deque()

    def _feed(self, frame: Frame) -> None:
        encoded = wire.encode_frame(frame)
        if self.trace is not None:
            self.trace.to_c2.append((frame, len(encoded)))
        for dest, out in self.c2.handle(wire.decode_frame(encoded)):
            out = wire.decode_frame(wire.encode_frame(out))
            if dest == "user":
                if self.trace is not None:
                    self.trace.to_user_from_c2.append((out, len(wire.encode_frame(out))))
                self.deliver_user(out, "c2")
            else:
                if self.trace is not None:
                    self.trace.from_c2.append((out, len(wire.encode_frame(out))))
                self.inbox.append(out)

    def _take(self) -> Frame:
        if not self.inbox:
            raise ProtocolError("no pending frame from the secondary cloud")
        frame = self.inbox.popleft()
        if frame.msg_type == wire.MSG_ERROR:
            raise QueryRejected(*wire.parse_error(frame.payload))
        return frame

    def request(self, frames: list[Frame]) -> list[Frame]:
        for frame in frames:
            self._feed(frame)
        return [self._take() for _ in frames]

    def send(self, frame: Frame) -> None:
        self._feed(frame)

    def read_stream(self) -> Iterator[Frame]:
        while True:
            frame = self._take()
            if frame.msg_type == wire.MSG_DONE:
                return
            yield frame


@dataclass
class ExecutionReport:
    """Everything a test or diagnostic needs from an in-process query run."""

    agent: UserAgent
    cloud1: PrimaryCloudSession
    cloud2: SecondaryCloudSession
    trace: QueryTrace

    def records(self) -> list[list[int]]:
        return self.agent.records()


def execute_query(
    table: EncryptedTable,
    query: RangeQuery,
    *,
    proto: int,
    cloud2_key: SecretKey | KeyShare,
    cloud1_share: KeyShare | None = None,
    user_id: str = "local",
    allowlist: set[str] | None = None,
    user_keys: tuple[PublicKey, SecretKey] | None = None,
    rng_user: random.Random | None = None,
    rng_c1: random.Random | None = None,
    rng_c2: random.Random | None = None,
    window: int = 8,
) -> ExecutionReport:
    """Run a full query with all four principals in this process.

    Frames still cross module boundaries in encoded form, so this exercises
    the same bytes as the daemons while staying deterministic under seeded
    randomness.
    """
    pk = table.public_key
    agent = UserAgent(
        query,
        pk,
        proto,
        user_id,
        rng=rng_user,
        user_keys=user_keys,
        m=table.m,
    )
    c2 = SecondaryCloudSession(cloud2_key, rng=rng_c2, allowlist=allowlist)
    c1 = PrimaryCloudSession(
        table, share=cloud1_share, rng=rng_c1, allowlist=allowlist, window=window
    )
    trace = QueryTrace()
    channel = LocalChannel(c2, agent.handle, trace)

    for frame in agent.frames_for_c2():
        for dest, out in c2.handle(frame):
            if dest == "user":
                agent.handle(out, "c2")
    if agent.errors:
        return ExecutionReport(agent, c1, c2, trace)

    hello_frame, share_frame = agent.frames_for_c1()
    hello = wire.parse_hello(hello_frame.payload)
    k, alpha1, beta1 = wire.parse_query_share_c1(share_frame.payload, pk.bits)
    try:
        c1.run(
            hello,
            agent.session_id,
            k,
            alpha1,
            beta1,
            channel,
            emit_user=lambda fr: agent.handle(fr, "c1"),
        )
    except QueryRejected as exc:
        agent.errors.append((exc.code, str(exc)))
    return ExecutionReport(agent, c1, c2, trace)
