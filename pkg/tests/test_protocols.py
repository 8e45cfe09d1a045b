"""Subprotocol tests: round-by-round traces against plaintext simulation,
exhaustive and randomized oracle checks, and the threshold variants."""

import random

import pytest

from pprq.paillier import decrypt, encrypt
from pprq.protocols import (
    CompareResponder,
    DecryptRequest,
    Orientation,
    ProtocolError,
    compare_absorb_parity,
    compare_finish,
    compare_reply_parity,
    compare_reply_zero_test,
    compare_start,
    multiply_start,
    run_compare,
    run_multiply,
)


class ScriptedBlinds(random.Random):
    """Serves scripted values for single-argument randrange (the round blinds)
    and real pseudo-randomness for everything else (nonces, masks)."""

    def __new__(cls, *args):
        return super().__new__(cls)

    def __init__(self, seed, blinds):
        super().__init__(seed)
        self._blinds = list(blinds)

    def randrange(self, start, stop=None, step=1):
        if stop is None and self._blinds:
            return self._blinds.pop(0)
        return super().randrange(start, stop, step)


def drive(pk, key, state, first_request, responder_rng, collect=None):
    """Run a started comparison to completion; optionally collect round data."""
    resp = CompareResponder(pk, key, state.m, responder_rng)
    request, final = first_request, False
    while not final:
        parity = compare_reply_parity(resp, request)
        if collect is not None:
            collect.append((request, parity))
        request, final = compare_absorb_parity(state, parity)
    flag = compare_reply_zero_test(resp, request)
    return compare_finish(state, flag), request, flag


class TestComparisonTrace:
    def test_small_run_intermediate_values(self, key512, rng):
        # x=1, y=5, m=3, orientation fixed to the y >= x+1 branch, all blinds
        # even and small: difference is 4+1-... d = y-x-1 = 3, whose bits are
        # extracted over three rounds while the quotient halves 3 -> 1 -> 0.
        pk, sk = key512
        script = ScriptedBlinds(1, [2, 4, 6])
        state, request = compare_start(
            pk,
            encrypt(pk, 1, rng=rng),
            encrypt(pk, 5, rng=rng),
            3,
            script,
            orientation=Orientation.LT,
        )
        assert decrypt(sk, state.d_enc) == 3
        assert decrypt(sk, request.ciphertext) == 3 + 2

        resp = CompareResponder(pk, sk, 3, rng)
        # round 1: blinded value 5 is odd -> bit 1; quotient 3 -> 1
        s1 = compare_reply_parity(resp, request)
        assert decrypt(sk, s1) == 1
        request, final = compare_absorb_parity(state, s1)
        assert not final
        assert decrypt(sk, state.dprime) == 1
        assert decrypt(sk, state.delta) == 1
        assert decrypt(sk, request.ciphertext) == 1 + 4

        # round 2: 1 + 4 odd -> bit 1; accumulated 3; quotient 0
        s2 = compare_reply_parity(resp, request)
        request, final = compare_absorb_parity(state, s2)
        assert not final
        assert decrypt(sk, state.dprime) == 3
        assert decrypt(sk, state.delta) == 0

        # round 3: 0 + 6 even -> bit 0; accumulated stays 3; gap is zero
        s3 = compare_reply_parity(resp, request)
        assert decrypt(sk, s3) == 0
        request, final = compare_absorb_parity(state, s3)
        assert final
        assert decrypt(sk, state.dprime) == 3
        assert decrypt(sk, request.ciphertext) == 0

        flag = compare_reply_zero_test(resp, request)
        assert decrypt(sk, flag) == 1
        result = compare_finish(state, flag)
        assert decrypt(sk, result.c_enc) == 0  # x < y

    def test_difference_under_each_orientation(self, key512, rng):
        pk, sk = key512
        ex, ey = encrypt(pk, 7, rng=rng), encrypt(pk, 3, rng=rng)
        state, _ = compare_start(pk, ex, ey, 4, rng, orientation=Orientation.GEQ)
        assert decrypt(sk, state.d_enc) == 4
        state, _ = compare_start(pk, ex, ey, 4, rng, orientation=Orientation.LT)
        assert decrypt(sk, state.d_enc) == (3 - 7 - 1) % pk.n
        eq = encrypt(pk, 6, rng=rng)
        state, _ = compare_start(pk, eq, encrypt(pk, 6, rng=rng), 4, rng, orientation=Orientation.GEQ)
        assert decrypt(sk, state.d_enc) == 0

    def test_blinded_rounds_match_plain_simulation(self, key512, rng):
        # replay the recorded blinds through a plain-integer simulation and
        # check every opened value and extracted bit, wraparound excluded
        pk, sk = key512
        x, y, m = 45, 23, 6
        blinds = [rng.randrange(pk.n - 2 ** (m + 1)) for _ in range(m)]
        script = ScriptedBlinds(3, list(blinds))
        state, request = compare_start(
            pk,
            encrypt(pk, x, rng=rng),
            encrypt(pk, y, rng=rng),
            m,
            script,
            orientation=Orientation.GEQ,
        )
        rounds = []
        result, final_request, _ = drive(pk, sk, state, request, rng, collect=rounds)

        d = x - y
        quotient = d
        accumulated = 0
        for i, (req, parity_ct) in enumerate(rounds):
            r = blinds[i]
            opened = (quotient + r) % pk.n
            assert decrypt(sk, req.ciphertext) == opened
            bit = (opened & 1) ^ (r & 1)
            assert decrypt(sk, parity_ct) == opened & 1
            accumulated |= bit << i
            quotient = (quotient - bit) // 2
        assert accumulated == d
        assert decrypt(sk, result.c_enc) == 1


class TestResponder:
    def test_even_value_yields_zero(self, key512, rng):
        pk, sk = key512
        resp = CompareResponder(pk, sk, 2, rng)
        s = compare_reply_parity(resp, DecryptRequest(encrypt(pk, 8, rng=rng), None))
        assert decrypt(sk, s) == 0

    def test_odd_value_yields_one(self, key512, rng):
        pk, sk = key512
        resp = CompareResponder(pk, sk, 2, rng)
        s = compare_reply_parity(resp, DecryptRequest(encrypt(pk, 3, rng=rng), None))
        assert decrypt(sk, s) == 1

    def test_n_minus_one_is_even(self, key512, rng):
        # the modulus is odd, so its predecessor's parity bit is 0
        pk, sk = key512
        assert pk.n % 2 == 1
        resp = CompareResponder(pk, sk, 2, rng)
        s = compare_reply_parity(resp, DecryptRequest(encrypt(pk, pk.n - 1, rng=rng), None))
        assert decrypt(sk, s) == 0

    def test_zero_test_replies(self, key512, rng):
        pk, sk = key512
        resp = CompareResponder(pk, sk, 0, rng)  # m=0 so round 1 is the zero test
        flag = compare_reply_zero_test(resp, DecryptRequest(encrypt(pk, 0, rng=rng), None))
        assert decrypt(sk, flag) == 1
        resp = CompareResponder(pk, sk, 0, rng)
        flag = compare_reply_zero_test(resp, DecryptRequest(encrypt(pk, 977, rng=rng), None))
        assert decrypt(sk, flag) == 0

    def test_round_misuse_detected(self, key512, rng):
        pk, sk = key512
        resp = CompareResponder(pk, sk, 1, rng)
        compare_reply_parity(resp, DecryptRequest(encrypt(pk, 2, rng=rng), None))
        with pytest.raises(ProtocolError):
            compare_reply_parity(resp, DecryptRequest(encrypt(pk, 2, rng=rng), None))
        resp = CompareResponder(pk, sk, 2, rng)
        with pytest.raises(ProtocolError):
            compare_reply_zero_test(resp, DecryptRequest(encrypt(pk, 0, rng=rng), None))


class TestComparisonOutcome:
    def test_finish_maps_orientation(self, key512, rng):
        # equal inputs: the chosen relation holds only in one orientation, so
        # the responder's raw flag differs while the mapped output agrees
        pk, sk = key512
        for orientation, expected_flag in [(Orientation.GEQ, 1), (Orientation.LT, 0)]:
            state, request = compare_start(
                pk, encrypt(pk, 1, rng=rng), encrypt(pk, 1, rng=rng), 2, rng,
                orientation=orientation,
            )
            result, _, flag = drive(pk, sk, state, request, rng)
            assert decrypt(sk, flag) == expected_flag
            assert decrypt(sk, result.c_enc) == 1

    def test_finish_refuses_unfinished_state(self, key512, rng):
        pk, sk = key512
        state, _ = compare_start(
            pk, encrypt(pk, 1, rng=rng), encrypt(pk, 1, rng=rng), 2, rng,
        )
        with pytest.raises(ProtocolError):
            compare_finish(state, encrypt(pk, 1, rng=rng))

    def test_equal_inputs_compare_true(self, key512, rng):
        pk, sk = key512
        res = run_compare(
            pk, sk, encrypt(pk, 5, rng=rng), encrypt(pk, 5, rng=rng), 4,
            rng_initiator=rng, rng_responder=rng,
        )
        assert decrypt(sk, res.c_enc) == 1

    def test_zero_difference_gap_is_zero(self, key512, rng):
        pk, sk = key512
        state, request = compare_start(
            pk, encrypt(pk, 0, rng=rng), encrypt(pk, 0, rng=rng), 4, rng,
            orientation=Orientation.GEQ,
        )
        _, final_request, _ = drive(pk, sk, state, request, rng)
        assert decrypt(sk, final_request.ciphertext) == 0
        assert decrypt(sk, state.dprime) == 0

    def test_exhaustive_small_domain(self, key512, rng):
        pk, sk = key512
        for x in range(8):
            for y in range(8):
                res = run_compare(
                    pk, sk, encrypt(pk, x, rng=rng), encrypt(pk, y, rng=rng), 3,
                    rng_initiator=rng, rng_responder=rng,
                )
                assert decrypt(sk, res.c_enc) == (1 if x >= y else 0), (x, y)

    def test_full_run_mixed_magnitudes(self, key512, rng):
        pk, sk = key512
        for x, y, m in [(7, 3, 4), (3, 7, 4), (0, 15, 4), (255, 0, 8), (100, 100, 7)]:
            res = run_compare(
                pk, sk, encrypt(pk, x, rng=rng), encrypt(pk, y, rng=rng), m,
                rng_initiator=rng, rng_responder=rng,
            )
            assert decrypt(sk, res.c_enc) == (1 if x >= y else 0), (x, y, m)

    def test_domain_bound_enforced(self, key512, rng):
        pk, _ = key512
        c = encrypt(pk, 1, rng=rng)
        with pytest.raises(ValueError):
            compare_start(pk, c, c, pk.bits - 2, rng)
        with pytest.raises(ValueError):
            compare_start(pk, c, c, 0, rng)

    def test_loop_invariant_excluding_wraparound(self, key512, rng):
        # with blinds bounded away from the top of [0, N) and the orientation
        # forced to the branch with a small difference, the quotient and the
        # accumulated low bits track floor(d / 2^i) and d mod 2^i exactly
        pk, sk = key512
        for _ in range(5):
            m = rng.randrange(2, 10)
            x, y = rng.getrandbits(m), rng.getrandbits(m)
            orientation = Orientation.GEQ if x >= y else Orientation.LT
            d = x - y if x >= y else y - x - 1
            state, request = compare_start(
                pk, encrypt(pk, x, rng=rng), encrypt(pk, y, rng=rng), m, rng,
                orientation=orientation, blind_bound=pk.n - 2 ** (m + 1),
            )
            resp = CompareResponder(pk, sk, m, rng)
            final = False
            i = 0
            while not final:
                request, final = compare_absorb_parity(
                    state, compare_reply_parity(resp, request)
                )
                i += 1
                assert decrypt(sk, state.delta) == d >> i
                assert decrypt(sk, state.dprime) == d % (1 << i)


class TestThresholdVariants:
    def test_equality_compares_true(self, threshold512, key512, rng):
        pk, sh1, sh2 = threshold512
        _, sk = key512
        res = run_compare(
            pk, sh2, encrypt(pk, 5, rng=rng), encrypt(pk, 5, rng=rng), 4,
            rng_initiator=rng, rng_responder=rng, initiator_share=sh1,
        )
        assert decrypt(sk, res.c_enc) == 1

    def test_agrees_with_standard_runs(self, threshold512, key512, rng):
        # same ciphertext pair through both key arrangements, 500 samples
        pk, sh1, sh2 = threshold512
        _, sk = key512
        for _ in range(500):
            x, y = rng.getrandbits(5), rng.getrandbits(5)
            ex, ey = encrypt(pk, x, rng=rng), encrypt(pk, y, rng=rng)
            standard = run_compare(pk, sk, ex, ey, 5, rng_initiator=rng, rng_responder=rng)
            threshold = run_compare(
                pk, sh2, ex, ey, 5, rng_initiator=rng, rng_responder=rng, initiator_share=sh1
            )
            assert decrypt(sk, standard.c_enc) == decrypt(sk, threshold.c_enc) == (x >= y)

    def test_multiplication(self, threshold512, key512, rng):
        pk, sh1, sh2 = threshold512
        _, sk = key512
        out = run_multiply(
            pk, sh2, encrypt(pk, 6, rng=rng), encrypt(pk, 7, rng=rng),
            rng_initiator=rng, rng_responder=rng, initiator_share=sh1,
        )
        assert decrypt(sk, out) == 42

    def test_missing_partial_rejected(self, threshold512, key512, rng):
        pk, _, sh2 = threshold512
        resp = CompareResponder(pk, sh2, 2, rng)
        with pytest.raises(ProtocolError):
            compare_reply_parity(resp, DecryptRequest(encrypt(pk, 1, rng=rng), None))


class TestMultiplication:
    def test_small_product(self, key512, rng):
        pk, sk = key512
        out = run_multiply(
            pk, sk, encrypt(pk, 3, rng=rng), encrypt(pk, 4, rng=rng),
            rng_initiator=rng, rng_responder=rng,
        )
        assert decrypt(sk, out) == 12

    def test_zero_annihilates(self, key512, rng):
        pk, sk = key512
        b = rng.randrange(pk.n)
        out = run_multiply(
            pk, sk, encrypt(pk, 0, rng=rng), encrypt(pk, b, rng=rng),
            rng_initiator=rng, rng_responder=rng,
        )
        assert decrypt(sk, out) == 0

    def test_one_is_identity(self, key512, rng):
        pk, sk = key512
        b = rng.randrange(pk.n)
        out = run_multiply(
            pk, sk, encrypt(pk, 1, rng=rng), encrypt(pk, b, rng=rng),
            rng_initiator=rng, rng_responder=rng,
        )
        assert decrypt(sk, out) == b

    def test_random_products_full_range(self, key512, rng):
        pk, sk = key512
        for _ in range(200):
            a, b = rng.randrange(pk.n), rng.randrange(pk.n)
            out = run_multiply(
                pk, sk, encrypt(pk, a, rng=rng), encrypt(pk, b, rng=rng),
                rng_initiator=rng, rng_responder=rng,
            )
            assert decrypt(sk, out) == a * b % pk.n

    def test_responder_output_is_fresh(self, key512, rng):
        pk, sk = key512
        state, (ra, rb) = multiply_start(pk, encrypt(pk, 2, rng=rng), encrypt(pk, 3, rng=rng), rng)
        from pprq.protocols import multiply_respond

        h1 = multiply_respond(pk, sk, ra, rb, rng)
        h2 = multiply_respond(pk, sk, ra, rb, rng)
        assert h1 != h2
        assert decrypt(sk, h1) == decrypt(sk, h2)
