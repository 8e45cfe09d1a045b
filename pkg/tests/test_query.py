"""Query orchestration: share splitting, masking, permutation, filtering,
recovery, and both protocols end to end against the plaintext filter."""

import random
from collections import Counter

import pytest

from pprq import wire
from pprq.paillier import combine, decrypt, encrypt, partial_decrypt
from pprq.protocols import ProtocolError
from pprq.query import (
    QueryRejected,
    RangeQuery,
    UserAgent,
    execute_query,
    generate_user_keypair,
    permute_rows,
    protocol1_recover,
    protocol2_final_share,
    protocol2_recover,
    protocol2_unblind,
    split_query,
    reconstruct_bounds,
)
from pprq.store import encrypt_table, plain_table

DEMO_ROWS = [[20, 1], [25, 2], [30, 3], [18, 4], [17, 5], [25, 6], [25, 7], [0, 8]]


def plaintext_filter(rows, k, alpha, beta):
    return sorted(row for row in rows if alpha <= row[k - 1] <= beta)


@pytest.fixture(scope="module")
def demo_table(key512):
    pk, _ = key512
    return encrypt_table(pk, plain_table(DEMO_ROWS, 8), random.Random(404))


@pytest.fixture(scope="module")
def user_keys(key512):
    pk, _ = key512
    return generate_user_keypair(pk, random.Random(405))


class TestSplitQuery:
    def test_shares_recombine(self, key512, rng):
        pk, _ = key512
        shares = split_query(RangeQuery(1, 18, 25), pk.n, rng)
        assert (shares.alpha1 + shares.alpha2) % pk.n == 18
        assert (shares.beta1 + shares.beta2) % pk.n == 25

    def test_zero_bound(self, key512, rng):
        pk, _ = key512
        shares = split_query(RangeQuery(1, 0, 5), pk.n, rng)
        assert (shares.alpha1 + shares.alpha2) % pk.n == 0

    def test_many_random_queries(self, key512, rng):
        pk, _ = key512
        for _ in range(100):
            alpha, beta = rng.getrandbits(8), rng.getrandbits(8)
            shares = split_query(RangeQuery(1, alpha, beta), pk.n, rng, m=8)
            assert (shares.alpha1 + shares.alpha2) % pk.n == alpha
            assert (shares.beta1 + shares.beta2) % pk.n == beta

    def test_domain_validated_when_known(self, key512, rng):
        pk, _ = key512
        with pytest.raises(ValueError):
            split_query(RangeQuery(1, 256, 300), pk.n, rng, m=8)


class TestReconstructBounds:
    def test_small_sum(self, key512, rng):
        pk, sk = key512
        enc_a, enc_b = reconstruct_bounds(
            pk, 10, 1, encrypt(pk, 8, rng=rng), encrypt(pk, 2, rng=rng), rng
        )
        assert decrypt(sk, enc_a) == 18
        assert decrypt(sk, enc_b) == 3

    def test_wraparound(self, key512, rng):
        pk, sk = key512
        enc_a, _ = reconstruct_bounds(
            pk, pk.n - 1, 0, encrypt(pk, 2, rng=rng), encrypt(pk, 0, rng=rng), rng
        )
        assert decrypt(sk, enc_a) == 1

    def test_random_shares(self, key512, rng):
        pk, sk = key512
        for _ in range(20):
            shares = split_query(RangeQuery(1, 25, 99), pk.n, rng)
            enc_a, enc_b = reconstruct_bounds(
                pk,
                shares.alpha1,
                shares.beta1,
                encrypt(pk, shares.alpha2, rng=rng),
                encrypt(pk, shares.beta2, rng=rng),
                rng,
            )
            assert decrypt(sk, enc_a) == 25
            assert decrypt(sk, enc_b) == 99


class TestPermutation:
    def test_multiset_preserved(self, rng):
        rows = [[i] for i in range(10)]
        pi = list(range(10))
        rng.shuffle(pi)
        assert sorted(map(tuple, permute_rows(rows, pi))) == sorted(map(tuple, rows))

    def test_single_row_is_identity(self):
        assert permute_rows([["only"]], [0]) == [["only"]]

    def test_seeded_shuffles_differ(self):
        pi_a, pi_b = list(range(20)), list(range(20))
        random.Random(1).shuffle(pi_a)
        random.Random(2).shuffle(pi_b)
        assert pi_a != pi_b


class TestRecovery:
    def test_protocol1_unblinding(self, key512, user_keys, rng):
        pk, _ = key512
        user_pk, user_sk = user_keys
        blind = 10
        entries = [([30], [encrypt(user_pk, blind, rng=rng)])]
        records, count, warnings = protocol1_recover(user_sk, pk.n, entries, m=8)
        assert records == [[20]] and count == 1 and not warnings

    def test_protocol1_out_of_domain_warns(self, key512, user_keys, rng):
        pk, _ = key512
        user_pk, user_sk = user_keys
        entries = [([5], [encrypt(user_pk, 10, rng=rng)])]
        records, _, warnings = protocol1_recover(user_sk, pk.n, entries, m=8)
        assert records == [[(5 - 10) % pk.n]]
        assert warnings  # impossible value for a valid run

    def test_protocol2_relay_roundtrip(self, key512, threshold512, rng):
        # share addition: blind 5 from C1, re-blind 7 from C2, opened sum 12
        _, sk = key512
        pk, sh1, sh2 = threshold512
        t, r, r_prime = 123, 5, 7
        x_prime = [encrypt(pk, (t + r + r_prime) % pk.n, rng=rng)]
        y_prime = [encrypt(pk, (r + r_prime) % pk.n, rng=rng)]
        w_prime = [partial_decrypt(sh2, y_prime[0])]
        phi, h_prime, rhat = protocol2_unblind(pk, sh1, x_prime, y_prime, w_prime, rng)
        assert decrypt(sk, h_prime[0]) == (t + rhat[0]) % pk.n
        gammas = protocol2_final_share(pk, sh2, phi, h_prime)
        assert gammas[0] == (t + rhat[0]) % pk.n
        assert protocol2_recover(pk.n, {1: gammas}, {1: rhat}) == [[t]]

    def test_protocol2_unmatched_streams_rejected(self, key512):
        pk, _ = key512
        with pytest.raises(ProtocolError):
            protocol2_recover(pk.n, {1: [5]}, {2: [5]})

    def test_protocol2_empty_streams(self, key512):
        pk, _ = key512
        assert protocol2_recover(pk.n, {}, {}) == []


class TestEndToEnd:
    @pytest.mark.parametrize(
        "query",
        [
            RangeQuery(1, 18, 25),
            RangeQuery(1, 25, 25),  # point query on duplicated values
            RangeQuery(1, 0, 255),  # full domain
            RangeQuery(1, 200, 100),  # inverted: empty
            RangeQuery(2, 3, 6),
        ],
    )
    def test_protocol1_matches_plaintext_filter(self, key512, demo_table, user_keys, query, rng):
        pk, sk = key512
        report = execute_query(
            demo_table, query, proto=1, cloud2_key=sk, user_keys=user_keys,
            rng_user=rng, rng_c1=rng, rng_c2=rng,
        )
        expected = plaintext_filter(DEMO_ROWS, query.k, query.alpha, query.beta)
        assert sorted(report.records()) == expected
        assert report.agent.decrypt_count == demo_table.w * len(expected)

    @pytest.mark.parametrize(
        "query",
        [RangeQuery(1, 18, 25), RangeQuery(1, 0, 0), RangeQuery(2, 1, 8)],
    )
    def test_protocol2_matches_plaintext_filter(self, threshold512, key512, query, rng):
        pk, sh1, sh2 = threshold512
        table = encrypt_table(pk, plain_table(DEMO_ROWS, 8), rng)
        report = execute_query(
            table, query, proto=2, cloud2_key=sh2, cloud1_share=sh1,
            rng_user=rng, rng_c1=rng, rng_c2=rng,
        )
        expected = plaintext_filter(DEMO_ROWS, query.k, query.alpha, query.beta)
        assert sorted(report.records()) == expected
        assert report.agent.decrypt_count == 0

    def test_mask_bits_match_predicate(self, key512, demo_table, user_keys, rng):
        pk, sk = key512
        report = execute_query(
            demo_table, RangeQuery(1, 18, 25), proto=1, cloud2_key=sk, user_keys=user_keys,
            rng_user=rng, rng_c1=rng, rng_c2=rng,
        )
        bits = [decrypt(sk, ct) for ct in report.cloud1.mask]
        assert bits == [1 if 18 <= row[0] <= 25 else 0 for row in DEMO_ROWS]
        for i, row in enumerate(DEMO_ROWS):
            got = [decrypt(sk, ct) for ct in report.cloud1.masked[i]]
            assert got == (row if bits[i] else [0, 0])

    def test_permutations_differ_across_runs(self, key512, demo_table, user_keys):
        pk, sk = key512
        reports = [
            execute_query(
                demo_table, RangeQuery(1, 18, 25), proto=1, cloud2_key=sk,
                user_keys=user_keys, rng_user=random.Random(seed),
                rng_c1=random.Random(seed + 1), rng_c2=random.Random(seed + 2),
            )
            for seed in (100, 200)
        ]
        assert reports[0].cloud1.permutation != reports[1].cloud1.permutation

    def test_seeded_run_is_reproducible(self, key512, demo_table, user_keys):
        pk, sk = key512

        def run():
            return execute_query(
                demo_table, RangeQuery(1, 18, 25), proto=1, cloud2_key=sk,
                user_keys=user_keys, rng_user=random.Random(7),
                rng_c1=random.Random(8), rng_c2=random.Random(9),
            )

        a, b = run(), run()
        assert a.cloud1.permutation == b.cloud1.permutation
        assert a.cloud1.batch_rows == b.cloud1.batch_rows
        assert a.records() == b.records()

    def test_transmitted_mask_is_permutation_of_mask_vector(self, key512, demo_table, user_keys, rng):
        pk, sk = key512
        report = execute_query(
            demo_table, RangeQuery(1, 18, 25), proto=1, cloud2_key=sk, user_keys=user_keys,
            rng_user=rng, rng_c1=rng, rng_c2=rng,
        )
        pi = report.cloud1.permutation
        sent_z = [row[2] for row in report.cloud1.batch_rows]
        assert [decrypt(sk, z) for z in sent_z] == [
            decrypt(sk, report.cloud1.mask[pi[t]]) for t in range(len(pi))
        ]
        assert Counter(decrypt(sk, z) for z in sent_z) == Counter(
            decrypt(sk, z) for z in report.cloud1.mask
        )

    def test_transmitted_cells_are_rerandomized(self, key512, demo_table, user_keys, rng):
        pk, sk = key512
        report = execute_query(
            demo_table, RangeQuery(1, 18, 25), proto=1, cloud2_key=sk, user_keys=user_keys,
            rng_user=rng, rng_c1=rng, rng_c2=rng,
        )
        pi = report.cloud1.permutation
        for t, (x_cells, _, _) in enumerate(report.cloud1.batch_rows):
            for j, cell in enumerate(x_cells):
                assert cell != report.cloud1.masked[pi[t]][j]
                assert cell != demo_table.cells[pi[t]][j]


class TestRejections:
    def test_unauthorized_user(self, key512, demo_table, user_keys, rng):
        pk, sk = key512
        report = execute_query(
            demo_table, RangeQuery(1, 18, 25), proto=1, cloud2_key=sk, user_keys=user_keys,
            allowlist={"alice"}, user_id="mallory", rng_user=rng, rng_c1=rng, rng_c2=rng,
        )
        with pytest.raises(QueryRejected) as err:
            report.records()
        assert err.value.code == wire.ERR_UNAUTHORIZED

    def test_protocol2_against_full_key(self, key512, threshold512, demo_table, rng):
        _, sk = key512
        _, sh1, _ = threshold512
        report = execute_query(
            demo_table, RangeQuery(1, 18, 25), proto=2, cloud2_key=sk, cloud1_share=sh1,
            rng_user=rng, rng_c1=rng, rng_c2=rng,
        )
        with pytest.raises(QueryRejected) as err:
            report.records()
        assert err.value.code == wire.ERR_KEY_MISMATCH

    def test_protocol2_without_cloud1_share(self, threshold512, rng):
        pk, _, sh2 = threshold512
        table = encrypt_table(pk, plain_table([[1]], 4), rng)
        report = execute_query(
            table, RangeQuery(1, 0, 1), proto=2, cloud2_key=sh2,
            rng_user=rng, rng_c1=rng, rng_c2=rng,
        )
        with pytest.raises(QueryRejected):
            report.records()

    def test_attribute_index_out_of_range(self, key512, demo_table, user_keys, rng):
        pk, sk = key512
        report = execute_query(
            demo_table, RangeQuery(5, 0, 1), proto=1, cloud2_key=sk, user_keys=user_keys,
            rng_user=rng, rng_c1=rng, rng_c2=rng,
        )
        with pytest.raises(QueryRejected):
            report.records()

    def test_small_user_modulus_refused(self, key512, demo_table, rng):
        pk, sk = key512
        # deliberately too-small user key: equal moduli are also refused
        report = execute_query(
            demo_table, RangeQuery(1, 18, 25), proto=1, cloud2_key=sk,
            user_keys=(pk, sk), rng_user=rng, rng_c1=rng, rng_c2=rng,
        )
        with pytest.raises(QueryRejected):
            report.records()


def test_batch_reassembly_across_chunks(key512, demo_table, user_keys, rng, monkeypatch):
    # force three-row chunks so the batch crosses several frames
    import pprq.query as query_mod

    monkeypatch.setattr(query_mod.wire, "batch_chunk_rows", lambda *a, **k: 3)
    pk, sk = key512
    report = execute_query(
        demo_table, RangeQuery(1, 18, 25), proto=1, cloud2_key=sk, user_keys=user_keys,
        rng_user=rng, rng_c1=rng, rng_c2=rng,
    )
    chunk_frames = [f for f, _ in report.trace.to_c2 if f.msg_type == wire.MSG_XYZ_BATCH]
    assert len(chunk_frames) == 3  # 8 rows in chunks of 3
    assert sorted(report.records()) == plaintext_filter(DEMO_ROWS, 1, 18, 25)


def test_error_frame_terminates_session(key512, rng):
    # after an error the session ignores everything else addressed to it
    from pprq.query import SecondaryCloudSession
    from pprq.wire import MSG_ERROR, MSG_QUERY_SHARE_C2, Frame, pack_error

    _, sk = key512
    session = SecondaryCloudSession(sk, rng=rng)
    sid = bytes(16)
    session.handle(Frame(MSG_ERROR, sid, 0, pack_error(4, "boom")))
    assert session.dead
    assert session.handle(Frame(MSG_QUERY_SHARE_C2, sid, 0, b"")) == []


def test_user_keypair_modulus_dominates(key512):
    pk, _ = key512
    user_pk, _ = generate_user_keypair(pk, random.Random(3))
    assert user_pk.n > pk.n


def test_agent_rejects_protocol1_without_keys(key512):
    pk, _ = key512
    with pytest.raises(ValueError):
        UserAgent(RangeQuery(1, 0, 1), pk, 1, "u")
