import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from sesorec.ring import DimensionMismatch, ring_add, ring_matmul, ring_sub
from sesorec.sharing import (
    MaskPolicy,
    MaskReuseError,
    MaskSource,
    SparseRing,
    TrustedInitializer,
    bundle_a_bytes,
    bundle_b_bytes,
    decode_bundle_a,
    decode_bundle_b,
    encode_bundle_a,
    encode_bundle_b,
    even_cols,
    even_rows,
    leakage_probe_a,
    leakage_probe_b,
    n_matrix_bytes,
    odd_cols,
    odd_rows,
    pack_sparse,
    pad_even,
    reconstruct,
    share,
    simulate_view_a,
    simulate_view_b,
    ssmm_execute,
    ssmm_finish_a,
    ssmm_local_m,
    ssmm_local_n,
    ssmm_party_a,
    ssmm_party_b,
    ssmm_round_a,
    ssmm_round_b,
    ssmm_sync_a,
    tismm_execute,
    tismm_party_a,
    tismm_party_b,
    unpack_sparse,
)
from sesorec.transport import HEADER_SIZE, connect_loopback, run_parties, tcp_pair

from conftest import bigint_matmul, random_ring


def random_sparse(rng, shape, density, bits=64):
    m = sp.random(*shape, density=density, format="csr", random_state=rng)
    return sp.csr_matrix((random_ring(rng, m.nnz, bits), m.indices, m.indptr), shape=shape, dtype=np.uint64)


class TestSharing:
    def test_share_reconstruct(self, rng, masks):
        x = random_ring(rng, (3, 4))
        xa, xb = share(x, masks)
        np.testing.assert_array_equal(reconstruct(xa, xb), x)
        assert not np.array_equal(xa, x)

    def test_scalar_share(self, masks):
        xa, xb = share(np.uint64(7), masks)
        assert int(reconstruct(xa, xb)) == 7

    def test_seeded_source_reproducible(self):
        a, b = MaskSource(5), MaskSource(5)
        np.testing.assert_array_equal(a.uniform((3, 3)), b.uniform((3, 3)))
        assert a.words_drawn == 9

    def test_spawned_streams_differ(self):
        c1, c2 = MaskSource(5).spawn(2)
        assert not np.array_equal(c1.uniform(8), c2.uniform(8))

    def test_os_source_is_nondeterministic(self):
        assert not np.array_equal(MaskSource().uniform(4), MaskSource().uniform(4))

    @pytest.mark.parametrize("bits", [32, 64])
    def test_uniform_range(self, bits):
        u = MaskSource(1, bits).uniform(10000)
        assert int(u.max()) < (1 << bits)
        assert int(u.max()) > (1 << (bits - 1))


class TestOddEven:
    def test_one_based_convention(self):
        m = np.arange(12, dtype=np.uint64).reshape(3, 4)
        np.testing.assert_array_equal(odd_cols(m), m[:, [0, 2]])
        np.testing.assert_array_equal(even_cols(m), m[:, [1, 3]])
        np.testing.assert_array_equal(odd_rows(m), m[[0, 2]])
        np.testing.assert_array_equal(even_rows(m), m[[1]])

    def test_pad_even(self):
        P, Q = pad_even(np.ones((2, 3), np.uint64), np.ones((3, 2), np.uint64))
        assert P.shape == (2, 4) and Q.shape == (4, 2)
        assert not P[:, 3].any() and not Q[3].any()

    def test_pad_even_mismatch(self):
        with pytest.raises(DimensionMismatch):
            pad_even(np.ones((2, 3)), np.ones((2, 2)))


class TestSSMMLocal:
    """The algebra without any channel."""

    @pytest.mark.parametrize("bits", [32, 64])
    def test_m_plus_n_is_product(self, rng, bits):
        src = MaskSource(3, bits)
        P, Q = random_ring(rng, (5, 6), bits), random_ring(rng, (6, 7), bits)
        sa, ba = ssmm_round_a(P, src, bits)
        sb, bb = ssmm_round_b(Q, None, src, bits)
        out = ring_add(ssmm_local_m(sa, bb, bits), ssmm_local_n(sb, ba, bits), bits)
        np.testing.assert_array_equal(out, bigint_matmul(P, Q, bits))

    def test_messages_are_masked(self, rng):
        src = MaskSource(3)
        P = random_ring(rng, (4, 4))
        _, ba = ssmm_round_a(P, src)
        assert not np.array_equal(ba.P1, P)

    def test_odd_inner_dim_rejected_by_raw_round(self, rng):
        with pytest.raises(DimensionMismatch):
            ssmm_round_b(random_ring(rng, (3, 2)), None, MaskSource(1))


class TestSSMMExecute:
    @pytest.mark.parametrize("dims", [(1, 1, 1), (2, 3, 4), (5, 8, 3), (9, 7, 11)])
    @pytest.mark.parametrize("mode", ["dense", "sparse"])
    def test_exact_loopback(self, rng, dims, mode):
        x, y, z = dims
        P = random_ring(rng, (x, y))
        Q = random_ring(rng, (y, z)) if mode == "dense" else random_sparse(rng, (y, z), 0.3)
        policy = MaskPolicy(mode)
        out = ssmm_execute(P, Q, policy, source_a=MaskSource(1), source_b=MaskSource(2))
        dense_q = Q if mode == "dense" else Q.toarray()
        np.testing.assert_array_equal(out, bigint_matmul(P, dense_q))

    def test_exact_tcp(self, rng):
        P, Q = random_ring(rng, (4, 5)), random_ring(rng, (5, 3))
        a, b = tcp_pair()
        try:
            out = ssmm_execute(P, Q, channels=(a, b))
        finally:
            a.close()
            b.close()
        np.testing.assert_array_equal(out, bigint_matmul(P, Q))

    def test_32_bit_ring(self, rng):
        P, Q = random_ring(rng, (3, 4), 32), random_ring(rng, (4, 2), 32)
        from sesorec.ring import FixedPointConfig

        cfg = FixedPointConfig(32, 10)
        chans = connect_loopback(cfg)
        out = ssmm_execute(P, Q, channels=chans, bits=32, source_a=MaskSource(1, 32), source_b=MaskSource(2, 32))
        np.testing.assert_array_equal(out, bigint_matmul(P, Q, 32))

    def test_dimension_mismatch_before_send(self, rng):
        chans = connect_loopback()
        with pytest.raises(DimensionMismatch):
            ssmm_execute(random_ring(rng, (2, 3)), random_ring(rng, (4, 2)), channels=chans)
        assert chans[0].stats.frames_sent == 1  # only the handshake

    def test_sparse_all_zero_q(self, rng):
        out = ssmm_execute(random_ring(rng, (3, 4)), sp.csr_matrix((4, 5), dtype=np.uint64), MaskPolicy.sparse())
        assert not out.any()

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32))
    def test_exact_property(self, x, y, z, seed):
        r = np.random.default_rng(seed)
        P, Q = random_ring(r, (x, y)), random_ring(r, (y, z))
        np.testing.assert_array_equal(ssmm_execute(P, Q), ring_matmul(P, Q))


class TestSparsePolicy:
    def test_extra_counts(self):
        pol = MaskPolicy.sparse(ratio=1.0, zero_row_extra=4)
        np.testing.assert_array_equal(pol.extra_counts(np.array([0, 1, 3, 9, 10]), 10), [4, 1, 3, 1, 0])
        np.testing.assert_array_equal(pol.extra_counts(np.array([0]), 2), [2])

    def test_ratio_scales_padding(self):
        pol = MaskPolicy.sparse(ratio=0.5)
        np.testing.assert_array_equal(pol.extra_counts(np.array([1, 3, 4]), 100), [1, 2, 2])

    def test_invalid_policy(self):
        with pytest.raises(ValueError):
            MaskPolicy("banana")
        with pytest.raises(ValueError):
            MaskPolicy.sparse(ratio=-1)

    def test_support_covers_q_plus_extras(self, rng):
        Q = random_sparse(rng, (10, 30), 0.1)
        Q.eliminate_zeros()
        pol = MaskPolicy.sparse()
        state, bundle = ssmm_round_b(Q, pol, MaskSource(7))
        d = np.diff(Q.indptr)
        np.testing.assert_array_equal(state.Q_prime.row_counts(), d + pol.extra_counts(d, 30))
        support = set(zip(state.Q_prime.rows.tolist(), state.Q_prime.cols.tolist()))
        qr, qc = Q.nonzero()
        assert set(zip(qr.tolist(), qc.tolist())) <= support
        assert bundle.Q1.nnz == state.Q_prime.nnz

    def test_caller_matrix_untouched(self, rng):
        Q = random_sparse(rng, (6, 6), 0.3)
        before = Q.copy()
        ssmm_round_b(Q, MaskPolicy.sparse(), MaskSource(1))
        assert (Q != before).nnz == 0


class TestWireFormat:
    def test_bundle_roundtrip_dense(self, rng):
        _, ba = ssmm_round_a(random_ring(rng, (3, 4)), MaskSource(1))
        out = decode_bundle_a(encode_bundle_a(ba))
        np.testing.assert_array_equal(out.P1, ba.P1)
        np.testing.assert_array_equal(out.P2, ba.P2)

    def test_bundle_roundtrip_sparse(self, rng):
        _, bb = ssmm_round_b(random_sparse(rng, (6, 9), 0.2), MaskPolicy.sparse(), MaskSource(1))
        payload = encode_bundle_b(bb)
        assert payload[0] == 1
        out = decode_bundle_b(payload)
        assert out.sparse
        np.testing.assert_array_equal(out.Q1.toarray(), bb.Q1.toarray())
        assert len(payload) + HEADER_SIZE == bundle_b_bytes(6, 9, nnz_q1=bb.Q1.nnz, nnz_q2=bb.Q2.nnz)

    def test_sparse_triples_layout(self):
        m = SparseRing((2, 3), [1], [2], [5])
        buf = pack_sparse(m)
        assert buf[:12] == (2).to_bytes(4, "little") + (3).to_bytes(4, "little") + (1).to_bytes(4, "little")
        assert buf[12:] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little") + (5).to_bytes(8, "little")
        back, off = unpack_sparse(buf)
        assert off == len(buf) and back.toarray()[1, 2] == 5

    @pytest.mark.parametrize("payload", [b"", b"\x07", b"\x00" + b"\x01" * 5])
    def test_bad_bundle_b(self, payload):
        with pytest.raises(Exception):
            decode_bundle_b(payload)


def run_pair(P, Q, policy=None, bits=64):
    chans = connect_loopback()
    base = [c.stats.snapshot() for c in chans]
    out, state_b = run_parties(
        lambda: ssmm_party_a(chans[0], P, MaskSource(1, bits), bits, 3),
        lambda: ssmm_party_b(chans[1], Q, MaskSource(2, bits), policy, bits, 3),
        chans,
    )
    return out, state_b, [c.stats - b for c, b in zip(chans, base)]


class TestByteCounts:
    @pytest.mark.parametrize("dims", [(3, 4, 5), (10, 7, 2)])
    def test_dense_formula(self, rng, dims):
        x, y, z = dims
        _, _, (sa, sb) = run_pair(random_ring(rng, (x, y)), random_ring(rng, (y, z)))
        ye = y + y % 2
        assert sa.bytes_sent == bundle_a_bytes(x, ye)
        assert sb.bytes_sent == bundle_b_bytes(ye, z) + n_matrix_bytes(x, z)
        assert sa.bytes_received == sb.bytes_sent

    def test_sparse_formula(self, rng):
        Q = random_sparse(rng, (8, 12), 0.15)
        _, state, (sa, sb) = run_pair(random_ring(rng, (3, 8)), Q, MaskPolicy.sparse())
        d = np.diff(Q.indptr)
        nnz_q1 = int(np.sum(d + MaskPolicy.sparse().extra_counts(d, 12)))
        assert state.bundle.Q1.nnz == nnz_q1
        assert sb.bytes_sent == bundle_b_bytes(8, 12, nnz_q1=nnz_q1, nnz_q2=state.bundle.Q2.nnz) + n_matrix_bytes(3, 12)


class TestMaskReuse:
    def test_second_finish_refused(self, rng):
        chans = connect_loopback()
        P, Q = random_ring(rng, (2, 2)), random_ring(rng, (2, 2))

        def side_a():
            st_ = ssmm_sync_a(chans[0], P, MaskSource(1))
            ssmm_finish_a(chans[0], st_)
            with pytest.raises(MaskReuseError):
                ssmm_finish_a(chans[0], st_)
            return True

        assert run_parties(side_a, lambda: ssmm_party_b(chans[1], Q, MaskSource(2)), chans)[0]

    def test_reuse_allowed_when_requested(self, rng):
        chans = connect_loopback()
        P, Q1, Q2 = random_ring(rng, (2, 4)), random_ring(rng, (4, 3)), random_ring(rng, (4, 5))

        def side_a():
            st_ = ssmm_sync_a(chans[0], P, MaskSource(1))
            return ssmm_finish_a(chans[0], st_, session_id=0), ssmm_finish_a(chans[0], st_, session_id=1, reuse=True)

        def side_b():
            from sesorec.sharing import decode_bundle_a as dec
            from sesorec.transport import MsgType

            bundle = dec(chans[1].expect(MsgType.BUNDLE_A, 0))
            ssmm_party_b(chans[1], Q1, MaskSource(2), session_id=0, bundle_a=bundle)
            ssmm_party_b(chans[1], Q2, MaskSource(3), session_id=1, bundle_a=bundle)

        (m1, m2), _ = run_parties(side_a, side_b, chans)
        np.testing.assert_array_equal(m1, ring_matmul(P, Q1))
        np.testing.assert_array_equal(m2, ring_matmul(P, Q2))


class TestLeakage:
    @pytest.mark.parametrize("mode", ["dense", "sparse"])
    def test_probe_a(self, rng, mode):
        Q = random_ring(rng, (6, 5)) if mode == "dense" else random_sparse(rng, (6, 5), 0.4)
        _, bb = ssmm_round_b(Q, MaskPolicy(mode), MaskSource(4))
        Qd = Q if mode == "dense" else Q.toarray()
        np.testing.assert_array_equal(leakage_probe_a(bb), ring_sub(even_rows(Qd), odd_rows(Qd)))

    def test_probe_b(self, rng):
        P = random_ring(rng, (3, 8))
        _, ba = ssmm_round_a(P, MaskSource(4))
        np.testing.assert_array_equal(leakage_probe_b(ba), ring_add(even_cols(P), odd_cols(P)))

    def test_simulated_views_carry_same_leakage(self, rng):
        Q = random_ring(rng, (4, 3))
        leak = ring_sub(even_rows(Q), odd_rows(Q))
        sim = simulate_view_a(leak, Q.shape, MaskSource(9))
        np.testing.assert_array_equal(leakage_probe_a(sim), leak)
        P = random_ring(rng, (3, 4))
        leak_b = ring_add(even_cols(P), odd_cols(P))
        np.testing.assert_array_equal(leakage_probe_b(simulate_view_b(leak_b, P.shape, MaskSource(9))), leak_b)

    def test_simulator_q2_distribution(self):
        bits, n = 32, 20000
        Q = np.full((2, n), 123456, dtype=np.uint64)
        leak = ring_sub(even_rows(Q), odd_rows(Q), bits)
        _, real = ssmm_round_b(Q, None, MaskSource(1, bits), bits)
        sim = simulate_view_a(leak, Q.shape, MaskSource(2, bits), bits)
        buckets = lambda v: np.bincount((np.asarray(v).ravel() >> np.uint64(bits - 4)).astype(int), minlength=16)
        _, p, _, _ = stats.chi2_contingency(np.vstack([buckets(real.Q2), buckets(sim.Q2)]))
        assert p > 0.001


class TestTISMM:
    @pytest.mark.parametrize("dims", [(1, 1, 1), (4, 6, 3), (7, 5, 9)])
    def test_shares_reconstruct(self, rng, dims):
        x, y, z = dims
        P, Q = random_ring(rng, (x, y)), random_ring(rng, (y, z))
        M, N = tismm_execute(P, Q, TrustedInitializer(3))
        np.testing.assert_array_equal(reconstruct(M, N), bigint_matmul(P, Q))

    def test_triple_is_consistent(self):
        ta, tb = TrustedInitializer(1).deal(3, 4, 5)
        A0, B0, C0 = (reconstruct(getattr(ta, k), getattr(tb, k)) for k in ("A0", "B0", "C0"))
        np.testing.assert_array_equal(C0, ring_matmul(A0, B0))

    def test_triple_single_use(self, rng):
        ti = TrustedInitializer(1)
        triples = ti.deal(2, 2, 2)
        P, Q = random_ring(rng, (2, 2)), random_ring(rng, (2, 2))
        tismm_execute(P, Q, ti, triples=triples)
        with pytest.raises(MaskReuseError):
            tismm_execute(P, Q, ti, triples=triples)

    def test_triple_dims_checked(self, rng):
        ti = TrustedInitializer(1)
        with pytest.raises(DimensionMismatch):
            tismm_execute(random_ring(rng, (2, 3)), random_ring(rng, (3, 2)), ti, triples=ti.deal(2, 2, 2))

    def test_reveal_to_a(self, rng):
        ti = TrustedInitializer(5)
        ta, tb = ti.deal(3, 3, 3)
        P, Q = random_ring(rng, (3, 3)), random_ring(rng, (3, 3))
        chans = connect_loopback()
        out, _ = run_parties(
            lambda: tismm_party_a(chans[0], P, ta, reveal=True),
            lambda: tismm_party_b(chans[1], Q, tb, reveal=True),
            chans,
        )
        np.testing.assert_array_equal(out, ring_matmul(P, Q))
