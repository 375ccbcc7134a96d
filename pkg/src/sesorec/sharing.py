"""Additive secret sharing and two-party secure matrix multiplication.

Party A holds ``P`` (x by y) and party B holds ``Q`` (y by z).  The
even/odd masking protocol (:func:`ssmm_party_a` / :func:`ssmm_party_b`)
reveals ``P @ Q`` to A in three messages:

    A -> B   P1 = P + P',              P2 = P'_e + P'_o
    B -> A   Q1 = Q' - Q,              Q2 = Q'_e - Q'_o
    B -> A   N  = P1 (2Q - Q') - P2 (Q2 + Q'_e)

and A outputs ``M + N`` with ``M = (P + 2P') Q1 + (P2 + P'_o) Q2``.
Odd/even are 1-based: the "odd" columns of ``P`` (rows of ``Q``) are
0-based indices 0, 2, 4, ...

The Beaver-triple baseline (:func:`tismm_party_a` / :func:`tismm_party_b`)
needs triples dealt by a :class:`TrustedInitializer`.

All matrices are uint64 ring matrices (see :mod:`sesorec.ring`).
"""
from __future__ import annotations

import itertools
import os
import secrets
import struct
import threading
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .ring import (
    DimensionMismatch,
    matrix_nbytes,
    pack_matrix,
    reduce,
    ring_add,
    ring_matmul,
    ring_scale,
    ring_sub,
    unpack_matrix,
)
from .transport import HEADER_SIZE, Channel, MsgType, connect_loopback, run_parties

__all__ = [
    "ProtocolError",
    "MaskReuseError",
    "MaskSource",
    "SparseRing",
    "MaskPolicy",
    "ShareBundleA",
    "ShareBundleB",
    "StateA",
    "StateB",
    "share",
    "share_scalar",
    "reconstruct",
    "pad_even",
    "odd_cols",
    "even_cols",
    "odd_rows",
    "even_rows",
    "ssmm_round_a",
    "ssmm_round_b",
    "ssmm_local_m",
    "ssmm_local_n",
    "ssmm_party_a",
    "ssmm_party_b",
    "ssmm_sync_a",
    "ssmm_finish_a",
    "ssmm_execute",
    "TrustedInitializer",
    "TripleShare",
    "tismm_party_a",
    "tismm_party_b",
    "tismm_execute",
    "leakage_probe_a",
    "leakage_probe_b",
    "simulate_view_a",
    "simulate_view_b",
    "encode_bundle_a",
    "decode_bundle_a",
    "encode_bundle_b",
    "decode_bundle_b",
    "pack_sparse",
    "unpack_sparse",
    "sparse_nbytes",
    "bundle_a_bytes",
    "bundle_b_bytes",
    "n_matrix_bytes",
]


class ProtocolError(Exception):
    pass


class MaskReuseError(ProtocolError):
    """A one-shot mask or triple was used a second time."""


# -- randomness ---------------------------------------------------------------

class MaskSource:
    """Source of uniform ring masks.

    With ``seed=None`` words come from the operating system CSPRNG.  A seed
    gives a reproducible Philox stream for tests and benchmarks; it is not
    suitable for real deployments.  Draws only ever move forward: there is
    no way to rewind or copy a source, and :meth:`spawn` hands out
    independent child streams for concurrent sessions.
    """

    def __init__(self, seed=None, bits: int = 64):
        self.bits = bits
        self.words_drawn = 0
        self._lock = threading.Lock()
        if seed is None:
            self._gen = None
            self._seq = np.random.SeedSequence(secrets.randbits(128))
        else:
            self._seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
            self._gen = np.random.Generator(np.random.Philox(self._seq))

    @property
    def deterministic(self) -> bool:
        return self._gen is not None

    def uniform(self, shape) -> np.ndarray:
        """Uniform ring elements of the given shape."""
        shape = (shape,) if isinstance(shape, (int, np.integer)) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        with self._lock:
            if self._gen is None:
                words = np.frombuffer(os.urandom(8 * n), dtype="<u8").astype(np.uint64)
            else:
                words = self._gen.bit_generator.random_raw(n).astype(np.uint64)
            self.words_drawn += n
        return reduce(words.reshape(shape), self.bits)

    def spawn(self, n: int) -> list["MaskSource"]:
        with self._lock:
            children = self._seq.spawn(n)
        if self._gen is None:
            return [MaskSource(None, self.bits) for _ in children]
        return [MaskSource(c, self.bits) for c in children]


def share(x, source: MaskSource, bits: int = 64):
    """Additively share ring value(s) ``x``: returns ``(x_A, x_B)``.

    ``x_B`` is uniform and ``x_A = x - x_B``.
    """
    x = np.asarray(x, dtype=np.uint64)
    x_b = source.uniform(x.shape)
    x_a = ring_sub(x, x_b, bits)
    if x.ndim == 0:
        return x_a[()], x_b[()]
    return x_a, x_b


share_scalar = share


def reconstruct(x_a, x_b, bits: int = 64):
    out = ring_add(x_a, x_b, bits)
    return out[()] if np.ndim(out) == 0 else out


# -- even/odd helpers -------------------------------------------------------

def odd_cols(m):
    return m[:, 0::2]


def even_cols(m):
    return m[:, 1::2]


def odd_rows(m):
    return m[0::2]


def even_rows(m):
    return m[1::2]


def pad_even(P, Q):
    """Append a zero column to ``P`` and zero row to ``Q`` when y is odd."""
    P = np.asarray(P, dtype=np.uint64)
    if P.shape[1] != Q.shape[0]:
        raise DimensionMismatch(f"P is {P.shape} but Q is {Q.shape}")
    return _pad_cols(P), _pad_rows(Q)


def _pad_cols(P: np.ndarray) -> np.ndarray:
    P = np.asarray(P, dtype=np.uint64)
    if P.shape[1] % 2:
        P = np.hstack([P, np.zeros((P.shape[0], 1), dtype=np.uint64)])
    return P


def _pad_rows(Q):
    if Q.shape[0] % 2 == 0:
        return Q
    if sp.issparse(Q):
        return sp.vstack([Q, sp.csr_matrix((1, Q.shape[1]), dtype=np.uint64)], format="csr")
    return np.vstack([np.asarray(Q, dtype=np.uint64), np.zeros((1, Q.shape[1]), dtype=np.uint64)])


# -- sparse ring matrices ----------------------------------------------------

@dataclass
class SparseRing:
    """Ring matrix with an explicit support.

    Every listed ``(row, col)`` position is part of the support even if its
    value happens to be zero, so serialized sizes depend only on the support.
    Entries are kept sorted row-major.
    """

    shape: tuple[int, int]
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64)
        self.cols = np.asarray(self.cols, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.uint64)
        order = np.lexsort((self.cols, self.rows))
        self.rows, self.cols, self.values = self.rows[order], self.cols[order], self.values[order]

    @property
    def nnz(self) -> int:
        return len(self.values)

    def row_counts(self) -> np.ndarray:
        return np.bincount(self.rows, minlength=self.shape[0])

    def tocsr(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.values, (self.rows, self.cols)), shape=self.shape, dtype=np.uint64)

    def toarray(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=np.uint64)
        out[self.rows, self.cols] = self.values
        return out

    def row_slice(self, start: int, step: int = 2) -> "SparseRing":
        """Rows ``start, start+step, ...`` renumbered from zero."""
        keep = (self.rows >= start) & ((self.rows - start) % step == 0)
        n = len(range(start, self.shape[0], step))
        return SparseRing((n, self.shape[1]), (self.rows[keep] - start) // step, self.cols[keep], self.values[keep])


_SPARSE_HDR = struct.Struct("<III")


def _triple_dtype(bits):
    return np.dtype([("r", "<u4"), ("c", "<u4"), ("v", "<u8" if bits == 64 else "<u4")])


def sparse_nbytes(nnz: int, bits: int = 64) -> int:
    return _SPARSE_HDR.size + nnz * (8 + bits // 8)


def pack_sparse(m: SparseRing, bits: int = 64) -> bytes:
    """u32 rows, u32 cols, u32 nnz, then ``(u32 row, u32 col, value)`` triples."""
    t = np.empty(m.nnz, dtype=_triple_dtype(bits))
    t["r"], t["c"], t["v"] = m.rows, m.cols, m.values
    return _SPARSE_HDR.pack(m.shape[0], m.shape[1], m.nnz) + t.tobytes()


def unpack_sparse(buf, offset: int = 0, bits: int = 64) -> tuple[SparseRing, int]:
    rows, cols, nnz = _SPARSE_HDR.unpack_from(buf, offset)
    offset += _SPARSE_HDR.size
    dt = _triple_dtype(bits)
    if len(buf) - offset < nnz * dt.itemsize:
        raise ProtocolError("truncated sparse matrix")
    t = np.frombuffer(buf, dtype=dt, count=nnz, offset=offset)
    if nnz and (t["r"].max() >= rows or t["c"].max() >= cols):
        raise ProtocolError("sparse index out of range")
    return SparseRing((rows, cols), t["r"], t["c"], t["v"]), offset + nnz * dt.itemsize


def _times(X: np.ndarray, Y, bits: int) -> np.ndarray:
    """Dense ``X`` times dense-or-sparse ``Y`` in the ring."""
    if isinstance(Y, SparseRing):
        if X.shape[1] != Y.shape[0]:
            raise DimensionMismatch(f"cannot multiply {X.shape} by {Y.shape}")
        # scipy's integer kernels wrap mod 2^64 like numpy's
        return reduce(np.asarray((Y.tocsr().T @ X.T).T, dtype=np.uint64), bits)
    return ring_matmul(X, Y, bits)


# -- protocol state and messages ------------------------------------------------

@dataclass
class MaskPolicy:
    """How party B draws its mask ``Q'``.

    ``dense``: ``Q'`` uniform everywhere.  ``sparse``: random entries on the
    nonzeros of ``Q`` plus ``d'`` extra positions per row, with
    ``d' = min(z - d, ceil(d_prime_ratio * d))`` for a row with ``d``
    nonzeros and ``d' = min(z, zero_row_extra)`` for an all-zero row.  The
    ratio never leaves party B.
    """

    mode: str = "dense"
    d_prime_ratio: float = 1.0
    zero_row_extra: int = 4

    def __post_init__(self):
        if self.mode not in ("dense", "sparse"):
            raise ValueError(f"mode must be 'dense' or 'sparse', got {self.mode!r}")
        if self.d_prime_ratio < 0 or self.zero_row_extra < 0:
            raise ValueError("d_prime_ratio and zero_row_extra must be non-negative")

    @classmethod
    def sparse(cls, ratio: float = 1.0, zero_row_extra: int = 4) -> "MaskPolicy":
        return cls("sparse", ratio, zero_row_extra)

    def extra_counts(self, d: np.ndarray, z: int) -> np.ndarray:
        d = np.asarray(d, dtype=np.int64)
        extra = np.minimum(z - d, np.ceil(self.d_prime_ratio * d).astype(np.int64))
        return np.where(d == 0, min(z, self.zero_row_extra), extra)


@dataclass
class ShareBundleA:
    P1: np.ndarray
    P2: np.ndarray


@dataclass
class ShareBundleB:
    Q1: np.ndarray | SparseRing
    Q2: np.ndarray | SparseRing

    @property
    def sparse(self) -> bool:
        return isinstance(self.Q1, SparseRing)


@dataclass
class StateA:
    P: np.ndarray
    P_prime: np.ndarray
    P_prime_o: np.ndarray
    bundle: ShareBundleA
    uses: int = 0


@dataclass
class StateB:
    Q: np.ndarray | SparseRing
    Q_prime: np.ndarray | SparseRing
    Q_prime_e: np.ndarray | SparseRing
    bundle: ShareBundleB
    used: bool = False


def ssmm_round_a(P, source: MaskSource, bits: int = 64) -> tuple[StateA, ShareBundleA]:
    """Party A's masking step.  ``P`` must have an even number of columns."""
    P = np.asarray(P, dtype=np.uint64)
    if P.ndim != 2 or P.shape[1] % 2:
        raise DimensionMismatch(f"P must be 2-d with an even column count, got {P.shape}")
    Pp = source.uniform(P.shape)
    Pp_o = odd_cols(Pp)
    bundle = ShareBundleA(P1=ring_add(P, Pp, bits), P2=ring_add(even_cols(Pp), Pp_o, bits))
    return StateA(P, Pp, Pp_o, bundle), bundle


def _sparse_support(Q: sp.csr_matrix, policy: MaskPolicy, source: MaskSource):
    """Mask support: nonzeros of ``Q`` plus ``d'`` random zero positions per row."""
    y, z = Q.shape
    Q = Q.tocsr()
    Q.eliminate_zeros()
    Q.sort_indices()
    d = np.diff(Q.indptr)
    extra = policy.extra_counts(d, z)
    nz_rows = np.repeat(np.arange(y), d)
    rows, cols = [nz_rows], [Q.indices.astype(np.int64)]
    if extra.any():
        # rank each row's zero positions by a uniform key, keep the first d'
        sel = np.flatnonzero(extra)
        keys = source.uniform((len(sel), z))
        taken = np.zeros((len(sel), z), dtype=bool)
        taken[np.searchsorted(sel, nz_rows[np.isin(nz_rows, sel)]), Q.indices[np.isin(nz_rows, sel)]] = True
        keys[taken] = np.iinfo(np.uint64).max
        order = np.argsort(keys, axis=1, kind="stable")
        k = extra[sel]
        pick = np.arange(z)[None, :] < k[:, None]
        r_idx, c_rank = np.nonzero(pick)
        rows.append(sel[r_idx])
        cols.append(order[r_idx, c_rank])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    q_vals = np.asarray(Q[rows, cols], dtype=np.uint64).ravel() if len(rows) else np.zeros(0, np.uint64)
    return rows, cols, q_vals


def ssmm_round_b(Q, policy: MaskPolicy | None, source: MaskSource, bits: int = 64) -> tuple[StateB, ShareBundleB]:
    """Party B's masking step.  ``Q`` must have an even number of rows.

    ``Q`` may be a dense uint64 array or a scipy sparse matrix of ring values.
    """
    policy = policy or MaskPolicy()
    if Q.ndim != 2 or Q.shape[0] % 2:
        raise DimensionMismatch(f"Q must be 2-d with an even row count, got {Q.shape}")
    if policy.mode == "dense":
        Qd = Q.toarray().astype(np.uint64) if sp.issparse(Q) else np.asarray(Q, dtype=np.uint64)
        Qp = source.uniform(Qd.shape)
        Qp_e = even_rows(Qp)
        bundle = ShareBundleB(Q1=ring_sub(Qp, Qd, bits), Q2=ring_sub(Qp_e, odd_rows(Qp), bits))
        return StateB(Qd, Qp, Qp_e, bundle), bundle

    Qs = sp.csr_matrix(Q, dtype=np.uint64, copy=True)
    rows, cols, q_vals = _sparse_support(Qs, policy, source)
    mask_vals = source.uniform(len(rows))
    shape = Qs.shape
    Qp = SparseRing(shape, rows, cols, mask_vals)
    Qsr = SparseRing(shape, rows, cols, q_vals)  # Q on the mask support (superset of its nonzeros)
    Q1 = SparseRing(shape, Qp.rows, Qp.cols, ring_sub(Qp.values, Qsr.values, bits))
    Qp_e, Qp_o = Qp.row_slice(1), Qp.row_slice(0)
    Q2 = _sparse_sub(Qp_e, Qp_o, bits)
    bundle = ShareBundleB(Q1=Q1, Q2=Q2)
    return StateB(Qsr, Qp, Qp_e, bundle), bundle


def _sparse_combine(a: SparseRing, b: SparseRing, sign: int, bits: int) -> SparseRing:
    """``a + sign*b`` on the union of the two supports."""
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    ncol = a.shape[1]
    ka, kb = a.rows * ncol + a.cols, b.rows * ncol + b.cols
    keys = np.union1d(ka, kb)
    vals = np.zeros(len(keys), dtype=np.uint64)
    vals[np.searchsorted(keys, ka)] = a.values
    ib = np.searchsorted(keys, kb)
    vals[ib] = (ring_add if sign > 0 else ring_sub)(vals[ib], b.values, bits)
    return SparseRing(a.shape, keys // ncol, keys % ncol, vals)


def _sparse_sub(a, b, bits):
    return _sparse_combine(a, b, -1, bits)


def _sparse_add(a, b, bits):
    return _sparse_combine(a, b, +1, bits)


def ssmm_local_m(state: StateA, bundle: ShareBundleB, bits: int = 64) -> np.ndarray:
    """``M = (P + 2P') Q1 + (P2 + P'_o) Q2`` at party A."""
    left = ring_add(state.P, ring_scale(state.P_prime, 2, bits), bits)
    right = ring_add(state.bundle.P2, state.P_prime_o, bits)
    return ring_add(_times(left, bundle.Q1, bits), _times(right, bundle.Q2, bits), bits)


def ssmm_local_n(state: StateB, bundle: ShareBundleA, bits: int = 64) -> np.ndarray:
    """``N = P1 (2Q - Q') - P2 (Q2 + Q'_e)`` at party B."""
    if isinstance(state.Q_prime, SparseRing):
        two_q_minus = SparseRing(
            state.Q.shape, state.Q.rows, state.Q.cols,
            ring_sub(ring_scale(state.Q.values, 2, bits), state.Q_prime.values, bits),
        )
        q2_plus = _sparse_add(state.bundle.Q2, state.Q_prime_e, bits)
    else:
        two_q_minus = ring_sub(ring_scale(state.Q, 2, bits), state.Q_prime, bits)
        q2_plus = ring_add(state.bundle.Q2, state.Q_prime_e, bits)
    return ring_sub(_times(bundle.P1, two_q_minus, bits), _times(bundle.P2, q2_plus, bits), bits)


# -- wire format -------------------------------------------------------------------

def encode_bundle_a(bundle: ShareBundleA, bits: int = 64) -> bytes:
    return pack_matrix(bundle.P1, bits) + pack_matrix(bundle.P2, bits)


def decode_bundle_a(payload: bytes, bits: int = 64) -> ShareBundleA:
    P1, off = unpack_matrix(payload, 0, bits)
    P2, off = unpack_matrix(payload, off, bits)
    if off != len(payload):
        raise ProtocolError("trailing bytes after bundle A")
    if P2.shape != (P1.shape[0], P1.shape[1] // 2) or P1.shape[1] % 2:
        raise ProtocolError(f"inconsistent bundle A shapes {P1.shape}, {P2.shape}")
    return ShareBundleA(P1, P2)


def encode_bundle_b(bundle: ShareBundleB, bits: int = 64) -> bytes:
    if bundle.sparse:
        return b"\x01" + pack_sparse(bundle.Q1, bits) + pack_sparse(bundle.Q2, bits)
    return b"\x00" + pack_matrix(bundle.Q1, bits) + pack_matrix(bundle.Q2, bits)


def decode_bundle_b(payload: bytes, bits: int = 64) -> ShareBundleB:
    if not payload or payload[0] not in (0, 1):
        raise ProtocolError("bad bundle B format byte")
    unpack = unpack_sparse if payload[0] else unpack_matrix
    Q1, off = unpack(payload, 1, bits)
    Q2, off = unpack(payload, off, bits)
    if off != len(payload):
        raise ProtocolError("trailing bytes after bundle B")
    return ShareBundleB(Q1, Q2)


def bundle_a_bytes(x: int, y: int, bits: int = 64) -> int:
    """Wire bytes of message 1 for an x-by-y ``P`` (y even), frame included."""
    return HEADER_SIZE + matrix_nbytes(x, y, bits) + matrix_nbytes(x, y // 2, bits)


def bundle_b_bytes(y: int, z: int, bits: int = 64, nnz_q1: int | None = None, nnz_q2: int | None = None) -> int:
    """Wire bytes of message 2; pass support sizes for the sparse form."""
    if nnz_q1 is None:
        return HEADER_SIZE + 1 + matrix_nbytes(y, z, bits) + matrix_nbytes(y // 2, z, bits)
    return HEADER_SIZE + 1 + sparse_nbytes(nnz_q1, bits) + sparse_nbytes(nnz_q2, bits)


def n_matrix_bytes(x: int, z: int, bits: int = 64) -> int:
    return HEADER_SIZE + matrix_nbytes(x, z, bits)


# -- two-party drivers ----------------------------------------------------------

def ssmm_sync_a(channel: Channel, P, source: MaskSource, bits: int = 64, session_id: int = 0,
                msg_type: MsgType = MsgType.BUNDLE_A) -> StateA:
    """Mask ``P`` and send message 1.  Returns A's state for :func:`ssmm_finish_a`."""
    state, bundle = ssmm_round_a(_pad_cols(P), source, bits)
    channel.send(msg_type, encode_bundle_a(bundle, bits), session_id)
    return state


def ssmm_finish_a(channel: Channel, state: StateA, bits: int = 64, session_id: int = 0,
                  reuse: bool = False) -> np.ndarray:
    """Receive messages 2 and 3 and return ``P @ Q`` at party A.

    A state may serve several products only with ``reuse=True`` (the
    stale-factor mode, where one message 1 is shared by many ``Q``).
    """
    if state.uses and not reuse:
        raise MaskReuseError("party A mask already consumed; start a new session")
    state.uses += 1
    bundle_b = decode_bundle_b(channel.expect(MsgType.BUNDLE_B, session_id), bits)
    if bundle_b.Q1.shape[0] != state.P.shape[1]:
        raise DimensionMismatch(f"Q1 has {bundle_b.Q1.shape[0]} rows, P has {state.P.shape[1]} columns")
    M = ssmm_local_m(state, bundle_b, bits)
    N, off = unpack_matrix(channel.expect(MsgType.N_MATRIX, session_id), 0, bits)
    if N.shape != M.shape:
        raise ProtocolError(f"N has shape {N.shape}, expected {M.shape}")
    return ring_add(M, N, bits)


def ssmm_party_a(channel: Channel, P, source: MaskSource, bits: int = 64, session_id: int = 0) -> np.ndarray:
    """Party A's side of one secure product; returns ``P @ Q``."""
    state = ssmm_sync_a(channel, P, source, bits, session_id)
    return ssmm_finish_a(channel, state, bits, session_id)


def ssmm_party_b(channel: Channel, Q, source: MaskSource, policy: MaskPolicy | None = None,
                 bits: int = 64, session_id: int = 0, bundle_a: ShareBundleA | None = None) -> StateB:
    """Party B's side of one secure product.

    Receives message 1 unless a cached ``bundle_a`` is given, then sends
    messages 2 and 3.  Returns B's state (tests inspect the mask support).
    """
    Q = _pad_rows(Q)
    if bundle_a is None:
        bundle_a = decode_bundle_a(channel.expect(MsgType.BUNDLE_A, session_id), bits)
    if bundle_a.P1.shape[1] != Q.shape[0]:
        raise DimensionMismatch(f"P has {bundle_a.P1.shape[1]} columns but Q has {Q.shape[0]} rows")
    state, bundle_b = ssmm_round_b(Q, policy, source, bits)
    channel.send(MsgType.BUNDLE_B, encode_bundle_b(bundle_b, bits), session_id)
    N = ssmm_local_n(state, bundle_a, bits)
    state.used = True
    channel.send(MsgType.N_MATRIX, pack_matrix(N, bits), session_id)
    return state


def _check_dims(P, Q):
    if np.ndim(P) != 2 or Q.ndim != 2 or P.shape[1] != Q.shape[0]:
        raise DimensionMismatch(f"P is {np.shape(P)} but Q is {Q.shape}")


def ssmm_execute(P, Q, policy: MaskPolicy | None = None, channels=None, bits: int = 64,
                 source_a: MaskSource | None = None, source_b: MaskSource | None = None,
                 session_id: int = 0) -> np.ndarray:
    """Run both parties of one secure product and return A's output ``P @ Q``.

    ``channels`` is a ``(rating end, social end)`` pair; a fresh loopback
    pair is used when omitted.  Shapes are checked before anything is sent.
    """
    _check_dims(P, Q)
    own = channels is None
    if own:
        channels = connect_loopback()
    ch_a, ch_b = channels
    source_a = source_a or MaskSource(bits=bits)
    source_b = source_b or MaskSource(bits=bits)
    try:
        out, _ = run_parties(
            lambda: ssmm_party_a(ch_a, P, source_a, bits, session_id),
            lambda: ssmm_party_b(ch_b, Q, source_b, policy, bits, session_id),
            channels,
        )
    finally:
        if own:
            ch_a.close()
            ch_b.close()
    return out


# -- leakage ---------------------------------------------------------------------

def _dense(m):
    return m.toarray() if isinstance(m, SparseRing) else np.asarray(m, dtype=np.uint64)


def leakage_probe_a(bundle: ShareBundleB, bits: int = 64) -> np.ndarray:
    """What A can derive from messages 2: ``Q2 - (Q1_e - Q1_o) = Q_e - Q_o``."""
    Q1, Q2 = _dense(bundle.Q1), _dense(bundle.Q2)
    return ring_sub(Q2, ring_sub(even_rows(Q1), odd_rows(Q1), bits), bits)


def leakage_probe_b(bundle: ShareBundleA, bits: int = 64) -> np.ndarray:
    """What B can derive from message 1: ``P1_e + P1_o - P2 = P_e + P_o``."""
    P1 = bundle.P1
    return ring_sub(ring_add(even_cols(P1), odd_cols(P1), bits), bundle.P2, bits)


def simulate_view_a(leak, shape, source: MaskSource, bits: int = 64) -> ShareBundleB:
    """Ideal-world messages for A given only the leakage ``Q_e - Q_o``.

    ``Q*`` is uniform and ``Q*_2 = (Q*_e - Q*_o) + (Q_e - Q_o)``, which has
    the joint distribution of the real ``(Q1, Q2)``.
    """
    Qs = source.uniform(shape)
    Q2 = ring_add(ring_sub(even_rows(Qs), odd_rows(Qs), bits), leak, bits)
    return ShareBundleB(Qs, Q2)


def simulate_view_b(leak, shape, source: MaskSource, bits: int = 64) -> ShareBundleA:
    """Ideal-world message for B given only ``P_e + P_o``."""
    Ps = source.uniform(shape)
    P2 = ring_sub(ring_add(even_cols(Ps), odd_cols(Ps), bits), leak, bits)
    return ShareBundleA(Ps, P2)


# -- trusted-initializer baseline ----------------------------------------------

@dataclass
class TripleShare:
    """One party's shares of a Beaver matrix triple ``C0 = A0 @ B0``."""

    triple_id: int
    party: int
    A0: np.ndarray
    B0: np.ndarray
    C0: np.ndarray
    _registry: set = field(repr=False, default_factory=set)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.A0.shape[0], self.A0.shape[1], self.B0.shape[1]

    def consume(self) -> None:
        key = (self.triple_id, self.party)
        if key in self._registry:
            raise MaskReuseError(f"triple {self.triple_id} already used by party {self.party}")
        self._registry.add(key)


class TrustedInitializer:
    """Third role that deals matrix multiplication triples ahead of time."""

    def __init__(self, seed=None, bits: int = 64):
        self.bits = bits
        self.source = MaskSource(seed, bits)
        self._ids = itertools.count()
        self._used: set = set()

    def deal(self, x: int, y: int, z: int) -> tuple[TripleShare, TripleShare]:
        b = self.bits
        A0 = self.source.uniform((x, y))
        B0 = self.source.uniform((y, z))
        C0 = ring_matmul(A0, B0, b)
        (A_a, A_b), (B_a, B_b), (C_a, C_b) = (share(m, self.source, b) for m in (A0, B0, C0))
        tid = next(self._ids)
        return (
            TripleShare(tid, 0, A_a, B_a, C_a, self._used),
            TripleShare(tid, 1, A_b, B_b, C_b, self._used),
        )


def _check_triple(t: TripleShare, x, y, z):
    if t.dims != (x, y, z):
        raise DimensionMismatch(f"triple dims {t.dims} do not match product ({x}, {y}, {z})")
    t.consume()


def tismm_party_a(channel: Channel, P, triple: TripleShare, bits: int = 64, session_id: int = 0,
                  reveal: bool = False) -> np.ndarray:
    """Party A with shares ``<X> = (P, 0)``, ``<Y> = (0, Q)``.

    Opens ``E = X - A0`` and ``F = Y - B0`` and returns A's share of
    ``P @ Q``, or the product itself when ``reveal`` is set.
    """
    P = np.asarray(P, dtype=np.uint64)
    x, y, z = triple.dims
    if P.shape != (x, y):
        raise DimensionMismatch(f"P is {P.shape}, triple expects {(x, y)}")
    _check_triple(triple, x, y, z)
    E_a = ring_sub(P, triple.A0, bits)
    F_a = ring_sub(np.zeros((y, z), np.uint64), triple.B0, bits)
    channel.send(MsgType.BUNDLE_A, pack_matrix(E_a, bits) + pack_matrix(F_a, bits), session_id)
    payload = channel.expect(MsgType.BUNDLE_B, session_id)
    E_b, off = unpack_matrix(payload, 0, bits)
    F_b, _ = unpack_matrix(payload, off, bits)
    E, F = ring_add(E_a, E_b, bits), ring_add(F_a, F_b, bits)
    Z = ring_add(
        ring_add(ring_matmul(E, F, bits), ring_matmul(E, triple.B0, bits), bits),
        ring_add(ring_matmul(triple.A0, F, bits), triple.C0, bits),
        bits,
    )
    if reveal:
        N, _ = unpack_matrix(channel.expect(MsgType.N_MATRIX, session_id), 0, bits)
        return ring_add(Z, N, bits)
    return Z


def tismm_party_b(channel: Channel, Q, triple: TripleShare, bits: int = 64, session_id: int = 0,
                  reveal: bool = False) -> np.ndarray | None:
    """Party B's side of :func:`tismm_party_a`; returns B's share unless revealing."""
    Q = np.asarray(Q, dtype=np.uint64)
    x, y, z = triple.dims
    if Q.shape != (y, z):
        raise DimensionMismatch(f"Q is {Q.shape}, triple expects {(y, z)}")
    _check_triple(triple, x, y, z)
    E_b = ring_sub(np.zeros((x, y), np.uint64), triple.A0, bits)
    F_b = ring_sub(Q, triple.B0, bits)
    payload = channel.expect(MsgType.BUNDLE_A, session_id)
    channel.send(MsgType.BUNDLE_B, pack_matrix(E_b, bits) + pack_matrix(F_b, bits), session_id)
    E_a, off = unpack_matrix(payload, 0, bits)
    F_a, _ = unpack_matrix(payload, off, bits)
    E, F = ring_add(E_a, E_b, bits), ring_add(F_a, F_b, bits)
    Z = ring_add(
        ring_add(ring_matmul(E, triple.B0, bits), ring_matmul(triple.A0, F, bits), bits),
        triple.C0,
        bits,
    )
    if reveal:
        channel.send(MsgType.N_MATRIX, pack_matrix(Z, bits), session_id)
        return None
    return Z


def tismm_execute(P, Q, initializer: TrustedInitializer, channels=None, bits: int = 64,
                  triples: tuple[TripleShare, TripleShare] | None = None,
                  session_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Run both TISMM parties; returns the additive shares ``(M, N)`` of ``P @ Q``."""
    P = np.asarray(P, dtype=np.uint64)
    Q = np.asarray(Q, dtype=np.uint64)
    _check_dims(P, Q)
    if triples is None:
        triples = initializer.deal(P.shape[0], P.shape[1], Q.shape[1])
    own = channels is None
    if own:
        channels = connect_loopback()
    ch_a, ch_b = channels
    try:
        return run_parties(
            lambda: tismm_party_a(ch_a, P, triples[0], bits, session_id),
            lambda: tismm_party_b(ch_b, Q, triples[1], bits, session_id),
            channels,
        )
    finally:
        if own:
            ch_a.close()
            ch_b.close()
