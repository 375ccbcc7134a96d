"""Matrix factorization with social regularization, in the clear and securely.

The rating party owns ``U`` (K x I) and ``V`` (K x J); the social party owns
the symmetric strength matrix ``S``.  For a minibatch with user set
``U_B`` and item set ``V_B`` the loss is::

    L = 1/2 ||I_B o (R_B - U_B^T V_B)||^2
        + g/2 sum_b d_b |u_b|^2 - g sum_b u_b . (U S_B^T)_b + g/2 sum_i e_i |u_i|^2
        + l/2 (||U_B||^2 + ||V_B||^2)

with ``d_b = sum_f s_bf`` and ``e_i = sum_b s_bi``.  ``U`` in the cross term
is the factor snapshot taken before the step and is held constant; the
batch columns of ``U`` in the last social sum are the variables ``U_B``.
Under that convention the exact gradient is::

    dL/dU_B = -V_B (I_B o res)^T + g U_B D_B - g U S_B^T + g U_B E_B + l U_B
    dL/dV_B = -U_B (I_B o res) + l V_B

The three cross-party products ``U_B D_B^T``, ``U S_B^T`` and ``U_B E_B^T``
are the only places where ``S`` enters; everything else is local to the
rating party.
"""
from __future__ import annotations

import itertools
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .data import RatingDataset, SocialGraph
from .metrics import PredictionSet, ndcg_at_n, rmse
from .ring import FixedPointConfig, decode_fixed, encode_fixed, truncate
from .sharing import (
    MaskPolicy,
    MaskSource,
    decode_bundle_a,
    ssmm_finish_a,
    ssmm_party_a,
    ssmm_party_b,
    ssmm_sync_a,
)
from .transport import Channel, ChannelStats, MsgType, connect_loopback, run_parties

__all__ = [
    "Hyperparams",
    "LatentFactors",
    "MinibatchView",
    "SocialTerms",
    "Divergence",
    "TrainResult",
    "MODELS",
    "init_factors",
    "make_batch",
    "iter_batches",
    "build_social_terms",
    "objective",
    "plain_products",
    "grad_U",
    "grad_V",
    "social_penalty",
    "full_objective",
    "SocialPartyServer",
    "SecureProductClient",
    "secure_products",
    "train",
    "train_sesorec_loopback",
    "predict",
    "predict_dataset",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
]

log = logging.getLogger(__name__)

MODELS = ("mf", "soreg", "sesorec")
DIVERGENCE_LIMIT = 1e6


class Divergence(RuntimeError):
    pass


@dataclass
class Hyperparams:
    k: int = 10
    gamma: float = 0.1
    lam: float = 0.1
    theta: float = 0.01
    batch_size: int = 64
    epochs: int = 20
    seed: int = 0
    init_std: float = 0.01

    def __post_init__(self):
        if self.k < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("k and batch_size must be >= 1 and epochs >= 0")
        if self.gamma < 0 or self.lam < 0:
            raise ValueError("gamma and lambda must be non-negative")
        if not self.theta > 0:
            raise ValueError("learning rate must be positive")


@dataclass
class LatentFactors:
    U: np.ndarray
    V: np.ndarray

    @property
    def k(self) -> int:
        return self.U.shape[0]

    def copy(self) -> "LatentFactors":
        return LatentFactors(self.U.copy(), self.V.copy())


def init_factors(n_users: int, n_items: int, hp: Hyperparams, rng=None) -> LatentFactors:
    rng = np.random.default_rng(hp.seed) if rng is None else rng
    U = rng.normal(0.0, hp.init_std, size=(hp.k, n_users))
    V = rng.normal(0.0, hp.init_std, size=(hp.k, n_items))
    return LatentFactors(U, V)


@dataclass
class MinibatchView:
    """Dense view of one minibatch; ``users``/``items`` are global ids."""

    users: np.ndarray
    items: np.ndarray
    R: np.ndarray
    mask: np.ndarray


def make_batch(users, items, ratings) -> MinibatchView:
    ub, ui = np.unique(users, return_inverse=True)
    vb, vi = np.unique(items, return_inverse=True)
    R = np.zeros((len(ub), len(vb)))
    mask = np.zeros_like(R)
    R[ui, vi] = ratings
    mask[ui, vi] = 1.0
    return MinibatchView(ub, vb, R, mask)


def iter_batches(n: int, batch_size: int, rng):
    """Shuffle ``range(n)`` and cut it into consecutive batches."""
    perm = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield perm[s:s + batch_size]


@dataclass
class SocialTerms:
    """Batch-restricted social quantities, computed by the social party.

    ``d``, ``e_batch`` are the diagonals of ``D_B`` and ``E_B``; ``S_B`` holds
    the batch users' rows of ``S``; ``e`` is ``sum_b s_bi`` for every user.
    """

    users: np.ndarray
    d: np.ndarray
    S_B: sp.csr_matrix
    e: np.ndarray

    @property
    def e_batch(self) -> np.ndarray:
        return self.e[self.users]

    @property
    def D_B(self) -> np.ndarray:
        return np.diag(self.d)

    @property
    def E_B(self) -> np.ndarray:
        return np.diag(self.e_batch)


def build_social_terms(S, batch_users) -> SocialTerms:
    S = sp.csr_matrix(S.matrix if isinstance(S, SocialGraph) else S)
    users = np.asarray(batch_users, dtype=np.int64)
    if users.size and (users.min() < 0 or users.max() >= S.shape[0]):
        raise KeyError(f"batch user ids outside 0..{S.shape[0] - 1}")
    S_B = S[users]
    return SocialTerms(
        users=users,
        d=np.asarray(S_B.sum(axis=1)).ravel(),
        S_B=S_B,
        e=np.asarray(S_B.sum(axis=0)).ravel(),
    )


def _check(batch: MinibatchView, U_B, V_B):
    if U_B.shape[1] != len(batch.users) or V_B.shape[1] != len(batch.items) or U_B.shape[0] != V_B.shape[0]:
        raise ValueError(
            f"factor shapes {U_B.shape}, {V_B.shape} do not fit a batch of "
            f"{len(batch.users)} users and {len(batch.items)} items"
        )


def _residual(batch, U_B, V_B):
    return batch.mask * (batch.R - U_B.T @ V_B)


def objective(batch: MinibatchView, U_B, V_B, U, terms: SocialTerms | None, hp: Hyperparams) -> float:
    """Minibatch loss; ``U`` is the all-user snapshot (its batch columns are
    replaced by ``U_B`` in the ``e``-weighted sum)."""
    _check(batch, U_B, V_B)
    res = _residual(batch, U_B, V_B)
    loss = 0.5 * np.sum(res * res) + 0.5 * hp.lam * (np.sum(U_B * U_B) + np.sum(V_B * V_B))
    if terms is None or hp.gamma == 0:
        return float(loss)
    W = U.copy()
    W[:, terms.users] = U_B
    social = (
        0.5 * np.sum(terms.d * np.sum(U_B * U_B, axis=0))
        - np.sum(U_B * (terms.S_B @ U.T).T)
        + 0.5 * np.sum(terms.e * np.sum(W * W, axis=0))
    )
    return float(loss + hp.gamma * social)


def plain_products(U_B, U, terms: SocialTerms) -> dict:
    """The three cross-party products computed in the clear."""
    return {
        "UD": U_B * terms.d,
        "US": np.asarray((terms.S_B @ U.T).T),
        "UE": U_B * terms.e_batch,
    }


def grad_U(batch: MinibatchView, U_B, V_B, products: dict | None, hp: Hyperparams) -> np.ndarray:
    _check(batch, U_B, V_B)
    g = -V_B @ _residual(batch, U_B, V_B).T + hp.lam * U_B
    if products is not None and hp.gamma:
        g += hp.gamma * (products["UD"] - products["US"] + products["UE"])
    return g


def grad_V(batch: MinibatchView, U_B, V_B, hp: Hyperparams) -> np.ndarray:
    _check(batch, U_B, V_B)
    return -U_B @ _residual(batch, U_B, V_B) + hp.lam * V_B


def laplacian(S) -> sp.csr_matrix:
    S = sp.csr_matrix(S.matrix if isinstance(S, SocialGraph) else S)
    return (sp.diags(np.asarray(S.sum(axis=1)).ravel()) - S).tocsr()


def social_penalty(U, S) -> float:
    """``sum_{i,f} 1/2 s_if |u_i - u_f|^2`` for symmetric ``S``."""
    return float(np.sum(U * (laplacian(S) @ U.T).T))


def full_objective(factors: LatentFactors, users, items, ratings, hp: Hyperparams, penalty: float = 0.0) -> float:
    """Training loss over all ratings plus ``gamma * penalty`` and L2 terms."""
    pred = np.einsum("ki,ki->i", factors.U[:, users], factors.V[:, items])
    err = ratings - pred
    reg = np.sum(factors.U ** 2) + np.sum(factors.V ** 2)
    return float(0.5 * err @ err + hp.gamma * penalty + 0.5 * hp.lam * reg)


# -- secure products ------------------------------------------------------------

def _encode_sparse(M, cfg: FixedPointConfig) -> sp.csr_matrix:
    M = sp.csr_matrix(M)
    M.eliminate_zeros()
    return sp.csr_matrix((encode_fixed(M.data, cfg), M.indices, M.indptr), shape=M.shape, dtype=np.uint64)


class SocialPartyServer:
    """The social party's loop: answers product requests over ``channel``.

    ``S`` never leaves this object; only masked shares are sent.
    """

    def __init__(self, channel: Channel, graph, cfg: FixedPointConfig = FixedPointConfig(),
                 policy: MaskPolicy | None = None, source: MaskSource | None = None):
        self.channel = channel
        self.S = sp.csr_matrix(graph.matrix if isinstance(graph, SocialGraph) else graph)
        self.cfg = cfg
        self.policy = policy or MaskPolicy.sparse()
        self.source = source or MaskSource(bits=cfg.ring_bits)
        self.requests = 0
        self.last_states = []
        self._cached_bundle = None

    def _product(self, Q, sid, bundle_a=None):
        return ssmm_party_b(self.channel, Q, self.source, self.policy, self.cfg.ring_bits, sid, bundle_a)

    def handle(self, msg: dict) -> bool:
        op = msg.get("op")
        sid = msg.get("sid", 0)
        cfg = self.cfg
        if op == "stop":
            return False
        if op == "batch":
            terms = build_social_terms(self.S, msg["users"])
            n = len(terms.users)
            qs = [
                _encode_sparse(sp.diags(terms.d, shape=(n, n)), cfg),
                _encode_sparse(terms.S_B.T, cfg),
                _encode_sparse(sp.diags(terms.e_batch, shape=(n, n)), cfg),
            ]
            bundles = [None, self._cached_bundle if msg.get("stale") else None, None]
            if msg.get("stale") and self._cached_bundle is None:
                raise RuntimeError("stale product requested before a factor sync")
            self.last_states = [self._product(q, sid + k, b) for k, (q, b) in enumerate(zip(qs, bundles))]
        elif op == "sync":
            payload = self.channel.expect(MsgType.U_SYNC, sid)
            self._cached_bundle = decode_bundle_a(payload, cfg.ring_bits)
        elif op == "penalty":
            self.last_states = [self._product(_encode_sparse(laplacian(self.S), cfg), sid)]
        else:
            raise ValueError(f"unknown request {op!r}")
        self.requests += 1
        return True

    def serve(self) -> int:
        """Handle requests until told to stop; returns the request count."""
        while self.handle(self.channel.recv_json(0)):
            pass
        return self.requests


class SecureProductClient:
    """The rating party's handle on the social party's products."""

    def __init__(self, channel: Channel, cfg: FixedPointConfig = FixedPointConfig(),
                 source: MaskSource | None = None, stale_u: bool = False):
        self.channel = channel
        self.cfg = cfg
        self.source = source or MaskSource(bits=cfg.ring_bits)
        self.stale_u = stale_u
        self._sid = itertools.count(1)
        self._sync_state = None

    def _next_sids(self, n):
        first = next(self._sid)
        for _ in range(n - 1):
            next(self._sid)
        return first

    def _run(self, P, sid):
        raw = ssmm_party_a(self.channel, encode_fixed(P, self.cfg), self.source, self.cfg.ring_bits, sid)
        return decode_fixed(truncate(raw, self.cfg), self.cfg)

    def sync(self, U) -> None:
        """Send one masked copy of ``U`` for the stale-factor mode."""
        sid = self._next_sids(1)
        self.channel.send_json({"op": "sync", "sid": sid})
        self._sync_state = ssmm_sync_a(self.channel, encode_fixed(U, self.cfg), self.source,
                                       self.cfg.ring_bits, sid, MsgType.U_SYNC)

    def products(self, batch_users, U_B, U) -> dict:
        stale = self.stale_u and self._sync_state is not None
        sid = self._next_sids(3)
        users = [int(u) for u in batch_users]
        self.channel.send_json({"op": "batch", "users": users, "sid": sid, "stale": stale})
        out = {"UD": self._run(U_B, sid)}
        if stale:
            raw = ssmm_finish_a(self.channel, self._sync_state, self.cfg.ring_bits, sid + 1, reuse=True)
            out["US"] = decode_fixed(truncate(raw, self.cfg), self.cfg)[:, :len(users)]
        else:
            out["US"] = self._run(U, sid + 1)
        out["UE"] = self._run(U_B, sid + 2)
        return out

    def penalty(self, U) -> float:
        sid = self._next_sids(1)
        self.channel.send_json({"op": "penalty", "sid": sid})
        UL = self._run(U, sid)[:, :U.shape[1]]
        return float(np.sum(U * UL))

    def stop(self) -> None:
        self.channel.send_json({"op": "stop"})


def secure_products(client: SecureProductClient, batch_users, U_B, U) -> dict:
    """``{UD, US, UE}`` computed with the social party through ``client``."""
    return client.products(batch_users, U_B, U)


# -- training ---------------------------------------------------------------------

@dataclass
class TrainResult:
    factors: LatentFactors
    history: list = field(default_factory=list)
    seconds: float = 0.0
    bytes_communicated: int = 0


def _as_arrays(ratings):
    if isinstance(ratings, RatingDataset):
        return ratings.users, ratings.items, ratings.ratings
    users, items, r = ratings
    return np.asarray(users), np.asarray(items), np.asarray(r, dtype=float)


def train(model: str, ratings, n_users: int, n_items: int, hp: Hyperparams, graph=None,
          client: SecureProductClient | None = None, track_loss: bool = True,
          on_epoch=None, factors: LatentFactors | None = None) -> TrainResult:
    """Minibatch gradient descent for ``mf``, ``soreg`` or ``sesorec``.

    ``soreg`` needs ``graph``; ``sesorec`` needs a ``client`` connected to a
    running :class:`SocialPartyServer`.  The client is not stopped here.
    Each epoch appends ``{epoch, loss, seconds, bytes, total_bytes}`` to the
    history (``loss`` is ``nan`` when ``track_loss`` is off).
    """
    if model not in MODELS:
        raise ValueError(f"model must be one of {MODELS}, got {model!r}")
    if model == "soreg" and graph is None:
        raise ValueError("soreg needs the social graph")
    if model == "sesorec" and client is None:
        raise ValueError("sesorec needs a channel to the social party")
    users, items, r = _as_arrays(ratings)
    if len(r) == 0:
        raise ValueError("no training ratings")
    if model == "mf":
        hp = Hyperparams(**{**asdict(hp), "gamma": 0.0})
    rng = np.random.default_rng(hp.seed)
    f = init_factors(n_users, n_items, hp, rng) if factors is None else factors.copy()
    U, V = f.U, f.V
    S = None
    if model == "soreg":
        S = sp.csr_matrix(graph.matrix if isinstance(graph, SocialGraph) else graph)
    stats = client.channel.stats if client is not None else ChannelStats()
    start_bytes = stats.total_bytes
    t0 = time.perf_counter()
    result = TrainResult(f)
    for epoch in range(1, hp.epochs + 1):
        epoch_bytes = stats.total_bytes
        te = time.perf_counter()
        if client is not None and client.stale_u:
            client.sync(U)
        for b, idx in enumerate(iter_batches(len(r), hp.batch_size, rng)):
            batch = make_batch(users[idx], items[idx], r[idx])
            U_B, V_B = U[:, batch.users], V[:, batch.items]
            products = None
            if model == "soreg":
                products = plain_products(U_B, U, build_social_terms(S, batch.users))
            elif model == "sesorec":
                products = secure_products(client, batch.users, U_B, U)
            gU = grad_U(batch, U_B, V_B, products, hp)
            gV = grad_V(batch, U_B, V_B, hp)
            U[:, batch.users] = U_B - hp.theta * gU
            V[:, batch.items] = V_B - hp.theta * gV
            _guard(U, V, epoch, b)
        loss = math.nan
        if track_loss:
            pen = 0.0
            if hp.gamma and model == "soreg":
                pen = social_penalty(U, S)
            elif hp.gamma and model == "sesorec":
                pen = client.penalty(U)
            loss = full_objective(f, users, items, r, hp, pen)
        rec = {
            "epoch": epoch,
            "loss": loss,
            "seconds": time.perf_counter() - te,
            "bytes": stats.total_bytes - epoch_bytes,
            "total_bytes": stats.total_bytes - start_bytes,
        }
        result.history.append(rec)
        log.info("%s epoch %d loss %.6g (%.2fs, %d bytes)", model, epoch, loss, rec["seconds"], rec["bytes"])
        if on_epoch is not None:
            on_epoch(rec)
    result.seconds = time.perf_counter() - t0
    result.bytes_communicated = stats.total_bytes - start_bytes
    return result


def _guard(U, V, epoch, batch):
    for name, M in (("U", U), ("V", V)):
        if not np.all(np.isfinite(M)) or np.max(np.abs(M)) > DIVERGENCE_LIMIT:
            raise Divergence(
                f"{name} diverged at epoch {epoch}, batch {batch} "
                f"(max |entry| {np.nanmax(np.abs(M)):.3g}); lower the learning rate"
            )


def train_sesorec_loopback(ratings, n_users, n_items, hp: Hyperparams, graph,
                           cfg: FixedPointConfig = FixedPointConfig(), policy: MaskPolicy | None = None,
                           stale_u: bool = False, track_loss: bool = True, mask_seed=None,
                           on_epoch=None, channels=None) -> TrainResult:
    """Run both parties in one process; the social party runs in a thread."""
    own = channels is None
    ch_a, ch_b = connect_loopback(cfg) if own else channels
    seeds = (None, None) if mask_seed is None else (MaskSource(mask_seed, cfg.ring_bits).spawn(2))
    server = SocialPartyServer(ch_b, graph, cfg, policy, seeds[1])
    client = SecureProductClient(ch_a, cfg, seeds[0], stale_u=stale_u)

    def side_a():
        try:
            return train("sesorec", ratings, n_users, n_items, hp, client=client,
                         track_loss=track_loss, on_epoch=on_epoch)
        finally:
            if not ch_a.closed:
                client.stop()

    try:
        res, _ = run_parties(side_a, server.serve, (ch_a, ch_b))
    finally:
        if own:
            ch_a.close()
            ch_b.close()
    return res


# -- prediction & evaluation -------------------------------------------------------

def predict(factors: LatentFactors, user: int, item: int) -> float:
    if not (0 <= user < factors.U.shape[1] and 0 <= item < factors.V.shape[1]):
        raise KeyError(f"unknown user {user} or item {item}")
    return float(factors.U[:, user] @ factors.V[:, item])


def predict_dataset(factors: LatentFactors, test: RatingDataset, train: RatingDataset) -> PredictionSet:
    """Predictions for ``test``; users or items unseen in ``train`` get the
    global training mean."""
    pred = np.einsum("ki,ki->i", factors.U[:, test.users], factors.V[:, test.items])
    seen_u = np.zeros(factors.U.shape[1], dtype=bool)
    seen_i = np.zeros(factors.V.shape[1], dtype=bool)
    seen_u[train.users] = True
    seen_i[train.items] = True
    cold = ~(seen_u[test.users] & seen_i[test.items])
    pred[cold] = float(np.mean(train.ratings))
    return PredictionSet(test.users, test.items, test.ratings, pred)


def evaluate(factors: LatentFactors, test: RatingDataset, train: RatingDataset, n: int = 10) -> dict:
    ps = predict_dataset(factors, test, train)
    return {"rmse": rmse(ps), f"ndcg@{n}": ndcg_at_n(ps, n)}


# -- checkpoints ---------------------------------------------------------------------

_MAGIC = "SESOREC-CHECKPOINT 1"


def save_checkpoint(path, factors: LatentFactors, hp: Hyperparams, **meta) -> Path:
    """Text header (``key=value`` lines up to ``END``) then little-endian
    float64 ``U`` and ``V``, row-major."""
    path = Path(path)
    head = {"K": factors.k, "I": factors.U.shape[1], "J": factors.V.shape[1], **asdict(hp), **meta}
    text = _MAGIC + "\n" + "".join(f"{k}={v}\n" for k, v in head.items()) + "END\n"
    with open(path, "wb") as fh:
        fh.write(text.encode())
        fh.write(np.ascontiguousarray(factors.U, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(factors.V, dtype="<f8").tobytes())
    return path


def load_checkpoint(path) -> tuple[LatentFactors, Hyperparams, dict]:
    data = Path(path).read_bytes()
    end = data.find(b"\nEND\n")
    if not data.startswith(_MAGIC.encode()) or end < 0:
        raise ValueError(f"{path} is not a checkpoint")
    head = dict(line.split("=", 1) for line in data[len(_MAGIC) + 1:end].decode().splitlines())
    K, I, J = int(head.pop("K")), int(head.pop("I")), int(head.pop("J"))
    body = np.frombuffer(data, dtype="<f8", offset=end + 5)
    if body.size != K * (I + J):
        raise ValueError(f"{path}: expected {K * (I + J)} values, found {body.size}")
    U = body[:K * I].reshape(K, I).copy()
    V = body[K * I:].reshape(K, J).copy()
    defaults = asdict(Hyperparams())
    hp = Hyperparams(**{k: type(defaults[k])(v) for k, v in head.items() if k in defaults})
    meta = {k: v for k, v in head.items() if k not in defaults}
    return LatentFactors(U, V), hp, meta
