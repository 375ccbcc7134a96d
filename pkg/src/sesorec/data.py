"""Rating and social data ingestion, filtering and cross-validation folds."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

__all__ = [
    "DataError",
    "ParseError",
    "EmptyDataError",
    "RatingDataset",
    "SocialGraph",
    "DatasetManifest",
    "load_ratings",
    "load_social",
    "filter_min_interactions",
    "kfold_split",
    "load_manifest",
    "prepare_dataset",
    "write_prepared",
    "read_prepared",
]

log = logging.getLogger(__name__)


class DataError(Exception):
    pass


class ParseError(DataError):
    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


class EmptyDataError(DataError):
    pass


@dataclass
class RatingDataset:
    """User-item ratings with contiguous ids.

    ``users``/``items`` index into ``user_ids``/``item_ids``, which hold the
    original labels from the input file.
    """

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    user_ids: list
    item_ids: list
    folds: np.ndarray | None = None
    duplicates: int = 0

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_ratings(self) -> int:
        return len(self.ratings)

    @property
    def user_map(self) -> dict:
        return {u: i for i, u in enumerate(self.user_ids)}

    def __len__(self):
        return self.n_ratings

    def subset(self, mask) -> "RatingDataset":
        """Ratings selected by ``mask``, keeping the id space unchanged."""
        return replace(
            self,
            users=self.users[mask],
            items=self.items[mask],
            ratings=self.ratings[mask],
            folds=None if self.folds is None else self.folds[mask],
        )

    def split(self, fold: int) -> tuple["RatingDataset", "RatingDataset"]:
        """``(train, test)`` with ``fold`` held out."""
        if self.folds is None:
            raise DataError("dataset has no fold assignment; call kfold_split first")
        test = self.folds == fold
        return self.subset(~test), self.subset(test)


@dataclass
class SocialGraph:
    """Symmetric, zero-diagonal social strength matrix over the rating users."""

    matrix: sp.csr_matrix
    raw_relations: int = 0

    @property
    def n_users(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_edges(self) -> int:
        """Undirected edge count."""
        return int(sp.triu(self.matrix, k=1).nnz)

    @classmethod
    def from_edges(cls, n_users, edges, weights=None) -> "SocialGraph":
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        w = np.ones(len(edges)) if weights is None else np.asarray(weights, dtype=float)
        return cls(_symmetrize(n_users, edges[:, 0], edges[:, 1], w), raw_relations=len(edges))


def _symmetrize(n, a, b, w) -> sp.csr_matrix:
    keep = a != b
    a, b, w = a[keep], b[keep], w[keep]
    if np.any(w < 0):
        raise DataError("social strengths must be non-negative")
    rows = np.concatenate([a, b])
    cols = np.concatenate([b, a])
    vals = np.concatenate([w, w])
    m = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    # duplicates were summed by tocsr; we want the max instead
    if len(rows):
        order = np.lexsort((-vals, cols, rows))
        r, c, v = rows[order], cols[order], vals[order]
        first = np.ones(len(r), dtype=bool)
        first[1:] = (r[1:] != r[:-1]) | (c[1:] != c[:-1])
        m = sp.csr_matrix((v[first], (r[first], c[first])), shape=(n, n))
    m.eliminate_zeros()
    return m


def _split_line(line: str, delimiter):
    if delimiter is None:
        return line.replace(",", " ").split()
    return [t.strip() for t in line.split(delimiter)]


def _iter_records(path, delimiter, min_fields):
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith(("#", "%")):
                continue
            parts = _split_line(line, delimiter)
            if len(parts) < min_fields:
                raise ParseError(path, lineno, f"expected at least {min_fields} fields, got {len(parts)}")
            yield lineno, parts


def load_ratings(path, delimiter: str | None = None, scale: tuple[float, float] | None = None) -> RatingDataset:
    """Read ``user item rating`` lines (whitespace or comma separated).

    Extra columns are ignored.  For duplicate ``(user, item)`` pairs the last
    occurrence wins.  Ids are remapped to ``0..n-1`` in order of first
    appearance.
    """
    umap, imap = {}, {}
    latest = {}
    n_records = 0
    for lineno, parts in _iter_records(path, delimiter, 3):
        try:
            r = float(parts[2])
        except ValueError:
            raise ParseError(path, lineno, f"rating {parts[2]!r} is not a number") from None
        if not np.isfinite(r):
            raise ParseError(path, lineno, "rating is not finite")
        if scale is not None and not scale[0] <= r <= scale[1]:
            raise ParseError(path, lineno, f"rating {r} outside scale {scale}")
        n_records += 1
        latest[umap.setdefault(parts[0], len(umap)), imap.setdefault(parts[1], len(imap))] = r
    if not latest:
        raise EmptyDataError(f"{path}: no ratings found")
    dup = n_records - len(latest)
    if dup:
        log.warning("%s: %d duplicate (user, item) pairs, kept the last occurrence", path, dup)
    keys = np.array(list(latest), dtype=np.int64).reshape(-1, 2)
    return RatingDataset(
        keys[:, 0],
        keys[:, 1],
        np.fromiter(latest.values(), dtype=np.float64, count=len(latest)),
        list(umap),
        list(imap),
        duplicates=dup,
    )


def load_social(path, user_map: dict, delimiter: str | None = None) -> SocialGraph:
    """Read ``user user [weight]`` lines into a graph over ``user_map``'s users.

    Edges touching users absent from ``user_map`` are dropped, self-loops are
    dropped, and the matrix is symmetrized with ``max(s_if, s_fi)``.
    """
    a, b, w = [], [], []
    raw = 0
    for lineno, parts in _iter_records(path, delimiter, 2):
        raw += 1
        try:
            weight = float(parts[2]) if len(parts) > 2 else 1.0
        except ValueError:
            raise ParseError(path, lineno, f"weight {parts[2]!r} is not a number") from None
        if parts[0] in user_map and parts[1] in user_map:
            a.append(user_map[parts[0]])
            b.append(user_map[parts[1]])
            w.append(weight)
    graph = SocialGraph(
        _symmetrize(len(user_map), np.array(a, dtype=np.int64), np.array(b, dtype=np.int64), np.array(w)),
        raw_relations=raw,
    )
    log.info("%s: %d raw relations, %d undirected edges among rating users", path, raw, graph.n_edges)
    return graph


def filter_min_interactions(ds: RatingDataset, threshold: int = 20) -> RatingDataset:
    """Drop users and items with fewer than ``threshold`` ratings, to a fixpoint.

    Removing a user can push an item below the threshold and vice versa, so
    the filter repeats until nothing changes.  Ids are then compacted.
    """
    keep = np.ones(len(ds.ratings), dtype=bool)
    rounds = 0
    while True:
        uc = np.bincount(ds.users[keep], minlength=ds.n_users)
        ic = np.bincount(ds.items[keep], minlength=ds.n_items)
        ok = keep & (uc[ds.users] >= threshold) & (ic[ds.items] >= threshold)
        rounds += 1
        if np.array_equal(ok, keep):
            break
        keep = ok
    if not keep.any():
        raise EmptyDataError(f"no ratings survive a minimum of {threshold} interactions")
    log.info("interaction filter (>= %d) kept %d of %d ratings after %d rounds",
             threshold, keep.sum(), len(keep), rounds)
    return _compact(ds.subset(keep))


def _compact(ds: RatingDataset) -> RatingDataset:
    u_old, users = np.unique(ds.users, return_inverse=True)
    i_old, items = np.unique(ds.items, return_inverse=True)
    return replace(
        ds,
        users=users.astype(np.int64),
        items=items.astype(np.int64),
        user_ids=[ds.user_ids[k] for k in u_old],
        item_ids=[ds.item_ids[k] for k in i_old],
    )


def kfold_split(n, k: int = 5, seed=None) -> np.ndarray:
    """Random fold label in ``0..k-1`` for each of ``n`` ratings.

    Fold sizes differ by at most one.  ``n`` may also be a dataset.
    """
    if k < 2:
        raise ValueError(f"k must be at least 2, got {k}")
    if not isinstance(n, (int, np.integer)):
        n = len(n)
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.empty(n, dtype=np.int64)
    folds[perm] = np.arange(n) % k
    return folds


# -- manifest & prepared datasets ---------------------------------------------

@dataclass
class DatasetManifest:
    """Plain-text ``key=value`` description of a raw dataset."""

    ratings: Path
    social: Path | None = None
    delimiter: str | None = None
    rating_min: float | None = None
    rating_max: float | None = None
    threshold: int = 0
    seed: int = 0
    folds: int = 5
    name: str = "dataset"
    extra: dict = field(default_factory=dict)

    @property
    def scale(self):
        if self.rating_min is None or self.rating_max is None:
            return None
        return (self.rating_min, self.rating_max)


_DELIMS = {"auto": None, "whitespace": None, "comma": ",", "tab": "\t", "space": " "}


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    kv = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ParseError(path, lineno, "expected key=value")
        kv[key.strip()] = value.strip()
    if "ratings" not in kv:
        raise DataError(f"{path}: manifest needs a 'ratings' entry")
    base = path.parent

    def p(v):
        q = Path(v)
        return q if q.is_absolute() else base / q

    delim = kv.pop("delimiter", "auto")
    m = DatasetManifest(
        ratings=p(kv.pop("ratings")),
        social=p(kv.pop("social")) if "social" in kv else None,
        delimiter=_DELIMS.get(delim, delim),
        rating_min=float(kv.pop("rating_min")) if "rating_min" in kv else None,
        rating_max=float(kv.pop("rating_max")) if "rating_max" in kv else None,
        threshold=int(kv.pop("threshold", 0)),
        seed=int(kv.pop("seed", 0)),
        folds=int(kv.pop("folds", 5)),
        name=kv.pop("name", path.stem),
    )
    m.extra = kv
    return m


def prepare_dataset(manifest: DatasetManifest) -> tuple[RatingDataset, SocialGraph | None, dict]:
    """Load, filter, split and attach the social graph.

    Filtering happens before the social edges are restricted to the
    surviving users.  Returns the dataset (with folds), the graph and a
    statistics dict in the layout of a dataset summary table.
    """
    ds = load_ratings(manifest.ratings, manifest.delimiter, manifest.scale)
    raw_counts = (ds.n_users, ds.n_items, ds.n_ratings)
    if manifest.threshold > 0:
        ds = filter_min_interactions(ds, manifest.threshold)
    ds.folds = kfold_split(ds.n_ratings, manifest.folds, manifest.seed)
    graph = None
    if manifest.social is not None:
        graph = load_social(manifest.social, ds.user_map, manifest.delimiter)
    stats = {
        "dataset": manifest.name,
        "users": ds.n_users,
        "items": ds.n_items,
        "ratings": ds.n_ratings,
        "social": graph.raw_relations if graph is not None else 0,
        "social_edges_kept": graph.n_edges if graph is not None else 0,
        "raw_users": raw_counts[0],
        "raw_items": raw_counts[1],
        "raw_ratings": raw_counts[2],
        "duplicates": ds.duplicates,
        "density": ds.n_ratings / (ds.n_users * ds.n_items),
    }
    return ds, graph, stats


def write_prepared(out_dir, ds: RatingDataset, graph: SocialGraph | None, stats: dict) -> Path:
    """Write ``ratings.csv`` (user,item,rating,fold), ``social.csv`` and id maps."""
    import json

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    folds = ds.folds if ds.folds is not None else np.full(ds.n_ratings, -1)
    with open(out / "ratings.csv", "w") as fh:
        fh.write("user,item,rating,fold\n")
        for u, i, r, f in zip(ds.users, ds.items, ds.ratings, folds):
            fh.write(f"{u},{i},{float(r)!r},{f}\n")
    with open(out / "users.txt", "w") as fh:
        fh.writelines(f"{u}\n" for u in ds.user_ids)
    with open(out / "items.txt", "w") as fh:
        fh.writelines(f"{i}\n" for i in ds.item_ids)
    if graph is not None:
        coo = sp.triu(graph.matrix, k=1).tocoo()
        with open(out / "social.csv", "w") as fh:
            fh.write("user,friend,weight\n")
            for a, b, w in zip(coo.row, coo.col, coo.data):
                fh.write(f"{a},{b},{float(w)!r}\n")
    (out / "stats.json").write_text(json.dumps(stats, indent=2) + "\n")
    return out


def read_prepared(prep_dir, with_ratings: bool = True, with_social: bool = True):
    """Inverse of :func:`write_prepared`: ``(dataset or None, graph or None, stats)``."""
    import json

    prep = Path(prep_dir)
    stats = json.loads((prep / "stats.json").read_text())
    user_ids = (prep / "users.txt").read_text().splitlines()
    ds = graph = None
    if with_ratings:
        arr = np.loadtxt(prep / "ratings.csv", delimiter=",", skiprows=1, ndmin=2)
        ds = RatingDataset(
            arr[:, 0].astype(np.int64),
            arr[:, 1].astype(np.int64),
            arr[:, 2],
            user_ids,
            (prep / "items.txt").read_text().splitlines(),
            folds=arr[:, 3].astype(np.int64),
        )
    if with_social and (prep / "social.csv").exists():
        arr = np.loadtxt(prep / "social.csv", delimiter=",", skiprows=1, ndmin=2)
        graph = SocialGraph.from_edges(len(user_ids), arr[:, :2].astype(np.int64), arr[:, 2])
        graph.raw_relations = stats.get("social", graph.raw_relations)
    return ds, graph, stats
