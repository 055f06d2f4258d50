"""Interaction logs, chronological splitting and base embeddings.

File formats (UTF-8, tab separated, ids are opaque strings)::

    interactions   user_id <TAB> item_id <TAB> timestamp
    catalog        item_id <TAB> title <TAB> brand <TAB> category
    embeddings     item_id <TAB> v_1,...,v_D
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.linalg import svds

from .exceptions import EmptyInputError, MissingItemsError, ParseError, SplitError

logger = logging.getLogger(__name__)

UNKNOWN = "unknown"

# dense SVD above this many cells gets too slow/large; switch to sparse svds
_DENSE_SVD_LIMIT = 4_000_000


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int


@dataclass(frozen=True)
class CatalogEntry:
    item_id: str
    title: str = UNKNOWN
    brand: str = UNKNOWN
    category: str = UNKNOWN


@dataclass(frozen=True)
class InteractionDataset:
    interactions: tuple[Interaction, ...]
    catalog: dict[str, CatalogEntry]
    users: tuple[str, ...]
    items: tuple[str, ...]

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def categories(self) -> tuple[str, ...]:
        return tuple(sorted({self.catalog[i].category for i in self.items}))

    @property
    def brands(self) -> tuple[str, ...]:
        return tuple(sorted({self.catalog[i].brand for i in self.items}))


@dataclass(frozen=True)
class Example:
    user_id: str
    history: tuple[str, ...]
    target: str


@dataclass(frozen=True)
class SplitDataset:
    train: tuple[Example, ...]
    valid: tuple[Example, ...]
    test: tuple[Example, ...]
    max_len: int
    thresholds: tuple[float, float]
    users: tuple[str, ...]
    items: tuple[str, ...]
    catalog: dict[str, CatalogEntry]
    # full chronological train-era sequence per retained user
    train_sequences: dict[str, tuple[str, ...]]
    dropped: dict[str, int] = field(default_factory=dict)

    @property
    def train_items(self) -> frozenset[str]:
        return frozenset(i for seq in self.train_sequences.values() for i in seq)

    def examples(self, split: str) -> tuple[Example, ...]:
        if split not in ("train", "valid", "test"):
            raise ValueError(f"unknown split {split!r}")
        return getattr(self, split)


@dataclass(frozen=True)
class EmbeddingBase:
    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]
    user_vectors: np.ndarray
    item_vectors: np.ndarray

    @property
    def D(self) -> int:
        return self.item_vectors.shape[1]

    def item_index(self) -> dict[str, int]:
        return {item: j for j, item in enumerate(self.item_ids)}

    def user_index(self) -> dict[str, int]:
        return {user: i for i, user in enumerate(self.user_ids)}


def _read_rows(path, n_fields):
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != n_fields:
                raise ParseError(path, lineno, f"expected {n_fields} tab-separated fields, got {len(parts)}")
            yield lineno, parts


def load_catalog(path) -> dict[str, CatalogEntry]:
    catalog = {}
    for lineno, (item, title, brand, category) in _read_rows(path, 4):
        if item in catalog:
            raise ParseError(path, lineno, f"duplicate item id {item!r}")
        catalog[item] = CatalogEntry(item, title, brand or UNKNOWN, category or UNKNOWN)
    return catalog


def load_dataset(interactions_path, catalog_path=None) -> InteractionDataset:
    """Read an interaction log and (optionally) an item catalog.

    Duplicate ``(user, item, timestamp)`` triples are kept once; events are
    sorted by timestamp with input order breaking ties. Items absent from the
    catalog get ``"unknown"`` labels.
    """
    seen = set()
    events = []
    for lineno, (user, item, ts) in _read_rows(interactions_path, 3):
        try:
            ts = int(ts)
        except ValueError:
            raise ParseError(interactions_path, lineno, f"timestamp {ts!r} is not an integer") from None
        key = (user, item, ts)
        if key in seen:
            continue
        seen.add(key)
        events.append(Interaction(user, item, ts))
    if not events:
        raise EmptyInputError(f"no interactions in {interactions_path}")
    catalog = load_catalog(catalog_path) if catalog_path is not None else {}
    return make_dataset(events, catalog)


def make_dataset(events, catalog=None) -> InteractionDataset:
    events = sorted(events, key=lambda e: e.timestamp)  # stable
    if not events:
        raise EmptyInputError("no interactions")
    catalog = dict(catalog or {})
    users = tuple(dict.fromkeys(e.user_id for e in events))
    items = tuple(dict.fromkeys(e.item_id for e in events))
    for item in items:
        if item not in catalog:
            catalog[item] = CatalogEntry(item)
    return InteractionDataset(tuple(events), catalog, users, items)


def write_dataset(ds: InteractionDataset, interactions_path, catalog_path) -> None:
    with Path(interactions_path).open("w", encoding="utf-8") as fh:
        for e in ds.interactions:
            fh.write(f"{e.user_id}\t{e.item_id}\t{e.timestamp}\n")
    with Path(catalog_path).open("w", encoding="utf-8") as fh:
        for item in ds.items:
            c = ds.catalog[item]
            fh.write(f"{c.item_id}\t{c.title}\t{c.brand}\t{c.category}\n")


def split_by_timepoint(ds: InteractionDataset, q1: float = 0.90, q2: float = 0.95,
                       max_len: int = 20) -> SplitDataset:
    """Chronological split at global timestamp percentiles.

    Events with ``t <= t(q1)`` are train era, ``(t(q1), t(q2)]`` validation
    era and the rest test era. Every train-era event after a user's first one
    becomes a training example; validation/test examples use the user's first
    event of that era as target and the latest ``max_len`` train-era items as
    history. Targets never seen in the train era are dropped and counted.
    """
    if not 0.0 < q1 < q2 < 1.0:
        raise ValueError(f"need 0 < q1 < q2 < 1, got q1={q1}, q2={q2}")
    if max_len < 1:
        raise ValueError("max_len must be positive")

    ts = np.array([e.timestamp for e in ds.interactions], dtype=np.float64)
    t1, t2 = (float(v) for v in np.quantile(ts, [q1, q2]))

    train_seq: dict[str, list[str]] = {}
    first_valid: dict[str, str] = {}
    first_test: dict[str, str] = {}
    n_era = [0, 0, 0]
    for e in ds.interactions:
        if e.timestamp <= t1:
            train_seq.setdefault(e.user_id, []).append(e.item_id)
            n_era[0] += 1
        elif e.timestamp <= t2:
            first_valid.setdefault(e.user_id, e.item_id)
            n_era[1] += 1
        else:
            first_test.setdefault(e.user_id, e.item_id)
            n_era[2] += 1
    if min(n_era) == 0:
        raise SplitError(
            f"empty split segment: train/valid/test event counts {n_era} at "
            f"q1={q1} (t={t1:g}), q2={q2} (t={t2:g}); timestamps span "
            f"[{ts.min():g}, {ts.max():g}] over {len(ts)} events")

    dropped = {"short_users": 0, "valid_unseen_target": 0, "test_unseen_target": 0,
               "valid_no_history": 0, "test_no_history": 0}
    kept = {}
    for user, seq in train_seq.items():
        if len(seq) < 2:
            dropped["short_users"] += 1
        else:
            kept[user] = tuple(seq)

    train = []
    for user, seq in kept.items():
        for i in range(1, len(seq)):
            train.append(Example(user, seq[max(0, i - max_len):i], seq[i]))
    vocab = {i for seq in kept.values() for i in seq}

    def held_out(firsts, name):
        out = []
        for user, target in firsts.items():
            if user not in kept:
                dropped[f"{name}_no_history"] += 1
                continue
            if target not in vocab:
                dropped[f"{name}_unseen_target"] += 1
                continue
            out.append(Example(user, kept[user][-max_len:], target))
        return tuple(out)

    valid = held_out(first_valid, "valid")
    test = held_out(first_test, "test")
    if not train or not valid or not test:
        raise SplitError(
            f"split produced train/valid/test example counts {len(train)}/{len(valid)}/{len(test)} "
            f"at q1={q1} (t={t1:g}), q2={q2} (t={t2:g}); dropped={dropped}")
    logger.info("split: %d train, %d valid, %d test examples; dropped %s",
                len(train), len(valid), len(test), dropped)
    return SplitDataset(
        train=tuple(train), valid=valid, test=test, max_len=max_len, thresholds=(t1, t2),
        users=tuple(kept), items=ds.items, catalog=ds.catalog,
        train_sequences=kept, dropped=dropped)


def truncated_svd(matrix, D: int):
    """Rank-``D`` SVD ``U diag(s) Vt`` with deterministic singular-vector signs.

    Components beyond the numerical rank are returned as zeros (with a
    warning) so the output always has exactly ``D`` columns.
    """
    n, m = matrix.shape
    if n * m <= _DENSE_SVD_LIMIT or D >= min(n, m):
        dense = matrix.toarray() if hasattr(matrix, "toarray") else np.asarray(matrix, dtype=np.float64)
        U, s, Vt = np.linalg.svd(dense, full_matrices=False)
        U, s, Vt = U[:, :D], s[:D], Vt[:D]
    else:
        U, s, Vt = svds(csr_matrix(matrix, dtype=np.float64), k=D, random_state=0)
        order = np.argsort(-s, kind="stable")
        U, s, Vt = U[:, order], s[order], Vt[order]

    tol = max(n, m) * np.finfo(np.float64).eps * (s[0] if len(s) else 0.0)
    rank = int(np.sum(s > tol))
    if rank < D:
        warnings.warn(f"requested D={D} exceeds interaction-matrix rank {rank}; "
                      f"trailing {D - rank} dimension(s) zero-padded", RuntimeWarning, stacklevel=2)
    Up = np.zeros((n, D))
    sp = np.zeros(D)
    Vp = np.zeros((D, m))
    k = min(rank, len(s))
    Up[:, :k], sp[:k], Vp[:k] = U[:, :k], s[:k], Vt[:k]
    # fix the sign ambiguity: largest-magnitude entry of each right vector is positive
    for r in range(k):
        if Vp[r, np.argmax(np.abs(Vp[r]))] < 0:
            Vp[r] *= -1
            Up[:, r] *= -1
    return Up, sp, Vp


def interaction_matrix(split: SplitDataset) -> csr_matrix:
    """Binary users x items train-era matrix, rows/cols in ``split`` order."""
    item_idx = {item: j for j, item in enumerate(split.items)}
    rows, cols = [], []
    for i, user in enumerate(split.users):
        for j in sorted({item_idx[it] for it in split.train_sequences[user]}):
            rows.append(i)
            cols.append(j)
    data = np.ones(len(rows))
    return csr_matrix((data, (rows, cols)), shape=(len(split.users), len(split.items)))


def load_embedding_file(path) -> dict[str, np.ndarray]:
    out = {}
    width = None
    for lineno, (item, values) in _read_rows(path, 2):
        try:
            vec = np.array([float(v) for v in values.split(",")], dtype=np.float64)
        except ValueError:
            raise ParseError(path, lineno, "embedding values must be comma-separated decimals") from None
        if width is None:
            width = len(vec)
        elif len(vec) != width:
            raise ParseError(path, lineno, f"expected {width} values, got {len(vec)}")
        if not np.all(np.isfinite(vec)):
            raise ParseError(path, lineno, "non-finite embedding value")
        out[item] = vec
    if not out:
        raise EmptyInputError(f"no embeddings in {path}")
    return out


def build_base_embeddings(split: SplitDataset, D: int, external=None,
                          mode: str = "replace") -> EmbeddingBase:
    """Item vectors from a truncated SVD of the train-era interaction matrix.

    Item rows are right singular directions scaled by singular values; a user
    vector is the mean of the user's train-era item vectors. ``external`` is a
    path (or ``{item_id: vector}``) whose L2-normalised vectors either
    ``"replace"`` the SVD vectors or are ``"concat"``-ed after them.
    """
    if D < 2:
        raise ValueError("D must be >= 2")
    if mode not in ("replace", "concat"):
        raise ValueError(f"mode must be 'replace' or 'concat', got {mode!r}")
    X = interaction_matrix(split)

    if external is None or mode == "concat":
        _, s, Vt = truncated_svd(X, D)
        items = (Vt * s[:, None]).T
    if external is not None:
        ext = load_embedding_file(external) if isinstance(external, (str, Path)) else external
        missing = set(split.items) - set(ext)
        if missing:
            raise MissingItemsError(missing)
        E = np.stack([np.asarray(ext[i], dtype=np.float64) for i in split.items])
        norms = np.linalg.norm(E, axis=1, keepdims=True)
        E = np.divide(E, norms, out=np.zeros_like(E), where=norms > 0)
        items = E if mode == "replace" else np.hstack([items, E])

    counts = np.asarray(X.sum(axis=1)).ravel()
    users = (X @ items) / np.maximum(counts, 1.0)[:, None]
    if not (np.all(np.isfinite(items)) and np.all(np.isfinite(users))):
        raise FloatingPointError("non-finite base embedding")
    return EmbeddingBase(split.users, split.items, users, items)
