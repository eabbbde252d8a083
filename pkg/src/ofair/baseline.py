"""Baseline candidate lists: a mask-aware NMF recommender, or external scores.

NMF minimises ``sum(M * (X - W H^T)**2)`` over non-negative W, H with the
multiplicative updates of Lee & Seung, weighted by the observation mask M.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .catalog import Interaction, Interactions

log = logging.getLogger(__name__)

# keeps multiplicative updates away from 0/0
_DENOM_EPS = 1e-12


class BaselineError(ValueError):
    pass


@dataclass(frozen=True)
class CandidateList:
    user: str
    items: tuple[str, ...]
    scores: tuple[float, ...]
    truncated: bool = False

    def __len__(self):
        return len(self.items)

    def prefix(self, n: int) -> "CandidateList":
        return CandidateList(self.user, self.items[:n], self.scores[:n], self.truncated)


def ordered(user: str, pairs: Iterable[tuple[str, float]], k: int | None = None, truncated=False) -> CandidateList:
    """Sort (item, score) pairs by score descending, then item id ascending."""
    pairs = sorted(pairs, key=lambda p: (-p[1], p[0]))
    if k is not None:
        pairs = pairs[:k]
    return CandidateList(user, tuple(p[0] for p in pairs), tuple(float(p[1]) for p in pairs), truncated)


@dataclass
class FactorModel:
    users: list[str]
    items: list[str]
    W: np.ndarray
    H: np.ndarray
    params: dict = field(default_factory=dict)
    history: list[float] = field(default_factory=list)
    seen: dict[str, frozenset] = field(default_factory=dict)

    @property
    def rank(self) -> int:
        return self.W.shape[1]

    def __post_init__(self):
        self._uidx = {u: n for n, u in enumerate(self.users)}

    def scores(self, user: str) -> np.ndarray:
        """rec(v, u) for every item, in ``self.items`` order."""
        if user not in self._uidx:
            raise BaselineError(f"unknown user {user!r}")
        return self.H @ self.W[self._uidx[user]]

    def save(self, path) -> None:
        """Checkpoint as ``.npz``: user/item id arrays, both factor matrices, and
        each user's seen items as parallel (user index, item index) arrays."""
        iidx = {i: n for n, i in enumerate(self.items)}
        su, si = [], []
        for u, items in self.seen.items():
            for i in sorted(items):
                su.append(self._uidx[u])
                si.append(iidx[i])
        np.savez(path, users=np.array(self.users), items=np.array(self.items), W=self.W, H=self.H,
                 seen_user=np.array(su, dtype=np.int64), seen_item=np.array(si, dtype=np.int64))

    @classmethod
    def load(cls, path) -> "FactorModel":
        with np.load(path) as z:
            users = [str(u) for u in z["users"]]
            items = [str(i) for i in z["items"]]
            seen: dict[str, set] = {}
            for u, i in zip(z["seen_user"], z["seen_item"]):
                seen.setdefault(users[u], set()).add(items[i])
            return cls(users, items, z["W"].copy(), z["H"].copy(),
                       seen={u: frozenset(s) for u, s in seen.items()})


def objective(X: np.ndarray, M: np.ndarray, W: np.ndarray, H: np.ndarray) -> float:
    R = M * (X - W @ H.T)
    return float((R * R).sum())


def factorize(X, M, rank, epochs=200, seed=0, tol=0.0):
    """Multiplicative-update NMF on the entries where ``M`` is 1.

    Returns (W, H, history) where history[0] is the objective at
    initialisation and history[e] the objective after epoch e.
    """
    X = np.asarray(X, dtype=float)
    M = np.asarray(M, dtype=float)
    if X.size == 0 or not M.any():
        raise BaselineError("no observed entries to factorize")
    if rank <= 0:
        raise BaselineError("rank must be positive")
    if (X[M > 0] < 0).any():
        raise BaselineError("NMF needs non-negative observations")
    rng = np.random.default_rng(seed)
    n, m = X.shape
    scale = float(X[M > 0].mean())
    # uniform on (0, 1], scaled so W H^T starts near the mean observation
    W = (1.0 - rng.random((n, rank))) * np.sqrt(scale / rank)
    H = (1.0 - rng.random((m, rank))) * np.sqrt(scale / rank)
    MX = M * X
    history = [objective(X, M, W, H)]
    for _ in range(epochs):
        W *= (MX @ H) / ((M * (W @ H.T)) @ H + _DENOM_EPS)
        H *= (MX.T @ W) / ((M * (W @ H.T)).T @ W + _DENOM_EPS)
        history.append(objective(X, M, W, H))
        if tol and history[-2] - history[-1] <= tol * history[-2]:
            break
    return W, H, history


def train(
    interactions: Interactions,
    rank: int = 20,
    epochs: int = 200,
    seed: int = 0,
    missing_as_zero: bool = False,
    items: Sequence[str] | None = None,
    tol: float = 0.0,
) -> FactorModel:
    """Fit NMF to the given (train-split) interactions.

    With ``missing_as_zero`` every unobserved cell is treated as an observed 0
    (the usual setup for top-N recommendation from implicit feedback);
    otherwise only the observed cells enter the loss.
    """
    rows = list(interactions)
    if not rows:
        raise BaselineError("empty training data")
    if rank <= 0:
        raise BaselineError("rank must be positive")
    users = sorted({r.user for r in rows})
    item_ids = sorted(set(items) if items is not None else {r.item for r in rows})
    uidx = {u: n for n, u in enumerate(users)}
    iidx = {i: n for n, i in enumerate(item_ids)}
    X = np.zeros((len(users), len(item_ids)))
    M = np.ones_like(X) if missing_as_zero else np.zeros_like(X)
    seen: dict[str, set] = {}
    for r in rows:
        if r.item not in iidx:
            raise BaselineError(f"unknown item {r.item!r}")
        X[uidx[r.user], iidx[r.item]] = r.rating
        M[uidx[r.user], iidx[r.item]] = 1.0
        seen.setdefault(r.user, set()).add(r.item)
    W, H, history = factorize(X, M, rank, epochs=epochs, seed=seed, tol=tol)
    params = dict(rank=rank, epochs=epochs, seed=seed, missing_as_zero=missing_as_zero, tol=tol)
    return FactorModel(users, item_ids, W, H, params, history, {u: frozenset(s) for u, s in seen.items()})


def top_k(model: FactorModel, user: str, k: int) -> CandidateList:
    """Highest-scoring items the user has not seen in training."""
    if k <= 0:
        raise BaselineError("k must be positive")
    scores = model.scores(user)
    seen = model.seen.get(user, frozenset())
    # items are sorted by id, so a stable sort on -score breaks ties by id
    order = np.argsort(-scores, kind="stable")
    picked = []
    for n in order:
        item = model.items[n]
        if item in seen:
            continue
        picked.append((item, float(scores[n])))
        if len(picked) == k:
            break
    truncated = len(picked) < k
    if truncated:
        log.warning("user %s has only %d unseen items (k=%d)", user, len(picked), k)
    return CandidateList(user, tuple(i for i, _ in picked), tuple(s for _, s in picked), truncated)


def all_top_k(model: FactorModel, k: int, users: Iterable[str] | None = None) -> dict[str, CandidateList]:
    users = model.users if users is None else users
    return {u: top_k(model, u, k) for u in users}


def load_scores(path, users: Iterable[str] | None = None, items: Iterable[str] | None = None) -> dict[str, CandidateList]:
    """Read ``user_id, item_id, score`` rows into sorted candidate lists.

    When ``users``/``items`` are given, ids outside them are rejected.
    """
    known_users = set(users) if users is not None else None
    known_items = set(items) if items is not None else None
    per_user: dict[str, dict[str, float]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return {}
        missing = [c for c in ("user_id", "item_id", "score") if c not in reader.fieldnames]
        if missing:
            raise BaselineError(f"{path}: missing column(s) {', '.join(missing)}")
        for n, row in enumerate(reader, start=2):
            user, item, raw = row["user_id"], row["item_id"], row["score"]
            if not user or not item or raw is None:
                raise BaselineError(f"{path}:{n}: malformed row")
            try:
                score = float(raw)
            except ValueError:
                raise BaselineError(f"{path}:{n}: score {raw!r} is not a number") from None
            if not np.isfinite(score):
                raise BaselineError(f"{path}:{n}: score must be finite")
            if known_users is not None and user not in known_users:
                raise BaselineError(f"{path}:{n}: unknown user {user!r}")
            if known_items is not None and item not in known_items:
                raise BaselineError(f"{path}:{n}: unknown item {item!r}")
            bucket = per_user.setdefault(user, {})
            if item in bucket:
                raise BaselineError(f"{path}:{n}: duplicate pair ({user!r}, {item!r})")
            bucket[item] = score
    return {u: ordered(u, per_user[u].items()) for u in sorted(per_user)}


def write_scores(lists: Mapping[str, CandidateList], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", "item_id", "score"])
        for user in sorted(lists):
            cl = lists[user]
            for item, score in zip(cl.items, cl.scores):
                w.writerow([user, item, repr(score)])


def split_interactions(interactions: Interactions, test_fraction=0.2, seed=0, per_user=False) -> Interactions:
    """Tag each interaction train/test at random.

    ``per_user`` holds out ``test_fraction`` of every user's interactions
    instead of sampling over the whole pool.
    """
    if not 0 < test_fraction < 1:
        raise BaselineError("test_fraction must lie in (0, 1)")
    rows = sorted(interactions, key=lambda r: (r.user, r.item))
    rng = np.random.default_rng(seed)
    test = np.zeros(len(rows), dtype=bool)
    if per_user:
        start = 0
        while start < len(rows):
            end = start
            while end < len(rows) and rows[end].user == rows[start].user:
                end += 1
            n_test = int(round(test_fraction * (end - start)))
            test[start + rng.permutation(end - start)[:n_test]] = True
            start = end
    else:
        n_test = int(round(test_fraction * len(rows)))
        test[rng.permutation(len(rows))[:n_test]] = True
    return Interactions(
        Interaction(r.user, r.item, r.rating, "test" if t else "train") for r, t in zip(rows, test)
    )
