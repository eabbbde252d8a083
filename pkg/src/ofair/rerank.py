"""Greedy re-rankers: MMR (aggregate-difference form), xQuAD, FAR, PFAR and OFAiR.

Every algorithm maps a candidate list R(u) of length k to a list S(u) of
length k' drawn from R(u), adding one item at a time. The MMR family differs
only in the weight vector handed to the weighted cosine:

    mmr            uniform weights (plain cosine)
    mmr_tolerance  the user's tolerance, expanded over the dummy space
    mmr_fairness   the protected / unprotected weights
    ofair          their product
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .baseline import CandidateList
from .catalog import ItemCatalog, ProtectedSpec, protected_mask
from .profiles import TAU_FLOOR, ToleranceProfile

ALGORITHMS = ("none", "mmr", "mmr_tolerance", "mmr_fairness", "ofair", "xquad", "far", "pfar")
MMR_FAMILY = ("mmr", "mmr_tolerance", "mmr_fairness", "ofair")
# what FAR/PFAR compare on the sensitive feature: the raw value, or protected-group membership
FAR_ASPECTS = ("value", "group")
# marginal scores this close (relative) count as tied, so float noise cannot override rank order
TIE_TOL = 1e-12


class RerankError(ValueError):
    pass


@dataclass(frozen=True)
class RerankConfig:
    algorithm: str = "none"
    lam: float = 1.0
    k_prime: int = 10
    sensitive_feature: str | None = None
    far_aspect: str | None = None  # None defers to the Reranker's setting

    def __post_init__(self):
        if self.far_aspect is not None and self.far_aspect not in FAR_ASPECTS:
            raise RerankError(f"far_aspect must be one of {', '.join(FAR_ASPECTS)}")
        if self.algorithm not in ALGORITHMS:
            raise RerankError(f"unknown algorithm {self.algorithm!r}; valid: {', '.join(ALGORITHMS)}")
        if not 0.0 <= self.lam <= 1.0:
            raise RerankError("lambda must lie in [0, 1]")
        if self.k_prime < 1:
            raise RerankError("k_prime must be at least 1")
        if self.algorithm in ("far", "pfar") and not self.sensitive_feature:
            raise RerankError(f"{self.algorithm} needs a sensitive feature")


@dataclass(frozen=True)
class RerankedList:
    user: str
    items: tuple[str, ...]
    scores: tuple[float, ...]
    algorithm: str
    lam: float

    def __len__(self):
        return len(self.items)


def wcos(b: np.ndarray, b2: np.ndarray, z: np.ndarray) -> float:
    """Weighted cosine similarity with per-coordinate weights ``z``."""
    num = float(np.sum(z * b * b2))
    den = math.sqrt(float(np.sum(z * b * b))) * math.sqrt(float(np.sum(z * b2 * b2)))
    return min(num / den, 1.0)


def wcos_matrix(B: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Pairwise weighted cosine between the rows of ``B``."""
    Bz = B * np.sqrt(z)
    Bz /= np.linalg.norm(Bz, axis=1, keepdims=True)
    return np.minimum(Bz @ Bz.T, 1.0)


def score_mmr(rec: float, v, selected: Sequence, lam: float, similarity: Callable) -> float:
    """lam * rec - (1 - lam) * sum of similarities to the items already selected."""
    penalty = sum(similarity(v, s) for s in selected)
    return lam * rec - (1.0 - lam) * penalty


def score_ofair(rec: float, b: np.ndarray, selected: Sequence[np.ndarray], lam: float, z: np.ndarray) -> float:
    return score_mmr(rec, b, selected, lam, lambda x, y: wcos(x, y, z))


def score_xquad(rec: float, aspects: set, selected: Sequence[set], lam: float) -> float:
    """Boost by (1 - lam) when the item brings an aspect no selected item has."""
    covered = set().union(*selected) if selected else set()
    novelty = 1.0 if not set(aspects) <= covered else 0.0
    return lam * rec + (1.0 - lam) * novelty


def score_far_pfar(rec: float, value, selected_values: Sequence, lam: float, tau: float | None = None) -> float:
    """FAR when ``tau`` is None, PFAR otherwise (boost scaled by the user's tolerance)."""
    t = 1.0 if tau is None else tau
    novelty = 1.0 if all(value != s for s in selected_values) else 0.0
    return lam * rec + (1.0 - lam) * t * novelty


def greedy_rerank(candidates: CandidateList, scorer: Callable, k_prime: int, algorithm="custom", lam=float("nan")) -> RerankedList:
    """Build S one item at a time, taking the best marginal score each step.

    ``scorer(selected)`` receives the candidate positions picked so far and
    returns a score for every candidate position. Ties, up to a relative
    ``TIE_TOL``, go to the earlier candidate position, i.e. the better
    original rank.
    """
    if k_prime < 1:
        raise RerankError("k_prime must be at least 1")
    n = len(candidates)
    available = np.ones(n, dtype=bool)
    selected: list[int] = []
    picked_scores: list[float] = []
    for _ in range(min(k_prime, n)):
        scores = np.where(available, np.asarray(scorer(selected), dtype=float), -np.inf)
        top = scores.max()
        best = int(np.argmax(scores >= top - TIE_TOL * max(1.0, abs(top))))
        selected.append(best)
        picked_scores.append(float(scores[best]))
        available[best] = False
    return RerankedList(
        candidates.user,
        tuple(candidates.items[p] for p in selected),
        tuple(picked_scores),
        algorithm,
        lam,
    )


class UserInstance:
    """Per-user, per-algorithm state that does not depend on lambda."""

    def __init__(self, candidates: CandidateList, algorithm: str, vectors=None, weights=None, held=None, values=None, boost=1.0):
        self.candidates = candidates
        self.algorithm = algorithm
        self.rec = np.asarray(candidates.scores, dtype=float)
        self.vectors = vectors
        self.weights = weights
        self.held = held
        self.values = values
        self.boost = boost
        self._sim = None

    @property
    def similarity(self) -> np.ndarray:
        if self._sim is None:
            self._sim = wcos_matrix(self.vectors, self.weights)
        return self._sim

    def scorer(self, lam: float) -> Callable:
        rec = lam * self.rec
        keep = 1.0 - lam
        if self.algorithm in MMR_FAMILY:
            sim = self.similarity

            def score(selected):
                if not selected:
                    return rec
                return rec - keep * sim[:, selected].sum(axis=1)

        elif self.algorithm == "xquad":
            held = self.held

            def score(selected):
                if not selected:
                    return rec + keep
                covered = held[selected].any(axis=0)
                return rec + keep * (held & ~covered).any(axis=1)

        elif self.algorithm in ("far", "pfar"):
            values, t = self.values, self.boost

            def score(selected):
                if not selected:
                    return rec + keep * t
                return rec + keep * t * ~np.isin(values, values[selected])

        else:

            def score(selected):
                return rec

        return score

    def run(self, lam: float, k_prime: int) -> RerankedList:
        if self.algorithm == "none":
            top = self.candidates.prefix(k_prime)
            return RerankedList(top.user, top.items, top.scores, "none", lam)
        return greedy_rerank(self.candidates, self.scorer(lam), k_prime, self.algorithm, lam)


class Reranker:
    """Builds per-user instances for any algorithm over one catalog.

    FAR and PFAR look at a single sensitive feature. With ``far_aspect="value"``
    every distinct value of that feature is its own aspect; with ``"group"``
    an item's aspect is whether its value is protected, so the boost lasts
    until both groups are on the list.
    """

    def __init__(
        self,
        catalog: ItemCatalog,
        spec: ProtectedSpec | None = None,
        profiles: Mapping[str, ToleranceProfile] | None = None,
        sensitive_feature: str | None = None,
        far_aspect: str = "value",
    ):
        if far_aspect not in FAR_ASPECTS:
            raise RerankError(f"far_aspect must be one of {', '.join(FAR_ASPECTS)}")
        self.catalog = catalog
        self.spec = spec
        self.mask = protected_mask(spec, catalog.schema) if spec is not None else None
        self.profiles = profiles or {}
        self.sensitive_feature = sensitive_feature
        self.far_aspect = far_aspect

    def weights(self, algorithm: str, user: str) -> np.ndarray:
        size = self.catalog.schema.size
        if algorithm == "mmr":
            return np.ones(size)
        if algorithm in ("mmr_fairness", "ofair") and self.mask is None:
            raise RerankError(f"{algorithm} needs protected weights")
        if algorithm == "mmr_fairness":
            return np.asarray(self.mask, dtype=float)
        gamma = np.maximum(self._profile(user).gamma, TAU_FLOOR)
        if algorithm == "mmr_tolerance":
            return gamma
        return gamma * self.mask

    def _profile(self, user: str) -> ToleranceProfile:
        try:
            return self.profiles[user]
        except KeyError:
            raise RerankError(f"no tolerance profile for user {user!r}") from None

    def instance(self, candidates: CandidateList, algorithm: str, sensitive_feature: str | None = None,
                 far_aspect: str | None = None) -> UserInstance:
        if algorithm not in ALGORITHMS:
            raise RerankError(f"unknown algorithm {algorithm!r}; valid: {', '.join(ALGORITHMS)}")
        if algorithm in MMR_FAMILY:
            return UserInstance(
                candidates,
                algorithm,
                vectors=self.catalog.vectors(candidates.items),
                weights=self.weights(algorithm, candidates.user),
            )
        if algorithm == "xquad":
            return UserInstance(candidates, algorithm, held=self.catalog.held(candidates.items))
        if algorithm in ("far", "pfar"):
            feat = sensitive_feature or self.sensitive_feature
            values = self.sensitive_values(candidates.items, feat, far_aspect or self.far_aspect)
            boost = 1.0
            if algorithm == "pfar":
                j = self.catalog.schema.feature_index(feat)
                boost = float(self._profile(candidates.user).tau[j])
            return UserInstance(candidates, algorithm, values=values, boost=boost)
        return UserInstance(candidates, algorithm)

    def sensitive_values(self, items: Iterable[str], feat: str | None, aspect: str = "value") -> np.ndarray:
        """The FAR/PFAR aspect of each item: a value index, or 1/0 for protected/unprotected."""
        if not feat:
            raise RerankError("far/pfar need a sensitive feature")
        if aspect == "group" and self.spec is None:
            raise RerankError("group aspects need a protected spec")
        schema = self.catalog.schema
        schema.feature(feat)
        out = []
        for iid in items:
            held = self.catalog[iid].phi[feat]
            if len(held) != 1:
                raise RerankError(f"sensitive feature {feat!r} is multi-valued for item {iid!r}")
            value = next(iter(held))
            if aspect == "group":
                out.append(int((feat, value) in self.spec.entries))
            else:
                out.append(schema.index(feat, value))
        return np.array(out, dtype=int)

    def rerank(self, candidates: CandidateList, config: RerankConfig) -> RerankedList:
        inst = self.instance(candidates, config.algorithm, config.sensitive_feature, config.far_aspect)
        return inst.run(config.lam, config.k_prime)


def write_reranked_csv(lists: Iterable[RerankedList], path, append=False) -> None:
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if not append:
            w.writerow(["user_id", "rank", "item_id", "score", "algorithm", "lambda"])
        for rl in lists:
            for rank, (item, score) in enumerate(zip(rl.items, rl.scores), start=1):
                w.writerow([rl.user, rank, item, repr(score), rl.algorithm, repr(float(rl.lam))])
