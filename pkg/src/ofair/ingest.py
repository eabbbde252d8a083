"""Raw data to catalog inputs: feature categorisation, PFR, pseudo-items, synthetic data."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import squareform
from sklearn.metrics import silhouette_score

from .catalog import Interaction, Interactions, ItemCatalog

log = logging.getLogger(__name__)

RULE_KINDS = ("mean", "threshold", "quantile", "categorical")


class IngestError(ValueError):
    pass


@dataclass(frozen=True)
class CategorizationRule:
    """How one raw column becomes one categorical feature.

    kinds:
      mean         value > mean of the reference rows -> labels[1], else labels[0]
      threshold    value >= threshold -> labels[1], else labels[0]
      quantile     equal-sized buckets from reference quantiles, labelled q01, q02, ...
      categorical  the value itself; ``sep`` splits multi-valued cells
    """

    source: str
    kind: str
    output: str | None = None
    threshold: float | None = None
    buckets: int | None = None
    labels: tuple[str, str] = ("low", "high")
    sep: str | None = None

    def __post_init__(self):
        if self.kind not in RULE_KINDS:
            raise IngestError(f"rule for {self.source!r}: unknown kind {self.kind!r}")
        if self.kind == "threshold" and (self.threshold is None or not np.isfinite(self.threshold)):
            raise IngestError(f"rule for {self.source!r}: threshold must be finite")
        if self.kind == "quantile" and (self.buckets is None or self.buckets < 2):
            raise IngestError(f"rule for {self.source!r}: need at least 2 buckets")

    @property
    def feature(self) -> str:
        return self.output or self.source


def quantile_edges(values: np.ndarray, buckets: int, column: str) -> np.ndarray:
    edges = np.quantile(np.asarray(values, dtype=float), np.linspace(0.0, 1.0, buckets + 1))
    if np.any(np.diff(edges) <= 0):
        raise IngestError(f"column {column!r} cannot be split into {buckets} equal-sized buckets")
    return edges


def categorize(table: pd.DataFrame, rules: Sequence[CategorizationRule], id_column: str = "item_id",
               reference: pd.Series | None = None) -> dict[str, dict[str, set]]:
    """Apply ``rules`` row by row, returning ``item id -> feature -> values``.

    Means and quantile edges come from the rows selected by the boolean
    ``reference`` mask (typically the items seen in training), or from all
    rows when it is omitted.
    """
    if id_column not in table.columns:
        raise IngestError(f"missing column {id_column!r}")
    ref = table if reference is None else table[reference.to_numpy(dtype=bool)]
    out: dict[str, dict[str, set]] = {str(i): {} for i in table[id_column]}
    if len(out) != len(table):
        raise IngestError(f"duplicate ids in column {id_column!r}")
    for rule in rules:
        if rule.source not in table.columns:
            raise IngestError(f"missing column {rule.source!r}")
        col = table[rule.source]
        if rule.kind == "categorical":
            labels = [_split_cell(v, rule.sep) for v in col]
        else:
            x = pd.to_numeric(col, errors="raise").to_numpy(dtype=float)
            ref_x = pd.to_numeric(ref[rule.source], errors="raise").to_numpy(dtype=float)
            if rule.kind == "mean":
                cut = ref_x.mean()
                labels = [{rule.labels[1] if v > cut else rule.labels[0]} for v in x]
            elif rule.kind == "threshold":
                labels = [{rule.labels[1] if v >= rule.threshold else rule.labels[0]} for v in x]
            else:
                edges = quantile_edges(ref_x, rule.buckets, rule.source)
                width = len(str(rule.buckets))
                # right-closed buckets; values outside the reference range clamp to the ends
                idx = np.clip(np.searchsorted(edges[1:-1], x, side="left"), 0, rule.buckets - 1)
                labels = [{f"q{n + 1:0{width}d}"} for n in idx]
        for item_id, values in zip(out, labels):
            if not values:
                raise IngestError(f"item {item_id!r} has no value in column {rule.source!r}")
            out[item_id][rule.feature] = values
    return out


def _split_cell(value, sep) -> set:
    if isinstance(value, (list, tuple, set, frozenset)):
        return {str(v) for v in value}
    text = str(value)
    if sep is None:
        return {text}
    return {part.strip() for part in text.split(sep) if part.strip()}


def pfr(days_to_fund: float) -> float:
    """Percentage funding rate: share of the loan raised per day, in percent."""
    if not days_to_fund > 0:
        raise IngestError("days to fund must be positive")
    return 100.0 / days_to_fund


# -- pseudo-items ----------------------------------------------------------


@dataclass(frozen=True)
class PseudoItemConfig:
    features: tuple[str, ...]
    cluster_counts: tuple[int, ...] = (2, 3, 4, 5, 6, 8, 10)
    linkage: str = "average"
    core: int = 10

    def __post_init__(self):
        if self.core < 1:
            raise IngestError("k-core threshold must be at least 1")
        if not self.cluster_counts:
            raise IngestError("need at least one candidate cluster count")
        if not self.features:
            raise IngestError("need at least one clustering feature")


@dataclass
class PseudoItemResult:
    raw_items: dict[str, dict[str, set]]
    interactions: Interactions
    assignment: dict[str, str]     # original item -> pseudo-item
    n_clusters: int
    silhouette: float
    silhouettes: dict = field(default_factory=dict)


def matching_distance(raw_items: Mapping[str, Mapping[str, set]], ids: Sequence[str], features: Sequence[str]) -> np.ndarray:
    """Square matrix of the fraction of features on which two items differ."""
    codes = np.empty((len(ids), len(features)), dtype=np.int64)
    for j, feat in enumerate(features):
        seen: dict = {}
        for n, iid in enumerate(ids):
            key = frozenset(raw_items[iid][feat])
            codes[n, j] = seen.setdefault(key, len(seen))
    dist = np.zeros((len(ids), len(ids)))
    for j in range(len(features)):
        dist += codes[:, j][:, None] != codes[:, j][None, :]
    return dist / len(features)


def select_clustering(dist: np.ndarray, counts: Sequence[int], method: str = "average"):
    """Cut the dendrogram at each candidate count and keep the best mean silhouette.

    Returns (labels, n_clusters, silhouette, all silhouettes); ties keep the
    smaller cluster count.
    """
    n = dist.shape[0]
    tree = linkage(squareform(dist, checks=False), method=method)
    scores = {}
    best = None
    for c in sorted(set(counts)):
        labels = fcluster(tree, t=c, criterion="maxclust")
        found = len(np.unique(labels))
        if found < 2 or found > n - 1 or found in scores:
            continue
        s = float(silhouette_score(dist, labels, metric="precomputed"))
        scores[found] = s
        if best is None or s > best[2]:
            best = (labels, found, s)
    if best is None:
        raise IngestError("no candidate cluster count yields at least 2 clusters")
    return best[0], best[1], best[2], scores


def k_core(pairs: set[tuple[str, str]], threshold: int) -> set[tuple[str, str]]:
    """Drop users and items with fewer than ``threshold`` partners until nothing changes."""
    pairs = set(pairs)
    while True:
        users = Counter(u for u, _ in pairs)
        items = Counter(i for _, i in pairs)
        keep = {(u, i) for u, i in pairs if users[u] >= threshold and items[i] >= threshold}
        if keep == pairs:
            return pairs
        pairs = keep


def build_pseudo_items(interactions: Interactions, raw_items: Mapping[str, Mapping[str, set]],
                       config: PseudoItemConfig) -> PseudoItemResult:
    """Cluster items into pseudo-items, remap interactions onto them, then k-core.

    Interactions collapsing onto the same (user, pseudo-item) keep their mean
    rating. Split tags are dropped; split after this step.
    """
    ids = sorted(raw_items)
    if len(ids) < 2:
        raise IngestError("need at least 2 items to cluster")
    for feat in config.features:
        for iid in ids:
            if feat not in raw_items[iid]:
                raise IngestError(f"item {iid!r} is missing clustering feature {feat!r}")
    dist = matching_distance(raw_items, ids, config.features)
    labels, n_clusters, sil, sils = select_clustering(dist, config.cluster_counts, config.linkage)
    log.info("pseudo-items: %d clusters, silhouette %.3f", n_clusters, sil)

    members: dict[int, list[str]] = {}
    for iid, lab in zip(ids, labels):
        members.setdefault(int(lab), []).append(iid)
    # name clusters by their smallest member id so labels are stable
    ordered = sorted(members.values(), key=lambda m: m[0])
    width = len(str(len(ordered)))
    assignment = {}
    pseudo_raw: dict[str, dict[str, set]] = {}
    all_features = sorted({f for iid in ids for f in raw_items[iid]})
    for n, group in enumerate(ordered):
        pid = f"p{n:0{width}d}"
        for iid in group:
            assignment[iid] = pid
        feats = {}
        for feat in all_features:
            counts = Counter(v for iid in group for v in raw_items[iid].get(feat, ()))
            top = max(counts.values())
            feats[feat] = {min(v for v, c in counts.items() if c == top)}
        pseudo_raw[pid] = feats

    ratings: dict[tuple[str, str], list[float]] = {}
    for r in interactions:
        if r.item not in assignment:
            raise IngestError(f"interaction references unknown item {r.item!r}")
        ratings.setdefault((r.user, assignment[r.item]), []).append(r.rating)
    kept = k_core(set(ratings), config.core)
    if not kept:
        users = len({u for u, _ in ratings})
        raise IngestError(
            f"{config.core}-core removed every interaction "
            f"(before filtering: {users} users, {len(pseudo_raw)} pseudo-items, {len(ratings)} pairs)"
        )
    kept_items = {i for _, i in kept}
    rows = [Interaction(u, i, float(np.mean(ratings[(u, i)]))) for u, i in sorted(kept)]
    return PseudoItemResult(
        {pid: f for pid, f in pseudo_raw.items() if pid in kept_items},
        Interactions(rows),
        assignment,
        n_clusters,
        sil,
        sils,
    )


# -- synthetic data --------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Seeded synthetic catalogue and interactions.

    Unprotected values of a feature appear with Zipf weights
    ``1 / rank**value_skew`` (0 gives uniform). ``concentration`` controls how
    peaked each user's per-feature preference is: a number applies to every
    (user, feature), a pair (low, high) draws each one log-uniformly from that
    range, and ``inf`` makes every user single-valued on every feature.
    """

    n_users: int = 1000
    n_items: int = 2000
    features: Mapping[str, int] = field(default_factory=lambda: {"region": 6, "sector": 8, "gender": 2, "amount": 5})
    protected: Sequence[tuple[str, str]] = (("region", "region_5"), ("sector", "sector_6"), ("sector", "sector_7"))
    prevalence: float = 0.1
    concentration: float | tuple[float, float] = (0.3, 30.0)
    density: float = 0.02
    value_skew: float = 0.0
    popularity_sigma: float = 1.0
    min_profile: int = 5
    seed: int = 0


def synth_values(name: str, cardinality: int) -> list[str]:
    width = len(str(cardinality - 1))
    return [f"{name}_{n:0{width}d}" for n in range(cardinality)]


def synth_dataset(spec: SynthSpec) -> tuple[ItemCatalog, Interactions]:
    """Draw items, user preferences and profiles from ``spec``.

    Each item is protected with probability ``prevalence``; a protected item
    holds one protected value on one protected feature. Users pick items with
    probability proportional to the product of their per-feature value
    preferences and a global item popularity.
    """
    if spec.n_users < 1 or spec.n_items < 2:
        raise IngestError("need at least one user and two items")
    if not 0 < spec.prevalence < 1:
        raise IngestError("prevalence must lie in (0, 1)")
    if not 0 < spec.density <= 1:
        raise IngestError("density must lie in (0, 1]")
    rng = np.random.default_rng(spec.seed)
    names = sorted(spec.features)
    values = {n: synth_values(n, spec.features[n]) for n in names}
    protected: dict[str, list[str]] = {}
    for feat, val in spec.protected:
        if feat not in values or val not in values[feat]:
            raise IngestError(f"protected value {feat}={val} is not in the synthetic schema")
        protected.setdefault(feat, []).append(val)
    for feat, vals in protected.items():
        if len(vals) >= len(values[feat]):
            raise IngestError(f"feature {feat!r} needs at least one unprotected value")
    pfeats = sorted(protected)

    # items: codes[i, j] is the value index of item i on feature names[j]
    codes = np.empty((spec.n_items, len(names)), dtype=np.int64)
    is_prot = rng.random(spec.n_items) < spec.prevalence
    for j, name in enumerate(names):
        allowed = [n for n, v in enumerate(values[name]) if v not in protected.get(name, [])]
        weights = 1.0 / np.arange(1, len(allowed) + 1) ** spec.value_skew
        codes[:, j] = rng.choice(allowed, size=spec.n_items, p=weights / weights.sum())
    if pfeats:
        which = rng.integers(len(pfeats), size=spec.n_items)
        for n in np.flatnonzero(is_prot):
            feat = pfeats[which[n]]
            val = protected[feat][rng.integers(len(protected[feat]))]
            codes[n, names.index(feat)] = values[feat].index(val)
    popularity = rng.lognormal(0.0, spec.popularity_sigma, size=spec.n_items)

    width = len(str(spec.n_items - 1))
    item_ids = [f"i{n:0{width}d}" for n in range(spec.n_items)]
    raw = {iid: {name: {values[name][codes[n, j]]} for j, name in enumerate(names)} for n, iid in enumerate(item_ids)}
    catalog = ItemCatalog.from_raw(raw)

    uwidth = len(str(spec.n_users - 1))
    rows = []
    log_pop = np.log(popularity)
    for u in range(spec.n_users):
        user = f"u{u:0{uwidth}d}"
        logw = log_pop.copy()
        for j, name in enumerate(names):
            beta = _draw_concentration(spec.concentration, rng)
            pref = _preference(rng.standard_normal(len(values[name])), beta)
            with np.errstate(divide="ignore"):
                logw += np.log(pref)[codes[:, j]]
        size = max(spec.min_profile, int(rng.binomial(spec.n_items, spec.density)))
        feasible = int(np.isfinite(logw).sum())
        if size > feasible:
            raise IngestError(
                f"density infeasible: user {user} needs {size} items but only {feasible} match its preferences"
            )
        # Gumbel top-k: sampling without replacement proportional to exp(logw)
        keys = logw + rng.gumbel(size=spec.n_items)
        chosen = np.argsort(-keys, kind="stable")[:size]
        affinity = logw[chosen] - logw[chosen].max()
        ratings = np.clip(np.round(5.0 + affinity + rng.normal(0.0, 0.5, size=size)), 1, 5)
        rows.extend(Interaction(user, item_ids[i], float(r)) for i, r in zip(sorted(chosen), ratings[np.argsort(chosen)]))
    return catalog, Interactions(rows, catalog)


def _draw_concentration(conc, rng) -> float:
    if isinstance(conc, (tuple, list)):
        lo, hi = conc
        return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    return float(conc)


def _preference(scores: np.ndarray, beta: float) -> np.ndarray:
    if np.isinf(beta):
        p = np.zeros_like(scores)
        p[int(np.argmax(scores))] = 1.0
        return p
    w = np.exp(beta * (scores - scores.max()))
    return w / w.sum()
