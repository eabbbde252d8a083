"""Accuracy, diversity and exposure metrics, and the fairness-at-accuracy-loss table."""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .catalog import ItemCatalog, ProtectedSpec, is_protected_item
from .profiles import entropy_bits

DEFAULT_LEVELS = (0.01, 0.02, 0.03)


class MetricsError(ValueError):
    pass


def ndcg(items: Sequence[str], relevant: set, k_prime: int) -> float:
    """Binary-relevance nDCG@k' with a log2(rank + 1) discount."""
    if k_prime < 1:
        raise MetricsError("k_prime must be at least 1")
    if not relevant:
        return 0.0
    dcg = sum(1.0 / math.log2(rank + 1) for rank, item in enumerate(items[:k_prime], start=1) if item in relevant)
    ideal = sum(1.0 / math.log2(rank + 1) for rank in range(1, min(len(relevant), k_prime) + 1))
    return dcg / ideal


def precision_recall(items: Sequence[str], relevant: set, k_prime: int) -> tuple[float, float]:
    hits = sum(1 for item in items[:k_prime] if item in relevant)
    precision = hits / k_prime
    recall = hits / len(relevant) if relevant else 0.0
    return precision, recall


def ild(items: Sequence[str], catalog: ItemCatalog) -> float:
    """Mean pairwise (1 - cosine) over the smoothed dummy vectors."""
    if len(items) < 2:
        return 0.0
    B = catalog.vectors(items)
    B = B / np.linalg.norm(B, axis=1, keepdims=True)
    dist = 1.0 - B @ B.T
    iu = np.triu_indices(len(items), k=1)
    return float(dist[iu].mean())


def list_entropy(items: Sequence[str], catalog: ItemCatalog) -> float:
    """Mean over features of the value-occurrence entropy (bits) within the list."""
    if not items:
        raise MetricsError("entropy of an empty list")
    per_feature = []
    for name in catalog.schema.names:
        counts = Counter(v for iid in items for v in catalog[iid].phi[name])
        p = np.array(list(counts.values()), dtype=float)
        per_feature.append(entropy_bits(p / p.sum()))
    return float(np.mean(per_feature))


def exposure(items: Sequence[str], catalog: ItemCatalog, spec: ProtectedSpec, k_prime: int | None = None):
    """Fraction of list slots holding protected items, overall and per protected value.

    Returns ``(scalar, per_value)`` where ``per_value`` maps every protected
    (feature, value) pair to the fraction of slots holding it.
    """
    if not items:
        raise MetricsError("exposure of an empty list")
    n = k_prime or len(items)
    flags = [is_protected_item(catalog[i], spec) for i in items]
    per_value = {}
    for pair in sorted(spec.entries):
        per_value[pair] = sum(1 for i in items if pair in catalog[i].pairs()) / n
    return sum(flags) / n, per_value


@dataclass
class MetricsRow:
    algorithm: str
    lam: float
    precision: float
    recall: float
    ndcg: float
    ild: float
    list_entropy: float
    exposure: float
    per_value_exposure: dict = field(default_factory=dict)
    users: int = 0

    CSV_FIELDS = ("algorithm", "lambda", "precision", "recall", "ndcg", "ild", "list_entropy", "exposure", "users")

    def csv_row(self) -> list:
        vals = [self.precision, self.recall, self.ndcg, self.ild, self.list_entropy, self.exposure]
        return [self.algorithm, repr(float(self.lam))] + [repr(float(v)) for v in vals] + [self.users]


def evaluate(
    lists: Mapping[str, Sequence[str]],
    test_items: Mapping[str, set],
    catalog: ItemCatalog,
    spec: ProtectedSpec,
    k_prime: int,
    algorithm: str = "",
    lam: float = float("nan"),
) -> MetricsRow:
    """Macro-average every metric over users.

    Users without test items are left out of precision, recall and nDCG;
    diversity and exposure average over every user with a non-empty list.
    Lists are processed in batches of equal length; the per-list functions
    above give the same numbers one list at a time.
    """
    acc = []
    users = [u for u in sorted(lists) if len(lists[u])]
    for user in users:
        relevant = test_items.get(user, set())
        if relevant:
            items = list(lists[user])
            p, r = precision_recall(items, relevant, k_prime)
            acc.append((p, r, ndcg(items, relevant, k_prime)))

    pairs = sorted(spec.entries)
    cols = [catalog.schema.index(f, v) for f, v in pairs]
    flags = catalog.protected_flags(spec)
    by_len: dict[int, list[str]] = {}
    for u in users:
        by_len.setdefault(len(lists[u]), []).append(u)
    ild_sum = ent_sum = exp_sum = 0.0
    value_sum = np.zeros(len(pairs))
    for length, group in by_len.items():
        idx = np.array([[catalog.position[i] for i in lists[u]] for u in group])
        d = _batch_diversity(catalog, idx)
        ild_sum += d[0]
        ent_sum += d[1]
        denom = k_prime or length
        exp_sum += flags[idx].sum(axis=1).sum() / denom
        held = catalog.dummies[idx][:, :, cols] == 1.0
        value_sum += held.sum(axis=1).sum(axis=0) / denom
    n = len(users)
    acc_mean = np.mean(acc, axis=0) if acc else np.zeros(3)
    return MetricsRow(
        algorithm,
        lam,
        float(acc_mean[0]),
        float(acc_mean[1]),
        float(acc_mean[2]),
        ild_sum / n if n else 0.0,
        ent_sum / n if n else 0.0,
        exp_sum / n if n else 0.0,
        {pair: float(v / n) if n else 0.0 for pair, v in zip(pairs, value_sum)},
        n,
    )


def _batch_diversity(catalog: ItemCatalog, idx: np.ndarray) -> tuple[float, float]:
    """Summed ILD and summed list entropy over a (users x length) index matrix."""
    n_users, length = idx.shape
    B = catalog.dummies[idx]
    if length >= 2:
        Bn = B / np.linalg.norm(B, axis=2, keepdims=True)
        gram = np.einsum("uid,ujd->uij", Bn, Bn)
        iu = np.triu_indices(length, k=1)
        ild_total = float((1.0 - gram[:, iu[0], iu[1]]).mean(axis=1).sum())
    else:
        ild_total = 0.0
    counts = (B == 1.0).sum(axis=1).astype(float)
    schema = catalog.schema
    ent = np.zeros(n_users)
    for j in range(len(schema.features)):
        c = counts[:, schema.block(j)]
        p = c / c.sum(axis=1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(p > 0, -p * np.log2(p), 0.0)
        ent += terms.sum(axis=1)
    return ild_total, float((ent / len(schema.features)).sum())


@dataclass
class TradeoffReport:
    algorithm: str
    baseline_ndcg: float
    baseline_exposure: float
    levels: tuple[float, ...]
    exposure_at: dict  # level -> interpolated exposure, or None when not reached
    rows: list = field(default_factory=list)


def interpolate_exposure(points: Sequence[tuple[float, float]], target: float) -> float | None:
    """Exposure where the piecewise-linear (nDCG, exposure) path first meets ``target``.

    ``points`` run from the baseline outwards (lambda = 1 first). Only
    adjacent points are joined; a target no segment reaches gives None.
    """
    for (n1, e1), (n2, e2) in zip(points, points[1:]):
        if target == n1:
            return e1
        if target == n2:
            return e2
        if min(n1, n2) < target < max(n1, n2):
            return e1 + (target - n1) * (e2 - e1) / (n2 - n1)
    if len(points) == 1 and points[0][0] == target:
        return points[0][1]
    return None


def tradeoff_table(
    rows: Sequence[MetricsRow],
    levels: Iterable[float] = DEFAULT_LEVELS,
    baseline: MetricsRow | None = None,
) -> TradeoffReport:
    """Interpolated exposure at fixed relative nDCG losses.

    ``rows`` must be one algorithm's sweep in strictly increasing lambda and
    include lambda = 1 unless ``baseline`` is given.
    """
    rows = list(rows)
    if len(rows) < 2:
        raise MetricsError("need at least two measured points")
    lams = [r.lam for r in rows]
    if any(b <= a for a, b in zip(lams, lams[1:])):
        raise MetricsError("rows must be in strictly increasing lambda order")
    if baseline is None:
        anchor = [r for r in rows if r.lam == 1.0]
        if not anchor:
            raise MetricsError("no baseline row (lambda = 1)")
        baseline = anchor[0]
    levels = tuple(levels)
    points = [(r.ndcg, r.exposure) for r in reversed(rows)]
    exposure_at = {lvl: interpolate_exposure(points, (1.0 - lvl) * baseline.ndcg) for lvl in levels}
    return TradeoffReport(rows[0].algorithm, baseline.ndcg, baseline.exposure, levels, exposure_at, rows)


def write_metrics_csv(rows: Iterable[MetricsRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MetricsRow.CSV_FIELDS)
        for row in rows:
            w.writerow(row.csv_row())


def write_tradeoff_csv(reports: Iterable[TradeoffReport], path) -> None:
    """One row per (algorithm, loss level); unreached levels leave exposure empty."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["algorithm", "loss_level", "target_ndcg", "exposure", "baseline_ndcg", "baseline_exposure"])
        for rep in reports:
            for lvl in rep.levels:
                e = rep.exposure_at[lvl]
                w.writerow([
                    rep.algorithm,
                    repr(float(lvl)),
                    repr((1.0 - lvl) * rep.baseline_ndcg),
                    "" if e is None else repr(float(e)),
                    repr(float(rep.baseline_ndcg)),
                    repr(float(rep.baseline_exposure)),
                ])


def write_value_exposure_csv(rows: Iterable[MetricsRow], path) -> None:
    """Long format (algorithm, lambda, feature, value, exposure), ready for heatmaps."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["algorithm", "lambda", "feature", "value", "exposure"])
        for row in rows:
            for (feature, value), e in sorted(row.per_value_exposure.items()):
                w.writerow([row.algorithm, repr(float(row.lam)), feature, value, repr(float(e))])
