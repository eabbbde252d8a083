"""Per-user diversity tolerance and the combined dummy-space weights."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .catalog import FeatureSchema, Item, ItemCatalog

TAU_FLOOR = 1e-6


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class ToleranceProfile:
    user: str
    tau: np.ndarray    # one entropy (bits) per feature
    gamma: np.ndarray  # tau expanded over each feature's dummy block


@dataclass(frozen=True)
class CombinedWeights:
    user: str
    z: np.ndarray


def feature_distribution(profile: Iterable[Item], feature: str, schema: FeatureSchema) -> np.ndarray:
    """P(f|u) over the values of ``feature``, in schema order.

    Every (item, value) assignment counts once, so multi-valued items spread
    their mass over several values.
    """
    profile = list(profile)
    if not profile:
        raise ProfileError("empty profile")
    feat = schema.feature(feature)
    counts = Counter(v for item in profile for v in item.phi[feature])
    p = np.array([counts.get(v, 0) for v in feat.values], dtype=float)
    return p / p.sum()


def entropy_bits(p: np.ndarray) -> float:
    p = p[p > 0]
    # 0 log 0 = 0, and a point mass is exactly zero rather than -0.0
    if len(p) <= 1:
        return 0.0
    return float(-(p * np.log2(p)).sum())


def tolerance(user: str, profile: Iterable[Item], schema: FeatureSchema) -> ToleranceProfile:
    profile = list(profile)
    if not profile:
        raise ProfileError(f"empty profile for user {user!r}")
    tau = np.array([entropy_bits(feature_distribution(profile, name, schema)) for name in schema.names])
    gamma = np.repeat(tau, schema.cardinalities)
    return ToleranceProfile(user, tau, gamma)


def combine_weights(profile: ToleranceProfile, mask: np.ndarray, floor: float = TAU_FLOOR) -> CombinedWeights:
    """z = max(gamma, floor) * mask, coordinate-wise."""
    mask = np.asarray(mask, dtype=float)
    if mask.shape != profile.gamma.shape:
        raise ProfileError(f"length mismatch: gamma has {profile.gamma.size} coordinates, mask has {mask.size}")
    return CombinedWeights(profile.user, np.maximum(profile.gamma, floor) * mask)


def user_profiles(train_items: Mapping[str, list[str]], catalog: ItemCatalog) -> dict[str, ToleranceProfile]:
    """Tolerance for every user from their train-split items."""
    return {
        user: tolerance(user, [catalog[i] for i in items], catalog.schema)
        for user, items in sorted(train_items.items())
        if items
    }


def write_tau_csv(profiles: Mapping[str, ToleranceProfile], schema: FeatureSchema, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", "feature", "tau"])
        for user in sorted(profiles):
            for name, t in zip(schema.names, profiles[user].tau):
                w.writerow([user, name, repr(float(t))])
