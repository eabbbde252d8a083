"""Items, categorical feature schema and the smoothed dummy encoding.

Every similarity and fairness computation in the package works on the dummy
space: one coordinate per (feature, value) pair, ordered lexicographically by
feature name and then value.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

EPS = 2.2e-16

RawItems = Mapping[str, Mapping[str, Iterable[str]]]


class CatalogError(ValueError):
    pass


@dataclass(frozen=True)
class Feature:
    name: str
    values: tuple[str, ...]

    @property
    def cardinality(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple[Feature, ...]
    _index: dict = field(init=False, repr=False, compare=False)
    _offsets: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise CatalogError("feature names must be unique")
        index = {}
        offsets = []
        pos = 0
        for feat in self.features:
            if feat.cardinality < 1:
                raise CatalogError(f"feature {feat.name!r} has no values")
            if len(set(feat.values)) != len(feat.values):
                raise CatalogError(f"duplicate values in feature {feat.name!r}")
            offsets.append(pos)
            for value in feat.values:
                index[(feat.name, value)] = pos
                pos += 1
        offsets.append(pos)
        object.__setattr__(self, "_index", index)
        object.__setattr__(self, "_offsets", tuple(offsets))

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    @property
    def cardinalities(self) -> list[int]:
        return [f.cardinality for f in self.features]

    @property
    def size(self) -> int:
        """Number of dummy coordinates, the sum of all cardinalities."""
        return self._offsets[-1]

    def feature(self, name: str) -> Feature:
        for feat in self.features:
            if feat.name == name:
                return feat
        raise CatalogError(f"unknown feature {name!r}")

    def feature_index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise CatalogError(f"unknown feature {name!r}") from None

    def block(self, j: int) -> slice:
        """Slice of dummy coordinates belonging to the j-th feature."""
        return slice(self._offsets[j], self._offsets[j + 1])

    def index(self, feature: str, value: str) -> int:
        try:
            return self._index[(feature, value)]
        except KeyError:
            raise CatalogError(f"unknown value {value!r} for feature {feature!r}") from None

    def pairs(self) -> list[tuple[str, str]]:
        """(feature, value) pair for every dummy coordinate, in index order."""
        return [(f.name, v) for f in self.features for v in f.values]

    def block_ids(self) -> np.ndarray:
        """Feature index of every dummy coordinate."""
        return np.repeat(np.arange(len(self.features)), self.cardinalities)


@dataclass(frozen=True)
class Item:
    id: str
    phi: Mapping[str, frozenset]

    @classmethod
    def from_raw(cls, item_id, features: Mapping[str, Iterable[str]]) -> "Item":
        phi = {}
        for name, values in features.items():
            if isinstance(values, str):
                values = [values]
            phi[name] = frozenset(str(v) for v in values)
        return cls(str(item_id), phi)

    def pairs(self) -> set[tuple[str, str]]:
        return {(name, v) for name, values in self.phi.items() for v in values}


@dataclass(frozen=True)
class ProtectedSpec:
    """Protected (feature, value) pairs and the weights given to dummy coordinates.

    ``unprotected_weight`` defaults to ``alpha / 100``.
    """

    entries: frozenset
    alpha: float = 1.0
    unprotected_weight: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "entries", frozenset((str(f), str(v)) for f, v in self.entries))
        if not self.alpha > 0:
            raise CatalogError("alpha must be positive")
        if self.unprotected_weight is None:
            object.__setattr__(self, "unprotected_weight", self.alpha / 100.0)
        if not self.unprotected_weight > 0:
            raise CatalogError("unprotected_weight must be positive")
        if not self.unprotected_weight < self.alpha:
            raise CatalogError("unprotected_weight must be smaller than alpha")

    def validate(self, schema: FeatureSchema) -> None:
        for feature, value in self.entries:
            schema.index(feature, value)

    def features(self) -> list[str]:
        return sorted({f for f, _ in self.entries})


def build_schema(raw_items: RawItems) -> FeatureSchema:
    """Collect the union of observed values per feature, in lexicographic order."""
    if not raw_items:
        raise CatalogError("cannot build a schema from an empty item set")
    names = None
    observed: dict[str, set] = {}
    for item_id, features in raw_items.items():
        if names is None:
            names = set(features)
            observed = {n: set() for n in names}
        missing = names - set(features)
        if missing:
            raise CatalogError(f"item {item_id!r} is missing feature {sorted(missing)[0]!r}")
        extra = set(features) - names
        if extra:
            raise CatalogError(f"item {item_id!r} has unexpected feature {sorted(extra)[0]!r}")
        for name, values in features.items():
            values = [values] if isinstance(values, str) else list(values)
            if not values:
                raise CatalogError(f"item {item_id!r} has no value for feature {name!r}")
            observed[name].update(str(v) for v in values)
    return FeatureSchema(tuple(Feature(n, tuple(sorted(observed[n]))) for n in sorted(observed)))


def validate_item(item: Item, schema: FeatureSchema) -> None:
    for feat in schema.features:
        values = item.phi.get(feat.name)
        if not values:
            raise CatalogError(f"item {item.id!r} is missing feature {feat.name!r}")
        for v in values:
            schema.index(feat.name, v)


def encode_item(item: Item, schema: FeatureSchema) -> np.ndarray:
    """Smoothed binary vector: 1 where the item holds a value, ``EPS`` elsewhere."""
    validate_item(item, schema)
    b = np.full(schema.size, EPS)
    for name, values in item.phi.items():
        for v in values:
            b[schema.index(name, v)] = 1.0
    return b


def protected_mask(spec: ProtectedSpec, schema: FeatureSchema) -> np.ndarray:
    spec.validate(schema)
    mask = np.full(schema.size, float(spec.unprotected_weight))
    for feature, value in spec.entries:
        mask[schema.index(feature, value)] = spec.alpha
    return mask


def is_protected_item(item: Item, spec: ProtectedSpec) -> bool:
    return not item.pairs().isdisjoint(spec.entries)


class ItemCatalog:
    """Immutable collection of items under one schema, with cached dummy vectors."""

    def __init__(self, items: Iterable[Item], schema: FeatureSchema | None = None):
        items = sorted(items, key=lambda it: it.id)
        if schema is None:
            schema = build_schema({it.id: it.phi for it in items})
        self.schema = schema
        self.items: dict[str, Item] = {}
        for it in items:
            if it.id in self.items:
                raise CatalogError(f"duplicate item id {it.id!r}")
            self.items[it.id] = it
        self.ids = list(self.items)
        self.position = {iid: n for n, iid in enumerate(self.ids)}
        self.dummies = np.vstack([encode_item(it, schema) for it in items]) if items else np.empty((0, schema.size))
        self.dummies.setflags(write=False)

    @classmethod
    def from_raw(cls, raw_items: RawItems) -> "ItemCatalog":
        schema = build_schema(raw_items)
        return cls([Item.from_raw(i, f) for i, f in raw_items.items()], schema)

    def __len__(self):
        return len(self.items)

    def __contains__(self, item_id):
        return item_id in self.items

    def __getitem__(self, item_id) -> Item:
        return self.items[item_id]

    def vectors(self, item_ids: Iterable[str]) -> np.ndarray:
        return self.dummies[[self.position[i] for i in item_ids]]

    def held(self, item_ids: Iterable[str]) -> np.ndarray:
        """Boolean matrix marking the (feature, value) pairs each item holds."""
        return self.vectors(item_ids) == 1.0

    def protected_flags(self, spec: ProtectedSpec) -> np.ndarray:
        return np.array([is_protected_item(self.items[i], spec) for i in self.ids], dtype=bool)


@dataclass(frozen=True)
class Interaction:
    user: str
    item: str
    rating: float
    split: str | None = None


class Interactions:
    """User-item-rating triples with an optional train/test split tag."""

    def __init__(self, rows: Iterable[Interaction], catalog: ItemCatalog | None = None):
        self.rows = list(rows)
        seen = set()
        for r in self.rows:
            key = (r.split, r.user, r.item)
            if key in seen:
                raise CatalogError(f"duplicate interaction ({r.user!r}, {r.item!r}) in split {r.split!r}")
            seen.add(key)
            if catalog is not None and r.item not in catalog:
                raise CatalogError(f"interaction references unknown item {r.item!r}")

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def users(self) -> list[str]:
        return sorted({r.user for r in self.rows})

    def split(self, tag: str) -> "Interactions":
        return Interactions(r for r in self.rows if r.split == tag)

    def by_user(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for r in self.rows:
            out.setdefault(r.user, []).append(r.item)
        return out


def read_items_csv(path) -> dict[str, dict[str, set]]:
    """Read ``item_id, feature, value`` rows (one row per assignment)."""
    raw: dict[str, dict[str, set]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, delimiter=_delimiter(path))
        _require_columns(reader, ("item_id", "feature", "value"), path)
        for row in reader:
            raw.setdefault(row["item_id"], {}).setdefault(row["feature"], set()).add(row["value"])
    return raw


def write_items_csv(catalog: ItemCatalog, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=_delimiter(path))
        w.writerow(["item_id", "feature", "value"])
        for iid in catalog.ids:
            item = catalog[iid]
            for name in sorted(item.phi):
                for v in sorted(item.phi[name]):
                    w.writerow([iid, name, v])


def read_interactions_csv(path, catalog: ItemCatalog | None = None) -> Interactions:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, delimiter=_delimiter(path))
        _require_columns(reader, ("user_id", "item_id", "rating"), path)
        for n, row in enumerate(reader, start=2):
            try:
                rating = float(row["rating"])
            except ValueError:
                raise CatalogError(f"{path}:{n}: rating {row['rating']!r} is not a number") from None
            split = row.get("split") or None
            rows.append(Interaction(row["user_id"], row["item_id"], rating, split))
    return Interactions(rows, catalog)


def write_interactions_csv(interactions: Interactions, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=_delimiter(path))
        w.writerow(["user_id", "item_id", "rating", "split"])
        for r in interactions:
            w.writerow([r.user, r.item, repr(float(r.rating)), r.split or ""])


def _delimiter(path) -> str:
    return "\t" if Path(path).suffix.lower() in (".tsv", ".tab") else ","


def _require_columns(reader, columns, path):
    fields = reader.fieldnames or []
    missing = [c for c in columns if c not in fields]
    if missing:
        raise CatalogError(f"{path}: missing column(s) {', '.join(missing)}")
