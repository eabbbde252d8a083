import random

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ofair.catalog import Interaction, Interactions, ProtectedSpec
from ofair.ingest import (
    CategorizationRule,
    IngestError,
    PseudoItemConfig,
    SynthSpec,
    build_pseudo_items,
    categorize,
    k_core,
    matching_distance,
    pfr,
    select_clustering,
    synth_dataset,
)
from ofair.profiles import user_profiles


class TestCategorize:
    def test_popular(self):
        table = pd.DataFrame({"item_id": ["a", "b", "c"], "votes": [7.2, 4.0, 3.8]})
        rule = CategorizationRule("votes", "mean", "popularity", labels=("niche", "popular"))
        out = categorize(table, [rule])
        assert out["a"]["popularity"] == {"popular"}
        assert out["b"]["popularity"] == {"niche"}

    def test_old(self):
        table = pd.DataFrame({"item_id": ["a", "b", "c"], "year": [1985, 1990, 2001]})
        out = categorize(table, [CategorizationRule("year", "threshold", "era", threshold=1990, labels=("old", "new"))])
        assert [out[i]["era"] for i in "abc"] == [{"old"}, {"new"}, {"new"}]

    def test_deciles(self):
        amounts = list(range(10, 101, 10))
        table = pd.DataFrame({"item_id": [f"x{a}" for a in amounts], "amount": amounts[::-1]})
        table["item_id"] = [f"x{a}" for a in amounts[::-1]]
        out = categorize(table, [CategorizationRule("amount", "quantile", buckets=10)])
        # sort-and-slice: the n-th smallest amount lands in the n-th bucket
        for n, a in enumerate(sorted(amounts)):
            assert out[f"x{a}"]["amount"] == {f"q{n + 1:02d}"}

    def test_equal_sized_buckets(self):
        rnd = random.Random(0)
        values = list(range(1, 101))
        rnd.shuffle(values)
        table = pd.DataFrame({"item_id": [str(v) for v in values], "x": values})
        out = categorize(table, [CategorizationRule("x", "quantile", buckets=4)])
        ranked = sorted(values)
        for n in range(4):
            chunk = ranked[25 * n: 25 * (n + 1)]
            assert {next(iter(out[str(v)]["x"])) for v in chunk} == {f"q{n + 1}"}

    def test_reference_rows(self):
        table = pd.DataFrame({"item_id": ["a", "b", "c"], "v": [1.0, 3.0, 10.0]})
        out = categorize(table, [CategorizationRule("v", "mean")], reference=pd.Series([True, True, False]))
        assert out["b"]["v"] == {"high"} and out["c"]["v"] == {"high"} and out["a"]["v"] == {"low"}

    def test_categorical_multi(self):
        table = pd.DataFrame({"item_id": ["m"], "genres": ["Horror|Mystery"]})
        out = categorize(table, [CategorizationRule("genres", "categorical", sep="|")])
        assert out["m"]["genres"] == {"Horror", "Mystery"}

    def test_errors(self):
        table = pd.DataFrame({"item_id": ["a", "b"], "v": [1.0, 1.0]})
        with pytest.raises(IngestError, match="equal-sized"):
            categorize(table, [CategorizationRule("v", "quantile", buckets=2)])
        with pytest.raises(IngestError, match="missing column"):
            categorize(table, [CategorizationRule("w", "mean")])
        with pytest.raises(IngestError):
            CategorizationRule("v", "median")


class TestPfr:
    def test_values(self):
        assert pfr(4) == 25.0
        assert pfr(1) == 100.0
        assert pfr(30) == pytest.approx(100 / 30, abs=1e-9)

    def test_non_positive(self):
        with pytest.raises(IngestError):
            pfr(0)


def two_blobs(n=15, seed=0):
    rnd = random.Random(seed)
    raw = {}
    for blob in ("a", "b"):
        for k in range(n):
            feats = {}
            for f in ("f1", "f2", "f3", "f4", "f5"):
                v = blob if rnd.random() < 0.85 else rnd.choice(["c", "d"])
                feats[f] = {v}
            raw[f"{blob}{k:02d}"] = feats
    return raw


def naive_silhouette(dist, labels):
    n = len(labels)
    out = []
    for i in range(n):
        same = [dist[i][j] for j in range(n) if labels[j] == labels[i] and j != i]
        if not same:
            out.append(0.0)
            continue
        a = sum(same) / len(same)
        b = min(
            sum(dist[i][j] for j in range(n) if labels[j] == c) / sum(1 for j in range(n) if labels[j] == c)
            for c in set(labels) if c != labels[i]
        )
        out.append((b - a) / max(a, b))
    return sum(out) / n


class TestClustering:
    def test_matching_distance(self):
        raw = {"x": {"f": {"a"}, "g": {"p"}}, "y": {"f": {"a"}, "g": {"q"}}}
        np.testing.assert_array_equal(matching_distance(raw, ["x", "y"], ["f", "g"]), [[0, 0.5], [0.5, 0]])

    def test_two_blobs(self):
        raw = two_blobs()
        ids = sorted(raw)
        dist = matching_distance(raw, ids, ["f1", "f2", "f3", "f4", "f5"])
        labels, count, sil, sils = select_clustering(dist, [2, 3, 4])
        assert count == 2 and sil > 0.5
        assert len({labels[n] for n, i in enumerate(ids) if i.startswith("a")}) == 1
        for c, s in sils.items():
            from scipy.cluster.hierarchy import fcluster, linkage
            from scipy.spatial.distance import squareform
            lab = fcluster(linkage(squareform(dist), "average"), t=c, criterion="maxclust")
            assert s == pytest.approx(naive_silhouette(dist.tolist(), list(lab)), abs=1e-12)
        assert max(sils, key=lambda c: (sils[c], -c)) == 2


@st.composite
def bipartite(draw):
    edges = draw(st.sets(st.tuples(st.integers(0, 8), st.integers(0, 8)), max_size=50))
    return {(f"u{u}", f"i{i}") for u, i in edges}


class TestKCore:
    @settings(max_examples=200, deadline=None)
    @given(bipartite(), st.integers(1, 4))
    def test_fixpoint(self, pairs, k):
        kept = k_core(pairs, k)
        assert kept <= pairs
        users = {}
        items = {}
        for u, i in kept:
            users[u] = users.get(u, 0) + 1
            items[i] = items.get(i, 0) + 1
        assert all(c >= k for c in users.values()) and all(c >= k for c in items.values())
        assert k_core(kept, k) == kept

    def test_threshold_one_keeps_everything(self):
        pairs = {("u1", "a"), ("u2", "b")}
        assert k_core(pairs, 1) == pairs


class TestPseudoItems:
    def test_pipeline(self):
        raw = two_blobs(10)
        rows = [Interaction(f"u{n}", i, float(1 + (n + k) % 5)) for n in range(6) for k, i in enumerate(sorted(raw))]
        res = build_pseudo_items(Interactions(rows), raw, PseudoItemConfig(("f1", "f2", "f3", "f4", "f5"), (2, 3), core=1))
        assert res.n_clusters == 2
        assert sorted(res.raw_items) == ["p0", "p1"]
        assert res.raw_items["p0"]["f1"] == {"a"} and res.raw_items["p1"]["f1"] == {"b"}
        by_pair = {(r.user, r.item): r.rating for r in res.interactions}
        assert len(by_pair) == 12
        members = [i for i in sorted(raw) if res.assignment[i] == "p0"]
        expected = np.mean([1 + (0 + sorted(raw).index(i)) % 5 for i in members])
        assert by_pair[("u0", "p0")] == pytest.approx(expected)

    def test_core_removes_everything(self):
        raw = two_blobs(5)
        rows = [Interaction("u0", "a00", 3.0)]
        with pytest.raises(IngestError, match="before filtering"):
            build_pseudo_items(Interactions(rows), raw, PseudoItemConfig(("f1", "f2"), (2,), core=3))


class TestSynthetic:
    SMALL = dict(n_users=60, n_items=300, density=0.05)

    def test_prevalence(self):
        spec = SynthSpec(n_users=5, n_items=1000, seed=0)
        cat, _ = synth_dataset(spec)
        flags = cat.protected_flags(ProtectedSpec(set(spec.protected)))
        # counted after generation with this seed; the binomial(1000, 0.1) 4-sigma band is [62, 138]
        assert flags.sum() == 89
        assert 62 <= flags.sum() <= 138

    def test_each_protected_item_holds_one_protected_value(self):
        spec = SynthSpec(**self.SMALL, seed=1)
        cat, _ = synth_dataset(spec)
        ps = set(spec.protected)
        assert all(len(cat[i].pairs() & ps) <= 1 for i in cat.ids)

    def test_same_seed(self):
        a = synth_dataset(SynthSpec(**self.SMALL, seed=4))
        b = synth_dataset(SynthSpec(**self.SMALL, seed=4))
        assert a[0].ids == b[0].ids and (a[0].dummies == b[0].dummies).all()
        assert [(r.user, r.item, r.rating) for r in a[1]] == [(r.user, r.item, r.rating) for r in b[1]]

    def test_infinite_concentration(self):
        spec = SynthSpec(n_users=40, n_items=400, features={"a": 3, "b": 2}, protected=(("a", "a_2"),),
                         concentration=float("inf"), density=0.02, seed=2)
        cat, inter = synth_dataset(spec)
        for tp in user_profiles(inter.by_user(), cat).values():
            assert (tp.tau == 0.0).all()

    def test_mixed_entropy(self):
        cat, inter = synth_dataset(SynthSpec(**self.SMALL, seed=5))
        taus = np.array([tp.tau for tp in user_profiles(inter.by_user(), cat).values()])
        assert taus.min() < 0.5 and taus.max() > 1.5

    def test_ratings_range(self):
        _, inter = synth_dataset(SynthSpec(**self.SMALL, seed=6))
        assert {r.rating for r in inter} <= {1.0, 2.0, 3.0, 4.0, 5.0}

    def test_bad_protected_value(self):
        with pytest.raises(IngestError):
            synth_dataset(SynthSpec(**self.SMALL, protected=(("sector", "nope"),)))
