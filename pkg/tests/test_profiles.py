import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ofair.catalog import ItemCatalog, ProtectedSpec, protected_mask
from ofair.profiles import (
    TAU_FLOOR,
    ProfileError,
    combine_weights,
    entropy_bits,
    feature_distribution,
    tolerance,
    user_profiles,
    write_tau_csv,
)
from ofair.rerank import wcos

LOG2_3 = 1.5849625007211563
SKEWED_BITS = 0.46899559358928117  # -(0.9 log2 0.9 + 0.1 log2 0.1), evaluated with math.log


def _profile(loans, ids=("l1", "l2", "l3")):
    return [loans[i] for i in ids]


class TestDistribution:
    def test_single_region(self, loans):
        p = feature_distribution(_profile(loans), "region", loans.schema)
        values = loans.schema.feature("region").values
        assert p[values.index("Africa")] == 1.0
        assert p.sum() == 1.0

    def test_three_sectors(self, loans):
        p = feature_distribution(_profile(loans), "sector", loans.schema)
        values = loans.schema.feature("sector").values
        for v in ("Agriculture", "Health", "Clothing"):
            assert p[values.index(v)] == pytest.approx(1 / 3, abs=1e-15)
        assert p[values.index("Education")] == 0.0

    def test_even_split(self):
        cat = ItemCatalog.from_raw({f"x{n}": {"f": {"a" if n < 2 else "b"}} for n in range(4)})
        np.testing.assert_array_equal(feature_distribution(list(cat.items.values()), "f", cat.schema), [0.5, 0.5])

    def test_multi_valued_counts_each_assignment(self):
        cat = ItemCatalog.from_raw({"m1": {"g": {"a", "b"}}, "m2": {"g": {"a"}}})
        p = feature_distribution(list(cat.items.values()), "g", cat.schema)
        np.testing.assert_allclose(p, [2 / 3, 1 / 3], atol=1e-15)

    def test_empty(self, loans):
        with pytest.raises(ProfileError):
            feature_distribution([], "region", loans.schema)


class TestTolerance:
    def test_lender_profile(self, loans):
        tp = tolerance("u1", _profile(loans), loans.schema)
        by_name = dict(zip(loans.schema.names, tp.tau))
        assert by_name["region"] == 0.0
        assert by_name["gender"] == 0.0
        assert by_name["sector"] == pytest.approx(LOG2_3, abs=1e-12)

    def test_gamma_expansion(self, loans):
        tp = tolerance("u1", _profile(loans), loans.schema)
        for j in range(len(loans.schema.features)):
            assert (tp.gamma[loans.schema.block(j)] == tp.tau[j]).all()

    def test_uniform_four(self):
        assert entropy_bits(np.full(4, 0.25)) == 2.0

    def test_skewed(self):
        assert entropy_bits(np.array([0.9, 0.1])) == pytest.approx(SKEWED_BITS, abs=1e-12)

    def test_point_mass_is_exact_zero(self):
        e = entropy_bits(np.array([0.0, 1.0, 0.0]))
        assert e == 0.0 and math.copysign(1.0, e) == 1.0

    def test_empty(self, loans):
        with pytest.raises(ProfileError):
            tolerance("u", [], loans.schema)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(0, 5), min_size=1, max_size=30))
    def test_bounds(self, codes):
        cat = ItemCatalog.from_raw({f"x{n}": {"f": {f"v{c}"}} for n, c in enumerate(codes)})
        tp = tolerance("u", list(cat.items.values()), cat.schema)
        c = cat.schema.cardinalities[0]
        assert 0.0 <= tp.tau[0] <= math.log2(c) + 1e-12
        assert (tp.tau[0] == 0.0) == (c == 1)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 5))
    def test_uniform_hits_log2_c(self, c, reps):
        cat = ItemCatalog.from_raw({f"x{v}_{r}": {"f": {f"v{v}"}} for v in range(c) for r in range(reps)})
        tau = tolerance("u", list(cat.items.values()), cat.schema).tau[0]
        assert abs(tau - math.log2(c)) <= 1e-12

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(0, 4), min_size=1, max_size=20), st.permutations(range(5)))
    def test_relabel_invariance(self, codes, perm):
        a = ItemCatalog.from_raw({f"x{n}": {"f": {f"v{c}"}} for n, c in enumerate(codes)})
        b = ItemCatalog.from_raw({f"x{n}": {"f": {f"v{perm[c]}"}} for n, c in enumerate(codes)})
        ta = tolerance("u", list(a.items.values()), a.schema).tau[0]
        tb = tolerance("u", list(b.items.values()), b.schema).tau[0]
        assert abs(ta - tb) <= 1e-12

    def test_duplicate_keeps_single_valued_zero(self, loans):
        tp = tolerance("u", _profile(loans, ("l1", "l2", "l3", "l1")), loans.schema)
        assert tp.tau[loans.schema.feature_index("region")] == 0.0


class TestCombinedWeights:
    def test_product(self, loans, loan_spec):
        tp = tolerance("u1", _profile(loans), loans.schema)
        z = combine_weights(tp, protected_mask(loan_spec, loans.schema)).z
        edu = loans.schema.index("sector", "Education")
        assert z[edu] == pytest.approx(LOG2_3, abs=1e-12)
        africa = loans.schema.index("region", "Africa")
        assert z[africa] == TAU_FLOOR * 0.01

    def test_uniform(self, loans):
        tp = tolerance("u", [loans["l1"], loans["r3"]], loans.schema)
        # every feature is split 1/1 over two values, so tau is 1 bit everywhere
        z = combine_weights(tp, np.full(loans.schema.size, 0.5)).z
        assert (z == 0.5).all()

    def test_length_mismatch(self, loans):
        tp = tolerance("u", _profile(loans), loans.schema)
        with pytest.raises(ProfileError, match="length mismatch"):
            combine_weights(tp, np.ones(3))

    def test_floor_keeps_similarity_defined(self):
        cat = ItemCatalog.from_raw({"a": {"f": {"x"}, "g": {"p"}}, "b": {"f": {"x"}, "g": {"q"}}})
        tp = tolerance("u", [cat["a"]], cat.schema)  # zero entropy everywhere
        z = combine_weights(tp, np.ones(cat.schema.size)).z
        assert (z > 0).all()
        b1, b2 = cat.vectors(["a", "b"])
        # hand value: a uniform z cancels, leaving the plain cosine of (1, e, 1, e) and (1, e, e, 1)
        e = 2.2e-16
        expected = (1 + e * e + 2 * e) / (1 + e * e + 1 + e * e)
        assert wcos(b1, b2, z) == pytest.approx(expected, abs=1e-12)

    def test_positive_for_every_synthetic_user(self):
        from ofair.ingest import SynthSpec, synth_dataset
        cat, inter = synth_dataset(SynthSpec(n_users=50, n_items=200, density=0.05, seed=3))
        spec = ProtectedSpec({("sector", "sector_7")})
        mask = protected_mask(spec, cat.schema)
        for tp in user_profiles(inter.by_user(), cat).values():
            assert (combine_weights(tp, mask).z > 0).all()


def test_tau_csv(tmp_path, loans):
    profiles = user_profiles({"u1": ["l1", "l2", "l3"]}, loans)
    path = tmp_path / "tau.csv"
    write_tau_csv(profiles, loans.schema, path)
    rows = list(csv.DictReader(open(path)))
    assert [r["feature"] for r in rows] == loans.schema.names
    assert float(rows[loans.schema.feature_index("sector")]["tau"]) == pytest.approx(LOG2_3, abs=1e-12)
