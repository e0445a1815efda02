"""Closed testing of all pairwise comparisons, plus the comparator procedures."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import ndtri

from pairwise_closure.closure import (
    batch_closed_test,
    bonferroni_cut,
    bonferroni_test,
    closed_test,
    critical_values,
    gatekeeping_test,
    one_sided_closed_test,
    tukey_global_test,
    unadjusted_test,
)
from pairwise_closure.model import TrialConfig

# Frozen reference values (seed=1): one row per correlation-equivalence
# class of the 63 subsets at K=4, equal allocation.  Columns: subset size,
# lexicographically first member, number of subsets in the class, critical
# value.  Recomputing any of them from scratch must agree to the solver
# tolerance.
K4_CLASSES = [
    (1, (1,), 6, 1.959964),
    (2, (1, 2), 12, 2.212093),
    (2, (1, 6), 3, 2.236465),
    (3, (1, 2, 3), 4, 2.348956),
    (3, (1, 2, 4), 4, 2.343728),
    (3, (1, 2, 5), 12, 2.360288),
    (4, (1, 2, 3, 4), 12, 2.445255),
    (4, (1, 2, 5, 6), 3, 2.453582),
    (5, (1, 2, 3, 4, 5), 6, 2.515259),
    (6, (1, 2, 3, 4, 5, 6), 1, 2.569051),
]


class TestCriticalValueTable:
    def test_two_arm_value_is_the_normal_quantile(self):
        table = critical_values(TrialConfig.single_stage(2, 1.0, 50), 0.05)
        assert table.value([1]) == pytest.approx(1.959964, abs=1e-6)

    def test_k4_equivalence_classes(self, table_k4):
        classes = table_k4.classes()
        got = [
            (c["size"], c["representative"], c["n_subsets"], c["critical_value"])
            for c in classes
        ]
        assert [row[:3] for row in got] == [row[:3] for row in K4_CLASSES]
        for (_, _, _, value), (_, _, _, expect) in zip(got, K4_CLASSES):
            assert value == pytest.approx(expect, abs=3e-4)
        assert sum(c["n_subsets"] for c in classes) == 63

    def test_k3_has_three_classes(self, table_k3):
        classes = table_k3.classes()
        assert [(c["size"], c["n_subsets"]) for c in classes] == [
            (1, 3), (2, 3), (3, 1),
        ]

    def test_strict_consonance_k4(self, table_k4):
        entries = table_k4.entries()
        for small, c_small in entries.items():
            for big, c_big in entries.items():
                if small < big:
                    assert c_small < c_big - 1e-6

    def test_full_set_below_bonferroni_cut(self, table_k4):
        c_full = table_k4.value(table_k4.full_set())
        assert c_full < bonferroni_cut(0.05, 6) - 0.01

    def test_unequal_variances_split_the_singleton_class(self):
        cfg = TrialConfig.single_stage(3, (1.0, 2.0, 3.0), 100)
        table = critical_values(cfg, 0.05, seed=1)
        table.entries()
        assert len(table.classes()) > 3

    def test_rebuild_is_bit_identical(self, cfg_k4, table_k4):
        again = critical_values(cfg_k4, 0.05, seed=1)
        assert again.entries() == table_k4.entries()

    def test_seed_changes_values_within_tolerance(self, cfg_k4, table_k4):
        other = critical_values(cfg_k4, 0.05, seed=99)
        c1 = table_k4.value(table_k4.full_set())
        c2 = other.value(other.full_set())
        assert c1 != c2
        assert c1 == pytest.approx(c2, abs=3e-4)

    def test_subset_validation(self, table_k4):
        with pytest.raises(ValueError):
            table_k4.value([])
        with pytest.raises(ValueError):
            table_k4.value([0])
        with pytest.raises(ValueError):
            table_k4.value([7])

    def test_alpha_validation(self, cfg_k4):
        with pytest.raises(ValueError):
            critical_values(cfg_k4, 0.0)
        with pytest.raises(ValueError):
            critical_values(cfg_k4, 1.0)


class TestClosedTest:
    def test_clear_separation_k3(self, table_k3):
        decision = closed_test([5.0, 5.0, 0.1], table_k3)
        assert decision.rejected_indices() == [1, 2]
        assert decision.n_rejected == 2

    def test_nothing_crosses(self, table_k3):
        decision = closed_test([0.5, -0.3, 1.2], table_k3)
        assert decision.rejected_indices() == []

    def test_boundary_tie_does_not_reject(self, table_k3):
        c_full = table_k3.value(table_k3.full_set())
        decision = closed_test([c_full, 0.0, 0.0], table_k3)
        assert decision.rejected_indices() == []

    def test_just_above_boundary_rejects(self, table_k3):
        c_full = table_k3.value(table_k3.full_set())
        decision = closed_test([c_full + 1e-9, 0.0, 0.0], table_k3)
        assert decision.rejected_indices() == [1]

    def test_sign_is_ignored(self, table_k3):
        a = closed_test([3.0, -2.5, 0.4], table_k3)
        b = closed_test([-3.0, 2.5, -0.4], table_k3)
        assert a.rejected == b.rejected

    def test_global_decision_is_conjunction_of_local(self, table_k4):
        rng = np.random.default_rng(5)
        for _ in range(50):
            z = rng.normal(scale=1.6, size=6)
            decision = closed_test(z, table_k4)
            assert decision.local is not None
            for k in range(1, 7):
                implied = all(v for s, v in decision.local.items() if k in s)
                assert decision.rejected[k - 1] == implied

    def test_input_validation(self, table_k3):
        with pytest.raises(ValueError):
            closed_test([1.0, 2.0], table_k3)
        with pytest.raises(ValueError):
            closed_test([1.0, np.nan, 2.0], table_k3)
        with pytest.raises(ValueError):
            closed_test([1.0, 1.0, 1.0], table_k3, method="bogus")
        one_sided = critical_values(
            TrialConfig.single_stage(3, 1.0, 100, sided="one-sided"), 0.05
        )
        with pytest.raises(ValueError):
            closed_test([1.0, 1.0, 1.0], one_sided)


def _stress_vectors(rng, m: int, count: int, near: float) -> np.ndarray:
    """Mix of null draws, shifted draws, and values parked near a boundary."""
    thirds = count // 3
    blocks = [
        rng.normal(size=(thirds, m)),
        rng.normal(loc=rng.choice([-2.5, 0.0, 2.5], size=(thirds, m)), scale=1.0),
        near + rng.normal(scale=0.02, size=(count - 2 * thirds, m)),
    ]
    return np.vstack(blocks)


class TestShortcutAgainstLattice:
    def test_k3(self, table_k3):
        rng = np.random.default_rng(11)
        c_mid = table_k3.value(table_k3.full_set())
        for z in _stress_vectors(rng, 3, 400, c_mid):
            a = closed_test(z, table_k3, method="shortcut")
            b = closed_test(z, table_k3, method="lattice")
            assert a.rejected == b.rejected

    def test_k4(self, table_k4):
        rng = np.random.default_rng(12)
        c_mid = table_k4.value(table_k4.full_set())
        for z in _stress_vectors(rng, 6, 400, c_mid):
            a = closed_test(z, table_k4, method="shortcut")
            b = closed_test(z, table_k4, method="lattice")
            assert a.rejected == b.rejected

    def test_k5(self, table_k5_loose):
        rng = np.random.default_rng(13)
        table = table_k5_loose
        c_mid = table.value(table.full_set())
        for z in _stress_vectors(rng, 10, 200, c_mid):
            a = closed_test(z, table, method="shortcut")
            b = closed_test(z, table, method="lattice")
            assert a.rejected == b.rejected

    def test_batch_matches_scalar(self, table_k4):
        rng = np.random.default_rng(14)
        z = _stress_vectors(rng, 6, 300, table_k4.value(table_k4.full_set()))
        batch = batch_closed_test(np.abs(z), table_k4)
        for row, flags in zip(z, batch):
            assert closed_test(row, table_k4).rejected == tuple(flags)

    def test_batch_shape_validation(self, table_k4):
        with pytest.raises(ValueError):
            batch_closed_test(np.zeros((5, 4)), table_k4)


@pytest.fixture(scope="module")
def one_sided_k3():
    cfg = TrialConfig.single_stage(3, 1.0, 100, sided="one-sided")
    table = critical_values(cfg, 0.05, seed=1)
    table.entries()
    return table


class TestOneSided:
    def test_singleton_value(self, one_sided_k3):
        assert one_sided_k3.value([1]) == pytest.approx(ndtri(0.95), abs=1e-6)

    def test_full_set_equals_two_sided_constant(self, one_sided_k3, table_k3):
        # the full directed family contains both signs of every statistic,
        # so its maximum is the maximum absolute two-sided statistic
        c_directed = one_sided_k3.value(one_sided_k3.full_set())
        c_two_sided = table_k3.value(table_k3.full_set())
        assert c_directed == pytest.approx(c_two_sided, abs=3e-4)

    def test_at_most_one_direction_per_pair(self, one_sided_k3):
        rng = np.random.default_rng(21)
        for _ in range(100):
            z3 = rng.normal(scale=2.0, size=3)
            z6 = np.concatenate([z3, -z3])
            decision = one_sided_closed_test(z6, one_sided_k3)
            for k in range(3):
                assert not (decision.rejected[k] and decision.rejected[k + 3])

    def test_directional_decision(self, one_sided_k3):
        decision = one_sided_closed_test([2.6, 0.0, 0.0, -2.6, 0.0, 0.0], one_sided_k3)
        assert decision.rejected_indices() == [1]
        flipped = one_sided_closed_test([-2.6, 0.0, 0.0, 2.6, 0.0, 0.0], one_sided_k3)
        assert flipped.rejected_indices() == [4]

    def test_shortcut_matches_lattice(self, one_sided_k3):
        rng = np.random.default_rng(22)
        for _ in range(150):
            z3 = rng.normal(loc=rng.choice([-2.0, 0.0, 2.0], size=3))
            z6 = np.concatenate([z3, -z3])
            a = one_sided_closed_test(z6, one_sided_k3, method="shortcut")
            b = one_sided_closed_test(z6, one_sided_k3, method="lattice")
            assert a.rejected == b.rejected

    def test_requires_one_sided_table(self, table_k3):
        with pytest.raises(ValueError):
            one_sided_closed_test([1.0] * 3, table_k3)


class TestComparators:
    def test_bonferroni_cut_m6(self):
        assert bonferroni_cut(0.05, 6) == pytest.approx(2.638257, abs=1e-6)

    def test_bonferroni_single_comparison_is_unadjusted(self):
        assert bonferroni_cut(0.05, 1) == pytest.approx(1.959964, abs=1e-6)

    def test_bonferroni_decisions(self):
        decision = bonferroni_test([2.7, 2.6, -2.7, 0.0, 1.0, 2.0], 0.05)
        assert decision.rejected_indices() == [1, 3]
        assert decision.meta["cut"] == pytest.approx(2.638257, abs=1e-6)

    def test_closure_dominates_bonferroni(self, table_k4):
        rng = np.random.default_rng(31)
        z = rng.normal(loc=rng.choice([0.0, 2.8], size=(200, 6)), scale=1.0)
        for row in z:
            closed = set(closed_test(row, table_k4).rejected_indices())
            bonf = set(bonferroni_test(row, 0.05).rejected_indices())
            assert bonf <= closed

    def test_gatekeeping_natural_order(self):
        decision = gatekeeping_test([3.0, 0.1, 4.0], 0.05)
        assert decision.rejected_indices() == [1]

    def test_gatekeeping_custom_order(self):
        decision = gatekeeping_test([3.0, 0.1, 4.0], 0.05, order=[3, 1, 2])
        assert decision.rejected_indices() == [1, 3]
        assert decision.meta["order"] == [3, 1, 2]

    def test_gatekeeping_rejects_order_that_is_not_a_permutation(self):
        with pytest.raises(ValueError):
            gatekeeping_test([1.0, 2.0], 0.05, order=[1, 1])

    def test_gatekeeping_global_is_conjunction_of_local(self):
        rng = np.random.default_rng(32)
        for _ in range(50):
            z = rng.normal(scale=2.0, size=6)
            order = list(rng.permutation(np.arange(1, 7)))
            decision = gatekeeping_test(z, 0.05, order=order)
            for k in range(1, 7):
                implied = all(v for s, v in decision.local.items() if k in s)
                assert decision.rejected[k - 1] == implied

    def test_tukey_single_step(self, cfg_k4, table_k4):
        c_full = table_k4.value(table_k4.full_set())
        z = [c_full + 0.01, c_full - 0.01, 0.0, 0.0, 0.0, -(c_full + 0.2)]
        decision = tukey_global_test(z, cfg_k4, 0.05, table=table_k4)
        assert decision.rejected_indices() == [1, 6]
        assert decision.meta["cut"] == pytest.approx(c_full)

    def test_closure_dominates_tukey(self, cfg_k4, table_k4):
        rng = np.random.default_rng(33)
        z = rng.normal(loc=rng.choice([0.0, 2.8], size=(200, 6)), scale=1.0)
        for row in z:
            closed = set(closed_test(row, table_k4).rejected_indices())
            tukey = set(
                tukey_global_test(row, cfg_k4, 0.05, table=table_k4).rejected_indices()
            )
            assert tukey <= closed

    def test_tukey_equals_closure_for_two_arms(self):
        cfg = TrialConfig.single_stage(2, 1.0, 50)
        table = critical_values(cfg, 0.05)
        for z in ([2.5], [1.5], [-2.0]):
            a = tukey_global_test(z, cfg, 0.05, table=table)
            b = closed_test(z, table)
            assert a.rejected == b.rejected

    def test_tukey_requires_balanced_design(self):
        uneven_n = TrialConfig(3, (1.0, 1.0, 1.0), (0.5, 0.25, 0.25), ((50, 25, 25),))
        with pytest.raises(ValueError):
            tukey_global_test([1.0, 1.0, 1.0], uneven_n, 0.05)
        uneven_var = TrialConfig.single_stage(3, (1.0, 2.0, 1.0), 50)
        with pytest.raises(ValueError):
            tukey_global_test([1.0, 1.0, 1.0], uneven_var, 0.05)

    def test_unadjusted(self):
        decision = unadjusted_test([2.0, -2.0, 1.9], 0.05)
        assert decision.rejected_indices() == [1, 2]
        assert decision.procedure == "unadjusted"

    @given(st.lists(st.floats(-4, 4), min_size=6, max_size=6))
    @settings(max_examples=60, deadline=None)
    def test_bonferroni_never_exceeds_unadjusted(self, z):
        bonf = set(bonferroni_test(z, 0.05).rejected_indices())
        unadj = set(unadjusted_test(z, 0.05).rejected_indices())
        assert bonf <= unadj

    @given(st.lists(st.floats(-4, 4), min_size=4, max_size=4))
    @settings(max_examples=60, deadline=None)
    def test_gatekeeping_rejections_form_a_prefix(self, z):
        decision = gatekeeping_test(z, 0.05)
        flags = list(decision.rejected)
        assert flags == sorted(flags, reverse=True)
