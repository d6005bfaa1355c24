"""Two-parameter CRP predictive over class counts.

The hand-derived probabilities were computed directly from the clamped
numerators (max(k_n - a, 0) for seen classes, b + a N+ for the novel slot)
over k + b; exchangeability is checked against independently permuted
sequences canonicalised back to arrival order.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowr.crp import (
    ClassCounts,
    CrpParams,
    InvalidStateError,
    instantiate,
    inverse_softplus,
    observe,
    predictive_class_probs,
    sequence_log_prob,
    softplus,
)


class TestCrpParams:
    def test_b_construction(self):
        p = CrpParams.from_b(a=0.5, b=1.0)
        np.testing.assert_allclose(p.b, 1.0, rtol=1e-12)
        np.testing.assert_allclose(softplus(p.rho), 1.5, rtol=1e-12)

    @given(a=st.floats(0.0, 0.99), rho=st.floats(-30.0, 30.0))
    def test_b_exceeds_minus_a_by_construction(self, a, rho):
        p = CrpParams(a=a, rho=rho)
        assert p.b > -p.a

    def test_discount_range(self):
        with pytest.raises(ValueError):
            CrpParams(a=1.0, rho=0.0)
        with pytest.raises(ValueError):
            CrpParams(a=-0.1, rho=0.0)

    def test_inverse_softplus_roundtrip(self):
        for y in [1e-4, 0.5, 1.5, 20.0]:
            np.testing.assert_allclose(softplus(inverse_softplus(y)), y, rtol=1e-9)
        with pytest.raises(ValueError):
            inverse_softplus(0.0)


class TestCounts:
    def test_observe_increments_by_one(self):
        c = ClassCounts(counts=[0])
        for i in range(10):
            assert c.total == i
            c = observe(c, 1)
        np.testing.assert_array_equal(c.counts, [10])

    def test_observe_range(self):
        with pytest.raises(ValueError, match="outside existing classes"):
            observe(ClassCounts(counts=[1, 2]), 3)

    def test_instantiate_appends(self):
        c = instantiate(ClassCounts(counts=[3]))
        assert c.n_classes == 2
        np.testing.assert_array_equal(c.counts, [3, 1])

    def test_counts_are_immutable_and_owned(self):
        raw = np.array([1, 2], dtype=np.int64)
        c = ClassCounts(counts=raw)
        with pytest.raises(ValueError):
            c.counts[0] = 5
        raw[0] = 5  # caller's array must stay writable
        assert c.counts[0] == 1

    def test_negative_counts_rejected(self):
        with pytest.raises(ValueError):
            ClassCounts(counts=[-1])


class TestPredictive:
    def test_hand_case(self):
        """a=0.5, b=1, counts=[3,2] -> [2.5/6, 1.5/6, 2/6]."""
        p = predictive_class_probs(ClassCounts(counts=[3, 2]), CrpParams.from_b(a=0.5, b=1.0))
        np.testing.assert_allclose(p, [2.5 / 6, 1.5 / 6, 2.0 / 6], rtol=1e-12)

    def test_one_parameter_limit(self):
        """a=0, b=1, counts=[9] -> [0.9, 0.1]."""
        p = predictive_class_probs(ClassCounts(counts=[9]), CrpParams.from_b(a=0.0, b=1.0))
        np.testing.assert_allclose(p, [0.9, 0.1], rtol=1e-12)

    def test_no_classes_is_all_novel(self):
        p = predictive_class_probs(ClassCounts.empty(), CrpParams.from_b(a=0.5, b=1.0))
        np.testing.assert_array_equal(p, [1.0])

    def test_zero_counts_with_nonpositive_b(self):
        """k=0 with b <= 0 has no mass anywhere and must signal."""
        params = CrpParams(a=0.5, rho=inverse_softplus(0.4))  # b = -0.1
        assert params.b < 0
        with pytest.raises(InvalidStateError):
            predictive_class_probs(ClassCounts.zeros(3), params)

    @given(
        counts=st.lists(st.integers(0, 40), min_size=1, max_size=12),
        a=st.floats(0.0, 0.95),
        rho=st.floats(-5.0, 5.0),
    )
    @settings(max_examples=200)
    def test_sums_to_one(self, counts, a, rho):
        """Renormalised output sums to 1 within 1e-12 and lies in [0, 1]."""
        params = CrpParams(a=a, rho=rho)
        c = ClassCounts(counts=np.array(counts))
        if c.total == 0 and params.b <= 0.0:
            return
        p = predictive_class_probs(c, params)
        assert len(p) == len(counts) + 1
        np.testing.assert_allclose(p.sum(), 1.0, rtol=0, atol=1e-12)
        assert np.all(p >= 0.0) and np.all(p <= 1.0)

    @given(
        counts=st.lists(st.integers(0, 40), min_size=1, max_size=12),
        a=st.floats(0.0, 0.95),
        rho=st.floats(-5.0, 5.0),
    )
    @settings(max_examples=100)
    def test_novel_mass_positive(self, counts, a, rho):
        """The novel slot keeps strictly positive mass whenever its
        numerator b + a N+ is positive."""
        params = CrpParams(a=a, rho=rho)
        c = ClassCounts(counts=np.array(counts))
        if c.total == 0 and params.b <= 0.0:
            return
        n_pos = int(np.count_nonzero(c.counts))
        p = predictive_class_probs(c, params)
        if params.b + params.a * n_pos > 0:
            assert p[-1] > 0.0

    def test_zero_count_classes_keep_zero_mass(self):
        p = predictive_class_probs(ClassCounts(counts=[0, 4, 0]), CrpParams.from_b(a=0.5, b=1.0))
        assert p[0] == 0.0 and p[2] == 0.0
        assert p[1] > 0.0 and p[-1] > 0.0

    def test_count_monotonicity(self):
        """Raising one class count strictly raises that class's mass and
        strictly lowers the novel slot's."""
        params = CrpParams.from_b(a=0.5, b=1.0)
        before = predictive_class_probs(ClassCounts(counts=[3, 2]), params)
        after = predictive_class_probs(ClassCounts(counts=[4, 2]), params)
        assert after[0] > before[0]
        assert after[-1] < before[-1]


def _canonical_arrival(labels):
    """Relabel a sequence to first-appearance order so a permuted partition
    is again a valid arrival sequence."""
    seen = {}
    out = []
    for y in labels:
        if y not in seen:
            seen[y] = len(seen) + 1
        out.append(seen[y])
    return out


class TestSequenceLogProb:
    def test_first_point_is_certainly_novel(self):
        assert sequence_log_prob([1], CrpParams.from_b(a=0.5, b=1.0)) == 0.0

    def test_two_point_hand_case(self):
        """[1, 1] with a=0.5, b=1: the second point lands in the one seen
        class with probability (1 - 0.5) / (1 + 1) = 0.25."""
        value = sequence_log_prob([1, 1], CrpParams.from_b(a=0.5, b=1.0))
        np.testing.assert_allclose(value, np.log(0.25), rtol=1e-12)

    def test_arrival_protocol_enforced(self):
        params = CrpParams.from_b(a=0.5, b=1.0)
        with pytest.raises(ValueError, match="arrival protocol"):
            sequence_log_prob([2], params)
        with pytest.raises(ValueError, match="arrival protocol"):
            sequence_log_prob([1, 3], params)

    @given(
        labels=st.lists(st.integers(1, 4), min_size=2, max_size=10),
        a=st.floats(0.0, 0.9),
        b=st.floats(0.1, 5.0),
        seed=st.integers(0, 10_000),
    )
    @settings(max_examples=150, deadline=None)
    def test_exchangeability(self, labels, a, b, seed):
        """Any permutation inducing the same partition has the same log
        probability within 1e-9."""
        labels = _canonical_arrival(labels)
        params = CrpParams.from_b(a=a, b=b)
        base = sequence_log_prob(labels, params)
        rng = np.random.default_rng(seed)
        perm = _canonical_arrival([labels[i] for i in rng.permutation(len(labels))])
        np.testing.assert_allclose(sequence_log_prob(perm, params), base, rtol=0, atol=1e-9)

    def test_longer_hand_case(self):
        """[1, 2, 1]: 1 * (b + a)/(1 + b) * (1 - a)/(2 + b), evaluated for
        a=0.5, b=2."""
        params = CrpParams.from_b(a=0.5, b=2.0)
        expected = np.log(2.5 / 3.0) + np.log(0.5 / 4.0)
        np.testing.assert_allclose(sequence_log_prob([1, 2, 1], params), expected, rtol=1e-12)
