import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lane3d_kit.anchors import (
    AnchorMetas,
    CoefficientHeadWeights,
    CoefficientMatrices,
    MetaRanges,
    PrototypeBank,
    combine_metas,
    materialize,
    pool_and_weigh,
    softmax_rows,
)
from lane3d_kit.errors import ShapeMismatch
from lane3d_kit.sampling import FeatureMap


def bank_with(xs, phi=None, theta=None):
    return PrototypeBank(
        xs=np.asarray(xs, dtype=float),
        phi=np.asarray(phi if phi is not None else [0.0], dtype=float),
        theta=np.asarray(theta if theta is not None else [0.0], dtype=float),
    )


def coeffs_with(xs_rows, m_phi=1, m_theta=1):
    xs_rows = np.asarray(xs_rows, dtype=float)
    m_a = xs_rows.shape[0]
    return CoefficientMatrices(
        xs=xs_rows,
        phi=np.full((m_a, m_phi), 1.0 / m_phi),
        theta=np.full((m_a, m_theta), 1.0 / m_theta),
    )


def test_softmax_uniform_and_saturated():
    out = softmax_rows(np.array([[0.0, 0.0, 0.0], [1000.0, 0.0, 0.0]]))
    np.testing.assert_allclose(out[0], [1 / 3, 1 / 3, 1 / 3], atol=1e-15)
    np.testing.assert_allclose(out[1], [1.0, 0.0, 0.0], atol=1e-12)


def test_softmax_hand_value():
    out = softmax_rows(np.array([[1.0, 2.0]]))
    e = math.e
    np.testing.assert_allclose(out[0], [1 / (1 + e), e / (1 + e)], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(
    logits=st.lists(st.floats(-50, 50), min_size=2, max_size=6),
    shift=st.floats(-1000, 1000),
)
def test_softmax_shift_invariance(logits, shift):
    row = np.array([logits])
    np.testing.assert_allclose(softmax_rows(row), softmax_rows(row + shift), atol=1e-12)


def test_combine_symmetric_prototypes_give_midpoint():
    bank = bank_with([-1.0, 0.0, 1.0])
    coeffs = coeffs_with(np.full((1, 3), 1.0 / 3.0))
    ranges = MetaRanges(xs_min=-10.0, xs_max=10.0)
    metas = combine_metas(bank, coeffs, ranges)
    assert metas[0].xs == 0.0


def test_combine_one_hot_hits_range_endpoint():
    bank = bank_with([1.0, -0.2])
    coeffs = coeffs_with(np.array([[1.0, 0.0]]))
    ranges = MetaRanges(xs_min=-10.0, xs_max=10.0)
    assert combine_metas(bank, coeffs, ranges)[0].xs == 10.0


def test_combine_hand_case():
    # raw = 0.5*0.5 - 0.5*0.25 + 2.0*0.25 = 0.625 -> 0.8125 * 24 - 12 = 7.5
    bank = bank_with([0.5, -0.5, 2.0])
    coeffs = coeffs_with(np.array([[0.5, 0.25, 0.25]]))
    ranges = MetaRanges(xs_min=-12.0, xs_max=12.0)
    assert combine_metas(bank, coeffs, ranges)[0].xs == pytest.approx(7.5, abs=1e-12)


def test_combine_literal_scale_escapes_range():
    bank = bank_with([-1.0])
    coeffs = coeffs_with(np.array([[1.0]]))
    ranges = MetaRanges(xs_min=-10.0, xs_max=10.0)
    assert combine_metas(bank, coeffs, ranges)[0].xs == -10.0
    literal = combine_metas(bank, coeffs, ranges, literal_scale=True)
    assert literal[0].xs == -30.0  # 2*min - max: why the remap is the default


def test_range_containment_property(rng):
    ranges = MetaRanges()
    for _ in range(1000):
        m_a = int(rng.integers(1, 6))
        bank = PrototypeBank(
            xs=rng.uniform(-1, 1, rng.integers(2, 8)),
            phi=rng.uniform(-1, 1, rng.integers(2, 8)),
            theta=rng.uniform(-1, 1, rng.integers(2, 8)),
        )
        coeffs = CoefficientMatrices(
            xs=softmax_rows(rng.normal(size=(m_a, bank.xs.shape[0]))),
            phi=softmax_rows(rng.normal(size=(m_a, bank.phi.shape[0]))),
            theta=softmax_rows(rng.normal(size=(m_a, bank.theta.shape[0]))),
        )
        for m in combine_metas(bank, coeffs, ranges):
            assert ranges.xs_min < m.xs < ranges.xs_max
            assert ranges.phi_min < m.phi < ranges.phi_max
            assert ranges.theta_min < m.theta < ranges.theta_max


def test_convexity_within_prototype_extremes(rng):
    # With all prototypes inside [-1, 1] the clip is inactive, so each meta
    # is a convex combination bounded by the per-prototype mapped values.
    ranges = MetaRanges(xs_min=-12.0, xs_max=12.0)
    for _ in range(100):
        bank = bank_with(rng.uniform(-1, 1, 5))
        coeffs = coeffs_with(softmax_rows(rng.normal(size=(1, 5))))
        meta = combine_metas(bank, coeffs, ranges)[0]
        mapped = (bank.xs + 1.0) * 0.5 * 24.0 - 12.0
        assert mapped.min() - 1e-12 <= meta.xs <= mapped.max() + 1e-12


def test_pool_and_weigh_zero_weights_uniform():
    fm = FeatureMap(data=np.zeros((2, 2, 1)))
    w = CoefficientHeadWeights(
        a_xs=np.zeros((2, 3, 4)), b_xs=np.zeros((3, 4)),
        a_phi=np.zeros((2, 3, 2)), b_phi=np.zeros((3, 2)),
        a_theta=np.zeros((2, 3, 2)), b_theta=np.zeros((3, 2)),
    )
    coeffs = pool_and_weigh(fm, w)
    np.testing.assert_allclose(coeffs.xs, 0.25)
    np.testing.assert_allclose(coeffs.phi, 0.5)


def test_pool_and_weigh_constant_feature_hand_dot(rng):
    c = 1.7
    fm = FeatureMap(data=np.full((2, 2, 1), c))
    a = rng.normal(size=(2, 1, 3))
    b = rng.normal(size=(1, 3))
    w = CoefficientHeadWeights(
        a_xs=a, b_xs=b,
        a_phi=np.zeros((2, 1, 1)), b_phi=np.zeros((1, 1)),
        a_theta=np.zeros((2, 1, 1)), b_theta=np.zeros((1, 1)),
    )
    logits = c * a.sum(axis=0) + b
    np.testing.assert_allclose(pool_and_weigh(fm, w).xs, softmax_rows(logits), atol=1e-12)


def test_pool_averages_height():
    data = np.zeros((2, 3, 1))
    data[0, :, 0] = 1.0
    data[1, :, 0] = 3.0
    fm = FeatureMap(data=data)
    np.testing.assert_array_equal(fm.data.mean(axis=0).reshape(-1), [2.0, 2.0, 2.0])


def test_pool_and_weigh_shape_mismatch():
    fm = FeatureMap(data=np.zeros((2, 3, 1)))
    w = CoefficientHeadWeights(
        a_xs=np.zeros((2, 1, 1)), b_xs=np.zeros((1, 1)),
        a_phi=np.zeros((2, 1, 1)), b_phi=np.zeros((1, 1)),
        a_theta=np.zeros((2, 1, 1)), b_theta=np.zeros((1, 1)),
    )
    with pytest.raises(ShapeMismatch):
        pool_and_weigh(fm, w)


def test_materialize_tan45():
    a = materialize(AnchorMetas(xs=2.0, phi=math.radians(45.0), theta=0.0), np.array([10.0]))
    np.testing.assert_allclose(a.points[0], [12.0, 10.0, 0.0], atol=1e-12)


def test_materialize_straight_ray():
    y = np.linspace(3, 103, 20)
    a = materialize(AnchorMetas(xs=-3.0, phi=0.0, theta=0.0), y)
    np.testing.assert_array_equal(a.x, np.full(20, -3.0))
    np.testing.assert_array_equal(a.z, np.zeros(20))
    np.testing.assert_array_equal(a.y, y)


def test_materialize_hand_tangent():
    a = materialize(AnchorMetas(xs=0.0, phi=0.0, theta=math.atan(0.02)), np.array([50.0]))
    assert a.z[0] == pytest.approx(1.0, abs=1e-12)


def test_materialized_anchors_are_straight(rng):
    y = np.sort(rng.uniform(3, 100, 15))
    for _ in range(50):
        metas = AnchorMetas(
            xs=rng.uniform(-12, 12),
            phi=rng.uniform(-1.0, 1.0),
            theta=rng.uniform(-0.1, 0.1),
        )
        a = materialize(metas, y)
        slopes = np.diff(a.x) / np.diff(a.y)
        assert np.ptp(slopes) < 1e-12


def test_materialize_rejects_right_angle():
    with pytest.raises(ValueError):
        materialize(AnchorMetas(xs=0.0, phi=math.pi / 2, theta=0.0), np.array([1.0]))
