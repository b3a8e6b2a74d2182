import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rolecap.numerics import (
    CollisionSpec,
    CorrespondenceMatrix,
    PositionalTable,
    SimilarityBatch,
    collision_probability,
    extend_positional_table,
    loss_gradient,
    multipositive_loss,
    multipositive_loss_i2t,
    run_verification,
)

import oracles


def random_m(rng, b, extra=2):
    """Identity plus a few extra positives; rows and columns stay nonempty."""
    m = np.eye(b)
    for _ in range(extra):
        m[rng.integers(0, b), rng.integers(0, b)] = 1.0
    return m


# --- type validation ---------------------------------------------------------


def test_similarity_batch_validation():
    with pytest.raises(ValueError):
        SimilarityBatch(s=np.zeros((2, 3)), tau=1.0)
    with pytest.raises(ValueError):
        SimilarityBatch(s=np.zeros((2, 2)), tau=0.0)
    with pytest.raises(ValueError):
        SimilarityBatch(s=np.array([[np.inf, 0], [0, 0]]), tau=1.0)


def test_correspondence_validation():
    with pytest.raises(ValueError):
        CorrespondenceMatrix(m=np.array([[1, 0.5], [0, 1]]))
    with pytest.raises(ValueError):
        CorrespondenceMatrix(m=np.array([[0, 0], [1, 1]]))  # empty row
    with pytest.raises(ValueError):
        CorrespondenceMatrix(m=np.zeros((2, 3)))


def test_shape_mismatch_rejected():
    batch = SimilarityBatch(s=np.zeros((3, 3)), tau=1.0)
    m = CorrespondenceMatrix(m=np.eye(2))
    with pytest.raises(ValueError):
        multipositive_loss_i2t(batch, m)


def test_bidirectional_requires_nonempty_columns():
    m = np.array([[1, 1], [1, 0]])  # column 1 empty after transpose? no: col sums (2, 1) fine
    m_bad = np.array([[1, 0], [1, 0]])
    CorrespondenceMatrix(m=m_bad)  # rows fine
    batch = SimilarityBatch(s=np.zeros((2, 2)), tau=1.0)
    with pytest.raises(ValueError):
        multipositive_loss(batch, CorrespondenceMatrix(m=m_bad))
    multipositive_loss(batch, CorrespondenceMatrix(m=m))


# --- loss values -------------------------------------------------------------


def test_loss_single_entry_is_zero():
    batch = SimilarityBatch(s=np.array([[2.3]]), tau=0.4)
    m = CorrespondenceMatrix(m=np.array([[1.0]]))
    assert multipositive_loss_i2t(batch, m) == pytest.approx(0.0, abs=1e-15)
    assert multipositive_loss(batch, m) == pytest.approx(0.0, abs=1e-15)


def test_loss_two_class_closed_form():
    batch = SimilarityBatch(s=np.array([[1.0, 0.0], [0.0, 1.0]]), tau=1.0)
    m = CorrespondenceMatrix(m=np.eye(2))
    expected = math.log(1 + math.exp(-1.0))  # scalar evaluation of the 2-class case
    assert multipositive_loss_i2t(batch, m) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.313262, abs=1e-6)


def test_loss_uniform_similarities_log_b():
    for b in (2, 3, 7):
        batch = SimilarityBatch(s=np.full((b, b), 1.7), tau=0.3)
        m = np.eye(b)
        m[0, b - 1] = 1.0
        m[b - 1, 0] = 1.0
        value = multipositive_loss(batch, CorrespondenceMatrix(m=m))
        assert value == pytest.approx(math.log(b), abs=1e-12)


def test_loss_identity_m_matches_one_hot_oracle():
    rng = np.random.default_rng(101)
    for _ in range(100):
        b = int(rng.integers(1, 17))
        s = rng.normal(scale=2.0, size=(b, b))
        tau = float(rng.uniform(0.05, 1.5))
        ours = multipositive_loss(SimilarityBatch(s=s, tau=tau), CorrespondenceMatrix(m=np.eye(b)))
        ref = oracles.one_hot_contrastive(s.tolist(), tau)
        assert ours == pytest.approx(ref, abs=1e-12)


def test_loss_symmetric_inputs_equal_one_direction():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(5, 5))
    s = (a + a.T) / 2
    m = np.eye(5)
    m[1, 3] = m[3, 1] = 1.0
    batch = SimilarityBatch(s=s, tau=0.8)
    cm = CorrespondenceMatrix(m=m)
    assert multipositive_loss(batch, cm) == pytest.approx(
        multipositive_loss_i2t(batch, cm), abs=1e-12
    )


def test_loss_permutation_invariance():
    rng = np.random.default_rng(13)
    b = 6
    s = rng.normal(size=(b, b))
    m = random_m(rng, b, extra=3)
    perm = rng.permutation(b)
    batch = SimilarityBatch(s=s, tau=0.5)
    permuted = SimilarityBatch(s=s[np.ix_(perm, perm)], tau=0.5)
    cm = CorrespondenceMatrix(m=m)
    cm_perm = CorrespondenceMatrix(m=m[np.ix_(perm, perm)])
    assert multipositive_loss(batch, cm) == pytest.approx(
        multipositive_loss(permuted, cm_perm), abs=1e-12
    )


def test_loss_row_shift_invariance():
    rng = np.random.default_rng(23)
    s = rng.normal(size=(5, 5))
    m = random_m(rng, 5)
    base = multipositive_loss_i2t(SimilarityBatch(s=s, tau=0.6), CorrespondenceMatrix(m=m))
    shifted = s.copy()
    shifted[2, :] += 123.456
    after = multipositive_loss_i2t(SimilarityBatch(s=shifted, tau=0.6), CorrespondenceMatrix(m=m))
    assert abs(base - after) <= 1e-10


def test_loss_nonnegative_and_zero_iff_certain():
    rng = np.random.default_rng(37)
    for _ in range(30):
        b = int(rng.integers(2, 9))
        s = rng.normal(scale=3.0, size=(b, b))
        m = random_m(rng, b)
        value = multipositive_loss(SimilarityBatch(s=s, tau=0.4), CorrespondenceMatrix(m=m))
        assert value >= -1e-12
    # near-certain positives drive the loss toward zero
    b = 4
    s = -60.0 * np.ones((b, b)) + 120.0 * np.eye(b)
    value = multipositive_loss(SimilarityBatch(s=s, tau=1.0), CorrespondenceMatrix(m=np.eye(b)))
    assert value == pytest.approx(0.0, abs=1e-10)


def test_loss_extreme_logits_stable():
    s = np.array([[1000.0, -1000.0], [-1000.0, 1000.0]])
    value = multipositive_loss(SimilarityBatch(s=s, tau=0.05), CorrespondenceMatrix(m=np.eye(2)))
    assert math.isfinite(value)
    assert value == pytest.approx(0.0, abs=1e-12)


def test_loss_single_precision_mode_close_to_double():
    rng = np.random.default_rng(41)
    s = rng.normal(size=(6, 6))
    batch = SimilarityBatch(s=s, tau=0.7)
    cm = CorrespondenceMatrix(m=np.eye(6))
    v64 = multipositive_loss(batch, cm, dtype=np.float64)
    v32 = multipositive_loss(batch, cm, dtype=np.float32)
    assert v32 == pytest.approx(v64, rel=1e-5)


# --- gradient ----------------------------------------------------------------


def test_gradient_uniform_identity_rows_sum_to_zero():
    batch = SimilarityBatch(s=np.zeros((2, 2)), tau=1.0)
    grad = loss_gradient(batch, CorrespondenceMatrix(m=np.eye(2)))
    assert np.allclose(grad.sum(axis=1), 0.0, atol=1e-15)
    assert np.allclose(grad.sum(axis=0), 0.0, atol=1e-15)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(71)
    taus = [0.05, 0.5, 1.0]
    worst = 0.0
    for trial in range(50):
        b = int(rng.integers(2, 9))
        tau = taus[trial % 3]
        s = rng.normal(size=(b, b))
        m = random_m(rng, b)
        cm = CorrespondenceMatrix(m=m)
        analytic = loss_gradient(SimilarityBatch(s=s, tau=tau), cm)
        numeric = oracles.central_difference_gradient(
            lambda sv: multipositive_loss(SimilarityBatch(s=sv, tau=tau), cm), s
        )
        scale = max(float(np.abs(numeric).max()), 1e-12)
        rel = float(np.abs(analytic - numeric).max()) / scale
        worst = max(worst, rel)
    assert worst <= 1e-5


def test_gradient_identity_m_matches_one_hot_oracle():
    rng = np.random.default_rng(83)
    for _ in range(20):
        b = int(rng.integers(2, 7))
        tau = float(rng.uniform(0.1, 1.2))
        s = rng.normal(size=(b, b))
        ours = loss_gradient(SimilarityBatch(s=s, tau=tau), CorrespondenceMatrix(m=np.eye(b)))
        ref = np.array(oracles.one_hot_contrastive_gradient(s.tolist(), tau))
        assert np.abs(ours - ref).max() <= 1e-12


# --- positional table --------------------------------------------------------


def test_positional_table_validation():
    with pytest.raises(ValueError):
        PositionalTable(entries=np.zeros((10, 4)), keep_prefix=20)
    with pytest.raises(ValueError):
        PositionalTable(entries=np.zeros((30, 4)), keep_prefix=20, ratio_q=0)
    with pytest.raises(ValueError):
        PositionalTable(entries=np.zeros(30), keep_prefix=20)


def test_extension_77_to_248():
    rng = np.random.default_rng(5)
    pe = PositionalTable(entries=rng.normal(size=(77, 16)), keep_prefix=20)
    out = extend_positional_table(pe, 248)
    assert out.length == 248
    assert out.ratio_q == 4
    assert np.array_equal(out.entries[:20], pe.entries[:20])  # bit-identical prefix


def test_extension_rows_match_direct_formula():
    rng = np.random.default_rng(6)
    pe = PositionalTable(entries=rng.normal(size=(77, 8)), keep_prefix=20)
    out = extend_positional_table(pe, 248)
    for i in range(228):
        expected = oracles.interpolated_row(pe.entries, 20, 4, i)
        assert np.allclose(out.entries[20 + i], expected, atol=0, rtol=0)


def test_extension_specific_blend():
    rng = np.random.default_rng(8)
    pe = PositionalTable(entries=rng.normal(size=(77, 4)), keep_prefix=20)
    out = extend_positional_table(pe, 248)
    expected = 0.75 * pe.entries[20] + 0.25 * pe.entries[21]
    assert np.allclose(out.entries[21], expected, rtol=0, atol=0)


def test_extension_q1_identity():
    rng = np.random.default_rng(9)
    pe = PositionalTable(entries=rng.normal(size=(77, 4)), keep_prefix=20)
    out = extend_positional_table(pe, 77)
    assert out.ratio_q == 1
    assert np.array_equal(out.entries, pe.entries)


def test_extension_convex_combination_bounds():
    rng = np.random.default_rng(10)
    pe = PositionalTable(entries=rng.normal(size=(30, 5)), keep_prefix=20)
    out = extend_positional_table(pe, 20 + 3 * 10)
    for i in range(30):
        j = i // 3
        lo = pe.entries[20 + j]
        hi = pe.entries[min(20 + j + 1, 29)]
        row = out.entries[20 + i]
        assert np.all(row >= np.minimum(lo, hi) - 1e-12)
        assert np.all(row <= np.maximum(lo, hi) + 1e-12)


def test_extension_boundary_clamps_to_last_row():
    rng = np.random.default_rng(11)
    pe = PositionalTable(entries=rng.normal(size=(22, 3)), keep_prefix=20)
    out = extend_positional_table(pe, 20 + 2 * 4)  # q=4, tail rows 20,21
    # final stride interpolates between the last row and its clamped neighbor
    for r in range(4):
        expected = (1 - r / 4) * pe.entries[21] + (r / 4) * pe.entries[21]
        assert np.allclose(out.entries[24 + r], expected)


def test_extension_invalid_target_rejected():
    pe = PositionalTable(entries=np.zeros((77, 4)), keep_prefix=20)
    with pytest.raises(ValueError):
        extend_positional_table(pe, 247)  # (247-20) is not a multiple of 57
    with pytest.raises(ValueError):
        extend_positional_table(pe, 60)  # shorter than the input


# --- collision probability ---------------------------------------------------


def test_collision_spec_validation():
    with pytest.raises(ValueError):
        CollisionSpec(unique_images=10, batch_size=0)
    with pytest.raises(ValueError):
        CollisionSpec(unique_images=10, batch_size=11)


def test_collision_trivial_cases():
    assert collision_probability(CollisionSpec(unique_images=5, batch_size=1)) == 0.0
    assert collision_probability(CollisionSpec(unique_images=2, batch_size=2)) == pytest.approx(0.5)


def test_collision_exact_matches_small_product_oracle():
    for n, b in [(10, 3), (50, 10), (365, 23), (100, 100)]:
        ours = collision_probability(CollisionSpec(unique_images=n, batch_size=b), exact=True)
        ref = oracles.exact_collision_small(n, b)
        assert ours == pytest.approx(ref, abs=1e-12)


def test_collision_birthday_paradox_landmark():
    # 23 people, 365 days: the canonical > 1/2 threshold
    v = collision_probability(CollisionSpec(unique_images=365, batch_size=23))
    assert 0.5 < v < 0.51


def test_collision_headline_claim():
    spec = CollisionSpec(unique_images=10**6, batch_size=2048)
    exact = collision_probability(spec, exact=True)
    approx = collision_probability(spec, exact=False)
    assert exact > 0.80
    assert approx > 0.80
    assert exact == pytest.approx(approx, abs=5e-4)


def test_collision_monotonicity():
    for b in range(1, 64):
        assert collision_probability(
            CollisionSpec(unique_images=500, batch_size=b)
        ) <= collision_probability(CollisionSpec(unique_images=500, batch_size=b + 1)) + 1e-15
    for n in range(64, 600, 13):
        assert collision_probability(
            CollisionSpec(unique_images=n, batch_size=64)
        ) >= collision_probability(CollisionSpec(unique_images=n + 1, batch_size=64)) - 1e-15


def test_collision_matches_monte_carlo_moderate():
    # cheap MC here; the full-scale headline simulation runs in acceptance
    mc = oracles.monte_carlo_collision(n=5000, b=128, trials=20000, seed=3)
    exact = collision_probability(CollisionSpec(unique_images=5000, batch_size=128))
    assert abs(mc - exact) < 0.015


@given(
    n=st.integers(min_value=2, max_value=10_000),
    b=st.integers(min_value=1, max_value=200),
)
@settings(max_examples=80)
def test_collision_probability_in_unit_interval(n, b):
    b = min(b, n)
    for exact in (True, False):
        v = collision_probability(CollisionSpec(unique_images=n, batch_size=b), exact=exact)
        assert 0.0 <= v <= 1.0


def test_run_verification_all_pass():
    results = run_verification()
    failures = [name for name, ok, _ in results if not ok]
    assert failures == []
    assert len(results) >= 10
