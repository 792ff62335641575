"""Loss identities against high-precision scalar oracles, plus gradient and
monotonicity properties."""

import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from headsim.model import EmbeddingPair
from headsim.objectives import (
    LossWeights,
    Margins,
    align_loss,
    batch_objective,
    sigmoid_stable,
    sim_loss,
    softplus_stable,
)
from headsim.relations import Quadruplet

mpmath.mp.dps = 50


def mp_softplus(x) -> float:
    return float(mpmath.log1p(mpmath.exp(mpmath.mpf(x))))


class TestSoftplus:
    def test_at_zero(self):
        assert softplus_stable(0.0) == pytest.approx(math.log(2.0), abs=1e-9)

    def test_large_positive_no_overflow(self):
        assert softplus_stable(50.0) == pytest.approx(50.0, abs=1e-9)
        assert np.isfinite(softplus_stable(10_000.0))

    def test_against_high_precision(self):
        for x in (-0.9, -1.7, -0.8, 0.3, 2.5, -20.0):
            assert softplus_stable(x) == pytest.approx(mp_softplus(x), abs=1e-12)

    @given(st.floats(-30, 30), st.floats(-30, 30))
    def test_monotone_and_positive(self, a, b):
        lo, hi = sorted((a, b))
        assert softplus_stable(lo) <= softplus_stable(hi) + 1e-12
        assert softplus_stable(a) > 0

    def test_sigmoid_matches_derivative(self):
        xs = np.linspace(-20, 20, 101)
        h = 1e-6
        fd = (softplus_stable(xs + h) - softplus_stable(xs - h)) / (2 * h)
        np.testing.assert_allclose(sigmoid_stable(xs), fd, atol=1e-6)


class TestAlignLoss:
    def test_identical_orthogonal_antipodal(self):
        v = np.zeros(16)
        v[0] = 1.0
        w = np.zeros(16)
        w[1] = 1.0
        assert align_loss(v, v) == pytest.approx(0.0, abs=1e-9)
        assert align_loss(v, w) == pytest.approx(1.0, abs=1e-9)
        assert align_loss(v, -v) == pytest.approx(2.0, abs=1e-9)

    def test_rejects_non_unit(self):
        v = np.ones(4)  # norm 2
        u = np.full(4, 0.5)
        with pytest.raises(ValueError):
            align_loss(v, u)
        with pytest.raises(ValueError):
            align_loss(u, v)


class TestSimLoss:
    def test_all_zero_args(self):
        margins = Margins(1e-9, 1e-9, 1e-9)  # ~zero margins, must stay positive
        value = sim_loss(0.5, 0.5, 0.5, margins)
        assert value == pytest.approx(3 * math.log(2.0), abs=1e-7)

    def test_composite_value_against_oracle(self):
        margins = Margins(0.1, 0.3, 0.2)
        expected = mp_softplus(-0.9) + mp_softplus(-1.7) + mp_softplus(-0.8)
        assert sim_loss(1.0, 0.0, -1.0, margins) == pytest.approx(expected, abs=1e-6)

    def test_partial_quadruplet_keeps_middle_term_only(self):
        margins = Margins(0.1, 0.3, 0.2)
        assert sim_loss(1.0, None, -1.0, margins) == pytest.approx(mp_softplus(-1.7), abs=1e-6)

    def test_rejects_out_of_range_similarity(self):
        with pytest.raises(ValueError):
            sim_loss(1.5, 0.0, 0.0, Margins())
        with pytest.raises(ValueError):
            sim_loss(0.0, 0.0, -1.1, Margins())

    def test_margins_must_be_positive(self):
        with pytest.raises(ValueError):
            Margins(0.0, 0.3, 0.2)

    @given(
        st.floats(-1, 1),
        st.floats(-1, 1),
        st.floats(-1, 1),
    )
    def test_non_negative(self, a, b, c):
        assert sim_loss(a, b, c, Margins()) >= 0.0

    def test_partial_derivative_signs(self):
        # More separation between positive and the rest always helps; the
        # semi-negative trades off between its two terms with fixed signs.
        m = Margins()
        h = 1e-6
        s = (0.6, 0.2, -0.3)

        def f(s_pos, s_semi, s_neg):
            return sim_loss(s_pos, s_semi, s_neg, m)

        assert f(s[0] + h, s[1], s[2]) < f(s[0] - h, s[1], s[2])  # decreasing in s_pos
        assert f(s[0], s[1], s[2] + h) > f(s[0], s[1], s[2] - h)  # increasing in s_neg
        # Term-wise: the same-vs-semi term never decreases in s_semi, the
        # semi-vs-diff term never increases.
        t1_up = softplus_stable(m.same_vs_semi + (s[1] + h) - s[0])
        t1_dn = softplus_stable(m.same_vs_semi + (s[1] - h) - s[0])
        t3_up = softplus_stable(m.semi_vs_diff + s[2] - (s[1] + h))
        t3_dn = softplus_stable(m.semi_vs_diff + s[2] - (s[1] - h))
        assert t1_up >= t1_dn
        assert t3_up <= t3_dn

    @given(
        st.floats(0.01, 0.5),
        st.floats(-0.5, 0.5),
    )
    @settings(max_examples=50)
    def test_margin_satisfaction_bounds_loss(self, delta, s_neg):
        m = Margins()
        s_semi = s_neg + m.semi_vs_diff + delta
        s_pos = max(s_semi + m.same_vs_semi, s_neg + m.same_vs_diff) + delta
        if s_pos > 1.0:
            return
        assert sim_loss(s_pos, s_semi, s_neg, m) <= 3 * softplus_stable(-delta) + 1e-12


def _unit_rows(rng, n, d):
    z = rng.standard_normal((n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


class TestBatchObjective:
    def test_zero_when_aligned_and_no_quadruplets(self):
        rng = np.random.default_rng(0)
        z = _unit_rows(rng, 5, 16)
        pair = EmbeddingPair(z_id=z, z_head=z.copy())
        mask = np.ones(5, dtype=bool)
        breakdown, dzi, dzh = batch_objective(
            pair, [], z.copy(), mask, "dual_cls", Margins(), LossWeights()
        )
        assert breakdown.total == pytest.approx(0.0, abs=1e-12)
        assert breakdown.num_quadruplets == 0
        assert breakdown.num_align_pairs == 5

    def test_single_quadruplet_matches_scalar(self):
        rng = np.random.default_rng(1)
        z = _unit_rows(rng, 4, 8)
        pair = EmbeddingPair(z_id=z, z_head=z.copy())
        quad = Quadruplet(0, 1, 2, 3, True)
        margins = Margins()
        breakdown, _, _ = batch_objective(
            pair, [quad], None, None, "dual_cls", margins, LossWeights()
        )
        expected = sim_loss(z[0] @ z[1], z[0] @ z[2], z[0] @ z[3], margins)
        assert breakdown.sim_id == pytest.approx(expected, rel=1e-12)
        assert breakdown.sim_head == pytest.approx(expected, rel=1e-12)
        assert breakdown.total == pytest.approx(2 * expected, rel=1e-12)

    def test_total_combination_invariant(self):
        rng = np.random.default_rng(2)
        z_id = _unit_rows(rng, 6, 8)
        z_head = _unit_rows(rng, 6, 8)
        pair = EmbeddingPair(z_id=z_id, z_head=z_head)
        quads = [Quadruplet(0, 1, 2, 3, True), Quadruplet(4, 5, -1, 0, False)]
        targets = _unit_rows(rng, 6, 8)
        mask = np.array([1, 1, 0, 0, 1, 0], dtype=bool)
        weights = LossWeights(align=0.3, sim=1.7)
        for variant in ("dual_cls", "shared", "dual_head_split", "dual_head_both"):
            breakdown, _, _ = batch_objective(
                pair, quads, targets, mask, variant, Margins(), weights
            )
            assert breakdown.total == pytest.approx(
                weights.align * breakdown.align
                + weights.sim * (breakdown.sim_id + breakdown.sim_head),
                rel=1e-12,
            )

    def test_variant_routing(self):
        rng = np.random.default_rng(3)
        z_id = _unit_rows(rng, 6, 8)
        z_head = _unit_rows(rng, 6, 8)
        pair = EmbeddingPair(z_id=z_id, z_head=z_head)
        quads = [Quadruplet(0, 1, 2, 3, True)]
        targets = _unit_rows(rng, 6, 8)
        mask = np.ones(6, dtype=bool)

        split, dzi_split, _ = batch_objective(
            pair, quads, targets, mask, "dual_head_split", Margins(), LossWeights()
        )
        assert split.sim_id == 0.0
        assert split.sim_head > 0.0
        # With alignment off, the split variant's z_id gradient vanishes.
        _, dzi, _ = batch_objective(
            pair, quads, targets, mask, "dual_head_split", Margins(), LossWeights(align=0.0)
        )
        assert np.abs(dzi).max() == 0.0

        shared_pair = EmbeddingPair(z_id=z_id, z_head=z_id)
        shared, _, dzh = batch_objective(
            shared_pair, quads, targets, mask, "shared", Margins(), LossWeights()
        )
        assert shared.sim_head == 0.0  # counted once on the single embedding
        assert shared.sim_id > 0.0
        assert np.abs(dzh).max() == 0.0

    def test_embedding_gradients_match_finite_differences(self):
        rng = np.random.default_rng(4)
        z_id = _unit_rows(rng, 8, 12)
        z_head = _unit_rows(rng, 8, 12)
        targets = _unit_rows(rng, 8, 12)
        mask = rng.uniform(size=8) < 0.6
        quads = [
            Quadruplet(0, 1, 2, 3, True),
            Quadruplet(2, 3, -1, 5, False),
            Quadruplet(0, 1, 4, 6, True),  # repeated anchor exercises accumulation
        ]
        weights = LossWeights(align=0.8, sim=1.2)
        margins = Margins()

        def total(zi, zh):
            pair = EmbeddingPair(z_id=zi, z_head=zh)
            return batch_objective(pair, quads, targets, mask, "dual_cls", margins, weights)[
                0
            ].total

        _, dzi, dzh = batch_objective(
            EmbeddingPair(z_id=z_id, z_head=z_head),
            quads,
            targets,
            mask,
            "dual_cls",
            margins,
            weights,
        )
        h = 1e-6
        for z, dz, which in ((z_id, dzi, "id"), (z_head, dzh, "head")):
            for _ in range(20):
                i = rng.integers(z.shape[0])
                j = rng.integers(z.shape[1])
                orig = z[i, j]
                z[i, j] = orig + h
                up = total(z_id, z_head)
                z[i, j] = orig - h
                dn = total(z_id, z_head)
                z[i, j] = orig
                fd = (up - dn) / (2 * h)
                assert dz[i, j] == pytest.approx(fd, abs=5e-8), which

    def test_bad_quadruplet_index_raises(self):
        rng = np.random.default_rng(5)
        z = _unit_rows(rng, 4, 8)
        pair = EmbeddingPair(z_id=z, z_head=z)
        with pytest.raises(ValueError):
            batch_objective(pair, [Quadruplet(0, 1, 2, 7, True)], None, None, "dual_cls", Margins())

    def test_missing_teacher_target_raises(self):
        rng = np.random.default_rng(6)
        z = _unit_rows(rng, 4, 8)
        pair = EmbeddingPair(z_id=z, z_head=z)
        targets = np.full((4, 8), np.nan)
        mask = np.array([True, False, False, False])
        with pytest.raises(ValueError, match="teacher target"):
            batch_objective(pair, [], targets, mask, "dual_cls", Margins())
