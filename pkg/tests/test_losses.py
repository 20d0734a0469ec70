import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from progstain.config import LossConfig
from progstain.losses import (EmbeddingPyramid, PyramidLayer, adaptive_weight, asp_loss,
                              dab_cf_loss, gaussian_pyramid_loss, gcbr_loss, info_nce,
                              layer_weights, patchnce_loss, total_loss)

from conftest import ROWS, forward_compose, random_concentrations


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def random_layer(rng, s, n, d):
    return PyramidLayer(unit(rng.standard_normal((s, d))), unit(rng.standard_normal((s, d))),
                        unit(rng.standard_normal((s, n, d))))


def random_pyramid(rng, n_layers=3):
    return EmbeddingPyramid([random_layer(rng, int(rng.integers(1, 12)), int(rng.integers(0, 6)), 16)
                             for _ in range(n_layers)])


def angled(cos_value):
    return np.array([cos_value, math.sqrt(1 - cos_value ** 2)])


class TestInfoNCE:
    def test_no_negatives(self, rng):
        g, p = unit(rng.standard_normal((2, 8)))
        assert info_nce(g, p, [], 0.07) == 0.0

    @pytest.mark.parametrize("n", [1, 4, 16])
    def test_uniform_similarity(self, n):
        g = np.array([1.0, 0.0])
        p = angled(0.3)
        negs = [p.copy() for _ in range(n)]
        assert abs(info_nce(g, p, negs, 0.5) - math.log(n + 1)) < 1e-12

    def test_hand_value(self):
        g = np.array([1.0, 0.0])
        loss = info_nce(g, g, [np.array([0.0, 1.0])], 1.0)
        assert loss == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
        assert loss == pytest.approx(0.313262, abs=1e-6)

    def test_errors(self):
        with pytest.raises(ValueError):
            info_nce(np.ones(3), np.ones(4), [], 1.0)
        with pytest.raises(ValueError):
            info_nce(np.ones(3), np.ones(3), [], 0.0)

    def test_permutation_invariant(self, rng):
        g, p = unit(rng.standard_normal((2, 8)))
        negs = unit(rng.standard_normal((9, 8)))
        base = info_nce(g, p, negs, 0.1)
        for _ in range(5):
            assert abs(info_nce(g, p, negs[rng.permutation(9)], 0.1) - base) < 1e-12

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.floats(0.05, 2.0))
    def test_nonnegative_and_decreasing(self, seed, tau):
        rng = np.random.default_rng(seed)
        negs = unit(rng.standard_normal((5, 2)))
        g = np.array([1.0, 0.0])
        losses = [info_nce(g, angled(c), negs, tau) for c in np.linspace(-0.9, 0.9, 7)]
        assert min(losses) >= 0
        assert all(a > b for a, b in zip(losses, losses[1:]))


class TestAdaptiveWeight:
    @pytest.mark.parametrize("sim", [-1.0, -0.3, 0.0, 0.8, 1.0])
    def test_start_is_one(self, sim):
        assert adaptive_weight(sim, 0, 100) == 1.0

    def test_end_full_similarity(self):
        assert adaptive_weight(1.0, 100, 100) == 1.0

    def test_end_is_h(self):
        for s in (-1.0, -0.5, 0.0, 0.6):
            assert adaptive_weight(s, 10, 10) == pytest.approx((1 + s) / 2, abs=1e-15)

    def test_midpoint(self):
        assert adaptive_weight(0.0, 50, 100) == pytest.approx(0.75, abs=1e-15)

    def test_errors(self):
        with pytest.raises(ValueError):
            adaptive_weight(0.0, 0, 0)
        with pytest.raises(ValueError):
            adaptive_weight(0.0, 5, 4)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-1, 1), st.integers(0, 100), st.sampled_from(["linear", "cosine"]),
           st.sampled_from(["affine", "relu"]))
    def test_in_unit_interval(self, sim, t, schedule, weight_map):
        w = adaptive_weight(sim, t, 100, schedule, weight_map)
        assert 0.0 <= w <= 1.0


class TestASP:
    def test_uniform_reduction_at_start(self, rng):
        layer = random_layer(rng, 2, 3, 8)
        a, b = (info_nce(layer.generated[i], layer.real[i], layer.negatives[i], 0.2) for i in range(2))
        loss = asp_loss(EmbeddingPyramid([layer]), LossConfig(tau=0.2, step=0, total_steps=10))
        assert loss == pytest.approx((a + b) / 2, abs=1e-12)

    def test_single_location_layers(self, rng):
        pyr = EmbeddingPyramid([random_layer(rng, 1, 4, 8) for _ in range(3)])
        cfg = LossConfig(tau=0.3, step=7, total_steps=10)
        expected = sum(info_nce(l.generated[0], l.real[0], l.negatives[0], 0.3) for l in pyr.layers)
        assert asp_loss(pyr, cfg) == pytest.approx(expected, abs=1e-12)

    def test_end_of_schedule_drops_anti_aligned(self, rng):
        z = unit(rng.standard_normal(8))
        other = unit(rng.standard_normal(8))
        negs = unit(rng.standard_normal((2, 3, 8)))
        layer = PyramidLayer(np.stack([z, other]), np.stack([z, -other]), negs)
        cfg = LossConfig(tau=0.5, step=10, total_steps=10)
        w = layer_weights(EmbeddingPyramid([layer]), cfg)[0]
        np.testing.assert_allclose(w, [1.0, 0.0], atol=1e-15)
        assert asp_loss(EmbeddingPyramid([layer]), cfg) == pytest.approx(
            info_nce(z, z, negs[0], 0.5), abs=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_equals_patchnce_at_start(self, seed):
        pyr = random_pyramid(np.random.default_rng(seed))
        cfg = LossConfig(tau=0.07, step=0, total_steps=50)
        assert asp_loss(pyr, cfg) == patchnce_loss(pyr, 0.07)

    @pytest.mark.parametrize("step", [0, 13, 50])
    def test_layer_weights_sum_to_one(self, rng, step):
        pyr = random_pyramid(rng, 4)
        for w in layer_weights(pyr, LossConfig(step=step, total_steps=50)):
            assert abs(w.sum() - 1.0) < 1e-12

    def test_empty_layer_rejected(self):
        empty = PyramidLayer(np.zeros((0, 4)), np.zeros((0, 4)), np.zeros((0, 0, 4)))
        with pytest.raises(ValueError):
            asp_loss(EmbeddingPyramid([empty]), LossConfig())
        with pytest.raises(ValueError):
            patchnce_loss(EmbeddingPyramid([]), 0.1)


class TestPatchNCE:
    def test_no_negatives(self, rng):
        layer = PyramidLayer(unit(rng.standard_normal((1, 4))), unit(rng.standard_normal((1, 4))),
                             np.zeros((1, 0, 4)))
        assert patchnce_loss(EmbeddingPyramid([layer]), 0.1) == 0.0

    def test_sum_over_layers(self):
        # one negative: loss = log(1 + exp(cos_neg - cos_pos)); pick the gap giving 0.5
        gap = math.log(math.exp(0.5) - 1.0)
        g = np.array([1.0, 0.0])

        def layer(cos_pos):
            return PyramidLayer(np.stack([g, g]), np.stack([angled(cos_pos)] * 2),
                                np.stack([[angled(cos_pos + gap)]] * 2))

        pyr = EmbeddingPyramid([layer(0.9), layer(0.6)])
        assert patchnce_loss(pyr, 1.0) == pytest.approx(1.0, abs=1e-12)


class TestGaussianPyramid:
    def test_identical(self, rng):
        a = rng.uniform(0, 1, (16, 16, 3))
        assert gaussian_pyramid_loss(a, a, 4) == 0.0

    def test_single_level_is_mae(self, rng):
        a, b = rng.uniform(0, 1, (2, 12, 10))
        assert gaussian_pyramid_loss(a, b, 1) == pytest.approx(np.mean(np.abs(a - b)), abs=1e-15)

    def test_constants(self):
        assert gaussian_pyramid_loss(np.zeros((8, 8)), np.full((8, 8), 0.5), 3) == \
            pytest.approx(1.5, abs=1e-15)

    def test_errors(self):
        with pytest.raises(ValueError):
            gaussian_pyramid_loss(np.zeros((8, 8)), np.zeros((8, 9)), 1)
        with pytest.raises(ValueError):
            gaussian_pyramid_loss(np.zeros((8, 8)), np.zeros((8, 8)), 5)

    def test_nonnegative(self, rng):
        for _ in range(10):
            a, b = rng.uniform(0, 1, (2, 16, 16))
            assert gaussian_pyramid_loss(a, b, 3) >= 0


class TestDabCF:
    def test_identical(self, rng):
        img = rng.uniform(0.1, 1, (6, 6, 3))
        assert dab_cf_loss(img, img) == 0.0

    def test_hematoxylin_perturbation(self, rng):
        c = random_concentrations(rng, (8, 8))
        real = forward_compose(*c)
        gen = forward_compose(c[0] + 0.25, c[1], c[2])
        assert dab_cf_loss(real, gen) < 1e-12

    def test_known_offset(self, rng):
        c = random_concentrations(rng, (8, 8))
        real = forward_compose(*c)
        gen = forward_compose(c[0], c[1], c[2] + 0.2)
        assert abs(dab_cf_loss(real, gen) - 0.04) < 1e-9

    def test_symmetric(self, rng):
        a, b = rng.uniform(0.05, 1, (2, 7, 7, 3))
        assert dab_cf_loss(a, b) == pytest.approx(dab_cf_loss(b, a), abs=1e-15)

    def test_invariant_under_h_e_span(self, rng):
        c = random_concentrations(rng, (8, 8), hi=(0.4, 0.3, 0.6))
        real = forward_compose(*c)
        gen = forward_compose(c[0], c[1], c[2] + rng.uniform(0, 0.3, (8, 8)))
        base = dab_cf_loss(real, gen)
        od = -np.log10(gen + 1e-6)
        shift = rng.uniform(0, 0.3, (8, 8, 1)) * ROWS[0] + rng.uniform(0, 0.3, (8, 8, 1)) * ROWS[1]
        moved = 10.0 ** (-(od + shift)) - 1e-6
        assert abs(dab_cf_loss(real, moved) - base) < 1e-9

    def test_mismatch(self):
        with pytest.raises(ValueError):
            dab_cf_loss(np.ones((4, 4, 3)), np.ones((4, 5, 3)))


class TestGCBR:
    def test_identical(self, rng):
        img = forward_compose(*random_concentrations(rng, (8, 8)))
        assert gcbr_loss(img, img) == 0.0

    def test_no_dab_in_real(self, rng):
        real = forward_compose(rng.uniform(0, 0.5, (8, 8)), 0.1, 0.0)
        gen = rng.uniform(0, 1, (8, 8, 3))
        assert gcbr_loss(real, gen) == 0.0

    def test_single_weighted_pixel(self):
        dab = np.zeros((9, 9))
        dab[4, 4] = 0.5
        real = forward_compose(0.5, 0.0, dab)
        alpha = 0.3 / 8.0  # a column ramp of slope alpha adds 8*alpha to gx
        gen = real + (alpha * (np.arange(9) - 4.0))[None, :, None]
        loss = gcbr_loss(real, gen)

        # oracle: residual weight carried by the other pixels
        from progstain.deconv import dab_concentration, normalize_weight
        from progstain.gradients import gradient_magnitude, to_gray
        eta = normalize_weight(dab_concentration(real))
        diff2 = (gradient_magnitude(to_gray(gen)) - gradient_magnitude(to_gray(real))) ** 2
        assert eta[4, 4] == 1.0
        assert abs(diff2[4, 4] - 0.09) < 1e-12
        others = eta.copy()
        others[4, 4] = 0
        bound = np.sum(others * diff2) + 0.09 * others.sum()
        assert abs(loss - 0.09) <= bound + 1e-12
        assert loss == pytest.approx(0.09, abs=1e-9)

    def test_not_symmetric(self):
        dab = np.zeros((9, 9))
        dab[2:7, 2:7] = 0.6
        real = forward_compose(0.2, 0.0, dab)
        gen = forward_compose(np.linspace(0.1, 0.6, 9)[None, :], 0.0, np.zeros((9, 9)))
        assert gcbr_loss(gen, real) == 0.0  # gen carries no DAB, so no weight
        assert gcbr_loss(real, gen) > 0.01


class TestTotal:
    def test_stage2(self):
        assert total_loss(2, {"dab_cf": 0.04}).total == pytest.approx(0.02, abs=1e-15)

    def test_stage3(self):
        assert total_loss(3, {"gcbr": 0.09}).total == pytest.approx(0.09, abs=1e-15)

    def test_stage1(self):
        out = total_loss(1, {"adv": 0.0, "patchnce": 0.1, "asp": 0.1, "gp": 0.1})
        assert out.total == pytest.approx(3.0, abs=1e-12)

    def test_adv_enters_stage1(self):
        out = total_loss(1, {"adv": 0.7, "patchnce": 0.0, "asp": 0.0, "gp": 0.0})
        assert out.total == pytest.approx(0.7)

    def test_other_stage_terms_ignored(self):
        out = total_loss(2, {"dab_cf": 0.1, "gcbr": 5.0}, LossConfig(lambda_dab=2.0))
        assert out.total == pytest.approx(0.2)
        assert out.active() == {"stage": 2, "dab_cf": 0.1, "total": out.total}

    @pytest.mark.parametrize("stage", [0, 4, -1])
    def test_invalid_stage(self, stage):
        with pytest.raises(ValueError):
            total_loss(stage, {})

    def test_unknown_term(self):
        with pytest.raises(ValueError):
            total_loss(2, {"dabcf": 1.0})
