import logging
import math

import numpy as np
import pytest

from refseg3d import autodiff as ad
from refseg3d.autodiff import Tensor
from refseg3d.errors import ContractError, ShapeError, TrainingError
from refseg3d.gradcheck import finite_difference_check
from refseg3d.losses import (
    LossConfig,
    LossReport,
    area_loss,
    make_report,
    p2p_core,
    p2p_loss,
    seg_loss,
    total_loss,
)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


class TestLossConfig:
    def test_defaults(self):
        cfg = LossConfig()
        assert (cfg.lambda_seg, cfg.lambda_area, cfg.lambda_p2p) == (1.0, 1.0, 0.05)
        assert cfg.p2p_form == "log_form"
        assert cfg.max_negatives == 4096

    @pytest.mark.parametrize("kw", [{"tau": 0.0}, {"tau": -1.0},
                                    {"lambda_seg": -0.1},
                                    {"lambda_area": float("nan")},
                                    {"p2p_form": "squared"},
                                    {"max_negatives": 0}])
    def test_invalid_rejected(self, kw):
        with pytest.raises(ContractError):
            LossConfig(**kw)


class TestSegLoss:
    def test_zero_logits_give_ln2_for_any_targets(self):
        for y in (np.zeros(7), np.ones(7), np.array([0, 1, 0, 1, 1, 0, 1.0])):
            loss = seg_loss(Tensor(np.zeros((1, 7))), y)
            assert abs(float(loss.data) - math.log(2.0)) < 1e-12

    def test_confident_correct_logits_near_zero(self):
        y = np.array([1.0, 0.0, 1.0, 0.0])
        x = np.where(y == 1.0, 10.0, -10.0).reshape(1, -1)
        assert float(seg_loss(Tensor(x), y).data) < 1e-3

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=12) * 3.0
        y = rng.integers(0, 2, size=12).astype(np.float64)
        p = sigmoid(x)
        naive = -np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
        got = float(seg_loss(Tensor(x.reshape(1, -1)), y).data)
        assert abs(got - naive) < 1e-12

    def test_stable_at_huge_logits(self):
        x = np.array([[800.0, -800.0]])
        loss = seg_loss(Tensor(x), np.array([0.0, 1.0]))
        assert np.isfinite(loss.data)
        # both points are maximally wrong: softplus(800) = 800 each
        assert abs(float(loss.data) - 800.0) < 1e-9

    def test_nonnegative(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            x = rng.normal(size=(1, 9)) * 5
            y = rng.integers(0, 2, size=9).astype(np.float64)
            assert float(seg_loss(Tensor(x), y).data) >= 0.0

    def test_length_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            seg_loss(Tensor(np.zeros((1, 3))), np.zeros(4))

    def test_nonbinary_targets_rejected(self):
        with pytest.raises(ContractError, match="binary"):
            seg_loss(Tensor(np.zeros((1, 3))), np.array([0.0, 0.5, 1.0]))

    def test_finite_difference(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(1, 10)), requires_grad=True)
        y = rng.integers(0, 2, size=10).astype(np.float64)
        err = finite_difference_check(lambda: seg_loss(x, y), [x], rng=rng)
        assert err < 1e-4


class TestAreaLoss:
    def test_zero_logits_give_exactly_half(self):
        assert float(area_loss(Tensor(np.zeros((1, 9)))).data) == 0.5

    def test_matches_sigmoid_mean_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(1, 17)) * 4.0
        got = float(area_loss(Tensor(x)).data)
        assert abs(got - sigmoid(x).mean()) < 1e-12

    def test_monotone_in_each_logit(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=11)
        base = float(area_loss(Tensor(x.copy())).data)
        for i in range(11):
            lowered = x.copy()
            lowered[i] -= 0.5
            assert float(area_loss(Tensor(lowered)).data) < base

    def test_open_unit_interval(self):
        x = np.array([[-30.0, 40.0]])
        v = float(area_loss(Tensor(x)).data)
        assert 0.0 < v < 1.0

    def test_finite_difference(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(1, 8)), requires_grad=True)
        err = finite_difference_check(lambda: area_loss(x), [x], rng=rng)
        assert err < 1e-4


class TestP2PCore:
    def test_degenerate_single_positive_no_negatives(self):
        pos = Tensor(np.array([[1.0, 0.0, 0.0]]))
        neg = Tensor(np.zeros((0, 3)))
        assert float(p2p_core(pos, neg, 0.07, "as_written").data) == -1.0
        assert float(p2p_core(pos, neg, 0.07, "log_form").data) == 0.0

    def test_closed_form_orthogonal_negative(self):
        # identical unit positives, one orthogonal negative, tau = 1:
        # ratio = e / (e + 1) for every positive
        pos = Tensor(np.tile([1.0, 0.0, 0.0], (3, 1)))
        neg = Tensor(np.array([[0.0, 1.0, 0.0]]))
        ratio = math.e / (math.e + 1.0)
        got = float(p2p_core(pos, neg, 1.0, "as_written").data)
        assert abs(got + ratio) < 1e-12
        got = float(p2p_core(pos, neg, 1.0, "log_form").data)
        assert abs(got + math.log(ratio)) < 1e-12

    def test_ratio_bounds_both_forms(self):
        rng = np.random.default_rng(6)
        pos = rng.normal(size=(4, 3))
        neg = rng.normal(size=(6, 3))
        pos /= np.linalg.norm(pos, axis=1, keepdims=True)
        neg /= np.linalg.norm(neg, axis=1, keepdims=True)
        aw = float(p2p_core(Tensor(pos), Tensor(neg), 0.5, "as_written").data)
        lf = float(p2p_core(Tensor(pos), Tensor(neg), 0.5, "log_form").data)
        assert -1.0 <= aw < 0.0
        assert lf >= 0.0


class TestP2PLoss:
    def cfg(self, **kw):
        return LossConfig(**kw)

    def test_moving_positive_toward_average_decreases_loss(self):
        neg = np.array([[0.0, 0.0, 1.0]])
        far = np.array([[1.0, 0.0, 0.0], [np.cos(0.8), np.sin(0.8), 0.0]])
        near = np.array([[1.0, 0.0, 0.0], [np.cos(0.1), np.sin(0.1), 0.0]])
        rng = np.random.default_rng(7)
        y = np.array([1.0, 1.0, 0.0])
        loss_far = float(p2p_loss(Tensor(np.vstack([far, neg])), y,
                                  self.cfg(tau=1.0), rng).data)
        loss_near = float(p2p_loss(Tensor(np.vstack([near, neg])), y,
                                   self.cfg(tau=1.0), rng).data)
        assert loss_near < loss_far

    def test_normalization_applied_before_scoring(self):
        # scaling all features must not change the loss
        rng = np.random.default_rng(8)
        feats = rng.normal(size=(8, 4))
        y = (rng.uniform(size=8) < 0.5).astype(np.float64)
        y[0], y[1] = 1.0, 0.0  # both sides nonempty
        a = float(p2p_loss(Tensor(feats), y, self.cfg(), np.random.default_rng(1)).data)
        b = float(p2p_loss(Tensor(feats * 37.0), y, self.cfg(),
                           np.random.default_rng(1)).data)
        assert abs(a - b) < 1e-9

    @pytest.mark.parametrize("y", [np.zeros(5), np.ones(5)])
    def test_one_sided_targets_skip_with_warning(self, y, caplog):
        rng = np.random.default_rng(9)
        feats = Tensor(np.random.default_rng(9).normal(size=(5, 3)))
        with caplog.at_level(logging.WARNING, logger="refseg3d.losses"):
            loss = p2p_loss(feats, y, self.cfg(), rng)
        assert float(loss.data) == 0.0
        assert any("skipped" in rec.message for rec in caplog.records)

    def test_negative_subsampling_deterministic(self):
        rng_data = np.random.default_rng(10)
        feats = rng_data.normal(size=(40, 4))
        y = np.zeros(40)
        y[:4] = 1.0
        cfg = self.cfg(max_negatives=8)
        a = float(p2p_loss(Tensor(feats), y, cfg, np.random.default_rng(3)).data)
        b = float(p2p_loss(Tensor(feats), y, cfg, np.random.default_rng(3)).data)
        c = float(p2p_loss(Tensor(feats), y, cfg, np.random.default_rng(4)).data)
        assert a == b
        assert a != c  # different draw, generically different subset

    def test_cap_larger_than_pool_keeps_all_negatives(self):
        rng_data = np.random.default_rng(11)
        feats = rng_data.normal(size=(10, 3))
        y = np.zeros(10)
        y[:3] = 1.0
        a = float(p2p_loss(Tensor(feats), y, self.cfg(max_negatives=4096),
                           np.random.default_rng(0)).data)
        b = float(p2p_loss(Tensor(feats), y, self.cfg(max_negatives=7),
                           np.random.default_rng(99)).data)
        assert a == b  # exactly 7 negatives exist, no sampling either way

    def test_length_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            p2p_loss(Tensor(np.zeros((4, 3))), np.zeros(5), self.cfg(),
                     np.random.default_rng(0))

    @pytest.mark.parametrize("form", ["log_form", "as_written"])
    def test_finite_difference(self, form):
        rng = np.random.default_rng(12)
        feats = Tensor(rng.normal(size=(9, 3)), requires_grad=True)
        y = np.zeros(9)
        y[:4] = 1.0  # 4 positives, 5 negatives
        cfg = self.cfg(p2p_form=form, tau=0.5)

        def fn():
            return p2p_loss(feats, y, cfg, np.random.default_rng(0))

        err = finite_difference_check(fn, [feats], rng=rng)
        assert err < 1e-4


class TestTotalLoss:
    def scalars(self, s, a, p):
        return Tensor(np.asarray(s)), Tensor(np.asarray(a)), Tensor(np.asarray(p))

    def test_weighted_sum_example(self):
        s, a, p = self.scalars(0.6, 0.5, 2.0)
        total = total_loss(s, a, p, LossConfig())
        assert abs(float(total.data) - 1.2) < 1e-12

    def test_zero_weights_reduce_to_seg(self):
        s, a, p = self.scalars(0.37, 0.9, 4.2)
        cfg = LossConfig(lambda_area=0.0, lambda_p2p=0.0)
        assert float(total_loss(s, a, p, cfg).data) == 0.37

    def test_additive_decomposition_exact(self):
        s, a, p = self.scalars(0.61, 0.47, 1.93)
        cfg = LossConfig(lambda_seg=0.8, lambda_area=1.3, lambda_p2p=0.05)
        full = float(total_loss(s, a, p, cfg).data)
        seg_only = float(total_loss(s, a, p, LossConfig(
            lambda_seg=0.8, lambda_area=0.0, lambda_p2p=0.0)).data)
        area_only = float(total_loss(s, a, p, LossConfig(
            lambda_seg=0.0, lambda_area=1.3, lambda_p2p=0.0)).data)
        p2p_only = float(total_loss(s, a, p, LossConfig(
            lambda_seg=0.0, lambda_area=0.0, lambda_p2p=0.05)).data)
        assert full == (seg_only + area_only) + p2p_only

    def test_doubling_weights_doubles_total_exactly(self):
        s, a, p = self.scalars(0.21, 0.77, 3.1)
        cfg = LossConfig(lambda_seg=0.7, lambda_area=0.3, lambda_p2p=0.05)
        twice = LossConfig(lambda_seg=1.4, lambda_area=0.6, lambda_p2p=0.1)
        assert float(total_loss(s, a, p, twice).data) == \
            2.0 * float(total_loss(s, a, p, cfg).data)

    def test_nan_component_halts(self):
        s, a, p = self.scalars(float("nan"), 0.5, 0.1)
        with pytest.raises(TrainingError, match="seg"):
            total_loss(s, a, p, LossConfig())

    def test_report_consistency(self):
        s, a, p = self.scalars(0.6, 0.5, 2.0)
        cfg = LossConfig()
        total = total_loss(s, a, p, cfg)
        rep = make_report(s, a, p, total)
        assert isinstance(rep, LossReport)
        recomputed = (cfg.lambda_seg * rep.seg + cfg.lambda_area * rep.area
                      + cfg.lambda_p2p * rep.p2p)
        assert abs(rep.total - recomputed) < 1e-12

    def test_gradient_through_total(self):
        rng = np.random.default_rng(13)
        x = Tensor(rng.normal(size=(1, 6)), requires_grad=True)
        feats = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
        y = np.array([1.0, 1.0, 0.0, 0.0, 1.0, 0.0])
        cfg = LossConfig()

        def fn():
            return total_loss(seg_loss(x, y), area_loss(x),
                              p2p_loss(feats, y, cfg, np.random.default_rng(0)), cfg)

        err = finite_difference_check(fn, [x, feats], rng=rng)
        assert err < 1e-4
