"""Loss tests; expected values come from scalar hand math and nested-loop
numpy oracles written here, independent of the library internals."""

import math

import numpy as np
import pytest

from etide.losses import (LossConfig, ddr_loss, focal_elem, polarity_focal,
                          total_loss)
from etide.numerics import Tape, Tensor, grad_check, ops
from etide.numerics.tensor import Parameter


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

def focal_scalar_oracle(p, y, alpha, gamma, eps=1e-8):
    return (-alpha * y * (1 - p) ** gamma * math.log(p + eps)
            - (1 - alpha) * (1 - y) * p ** gamma * math.log(1 - p + eps))


def polarity_focal_oracle(logits, targets, cfg):
    p = 1.0 / (1.0 + np.exp(-logits.astype(np.float64)))
    b, t, c, h, w = logits.shape
    total = 0.0
    for bi in range(b):
        s = 0.0
        for ti in range(t):
            for ci in range(c):
                lam = cfg.lambda_on if ci == 0 else cfg.lambda_off
                for i in range(h):
                    for j in range(w):
                        s += lam * focal_scalar_oracle(
                            p[bi, ti, ci, i, j],
                            int(targets[bi, ti, ci, i, j]),
                            cfg.alpha, cfg.gamma, cfg.eps)
        total += s / (t * h * w)
    return total / b


def ddr_oracle(probs, targets, tau, eps=1e-8):
    p64 = probs.astype(np.float64)
    t64 = targets.astype(np.float64)
    b, t, _, _, _ = p64.shape

    def softmax(v):
        z = v / tau
        z = z - z.max()
        e = np.exp(z)
        return e / e.sum()

    total = 0.0
    for bi in range(b):
        acc = 0.0
        for ti in range(t - 1):
            pp = softmax((p64[bi, ti + 1] - p64[bi, ti]).reshape(-1))
            qq = softmax((t64[bi, ti + 1] - t64[bi, ti]).reshape(-1))
            acc += float(np.sum(pp * (np.log(pp + eps) - np.log(qq + eps))))
        total += acc / (t - 1)
    return total / b


def random_instance(seed, shape=(2, 3, 2, 4, 4), scale=2.0):
    rng = np.random.default_rng(seed)
    logits = rng.normal(scale=scale, size=shape).astype(np.float32)
    targets = (rng.random(shape) < 0.3).astype(np.float32)
    return logits, targets


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

class TestLossConfig:
    def test_defaults(self):
        cfg = LossConfig()
        assert (cfg.alpha, cfg.gamma) == (0.75, 2.0)
        assert cfg.lambda_on + cfg.lambda_off == pytest.approx(1.0)
        assert cfg.lambda_on == pytest.approx(0.65)
        assert cfg.alpha_ddr == 0.1 and cfg.tau == 1.0

    def test_lambda_normalization(self):
        cfg = LossConfig(lambda_on=1.3, lambda_off=0.7)
        assert cfg.lambda_on == pytest.approx(0.65)
        assert cfg.lambda_off == pytest.approx(0.35)

    def test_validation(self):
        with pytest.raises(ValueError):
            LossConfig(alpha=1.5)
        with pytest.raises(ValueError):
            LossConfig(tau=0.0)
        with pytest.raises(ValueError):
            LossConfig(lambda_on=-0.1)


# ---------------------------------------------------------------------------
# focal term
# ---------------------------------------------------------------------------

class TestFocalElem:
    def test_perfect_positive_goes_to_zero(self):
        assert focal_elem(1.0 - 1e-9, 1, 0.75, 2.0) < 1e-17

    def test_hand_values(self):
        assert focal_elem(0.5, 1, 0.75, 2.0) == pytest.approx(0.12997, abs=1e-4)
        assert focal_elem(0.5, 0, 0.75, 2.0) == pytest.approx(0.04332, abs=1e-4)

    def test_rejects_bad_label(self):
        with pytest.raises(ValueError):
            focal_elem(0.5, 2, 0.75, 2.0)


class TestPolarityFocal:
    def test_zero_logits_zero_targets_closed_form(self):
        cfg = LossConfig()
        logits = Tensor(np.zeros((1, 2, 2, 4, 4), dtype=np.float32))
        targets = np.zeros((1, 2, 2, 4, 4), dtype=np.float32)
        expected = 0.25 * 0.25 * math.log(2.0)
        assert polarity_focal(logits, targets, cfg).item() == pytest.approx(
            expected, abs=1e-5)

    def test_saturated_correct_logits_near_zero(self):
        cfg = LossConfig()
        rng = np.random.default_rng(0)
        targets = (rng.random((1, 2, 2, 4, 4)) < 0.4).astype(np.float32)
        logits = Tensor((targets * 2.0 - 1.0) * 50.0)
        assert total_loss(logits, targets, cfg).item() < 1e-6

    def test_lambda_swap_equals_channel_swap(self):
        logits, targets = random_instance(1)
        a = polarity_focal(Tensor(logits), targets,
                           LossConfig(lambda_on=0.65, lambda_off=0.35)).item()
        b = polarity_focal(Tensor(logits[:, :, ::-1].copy()),
                           targets[:, :, ::-1].copy(),
                           LossConfig(lambda_on=0.35, lambda_off=0.65)).item()
        assert a == pytest.approx(b, rel=1e-6)

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_nested_loop_oracle(self, seed):
        cfg = LossConfig()
        logits, targets = random_instance(seed)
        got = polarity_focal(Tensor(logits), targets, cfg).item()
        assert got == pytest.approx(polarity_focal_oracle(logits, targets, cfg),
                                    rel=1e-5)

    def test_rejects_nonbinary_targets(self):
        logits, targets = random_instance(0)
        targets[0, 0, 0, 0, 0] = 0.5
        with pytest.raises(ValueError, match="binary"):
            polarity_focal(Tensor(logits), targets, LossConfig())

    def test_gradient_signs(self):
        cfg = LossConfig()
        logits, targets = random_instance(2, shape=(1, 2, 2, 3, 3))
        param = Parameter(logits.astype(np.float64), "s", dtype=np.float64)
        with Tape() as tape:
            loss = polarity_focal(param, targets.astype(np.float64), cfg)
            tape.backward(loss)
        grad = param.grad
        assert np.all(grad[targets == 1] < 0)
        assert np.all(grad[targets == 0] > 0)

    def test_finite_at_extreme_logits(self):
        cfg = LossConfig()
        logits = Tensor(np.array([[-1e4, 1e4]], dtype=np.float32).reshape(
            1, 1, 2, 1, 1))
        targets = np.zeros((1, 1, 2, 1, 1), dtype=np.float32)
        val = polarity_focal(logits, targets, cfg).item()
        assert np.isfinite(val) and val >= 0


# ---------------------------------------------------------------------------
# temporal difference regularizer
# ---------------------------------------------------------------------------

class TestDdrLoss:
    def test_identical_inputs_zero(self):
        rng = np.random.default_rng(2)
        probs = rng.random((2, 4, 2, 3, 3)).astype(np.float32)
        got = ddr_loss(Tensor(probs), probs, tau=1.0).item()
        assert got == pytest.approx(0.0, abs=1e-6)

    def test_time_constant_inputs_zero(self):
        probs = np.full((1, 3, 2, 2, 2), 0.7, dtype=np.float32)
        targets = np.full((1, 3, 2, 2, 2), 0.2, dtype=np.float32)
        got = ddr_loss(Tensor(probs), targets, tau=1.0).item()
        assert got == pytest.approx(0.0, abs=1e-6)

    def test_hand_scalar_case(self):
        # T_out=2, 1x1 spatial, 2 channels: one difference vector of length 2
        probs = np.array([0.2, 0.6, 0.9, 0.3], dtype=np.float32).reshape(
            1, 2, 2, 1, 1)
        targets = np.array([0.1, 0.8, 0.5, 0.4], dtype=np.float32).reshape(
            1, 2, 2, 1, 1)
        tau = 1.0
        dp = [0.9 - 0.2, 0.3 - 0.6]
        dt = [0.5 - 0.1, 0.4 - 0.8]

        def softmax(v):
            e = [math.exp(x / tau) for x in v]
            s = sum(e)
            return [x / s for x in e]

        pp, qq = softmax(dp), softmax(dt)
        eps = 1e-8
        expected = sum(a * (math.log(a + eps) - math.log(b + eps))
                       for a, b in zip(pp, qq))
        got = ddr_loss(Tensor(probs), targets, tau).item()
        assert got == pytest.approx(expected, abs=1e-6)

    @pytest.mark.parametrize("seed,tau", [(0, 1.0), (1, 0.5), (2, 2.0)])
    def test_matches_oracle_random(self, seed, tau):
        rng = np.random.default_rng(seed)
        probs = rng.random((2, 4, 2, 3, 3)).astype(np.float32)
        targets = (rng.random((2, 4, 2, 3, 3)) < 0.4).astype(np.float32)
        got = ddr_loss(Tensor(probs), targets, tau).item()
        assert got == pytest.approx(ddr_oracle(probs, targets, tau), rel=1e-4,
                                    abs=1e-6)

    def test_shift_invariance_per_frame(self):
        rng = np.random.default_rng(4)
        probs = rng.random((1, 3, 2, 4, 4)).astype(np.float64) * 0.5
        targets = rng.random((1, 3, 2, 4, 4)).astype(np.float64) * 0.5
        base = ddr_loss(Tensor(probs), targets, tau=1.0).item()
        offs = np.array([0.0, 0.1, 0.25]).reshape(1, 3, 1, 1, 1)
        shifted = ddr_loss(Tensor(probs + offs), targets + offs, 1.0).item()
        assert shifted == pytest.approx(base, abs=1e-9)

    def test_requires_two_frames(self):
        probs = np.zeros((1, 1, 2, 2, 2), dtype=np.float32)
        with pytest.raises(ValueError, match="T_out"):
            ddr_loss(Tensor(probs), probs, tau=1.0)

    def test_nonnegative_sweep(self):
        rng = np.random.default_rng(5)
        for _ in range(25):
            probs = rng.random((1, 3, 2, 2, 2)).astype(np.float32)
            targets = (rng.random((1, 3, 2, 2, 2)) < 0.5).astype(np.float32)
            assert ddr_loss(Tensor(probs), targets, 1.0).item() >= -1e-7


# ---------------------------------------------------------------------------
# combined objective
# ---------------------------------------------------------------------------

class TestTotalLoss:
    def test_alpha_ddr_zero_is_bitwise_focal(self):
        cfg = LossConfig(alpha_ddr=0.0)
        logits, targets = random_instance(0)
        a = total_loss(Tensor(logits), targets, cfg).item()
        b = polarity_focal(Tensor(logits), targets, cfg).item()
        assert a == b

    def test_composition_matches_parts(self):
        cfg = LossConfig()
        logits, targets = random_instance(3)
        t = Tensor(logits)
        whole = total_loss(t, targets, cfg).item()
        pol = polarity_focal(t, targets, cfg).item()
        probs = ops.sigmoid(t)
        reg = ddr_loss(probs, targets, cfg.tau, eps=cfg.eps).item()
        assert whole == pytest.approx(pol + cfg.alpha_ddr * reg, rel=1e-6)

    def test_finite_for_any_finite_logits(self):
        cfg = LossConfig()
        logits = np.array([-1e4, 1e4, 0.0, -3.3], dtype=np.float32).reshape(
            1, 2, 2, 1, 1)
        targets = np.array([0, 1, 1, 0], dtype=np.float32).reshape(
            1, 2, 2, 1, 1)
        assert np.isfinite(total_loss(Tensor(logits), targets, cfg).item())

    @pytest.mark.parametrize("alpha_ddr", [0.0, 0.1])
    def test_gradient_check(self, alpha_ddr):
        cfg = LossConfig(alpha_ddr=alpha_ddr)
        rng = np.random.default_rng(8)
        shape = (1, 3, 2, 4, 4)
        logits = Parameter(rng.normal(scale=1.5, size=shape), "s",
                           dtype=np.float64)
        targets = (rng.random(shape) < 0.3).astype(np.float64)
        # eps=1e-4: the loss is a mean over 96 cells, so per-cell gradients
        # are ~1e-7 and a smaller step hits float64 cancellation
        err = grad_check(lambda: total_loss(logits, targets, cfg),
                         [logits], eps=1e-4)
        assert err < 1e-5
