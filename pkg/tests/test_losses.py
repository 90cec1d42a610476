import math

import numpy as np
import numpy.testing as npt
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings, strategies as st

from twf.attention import MaskPair
from twf.errors import NonFiniteLossError
from twf.losses import (
    LossWeights,
    aux_diversity_loss,
    cl_replay_loss,
    estimate_fisher_diag,
    estimate_margins,
    ewc_penalty,
    fp_loss,
    margin_relu,
    mask_bce,
    masked_feature_distillation,
    total_objective,
)

from .oracles import brute_bce, brute_diversity, brute_masked_distillation, central_difference

torch.set_default_dtype(torch.float32)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


class TestLossWeights:
    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(alpha=-0.1)

    def test_temperature_positive(self):
        with pytest.raises(ValueError):
            LossWeights(temperature_aux=0.0)


class TestMarginReLU:
    def test_definition(self):
        x = torch.tensor([[-1.0, -0.2, 0.3]]).view(1, 1, 3)
        npt.assert_allclose(margin_relu(x, [-0.5]).flatten(), [-0.5, -0.2, 0.3])

    def test_zero_margin_is_relu(self):
        x = torch.randn(2, 3, 4, 4)
        assert torch.equal(margin_relu(x, torch.zeros(3)), torch.relu(x))

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-5, 0), st.integers(0, 10_000))
    def test_non_negative_inputs_untouched(self, m, seed):
        x = torch.rand(2, 3, 2, 2, generator=torch.Generator().manual_seed(seed))
        assert torch.equal(margin_relu(x, torch.full((3,), m)), x)

    def test_channel_count_checked(self):
        with pytest.raises(ValueError):
            margin_relu(torch.zeros(1, 3, 2, 2), torch.zeros(2))


class TestMargins:
    def test_negative_mean_per_channel(self):
        class Fixed(nn.Module):
            def forward_with_taps(self, x):
                return None, [x]

        x = torch.tensor([[[[-1.0, -3.0], [2.0, 0.5]]], [[[-2.0, 4.0], [1.0, 1.0]]]])
        (m,) = estimate_margins(Fixed(), [x])
        assert m.item() == pytest.approx(-2.0)

    def test_non_positive_and_finite(self):
        class Rand(nn.Module):
            def forward_with_taps(self, x):
                return None, [x, x.abs()]

        ms = estimate_margins(Rand(), [torch.randn(8, 3, 4, 4)])
        for m in ms:
            assert torch.isfinite(m).all() and (m <= 0).all()
        assert torch.equal(ms[1], torch.zeros(3))


class TestMaskedDistillation:
    def test_zero_when_student_matches(self):
        h_hat = torch.randn(3, 4, 5, 5)
        margins = -torch.rand(4)
        mask = (torch.rand(3, 4, 5, 5) > 0.5).float()
        assert masked_feature_distillation(margin_relu(h_hat, margins), h_hat, mask, margins).item() == 0.0

    def test_zero_mask_annihilates(self):
        h, h_hat = torch.randn(2, 3, 4, 4), torch.randn(2, 3, 4, 4)
        assert masked_feature_distillation(h, h_hat, torch.zeros_like(h), torch.zeros(3)).item() == 0.0

    def test_direct_formula(self):
        one = torch.ones(1, 1, 1, 1)
        assert masked_feature_distillation(one, 2 * one, one, torch.zeros(1)).item() == 1.0

    def test_matches_oracle(self):
        g = torch.Generator().manual_seed(0)
        h, h_hat = torch.randn(4, 3, 5, 5, generator=g), torch.randn(4, 3, 5, 5, generator=g)
        mask = (torch.rand(4, 3, 5, 5, generator=g) > 0.4).float()
        margins = -torch.rand(3, generator=g)
        got = masked_feature_distillation(h.double(), h_hat.double(), mask.double(), margins.double())
        assert got.item() == pytest.approx(
            brute_masked_distillation(h, h_hat, mask, margins.numpy()), rel=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_mask_locality(self, seed):
        g = torch.Generator().manual_seed(seed)
        h, h_hat = torch.randn(2, 3, 4, 4, generator=g), torch.randn(2, 3, 4, 4, generator=g)
        mask = (torch.rand(2, 3, 4, 4, generator=g) > 0.5).float()
        margins = -torch.rand(3, generator=g)
        base = masked_feature_distillation(h, h_hat, mask, margins)
        perturbed = h + (1 - mask) * 100 * torch.randn(2, 3, 4, 4, generator=g)
        assert masked_feature_distillation(perturbed, h_hat, mask, margins).item() == base.item()

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            masked_feature_distillation(torch.zeros(1, 2, 3, 3), torch.zeros(1, 2, 3, 3),
                                        torch.zeros(1, 2, 2, 2), torch.zeros(2))


class TestMaskBCE:
    def test_single_unit(self):
        soft = torch.full((1, 1, 1, 1), 0.999, dtype=torch.float64)
        assert mask_bce(soft, torch.ones_like(soft)).item() == pytest.approx(-math.log(0.999), rel=1e-9)
        assert -math.log(0.999) == pytest.approx(1.0005e-3, rel=1e-4)

    def test_clamped_at_extremes(self):
        soft = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
        stored = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        assert mask_bce(soft, stored).item() == pytest.approx(2 * -math.log(1e-6), rel=1e-6)

    def test_matches_oracle(self):
        g = torch.Generator().manual_seed(3)
        soft = torch.rand(5, 2, 3, 3, generator=g, dtype=torch.float64)
        stored = (torch.rand(5, 2, 3, 3, generator=g) > 0.5).double()
        assert mask_bce(soft, stored).item() == pytest.approx(brute_bce(soft, stored), rel=1e-12)


def _pairs(shapes, seed, p=0.5):
    g = torch.Generator().manual_seed(seed)
    out = []
    for s in shapes:
        soft = torch.rand(s, generator=g)
        out.append(MaskPair(soft, (torch.rand(s, generator=g) < p).float()))
    return out


class TestFPLoss:
    def test_empty_replay_matched_student(self):
        sib = [torch.randn(3, 2, 4, 4), torch.randn(3, 4, 2, 2)]
        margins = [-torch.rand(2), -torch.rand(4)]
        student = [margin_relu(s, m) for s, m in zip(sib, margins)]
        masks = _pairs([s.shape for s in sib], 0)
        assert fp_loss(student, sib, masks, margins, None, 0).item() == 0.0

    def test_zero_weights(self):
        sib = [torch.randn(3, 2, 4, 4)]
        masks = _pairs([sib[0].shape], 1)
        stored = [torch.ones(1, 2, 4, 4)]
        out = fp_loss([torch.randn(3, 2, 4, 4)], sib, masks, [torch.zeros(2)], stored, 1, 0.0, 0.0)
        assert out.item() == 0.0

    def test_doubling_lambda_doubles_first_term(self):
        g = torch.Generator().manual_seed(2)
        sib = [torch.randn(4, 2, 4, 4, generator=g)]
        stu = [torch.randn(4, 2, 4, 4, generator=g)]
        masks = _pairs([sib[0].shape], 3)
        a = fp_loss(stu, sib, masks, [torch.zeros(2)], None, 0, lambda_fp=0.3)
        b = fp_loss(stu, sib, masks, [torch.zeros(2)], None, 0, lambda_fp=0.6)
        assert b.item() == 2 * a.item()

    def test_replay_term_uses_last_items(self):
        sib = [torch.zeros(3, 1, 2, 2)]
        soft = torch.full((3, 1, 2, 2), 0.5)
        soft[-1] = 0.9
        masks = [MaskPair(soft, (soft > 0.5).float())]
        stored = [torch.ones(1, 1, 2, 2)]
        out = fp_loss([torch.zeros(3, 1, 2, 2)], sib, masks, [torch.zeros(1)], stored, 1, 0.0, 1.0)
        assert out.item() == pytest.approx(-4 * math.log(0.9), rel=1e-6)

    def test_missing_stored_masks(self):
        sib = [torch.zeros(2, 1, 2, 2)]
        with pytest.raises(ValueError):
            fp_loss(sib, sib, _pairs([sib[0].shape], 0), [torch.zeros(1)], None, 1, 1.0, 1.0)


class TestAuxDiversity:
    def test_identical_vectors_zero(self):
        m = torch.ones(4, 3, 2, 2, dtype=torch.float64)
        assert aux_diversity_loss([m], 1.0, 0.5).item() == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal_pair_value(self):
        m = torch.zeros(2, 2, 1, 1)
        m[0, 0] = 1.0
        m[1, 1] = 1.0
        value = aux_diversity_loss([m], temperature=1.0, lambda_aux=0.1).item()
        expected = -0.1 * 2 * (1 - math.log(0.5 * (math.e + 1)))
        assert value == pytest.approx(expected, abs=1e-7)
        assert value == pytest.approx(-0.0760, abs=1e-4)

    def test_lambda_zero(self):
        assert aux_diversity_loss([torch.rand(3, 4, 2, 2)], 1.0, 0.0).item() == 0.0

    def test_needs_two_examples(self):
        with pytest.raises(ValueError):
            aux_diversity_loss([torch.rand(1, 4, 2, 2)])

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 6), st.integers(1, 5), st.floats(0.1, 5.0), st.integers(0, 10_000))
    def test_non_positive_and_matches_oracle(self, n, c, T, seed):
        g = torch.Generator().manual_seed(seed)
        masks = [torch.rand(n, c, 3, 3, generator=g, dtype=torch.float64) + 0.01 for _ in range(2)]
        value = aux_diversity_loss(masks, T, 0.7).item()
        assert value <= 1e-12
        pooled = [m.mean(dim=(2, 3)).numpy() for m in masks]
        assert value == pytest.approx(brute_diversity(pooled, T, 0.7), rel=1e-9, abs=1e-12)


class TestCLReplay:
    def test_direct_formula(self):
        out = cl_replay_loss(torch.tensor([[1.0, 0.0]]), torch.zeros(1, 2), torch.tensor([0]), 1.0, 0.0)
        assert out.item() == 1.0

    def test_saturated_match_is_near_zero(self):
        logits = torch.tensor([[20.0, 0.0], [0.0, 25.0]])
        out = cl_replay_loss(logits, logits.clone(), torch.tensor([0, 1]), 0.5, 1.0)
        assert 0.0 <= out.item() <= 1e-6

    def test_zero_weights(self):
        assert cl_replay_loss(torch.randn(3, 4), torch.randn(3, 4), torch.tensor([0, 1, 2]), 0, 0).item() == 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            cl_replay_loss(torch.zeros(2, 3), torch.zeros(2, 4), torch.tensor([0, 1]), 1, 1)


class TestEwC:
    def test_zero_at_anchor(self):
        theta = torch.randn(5)
        assert ewc_penalty(theta, theta.clone(), torch.rand(5), 3.0).item() == 0.0

    def test_direct_formula(self):
        out = ewc_penalty(torch.tensor([1.0, 2.0]), torch.zeros(2), torch.tensor([0.5, 1.0]), 2.0)
        assert out.item() == 9.0

    def test_zero_fisher(self):
        assert ewc_penalty(torch.randn(4), torch.randn(4), torch.zeros(4), 5.0).item() == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ewc_penalty(torch.zeros(3), torch.zeros(2), torch.zeros(3), 1.0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0, 10))
    def test_non_negative(self, seed, lam):
        g = torch.Generator().manual_seed(seed)
        out = ewc_penalty(torch.randn(6, generator=g), torch.randn(6, generator=g),
                          torch.rand(6, generator=g), lam)
        assert out.item() >= 0.0

    def test_dict_form(self):
        theta = {"a": torch.tensor([1.0]), "b": torch.tensor([2.0])}
        anchor = {"a": torch.zeros(1), "b": torch.zeros(1)}
        fisher = {"a": torch.tensor([0.5]), "b": torch.tensor([1.0])}
        assert ewc_penalty(theta, anchor, fisher, 2.0).item() == 9.0


class TestFisher:
    def test_non_negative(self):
        torch.manual_seed(0)
        model = nn.Sequential(nn.Linear(3, 4), nn.Tanh(), nn.Linear(4, 3))
        batches = [(torch.randn(8, 3), torch.randint(0, 3, (8,))) for _ in range(3)]
        fisher = estimate_fisher_diag(model, batches)
        assert set(fisher) == {n for n, _ in model.named_parameters()}
        assert all((f >= 0).all() for f in fisher.values())

    def test_stationary_point_gives_zero(self):
        model = nn.Linear(1, 1)
        with torch.no_grad():
            model.weight.fill_(0.0)
            model.bias.fill_(0.0)

        def sq(out, y):
            return (out.squeeze(-1) - y) ** 2

        fisher = estimate_fisher_diag(model, [(torch.ones(1, 1), torch.zeros(1))], nll=sq)
        assert all(torch.equal(f, torch.zeros_like(f)) for f in fisher.values())

    def test_gaussian_mean_closed_form(self):
        # y ~ N(mu, sigma^2): the score w.r.t. mu is (y - mu)/sigma^2 and its Fisher is 1/sigma^2
        sigma = 2.0

        class Mean(nn.Module):
            def __init__(self):
                super().__init__()
                self.mu = nn.Parameter(torch.tensor([0.5]))

            def forward(self, x):
                return self.mu.expand(x.shape[0])

        def nll(out, y):
            return (y - out) ** 2 / (2 * sigma ** 2)

        g = torch.Generator().manual_seed(0)
        y = 0.5 + sigma * torch.randn(10_000, generator=g)
        batches = [(torch.zeros(1000, 1), y[i:i + 1000]) for i in range(0, 10_000, 1000)]
        fisher = estimate_fisher_diag(Mean(), batches, nll=nll)["mu"].item()
        assert fisher == pytest.approx(1 / sigma ** 2, rel=0.05)

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            estimate_fisher_diag(nn.Linear(2, 2), [])


class TestTotalObjective:
    def test_sum(self):
        out = total_objective(torch.tensor(1.0), torch.tensor(0.5), torch.tensor(0.25), torch.tensor(-0.05))
        assert out.item() == pytest.approx(1.70)

    def test_nan_names_the_term(self):
        with pytest.raises(NonFiniteLossError) as info:
            total_objective(torch.tensor(1.0), torch.tensor(float("nan")), 0.0, 0.0)
        assert info.value.context["term"] == "l_cl"

    def test_regulariser_is_named(self):
        with pytest.raises(NonFiniteLossError) as info:
            total_objective(torch.tensor(1.0), 0.0, 0.0, 0.0, torch.tensor(float("inf")))
        assert info.value.context["term"] == "reg"


class TestGradients:
    """Autodiff against central differences on toys with fewer than 100 parameters."""

    TOL = 1e-3

    def _check(self, fn, x0):
        x = torch.tensor(x0, dtype=torch.float64, requires_grad=True)
        fn(x).backward()
        fd = central_difference(lambda v: fn(torch.tensor(v)).item(), x0)
        assert rel_err(x.grad.numpy(), fd) <= self.TOL

    def test_masked_distillation(self):
        rng = np.random.default_rng(0)
        h_hat = torch.tensor(rng.normal(size=(2, 2, 3, 3)))
        mask = torch.tensor((rng.uniform(size=(2, 2, 3, 3)) > 0.5).astype(float))
        margins = torch.tensor([-0.3, -0.1], dtype=torch.float64)
        self._check(lambda h: masked_feature_distillation(h, h_hat, mask, margins),
                    rng.normal(size=(2, 2, 3, 3)))

    def test_mask_bce(self):
        rng = np.random.default_rng(1)
        stored = torch.tensor((rng.uniform(size=(3, 2, 2, 2)) > 0.5).astype(float))
        self._check(lambda z: mask_bce(torch.sigmoid(z), stored), rng.normal(size=(3, 2, 2, 2)))

    def test_aux_diversity(self):
        rng = np.random.default_rng(2)
        self._check(lambda z: aux_diversity_loss([torch.sigmoid(z)], 0.5, 0.3),
                    rng.normal(size=(4, 3, 2, 2)))

    def test_cl_replay(self):
        rng = np.random.default_rng(3)
        stored = torch.tensor(rng.normal(size=(4, 5)))
        y = torch.tensor([0, 3, 1, 4])
        self._check(lambda z: cl_replay_loss(z, stored, y, 0.3, 0.9), rng.normal(size=(4, 5)))

    def test_ewc(self):
        rng = np.random.default_rng(4)
        anchor, fisher = torch.tensor(rng.normal(size=20)), torch.tensor(rng.uniform(size=20))
        self._check(lambda t: ewc_penalty(t, anchor, fisher, 1.7), rng.normal(size=20))

    def test_total_objective(self):
        rng = np.random.default_rng(5)
        y = torch.tensor([1, 0, 2])

        def fn(z):
            ce = torch.nn.functional.cross_entropy(z[:3], y)
            l_cl = cl_replay_loss(z[3:], torch.zeros(3, 3, dtype=torch.float64), y, 0.5, 0.5)
            return total_objective(ce, l_cl, (z ** 2).sum() * 1e-2, -0.01 * z.sum())

        self._check(fn, rng.normal(size=(6, 3)))
