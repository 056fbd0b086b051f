import math

import pytest
import torch
from torch import nn

from sapgan.gradcheck import compare_gradients
from sapgan.losses import (
    discriminator_loss,
    generator_loss,
    gradient_penalty,
    interpolate,
)

from conftest import seeded_randn


def zero_critic(x):
    return torch.zeros(x.shape[0], dtype=x.dtype)


def sum_critic(x):
    return x.flatten(1).sum(dim=1)


class TestInterpolate:
    def test_endpoints(self):
        real = seeded_randn(3, 2, 4, 4, seed=0)
        fake = seeded_randn(3, 2, 4, 4, seed=1)
        ones = torch.ones(3, 1, 1, 1)
        assert torch.equal(interpolate(real, fake, ones), real)
        assert torch.equal(interpolate(real, fake, torch.zeros(3, 1, 1, 1)), fake)

    def test_shape_checks(self):
        real = torch.zeros(2, 1, 4, 4)
        with pytest.raises(ValueError, match="must match"):
            interpolate(real, torch.zeros(2, 1, 2, 2), torch.zeros(2, 1, 1, 1))
        with pytest.raises(ValueError, match="broadcast"):
            interpolate(real, real, torch.zeros(2))


class TestGradientPenalty:
    def test_constant_critic_gives_one(self):
        real = seeded_randn(4, 3, 8, 8, seed=2)
        fake = seeded_randn(4, 3, 8, 8, seed=3)
        gp = gradient_penalty(zero_critic, real, fake, generator=torch.Generator().manual_seed(0))
        assert gp.item() == pytest.approx(1.0)

    def test_sum_critic_closed_form(self):
        # d/dx sum(x) = 1 everywhere, so the norm is sqrt(elements per sample)
        real = seeded_randn(2, 3, 4, 4, seed=4)
        fake = seeded_randn(2, 3, 4, 4, seed=5)
        gp = gradient_penalty(sum_critic, real, fake, generator=torch.Generator().manual_seed(1))
        expect = (math.sqrt(48) - 1.0) ** 2
        assert gp.item() == pytest.approx(expect, rel=1e-5)

    def test_unit_gradient_critic_gives_zero(self):
        n = 2 * 2 * 2
        w = torch.full((n,), 1.0 / math.sqrt(n))

        def critic(x):
            return x.flatten(1) @ w

        real = seeded_randn(3, 2, 2, 2, seed=6)
        fake = seeded_randn(3, 2, 2, 2, seed=7)
        gp = gradient_penalty(critic, real, fake, generator=torch.Generator().manual_seed(2))
        assert gp.item() == pytest.approx(0.0, abs=1e-10)

    def test_deterministic_under_generator(self):
        real = seeded_randn(4, 1, 4, 4, seed=8)
        fake = seeded_randn(4, 1, 4, 4, seed=9)

        def critic(x):
            return (x.flatten(1) ** 2).sum(dim=1)

        a = gradient_penalty(critic, real, fake, generator=torch.Generator().manual_seed(3))
        b = gradient_penalty(critic, real, fake, generator=torch.Generator().manual_seed(3))
        assert torch.equal(a, b)

    def test_penalty_trains_critic_parameters(self):
        torch.manual_seed(0)
        lin = nn.Linear(16, 1)
        real = seeded_randn(4, 1, 4, 4, seed=10)
        fake = seeded_randn(4, 1, 4, 4, seed=11)
        gp = gradient_penalty(
            lambda x: lin(x.flatten(1)).squeeze(1), real, fake,
            generator=torch.Generator().manual_seed(4),
        )
        gp.backward()
        assert lin.weight.grad is not None
        assert lin.weight.grad.abs().max() > 0

    def test_works_under_no_grad(self):
        real = seeded_randn(2, 1, 2, 2, seed=12)
        fake = seeded_randn(2, 1, 2, 2, seed=13)
        with torch.no_grad():
            gp = gradient_penalty(sum_critic, real, fake, generator=torch.Generator().manual_seed(5))
        assert torch.isfinite(gp)

    def test_bad_critic_output_shape(self):
        real = seeded_randn(2, 1, 2, 2, seed=14)
        with pytest.raises(ValueError, match="one score per sample"):
            gradient_penalty(lambda x: x.flatten(1), real, real.clone(),
                             generator=torch.Generator().manual_seed(6))

    def test_finite_difference_agreement(self):
        # FD of a loss that itself contains a grad, so third derivatives of
        # the critic are exercised; the check targets the critic parameters
        # (the penalty deliberately cuts gradients to real/fake inputs)
        u = torch.tensor([[[[0.3]]], [[[0.8]]]], dtype=torch.float64)
        real = seeded_randn(2, 1, 2, 2, seed=15, dtype=torch.float64)
        fake = seeded_randn(2, 1, 2, 2, seed=16, dtype=torch.float64)

        def loss_fn(t):
            def critic(x):
                return torch.tanh(x.flatten(1)) @ t["w"]

            return gradient_penalty(critic, real, fake, u=u)

        tensors = {"w": seeded_randn(4, seed=17, dtype=torch.float64)}
        report = compare_gradients("gp_path", loss_fn, tensors)
        assert report.max_rel_error < 1e-4, report.to_json()

    def test_inputs_receive_no_gradients(self):
        # real data and generator outputs must not be trained by the penalty
        real = seeded_randn(2, 1, 2, 2, seed=22).requires_grad_(True)
        fake = seeded_randn(2, 1, 2, 2, seed=23).requires_grad_(True)
        gp = gradient_penalty(
            lambda x: (x.flatten(1) ** 2).sum(1), real, fake,
            generator=torch.Generator().manual_seed(10),
        )
        assert gp.requires_grad
        grads = torch.autograd.grad(gp, [real, fake], allow_unused=True)
        assert grads == (None, None)


class TestObjectives:
    def test_zero_critic_reduces_to_weighted_penalty(self):
        real = seeded_randn(4, 1, 4, 4, seed=18)
        fake = seeded_randn(4, 1, 4, 4, seed=19)
        loss, parts = discriminator_loss(
            zero_critic, real, fake, generator=torch.Generator().manual_seed(7)
        )
        assert loss.item() == pytest.approx(10.0)
        assert parts["wasserstein"] == 0.0
        assert parts["gp"] == pytest.approx(1.0)
        assert parts["drift"] == 0.0

    def test_drift_term(self):
        def critic(x):
            return torch.full((x.shape[0],), 3.0) + 0.0 * x.flatten(1).sum(1)

        real = seeded_randn(2, 1, 2, 2, seed=20)
        _, parts = discriminator_loss(
            critic, real, real.clone(), generator=torch.Generator().manual_seed(8)
        )
        assert parts["drift"] == pytest.approx(9.0)
        assert parts["d_real"] == pytest.approx(3.0)

    def test_wasserstein_sign(self):
        # critic scoring reals higher must lower the loss
        real = torch.ones(2, 1, 2, 2)
        fake = torch.zeros(2, 1, 2, 2)
        _, parts = discriminator_loss(
            sum_critic, real, fake, generator=torch.Generator().manual_seed(9)
        )
        assert parts["wasserstein"] == pytest.approx(-4.0)

    def test_generator_loss(self):
        fake = seeded_randn(3, 1, 2, 2, seed=21)
        assert generator_loss(zero_critic, fake).item() == 0.0
        assert generator_loss(sum_critic, fake).item() == pytest.approx(-fake.sum().item() / 3)
