"""Tests of the training loop and its steps."""

import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from src.config import TrainConfig
from src.errors import (
    InvalidArgumentError,
    NumericalFailureError,
)
from src.geometry import (
    DTYPE,
    lorentz_distance,
    manifold_residual,
    sq_lorentz_distance,
)
from src.model import Model
from src.trainer import (
    Trainer,
    augment_views,
    embed_all,
    lr_at,
    mean_quantization_error,
    riemannian_step,
)


class TestAugmentViews:
    """Noisy, masked views."""

    def test_identity(self, rng):
        x = rng.normal(size=(10, 6))
        view_1, view_2 = augment_views(x, np.ones(6), 0.0, 0.0, rng)
        np.testing.assert_array_equal(view_1, x)
        np.testing.assert_array_equal(view_2, x)

    def test_mask_fraction(self, rng):
        view_1, view_2 = augment_views(np.ones((1000, 50)), np.ones(50), 0.0, 0.3, rng)
        for view in (view_1, view_2):
            assert abs(float(np.mean(view == 0.0)) - 0.3) < 0.02
        assert not np.array_equal(view_1, view_2)

    def test_noise_scale(self, rng):
        std = np.array([0.1, 10.0])
        view_1, _ = augment_views(np.zeros((20_000, 2)), std, 0.5, 0.0, rng)
        np.testing.assert_allclose(view_1.std(axis=0), 0.5 * std, rtol=0.05)

    def test_reproducible(self):
        x = np.arange(12.0).reshape(3, 4)
        a = augment_views(x, np.ones(4), 0.1, 0.2, np.random.default_rng(3))
        b = augment_views(x, np.ones(4), 0.1, 0.2, np.random.default_rng(3))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    @pytest.mark.parametrize('noise_std, mask_prob', [(-0.1, 0.1), (0.1, 1.0), (0.1, -0.1)])
    def test_invalid(self, rng, noise_std, mask_prob):
        with pytest.raises(InvalidArgumentError):
            augment_views(np.ones((2, 2)), np.ones(2), noise_std, mask_prob, rng)


class TestRiemannianStep:
    """Riemannian SGD on the Lorentz manifold."""

    def test_zero_gradient(self, random_points):
        p = random_points(10, 3, 2.0)
        torch.testing.assert_close(riemannian_step(p, torch.zeros_like(p), 0.1, 2.0), p, rtol=0, atol=1e-12)

    def test_stays_on_manifold(self, random_points, generator):
        p = random_points(50, 4, 0.5)
        grad = torch.randn(p.shape, generator=generator, dtype=DTYPE)
        moved = riemannian_step(p, grad, 0.1, 0.5)
        assert float(manifold_residual(moved, 0.5).max()) < 1e-12
        assert bool(torch.all(moved[..., 0] > 0))

    def test_converges_to_target(self, random_points):
        theta = 1.5
        x, target = random_points(2, 3, theta, scale=0.3)
        for _ in range(200):
            x = x.detach().requires_grad_(True)
            sq_lorentz_distance(x, target, theta).backward()
            x = riemannian_step(x.detach(), x.grad, 0.05, theta)
        assert float(lorentz_distance(x, target, theta)) < 1e-6

    def test_non_finite_gradient(self, random_points):
        p = random_points(2, 3)
        grad = torch.zeros_like(p)
        grad[1, 2] = math.inf
        with pytest.raises(NumericalFailureError):
            riemannian_step(p, grad, 0.1, 1.0)


class TestLearningRate:
    """Cosine schedule."""

    def test_schedule(self):
        config = TrainConfig()
        assert lr_at(0, 100, config) == pytest.approx(1e-3, rel=1e-12)
        assert lr_at(50, 100, config) == pytest.approx(5.05e-4, rel=1e-12)
        assert lr_at(100, 100, config) == pytest.approx(1e-5, rel=1e-12)

    def test_monotone(self):
        config = TrainConfig()
        rates = [lr_at(step, 40, config) for step in range(41)]
        assert all(b <= a for a, b in zip(rates, rates[1:]))

    def test_no_step(self):
        assert lr_at(0, 0, TrainConfig()) == 1e-3


class TestEmbedAll:
    """Embedding of whole feature matrices."""

    def test_empty(self, tiny_config):
        tangents, points = embed_all(Model.create(8, tiny_config), np.zeros((0, 8)))
        assert tangents.shape == (0, 8)
        assert points.shape == (0, 2, 4)

    def test_chunks_match_single_pass(self, tiny_config, rng):
        model = Model.create(8, tiny_config)
        features = rng.normal(size=(5000, 8))
        _, points = embed_all(model, features)
        with torch.no_grad():
            _, direct = model.embed(torch.from_numpy(features[4500:]))
        torch.testing.assert_close(points[4500:], direct)

    def test_quantization_error(self, tiny_config, rng):
        assert mean_quantization_error(Model.create(8, tiny_config), rng.normal(size=(30, 8))) > 0.0


class TestTrainer:
    """Training runs."""

    @pytest.fixture
    def features(self, clusters):
        features, _ = clusters(64, 8, 4)
        return features

    def test_zero_epochs(self, features, tiny_config):
        config = replace(tiny_config, epochs=0)
        trainer = Trainer(config)
        model = trainer.train(features)
        initial = Model.create(8, config)
        for (name, a), (_, b) in zip(model.named_parameters(), initial.named_parameters()):
            assert torch.equal(a, b), name
        assert trainer.history == []

    def test_deterministic(self, features, tiny_config):
        first = Trainer(tiny_config)
        second = Trainer(tiny_config)
        a = first.train(features)
        b = second.train(features)
        for (name, x), (_, y) in zip(a.named_parameters(), b.named_parameters()):
            assert torch.equal(x, y), name
        assert first.history == second.history

    def test_metrics(self, features, tiny_config, tmp_path):
        metrics_path = tmp_path / 'metrics.csv'
        metrics_path.write_text('stale\n')
        trainer = Trainer(tiny_config, metrics_path=str(metrics_path))
        trainer.train(features)

        lines = metrics_path.read_text().splitlines()
        assert lines[0] == 'epoch,loss_aug,loss_prot,loss_ins,total,mean_quant_error,lr'
        assert len(lines) == 1 + tiny_config.epochs
        assert [m.epoch for m in trainer.history] == [1, 2]
        for metrics in trainer.history:
            assert all(math.isfinite(v) for v in (metrics.loss_aug, metrics.loss_prot, metrics.loss_ins, metrics.total))
            assert metrics.mean_quant_error >= 0.0
            assert tiny_config.lr_end <= metrics.lr <= tiny_config.lr_start

    def test_codewords_on_manifold(self, features, tiny_config):
        model = Trainer(tiny_config).train(features)
        residual = manifold_residual(model.codebook.codewords.detach(), model.curvatures.detach().unsqueeze(-1))
        assert float(residual.max()) < 1e-9
        assert bool(torch.all(model.curvatures > 0))

    def test_frozen_curvature(self, features, tiny_config):
        model = Trainer(replace(tiny_config, learnable_curvature=False, theta_init=0.5)).train(features)
        assert torch.equal(model.curvatures.detach(), torch.full((2,), 0.5, dtype=DTYPE))

    def test_vanilla_variant(self, features, tiny_config):
        trainer = Trainer(replace(tiny_config, variant='vanilla'))
        trainer.train(features)
        assert all(m.loss_prot == 0.0 and m.loss_ins == 0.0 for m in trainer.history)
        assert all(m.total == m.loss_aug for m in trainer.history)

    def test_too_few_items(self, features, tiny_config):
        with pytest.raises(InvalidArgumentError):
            Trainer(tiny_config).train(features[:10])

    def test_non_finite_features(self, features, tiny_config):
        features = features.copy()
        features[5, 3] = math.nan
        with pytest.raises(NumericalFailureError, match='Epoch 1, batch 0'):
            Trainer(replace(tiny_config, variant='vanilla')).train(features)

    def test_codeword_learning_rate_scale(self, tiny_config):
        moved, projectors = {}, {}
        for scale in (1.0, 10.0):
            config = replace(tiny_config, codeword_lr_scale=scale, learnable_curvature=False)
            model = Model.create(8, config)
            before = model.codebook.codewords.detach().clone()
            grads = {
                name: torch.randn(parameter.shape, generator=torch.Generator().manual_seed(5), dtype=DTYPE)
                for name, parameter in model.named_parameters()
            }
            Trainer(config)._step(model, grads, 1e-3)

            theta = model.curvatures.detach().unsqueeze(-1)
            moved[scale] = float(lorentz_distance(before, model.codebook.codewords.detach(), theta).sum())
            projectors[scale] = model.projector.weight.detach().clone()

        # Only the codewords take the scaled rate
        assert moved[10.0] == pytest.approx(10 * moved[1.0], rel=1e-3)
        assert torch.equal(projectors[1.0], projectors[10.0])
