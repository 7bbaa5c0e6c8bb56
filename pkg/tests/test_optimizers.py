"""Update rules, kernel-norm gradient scaling, and the renormalization
schedule."""

import numpy as np
import pytest

from polarconv.network import ArchitectureDescription, Network, build_from_config
from polarconv.operators import (AngularKind, ConvGeometry, DecoupledConvLayer,
                                 MagnitudeKind, OperatorSpec, WeightingMode)
from polarconv.optimizers import (GradientMode, Optimizer, OptimizerKind,
                                  ProjectionSchedule, UpdateRule,
                                  apply_weighted_gradients, project_weights)
from polarconv.layers import FullyConnected
from polarconv.tensor import NumericError, row_norms


class TestWeightedGradients:
    def test_unit_rows_unchanged(self, rng):
        W = rng.standard_normal((5, 4))
        W /= row_norms(W)[:, None]
        g = rng.standard_normal((5, 4))
        assert np.allclose(apply_weighted_gradients(g, W), g)

    def test_sphere_cosine_closed_form(self, rng):
        # per-pair transformed kernel gradient equals the unit-sphere tangent
        spec = OperatorSpec(MagnitudeKind.SPHERE, AngularKind.COSINE)
        geometry = ConvGeometry((2, 2), 1, 0)
        layer = DecoupledConvLayer(1, 1, geometry, spec,
                                   np.random.default_rng(0), dtype=np.float64)
        for _ in range(25):
            layer.W[:] = rng.standard_normal((1, 4)) * rng.uniform(0.3, 4.0)
            x = rng.standard_normal((1, 1, 2, 2))
            _, cache = layer.forward(x)
            _, grads = layer.backward(cache, np.ones((1, 1, 1, 1)))
            t = apply_weighted_gradients(grads["W"], layer.W)
            w = layer.W[0]
            what = w / np.linalg.norm(w)
            xhat = x.ravel() / np.linalg.norm(x)
            want = xhat - (what @ xhat) * what
            assert np.abs(t[0] - want).max() < 1e-10
            # and it is perpendicular to the kernel itself
            assert abs(float(t[0] @ w)) < 1e-10 * np.linalg.norm(w)

    def test_zero_row_rejected(self):
        with pytest.raises(NumericError):
            apply_weighted_gradients(np.ones((2, 3)), np.zeros((2, 3)))


class TestProjection:
    def test_three_four_row(self):
        W = project_weights(np.array([[3.0, 4.0]]), 1.0)
        assert np.allclose(W, [[0.6, 0.8]])

    def test_unit_rows_fixed_point(self, rng):
        W = rng.standard_normal((6, 5))
        W /= row_norms(W)[:, None]
        assert np.abs(project_weights(W, 1.0) - W).max() < 1e-12

    def test_idempotent(self, rng):
        W = rng.standard_normal((6, 5)) * 3.0
        once = project_weights(W, 0.7)
        twice = project_weights(once, 0.7)
        assert np.abs(once - twice).max() < 1e-12

    def test_bad_schedule(self):
        with pytest.raises(ValueError):
            ProjectionSchedule(interval=0)
        with pytest.raises(ValueError):
            ProjectionSchedule(interval=1, s=0.0)


def one_param_net(value):
    fc = FullyConnected(2, 2)
    fc.W[:] = value
    fc.b[:] = 0.0
    return Network([fc]), fc


class TestUpdateRules:
    def test_plain_sgd_step(self):
        net, fc = one_param_net(1.0)
        rule = UpdateRule(kind=OptimizerKind.SGD_MOMENTUM, lr=0.1, momentum=0.0)
        opt = Optimizer(net, rule)
        g = np.array([[1.0, 2.0], [3.0, 4.0]])
        opt.step([{"W": g, "b": np.zeros(2)}])
        assert np.allclose(fc.W, 1.0 - 0.1 * g, atol=1e-12)

    def test_momentum_accumulates(self):
        net, fc = one_param_net(0.0)
        rule = UpdateRule(kind=OptimizerKind.SGD_MOMENTUM, lr=1.0, momentum=0.5)
        opt = Optimizer(net, rule)
        g = np.ones((2, 2))
        zb = np.zeros(2)
        opt.step([{"W": g.copy(), "b": zb}])
        opt.step([{"W": g.copy(), "b": zb}])
        # velocity: 1, then 1.5; cumulative displacement 2.5
        assert np.allclose(fc.W, -2.5, atol=1e-12)

    def test_adam_first_step_closed_form(self):
        net, fc = one_param_net(0.0)
        rule = UpdateRule(kind=OptimizerKind.ADAM, lr=1e-3)
        opt = Optimizer(net, rule)
        g = np.array([[0.3, -2.0], [10.0, -0.01]])
        opt.step([{"W": g.copy(), "b": np.zeros(2)}])
        want = -rule.lr * g / (np.abs(g) + rule.eps)  # bias correction at t=1
        assert np.allclose(fc.W, want, atol=1e-12)

    def test_lr_schedule(self):
        rule = UpdateRule(lr=0.1, lr_schedule=[(10, 0.01), (20, 0.001)])
        assert rule.lr_at(5) == 0.1
        assert rule.lr_at(10) == 0.01
        assert rule.lr_at(25) == 0.001

    def test_nonfinite_gradient_rejected(self):
        net, _ = one_param_net(0.0)
        opt = Optimizer(net, UpdateRule())
        g = np.full((2, 2), np.nan)
        with pytest.raises(NumericError):
            opt.step([{"W": g, "b": np.zeros(2)}])


def small_decoupled_net(rng, weighting=WeightingMode.UNWEIGHTED):
    spec = OperatorSpec(MagnitudeKind.SPHERE, AngularKind.COSINE,
                        weighting=weighting)
    arch = ArchitectureDescription(preset="custom", input_shape=(1, 6, 6),
                                   num_classes=3, operator=spec, bn=False,
                                   custom=["conv:4", "fc:3"])
    return build_from_config(arch, rng, dtype=np.float64)


class TestOptimizerIntegration:
    def test_projection_keeps_rows_unit(self, rng):
        net = small_decoupled_net(rng)
        rule = UpdateRule(projection=ProjectionSchedule(interval=1, s=1.0))
        opt = Optimizer(net, rule)
        x = rng.standard_normal((4, 1, 6, 6))
        y = rng.integers(0, 3, 4)
        for _ in range(3):
            _, _, grads, _ = net.loss_and_grads(x, y)
            opt.step(grads)
            for layer in net.layers:
                if isinstance(layer, DecoupledConvLayer):
                    assert np.abs(row_norms(layer.W) - 1.0).max() < 1e-12

    def test_projection_interval(self, rng):
        net = small_decoupled_net(rng)
        rule = UpdateRule(projection=ProjectionSchedule(interval=2, s=1.0))
        opt = Optimizer(net, rule)
        x = rng.standard_normal((4, 1, 6, 6))
        y = rng.integers(0, 3, 4)
        conv = next(l for l in net.layers if isinstance(l, DecoupledConvLayer))
        _, _, grads, _ = net.loss_and_grads(x, y)
        opt.step(grads)  # t=1: no projection yet
        off_interval = np.abs(row_norms(conv.W) - 1.0).max()
        _, _, grads, _ = net.loss_and_grads(x, y)
        opt.step(grads)  # t=2: projected
        assert np.abs(row_norms(conv.W) - 1.0).max() < 1e-12
        assert off_interval > 1e-6  # step moved the norms off 1 in between

    @pytest.mark.parametrize("mode", [GradientMode.STANDARD, GradientMode.WEIGHTED])
    def test_trajectory_invariant_to_kernel_init_scale(self, mode):
        # with per-step projection, rescaling the kernel initialization by
        # any c > 0 must not change the training trajectory: the forward
        # pass ignores kernel norms and projection restores them every step
        seeds = np.random.default_rng(42)
        net_a = small_decoupled_net(np.random.default_rng(11))
        net_b = small_decoupled_net(np.random.default_rng(11))
        for la, lb in zip(net_a.layers, net_b.layers):
            if isinstance(la, DecoupledConvLayer):
                lb.W[:] = la.W * 5.31  # same directions, different norms
        rule = UpdateRule(lr=1e-2, gradient_mode=mode,
                          projection=ProjectionSchedule(interval=1, s=1.0))
        opt_a = Optimizer(net_a, rule)
        opt_b = Optimizer(net_b, rule)
        x = seeds.standard_normal((6, 1, 6, 6))
        y = seeds.integers(0, 3, 6)
        losses_a, losses_b = [], []
        for _ in range(10):
            loss, _, ga, _ = net_a.loss_and_grads(x, y)
            losses_a.append(loss)
            opt_a.step(ga)
            loss, _, gb, _ = net_b.loss_and_grads(x, y)
            losses_b.append(loss)
            opt_b.step(gb)
        assert np.abs(np.array(losses_a) - np.array(losses_b)).max() < 1e-6
        for la, lb in zip(net_a.layers, net_b.layers):
            if hasattr(la, "W"):
                assert np.abs(la.W - lb.W).max() < 1e-6

    def test_weighted_tricks_rejected_for_weighted_operators(self, rng):
        net = small_decoupled_net(rng, weighting=WeightingMode.LINEAR)
        with pytest.raises(ValueError):
            Optimizer(net, UpdateRule(gradient_mode=GradientMode.WEIGHTED))
        with pytest.raises(ValueError):
            Optimizer(net, UpdateRule(projection=ProjectionSchedule(1, 1.0)))

    def test_rho_clamped_positive(self, rng):
        spec = OperatorSpec(MagnitudeKind.TANH, AngularKind.COSINE)
        geometry = ConvGeometry((3, 3), 1, 1)
        layer = DecoupledConvLayer(1, 2, geometry, spec,
                                   np.random.default_rng(0), dtype=np.float64)
        layer.rho[:] = 1e-4  # below the floor
        layer.post_update()
        assert layer.rho.min() >= DecoupledConvLayer.RHO_MIN
