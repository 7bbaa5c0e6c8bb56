"""Parameter updates: ADAM / SGD+momentum, kernel-norm gradient scaling,
and the periodic kernel renormalization schedule."""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .operators import DecoupledConvLayer, WeightingMode
from .tensor import NumericError, row_norms


class OptimizerKind(Enum):
    ADAM = "adam"
    SGD_MOMENTUM = "sgd"


class GradientMode(Enum):
    STANDARD = "standard"
    WEIGHTED = "weighted"   # scale each kernel-row gradient by its kernel norm


@dataclass
class ProjectionSchedule:
    interval: int = 1   # apply every `interval` steps
    s: float = 1.0      # target row norm

    def __post_init__(self):
        if self.interval < 1 or self.s <= 0:
            raise ValueError("projection needs interval >= 1 and s > 0")


@dataclass
class UpdateRule:
    kind: OptimizerKind = OptimizerKind.ADAM
    lr: float = 1e-3
    lr_schedule: list = field(default_factory=list)  # [(step, lr), ...] ascending
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    gradient_mode: GradientMode = GradientMode.STANDARD
    projection: ProjectionSchedule | None = None

    def lr_at(self, step: int) -> float:
        lr = self.lr
        for boundary, value in self.lr_schedule:
            if step >= boundary:
                lr = value
        return lr


def apply_weighted_gradients(grad_W: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Scale each gradient row by the norm of its kernel row.

    Cancels the 1/||w|| attenuation that the normalized forward pass puts
    on kernel gradients; for the sphere/cosine case the result is exactly
    the unit-sphere tangent x_hat - (w_hat . x_hat) w_hat.
    """
    norms = row_norms(W)
    if np.any(norms <= 0):
        raise NumericError("weighted gradients need nonzero kernel rows")
    return grad_W * norms[:, None]


def project_weights(W: np.ndarray, s: float = 1.0) -> np.ndarray:
    """Renormalize every kernel row to norm s, preserving direction."""
    norms = row_norms(W)
    if np.any(norms <= 0):
        raise NumericError("cannot project zero-norm kernel rows")
    return W * (s / norms)[:, None]


class Optimizer:
    """Stateful update rule over a network's parameter groups.

    The kernel-norm gradient scaling is applied to norm-angle kernel
    matrices only, before moment accumulation; the projection replaces
    those kernels after the update on the configured interval. Both are
    rejected for weighted operator variants, whose forward pass depends
    on the kernel norm.
    """

    def __init__(self, net, rule: UpdateRule):
        self.net = net
        self.rule = rule
        self.t = 0
        self._m = {}
        self._v = {}
        needs_unweighted = (rule.gradient_mode is GradientMode.WEIGHTED
                            or rule.projection is not None)
        if needs_unweighted:
            for layer in net.layers:
                if isinstance(layer, DecoupledConvLayer) \
                        and layer.spec.weighting is not WeightingMode.UNWEIGHTED:
                    raise ValueError(
                        "kernel projection / weighted gradients apply only to "
                        "unweighted norm-angle layers")
        if rule.projection is not None:
            # start on the target sphere: the forward pass ignores kernel
            # norms, so this only fixes the norm the schedule maintains and
            # makes training invariant to the scale of the initialization
            for layer in net.layers:
                if isinstance(layer, DecoupledConvLayer):
                    layer.W[...] = project_weights(layer.W, rule.projection.s)

    def step(self, grads: list[dict]):
        """Apply one update. grads[i] maps param name -> gradient for layer i."""
        rule = self.rule
        self.t += 1
        lr = rule.lr_at(self.t)
        for i, layer in enumerate(self.net.layers):
            tags = layer.param_tags()
            for name, param in layer.params().items():
                g = grads[i].get(name)
                if g is None:
                    continue
                if not np.all(np.isfinite(g)):
                    raise NumericError(
                        f"non-finite gradient for layer{i}.{name}; update aborted")
                if (rule.gradient_mode is GradientMode.WEIGHTED
                        and tags[name] == "decoupled_kernel"):
                    g = apply_weighted_gradients(g, param)
                key = (i, name)
                if rule.kind is OptimizerKind.ADAM:
                    m = self._m.setdefault(key, np.zeros_like(param))
                    v = self._v.setdefault(key, np.zeros_like(param))
                    m += (1.0 - rule.beta1) * (g - m)
                    v += (1.0 - rule.beta2) * (g * g - v)
                    mhat = m / (1.0 - rule.beta1 ** self.t)
                    vhat = v / (1.0 - rule.beta2 ** self.t)
                    param -= lr * mhat / (np.sqrt(vhat) + rule.eps)
                else:
                    vel = self._m.setdefault(key, np.zeros_like(param))
                    vel *= rule.momentum
                    vel += g
                    param -= lr * vel
            layer.post_update()
            if (rule.projection is not None and self.t % rule.projection.interval == 0
                    and isinstance(layer, DecoupledConvLayer)):
                layer.W[...] = project_weights(layer.W, rule.projection.s)
