"""Network composition, loss, kernel regularizers, and architecture presets."""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .layers import (BatchNorm, Flatten, FullyConnected, Layer, MaxPool, ReLU,
                     StandardConv)
from .operators import ConvGeometry, DecoupledConvLayer, OperatorSpec
from .tensor import DimensionError


class ConfigError(ValueError):
    """Raised for invalid architecture or experiment configuration."""


class RegularizerKind(Enum):
    NONE = "none"
    ORTHONORMAL = "orthonormal"
    ORTHOGONAL = "orthogonal"
    L2 = "l2"


@dataclass
class RegularizerSpec:
    kind: RegularizerKind = RegularizerKind.NONE
    lam: float = 0.0

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"regularizer weight must be non-negative, got {self.lam}")


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean cross entropy of softmax(logits) against integer labels.

    Returns (loss, grad_logits) with grad already divided by the batch size.
    """
    n, c = logits.shape
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    z = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(z)
    loss = -float(log_probs[np.arange(n), labels].mean())
    grad = exp / z
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def orthogonality_penalty(spec: RegularizerSpec, W: np.ndarray):
    """Gram-matrix penalty on a kernel matrix whose COLUMNS are kernels.

    Orthonormal: lam * ||W^T W - I||_F^2, grad 4*lam*W(W^T W - I).
    Orthogonal:  same with the diagonal of the Gram matrix left free.
    """
    G = W.T @ W
    if spec.kind is RegularizerKind.ORTHONORMAL:
        D = G - np.eye(G.shape[0], dtype=W.dtype)
    elif spec.kind is RegularizerKind.ORTHOGONAL:
        D = G - np.diag(np.diag(G))
    elif spec.kind is RegularizerKind.L2:
        return spec.lam * float((W * W).sum()), 2.0 * spec.lam * W
    else:
        return 0.0, np.zeros_like(W)
    return spec.lam * float((D * D).sum()), 4.0 * spec.lam * (W @ D)


class Network:
    """Ordered stack of layers ending in class logits with softmax loss."""

    def __init__(self, layers: list[Layer], regularizer: RegularizerSpec | None = None):
        if not layers:
            raise ConfigError("network needs at least one layer")
        self.layers = layers
        self.regularizer = regularizer or RegularizerSpec()
        if self.regularizer.kind is RegularizerKind.L2 and any(
                isinstance(l, DecoupledConvLayer) for l in layers):
            raise ConfigError("l2 weight decay is not applicable to norm-angle layers")

    # -- forward / backward -------------------------------------------------
    def forward(self, x: np.ndarray, training: bool = False):
        caches = []
        for i, layer in enumerate(self.layers):
            try:
                x, cache = layer.forward(x, training)
            except DimensionError as e:
                raise DimensionError(f"layer {i} ({layer.name}): {e}") from e
            caches.append(cache)
        return x, caches

    def backward(self, caches, grad_logits: np.ndarray):
        """Returns (grad_input, per-layer parameter gradients)."""
        grads = [None] * len(self.layers)
        dy = grad_logits
        for i in range(len(self.layers) - 1, -1, -1):
            dy, g = self.layers[i].backward(caches[i], dy)
            grads[i] = g
        return dy, grads

    def input_gradient(self, x, labels):
        """Gradient of the data loss w.r.t. the input, in eval mode."""
        logits, caches = self.forward(x, training=False)
        loss, dlogits = softmax_xent(logits, labels)
        dx, _ = self.backward(caches, dlogits)
        return dx, loss, logits

    def loss_and_grads(self, x, labels, training=True):
        """Full pass: data loss + regularizer, gradients for every parameter."""
        logits, caches = self.forward(x, training)
        loss, dlogits = softmax_xent(logits, labels)
        _, grads = self.backward(caches, dlogits)
        reg_value = 0.0
        if self.regularizer.kind is not RegularizerKind.NONE:
            for i, layer in enumerate(self.layers):
                if not isinstance(layer, (DecoupledConvLayer, StandardConv)):
                    continue
                # the penalty's kernels-as-columns convention vs rows in storage
                value, grad_cols = orthogonality_penalty(self.regularizer, layer.W.T)
                reg_value += value
                grads[i]["W"] = grads[i]["W"] + grad_cols.T
        return loss + reg_value, loss, grads, logits

    # -- parameter plumbing -------------------------------------------------
    def param_groups(self):
        """Yields (key, layer, param_name, array, tag) for every parameter."""
        for i, layer in enumerate(self.layers):
            tags = layer.param_tags()
            for name, arr in layer.params().items():
                yield f"layer{i}.{name}", layer, name, arr, tags[name]

    def state_entries(self):
        """Named tensors for checkpointing, including moving statistics."""
        for i, layer in enumerate(self.layers):
            for name, arr in layer.state().items():
                yield f"layer{i}.{name}", arr

    def predict(self, x):
        logits, _ = self.forward(x, training=False)
        return logits.argmax(axis=1)

    def describe(self):
        meta = []
        for layer in self.layers:
            entry = {"kind": type(layer).__name__, "name": layer.name}
            if isinstance(layer, (DecoupledConvLayer, StandardConv)):
                entry.update(in_channels=layer.in_channels, num_kernels=layer.num_kernels,
                             kernel=list(layer.geometry.kernel), stride=layer.geometry.stride,
                             padding=layer.geometry.padding)
            if isinstance(layer, DecoupledConvLayer):
                s = layer.spec
                entry.update(magnitude=s.magnitude.value, angular=s.angular.value,
                             weighting=s.weighting.value, alpha=s.alpha, beta=s.beta,
                             sigmoid_k=s.sigmoid_k, rho_learnable=s.rho_learnable)
            meta.append(entry)
        return meta


# ---------------------------------------------------------------------------
# architecture presets
# ---------------------------------------------------------------------------

@dataclass
class ArchitectureDescription:
    preset: str                           # mnist-cnn6 | cifar-cnn9 | custom
    input_shape: tuple = (1, 28, 28)      # (channels, height, width)
    num_classes: int = 10
    operator: OperatorSpec | None = None  # None -> standard inner-product conv
    bn: bool = True
    relu: bool = True
    width: float = 1.0                    # channel multiplier for desk-scale runs
    custom: list = field(default_factory=list)  # tokens: conv:N | pool | fc:N


def _conv(in_ch, out_ch, arch: ArchitectureDescription, rng, dtype, name):
    geom = ConvGeometry(kernel=(3, 3), stride=1, padding=1)
    if arch.operator is None:
        return StandardConv(in_ch, out_ch, geom, rng, dtype, name)
    return DecoupledConvLayer(in_ch, out_ch, geom, arch.operator, rng, dtype, name)


def build_from_config(arch: ArchitectureDescription, rng: np.random.Generator | None = None,
                      dtype=np.float64) -> Network:
    """Instantiate a named preset (or custom token list) as a Network."""
    rng = rng or np.random.default_rng(0)
    c, h, w = arch.input_shape

    def scaled(n):
        return max(1, int(round(n * arch.width)))

    if arch.preset == "mnist-cnn6":
        plan = [("conv", scaled(32)), ("conv", scaled(32)), ("pool",),
                ("conv", scaled(64)), ("conv", scaled(64)), ("pool",),
                ("conv", scaled(128)), ("conv", scaled(128)), ("pool",),
                ("fc", scaled(256)), ("fc", arch.num_classes)]
    elif arch.preset == "cifar-cnn9":
        plan = [("conv", scaled(64))] * 3 + [("pool",)] \
            + [("conv", scaled(128))] * 3 + [("pool",)] \
            + [("conv", scaled(256))] * 3 + [("pool",)] \
            + [("fc", scaled(512)), ("fc", arch.num_classes)]
    elif arch.preset == "custom":
        if not arch.custom:
            raise ConfigError("custom architecture needs a non-empty layer list")
        plan = []
        for tok in arch.custom:
            if tok == "pool":
                plan.append(("pool",))
            elif tok.startswith("conv:"):
                plan.append(("conv", int(tok.split(":")[1])))
            elif tok.startswith("fc:"):
                plan.append(("fc", int(tok.split(":")[1])))
            else:
                raise ConfigError(f"unknown architecture token '{tok}'")
        if plan[-1] != ("fc", arch.num_classes):
            plan.append(("fc", arch.num_classes))
    else:
        raise ConfigError(f"unknown architecture preset '{arch.preset}'")

    layers: list[Layer] = []
    cur_c, cur_h, cur_w = c, h, w
    flattened = False
    ci = 0
    n_fc = sum(1 for p in plan if p[0] == "fc")
    fc_seen = 0
    for step in plan:
        if step[0] == "conv":
            out_ch = step[1]
            layers.append(_conv(cur_c, out_ch, arch, rng, dtype, f"conv{ci}"))
            cur_c = out_ch
            ci += 1
            if arch.bn:
                layers.append(BatchNorm(out_ch, dtype=dtype, name=f"bn{ci - 1}"))
            if arch.relu:
                layers.append(ReLU())
        elif step[0] == "pool":
            layers.append(MaxPool(2, 2))
            cur_h, cur_w = cur_h // 2, cur_w // 2
        else:  # fc
            fc_seen += 1
            if not flattened:
                layers.append(Flatten())
                flattened = True
                in_dim = cur_c * cur_h * cur_w
            layers.append(FullyConnected(in_dim, step[1], rng, dtype,
                                         name=f"fc{fc_seen - 1}"))
            in_dim = step[1]
            if arch.relu and fc_seen < n_fc:
                layers.append(ReLU())
    return Network(layers)
