"""Standard network building blocks with hand-written backward passes."""

import numpy as np

from .tensor import DimensionError, PatchMatrix, col2im_grad, im2col
from .operators import ConvGeometry, he_init


class Layer:
    """Minimal layer protocol: forward/backward plus parameter access."""

    name = "layer"

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def param_tags(self) -> dict[str, str]:
        return {}

    def state(self) -> dict[str, np.ndarray]:
        return dict(self.params())

    def post_update(self):
        pass

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, cache, dy):
        raise NotImplementedError


class StandardConv(Layer):
    """Plain inner-product convolution with bias."""

    def __init__(self, in_channels, num_kernels, geometry: ConvGeometry,
                 rng=None, dtype=np.float64, name="conv"):
        self.in_channels = in_channels
        self.num_kernels = num_kernels
        self.geometry = geometry
        self.name = name
        kh, kw = geometry.kernel
        self.patch_dim = in_channels * kh * kw
        rng = rng or np.random.default_rng(0)
        self.W = he_init(rng, num_kernels, self.patch_dim, dtype)
        self.b = np.zeros(num_kernels, dtype=dtype)

    def params(self):
        return {"W": self.W, "b": self.b}

    def param_tags(self):
        return {"W": "standard_kernel", "b": "bias"}

    def forward(self, x, training=False):
        if x.shape[1] != self.in_channels:
            raise DimensionError(
                f"{self.name}: expected {self.in_channels} channels, got {x.shape[1]}")
        pm = im2col(x, self.geometry.kernel, self.geometry.stride, self.geometry.padding)
        out = pm.patches @ self.W.T + self.b
        n, oh, ow = pm.spatial_map
        y = out.reshape(n, oh, ow, self.num_kernels).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(y), {"X": pm.patches, "spatial_map": pm.spatial_map,
                                         "input_shape": x.shape}

    def backward(self, cache, dy):
        n, oh, ow = cache["spatial_map"]
        dOut = dy.transpose(0, 2, 3, 1).reshape(-1, self.num_kernels)
        grad_W = dOut.T @ cache["X"]
        grad_b = dOut.sum(axis=0)
        grad_X = dOut @ self.W
        dx = col2im_grad(PatchMatrix(grad_X, cache["spatial_map"]), cache["input_shape"],
                         self.geometry.kernel, self.geometry.stride, self.geometry.padding)
        return dx, {"W": grad_W, "b": grad_b}


class BatchNorm(Layer):
    """Per-channel batch normalization with affine parameters.

    Works on [N, C, H, W] and [N, C] inputs. Running statistics follow the
    usual moving-average update and are used verbatim in eval mode.
    """

    def __init__(self, channels, momentum=0.1, epsilon=1e-5, dtype=np.float64, name="bn"):
        self.channels = channels
        self.momentum = momentum
        self.epsilon = epsilon
        self.name = name
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def param_tags(self):
        return {"gamma": "bn_scale", "beta": "bn_shift"}

    def state(self):
        return {"gamma": self.gamma, "beta": self.beta,
                "running_mean": self.running_mean, "running_var": self.running_var}

    @staticmethod
    def _axes(x):
        if x.ndim == 4:
            return (0, 2, 3)
        if x.ndim == 2:
            return (0,)
        raise DimensionError(f"batchnorm expects 2D or 4D input, got {x.ndim}D")

    def _shape(self, x):
        return (1, self.channels, 1, 1) if x.ndim == 4 else (1, self.channels)

    def forward(self, x, training=False):
        axes, shape = self._axes(x), self._shape(x)
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.running_mean += self.momentum * (mean - self.running_mean)
            self.running_var += self.momentum * (var - self.running_var)
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.epsilon)
        xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
        y = self.gamma.reshape(shape) * xhat + self.beta.reshape(shape)
        return y, {"xhat": xhat, "inv_std": inv_std, "training": training, "axes": axes,
                   "shape": shape, "m": x.size // self.channels}

    def backward(self, cache, dy):
        axes, shape, m = cache["axes"], cache["shape"], cache["m"]
        xhat, inv_std = cache["xhat"], cache["inv_std"]
        grad_gamma = (dy * xhat).sum(axis=axes)
        grad_beta = dy.sum(axis=axes)
        gi = (self.gamma * inv_std).reshape(shape)
        if cache["training"]:
            dx = gi / m * (m * dy - grad_beta.reshape(shape)
                           - xhat * grad_gamma.reshape(shape))
        else:
            dx = gi * dy
        return dx, {"gamma": grad_gamma, "beta": grad_beta}


class ReLU(Layer):
    name = "relu"

    def forward(self, x, training=False):
        mask = x > 0
        return x * mask, {"mask": mask}

    def backward(self, cache, dy):
        return dy * cache["mask"], {}


class MaxPool(Layer):
    """Non-overlapping max pooling (size == stride)."""

    def __init__(self, size=2, stride=2, name="pool"):
        if size != stride:
            raise DimensionError("only size == stride pooling is supported")
        self.size = size
        self.name = name

    def forward(self, x, training=False):
        s = self.size
        orig_shape = x.shape
        n, c, h, w = x.shape
        if h % s or w % s:
            # floor semantics: trailing rows/cols that do not fill a window are dropped
            x = x[:, :, :h // s * s, :w // s * s]
            n, c, h, w = x.shape
        flat = (x.reshape(n, c, h // s, s, w // s, s)
                .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // s, w // s, s * s))
        argmax = flat.argmax(axis=-1)  # first max wins: deterministic tie-break
        y = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]
        return y, {"argmax": argmax, "in_shape": orig_shape, "crop_shape": x.shape}

    def backward(self, cache, dy):
        n, c, h, w = cache["crop_shape"]
        s = self.size
        flat = np.zeros((n, c, h // s, w // s, s * s), dtype=dy.dtype)
        np.put_along_axis(flat, cache["argmax"][..., None], dy[..., None], axis=-1)
        dx = (flat.reshape(n, c, h // s, w // s, s, s)
              .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w))
        if cache["in_shape"] != cache["crop_shape"]:
            full = np.zeros(cache["in_shape"], dtype=dx.dtype)
            full[:, :, :h, :w] = dx
            dx = full
        return dx, {}


class GlobalAvgPool(Layer):
    name = "gap"

    def forward(self, x, training=False):
        n, c, h, w = x.shape
        return x.mean(axis=(2, 3)), {"in_shape": x.shape}

    def backward(self, cache, dy):
        n, c, h, w = cache["in_shape"]
        return np.broadcast_to(dy[:, :, None, None] / (h * w), cache["in_shape"]).copy(), {}


class Flatten(Layer):
    name = "flatten"

    def forward(self, x, training=False):
        return x.reshape(x.shape[0], -1), {"in_shape": x.shape}

    def backward(self, cache, dy):
        return dy.reshape(cache["in_shape"]), {}


class FullyConnected(Layer):
    """Inner-product layer y = x W^T + b, kernels as rows."""

    def __init__(self, in_dim, out_dim, rng=None, dtype=np.float64, name="fc"):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.name = name
        rng = rng or np.random.default_rng(0)
        self.W = he_init(rng, out_dim, in_dim, dtype)
        self.b = np.zeros(out_dim, dtype=dtype)

    def params(self):
        return {"W": self.W, "b": self.b}

    def param_tags(self):
        return {"W": "fc_kernel", "b": "bias"}

    def forward(self, x, training=False):
        if x.shape[1] != self.in_dim:
            raise DimensionError(f"{self.name}: expected dim {self.in_dim}, got {x.shape[1]}")
        return x @ self.W.T + self.b, {"x": x}

    def backward(self, cache, dy):
        return dy @ self.W, {"W": dy.T @ cache["x"], "b": dy.sum(axis=0)}
