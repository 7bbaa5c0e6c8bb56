"""Dense-array substrate: patch extraction, its adjoint, and small helpers.

Arrays are plain numpy ndarrays in [batch, channels, height, width] layout.
Patch rows produced by :func:`im2col` are contiguous, which turns every
convolution-like operator into a batched row-wise norm/angle computation.
"""

from dataclasses import dataclass

import numpy as np


class DimensionError(ValueError):
    """Raised when array geometry does not compose."""


class NumericError(FloatingPointError):
    """Raised when an operation produces NaN/Inf from finite inputs."""


def check_finite(a: np.ndarray, context: str = "") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite values encountered{': ' + context if context else ''}")
    return a


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out <= 0:
        raise DimensionError(
            f"non-positive output size for input {size}, kernel {kernel}, "
            f"stride {stride}, padding {padding}"
        )
    return out


@dataclass
class PatchMatrix:
    """Vectorized receptive fields of a feature map.

    patches has shape [num_patches, patch_dim] with patch_dim =
    kernel_h * kernel_w * in_channels; spatial_map records the
    (batch, out_h, out_w) grid the rows were taken from, in row-major
    order with batch outermost.
    """

    patches: np.ndarray
    spatial_map: tuple  # (batch, out_h, out_w)

    @property
    def num_patches(self) -> int:
        return self.patches.shape[0]

    @property
    def patch_dim(self) -> int:
        return self.patches.shape[1]


def _patch_view(padded: np.ndarray, kh: int, kw: int, stride: int,
                out_h: int, out_w: int) -> np.ndarray:
    """Strided [n, c, out_h, out_w, kh, kw] view of a padded input."""
    n, c, _, _ = padded.shape
    sn, sc, sh, sw = padded.strides
    shape = (n, c, out_h, out_w, kh, kw)
    strides = (sn, sc, sh * stride, sw * stride, sh, sw)
    return np.lib.stride_tricks.as_strided(padded, shape=shape, strides=strides)


def im2col(x: np.ndarray, kernel: tuple[int, int], stride: int = 1,
           padding: int = 0) -> PatchMatrix:
    """Extract all receptive fields of x as rows of a matrix.

    x: [batch, channels, height, width]. Zero padding only. Row p holds
    the vectorized (channel-major) patch at spatial position p, batches
    stacked outermost.
    """
    if x.ndim != 4:
        raise DimensionError(f"expected 4D input, got shape {x.shape}")
    kh, kw = kernel
    if kh < 1 or kw < 1 or stride < 1 or padding < 0:
        raise DimensionError(f"bad geometry kernel={kernel} stride={stride} padding={padding}")
    n, c, h, w = x.shape
    out_h = conv_output_size(h, kh, stride, padding)
    out_w = conv_output_size(w, kw, stride, padding)
    if padding > 0:
        padded = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
        padded[:, :, padding:padding + h, padding:padding + w] = x
    else:
        padded = x
    view = _patch_view(padded, kh, kw, stride, out_h, out_w)
    # [n, out_h, out_w, c, kh, kw] -> rows are c-major vectorized patches
    patches = view.transpose(0, 2, 3, 1, 4, 5).reshape(n * out_h * out_w, c * kh * kw)
    return PatchMatrix(np.ascontiguousarray(patches), (n, out_h, out_w))


def col2im_grad(patch_grads: PatchMatrix, input_shape: tuple, kernel: tuple[int, int],
                stride: int = 1, padding: int = 0) -> np.ndarray:
    """Scatter-add adjoint of :func:`im2col`.

    Satisfies <im2col(t), g> == <t, col2im_grad(g)> for every input t and
    patch-space cotangent g with matching geometry.
    """
    n, c, h, w = input_shape
    kh, kw = kernel
    out_h = conv_output_size(h, kh, stride, padding)
    out_w = conv_output_size(w, kw, stride, padding)
    if patch_grads.spatial_map != (n, out_h, out_w):
        raise DimensionError(
            f"patch grid {patch_grads.spatial_map} does not match geometry {(n, out_h, out_w)}"
        )
    if patch_grads.patch_dim != c * kh * kw:
        raise DimensionError(
            f"patch_dim {patch_grads.patch_dim} != {c}*{kh}*{kw}"
        )
    g = patch_grads.patches.reshape(n, out_h, out_w, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    padded = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=patch_grads.patches.dtype)
    # accumulate per kernel offset; loop is over kh*kw only
    for i in range(kh):
        for j in range(kw):
            padded[:, :, i:i + out_h * stride:stride, j:j + out_w * stride:stride] += g[:, :, :, :, i, j]
    if padding > 0:
        return padded[:, :, padding:padding + h, padding:padding + w].copy()
    return padded


def row_norms(m: np.ndarray) -> np.ndarray:
    """Euclidean norm of each row of a 2D matrix."""
    if m.ndim != 2:
        raise DimensionError(f"expected 2D matrix, got shape {m.shape}")
    return np.sqrt(np.einsum("ij,ij->i", m, m))
