"""Norm-angle factored convolution operators.

A kernel response is computed as f(w, x) = h(||w||, ||x||) * g(theta)
instead of the raw inner product: h models how strongly the patch energy
drives the output, g maps the angle between patch and kernel into [-1, 1].
Every variant ships with an exact analytic backward pass for the patch,
the kernel matrix, and (where present) the learnable operator radius.
"""

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .tensor import (DimensionError, NumericError, PatchMatrix, check_finite,
                     col2im_grad, im2col, row_norms)

# below this, a patch norm is treated as exactly zero (cos := 0, no angle grad)
ZERO_NORM_EPS = 1e-12
# arccos input clamp used in the backward pass only; bounds the 1/sin(theta) factor
COS_CLAMP = 1e-7


class MagnitudeKind(Enum):
    SPHERE = "sphere"
    BALL = "ball"
    TANH = "tanh"
    LINEAR = "linear"
    SEGMENTED = "segmented"
    LOG = "log"
    MIX = "mix"


class AngularKind(Enum):
    LINEAR = "linear"
    COSINE = "cosine"
    SIGMOID = "sigmoid"
    SQUARE_COSINE = "sqcosine"


class WeightingMode(Enum):
    UNWEIGHTED = "none"
    LINEAR = "linear"
    NONLINEAR_COUPLED = "nlcoupled"
    NONLINEAR_SEPARATE = "nlseparate"


# kinds whose magnitude function has a slope change point (operator radius)
RADIUS_KINDS = frozenset({MagnitudeKind.BALL, MagnitudeKind.TANH, MagnitudeKind.SEGMENTED})


@dataclass
class OperatorSpec:
    """Configuration of one norm-angle operator."""

    magnitude: MagnitudeKind = MagnitudeKind.TANH
    angular: AngularKind = AngularKind.COSINE
    weighting: WeightingMode = WeightingMode.UNWEIGHTED
    alpha: float = 1.0
    beta: float = 0.5      # second slope (segmented) / log weight (mix)
    sigmoid_k: float = 0.3
    rho_learnable: bool = True

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.magnitude in (MagnitudeKind.SEGMENTED, MagnitudeKind.MIX) and self.beta < 0:
            raise ValueError(f"beta must be non-negative for {self.magnitude.value}")
        if self.sigmoid_k <= 0:
            raise ValueError(f"sigmoid_k must be positive, got {self.sigmoid_k}")
        if self.weighting in (WeightingMode.NONLINEAR_COUPLED, WeightingMode.NONLINEAR_SEPARATE) \
                and self.magnitude is not MagnitudeKind.TANH:
            raise ValueError("nonlinear weighting is defined only for the tanh magnitude")

    @property
    def has_radius(self) -> bool:
        return self.magnitude in RADIUS_KINDS


# ---------------------------------------------------------------------------
# magnitude functions h(||x||) and derivatives
# ---------------------------------------------------------------------------

def _magnitude_xpart(kind: MagnitudeKind, alpha: float, beta: float,
                     xn: np.ndarray, rho_eff):
    """Value of the x-dependent magnitude factor H(||x||).

    xn and rho_eff broadcast against each other. At the slope change point
    ||x|| == rho_eff the left branch is used.
    """
    if kind is MagnitudeKind.SPHERE:
        return alpha * np.ones_like(xn)
    if kind is MagnitudeKind.BALL:
        return alpha * np.minimum(xn, rho_eff) / rho_eff
    if kind is MagnitudeKind.TANH:
        return alpha * np.tanh(xn / rho_eff)
    if kind is MagnitudeKind.LINEAR:
        return alpha * xn
    if kind is MagnitudeKind.SEGMENTED:
        return np.where(xn <= rho_eff, alpha * xn,
                        beta * xn + (alpha - beta) * rho_eff)
    if kind is MagnitudeKind.LOG:
        return alpha * np.log1p(xn)
    if kind is MagnitudeKind.MIX:
        return alpha * xn + beta * np.log1p(xn)
    raise ValueError(f"unknown magnitude kind {kind}")


def _magnitude_xpart_derivs(kind: MagnitudeKind, alpha: float, beta: float,
                            xn: np.ndarray, rho_eff):
    """(H, dH/d||x||, dH/drho_eff); the radius derivative is None for
    kinds without an operator radius."""
    if kind is MagnitudeKind.SPHERE:
        one = np.ones_like(xn)
        return alpha * one, np.zeros_like(xn), None
    if kind is MagnitudeKind.BALL:
        inside = xn <= rho_eff
        h = np.where(inside, alpha * xn / rho_eff, alpha)
        dh_dxn = np.where(inside, alpha / rho_eff, 0.0)
        dh_dr = np.where(inside, -alpha * xn / rho_eff ** 2, 0.0)
        return h, dh_dxn, dh_dr
    if kind is MagnitudeKind.TANH:
        t = np.tanh(xn / rho_eff)
        sech2 = 1.0 - t * t
        return alpha * t, alpha * sech2 / rho_eff, -alpha * sech2 * xn / rho_eff ** 2
    if kind is MagnitudeKind.LINEAR:
        return alpha * xn, alpha * np.ones_like(xn), None
    if kind is MagnitudeKind.SEGMENTED:
        inside = xn <= rho_eff
        h = np.where(inside, alpha * xn, beta * xn + (alpha - beta) * rho_eff)
        dh_dxn = np.where(inside, alpha, beta)
        dh_dr = np.where(inside, 0.0, (alpha - beta) * np.ones_like(xn * rho_eff))
        return h, dh_dxn, dh_dr
    if kind is MagnitudeKind.LOG:
        return alpha * np.log1p(xn), alpha / (1.0 + xn), None
    if kind is MagnitudeKind.MIX:
        return (alpha * xn + beta * np.log1p(xn),
                alpha + beta / (1.0 + xn), None)
    raise ValueError(f"unknown magnitude kind {kind}")


def magnitude(kind: MagnitudeKind, x_norm: float, w_norm: float = 1.0,
              rho_eff: float = 1.0, alpha: float = 1.0, beta: float = 0.5,
              weighting: WeightingMode = WeightingMode.UNWEIGHTED) -> float:
    """Scalar magnitude function including the weighting variants."""
    if x_norm < 0:
        raise ValueError(f"x_norm must be non-negative, got {x_norm}")
    if kind in RADIUS_KINDS and rho_eff <= 0:
        raise ValueError(f"rho_eff must be positive, got {rho_eff}")
    xn = np.asarray(float(x_norm))
    if weighting is WeightingMode.UNWEIGHTED:
        return float(_magnitude_xpart(kind, alpha, beta, xn, rho_eff))
    if weighting is WeightingMode.LINEAR:
        return float(w_norm * _magnitude_xpart(kind, alpha, beta, xn, rho_eff))
    if weighting is WeightingMode.NONLINEAR_COUPLED:
        return float(alpha * np.tanh(x_norm * w_norm / rho_eff))
    if weighting is WeightingMode.NONLINEAR_SEPARATE:
        return float(alpha * np.tanh(w_norm / rho_eff) * np.tanh(x_norm / rho_eff))
    raise ValueError(f"unknown weighting mode {weighting}")


# ---------------------------------------------------------------------------
# angular activations g(theta) on [0, pi] -> [-1, 1]
# ---------------------------------------------------------------------------

def _sigmoid_scale(k: float) -> float:
    a = math.exp(-math.pi / (2.0 * k))
    return (1.0 + a) / (1.0 - a)


def angular(kind: AngularKind, theta, k: float = 0.3):
    """Angular activation g(theta); theta in [0, pi] (radians)."""
    theta = np.asarray(theta, dtype=float)
    if np.any(theta < -1e-9) or np.any(theta > math.pi + 1e-9):
        raise ValueError("theta outside [0, pi]")
    theta = np.clip(theta, 0.0, math.pi)
    if kind is AngularKind.LINEAR:
        out = 1.0 - (2.0 / math.pi) * theta
    elif kind is AngularKind.COSINE:
        out = np.cos(theta)
    elif kind is AngularKind.SIGMOID:
        # stable tanh form of the two-exponential ratio
        out = -_sigmoid_scale(k) * np.tanh((theta - math.pi / 2.0) / (2.0 * k))
    elif kind is AngularKind.SQUARE_COSINE:
        c = np.cos(theta)
        out = c * np.abs(c)
    else:
        raise ValueError(f"unknown angular kind {kind}")
    return out if out.ndim else float(out)


def _angular_from_cos(kind: AngularKind, cos: np.ndarray, k: float) -> np.ndarray:
    """Forward g given cos(theta); avoids arccos where g is a direct
    function of the cosine."""
    if kind is AngularKind.COSINE:
        return cos
    if kind is AngularKind.SQUARE_COSINE:
        return cos * np.abs(cos)
    theta = np.arccos(np.clip(cos, -1.0, 1.0))
    if kind is AngularKind.LINEAR:
        return 1.0 - (2.0 / math.pi) * theta
    if kind is AngularKind.SIGMOID:
        return -_sigmoid_scale(k) * np.tanh((theta - math.pi / 2.0) / (2.0 * k))
    raise ValueError(f"unknown angular kind {kind}")


def _angular_dg_dcos(kind: AngularKind, cos: np.ndarray, k: float) -> np.ndarray:
    """dg/dcos for the backward pass. For kinds routed through arccos the
    cosine is clamped away from +-1 to bound the 1/sin(theta) factor."""
    if kind is AngularKind.COSINE:
        return np.ones_like(cos)
    if kind is AngularKind.SQUARE_COSINE:
        return 2.0 * np.abs(cos)
    cos_c = np.clip(cos, -1.0 + COS_CLAMP, 1.0 - COS_CLAMP)
    sin = np.sqrt(1.0 - cos_c * cos_c)
    if kind is AngularKind.LINEAR:
        return (2.0 / math.pi) / sin
    if kind is AngularKind.SIGMOID:
        theta = np.arccos(cos_c)
        u = np.tanh((theta - math.pi / 2.0) / (2.0 * k))
        return _sigmoid_scale(k) * (1.0 - u * u) / (2.0 * k * sin)
    raise ValueError(f"unknown angular kind {kind}")


# ---------------------------------------------------------------------------
# angle decomposition
# ---------------------------------------------------------------------------

@dataclass
class AngleDecomposition:
    """Norms and angles between patch rows and kernel rows."""

    x_norm: np.ndarray      # [num_patches]
    w_norm: np.ndarray      # [num_kernels]
    cos_theta: np.ndarray   # [num_patches, num_kernels]
    theta: np.ndarray       # same shape, radians in [0, pi]


def decompose(patches: PatchMatrix | np.ndarray, W: np.ndarray) -> AngleDecomposition:
    """Split raw inner products into norms and angles.

    Rows with (near-)zero norm get cos(theta) = 0 by convention.
    """
    X = patches.patches if isinstance(patches, PatchMatrix) else np.atleast_2d(patches)
    W = np.atleast_2d(W)
    if X.shape[1] != W.shape[1]:
        raise DimensionError(f"patch_dim {X.shape[1]} != kernel dim {W.shape[1]}")
    xn = row_norms(X)
    wn = row_norms(W)
    denom = xn[:, None] * wn[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = np.where(denom > ZERO_NORM_EPS, (X @ W.T) / denom, 0.0)
    cos = np.clip(cos, -1.0, 1.0)
    return AngleDecomposition(xn, wn, cos, np.arccos(cos))


def relu_decoupled_equivalence(w: np.ndarray, x: np.ndarray) -> tuple[float, float]:
    """Evaluate max(0, <w,x>) both directly and in norm-angle form."""
    w = np.asarray(w, dtype=float).ravel()
    x = np.asarray(x, dtype=float).ravel()
    lhs = max(0.0, float(w @ x))
    nw, nx = float(np.linalg.norm(w)), float(np.linalg.norm(x))
    cos = float(w @ x) / (nw * nx)
    rhs = nw * nx * max(0.0, cos)
    return lhs, rhs


# ---------------------------------------------------------------------------
# the convolution layer
# ---------------------------------------------------------------------------

def he_init(rng: np.random.Generator, num_kernels: int, fan_in: int,
            dtype=np.float64) -> np.ndarray:
    return (rng.standard_normal((num_kernels, fan_in)) * math.sqrt(2.0 / fan_in)).astype(dtype)


@dataclass
class ConvGeometry:
    kernel: tuple[int, int]
    stride: int = 1
    padding: int = 0


class DecoupledConvLayer:
    """Convolution layer whose response is h(||w||,||x||) * g(theta).

    Kernels are stored as rows of W. Layers with an operator radius carry a
    per-kernel rho (init 1.0) plus a per-layer moving average of the patch
    norm; the effective radius is rho * norm_ma. The moving average is a
    constant for differentiation, like BN running stats.
    """

    RHO_MIN = 1e-3

    def __init__(self, in_channels: int, num_kernels: int, geometry: ConvGeometry,
                 spec: OperatorSpec, rng: np.random.Generator | None = None,
                 dtype=np.float64, name: str = "dconv"):
        self.in_channels = in_channels
        self.num_kernels = num_kernels
        self.geometry = geometry
        self.spec = spec
        self.name = name
        self.dtype = dtype
        kh, kw = geometry.kernel
        self.patch_dim = in_channels * kh * kw
        rng = rng or np.random.default_rng(0)
        self.W = he_init(rng, num_kernels, self.patch_dim, dtype)
        if spec.has_radius:
            self.rho = np.ones(num_kernels, dtype=dtype)
            self.norm_ma = 1.0
            self.ma_momentum = 0.01
        else:
            self.rho = None
            self.norm_ma = None
            self.ma_momentum = None

    # -- parameter plumbing -------------------------------------------------
    def params(self) -> dict[str, np.ndarray]:
        p = {"W": self.W}
        if self.rho is not None and self.spec.rho_learnable:
            p["rho"] = self.rho
        return p

    def param_tags(self) -> dict[str, str]:
        tags = {"W": "decoupled_kernel"}
        if self.rho is not None and self.spec.rho_learnable:
            tags["rho"] = "radius"
        return tags

    def state(self) -> dict:
        s = {"W": self.W}
        if self.rho is not None:
            s["rho"] = self.rho
            s["norm_ma"] = np.array([self.norm_ma], dtype=self.dtype)
        return s

    def post_update(self):
        """Clamp the radius after an optimizer step (rho stays positive)."""
        if self.rho is not None:
            np.maximum(self.rho, self.RHO_MIN, out=self.rho)

    def output_shape(self, input_shape):
        from .tensor import conv_output_size
        n, c, h, w = input_shape
        kh, kw = self.geometry.kernel
        oh = conv_output_size(h, kh, self.geometry.stride, self.geometry.padding)
        ow = conv_output_size(w, kw, self.geometry.stride, self.geometry.padding)
        return (n, self.num_kernels, oh, ow)

    # -- forward ------------------------------------------------------------
    def forward(self, x: np.ndarray, training: bool = False):
        if x.shape[1] != self.in_channels:
            raise DimensionError(
                f"{self.name}: expected {self.in_channels} input channels, got {x.shape[1]}")
        pm = im2col(x, self.geometry.kernel, self.geometry.stride, self.geometry.padding)
        X = pm.patches
        spec = self.spec
        xn = row_norms(X)
        wn = row_norms(self.W)

        rho_eff = None
        if spec.has_radius:
            if training:
                self.norm_ma = ((1.0 - self.ma_momentum) * self.norm_ma
                                + self.ma_momentum * float(xn.mean()))
            rho_eff = self.rho * self.norm_ma  # [n]

        cos = X @ self.W.T
        denom = xn[:, None] * wn[None, :]
        all_live = bool(np.all(denom > ZERO_NORM_EPS))
        if all_live:
            cos /= denom
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                cos = np.where(denom > ZERO_NORM_EPS, cos / denom, 0.0)
        np.clip(cos, -1.0, 1.0, out=cos)

        xn_col = xn[:, None]
        r_row = rho_eff[None, :] if rho_eff is not None else None
        if spec.weighting is WeightingMode.UNWEIGHTED:
            h = _magnitude_xpart(spec.magnitude, spec.alpha, spec.beta, xn_col, r_row)
        elif spec.weighting is WeightingMode.LINEAR:
            h = wn[None, :] * _magnitude_xpart(spec.magnitude, spec.alpha, spec.beta,
                                               xn_col, r_row)
        elif spec.weighting is WeightingMode.NONLINEAR_COUPLED:
            h = spec.alpha * np.tanh(xn_col * wn[None, :] / r_row)
        else:  # NONLINEAR_SEPARATE
            h = spec.alpha * np.tanh(wn[None, :] / r_row) * np.tanh(xn_col / r_row)

        g = _angular_from_cos(spec.angular, cos, spec.sigmoid_k)
        out = h * g
        if not np.all(np.isfinite(out)):
            raise NumericError(f"non-finite output in layer '{self.name}'")
        n, oh, ow = pm.spatial_map
        y = out.reshape(n, oh, ow, self.num_kernels).transpose(0, 3, 1, 2)
        cache = {
            "X": X, "xn": xn, "wn": wn, "cos": cos, "g": g, "h": h,
            "rho_eff": rho_eff, "all_live": all_live,
            "spatial_map": pm.spatial_map, "input_shape": x.shape,
        }
        return np.ascontiguousarray(y), cache

    # -- backward -----------------------------------------------------------
    def backward(self, cache: dict, grad_output: np.ndarray):
        if cache is None:
            raise ValueError(f"{self.name}: backward called without a forward cache")
        spec = self.spec
        X, xn, wn = cache["X"], cache["xn"], cache["wn"]
        cos, g, h, rho_eff = cache["cos"], cache["g"], cache["h"], cache["rho_eff"]
        n, oh, ow = cache["spatial_map"]
        P = X.shape[0]
        dOut = grad_output.transpose(0, 2, 3, 1).reshape(P, self.num_kernels)

        xn_col = xn[:, None]
        r_row = rho_eff[None, :] if rho_eff is not None else None
        alpha, beta = spec.alpha, spec.beta

        if spec.weighting is WeightingMode.UNWEIGHTED:
            if spec.magnitude is MagnitudeKind.TANH:
                sech2 = 1.0 - (h / alpha) ** 2     # h = alpha * tanh(||x||/r)
                dh_dxn = alpha * sech2 / r_row
                dh_dr = dh_dxn * (-xn_col / r_row)
            else:
                _, dh_dxn, dh_dr = _magnitude_xpart_derivs(spec.magnitude, alpha, beta,
                                                           xn_col, r_row)
            dh_dwn = None
        elif spec.weighting is WeightingMode.LINEAR:
            H, dH_dxn, dH_dr = _magnitude_xpart_derivs(spec.magnitude, alpha, beta,
                                                       xn_col, r_row)
            wn_row = wn[None, :]
            dh_dxn = wn_row * dH_dxn
            dh_dwn = np.broadcast_to(H, (P, self.num_kernels))
            dh_dr = wn_row * dH_dr if dH_dr is not None else None
        elif spec.weighting is WeightingMode.NONLINEAR_COUPLED:
            wn_row = wn[None, :]
            sech2 = 1.0 - (h / alpha) ** 2     # h = alpha * tanh(...)
            dh_dxn = alpha * sech2 * wn_row / r_row
            dh_dwn = alpha * sech2 * xn_col / r_row
            dh_dr = -alpha * sech2 * xn_col * wn_row / r_row ** 2
        else:  # NONLINEAR_SEPARATE
            wn_row = wn[None, :]
            tw = np.tanh(wn_row / r_row)
            tx = np.tanh(xn_col / r_row)
            dh_dxn = alpha * tw * (1.0 - tx * tx) / r_row
            dh_dwn = alpha * (1.0 - tw * tw) * tx / r_row
            dh_dr = -alpha * ((1.0 - tw * tw) * wn_row * tx
                              + tw * (1.0 - tx * tx) * xn_col) / r_row ** 2

        live_x = xn > ZERO_NORM_EPS
        all_live = cache["all_live"]
        if all_live:
            inv_xn = 1.0 / xn
        else:
            inv_xn = np.where(live_x, 1.0 / np.where(live_x, xn, 1.0), 0.0)
        inv_wn = 1.0 / wn
        Xhat = X * inv_xn[:, None]
        What = self.W * inv_wn[:, None]

        # angle-path coefficient; zero-norm patches carry no angle gradient
        A = dOut * h
        if spec.angular is not AngularKind.COSINE:  # dg/dcos == 1 for cosine
            A *= _angular_dg_dcos(spec.angular, cos, spec.sigmoid_k)
        if not all_live:
            A *= live_x[:, None]

        dOut_g = dOut * g

        # gradient w.r.t. patches
        C_row = (dOut_g * dh_dxn).sum(axis=1)                      # [P]
        grad_X = (A @ What) * inv_xn[:, None]
        grad_X += (C_row - (A * cos).sum(axis=1) * inv_xn)[:, None] * Xhat

        # gradient w.r.t. kernels
        grad_W = (A.T @ Xhat) * inv_wn[:, None]
        col = -(A * cos).sum(axis=0) * inv_wn                      # [n]
        if dh_dwn is not None:
            col = col + (dOut_g * dh_dwn).sum(axis=0)
        grad_W += col[:, None] * What

        grads = {"W": grad_W}
        if self.rho is not None and spec.rho_learnable and dh_dr is not None:
            grads["rho"] = (dOut_g * dh_dr).sum(axis=0) * self.norm_ma

        grad_input = col2im_grad(
            PatchMatrix(grad_X, cache["spatial_map"]), cache["input_shape"],
            self.geometry.kernel, self.geometry.stride, self.geometry.padding)
        return grad_input, grads
