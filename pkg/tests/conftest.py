"""Shared helpers: brute-force oracles and small builders used across tests."""

import numpy as np
import pytest

from polarconv.operators import ConvGeometry


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def naive_conv2d(x, W, kernel, stride=1, padding=0):
    """Triple-loop inner-product convolution oracle, kernels as rows of W.

    Deliberately slow and index-explicit so it shares no code with im2col.
    """
    n, c, h, w = x.shape
    kh, kw = kernel
    num_k = W.shape[0]
    if padding:
        padded = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
        padded[:, :, padding:padding + h, padding:padding + w] = x
    else:
        padded = x.astype(np.float64)
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, num_k, oh, ow))
    for b in range(n):
        for k in range(num_k):
            kern = W[k].reshape(c, kh, kw)
            for i in range(oh):
                for j in range(ow):
                    patch = padded[b, :, i * stride:i * stride + kh,
                                   j * stride:j * stride + kw]
                    out[b, k, i, j] = float((patch * kern).sum())
    return out


def naive_matmul(a, b):
    """Triple-loop matrix product oracle."""
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += float(a[i, t]) * float(b[t, j])
            out[i, j] = s
    return out


def central_difference(fn, arr, step=1e-5):
    """Finite-difference gradient of scalar fn() w.r.t. arr, in place."""
    grad = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn()
        flat[i] = orig - step
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def rel_err(a, b, floor=1e-8):
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / denom)


GEOM_3x3 = ConvGeometry(kernel=(3, 3), stride=1, padding=1)

# Per-criterion PASS/FAIL lines from the acceptance tests; replayed after the
# run so they stay visible even though output capture swallows them mid-test.
SUMMARY_LINES = []


def pytest_terminal_summary(terminalreporter):
    if SUMMARY_LINES:
        terminalreporter.section("acceptance criteria")
        for line in SUMMARY_LINES:
            terminalreporter.write_line(line)
