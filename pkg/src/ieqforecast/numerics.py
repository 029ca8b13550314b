"""Dense kernels with hand-derived backward passes, plus a finite-difference checker.

Everything works on float64 numpy arrays. Layers that take batches accept a
leading batch axis; single samples are promoted and squeezed back.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import RejectedInputError

ACTIVATIONS = ("sigmoid", "tanh", "relu")


class ShapeError(RejectedInputError):
    """Raised when array shapes do not satisfy an operation's contract."""


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def matmul(a, b) -> np.ndarray:
    a, b = _as_f64(a), _as_f64(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split on sign so exp never overflows
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(x, kind: str) -> np.ndarray:
    x = _as_f64(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def activation_backward(x, upstream, kind: str) -> np.ndarray:
    """Gradient w.r.t. the pre-activation ``x``."""
    x, upstream = _as_f64(x), _as_f64(upstream)
    if x.shape != upstream.shape:
        raise ShapeError(f"activation backward: {x.shape} vs upstream {upstream.shape}")
    if kind == "sigmoid":
        s = sigmoid(x)
        return upstream * s * (1.0 - s)
    if kind == "tanh":
        t = np.tanh(x)
        return upstream * (1.0 - t * t)
    if kind == "relu":
        return upstream * (x > 0)
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def dense_forward(x, weight, bias) -> np.ndarray:
    """``y = x @ weight + bias`` for ``x`` of shape (..., n_in)."""
    x, weight, bias = _as_f64(x), _as_f64(weight), _as_f64(bias)
    if x.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ShapeError(
            f"dense: input {x.shape}, weight {weight.shape}, bias {bias.shape}"
        )
    return x @ weight + bias


def dense_backward(x, weight, upstream):
    """Returns ``(input_grad, weight_grad, bias_grad)``."""
    x, weight, upstream = _as_f64(x), _as_f64(weight), _as_f64(upstream)
    if upstream.shape != x.shape[:-1] + (weight.shape[1],):
        raise ShapeError(f"dense backward: upstream {upstream.shape} for input {x.shape}")
    x2 = x.reshape(-1, x.shape[-1])
    g2 = upstream.reshape(-1, weight.shape[1])
    return upstream @ weight.T, x2.T @ g2, g2.sum(axis=0)


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    # (B, T, C) -> (B, T-k+1, k*C), taps ordered (k, c)
    t_out = x.shape[1] - k + 1
    return np.concatenate([x[:, j : j + t_out, :] for j in range(k)], axis=2)


def conv1d_forward(x, kernels, bias) -> np.ndarray:
    """Valid, stride-1 temporal convolution.

    ``x`` is (T, C_in) or (B, T, C_in); ``kernels`` is (K, C_in, C_out).
    ``out[t, o] = bias[o] + sum_{k,c} x[t+k, c] * kernels[k, c, o]``.
    """
    x, kernels, bias = _as_f64(x), _as_f64(kernels), _as_f64(bias)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or kernels.ndim != 3:
        raise ShapeError(f"conv1d: input {x.shape}, kernels {kernels.shape}")
    k, c_in, c_out = kernels.shape
    if x.shape[2] != c_in or bias.shape != (c_out,):
        raise ShapeError(
            f"conv1d: input channels {x.shape[2]}, kernels {kernels.shape}, bias {bias.shape}"
        )
    if x.shape[1] < k:
        raise ShapeError(f"conv1d: sequence length {x.shape[1]} shorter than kernel {k}")
    out = _im2col(x, k) @ kernels.reshape(k * c_in, c_out) + bias
    return out[0] if single else out


def conv1d_backward(x, kernels, upstream):
    """Returns ``(input_grad, kernel_grad, bias_grad)`` for :func:`conv1d_forward`."""
    x, kernels, upstream = _as_f64(x), _as_f64(kernels), _as_f64(upstream)
    single = x.ndim == 2
    if single:
        x, upstream = x[None], upstream[None]
    k, c_in, c_out = kernels.shape
    b, t, _ = x.shape
    t_out = t - k + 1
    if upstream.shape != (b, t_out, c_out):
        raise ShapeError(f"conv1d backward: upstream {upstream.shape}, expected {(b, t_out, c_out)}")
    cols = _im2col(x, k).reshape(-1, k * c_in)
    g = upstream.reshape(-1, c_out)
    kernel_grad = (cols.T @ g).reshape(k, c_in, c_out)
    bias_grad = g.sum(axis=0)
    dcols = (upstream @ kernels.reshape(k * c_in, c_out).T).reshape(b, t_out, k, c_in)
    dx = np.zeros_like(x)
    for j in range(k):
        dx[:, j : j + t_out, :] += dcols[:, :, j, :]
    return (dx[0] if single else dx), kernel_grad, bias_grad


@dataclass(frozen=True)
class GradCheckReport:
    max_relative_error: float
    worst_parameter_index: int
    passed: bool


class EvaluationError(ArithmeticError):
    """A function under gradient check returned a non-finite value."""


def gradient_check(
    f: Callable[[np.ndarray], float],
    params,
    analytic_grad,
    eps: float = 1e-5,
    tol: float = 1e-4,
    indices=None,
) -> GradCheckReport:
    """Compare ``analytic_grad`` against central differences of ``f`` at ``params``.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    ``indices`` restricts the check to a subset of coordinates.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    p = np.array(params, dtype=np.float64, copy=True).ravel()
    analytic = np.asarray(analytic_grad, dtype=np.float64).ravel()
    if analytic.shape != p.shape:
        raise ShapeError(f"gradient has shape {analytic.shape}, params {p.shape}")
    idx = range(p.size) if indices is None else indices

    worst_err, worst_i = 0.0, 0
    for i in idx:
        orig = p[i]
        p[i] = orig + eps
        fp = float(f(p))
        p[i] = orig - eps
        fm = float(f(p))
        p[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError(f"non-finite function value at coordinate {i}")
        numeric = (fp - fm) / (2.0 * eps)
        a = analytic[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        if err > worst_err:
            worst_err, worst_i = float(err), int(i)
    return GradCheckReport(worst_err, worst_i, bool(worst_err < tol))
