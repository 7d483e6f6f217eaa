"""Low-level neural-net kernels: batched same-padding convolution, activations, Adam.

Everything operates on float64 numpy arrays in (N, C, H, W) layout. Backward
passes are exact (the gradient checks in the test suite compare them against
central finite differences), so nothing here may introduce stochastic rounding
or fused approximations.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError


def im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Unfold x (N,C,H,W) into (N, H*W, C*k*k) patches with zero same-padding."""
    n, c, h, w = x.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # (N,C,H,W,k,k)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, h * w, c * k * k)


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Stride-1 same-padding cross-correlation. x: (N,C,H,W), w: (F,C,k,k), b: (F,)."""
    n, c, h, wd = x.shape
    f, cw, k, _ = w.shape
    if cw != c:
        raise ValueError(f"kernel expects {cw} input channels, got {c}")
    cols = im2col(x, k)
    out = cols @ w.reshape(f, c * k * k).T
    if b is not None:
        out = out + b
    return out.transpose(0, 2, 1).reshape(n, f, h, wd)


def conv2d_backward(
    x: np.ndarray, w: np.ndarray, dout: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of conv2d. Returns (dx, dw, db); db is valid only if a bias was used."""
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    dout_r = dout.reshape(n, f, h * wd).transpose(0, 2, 1)  # (N, HW, F)
    cols = im2col(x, k)
    dw = np.einsum("nif,nic->fc", dout_r, cols).reshape(w.shape)
    db = dout.sum(axis=(0, 2, 3))
    # dx of a stride-1 same conv is a conv of dout with the spatially flipped,
    # channel-transposed kernel.
    w_rot = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)  # (C, F, k, k)
    dx = conv2d(dout, np.ascontiguousarray(w_rot))
    return dx, dw, db


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def drelu(x: np.ndarray, dout: np.ndarray) -> np.ndarray:
    return np.where(x > 0, dout, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """(N,C,H,W) -> (N,C) channel means."""
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(dpool: np.ndarray, h: int, w: int) -> np.ndarray:
    return np.repeat(dpool[:, :, None, None], h, axis=2).repeat(w, axis=3) / (h * w)


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def check_finite(arrays: dict[str, np.ndarray], context: str) -> None:
    for name, a in arrays.items():
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite values in {name} ({context})")


@dataclass
class Adam:
    """Adam optimizer over a dict of named parameter arrays."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """One descent step; returns a new parameter dict, inputs untouched."""
        self.t += 1
        out = {}
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name)
            v = self.v.get(name)
            if m is None:
                m = np.zeros_like(p)
                v = np.zeros_like(p)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name] = m
            self.v[name] = v
            m_hat = m / (1.0 - self.beta1**self.t)
            v_hat = v / (1.0 - self.beta2**self.t)
            out[name] = p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return out


def flatten_params(params: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([params[k].ravel() for k in params])


def unflatten_params(vec: np.ndarray, template: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    off = 0
    for k, a in template.items():
        out[k] = vec[off : off + a.size].reshape(a.shape).copy()
        off += a.size
    if off != vec.size:
        raise ValueError(f"vector length {vec.size} does not match template ({off})")
    return out
