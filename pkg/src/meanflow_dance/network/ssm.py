"""Diagonal state-space discretisation and the plain (non-differentiable) scan."""

from __future__ import annotations

import numpy as np

SERIES_THRESHOLD = 1e-4


def discretize(delta, A, B):
    """Zero-order-hold discretisation of a diagonal SSM.

    Returns ``(A_bar, B_bar)`` with A_bar = exp(delta*A) and
    B_bar = (delta*A)^-1 (exp(delta*A) - 1) * delta*B, elementwise. Below
    |delta*A| < 1e-4 the ratio is evaluated by its Taylor series, whose
    limit at A=0 is B_bar = delta*B.
    """
    delta = np.asarray(delta, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if np.any(delta <= 0):
        raise ValueError("discretize needs delta > 0")
    x = delta * A
    small = np.abs(x) < SERIES_THRESHOLD
    safe = np.where(small, 1.0, x)
    phi = np.where(small, 1.0 + x * (0.5 + x / 6.0), np.expm1(safe) / safe)
    return np.exp(x), phi * delta * B


def selective_scan(x, A_bar, B_bar, C):
    """Run h_t = A_bar_t h_{t-1} + B_bar_t x_t, y_t = C_t . h_t from h_0 = 0.

    x: (T, channels). A_bar, B_bar: broadcastable to (T, channels, d_state).
    C: (T, d_state) shared across channels, (T, channels, d_state), or a
    scalar. Returns y: (T, channels).
    """
    x = np.asarray(x, dtype=np.float64)
    T, nc = x.shape
    A_bar = np.atleast_1d(np.asarray(A_bar, dtype=np.float64))
    B_bar = np.atleast_1d(np.asarray(B_bar, dtype=np.float64))
    C = np.atleast_1d(np.asarray(C, dtype=np.float64))
    if C.ndim == 2:
        C = C[:, None, :]
    ns = max(A_bar.shape[-1], B_bar.shape[-1], C.shape[-1])
    A_bar = np.broadcast_to(A_bar, (T, nc, ns))
    B_bar = np.broadcast_to(B_bar, (T, nc, ns))
    C = np.broadcast_to(C, (T, nc, ns))
    h = np.zeros((nc, ns))
    y = np.empty((T, nc))
    for t in range(T):
        h = A_bar[t] * h + B_bar[t] * x[t][:, None]
        y[t] = (C[t] * h).sum(axis=-1)
    return y
