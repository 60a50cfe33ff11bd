"""Compiled loops for the selective scan (primal, tangent, cotangent).

The transcendental part, expm1(delta * A), is evaluated up front by numpy on
the whole (batch, T, channels, d_state) block; the loops below only do the
sequential recurrence, with (channels, d_state) contiguous so the inner loop
vectorises.
"""

import numpy as np
from numba import njit

# Constants are float32 so float32 inputs stay type-stable (and vectorise);
# float64 inputs promote them exactly enough for the series terms.
SERIES_THRESHOLD = np.float32(1e-4)
ONE = np.float32(1.0)
HALF = np.float32(0.5)
SIXTH = np.float32(1.0 / 6.0)
THIRD = np.float32(1.0 / 3.0)
EIGHTH = np.float32(0.125)
THIRTIETH = np.float32(1.0 / 30.0)
INV144 = np.float32(1.0 / 144.0)
# d/dx [expm1(x)/x] cancels badly in float32 near 0, so its series runs wider
DPHI_THRESHOLD = np.float32(1e-2)


def decay_expm1(delta: np.ndarray, A: np.ndarray) -> np.ndarray:
    """expm1(delta[..., None] * A) as a (batch, T, channels, d_state) block."""
    x = delta[..., None] * A
    return np.expm1(x, out=x)


@njit(cache=True, fastmath=True)
def scan_forward(u, delta, A, B, C, em1):
    nb, nt, nc = u.shape
    ns = A.shape[1]
    zero = u[0, 0, 0] - u[0, 0, 0]  # dtype-matched 0 keeps accumulators vectorisable
    y = np.empty((nb, nt, nc), dtype=u.dtype)
    H = np.empty((nb, nt, nc, ns), dtype=u.dtype)
    h = np.zeros((nc, ns), dtype=u.dtype)
    for b in range(nb):
        h[:, :] = 0.0
        for t in range(nt):
            for c in range(nc):
                d = delta[b, t, c]
                ut = u[b, t, c]
                acc = zero
                for n in range(ns):
                    x = d * A[c, n]
                    e = em1[b, t, c, n]
                    if abs(x) < SERIES_THRESHOLD:
                        phi = ONE + x * (HALF + x * SIXTH)
                    else:
                        phi = e / x
                    hn = (e + ONE) * h[c, n] + d * phi * B[b, t, n] * ut
                    h[c, n] = hn
                    H[b, t, c, n] = hn
                    acc += C[b, t, n] * hn
                y[b, t, c] = acc
    return y, H


@njit(cache=True, fastmath=True)
def scan_tangent(u, delta, A, B, C, em1, du, ddelta, dA, dB, dC):
    nb, nt, nc = u.shape
    ns = A.shape[1]
    zero = u[0, 0, 0] - u[0, 0, 0]  # dtype-matched 0 keeps accumulators vectorisable
    dy = np.empty((nb, nt, nc), dtype=u.dtype)
    h = np.zeros((nc, ns), dtype=u.dtype)
    dh = np.zeros((nc, ns), dtype=u.dtype)
    for b in range(nb):
        h[:, :] = 0.0
        dh[:, :] = 0.0
        for t in range(nt):
            for c in range(nc):
                d = delta[b, t, c]
                dd = ddelta[b, t, c]
                ut = u[b, t, c]
                dut = du[b, t, c]
                acc = zero
                for n in range(ns):
                    a_cn = A[c, n]
                    x = d * a_cn
                    e = em1[b, t, c, n]
                    ea = e + ONE
                    if abs(x) < SERIES_THRESHOLD:
                        phi = ONE + x * (HALF + x * SIXTH)
                    else:
                        phi = e / x
                    if abs(x) < DPHI_THRESHOLD:
                        dphi = HALF + x * (THIRD + x * (EIGHTH + x * (THIRTIETH + x * INV144)))
                    else:
                        dphi = (x * ea - e) / (x * x)
                    beta = d * phi
                    # exp(d*A) and beta = d*phi(d*A) perturbed by (dd, dA)
                    dea = ea * (dd * a_cn + d * dA[c, n])
                    dbeta = ea * dd + d * d * dphi * dA[c, n]
                    bn = B[b, t, n]
                    hp = h[c, n]
                    dhn = (dea * hp + ea * dh[c, n] + dbeta * bn * ut
                           + beta * dB[b, t, n] * ut + beta * bn * dut)
                    hn = ea * hp + beta * bn * ut
                    h[c, n] = hn
                    dh[c, n] = dhn
                    acc += dC[b, t, n] * hn + C[b, t, n] * dhn
                dy[b, t, c] = acc
    return dy


@njit(cache=True, fastmath=True)
def scan_backward(u, delta, A, B, C, em1, H, gy):
    nb, nt, nc = u.shape
    ns = A.shape[1]
    zero = u[0, 0, 0] - u[0, 0, 0]  # dtype-matched 0 keeps accumulators vectorisable
    gu = np.empty_like(u)
    gdelta = np.empty_like(delta)
    gA = np.zeros(A.shape, dtype=u.dtype)
    gB = np.zeros(B.shape, dtype=u.dtype)
    gC = np.zeros(C.shape, dtype=u.dtype)
    gh = np.zeros((nc, ns), dtype=u.dtype)
    for b in range(nb):
        gh[:, :] = 0.0
        for t in range(nt - 1, -1, -1):
            # h_{-1} = 0: read any valid row and zero it with a mask
            tp = t - 1 if t > 0 else 0
            keep = ONE if t > 0 else zero
            for c in range(nc):
                g = gy[b, t, c]
                d = delta[b, t, c]
                ut = u[b, t, c]
                acc_u = zero
                acc_d = zero
                for n in range(ns):
                    a_cn = A[c, n]
                    x = d * a_cn
                    e = em1[b, t, c, n]
                    ea = e + ONE
                    if abs(x) < SERIES_THRESHOLD:
                        phi = ONE + x * (HALF + x * SIXTH)
                    else:
                        phi = e / x
                    if abs(x) < DPHI_THRESHOLD:
                        dphi = HALF + x * (THIRD + x * (EIGHTH + x * (THIRTIETH + x * INV144)))
                    else:
                        dphi = (x * ea - e) / (x * x)
                    beta = d * phi
                    bn = B[b, t, n]
                    ghn = gh[c, n] + C[b, t, n] * g
                    gC[b, t, n] += g * H[b, t, c, n]
                    acc_u += ghn * beta * bn
                    gB[b, t, n] += ghn * beta * ut
                    gbeta = ghn * bn * ut
                    gea = ghn * H[b, tp, c, n] * keep
                    acc_d += ea * (gea * a_cn + gbeta)
                    gA[c, n] += gea * d * ea + gbeta * d * d * dphi
                    gh[c, n] = ghn * ea
                gu[b, t, c] = acc_u
                gdelta[b, t, c] = acc_d
    return gu, gdelta, gA, gB, gC
