"""Fused per-lane selective-scan kernels (numba).

Each (batch, channel, state) lane runs its recurrence independently, so the
discretization, the scan and the reductions happen in one pass without the
(N, L, E, S) temporaries of the array implementation in :mod:`dvmsr.ssm`.
"""

from __future__ import annotations

import math

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None

SERIES_THRESHOLD = 1e-6

AVAILABLE = numba is not None


def _jit(fn):
    if numba is None:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


@_jit
def _phi(z, a):
    # (exp(z) - 1) / z from a = exp(z); expm1 where a - 1 would cancel
    if abs(z) < SERIES_THRESHOLD:
        return 1.0 + 0.5 * z
    if abs(z) < 0.1:
        return math.expm1(z) / z
    return (a - 1.0) / z


@_jit
def _dphi(z, a, phi):
    if abs(z) < 1e-3:
        return 0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0
    return (a - phi) / z


@_jit
def scan_forward(u, delta, A, B, C, states):
    """y[n, t, e] = sum_s C[n, t, s] h[n, t, e, s]; fills ``states`` if it is non-empty."""
    n_batch, length, e_dim = u.shape
    s_dim = A.shape[1]
    keep = states.shape[0] > 0
    y = np.zeros((n_batch, length, e_dim))
    h = np.zeros((e_dim, s_dim))
    for n in range(n_batch):
        h[:, :] = 0.0
        for t in range(length):
            for e in range(e_dim):
                d = delta[n, t, e]
                du = d * u[n, t, e]
                acc = 0.0
                for s in range(s_dim):
                    z = d * A[e, s]
                    a = math.exp(z)
                    hv = a * h[e, s] + _phi(z, a) * du * B[n, t, s]
                    h[e, s] = hv
                    acc += C[n, t, s] * hv
                y[n, t, e] = acc
            if keep:
                states[n, t] = h
    return y


@_jit
def scan_backward(gy, u, delta, A, B, C, states):
    n_batch, length, e_dim = u.shape
    s_dim = A.shape[1]
    gu = np.zeros_like(u)
    gdelta = np.zeros_like(delta)
    gA = np.zeros_like(A)
    gB = np.zeros_like(B)
    gC = np.zeros_like(C)
    acc = np.zeros((e_dim, s_dim))
    for n in range(n_batch):
        acc[:, :] = 0.0
        for t in range(length - 1, -1, -1):
            for e in range(e_dim):
                g = gy[n, t, e]
                d = delta[n, t, e]
                uv = u[n, t, e]
                gd = 0.0
                guv = 0.0
                for s in range(s_dim):
                    h = states[n, t, e, s]
                    gC[n, t, s] += g * h
                    ac = acc[e, s] + g * C[n, t, s]
                    a_es = A[e, s]
                    z = d * a_es
                    a = math.exp(z)
                    phi = _phi(z, a)
                    bu = B[n, t, s] * uv
                    hprev = states[n, t - 1, e, s] if t > 0 else 0.0
                    gaa = ac * hprev * a
                    gbu = ac * bu
                    gd += gaa * a_es + gbu * a
                    gA[e, s] += gaa * d + gbu * _dphi(z, a, phi) * d * d
                    gain = ac * phi * d
                    gB[n, t, s] += gain * uv
                    guv += gain * B[n, t, s]
                    acc[e, s] = ac * a
                gdelta[n, t, e] = gd
                gu[n, t, e] = guv
    return gu, gdelta, gA, gB, gC
