"""Selective state-space scan.

Continuous diagonal SSM ``h' = A h + B x, y = C h`` discretized by zero-order
hold with a per-token step ``delta``::

    A_bar = exp(delta * A)
    B_bar = (delta * A)^-1 (exp(delta * A) - 1) * delta * B

and evaluated as ``h_t = A_bar_t h_{t-1} + B_bar_t x_t``, ``y_t = C_t h_t + D x_t``
from ``h_0 = 0``.  ``A`` is stored as a (channels, state) array of negative
reals, one diagonal per channel.

Two layers live here: plain-array functions operating on :class:`SsmParams` /
:class:`SsmDiscrete`, and :func:`selective_scan_op`, the differentiable fused
kernel the network uses.  Both share :func:`zoh_discretize` and
:func:`scan_recurrence`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _scan_kernels
from .autodiff import Tensor, is_grad_enabled

__all__ = [
    "DomainError",
    "SsmParams",
    "SsmDiscrete",
    "zoh_discretize",
    "zoh_input_gain",
    "selectivize",
    "scan_recurrence",
    "selective_scan",
    "selective_scan_bidirectional",
    "selective_scan_op",
    "init_ssm_params",
    "init_dt_bias",
    "s4d_real_A",
    "SERIES_THRESHOLD",
]

# below this |delta*A| the ZOH input gain uses its two-term series
SERIES_THRESHOLD = 1e-6
# tokens per block in the no-grad path; bounds the (N, L, D, state) buffers
_CHUNK_ELEMS = 1 << 22
DEFAULT_BACKEND = "fused"


class DomainError(ValueError):
    pass


@dataclass
class SsmParams:
    """One direction's selective-SSM parameters for ``d`` channels.

    ``dt_down`` (rank, d) and ``dt_up`` (d, rank) form the rank-reduced step
    projection; ``B_proj`` / ``C_proj`` are (state, d).
    """

    A: np.ndarray
    D_skip: np.ndarray | None
    dt_bias: np.ndarray
    dt_down: np.ndarray
    dt_up: np.ndarray
    B_proj: np.ndarray
    C_proj: np.ndarray

    @property
    def channels(self) -> int:
        return self.A.shape[0]

    @property
    def n_state(self) -> int:
        return self.A.shape[1]

    def check(self) -> None:
        if self.A.ndim != 2 or self.A.shape[1] < 1:
            raise DomainError(f"A must be (channels, state), got {self.A.shape}")
        if np.any(self.A >= 0):
            raise DomainError("A must be strictly negative")


@dataclass
class SsmDiscrete:
    """Per-token discretized parameters, all with a leading batch axis.

    ``A_bar`` and ``B_bar_x`` are (N, L, D, state); ``C_seq`` is (N, L, state).
    """

    A_bar: np.ndarray
    B_bar_x: np.ndarray
    C_seq: np.ndarray
    delta: np.ndarray | None = None


def _phi(z: np.ndarray) -> np.ndarray:
    # (exp(z) - 1) / z with the two-term series limit near zero
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.expm1(z) / z
    small = np.abs(z) < SERIES_THRESHOLD
    if small.any():
        out[small] = 1.0 + 0.5 * z[small]
    return out


def _dphi(z: np.ndarray, a_bar: np.ndarray, phi: np.ndarray) -> np.ndarray:
    # phi'(z) = (exp(z) - phi(z)) / z; series where that cancels
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (a_bar - phi) / z
    small = np.abs(z) < 1e-3
    if small.any():
        zs = z[small]
        out[small] = 0.5 + zs / 3.0 + zs * zs / 8.0 + zs * zs * zs / 30.0
    return out


def zoh_input_gain(dA: np.ndarray) -> np.ndarray:
    """``(dA)^-1 (exp(dA) - 1)``, the factor multiplying ``delta * B``."""
    return _phi(np.asarray(dA, dtype=np.float64))


def zoh_discretize(A, B, delta) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order-hold discretization of a diagonal SSM (broadcasting)."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta <= 0):
        raise DomainError("zoh_discretize: delta must be > 0")
    dA = delta * A
    return np.exp(dA), _phi(dA) * delta * B


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def selectivize(tokens: np.ndarray, params: SsmParams) -> SsmDiscrete:
    """Token-dependent step, input and readout projections, then ZOH."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.shape[-1] != params.channels:
        raise DomainError(
            f"tokens have {tokens.shape[-1]} channels, params expect {params.channels}"
        )
    delta = _softplus(tokens @ params.dt_down.T @ params.dt_up.T + params.dt_bias)
    B = tokens @ params.B_proj.T
    C = tokens @ params.C_proj.T
    a_bar, b_bar = zoh_discretize(
        params.A, B[:, :, None, :], delta[..., None]
    )
    return SsmDiscrete(a_bar, b_bar * tokens[..., None], C, delta)


def scan_recurrence(
    a_bar: np.ndarray, bx: np.ndarray, h0: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """All hidden states of ``h_t = a_t * h_{t-1} + bx_t`` along axis 1.

    Returns ``(states, last_state)``; ``states`` has the shape of ``bx``.
    """
    n, length = bx.shape[:2]
    h = np.zeros((n,) + bx.shape[2:]) if h0 is None else h0.copy()
    states = np.empty_like(bx)
    for t in range(length):
        h = a_bar[:, t] * h
        h += bx[:, t]
        states[:, t] = h
    return states, h


def selective_scan(disc: SsmDiscrete, x: np.ndarray, D_skip=None) -> np.ndarray:
    states, _ = scan_recurrence(disc.A_bar, disc.B_bar_x)
    y = np.einsum("nlds,nls->nld", states, disc.C_seq)
    if D_skip is not None:
        y = y + np.asarray(x) * D_skip
    return y


def selective_scan_bidirectional(
    tokens: np.ndarray, params_fwd: SsmParams, params_bwd: SsmParams
) -> np.ndarray:
    """Forward scan plus the re-reversed scan of the reversed sequence."""
    tokens = np.asarray(tokens, dtype=np.float64)
    fwd = selective_scan(selectivize(tokens, params_fwd), tokens, params_fwd.D_skip)
    rev = tokens[:, ::-1]
    bwd = selective_scan(selectivize(rev, params_bwd), rev, params_bwd.D_skip)
    return fwd + bwd[:, ::-1]


def s4d_real_A(channels: int, n_state: int) -> np.ndarray:
    """``A[d, n] = -(n + 1)`` for every channel."""
    return -np.tile(np.arange(1, n_state + 1, dtype=np.float64), (channels, 1))


def init_dt_bias(
    channels: int,
    rng: np.random.Generator,
    dt_min: float = 1e-3,
    dt_max: float = 1e-1,
) -> np.ndarray:
    """Bias whose softplus is a log-uniform step in [dt_min, dt_max]."""
    dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), size=channels))
    return dt + np.log(-np.expm1(-dt))  # inverse softplus


def init_ssm_params(
    channels: int,
    n_state: int,
    dt_rank: int,
    rng: np.random.Generator,
    d_skip: bool = True,
) -> SsmParams:
    bound = dt_rank ** -0.5
    std = channels ** -0.5
    return SsmParams(
        A=s4d_real_A(channels, n_state),
        D_skip=np.ones(channels) if d_skip else None,
        dt_bias=init_dt_bias(channels, rng),
        dt_down=rng.normal(0.0, std, size=(dt_rank, channels)),
        dt_up=rng.uniform(-bound, bound, size=(channels, dt_rank)),
        B_proj=rng.normal(0.0, std, size=(n_state, channels)),
        C_proj=rng.normal(0.0, std, size=(n_state, channels)),
    )


def selective_scan_op(
    u: Tensor,
    delta: Tensor,
    A: Tensor,
    B: Tensor,
    C: Tensor,
    D: Tensor | None = None,
    backend: str | None = None,
) -> Tensor:
    """Differentiable fused discretize-and-scan.

    Shapes: ``u``, ``delta`` (N, L, E); ``A`` (E, S); ``B``, ``C`` (N, L, S);
    ``D`` (E,).  Returns ``y`` (N, L, E).  ``backend`` is ``"fused"`` (numba
    lane kernels) or ``"numpy"``; the default is fused when numba imports.
    """
    backend = backend or DEFAULT_BACKEND
    if backend not in ("fused", "numpy"):
        raise ValueError(f"unknown scan backend {backend!r}")
    if backend == "fused" and not _scan_kernels.AVAILABLE:
        backend = "numpy"
    parents = (u, delta, A, B, C) + ((D,) if D is not None else ())
    track = is_grad_enabled() and any(p.requires_grad for p in parents)
    args = tuple(np.ascontiguousarray(t.data) for t in (u, delta, A, B, C))
    if backend == "fused":
        y, bwd = _fused_scan(args, track)
    else:
        y, bwd = _numpy_scan(args, track)
    ud = args[0]
    if D is not None:
        y = y + ud * D.data

    def backward(gy):
        grads = list(bwd(np.ascontiguousarray(gy)))
        if D is not None:
            grads[0] = grads[0] + gy * D.data
            grads.append((gy * ud).sum(axis=(0, 1)))
        return grads

    return Tensor.from_op(y, parents, backward, "selective_scan")


def _fused_scan(args, track):
    ud, dd, Ad, Bd, Cd = args
    n, length, e = ud.shape
    states = np.empty((n, length, e, Ad.shape[1]) if track else (0, 0, 0, 0))
    y = _scan_kernels.scan_forward(ud, dd, Ad, Bd, Cd, states)

    def bwd(gy):
        return _scan_kernels.scan_backward(gy, ud, dd, Ad, Bd, Cd, states)

    return y, bwd


def _numpy_scan(args, track):
    ud, dd, Ad, Bd, Cd = args
    n, length, e = ud.shape
    s = Ad.shape[1]
    if not track:
        step = max(1, _CHUNK_ELEMS // max(1, n * e * s))
        y = np.empty((n, length, e))
        h = None
        for lo in range(0, length, step):
            hi = min(length, lo + step)
            z = dd[:, lo:hi, :, None] * Ad
            bx = _phi(z) * dd[:, lo:hi, :, None] * Bd[:, lo:hi, None, :]
            bx *= ud[:, lo:hi, :, None]
            st, h = scan_recurrence(np.exp(z), bx, h)
            y[:, lo:hi] = np.einsum("nles,nls->nle", st, Cd[:, lo:hi])
        return y, None

    z = dd[..., None] * Ad
    a_bar = np.exp(z)
    phi = _phi(z)
    gain = phi * dd[..., None]
    bu = Bd[:, :, None, :] * ud[..., None]
    states, _ = scan_recurrence(a_bar, gain * bu)
    y = np.einsum("nles,nls->nle", states, Cd)

    def bwd(gy):
        gC = np.einsum("nle,nles->nls", gy, states)
        direct = gy[..., None] * Cd[:, :, None, :]
        # g_bx[t] = dL/d(bx_t) = dL/dh_t, accumulated right to left
        g_bx = np.empty_like(states)
        acc = np.zeros((n, e, s))
        for t in range(length - 1, -1, -1):
            acc += direct[:, t]
            g_bx[:, t] = acc
            acc *= a_bar[:, t]
        # dL/d(a_bar_t) = g_bx[t] * h_{t-1}
        g_aa = np.empty_like(states)
        g_aa[:, 0] = 0.0
        np.multiply(g_bx[:, 1:], states[:, :-1], out=g_aa[:, 1:])
        g_aa *= a_bar
        g_bu = g_bx * bu
        # d(bx)/d(delta) = a_bar * B * u exactly
        g_delta = np.einsum("nles,es->nle", g_aa, Ad) + np.einsum(
            "nles,nles->nle", g_bu, a_bar
        )
        gA = np.einsum("nles,nle->es", g_aa, dd) + np.einsum(
            "nles,nles,nle->es", g_bu, _dphi(z, a_bar, phi), dd * dd, optimize=True
        )
        g_bx *= gain
        gB = np.einsum("nles,nle->nls", g_bx, ud)
        gu = np.einsum("nles,nls->nle", g_bx, Bd)
        return [gu, g_delta, gA, gB, gC]

    return y, bwd
