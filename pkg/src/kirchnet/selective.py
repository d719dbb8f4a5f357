"""Selective Kirchhoff neural cell: input-dependent ZOH coefficients and the state scan.

Per channel ``d`` and state slot ``s`` the cell runs

    v <- exp(-delta*lam) v + (1 - exp(-delta*lam))/lam * b_t * u_t
    y_t = sum_s c_t v + d_skip * u_t

with ``delta = softplus(u W_delta + b_delta)``, ``b_t = u W_b`` and
``c_t = u W_c``. Transcendentals are evaluated with vectorized numpy one batch row at a
time; the sequential time loop runs in small numba kernels. The reverse
pass recomputes the forward states so nothing of size [B, L, D, S] is
kept between calls.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from numba import njit
from scipy.special import expit

# below this exponent the injection factor uses its Taylor series
SERIES_CUTOFF = 1e-4
# the lambda-derivative factor cancels badly for longer, so it switches later
GRAD_SERIES_CUTOFF = 1e-2


def softplus(x):
    """ln(1 + e^x) without overflow or negative underflow."""
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def injection_factor(delta, lam):
    """(1 - exp(-delta*lam)) / lam, elementwise, stable as lam -> 0."""
    delta = np.asarray(delta, dtype=float)
    lam = np.asarray(lam, dtype=float)
    x = delta * lam
    small = x < SERIES_CUTOFF
    safe = np.where(small, 1.0, lam)
    direct = -np.expm1(-x) / safe
    series = delta * (1.0 - x * (0.5 - x * (1.0 / 6.0 - x / 24.0)))
    return np.where(small, series, direct)


class _Workspace:
    """Scratch arrays for one batch row, reused to avoid page-faulting fresh buffers."""

    def __init__(self, L, D, S, dtype, backward=False):
        shape = (L, D, S)
        self.x = np.empty(shape, dtype)
        self.a = np.empty(shape, dtype)
        self.phi = np.empty(shape, dtype)
        if backward:
            self.G = np.empty(shape, dtype)
            self.V = np.empty((L + 1, D, S), dtype)

    def coefficients(self, delta_row, lam):
        """Fill retention ``a`` and injection factor ``phi`` for one row."""
        x, a, phi = self.x, self.a, self.phi
        np.multiply(delta_row[:, :, None], lam, out=x)
        np.negative(x, out=a)
        np.expm1(a, out=phi)
        np.exp(a, out=a)
        np.negative(phi, out=phi)
        np.divide(phi, lam, out=phi)
        small = x < SERIES_CUTOFF
        if small.any():
            xs = x[small]
            ds = np.broadcast_to(delta_row[:, :, None], x.shape)[small]
            phi[small] = ds * (1.0 - xs * (0.5 - xs * (1.0 / 6.0 - xs / 24.0)))

    def lam_factor(self):
        """(x e^-x - (1 - e^-x)) / x^2, the lambda-derivative of phi over delta^2."""
        x, a, G = self.x, self.a, self.G
        # 1 - e^-x rebuilt from expm1 for accuracy at moderate x
        np.negative(x, out=G)
        np.expm1(G, out=G)
        G += x * a
        with np.errstate(divide="ignore", invalid="ignore"):
            G /= x * x   # x == 0 entries are replaced by the series below
        small = x < GRAD_SERIES_CUTOFF
        if small.any():
            xs = x[small]
            G[small] = -0.5 + xs * (1.0 / 3.0 - xs * (1.0 / 8.0 - xs * (
                1.0 / 30.0 - xs * (1.0 / 144.0 - xs / 840.0))))


@njit(cache=True)
def _scan_row(a, phi, bm, u, cm, y, v):
    # v <- a v + phi bm_t u_t ; y_t = sum_s cm_t v
    L, D, S = a.shape
    for t in range(L):
        for d in range(D):
            acc = 0.0
            ut = u[t, d]
            for s in range(S):
                vv = a[t, d, s] * v[d, s] + phi[t, d, s] * bm[t, s] * ut
                v[d, s] = vv
                acc += cm[t, s] * vv
            y[t, d] = acc


@njit(cache=True)
def _scan_row_backward(a, phi, G, V, delta, lam, u, bm, cm, gy, gu, gdelta, gbm, gcm, glam):
    L, D, S = a.shape
    for d in range(D):
        for s in range(S):
            V[0, d, s] = 0.0
    for t in range(L):
        for d in range(D):
            ut = u[t, d]
            for s in range(S):
                V[t + 1, d, s] = a[t, d, s] * V[t, d, s] + phi[t, d, s] * bm[t, s] * ut
    carry = np.zeros((D, S), dtype=a.dtype)
    for t in range(L - 1, -1, -1):
        for s in range(S):
            gbm[t, s] = 0.0
            gcm[t, s] = 0.0
        for d in range(D):
            g = gy[t, d]
            dl = delta[t, d]
            ut = u[t, d]
            gu_acc = 0.0
            gdl_acc = 0.0
            for s in range(S):
                lm = lam[d, s]
                at = a[t, d, s]
                ph = phi[t, d, s]
                gcm[t, s] += g * V[t + 1, d, s]
                h = g * cm[t, s] + carry[d, s]
                ga = h * V[t, d, s]
                gphi = h * bm[t, s] * ut
                gu_acc += h * ph * bm[t, s]
                gbm[t, s] += h * ph * ut
                # a = exp(-delta lam), phi = (1 - a) / lam
                gdl_acc += (gphi - ga * lm) * at
                glam[d, s] += gphi * dl * dl * G[t, d, s] - ga * dl * at
                carry[d, s] = at * h
            gu[t, d] = gu_acc
            gdelta[t, d] = gdl_acc


def _scan_forward(u, delta, bm, cm, lam):
    B, L, D = u.shape
    S = lam.shape[1]
    ws = _Workspace(L, D, S, u.dtype)
    y = np.empty_like(u)
    v = np.zeros((B, D, S), dtype=u.dtype)
    for b in range(B):
        ws.coefficients(delta[b], lam)
        _scan_row(ws.a, ws.phi, bm[b], u[b], cm[b], y[b], v[b])
    return y, v


def _scan_backward(u, delta, bm, cm, lam, gy):
    B, L, D = u.shape
    S = lam.shape[1]
    ws = _Workspace(L, D, S, u.dtype, backward=True)
    gu = np.empty_like(u)
    gdelta = np.empty_like(u)
    gbm = np.empty_like(bm)
    gcm = np.empty_like(cm)
    glam = np.zeros((D, S), dtype=u.dtype)
    for b in range(B):
        ws.coefficients(delta[b], lam)
        ws.lam_factor()
        _scan_row_backward(ws.a, ws.phi, ws.G, ws.V, delta[b], lam, u[b], bm[b], cm[b],
                           gy[b], gu[b], gdelta[b], gbm[b], gcm[b], glam)
    return gu, gdelta, gbm, gcm, glam


@dataclass
class SelectiveKNCParams:
    """Learned parameters of one selective cell with D channels and S states."""

    lambda_log: np.ndarray  # [D, S]
    W_delta: np.ndarray     # [D, D]
    b_delta: np.ndarray     # [D]
    W_b: np.ndarray         # [D, S]
    W_c: np.ndarray         # [D, S]
    d_skip: np.ndarray      # [D]

    def __post_init__(self):
        D, S = self.lambda_log.shape
        if D < 1 or S < 1:
            raise ValueError("need at least one channel and one state")
        expected = {"W_delta": (D, D), "b_delta": (D,), "W_b": (D, S), "W_c": (D, S), "d_skip": (D,)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def channels(self) -> int:
        return self.lambda_log.shape[0]

    @property
    def state_size(self) -> int:
        return self.lambda_log.shape[1]

    @property
    def lam(self) -> np.ndarray:
        return np.exp(self.lambda_log)

    @classmethod
    def init(cls, channels: int, state_size: int, rng: np.random.Generator, dtype=np.float64,
             delta_range: tuple[float, float] | None = None):
        """Uniform +-1/sqrt(D) weights, log-decays in [ln 0.5, ln 2], unit skip.

        ``b_delta`` is zero unless ``delta_range`` is given, in which case it is
        set so that softplus(b_delta) is log-uniform over that range.
        """
        D, S = channels, state_size
        bound = 1.0 / np.sqrt(D)
        lambda_log = rng.uniform(np.log(0.5), np.log(2.0), size=(D, S)).astype(dtype)
        W_delta = rng.uniform(-bound, bound, size=(D, D)).astype(dtype)
        if delta_range is None:
            b_delta = np.zeros(D, dtype=dtype)
        else:
            lo, hi = delta_range
            if not 0 < lo <= hi:
                raise ValueError(f"invalid delta range {delta_range}")
            dt = np.exp(rng.uniform(np.log(lo), np.log(hi), size=D))
            b_delta = (dt + np.log(-np.expm1(-dt))).astype(dtype)  # softplus inverse
        return cls(
            lambda_log=lambda_log,
            W_delta=W_delta,
            b_delta=b_delta,
            W_b=rng.uniform(-bound, bound, size=(D, S)).astype(dtype),
            W_c=rng.uniform(-bound, bound, size=(D, S)).astype(dtype),
            d_skip=np.ones(D, dtype=dtype),
        )

    def as_dict(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        return cls(**{f.name: d[f.name] for f in fields(cls)})


def _projections(params: SelectiveKNCParams, u: np.ndarray):
    z = u @ params.W_delta + params.b_delta
    return z, softplus(z), u @ params.W_b, u @ params.W_c


def selective_discretize(params: SelectiveKNCParams, u_t: np.ndarray):
    """Coefficients for one time step.

    u_t is [batch, D]. Returns ``abar [batch, D, S]``, ``bbar [batch, D, S]``,
    ``c_t [batch, S]`` and ``delta_t [batch, D]``.
    """
    if u_t.ndim != 2 or u_t.shape[1] != params.channels:
        raise ValueError(f"expected [batch, {params.channels}] input, got {u_t.shape}")
    _, delta, b_t, c_t = _projections(params, u_t)
    lam = params.lam
    abar = np.exp(-delta[:, :, None] * lam)
    bbar = injection_factor(delta[:, :, None], lam) * b_t[:, None, :]
    return abar, bbar, c_t, delta


def _check_input(params: SelectiveKNCParams, u: np.ndarray) -> None:
    if u.ndim != 3 or u.shape[2] != params.channels:
        raise ValueError(f"expected [batch, L, {params.channels}] input, got {u.shape}")
    if u.shape[1] < 1:
        raise ValueError("sequence length must be at least 1")
    if not np.all(np.isfinite(u)):
        raise ValueError("non-finite input to knc_scan")


def knc_scan(params: SelectiveKNCParams, u: np.ndarray):
    """Run the cell over ``u [B, L, D]`` from a zero state.

    Returns ``(y [B, L, D], v_final [B, D, S])``.
    """
    _check_input(params, u)
    _, delta, bm, cm = _projections(params, u)
    ys, v = _scan_forward(u, delta, bm, cm, params.lam.astype(u.dtype))
    return ys + params.d_skip * u, v


def knc_scan_backward(params: SelectiveKNCParams, u: np.ndarray, grad_y: np.ndarray):
    """Exact reverse pass of :func:`knc_scan`.

    Returns ``(grads, grad_u)`` where ``grads`` mirrors :meth:`SelectiveKNCParams.as_dict`.
    """
    _check_input(params, u)
    z, delta, bm, cm = _projections(params, u)
    lam = params.lam.astype(u.dtype)
    gu, gdelta, gbm, gcm, glam = _scan_backward(u, delta, bm, cm, lam, grad_y)
    gz = gdelta * expit(z)
    D = params.channels
    u2 = u.reshape(-1, D)
    gz2 = gz.reshape(-1, D)
    gbm2 = gbm.reshape(-1, gbm.shape[-1])
    gcm2 = gcm.reshape(-1, gcm.shape[-1])
    grads = {
        "lambda_log": glam * lam,
        "W_delta": u2.T @ gz2,
        "b_delta": gz2.sum(axis=0),
        "W_b": u2.T @ gbm2,
        "W_c": u2.T @ gcm2,
        "d_skip": (grad_y * u).reshape(-1, D).sum(axis=0),
    }
    gu = gu + grad_y * params.d_skip + gz @ params.W_delta.T + gbm @ params.W_b.T + gcm @ params.W_c.T
    return grads, gu


def knc_scan_reference(params: SelectiveKNCParams, u: np.ndarray):
    """Step-by-step numpy version of :func:`knc_scan`, used as a cross-check."""
    _check_input(params, u)
    B, L, D = u.shape
    v = np.zeros((B, D, params.state_size))
    ys = np.empty_like(u)
    for t in range(L):
        abar, bbar, c_t, _ = selective_discretize(params, u[:, t])
        v = abar * v + bbar * u[:, t, :, None]
        ys[:, t] = np.einsum("bds,bs->bd", v, c_t) + params.d_skip * u[:, t]
    return ys, v
