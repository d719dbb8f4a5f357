"""Continuous-time RC cell dynamics and their exact algebra.

A single cell obeys ``C dv/dt = -(g_leak + g_p) v + b_p u``, i.e.
``dv/dt = -alpha v + beta u``. Everything here is a pure function and
serves as ground truth for the neural layers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from numbers import Number
from typing import Callable, Sequence

import numpy as np


@dataclass(frozen=True)
class ContinuousCell:
    """Physical parameters of one RC node.

    ``g_p`` enters the decay with a plus sign, matching the node equation
    ``C dv/dt = -(g_leak + g_p) v + b_p u``. The readout is
    ``y = c_o v + d_o u``.
    """

    C: float
    g_leak: float
    # integer defaults keep integer or Fraction parameters exact
    g_p: float = 0
    b_p: float = 1
    c_o: float = 1
    d_o: float = 0

    def __post_init__(self):
        if not self.C > 0:
            raise ValueError(f"capacitance must be positive, got {self.C}")
        if not self.a > 0:
            raise ValueError(f"cell is not dissipative: g_leak + g_p = {self.a}")

    @property
    def a(self):
        """Total conductance, the decay coefficient of the cascade form."""
        return self.g_leak + self.g_p

    @property
    def b(self):
        return self.b_p

    @property
    def alpha(self) -> float:
        return self.a / self.C

    @property
    def beta(self) -> float:
        return self.b_p / self.C


@dataclass(frozen=True)
class CascadeSpec:
    cells: tuple[ContinuousCell, ...]

    def __init__(self, cells: Sequence[ContinuousCell]):
        cells = tuple(cells)
        if not cells:
            raise ValueError("a cascade needs at least one cell")
        object.__setattr__(self, "cells", cells)

    def __len__(self):
        return len(self.cells)

    @classmethod
    def uniform(cls, n: int, C=1.0, a=1.0, b=1.0, c_o=1.0, d_o=0.0):
        return cls([ContinuousCell(C=C, g_leak=a, b_p=b, c_o=c_o, d_o=d_o) for _ in range(n)])


class Polynomial:
    """Real polynomial with ascending coefficients.

    Coefficients keep their Python type, so integer or ``Fraction`` inputs
    multiply exactly and float inputs follow ordinary float64 arithmetic.
    """

    def __init__(self, coeffs):
        c = list(coeffs)
        while len(c) > 1 and c[-1] == 0:
            c.pop()
        self.coeffs: tuple = tuple(c) if c else (0,)

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    def is_zero(self) -> bool:
        return self.coeffs == (0,) or all(x == 0 for x in self.coeffs)

    def __mul__(self, other):
        if isinstance(other, Number):
            return Polynomial([c * other for c in self.coeffs])
        a, b = self.coeffs, other.coeffs
        out = [0] * (len(a) + len(b) - 1)
        for i, x in enumerate(a):
            for j, y in enumerate(b):
                out[i + j] = out[i + j] + x * y
        return Polynomial(out)

    __rmul__ = __mul__

    def __add__(self, other):
        a, b = self.coeffs, other.coeffs
        n = max(len(a), len(b))
        return Polynomial([(a[i] if i < len(a) else 0) + (b[i] if i < len(b) else 0) for i in range(n)])

    def __eq__(self, other):
        return isinstance(other, Polynomial) and self.coeffs == other.coeffs

    def __hash__(self):
        return hash(self.coeffs)

    def __call__(self, s):
        acc = 0
        for c in reversed(self.coeffs):
            acc = acc * s + c
        return acc

    def __repr__(self):
        return f"Polynomial({list(self.coeffs)!r})"

    def roots(self) -> np.ndarray:
        return np.polynomial.polynomial.polyroots(np.array(self.coeffs, dtype=float))


@dataclass(frozen=True)
class RationalTF:
    num: Polynomial
    den: Polynomial

    def __post_init__(self):
        if self.den.is_zero():
            raise ValueError("transfer function denominator is the zero polynomial")

    def __call__(self, s):
        return self.num(s) / self.den(s)

    def is_stable(self) -> bool:
        return bool(np.all(self.den.roots().real < 0))


def _check_positive_dt(dt) -> None:
    if np.any(np.asarray(dt) <= 0):
        raise ValueError("dt must be positive")


def _check_alpha(alpha) -> None:
    if np.any(np.asarray(alpha) <= 0):
        raise ValueError("alpha must be positive (dissipative cell)")


def cell_state_coeffs(cell: ContinuousCell) -> tuple[float, float]:
    """Return ``(alpha, beta)`` of the first-order state form."""
    return cell.alpha, cell.beta


def exprel_neg(x):
    """(1 - e^-x) / x, with a 4-term Taylor series for |x| < 1e-4."""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 1e-4
    safe = np.where(small, 1.0, x)
    direct = -np.expm1(-safe) / safe
    series = 1.0 - x * (0.5 - x * (1.0 / 6.0 - x / 24.0))
    out = np.where(small, series, direct)
    return out[()] if out.ndim == 0 else out


def zoh_step(alpha, beta, v, u, dt):
    """Exact state after holding input ``u`` for ``dt``.

    ``e^{-alpha dt} v + beta (1 - e^{-alpha dt}) / alpha * u``; broadcasts.
    """
    _check_positive_dt(dt)
    _check_alpha(alpha)
    x = np.asarray(alpha) * np.asarray(dt)
    return np.exp(-x) * v + beta * np.asarray(dt) * exprel_neg(x) * u


def convex_decomposition(alpha, beta, u, dt):
    """Return ``(g, eq)`` with ``zoh_step == g v + (1 - g) eq``."""
    _check_positive_dt(dt)
    _check_alpha(alpha)
    g = np.exp(-np.asarray(alpha) * np.asarray(dt))
    eq = np.asarray(beta) / np.asarray(alpha) * np.asarray(u)
    return g, eq


def rk4_integrate(rhs: Callable, y0: np.ndarray, t0: float, h: float, n: int) -> np.ndarray:
    """Classical RK4 for ``n`` steps of size ``h``; returns the final state."""
    y = np.array(y0, dtype=float)
    t = t0
    for _ in range(n):
        k1 = rhs(t, y)
        k2 = rhs(t + h / 2, y + h / 2 * k1)
        k3 = rhs(t + h / 2, y + h / 2 * k2)
        k4 = rhs(t + h, y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t += h
    return y


def simulate_first_order(alpha, beta, v0, u_seq, dt, substeps: int = 32) -> np.ndarray:
    """RK4 trajectory of ``dv/dt = -alpha v + beta u`` with piecewise-constant ``u``.

    All of ``alpha``, ``beta``, ``v0`` and ``dt`` may be arrays of a common
    shape, in which case ``u_seq`` is ``[steps, *shape]``. Returns the states
    at every step boundary, ``[steps + 1, *shape]``.
    """
    _check_positive_dt(dt)
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    dt = np.asarray(dt, dtype=float)
    u_seq = np.asarray(u_seq, dtype=float)
    v = np.broadcast_to(np.asarray(v0, dtype=float), np.broadcast(alpha, beta, dt).shape).copy()
    out = [v.copy()]
    h = dt / substeps
    for u in u_seq:
        def rhs(_t, y, u=u):
            return -alpha * y + beta * u
        v = rk4_integrate(rhs, v, 0.0, h, substeps)
        out.append(v)
    return np.stack(out)


def simulate_cell_ode(cell: ContinuousCell, u, dt: float, steps: int | None = None,
                      v0: float = 0.0, substeps: int = 32) -> np.ndarray:
    """RK4 oracle trajectory of one cell under a piecewise-constant input.

    ``u`` is a sequence of held inputs (or a scalar repeated ``steps`` times).
    The integrator takes ``substeps`` RK4 steps of ``dt / substeps`` per hold.
    """
    u = np.asarray(u, dtype=float)
    if u.ndim == 0:
        if steps is None:
            raise ValueError("steps is required for a scalar input")
        u = np.full(steps, float(u))
    elif steps is not None:
        u = u[:steps]
    return simulate_first_order(cell.alpha, cell.beta, v0, u, dt, substeps)


def cascade_transfer(spec: CascadeSpec) -> RationalTF:
    """V_n(s)/U(s) = prod b_l / prod (C_l s + a_l), expanded."""
    num = Polynomial([1])
    den = Polynomial([1])
    for cell in spec.cells:
        num = num * cell.b
        den = den * Polynomial([cell.a, cell.C])
    return RationalTF(num, den)


def cascade_ode_coeffs(spec: CascadeSpec) -> tuple[Polynomial, float]:
    """Coefficients of ``sum_k gamma_k d^k v_n / dt^k = kappa u``."""
    tf = cascade_transfer(spec)
    return tf.den, tf.num.coeffs[0]


def readout_cascade_operator(spec: CascadeSpec) -> tuple[Polynomial, Polynomial]:
    """Differential operators relating the final readout to the input.

    ``lhs(d/dt) y_n = rhs(d/dt) u`` with
    ``lhs = prod (C s + a)`` and ``rhs = prod (d_o C s + d_o a + c_o b)``.
    """
    lhs = Polynomial([1])
    rhs = Polynomial([1])
    for c in spec.cells:
        lhs = lhs * Polynomial([c.a, c.C])
        rhs = rhs * Polynomial([c.d_o * c.a + c.c_o * c.b, c.d_o * c.C])
    return lhs, rhs


def erlang_kernel(n: int, a: float, b: float, C: float, t) -> np.ndarray:
    """Impulse response of ``n`` identical cells: (b/C)^n t^{n-1}/(n-1)! e^{-(a/C) t}."""
    if n < 1:
        raise ValueError("order must be at least 1")
    if not C > 0 or not a > 0:
        raise ValueError("need C > 0 and a > 0")
    t = np.asarray(t, dtype=float)
    tp = np.where(t >= 0, t, 0.0)
    h = (b / C) ** n * tp ** (n - 1) / math.factorial(n - 1) * np.exp(-(a / C) * tp)
    return np.where(t >= 0, h, 0.0)


def discrete_cascade_impulse(spec: CascadeSpec, dt: float, steps: int) -> np.ndarray:
    """ZOH chain driven by an area-one pulse ``u_0 = 1/dt``.

    Each cell holds the freshly updated state of the previous cell as its
    input for the step. Entry ``k`` is the last state at time ``(k+1) dt``.
    """
    _check_positive_dt(dt)
    n = len(spec)
    alphas = [c.alpha for c in spec.cells]
    betas = [c.beta for c in spec.cells]
    v = np.zeros(n)
    out = np.empty(steps)
    for k in range(steps):
        drive = 1.0 / dt if k == 0 else 0.0
        for i in range(n):
            v[i] = zoh_step(alphas[i], betas[i], v[i], drive, dt)
            drive = v[i]
        out[k] = v[-1]
    return out


def simulate_readout_cascade(spec: CascadeSpec, u: Callable[[float], float], t_end: float,
                             h: float, record_every: int = 1):
    """RK4 simulation of the cascade with readouts ``y_l = c_o v_l + d_o y_{l-1}``.

    ``u`` is a function of time. Returns ``(t, y_n)`` sampled every
    ``record_every`` steps.
    """
    cells = spec.cells
    C = np.array([c.C for c in cells], dtype=float)
    a = np.array([c.a for c in cells], dtype=float)
    b = np.array([c.b for c in cells], dtype=float)
    co = np.array([c.c_o for c in cells], dtype=float)
    do = np.array([c.d_o for c in cells], dtype=float)

    def outputs(t, v):
        y = np.empty(len(cells) + 1)
        y[0] = u(t)
        for i in range(len(cells)):
            y[i + 1] = co[i] * v[i] + do[i] * y[i]
        return y

    def rhs(t, v):
        y = outputs(t, v)
        return (-a * v + b * y[:-1]) / C

    nsteps = int(round(t_end / h))
    v = np.zeros(len(cells))
    ts, ys = [0.0], [outputs(0.0, v)[-1]]
    t = 0.0
    for k in range(1, nsteps + 1):
        v = rk4_integrate(rhs, v, t, h, 1)
        t = k * h
        if k % record_every == 0:
            ts.append(t)
            ys.append(outputs(t, v)[-1])
    return np.array(ts), np.array(ys)


def elementary_expansion(roots_pairs: Sequence[tuple]) -> list:
    """Expand prod (q_l s + p_l) by summing over subsets; exact for exact inputs.

    Coefficient k collects every product choosing ``q`` from k factors and ``p``
    from the rest. Quadratic-free and independent of :class:`Polynomial`.
    """
    n = len(roots_pairs)
    coeffs = [0] * (n + 1)
    for mask in range(1 << n):
        term = 1
        k = 0
        for i, (p, q) in enumerate(roots_pairs):
            if mask >> i & 1:
                term = term * q
                k += 1
            else:
                term = term * p
        coeffs[k] = coeffs[k] + term
    return coeffs


__all__ = [
    "ContinuousCell", "CascadeSpec", "Polynomial", "RationalTF", "Fraction",
    "cell_state_coeffs", "zoh_step", "convex_decomposition", "simulate_cell_ode",
    "simulate_first_order", "cascade_transfer", "cascade_ode_coeffs",
    "readout_cascade_operator", "erlang_kernel", "discrete_cascade_impulse",
    "simulate_readout_cascade", "elementary_expansion", "exprel_neg", "rk4_integrate",
]
