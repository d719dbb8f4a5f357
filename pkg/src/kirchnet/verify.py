"""Oracle checks shared by the ``verify`` command and the test-suite.

Each check returns a :class:`CheckResult` holding the measured value and the
threshold it was compared against.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Callable

import numpy as np

from . import analytic as an
from . import nn, poisson
from .block import CKBConfig, ckb_backward, ckb_forward, init_ckb
from .selective import SelectiveKNCParams, knc_scan, knc_scan_backward
from .train import relative_l2_loss


@dataclass
class CheckResult:
    name: str
    group: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""
    seconds: float = 0.0
    relation: str = "<"

    def as_dict(self) -> dict:
        return asdict(self)


# -- analytic oracles ---------------------------------------------------------

def zoh_sweep(cases: int, steps: int = 20, substeps: int = 32, seed: int = 0):
    """Max |ZOH - RK4| and max relative convex-form mismatch over random cells.

    alpha in [0.1, 5], beta in [-2, 2], dt in [0.01, 1], v0 and the held
    inputs in [-3, 3]. All cases run vectorized.
    """
    rng = np.random.default_rng(seed)
    alpha = rng.uniform(0.1, 5.0, cases)
    beta = rng.uniform(-2.0, 2.0, cases)
    dt = rng.uniform(0.01, 1.0, cases)
    v0 = rng.uniform(-3.0, 3.0, cases)
    u = rng.uniform(-3.0, 3.0, (steps, cases))
    ref = an.simulate_first_order(alpha, beta, v0, u, dt, substeps)
    v = v0.copy()
    zoh_err = 0.0
    convex_err = 0.0
    for k in range(steps):
        nxt = an.zoh_step(alpha, beta, v, u[k], dt)
        g, eq = an.convex_decomposition(alpha, beta, u[k], dt)
        comb = g * v + (1.0 - g) * eq
        scale = np.maximum(np.abs(nxt), np.abs(comb))
        # relative where the state is O(1); absolute floor near zero crossings
        convex_err = max(convex_err, float(np.max(np.abs(comb - nxt) / np.maximum(scale, 1.0))))
        v = nxt
        zoh_err = max(zoh_err, float(np.max(np.abs(v - ref[k + 1]))))
    return zoh_err, convex_err


def numeric_erlang(n: int, a: float, b: float, C: float, t_max: float = 10.0, dt: float = 1e-4):
    """n-fold trapezoid self-convolution of the first-order kernel on a uniform grid."""
    t = np.arange(int(round(t_max / dt)) + 1) * dt
    h1 = an.erlang_kernel(1, a, b, C, t)
    h = h1.copy()
    m = len(t)
    size = 1 << int(np.ceil(np.log2(2 * m)))
    H1 = np.fft.rfft(h1, size)
    for _ in range(n - 1):
        full = np.fft.irfft(np.fft.rfft(h, size) * H1, size)[:m]
        # trapezoid end corrections: subtract half of the two endpoint products
        h = dt * (full - 0.5 * (h[0] * h1 + h1[0] * h))
    return t, h


def erlang_error(n: int, a=1.0, b=1.0, C=1.0) -> float:
    t, num = numeric_erlang(n, a, b, C)
    exact = an.erlang_kernel(n, a, b, C, t)
    return float(np.max(np.abs(num - exact)) / np.max(np.abs(exact)))


def impulse_deviation(spec: an.CascadeSpec, dt: float, t_end: float) -> float:
    steps = int(round(t_end / dt))
    resp = an.discrete_cascade_impulse(spec, dt, steps)
    c = spec.cells[0]
    t = (np.arange(steps) + 1) * dt
    exact = an.erlang_kernel(len(spec), c.a, c.b, c.C, t)
    return float(np.max(np.abs(resp - exact)))


def impulse_ratios(n: int, alpha: float = 1.0, dt0: float = 0.1, t_end: float = 10.0, halvings: int = 3):
    spec = an.CascadeSpec.uniform(n, C=1.0, a=alpha, b=alpha)
    devs = [impulse_deviation(spec, dt0 / 2 ** k, t_end) for k in range(halvings + 1)]
    return [devs[k] / devs[k + 1] for k in range(halvings)]


def random_readout_spec(rng: np.random.Generator, n: int = 3) -> an.CascadeSpec:
    return an.CascadeSpec([
        an.ContinuousCell(C=rng.uniform(0.5, 2.0), g_leak=rng.uniform(0.5, 2.0), g_p=rng.uniform(0.0, 0.5),
                          b_p=rng.uniform(0.5, 2.0), c_o=rng.uniform(0.5, 1.5), d_o=rng.uniform(0.1, 1.0))
        for _ in range(n)])


def sinusoid_gain(spec: an.CascadeSpec, omega: float, h: float = 0.01, periods: int = 2) -> complex:
    """Steady-state complex gain of the readout chain from an RK4 run under sin(omega t)."""
    rate = min(c.alpha for c in spec.cells)
    period = 2 * np.pi / omega
    t_end = np.ceil((40.0 / rate + periods * period) / h) * h
    t, y = an.simulate_readout_cascade(spec, lambda s: np.sin(omega * s), t_end, h)
    keep = t >= t_end - periods * period
    A = np.stack([np.sin(omega * t[keep]), np.cos(omega * t[keep])], axis=1)
    (re, im), *_ = np.linalg.lstsq(A, y[keep], rcond=None)
    return complex(re, im)


def readout_gain_error(spec: an.CascadeSpec, omega: float) -> float:
    lhs, rhs = an.readout_cascade_operator(spec)
    H = rhs(1j * omega) / lhs(1j * omega)
    return abs(sinusoid_gain(spec, omega) - H) / abs(H)


def random_integer_spec(rng: np.random.Generator, n: int) -> an.CascadeSpec:
    return an.CascadeSpec([an.ContinuousCell(C=int(rng.integers(1, 6)), g_leak=int(rng.integers(1, 6)),
                                             b_p=int(rng.integers(-4, 5)) or 1) for _ in range(n)])


def order_lifting_errors(trials: int, seed: int = 0):
    """(exact mismatches, worst float relative error) for random integer cascades n <= 5."""
    rng = np.random.default_rng(seed)
    mismatches = 0
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(1, 6))
        spec = random_integer_spec(rng, n)
        gamma, kappa = an.cascade_ode_coeffs(spec)
        oracle = an.elementary_expansion([(c.a, c.C) for c in spec.cells])
        if list(gamma.coeffs) != oracle or kappa != np.prod([c.b for c in spec.cells]):
            mismatches += 1
        fspec = an.CascadeSpec([an.ContinuousCell(C=float(c.C), g_leak=float(c.g_leak), b_p=float(c.b_p))
                                for c in spec.cells])
        fgamma, _ = an.cascade_ode_coeffs(fspec)
        exact = np.array(oracle, dtype=float)
        worst = max(worst, float(np.max(np.abs(np.array(fgamma.coeffs) - exact) / np.abs(exact))))
        # exact Fraction path too
        qspec = [(Fraction(c.a), Fraction(c.C)) for c in spec.cells]
        qpoly = an.Polynomial([1])
        for p, q in qspec:
            qpoly = qpoly * an.Polynomial([p, q])
        if list(qpoly.coeffs) != oracle:
            mismatches += 1
    return mismatches, worst


# -- gradient oracles ---------------------------------------------------------

def _projected(fn: Callable[[], np.ndarray], R: np.ndarray) -> Callable[[], float]:
    return lambda: float(np.sum(fn() * R))


def gradient_errors(seed: int = 0, B: int = 2, L: int = 16, d: int = 8, E: int = 2, S: int = 4,
                    N: int = 2) -> dict[str, float]:
    """Worst per-tensor FD relative error (eps 1e-6, float64) for every parameterized op."""
    rng = np.random.default_rng(seed)
    out = {}

    x = rng.normal(size=(B, L, d))
    W = rng.normal(size=(d, d)) / np.sqrt(d)
    b = rng.normal(size=d)
    R = rng.normal(size=(B, L, d))
    _, c = nn.linear(x, W, b)
    gx, gW, gb = nn.linear_backward(c, R)
    out["linear"] = nn.fd_gradient_check(_projected(lambda: nn.linear(x, W, b)[0], R),
                                         {"x": x, "W": W, "b": b}, {"x": gx, "W": gW, "b": gb})

    dk = rng.normal(size=(d, 3))
    pw = rng.normal(size=(d, d)) / np.sqrt(d)
    _, c = nn.dsconv1d(x, dk, pw)
    gx, gdk, gpw = nn.dsconv1d_backward(c, R)
    out["dsconv1d"] = nn.fd_gradient_check(_projected(lambda: nn.dsconv1d(x, dk, pw)[0], R),
                                           {"x": x, "depth": dk, "point": pw},
                                           {"x": gx, "depth": gdk, "point": gpw})

    gamma = rng.normal(size=d)
    beta = rng.normal(size=d)
    _, c = nn.layer_norm(x, gamma, beta)
    gx, gg, gbeta = nn.layer_norm_backward(c, R)
    out["layer_norm"] = nn.fd_gradient_check(_projected(lambda: nn.layer_norm(x, gamma, beta)[0], R),
                                             {"x": x, "gamma": gamma, "beta": beta},
                                             {"x": gx, "gamma": gg, "beta": gbeta})

    W1 = rng.normal(size=(d, 2 * d)) / np.sqrt(d)
    b1 = rng.normal(size=2 * d)
    W2 = rng.normal(size=(2 * d, d)) / np.sqrt(2 * d)
    b2 = rng.normal(size=d)
    _, c = nn.mlp(x, W1, b1, W2, b2)
    grads = nn.mlp_backward(c, R)
    out["mlp"] = nn.fd_gradient_check(_projected(lambda: nn.mlp(x, W1, b1, W2, b2)[0], R),
                                      {"x": x, "W1": W1, "b1": b1, "W2": W2, "b2": b2},
                                      dict(zip(["x", "W1", "b1", "W2", "b2"], grads)))

    kp = SelectiveKNCParams.init(d, S, rng)
    kp.b_delta[:] = rng.normal(size=d)
    kp.d_skip[:] = rng.normal(size=d)
    u = rng.normal(size=(B, L, d))
    kg, gu = knc_scan_backward(kp, u, R)
    params = {**kp.as_dict(), "u": u}
    out["knc_scan"] = nn.fd_gradient_check(_projected(lambda: knc_scan(kp, u)[0], R), params,
                                           {**kg, "u": gu})

    cfg = CKBConfig(d=d, E=E, S=S, N=N)
    cp = well_conditioned_ckb_params(cfg, rng)
    X = 0.1 * rng.normal(size=(B, L, d))
    _, c = ckb_forward(cp, cfg, X)
    cg, gX = ckb_backward(cp, cfg, c, R)
    out["ckb"] = nn.fd_gradient_check(_projected(lambda: ckb_forward(cp, cfg, X)[0], R),
                                      {**cp, "X": X}, {**cg, "X": gX})

    pred = rng.normal(size=(B, L, d))
    true = rng.normal(size=(B, L, d))
    _, gp = relative_l2_loss(pred, true)
    out["relative_l2_loss"] = nn.fd_gradient_check(lambda: relative_l2_loss(pred, true)[0],
                                                   {"pred": pred}, {"pred": gp})
    return out


def well_conditioned_ckb_params(cfg: CKBConfig, rng: np.random.Generator) -> nn.ParamTree:
    """Initialized block with biases moved off zero and a stronger cascade path.

    At the zero-bias initialization some gradients are tiny enough that the
    FD estimate is dominated by rounding in the residual sum.
    """
    p = init_ckb(cfg, rng)
    for k, v in p.items():
        if k.endswith("lambda_log"):
            continue
        if v.ndim == 1:
            v += rng.normal(0.0, 0.5, v.shape)
        elif k.endswith("W_delta") or k == "out.W":
            v *= 3.0
    return p


# -- registry -----------------------------------------------------------------

def _check(name, group, value, threshold, detail="", higher_ok=False) -> CheckResult:
    ok = value >= threshold if higher_ok else value < threshold
    return CheckResult(name, group, bool(ok), float(value), float(threshold), detail,
                       relation=">=" if higher_ok else "<")


def check_zoh(level):
    cases = 1000 if level == "full" else 200
    err, _ = zoh_sweep(cases, substeps=128)
    return [_check("zoh_vs_rk4", "zoh", err, 1e-8, f"{cases} cases x 20 steps, RK4 at dt/128")]


def check_convex(level):
    cases = 1000 if level == "full" else 200
    _, err = zoh_sweep(cases, substeps=1)
    return [_check("convex_form", "convex", err, 1e-14, f"{cases} cases x 20 steps")]


def check_polynomial(level):
    mism, worst = order_lifting_errors(200 if level == "full" else 50)
    identity = an.CascadeSpec([an.ContinuousCell(C=c, g_leak=a, b_p=b, c_o=0, d_o=1)
                               for c, a, b in [(1, 2, 3), (2, 1, 5), (3, 4, 1)]])
    lhs, rhs = an.readout_cascade_operator(identity)
    return [_check("order_lifting_exact", "polynomial", mism, 1, "integer/Fraction mismatches"),
            _check("order_lifting_float", "polynomial", worst, 1e-12, "float vs exact coefficients"),
            _check("readout_identity", "polynomial", 0 if lhs == rhs else 1, 1, "c_o=0, d_o=1 gives rhs == lhs")]


def check_erlang(level):
    out = []
    for n in (2, 3, 4):
        out.append(_check(f"erlang_n{n}", "erlang", erlang_error(n), 1e-4, "vs n-fold trapezoid convolution"))
    for n in ((1, 3, 4) if level == "full" else (1, 3)):
        r = impulse_ratios(n)
        worst = max(abs(x - 2.0) for x in r)
        out.append(_check(f"impulse_order_n{n}", "erlang", worst, 0.3,
                          "dt-halving ratios " + ", ".join(f"{x:.3f}" for x in r)))
    # two identical stages: the O(dt) terms cancel and the error falls by 4x
    r = impulse_ratios(2)
    out.append(_check("impulse_converges_n2", "erlang", min(r), 1.7,
                      "dt-halving ratios " + ", ".join(f"{x:.3f}" for x in r), higher_ok=True))
    return out


def check_readout(level):
    rng = np.random.default_rng(1)
    specs = [random_readout_spec(rng) for _ in range(3 if level == "full" else 1)]
    worst = max(readout_gain_error(s, w) for s in specs for w in (0.5, 1.0, 2.0))
    return [_check("readout_frequency", "readout", worst, 1e-3, f"{len(specs)} random 3-stage specs")]


def check_gradients(level):
    errs = gradient_errors()
    return [_check(f"grad_{k}", "gradients", v, 1e-5, "central FD, eps 1e-6") for k, v in errs.items()]


def check_poisson(level):
    cfg = poisson.PoissonConfig.desk()
    n = 8 if level == "full" else 2
    ratios = []
    for i in range(n):
        a = poisson.sample_coeffs(cfg.K, poisson.sample_rng(cfg.seed, "train", i))
        res = [poisson.fd_laplacian_residual(poisson.eval_source(a, N), poisson.solve_poisson_spectral(a, N))
               for N in (32, 64)]
        ratios.append(res[0] / res[1])
    worst = max(abs(r - 4.0) for r in ratios)
    rng = np.random.default_rng(2)
    a1, a2 = rng.uniform(-1, 1, (2, cfg.K, cfg.K))
    lin = np.max(np.abs(poisson.solve_poisson_spectral(a1 + a2, 32)
                        - poisson.solve_poisson_spectral(a1, 32) - poisson.solve_poisson_spectral(a2, 32)))
    return [_check("poisson_fd_order", "poisson", worst, 0.8,
                   "residual(32)/residual(64): " + ", ".join(f"{r:.3f}" for r in ratios)),
            _check("poisson_linearity", "poisson", lin, 1e-12)]


CHECKS = [check_zoh, check_convex, check_polynomial, check_erlang, check_readout, check_gradients, check_poisson]

# check names each group can emit, so a filter can skip whole groups
GROUP_NAMES = {
    "zoh": ["zoh_vs_rk4"],
    "convex": ["convex_form"],
    "polynomial": ["order_lifting_exact", "order_lifting_float", "readout_identity"],
    "erlang": ["erlang_n2", "erlang_n3", "erlang_n4", "impulse_order_n1", "impulse_order_n3",
               "impulse_order_n4", "impulse_converges_n2"],
    "readout": ["readout_frequency"],
    "gradients": [f"grad_{op}" for op in ("linear", "dsconv1d", "layer_norm", "mlp", "knc_scan", "ckb",
                                          "relative_l2_loss")],
    "poisson": ["poisson_fd_order", "poisson_linearity"],
}


def run_checks(level: str = "quick", name_filter: str | None = None) -> list[CheckResult]:
    """Run the check groups; ``name_filter`` keeps checks whose name or group contains it."""
    if level not in ("quick", "full"):
        raise ValueError(f"level must be quick or full, got {level!r}")
    results = []
    for fn in CHECKS:
        group = fn.__name__.removeprefix("check_")
        if name_filter and name_filter not in group and not any(name_filter in n for n in GROUP_NAMES[group]):
            continue
        t0 = time.perf_counter()
        res = fn(level)
        dt = time.perf_counter() - t0
        for r in res:
            r.seconds = dt / len(res)
        if name_filter:
            res = [r for r in res if name_filter in r.name or name_filter in r.group]
        results.extend(res)
    return results
