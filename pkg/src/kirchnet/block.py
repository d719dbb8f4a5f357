"""Cascaded Kirchhoff block: gated dual-branch layer around serial selective cells.

Forward path for ``X [B, L, d]`` (or a field ``[B, H, W, d]``)::

    Xn = LayerNorm(X)
    u  = SiLU(DSConv(Xn W_u + b_u))        evolution branch, width E*d
    g  = SiLU(Xn W_g + b_g)                gate branch
    y1 = K_1(u), yk = K_k(y_{k-1})         N serial cells per scan direction
    ybar = mean over directions of sum_k yk   (or y_{N-1} + y_N)
    out  = (ybar * g) W_out                bias-free, so a zero gate gives Y == X
    out  = MLP(out)                        optional
    Y    = X + out
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .selective import SelectiveKNCParams, knc_scan, knc_scan_backward

AGGREGATIONS = ("dense_sum", "last_two")


@dataclass(frozen=True)
class CKBConfig:
    d: int
    E: int = 2
    S: int = 8
    N: int = 2
    k: int = 3
    directions: int = 1
    use_mlp: bool = False
    aggregation: str = "dense_sum"
    mlp_expansion: int = 2
    # softplus(b_delta) range at init; empty means b_delta = 0
    delta_init: tuple = ()

    def __post_init__(self):
        if self.d < 1 or self.S < 1:
            raise ValueError("d and S must be positive")
        if self.E < 1:
            raise ValueError(f"expansion E must be >= 1, got {self.E}")
        if self.N < 1:
            raise ValueError(f"cascade depth N must be >= 1, got {self.N}")
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError(f"conv kernel size must be odd, got {self.k}")
        if self.directions not in (1, 2, 4):
            raise ValueError(f"directions must be 1, 2 or 4, got {self.directions}")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}, got {self.aggregation!r}")
        if self.mlp_expansion < 1:
            raise ValueError("mlp_expansion must be >= 1")
        if self.delta_init and (len(self.delta_init) != 2 or not 0 < self.delta_init[0] <= self.delta_init[1]):
            raise ValueError(f"delta_init must be empty or (lo, hi) with 0 < lo <= hi, got {self.delta_init}")
        object.__setattr__(self, "delta_init", tuple(self.delta_init))

    @property
    def inner(self) -> int:
        return self.E * self.d

    def to_dict(self) -> dict:
        return asdict(self)


def stage_name(direction: int, stage: int) -> str:
    return f"dir{direction}.stage{stage}"


def init_ckb(cfg: CKBConfig, rng: np.random.Generator, dtype=np.float64) -> nn.ParamTree:
    d, D = cfg.d, cfg.inner
    p = nn.ParamTree()
    p["norm.gamma"] = np.ones(d, dtype)
    p["norm.beta"] = np.zeros(d, dtype)
    p["W_u.W"] = nn.init_uniform(rng, d, (d, D), dtype)
    p["W_u.b"] = np.zeros(D, dtype)
    p["W_g.W"] = nn.init_uniform(rng, d, (d, D), dtype)
    p["W_g.b"] = np.zeros(D, dtype)
    p["conv.depth"] = nn.init_uniform(rng, cfg.k, (D, cfg.k), dtype)
    p["conv.point"] = nn.init_uniform(rng, D, (D, D), dtype)
    for j in range(cfg.directions):
        for s in range(cfg.N):
            stage = SelectiveKNCParams.init(D, cfg.S, rng, dtype, cfg.delta_init or None)
            p.add(stage_name(j, s), stage.as_dict())
    p["out.W"] = nn.init_uniform(rng, D, (D, d), dtype)
    if cfg.use_mlp:
        h = cfg.mlp_expansion * d
        p["mlp.W1"] = nn.init_uniform(rng, d, (d, h), dtype)
        p["mlp.b1"] = np.zeros(h, dtype)
        p["mlp.W2"] = nn.init_uniform(rng, h, (h, d), dtype)
        p["mlp.b2"] = np.zeros(d, dtype)
    return p


def _stage_params(params, direction: int, stage: int) -> SelectiveKNCParams:
    return SelectiveKNCParams.from_dict(params.subtree(stage_name(direction, stage)))


def scan_orders(directions: int, hw: tuple[int, int] | None, L: int) -> list[np.ndarray]:
    """Index permutations of the row-major sequence, one per direction.

    Order: row-major forward, column-major forward, row-major reverse,
    column-major reverse. Without a 2D shape only the forward order exists.
    """
    if hw is None:
        if directions != 1:
            raise ValueError("multi-direction scans need a 2D field")
        return [np.arange(L)]
    H, W = hw
    if H * W != L:
        raise ValueError(f"field {H}x{W} does not match sequence length {L}")
    row = np.arange(L)
    col = row.reshape(H, W).T.ravel()
    return [row, col, row[::-1], col[::-1]][:directions]


def _aggregate_mask(cfg: CKBConfig) -> list[bool]:
    if cfg.aggregation == "dense_sum":
        return [True] * cfg.N
    return [s >= cfg.N - 2 for s in range(cfg.N)]


def cascade_forward(stages: list[SelectiveKNCParams], u: np.ndarray, mask: list[bool]):
    """Serial cells over one ordering; returns the aggregated output and stage inputs."""
    inputs = []
    x = u
    total = None
    for st, use in zip(stages, mask):
        inputs.append(x)
        x, _ = knc_scan(st, x)
        if use:
            total = x if total is None else total + x
    return total, inputs


def cascade_backward(stages, inputs, mask, g_total):
    """Returns ``(per-stage grad dicts, grad_u)``."""
    grads = [None] * len(stages)
    carry = None
    for s in range(len(stages) - 1, -1, -1):
        gy = g_total if mask[s] else np.zeros_like(g_total)
        if carry is not None:
            gy = gy + carry
        grads[s], carry = knc_scan_backward(stages[s], inputs[s], gy)
    return grads, carry


def directional_scan_2d(params, cfg: CKBConfig, F: np.ndarray, return_per_direction: bool = False):
    """Run the cascade branch over every scan ordering of ``F [B, H, W, D]``.

    Each direction has its own stages; outputs are mapped back to the field
    layout and averaged in direction order.
    """
    if F.ndim != 4:
        raise ValueError(f"expected a [B, H, W, D] field, got shape {F.shape}")
    B, H, W, D = F.shape
    y, cache = _directional_forward(params, cfg, F.reshape(B, H * W, D), (H, W))
    if return_per_direction:
        per = [p.reshape(B, H, W, D) for p in cache["per_direction"]]
        return y.reshape(B, H, W, D), per
    return y.reshape(B, H, W, D)


def _directional_forward(params, cfg, u, hw):
    orders = scan_orders(cfg.directions, hw, u.shape[1])
    mask = _aggregate_mask(cfg)
    per_dir, caches = [], []
    acc = None
    for j, order in enumerate(orders):
        stages = [_stage_params(params, j, s) for s in range(cfg.N)]
        seq = u[:, order]
        total, inputs = cascade_forward(stages, seq, mask)
        back = np.empty_like(total)
        back[:, order] = total
        per_dir.append(back)
        caches.append((order, stages, inputs))
        acc = back if acc is None else acc + back
    ybar = acc / len(orders) if len(orders) > 1 else acc
    return ybar, {"per_direction": per_dir, "dirs": caches, "mask": mask}


def _directional_backward(cfg, cache, g_ybar, grads_out):
    n = len(cache["dirs"])
    g = g_ybar / n if n > 1 else g_ybar
    gu = None
    for j, (order, stages, inputs) in enumerate(cache["dirs"]):
        stage_grads, g_seq = cascade_backward(stages, inputs, cache["mask"], g[:, order])
        for s, sg in enumerate(stage_grads):
            for name, val in sg.items():
                grads_out[f"{stage_name(j, s)}.{name}"] = val
        back = np.empty_like(g_seq)
        back[:, order] = g_seq
        gu = back if gu is None else gu + back
    return gu


def ckb_forward(params, cfg: CKBConfig, X: np.ndarray):
    """Apply one block to ``[B, L, d]`` or ``[B, H, W, d]``; returns ``(Y, cache)``."""
    field_shape = None
    if X.ndim == 4:
        B, H, W, d = X.shape
        field_shape = X.shape
        hw = (H, W)
        Xs = X.reshape(B, H * W, d)
    elif X.ndim == 3:
        hw = None
        Xs = X
    else:
        raise ValueError(f"expected [B, L, d] or [B, H, W, d], got shape {X.shape}")
    if Xs.shape[-1] != cfg.d:
        raise ValueError(f"block expects {cfg.d} channels, got {Xs.shape[-1]}")

    xn, c_ln = nn.layer_norm(Xs, params["norm.gamma"], params["norm.beta"])
    a, c_u = nn.linear(xn, params["W_u.W"], params["W_u.b"])
    conv, c_conv = nn.dsconv1d(a, params["conv.depth"], params["conv.point"])
    u, c_su = nn.silu(conv)
    gpre, c_g = nn.linear(xn, params["W_g.W"], params["W_g.b"])
    g, c_sg = nn.silu(gpre)
    ybar, c_dir = _directional_forward(params, cfg, u, hw)
    h = ybar * g
    out, c_out = nn.linear(h, params["out.W"])
    c_mlp = None
    if cfg.use_mlp:
        out, c_mlp = nn.mlp(out, params["mlp.W1"], params["mlp.b1"], params["mlp.W2"], params["mlp.b2"])
    Y = Xs + out
    nn._check("ckb_forward", Y)
    cache = dict(field_shape=field_shape, ln=c_ln, u=c_u, conv=c_conv, su=c_su, g=c_g, sg=c_sg,
                 dir=c_dir, ybar=ybar, gate=g, out=c_out, mlp=c_mlp)
    if field_shape is not None:
        Y = Y.reshape(field_shape)
    return Y, cache


def ckb_backward(params, cfg: CKBConfig, cache, grad_Y: np.ndarray):
    """Returns ``(grads, grad_X)``; ``grads`` has the same keys as ``params``."""
    field_shape = cache["field_shape"]
    gY = grad_Y.reshape(grad_Y.shape[0], -1, cfg.d) if field_shape is not None else grad_Y
    grads = {}
    g_out = gY
    if cfg.use_mlp:
        g_out, grads["mlp.W1"], grads["mlp.b1"], grads["mlp.W2"], grads["mlp.b2"] = \
            nn.mlp_backward(cache["mlp"], gY)
    gh, grads["out.W"], _ = nn.linear_backward(cache["out"], g_out)
    g_ybar = gh * cache["gate"]
    g_gate = gh * cache["ybar"]
    gu = _directional_backward(cfg, cache["dir"], g_ybar, grads)
    g_conv = nn.silu_backward(cache["su"], gu)
    ga, grads["conv.depth"], grads["conv.point"] = nn.dsconv1d_backward(cache["conv"], g_conv)
    gxn_u, grads["W_u.W"], grads["W_u.b"] = nn.linear_backward(cache["u"], ga)
    g_gpre = nn.silu_backward(cache["sg"], g_gate)
    gxn_g, grads["W_g.W"], grads["W_g.b"] = nn.linear_backward(cache["g"], g_gpre)
    gX, grads["norm.gamma"], grads["norm.beta"] = nn.layer_norm_backward(cache["ln"], gxn_u + gxn_g)
    gX = gX + gY
    ordered = nn.ParamTree((k, grads[k]) for k in params.keys())
    if field_shape is not None:
        gX = gX.reshape(field_shape)
    return ordered, gX
