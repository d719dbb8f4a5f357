"""Cascade-generated sequences, a selective-scan one-step model and autoregressive rollout."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import nn
from .analytic import CascadeSpec, ContinuousCell, zoh_step
from .poisson import DatasetError
from .block import CKBConfig, ckb_backward, ckb_forward, init_ckb
from .train import (STREAM_INIT, STREAM_SEQUENCES, STREAM_SHUFFLE, MetricLog, OptimState,
                    adam_step, compute_metrics, lr_at, relative_l2_loss, stream_rng)

SEQ_SPLITS = {"train": 0, "test": 1}


@dataclass(frozen=True)
class RolloutConfig:
    context: int = 10      # teacher-forced window length k
    horizon: int = 40      # rollout length T
    start: int = 0         # first context frame index

    def __post_init__(self):
        if self.context < 1 or self.horizon < 1:
            raise ValueError("context and horizon must be >= 1")
        if self.start < 0:
            raise ValueError("start must be >= 0")


@dataclass
class SequenceData:
    u: np.ndarray   # [count, steps] held inputs
    v: np.ndarray   # [count, steps + 1, n] cascade states, v[:, 0] is the initial state
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.u.shape[0]

    def save(self, root) -> None:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        ub = np.ascontiguousarray(self.u, dtype="<f8").tobytes()
        vb = np.ascontiguousarray(self.v, dtype="<f8").tobytes()
        (root / "u.bin").write_bytes(ub)
        (root / "v.bin").write_bytes(vb)
        meta = {**self.meta, "u_shape": list(self.u.shape), "v_shape": list(self.v.shape),
                "dtype": "float64", "byteorder": "little",
                "sha256": {"u": hashlib.sha256(ub).hexdigest(), "v": hashlib.sha256(vb).hexdigest()}}
        (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, root) -> "SequenceData":
        root = Path(root)
        meta = json.loads((root / "meta.json").read_text())
        arrays = {}
        for name in ("u", "v"):
            raw = (root / f"{name}.bin").read_bytes()
            if hashlib.sha256(raw).hexdigest() != meta["sha256"][name]:
                raise DatasetError(f"{root / (name + '.bin')} does not match its recorded hash")
            arrays[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(meta[f"{name}_shape"])
        return cls(arrays["u"], arrays["v"], meta)


def spec_to_dict(spec: CascadeSpec) -> list[dict]:
    return [asdict(c) for c in spec.cells]


def spec_from_dict(cells: list[dict]) -> CascadeSpec:
    return CascadeSpec([ContinuousCell(**c) for c in cells])


def smooth_input(rng: np.random.Generator, steps: int, dt: float, modes: int = 3) -> np.ndarray:
    """Offset plus a few random sinusoids, sampled at the start of each hold."""
    t = np.arange(steps) * dt
    c = rng.uniform(0.5, 1.0)
    amp = rng.uniform(0.0, 0.3, modes)
    omega = rng.uniform(0.2, 2.0, modes)
    phase = rng.uniform(0.0, 2 * np.pi, modes)
    return c + (amp[:, None] * np.sin(omega[:, None] * t[None, :] + phase[:, None])).sum(axis=0)


def simulate_cascade(spec: CascadeSpec, u: np.ndarray, dt: float, v0=None) -> np.ndarray:
    """ZOH chain over ``u [count, steps]``; each cell is driven by the updated previous state."""
    alpha = np.array([c.alpha for c in spec.cells])
    beta = np.array([c.beta for c in spec.cells])
    count, steps = u.shape
    n = len(spec)
    v = np.zeros((count, steps + 1, n))
    if v0 is not None:
        v[:, 0] = v0
    for t in range(steps):
        drive = u[:, t]
        for i in range(n):
            v[:, t + 1, i] = zoh_step(alpha[i], beta[i], v[:, t, i], drive, dt)
            drive = v[:, t + 1, i]
    return v


def make_sequence_dataset(spec: CascadeSpec, dt: float, steps: int, count: int, seed: int,
                          split: str = "train", inputs: str = "smooth", init: str = "zero",
                          burn_in: int = 0) -> SequenceData:
    """Simulate ``count`` cascades; ``burn_in`` steps are run and then discarded.

    ``inputs`` is ``"smooth"`` or ``"zero"``; ``init`` is ``"zero"`` or
    ``"random"`` (uniform [-1, 1] initial states).
    """
    if inputs not in ("smooth", "zero") or init not in ("zero", "random"):
        raise ValueError(f"unknown inputs={inputs!r} or init={init!r}")
    total = steps + burn_in
    u = np.zeros((count, total))
    v0 = np.zeros((count, len(spec)))
    for i in range(count):
        rng = stream_rng(seed, STREAM_SEQUENCES, SEQ_SPLITS[split], i)
        if init == "random":
            v0[i] = rng.uniform(-1.0, 1.0, len(spec))
        if inputs == "smooth":
            u[i] = smooth_input(rng, total, dt)
    v = simulate_cascade(spec, u, dt, v0)
    meta = {"spec": spec_to_dict(spec), "dt": dt, "steps": steps, "count": count, "seed": seed,
            "split": split, "inputs": inputs, "init": init, "burn_in": burn_in}
    return SequenceData(u[:, burn_in:], v[:, burn_in:], meta)


# -- one-step model -----------------------------------------------------------

@dataclass(frozen=True)
class SequenceModelConfig:
    """Tokens ``[v_t, u_t]`` over the context window -> lift -> CKB layers -> next-state increment."""

    state_dim: int
    width: int = 16
    layers: int = 1
    block: dict = field(default_factory=lambda: {"E": 2, "S": 8, "N": 2})

    def block_config(self) -> CKBConfig:
        return CKBConfig(d=self.width, **self.block)


class SequenceModel:
    def __init__(self, cfg: SequenceModelConfig, params: nn.ParamTree | None = None, seed: int = 0,
                 dtype=np.float64):
        self.cfg = cfg
        self.bcfg = cfg.block_config()
        if self.bcfg.directions != 1:
            raise ValueError("sequence model scans in one direction")
        if params is None:
            rng = stream_rng(seed, STREAM_INIT)
            n, d = cfg.state_dim, cfg.width
            params = nn.ParamTree()
            params["lift.W"] = nn.init_uniform(rng, n + 1, (n + 1, d), dtype)
            params["lift.b"] = np.zeros(d, dtype)
            for i in range(cfg.layers):
                params.add(f"block{i}", init_ckb(self.bcfg, rng, dtype))
            params["proj.W"] = nn.init_uniform(rng, d, (d, n), dtype)
            params["proj.b"] = np.zeros(n, dtype)
        self.params = params

    def _tokens(self, frames, inputs):
        return np.concatenate([frames, inputs[..., None]], axis=-1)

    def forward(self, frames: np.ndarray, inputs: np.ndarray):
        """``frames [B, k, n]``, ``inputs [B, k]`` -> predicted next frame ``[B, n]``."""
        tokens = self._tokens(frames, inputs).astype(self.params["lift.W"].dtype, copy=False)
        z, c_lift = nn.linear(tokens, self.params["lift.W"], self.params["lift.b"])
        blocks = []
        for i in range(self.cfg.layers):
            z, c = ckb_forward(nn.ParamTree(self.params.subtree(f"block{i}")), self.bcfg, z)
            blocks.append(c)
        inc, c_proj = nn.linear(z[:, -1], self.params["proj.W"], self.params["proj.b"])
        return frames[:, -1] + inc, (c_lift, blocks, c_proj, z.shape)

    def backward(self, cache, gy: np.ndarray) -> nn.ParamTree:
        c_lift, blocks, c_proj, zshape = cache
        grads = {}
        g_last, grads["proj.W"], grads["proj.b"] = nn.linear_backward(c_proj, gy)
        gz = np.zeros(zshape, dtype=gy.dtype)
        gz[:, -1] = g_last
        for i in range(self.cfg.layers - 1, -1, -1):
            bg, gz = ckb_backward(nn.ParamTree(self.params.subtree(f"block{i}")), self.bcfg, blocks[i], gz)
            for k, v in bg.items():
                grads[f"block{i}.{k}"] = v
        _, grads["lift.W"], grads["lift.b"] = nn.linear_backward(c_lift, gz)
        return nn.ParamTree((k, grads[k]) for k in self.params)

    def __call__(self, frames, inputs):
        return self.forward(frames, inputs)[0]


def windows(data: SequenceData, k: int):
    """All teacher-forced (context frames, context inputs, next frame) triples."""
    steps = data.u.shape[1]
    idx = np.arange(k - 1, steps)
    frames = np.stack([data.v[:, t - k + 1:t + 1] for t in idx], axis=1)
    inputs = np.stack([data.u[:, t - k + 1:t + 1] for t in idx], axis=1)
    target = data.v[:, idx + 1]
    n = data.v.shape[-1]
    return frames.reshape(-1, k, n), inputs.reshape(-1, k), target.reshape(-1, n)


def train_sequence_model(model: SequenceModel, data: SequenceData, k: int, epochs: int, batch: int,
                         lr: float, seed: int, halve_every: int = 0, comment: str | None = None) -> MetricLog:
    """Teacher-forced one-step training on every window of ``data``; returns the per-epoch log."""
    frames, inputs, target = windows(data, k)
    state = OptimState.zeros(model.params)
    log = MetricLog(comment)
    n = len(target)
    for epoch in range(1, epochs + 1):
        rate = lr_at(epoch, lr, halve_every)
        order = stream_rng(seed, STREAM_SHUFFLE, epoch).permutation(n)
        preds = np.empty_like(target)
        total = 0.0
        for s in range(0, n, batch):
            idx = order[s:s + batch]
            pred, cache = model.forward(frames[idx], inputs[idx])
            loss, g = relative_l2_loss(pred, target[idx])
            preds[idx] = pred
            total += loss * len(idx)
            adam_step(model.params, model.backward(cache, g.astype(pred.dtype)), state, rate)
        log.add(epoch, "train", compute_metrics(preds, target), total / n, rate, 0.0)
    return log


# -- rollout ------------------------------------------------------------------

@dataclass
class RolloutResult:
    per_step: np.ndarray        # [T'] mean relative L2 per step, T' <= T
    mean: float
    truncated: bool
    predictions: np.ndarray     # [B, T', n]


def _rel_l2(pred, true) -> float:
    return compute_metrics(pred, true).nrmse


def rollout_eval(model: Callable[[np.ndarray, np.ndarray], np.ndarray], frames: np.ndarray,
                 inputs: np.ndarray, cfg: RolloutConfig) -> RolloutResult:
    """Autoregressive rollout scored against ``frames``.

    The first ``cfg.context`` frames from ``cfg.start`` seed the context;
    every later frame comes from the model's own predictions. ``inputs`` are
    the exogenous holds and are always taken from the data. A non-finite
    prediction truncates the trajectory.
    """
    k, T, s0 = cfg.context, cfg.horizon, cfg.start
    if frames.shape[1] < s0 + k + T or inputs.shape[1] < s0 + k + T - 1:
        raise ValueError("sequence too short for the requested context and horizon")
    ctx = frames[:, s0:s0 + k].copy()
    errs, preds = [], []
    truncated = False
    for j in range(T):
        t = s0 + k - 1 + j
        pred = model(ctx, inputs[:, t - k + 1:t + 1])
        if not np.all(np.isfinite(pred)):
            truncated = True
            break
        errs.append(_rel_l2(pred, frames[:, t + 1]))
        preds.append(pred)
        ctx = np.concatenate([ctx[:, 1:], pred[:, None]], axis=1)
    per_step = np.array(errs)
    mean = float(per_step.mean()) if len(errs) else math.nan
    out = np.stack(preds, axis=1) if preds else np.empty((frames.shape[0], 0, frames.shape[2]))
    return RolloutResult(per_step, mean, truncated, out)


def one_step_error(model, frames: np.ndarray, inputs: np.ndarray, cfg: RolloutConfig) -> float:
    """Relative L2 of a single teacher-forced prediction at the rollout start."""
    k, s0 = cfg.context, cfg.start
    t = s0 + k - 1
    return _rel_l2(model(frames[:, s0:s0 + k], inputs[:, t - k + 1:t + 1]), frames[:, t + 1])
