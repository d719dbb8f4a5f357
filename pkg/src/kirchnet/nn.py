"""Dense neural primitives with hand-written reverse passes.

Every forward returns ``(y, cache)`` and the matching ``*_backward`` takes
``(cache, grad_y)``. Arrays are plain numpy; float64 is the verification
precision, float32 is accepted everywhere for speed.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
from scipy.special import expit

MAGIC = b"KINN1"

_debug = False


def set_debug(enabled: bool) -> None:
    """Toggle finiteness assertions after every op."""
    global _debug
    _debug = bool(enabled)


def _check(name: str, *arrays: np.ndarray) -> None:
    if _debug:
        for a in arrays:
            if not np.all(np.isfinite(a)):
                raise FloatingPointError(f"non-finite output from {name}")


def init_uniform(rng: np.random.Generator, fan_in: int, shape, dtype=np.float64) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# -- linear -------------------------------------------------------------------

def linear(x: np.ndarray, W: np.ndarray, b: np.ndarray | None = None):
    """y = x W + b over the last axis."""
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"linear: input width {x.shape[-1]} does not match W {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise ValueError(f"linear: bias shape {b.shape} does not match W {W.shape}")
    y = x @ W
    if b is not None:
        y = y + b
    _check("linear", y)
    return y, (x, W)


def linear_backward(cache, gy: np.ndarray):
    """Returns ``(gx, gW, gb)``."""
    x, W = cache
    gx = gy @ W.T
    x2 = x.reshape(-1, x.shape[-1])
    g2 = gy.reshape(-1, gy.shape[-1])
    return gx, x2.T @ g2, g2.sum(axis=0)


# -- depthwise separable conv -------------------------------------------------

def dsconv1d(x: np.ndarray, depth_kernel: np.ndarray, point_W: np.ndarray):
    """Per-channel same-padded 1D convolution followed by a 1x1 channel mix.

    x is [B, L, D], depth_kernel is [D, k] with odd k, point_W is [D, D_out].
    """
    D, k = depth_kernel.shape
    if k % 2 == 0:
        raise ValueError(f"dsconv1d kernel size must be odd, got {k}")
    if x.shape[-1] != D or point_W.shape[0] != D:
        raise ValueError("dsconv1d: channel mismatch")
    L = x.shape[1]
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
    h = np.zeros_like(x)
    for j in range(k):
        h += xp[:, j:j + L, :] * depth_kernel[:, j]
    y = h @ point_W
    _check("dsconv1d", y)
    return y, (xp, h, depth_kernel, point_W)


def dsconv1d_backward(cache, gy: np.ndarray):
    """Returns ``(gx, g_depth_kernel, g_point_W)``."""
    xp, h, depth_kernel, point_W = cache
    D, k = depth_kernel.shape
    L = h.shape[1]
    pad = k // 2
    g_point = h.reshape(-1, D).T @ gy.reshape(-1, gy.shape[-1])
    gh = gy @ point_W.T
    g_depth = np.empty_like(depth_kernel)
    gxp = np.zeros_like(xp)
    for j in range(k):
        g_depth[:, j] = np.einsum("bld,bld->d", gh, xp[:, j:j + L, :])
        gxp[:, j:j + L, :] += gh * depth_kernel[:, j]
    return gxp[:, pad:pad + L, :], g_depth, g_point


# -- layer norm ---------------------------------------------------------------

def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv_std = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv_std
    y = xhat * gamma + beta
    _check("layer_norm", y)
    return y, (xhat, inv_std, gamma)


def layer_norm_backward(cache, gy: np.ndarray):
    """Returns ``(gx, g_gamma, g_beta)``."""
    xhat, inv_std, gamma = cache
    D = xhat.shape[-1]
    g_gamma = (gy * xhat).reshape(-1, D).sum(axis=0)
    g_beta = gy.reshape(-1, D).sum(axis=0)
    gxhat = gy * gamma
    gx = inv_std * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
    return gx, g_gamma, g_beta


# -- SiLU ---------------------------------------------------------------------

def silu(x: np.ndarray):
    s = expit(x)
    return x * s, (x, s)


def silu_backward(cache, gy: np.ndarray) -> np.ndarray:
    x, s = cache
    return gy * s * (1.0 + x * (1.0 - s))


# -- MLP ----------------------------------------------------------------------

def mlp(x, W1, b1, W2, b2):
    """linear -> SiLU -> linear."""
    h, c1 = linear(x, W1, b1)
    a, ca = silu(h)
    y, c2 = linear(a, W2, b2)
    return y, (c1, ca, c2)


def mlp_backward(cache, gy):
    """Returns ``(gx, gW1, gb1, gW2, gb2)``."""
    c1, ca, c2 = cache
    ga, gW2, gb2 = linear_backward(c2, gy)
    gh = silu_backward(ca, ga)
    gx, gW1, gb1 = linear_backward(c1, gh)
    return gx, gW1, gb1, gW2, gb2


# -- parameter container ------------------------------------------------------

class ParamTree(dict):
    """Ordered name -> array mapping; dotted names give the hierarchy.

    Iteration order is insertion order, which fixes both the on-disk layout
    and the alignment of optimizer moments.
    """

    def subtree(self, prefix: str) -> dict[str, np.ndarray]:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.items() if k.startswith(p)}

    def add(self, prefix: str, arrays: Mapping[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            name = f"{prefix}.{k}" if prefix else k
            if name in self:
                raise KeyError(f"duplicate parameter {name!r}")
            self[name] = v

    def count(self) -> int:
        return int(sum(v.size for v in self.values()))

    def zeros_like(self) -> "ParamTree":
        return ParamTree((k, np.zeros_like(v)) for k, v in self.items())

    def copy(self) -> "ParamTree":
        return ParamTree((k, v.copy()) for k, v in self.items())

    def astype(self, dtype) -> "ParamTree":
        return ParamTree((k, v.astype(dtype)) for k, v in self.items())

    def to_bytes(self, meta: Mapping | None = None) -> bytes:
        entries = []
        offset = 0
        chunks = []
        for name, arr in self.items():
            a = np.ascontiguousarray(arr)
            data = a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
            entries.append({"name": name, "shape": list(a.shape), "dtype": a.dtype.name,
                            "offset": offset, "nbytes": len(data)})
            chunks.append(data)
            offset += len(data)
        header = json.dumps({"tensors": entries, "meta": dict(meta or {})},
                            sort_keys=True, separators=(",", ":")).encode()
        return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)

    def save(self, path, meta: Mapping | None = None) -> None:
        Path(path).write_bytes(self.to_bytes(meta))

    @classmethod
    def from_bytes(cls, blob: bytes) -> tuple["ParamTree", dict]:
        if blob[:len(MAGIC)] != MAGIC:
            raise ValueError("not a KINN1 parameter file")
        pos = len(MAGIC)
        (hlen,) = struct.unpack("<Q", blob[pos:pos + 8])
        pos += 8
        header = json.loads(blob[pos:pos + hlen])
        base = pos + hlen
        tree = cls()
        for e in header["tensors"]:
            dt = np.dtype(e["dtype"]).newbyteorder("<")
            start = base + e["offset"]
            arr = np.frombuffer(blob[start:start + e["nbytes"]], dtype=dt)
            tree[e["name"]] = arr.astype(dt.newbyteorder("="), copy=True).reshape(e["shape"])
        return tree, header.get("meta", {})

    @classmethod
    def load(cls, path) -> tuple["ParamTree", dict]:
        return cls.from_bytes(Path(path).read_bytes())


# -- finite-difference oracle -------------------------------------------------

def fd_gradient_errors(f: Callable[[], float], params: Mapping[str, np.ndarray],
                       grads: Mapping[str, np.ndarray], eps: float = 1e-6,
                       names: Iterable[str] | None = None) -> dict[str, float]:
    """Central-difference check of ``grads`` against scalar ``f``.

    ``f`` takes no arguments and must read the arrays in ``params``, which
    are perturbed in place and restored. The error for one tensor is
    ``max|a - n| / max(max|a|, max|n|, 1e-8)``.
    """
    out = {}
    for name in (names if names is not None else params.keys()):
        p = params[name]
        if p.dtype != np.float64:
            raise TypeError("finite-difference checks require float64 parameters")
        num = np.empty_like(p)
        flat = p.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f()
            flat[i] = orig - eps
            fm = f()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * eps)
        a = np.asarray(grads[name], dtype=np.float64)
        denom = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(num), initial=0.0), 1e-8)
        out[name] = float(np.max(np.abs(a - num), initial=0.0) / denom)
    return out


def fd_gradient_check(f: Callable[[], float], params: Mapping[str, np.ndarray],
                      grads: Mapping[str, np.ndarray], eps: float = 1e-6) -> float:
    """Maximum relative error over all tensors; see :func:`fd_gradient_errors`."""
    errs = fd_gradient_errors(f, params, grads, eps)
    return max(errs.values(), default=0.0)
