"""Poisson benchmark: sine-series sources with exact solutions on the unit square.

Source ``f(x, y) = (pi/K^2) sum_ij a_ij (i^2 + j^2)^(-r) sin(pi i x) sin(pi j y)``
and solution of ``-lap u = f`` with ``u = 0`` on the boundary, obtained by
dividing each coefficient by ``pi^2 (i^2 + j^2)``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

SPLITS = ("train", "val", "test_id", "test_ood")
SPLIT_IDS = {name: i for i, name in enumerate(SPLITS)}


class DatasetError(RuntimeError):
    """Raised for degenerate or inconsistent datasets on disk."""


@dataclass(frozen=True)
class PoissonConfig:
    K: int = 16
    K_ood: int = 20
    r: float = -0.5
    N: int = 64
    counts: dict = field(default_factory=lambda: {"train": 1024, "val": 128, "test_id": 256, "test_ood": 256})
    seed: int = 0

    def __post_init__(self):
        if self.K < 1 or self.K_ood < 1:
            raise ValueError("series truncation K must be >= 1")
        if self.N < 4:
            raise ValueError(f"grid size N must be >= 4, got {self.N}")
        if set(self.counts) != set(SPLITS):
            raise ValueError(f"counts must name exactly the splits {SPLITS}")
        for k, v in self.counts.items():
            if int(v) < 1:
                raise ValueError(f"count for {k} must be >= 1")

    @classmethod
    def full(cls, seed: int = 0) -> "PoissonConfig":
        return cls(seed=seed)

    @classmethod
    def desk(cls, seed: int = 0) -> "PoissonConfig":
        return cls(K=8, K_ood=10, N=32, counts={"train": 128, "val": 32, "test_id": 32, "test_ood": 32},
                   seed=seed)

    def truncation(self, split: str) -> int:
        return self.K_ood if split == "test_ood" else self.K

    def to_dict(self) -> dict:
        d = asdict(self)
        d["counts"] = {k: int(self.counts[k]) for k in SPLITS}
        return d

    def sha256(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def grid(N: int) -> np.ndarray:
    """Points m/(N-1), m = 0..N-1, boundaries included."""
    return np.arange(N) / (N - 1)


def sine_matrix(K: int, N: int) -> np.ndarray:
    """[K, N] matrix of sin(pi i x_m); exactly zero on both boundary points."""
    x = grid(N)
    S = np.sin(np.pi * np.arange(1, K + 1)[:, None] * x[None, :])
    S[:, 0] = 0.0
    S[:, -1] = 0.0
    return S


def _mode_sq(K: int) -> np.ndarray:
    i = np.arange(1, K + 1)
    return (i[:, None] ** 2 + i[None, :] ** 2).astype(float)


def sample_coeffs(K: int, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. uniform [-1, 1] coefficients, drawn in row-major order."""
    return rng.uniform(-1.0, 1.0, size=(K, K))


def source_coeffs(a: np.ndarray, r: float = -0.5) -> np.ndarray:
    K = a.shape[-1]
    return (np.pi / K ** 2) * a * _mode_sq(K) ** (-r)


def solution_coeffs(a: np.ndarray, r: float = -0.5) -> np.ndarray:
    K = a.shape[-1]
    return source_coeffs(a, r) / (np.pi ** 2 * _mode_sq(K))


def _synthesize(c: np.ndarray, N: int) -> np.ndarray:
    S = sine_matrix(c.shape[-1], N)
    # first field axis is x (index i), second is y (index j)
    return np.einsum("im,...ij,jn->...mn", S, c, S)


def eval_source(a: np.ndarray, N: int, r: float = -0.5) -> np.ndarray:
    """Source field on the N x N grid; ``a`` may carry leading batch axes."""
    return _synthesize(source_coeffs(a, r), N)


def solve_poisson_spectral(a: np.ndarray, N: int, r: float = -0.5) -> np.ndarray:
    """Exact solution of -lap u = f sampled on the grid."""
    return _synthesize(solution_coeffs(a, r), N)


def fd_laplacian_residual(f: np.ndarray, u: np.ndarray, N: int | None = None) -> float:
    """max over interior points of |-(5-point Laplacian of u) - f|, h = 1/(N-1)."""
    N = u.shape[-1] if N is None else N
    h = 1.0 / (N - 1)
    lap = (u[..., 2:, 1:-1] + u[..., :-2, 1:-1] + u[..., 1:-1, 2:] + u[..., 1:-1, :-2]
           - 4.0 * u[..., 1:-1, 1:-1]) / h ** 2
    return float(np.max(np.abs(-lap - f[..., 1:-1, 1:-1]), initial=0.0))


@dataclass(frozen=True)
class NormStats:
    min_f: float
    max_f: float
    min_u: float
    max_u: float

    def __post_init__(self):
        if not (self.max_f > self.min_f and self.max_u > self.min_u):
            raise DatasetError(f"degenerate normalization range: {self}")

    @classmethod
    def from_fields(cls, f: np.ndarray, u: np.ndarray) -> "NormStats":
        return cls(float(f.min()), float(f.max()), float(u.min()), float(u.max()))

    def normalize_f(self, f):
        return (f - self.min_f) / (self.max_f - self.min_f)

    def normalize_u(self, u):
        return (u - self.min_u) / (self.max_u - self.min_u)

    def denormalize_f(self, x):
        return x * (self.max_f - self.min_f) + self.min_f

    def denormalize_u(self, x):
        return x * (self.max_u - self.min_u) + self.min_u

    def to_dict(self) -> dict:
        return asdict(self)


def sample_rng(seed: int, split: str, index: int) -> np.random.Generator:
    """Independent stream per (split, sample) so generation order does not matter."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(SPLIT_IDS[split], index)))


def generate_split(cfg: PoissonConfig, split: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns ``(a [n, K, K], f [n, N, N], u [n, N, N])`` for one split."""
    K = cfg.truncation(split)
    n = int(cfg.counts[split])
    a = np.stack([sample_coeffs(K, sample_rng(cfg.seed, split, i)) for i in range(n)])
    return a, eval_source(a, cfg.N, cfg.r), solve_poisson_spectral(a, cfg.N, cfg.r)


@dataclass
class Split:
    name: str
    f: np.ndarray      # raw source fields [n, N, N]
    u: np.ndarray      # raw solution fields [n, N, N]
    stats: NormStats
    meta: dict

    @property
    def f_norm(self):
        return self.stats.normalize_f(self.f)

    @property
    def u_norm(self):
        return self.stats.normalize_u(self.u)

    def __len__(self):
        return self.f.shape[0]


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _le_bytes(x: np.ndarray) -> bytes:
    return np.ascontiguousarray(x, dtype="<f8").tobytes()


def dataset_hash(root) -> str:
    """Digest over every split's meta.json; identifies a dataset on disk."""
    h = hashlib.sha256()
    for split in SPLITS:
        h.update((Path(root) / split / "meta.json").read_bytes())
    return h.hexdigest()


def _is_current(root: Path, cfg: PoissonConfig) -> bool:
    try:
        for split in SPLITS:
            meta = json.loads((root / split / "meta.json").read_text())
            if meta.get("config_sha256") != cfg.sha256():
                return False
            for name in ("f", "u"):
                if _sha256((root / split / f"{name}.bin").read_bytes()) != meta["sha256"][name]:
                    return False
    except (OSError, ValueError, KeyError):
        return False
    return True


def generate_dataset(cfg: PoissonConfig, root, force: bool = False) -> dict:
    """Write all four splits under ``root``; a matching existing dataset is left alone.

    Returns a summary with counts, normalization constants, the dataset
    hash and whether anything was written.
    """
    root = Path(root)
    if not force and _is_current(root, cfg):
        meta = json.loads((root / "train" / "meta.json").read_text())
        return {"written": False, "counts": {s: int(cfg.counts[s]) for s in SPLITS},
                "norm": meta["norm"], "hash": dataset_hash(root)}
    fields = {s: generate_split(cfg, s) for s in SPLITS}
    _, f_tr, u_tr = fields["train"]
    stats = NormStats.from_fields(f_tr, u_tr)
    for split, (_, f, u) in fields.items():
        d = root / split
        d.mkdir(parents=True, exist_ok=True)
        fb, ub = _le_bytes(f), _le_bytes(u)
        (d / "f.bin").write_bytes(fb)
        (d / "u.bin").write_bytes(ub)
        meta = {
            "split": split,
            "config": cfg.to_dict(),
            "config_sha256": cfg.sha256(),
            "seed": cfg.seed,
            "K": cfg.truncation(split),
            "count": int(f.shape[0]),
            "shape": list(f.shape),
            "dtype": "float64",
            "byteorder": "little",
            "norm": stats.to_dict(),
            "sha256": {"f": _sha256(fb), "u": _sha256(ub)},
        }
        (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return {"written": True, "counts": {s: int(cfg.counts[s]) for s in SPLITS},
            "norm": stats.to_dict(), "hash": dataset_hash(root)}


def load_split(root, split: str, verify: bool = True) -> Split:
    """Read one split; with ``verify`` the payload digests must match meta.json."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    d = Path(root) / split
    meta = json.loads((d / "meta.json").read_text())
    arrays = {}
    for name in ("f", "u"):
        raw = (d / f"{name}.bin").read_bytes()
        if verify and _sha256(raw) != meta["sha256"][name]:
            raise DatasetError(f"{d / (name + '.bin')} does not match its recorded hash")
        arrays[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(meta["shape"])
    return Split(split, arrays["f"], arrays["u"], NormStats(**meta["norm"]), meta)
