"""Synthetic spatio-temporal datasets with known latent structure."""

import csv
import io
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy.spatial.distance import cdist

from . import _envelope as _env
from .gmrf import matern_covariance
from .sparse import cholesky

CSV_COLUMNS = ("x", "y_coord", "t", "response", "z1", "z2", "cat", "split", "eta_true")


@dataclass(eq=False)
class StDataset:
    """Column-oriented table of observations; ``t`` is 1-based."""

    x: np.ndarray
    y_coord: np.ndarray
    t: np.ndarray
    response: np.ndarray
    z1: np.ndarray
    z2: np.ndarray
    cat: np.ndarray
    split: np.ndarray
    eta_true: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.t)
        for f in fields(self)[:-1]:
            arr = np.asarray(getattr(self, f.name))
            if arr.shape != (n,):
                raise ValueError(f"column {f.name} has shape {arr.shape}, expected ({n},)")
            setattr(self, f.name, arr)
        self.t = self.t.astype(np.int64)
        self.cat = self.cat.astype(np.int64)
        self.split = self.split.astype(str)

    def __len__(self):
        return len(self.t)

    @property
    def n_times(self):
        return int(self.t.max())

    @property
    def coords(self):
        return np.column_stack([self.x, self.y_coord])

    def subset(self, mask):
        mask = np.asarray(mask)
        cols = {f.name: getattr(self, f.name)[mask] for f in fields(self)[:-1]}
        return StDataset(**cols, meta=dict(self.meta))

    def with_split(self, split):
        return replace(self, split=np.asarray(split).astype(str), meta=dict(self.meta))

    def mask(self, split):
        return self.split == str(split)

    def to_csv(self, path=None):
        """Write (or return, if ``path`` is None) the dataset as CSV text."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for i in range(len(self)):
            w.writerow([repr(float(self.x[i])), repr(float(self.y_coord[i])), int(self.t[i]),
                        repr(float(self.response[i])), repr(float(self.z1[i])), repr(float(self.z2[i])),
                        int(self.cat[i]), self.split[i], repr(float(self.eta_true[i]))])
        text = buf.getvalue()
        if path is None:
            return text
        with open(path, "w", newline="") as fh:
            fh.write(text)
        return path

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(h.strip() for h in header) != CSV_COLUMNS:
                raise ValueError(f"{path}: expected header {','.join(CSV_COLUMNS)}, got {header}")
            rows = [r for r in reader if r]
        cols = list(zip(*rows)) if rows else [()] * len(CSV_COLUMNS)
        data = {}
        for name, col in zip(CSV_COLUMNS, cols):
            if name in ("t", "cat"):
                data[name] = np.array([int(v) for v in col], dtype=np.int64)
            elif name == "split":
                data[name] = np.array(col, dtype=str)
            else:
                data[name] = np.array([float(v) for v in col], dtype=float)
        return cls(**data)


def sample_gmrf(Q, seed, n_samples=None):
    """Draw ``x ~ N(0, Q^{-1})`` as ``x = P' L^{-T} z``.

    ``Q`` may be a :class:`SparseSymMatrix` or an existing Cholesky factor.
    Returns one vector, or an ``(n_samples, dim)`` array.
    """
    factor = Q if hasattr(Q, "env") else cholesky(Q)
    rng = np.random.default_rng(seed)
    k = 1 if n_samples is None else int(n_samples)
    out = np.empty((k, factor.dim))
    for s in range(k):
        z = rng.standard_normal(factor.dim)
        xp = _env.envelope_backward(factor.first, factor.ptr, factor.env, z)
        out[s, factor.perm] = xp
    return out[0] if n_samples is None else out


# ---------------------------------------------------------------------------
# spatio-temporal study

@dataclass(frozen=True)
class SpatioTemporalConfig:
    n_locations: int = 150
    n_times: int = 8
    gamma: tuple = (0.727, -1.027, 0.3)
    sigma2: float = 1.0
    rho: float = 3.627
    noise_var: float = 0.02
    ar: float = 0.7
    diagonal: float = 7.254
    aspect: float = 1.5
    test_fraction: float = 0.2
    nonlinear: bool = True

    def __post_init__(self):
        if not (self.n_locations > 0 and self.n_times > 0 and abs(self.ar) < 1):
            raise ValueError("need n_locations > 0, n_times > 0 and |ar| < 1")
        if not (self.sigma2 > 0 and self.rho > 0 and self.noise_var > 0 and self.diagonal > 0):
            raise ValueError("variances, range and diagonal must be positive")
        if not 0 <= self.test_fraction < 1:
            raise ValueError("test_fraction must be in [0, 1)")

    @property
    def width(self):
        return self.diagonal * self.aspect / math.hypot(self.aspect, 1.0)

    @property
    def height(self):
        return self.diagonal / math.hypot(self.aspect, 1.0)


def f1(z):
    return 2.0 * z * np.sin(2.0 * z)


def f2(z):
    return np.sin(z**4) + np.cos(2.5 * np.pi * z)


def _random_split(rng, n, test_fraction):
    n_test = int(round(test_fraction * n))
    split = np.full(n, "train", dtype=object)
    split[rng.permutation(n)[:n_test]] = "test"
    return split.astype(str)


def simulate_spatiotemporal(cfg=SpatioTemporalConfig(), seed=0):
    """Covariate effects plus an AR(1)-in-time Matérn field, observed with noise.

    Locations are redrawn at every time.  The field recursion
    ``w_t = a w_{t-1} + xi_t`` is run on the union of all drawn locations, with
    ``xi_t`` an exact Matérn draw and a stationary start.  With
    ``nonlinear=False`` the covariates enter linearly (``z1 + z2``).
    """
    rng = np.random.default_rng(seed)
    n, T = cfg.n_locations, cfg.n_times
    N = n * T
    t = np.repeat(np.arange(1, T + 1), n)
    x = rng.uniform(0.0, cfg.width, N)
    yc = rng.uniform(0.0, cfg.height, N)
    z1 = rng.standard_normal(N)
    z2 = rng.uniform(0.0, 1.0, N)
    cat = rng.integers(1, 4, N)

    pts = np.column_stack([x, yc])
    K = matern_covariance(cdist(pts, pts), cfg.sigma2, cfg.rho)
    L = np.linalg.cholesky(K + 1e-10 * cfg.sigma2 * np.eye(N))
    omega = np.empty(N)
    state = L @ rng.standard_normal(N) / math.sqrt(1.0 - cfg.ar**2)
    for k in range(T):
        if k > 0:
            state = cfg.ar * state + L @ rng.standard_normal(N)
        rows = slice(k * n, (k + 1) * n)
        omega[rows] = state[rows]

    gamma = np.asarray(cfg.gamma, dtype=float)
    fixed = f1(z1) + f2(z2) if cfg.nonlinear else z1 + z2
    eta = fixed + gamma[cat - 1] + omega
    y = eta + rng.normal(0.0, math.sqrt(cfg.noise_var), N)
    split = _random_split(rng, N, cfg.test_fraction)
    meta = {"study": "spatiotemporal", "seed": int(seed), "params": asdict(cfg),
            "domain": [cfg.width, cfg.height]}
    return StDataset(x, yc, t, y, z1, z2, cat, split, eta, meta)


# ---------------------------------------------------------------------------
# temporal study with level shifts

@dataclass(frozen=True)
class TemporalJumpsConfig:
    n: int = 2000
    k: int = 10
    beta0: float = 2.0
    segment: int = 181
    p_sign: float = 0.5
    jump_mean: float = 5.0
    jump_precision: float = 10.0
    rw_precision: float = 20.0
    noise_precision: float = 20.0
    test_fraction: float = 0.0

    def __post_init__(self):
        if not (self.n > 0 and self.k >= 0 and self.segment > 0):
            raise ValueError("need n > 0, k >= 0 and segment > 0")
        if min(self.jump_precision, self.rw_precision, self.noise_precision) <= 0:
            raise ValueError("precisions must be positive")
        if not (0 <= self.p_sign <= 1 and 0 <= self.test_fraction < 1):
            raise ValueError("p_sign must be in [0, 1] and test_fraction in [0, 1)")


def jump_starts(cfg):
    """0-based indices at which each level shift begins."""
    starts = cfg.segment * np.arange(1, cfg.k + 1)
    if cfg.k and starts[-1] >= cfg.n:
        raise ValueError(f"{cfg.k} jumps with segment {cfg.segment} do not fit in n={cfg.n}")
    return starts


def simulate_temporal_jumps(cfg=TemporalJumpsConfig(), seed=0):
    """Intercept plus a RW1 path with ``k`` signed level shifts, observed with noise.

    Shift ``j`` (1-based) is active from 1-based index ``segment * j + 1`` on.
    """
    rng = np.random.default_rng(seed)
    n = cfg.n
    starts = jump_starts(cfg)
    sign = np.sign(rng.binomial(1, cfg.p_sign, cfg.k) - 0.5)
    w = sign * rng.normal(cfg.jump_mean, 1.0 / math.sqrt(cfg.jump_precision), cfg.k)
    D = (np.arange(n)[:, None] >= starts[None, :]).astype(float)
    steps = rng.normal(0.0, 1.0 / math.sqrt(cfg.rw_precision), n - 1)
    u_r = np.concatenate([[0.0], np.cumsum(steps)])
    eta = cfg.beta0 + D @ w + u_r
    y = eta + rng.normal(0.0, 1.0 / math.sqrt(cfg.noise_precision), n)
    split = _random_split(rng, n, cfg.test_fraction)
    zeros = np.zeros(n)
    meta = {"study": "temporal-jumps", "seed": int(seed), "params": asdict(cfg),
            "jump_starts": starts.tolist(), "jumps": w.tolist()}
    return StDataset(zeros, zeros.copy(), np.arange(1, n + 1), y, zeros.copy(), zeros.copy(),
                     np.ones(n, dtype=np.int64), split, eta, meta)
