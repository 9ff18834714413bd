"""Precision matrices for the random-effect families used by the latent model.

Builders return :class:`~hybridst.sparse.SparseSymMatrix`.  The ``*Effect``
classes wrap a builder together with its hyperparameters on the internal
(unconstrained) scale and their priors, which is what the latent Gaussian
model optimizes over.
"""

import math

import numpy as np
import scipy.sparse as sp
from scipy.special import kv

from .sparse import PatternFactorizer, SparseSymMatrix, cholesky, log_det, kron

#: diagonal jitter added to intrinsic random-walk precisions
RW_JITTER = 1e-5


def matern_kappa(rho):
    return math.sqrt(8.0) / rho


def spde_matern_precision(fem, rho, sigma):
    """SPDE precision for alpha=2 in two dimensions (Matérn with nu=1).

    ``rho`` is the range at which correlation drops to about 0.13 and
    ``sigma`` the marginal standard deviation of the continuous field.
    """
    if not (rho > 0 and sigma > 0):
        raise ValueError(f"rho and sigma must be positive, got rho={rho}, sigma={sigma}")
    kappa = matern_kappa(rho)
    tau = 1.0 / (2.0 * math.sqrt(math.pi) * kappa * sigma)
    C = fem.c_diag
    G = fem.G.csr
    GCG = G @ sp.diags(1.0 / C) @ G
    Q = tau**2 * (kappa**4 * sp.diags(C) + 2.0 * kappa**2 * G + GCG)
    return SparseSymMatrix.from_scipy(Q)


def ar1_precision(T, a, sigma_innov=1.0):
    """Precision of a stationary AR(1) path of length ``T``."""
    if not abs(a) < 1:
        raise ValueError(f"AR(1) coefficient must satisfy |a| < 1, got {a}")
    if T < 2:
        raise ValueError("AR(1) precision needs T >= 2")
    d = np.full(T, 1.0 + a * a)
    d[0] = d[-1] = 1.0
    off = np.full(T - 1, -a)
    Q = sp.diags([off, d, off], [-1, 0, 1]) / sigma_innov**2
    return SparseSymMatrix.from_scipy(Q)


def ar1_log_det(T, a, sigma_innov=1.0):
    return math.log1p(-a * a) - 2.0 * T * math.log(sigma_innov)


def difference_matrix(n, order):
    D = sp.identity(n, format="csr")
    for _ in range(order):
        D = (D[1:] - D[:-1]).tocsr()
    return D


def _random_walk(n, tau, order, jitter):
    if tau <= 0:
        raise ValueError(f"precision must be positive, got {tau}")
    D = difference_matrix(n, order)
    Q = tau * (D.T @ D)
    if jitter:
        Q = Q + jitter * sp.identity(n)
    return SparseSymMatrix.from_scipy(Q)


def rw1_precision(n, tau, jitter=RW_JITTER):
    """First-order random walk ``tau * D1'D1`` plus diagonal jitter."""
    if n < 3:
        raise ValueError("RW1 needs n >= 3")
    return _random_walk(n, tau, 1, jitter)


def rw2_precision(n, tau, jitter=RW_JITTER):
    """Second-order random walk ``tau * D2'D2`` plus diagonal jitter."""
    if n < 4:
        raise ValueError("RW2 needs n >= 4")
    return _random_walk(n, tau, 2, jitter)


def iid_precision(n, tau):
    if n < 1 or tau <= 0:
        raise ValueError(f"need n >= 1 and tau > 0, got n={n}, tau={tau}")
    return SparseSymMatrix.diag(np.full(n, float(tau)))


def st_separable_precision(Q_space, a, T):
    """AR(1) in time with innovations distributed as ``Q_space``.

    Latent ordering is time-major: node ``t * G + g``.
    """
    if T == 1:
        return Q_space
    return kron(ar1_precision(T, a, 1.0), Q_space)


def ar1_basis(T):
    """``(I, interior diagonal, first off-diagonals)``; precision ``I + a^2 B1 - a B2``."""
    inner = np.ones(T)
    inner[0] = inner[-1] = 0.0
    return [sp.identity(T, format="csr"), sp.diags(inner, format="csr"),
            sp.diags([np.ones(T - 1), np.ones(T - 1)], [-1, 1], format="csr")]


def ar1_coefs(a, sigma_innov=1.0):
    return np.array([1.0, a * a, -a]) / sigma_innov**2


def spde_basis(fem):
    """``(C, G, G C^-1 G)`` for the SPDE precision."""
    G = fem.G.csr
    return [sp.diags(fem.c_diag, format="csr"), G, (G @ sp.diags(1.0 / fem.c_diag) @ G).tocsr()]


def spde_coefs(rho, sigma):
    if not (rho > 0 and sigma > 0):
        raise ValueError(f"rho and sigma must be positive, got rho={rho}, sigma={sigma}")
    kappa = matern_kappa(rho)
    tau2 = 1.0 / (4.0 * math.pi * kappa**2 * sigma**2)
    return tau2 * np.array([kappa**4, 2.0 * kappa**2, 1.0])


def matern_covariance(h, sigma2, rho):
    """Matérn covariance with nu=1: ``sigma2 * (kappa h) K1(kappa h)``."""
    h = np.asarray(h, dtype=float)
    kh = matern_kappa(rho) * h
    with np.errstate(invalid="ignore", over="ignore"):
        val = sigma2 * kh * kv(1, kh)
    val = np.where(kh == 0, sigma2, val)
    val = np.where(np.isinf(kh), 0.0, val)
    return val if val.ndim else float(val)


# ---------------------------------------------------------------------------
# priors on the internal scale

def loggamma_logdensity(theta, shape=1.0, rate=5e-5):
    """Density of ``log(tau)`` when ``tau ~ Gamma(shape, rate)``."""
    return shape * math.log(rate) - math.lgamma(shape) + shape * theta - rate * math.exp(theta)


def pc_prior_matern_logdensity(rho, sigma, rho0, sigma0):
    """Joint PC prior of a 2D Matérn field with P(rho < rho0) = P(sigma > sigma0) = 0.5."""
    if min(rho, sigma, rho0, sigma0) <= 0:
        raise ValueError("PC prior arguments must be positive")
    lam_rho = -math.log(0.5) * rho0
    lam_sigma = -math.log(0.5) / sigma0
    return (math.log(lam_rho) - 2.0 * math.log(rho) - lam_rho / rho
            + math.log(lam_sigma) - lam_sigma * sigma)


def normal_logdensity(x, mean, var):
    return -0.5 * math.log(2 * math.pi * var) - 0.5 * (x - mean) ** 2 / var


def to_corr(theta):
    """Map the real line onto (-1, 1); inverse of ``log((1+a)/(1-a))``."""
    return math.tanh(0.5 * theta)


def from_corr(a):
    return math.log((1.0 + a) / (1.0 - a))


# ---------------------------------------------------------------------------
# effect families

class Effect:
    """Base class: a block of latent nodes with its own precision."""

    family = "effect"
    hyper_names = ()

    def __init__(self, name, size):
        self.name = name
        self.size = int(size)

    @property
    def n_hyper(self):
        return len(self.hyper_names)

    def precision(self, theta):
        raise NotImplementedError

    def basis(self):
        """Fixed matrices ``B_k`` with ``precision(theta) = sum_k coefs(theta)_k B_k``."""
        raise NotImplementedError

    def coefs(self, theta):
        raise NotImplementedError

    def _factorizer(self):
        if getattr(self, "_fz", None) is None:
            self._fz = PatternFactorizer.from_terms(self.basis())
        return self._fz

    def log_det(self, theta):
        return log_det(self._factorizer().factor(self.coefs(theta)))

    def log_prior(self, theta):
        return 0.0

    def initial(self):
        return np.zeros(self.n_hyper)

    def describe(self, theta):
        """Hyperparameters on their natural scale."""
        return {}

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r}, size={self.size})"


class FixedEffects(Effect):
    family = "fixed"

    def __init__(self, name, size, prior_precision=0.001):
        super().__init__(name, size)
        self.prior_precision = prior_precision

    def precision(self, theta):
        return iid_precision(self.size, self.prior_precision)

    def basis(self):
        return [sp.identity(self.size, format="csr")]

    def coefs(self, theta):
        return np.array([self.prior_precision])

    def log_det(self, theta):
        return self.size * math.log(self.prior_precision)


class IidEffect(Effect):
    """IID Gaussian nodes; precision is a hyperparameter unless ``tau`` is given."""

    family = "iid"

    def __init__(self, name, size, tau=None, prior=(1.0, 5e-5)):
        super().__init__(name, size)
        self.tau = tau
        self.prior = prior
        self.hyper_names = () if tau is not None else (f"log_tau_{name}",)

    def _tau(self, theta):
        return self.tau if self.tau is not None else math.exp(theta[0])

    def precision(self, theta):
        return iid_precision(self.size, self._tau(theta))

    def basis(self):
        return [sp.identity(self.size, format="csr")]

    def coefs(self, theta):
        return np.array([self._tau(theta)])

    def log_det(self, theta):
        return self.size * math.log(self._tau(theta))

    def log_prior(self, theta):
        return 0.0 if self.tau is not None else loggamma_logdensity(theta[0], *self.prior)

    def initial(self):
        return np.zeros(self.n_hyper)

    def describe(self, theta):
        return {} if self.tau is not None else {f"tau_{self.name}": math.exp(theta[0])}


class RandomWalkEffect(Effect):
    """Intrinsic RW1/RW2 made proper by a recorded diagonal jitter."""

    def __init__(self, name, size, order=2, jitter=RW_JITTER, prior=(1.0, 5e-5), init_log_tau=0.0):
        super().__init__(name, size)
        if order not in (1, 2):
            raise ValueError("order must be 1 or 2")
        self.order = order
        self.jitter = jitter
        self.prior = prior
        self.init_log_tau = init_log_tau
        self.family = f"rw{order}"
        self.hyper_names = (f"log_tau_{name}",)

    def precision(self, theta):
        builder = rw1_precision if self.order == 1 else rw2_precision
        return builder(self.size, math.exp(theta[0]), self.jitter)

    def basis(self):
        D = difference_matrix(self.size, self.order)
        return [(D.T @ D).tocsr(), sp.identity(self.size, format="csr")]

    def coefs(self, theta):
        return np.array([math.exp(theta[0]), self.jitter])

    def log_prior(self, theta):
        return loggamma_logdensity(theta[0], *self.prior)

    def initial(self):
        return np.array([self.init_log_tau])

    def describe(self, theta):
        return {f"tau_{self.name}": math.exp(theta[0])}


class Ar1Effect(Effect):
    family = "ar1"

    def __init__(self, name, size, prior=(1.0, 5e-5), corr_prior_var=0.15):
        super().__init__(name, size)
        self.prior = prior
        self.corr_prior_var = corr_prior_var
        self.hyper_names = (f"log_tau_{name}", f"logit_a_{name}")

    def precision(self, theta):
        return ar1_precision(self.size, to_corr(theta[1]), math.exp(-0.5 * theta[0]))

    def basis(self):
        return ar1_basis(self.size)

    def coefs(self, theta):
        return ar1_coefs(to_corr(theta[1]), math.exp(-0.5 * theta[0]))

    def log_det(self, theta):
        return ar1_log_det(self.size, to_corr(theta[1]), math.exp(-0.5 * theta[0]))

    def log_prior(self, theta):
        return (loggamma_logdensity(theta[0], *self.prior)
                + normal_logdensity(theta[1], 0.0, self.corr_prior_var))

    def describe(self, theta):
        return {f"tau_{self.name}": math.exp(theta[0]), f"a_{self.name}": to_corr(theta[1])}


class SpdeEffect(Effect):
    """Matérn field on mesh vertices with a PC prior on (range, sd)."""

    family = "spde"

    def __init__(self, name, fem, rho0, sigma0=1.0, vertices=None):
        super().__init__(name, fem.C.dim)
        self.fem = fem
        self.fem_vertices = None if vertices is None else np.asarray(vertices, dtype=float)
        self.rho0 = rho0
        self.sigma0 = sigma0
        self.hyper_names = (f"log_rho_{name}", f"log_sigma_{name}")

    def precision(self, theta):
        return spde_matern_precision(self.fem, math.exp(theta[0]), math.exp(theta[1]))

    def basis(self):
        return spde_basis(self.fem)

    def coefs(self, theta):
        return spde_coefs(math.exp(theta[0]), math.exp(theta[1]))

    def log_prior(self, theta):
        # Jacobian of the log transform adds theta[0] + theta[1]
        rho, sigma = math.exp(theta[0]), math.exp(theta[1])
        return pc_prior_matern_logdensity(rho, sigma, self.rho0, self.sigma0) + theta[0] + theta[1]

    def initial(self):
        return np.array([math.log(self.rho0), math.log(self.sigma0)])

    def describe(self, theta):
        return {f"rho_{self.name}": math.exp(theta[0]), f"sigma_{self.name}": math.exp(theta[1])}


class SeparableStEffect(SpdeEffect):
    """AR(1) in time with SPDE-Matérn innovations; ``sigma`` is the innovation sd."""

    family = "separable_st"

    def __init__(self, name, fem, T, rho0, sigma0=1.0, corr_prior_var=0.15, vertices=None):
        super().__init__(name, fem, rho0, sigma0, vertices)
        self.T = int(T)
        self.n_space = fem.C.dim
        self.size = self.T * self.n_space
        self.corr_prior_var = corr_prior_var
        self.hyper_names = (f"log_rho_{name}", f"log_sigma_{name}", f"logit_a_{name}")

    def precision(self, theta):
        Qs = spde_matern_precision(self.fem, math.exp(theta[0]), math.exp(theta[1]))
        return st_separable_precision(Qs, to_corr(theta[2]), self.T)

    def basis(self):
        space = spde_basis(self.fem)
        if self.T == 1:
            return space
        return [sp.kron(R, S, format="csr") for R in ar1_basis(self.T) for S in space]

    def coefs(self, theta):
        c_space = spde_coefs(math.exp(theta[0]), math.exp(theta[1]))
        if self.T == 1:
            return c_space
        return np.outer(ar1_coefs(to_corr(theta[2])), c_space).ravel()

    def log_det(self, theta):
        if getattr(self, "_space_fz", None) is None:
            self._space_fz = PatternFactorizer.from_terms(spde_basis(self.fem))
        ld_space = log_det(self._space_fz.factor(spde_coefs(math.exp(theta[0]), math.exp(theta[1]))))
        if self.T == 1:
            return ld_space
        return self.T * ld_space + self.n_space * ar1_log_det(self.T, to_corr(theta[2]))

    def log_prior(self, theta):
        return (super().log_prior(theta[:2])
                + normal_logdensity(theta[2], 0.0, self.corr_prior_var))

    def initial(self):
        return np.array([math.log(self.rho0), math.log(self.sigma0), from_corr(0.5)])

    def describe(self, theta):
        out = super().describe(theta[:2])
        out[f"a_{self.name}"] = to_corr(theta[2])
        return out
