"""Latent Gaussian models with a Gaussian likelihood.

With Gaussian observations the conditional posterior of the latent field is
exactly Gaussian, so the model is fitted by maximizing the closed-form
marginal likelihood plus hyperparameter priors (Nelder-Mead on the internal
scale) and reading off the conditional posterior at the mode.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize

from .gmrf import Effect, loggamma_logdensity, pc_prior_matern_logdensity  # noqa: F401
from .sparse import NotPositiveDefinite, PatternFactorizer, SparseSymMatrix, log_det, marginal_variances

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


class OptimizationFailure(RuntimeError):
    pass


@dataclass(eq=False)
class LgmSpec:
    """Declarative latent Gaussian model.

    ``blocks`` pairs each effect with its ``n x size`` projector block; the
    blocks are stacked horizontally into ``A``.  Rows whose response is NaN
    do not enter the likelihood but still receive predictions.
    """

    blocks: list
    offset: np.ndarray = None
    extra_obs_variance: np.ndarray = None
    obs_prior: tuple = (1.0, 5e-5)

    def __post_init__(self):
        if not self.blocks:
            raise ValueError("an LGM needs at least one effect")
        ns = {A.shape[0] for _, A in self.blocks}
        if len(ns) != 1:
            raise ValueError(f"projector blocks disagree on the number of rows: {sorted(ns)}")
        for eff, A in self.blocks:
            if A.shape[1] != eff.size:
                raise ValueError(f"block for {eff.name!r} has {A.shape[1]} columns, effect size {eff.size}")
        n = self.n
        self.offset = np.zeros(n) if self.offset is None else np.asarray(self.offset, dtype=float)
        self.extra_obs_variance = (np.zeros(n) if self.extra_obs_variance is None
                                   else np.broadcast_to(np.asarray(self.extra_obs_variance, dtype=float), (n,)).copy())
        if self.offset.shape != (n,):
            raise ValueError("offset length must equal the number of rows")
        if np.any(self.extra_obs_variance < 0):
            raise ValueError("extra_obs_variance must be non-negative")
        self.A = sp.hstack([sp.csr_matrix(A) for _, A in self.blocks], format="csr")
        self._factorizers = {}

    @property
    def effects(self):
        return [eff for eff, _ in self.blocks]

    @property
    def n(self):
        return self.blocks[0][1].shape[0]

    @property
    def J(self):
        return sum(eff.size for eff in self.effects)

    @property
    def theta_names(self):
        names = ["log_tau_obs"]
        for eff in self.effects:
            names.extend(eff.hyper_names)
        return names

    def latent_slices(self):
        out, start = {}, 0
        for eff in self.effects:
            out[eff.name] = slice(start, start + eff.size)
            start += eff.size
        return out

    def _theta_slices(self):
        start = 1
        for eff in self.effects:
            yield eff, slice(start, start + eff.n_hyper)
            start += eff.n_hyper

    def initial_theta(self, y=None):
        init = [0.0]
        if y is not None:
            obs = np.asarray(y, dtype=float)
            obs = obs[~np.isnan(obs)] - self.offset[~np.isnan(obs)]
            if obs.size > 1 and np.var(obs) > 0:
                init = [math.log(2.0 / np.var(obs))]
        for eff in self.effects:
            init.extend(eff.initial())
        return np.array(init, dtype=float)

    def describe(self, theta):
        out = {"tau_obs": math.exp(theta[0])}
        for eff, sl in self._theta_slices():
            out.update(eff.describe(theta[sl]))
        return out

    def prior_precision(self, theta):
        mats = [eff.precision(theta[sl]).csr for eff, sl in self._theta_slices()]
        return SparseSymMatrix.from_scipy(sp.block_diag(mats, format="csr"))

    def prior_log_det(self, theta):
        return sum(eff.log_det(theta[sl]) for eff, sl in self._theta_slices())

    def log_prior(self, theta):
        lp = loggamma_logdensity(theta[0], *self.obs_prior)
        for eff, sl in self._theta_slices():
            lp += eff.log_prior(theta[sl])
        return lp

    def obs_variance(self, theta):
        """Per-row ``1/tau + extra_obs_variance``."""
        return math.exp(-theta[0]) + self.extra_obs_variance

    def effective_precision(self, theta, y):
        with np.errstate(divide="ignore"):
            w = 1.0 / self.obs_variance(theta)
        w = np.where(np.isnan(y), 0.0, w)
        return w

    def with_changes(self, offset=None, extra_obs_variance=None, blocks=None):
        """A copy with some fields replaced (same effects and projectors)."""
        out = LgmSpec(list(self.blocks) if blocks is None else blocks,
                      self.offset.copy() if offset is None else offset,
                      self.extra_obs_variance.copy() if extra_obs_variance is None else extra_obs_variance,
                      self.obs_prior)
        if blocks is None:
            out._factorizers = self._factorizers
        return out

    def posterior_factorizer(self, observed):
        """Factorizer of ``Q_prior + A' diag(w) A`` for one set of observed rows.

        Terms are the effect bases followed by one rank-one term per observed
        row, so the coefficients are ``(effect coefs..., w[observed])``.
        """
        observed = np.asarray(observed, dtype=bool)
        key = observed.tobytes()
        if key not in self._factorizers:
            rows, cols, vals, terms = [], [], [], []
            start = n_terms = 0
            for eff in self.effects:
                for B in eff.basis():
                    B = sp.coo_matrix(B)
                    rows.append(B.row + start)
                    cols.append(B.col + start)
                    vals.append(B.data)
                    terms.append(np.full(B.nnz, n_terms))
                    n_terms += 1
                start += eff.size
            r, ca, cb, wt = _row_pairs(self.A[observed])
            rows.append(ca)
            cols.append(cb)
            vals.append(wt)
            terms.append(r + n_terms)
            n_terms += int(observed.sum())
            self._factorizers[key] = PatternFactorizer(
                self.J, np.concatenate(rows), np.concatenate(cols), np.concatenate(vals),
                np.concatenate(terms), n_terms)
        return self._factorizers[key]


@dataclass(eq=False)
class _Posterior:
    theta: np.ndarray
    Q_prior_logdet: float
    Q_post: SparseSymMatrix
    factor: object
    mu: np.ndarray
    b: np.ndarray
    w: np.ndarray
    resid: np.ndarray


def _as_y(spec, y):
    y = np.asarray(y, dtype=float)
    if y.shape != (spec.n,):
        raise ValueError(f"y must have length {spec.n}, got {y.shape}")
    return y


def _posterior(spec, theta, y):
    theta = np.asarray(theta, dtype=float)
    w = spec.effective_precision(theta, y)
    resid = np.where(np.isnan(y), 0.0, y - spec.offset)
    observed = w > 0
    coefs = [eff.coefs(theta[sl]) for eff, sl in spec._theta_slices()]
    coefs.append(w[observed])
    factor = spec.posterior_factorizer(observed).factor(np.concatenate(coefs))
    b = spec.A.T @ (w * resid)
    mu = factor.solve(b)
    return _Posterior(theta, spec.prior_log_det(theta), factor.matrix, factor, mu, b, w, resid)


def conditional_posterior(spec, theta, y):
    """Mean and precision of ``x | y, theta``.

    ``Q_post = Q_prior + A' diag(w) A`` with ``w_i = (1/tau + extra_i)^-1``
    (zero for missing responses) and ``Q_post mu = A' diag(w) (y - offset)``.
    """
    post = _posterior(spec, theta, _as_y(spec, y))
    return post.mu, post.Q_post


def _log_marginal(post):
    obs = post.w > 0
    quad = float(np.sum(post.w * post.resid**2) - post.b @ post.mu)
    return (0.5 * post.Q_prior_logdet + 0.5 * float(np.sum(np.log(post.w[obs])))
            - 0.5 * log_det(post.factor) - 0.5 * quad - 0.5 * obs.sum() * LOG_2PI)


def log_marginal_likelihood(spec, theta, y):
    """``log p(y | theta)`` with the latent field integrated out exactly."""
    return _log_marginal(_posterior(spec, theta, _as_y(spec, y)))


def log_posterior_theta(spec, theta, y):
    """Unnormalized log posterior of the internal-scale hyperparameters."""
    try:
        post = _posterior(spec, theta, y)
    except (NotPositiveDefinite, ValueError, OverflowError, FloatingPointError):
        return -math.inf
    val = _log_marginal(post) + spec.log_prior(theta)
    return val if math.isfinite(val) else -math.inf


@dataclass
class HyperMode:
    theta: np.ndarray
    log_posterior: float
    n_iter: int
    n_eval: int
    converged: bool


def optimize_hyper(spec, y, init=None, step=0.5, tol=1e-6, max_iter=500):
    """Nelder-Mead maximization of the hyperparameter log posterior.

    The initial simplex is ``init`` plus ``step`` along each axis; a small
    ``step`` suits warm starts from a previous mode.
    """
    y = _as_y(spec, y)
    x0 = spec.initial_theta(y) if init is None else np.asarray(init, dtype=float)
    if not np.all(np.isfinite(x0)):
        raise ValueError("initial hyperparameters must be finite")
    d = len(x0)
    n_bad = [0]

    def objective(th):
        val = log_posterior_theta(spec, th, y)
        if not math.isfinite(val):
            n_bad[0] += 1
            return 1e300
        return -val

    simplex = np.vstack([x0] + [x0 + step * e for e in np.eye(d)])
    res = minimize(objective, x0, method="Nelder-Mead",
                   options=dict(initial_simplex=simplex, xatol=tol, fatol=tol, maxiter=max_iter))
    if res.fun >= 1e300:
        raise OptimizationFailure("every hyperparameter proposal was degenerate")
    log.debug("optimize_hyper: %d iterations, %d evaluations, %d degenerate", res.nit, res.nfev, n_bad[0])
    return HyperMode(np.asarray(res.x), -float(res.fun), int(res.nit), int(res.nfev), bool(res.success))


def _row_pairs(A):
    """(row, col_a, col_b, weight) for every pair of nonzeros within each row of A."""
    A = sp.csr_matrix(A)
    counts = np.diff(A.indptr)
    rows, ca, cb, wt = [], [], [], []
    for m in np.unique(counts):
        if m == 0:
            continue
        r = np.flatnonzero(counts == m)
        idx = A.indptr[r][:, None] + np.arange(m)[None, :]
        cols = A.indices[idx]
        vals = A.data[idx]
        rows.append(np.repeat(r, m * m))
        ca.append(np.repeat(cols, m, axis=1).ravel())
        cb.append(np.tile(cols, (1, m)).ravel())
        wt.append((vals[:, :, None] * vals[:, None, :]).ravel())
    if not rows:
        return (np.zeros(0, np.int64),) * 3 + (np.zeros(0),)
    return np.concatenate(rows), np.concatenate(ca), np.concatenate(cb), np.concatenate(wt)


def linear_predictor_variance(factor, A):
    """``diag(A Q^{-1} A')`` from selected inverse entries."""
    r, ca, cb, wt = _row_pairs(A)
    vals = factor.inverse_entries(ca, cb)
    return np.bincount(r, weights=wt * vals, minlength=A.shape[0])


@dataclass(eq=False)
class LgmFit:
    spec: LgmSpec
    theta_mode: np.ndarray
    mu: np.ndarray
    Q_post: SparseSymMatrix
    factor: object = field(repr=False)
    latent_marginal_var: np.ndarray = field(repr=False)
    eta_mean: np.ndarray = field(repr=False)
    eta_var: np.ndarray = field(repr=False)
    pred_mean: np.ndarray = field(repr=False)
    pred_var: np.ndarray = field(repr=False)
    log_marginal: float = 0.0
    log_posterior: float = 0.0
    n_iter: int = 0
    n_eval: int = 0
    marginals: str = "plugin"
    y: np.ndarray = field(default=None, repr=False)

    @property
    def hyper(self):
        return self.spec.describe(self.theta_mode)

    def latent(self, name):
        """(mean, variance) of one effect's nodes."""
        sl = self.spec.latent_slices()[name]
        return self.mu[sl], self.latent_marginal_var[sl]

    def interval(self, z=1.96, predictive=True):
        var = self.pred_var if predictive else self.eta_var
        sd = np.sqrt(var)
        return self.eta_mean - z * sd, self.eta_mean + z * sd


def _summaries(spec, post):
    mu = post.mu
    factor = post.factor
    latent_var = marginal_variances(factor)
    eta_mean = spec.A @ mu + spec.offset
    eta_var = linear_predictor_variance(factor, spec.A)
    return mu, latent_var, eta_mean, eta_var


def _hessian(f, x, h=0.05):
    d = len(x)
    H = np.empty((d, d))
    f0 = f(x)
    for i in range(d):
        ei = np.zeros(d)
        ei[i] = h
        H[i, i] = (f(x + ei) - 2 * f0 + f(x - ei)) / h**2
        for j in range(i):
            ej = np.zeros(d)
            ej[j] = h
            H[i, j] = H[j, i] = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (4 * h * h)
    return H


def hyper_design(spec, y, theta_mode, max_z=2.0):
    """Integration points around the mode in standardized hyperparameter space.

    Returns ``(thetas, weights)``; a full grid of z in {-2..2} per axis for up
    to two hyperparameters, axis points otherwise.
    """
    def neg(th):
        return -log_posterior_theta(spec, th, y)

    H = _hessian(neg, np.asarray(theta_mode, dtype=float))
    vals, vecs = np.linalg.eigh(H)
    vals = np.maximum(vals, 1e-6)
    scale = vecs / np.sqrt(vals)[None, :]
    d = len(theta_mode)
    zs = np.arange(-max_z, max_z + 0.5, 1.0)
    if d <= 2:
        grid = np.array(np.meshgrid(*[zs] * d)).reshape(d, -1).T
    else:
        grid = [np.zeros(d)]
        for k in range(d):
            for z in zs:
                if z != 0:
                    e = np.zeros(d)
                    e[k] = z
                    grid.append(e)
        grid = np.array(grid)
    thetas = theta_mode[None, :] + grid @ scale.T
    lp = np.array([log_posterior_theta(spec, th, y) for th in thetas])
    ok = np.isfinite(lp)
    w = np.exp(lp[ok] - lp[ok].max())
    return thetas[ok], w / w.sum()


def fit(spec, y, init=None, step=0.5, marginals="plugin"):
    """Hyperparameter mode, conditional posterior at the mode and summaries.

    ``marginals="plugin"`` reports variances at the mode (empirical Bayes).
    ``marginals="integrated"`` mixes the Gaussian conditionals over a small
    design around the mode, which adds the spread of the conditional means
    across hyperparameter values to latent and linear-predictor variances.
    ``mu`` and ``Q_post`` always refer to the mode.
    """
    y = _as_y(spec, y)
    mode = optimize_hyper(spec, y, init, step=step)
    post = _posterior(spec, mode.theta, y)
    mu, latent_var, eta_mean, eta_var = _summaries(spec, post)
    if marginals == "integrated":
        thetas, weights = hyper_design(spec, y, mode.theta)
        m1 = np.zeros_like(mu)
        m2 = np.zeros_like(mu)
        e1 = np.zeros_like(eta_mean)
        e2 = np.zeros_like(eta_mean)
        for th, wk in zip(thetas, weights):
            p = _posterior(spec, th, y)
            mk, vk, ek, evk = _summaries(spec, p)
            m1 += wk * mk
            m2 += wk * (vk + mk**2)
            e1 += wk * ek
            e2 += wk * (evk + ek**2)
        latent_var = np.maximum(m2 - m1**2, 1e-300)
        eta_var = np.maximum(e2 - e1**2, 1e-300)
    elif marginals != "plugin":
        raise ValueError(f"unknown marginals mode {marginals!r}")
    obs_var = spec.obs_variance(mode.theta)
    return LgmFit(spec, mode.theta, mu, post.Q_post, post.factor, latent_var,
                  eta_mean, eta_var, eta_mean.copy(), eta_var + obs_var,
                  _log_marginal(post), mode.log_posterior, mode.n_iter, mode.n_eval, marginals, y)
