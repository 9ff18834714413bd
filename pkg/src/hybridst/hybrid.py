"""Iterative coupling of a latent Gaussian model with a random-forest residual learner.

``run_inla_rf1`` feeds forest predictions of the model residuals back as an
offset (optionally inflating the observation variance by the forest's OOB
error).  ``run_inla_rf2`` instead corrects a chosen set of latent nodes (stress
points) through an extra IID effect and an accumulated offset.  Both stop when
the divergence between consecutive latent posteriors drops below ``delta``.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .forest import ForestConfig, fit_forest, predict
from .gmrf import IidEffect, SeparableStEffect, SpdeEffect
from .lgm import fit
from .sparse import SparseSymMatrix, log_det, trace_product

log = logging.getLogger(__name__)

KLD_VARIANTS = ("conditional_mv", "marginal_avg", "marginal_max")
SELECTIONS = ("latent_marginal_variance", "linear_predictor_rmse")


@dataclass(frozen=True)
class HybridConfig:
    algorithm: str = "RF1"
    propagate_uncertainty: bool = False
    delta: float = 0.01
    max_iter: int = 30
    kld_variant: str = "conditional_mv"
    kld_subset: tuple = None
    k_stress: int = 100
    selection: str = "latent_marginal_variance"
    target_effect: str = None
    marginals: str = "plugin"
    warm_step: float = 0.1
    train_label: str = "train"
    oob_correction: bool = False

    def __post_init__(self):
        if self.algorithm not in ("RF1", "RF2"):
            raise ValueError(f"algorithm must be RF1 or RF2, got {self.algorithm!r}")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.kld_variant not in KLD_VARIANTS:
            raise ValueError(f"kld_variant must be one of {KLD_VARIANTS}")
        if self.selection not in SELECTIONS:
            raise ValueError(f"selection must be one of {SELECTIONS}")
        if self.k_stress < 1:
            raise ValueError("k_stress must be positive")


# ---------------------------------------------------------------------------
# divergences

def kld_gaussian_mv(mu0, Q0_factor, mu1, Q1_factor):
    """``KL(N(mu0, Q0^{-1}) || N(mu1, Q1^{-1}))`` from sparse factors."""
    mu0 = np.asarray(mu0, dtype=float)
    mu1 = np.asarray(mu1, dtype=float)
    if not (mu0.shape == mu1.shape == (Q0_factor.dim,) and Q1_factor.dim == Q0_factor.dim):
        raise ValueError("dimension mismatch between means and factors")
    Q1 = Q1_factor.matrix
    d = mu1 - mu0
    quad = float(d @ (Q1 @ d))
    tr = trace_product(Q1, Q0_factor)
    return 0.5 * (quad + tr - len(d) - log_det(Q1_factor) + log_det(Q0_factor))


def kld_gaussian_uv(m0, v0, m1, v1):
    """Elementwise ``KL(N(m0, v0) || N(m1, v1))``."""
    m0, v0, m1, v1 = (np.asarray(a, dtype=float) for a in (m0, v0, m1, v1))
    if np.any(v0 <= 0) or np.any(v1 <= 0):
        raise ValueError("variances must be positive")
    out = 0.5 * (np.log(v1 / v0) + v0 / v1 + (m1 - m0) ** 2 / v1 - 1.0)
    return out if out.ndim else float(out)


def _marginals(fit_or_pair, n_nodes):
    if isinstance(fit_or_pair, tuple):
        m, v = fit_or_pair
    else:
        m, v = fit_or_pair.mu, fit_or_pair.latent_marginal_var
    n = len(m) if n_nodes is None else n_nodes
    return np.asarray(m)[:n], np.asarray(v)[:n]


def kld_marginal_avg(fit0, fit1, n_nodes=None):
    """Mean over latent nodes of the univariate marginal divergences.

    Arguments are fits or ``(mean, variance)`` pairs; only the first
    ``n_nodes`` nodes are compared when given.
    """
    m0, v0 = _marginals(fit0, n_nodes)
    m1, v1 = _marginals(fit1, n_nodes)
    return float(np.mean(kld_gaussian_uv(m0, v0, m1, v1)))


def kld_marginal_max(fit0, fit1, subset=None, n_nodes=None):
    """Largest univariate marginal divergence over ``subset`` (default all nodes)."""
    m0, v0 = _marginals(fit0, n_nodes)
    m1, v1 = _marginals(fit1, n_nodes)
    idx = np.arange(len(m0)) if subset is None else np.asarray(subset, dtype=np.int64)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= len(m0):
        raise ValueError("subset must be a non-empty set of valid node indices")
    return float(np.max(kld_gaussian_uv(m0[idx], v0[idx], m1[idx], v1[idx])))


def _schur_parts(fit_, J):
    """Blocks of the joint precision split after the first J nodes."""
    Q = fit_.Q_post.csr
    if Q.shape[0] == J:
        return Q, None, None, 0.0
    Qbb = Q[:J, :J]
    Qbc = Q[:J, J:].tocsc()
    Qcc = Q[J:, J:].toarray()
    ld_cc = np.linalg.slogdet(Qcc)[1]
    return Qbb, Qbc, Qcc, ld_cc


def kld_base_marginal(fit0, fit1, J):
    """Multivariate divergence between the marginals of the first J latent nodes.

    Either fit may carry extra trailing nodes (the stress-point correction
    effect); they are integrated out through Schur complements.
    """
    Qbb1, Qbc1, Qcc1, ldcc1 = _schur_parts(fit1, J)
    _, _, _, ldcc0 = _schur_parts(fit0, J)
    d = fit1.mu[:J] - fit0.mu[:J]
    F0 = fit0.factor
    quad = float(d @ (Qbb1 @ d))
    tr = trace_product(SparseSymMatrix.from_scipy(Qbb1), F0)
    if Qbc1 is not None:
        v = Qbc1.T @ d
        quad -= float(v @ np.linalg.solve(Qcc1, v))
        rhs = np.zeros((F0.dim, Qbc1.shape[1]))
        rhs[:J] = Qbc1.toarray()
        S0B = F0.solve(rhs)[:J]
        M = Qbc1.T @ S0B
        tr -= float(np.trace(np.linalg.solve(Qcc1, M)))
    ld_s1 = log_det(fit1.factor) - ldcc1
    ld_s0 = log_det(F0) - ldcc0
    return 0.5 * (quad + tr - J - ld_s1 + ld_s0)


def _divergence(cfg, prev, cur, J):
    if cfg.kld_variant == "conditional_mv":
        if prev.mu.shape == cur.mu.shape and len(cur.mu) == J:
            return kld_gaussian_mv(prev.mu, prev.factor, cur.mu, cur.factor)
        return kld_base_marginal(prev, cur, J)
    if cfg.kld_variant == "marginal_avg":
        return kld_marginal_avg(prev, cur, n_nodes=J)
    return kld_marginal_max(prev, cur, cfg.kld_subset, n_nodes=J)


# ---------------------------------------------------------------------------
# features

def _one_hot(cat):
    levels = np.unique(cat)
    if len(levels) < 2:
        return np.zeros((len(cat), 0)), []
    return np.column_stack([(cat == c).astype(float) for c in levels[1:]]), [f"D{c}" for c in levels[1:]]


def rf1_features(data):
    """Covariates, category indicators, time index and coordinates."""
    D, dnames = _one_hot(data.cat)
    cols = [data.z1, data.z2] + ([D] if D.size else []) + [data.t, data.x, data.y_coord]
    names = ["z1", "z2"] + dnames + ["t", "x", "y"]
    return np.column_stack(cols).astype(float), names


def _drop_constant(X, names, rows):
    keep = np.ptp(X[rows], axis=0) > 0
    if not keep.any():
        keep[0] = True
    return X[:, keep], [n for n, k in zip(names, keep) if k]


@dataclass(eq=False)
class NodeLocator:
    """Time index and coordinates of the nodes of a target effect."""

    t: np.ndarray
    coords: np.ndarray = None

    @property
    def spatial(self):
        return self.coords is not None

    def features(self, nodes):
        nodes = np.asarray(nodes)
        cols = [self.t[nodes]]
        if self.spatial:
            cols += [self.coords[nodes, 0], self.coords[nodes, 1]]
        return np.column_stack(cols).astype(float)


def node_locator(effect):
    if isinstance(effect, SeparableStEffect):
        G = effect.n_space
        k = np.arange(effect.size)
        return NodeLocator(k // G + 1, effect.fem_vertices[k % G])
    if isinstance(effect, SpdeEffect):
        return NodeLocator(np.ones(effect.size, dtype=np.int64), effect.fem_vertices)
    return NodeLocator(np.arange(1, effect.size + 1))


def rf2_row_features(data, spatial):
    cols = [data.t] + ([data.x, data.y_coord] if spatial else [])
    return np.column_stack(cols).astype(float)


# ---------------------------------------------------------------------------
# results

@dataclass(eq=False)
class HybridResult:
    config: HybridConfig
    base_fit: object
    final_fit: object
    trace: list
    rf_last: object
    converged: bool
    pred_mean: np.ndarray
    eta_var: np.ndarray
    obs_var: np.ndarray
    rf_correction: np.ndarray = None
    sigma2_rf: float = float("nan")
    stress_nodes: np.ndarray = None
    mu_c: np.ndarray = None
    tau_c: float = None
    stress_table: dict = field(default=None, repr=False)

    @property
    def n_iter(self):
        return len(self.trace) - 1

    def pred_sd(self, interval="eta"):
        """``eta``: linear-predictor sd; ``predictive``: adds observation noise."""
        if interval == "eta":
            return np.sqrt(self.eta_var)
        if interval == "predictive":
            return np.sqrt(self.eta_var + self.obs_var)
        raise ValueError(f"unknown interval type {interval!r}")


def _train_y(data, cfg):
    y = np.asarray(data.response, dtype=float).copy()
    y[data.split != cfg.train_label] = np.nan
    return y


def _rmse(a, b):
    return float(np.sqrt(np.mean((a - b) ** 2)))


# ---------------------------------------------------------------------------
# INLA-RF1: offset correction

def run_inla_rf1(spec, data, rf_cfg=ForestConfig(), cfg=HybridConfig()):
    """Offset correction of an LGM by a random forest fitted to its residuals.

    Each pass refits the model with the current forest prediction as offset,
    then refits the forest to ``y - A mu`` (the part of the data the latent
    field does not explain).  The correction is the ensemble prediction; with
    ``oob_correction`` training rows get out-of-bag predictions instead.
    """
    if cfg.algorithm != "RF1":
        raise ValueError("run_inla_rf1 needs cfg.algorithm == 'RF1'")
    if len(data) != spec.n:
        raise ValueError(f"dataset has {len(data)} rows, model has {spec.n}")
    y = _train_y(data, cfg)
    train = ~np.isnan(y)
    if not train.any():
        raise ValueError("no training rows")
    X, names = _drop_constant(*rf1_features(data), train)
    base_offset = spec.offset.copy()

    def step2(f, offset):
        latent = f.eta_mean - offset
        resid = y[train] - latent[train]
        forest = fit_forest(X[train], resid, rf_cfg)
        e_rf = predict(forest, X)
        if cfg.oob_correction:
            e_rf[train] = forest.oob_pred
        return forest, e_rf, forest.oob_mse

    base = fit(spec, y, marginals=cfg.marginals)
    forest, e_rf, s2 = step2(base, base_offset)
    trace = [dict(iter=0, d_kl=float("nan"), sigma2_rf=s2, train_rmse=_rmse(y[train], base.eta_mean[train]))]
    prev, converged = base, False
    for i in range(1, cfg.max_iter + 1):
        offset = base_offset + e_rf
        extra = np.full(spec.n, s2) if cfg.propagate_uncertainty else None
        cur_spec = spec.with_changes(offset=offset, extra_obs_variance=extra)
        cur = fit(cur_spec, y, init=prev.theta_mode, step=cfg.warm_step, marginals=cfg.marginals)
        d_kl = _divergence(cfg, prev, cur, spec.J)
        forest, e_rf_new, s2_new = step2(cur, offset)
        trace.append(dict(iter=i, d_kl=d_kl, sigma2_rf=s2_new, train_rmse=_rmse(y[train], cur.eta_mean[train]), theta=cur.theta_mode.tolist()))
        log.info("RF1 iteration %d: D_KL=%.3g sigma2_rf=%.4g", i, d_kl, s2_new)
        prev, e_rf, s2, used_offset = cur, e_rf_new, s2_new, offset
        if d_kl < cfg.delta:
            converged = True
            break
    if not converged:
        log.warning("RF1 stopped at max_iter=%d without reaching delta=%g", cfg.max_iter, cfg.delta)
    final = prev
    pred_mean = final.eta_mean - used_offset + base_offset + e_rf
    eta_var = final.eta_var + (s2 if cfg.propagate_uncertainty else 0.0)
    obs_var = final.pred_var - final.eta_var
    return HybridResult(cfg, base, final, trace, forest, converged, pred_mean, eta_var, obs_var,
                        rf_correction=e_rf, sigma2_rf=s2)


# ---------------------------------------------------------------------------
# INLA-RF2: stress-point correction

def _target(spec, cfg):
    names = [e.name for e in spec.effects]
    name = cfg.target_effect
    if name is None:
        random = [e for e in spec.effects if e.family != "fixed"]
        if not random:
            raise ValueError("model has no random effect to correct")
        name = random[0].name
    if name not in names:
        raise ValueError(f"unknown target effect {name!r}; model has {names}")
    k = names.index(name)
    return spec.blocks[k][0], spec.latent_slices()[name], sp.csc_matrix(spec.blocks[k][1])


def _top_k(score, k):
    # stable sort on -score: ties go to the lower node index
    return np.sort(np.argsort(-score, kind="stable")[:k])


def select_stress_points(fit_, spec, cfg):
    """Indices (within the target effect) of the ``k_stress`` nodes to correct."""
    effect, sl, A_t = _target(spec, cfg)
    if cfg.k_stress > effect.size:
        raise ValueError(f"k_stress={cfg.k_stress} exceeds target effect size {effect.size}")
    if cfg.selection == "latent_marginal_variance":
        score = fit_.latent_marginal_var[sl]
    else:
        y = fit_.y
        if y is None:
            raise ValueError("linear_predictor_rmse selection needs the fitted response")
        r2 = np.where(np.isnan(y), 0.0, (y - fit_.eta_mean) ** 2)
        W = abs(A_t) > 0
        cnt = np.asarray(W.T @ (~np.isnan(y)).astype(float)).ravel()
        sse = np.asarray(W.T @ r2).ravel()
        with np.errstate(invalid="ignore", divide="ignore"):
            score = np.where(cnt > 0, np.sqrt(sse / cnt), -np.inf)
    return _top_k(np.asarray(score, dtype=float), cfg.k_stress)


def representative_rows(A_t, nodes):
    """For each node, the row with the largest projector weight (-1 if none)."""
    A = sp.csc_matrix(A_t)
    out = np.full(len(nodes), -1, dtype=np.int64)
    for i, k in enumerate(nodes):
        lo, hi = A.indptr[k], A.indptr[k + 1]
        if hi > lo:
            out[i] = A.indices[lo + int(np.argmax(np.abs(A.data[lo:hi])))]
    return out


def _stress_summary(f, rows):
    mean = np.full(len(rows), np.nan)
    sd = np.full(len(rows), np.nan)
    ok = rows >= 0
    mean[ok] = f.eta_mean[rows[ok]]
    sd[ok] = np.sqrt(f.eta_var[rows[ok]])
    return mean, sd


def run_inla_rf2(spec, data, rf_cfg=ForestConfig(), cfg=HybridConfig(algorithm="RF2")):
    """Stress-point correction of selected latent nodes.

    The base fit is iteration 0.  Each later pass adds the forest prediction at
    the stress nodes to the accumulated correction ``mu_c`` (delivered as an
    offset on the rows of those nodes) and refits with an IID correction effect
    of precision ``1 / sigma2_rf`` on the same rows.
    """
    if cfg.algorithm != "RF2":
        raise ValueError("run_inla_rf2 needs cfg.algorithm == 'RF2'")
    if len(data) != spec.n:
        raise ValueError(f"dataset has {len(data)} rows, model has {spec.n}")
    y = _train_y(data, cfg)
    train = ~np.isnan(y)
    effect, sl, A_t = _target(spec, cfg)
    locator = node_locator(effect)
    X = rf2_row_features(data, locator.spatial)

    base = fit(spec, y, marginals=cfg.marginals)
    K = select_stress_points(base, spec, cfg)
    A_c = sp.csr_matrix(A_t[:, K])
    X_nodes = locator.features(K)
    J = spec.J

    def step2(f):
        forest = fit_forest(X[train], y[train] - f.eta_mean[train], rf_cfg)
        return forest, predict(forest, X_nodes), forest.oob_mse

    forest, e_rf, s2 = step2(base)
    trace = [dict(iter=0, d_kl=float("nan"), sigma2_rf=s2, train_rmse=_rmse(y[train], base.eta_mean[train]))]
    mu_c = np.zeros(len(K))
    tau_c = None
    prev, converged = base, False
    for i in range(1, cfg.max_iter + 1):
        mu_c = mu_c + e_rf
        tau_c = 1.0 / max(s2, 1e-12)
        corr = IidEffect("stress_correction", len(K), tau=tau_c)
        cur_spec = spec.with_changes(offset=spec.offset + A_c @ mu_c, blocks=list(spec.blocks) + [(corr, A_c)])
        cur = fit(cur_spec, y, init=prev.theta_mode, step=cfg.warm_step, marginals=cfg.marginals)
        d_kl = _divergence(cfg, prev, cur, J)
        forest, e_rf, s2 = step2(cur)
        trace.append(dict(iter=i, d_kl=d_kl, sigma2_rf=s2, train_rmse=_rmse(y[train], cur.eta_mean[train]), theta=cur.theta_mode.tolist()))
        log.info("RF2 iteration %d: D_KL=%.3g sigma2_rf=%.4g", i, d_kl, s2)
        prev = cur
        if d_kl < cfg.delta:
            converged = True
            break
    if not converged:
        log.warning("RF2 stopped at max_iter=%d without reaching delta=%g", cfg.max_iter, cfg.delta)
    final = prev
    rows = representative_rows(A_t, K)
    base_mean, base_sd = _stress_summary(base, rows)
    corr_mean, corr_sd = _stress_summary(final, rows)
    truth = np.full(len(K), np.nan)
    truth[rows >= 0] = data.eta_true[rows[rows >= 0]]
    table = dict(node=K, row=rows, base_mean=base_mean, base_sd=base_sd,
                 corrected_mean=corr_mean, corrected_sd=corr_sd, truth=truth)
    return HybridResult(cfg, base, final, trace, forest, converged, final.eta_mean.copy(), final.eta_var.copy(),
                        final.pred_var - final.eta_var, sigma2_rf=s2, stress_nodes=K, mu_c=mu_c,
                        tau_c=tau_c, stress_table=table)
