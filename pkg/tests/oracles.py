"""Dense brute-force references used by the unit and acceptance tests."""

import math

import numpy as np
import scipy.sparse as sp

from hybridst.gmrf import Ar1Effect, FixedEffects, IidEffect, RandomWalkEffect
from hybridst.lgm import LgmSpec


def dense_posterior(spec, theta, y):
    """Conditional mean, covariance and log p(y | theta) from dense algebra.

    The marginal likelihood is evaluated as y_obs ~ N(offset + A m, A S A' + D)
    with the latent prior mean m = 0 and covariance S = Q_prior^-1.
    """
    A = spec.A.toarray()
    Qp = spec.prior_precision(theta).toarray()
    obs = ~np.isnan(y)
    var = np.broadcast_to(spec.obs_variance(theta), (spec.n,))
    Ao = A[obs]
    r = y[obs] - spec.offset[obs]
    W = np.diag(1.0 / var[obs])
    Qpost = Qp + Ao.T @ W @ Ao
    Sigma = np.linalg.inv(Qpost)
    mu = Sigma @ (Ao.T @ W @ r)
    C = Ao @ np.linalg.inv(Qp) @ Ao.T + np.diag(var[obs])
    sign, ld = np.linalg.slogdet(C)
    assert sign > 0
    logml = -0.5 * (ld + r @ np.linalg.solve(C, r) + obs.sum() * math.log(2 * math.pi))
    return mu, Sigma, logml


def random_lgm(rng, max_latent=50):
    """Random Gaussian LGM with a mix of effect families and a random design."""
    n = int(rng.integers(15, 60))
    blocks = []
    budget = max_latent
    p = int(rng.integers(1, 4))
    blocks.append((FixedEffects("beta", p), sp.csr_matrix(rng.normal(size=(n, p)))))
    budget -= p
    kinds = rng.permutation(["iid", "rw1", "rw2", "ar1"])[: int(rng.integers(1, 4))]
    for kind in kinds:
        size = int(rng.integers(4, 13))
        if size > budget:
            break
        budget -= size
        if kind == "iid":
            eff = IidEffect(kind, size)
        elif kind == "ar1":
            eff = Ar1Effect(kind, size)
        else:
            eff = RandomWalkEffect(kind, size, order=int(kind[-1]))
        rows = rng.integers(0, size, size=n)
        A = sp.csr_matrix((rng.uniform(0.5, 1.5, size=n), (np.arange(n), rows)), shape=(n, size))
        blocks.append((eff, A))
    offset = rng.normal(scale=0.5, size=n)
    extra = rng.uniform(0, 0.2, size=n) * (rng.random() < 0.5)
    spec = LgmSpec(blocks, offset=offset, extra_obs_variance=extra)
    theta = spec.initial_theta() + rng.normal(scale=0.5, size=len(spec.theta_names))
    y = offset + rng.normal(size=n)
    y[rng.random(n) < 0.1] = np.nan
    return spec, theta, y


def kld_mv_dense(mu0, S0, mu1, S1):
    """KL(N(mu0, S0) || N(mu1, S1)) from dense covariance matrices."""
    J = len(mu0)
    S1inv = np.linalg.inv(S1)
    d = mu1 - mu0
    return 0.5 * (np.trace(S1inv @ S0) - J + d @ S1inv @ d
                  + np.linalg.slogdet(S1)[1] - np.linalg.slogdet(S0)[1])
