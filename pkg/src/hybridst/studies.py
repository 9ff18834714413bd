"""Model builders and experiment runners for the two simulated designs."""

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .forest import ForestConfig
from .gmrf import FixedEffects, RandomWalkEffect, SeparableStEffect
from .hybrid import HybridConfig, run_inla_rf1, run_inla_rf2
from .lgm import LgmSpec
from .mesh import build_grid_mesh, fem_matrices, projector
from .metrics import block_layout, contiguous_groups, cv_run, evaluate, st_blocks

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MeshConfig:
    spacing: float = 1.0
    margin: float = 0.3


def domain_of(data):
    if "domain" in data.meta:
        return tuple(data.meta["domain"])
    return float(data.x.max()), float(data.y_coord.max())


def study_mesh(width, height, cfg=MeshConfig()):
    ext = cfg.margin * max(width, height)
    nx = int(np.ceil((width + 2 * ext) / cfg.spacing)) + 1
    ny = int(np.ceil((height + 2 * ext) / cfg.spacing)) + 1
    return build_grid_mesh((0.0, width), (0.0, height), nx, ny, margin=cfg.margin)


def spatiotemporal_model(data, mesh_cfg=MeshConfig(), mesh=None):
    """Linear covariates, category effects and an AR(1) x SPDE field.

    Fixed effects: one coefficient per category (no separate intercept) plus
    ``z1`` and ``z2``.  The Matérn range prior median is a fifth of the
    domain diagonal.
    """
    width, height = domain_of(data)
    if mesh is None:
        mesh = study_mesh(width, height, mesh_cfg)
    fem = fem_matrices(mesh)
    T = int(data.t.max())
    levels = np.unique(data.cat)
    X = np.column_stack([(data.cat == c).astype(float) for c in levels] + [data.z1, data.z2])
    G = mesh.n_vertices
    A_space = projector(mesh, data.coords).tocoo()
    A_st = sp.csr_matrix((A_space.data, (A_space.row, A_space.col + (data.t[A_space.row] - 1) * G)),
                         shape=(len(data), T * G))
    rho0 = float(np.hypot(width, height)) / 5.0
    omega = SeparableStEffect("omega", fem, T, rho0=rho0, sigma0=1.0, vertices=mesh.vertices)
    spec = LgmSpec([(FixedEffects("beta", X.shape[1]), sp.csr_matrix(X)), (omega, A_st)])
    return spec, mesh


def temporal_model(data, order=2):
    """Intercept plus a random walk over the time index."""
    n = len(data)
    T = int(data.t.max())
    A_u = sp.csr_matrix((np.ones(n), (np.arange(n), data.t - 1)), shape=(n, T))
    ones = sp.csr_matrix(np.ones((n, 1)))
    return LgmSpec([(FixedEffects("intercept", 1), ones), (RandomWalkEffect("u", T, order=order), A_u)])


# ---------------------------------------------------------------------------
# experiment runners

@dataclass(eq=False)
class ModelOutcome:
    name: str
    mean: np.ndarray
    sd: np.ndarray
    result: object = field(default=None, repr=False)

    def report(self, data, mask):
        return evaluate(data.response[mask], self.mean[mask], self.sd[mask])


RF1_MODELS = ("INLA", "INLA-RF1.1", "INLA-RF1.2")


def rf1_models(spec, data, rf_cfg=ForestConfig(), hybrid_cfg=HybridConfig(), interval="eta"):
    """Base model, RF1 without and with uncertainty propagation."""
    no_prop = run_inla_rf1(spec, data, rf_cfg, replace(hybrid_cfg, algorithm="RF1", propagate_uncertainty=False))
    prop = run_inla_rf1(spec, data, rf_cfg, replace(hybrid_cfg, algorithm="RF1", propagate_uncertainty=True))
    base = no_prop.base_fit
    base_var = base.eta_var if interval == "eta" else base.pred_var
    return [ModelOutcome("INLA", base.eta_mean, np.sqrt(base_var), base),
            ModelOutcome("INLA-RF1.1", no_prop.pred_mean, no_prop.pred_sd(interval), no_prop),
            ModelOutcome("INLA-RF1.2", prop.pred_mean, prop.pred_sd(interval), prop)]


@dataclass(eq=False)
class StudyResult:
    data: object
    models: list
    metrics: dict  # (model, split) -> MetricReport
    seconds: float
    extra: dict = field(default_factory=dict)


def run_spatiotemporal_study(data, rf_cfg=ForestConfig(), hybrid_cfg=HybridConfig(), mesh_cfg=MeshConfig(),
                             interval="eta"):
    """Train/test comparison of the base model and both RF1 variants."""
    t0 = time.perf_counter()
    spec, _ = spatiotemporal_model(data, mesh_cfg)
    models = rf1_models(spec, data, rf_cfg, hybrid_cfg, interval)
    metrics = {}
    for m in models:
        for split in ("train", "test"):
            mask = data.mask(split)
            if mask.any():
                metrics[(m.name, split)] = m.report(data, mask)
    return StudyResult(data, models, metrics, time.perf_counter() - t0)


def run_temporal_study(data, rf_cfg=ForestConfig(), hybrid_cfg=None):
    """Base RW2 model versus stress-point correction, on all rows and at the stress points."""
    t0 = time.perf_counter()
    if hybrid_cfg is None:
        hybrid_cfg = HybridConfig(algorithm="RF2", target_effect="u", marginals="integrated")
    spec = temporal_model(data)
    res = run_inla_rf2(spec, data, rf_cfg, hybrid_cfg)
    base, final = res.base_fit, res.final_fit
    models = [ModelOutcome("INLA", base.eta_mean, np.sqrt(base.eta_var), base),
              ModelOutcome("INLA-RF2", res.pred_mean, res.pred_sd("eta"), res)]
    tab = res.stress_table
    ok = tab["row"] >= 0
    metrics = {}
    for m in models:
        metrics[(m.name, "full")] = evaluate(data.eta_true, m.mean, m.sd)
    metrics[("INLA", "stress")] = evaluate(tab["truth"][ok], tab["base_mean"][ok], tab["base_sd"][ok])
    metrics[("INLA-RF2", "stress")] = evaluate(tab["truth"][ok], tab["corrected_mean"][ok], tab["corrected_sd"][ok])
    return StudyResult(data, models, metrics, time.perf_counter() - t0)


def cv_blocks(data, n_blocks, seed=0):
    n_groups, k = block_layout(n_blocks)
    return st_blocks(data, contiguous_groups(int(data.t.max()), n_groups), k, seed)


def run_cv_study(data, n_blocks=6, seed=0, rf_cfg=ForestConfig(), hybrid_cfg=HybridConfig(),
                 mesh_cfg=MeshConfig(), interval="eta"):
    """Leave-one-block-out CV of the three RF1-family models.

    Returns ``{model: [CvRow, ...]}``.  Each fold fits one model on the union
    of the training and test rows with test responses hidden, so nothing from
    the held-out block reaches the LGM or the forest.
    """
    blocks = cv_blocks(data, n_blocks, seed)
    width, height = domain_of(data)
    mesh_shared = study_mesh(width, height, mesh_cfg)
    fold_cache = {}

    def fold_outcomes(train, test):
        key = (len(train), float(test.response.sum()))
        if key not in fold_cache:
            both = train.subset(np.ones(len(train), bool))
            combined_cols = {}
            for name in ("x", "y_coord", "t", "response", "z1", "z2", "cat", "eta_true"):
                combined_cols[name] = np.concatenate([getattr(train, name), getattr(test, name)])
            split = np.array(["train"] * len(train) + ["test"] * len(test))
            combined = type(both)(**combined_cols, split=split, meta=dict(data.meta))
            spec, _ = spatiotemporal_model(combined, mesh=mesh_shared)
            outs = rf1_models(spec, combined, rf_cfg, hybrid_cfg, interval)
            n_tr = len(train)
            fold_cache[key] = {o.name: ((o.mean[:n_tr], o.sd[:n_tr]), (o.mean[n_tr:], o.sd[n_tr:])) for o in outs}
        return fold_cache[key]

    out = {}
    for name in RF1_MODELS:
        out[name] = cv_run(data, blocks, lambda tr, te, name=name: fold_outcomes(tr, te)[name])
    return out, blocks
