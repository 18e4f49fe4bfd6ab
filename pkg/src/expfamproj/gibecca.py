"""Alternating Gibbs / Metropolis-Hastings sampler over (Theta, U, V).

Each sweep has two stages.  First, with Theta held fixed and treated as
data, one conjugate Gibbs sweep of the all-Gaussian factor model

    Theta_n ~ N(u_n V, diag residual),   u ~ N(0, diag var_u),
    free V entries ~ N(0, var_v per row)

updates U, V and (optionally) the variances, all in closed form.  Second,
Theta itself is refreshed row by row: a proposal row is drawn from the
Gaussian predictive N(u_{S,n} V_S, Sigma) where Sigma marginalises the
view-specific factors, and each element is accepted with probability

    min(1, [p(x | theta*) a(theta*)^beta] / [p(x | theta) a(theta)^beta]),

rejecting anything outside the family domain.  Unobserved entries carry
no likelihood term and accept whenever in-domain.

Sigma is block-diagonal across views: the view-i block is V_i^T V_i plus
the view's diagonal residual (so the predictive stays positive definite
and matches the Gaussian stage even when a view has no specific factors),
plus a trace-scaled jitter before factorisation.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .chains import Chain
from .model import (BlockLayout, ConfigError, FactorState, LayoutError,
                    ObservationSet, log_likelihood_theta)
from .map_infer import _check_obs_layout, moment_matched_row
from .prior import PriorSpec

IG_SHAPE = 1.0   # inverse-gamma hyperprior on variances
IG_SCALE = 1.0
JITTER_REL = 1e-8


class StageError(ValueError):
    """Gaussian stage received a non-finite Theta."""


class ProposalError(RuntimeError):
    """Proposal covariance could not be factorised."""


@dataclass
class GaussianStageState:
    """State of the Gaussian stage: factors, variances, proposal covariance.

    var_u and var_v are the effective per-component variances of the
    Gaussian factor priors (the spec's sigma divided by gamma); resid holds
    one residual variance per view.  sigma / sigma_chol describe the
    Theta-row proposal and are rebuilt at the end of every sweep.
    """

    u: np.ndarray
    v: np.ndarray
    var_u: np.ndarray
    var_v: np.ndarray
    resid: np.ndarray
    sigma: np.ndarray = None
    sigma_chol: np.ndarray = field(default=None, repr=False)


def _col_resid(layout: BlockLayout, resid):
    out = np.empty(layout.d_total)
    for i in range(layout.n_views):
        out[layout.cols_view[i]] = resid[i]
    return out


def _inv_gamma(rng, shape, scale):
    return scale / rng.gamma(shape)


def _sample_mvn_rows(mean, prec_chol, rng):
    """Rows ~ N(mean_row, P^{-1}) given the lower Cholesky factor of P."""
    z = rng.standard_normal(mean.shape)
    return mean + linalg.solve_triangular(prec_chol, z.T, lower=True,
                                          trans="T").T


def build_sigma(stage: GaussianStageState, layout: BlockLayout):
    """Block-diagonal proposal covariance and its Cholesky factor.

    Per view: V_i^T V_i over the view's columns plus the view residual on
    the diagonal; views never mix.  Jitter of 1e-8 * trace/D keeps the
    factorisation positive definite when specific blocks are rank
    deficient.
    """
    d = layout.d_total
    sigma = np.zeros((d, d))
    for i in range(layout.n_views):
        cols = layout.cols_view[i]
        v_spec = stage.v[layout.rows_view[i], cols]
        if v_spec.shape[0]:
            sigma[cols, cols] += v_spec.T @ v_spec
        idx = np.arange(d)[cols]
        sigma[idx, idx] += stage.resid[i]
    jitter = JITTER_REL * np.trace(sigma) / d
    sigma[np.diag_indices(d)] += jitter
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise ProposalError(f"proposal covariance not PD: {exc}") from exc
    return sigma, chol


def init_gaussian_stage(layout: BlockLayout, spec: PriorSpec, n_rows,
                        rng: np.random.Generator, resid_init=1.0,
                        fix_v=None) -> GaussianStageState:
    """Fresh stage state with factors drawn at the prior scales."""
    if spec.gamma > 0:
        su, sv = spec.sigmas(layout)
        var_u, var_v = su / spec.gamma, sv / spec.gamma
    else:
        var_u = np.full(layout.k_total, np.inf)
        var_v = np.full(layout.k_total, np.inf)
    sd_u = np.sqrt(np.minimum(var_u, 1.0))
    sd_v = np.sqrt(np.minimum(var_v, 1.0))
    u = sd_u * rng.standard_normal((n_rows, layout.k_total))
    if fix_v is not None:
        v = np.asarray(fix_v, dtype=float).copy()
    else:
        v = sd_v[:, None] * rng.standard_normal((layout.k_total,
                                                 layout.d_total))
        v[layout.zero_mask] = 0.0
    resid = np.full(layout.n_views, float(resid_init))
    stage = GaussianStageState(u, v, var_u, var_v, resid)
    stage.sigma, stage.sigma_chol = build_sigma(stage, layout)
    return stage


def gibbs_gaussian_stage(theta: np.ndarray, layout: BlockLayout,
                         stage: GaussianStageState, rng: np.random.Generator,
                         sample_v=True, infer_variances=True
                         ) -> GaussianStageState:
    """One conjugate Gibbs sweep of the Gaussian factor model on Theta.

    Update order is fixed: U rows first (conditioned on the incoming V and
    variances), then free V rows per view, then component variances and
    per-view residuals, then the proposal covariance.  Masked V entries
    are never touched.  Returns a new state; the input is not modified.
    """
    if not np.all(np.isfinite(theta)):
        raise StageError("theta contains non-finite entries")
    n, d = theta.shape
    k = layout.k_total
    if theta.shape[1] != layout.d_total or stage.u.shape != (n, k):
        raise StageError(f"theta shape {theta.shape} does not match the "
                         f"stage ({stage.u.shape[0]} x {layout.d_total})")

    v = stage.v.copy()
    var_u = stage.var_u.copy()
    var_v = stage.var_v.copy()
    resid = stage.resid.copy()
    r_col = _col_resid(layout, resid)

    # U | theta, V: shared precision across rows
    a = v / r_col                                   # K x D, V R^{-1}
    prec = a @ v.T + np.diag(1.0 / var_u)
    chol = np.linalg.cholesky(prec)
    mean = linalg.cho_solve((chol, True), a @ theta.T).T
    u = _sample_mvn_rows(mean, chol, rng)

    # free V rows per view | theta, U
    if sample_v:
        for i in range(layout.n_views):
            cols = layout.cols_view[i]
            # free rows on view i: shared plus the view's own specific block
            rows = np.r_[np.arange(layout.ranks[0]),
                         np.arange(k)[layout.rows_view[i]]]
            a_blk = u[:, rows]
            prec_v = a_blk.T @ a_blk / resid[i] + np.diag(1.0 / var_v[rows])
            chol_v = np.linalg.cholesky(prec_v)
            mean_v = linalg.cho_solve((chol_v, True),
                                      a_blk.T @ theta[:, cols] / resid[i])
            v[np.ix_(rows, np.arange(d)[cols])] = \
                _sample_mvn_rows(mean_v.T, chol_v, rng).T

    if infer_variances:
        finite_u = np.isfinite(var_u)
        ssq_u = np.sum(u * u, axis=0)
        for j in np.flatnonzero(finite_u):
            var_u[j] = _inv_gamma(rng, IG_SHAPE + 0.5 * n,
                                  IG_SCALE + 0.5 * ssq_u[j])
        if sample_v:
            free = ~layout.zero_mask
            ssq_v = np.sum(np.where(free, v, 0.0) ** 2, axis=1)
            n_free = free.sum(axis=1)
            for j in np.flatnonzero(np.isfinite(var_v)):
                var_v[j] = _inv_gamma(rng, IG_SHAPE + 0.5 * n_free[j],
                                      IG_SCALE + 0.5 * ssq_v[j])
        fit = u @ v
        for i in range(layout.n_views):
            cols = layout.cols_view[i]
            err = theta[:, cols] - fit[:, cols]
            resid[i] = _inv_gamma(rng, IG_SHAPE + 0.5 * err.size,
                                  IG_SCALE + 0.5 * float(np.sum(err * err)))

    new = GaussianStageState(u, v, var_u, var_v, resid)
    new.sigma, new.sigma_chol = build_sigma(new, layout)
    return new


def propose_theta_rows(stage: GaussianStageState, layout: BlockLayout,
                       rng: np.random.Generator) -> np.ndarray:
    """Row n ~ N(u_{S,n} V_S, Sigma), independent across rows."""
    if stage.sigma_chol is None:
        raise ProposalError("stage has no factorised proposal covariance")
    k_s = layout.ranks[0]
    mean = stage.u[:, :k_s] @ stage.v[:k_s, :]
    z = rng.standard_normal(mean.shape)
    return mean + z @ stage.sigma_chol.T


def mh_accept_elements(obs: ObservationSet, theta_old: np.ndarray,
                       theta_star: np.ndarray, spec: PriorSpec,
                       rng: np.random.Generator):
    """Element-wise MH accept/reject of the proposed Theta.

    Returns (theta_new, accepted_mask).  Out-of-domain proposals are
    always rejected; unobserved entries have no likelihood term and accept
    whenever the proposal is in-domain.
    """
    log_r = np.zeros_like(theta_old)
    in_dom = np.ones(theta_old.shape, dtype=bool)
    for i, fam in enumerate(obs.families):
        cols = obs.view_cols(i)
        old = theta_old[:, cols]
        star = theta_star[:, cols]
        dom = fam.in_domain(star)
        in_dom[:, cols] = dom
        safe = np.where(dom, star, old)
        x_blk = obs.x[:, cols]
        delta = np.where(obs.observed[:, cols],
                         fam.log_pdf_unchecked(x_blk, safe)
                         - fam.log_pdf_unchecked(x_blk, old), 0.0)
        if spec.beta > 0:
            hyp = spec.hyper_for_view(i)
            delta = delta + spec.beta * (hyp.lam * (safe - old)
                                         - hyp.nu * (fam._g(safe)
                                                     - fam._g(old)))
        log_r[:, cols] = delta
    accept = in_dom & (np.log(rng.random(theta_old.shape)) < log_r)
    return np.where(accept, theta_star, theta_old), accept


def init_theta(obs: ObservationSet, layout: BlockLayout,
               rng: np.random.Generator) -> np.ndarray:
    """Moment-matched starting Theta, in-domain for every family.

    Columns start at the moment-matched natural parameter of their column
    mean; Poisson and Gaussian entries use the entrywise match where
    observed (log(x + 0.5) and x respectively); Bernoulli columns get
    small noise so identical columns do not start perfectly tied.
    """
    theta = np.tile(moment_matched_row(obs, layout), (obs.n_rows, 1))
    for i, fam in enumerate(layout.families):
        cols = layout.cols_view[i]
        x_blk, m_blk = obs.x[:, cols], obs.observed[:, cols]
        if fam.name == "poisson":
            theta[:, cols] = np.where(m_blk, np.log(x_blk + 0.5),
                                      theta[:, cols])
        elif fam.name == "gaussian":
            theta[:, cols] = np.where(m_blk, x_blk, theta[:, cols])
        elif fam.name == "bernoulli":
            theta[:, cols] += 0.1 * rng.standard_normal(x_blk.shape)
        elif fam.name == "exponential":
            theta[:, cols] = np.minimum(theta[:, cols], -1e-6)
    return theta


@dataclass
class GibeccaOptions:
    n_samples: int = 500
    burn_in: int = 500
    thin: int = 1
    seed: int = 0
    infer_hypers: bool = True
    resid_init: float = 1.0
    fix_v: np.ndarray = None
    initial_theta: np.ndarray = None


def run_gibecca(obs: ObservationSet, layout: BlockLayout, spec: PriorSpec,
                opts: GibeccaOptions = None) -> Chain:
    """Alternating sampler; returns a Chain carrying (U, V) and Theta.

    The conjugate hyperparameters (lam, nu) and beta stay fixed
    throughout; with infer_hypers the Gaussian-stage variances and
    residuals are Gibbs-updated each sweep, otherwise they stay at the
    spec's values (divided by gamma) and resid_init.
    """
    opts = opts or GibeccaOptions()
    if layout.model_kind == "sepca":
        raise LayoutError("the alternating sampler supports epca, epls and "
                          "ecca layouts (no likelihood weighting)")
    spec.validate_for(layout)
    _check_obs_layout(obs, layout)
    if opts.infer_hypers and spec.gamma <= 0:
        raise ConfigError("variance inference needs gamma > 0")
    rng = np.random.default_rng(np.random.SeedSequence([opts.seed, 23]))

    if opts.initial_theta is not None:
        theta = np.asarray(opts.initial_theta, dtype=float).copy()
    else:
        theta = init_theta(obs, layout, rng)
    stage = init_gaussian_stage(layout, spec, obs.n_rows, rng,
                                opts.resid_init, opts.fix_v)

    n_total = opts.burn_in + opts.n_samples * opts.thin
    states, thetas, wall, loglik = [], [], [], []
    var_u_trace, var_v_trace, resid_trace = [], [], []
    n_acc = 0
    n_tot = 0
    t0 = time.perf_counter()
    prev_t = 0.0

    for sweep in range(n_total):
        stage = gibbs_gaussian_stage(theta, layout, stage, rng,
                                     sample_v=opts.fix_v is None,
                                     infer_variances=opts.infer_hypers)
        theta_star = propose_theta_rows(stage, layout, rng)
        theta, accepted = mh_accept_elements(obs, theta, theta_star, spec,
                                             rng)
        n_acc += int(accepted.sum())
        n_tot += accepted.size

        if sweep >= opts.burn_in and (sweep - opts.burn_in) % opts.thin == 0:
            states.append(FactorState(stage.u.copy(), stage.v.copy()))
            thetas.append(theta.copy())
            t = time.perf_counter() - t0
            t = max(t, prev_t + 1e-9)
            prev_t = t
            wall.append(t)
            loglik.append(log_likelihood_theta(obs, theta, layout))
            var_u_trace.append(stage.var_u.tolist())
            var_v_trace.append(stage.var_v.tolist())
            resid_trace.append(stage.resid.tolist())

    stats = {
        "theta_accept_rate": (n_acc / n_tot) if n_tot else None,
        "var_u_trace": var_u_trace,
        "var_v_trace": var_v_trace,
        "resid_trace": resid_trace,
    }
    meta = {"engine": "gibecca", "seed": opts.seed,
            "n_samples": opts.n_samples, "burn_in": opts.burn_in,
            "thin": opts.thin, "infer_hypers": opts.infer_hypers}
    chain = Chain(states, np.asarray(wall), np.asarray(loglik), None,
                  thetas, stats, meta)
    chain.validate()
    return chain
