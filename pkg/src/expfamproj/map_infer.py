"""MAP fitting, fold-in prediction and hyperparameter selection.

The MAP objective is the negative unnormalised log posterior

    f(U, V) = -[ log_likelihood(X; U V) + log a(UV)^beta b(U)^gamma c(V)^gamma ]

minimised by conjugate gradients over the free coordinates (all of U, the
unmasked entries of V, and the mean row when the layout has one).  The
likelihood and the conjugate prior term are fused into one pass that fills
full N x D buffers blockwise and reduces them with a single sum each, so
that a two-view layout with unit alpha produces bit-identical numbers to
the equivalent single-view layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .model import (BlockLayout, ConfigError, FactorState, LayoutError,
                    ObservationSet, assemble_theta, log_pdf_sum_at)
from .optimize import minimize_cg
from .prior import PriorSpec, col_conj_params, gaussian_block_terms


class FitError(RuntimeError):
    """No restart produced a finite objective."""


class FoldInError(RuntimeError):
    """Fold-in optimisation left the feasible region."""


# ---------------------------------------------------------------------------
# flat parameter vector

class FreeParams:
    """Bijection between a FactorState and a flat vector of free coordinates.

    The fixed parts (masked V entries, and V / mean row entirely when
    frozen) are taken from the template state given at construction.
    """

    def __init__(self, layout: BlockLayout, template: FactorState,
                 fix_v=False, fix_mean=False):
        self.layout = layout
        self.template = template.copy()
        self.n_rows = template.u.shape[0]
        self.fix_v = bool(fix_v)
        self.with_mean = bool(layout.use_mean_row and not fix_mean)
        self.v_free_idx = np.flatnonzero(~layout.zero_mask.ravel())
        self.n_u = self.n_rows * layout.k_total
        self.n_v = 0 if self.fix_v else self.v_free_idx.size
        self.n_mean = layout.d_total if self.with_mean else 0
        self.size = self.n_u + self.n_v + self.n_mean

    def pack(self, state: FactorState) -> np.ndarray:
        parts = [state.u.ravel()]
        if not self.fix_v:
            parts.append(state.v.ravel()[self.v_free_idx])
        if self.with_mean:
            parts.append(state.mean_row)
        return np.concatenate(parts)

    def unpack(self, x: np.ndarray) -> FactorState:
        k, d = self.layout.k_total, self.layout.d_total
        u = x[:self.n_u].reshape(self.n_rows, k)
        if self.fix_v:
            v = self.template.v
        else:
            v = np.zeros((k, d))
            v.ravel()[self.v_free_idx] = x[self.n_u:self.n_u + self.n_v]
        if self.with_mean:
            mean = x[self.n_u + self.n_v:]
        else:
            mean = self.template.mean_row
        return FactorState(u, v, mean)

    def pack_grad(self, grad_u, grad_v, grad_mean) -> np.ndarray:
        parts = [grad_u.ravel()]
        if not self.fix_v:
            parts.append(grad_v.ravel()[self.v_free_idx])
        if self.with_mean:
            parts.append(grad_mean)
        return np.concatenate(parts)


# ---------------------------------------------------------------------------
# fused posterior value and gradient

def posterior_logp_and_grad(state: FactorState, obs: ObservationSet,
                            layout: BlockLayout, spec: PriorSpec,
                            want_grad=True):
    """Unnormalised log posterior and its gradients wrt (U, V, mean_row).

    Returns (logp, grad_u, grad_v, grad_mean); the gradients are None when
    logp is -inf (out-of-domain Theta with beta > 0) or want_grad is False.
    Infeasible points report -inf instead of raising so that line searches
    and MH steps can treat them as rejections.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        return _logp_and_grad_raw(state, obs, layout, spec, want_grad)


def _logp_and_grad_raw(state, obs, layout, spec, want_grad):
    theta = assemble_theta(state, layout)
    col_alpha = layout.col_alpha()
    beta, gamma = spec.beta, spec.gamma
    if beta > 0:
        lam_col, nu_col = col_conj_params(spec, layout)

    contrib = np.empty_like(theta)   # per-entry log terms, filled blockwise
    w = np.empty_like(theta) if want_grad else None  # d logp / d theta
    for i, fam in enumerate(layout.families):
        cols = layout.cols_view[i]
        block = theta[:, cols]
        if not np.all(fam.in_domain(block)):
            return -np.inf, None, None, None
        g = fam._g(block)
        mu = fam._gprime(block)
        x_blk = obs.x[:, cols]
        m_blk = obs.observed[:, cols]
        ll = np.where(m_blk, x_blk * block + fam._h(x_blk) - g, 0.0)
        ll = ll * col_alpha[cols]
        if beta > 0:
            ll = ll + beta * (lam_col[cols] * block - nu_col[cols] * g)
        contrib[:, cols] = ll
        if want_grad:
            wb = np.where(m_blk, x_blk - mu, 0.0) * col_alpha[cols]
            if beta > 0:
                wb = wb + beta * (lam_col[cols] - nu_col[cols] * mu)
            w[:, cols] = wb

    logp = float(np.sum(contrib))
    grad_u = grad_v = grad_mean = None
    if want_grad:
        grad_u = w @ state.v.T
        grad_v = state.u.T @ w
        if layout.use_mean_row:
            grad_mean = w.sum(axis=0)

    if gamma > 0:
        log_b, log_c = gaussian_block_terms(state, spec, layout)
        logp += gamma * (log_b + log_c)
        if want_grad:
            su, sv = spec.sigmas(layout)
            grad_u = grad_u - gamma * state.u / su
            grad_v = grad_v - gamma * state.v / sv[:, None]

    if not np.isfinite(logp):
        # overflow inside g (e.g. huge Poisson rates) counts as infeasible
        return -np.inf, None, None, None
    if want_grad:
        grad_v[layout.zero_mask] = 0.0
        if not (np.all(np.isfinite(grad_u)) and np.all(np.isfinite(grad_v))
                and (grad_mean is None or np.all(np.isfinite(grad_mean)))):
            return -np.inf, None, None, None
    return logp, grad_u, grad_v, grad_mean


def objective_value_and_grad(state, obs, layout, spec):
    """Negative log posterior and gradients, +inf when infeasible."""
    logp, gu, gv, gm = posterior_logp_and_grad(state, obs, layout, spec)
    if not np.isfinite(logp):
        return np.inf, None, None, None
    return -logp, -gu, -gv, (None if gm is None else -gm)


def _make_fun_and_grad(obs, layout, spec, free: FreeParams):
    zeros = np.zeros(free.size)

    def fun_and_grad(x):
        state = free.unpack(x)
        logp, gu, gv, gm = posterior_logp_and_grad(state, obs, layout, spec)
        if not np.isfinite(logp):
            return np.inf, zeros
        return -logp, -free.pack_grad(gu, gv, gm if gm is not None
                                      else np.zeros(layout.d_total))

    return fun_and_grad


# ---------------------------------------------------------------------------
# initialisation

def moment_matched_row(obs: ObservationSet, layout: BlockLayout) -> np.ndarray:
    """Per-column natural parameter matched to the column means.

    Keeps the initial Theta inside the family domain, which matters for
    families with a restricted domain (the exponential family's half-line).
    """
    d = layout.d_total
    row = np.zeros(d)
    for i, fam in enumerate(layout.families):
        cols = layout.cols_view[i]
        x_blk, m_blk = obs.x[:, cols], obs.observed[:, cols]
        n_obs = np.maximum(m_blk.sum(axis=0), 1)
        xbar = np.where(m_blk, x_blk, 0.0).sum(axis=0) / n_obs
        if fam.name == "bernoulli":
            p = (xbar * n_obs + 1.0) / (n_obs + 2.0)  # add-one smoothing
            col = special.logit(p)
        elif fam.name == "poisson":
            col = np.log(xbar + 0.5)
        elif fam.name == "exponential":
            col = -1.0 / (xbar + 1e-8)
            col = np.maximum(col, -1e6)
        else:
            col = xbar
        row[cols] = col
    return row


def init_state(obs: ObservationSet, layout: BlockLayout,
               rng: np.random.Generator, init_std=0.01) -> FactorState:
    """Small random factors; the mean row starts at the moment-matched point."""
    n, k, d = obs.n_rows, layout.k_total, layout.d_total
    u = init_std * rng.standard_normal((n, k))
    v = init_std * rng.standard_normal((k, d))
    v[layout.zero_mask] = 0.0
    mean = moment_matched_row(obs, layout) if layout.use_mean_row else None
    return FactorState(u, v, mean)


# ---------------------------------------------------------------------------
# MAP fitting

@dataclass
class MapOptions:
    max_iter: int = 2000
    grad_tol: float = None     # default 1e-5 * sqrt(N * D)
    restarts: int = 1
    init_std: float = 0.01
    seed: int = 0


@dataclass
class MapFit:
    state: FactorState
    objective: float
    converged: bool
    status: str
    n_iter: int
    trace: list
    restart_objectives: list = field(default_factory=list)


def _check_obs_layout(obs: ObservationSet, layout: BlockLayout):
    if obs.view_widths != layout.view_widths:
        raise LayoutError(f"data views {obs.view_widths} do not match layout "
                          f"views {layout.view_widths}")
    if tuple(f.name for f in obs.families) != tuple(f.name for f in layout.families):
        raise LayoutError("data families do not match layout families")


def fit_map(obs: ObservationSet, layout: BlockLayout, spec: PriorSpec,
            opts: MapOptions = None) -> MapFit:
    """Best MAP fit over random restarts.

    Each restart draws its own initial state from a child seed of
    opts.seed, so runs are reproducible and restarts independent.  Raises
    FitError when every restart starts (and therefore stays) infeasible.
    """
    opts = opts or MapOptions()
    spec.validate_for(layout)
    _check_obs_layout(obs, layout)
    grad_tol = opts.grad_tol
    if grad_tol is None:
        grad_tol = 1e-5 * math.sqrt(obs.n_rows * layout.d_total)

    best = None
    restart_objectives = []
    for r in range(opts.restarts):
        rng = np.random.default_rng(np.random.SeedSequence([opts.seed, r]))
        state0 = init_state(obs, layout, rng, opts.init_std)
        free = FreeParams(layout, state0)
        fun = _make_fun_and_grad(obs, layout, spec, free)
        try:
            res = minimize_cg(fun, free.pack(state0), grad_tol, opts.max_iter)
        except ValueError:
            restart_objectives.append(np.inf)
            continue
        restart_objectives.append(res.fun)
        if best is None or res.fun < best[0].fun:
            best = (res, free)
    if best is None:
        raise FitError("all restarts started outside the feasible region")
    res, free = best
    return MapFit(free.unpack(res.x), res.fun, res.converged, res.status,
                  res.n_iter, res.trace, restart_objectives)


# ---------------------------------------------------------------------------
# fold-in prediction for new rows

@dataclass
class Prediction:
    means: np.ndarray   # view-1 mean parameters, one row per test row
    u: np.ndarray       # folded-in factor rows


def predict_target(obs_test: ObservationSet, state: FactorState,
                   layout: BlockLayout, spec: PriorSpec,
                   opts: MapOptions = None) -> Prediction:
    """Predict view-1 mean parameters for rows with only view 2 observed.

    Folds each test row in by a MAP fit of its full factor row u against
    the row's observed view-2 entries and the Gaussian prior b(u), with V
    (and the mean row) fixed at the training fit.  All rows are optimised
    jointly; the objective is separable across them.  The conjugate term
    a(.) is not applied at fold-in time.
    """
    opts = opts or MapOptions()
    _check_obs_layout(obs_test, layout)
    if layout.n_views != 2:
        raise LayoutError("fold-in prediction needs a two-view layout")

    mask2 = np.zeros_like(obs_test.observed)
    cols2 = layout.cols_view[1]
    mask2[:, cols2] = obs_test.observed[:, cols2]
    obs2 = obs_test.with_mask(mask2)

    n_test, k = obs_test.n_rows, layout.k_total
    rng = np.random.default_rng(np.random.SeedSequence([opts.seed, 17]))
    u0 = opts.init_std * rng.standard_normal((n_test, k))
    template = FactorState(u0, state.v, state.mean_row)
    free = FreeParams(layout, template, fix_v=True, fix_mean=True)
    spec_fold = spec.replace(beta=0.0, gamma=spec.gamma)
    fun = _make_fun_and_grad(obs2, layout, spec_fold, free)

    grad_tol = opts.grad_tol
    if grad_tol is None:
        grad_tol = 1e-5 * math.sqrt(n_test * layout.d_total)
    try:
        res = minimize_cg(fun, free.pack(template), grad_tol, opts.max_iter)
    except ValueError as exc:
        raise FoldInError(f"fold-in started infeasible: {exc}") from exc
    if not np.all(np.isfinite(res.x)):
        raise FoldInError("fold-in produced non-finite factor rows")

    fitted = free.unpack(res.x)
    theta = assemble_theta(fitted, layout)
    cols1 = layout.cols_view[0]
    means = layout.families[0]._gprime(theta[:, cols1])
    return Prediction(np.asarray(means, dtype=float), fitted.u)


# ---------------------------------------------------------------------------
# two-stage cross-validated hyperparameter selection

DEFAULT_A_GRID = ((0.05, 0.1), (0.1, 0.2), (0.25, 0.5), (0.5, 1.0), (1.0, 2.0))
DEFAULT_BC_GRID = ((0.001, 100.0), (0.01, 10.0), (0.1, 1.0), (1.0, 1.0),
                   (1.0, 100.0))


def _fold_masks(observed: np.ndarray, folds: int, rng: np.random.Generator):
    """Split the observed entries into `folds` disjoint held-out masks."""
    idx = np.flatnonzero(observed.ravel())
    rng.shuffle(idx)
    masks = []
    for part in np.array_split(idx, folds):
        m = np.zeros(observed.size, dtype=bool)
        m[part] = True
        masks.append(m.reshape(observed.shape))
    return masks


def _cv_score(obs, layout, spec, fold_masks, opts):
    """Summed held-out log-likelihood over CV folds for one candidate spec."""
    total = 0.0
    for fold in fold_masks:
        train = obs.with_mask(obs.observed & ~fold)
        try:
            fit = fit_map(train, layout, spec, opts)
        except FitError:
            return -np.inf
        theta = assemble_theta(fit.state, layout)
        try:
            total += log_pdf_sum_at(obs, theta, layout, fold)
        except Exception:
            return -np.inf
    return total


def cv_select_hyperparams(obs: ObservationSet, layout: BlockLayout, beta,
                          a_grid=None, bc_grid=None, folds=10, seed=0,
                          opts: MapOptions = None) -> PriorSpec:
    """Pick prior hyperparameters by two-stage cross-validation.

    Stage one scores the conjugate hyperparameters (lam, nu) with the prior
    collapsed to a alone (beta = 1, gamma = 0); stage two scores the
    Gaussian variances (sigma_u, sigma_v) with the prior collapsed to the
    Gaussian blocks (beta = 0, gamma = 1).  Both stages reuse one random
    entry partition and score by held-out log-likelihood of MAP fits.  The
    returned spec carries the winning values at the requested beta with
    gamma = 1 - beta.
    """
    from .expfam import ConjugateHyper

    a_grid = tuple(a_grid) if a_grid is not None else DEFAULT_A_GRID
    bc_grid = tuple(bc_grid) if bc_grid is not None else DEFAULT_BC_GRID
    if not a_grid or not bc_grid:
        raise ConfigError("hyperparameter grids must be non-empty")
    opts = opts or MapOptions(max_iter=500)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    fold_masks = _fold_masks(obs.observed, folds, rng)

    best_a, best_a_score = a_grid[0], -np.inf
    if beta > 0:
        for lam, nu in a_grid:
            cand = PriorSpec(beta=1.0, a_hyper=ConjugateHyper(lam, nu),
                             sigma_u=1.0, sigma_v=1.0)
            try:
                cand.validate_for(layout)
            except ValueError:
                continue
            score = _cv_score(obs, layout, cand, fold_masks, opts)
            if score > best_a_score:
                best_a, best_a_score = (lam, nu), score

    best_bc, best_bc_score = bc_grid[0], -np.inf
    for su, sv in bc_grid:
        cand = PriorSpec(beta=0.0, a_hyper=ConjugateHyper(*best_a),
                         sigma_u=su, sigma_v=sv)
        score = _cv_score(obs, layout, cand, fold_masks, opts)
        if score > best_bc_score:
            best_bc, best_bc_score = (su, sv), score

    return PriorSpec(beta=float(beta), a_hyper=ConjugateHyper(*best_a),
                     sigma_u=best_bc[0], sigma_v=best_bc[1])
