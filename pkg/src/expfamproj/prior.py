"""Composite prior over factor states.

The prior on (U, V) is, up to the conjugate kernel's normaliser,

    a(U V)^beta * b(U)^gamma * c(V)^gamma

where a applies the family's conjugate kernel exp(lam*theta - nu*g(theta))
entrywise to Theta = U V, and b, c are zero-mean Gaussians on the entries
of U and the free (unmasked) entries of V with per-component variances.
beta = 1, gamma = 0 is the pure conjugate prior on Theta; beta = 0,
gamma = 1 is the usual Gaussian factor prior.  The Gaussian terms keep
their full normalising constants because hyperparameter moves need the
dependence on the variances.

For families with a restricted domain the value is -inf whenever beta > 0
and any entry of U V leaves the domain; with beta = 0 the a term (and any
g evaluation) is skipped entirely.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .expfam import LOG_2PI, ConjugateHyper
from .model import BlockLayout, FactorState, assemble_theta


class GradientUndefined(ValueError):
    """Gradient requested at a point where the log prior is -inf."""


@dataclass(frozen=True)
class PriorSpec:
    """Hyperparameters of the composite prior.

    sigma_u and sigma_v are *variances* (per component, scalar broadcasts),
    matching the Gaussian blocks b and c.  a_hyper holds one ConjugateHyper
    per view; a single one broadcasts to all views.  gamma defaults to
    1 - beta.
    """

    beta: float
    a_hyper: tuple
    sigma_u: object = 1.0
    sigma_v: object = 1.0
    gamma: float = None

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if self.gamma is None:
            object.__setattr__(self, "gamma", 1.0 - self.beta)
        if self.gamma < 0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")
        hyp = self.a_hyper
        if isinstance(hyp, ConjugateHyper):
            hyp = (hyp,)
        object.__setattr__(self, "a_hyper", tuple(hyp))
        for s in (np.asarray(self.sigma_u), np.asarray(self.sigma_v)):
            if not np.all(s > 0):
                raise ValueError("prior variances must be positive")

    def hyper_for_view(self, i) -> ConjugateHyper:
        if len(self.a_hyper) == 1:
            return self.a_hyper[0]
        return self.a_hyper[i]

    def sigmas(self, layout: BlockLayout):
        """Variance vectors (sigma_u, sigma_v), each of length K."""
        k = layout.k_total
        su = np.broadcast_to(np.asarray(self.sigma_u, dtype=float), (k,)).copy()
        sv = np.broadcast_to(np.asarray(self.sigma_v, dtype=float), (k,)).copy()
        return su, sv

    def validate_for(self, layout: BlockLayout):
        if len(self.a_hyper) not in (1, layout.n_views):
            raise ValueError(f"need 1 or {layout.n_views} conjugate hypers")
        if self.beta > 0:
            for i, fam in enumerate(layout.families):
                fam.validate_hyper(self.hyper_for_view(i))
        self.sigmas(layout)

    def replace(self, **kw) -> "PriorSpec":
        return replace(self, **kw)


def col_conj_params(spec: PriorSpec, layout: BlockLayout):
    """Per-column (lam, nu) vectors of length D."""
    d = layout.d_total
    lam = np.empty(d)
    nu = np.empty(d)
    for i in range(layout.n_views):
        hyp = spec.hyper_for_view(i)
        lam[layout.cols_view[i]] = hyp.lam
        nu[layout.cols_view[i]] = hyp.nu
    return lam, nu


def _gaussian_logpdf_sum(values_sq_by_comp, n_terms_by_comp, variances):
    # sum over components of  -n/2 log(2 pi s) - ssq / (2 s)
    return float(np.sum(-0.5 * n_terms_by_comp * (LOG_2PI + np.log(variances))
                        - 0.5 * values_sq_by_comp / variances))


def gaussian_block_terms(state: FactorState, spec: PriorSpec,
                         layout: BlockLayout):
    """(log b(U), log c(V)) with full normalising constants."""
    su, sv = spec.sigmas(layout)
    n = state.u.shape[0]
    u_ssq = np.sum(state.u * state.u, axis=0)
    log_b = _gaussian_logpdf_sum(u_ssq, np.full(layout.k_total, n), su)
    free = ~layout.zero_mask
    v_ssq = np.sum(np.where(free, state.v, 0.0) ** 2, axis=1)
    n_free = free.sum(axis=1)
    log_c = _gaussian_logpdf_sum(v_ssq, n_free, sv)
    return log_b, log_c


def log_prior_unnorm(state: FactorState, spec: PriorSpec,
                     layout: BlockLayout) -> float:
    """log of a(UV)^beta b(U)^gamma c(V)^gamma, up to a's normaliser.

    Returns -inf when beta > 0 and U V leaves the family domain.  With
    beta = 0 the conjugate term is skipped without evaluating g, so
    domain violations of Theta do not matter there.
    """
    total = 0.0
    if spec.beta > 0:
        theta = assemble_theta(state, layout)
        a_sum = 0.0
        for i, fam in enumerate(layout.families):
            block = theta[:, layout.cols_view[i]]
            if not np.all(fam.in_domain(block)):
                return -np.inf
            hyp = spec.hyper_for_view(i)
            a_sum += float(np.sum(hyp.lam * block - hyp.nu * fam._g(block)))
        total += spec.beta * a_sum
    if spec.gamma > 0:
        log_b, log_c = gaussian_block_terms(state, spec, layout)
        total += spec.gamma * (log_b + log_c)
    return float(total)


def grad_log_prior(state: FactorState, spec: PriorSpec, layout: BlockLayout):
    """Gradients of log_prior_unnorm wrt U, the free entries of V, and the
    mean row (None when the layout has no mean row).

    Masked entries of the V gradient are returned as exact zeros.  Raises
    GradientUndefined in the -inf region.
    """
    grad_u = np.zeros_like(state.u)
    grad_v = np.zeros_like(state.v)
    grad_m = np.zeros(layout.d_total) if layout.use_mean_row else None

    if spec.beta > 0:
        theta = assemble_theta(state, layout)
        a_grad = np.empty_like(theta)  # d(a term)/d(theta)
        for i, fam in enumerate(layout.families):
            cols = layout.cols_view[i]
            block = theta[:, cols]
            if not np.all(fam.in_domain(block)):
                raise GradientUndefined(
                    "theta outside the family domain with beta > 0")
            hyp = spec.hyper_for_view(i)
            a_grad[:, cols] = hyp.lam - hyp.nu * fam._gprime(block)
        a_grad *= spec.beta
        grad_u += a_grad @ state.v.T
        grad_v += state.u.T @ a_grad
        if grad_m is not None:
            grad_m += a_grad.sum(axis=0)

    if spec.gamma > 0:
        su, sv = spec.sigmas(layout)
        grad_u -= spec.gamma * state.u / su
        grad_v -= spec.gamma * state.v / sv[:, None]

    grad_v[layout.zero_mask] = 0.0
    return grad_u, grad_v, grad_m
