"""Hybrid Monte Carlo over the factor state, with exchange moves for the
prior hyperparameters.

The chain targets exp(log_likelihood + log_prior_unnorm) over the free
coordinates (U, the unmasked entries of V, the mean row if present).
Because the composite prior's normaliser Z(psi) is intractable in the
hyperparameters, psi moves use the exchange algorithm: propose psi', draw
auxiliary factors (U*, V*) approximately from the prior at psi' with an
inner chain, and correct the MH ratio by f(U*, V* | psi) / f(U*, V* | psi'),
which cancels the unknown normalisers in expectation.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .chains import Chain
from .model import (BlockLayout, ConfigError, FactorState, ObservationSet,
                    log_likelihood)
from .map_infer import FreeParams, _check_obs_layout, init_state, \
    posterior_logp_and_grad
from .prior import PriorSpec, gaussian_block_terms, log_prior_unnorm

TARGET_ACCEPT = 0.75
ADAPT_RATE = 0.05


class ChainError(RuntimeError):
    """The sampler collapsed (acceptance rate effectively zero)."""


@dataclass
class ExchangeOptions:
    inner_sweeps: int = 200
    prop_scale: float = 0.25


@dataclass
class HmcOptions:
    n_samples: int = 500
    burn_in: int = 500
    thin: int = 1
    step_size: float = 0.05
    n_leapfrog: int = 20
    adapt: bool = True
    infer_hyper: bool = False
    seed: int = 0
    init_std: float = 0.01
    fix_v: np.ndarray = None          # pin V (excluded from sampling)
    initial_state: FactorState = None
    exchange: ExchangeOptions = field(default_factory=ExchangeOptions)


# ---------------------------------------------------------------------------
# one HMC transition

def _leapfrog(x, p, grad, fn, step_size, n_steps):
    """Standard leapfrog; returns (x, p, logp, grad) or None on a non-finite
    gradient or log-density anywhere along the trajectory."""
    x = x.copy()
    with np.errstate(over="ignore", invalid="ignore"):
        p = p + 0.5 * step_size * grad
        for i in range(n_steps):
            x = x + step_size * p
            if not np.all(np.isfinite(x)):
                return None
            logp, grad = fn(x)
            if grad is None or not np.all(np.isfinite(grad)):
                return None
            p = p + (0.5 if i == n_steps - 1 else 1.0) * step_size * grad
    return x, p, logp, grad


def _hmc_transition(x, logp, grad, fn, step_size, n_leapfrog, rng):
    p0 = rng.standard_normal(x.size)
    h0 = -logp + 0.5 * float(p0 @ p0)
    out = _leapfrog(x, p0, grad, fn, step_size, n_leapfrog)
    if out is None:
        return x, logp, grad, False, True
    x1, p1, logp1, grad1 = out
    with np.errstate(over="ignore"):
        h1 = -logp1 + 0.5 * float(p1 @ p1)
    if np.log(rng.random()) < h0 - h1:
        return x1, logp1, grad1, True, False
    return x, logp, grad, False, False


def hmc_step(state: FactorState, obs: ObservationSet, layout: BlockLayout,
             spec: PriorSpec, step_size, n_leapfrog,
             rng: np.random.Generator, free: FreeParams = None):
    """One HMC transition from `state`; returns (state', accepted).

    Gaussian momenta with identity mass, n_leapfrog leapfrog steps.  A
    non-finite gradient or log density anywhere along the trajectory
    rejects the trajectory.  Pass a FreeParams with fix_v to sample U only.
    """
    free = free or FreeParams(layout, state)

    def fn(x):
        logp, gu, gv, gm = posterior_logp_and_grad(free.unpack(x), obs,
                                                   layout, spec)
        if not np.isfinite(logp):
            return -np.inf, None
        ll = free.pack_grad(gu, gv, gm if gm is not None
                            else np.zeros(layout.d_total))
        return logp, ll

    x = free.pack(state)
    logp, grad = fn(x)
    if grad is None:
        raise ValueError("hmc_step started at a state with -inf density")
    x1, logp1, grad1, accepted, _ = _hmc_transition(
        x, logp, grad, fn, step_size, n_leapfrog, rng)
    return free.unpack(x1), accepted


# ---------------------------------------------------------------------------
# exchange moves on the prior hyperparameters

def _hyper_blocks(spec: PriorSpec, layout: BlockLayout):
    """Round-robin block names: sigma_u, each sigma_v component, (lam, nu)."""
    blocks = ["sigma_u"]
    if np.ndim(spec.sigma_v) == 0:
        blocks.append("sigma_v")
    else:
        blocks += [f"sigma_v:{k}" for k in range(layout.k_total)]
    blocks += [f"conj:{i}" for i in range(len(spec.a_hyper))]
    return blocks


def _propose_block(spec: PriorSpec, layout: BlockLayout, block: str,
                   rng: np.random.Generator, scale: float):
    """Log-normal random-walk proposal on one hyperparameter block.

    Returns the proposed spec, or None when the proposal leaves the
    support (e.g. a Bernoulli view needs 0 < lam < nu).  The log-normal
    walk is reversible against the flat-in-log hyperprior, so the
    Hastings and prior factors cancel exactly in the acceptance ratio.
    """
    from .expfam import ConjugateHyper

    if block == "sigma_u":
        cur = np.asarray(spec.sigma_u, dtype=float)
        prop = cur * np.exp(scale * rng.standard_normal(cur.shape))
        return spec.replace(sigma_u=prop if cur.ndim else float(prop))
    if block == "sigma_v":
        cur = np.asarray(spec.sigma_v, dtype=float)
        prop = cur * np.exp(scale * rng.standard_normal(cur.shape))
        return spec.replace(sigma_v=prop if cur.ndim else float(prop))
    if block.startswith("sigma_v:"):
        k = int(block.split(":")[1])
        sv = spec.sigmas(layout)[1]
        sv[k] *= np.exp(scale * rng.standard_normal())
        return spec.replace(sigma_v=sv)
    if block.startswith("conj:"):
        i = int(block.split(":")[1])
        hyps = list(spec.a_hyper)
        h = hyps[i]
        lam = h.lam * np.exp(scale * rng.standard_normal())
        nu = h.nu * np.exp(scale * rng.standard_normal())
        hyps[i] = ConjugateHyper(float(lam), float(nu))
        prop = spec.replace(a_hyper=tuple(hyps))
        try:
            prop.validate_for(layout)
        except ValueError:
            return None
        return prop
    raise ValueError(f"unknown hyperparameter block {block!r}")


def _conj_term(state, spec, layout):
    """beta-weighted conjugate part of the log prior, -inf out of domain."""
    if spec.beta == 0:
        return 0.0
    from .model import assemble_theta
    theta = assemble_theta(state, layout)
    total = 0.0
    for i, fam in enumerate(layout.families):
        block = theta[:, layout.cols_view[i]]
        if not np.all(fam.in_domain(block)):
            return -np.inf
        hyp = spec.hyper_for_view(i)
        total += float(np.sum(hyp.lam * block - hyp.nu * fam._g(block)))
    return spec.beta * total


def sample_prior_approx(spec: PriorSpec, layout: BlockLayout, n_rows: int,
                        rng: np.random.Generator,
                        opts: ExchangeOptions = None, mean_row=None):
    """Approximate draw of (U*, V*) from the composite prior at spec.

    Independence MH: proposals come from the Gaussian part b^gamma c^gamma
    (exact, so the acceptance ratio reduces to the conjugate term's ratio;
    with beta = 0 every sweep is an exact independent draw).  A fixed-lag
    stationarity heuristic compares the means of the first and second half
    of the log f trace; returns (state, flagged) with flagged = True when
    the halves disagree beyond three combined standard errors or no
    proposal was ever accepted.
    """
    opts = opts or ExchangeOptions()
    if spec.gamma <= 0:
        raise ConfigError("exchange sampling needs gamma > 0 proposals")
    su, sv = spec.sigmas(layout)
    sd_u = np.sqrt(su / spec.gamma)
    sd_v = np.sqrt(sv / spec.gamma)
    k, d = layout.k_total, layout.d_total

    def draw():
        u = sd_u * rng.standard_normal((n_rows, k))
        v = sd_v[:, None] * rng.standard_normal((k, d))
        v[layout.zero_mask] = 0.0
        return FactorState(u, v, mean_row)

    state = draw()
    conj = _conj_term(state, spec, layout)
    for _ in range(50):
        if np.isfinite(conj):
            break
        state = draw()
        conj = _conj_term(state, spec, layout)
    else:
        return state, True

    trace = np.empty(opts.inner_sweeps)
    n_accept = 0
    for s in range(opts.inner_sweeps):
        cand = draw()
        conj_c = _conj_term(cand, spec, layout)
        if np.log(rng.random()) < conj_c - conj:
            state, conj = cand, conj_c
            n_accept += 1
        log_b, log_c = gaussian_block_terms(state, spec, layout)
        trace[s] = conj + spec.gamma * (log_b + log_c)

    half = opts.inner_sweeps // 2
    first, second = trace[:half], trace[half:]
    se = np.sqrt(first.var() / max(len(first), 1)
                 + second.var() / max(len(second), 1))
    flagged = (n_accept == 0) or \
        (abs(first.mean() - second.mean()) > 3.0 * se + 1e-12)
    return state, flagged


def exchange_update_hyper(spec: PriorSpec, state: FactorState,
                          layout: BlockLayout, block: str,
                          rng: np.random.Generator,
                          opts: ExchangeOptions = None):
    """One exchange move on a hyperparameter block.

    Acceptance ratio: f(state | psi') / f(state | psi) times the exchange
    correction f(aux | psi) / f(aux | psi'), with aux drawn approximately
    from the prior at psi'.  Returns (spec', info); spec' is the input
    spec on rejection.  A failed inner-chain convergence check rejects the
    move and sets info['flagged'].
    """
    opts = opts or ExchangeOptions()
    prop = _propose_block(spec, layout, block, rng, opts.prop_scale)
    info = {"block": block, "accepted": False, "flagged": False}
    if prop is None:
        return spec, info
    aux, flagged = sample_prior_approx(prop, layout, state.u.shape[0], rng,
                                       opts, mean_row=state.mean_row)
    if flagged:
        info["flagged"] = True
        return spec, info
    log_r = (log_prior_unnorm(state, prop, layout)
             - log_prior_unnorm(state, spec, layout)
             + log_prior_unnorm(aux, spec, layout)
             - log_prior_unnorm(aux, prop, layout))
    if np.log(rng.random()) < log_r:
        info["accepted"] = True
        return prop, info
    return spec, info


# ---------------------------------------------------------------------------
# the full chain

def run_hmc_chain(obs: ObservationSet, layout: BlockLayout, spec: PriorSpec,
                  opts: HmcOptions = None) -> Chain:
    """HMC chain with burn-in-only step-size adaptation.

    The step size multiplies up on acceptance and down on rejection so its
    equilibrium acceptance rate sits at 75%, inside the 65-85% band;
    adaptation freezes after burn-in.  With infer_hyper, one exchange move
    on one hyperparameter block (round-robin) runs after every HMC sweep.
    Raises ChainError when the post-adaptation acceptance rate drops below
    1% (the step size survived adaptation too large).
    """
    opts = opts or HmcOptions()
    spec.validate_for(layout)
    _check_obs_layout(obs, layout)
    if opts.infer_hyper and spec.gamma <= 0:
        raise ConfigError("hyperparameter inference needs gamma > 0")
    rng = np.random.default_rng(np.random.SeedSequence([opts.seed, 7]))

    if opts.initial_state is not None:
        state = opts.initial_state.copy()
    else:
        state = init_state(obs, layout, rng, opts.init_std)
    if opts.fix_v is not None:
        state.v = np.asarray(opts.fix_v, dtype=float).copy()
    state.validate(layout)
    free = FreeParams(layout, state, fix_v=opts.fix_v is not None)

    def make_fn(current_spec):
        def fn(x):
            logp, gu, gv, gm = posterior_logp_and_grad(
                free.unpack(x), obs, layout, current_spec)
            if not np.isfinite(logp):
                return -np.inf, None
            return logp, free.pack_grad(gu, gv, gm if gm is not None
                                        else np.zeros(layout.d_total))
        return fn

    fn = make_fn(spec)
    x = free.pack(state)
    logp, grad = fn(x)
    if grad is None:
        raise ChainError("initial state has -inf posterior density")

    blocks = _hyper_blocks(spec, layout) if opts.infer_hyper else []
    step_size = float(opts.step_size)
    n_total = opts.burn_in + opts.n_samples * opts.thin
    states, hypers, wall, loglik = [], [], [], []
    n_acc_sample = n_acc_burn = 0
    n_divergent = 0
    exch_stats = {"accepted": 0, "flagged": 0, "proposed": 0}
    t0 = time.perf_counter()
    prev_t = 0.0

    for sweep in range(n_total):
        in_burn = sweep < opts.burn_in
        x, logp, grad, accepted, divergent = _hmc_transition(
            x, logp, grad, fn, step_size, opts.n_leapfrog, rng)
        n_divergent += divergent
        if in_burn:
            n_acc_burn += accepted
            if opts.adapt:
                if accepted:
                    step_size *= np.exp(ADAPT_RATE * (1.0 - TARGET_ACCEPT))
                else:
                    step_size *= np.exp(-ADAPT_RATE * TARGET_ACCEPT)
        else:
            n_acc_sample += accepted

        if blocks:
            block = blocks[sweep % len(blocks)]
            spec, info = exchange_update_hyper(
                spec, free.unpack(x), layout, block, rng, opts.exchange)
            exch_stats["proposed"] += 1
            exch_stats["accepted"] += info["accepted"]
            exch_stats["flagged"] += info["flagged"]
            if info["accepted"]:
                fn = make_fn(spec)
                logp, grad = fn(x)

        if not in_burn and (sweep - opts.burn_in) % opts.thin == 0:
            s = free.unpack(x)
            states.append(s)
            t = time.perf_counter() - t0
            t = max(t, prev_t + 1e-9)
            prev_t = t
            wall.append(t)
            loglik.append(log_likelihood(obs, s, layout))
            hypers.append(spec)

    n_kept = opts.n_samples * opts.thin
    if n_kept > 0 and n_acc_sample / n_kept < 0.01:
        raise ChainError(
            f"post-adaptation acceptance rate {n_acc_sample / n_kept:.4f} "
            f"below 1%; try a smaller step_size")

    stats = {
        "accept_rate": (n_acc_sample / n_kept) if n_kept else None,
        "accept_rate_burnin": (n_acc_burn / opts.burn_in) if opts.burn_in else None,
        "step_size_final": float(step_size),
        "divergent": n_divergent,
        "exchange": exch_stats if blocks else None,
    }
    meta = {"engine": "hmc", "seed": opts.seed, "n_samples": opts.n_samples,
            "burn_in": opts.burn_in, "thin": opts.thin,
            "n_leapfrog": opts.n_leapfrog, "infer_hyper": opts.infer_hyper}
    chain = Chain(states, np.asarray(wall), np.asarray(loglik),
                  hypers if opts.infer_hyper else None, None, stats, meta)
    chain.validate()
    return chain
