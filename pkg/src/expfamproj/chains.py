"""Sample containers and on-disk persistence.

A Chain stores post-burn-in samples of the factor state (and, when the
sampler infers them, the prior hyperparameters), together with a wall
clock and a scalar log-likelihood trace.  Persistence writes one flat
little-endian float64 binary file per sample plus a JSON manifest, so
reruns with the same seed can be compared byte for byte.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .expfam import ConjugateHyper
from .model import BlockLayout, FactorState
from .prior import PriorSpec

FORMAT_VERSION = 1


@dataclass
class Chain:
    states: list
    wall_clock: np.ndarray          # seconds since chain start, per sample
    loglik: np.ndarray              # data log-likelihood per sample
    hypers: list = None             # PriorSpec per sample, when inferred
    thetas: list = None             # Theta per sample, when Theta is sampled
    stats: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def n_samples(self):
        return len(self.states)

    def validate(self):
        n = self.n_samples
        if len(self.wall_clock) != n or len(self.loglik) != n:
            raise ValueError("trace lengths do not match the sample count")
        if self.hypers is not None and len(self.hypers) != n:
            raise ValueError("hyper trace length does not match samples")
        if self.thetas is not None and len(self.thetas) != n:
            raise ValueError("theta trace length does not match samples")
        if n and np.any(np.diff(self.wall_clock) <= 0):
            raise ValueError("wall clock must be strictly increasing")

    def theta_samples(self, layout: BlockLayout):
        """Per-sample natural parameter matrices.

        Samplers that draw Theta directly store it; otherwise Theta is
        assembled from the factor samples.
        """
        if self.thetas is not None:
            return [np.asarray(t) for t in self.thetas]
        from .model import assemble_theta
        return [assemble_theta(s, layout) for s in self.states]


def shared_latent_mean(chain: Chain, layout: BlockLayout) -> np.ndarray:
    """Posterior mean of the shared factor rows with sign alignment.

    Each shared component's sign is free to flip between samples (U_k and
    V_k can be negated together), which would wash the plain mean out to
    zero.  Every sample's components are therefore aligned to the first
    sample by the sign of their inner product before averaging.
    """
    if chain.n_samples == 0:
        raise ValueError("empty chain")
    k_s = layout.ranks[0]
    ref = chain.states[0].u[:, :k_s]
    acc = np.zeros_like(ref)
    for s in chain.states:
        block = s.u[:, :k_s]
        signs = np.sign(np.sum(block * ref, axis=0))
        signs[signs == 0] = 1.0
        acc += block * signs
    return acc / chain.n_samples


# ---------------------------------------------------------------------------
# persistence

def _tobytes(arr):
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def _sample_blob(state: FactorState, hyper: PriorSpec, theta,
                 layout: BlockLayout):
    parts = [state.u, state.v]
    if state.mean_row is not None:
        parts.append(state.mean_row)
    if theta is not None:
        parts.append(theta)
    if hyper is not None:
        su, sv = hyper.sigmas(layout)
        lam = [hyper.hyper_for_view(i).lam for i in range(layout.n_views)]
        nu = [hyper.hyper_for_view(i).nu for i in range(layout.n_views)]
        parts.append(np.concatenate([su, sv, lam, nu]))
    return b"".join(_tobytes(p) for p in parts)


def save_chain(chain: Chain, dirpath, layout: BlockLayout):
    """Write one .bin per sample plus manifest.json into dirpath."""
    chain.validate()
    os.makedirs(dirpath, exist_ok=True)
    has_mean = chain.n_samples > 0 and chain.states[0].mean_row is not None
    has_hyper = chain.hypers is not None
    has_theta = chain.thetas is not None
    n_rows = chain.states[0].u.shape[0] if chain.n_samples else 0
    for i, state in enumerate(chain.states):
        hyper = chain.hypers[i] if has_hyper else None
        theta = chain.thetas[i] if has_theta else None
        with open(os.path.join(dirpath, f"sample_{i:06d}.bin"), "wb") as fh:
            fh.write(_sample_blob(state, hyper, theta, layout))
    manifest = {
        "format": FORMAT_VERSION,
        "n_samples": chain.n_samples,
        "n_rows": int(n_rows),
        "k_total": int(layout.k_total),
        "d_total": int(layout.d_total),
        "n_views": layout.n_views,
        "has_mean": has_mean,
        "has_hyper": has_hyper,
        "has_theta": has_theta,
        "beta": None if not has_hyper else chain.hypers[0].beta,
        "gamma": None if not has_hyper else chain.hypers[0].gamma,
        "wall_clock": [float(t) for t in chain.wall_clock],
        "loglik": [float(v) for v in chain.loglik],
        "stats": chain.stats,
        "meta": chain.meta,
    }
    with open(os.path.join(dirpath, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_chain(dirpath) -> Chain:
    with open(os.path.join(dirpath, "manifest.json")) as fh:
        man = json.load(fh)
    if man.get("format") != FORMAT_VERSION:
        raise ValueError(f"unsupported chain format {man.get('format')!r}")
    n, k, d = man["n_rows"], man["k_total"], man["d_total"]
    n_views = man["n_views"]
    has_theta = man.get("has_theta", False)
    states = []
    hypers = [] if man["has_hyper"] else None
    thetas = [] if has_theta else None
    for i in range(man["n_samples"]):
        path = os.path.join(dirpath, f"sample_{i:06d}.bin")
        flat = np.fromfile(path, dtype="<f8")
        off = 0
        u = flat[off:off + n * k].reshape(n, k); off += n * k
        v = flat[off:off + k * d].reshape(k, d); off += k * d
        mean = None
        if man["has_mean"]:
            mean = flat[off:off + d]; off += d
        states.append(FactorState(u, v, mean))
        if has_theta:
            thetas.append(flat[off:off + n * d].reshape(n, d)); off += n * d
        if man["has_hyper"]:
            su = flat[off:off + k]; off += k
            sv = flat[off:off + k]; off += k
            lam = flat[off:off + n_views]; off += n_views
            nu = flat[off:off + n_views]; off += n_views
            hyp = tuple(ConjugateHyper(float(l), float(m))
                        for l, m in zip(lam, nu))
            hypers.append(PriorSpec(beta=man["beta"], a_hyper=hyp,
                                    sigma_u=su, sigma_v=sv,
                                    gamma=man["gamma"]))
        if off != flat.size:
            raise ValueError(f"{path}: unexpected length {flat.size}")
    chain = Chain(states, np.asarray(man["wall_clock"]),
                  np.asarray(man["loglik"]), hypers, thetas,
                  man.get("stats", {}), man.get("meta", {}))
    chain.validate()
    return chain


def save_state(state: FactorState, dirpath, extra=None):
    """Persist a single factor state (MAP result) with a manifest."""
    os.makedirs(dirpath, exist_ok=True)
    with open(os.path.join(dirpath, "state.bin"), "wb") as fh:
        fh.write(_tobytes(state.u))
        fh.write(_tobytes(state.v))
        if state.mean_row is not None:
            fh.write(_tobytes(state.mean_row))
    manifest = {
        "format": FORMAT_VERSION,
        "n_rows": int(state.u.shape[0]),
        "k_total": int(state.u.shape[1]),
        "d_total": int(state.v.shape[1]),
        "has_mean": state.mean_row is not None,
    }
    if extra:
        manifest["extra"] = extra
    with open(os.path.join(dirpath, "state_manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_state(dirpath) -> FactorState:
    with open(os.path.join(dirpath, "state_manifest.json")) as fh:
        man = json.load(fh)
    flat = np.fromfile(os.path.join(dirpath, "state.bin"), dtype="<f8")
    n, k, d = man["n_rows"], man["k_total"], man["d_total"]
    off = 0
    u = flat[off:off + n * k].reshape(n, k); off += n * k
    v = flat[off:off + k * d].reshape(k, d); off += k * d
    mean = None
    if man["has_mean"]:
        mean = flat[off:off + d]; off += d
    return FactorState(u, v, mean)
