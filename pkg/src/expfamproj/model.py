"""Block-structured low-rank models for natural-parameter matrices.

A model is a factorisation Theta = U V (optionally plus a shared mean row)
of the N x D natural-parameter matrix of an exponential-family observation
matrix X.  Columns are split into up to two views and the K factor rows
into a shared block and per-view specific blocks:

    epca    single view, all K components shared
    sepca   two views stacked, all components shared, view-2 likelihood
            weighted by alpha
    epls    shared block loads on both views, a specific block on view 2
            only (its view-1 loadings are structural zeros)
    ecca    shared block on both views plus one specific block per view

The structural zeros live in a K x D boolean mask on V; entries under the
mask are pinned to exactly 0.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .expfam import Family, get_family

MODEL_KINDS = ("epca", "sepca", "epls", "ecca")


class LayoutError(ValueError):
    """Inconsistent block layout."""


class ConfigError(ValueError):
    """Invalid configuration value (shared by CV, metrics and the CLI)."""


class ShapeError(ValueError):
    """Array shape does not match the layout."""


@dataclass
class BlockLayout:
    """Static description of the factorisation blocks.

    ranks = (k_shared, k_view1, k_view2); view_widths = (d1, d2) with
    d2 = 0 for single-view epca.  families and alpha have one entry per
    active view.  zero_mask is K x D, True where V is pinned to zero.
    """

    model_kind: str
    view_widths: tuple
    ranks: tuple
    families: tuple
    alpha: tuple
    use_mean_row: bool = False
    zero_mask: np.ndarray = field(repr=False, default=None)

    @property
    def n_views(self):
        return len(self.families)

    @property
    def k_total(self):
        return int(sum(self.ranks))

    @property
    def d_total(self):
        return int(sum(self.view_widths))

    @property
    def rows_shared(self):
        return slice(0, self.ranks[0])

    @property
    def rows_view(self):
        k_s, k_1, k_2 = self.ranks
        return (slice(k_s, k_s + k_1), slice(k_s + k_1, k_s + k_1 + k_2))

    @property
    def cols_view(self):
        d1, d2 = self.view_widths
        return (slice(0, d1), slice(d1, d1 + d2))

    def view_cols(self, i):
        return self.cols_view[i]

    def col_alpha(self):
        """Per-column likelihood weight, length D."""
        w = np.empty(self.d_total)
        for i in range(self.n_views):
            w[self.cols_view[i]] = self.alpha[i]
        return w

    def col_family_index(self):
        """Per-column view index, length D."""
        idx = np.empty(self.d_total, dtype=int)
        for i in range(self.n_views):
            idx[self.cols_view[i]] = i
        return idx


def make_layout(model_kind, view_widths, ranks, families, alpha=None,
                use_mean_row=False) -> BlockLayout:
    """Validate a block description and materialise its zero mask.

    ranks may be given as a single int for epca/sepca (all shared) or as
    the full (k_shared, k_1, k_2) triple.
    """
    model_kind = str(model_kind).lower()
    if model_kind not in MODEL_KINDS:
        raise LayoutError(f"unknown model kind {model_kind!r}")

    if np.isscalar(view_widths):
        view_widths = (int(view_widths), 0)
    d1, d2 = (int(v) for v in view_widths)
    if d1 < 0 or d2 < 0:
        raise LayoutError("view widths must be non-negative")

    if np.isscalar(ranks):
        ranks = (int(ranks), 0, 0)
    if len(ranks) == 2:
        # (k_shared, k_2) shorthand for epls
        ranks = (int(ranks[0]), 0, int(ranks[1]))
    k_s, k_1, k_2 = (int(r) for r in ranks)
    if min(k_s, k_1, k_2) < 0 or k_s + k_1 + k_2 == 0:
        raise LayoutError("ranks must be non-negative with at least one component")

    if model_kind == "epca":
        if d2 != 0:
            raise LayoutError("epca is single-view; got a second view width")
        if k_1 or k_2:
            raise LayoutError("epca has no view-specific components")
    else:
        if d1 < 1 or d2 < 1:
            raise LayoutError(f"{model_kind} needs two non-empty views")
    if model_kind == "sepca" and (k_1 or k_2):
        raise LayoutError("sepca has no view-specific components")
    if model_kind == "epls" and k_1:
        raise LayoutError("epls has no view-1 specific block")
    if k_s == 0 and model_kind in ("epls", "ecca"):
        raise LayoutError(f"{model_kind} needs at least one shared component")

    n_views = 1 if d2 == 0 else 2
    if isinstance(families, (str, Family)):
        families = (families,) * n_views
    families = tuple(get_family(f) for f in families)
    if len(families) != n_views:
        raise LayoutError(f"expected {n_views} families, got {len(families)}")

    if alpha is None:
        alpha = (1.0,) * n_views
    if np.isscalar(alpha):
        alpha = (1.0, float(alpha))[:n_views] if n_views == 2 else (float(alpha),)
    alpha = tuple(float(a) for a in alpha)
    if len(alpha) != n_views or any(a <= 0 for a in alpha):
        raise LayoutError("alpha needs one positive weight per view")
    if model_kind != "sepca" and any(a != 1.0 for a in alpha):
        raise LayoutError("alpha weighting is only meaningful for sepca")

    k = k_s + k_1 + k_2
    d = d1 + d2
    mask = np.zeros((k, d), dtype=bool)
    # specific blocks load only on their own view
    mask[k_s:k_s + k_1, d1:] = True
    mask[k_s + k_1:, :d1] = True

    return BlockLayout(model_kind, (d1, d2), (k_s, k_1, k_2), families,
                       alpha, bool(use_mean_row), mask)


@dataclass
class FactorState:
    """A point (U, V [, mean_row]) in the factor parameter space."""

    u: np.ndarray
    v: np.ndarray
    mean_row: np.ndarray = None

    @property
    def n_rows(self):
        return self.u.shape[0]

    def copy(self):
        return FactorState(
            self.u.copy(), self.v.copy(),
            None if self.mean_row is None else self.mean_row.copy())

    def validate(self, layout: BlockLayout):
        k, d = layout.k_total, layout.d_total
        if self.u.ndim != 2 or self.u.shape[1] != k:
            raise ShapeError(f"U must be N x {k}, got {self.u.shape}")
        if self.v.shape != (k, d):
            raise ShapeError(f"V must be {k} x {d}, got {self.v.shape}")
        if layout.use_mean_row:
            if self.mean_row is None or self.mean_row.shape != (d,):
                raise ShapeError(f"mean_row must have shape ({d},)")
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.v))):
            raise ValueError("factor state contains non-finite entries")
        if self.mean_row is not None and not np.all(np.isfinite(self.mean_row)):
            raise ValueError("mean_row contains non-finite entries")
        if np.any(self.v[layout.zero_mask] != 0.0):
            raise ValueError("structural zeros of V are not exactly zero")


def assemble_theta(state: FactorState, layout: BlockLayout) -> np.ndarray:
    """Theta = U V (+ mean_row broadcast over rows when the layout has one)."""
    if state.u.shape[1] != state.v.shape[0] or state.v.shape[1] != layout.d_total:
        raise ShapeError(
            f"cannot assemble: U is {state.u.shape}, V is {state.v.shape}, "
            f"layout D = {layout.d_total}")
    theta = state.u @ state.v
    if layout.use_mean_row and state.mean_row is not None:
        theta = theta + state.mean_row
    return theta


@dataclass
class ObservationSet:
    """Data matrix plus its observation mask and view metadata.

    x must be finite everywhere; unobserved entries carry an arbitrary
    in-support filler (the loader writes 0) and are never touched by the
    likelihood.  alpha is carried here as well so that data files can pin
    the sepca weighting.
    """

    x: np.ndarray
    observed: np.ndarray
    view_widths: tuple
    families: tuple
    alpha: tuple = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.observed = np.asarray(self.observed, dtype=bool)
        if self.x.ndim != 2 or self.observed.shape != self.x.shape:
            raise ShapeError("x and observed must be matching 2-d arrays")
        d1, d2 = (int(w) for w in self.view_widths)
        if d1 + d2 != self.x.shape[1]:
            raise ShapeError(f"view widths {d1}+{d2} != {self.x.shape[1]} columns")
        self.view_widths = (d1, d2)
        n_views = 1 if d2 == 0 else 2
        self.families = tuple(get_family(f) for f in self.families)
        if len(self.families) != n_views:
            raise ShapeError(f"expected {n_views} families")
        if self.alpha is None:
            self.alpha = (1.0,) * n_views
        self.alpha = tuple(float(a) for a in self.alpha)
        if not np.all(np.isfinite(self.x)):
            raise ValueError("x must be finite; mark missing entries in the mask")
        for i, fam in enumerate(self.families):
            cols = self.view_cols(i)
            block, obs = self.x[:, cols], self.observed[:, cols]
            if np.any(obs) and not np.all(fam.in_support(block[obs])):
                raise ValueError(f"view {i + 1} has observed entries outside the "
                                 f"support of {fam.name}")

    @property
    def n_rows(self):
        return self.x.shape[0]

    @property
    def n_cols(self):
        return self.x.shape[1]

    def view_cols(self, i):
        d1, d2 = self.view_widths
        return (slice(0, d1), slice(d1, d1 + d2))[i]

    def subset_rows(self, idx):
        return ObservationSet(self.x[idx], self.observed[idx],
                              self.view_widths, self.families, self.alpha)

    def with_mask(self, observed):
        return ObservationSet(self.x, observed, self.view_widths,
                              self.families, self.alpha)


def _logpdf_matrix(obs: ObservationSet, theta: np.ndarray,
                   layout: BlockLayout) -> np.ndarray:
    """Elementwise log p(x | theta) with unobserved entries set to 0."""
    out = np.zeros_like(theta)
    for i, fam in enumerate(layout.families):
        cols = layout.cols_view[i]
        block = fam.log_pdf_unchecked(obs.x[:, cols], theta[:, cols])
        out[:, cols] = np.where(obs.observed[:, cols], block, 0.0)
    return out


def theta_in_domain(theta: np.ndarray, layout: BlockLayout) -> bool:
    for i, fam in enumerate(layout.families):
        if not np.all(fam.in_domain(theta[:, layout.cols_view[i]])):
            return False
    return True


def log_likelihood_theta(obs: ObservationSet, theta: np.ndarray,
                         layout: BlockLayout) -> float:
    """Masked, alpha-weighted log-likelihood at a given Theta matrix."""
    for i, fam in enumerate(layout.families):
        fam._require_domain(theta[:, layout.cols_view[i]])
    ll = _logpdf_matrix(obs, theta, layout)
    return float(np.sum(ll * layout.col_alpha()))


def log_likelihood(obs: ObservationSet, state: FactorState,
                   layout: BlockLayout) -> float:
    """Masked, alpha-weighted log-likelihood of the observed entries.

    The per-view alpha weights multiply whole columns of the elementwise
    log-pdf matrix and the result is reduced by a single sum over the
    full matrix, so that weighting with alpha = (1, 1) is bit-identical
    to the unweighted single-view computation.
    """
    return log_likelihood_theta(obs, assemble_theta(state, layout), layout)


def loglik_grad_theta(obs: ObservationSet, theta: np.ndarray,
                      layout: BlockLayout) -> np.ndarray:
    """d log-likelihood / d theta: alpha * mask * (x - mean_param(theta))."""
    grad = np.zeros_like(theta)
    for i, fam in enumerate(layout.families):
        cols = layout.cols_view[i]
        mu = fam._gprime(theta[:, cols])
        grad[:, cols] = np.where(obs.observed[:, cols],
                                 obs.x[:, cols] - mu, 0.0)
    return grad * layout.col_alpha()


def log_pdf_sum_at(obs: ObservationSet, theta: np.ndarray,
                   layout: BlockLayout, mask: np.ndarray) -> float:
    """Unweighted sum of log p(x | theta) over the entries picked by mask.

    Used for held-out scoring, so no alpha weighting is applied.
    """
    if mask.shape != obs.x.shape:
        raise ShapeError("mask shape does not match the data")
    total = 0.0
    for i, fam in enumerate(layout.families):
        cols = layout.cols_view[i]
        m = mask[:, cols]
        if not np.any(m):
            continue
        fam._require_domain(theta[:, cols][m])
        total += float(np.sum(fam.log_pdf_unchecked(obs.x[:, cols][m],
                                                    theta[:, cols][m])))
    return total


# ---------------------------------------------------------------------------
# observation loading

def load_observations(csv_path, descriptor_path) -> ObservationSet:
    """Read a dense data matrix with an NA convention plus a JSON descriptor.

    The CSV holds one row per observation row; the token NA (case
    insensitive, or an empty field) marks a missing entry.  A header line
    is allowed and detected by its non-numeric fields.  The descriptor is
    a JSON object with keys view_widths, families and optionally alpha.
    """
    with open(descriptor_path) as fh:
        desc = json.load(fh)
    for key in ("view_widths", "families"):
        if key not in desc:
            raise ValueError(f"descriptor {descriptor_path} is missing {key!r}")
    view_widths = tuple(int(w) for w in desc["view_widths"])
    families = desc["families"]
    if isinstance(families, str):
        families = [families]
    alpha = desc.get("alpha")

    rows, mask_rows = [], []
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, fields in enumerate(reader, start=1):
            if not fields or (len(fields) == 1 and not fields[0].strip()):
                continue
            parsed, observed = [], []
            bad = False
            for tok in fields:
                tok = tok.strip()
                if tok == "" or tok.upper() == "NA":
                    parsed.append(0.0)
                    observed.append(False)
                    continue
                try:
                    parsed.append(float(tok))
                    observed.append(True)
                except ValueError:
                    bad = True
                    break
            if bad:
                if lineno == 1:
                    continue  # header line
                raise ValueError(f"{csv_path}:{lineno}: unparseable field")
            rows.append(parsed)
            mask_rows.append(observed)
    if not rows:
        raise ValueError(f"{csv_path}: no data rows")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ValueError(f"{csv_path}: ragged rows with widths {sorted(widths)}")

    x = np.asarray(rows, dtype=float)
    observed = np.asarray(mask_rows, dtype=bool)
    return ObservationSet(x, observed, view_widths, families, alpha)
