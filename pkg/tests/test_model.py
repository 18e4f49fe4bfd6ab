"""Layout construction, Theta assembly, masked likelihoods, data loading."""

import json

import numpy as np
import pytest

from expfamproj import (ConfigError, FactorState, LayoutError, ObservationSet,
                        ShapeError, assemble_theta, get_family,
                        load_observations, log_likelihood,
                        log_likelihood_theta, make_layout)
from expfamproj.model import log_pdf_sum_at, loglik_grad_theta, theta_in_domain

from conftest import dense_observations, make_rng

LOG2 = np.log(2.0)


# ------------------------------------------------------------------ layout

def test_epca_layout_scalars_expand():
    lay = make_layout("epca", 6, 2, "poisson")
    assert lay.view_widths == (6, 0)
    assert lay.ranks == (2, 0, 0)
    assert lay.k_total == 2 and lay.d_total == 6
    assert not lay.zero_mask.any()


def test_epls_layout_zero_block():
    # one shared component, five target-specific ones; the cross block
    # (specific rows x view-1 cols) is structurally zero
    lay = make_layout("epls", (1, 20), (1, 5), ("gaussian", "gaussian"))
    assert lay.ranks == (1, 0, 5)
    assert lay.k_total == 6 and lay.d_total == 21
    mask = lay.zero_mask
    assert mask.shape == (6, 21)
    assert mask[1:, :1].all()
    assert not mask[:1, :].any()
    assert not mask[:, 1:].any()
    assert mask.sum() == 5


def test_ecca_layout_opposite_corners():
    lay = make_layout("ecca", (20, 20), (1, 2, 2),
                      ("poisson", "bernoulli"))
    mask = lay.zero_mask
    assert mask.shape == (5, 40)
    # view-1-specific rows are zero on view 2 and vice versa
    assert mask[1:3, 20:].all()
    assert mask[3:5, :20].all()
    assert not mask[0].any()
    assert mask.sum() == 2 * 20 + 2 * 20


def test_sepca_layout_has_no_zeros_and_alpha():
    lay = make_layout("sepca", (3, 4), 2, ("gaussian", "bernoulli"),
                      alpha=1e-3)
    assert not lay.zero_mask.any()
    ca = lay.col_alpha()
    assert np.all(ca[:3] == 1.0)
    assert np.all(ca[3:] == 1e-3)


def test_layout_slices_partition_columns():
    lay = make_layout("ecca", (3, 4), (1, 2, 2), ("gaussian", "poisson"))
    cols = np.zeros(lay.d_total, dtype=int)
    for i in range(lay.n_views):
        cols[lay.cols_view[i]] += 1
    assert np.all(cols == 1)
    idx = lay.col_family_index()
    assert [lay.families[i].name for i in idx[:3]] == ["gaussian"] * 3
    assert [lay.families[i].name for i in idx[3:]] == ["poisson"] * 4


def test_make_layout_rejections():
    with pytest.raises(LayoutError):
        make_layout("epca", (3, 4), 2, ("gaussian", "gaussian"))
    with pytest.raises(LayoutError):
        make_layout("sepca", (3, 4), (1, 2, 2), ("gaussian", "gaussian"))
    with pytest.raises(LayoutError):
        make_layout("epls", (3, 4), (1, 2, 2), ("gaussian", "gaussian"))
    with pytest.raises(LayoutError):
        make_layout("ecca", (3, 4), (0, 2, 2), ("gaussian", "gaussian"))
    with pytest.raises(LayoutError):
        make_layout("epca", 3, 2, "gaussian", alpha=0.5)
    with pytest.raises(LayoutError):
        make_layout("ecca", (3, 0), (1, 1, 1), ("gaussian", "gaussian"))
    with pytest.raises(LayoutError):
        make_layout("pls", (3, 4), (1, 0, 2), ("gaussian", "gaussian"))


def test_epls_rank_shorthand():
    full = make_layout("epls", (1, 8), (2, 0, 3), ("gaussian", "poisson"))
    short = make_layout("epls", (1, 8), (2, 3), ("gaussian", "poisson"))
    assert full.ranks == short.ranks == (2, 0, 3)


# ---------------------------------------------------------------- assembly

def test_epls_worked_example():
    """U_S=[[1]], V_S=[2 | 3], U_2=[[1]], V_2=[0 | 4] gives Theta=[2, 7]."""
    lay = make_layout("epls", (1, 1), (1, 1), ("gaussian", "gaussian"))
    u = np.array([[1.0, 1.0]])
    v = np.array([[2.0, 3.0],
                  [0.0, 4.0]])
    state = FactorState(u, v)
    state.validate(lay)
    theta = assemble_theta(state, lay)
    assert np.allclose(theta, [[2.0, 7.0]])


def test_view_specific_rows_do_not_touch_other_view():
    lay = make_layout("epls", (2, 3), (1, 2), ("gaussian", "gaussian"))
    rng = make_rng(8, 1)
    u = rng.standard_normal((5, lay.k_total))
    v = rng.standard_normal((lay.k_total, lay.d_total))
    v[lay.zero_mask] = 0.0
    base = assemble_theta(FactorState(u, v), lay)
    u2 = u.copy()
    u2[:, 1:] += rng.standard_normal((5, 2))
    bumped = assemble_theta(FactorState(u2, v), lay)
    cols1 = lay.cols_view[0]
    assert np.array_equal(base[:, cols1], bumped[:, cols1])
    assert not np.allclose(base[:, lay.cols_view[1]],
                           bumped[:, lay.cols_view[1]])


def test_ecca_blockwise_equals_full_product():
    lay = make_layout("ecca", (3, 4), (1, 2, 2), ("gaussian", "gaussian"))
    rng = make_rng(8, 2)
    u = rng.standard_normal((6, lay.k_total))
    v = rng.standard_normal((lay.k_total, lay.d_total))
    v[lay.zero_mask] = 0.0
    theta = assemble_theta(FactorState(u, v), lay)
    # block arithmetic: each view sees shared rows plus its own rows only
    c1, c2 = lay.cols_view
    t1 = u[:, :1] @ v[:1, c1] + u[:, 1:3] @ v[1:3, c1]
    t2 = u[:, :1] @ v[:1, c2] + u[:, 3:5] @ v[3:5, c2]
    assert np.allclose(theta[:, c1], t1, atol=1e-12)
    assert np.allclose(theta[:, c2], t2, atol=1e-12)


def test_mean_row_broadcasts():
    lay = make_layout("epca", 3, 1, "gaussian", use_mean_row=True)
    state = FactorState(np.zeros((4, 1)), np.zeros((1, 3)),
                        mean_row=np.array([1.0, -2.0, 0.5]))
    theta = assemble_theta(state, lay)
    assert np.allclose(theta, np.tile([1.0, -2.0, 0.5], (4, 1)))


def test_validate_rejects_nonzero_structural_zeros():
    lay = make_layout("epls", (1, 2), (1, 1), ("gaussian", "gaussian"))
    v = np.ones((2, 3))
    with pytest.raises(ValueError):
        FactorState(np.ones((2, 2)), v).validate(lay)


# -------------------------------------------------------------- likelihood

def test_single_bernoulli_loglik():
    lay = make_layout("epca", 1, 1, "bernoulli")
    obs = ObservationSet(np.array([[1.0]]), np.array([[True]]),
                         lay.view_widths, lay.families)
    assert log_likelihood_theta(obs, np.array([[0.0]]), lay) == \
        pytest.approx(-LOG2, rel=1e-12)


def test_unobserved_entries_do_not_count():
    lay = make_layout("epca", 2, 1, "poisson")
    x = np.array([[1.0, 3.0]])
    all_on = ObservationSet(x, np.array([[True, True]]),
                            lay.view_widths, lay.families)
    one_off = ObservationSet(x, np.array([[True, False]]),
                             lay.view_widths, lay.families)
    theta = np.array([[0.2, 0.9]])
    fam = get_family("poisson")
    diff = log_likelihood_theta(all_on, theta, lay) \
        - log_likelihood_theta(one_off, theta, lay)
    assert diff == pytest.approx(float(fam.log_pdf(3.0, 0.9)), rel=1e-10)


def test_empty_mask_gives_zero():
    lay = make_layout("epca", 2, 1, "gaussian")
    obs = ObservationSet(np.zeros((3, 2)), np.zeros((3, 2), dtype=bool),
                         lay.view_widths, lay.families)
    assert log_likelihood_theta(obs, np.ones((3, 2)), lay) == 0.0


def test_alpha_weights_view_two():
    lay = make_layout("sepca", (2, 3), 1, ("gaussian", "gaussian"),
                      alpha=1e-3)
    rng = make_rng(8, 3)
    theta = rng.standard_normal((4, 5))
    obs = dense_observations(lay, theta, seed=81)
    total = log_likelihood_theta(obs, theta, lay)
    lay1 = make_layout("epca", 2, 1, "gaussian")
    lay2 = make_layout("epca", 3, 1, "gaussian")
    obs1 = ObservationSet(obs.x[:, :2], obs.observed[:, :2],
                          lay1.view_widths, lay1.families)
    obs2 = ObservationSet(obs.x[:, 2:], obs.observed[:, 2:],
                          lay2.view_widths, lay2.families)
    part = log_likelihood_theta(obs1, theta[:, :2], lay1) \
        + 1e-3 * log_likelihood_theta(obs2, theta[:, 2:], lay2)
    assert total == pytest.approx(part, rel=1e-12)


def test_log_likelihood_state_matches_theta_path():
    lay = make_layout("epls", (1, 3), (1, 1), ("bernoulli", "poisson"))
    rng = make_rng(8, 4)
    u = 0.3 * rng.standard_normal((5, lay.k_total))
    v = 0.3 * rng.standard_normal((lay.k_total, lay.d_total))
    v[lay.zero_mask] = 0.0
    state = FactorState(u, v)
    theta = assemble_theta(state, lay)
    obs = dense_observations(lay, theta, seed=82)
    assert log_likelihood(obs, state, lay) == pytest.approx(
        log_likelihood_theta(obs, theta, lay), rel=1e-12)


def test_loglik_grad_theta_is_masked_residual():
    lay = make_layout("epca", 3, 1, "poisson")
    rng = make_rng(8, 5)
    theta = 0.4 * rng.standard_normal((4, 3))
    obs = dense_observations(lay, theta, seed=83)
    observed = obs.observed.copy()
    observed[0, 0] = False
    obs = obs.with_mask(observed)
    g = loglik_grad_theta(obs, theta, lay)
    expect = np.where(observed, obs.x - np.exp(theta), 0.0)
    assert np.allclose(g, expect, atol=1e-12)
    assert g[0, 0] == 0.0


def test_theta_in_domain_checks_families():
    lay = make_layout("epls", (1, 1), (1, 1), ("exponential", "gaussian"))
    assert theta_in_domain(np.array([[-1.0, 5.0]]), lay)
    assert not theta_in_domain(np.array([[1.0, 5.0]]), lay)


def test_log_pdf_sum_at_masked_subset():
    lay = make_layout("epca", 2, 1, "bernoulli")
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    obs = ObservationSet(x, np.ones_like(x, dtype=bool),
                         lay.view_widths, lay.families)
    theta = np.zeros((2, 2))
    mask = np.array([[True, False], [False, False]])
    assert log_pdf_sum_at(obs, theta, lay, mask) == pytest.approx(
        -LOG2, rel=1e-12)
    empty = np.zeros((2, 2), dtype=bool)
    assert log_pdf_sum_at(obs, theta, lay, empty) == 0.0
    with pytest.raises(ShapeError):
        log_pdf_sum_at(obs, theta, lay, np.ones((3, 2), dtype=bool))


# ------------------------------------------------------------ observations

def test_observation_set_validates():
    with pytest.raises(ShapeError):
        ObservationSet(np.zeros((2, 3)), np.ones((2, 2), dtype=bool),
                       (3, 0), ("gaussian",))
    with pytest.raises(ShapeError):
        ObservationSet(np.zeros((2, 3)), np.ones((2, 3), dtype=bool),
                       (2, 0), ("gaussian",))
    with pytest.raises(ValueError):
        ObservationSet(np.array([[0.5]]), np.array([[True]]),
                       (1, 0), ("bernoulli",))
    # out-of-support values are fine when masked out
    ObservationSet(np.array([[0.5]]), np.array([[False]]),
                   (1, 0), ("bernoulli",))
    with pytest.raises(ValueError):
        ObservationSet(np.array([[np.nan]]), np.array([[True]]),
                       (1, 0), ("gaussian",))


def test_subset_rows_and_view_cols():
    obs = ObservationSet(np.arange(12.0).reshape(3, 4),
                         np.ones((3, 4), dtype=bool),
                         (1, 3), ("gaussian", "gaussian"))
    sub = obs.subset_rows(np.array([0, 2]))
    assert np.array_equal(sub.x, obs.x[[0, 2]])
    assert obs.view_cols(0) == slice(0, 1)
    assert obs.view_cols(1) == slice(1, 4)


def test_load_observations_round_trip(tmp_path):
    x = np.array([[1.0, 0.0, 2.0], [0.0, 1.0, np.nan]])
    csv = tmp_path / "data.csv"
    with open(csv, "w") as fh:
        fh.write("t,f1,f2\n1,0,2\n0,1,NA\n")
    desc = tmp_path / "desc.json"
    desc.write_text(json.dumps({
        "view_widths": [1, 2],
        "families": ["bernoulli", "poisson"],
    }))
    obs = load_observations(csv, desc)
    assert obs.x.shape == (2, 3)
    assert obs.observed[1, 2] == False  # noqa: E712
    assert obs.observed.sum() == 5
    assert np.array_equal(obs.x[0], x[0])
    assert obs.families[0].name == "bernoulli"
    assert obs.families[1].name == "poisson"
