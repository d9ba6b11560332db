import dataclasses
import json

import numpy as np
import numpy.testing as npt
import pytest

import oracles as oc
from gravity_ppml import bias
from gravity_ppml.bias import (
    BiasObjects,
    CorrectionReport,
    analytical_bias_correct,
    bias_reexpressed,
    build_bias_objects,
    compute_B_D,
    compute_W,
    corrected_vcov,
    score_hessian_objects,
    share_deviation_matrix,
    two_way_corrected_vcov,
    two_way_weights_scores,
    within_transform,
)
from gravity_ppml.errors import (
    BadFit,
    ProjectionNotConverged,
    RankDeficientFeBlock,
    SingularW,
)
from gravity_ppml.estimator import fit_three_way, fit_two_way
from gravity_ppml.linalg import psd_pinv
from gravity_ppml.panel import build_panel, prune_sample


def fitted(seed, N=5, T=3, K=1, family="poisson", p_missing=0.0):
    rng = np.random.default_rng(seed)
    panel, _ = oc.draw_identified_panel(rng, N=N, T=T, K=K, family=family, p_missing=p_missing)
    return panel, fit_three_way(panel)


def center_per_pair(x_tilde, present):
    """Remove the per-pair mean over present cells (gauge fixing)."""
    out = x_tilde.copy()
    for p in range(x_tilde.shape[0]):
        m = present[p]
        out[p, m] -= out[p, m].mean(axis=0)
        out[p, ~m] = 0.0
    return out


def synthetic_exact_fit(panel, fit):
    """Copy of a fit whose outcomes equal its fitted means cell by cell."""
    arrays = dataclasses.replace(fit.arrays, y=fit.arrays.lam.copy())
    return dataclasses.replace(fit, arrays=arrays)


# ---------------------------------------------------------------------------
# score_hessian_objects
# ---------------------------------------------------------------------------


def test_two_period_scalar_blocks():
    panel, fit = fitted(11, N=5, T=2, family="lognormal")
    o = score_hessian_objects(panel, fit)
    th1, th2 = o.theta_hat[:, 0], o.theta_hat[:, 1]
    y1, y2 = o.y[:, 0], o.y[:, 1]
    s = th2 * y1 - th1 * y2
    npt.assert_allclose(o.S_hat[:, 0], s, atol=1e-12)
    npt.assert_allclose(o.S_hat[:, 1], -s, atol=1e-12)
    npt.assert_allclose(o.H_hat[:, 0, 0], th1 * th2 * (y1 + y2), atol=1e-12)
    npt.assert_allclose(o.Hbar_hat[:, 0, 0], th1 * o.lam[:, 1], atol=1e-12)


def test_outcome_equal_to_mean_collapses_blocks():
    panel, fit = fitted(12, N=5, T=3)
    o = score_hessian_objects(panel, synthetic_exact_fit(panel, fit))
    npt.assert_allclose(o.S_hat, 0.0, atol=1e-10)
    npt.assert_allclose(o.H_hat, o.Hbar_hat, atol=1e-12)


def test_derivative_blocks_match_finite_differences():
    panel, fit = fitted(13, N=5, T=4, family="lognormal")
    o = score_hessian_objects(panel, fit)
    for p in range(min(o.n_pairs, 5)):
        xi = np.log(o.lam[p])
        y = o.y[p]
        npt.assert_allclose(o.S_hat[p], oc.fd_score(xi, y), atol=1e-6)
        npt.assert_allclose(o.H_hat[p], -oc.fd_hessian(xi, y), atol=1e-6)
        lam_as_y = o.lam[p]
        npt.assert_allclose(
            o.Hbar_hat[p], -oc.fd_hessian(xi, lam_as_y), atol=1e-6
        )
        third = oc.fd_third(xi, lam_as_y)
        ratio = o.lam[p].sum() / lam_as_y.sum()
        npt.assert_allclose(o.G_bar_hat[p], ratio * third, atol=1e-5)


def test_objects_reject_nonpositive_mean():
    panel, fit = fitted(14, N=4, T=2)
    lam = fit.arrays.lam.copy()
    lam[0, 0] = 0.0
    bad = dataclasses.replace(fit, arrays=dataclasses.replace(fit.arrays, lam=lam))
    with pytest.raises(BadFit):
        score_hessian_objects(panel, bad)


def test_objects_invariants():
    panel, fit = fitted(15, N=6, T=3, K=2, p_missing=0.1)
    o = build_bias_objects(panel, fit)
    scale = 1.0 + np.abs(o.y).max()
    npt.assert_array_less(np.abs(o.S_hat.sum(axis=1)), 1e-12 * scale)
    npt.assert_array_less(np.abs(o.H_hat.sum(axis=2)).max(axis=(1,)), 1e-12 * scale)
    npt.assert_array_less(np.abs(o.Hbar_hat.sum(axis=2)).max(axis=(1,)), 1e-12 * scale)
    for p in range(o.n_pairs):
        Hb = o.Hbar_hat[p]
        npt.assert_allclose(Hb, Hb.T, atol=1e-12 * scale)
        ev = np.linalg.eigvalsh(Hb)
        assert ev.min() >= -1e-10 * max(ev.max(), 1e-300)
        r = int((ev > 1e-12 * max(ev.max(), 1e-300)).sum())
        tp = int(o.present[p].sum())
        assert r <= max(tp - 1, 0)


def test_score_equals_share_deviation_times_outcome():
    panel, fit = fitted(16, N=5, T=3)
    o = score_hessian_objects(panel, fit)
    M = share_deviation_matrix(o.theta_hat, o.present)
    npt.assert_allclose(np.einsum("pts,ps->pt", M, o.y), o.S_hat, atol=1e-10)


def test_equal_mean_share_deviation_matrix():
    theta = np.full((1, 4), 0.25)
    present = np.ones((1, 4), dtype=bool)
    M = share_deviation_matrix(theta, present)
    npt.assert_allclose(M[0], np.eye(4) - 0.25, atol=1e-15)


# ---------------------------------------------------------------------------
# within_transform
# ---------------------------------------------------------------------------


def test_within_foc_both_sides():
    panel, fit = fitted(21, N=6, T=3, K=2, p_missing=0.1)
    o = score_hessian_objects(panel, fit)
    xt = within_transform(panel, o.Hbar_hat)
    img = np.einsum("pts,psk->ptk", o.Hbar_hat, xt)
    scale = 1.0 + np.abs(o.Hbar_hat).max() * np.abs(o.x).max()
    for i in range(o.n_exporters):
        npt.assert_array_less(np.abs(img[o.exp_idx == i].sum(axis=0)), 1e-9 * scale)
    for j in range(o.n_importers):
        npt.assert_array_less(np.abs(img[o.imp_idx == j].sum(axis=0)), 1e-9 * scale)


def test_within_matches_normal_equations():
    rng = np.random.default_rng(22)
    panel, _ = oc.draw_identified_panel(rng, N=3, T=2, K=1, family="lognormal")
    fit = fit_three_way(panel)
    o = score_hessian_objects(panel, fit)
    xt = within_transform(panel, o.Hbar_hat)
    ref = oc.within_lstsq(
        o.x, o.Hbar_hat, o.exp_idx, o.imp_idx, o.n_exporters, o.n_importers, o.present
    )
    npt.assert_allclose(
        center_per_pair(xt, o.present), center_per_pair(ref, o.present), atol=1e-10
    )
    npt.assert_allclose(
        np.einsum("pts,psk->ptk", o.Hbar_hat, xt),
        np.einsum("pts,psk->ptk", o.Hbar_hat, ref),
        atol=1e-10,
    )


def test_within_invariant_to_absorbable_shifts():
    panel, fit = fitted(23, N=5, T=3, K=1)
    o = score_hessian_objects(panel, fit)
    xt = within_transform(panel, o.Hbar_hat)
    rng = np.random.default_rng(5)
    a_shift = rng.normal(size=(o.n_exporters, o.T))
    g_shift = rng.normal(size=(o.n_importers, o.T))
    x2 = o.x + (a_shift[o.exp_idx] + g_shift[o.imp_idx])[:, :, None]
    xt2 = bias._within_transform_arrays(
        x2, o.Hbar_hat, o.exp_idx, o.imp_idx, o.n_exporters, o.n_importers, o.present
    )
    npt.assert_allclose(
        center_per_pair(xt2, o.present), center_per_pair(xt, o.present), atol=1e-8
    )


def test_within_constant_regressor_has_null_image():
    panel, fit = fitted(24, N=4, T=3, K=1)
    o = score_hessian_objects(panel, fit)
    x_const = np.ones_like(o.x) * 2.5
    xt = bias._within_transform_arrays(
        x_const, o.Hbar_hat, o.exp_idx, o.imp_idx, o.n_exporters, o.n_importers, o.present
    )
    img = np.einsum("pts,psk->ptk", o.Hbar_hat, xt)
    npt.assert_allclose(img, 0.0, atol=1e-9)


def test_within_projection_not_converged():
    panel, fit = fitted(25, N=6, T=3, K=1)
    o = score_hessian_objects(panel, fit)
    with pytest.raises(ProjectionNotConverged):
        within_transform(panel, o.Hbar_hat, method="alternating", max_sweeps=1)


def test_alternating_agrees_with_direct():
    panel, fit = fitted(26, N=5, T=3, K=2)
    o = score_hessian_objects(panel, fit)
    xt_d = within_transform(panel, o.Hbar_hat, method="direct")
    xt_a = within_transform(panel, o.Hbar_hat, method="alternating")
    npt.assert_allclose(
        center_per_pair(xt_a, o.present), center_per_pair(xt_d, o.present), atol=1e-8
    )


# ---------------------------------------------------------------------------
# compute_W
# ---------------------------------------------------------------------------


def test_w_zero_for_zero_input():
    Hb = np.stack([np.eye(3)] * 4)
    npt.assert_allclose(compute_W(np.zeros((4, 3, 2)), Hb), np.zeros((2, 2)))


def test_w_two_period_scalar():
    panel, fit = fitted(27, N=5, T=2, family="lognormal")
    o = build_bias_objects(panel, fit)
    dx = o.x_tilde[:, 0, 0] - o.x_tilde[:, 1, 0]
    w_scalar = (dx**2 * o.theta_hat[:, 0] * o.lam[:, 1]).mean()
    npt.assert_allclose(compute_W(o.x_tilde, o.Hbar_hat)[0, 0], w_scalar, rtol=1e-12)


def test_w_matches_block_assembly():
    panel, fit = fitted(28, N=5, T=3, K=2)
    o = build_bias_objects(panel, fit)
    P, T, K = o.x_tilde.shape
    Xv = o.x_tilde.reshape(P * T, K)
    Hv = np.zeros((P * T, P * T))
    for p in range(P):
        Hv[p * T:(p + 1) * T, p * T:(p + 1) * T] = o.Hbar_hat[p]
    npt.assert_allclose(compute_W(o.x_tilde, o.Hbar_hat), Xv.T @ Hv @ Xv / P, rtol=1e-12)


# ---------------------------------------------------------------------------
# compute_B_D and the alternative route
# ---------------------------------------------------------------------------


def test_b_d_zero_at_zero_score():
    panel, fit = fitted(31, N=5, T=3)
    o = build_bias_objects(panel, synthetic_exact_fit(panel, fit))
    B, D = compute_B_D(o)
    npt.assert_allclose(B, 0.0, atol=1e-12)
    npt.assert_allclose(D, 0.0, atol=1e-12)


def test_b_d_two_period_scalar_route():
    for seed in (32, 33, 34):
        panel, fit = fitted(seed, N=5, T=2, K=1, family="lognormal")
        o = build_bias_objects(panel, fit)
        B, D = compute_B_D(o)
        B_ref, D_ref = oc.t2_scalar_bias(
            o.theta_hat, o.lam, o.y, o.x_tilde,
            o.exp_idx, o.imp_idx, o.n_exporters, o.n_importers,
        )
        npt.assert_allclose(B, B_ref, atol=1e-10)
        npt.assert_allclose(D, D_ref, atol=1e-10)


def test_b_d_matches_reexpressed_route():
    for seed, kwargs in (
        (35, dict(N=5, T=3, K=1)),
        (36, dict(N=6, T=4, K=2, p_missing=0.1)),
        (37, dict(N=5, T=2, K=1, family="lognormal")),
    ):
        panel, fit = fitted(seed, **kwargs)
        o = build_bias_objects(panel, fit)
        B, D = compute_B_D(o)
        npt.assert_allclose(bias_reexpressed(o, side="exporter"), B, atol=1e-10)
        npt.assert_allclose(bias_reexpressed(o, side="importer"), D, atol=1e-10)


def test_rank_deficient_block_reported():
    # exporter c0 only has single-period pairs, so its pooled curvature
    # block is zero while two of its cells are occupied
    rng = np.random.default_rng(38)
    records = []
    for i in range(1, 4):
        for j in range(4):
            if i == j:
                continue
            for t in (0, 1):
                records.append(
                    (f"c{i}", f"c{j}", t, float(rng.poisson(3.0) + 1), float(rng.normal()))
                )
    records.append(("c0", "c1", 0, 2.0, 0.3))
    records.append(("c0", "c2", 1, 3.0, -0.4))
    panel = build_panel(records)
    pruned, _ = prune_sample(panel)
    fit = fit_three_way(pruned)
    o = score_hessian_objects(pruned, fit)
    o.x_tilde = within_transform(pruned, o.Hbar_hat)
    with pytest.raises(RankDeficientFeBlock) as err:
        compute_B_D(o)
    assert "c0" in str(err.value)


def test_correction_permutation_equivariance():
    panel, fit = fitted(39, N=5, T=3, K=1)
    o = build_bias_objects(panel, fit)
    rep = analytical_bias_correct(fit, o)

    perm = {"c0": "z9", "c1": "a0", "c2": "m5", "c3": "k2", "c4": "b7"}
    records = []
    for blk in panel.pairs:
        ex, im = panel.exporters[blk.i], panel.importers[blk.j]
        for t in np.nonzero(blk.present)[0]:
            records.append(
                (perm.get(ex, ex), perm.get(im, im), panel.periods[t], blk.y[t], *blk.x[t])
            )
    panel2 = build_panel(records, regressor_names=list(panel.regressor_names))
    fit2 = fit_three_way(panel2)
    rep2 = analytical_bias_correct(fit2, build_bias_objects(panel2, fit2))
    npt.assert_allclose(rep2.beta_uncorrected, rep.beta_uncorrected, atol=1e-9)
    npt.assert_allclose(rep2.correction, rep.correction, atol=1e-9)


# ---------------------------------------------------------------------------
# pseudoinverse structure
# ---------------------------------------------------------------------------


def test_pinv_identities_and_null_space():
    panel, fit = fitted(41, N=5, T=3, K=1, p_missing=0.1)
    o = score_hessian_objects(panel, fit)
    for i in range(o.n_exporters):
        A = o.Hbar_hat[o.exp_idx == i].sum(axis=0)
        Ainv, rank = psd_pinv(A)
        nrm = np.linalg.norm(A)
        npt.assert_allclose(A @ Ainv @ A, A, atol=1e-10 * nrm)
        npt.assert_allclose(Ainv @ A @ Ainv, Ainv, atol=1e-10 * max(np.linalg.norm(Ainv), 1.0))
        npt.assert_allclose(Ainv, Ainv.T, atol=1e-12 * max(np.linalg.norm(Ainv), 1.0))
        npt.assert_allclose(Ainv @ np.ones(o.T), 0.0, atol=1e-10 * max(np.linalg.norm(Ainv), 1.0))


# ---------------------------------------------------------------------------
# analytical_bias_correct
# ---------------------------------------------------------------------------


def test_correction_zero_when_aggregates_zero():
    panel, fit = fitted(42, N=5, T=3)
    o = build_bias_objects(panel, synthetic_exact_fit(panel, fit))
    rep = analytical_bias_correct(fit, o)
    npt.assert_allclose(rep.beta_analytical, fit.beta, atol=1e-10)
    npt.assert_allclose(rep.correction, 0.0, atol=1e-10)


def test_correction_exact_relation():
    panel, fit = fitted(43, N=6, T=3, K=2)
    rep = analytical_bias_correct(fit, build_bias_objects(panel, fit))
    npt.assert_array_equal(rep.beta_analytical, rep.beta_uncorrected - rep.correction)
    assert "W_condition" in rep.diagnostics


def test_correction_singular_w():
    # a regressor that is constant within every pair is annihilated by the
    # weighted within-transform, so the pooled curvature degenerates
    panel, fit = fitted(44, N=4, T=2)
    a = fit.arrays
    counts = np.maximum(a.present.sum(axis=1, keepdims=True), 1)
    x_mean = np.where(a.present[..., None], a.x, 0.0).sum(axis=1, keepdims=True)
    x_const = np.broadcast_to(x_mean / counts[..., None], a.x.shape).copy()
    fake = dataclasses.replace(fit, arrays=dataclasses.replace(a, x=x_const))
    o = build_bias_objects(panel, fake)
    with pytest.raises(SingularW):
        analytical_bias_correct(fake, o)


# ---------------------------------------------------------------------------
# corrected_vcov
# ---------------------------------------------------------------------------


def test_corrected_vcov_matches_dense_oracle():
    rng = np.random.default_rng(45)
    panel, _ = oc.draw_identified_panel(rng, N=4, T=2, K=1)
    fit = fit_three_way(panel)
    o = build_bias_objects(panel, fit)
    rep = corrected_vcov(panel, fit, o)
    V_ref = oc.corrected_vcov_dense(
        o.x_tilde, o.Hbar_hat, o.S_hat, o.present,
        o.exp_idx, o.imp_idx, o.n_exporters, o.n_importers,
    )
    npt.assert_allclose(rep.V_corrected, V_ref, atol=1e-9 * max(1.0, np.abs(V_ref).max()))


def test_corrected_vcov_shapes_and_psd():
    panel, fit = fitted(46, N=6, T=3, K=2, p_missing=0.1)
    o = build_bias_objects(panel, fit)
    rep = corrected_vcov(panel, fit, o)
    for V in (rep.V_uncorrected, rep.V_corrected):
        npt.assert_allclose(V, V.T, atol=1e-13)
        ev = np.linalg.eigvalsh(V)
        assert ev.min() >= -1e-10 * max(ev.max(), 1e-300)
    npt.assert_allclose(rep.se_corrected, np.sqrt(np.diag(rep.V_corrected)))
    assert np.all(rep.se_corrected >= rep.se_uncorrected * 0.5)
    assert rep.diagnostics["n_kernel_fallbacks"] == 0
    assert rep.diagnostics["phi_rank"] > 0


def test_kernel_identity_reduces_to_plain_meat():
    rng = np.random.default_rng(47)
    T = 3
    Kmat = np.stack([np.eye(T)] * 5)
    rhs = rng.normal(size=(5, T))
    sol, fallback = bias._solve_kernel(Kmat, rhs)
    npt.assert_allclose(sol, rhs, atol=1e-14)
    assert fallback == []


def test_kernel_fallback_counter():
    Kmat = np.stack([np.eye(2), np.array([[1.0, 0.0], [0.0, 0.0]])])
    rhs = np.array([[1.0, 2.0], [3.0, 4.0]])
    sol, fallback = bias._solve_kernel(Kmat, rhs)
    assert fallback == [1]
    npt.assert_allclose(sol[1], rhs[1])
    npt.assert_allclose(sol[0], rhs[0])


def test_corrected_vcov_cg_matches_dense():
    panel, fit = fitted(48, N=7, T=3, K=1)
    o = build_bias_objects(panel, fit)
    V0_d, Vu_d, diag_d = bias._corrected_vcov_core(
        o.x_tilde, o.Hbar_hat, o.S_hat, o.present,
        o.exp_idx, o.imp_idx, o.n_exporters, o.n_importers, dense_limit=10**9,
    )
    V0_c, Vu_c, diag_c = bias._corrected_vcov_core(
        o.x_tilde, o.Hbar_hat, o.S_hat, o.present,
        o.exp_idx, o.imp_idx, o.n_exporters, o.n_importers, dense_limit=0,
    )
    npt.assert_allclose(V0_c, V0_d, rtol=1e-8)
    npt.assert_allclose(Vu_c, Vu_d, rtol=1e-7)


# ---------------------------------------------------------------------------
# two-way corrected variance
# ---------------------------------------------------------------------------


def make_two_way_panel(N, T, rng):
    records = []
    for i in range(N):
        for j in range(N):
            if i == j:
                continue
            for t in range(T):
                x = rng.normal()
                lam = np.exp(rng.normal(0, 0.3) + x)
                s2 = 1.0 / lam
                v = np.log1p(s2)
                w = np.exp(-0.5 * v + np.sqrt(v) * rng.normal())
                records.append((f"e{i}", f"m{j}", t, lam * w, x))
    panel = build_panel(records)
    pruned, _ = prune_sample(panel)
    return pruned


def test_two_way_corrected_matches_dense_oracle():
    rng = np.random.default_rng(51)
    for N, T in ((4, 1), (5, 2)):
        pruned = make_two_way_panel(N, T, rng)
        fit = fit_two_way(pruned)
        rep = two_way_corrected_vcov(pruned, fit)
        a = fit.arrays
        weights, scores = two_way_weights_scores(fit)
        xt = oc.within_lstsq(
            a.x, weights, a.exp_idx, a.imp_idx, len(a.exporters), len(a.importers), a.present
        )
        V_ref = oc.corrected_vcov_dense(
            xt, weights, scores, a.present,
            a.exp_idx, a.imp_idx, len(a.exporters), len(a.importers),
        )
        npt.assert_allclose(rep.V_corrected, V_ref, atol=1e-9 * max(1.0, np.abs(V_ref).max()))
        npt.assert_allclose(rep.V_uncorrected, rep.V_uncorrected.T, atol=1e-13)


def test_two_way_corrected_mc_property():
    rng = np.random.default_rng(52)
    N, reps = 12, 200
    betas, se_u, se_c = [], [], []
    for _ in range(reps):
        alpha = rng.normal(0, 0.25, N)
        gamma = rng.normal(0, 0.25, N)
        records = []
        for i in range(N):
            for j in range(N):
                if i == j:
                    continue
                x = rng.normal()
                lam = np.exp(alpha[i] + gamma[j] + x)
                s2 = 1.0 / lam
                v = np.log1p(s2)
                w = np.exp(-0.5 * v + np.sqrt(v) * rng.normal())
                records.append((f"e{i}", f"m{j}", 0, lam * w, x))
        panel = build_panel(records)
        fit = fit_two_way(panel)
        rep = two_way_corrected_vcov(panel, fit)
        betas.append(fit.beta[0])
        se_u.append(rep.se_uncorrected[0])
        se_c.append(rep.se_corrected[0])
    sd = np.std(betas, ddof=1)
    r_u = np.mean(se_u) / sd
    r_c = np.mean(se_c) / sd
    assert abs(r_c - 1.0) < abs(r_u - 1.0)
    assert r_c > r_u


# ---------------------------------------------------------------------------
# report serialization
# ---------------------------------------------------------------------------


def test_report_serialization_round_trip():
    panel, fit = fitted(53, N=5, T=3, K=2)
    o = build_bias_objects(panel, fit)
    rep = analytical_bias_correct(fit, o)
    rep = corrected_vcov(panel, fit, o, report=rep)
    blob = rep.to_json()
    parsed = json.loads(blob)
    npt.assert_array_equal(parsed["beta_uncorrected"], rep.beta_uncorrected)
    npt.assert_array_equal(parsed["beta_analytical"], rep.beta_analytical)
    npt.assert_array_equal(parsed["se_corrected"], rep.se_corrected)
    text = rep.table()
    for name in rep.regressor_names:
        assert name in text
