"""Incidental-parameter bias correction and corrected clustered variance.

Everything here works on stacked per-pair arrays: scores and Hessian blocks
of the pair-profiled objective, the weighted within-transform of the
regressors, the two bias aggregates (exporter-time and importer-time side),
and the leverage-corrected sandwich variance. Absent cells are zero-padded
throughout; every formula below is exact under that padding.

Two independent computational routes to the exporter-side bias aggregate
are provided (`compute_B_D` from the per-pair derivative tensors,
`bias_reexpressed` from share-deviation matrix products) and must agree to
high precision; keeping both is a deliberate cross-check, do not collapse
them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import special

from .errors import (
    BadFit,
    BadValue,
    ProjectionNotConverged,
    RankDeficientFeBlock,
    SingularW,
)
from .linalg import (
    PINV_RTOL,
    projected_cg,
    psd_pinv,
    solve_or_singular,
    weighted_column_spread,
)
from .panel import PanelData

__all__ = [
    "BiasObjects",
    "CorrectionReport",
    "score_hessian_objects",
    "within_transform",
    "compute_W",
    "compute_B_D",
    "bias_reexpressed",
    "analytical_bias_correct",
    "corrected_vcov",
    "two_way_corrected_vcov",
    "two_way_weights_scores",
    "build_bias_objects",
]

_DENSE_PHI_LIMIT = 2000
_DENSE_WITHIN_LIMIT = 3000


@dataclass
class BiasObjects:
    """Per-pair derivative blocks of the pair-profiled objective plus aggregates.

    Stacked shapes: ``S_hat`` (P,T), ``H_hat``/``Hbar_hat`` (P,T,T),
    ``G_bar_hat`` (P,T,T,T), ``theta_hat`` (P,T), ``x_tilde`` (P,T,K).
    ``H_hat`` weights the share curvature by the pair's outcome total,
    ``Hbar_hat`` and ``G_bar_hat`` by its fitted-mean total. Aggregates are
    filled by :func:`build_bias_objects`.
    """

    S_hat: np.ndarray
    H_hat: np.ndarray
    Hbar_hat: np.ndarray
    G_bar_hat: np.ndarray
    theta_hat: np.ndarray
    y: np.ndarray
    lam: np.ndarray
    x: np.ndarray
    present: np.ndarray
    exp_idx: np.ndarray
    imp_idx: np.ndarray
    exporters: tuple
    importers: tuple
    x_tilde: np.ndarray | None = None
    W_hat: np.ndarray | None = None
    Omega_hat: np.ndarray | None = None
    B_hat: np.ndarray | None = None
    D_hat: np.ndarray | None = None

    @property
    def n_pairs(self) -> int:
        return self.S_hat.shape[0]

    @property
    def T(self) -> int:
        return self.S_hat.shape[1]

    @property
    def n_exporters(self) -> int:
        return len(self.exporters)

    @property
    def n_importers(self) -> int:
        return len(self.importers)


@dataclass
class CorrectionReport:
    """Point estimates, corrections, and variances for one fitted model."""

    regressor_names: tuple
    beta_uncorrected: np.ndarray
    beta_analytical: np.ndarray | None = None
    beta_jackknife: np.ndarray | None = None
    correction: np.ndarray | None = None
    V_uncorrected: np.ndarray | None = None
    V_corrected: np.ndarray | None = None
    se_uncorrected: np.ndarray | None = None
    se_corrected: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def conv(v):
            if isinstance(v, np.ndarray):
                return v.tolist()
            if isinstance(v, (np.floating, np.integer)):
                return v.item()
            if isinstance(v, dict):
                return {k: conv(x) for k, x in v.items()}
            if isinstance(v, (list, tuple)):
                return [conv(x) for x in v]
            return v

        out = {
            "regressor_names": list(self.regressor_names),
            "beta_uncorrected": conv(self.beta_uncorrected),
            "beta_analytical": conv(self.beta_analytical),
            "beta_jackknife": conv(self.beta_jackknife),
            "correction": conv(self.correction),
            "V_uncorrected": conv(self.V_uncorrected),
            "V_corrected": conv(self.V_corrected),
            "se_uncorrected": conv(self.se_uncorrected),
            "se_corrected": conv(self.se_corrected),
            "diagnostics": conv(self.diagnostics),
            "meta": conv(self.meta),
        }
        return out

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    def table(self) -> str:
        """Human-readable coefficient table with significance stars."""
        lines = []
        header = f"{'regressor':<16}{'estimator':<14}{'coef':>14}{'se(unc)':>12}{'se(corr)':>12}  sig"
        lines.append(header)
        lines.append("-" * len(header))
        rows = [("uncorrected", self.beta_uncorrected)]
        if self.beta_analytical is not None:
            rows.append(("analytical", self.beta_analytical))
        if self.beta_jackknife is not None:
            rows.append(("jackknife", self.beta_jackknife))
        for k, name in enumerate(self.regressor_names):
            for label, beta in rows:
                se_u = None if self.se_uncorrected is None else self.se_uncorrected[k]
                se_c = None if self.se_corrected is None else self.se_corrected[k]
                se_for_stars = se_c if se_c is not None else se_u
                stars = _stars(beta[k], se_for_stars)
                fu = f"{se_u:>12.6g}" if se_u is not None else f"{'-':>12}"
                fc = f"{se_c:>12.6g}" if se_c is not None else f"{'-':>12}"
                lines.append(
                    f"{name:<16}{label:<14}{beta[k]:>14.8g}{fu}{fc}  {stars}"
                )
        lines.append("")
        lines.append("significance: * p<0.10, ** p<0.05, *** p<0.01 (normal, corrected se when available)")
        return "\n".join(lines)


def _stars(coef: float, se: float | None) -> str:
    if se is None or not np.isfinite(se) or se <= 0:
        return ""
    z = abs(coef) / se
    if z > float(special.ndtri(1 - 0.01 / 2)):
        return "***"
    if z > float(special.ndtri(1 - 0.05 / 2)):
        return "**"
    if z > float(special.ndtri(1 - 0.10 / 2)):
        return "*"
    return ""


def _accumulate(codes: np.ndarray, n: int, arr: np.ndarray) -> np.ndarray:
    out = np.zeros((n,) + arr.shape[1:])
    np.add.at(out, codes, arr)
    return out


def _cell_layout(present: np.ndarray, codes: np.ndarray, n_country: int):
    """Occupied (country, period) cells and their dense column numbering."""
    occ_f = _accumulate(codes, n_country, present.astype(float))
    occ = occ_f > 0
    col = -np.ones((n_country, present.shape[1]), dtype=np.int64)
    col[occ] = np.arange(int(occ.sum()))
    return occ, col


# ---------------------------------------------------------------------------
# per-pair derivative blocks
# ---------------------------------------------------------------------------


def score_hessian_objects(panel: PanelData, fit) -> BiasObjects:
    """Build the stacked per-pair derivative blocks at the fitted values.

    The score is the outcome's deviation from its share-allocated pair
    total; the two Hessian stacks are the share-curvature matrix scaled by
    the observed and the fitted pair total respectively; the third-derivative
    stack is the share tensor scaled by the fitted total.
    """
    if fit.model != "three-way":
        raise BadValue("per-pair bias objects are defined for the three-way model")
    if fit.family_q != 0.0:
        raise BadValue("bias corrections are defined for the Poisson family only")
    if not fit.converged:
        raise BadFit("bias objects require a converged fit")
    a = fit.arrays
    lam = a.lam
    present = a.present
    if np.any(lam[present] <= 0) or not np.all(np.isfinite(lam[present])):
        raise BadFit("fitted means must be positive and finite")

    y = a.y
    L = lam.sum(axis=1)
    Y = y.sum(axis=1)
    theta = lam / L[:, None]

    curv = -np.einsum("pt,ps->pts", theta, theta)
    P, T = theta.shape
    idx = np.arange(T)
    curv[:, idx, idx] += theta

    S = y - theta * Y[:, None]
    H = Y[:, None, None] * curv
    Hbar = L[:, None, None] * curv

    eye = np.eye(T)
    d3 = np.einsum("ts,tr->tsr", eye, eye)
    b1 = np.einsum("pt,tsr->ptsr", theta, d3)
    b2 = np.einsum("pt,pr,ts->ptsr", theta, theta, eye)
    b3 = np.einsum("pt,ps,tr->ptsr", theta, theta, eye)
    b4 = np.einsum("pt,ps,sr->ptsr", theta, theta, eye)
    b5 = 2.0 * np.einsum("pt,ps,pr->ptsr", theta, theta, theta)
    G_bar = -L[:, None, None, None] * (b1 - b2 - b3 - b4 + b5)

    return BiasObjects(
        S_hat=S,
        H_hat=H,
        Hbar_hat=Hbar,
        G_bar_hat=G_bar,
        theta_hat=theta,
        y=y,
        lam=lam,
        x=a.x,
        present=present,
        exp_idx=a.exp_idx,
        imp_idx=a.imp_idx,
        exporters=a.exporters,
        importers=a.importers,
    )


def share_deviation_matrix(theta: np.ndarray, present: np.ndarray) -> np.ndarray:
    """Stack of T x T matrices subtracting the share-weighted average.

    Row t of a pair's matrix is the t-th unit vector minus its share times
    the all-ones row, restricted to present periods. Multiplying the
    outcome vector from the left yields the per-pair score.
    """
    P, T = theta.shape
    M = np.zeros((P, T, T))
    idx = np.arange(T)
    M[:, idx, idx] = present
    M -= np.einsum("pt,ps->pts", theta, present.astype(float))
    return M


# ---------------------------------------------------------------------------
# weighted within-transform of the regressors
# ---------------------------------------------------------------------------


def within_transform(
    panel: PanelData,
    weight_blocks: np.ndarray,
    tol: float = 1e-11,
    method: str = "auto",
    max_sweeps: int = 50000,
) -> np.ndarray:
    """Residual of the regressors on exporter-time and importer-time effects.

    Minimizes the weight-quadratic distance between the regressors and an
    additive (exporter, period) + (importer, period) structure, per
    regressor. The first-order condition is that the weighted residuals sum
    to zero over importers for every exporter and vice versa.

    Parameters
    ----------
    weight_blocks : (P, T, T) positive-semidefinite stack
        Pair-level weight matrices (expected-Hessian blocks for the
        three-way model, diagonal fitted-mean blocks for the two-way one).
    method : {"auto", "direct", "alternating"}
        "direct" solves the stacked normal equations by pseudoinverse,
        "alternating" iterates block updates; "auto" picks "direct" when
        the stacked dimension is small.

    Raises
    ------
    ProjectionNotConverged
        When the first-order-condition residual cannot be brought below
        ``tol`` times the data scale.
    """
    st = panel.stacked()
    return _within_transform_arrays(
        st.x, weight_blocks, st.exp_idx, st.imp_idx,
        panel.n_exporters, panel.n_importers, st.present,
        tol=tol, method=method, max_sweeps=max_sweeps,
    )


def _within_transform_arrays(
    x, weights, exp_idx, imp_idx, Ne, Ni, present,
    tol=1e-11, method="auto", max_sweeps=50000,
):
    P, T, K = x.shape
    F = _accumulate(exp_idx, Ne, weights)
    Fg = _accumulate(imp_idx, Ni, weights)
    b_a = _accumulate(exp_idx, Ne, np.einsum("pts,psk->ptk", weights, x))
    b_g = _accumulate(imp_idx, Ni, np.einsum("pts,psk->ptk", weights, x))
    scale = 1.0 + max(np.abs(b_a).max(initial=0.0), np.abs(b_g).max(initial=0.0))

    if method == "auto":
        method = "direct" if (Ne + Ni) * T <= _DENSE_WITHIN_LIMIT else "alternating"

    if method == "direct":
        dim = (Ne + Ni) * T
        A = np.zeros((dim, dim))
        for i in range(Ne):
            A[i * T:(i + 1) * T, i * T:(i + 1) * T] = F[i]
        off = Ne * T
        for j in range(Ni):
            A[off + j * T:off + (j + 1) * T, off + j * T:off + (j + 1) * T] = Fg[j]
        for p in range(P):
            r0 = exp_idx[p] * T
            c0 = off + imp_idx[p] * T
            A[r0:r0 + T, c0:c0 + T] += weights[p]
            A[c0:c0 + T, r0:r0 + T] += weights[p].T
        rhs = np.concatenate([b_a.reshape(Ne * T, K), b_g.reshape(Ni * T, K)])
        Ap, _ = psd_pinv(A)
        u = Ap @ rhs
        a = u[:Ne * T].reshape(Ne, T, K)
        g = u[Ne * T:].reshape(Ni, T, K)
    else:
        Fp, _ = psd_pinv(F)
        Fgp, _ = psd_pinv(Fg)
        a = np.zeros((Ne, T, K))
        g = np.zeros((Ni, T, K))
        for _ in range(max_sweeps):
            rhs_a = b_a - _accumulate(
                exp_idx, Ne, np.einsum("pts,psk->ptk", weights, g[imp_idx])
            )
            a = np.einsum("its,isk->itk", Fp, rhs_a)
            rhs_g = b_g - _accumulate(
                imp_idx, Ni, np.einsum("pts,psk->ptk", weights, a[exp_idx])
            )
            g = np.einsum("jts,jsk->jtk", Fgp, rhs_g)
            xt = x - a[exp_idx] - g[imp_idx]
            foc_a = _accumulate(exp_idx, Ne, np.einsum("pts,psk->ptk", weights, xt))
            if np.abs(foc_a).max(initial=0.0) <= tol * scale:
                break

    xt = (x - a[exp_idx] - g[imp_idx]) * present[:, :, None]
    wf = np.einsum("pts,psk->ptk", weights, xt)
    foc = max(
        np.abs(_accumulate(exp_idx, Ne, wf)).max(initial=0.0),
        np.abs(_accumulate(imp_idx, Ni, wf)).max(initial=0.0),
    )
    if foc > tol * scale:
        raise ProjectionNotConverged(
            f"within-transform FOC residual {foc:.3e} above {tol:.1e} * scale ({method})"
        )
    return xt


# ---------------------------------------------------------------------------
# aggregates
# ---------------------------------------------------------------------------


def compute_W(x_tilde: np.ndarray, Hbar_hat: np.ndarray) -> np.ndarray:
    """Per-pair average curvature of the profiled objective in beta.

    Returns the K x K average of ``x_tilde' Hbar x_tilde`` over pairs;
    symmetric positive semidefinite.
    """
    P = x_tilde.shape[0]
    W = np.einsum("ptk,pts,psl->kl", x_tilde, Hbar_hat, x_tilde) / P
    return 0.5 * (W + W.T)


def _check_fe_ranks(ranks, occ, role, labels):
    expected = occ.sum(axis=1) - 1
    bad = np.nonzero(ranks < expected)[0]
    if bad.size:
        c = int(bad[0])
        raise RankDeficientFeBlock(
            f"{role} fixed-effect block for {labels[c]!r} has rank "
            f"{int(ranks[c])} < {int(expected[c])}",
            role=role,
            label=labels[c],
        )


def _bias_side(o: BiasObjects, codes: np.ndarray, n_country: int, role: str, labels):
    xt = o.x_tilde
    F = _accumulate(codes, n_country, o.Hbar_hat)
    Fp, ranks = psd_pinv(F)
    occ, _ = _cell_layout(o.present, codes, n_country)
    _check_fe_ranks(ranks, occ, role, labels)

    Hx = np.einsum("pts,psk->ptk", o.H_hat, xt)
    u = np.einsum("pts,ps->pt", Fp[codes], o.S_hat)
    term1 = np.einsum("pt,ptk->k", u, Hx)

    E = _accumulate(codes, n_country, np.einsum("pt,ps->pts", o.S_hat, o.S_hat))
    Gx = np.einsum("ptsr,prk->ptsk", o.G_bar_hat, xt)
    Gsum = _accumulate(codes, n_country, Gx)
    Pmat = np.einsum("its,isr,irq->itq", Fp, E, Fp)
    term2 = np.einsum("itsk,ist->k", Gsum, Pmat)

    return (-term1 + 0.5 * term2) / (n_country - 1)


def compute_B_D(objects: BiasObjects) -> tuple[np.ndarray, np.ndarray]:
    """Exporter-side and importer-side bias aggregates (K-vectors each).

    Each side pools its per-country inverse-curvature blocks against the
    score/curvature cross-moments and the third-derivative contraction,
    divided by that side's country count minus one.

    Raises ``RankDeficientFeBlock`` when some country's pooled curvature
    block has rank below its identified dimension (distinct present periods
    minus one).
    """
    if objects.x_tilde is None:
        raise BadValue("run the within-transform before the bias aggregates")
    B = _bias_side(
        objects, objects.exp_idx, objects.n_exporters, "exporter", objects.exporters
    )
    D = _bias_side(
        objects, objects.imp_idx, objects.n_importers, "importer", objects.importers
    )
    return B, D


def bias_reexpressed(objects: BiasObjects, side: str = "exporter") -> np.ndarray:
    """Exporter-side bias aggregate via share-deviation matrix products.

    Independent reformulation used purely as a cross-check of
    :func:`compute_B_D`: builds everything from the share-deviation matrix,
    the fitted means, and outer products of the share-deviated outcomes,
    without touching the stored score/Hessian/third-derivative stacks.
    """
    if objects.x_tilde is None:
        raise BadValue("run the within-transform before the bias aggregates")
    if side == "exporter":
        codes, n_country = objects.exp_idx, objects.n_exporters
        role, labels = "exporter", objects.exporters
    elif side == "importer":
        codes, n_country = objects.imp_idx, objects.n_importers
        role, labels = "importer", objects.importers
    else:
        raise BadValue(f"unknown side {side!r}")

    lam, y, present = objects.lam, objects.y, objects.present
    xt = objects.x_tilde
    L = lam.sum(axis=1)
    Y = y.sum(axis=1)
    theta = lam / L[:, None]
    M = share_deviation_matrix(theta, present)

    # pooled curvature via the deviation-matrix identity Hbar = M Lam M'
    Hbar_m = np.einsum("ptu,pu,psu->pts", M, lam, M)
    F = _accumulate(codes, n_country, Hbar_m)
    Fp, ranks = psd_pinv(F)
    occ, _ = _cell_layout(present, codes, n_country)
    _check_fe_ranks(ranks, occ, role, labels)

    xstar = np.einsum("pst,psk->ptk", M, xt)        # deviation-transposed regressors
    w = lam[:, :, None] * xstar                      # Lam M' x_tilde
    My = np.einsum("pts,ps->pt", M, y)

    q1 = np.einsum("pts,ps->pt", Fp[codes], My)
    term1 = -(Y / L)[:, None] * np.einsum("pt,ptk->pk", q1, w)

    E = _accumulate(codes, n_country, np.einsum("pt,ps->pts", My, My))
    Q = np.einsum("its,isr,irq->itq", Fp, E, Fp)
    term2 = np.einsum("pt,pts,psk->pk", lam, Q[codes], w) / L[:, None]

    return (term1.sum(axis=0) + term2.sum(axis=0)) / (n_country - 1)


def build_bias_objects(
    panel: PanelData, fit, method: str = "auto", tol: float = 1e-11
) -> BiasObjects:
    """Convenience: derivative blocks, within-transform, and all aggregates."""
    o = score_hessian_objects(panel, fit)
    o.x_tilde = _within_transform_arrays(
        o.x, o.Hbar_hat, o.exp_idx, o.imp_idx,
        o.n_exporters, o.n_importers, o.present,
        tol=tol, method=method,
    )
    o.W_hat = compute_W(o.x_tilde, o.Hbar_hat)
    o.B_hat, o.D_hat = compute_B_D(o)
    g = np.einsum("ptk,pt->pk", o.x_tilde, o.S_hat)
    o.Omega_hat = g.T @ g / o.n_pairs
    return o


# ---------------------------------------------------------------------------
# corrected point estimates
# ---------------------------------------------------------------------------


def analytical_bias_correct(fit, objects: BiasObjects, report: CorrectionReport | None = None) -> CorrectionReport:
    """Subtract the estimated first-order bias from the point estimates.

    The correction solves the pooled curvature against the two bias
    aggregates, each weighted by its own side's country count over that
    count minus one (so exporter and importer dimensions may differ).
    Raises ``SingularW`` when the pooled curvature is singular.
    """
    if objects.x_tilde is None or objects.B_hat is None or objects.D_hat is None:
        raise BadValue("objects incomplete; use build_bias_objects first")
    P = objects.n_pairs
    Ne, Ni = objects.n_exporters, objects.n_importers
    W_tot = P * (objects.W_hat if objects.W_hat is not None
                 else compute_W(objects.x_tilde, objects.Hbar_hat))
    W_inv = solve_or_singular(
        W_tot,
        SingularW("singular pooled curvature matrix"),
        col_scale=weighted_column_spread(
            objects.x, np.einsum("ptt->pt", objects.Hbar_hat)
        ),
    )
    correction = W_inv @ (Ne * objects.B_hat + Ni * objects.D_hat)
    if report is None:
        report = CorrectionReport(
            regressor_names=fit.arrays.regressor_names,
            beta_uncorrected=fit.beta.copy(),
        )
    report.beta_analytical = fit.beta - correction
    report.correction = correction
    eigs = np.linalg.eigvalsh(W_tot)
    report.diagnostics.setdefault("W_condition", float(eigs.max() / eigs.min()))
    return report


# ---------------------------------------------------------------------------
# corrected variance
# ---------------------------------------------------------------------------


def _phi_normal_matrix(weights, present, exp_idx, imp_idx, Ne, Ni):
    """Cell layout and pooled-block pieces of the FE normal matrix."""
    occ_a, col_a = _cell_layout(present, exp_idx, Ne)
    occ_g, col_g = _cell_layout(present, imp_idx, Ni)
    na = int(occ_a.sum())
    col_g_off = np.where(col_g >= 0, col_g + na, -1)
    F = _accumulate(exp_idx, Ne, weights)
    Fg = _accumulate(imp_idx, Ni, weights)
    return occ_a, col_a, occ_g, col_g_off, na, int(occ_g.sum()), F, Fg


def _phi_pinv_dense(weights, present, exp_idx, imp_idx, Ne, Ni):
    occ_a, col_a, occ_g, col_g, na, ng, F, Fg = _phi_normal_matrix(
        weights, present, exp_idx, imp_idx, Ne, Ni
    )
    dim = na + ng
    Wphi = np.zeros((dim, dim))
    for i in range(Ne):
        m = occ_a[i]
        c = col_a[i][m]
        Wphi[np.ix_(c, c)] += F[i][np.ix_(m, m)]
    for j in range(Ni):
        m = occ_g[j]
        c = col_g[j][m]
        Wphi[np.ix_(c, c)] += Fg[j][np.ix_(m, m)]
    P = weights.shape[0]
    for p in range(P):
        m = present[p]
        ca = col_a[exp_idx[p]][m]
        cg = col_g[imp_idx[p]][m]
        blk = weights[p][np.ix_(m, m)]
        Wphi[np.ix_(ca, cg)] += blk
        Wphi[np.ix_(cg, ca)] += blk.T
    Wp, rank = psd_pinv(Wphi)
    ca_all = col_a[exp_idx]
    cg_all = col_g[imp_idx]
    cam = np.clip(ca_all, 0, None)
    cgm = np.clip(cg_all, 0, None)
    D = (
        Wp[cam[:, :, None], cam[:, None, :]]
        + Wp[cam[:, :, None], cgm[:, None, :]]
        + Wp[cgm[:, :, None], cam[:, None, :]]
        + Wp[cgm[:, :, None], cgm[:, None, :]]
    )
    D *= present[:, :, None] * present[:, None, :]
    return D, {"phi_dim": dim, "phi_rank": int(rank), "phi_solver": "dense"}


def _phi_pinv_cg(weights, present, exp_idx, imp_idx, Ne, Ni):
    """Kernel FE-leverage blocks via projected conjugate gradients.

    Solves the FE normal equations for each pair's incidence rows instead
    of materializing the pseudoinverse; the projection removes the
    per-country constant and per-period translation null directions
    (valid on connected panels).
    """
    occ_a, col_a, occ_g, col_g, na, ng, F, Fg = _phi_normal_matrix(
        weights, present, exp_idx, imp_idx, Ne, Ni
    )
    dim = na + ng
    T = present.shape[1]

    def scatter(z):
        za = np.zeros((Ne, T))
        za[occ_a] = z[col_a[occ_a]]
        zg = np.zeros((Ni, T))
        zg[occ_g] = z[col_g[occ_g]]
        return za, zg

    def matvec(z):
        za, zg = scatter(z)
        out_a = np.einsum("its,is->it", F, za)
        out_a += _accumulate(
            exp_idx, Ne, np.einsum("pts,ps->pt", weights, zg[imp_idx])
        )
        out_g = np.einsum("jts,js->jt", Fg, zg)
        out_g += _accumulate(
            imp_idx, Ni, np.einsum("pts,ps->pt", weights, za[exp_idx])
        )
        return np.concatenate([out_a[occ_a], out_g[occ_g]])

    # structural null directions: a constant over each country's occupied
    # cells, plus per-period translations (+ on exporter cells, - on
    # importer cells of the same period); one overall redundancy, so the
    # orthonormalized basis has rank Ne + Ni + T - 1 on connected panels
    cols = []
    for i in range(Ne):
        v = np.zeros(dim)
        v[col_a[i][occ_a[i]]] = 1.0
        cols.append(v)
    for j in range(Ni):
        v = np.zeros(dim)
        v[col_g[j][occ_g[j]]] = 1.0
        cols.append(v)
    t_of_a = np.tile(np.arange(T), (Ne, 1))[occ_a]
    t_of_g = np.tile(np.arange(T), (Ni, 1))[occ_g]
    for t in range(T):
        cols.append(
            np.concatenate([(t_of_a == t).astype(float), -(t_of_g == t).astype(float)])
        )
    u, s, _ = np.linalg.svd(np.column_stack(cols), full_matrices=False)
    nulls = u[:, s > 1e-10 * s[0]].T

    def project(z):
        return z - nulls.T @ (nulls @ z)

    diag = np.concatenate([
        np.einsum("itt->it", F)[occ_a],
        np.einsum("jtt->jt", Fg)[occ_g],
    ])
    diag = np.where(diag > 0, diag, 1.0)

    P = weights.shape[0]
    D = np.zeros((P, T, T))
    for p in range(P):
        m = np.nonzero(present[p])[0]
        ca = col_a[exp_idx[p]][m]
        cg = col_g[imp_idx[p]][m]
        for t in m:
            rhs = np.zeros(dim)
            rhs[col_a[exp_idx[p]][t]] += 1.0
            rhs[col_g[imp_idx[p]][t]] += 1.0
            z = projected_cg(matvec, rhs, project, diag)
            D[p, t, m] = z[ca] + z[cg]
    D *= present[:, :, None] * present[:, None, :]
    return D, {"phi_dim": dim, "phi_rank": None, "phi_solver": "cg"}


def _solve_kernel(Kmat, rhs):
    """Per-pair kernel solves with identity fallback on singular blocks."""
    P = Kmat.shape[0]
    sol = np.empty_like(rhs)
    fallback = []
    try:
        cand = np.linalg.solve(Kmat, rhs[:, :, None])[:, :, 0]
        ok = np.isfinite(cand).all(axis=1)
        resid = np.abs(np.einsum("pts,ps->pt", Kmat, np.where(ok[:, None], cand, 0.0)) - rhs)
        ok &= resid.max(axis=1) <= 1e-8 * (1.0 + np.abs(rhs).max(axis=1))
        sol[ok] = cand[ok]
        bad = np.nonzero(~ok)[0]
    except np.linalg.LinAlgError:
        bad = np.arange(P)
    for p in bad:
        try:
            cand_p = np.linalg.solve(Kmat[p], rhs[p])
            if not np.isfinite(cand_p).all():
                raise np.linalg.LinAlgError
            sol[p] = cand_p
        except np.linalg.LinAlgError:
            sol[p] = rhs[p]
            fallback.append(int(p))
    return sol, fallback


def _corrected_vcov_core(
    x_tilde, weights, scores, present, exp_idx, imp_idx, Ne, Ni,
    dense_limit=_DENSE_PHI_LIMIT, col_scale=None,
):
    P, T, K = x_tilde.shape
    W_tot = np.einsum("ptk,pts,psl->kl", x_tilde, weights, x_tilde)
    W_inv = solve_or_singular(
        W_tot, SingularW("singular pooled curvature matrix"), col_scale=col_scale
    )

    occ_a, _ = _cell_layout(present, exp_idx, Ne)
    occ_g, _ = _cell_layout(present, imp_idx, Ni)
    dim = int(occ_a.sum() + occ_g.sum())
    if dim <= dense_limit:
        D_pair, diag_info = _phi_pinv_dense(weights, present, exp_idx, imp_idx, Ne, Ni)
    else:
        D_pair, diag_info = _phi_pinv_cg(weights, present, exp_idx, imp_idx, Ne, Ni)

    lev = np.einsum("ptk,kl,psl->pts", x_tilde, W_inv, x_tilde) + D_pair
    Kmat = -np.einsum("ptu,pus->pts", weights, lev)
    idx = np.arange(T)
    Kmat[:, idx, idx] += 1.0

    sol, fallback = _solve_kernel(Kmat, scores)
    g_corr = np.einsum("ptk,pt->pk", x_tilde, sol)
    g_plain = np.einsum("ptk,pt->pk", x_tilde, scores)

    Omega0 = g_plain.T @ g_plain
    V0 = W_inv @ Omega0 @ W_inv
    V0 = 0.5 * (V0 + V0.T)
    Omega_u = g_corr.T @ g_plain
    Vu = (P / (P - 1.0)) * (W_inv @ Omega_u @ W_inv)
    Vu = 0.5 * (Vu + Vu.T)
    diagnostics = {
        "kernel_fallback_pairs": fallback,
        "n_kernel_fallbacks": len(fallback),
        **diag_info,
    }
    return V0, Vu, diagnostics


def corrected_vcov(panel: PanelData, fit, objects: BiasObjects, report: CorrectionReport | None = None) -> CorrectionReport:
    """Leverage-corrected pair-clustered variance of the estimates.

    Each pair's score is premultiplied by the inverse of an identity minus
    the pair's own estimation leverage (through both the structural
    coefficients and the fixed effects) before entering the sandwich meat;
    the result is rescaled by pairs/(pairs-1). Pairs whose kernel block is
    numerically singular fall back to the uncorrected kernel and are
    counted in the diagnostics.
    """
    if objects.x_tilde is None:
        raise BadValue("objects incomplete; use build_bias_objects first")
    V0, Vu, diagnostics = _corrected_vcov_core(
        objects.x_tilde, objects.Hbar_hat, objects.S_hat, objects.present,
        objects.exp_idx, objects.imp_idx, objects.n_exporters, objects.n_importers,
        col_scale=weighted_column_spread(
            objects.x, np.einsum("ptt->pt", objects.Hbar_hat)
        ),
    )
    if report is None:
        report = CorrectionReport(
            regressor_names=fit.arrays.regressor_names,
            beta_uncorrected=fit.beta.copy(),
        )
    report.V_uncorrected = V0
    report.V_corrected = Vu
    report.se_uncorrected = np.sqrt(np.diag(V0))
    report.se_corrected = np.sqrt(np.diag(Vu))
    report.diagnostics.update(diagnostics)
    return report


def two_way_weights_scores(fit) -> tuple[np.ndarray, np.ndarray]:
    """Diagonal fitted-mean weight blocks and raw residual scores (two-way)."""
    a = fit.arrays
    P, T = a.lam.shape
    W = np.zeros((P, T, T))
    idx = np.arange(T)
    W[:, idx, idx] = a.lam
    scores = (a.y - a.lam) * a.present
    return W, scores


def two_way_corrected_vcov(panel: PanelData, fit, report: CorrectionReport | None = None) -> CorrectionReport:
    """Leverage-corrected variance for the model without pair effects.

    Same kernel construction as the three-way case with the diagonal
    fitted-mean blocks as weights and the raw residuals as scores, still
    clustered by pair.
    """
    if fit.model != "two-way":
        raise BadValue("two_way_corrected_vcov expects a two-way fit")
    if not fit.converged:
        raise BadFit("variance requires a converged fit")
    weights, scores = two_way_weights_scores(fit)
    a = fit.arrays
    x_tilde = _within_transform_arrays(
        a.x, weights, a.exp_idx, a.imp_idx,
        len(a.exporters), len(a.importers), a.present,
    )
    V0, Vu, diagnostics = _corrected_vcov_core(
        x_tilde, weights, scores, a.present,
        a.exp_idx, a.imp_idx, len(a.exporters), len(a.importers),
        col_scale=weighted_column_spread(a.x, np.einsum("ptt->pt", weights)),
    )
    if report is None:
        report = CorrectionReport(
            regressor_names=a.regressor_names,
            beta_uncorrected=fit.beta.copy(),
        )
    report.V_uncorrected = V0
    report.V_corrected = Vu
    report.se_uncorrected = np.sqrt(np.diag(V0))
    report.se_corrected = np.sqrt(np.diag(Vu))
    report.diagnostics.update(diagnostics)
    return report
