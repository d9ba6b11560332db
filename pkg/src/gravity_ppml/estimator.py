"""Pseudo-maximum-likelihood fitting of dyadic panels with fixed effects.

The three-way model has mean ``exp(x'beta + a_it + g_jt + e_ij)`` with
exporter-time, importer-time, and pair effects; the two-way model omits the
pair effect. Estimation is iteratively reweighted least squares with the
fixed effects absorbed by alternating weighted demeaning rather than by
materialized dummy columns, and with the pair effect re-solved in closed
form every iteration.

The variance-family exponent ``q`` weights the moment conditions by the
fitted mean to that power: 0 recovers the Poisson pseudo-likelihood, -1 the
Gamma one, +1 the Gaussian one.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import special

from .errors import (
    BadFit,
    BadValue,
    CollinearRegressors,
    DegeneratePair,
    GammaZeroOutcome,
    NotConverged,
    SingularW,
)
from .panel import FeLayout, PanelData

__all__ = [
    "FitOptions",
    "FitResult",
    "FitArrays",
    "VcovResult",
    "profile_pair_effect",
    "quasi_deviance",
    "fit_three_way",
    "fit_pml_family",
    "fit_two_way",
    "cluster_robust_vcov",
]

_MAX_HALVINGS = 20


@dataclass(frozen=True)
class FitOptions:
    """Solver controls.

    ``tol_score`` is applied as ``tol_score * (1 + mean(y))`` to the
    max-absolute first-order condition over all effect blocks; the deviance
    criterion is relative. Both must hold for ``converged=True``.
    """

    family_q: float = 0.0
    tol_deviance: float = 1e-10
    tol_score: float = 1e-8
    max_iter: int = 100
    fe_inner_tol: float = 1e-11
    start: object | None = None

    def __post_init__(self):
        if self.tol_deviance <= 0 or self.tol_score <= 0 or self.fe_inner_tol <= 0:
            raise BadValue("tolerances must be positive")
        if self.max_iter < 1:
            raise BadValue("max_iter must be at least 1")


@dataclass(frozen=True)
class FitArrays:
    """Stacked per-pair view of the data and fit, zero-padded where absent.

    This is the working representation consumed by the correction modules.
    """

    y: np.ndarray        # (P, T)
    x: np.ndarray        # (P, T, K)
    present: np.ndarray  # (P, T) bool
    lam: np.ndarray      # (P, T), 0 where absent
    exp_idx: np.ndarray  # (P,)
    imp_idx: np.ndarray  # (P,)
    exporters: tuple
    importers: tuple
    periods: tuple
    regressor_names: tuple

    @property
    def n_pairs(self) -> int:
        return self.y.shape[0]

    @property
    def T(self) -> int:
        return self.y.shape[1]

    @property
    def K(self) -> int:
        return self.x.shape[2]


@dataclass(frozen=True)
class FitResult:
    """Converged (or best-effort) fit of an index model."""

    beta: np.ndarray
    alpha: dict
    gamma: dict
    eta: dict | None
    lambda_hat: dict
    deviance: float
    iterations: int
    converged: bool
    family_q: float
    model: str
    fe_layout: FeLayout
    arrays: FitArrays
    max_abs_score: float

    @property
    def K(self) -> int:
        return self.beta.size


@dataclass(frozen=True)
class VcovResult:
    """Clustered sandwich variance of the structural coefficients."""

    V: np.ndarray
    cluster: str = "pair"
    corrected: bool = False

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.V))


def profile_pair_effect(
    y: np.ndarray,
    mu: np.ndarray,
    present: np.ndarray | None = None,
    q: float = 0.0,
) -> float:
    """Closed-form pair effect given the rest of the index.

    Solves the pair-effect first-order condition
    ``sum_t (y_t - e^eta mu_t) (e^eta mu_t)^q = 0`` for ``eta``:
    ``exp(eta) = sum_t y_t mu_t^q / sum_t mu_t^(1+q)``. With ``q=0`` the
    rescaled mean matches the pair's outcome total exactly.
    """
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if present is not None:
        y = y[present]
        mu = mu[present]
    if y.sum() <= 0:
        raise DegeneratePair("pair outcome total is zero; no finite pair effect")
    if np.any(mu <= 0) or not np.all(np.isfinite(mu)):
        raise BadValue("mu entries must be positive and finite")
    num = float((y * mu**q).sum())
    den = float((mu ** (1.0 + q)).sum())
    return float(np.log(num) - np.log(den))


def quasi_deviance(y: np.ndarray, lam: np.ndarray, q: float) -> float:
    """Bregman-type deviance whose minimizer solves the family-q conditions.

    Nonnegative, zero at ``lam == y``; the Poisson and Gamma deviances are
    the ``q -> 0`` and ``q -> -1`` limits and are handled as special cases.
    """
    y = np.asarray(y, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if q == 0.0:
        return float(2.0 * (special.xlogy(y, y / np.where(lam > 0, lam, 1.0)) - (y - lam)).sum())
    if q == -1.0:
        return float(2.0 * (-np.log(y / lam) + (y - lam) / lam).sum())
    with np.errstate(invalid="ignore"):
        yq = np.where(y > 0, y**q, 0.0)
        yq1 = np.where(y > 0, y ** (q + 1.0), 0.0)
    term = y * (yq - lam**q) / q - (yq1 - lam ** (q + 1.0)) / (q + 1.0)
    return float(2.0 * term.sum())


# ---------------------------------------------------------------------------
# observation-level workspace
# ---------------------------------------------------------------------------


@dataclass
class _Workspace:
    y: np.ndarray
    X: np.ndarray
    pair: np.ndarray
    acell: np.ndarray
    gcell: np.ndarray
    n_pairs: int
    n_acells: int
    n_gcells: int
    a_cells: list         # (exporter index, period index)
    g_cells: list
    pair_exp: np.ndarray  # (P,)
    pair_imp: np.ndarray
    obs_pair_t: np.ndarray  # period index per observation


def _make_workspace(panel: PanelData) -> _Workspace:
    st = panel.stacked()
    P, T = st.present.shape
    rows, ts = np.nonzero(st.present)
    y = st.y[rows, ts]
    X = st.x[rows, ts, :]
    exp_of_obs = st.exp_idx[rows]
    imp_of_obs = st.imp_idx[rows]

    a_key = exp_of_obs * T + ts
    a_uniq, acell = np.unique(a_key, return_inverse=True)
    g_key = imp_of_obs * T + ts
    g_uniq, gcell = np.unique(g_key, return_inverse=True)
    return _Workspace(
        y=y,
        X=X,
        pair=rows,
        acell=acell,
        gcell=gcell,
        n_pairs=P,
        n_acells=a_uniq.size,
        n_gcells=g_uniq.size,
        a_cells=[(int(k // T), int(k % T)) for k in a_uniq],
        g_cells=[(int(k // T), int(k % T)) for k in g_uniq],
        pair_exp=st.exp_idx,
        pair_imp=st.imp_idx,
        obs_pair_t=ts,
    )


def _group_means(codes, size, w, V):
    """Weighted per-group means of each column of V."""
    wsum = np.bincount(codes, weights=w, minlength=size)
    out = np.empty((size, V.shape[1]))
    for k in range(V.shape[1]):
        out[:, k] = np.bincount(codes, weights=w * V[:, k], minlength=size)
    return out / wsum[:, None]


def _weighted_demean(
    w: np.ndarray,
    V: np.ndarray,
    categories: Sequence[tuple],
    tol: float,
    max_sweeps: int = 5000,
    offsets: list | None = None,
) -> tuple[np.ndarray, bool]:
    """Alternately subtract weighted category means from the columns of V.

    ``categories`` is a sequence of (codes, size). When ``offsets`` is a
    list of per-category arrays, the subtracted means are accumulated there,
    which recovers an additive fixed-effect decomposition of ``V`` when it
    lies in the span of the category indicators.
    """
    V = V.copy()
    scale = 1.0 + np.abs(V).max(initial=0.0)
    for _ in range(max_sweeps):
        worst = 0.0
        for c, (codes, size) in enumerate(categories):
            means = _group_means(codes, size, w, V)
            V -= means[codes]
            if offsets is not None:
                offsets[c] += means
            worst = max(worst, np.abs(means).max(initial=0.0))
        if worst <= tol * scale:
            return V, True
    return V, False


def _pair_shift(ws: _Workspace, lam: np.ndarray, q: float) -> np.ndarray:
    """Per-pair index shift putting every pair first-order condition at zero."""
    if q == 0.0:
        num = np.bincount(ws.pair, weights=ws.y, minlength=ws.n_pairs)
        den = np.bincount(ws.pair, weights=lam, minlength=ws.n_pairs)
    else:
        num = np.bincount(ws.pair, weights=ws.y * lam**q, minlength=ws.n_pairs)
        den = np.bincount(ws.pair, weights=lam ** (1.0 + q), minlength=ws.n_pairs)
    return np.log(num) - np.log(den)


def _score_blocks(ws: _Workspace, lam: np.ndarray, q: float, with_pair: bool):
    r = (ws.y - lam) * (lam**q if q != 0.0 else 1.0)
    vals = [
        np.abs(ws.X.T @ r).max(initial=0.0),
        np.abs(np.bincount(ws.acell, weights=r, minlength=ws.n_acells)).max(initial=0.0),
        np.abs(np.bincount(ws.gcell, weights=r, minlength=ws.n_gcells)).max(initial=0.0),
    ]
    if with_pair:
        vals.append(np.abs(np.bincount(ws.pair, weights=r, minlength=ws.n_pairs)).max(initial=0.0))
    return max(vals)


def _fit_index_model(panel: PanelData, q: float, opts: FitOptions, with_pair: bool) -> FitResult:
    ws = _make_workspace(panel)
    y, X = ws.y, ws.X
    n, K = X.shape
    if K == 0:
        raise BadValue("model needs at least one regressor")
    if q < 0 and np.any(y <= 0):
        raise GammaZeroOutcome(
            f"family q={q} requires strictly positive outcomes in every retained cell"
        )
    if with_pair:
        totals = np.bincount(ws.pair, weights=y, minlength=ws.n_pairs)
        if np.any(totals <= 0):
            raise DegeneratePair(
                "pairs with zero outcome total present; prune the sample first"
            )
    for codes, size, what in (
        (ws.acell, ws.n_acells, "exporter-time"),
        (ws.gcell, ws.n_gcells, "importer-time"),
    ):
        if np.any(np.bincount(codes, weights=y, minlength=size) <= 0):
            raise BadValue(f"separated {what} cell present; prune the sample first")

    categories = [(ws.acell, ws.n_acells), (ws.gcell, ws.n_gcells)]
    if with_pair:
        categories.append((ws.pair, ws.n_pairs))

    # start: split the log cell means between the two time-varying effects,
    # then put the pair condition at zero
    if opts.start is not None and getattr(opts.start, "_xi", None) is not None and opts.start._xi.size == n:
        xi = opts.start._xi.copy()
        beta = opts.start.beta.copy()
    else:
        a0 = 0.5 * np.log(
            np.bincount(ws.acell, weights=y, minlength=ws.n_acells)
            / np.bincount(ws.acell, minlength=ws.n_acells)
        )
        g0 = 0.5 * np.log(
            np.bincount(ws.gcell, weights=y, minlength=ws.n_gcells)
            / np.bincount(ws.gcell, minlength=ws.n_gcells)
        )
        xi = a0[ws.acell] + g0[ws.gcell]
        if with_pair:
            xi = xi + _pair_shift(ws, np.exp(xi), q)[ws.pair]
        beta = np.zeros(K)

    dev = quasi_deviance(y, np.exp(xi), q)
    score_tol = opts.tol_score * (1.0 + y.mean())
    converged = False
    iterations = 0
    max_score = np.inf

    for iterations in range(1, opts.max_iter + 1):
        lam = np.exp(xi)
        w = lam ** (1.0 + q)
        z = xi + (y - lam) / lam
        V = np.column_stack([z, X])
        Vt, _ = _weighted_demean(w, V, categories, tol=opts.fe_inner_tol)
        zt, Xt = Vt[:, 0], Vt[:, 1:]

        XtWX = Xt.T @ (w[:, None] * Xt)
        # rank test on the correlation-like scaling; the reference scale is
        # the pre-absorption weighted Gram so a regressor fully annihilated
        # by the effects is caught even when K == 1
        col_scale = np.sqrt(np.maximum((X * X * w[:, None]).sum(axis=0), 1e-300))
        eigs = np.linalg.eigvalsh(XtWX / np.outer(col_scale, col_scale))
        if eigs.min() <= 1e-10:
            raise CollinearRegressors(
                "regressors are collinear after fixed-effect absorption"
            )
        beta_new = np.linalg.solve(XtWX, Xt.T @ (w * zt))

        fe_obs = (z - zt) - (X - Xt) @ beta_new
        xi_cand = X @ beta_new + fe_obs
        if with_pair:
            xi_cand = xi_cand + _pair_shift(ws, np.exp(xi_cand), q)[ws.pair]

        step = 1.0
        dev_try = np.inf
        for _ in range(_MAX_HALVINGS + 1):
            xi_try = xi + step * (xi_cand - xi)
            if with_pair:
                xi_try = xi_try + _pair_shift(ws, np.exp(xi_try), q)[ws.pair]
            with np.errstate(over="ignore"):
                dev_try = quasi_deviance(y, np.exp(xi_try), q)
            if np.isfinite(dev_try) and dev_try <= dev * (1.0 + 1e-14) + 1e-300:
                break
            step /= 2.0

        beta = beta + step * (beta_new - beta)
        xi = xi + step * (xi_cand - xi)
        if with_pair:
            xi = xi + _pair_shift(ws, np.exp(xi), q)[ws.pair]
        dev_prev, dev = dev, quasi_deviance(y, np.exp(xi), q)

        max_score = _score_blocks(ws, np.exp(xi), q, with_pair)
        if (
            abs(dev_prev - dev) <= opts.tol_deviance * (0.1 + abs(dev))
            and max_score <= score_tol
        ):
            converged = True
            break

    result = _package_result(
        panel, ws, xi, beta, dev, iterations, converged, q,
        "three-way" if with_pair else "two-way", max_score, opts,
    )
    if not converged:
        raise NotConverged(
            f"no convergence in {opts.max_iter} iterations "
            f"(max score {max_score:.3e}, tolerance {score_tol:.3e})",
            result=result,
        )
    return result


def _package_result(panel, ws, xi, beta, dev, iterations, converged, q, model, max_score, opts):
    lam_obs = np.exp(xi)
    with_pair = model == "three-way"

    # additive decomposition of the fixed-effect part of the index
    v = xi - ws.X @ beta
    categories = [(ws.acell, ws.n_acells), (ws.gcell, ws.n_gcells)]
    if with_pair:
        categories.append((ws.pair, ws.n_pairs))
    offsets = [np.zeros((size, 1)) for _, size in categories]
    resid, ok = _weighted_demean(
        lam_obs, v[:, None], categories, tol=1e-13, max_sweeps=100000, offsets=offsets
    )
    if not ok and np.abs(resid).max() > 1e-10 * (1.0 + np.abs(v).max()):
        raise BadFit("fixed-effect decomposition of the fitted index did not converge")
    a_vec = offsets[0][:, 0]
    g_vec = offsets[1][:, 0]
    e_vec = offsets[2][:, 0] if with_pair else None
    if with_pair:
        # fold the tiny decomposition residual into the pair effect so the
        # reported effects reproduce the index exactly
        e_vec = e_vec + np.bincount(
            ws.pair, weights=lam_obs * resid[:, 0], minlength=ws.n_pairs
        ) / np.bincount(ws.pair, weights=lam_obs, minlength=ws.n_pairs)

    a_vec, g_vec, e_vec = _normalize_effects(panel, ws, a_vec, g_vec, e_vec)

    alpha = {
        (panel.exporters[i], panel.periods[t]): a_vec[c]
        for c, (i, t) in enumerate(ws.a_cells)
    }
    gamma = {
        (panel.importers[j], panel.periods[t]): g_vec[c]
        for c, (j, t) in enumerate(ws.g_cells)
    }
    eta = None
    if with_pair:
        eta = {
            (panel.exporters[ws.pair_exp[p]], panel.importers[ws.pair_imp[p]]): e_vec[p]
            for p in range(ws.n_pairs)
        }

    st = panel.stacked()
    lam = np.zeros_like(st.y)
    lam[ws.pair, ws.obs_pair_t] = lam_obs
    lambda_hat = {}
    for p in range(ws.n_pairs):
        vals = np.where(st.present[p], lam[p], np.nan)
        vals.setflags(write=False)
        lambda_hat[(panel.exporters[st.exp_idx[p]], panel.importers[st.imp_idx[p]])] = vals

    arrays = FitArrays(
        y=st.y,
        x=st.x,
        present=st.present,
        lam=lam,
        exp_idx=st.exp_idx,
        imp_idx=st.imp_idx,
        exporters=panel.exporters,
        importers=panel.importers,
        periods=panel.periods,
        regressor_names=panel.regressor_names,
    )
    layout = FeLayout(
        alpha_index={cell: c for c, cell in enumerate(ws.a_cells)},
        gamma_index={cell: len(ws.a_cells) + c for c, cell in enumerate(ws.g_cells)},
    )
    result = FitResult(
        beta=beta,
        alpha=alpha,
        gamma=gamma,
        eta=eta,
        lambda_hat=lambda_hat,
        deviance=dev,
        iterations=iterations,
        converged=converged,
        family_q=q,
        model=model,
        fe_layout=layout,
        arrays=arrays,
        max_abs_score=max_score,
    )
    object.__setattr__(result, "_xi", xi)
    return result


def _normalize_effects(panel, ws, a_vec, g_vec, e_vec):
    """Reporting normalization; the reconstructed index is unchanged.

    Per-country period means of the time-varying effects move into the pair
    effect, then per-period exporter means move into the importer effects.
    Two-way fits only apply the second step.
    """
    a_vec, g_vec = a_vec.copy(), g_vec.copy()
    a_country = np.array([c for c, _ in ws.a_cells])
    a_period = np.array([t for _, t in ws.a_cells])
    g_country = np.array([c for c, _ in ws.g_cells])

    if e_vec is not None:
        e_vec = e_vec.copy()
        for role_vec, country_of, pair_of in (
            (a_vec, a_country, ws.pair_exp),
            (g_vec, g_country, ws.pair_imp),
        ):
            n_c = int(country_of.max()) + 1 if country_of.size else 0
            sums = np.bincount(country_of, weights=role_vec, minlength=n_c)
            cnts = np.bincount(country_of, minlength=n_c)
            means = np.where(cnts > 0, sums / np.maximum(cnts, 1), 0.0)
            role_vec -= means[country_of]
            e_vec += means[pair_of]

    n_t = int(a_period.max()) + 1 if a_period.size else 0
    sums = np.bincount(a_period, weights=a_vec, minlength=n_t)
    cnts = np.bincount(a_period, minlength=n_t)
    means = np.where(cnts > 0, sums / np.maximum(cnts, 1), 0.0)
    a_vec -= means[a_period]
    g_period = np.array([t for _, t in ws.g_cells])
    g_vec += means[g_period]
    return a_vec, g_vec, e_vec


def fit_three_way(panel: PanelData, opts: FitOptions | None = None) -> FitResult:
    """Fit the three-way model by IRLS with profiled pair effects.

    Expects a pruned panel (every pair with a positive outcome total and no
    separated cells). Raises ``NotConverged`` with the best iterate
    attached, or ``CollinearRegressors`` when the within-transformed
    regressors are rank deficient.
    """
    opts = opts or FitOptions()
    if panel.T < 2:
        raise BadValue("the three-way model needs at least two periods")
    return _fit_index_model(panel, opts.family_q, opts, with_pair=True)


def fit_pml_family(panel: PanelData, q: float, opts: FitOptions | None = None) -> FitResult:
    """Fit the three-way model under the variance-family exponent ``q``."""
    opts = opts or FitOptions()
    if opts.family_q != q:
        opts = replace(opts, family_q=q)
    return fit_three_way(panel, opts)


def fit_two_way(panel: PanelData, opts: FitOptions | None = None) -> FitResult:
    """Fit the model without pair effects (any T >= 1)."""
    opts = opts or FitOptions()
    return _fit_index_model(panel, opts.family_q, opts, with_pair=False)


def cluster_robust_vcov(panel: PanelData, fit: FitResult) -> VcovResult:
    """Pair-clustered sandwich variance of the coefficient estimates.

    Built from the within-transformed regressors and per-pair scores of the
    correction module; scaled to be directly the variance of the estimates.
    Raises ``SingularW`` when the weighted information matrix is singular.
    """
    from . import bias
    from .linalg import solve_or_singular, weighted_column_spread

    if not fit.converged:
        raise BadFit("variance requires a converged fit")
    if fit.model == "two-way":
        weights, scores = bias.two_way_weights_scores(fit)
    else:
        objects = bias.score_hessian_objects(panel, fit)
        weights, scores = objects.Hbar_hat, objects.S_hat
    x_tilde = bias.within_transform(panel, weights)
    W_tot = np.einsum("ptk,pts,psl->kl", x_tilde, weights, x_tilde)
    ref = weighted_column_spread(panel.stacked().x, np.einsum("ptt->pt", weights))
    W_inv = solve_or_singular(
        W_tot, SingularW("singular information matrix"), col_scale=ref
    )
    g = np.einsum("ptk,pt->pk", x_tilde, scores)
    Omega_tot = g.T @ g
    V = W_inv @ Omega_tot @ W_inv
    return VcovResult(V=0.5 * (V + V.T), cluster="pair", corrected=False)
