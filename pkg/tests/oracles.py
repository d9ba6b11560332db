"""Independent reference implementations used to validate the package.

Everything here deliberately avoids the package's computational paths:
fits run full Newton on explicit dummy-variable designs, projections run
least squares on stacked square-root-weighted systems, derivatives come
from finite differences, and the T=2 bias uses the scalar reduction.
Slow and dense by design; only suitable for tiny panels.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg
from scipy.optimize import brentq

from gravity_ppml.errors import GravityPpmlError
from gravity_ppml.panel import PairBlock, PanelData, build_panel, prune_sample

# ---------------------------------------------------------------------------
# panel generation for property tests
# ---------------------------------------------------------------------------


def random_panel(
    rng: np.random.Generator,
    N: int = 5,
    T: int = 3,
    K: int = 1,
    family: str = "poisson",
    p_missing: float = 0.0,
    n_importers: int | None = None,
) -> PanelData:
    """Random small panel with known-irregular texture for property tests."""
    Ni = N if n_importers is None else n_importers
    alpha = rng.normal(0.0, 0.3, (N, T))
    gamma = rng.normal(0.0, 0.3, (Ni, T))
    eta = rng.normal(0.0, 0.3, (N, Ni))
    beta = rng.normal(0.5, 0.3, K)
    records = []
    for i in range(N):
        for j in range(Ni):
            if i == j:
                continue
            for t in range(T):
                if p_missing and rng.random() < p_missing:
                    continue
                x = rng.normal(0.0, 0.5, K)
                lam = np.exp(alpha[i, t] + gamma[j, t] + eta[i, j] + x @ beta)
                if family == "poisson":
                    y = float(rng.poisson(lam))
                else:
                    y = float(lam * rng.lognormal(-0.125, 0.5))
                records.append((f"e{i}", f"m{j}", t, y, *x))
    return build_panel(records, regressor_names=[f"x{k}" for k in range(K)])


def draw_identified_panel(
    rng: np.random.Generator,
    N: int,
    T: int,
    K: int,
    family: str = "poisson",
    p_missing: float = 0.0,
    max_tries: int = 60,
):
    """Redraw until the full-dummy information matrix is well conditioned.

    Tiny panels can be saturated or collinear after absorption, in which
    case the slope is not identified and no comparison is meaningful.
    Returns (pruned panel, oracle slope estimate).
    """
    for _ in range(max_tries):
        panel = random_panel(rng, N=N, T=T, K=K, family=family, p_missing=p_missing)
        try:
            pruned, _ = prune_sample(panel)
        except GravityPpmlError:
            continue
        y, X, D = _design(pruned, True)
        C = np.hstack([X, _reduced_dummies(D)])
        try:
            theta, lam = _newton_on_design(y, C, 0.0, 1e-11, 300)
        except (RuntimeError, np.linalg.LinAlgError):
            continue
        H = (C * lam[:, None]).T @ C
        ev = np.linalg.eigvalsh(H)
        if ev.min() > 1e-6 * ev.max():
            return pruned, theta[:K]
    raise RuntimeError("could not draw an identified panel")


# ---------------------------------------------------------------------------
# explicit dummy-variable design
# ---------------------------------------------------------------------------


def _design(panel: PanelData, include_pair: bool = True):
    """Observation-level outcome, regressors, and dummy design."""
    stacked = panel.stacked()
    P, T = stacked.present.shape
    Ne, Ni = panel.n_exporters, panel.n_importers
    rows_y, rows_x, rows_d = [], [], []
    n_dum = Ne * T + Ni * T + (P if include_pair else 0)
    for p in range(P):
        for t in np.nonzero(stacked.present[p])[0]:
            rows_y.append(stacked.y[p, t])
            rows_x.append(stacked.x[p, t])
            d = np.zeros(n_dum)
            d[stacked.exp_idx[p] * T + t] = 1.0
            d[Ne * T + stacked.imp_idx[p] * T + t] = 1.0
            if include_pair:
                d[Ne * T + Ni * T + p] = 1.0
            rows_d.append(d)
    return np.array(rows_y), np.array(rows_x), np.array(rows_d)


def _reduced_dummies(D: np.ndarray) -> np.ndarray:
    """Drop redundant dummy columns via column-pivoted QR."""
    _, r, piv = scipy.linalg.qr(D, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    keep = piv[: diag.size][diag > 1e-9 * diag[0]]
    return D[:, np.sort(keep)]


def _qdev(y: np.ndarray, lam: np.ndarray, q: float) -> float:
    if q == 0.0:
        with np.errstate(divide="ignore", invalid="ignore"):
            term = np.where(y > 0, y * np.log(y / lam), 0.0)
        return float(2.0 * (term - (y - lam)).sum())
    if q == -1.0:
        return float(2.0 * (-np.log(y / lam) + (y - lam) / lam).sum())
    return float(
        2.0
        * (
            y * (y**q - lam**q) / q
            - (y ** (q + 1.0) - lam ** (q + 1.0)) / (q + 1.0)
        ).sum()
    )


def _newton_on_design(y: np.ndarray, C: np.ndarray, q: float, tol: float, max_iter: int):
    theta = np.zeros(C.shape[1])
    xi = C @ theta
    dev = _qdev(y, np.exp(xi), q)
    for _ in range(max_iter):
        lam = np.exp(xi)
        grad = C.T @ ((y - lam) * lam**q)
        H = (C * (lam ** (1.0 + q))[:, None]).T @ C
        step = np.linalg.solve(H, grad)
        s = 1.0
        for _ in range(40):
            with np.errstate(over="ignore"):
                dev_c = _qdev(y, np.exp(C @ (theta + s * step)), q)
            if np.isfinite(dev_c) and dev_c <= dev + 1e-12:
                break
            s /= 2.0
        theta = theta + s * step
        xi = C @ theta
        dev_prev, dev = dev, _qdev(y, np.exp(xi), q)
        lam = np.exp(xi)
        if (
            np.abs(C.T @ ((y - lam) * lam**q)).max() <= tol * (1.0 + y.mean())
            and abs(dev_prev - dev) <= 1e-12 * (0.1 + abs(dev))
        ):
            return theta, lam
    raise RuntimeError("oracle Newton did not converge")


def newton_full_dummy(
    panel: PanelData,
    q: float = 0.0,
    include_pair: bool = True,
    tol: float = 1e-11,
    max_iter: int = 300,
) -> np.ndarray:
    """Slope estimates from full Newton on the explicit dummy design."""
    y, X, D = _design(panel, include_pair)
    C = np.hstack([X, _reduced_dummies(D)])
    theta, _ = _newton_on_design(y, C, q, tol, max_iter)
    return theta[: X.shape[1]]


def clustered_vcov_full_dummy(panel: PanelData, q: float = 0.0, include_pair: bool = True) -> np.ndarray:
    """Pair-clustered sandwich from the explicit dummy design (slope block)."""
    y, X, D = _design(panel, include_pair)
    C = np.hstack([X, _reduced_dummies(D)])
    K = X.shape[1]
    _, lam = _newton_on_design(y, C, q, tol=1e-11, max_iter=300)
    W = (C * (lam ** (1.0 + q))[:, None]).T @ C
    stacked = panel.stacked()
    P = stacked.present.shape[0]
    scores = np.zeros((P, C.shape[1]))
    row = 0
    for p in range(P):
        for _t in np.nonzero(stacked.present[p])[0]:
            scores[p] += C[row] * ((y[row] - lam[row]) * lam[row] ** q)
            row += 1
    W_inv = np.linalg.inv(W)
    V = W_inv @ (scores.T @ scores) @ W_inv
    return V[:K, :K]


# ---------------------------------------------------------------------------
# within-transformation by stacked least squares
# ---------------------------------------------------------------------------


def within_lstsq(
    x: np.ndarray,
    weights: np.ndarray,
    exp_idx: np.ndarray,
    imp_idx: np.ndarray,
    n_exporters: int,
    n_importers: int,
    present: np.ndarray,
) -> np.ndarray:
    """Weighted two-way projection via lstsq on square-root-weighted rows."""
    P, T, K = x.shape
    ncells = (n_exporters + n_importers) * T
    blocks_a = []
    blocks_b = []
    x0 = np.where(present[:, :, None], x, 0.0)
    for p in range(P):
        w, U = np.linalg.eigh(weights[p])
        w = np.clip(w, 0.0, None)
        R = (U * np.sqrt(w)) @ U.T
        Z = np.zeros((T, ncells))
        for t in range(T):
            Z[t, exp_idx[p] * T + t] = 1.0
            Z[t, n_exporters * T + imp_idx[p] * T + t] = 1.0
        blocks_a.append(R @ Z)
        blocks_b.append(R @ x0[p])
    A = np.vstack(blocks_a)
    b = np.vstack(blocks_b)
    c, *_ = np.linalg.lstsq(A, b, rcond=None)
    xt = np.empty_like(x0)
    for p in range(P):
        Z = np.zeros((T, ncells))
        for t in range(T):
            Z[t, exp_idx[p] * T + t] = 1.0
            Z[t, n_exporters * T + imp_idx[p] * T + t] = 1.0
        xt[p] = x0[p] - Z @ c
    return np.where(present[:, :, None], xt, 0.0)


# ---------------------------------------------------------------------------
# finite-difference derivative chain for per-pair objects
# ---------------------------------------------------------------------------


def profiled_loglik(xi: np.ndarray, y: np.ndarray) -> float:
    """Per-pair log likelihood with the pair effect profiled out."""
    L = np.exp(xi).sum()
    Y = y.sum()
    return float((y * xi).sum() + Y * np.log(Y / L) - Y)


def fd_score(xi: np.ndarray, y: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """First derivative of the profiled log likelihood by central FD."""
    T = xi.size
    out = np.empty(T)
    for t in range(T):
        e = np.zeros(T)
        e[t] = h
        out[t] = (profiled_loglik(xi + e, y) - profiled_loglik(xi - e, y)) / (2 * h)
    return out


def _score_analytic(xi: np.ndarray, y: np.ndarray) -> np.ndarray:
    lam = np.exp(xi)
    return y - y.sum() * lam / lam.sum()


def fd_hessian(xi: np.ndarray, y: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Second derivative: central FD of the analytic first derivative."""
    T = xi.size
    out = np.empty((T, T))
    for s in range(T):
        e = np.zeros(T)
        e[s] = h
        out[:, s] = (_score_analytic(xi + e, y) - _score_analytic(xi - e, y)) / (2 * h)
    return out


def _hhat_analytic(xi: np.ndarray, y: np.ndarray) -> np.ndarray:
    lam = np.exp(xi)
    theta = lam / lam.sum()
    return y.sum() * (np.diag(theta) - np.outer(theta, theta))


def fd_third(xi: np.ndarray, y: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Third derivative tensor: central FD of the analytic second derivative."""
    T = xi.size
    out = np.empty((T, T, T))
    for r in range(T):
        e = np.zeros(T)
        e[r] = h
        out[:, :, r] = -(_hhat_analytic(xi + e, y) - _hhat_analytic(xi - e, y)) / (2 * h)
    return out


# ---------------------------------------------------------------------------
# T=2 scalar bias formulas
# ---------------------------------------------------------------------------


def t2_scalar_bias(
    theta: np.ndarray,
    lam: np.ndarray,
    y: np.ndarray,
    x_tilde: np.ndarray,
    exp_idx: np.ndarray,
    imp_idx: np.ndarray,
    n_exporters: int,
    n_importers: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Exporter- and importer-side bias totals from the T=2 scalar reduction.

    Requires a fully observed two-period panel. Returns (B, D), each of
    shape (K,), normalized by (count - 1) on the respective side.
    """
    P, T, K = x_tilde.shape
    assert T == 2
    th1, th2 = theta[:, 0], theta[:, 1]
    lam2 = lam[:, 1]
    S = th2 * y[:, 0] - th1 * y[:, 1]
    hhat = th1 * th2 * (y[:, 0] + y[:, 1])
    hbar = th1 * lam2
    gbar = th1 * (th1 - th2) * lam2
    dx = x_tilde[:, 0, :] - x_tilde[:, 1, :]

    def side(codes, n):
        f = np.bincount(codes, weights=hbar, minlength=n)
        num1 = np.zeros((n, K))
        num2a = np.zeros((n, K))
        s2 = np.bincount(codes, weights=S**2, minlength=n)
        for k in range(K):
            num1[:, k] = np.bincount(codes, weights=hhat * S * dx[:, k], minlength=n)
            num2a[:, k] = np.bincount(codes, weights=gbar * dx[:, k], minlength=n)
        term1 = num1 / f[:, None]
        term2 = 0.5 * num2a * s2[:, None] / (f**2)[:, None]
        return (-term1 + term2).sum(axis=0) / (n - 1.0)

    B = side(exp_idx, n_exporters)
    D = side(imp_idx, n_importers)
    return B, D


# ---------------------------------------------------------------------------
# corrected variance via joint dense leverage
# ---------------------------------------------------------------------------


def corrected_vcov_dense(
    x_tilde: np.ndarray,
    weights: np.ndarray,
    scores: np.ndarray,
    present: np.ndarray,
    exp_idx: np.ndarray,
    imp_idx: np.ndarray,
    n_exporters: int,
    n_importers: int,
) -> np.ndarray:
    """Corrected sandwich using one joint pseudo-inverted information block.

    Builds per-pair [x_tilde | FE incidence] designs over occupied cells,
    pseudo-inverts the summed information in one piece (no block-diagonal
    shortcut), and applies the per-pair kernel inverse to the score side.
    """
    P, T, K = x_tilde.shape
    occ_a = np.zeros((n_exporters, T), dtype=bool)
    occ_g = np.zeros((n_importers, T), dtype=bool)
    for p in range(P):
        occ_a[exp_idx[p]] |= present[p]
        occ_g[imp_idx[p]] |= present[p]
    a_cols = {cell: c for c, cell in enumerate(zip(*np.nonzero(occ_a)))}
    g_cols = {cell: c + len(a_cols) for c, cell in enumerate(zip(*np.nonzero(occ_g)))}
    n_fe = len(a_cols) + len(g_cols)

    designs = []
    for p in range(P):
        d = np.zeros((T, K + n_fe))
        d[:, :K] = np.where(present[p][:, None], x_tilde[p], 0.0)
        for t in np.nonzero(present[p])[0]:
            d[t, K + a_cols[(exp_idx[p], t)]] = 1.0
            d[t, K + g_cols[(imp_idx[p], t)]] = 1.0
        designs.append(d)

    L = np.zeros((K + n_fe, K + n_fe))
    for p in range(P):
        L += designs[p].T @ weights[p] @ designs[p]
    L_pinv = np.linalg.pinv(L, hermitian=True, rcond=1e-12)

    W = np.zeros((K, K))
    for p in range(P):
        W += x_tilde[p].T @ weights[p] @ x_tilde[p]
    W_inv = np.linalg.inv(W)

    Omega = np.zeros((K, K))
    for p in range(P):
        lev = designs[p] @ L_pinv @ designs[p].T
        Kmat = np.eye(T) - weights[p] @ lev
        g_plain = x_tilde[p].T @ scores[p]
        g_corr = x_tilde[p].T @ np.linalg.solve(Kmat, scores[p])
        Omega += np.outer(g_corr, g_plain)
    Omega = 0.5 * (Omega + Omega.T)
    V = (P / (P - 1.0)) * W_inv @ Omega @ W_inv
    return 0.5 * (V + V.T)


# ---------------------------------------------------------------------------
# pair-effect root finding
# ---------------------------------------------------------------------------


def pair_effect_root(y: np.ndarray, mu: np.ndarray, q: float = 0.0) -> float:
    """Pair-effect first-order condition solved numerically by brentq."""

    def foc(c):
        lam = np.exp(c) * mu
        return float(((y - lam) * lam**q).sum())

    lo, hi = -1.0, 1.0
    for _ in range(200):
        if foc(lo) * foc(hi) <= 0:
            break
        lo *= 2.0
        hi *= 2.0
    return brentq(foc, lo, hi, xtol=1e-14, rtol=8.9e-16)
