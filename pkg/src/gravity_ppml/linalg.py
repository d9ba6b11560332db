"""Dense and iterative linear-algebra helpers.

The fixed-effect curvature blocks handled here are symmetric positive
semidefinite with structural null spaces (each block annihilates the
all-ones direction), so every inverse in the package is a thresholded
eigendecomposition pseudoinverse rather than a plain solve.
"""

from __future__ import annotations

import numpy as np

#: Eigenvalues below this multiple of the largest one are treated as zero.
PINV_RTOL = 1e-12


def psd_pinv(a: np.ndarray, rtol: float = PINV_RTOL) -> tuple[np.ndarray, np.ndarray]:
    """Moore-Penrose pseudoinverse of symmetric PSD matrices.

    Parameters
    ----------
    a : ndarray of shape (..., n, n)
        Symmetric positive semidefinite matrices; batched leading axes are
        supported.
    rtol : float
        Relative eigenvalue threshold. Eigenvalues smaller than
        ``rtol * max|eigenvalue|`` (per matrix) are treated as exact zeros.

    Returns
    -------
    pinv : ndarray of shape (..., n, n)
    rank : ndarray of shape (...)
        Number of retained eigenvalues per matrix.
    """
    a = np.asarray(a, dtype=float)
    w, v = np.linalg.eigh(a)
    cutoff = rtol * np.maximum(np.abs(w).max(axis=-1, keepdims=True), np.finfo(float).tiny)
    keep = np.abs(w) > cutoff
    inv_w = np.where(keep, 1.0 / np.where(keep, w, 1.0), 0.0)
    pinv = (v * inv_w[..., None, :]) @ np.swapaxes(v, -1, -2)
    rank = keep.sum(axis=-1)
    return pinv, rank


def weighted_column_spread(x: np.ndarray, weights_diag: np.ndarray) -> np.ndarray:
    """Weighted dispersion scale per regressor column.

    Flattens the stacked regressors to observation rows, centers each
    column at its weighted mean and returns the square root of the weighted
    sum of squared deviations. Used as an external scale reference when
    testing curvature matrices for singularity; a regressor annihilated by
    the fixed effects keeps a positive spread here while its within
    curvature collapses.
    """
    w = np.asarray(weights_diag, dtype=float).reshape(-1)
    X = np.asarray(x, dtype=float).reshape(w.size, -1)
    total = w.sum()
    if total <= 0.0:
        return np.zeros(X.shape[1])
    xbar = (w[:, None] * X).sum(axis=0) / total
    return np.sqrt(np.maximum((w[:, None] * (X - xbar) ** 2).sum(axis=0), 0.0))


def solve_or_singular(a: np.ndarray, exc: Exception, col_scale: np.ndarray | None = None):
    """Invert a K x K matrix, raising ``exc`` when numerically singular.

    With ``col_scale`` the matrix is first normalized by the outer product
    of that external per-column scale, so a matrix that is tiny relative to
    the data it was built from is rejected even when its own eigenvalue
    ratio looks fine (the one-regressor case has no internal ratio at all).
    """
    a = np.asarray(a, dtype=float)
    if col_scale is not None:
        s = np.asarray(col_scale, dtype=float)
        if a.shape[0] == 0 or np.any(s <= 0.0) or not np.all(np.isfinite(s)):
            raise exc
        wb = np.linalg.eigvalsh(a / np.outer(s, s))
        if wb.min() <= 1e-12 * max(np.abs(wb).max(), 1.0):
            raise exc
        return np.linalg.inv(a)
    w = np.linalg.eigvalsh(a)
    scale = np.abs(w).max() if w.size else 0.0
    if scale <= 0.0 or w.min() <= 1e-12 * scale:
        raise exc
    return np.linalg.inv(a)


def projected_cg(
    matvec,
    b: np.ndarray,
    project,
    diag: np.ndarray,
    tol: float = 1e-12,
    maxiter: int = 5000,
) -> np.ndarray:
    """Conjugate gradients restricted to the range of a PSD operator.

    Solves ``A z = P b`` where ``P`` (``project``) is the orthogonal
    projector onto the known complement of the operator's null space, so
    the system is nonsingular on the subspace CG explores.

    Parameters
    ----------
    matvec : callable
        Application of the PSD operator.
    b : ndarray
        Right-hand side (projected internally).
    project : callable
        Projector onto the range; applied to the start residual and to
        every operator output to suppress drift into the null space.
    diag : ndarray
        Positive diagonal preconditioner (entries of the operator diagonal;
        zeros are replaced by ones).
    """
    d = np.where(diag > 0, diag, 1.0)
    b = project(np.asarray(b, dtype=float))
    z = np.zeros_like(b)
    r = b.copy()
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return z
    s = r / d
    p = s.copy()
    rs = float(r @ s)
    for _ in range(maxiter):
        ap = project(matvec(p))
        denom = float(p @ ap)
        if denom <= 0.0:
            break
        alpha = rs / denom
        z += alpha * p
        r -= alpha * ap
        if np.linalg.norm(r) <= tol * bnorm:
            break
        s = r / d
        rs_new = float(r @ s)
        p = s + (rs_new / rs) * p
        rs = rs_new
    return project(z)
