"""Dense tensor kernels shared by the tree-network code.

All kernels operate on float64 numpy arrays and are pure functions.
"""

from __future__ import annotations

import numpy as np

__all__ = ["khatri_rao", "mttkrp", "thin_qr"]


def khatri_rao(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Row-wise Kronecker product.

    Parameters
    ----------
    u : ndarray, shape (m, p)
    v : ndarray, shape (m, q)

    Returns
    -------
    ndarray, shape (m, p * q)
        Row i equals ``kron(u[i], v[i])``.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.ndim != 2 or v.ndim != 2:
        raise ValueError("khatri_rao expects two matrices")
    if u.shape[0] != v.shape[0]:
        raise ValueError(
            f"row count mismatch: {u.shape[0]} vs {v.shape[0]}"
        )
    m = u.shape[0]
    return np.einsum("ip,iq->ipq", u, v).reshape(m, u.shape[1] * v.shape[1])


def mttkrp(core: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Contract a third-order core with two factor matrices, row by row.

    Parameters
    ----------
    core : ndarray, shape (p, q, t)
    u : ndarray, shape (m, p)
    v : ndarray, shape (m, q)

    Returns
    -------
    ndarray, shape (m, t)
        Row i equals ``unfold(core).T @ kron(u[i], v[i])`` where ``unfold``
        is the row-major (p*q, t) matricization; equivalently
        ``khatri_rao(u, v) @ unfold(core)``.
    """
    core = np.asarray(core, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if core.ndim != 3:
        raise ValueError("core must be a third-order tensor")
    if u.shape[0] != v.shape[0]:
        raise ValueError(
            f"row count mismatch: {u.shape[0]} vs {v.shape[0]}"
        )
    if u.shape[1] != core.shape[0] or v.shape[1] != core.shape[1]:
        raise ValueError(
            f"factor widths {u.shape[1]}x{v.shape[1]} do not match "
            f"core shape {core.shape[:2]}"
        )
    return np.einsum("ip,iq,pqt->it", u, v, core, optimize=True)


def thin_qr(mat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Thin QR factorization with a nonnegative-diagonal sign convention.

    Parameters
    ----------
    mat : ndarray, shape (n, r) with n >= r

    Returns
    -------
    (q, r) : ndarrays of shapes (n, r) and (r, r)
        ``q`` has orthonormal columns, ``r`` is upper triangular with
        nonnegative diagonal and ``q @ r`` reconstructs ``mat``.  A
        rank-deficient input keeps ``q`` orthonormal and shows up as
        (near-)zero diagonal entries of ``r``.
    """
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2:
        raise ValueError("thin_qr expects a matrix")
    n, r = mat.shape
    if n < r:
        raise ValueError(f"need at least as many rows as columns, got {n}x{r}")
    q, rr = np.linalg.qr(mat, mode="reduced")
    # Flip signs so diag(r) >= 0; sign(0) treated as +1.
    signs = np.where(np.diag(rr) < 0.0, -1.0, 1.0)
    return q * signs, rr * signs[:, None]
