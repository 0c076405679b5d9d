"""Singular values by one-sided (Hestenes) Jacobi rotations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SvdSpectrum:
    singular_values: np.ndarray


def svd_spectrum(matrix, tol: float = 1e-15, max_sweeps: int = 100) -> SvdSpectrum:
    """Descending singular values of a real matrix.

    Columns are rotated pairwise until every pair is orthogonal to within
    ``tol`` relative to the column norms; the singular values are then the
    column norms.
    """
    A = np.array(matrix, dtype=float, copy=True)
    if A.ndim != 2:
        raise ValueError("matrix must be 2-D")
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix entries must be finite")
    if A.shape[0] < A.shape[1]:
        A = A.T.copy()
    n = A.shape[1]
    if A.size == 0:
        return SvdSpectrum(np.zeros(0))
    # scale to unit max so squared norms neither underflow nor overflow
    scale = float(np.max(np.abs(A)))
    if scale == 0.0:
        return SvdSpectrum(np.zeros(n))
    # columns as rows for contiguous access
    U = np.ascontiguousarray(A.T) / scale
    norms = np.einsum("ij,ij->i", U, U)
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = norms[p]
                beta = norms[q]
                gamma = float(U[p] @ U[q])
                if gamma == 0.0 or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                # tan of the rotation angle, written without dividing by gamma
                diff = beta - alpha
                sign = 1.0 if diff * gamma >= 0 else -1.0
                t = sign * 2.0 * abs(gamma) / (abs(diff) + np.hypot(diff, 2.0 * gamma))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                up = U[p].copy()
                U[p] = c * up - s * U[q]
                U[q] = s * up + c * U[q]
                norms[p] = float(U[p] @ U[p])
                norms[q] = float(U[q] @ U[q])
        if not rotated:
            break
    sv = np.sqrt(np.einsum("ij,ij->i", U, U)) * scale
    return SvdSpectrum(np.sort(sv)[::-1])
