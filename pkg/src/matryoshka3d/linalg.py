"""Truncated SVD by one-sided Jacobi rotations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ParameterError
from .tensor import Tensor

JACOBI_TOL = 1e-12
MAX_SWEEPS = 100


@dataclass(frozen=True)
class SvdResult:
    U: Tensor
    S: Tensor
    Vt: Tensor

    @property
    def rank(self) -> int:
        return self.S.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.U.data * self.S.data) @ self.Vt.data


def _jacobi_rows(w: np.ndarray, tol: float, max_sweeps: int):
    """Orthogonalize the rows of ``w`` in place; returns (w, V, sweeps).

    ``V`` accumulates the right rotations so that input == V.T-rotated rows.
    """
    n = w.shape[0]
    v = np.eye(n)
    for sweep in range(1, max_sweeps + 1):
        worst = 0.0
        for p in range(n - 1):
            wp = w[p]
            for q in range(p + 1, n):
                wq = w[q]
                alpha = wp @ wp
                beta = wq @ wq
                gamma = wp @ wq
                if alpha == 0.0 or beta == 0.0:
                    continue
                off = abs(gamma) / np.sqrt(alpha * beta)
                if off > worst:
                    worst = off
                if off <= tol:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * wp - s * wq
                w[q] = s * wp + c * wq
                w[p] = new_p
                wp = w[p]
                vp = v[p].copy()
                v[p] = c * vp - s * v[q]
                v[q] = s * vp + c * v[q]
        if worst <= tol:
            return w, v, sweep
    raise NumericalError(f"Jacobi SVD did not converge in {max_sweeps} sweeps", sweeps=max_sweeps)


def _complete_columns(u: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Replace columns where ``good`` is False by an orthonormal completion."""
    m = u.shape[0]
    basis = [u[:, j] for j in range(u.shape[1]) if good[j]]
    candidate = 0
    for j in range(u.shape[1]):
        if good[j]:
            continue
        while True:
            e = np.zeros(m)
            e[candidate % m] = 1.0
            candidate += 1
            for b in basis:
                e -= (b @ e) * b
            norm = np.linalg.norm(e)
            if norm > 1e-6:
                break
        e /= norm
        for b in basis:  # second Gram-Schmidt pass for accuracy
            e -= (b @ e) * b
        e /= np.linalg.norm(e)
        u[:, j] = e
        basis.append(e)
    return u


def _apply_sign_convention(u: np.ndarray, vt: np.ndarray):
    for j in range(u.shape[1]):
        i = int(np.argmax(np.abs(u[:, j])))
        if u[i, j] < 0:
            u[:, j] = -u[:, j]
            vt[j] = -vt[j]
    return u, vt


def truncated_svd(m, r: int) -> SvdResult:
    """Best rank-``r`` factorization ``m ~= U diag(S) Vt``.

    Runs in float64 regardless of input precision and casts back to the input
    dtype. Singular values come out descending; each column of ``U`` has its
    largest-magnitude entry non-negative, with ``Vt`` flipped to match.
    """
    a = m.data if isinstance(m, Tensor) else np.asarray(m)
    out_dtype = a.dtype if a.dtype.kind == "f" else np.float64
    if a.ndim != 2:
        raise ParameterError(f"truncated_svd needs a matrix, got shape {a.shape}")
    rows, cols = a.shape
    if not 1 <= r <= min(rows, cols):
        raise ParameterError(f"rank {r} outside [1, {min(rows, cols)}]")
    if not np.isfinite(a).all():
        raise NumericalError("truncated_svd input contains non-finite values")

    transposed = rows < cols
    work = np.array(a.T if not transposed else a, dtype=np.float64, order="C")
    # rows of ``work`` are the columns of the tall orientation
    w, v, _ = _jacobi_rows(work, JACOBI_TOL, MAX_SWEEPS)
    sigma = np.sqrt(np.einsum("ij,ij->i", w, w))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    w = w[order]
    v = v[order]

    floor = sigma[0] * max(w.shape) * np.finfo(np.float64).eps if sigma[0] > 0 else 0.0
    good = sigma > floor
    left = np.zeros((w.shape[1], w.shape[0]))
    left[:, good] = (w[good] / sigma[good, None]).T
    left = _complete_columns(left, good)
    sigma = np.where(good, sigma, 0.0)
    right_t = v  # rows are right singular vectors of the tall orientation

    if transposed:
        u_full, vt_full = right_t.T, left.T
    else:
        u_full, vt_full = left, right_t
    u = np.ascontiguousarray(u_full[:, :r])
    vt = np.ascontiguousarray(vt_full[:r])
    u, vt = _apply_sign_convention(u, vt)
    return SvdResult(
        U=Tensor(u.astype(out_dtype)),
        S=Tensor(sigma[:r].astype(out_dtype)),
        Vt=Tensor(vt.astype(out_dtype)),
    )
