"""Dense linear algebra: products, norms, full and truncated SVD.

Matrices are plain 2-D numpy arrays of float32 or float64. All SVD work is
carried out in float64.

Small matrices (min dimension <= ``JACOBI_MAX_DIM``) are decomposed with a
one-sided (Hestenes) Jacobi iteration using a round-robin pair ordering, so
each step rotates ``n // 2`` disjoint column pairs at once. Truncated SVDs of
larger matrices use randomized subspace iteration with a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, DimensionError, NumericError, ValidationError

JACOBI_MAX_DIM = 512
MAX_SWEEPS = 100
OVERSAMPLE = 8
POWER_ITERS = 4
RANDOMIZED_SEED = 0

_EPS = np.finfo(np.float64).eps


@dataclass(frozen=True, eq=False)
class SvdResult:
    """Thin SVD ``m = U @ diag(S) @ V.T`` with ``k`` retained components."""

    U: np.ndarray  # (rows, k)
    S: np.ndarray  # (k,) non-increasing, non-negative
    V: np.ndarray  # (cols, k)

    @property
    def k(self) -> int:
        return self.S.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.S) @ self.V.T


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    """Validate a dense 2-D float matrix, promoting non-float input to float64."""
    a = np.asarray(m)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float64)
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{name} contains non-finite entries")
    return a


def matmul_dense(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def frobenius_norm(m) -> float:
    a = as_matrix(m).astype(np.float64, copy=False)
    return float(np.sqrt(np.sum(a * a)))


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pairings for one Jacobi sweep; every column pair appears exactly once.

    ``n`` must be even; odd inputs are padded by the caller.
    """
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        top = np.array(players[:half])
        bot = np.array(players[half:][::-1])
        rounds.append((np.minimum(top, bot), np.maximum(top, bot)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _jacobi_tall(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One-sided Jacobi on a tall matrix (rows >= cols).

    Returns unsorted ``(G, V)`` with ``a @ V = G`` and the columns of ``G``
    mutually orthogonal, plus the sweep count used.
    """
    m, n = a.shape
    pad = n % 2
    g = np.zeros((m, n + pad))
    g[:, :n] = a
    v = np.eye(n + pad)
    if n < 2:
        return g[:, :n], v[:n, :n], np.array(0)

    tol = _EPS * max(m, 8)
    # columns whose energy is at rounding level of the whole matrix are
    # treated as zero; rotating them only chases noise
    tiny = (_EPS * np.sqrt(np.sum(a * a))) ** 2
    rounds = _round_robin(n + pad)
    for sweep in range(1, MAX_SWEEPS + 1):
        rotated = False
        for p, q in rounds:
            gp = g[:, p]
            gq = g[:, q]
            alpha = np.einsum("ij,ij->j", gp, gp)
            beta = np.einsum("ij,ij->j", gq, gq)
            gamma = np.einsum("ij,ij->j", gp, gq)
            need = (np.abs(gamma) > tol * np.sqrt(alpha * beta)) & (np.minimum(alpha, beta) > tiny)
            if not np.any(need):
                continue
            rotated = True
            p, q = p[need], q[need]
            alpha, beta, gamma = alpha[need], beta[need], gamma[need]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            gp = g[:, p]
            gq = g[:, q]
            g[:, p] = c * gp - s * gq
            g[:, q] = s * gp + c * gq
            vp = v[:, p]
            vq = v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if not rotated:
            return g[:, :n], v[:n, :n], np.array(sweep)
    raise ConvergenceError(f"Jacobi SVD did not converge in {MAX_SWEEPS} sweeps")


def _complete_basis(u: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Replace columns of ``u`` not flagged ``good`` with an orthonormal completion.

    Each new column is the standard basis vector with the largest residual
    after projecting out the current basis (lowest index on ties), made
    orthonormal by two Gram-Schmidt passes.
    """
    m = u.shape[0]
    out = u.copy()
    basis = u[:, good]
    for j in np.flatnonzero(~good):
        resid = np.eye(m)
        for _ in range(2):
            resid -= basis @ (basis.T @ resid)
        norms = np.linalg.norm(resid, axis=0)
        i = int(np.argmax(norms))
        if norms[i] <= _EPS:  # pragma: no cover - impossible for k <= m
            raise NumericError("could not complete orthonormal basis")
        e = resid[:, i] / norms[i]
        out[:, j] = e
        basis = np.column_stack([basis, e])
    return out


def _fix_signs(u: np.ndarray, v: np.ndarray) -> None:
    """Make the first nonzero entry of each column of ``u`` non-negative (in place)."""
    for j in range(u.shape[1]):
        col = u[:, j]
        nz = np.flatnonzero(np.abs(col) > _EPS)
        if nz.size and col[nz[0]] < 0:
            u[:, j] = -col
            v[:, j] = -v[:, j]


def _jacobi_svd(a: np.ndarray) -> SvdResult:
    m, n = a.shape
    transposed = m < n
    work = a.T if transposed else a
    g, v, _ = _jacobi_tall(np.array(work, dtype=np.float64))
    s = np.sqrt(np.einsum("ij,ij->j", g, g))
    order = np.argsort(-s, kind="stable")
    s = s[order]
    g = g[:, order]
    v = v[:, order]
    thresh = (s[0] if s.size else 0.0) * max(work.shape) * _EPS
    good = s > thresh
    s = np.where(good, s, 0.0)
    u = np.zeros_like(g)
    u[:, good] = g[:, good] / s[good]
    if not np.all(good):
        u = _complete_basis(u, good)
    if transposed:
        u, v = v, u
    u = np.ascontiguousarray(u)
    v = np.ascontiguousarray(v)
    _fix_signs(u, v)
    return SvdResult(u, s, v)


def svd_full(m) -> SvdResult:
    """Thin SVD with ``k = min(rows, cols)`` components.

    The first nonzero entry of every ``U`` column is made non-negative so
    results are reproducible bit for bit.

    Raises:
        ConvergenceError: if the Jacobi iteration exceeds ``MAX_SWEEPS``.
    """
    a = as_matrix(m).astype(np.float64, copy=False)
    if min(a.shape) == 0:
        raise ValidationError("cannot decompose an empty matrix")
    return _jacobi_svd(a)


def randomized_svd(m, r: int, oversample: int = OVERSAMPLE, power_iters: int = POWER_ITERS,
                   seed: int = RANDOMIZED_SEED) -> SvdResult:
    """Rank-``r`` SVD via randomized subspace iteration.

    The projected problem is solved with the Jacobi routine; the orthonormal
    range basis comes from numpy's Householder QR.
    """
    a = as_matrix(m).astype(np.float64, copy=False)
    rows, cols = a.shape
    ell = min(r + oversample, rows, cols)
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(a @ rng.standard_normal((cols, ell)))
    for _ in range(power_iters):
        z, _ = np.linalg.qr(a.T @ q)
        q, _ = np.linalg.qr(a @ z)
    small = _jacobi_svd(q.T @ a)
    u = q @ small.U[:, :r]
    v = np.ascontiguousarray(small.V[:, :r])
    u = np.ascontiguousarray(u)
    _fix_signs(u, v)
    return SvdResult(u, small.S[:r].copy(), v)


def svd_truncated(m, r: int) -> SvdResult:
    """Top-``r`` singular triplets of ``m``.

    Exact (Jacobi) for min dimension up to ``JACOBI_MAX_DIM``, randomized
    beyond that.
    """
    a = as_matrix(m)
    k = min(a.shape)
    if not 1 <= r <= k:
        raise ValidationError(f"rank {r} outside [1, {k}]")
    if k > JACOBI_MAX_DIM:
        return randomized_svd(a, r)
    full = svd_full(a)
    return SvdResult(
        np.ascontiguousarray(full.U[:, :r]),
        full.S[:r].copy(),
        np.ascontiguousarray(full.V[:, :r]),
    )
