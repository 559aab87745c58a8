"""Dense float64 kernels shared by the rest of the package.

Everything here is a pure function of its inputs. Matrices are plain
``numpy.ndarray`` objects; inputs are promoted to float64 on entry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KL_FLOOR = 1e-12
_SIMPLEX_TOL = 1e-9


class NumericsError(ValueError):
    """Raised for invalid inputs or failed factorizations."""


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Return ``a`` as a finite 2-D float64 array."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise NumericsError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"{name} has non-finite entries")
    return arr


def _fix_signs(u: np.ndarray, *others: np.ndarray):
    """Flip columns of ``u`` so each column's largest-|.| entry is >= 0.

    ``np.argmax`` returns the first maximal index, which gives the
    lowest-row tie break. Rows of every array in ``others`` are flipped
    alongside (they are the matching right factors).
    """
    if u.shape[1] == 0:
        return (u, *others)
    pivot = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[pivot, np.arange(u.shape[1])] < 0, -1.0, 1.0)
    out = [u * signs]
    for o in others:
        out.append(o * signs[:, None])
    return tuple(out)


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    sigma: np.ndarray
    vt: np.ndarray

    @property
    def rank(self) -> int:
        return int(self.sigma.shape[0])

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.vt

    def truncate(self, r: int) -> "SvdResult":
        return SvdResult(self.u[:, :r], self.sigma[:r], self.vt[:r])


def svd(a) -> SvdResult:
    """Thin SVD ``a = u @ diag(sigma) @ vt`` with a deterministic sign choice.

    Singular values come back in descending order. Each left singular
    vector is oriented so its largest-magnitude entry is nonnegative.
    """
    a = as_matrix(a, "svd input")
    if a.size == 0:
        k = min(a.shape)
        return SvdResult(np.zeros((a.shape[0], k)), np.zeros(k), np.zeros((k, a.shape[1])))
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericsError(f"SVD did not converge: {exc}") from exc
    u, vt = _fix_signs(u, vt)
    return SvdResult(u, s, vt)


def sym_eig(s) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric PSD matrix.

    Returns ``(eigvals, eigvecs)`` with eigenvalues descending and clamped
    at zero, eigenvector columns sign-fixed like :func:`svd`. The input is
    symmetrized first, so tiny asymmetries from accumulation are harmless.
    """
    s = as_matrix(s, "symmetric input")
    if s.shape[0] != s.shape[1]:
        raise NumericsError(f"expected a square matrix, got {s.shape}")
    sym = 0.5 * (s + s.T)
    try:
        w, v = np.linalg.eigh(sym)
    except np.linalg.LinAlgError as exc:
        raise NumericsError(f"eigendecomposition did not converge: {exc}") from exc
    order = np.argsort(-w, kind="stable")
    w = np.clip(w[order], 0.0, None)
    (v,) = _fix_signs(v[:, order])
    return w, v


def pinv(a, rcond: float | None = None) -> np.ndarray:
    """Moore-Penrose pseudo-inverse built on :func:`svd`."""
    a = as_matrix(a, "pinv input")
    res = svd(a)
    if rcond is None:
        rcond = max(a.shape) * np.finfo(np.float64).eps
    cutoff = rcond * (res.sigma[0] if res.sigma.size else 0.0)
    inv = np.zeros_like(res.sigma)
    keep = res.sigma > cutoff
    inv[keep] = 1.0 / res.sigma[keep]
    return (res.vt.T * inv) @ res.u.T


def frobenius_norm(a) -> float:
    return float(np.sqrt(np.sum(np.square(np.asarray(a, dtype=np.float64)))))


def causal_keep_mask(n: int, offset: int = 0) -> np.ndarray:
    """Boolean ``(n, offset + n)`` mask; True where a query may attend.

    Query ``i`` sits at absolute position ``offset + i`` and sees keys
    ``0 .. offset + i``.
    """
    return np.arange(offset + n)[None, :] <= (offset + np.arange(n))[:, None]


def softmax_rows(scores, causal_mask: bool | np.ndarray = False) -> np.ndarray:
    """Row-wise softmax over the last axis, stabilized by the row max.

    ``causal_mask`` may be ``True`` (square lower-triangular mask), a
    boolean array broadcastable to ``scores`` (True = keep), or ``False``.
    Masked entries come back as exact zeros.
    """
    x = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericsError("softmax input has non-finite entries")
    if causal_mask is True:
        if x.shape[-1] != x.shape[-2]:
            raise NumericsError("causal mask needs square score matrices")
        mask = causal_keep_mask(x.shape[-1])
    elif causal_mask is False:
        mask = None
    else:
        mask = np.asarray(causal_mask, dtype=bool)
    if mask is not None:
        if not np.all(np.broadcast_to(mask, x.shape).any(axis=-1)):
            raise NumericsError("softmax row has every entry masked")
        x = np.where(mask, x, -np.inf)
    x = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(x)
    return e / np.sum(e, axis=-1, keepdims=True)


def _check_prob(v: np.ndarray, name: str) -> None:
    if v.ndim != 1:
        raise NumericsError(f"{name} must be a vector")
    if np.any(v < 0):
        raise NumericsError(f"{name} has negative entries")
    if abs(v.sum() - 1.0) > _SIMPLEX_TOL:
        raise NumericsError(f"{name} sums to {v.sum()!r}, not 1")


def kl_divergence(p, q) -> float:
    """``KL(p || q) = sum p ln(p / q)`` in nats.

    Entries of ``q`` on the support of ``p`` that fall below both
    ``KL_FLOOR`` and the matching ``p`` entry are raised to ``KL_FLOOR``;
    if the floor moved anything, ``q`` is renormalized. Entries with
    ``q >= p`` cannot blow up the log ratio and are left alone, which keeps
    ``KL(p || p) == 0`` exact.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise NumericsError(f"length mismatch: {p.shape} vs {q.shape}")
    _check_prob(p, "p")
    _check_prob(q, "q")
    support = p > 0
    low = support & (q < KL_FLOOR) & (q < p)
    if np.any(low):
        q = np.where(low, KL_FLOOR, q)
        q = q / q.sum()
    ps, qs = p[support], q[support]
    return max(float(np.sum(ps * np.log(ps / qs))), 0.0)


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise KL over the last axis for stacks of attention rows.

    Same flooring rule as :func:`kl_divergence`, without the simplex
    validation (rows are softmax outputs by construction).
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    support = p > 0
    low = support & (q < KL_FLOOR) & (q < p)
    if np.any(low):
        q = np.where(low, KL_FLOOR, q)
        touched = np.any(low, axis=-1, keepdims=True)
        q = np.where(touched, q / q.sum(axis=-1, keepdims=True), q)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(support, p * np.log(np.where(support, p, 1.0) / np.where(support, q, 1.0)), 0.0)
    return np.maximum(terms.sum(axis=-1), 0.0)
