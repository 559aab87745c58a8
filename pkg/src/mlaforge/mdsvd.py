"""Activation-whitened low-rank factorization, split by modality.

For weights ``W`` and calibration activations ``X`` (``d_model x n``) the
factorization minimizes the output-space truncation loss
``||W X - W_up W_down X||_F^2``:

1. ``S = X X^T`` (plus an optional ridge), eigendecomposed as ``U_s diag(s) U_s^T``
2. ``D = W U_s diag(s)^{1/2}`` and its SVD ``U_d diag(sigma) V_d``
3. keep ``r`` components; ``W_up = U_d sqrt(sigma)``,
   ``W_down = sqrt(sigma) V_d diag(s)^{-1/2} U_s^T``

The minimum loss equals the sum of the squared discarded ``sigma``.
Running it once per modality gives separate factor pairs for visual and
text tokens from the same shared ``W``.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import as_matrix, svd, sym_eig

DEFAULT_RIDGE = 1e-6
# relative to ||W X||_F^2; smaller losses count as exact zeros in loss reports
NOISE_FLOOR = 1e-20


class FactorizationError(ValueError):
    pass


@dataclass(frozen=True)
class FactorizationResult:
    w_up: np.ndarray
    w_down: np.ndarray
    rank: int
    loss_sq: float
    loss_sq_closed_form: float
    discarded_spectrum: np.ndarray
    fallback: bool = False

    def reconstruct(self) -> np.ndarray:
        return self.w_up @ self.w_down


def covariance(x: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """``x @ x.T`` accumulated over fixed column chunks, in order."""
    d = x.shape[0]
    s = np.zeros((d, d))
    for start in range(0, x.shape[1], chunk):
        block = x[:, start : start + chunk]
        s += block @ block.T
    return s


def truncation_loss(w: np.ndarray, w_approx: np.ndarray, x: np.ndarray) -> float:
    """``||W X - W' X||_F^2``."""
    diff = (w - w_approx) @ x
    return float(np.sum(diff * diff))


def whitened_factorize(w, x, rank: int, ridge: float = DEFAULT_RIDGE) -> FactorizationResult:
    """Rank-``rank`` whitened factorization of ``w`` on activations ``x``.

    The ridge adds ``ridge * trace(S) / d_model`` to the diagonal of the
    covariance. With ``ridge=0`` a singular covariance is handled by a
    pseudo-inverse square root (zero-variance directions map to zero).
    """
    w = as_matrix(w, "w")
    x = as_matrix(x, "x")
    if x.shape[1] == 0:
        raise FactorizationError("activation matrix has no columns")
    if x.shape[0] != w.shape[1]:
        raise FactorizationError(f"x has {x.shape[0]} rows but w has {w.shape[1]} columns")
    if rank < 1:
        raise FactorizationError("rank must be at least 1")
    if rank > min(w.shape):
        raise FactorizationError(f"rank {rank} exceeds min(rows, d_model) = {min(w.shape)}")
    if ridge < 0:
        raise FactorizationError("ridge must be nonnegative")
    d = x.shape[0]
    s_cov = covariance(x)
    if ridge > 0:
        s_cov = s_cov + ridge * (np.trace(s_cov) / d) * np.eye(d)
    eigvals, u_s = sym_eig(s_cov)
    root = np.sqrt(eigvals)
    tol = eigvals[0] * d * np.finfo(np.float64).eps if eigvals.size else 0.0
    inv_root = np.zeros_like(root)
    live = eigvals > tol
    inv_root[live] = 1.0 / root[live]

    dmat = (w @ u_s) * np.where(live, root, 0.0)
    dec = svd(dmat)
    top = dec.truncate(rank)
    half = np.sqrt(top.sigma)
    w_up = top.u * half
    w_down = ((half[:, None] * top.vt) * inv_root) @ u_s.T
    discarded = dec.sigma[rank:].copy()
    return FactorizationResult(
        w_up=w_up,
        w_down=w_down,
        rank=rank,
        loss_sq=truncation_loss(w, w_up @ w_down, x),
        loss_sq_closed_form=float(np.sum(discarded**2)),
        discarded_spectrum=discarded,
    )


def _empty(x) -> bool:
    return x is None or np.asarray(x).size == 0 or np.asarray(x).shape[-1] == 0


def md_svd(w, x_visual, x_text, r_visual: int, r_text: int, ridge: float = DEFAULT_RIDGE) -> dict[str, FactorizationResult]:
    """Separate whitened factorizations of the shared ``w`` per modality.

    Returns ``{"visual": ..., "text": ...}``. If one modality has no
    activations, the other modality's factors are reused for it and both
    results carry ``fallback=True``. ``w`` is never modified.
    """
    w = np.array(as_matrix(w, "w"), copy=True)
    if _empty(x_visual) and _empty(x_text):
        raise FactorizationError("both modalities have empty activations")
    if _empty(x_visual) or _empty(x_text):
        if _empty(x_visual):
            x, r = x_text, r_text
        else:
            x, r = x_visual, r_visual
        res = dataclasses.replace(whitened_factorize(w, x, r, ridge), fallback=True)
        return {"visual": res, "text": res}
    return {
        "visual": whitened_factorize(w, x_visual, r_visual, ridge),
        "text": whitened_factorize(w, x_text, r_text, ridge),
    }


@dataclass(frozen=True)
class LossEntry:
    layer: int
    loss_joint: float
    loss_visual: float
    loss_text: float

    @property
    def ratio(self) -> float:
        split = self.loss_visual + self.loss_text
        if self.loss_joint <= 0.0:
            return 1.0 if split <= 0.0 else float("inf")
        return split / self.loss_joint


class SplitLossViolation(AssertionError):
    pass


def split_loss_report(w, x_visual, x_text, rank: int, ridge: float = 0.0, layer: int = 0, rtol: float = 1e-9) -> LossEntry:
    """Joint versus modality-split truncation loss at the same rank.

    The joint factorization sees ``[x_visual | x_text]``; the split one
    factorizes each modality separately. Raises :class:`SplitLossViolation`
    if the split loss exceeds the joint loss by more than ``rtol``.
    Defaults to ``ridge=0`` so both sides are exact minimizers. Losses
    below ``NOISE_FLOOR * ||W X||_F^2`` are reported as exact zeros.
    """
    xv = as_matrix(x_visual, "x_visual")
    xt = as_matrix(x_text, "x_text")
    joint = whitened_factorize(w, np.concatenate([xv, xt], axis=1), rank, ridge)
    split = md_svd(w, xv, xt, rank, rank, ridge)
    energy = float(np.sum((np.asarray(w) @ np.concatenate([xv, xt], axis=1)) ** 2))
    # losses this far below the output energy are rounding noise of an exact fit
    floor = NOISE_FLOOR * energy
    snap = lambda v: 0.0 if v <= floor else v
    entry = LossEntry(layer, snap(joint.loss_sq), snap(split["visual"].loss_sq), snap(split["text"].loss_sq))
    slack = rtol * max(entry.loss_joint, floor)
    if entry.loss_visual + entry.loss_text > entry.loss_joint + slack:
        raise SplitLossViolation(f"split loss {entry.loss_visual + entry.loss_text!r} exceeds joint {entry.loss_joint!r}")
    return entry


@dataclass
class LossReport:
    entries: list[LossEntry] = field(default_factory=list)

    COLUMNS = ("layer", "loss_joint", "loss_visual", "loss_text", "ratio")

    def add(self, entry: LossEntry) -> None:
        self.entries.append(entry)

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(self.COLUMNS)
            for e in self.entries:
                wr.writerow([e.layer, repr(e.loss_joint), repr(e.loss_visual), repr(e.loss_text), repr(e.ratio)])

    @classmethod
    def from_csv(cls, path) -> "LossReport":
        rep = cls()
        with open(Path(path), newline="") as fh:
            rd = csv.DictReader(fh)
            for row in rd:
                rep.add(LossEntry(int(row["layer"]), float(row["loss_joint"]), float(row["loss_visual"]), float(row["loss_text"])))
        return rep
