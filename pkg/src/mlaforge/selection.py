"""Choosing which rotary subspaces keep RoPE after conversion.

Two scorers produce a per-(layer, query head, subspace) sensitivity map:

* ``two_norm`` -- mean product of the query and key chunk norms,
* ``mkl`` -- mean KL divergence between the attention distribution of the
  full-RoPE model and the one obtained after zeroing a single subspace in
  that head's query and key.

:func:`select_top_r` then averages the scores over the query heads of each
kv group and keeps the ``r = d_rope / 2`` best subspaces.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelConfig, TokenSequence, dim_permutation, run_gqa
from .numerics import causal_keep_mask, kl_rows, softmax_rows
from .rope import RopeSpec, apply_rope_tokens

STRATEGIES = ("two_norm", "mkl")
_ALIASES = {"2norm": "two_norm", "2-norm": "two_norm", "two_norm": "two_norm", "mkl": "mkl"}


class SelectionError(ValueError):
    pass


def canonical_strategy(name: str) -> str:
    try:
        return _ALIASES[name]
    except KeyError:
        raise SelectionError(f"unknown selection strategy {name!r}") from None


@dataclass(frozen=True)
class SensitivityMap:
    scores: np.ndarray  # (n_layers, n_heads, n_subspaces)
    strategy: str

    def rows(self):
        L, H, K = self.scores.shape
        for l in range(L):
            for h in range(H):
                for k in range(K):
                    yield l, h, k, float(self.scores[l, h, k])


@dataclass(frozen=True)
class SubspaceSelection:
    retained: np.ndarray  # (n_layers, n_kv_heads, r), ascending per row
    strategy: str
    aggregation: str = "mean"

    def layer(self, l: int) -> np.ndarray:
        return self.retained[l]

    def dim_permutation(self, l: int, g: int, d_head: int) -> np.ndarray:
        return dim_permutation(self.retained[l, g], d_head)

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "aggregation": self.aggregation,
            "retained": self.retained.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SubspaceSelection":
        return cls(np.asarray(d["retained"], dtype=np.int64), d["strategy"], d.get("aggregation", "mean"))

    @classmethod
    def full(cls, cfg: ModelConfig) -> "SubspaceSelection":
        ret = np.broadcast_to(np.arange(cfg.n_subspaces), (cfg.n_layers, cfg.n_kv_heads, cfg.n_subspaces))
        return cls(np.array(ret, dtype=np.int64), "full")


def _layer_inputs(cfg, layers, calib, activations):
    if not calib:
        raise SelectionError("calibration batch is empty")
    if activations is not None:
        return activations
    return [run_gqa(cfg, layers, seq).inputs for seq in calib]


def _chunk_norms(x: np.ndarray) -> np.ndarray:
    """``(..., d_head)`` -> ``(..., d_head // 2)`` pair norms."""
    return np.sqrt(x[..., 0::2] ** 2 + x[..., 1::2] ** 2)


def score_two_norm(cfg: ModelConfig, layers, calib: list[TokenSequence], activations=None) -> SensitivityMap:
    """Mean over all calibration tokens of ``|q_chunk_k| * |k_chunk_k|``.

    Projections are taken before rotation; the key of a query head is its
    group's shared kv head. ``activations[s][l]`` (token-major layer inputs)
    may be passed to skip the teacher forward.
    """
    inputs = _layer_inputs(cfg, layers, calib, activations)
    L, H, K = cfg.n_layers, cfg.n_heads, cfg.n_subspaces
    total = np.zeros((L, H, K))
    count = 0
    for seq_inputs in inputs:
        n = seq_inputs[0].shape[0]
        count += n
        for l, w in enumerate(layers):
            x = seq_inputs[l]
            q = (x @ w.w_q.T).reshape(n, H, cfg.d_head)
            k = (x @ w.w_k.T).reshape(n, cfg.n_kv_heads, cfg.d_head)
            kq = np.repeat(_chunk_norms(k), cfg.group_size, axis=1)
            total[l] += np.sum(_chunk_norms(q) * kq, axis=0)
    if count == 0:
        raise SelectionError("calibration batch has no tokens")
    return SensitivityMap(total / count, "two_norm")


def head_attention(spec: RopeSpec, q: np.ndarray, k: np.ndarray, positions, scale: float) -> np.ndarray:
    """Causal attention rows for stacked single-head inputs ``(..., n, d_head)``."""
    qr = apply_rope_tokens(spec, q, positions)
    kr = apply_rope_tokens(spec, k, positions)
    scores = np.einsum("...id,...jd->...ij", qr, kr) * scale
    return softmax_rows(scores, causal_keep_mask(q.shape[-2]))


def score_mkl(cfg: ModelConfig, layers, calib: list[TokenSequence], rope_spec: RopeSpec | None = None, activations=None) -> SensitivityMap:
    """Frequency-wise KL sensitivity of every (layer, head, subspace).

    For each head the attention of the full-RoPE model is compared with the
    attention after zeroing dims ``[2k, 2k+1]`` of that head's query and
    key projections (before rotation). Row KLs are averaged over query
    positions within a sequence, then over sequences in order.
    """
    spec = rope_spec or cfg.rope_spec()
    inputs = _layer_inputs(cfg, layers, calib, activations)
    L, H, K, d = cfg.n_layers, cfg.n_heads, cfg.n_subspaces, cfg.d_head
    scale = 1.0 / np.sqrt(d)
    total = np.zeros((L, H, K))
    for s, seq_inputs in enumerate(inputs):
        n = seq_inputs[0].shape[0]
        if n < 2:
            raise SelectionError(f"calibration sequence {s} has {n} token(s); MKL needs at least 2")
        positions = calib[s].positions
        for l, w in enumerate(layers):
            x = seq_inputs[l]
            q = (x @ w.w_q.T).reshape(n, H, d).transpose(1, 0, 2)
            k = (x @ w.w_k.T).reshape(n, cfg.n_kv_heads, d).transpose(1, 0, 2)
            for h in range(H):
                # slot 0 is the unablated head; sharing one batched call keeps
                # the arithmetic identical, so a dead subspace scores exactly 0
                qm = np.broadcast_to(q[h], (K + 1, n, d)).copy()
                km = np.broadcast_to(k[h // cfg.group_size], (K + 1, n, d)).copy()
                for kk in range(K):
                    qm[kk + 1, :, 2 * kk : 2 * kk + 2] = 0.0
                    km[kk + 1, :, 2 * kk : 2 * kk + 2] = 0.0
                p = head_attention(spec, qm, km, positions, scale)
                total[l, h] += kl_rows(np.broadcast_to(p[0], p[1:].shape), p[1:]).mean(axis=1)
    return SensitivityMap(total / len(inputs), "mkl")


def top_r(scores, r: int) -> np.ndarray:
    """Indices of the ``r`` largest scores, ties to the lower index, ascending."""
    scores = np.asarray(scores, dtype=np.float64)
    if not (0 <= r <= scores.shape[0]):
        raise SelectionError(f"r={r} out of range for {scores.shape[0]} subspaces")
    order = np.lexsort((np.arange(scores.shape[0]), -scores))
    return np.sort(order[:r])


def select_top_r(smap: SensitivityMap, cfg: ModelConfig, r: int | None = None) -> SubspaceSelection:
    """Per layer and kv group, keep the top-``r`` subspaces of the group-mean score."""
    r = cfg.r if r is None else r
    L, H, K = smap.scores.shape
    if (L, H, K) != (cfg.n_layers, cfg.n_heads, cfg.n_subspaces):
        raise SelectionError(f"sensitivity map shape {smap.scores.shape} does not match the config")
    if not (1 <= r <= K):
        raise SelectionError(f"r={r} out of range [1, {K}]")
    grouped = smap.scores.reshape(L, cfg.n_kv_heads, cfg.group_size, K).mean(axis=2)
    retained = np.zeros((L, cfg.n_kv_heads, r), dtype=np.int64)
    for l in range(L):
        for g in range(cfg.n_kv_heads):
            retained[l, g] = top_r(grouped[l, g], r)
    return SubspaceSelection(retained, smap.strategy)


def select_subspaces(cfg: ModelConfig, layers, calib, strategy: str, activations=None) -> tuple[SubspaceSelection, SensitivityMap]:
    strategy = canonical_strategy(strategy)
    if strategy == "two_norm":
        smap = score_two_norm(cfg, layers, calib, activations)
    else:
        smap = score_mkl(cfg, layers, calib, activations=activations)
    return select_top_r(smap, cfg), smap
