"""Rotary position embeddings: vanilla 1-D RoPE and multimodal M-RoPE.

Head vectors use the paired layout: subspace ``k`` is the dimension pair
``[2k, 2k + 1]`` and rotates at frequency ``theta_k = base ** (-2k / d_head)``.
Under M-RoPE each subspace reads one component of a ``(t, h, w)`` position
triple; under vanilla RoPE every subspace reads ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

VANILLA = "vanilla_1d"
MROPE = "mrope"
ROPE_KINDS = (VANILLA, MROPE)

# position-triple columns
T, H, W = 0, 1, 2


class RopeError(ValueError):
    pass


@dataclass(frozen=True)
class RopeSpec:
    kind: str
    base: float
    d_head: int
    theta: np.ndarray = field(init=False, repr=False, compare=False)
    group_of_subspace: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in ROPE_KINDS:
            raise RopeError(f"unknown rope kind {self.kind!r}")
        if self.d_head <= 0 or self.d_head % 2:
            raise RopeError("d_head must be a positive even number")
        if self.base <= 1.0:
            raise RopeError("rope base must exceed 1")
        half = self.d_head // 2
        k = np.arange(half, dtype=np.float64)
        theta = np.exp(-2.0 * k * np.log(self.base) / self.d_head)
        if self.kind == MROPE:
            if self.d_head % 16:
                raise RopeError("M-RoPE needs d_head divisible by 16")
            groups = np.full(half, W, dtype=np.int64)
            groups[: self.d_head // 8] = T
            groups[self.d_head // 8 : 5 * self.d_head // 16] = H
        else:
            groups = np.zeros(half, dtype=np.int64)
        theta.setflags(write=False)
        groups.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "group_of_subspace", groups)

    @property
    def n_subspaces(self) -> int:
        return self.d_head // 2

    def group_bounds(self) -> dict[str, tuple[int, int]]:
        """Half-open subspace ranges per position component."""
        half = self.n_subspaces
        if self.kind == VANILLA:
            return {"t": (0, half)}
        return {
            "t": (0, self.d_head // 8),
            "h": (self.d_head // 8, 5 * self.d_head // 16),
            "w": (5 * self.d_head // 16, half),
        }


def _retained_indices(spec: RopeSpec, retained) -> np.ndarray:
    if retained is None:
        return np.arange(spec.n_subspaces)
    idx = np.asarray(sorted(set(int(i) for i in retained)), dtype=np.int64)
    if idx.size and (idx[0] < 0 or idx[-1] >= spec.n_subspaces):
        raise RopeError(f"retained subspace out of range [0, {spec.n_subspaces})")
    return idx


def rope_angles(spec: RopeSpec, positions, subspaces) -> np.ndarray:
    """Rotation angles ``(n_tokens, len(subspaces))`` for the given subspaces."""
    pos = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    sub = np.asarray(subspaces, dtype=np.int64)
    comp = spec.group_of_subspace[sub]
    return pos[:, comp] * spec.theta[sub]


def rotate_pairs(x: np.ndarray, angles: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Rotate consecutive pairs of the last axis of ``x``.

    ``x`` has shape ``(..., n, 2m)`` and ``angles`` shape ``(n, m)``.
    ``inverse=True`` applies the transpose rotation (used in backprop).
    """
    cos = np.cos(angles)
    sin = np.sin(angles)
    if inverse:
        sin = -sin
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty(np.broadcast_shapes(x.shape), dtype=np.float64)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def _pair_dims(sub: np.ndarray) -> np.ndarray:
    return np.stack([2 * sub, 2 * sub + 1], axis=1).reshape(-1)


def apply_rope_tokens(spec: RopeSpec, x: np.ndarray, positions, retained=None, inverse: bool = False) -> np.ndarray:
    """Rotate token-major head vectors ``x`` of shape ``(..., n, d_head)``.

    Subspaces outside ``retained`` (``None`` means all) are copied through
    untouched.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != spec.d_head:
        raise RopeError(f"expected head width {spec.d_head}, got {x.shape[-1]}")
    sub = _retained_indices(spec, retained)
    out = x.copy()
    if sub.size == 0:
        return out
    dims = _pair_dims(sub)
    angles = rope_angles(spec, positions, sub)
    out[..., dims] = rotate_pairs(x[..., dims], angles, inverse=inverse)
    return out


def apply_rope(spec: RopeSpec, vec, pos, retained=None) -> np.ndarray:
    """Rotate a single head vector at position triple ``pos``.

    ``retained`` is an iterable of subspace indices, or ``None`` for all
    subspaces (full RoPE). An empty set leaves the vector unchanged.
    """
    v = np.asarray(vec, dtype=np.float64)
    if v.shape != (spec.d_head,):
        raise RopeError(f"expected a vector of length {spec.d_head}, got shape {v.shape}")
    p = np.asarray(pos, dtype=np.float64).reshape(1, 3)
    return apply_rope_tokens(spec, v[None, :], p, retained)[0]


def relative_score(spec: RopeSpec, q, k, pos_q, pos_k, retained=None) -> float:
    """Dot product of the rotated query and key."""
    return float(apply_rope(spec, q, pos_q, retained) @ apply_rope(spec, k, pos_k, retained))


# ---------------------------------------------------------------------------
# position-ID assignment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Segment:
    """One contiguous run of tokens in a sequence layout.

    ``kind`` is ``"text"``, ``"image"`` or ``"video"``. Visual segments
    declare a ``(frames, rows, cols)`` grid; ``coords`` lists the grid cell
    of every token and defaults to the full grid in raster order.
    """

    kind: str
    length: int = 0
    grid: tuple[int, int, int] = (1, 1, 1)
    coords: tuple[tuple[int, int, int], ...] | None = None

    def token_coords(self) -> np.ndarray:
        if self.kind == "text":
            return np.zeros((self.length, 3), dtype=np.int64)
        f, r, c = self.grid
        if self.coords is None:
            ff, rr, cc = np.meshgrid(np.arange(f), np.arange(r), np.arange(c), indexing="ij")
            return np.stack([ff.ravel(), rr.ravel(), cc.ravel()], axis=1)
        arr = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        bad = (arr < 0) | (arr >= np.asarray(self.grid))
        if np.any(bad):
            i = int(np.argmax(bad.any(axis=1)))
            raise RopeError(f"grid position {tuple(arr[i])} outside declared grid {self.grid}")
        return arr

    @property
    def n_tokens(self) -> int:
        if self.kind == "text":
            return self.length
        if self.coords is None:
            return int(np.prod(self.grid))
        return len(self.coords)


def text(n: int) -> Segment:
    return Segment("text", length=n)


def image(rows: int, cols: int, coords: Iterable[tuple[int, int]] | None = None) -> Segment:
    c = None if coords is None else tuple((0, int(r), int(k)) for r, k in coords)
    return Segment("image", grid=(1, rows, cols), coords=c)


def video(frames: int, rows: int, cols: int, coords: Iterable[tuple[int, int, int]] | None = None) -> Segment:
    c = None if coords is None else tuple(tuple(int(v) for v in x) for x in coords)
    return Segment("video", grid=(frames, rows, cols), coords=c)


def assign_positions(layout: Sequence[Segment], rope_kind: str = MROPE) -> np.ndarray:
    """Position triples ``(n_tokens, 3)`` for a segment layout.

    M-RoPE: text tokens get ``t = h = w`` equal to a running index. A
    visual segment starting at running index ``s`` gives frame ``f`` the
    temporal ID ``s + f`` and 0-based ``(row, col)`` as ``(h, w)``; the
    running index then advances by ``max(frames, rows, cols)``.

    Vanilla RoPE flattens everything: token ``i`` gets ``(i, i, i)``.
    """
    if rope_kind not in ROPE_KINDS:
        raise RopeError(f"unknown rope kind {rope_kind!r}")
    out = []
    start = 0
    for seg in layout:
        if seg.kind not in ("text", "image", "video"):
            raise RopeError(f"unknown segment kind {seg.kind!r}")
        coords = seg.token_coords()
        n = len(coords)
        if rope_kind == VANILLA or seg.kind == "text":
            idx = start + np.arange(n, dtype=np.int64)
            out.append(np.stack([idx, idx, idx], axis=1))
            start += n
            continue
        block = coords.copy()
        block[:, T] += start
        out.append(block)
        start += max(seg.grid)
    if not out:
        return np.zeros((0, 3), dtype=np.int64)
    return np.concatenate(out, axis=0)


def layout_modality(layout: Sequence[Segment]) -> np.ndarray:
    """Per-token modality codes (0 = visual, 1 = text) for a layout."""
    from .model import TEXT, VISUAL

    parts = [np.full(seg.n_tokens, TEXT if seg.kind == "text" else VISUAL, dtype=np.int8) for seg in layout]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int8)
