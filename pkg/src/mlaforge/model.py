"""Toy attention-only transformer: MHA/GQA and MLA forward passes plus the KV cache.

Layout conventions
------------------
* A :class:`TokenSequence` stores embeddings as ``(d_model, n_tokens)``
  (one column per token). Internally everything is token-major.
* Layers are residual: ``h_{l+1} = h_l + attn_l(h_l)``. There is no MLP
  and no normalization.
* Weight matrices map ``d_model`` columns to stacked head rows, e.g.
  ``w_q`` is ``(n_heads * d_head, d_model)`` with head ``i`` occupying
  rows ``i * d_head : (i + 1) * d_head``.
* Query head ``i`` reads kv head ``i // (n_heads // n_kv_heads)``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .numerics import causal_keep_mask, softmax_rows
from .rope import ROPE_KINDS, RopeSpec, apply_rope_tokens, rope_angles, rotate_pairs

VISUAL = 0
TEXT = 1
MODALITIES = ("visual", "text")


class ModelError(ValueError):
    pass


def modality_code(tag) -> int:
    if isinstance(tag, str):
        if tag not in MODALITIES:
            raise ModelError(f"unknown modality tag {tag!r}")
        return MODALITIES.index(tag)
    code = int(tag)
    if code not in (VISUAL, TEXT):
        raise ModelError(f"unknown modality tag {tag!r}")
    return code


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    n_kv_heads: int
    d_model: int
    d_head: int
    rope_kind: str = "vanilla_1d"
    rope_base: float = 10000.0
    d_rope: int | None = None
    d_latent: int | None = None

    def __post_init__(self):
        if self.d_rope is None:
            object.__setattr__(self, "d_rope", self.d_head)
        if self.d_latent is None:
            object.__setattr__(self, "d_latent", 2 * self.d_head - self.d_rope)
        for name in ("n_layers", "n_heads", "n_kv_heads", "d_model", "d_head"):
            if getattr(self, name) <= 0:
                raise ModelError(f"{name} must be positive")
        if self.n_heads % self.n_kv_heads:
            raise ModelError("n_heads must be divisible by n_kv_heads")
        if self.d_head % 2:
            raise ModelError("d_head must be even")
        if not (0 < self.d_rope <= self.d_head) or self.d_rope % 2:
            raise ModelError("d_rope must be even and in (0, d_head]")
        if not (0 < self.d_latent <= 2 * self.d_head - self.d_rope):
            raise ModelError("d_latent must be in (0, 2 * d_head - d_rope]")
        if self.rope_kind not in ROPE_KINDS:
            raise ModelError(f"unknown rope kind {self.rope_kind!r}")
        if self.rope_kind == "mrope" and self.d_head % 16:
            raise ModelError("mrope requires d_head divisible by 16")

    @property
    def group_size(self) -> int:
        return self.n_heads // self.n_kv_heads

    @property
    def n_subspaces(self) -> int:
        return self.d_head // 2

    @property
    def r(self) -> int:
        """Retained rotary subspaces per kv group."""
        return self.d_rope // 2

    @property
    def d_nope(self) -> int:
        return self.d_head - self.d_rope

    @property
    def d_kv_rows(self) -> int:
        """Rows of the stacked ``[k_nope; v]`` matrix per kv head."""
        return 2 * self.d_head - self.d_rope

    def rope_spec(self) -> RopeSpec:
        return RopeSpec(self.rope_kind, self.rope_base, self.d_head)

    def replace(self, **changes) -> "ModelConfig":
        if "d_rope" in changes and "d_latent" not in changes:
            changes["d_latent"] = None
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{f.name: d[f.name] for f in dataclasses.fields(cls) if f.name in d})


@dataclass
class TokenSequence:
    embeddings: np.ndarray  # (d_model, n_tokens)
    modality: np.ndarray  # (n_tokens,) int8 codes
    positions: np.ndarray  # (n_tokens, 3) int (t, h, w)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.modality = np.asarray([modality_code(m) for m in np.ravel(self.modality)], dtype=np.int8)
        self.positions = np.asarray(self.positions, dtype=np.int64).reshape(-1, 3)
        n = self.embeddings.shape[1]
        if self.modality.shape[0] != n or self.positions.shape[0] != n:
            raise ModelError("embeddings, modality and positions disagree on token count")
        if np.any(self.positions < 0):
            raise ModelError("position IDs must be nonnegative")
        txt = self.positions[self.modality == TEXT]
        if np.any(txt[:, 0] != txt[:, 1]) or np.any(txt[:, 0] != txt[:, 2]):
            raise ModelError("text tokens need t == h == w")

    @property
    def n_tokens(self) -> int:
        return self.embeddings.shape[1]

    def slice(self, start: int, stop: int) -> "TokenSequence":
        return TokenSequence(self.embeddings[:, start:stop], self.modality[start:stop], self.positions[start:stop])


@dataclass
class AttentionWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray

    def check(self, cfg: ModelConfig) -> None:
        hq, hk = cfg.n_heads * cfg.d_head, cfg.n_kv_heads * cfg.d_head
        expect = {
            "w_q": (hq, cfg.d_model),
            "w_k": (hk, cfg.d_model),
            "w_v": (hk, cfg.d_model),
            "w_o": (cfg.d_model, hq),
        }
        for name, shape in expect.items():
            if getattr(self, name).shape != shape:
                raise ModelError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    def copy(self) -> "AttentionWeights":
        return AttentionWeights(*(np.array(getattr(self, f.name), dtype=np.float64) for f in dataclasses.fields(self)))


@dataclass
class MlaLayerWeights:
    """One converted layer.

    ``retained`` is ``(n_kv_heads, r)``: the rotary subspaces kept by each
    kv group, ascending. ``w_q`` has each head's retained dims moved to the
    front (see :func:`dim_permutation`). ``w_down[m][g]`` / ``w_up[m][g]``
    are the factor pair of kv head ``g`` for modality name ``m``; the top
    ``d_head - d_rope`` rows of ``w_up`` rebuild ``k_nope``, the bottom
    ``d_head`` rows rebuild ``v``.
    """

    retained: np.ndarray
    w_q: np.ndarray
    k_rope_rows: np.ndarray
    w_down: dict[str, list[np.ndarray]]
    w_up: dict[str, list[np.ndarray]]
    w_o: np.ndarray

    def check(self, cfg: ModelConfig) -> None:
        G = cfg.n_kv_heads
        if self.retained.shape != (G, cfg.r):
            raise ModelError(f"selection shape {self.retained.shape} does not match ({G}, {cfg.r})")
        for g in range(G):
            if len(set(self.retained[g].tolist())) != cfg.r:
                raise ModelError("retained subspaces must be unique")
        if self.w_q.shape != (cfg.n_heads * cfg.d_head, cfg.d_model):
            raise ModelError("w_q shape mismatch")
        if self.k_rope_rows.shape != (G * cfg.d_rope, cfg.d_model):
            raise ModelError("k_rope_rows shape mismatch")
        if self.w_o.shape != (cfg.d_model, cfg.n_heads * cfg.d_head):
            raise ModelError("w_o shape mismatch")
        for m in MODALITIES:
            if len(self.w_down[m]) != G or len(self.w_up[m]) != G:
                raise ModelError(f"expected {G} factor pairs for modality {m}")
            for g in range(G):
                dn, up = self.w_down[m][g], self.w_up[m][g]
                if dn.shape[1] != cfg.d_model or up.shape[0] != cfg.d_kv_rows or up.shape[1] != dn.shape[0]:
                    raise ModelError(f"factor pair {m}/{g} has inconsistent shapes {up.shape} x {dn.shape}")

    @property
    def latent_width(self) -> int:
        return self.w_down[MODALITIES[0]][0].shape[0]

    def copy(self) -> "MlaLayerWeights":
        return MlaLayerWeights(
            retained=self.retained.copy(),
            w_q=self.w_q.copy(),
            k_rope_rows=self.k_rope_rows.copy(),
            w_down={m: [a.copy() for a in v] for m, v in self.w_down.items()},
            w_up={m: [a.copy() for a in v] for m, v in self.w_up.items()},
            w_o=self.w_o.copy(),
        )


# ---------------------------------------------------------------------------
# parameter naming
# ---------------------------------------------------------------------------


def param_class(name: str) -> str:
    """``layer.3.w_down.text.1`` -> ``w_down``."""
    return name.split(".")[2]


def named_parameters(layers) -> dict[str, np.ndarray]:
    """Flat ``name -> array`` view of a layer list (arrays are not copied)."""
    out: dict[str, np.ndarray] = {}
    for i, w in enumerate(layers):
        if isinstance(w, AttentionWeights):
            for n in ("w_q", "w_k", "w_v", "w_o"):
                out[f"layer.{i}.{n}"] = getattr(w, n)
        else:
            out[f"layer.{i}.w_q"] = w.w_q
            out[f"layer.{i}.w_o"] = w.w_o
            out[f"layer.{i}.k_rope_rows"] = w.k_rope_rows
            for kind in ("w_down", "w_up"):
                for m in MODALITIES:
                    for g, a in enumerate(getattr(w, kind)[m]):
                        out[f"layer.{i}.{kind}.{m}.{g}"] = a
    return out


def with_parameters(layers, params: dict[str, np.ndarray]):
    """Copy of ``layers`` with the named arrays replaced."""
    new = [w.copy() for w in layers]
    for name, value in params.items():
        parts = name.split(".")
        w = new[int(parts[1])]
        value = np.array(value, dtype=np.float64)
        if len(parts) == 3:
            if getattr(w, parts[2]).shape != value.shape:
                raise ModelError(f"{name}: shape {value.shape} != {getattr(w, parts[2]).shape}")
            setattr(w, parts[2], value)
        else:
            getattr(w, parts[2])[parts[3]][int(parts[4])] = value
    return new


# ---------------------------------------------------------------------------
# subspace permutation helpers
# ---------------------------------------------------------------------------


def subspace_permutation(retained, n_subspaces: int) -> np.ndarray:
    """Retained subspaces (ascending) first, then the rest (ascending)."""
    kept = sorted(int(k) for k in retained)
    rest = [k for k in range(n_subspaces) if k not in set(kept)]
    return np.asarray(kept + rest, dtype=np.int64)


def dim_permutation(retained, d_head: int) -> np.ndarray:
    """Head-dimension order placing the retained pairs first.

    ``x_perm = x[dim_permutation(...)]``.
    """
    sub = subspace_permutation(retained, d_head // 2)
    return np.stack([2 * sub, 2 * sub + 1], axis=1).reshape(-1)


# ---------------------------------------------------------------------------
# attention core
# ---------------------------------------------------------------------------


def attention_core(q: np.ndarray, k: np.ndarray, v: np.ndarray, mask: np.ndarray, scale: float):
    """Grouped causal attention.

    ``q`` is ``(H, nq, d)``, ``k`` and ``v`` are ``(G, nk, d)``, ``mask`` is
    a boolean ``(nq, nk)`` keep-mask. Returns ``(out (H, nq, d), P (H, nq, nk))``.
    """
    H, G = q.shape[0], k.shape[0]
    group = H // G
    kh = np.repeat(k, group, axis=0)
    vh = np.repeat(v, group, axis=0)
    scores = np.einsum("hid,hjd->hij", q, kh) * scale
    p = softmax_rows(scores, mask)
    return np.einsum("hij,hjd->hid", p, vh), p


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    n = x.shape[0]
    return x.reshape(n, n_heads, -1).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    H, n, d = x.shape
    return x.transpose(1, 0, 2).reshape(n, H * d)


def rotate_grouped(spec: RopeSpec, x: np.ndarray, positions, retained, group: int, inverse: bool = False) -> np.ndarray:
    """Apply (partial) RoPE to ``(heads, n, d_head)`` in the original layout.

    ``retained`` is ``None`` (full RoPE) or ``(n_kv_heads, r)``; head ``i``
    uses row ``i // group``.
    """
    if retained is None:
        return apply_rope_tokens(spec, x, positions, None, inverse=inverse)
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        out[i] = apply_rope_tokens(spec, x[i], positions, retained[i // group], inverse=inverse)
    return out


def gqa_layer_forward(cfg: ModelConfig, w: AttentionWeights, x_tok: np.ndarray, positions, retained=None, spec=None):
    """One GQA layer on token-major input ``(n, d_model)``.

    ``retained`` switches on partial RoPE (see :func:`rotate_grouped`).
    Returns ``(y (n, d_model), intermediates)``.
    """
    spec = spec or cfg.rope_spec()
    n = x_tok.shape[0]
    q = _split_heads(x_tok @ w.w_q.T, cfg.n_heads)
    k = _split_heads(x_tok @ w.w_k.T, cfg.n_kv_heads)
    v = _split_heads(x_tok @ w.w_v.T, cfg.n_kv_heads)
    q_rot = rotate_grouped(spec, q, positions, retained, cfg.group_size)
    k_rot = rotate_grouped(spec, k, positions, retained, 1)
    mask = causal_keep_mask(n)
    out, p = attention_core(q_rot, k_rot, v, mask, 1.0 / np.sqrt(cfg.d_head))
    merged = _merge_heads(out)
    y = merged @ w.w_o.T
    return y, {"q": q_rot, "k": k_rot, "v": v, "p": p, "merged": merged, "mask": mask}


@dataclass
class GqaTrace:
    """Per-layer record of a GQA forward pass (token-major arrays)."""

    inputs: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)
    attn: list[np.ndarray] = field(default_factory=list)
    final: np.ndarray | None = None


def run_gqa(cfg: ModelConfig, layers, seq: TokenSequence, retained=None) -> GqaTrace:
    """Forward through all layers, recording layer inputs, outputs and attention.

    ``retained`` is ``None`` or ``(n_layers, n_kv_heads, r)``.
    """
    if len(layers) != cfg.n_layers:
        raise ModelError(f"expected {cfg.n_layers} layers, got {len(layers)}")
    if seq.embeddings.shape[0] != cfg.d_model:
        raise ModelError(f"sequence width {seq.embeddings.shape[0]} != d_model {cfg.d_model}")
    spec = cfg.rope_spec()
    trace = GqaTrace()
    h = seq.embeddings.T.copy()
    for li, w in enumerate(layers):
        w.check(cfg)
        sel = None if retained is None else np.asarray(retained)[li]
        y, inter = gqa_layer_forward(cfg, w, h, seq.positions, sel, spec)
        trace.inputs.append(h)
        trace.outputs.append(y)
        trace.attn.append(inter["p"])
        h = h + y
    trace.final = h
    return trace


def forward_mha_gqa(cfg: ModelConfig, layers, seq: TokenSequence, retained=None):
    """Causal MHA/GQA forward. Returns ``(output (d_model, n), attn per layer)``.

    ``attn[l]`` has shape ``(n_heads, n, n)``.
    """
    trace = run_gqa(cfg, layers, seq, retained)
    return trace.final.T, trace.attn


# ---------------------------------------------------------------------------
# MLA
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KvCache:
    """Compressed cache: one latent and one rotated rope key per token per layer.

    ``latents[l]`` is ``(T, n_kv_heads * d_latent)``, ``rope_keys[l]`` is
    ``(T, n_kv_heads * d_rope)``; ``modality`` holds one tag per token.
    """

    latents: tuple[np.ndarray, ...]
    rope_keys: tuple[np.ndarray, ...]
    modality: np.ndarray
    storage_bits: int = 16

    @classmethod
    def empty(cls, cfg: ModelConfig, d_latent: int | None = None, storage_bits: int = 16) -> "KvCache":
        dl = cfg.d_latent if d_latent is None else d_latent
        G = cfg.n_kv_heads
        return cls(
            latents=tuple(np.zeros((0, G * dl)) for _ in range(cfg.n_layers)),
            rope_keys=tuple(np.zeros((0, G * cfg.d_rope)) for _ in range(cfg.n_layers)),
            modality=np.zeros(0, dtype=np.int8),
            storage_bits=storage_bits,
        )

    @property
    def n_tokens(self) -> int:
        return int(self.modality.shape[0])

    @property
    def n_layers(self) -> int:
        return len(self.latents)

    def n_elements(self) -> int:
        return int(sum(a.size for a in self.latents) + sum(a.size for a in self.rope_keys))


def _check_cache(cfg: ModelConfig, layers, cache: KvCache) -> None:
    if cache.n_layers != cfg.n_layers:
        raise ModelError(f"cache has {cache.n_layers} layers, model has {cfg.n_layers}")
    G = cfg.n_kv_heads
    for li, w in enumerate(layers):
        lat, rk = cache.latents[li], cache.rope_keys[li]
        if lat.shape != (cache.n_tokens, G * w.latent_width):
            raise ModelError(f"layer {li}: cache latent shape {lat.shape} does not fit the model")
        if rk.shape != (cache.n_tokens, G * cfg.d_rope):
            raise ModelError(f"layer {li}: cache rope-key shape {rk.shape} does not fit the model")


def mla_compress(cfg: ModelConfig, w: MlaLayerWeights, x_tok: np.ndarray, modality: np.ndarray, positions, spec=None):
    """New cache entries for ``x_tok``: ``(latent (n, G*dl), rope_key (n, G*dr))``."""
    spec = spec or cfg.rope_spec()
    n = x_tok.shape[0]
    G, dr, dl = cfg.n_kv_heads, cfg.d_rope, w.latent_width
    latent = np.zeros((n, G, dl))
    for code, name in enumerate(MODALITIES):
        idx = np.flatnonzero(modality == code)
        if idx.size == 0:
            continue
        for g in range(G):
            latent[idx, g] = x_tok[idx] @ w.w_down[name][g].T
    pre = (x_tok @ w.k_rope_rows.T).reshape(n, G, dr)
    rope = np.empty_like(pre)
    for g in range(G):
        rope[:, g] = rotate_pairs(pre[:, g], rope_angles(spec, positions, w.retained[g]))
    return latent.reshape(n, G * dl), rope.reshape(n, G * dr)


def mla_expand(cfg: ModelConfig, w: MlaLayerWeights, latents: np.ndarray, modality: np.ndarray):
    """Rebuild ``(k_nope (G, T, d_nope), v (G, T, d_head))`` from cached latents."""
    T = latents.shape[0]
    G, dl = cfg.n_kv_heads, w.latent_width
    lat = latents.reshape(T, G, dl)
    kv = np.zeros((G, T, cfg.d_kv_rows))
    for code, name in enumerate(MODALITIES):
        idx = np.flatnonzero(modality == code)
        if idx.size == 0:
            continue
        for g in range(G):
            kv[g, idx] = lat[idx, g] @ w.w_up[name][g].T
    return kv[:, :, : cfg.d_nope], kv[:, :, cfg.d_nope :]


def mla_queries(cfg: ModelConfig, w: MlaLayerWeights, x_tok: np.ndarray, positions, spec=None) -> np.ndarray:
    """Queries ``(H, n, d_head)`` in permuted layout with the rope part rotated."""
    spec = spec or cfg.rope_spec()
    q = _split_heads(x_tok @ w.w_q.T, cfg.n_heads)
    dr = cfg.d_rope
    out = q.copy()
    for h in range(cfg.n_heads):
        g = h // cfg.group_size
        out[h, :, :dr] = rotate_pairs(q[h, :, :dr], rope_angles(spec, positions, w.retained[g]))
    return out


def mla_layer_forward(cfg: ModelConfig, w: MlaLayerWeights, x_tok, modality, positions, past_latent, past_rope, past_modality, spec=None):
    """One MLA layer. Returns ``(y, new_latent, new_rope, intermediates)``."""
    spec = spec or cfg.rope_spec()
    n = x_tok.shape[0]
    lat_new, rope_new = mla_compress(cfg, w, x_tok, modality, positions, spec)
    lat_all = np.concatenate([past_latent, lat_new], axis=0)
    rope_all = np.concatenate([past_rope, rope_new], axis=0)
    mod_all = np.concatenate([past_modality, modality])
    T = lat_all.shape[0]
    G, dr = cfg.n_kv_heads, cfg.d_rope
    k_nope, v = mla_expand(cfg, w, lat_all, mod_all)
    k_rope = rope_all.reshape(T, G, dr).transpose(1, 0, 2)
    k = np.concatenate([k_rope, k_nope], axis=2)
    q = mla_queries(cfg, w, x_tok, positions, spec)
    mask = causal_keep_mask(n, T - n)
    out, p = attention_core(q, k, v, mask, 1.0 / np.sqrt(cfg.d_head))
    merged = _merge_heads(out)
    y = merged @ w.w_o.T
    return y, lat_new, rope_new, {"q": q, "k": k, "v": v, "p": p, "merged": merged, "mask": mask}


def forward_mla(cfg: ModelConfig, layers, seq: TokenSequence, cache: KvCache | None = None, return_attn: bool = False):
    """MLA forward over ``seq`` continuing from ``cache``.

    Returns ``(output (d_model, n), cache')``; with ``return_attn`` also the
    per-layer attention ``(n_heads, n, T)``. ``cache'`` holds copies; the
    input cache is left untouched.
    """
    if len(layers) != cfg.n_layers:
        raise ModelError(f"expected {cfg.n_layers} layers, got {len(layers)}")
    if seq.embeddings.shape[0] != cfg.d_model:
        raise ModelError(f"sequence width {seq.embeddings.shape[0]} != d_model {cfg.d_model}")
    for w in layers:
        w.check(cfg)
    if cache is None:
        cache = KvCache.empty(cfg, layers[0].latent_width)
    _check_cache(cfg, layers, cache)
    if np.any((seq.modality != VISUAL) & (seq.modality != TEXT)):
        raise ModelError("unknown modality tag in sequence")
    spec = cfg.rope_spec()
    h = seq.embeddings.T.copy()
    new_lat, new_rope, attn = [], [], []
    for li, w in enumerate(layers):
        y, lat, rope, inter = mla_layer_forward(
            cfg, w, h, seq.modality, seq.positions, cache.latents[li], cache.rope_keys[li], cache.modality, spec
        )
        new_lat.append(np.concatenate([cache.latents[li], lat], axis=0))
        new_rope.append(np.concatenate([cache.rope_keys[li], rope], axis=0))
        attn.append(inter["p"])
        h = h + y
    out_cache = KvCache(
        latents=tuple(new_lat),
        rope_keys=tuple(new_rope),
        modality=np.concatenate([cache.modality, seq.modality]),
        storage_bits=cache.storage_bits,
    )
    if return_attn:
        return h.T, out_cache, attn
    return h.T, out_cache


def run_mla_teacher_forced(cfg: ModelConfig, layers, seq: TokenSequence, inputs: list[np.ndarray]):
    """Per-layer MLA outputs when layer ``l`` is fed ``inputs[l]`` (token-major)."""
    spec = cfg.rope_spec()
    outs = []
    for li, w in enumerate(layers):
        G = cfg.n_kv_heads
        empty_lat = np.zeros((0, G * w.latent_width))
        empty_rope = np.zeros((0, G * cfg.d_rope))
        y, *_ = mla_layer_forward(cfg, w, inputs[li], seq.modality, seq.positions, empty_lat, empty_rope, np.zeros(0, np.int8), spec)
        outs.append(y)
    return outs
