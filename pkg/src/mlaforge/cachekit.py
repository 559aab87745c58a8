"""KV-cache memory accounting and low-bit group quantization of MLA caches.

Accounting counts cached elements per token. An MLA layer stores, for each
kv head, a ``d_latent`` latent plus a ``d_rope`` rotated key; the baseline
stores full keys and values for ``n_heads`` (MHA width) or ``n_kv_heads``
(GQA width) heads at 16 bits. Quantization scales/zero-points are not
counted.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction

import numpy as np

from .model import KvCache, ModelConfig, TokenSequence, forward_mla

BASELINES = ("mha", "gqa")
BASELINE_BITS = 16

# Public model shapes used for the accounting presets (n_layers cancels out).
PRESETS: dict[str, ModelConfig] = {
    "llava-1.5": ModelConfig(n_layers=32, n_heads=32, n_kv_heads=32, d_model=4096, d_head=128, rope_kind="vanilla_1d", rope_base=10000.0, d_rope=32, d_latent=64),
    "llava-next": ModelConfig(n_layers=32, n_heads=32, n_kv_heads=8, d_model=4096, d_head=128, rope_kind="vanilla_1d", rope_base=500000.0, d_rope=32, d_latent=128),
    "qwen2.5-vl": ModelConfig(n_layers=28, n_heads=28, n_kv_heads=4, d_model=3584, d_head=128, rope_kind="mrope", rope_base=1000000.0, d_rope=32, d_latent=128),
}


class CacheError(ValueError):
    pass


def round_half_up(value: Fraction | float, places: int = 2) -> Decimal:
    if isinstance(value, Fraction):
        dec = Decimal(value.numerator) / Decimal(value.denominator)
    else:
        dec = Decimal(repr(value))
    return dec.quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP)


@dataclass(frozen=True)
class CacheBudget:
    baseline: str
    bits: int
    per_token_elements: int
    baseline_elements: int
    reduction: Fraction  # exact, as a fraction of 1

    @property
    def reduction_pct(self) -> float:
        return float(self.reduction * 100)

    def display(self) -> str:
        """Signed percentage change of cache memory, e.g. ``-84.38%``."""
        pct = round_half_up(self.reduction * 100, 2)
        return f"-{pct}%" if pct > 0 else f"+{-pct}%" if pct < 0 else "0.00%"


def account(cfg: ModelConfig, baseline: str = "mha", bits: int = 16, d_latent: int | None = None) -> CacheBudget:
    """Cache reduction of the MLA layout of ``cfg`` against an MHA- or GQA-width cache."""
    if baseline not in BASELINES:
        raise CacheError(f"baseline must be one of {BASELINES}")
    if bits <= 0:
        raise CacheError("bits must be positive")
    dl = cfg.d_latent if d_latent is None else d_latent
    per_token = cfg.n_layers * cfg.n_kv_heads * (dl + cfg.d_rope)
    heads = cfg.n_heads if baseline == "mha" else cfg.n_kv_heads
    base = cfg.n_layers * 2 * heads * cfg.d_head
    reduction = 1 - Fraction(per_token * bits, base * BASELINE_BITS)
    return CacheBudget(baseline, bits, per_token, base, reduction)


def budget_table(rows: list[tuple[str, ModelConfig, str, int]]) -> str:
    """Render ``(model, cfg, baseline, bits)`` rows as a KV-memory table."""
    lines = ["model\td_kv\tbits\tbaseline\tKV Mem."]
    for name, cfg, baseline, bits in rows:
        b = account(cfg, baseline, bits)
        lines.append(f"{name}\t{cfg.d_latent}\t{bits}\t{baseline}\t{b.display()}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# quantization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuantSpec:
    bits: int = 4
    group_size: int = 64

    def __post_init__(self):
        if self.bits not in (4, 2):
            raise CacheError(f"bits must be 4 or 2, got {self.bits}")
        if self.group_size < 1:
            raise CacheError("group_size must be positive")

    @property
    def levels(self) -> int:
        return (1 << self.bits) - 1


@dataclass(frozen=True)
class QuantizedTensor:
    """Row-wise group quantization of a ``(T, D)`` array.

    Each row is cut into groups of ``group_size`` consecutive entries (the
    last may be short). ``scale`` and ``zero`` are ``(T, n_groups)``.
    """

    codes: np.ndarray  # uint8 (T, D)
    scale: np.ndarray
    zero: np.ndarray
    spec: QuantSpec

    def dequantize(self) -> np.ndarray:
        T, D = self.codes.shape
        g = self.spec.group_size
        idx = np.arange(D) // g
        return self.zero[:, idx] + self.scale[:, idx] * self.codes


def _group_bounds(x: np.ndarray, g: int):
    T, D = x.shape
    n_groups = -(-D // g)
    lo = np.empty((T, n_groups))
    hi = np.empty((T, n_groups))
    for j in range(n_groups):
        block = x[:, j * g : (j + 1) * g]
        lo[:, j] = block.min(axis=1)
        hi[:, j] = block.max(axis=1)
    return lo, hi


def _stable_scale(lo: np.ndarray, hi: np.ndarray, levels: int) -> np.ndarray:
    """Group step size that reproduces itself after a dequantize round trip.

    The naive ``(hi - lo) / levels`` can drift by an ulp when recomputed from
    dequantized data; iterating the round trip a few times lands on a fixed
    point, which makes re-quantization bit-identical.
    """
    scale = (hi - lo) / levels
    for _ in range(8):
        again = ((lo + scale * levels) - lo) / levels
        if np.array_equal(again, scale):
            break
        scale = again
    return scale


def quantize_tensor(x: np.ndarray, spec: QuantSpec) -> QuantizedTensor:
    """Asymmetric round-to-nearest with per-group scale and zero-point."""
    x = np.asarray(x, dtype=np.float64)
    T, D = x.shape
    if D == 0 or T == 0:
        n_groups = -(-D // spec.group_size)
        return QuantizedTensor(np.zeros((T, D), np.uint8), np.zeros((T, n_groups)), np.zeros((T, n_groups)), spec)
    lo, hi = _group_bounds(x, spec.group_size)
    scale = _stable_scale(lo, hi, spec.levels)
    idx = np.arange(D) // spec.group_size
    s_full = scale[:, idx]
    safe = np.where(s_full > 0, s_full, 1.0)
    codes = np.where(s_full > 0, np.rint((x - lo[:, idx]) / safe), 0.0)
    codes = np.clip(codes, 0, spec.levels).astype(np.uint8)
    return QuantizedTensor(codes, scale, lo, spec)


@dataclass(frozen=True)
class QuantizedKvCache:
    latents: tuple[QuantizedTensor, ...]
    rope_keys: tuple[QuantizedTensor, ...]
    modality: np.ndarray
    spec: QuantSpec

    def dequantize(self) -> KvCache:
        return KvCache(
            latents=tuple(q.dequantize() for q in self.latents),
            rope_keys=tuple(q.dequantize() for q in self.rope_keys),
            modality=self.modality.copy(),
            storage_bits=self.spec.bits,
        )


def quantize_cache(cache: KvCache, spec: QuantSpec):
    """Quantize every latent and rope key row. Returns ``(quantized, dequantize)``."""
    if not isinstance(spec, QuantSpec):
        spec = QuantSpec(*spec)
    if cache.storage_bits != BASELINE_BITS:
        raise CacheError(f"expected a {BASELINE_BITS}-bit cache, got {cache.storage_bits}-bit")
    q = QuantizedKvCache(
        latents=tuple(quantize_tensor(a, spec) for a in cache.latents),
        rope_keys=tuple(quantize_tensor(a, spec) for a in cache.rope_keys),
        modality=cache.modality.copy(),
        spec=spec,
    )
    return q, q.dequantize



@dataclass(frozen=True)
class Fidelity:
    cosine: float  # over the whole decoded block
    per_token: np.ndarray


def decode_fidelity(cfg: ModelConfig, layers, seq: TokenSequence, spec: QuantSpec, n_decode: int) -> Fidelity:
    """Exact-cache vs quantized-cache decoding of the last ``n_decode`` tokens.

    The prefix is prefilled and its cache quantized; the remaining tokens
    are decoded one at a time against both caches (new entries appended at
    full precision in each). Cosines compare the stack's residual update
    ``output - input``, since the identity path alone pushes any cosine
    towards 1.
    """
    T = seq.n_tokens
    if not 0 < n_decode < T:
        raise CacheError(f"n_decode must be in [1, {T - 1}], got {n_decode}")
    _, exact = forward_mla(cfg, layers, seq.slice(0, T - n_decode))
    _, deq = quantize_cache(exact, spec)
    approx = deq()
    a_all, b_all = [], []
    for t in range(T - n_decode, T):
        tok = seq.slice(t, t + 1)
        ya, exact = forward_mla(cfg, layers, tok, exact)
        yb, approx = forward_mla(cfg, layers, tok, approx)
        a_all.append((ya - tok.embeddings).ravel())
        b_all.append((yb - tok.embeddings).ravel())
    a, b = np.array(a_all), np.array(b_all)
    per_token = np.sum(a * b, axis=1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
    cosine = float(np.sum(a * b) / (np.linalg.norm(a) * np.linalg.norm(b)))
    return Fidelity(cosine, per_token)
