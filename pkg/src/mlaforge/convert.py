"""MHA/GQA -> MLA conversion.

Pipeline per layer: pick retained rotary subspaces, move them to the front
of every query/key head, copy the retained key rows unchanged, stack the
remaining key rows with the value rows of each kv head and factorize that
stack separately for visual and text activations.

Calibration activations are the hidden states of the *original* model at
each layer's input.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cachekit import CacheBudget, account
from .mdsvd import DEFAULT_RIDGE, FactorizationResult, md_svd
from .model import (
    MODALITIES,
    AttentionWeights,
    MlaLayerWeights,
    ModelConfig,
    TokenSequence,
    dim_permutation,
    gqa_layer_forward,
    run_gqa,
    run_mla_teacher_forced,
)
from .selection import SubspaceSelection, canonical_strategy, select_subspaces

log = logging.getLogger(__name__)


class ConversionError(RuntimeError):
    pass


@dataclass
class LayerReport:
    layer: int
    retained: list[list[int]]
    loss_sq: dict[str, float]
    fallback: bool
    residual: float | None = None


@dataclass
class ConversionReport:
    strategy: str
    d_rope: int
    d_latent: int
    layers: list[LayerReport] = field(default_factory=list)
    cache_before: CacheBudget | None = None
    cache_after: CacheBudget | None = None

    @property
    def max_residual(self) -> float | None:
        vals = [lr.residual for lr in self.layers if lr.residual is not None]
        return max(vals) if vals else None

    CSV_COLUMNS = ("layer", "retained", "loss_visual", "loss_text", "fallback", "residual")

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(self.CSV_COLUMNS)
            for lr in self.layers:
                wr.writerow([
                    lr.layer,
                    "|".join(" ".join(str(k) for k in g) for g in lr.retained),
                    repr(lr.loss_sq["visual"]),
                    repr(lr.loss_sq["text"]),
                    int(lr.fallback),
                    "" if lr.residual is None else repr(lr.residual),
                ])

    def to_text(self) -> str:
        out = [f"strategy: {self.strategy}", f"d_rope: {self.d_rope}", f"d_latent: {self.d_latent}"]
        if self.cache_after is not None:
            out.append(f"kv cache vs {self.cache_after.baseline} baseline: {self.cache_after.display()}")
        for lr in self.layers:
            res = "n/a" if lr.residual is None else f"{lr.residual:.3e}"
            out.append(
                f"layer {lr.layer}: retained={lr.retained} loss_visual={lr.loss_sq['visual']:.6e} "
                f"loss_text={lr.loss_sq['text']:.6e} full-rank residual={res}" + (" [single-modality fallback]" if lr.fallback else "")
            )
        if self.max_residual is not None:
            out.append(f"max full-rank residual: {self.max_residual:.3e}")
        return "\n".join(out) + "\n"


def modality_activations(inputs: list[list[np.ndarray]], calib: list[TokenSequence], layer: int) -> dict[str, np.ndarray]:
    """Stack the layer-``layer`` inputs of each modality as ``(d_model, n_m)``."""
    out = {}
    for code, name in enumerate(MODALITIES):
        cols = [inputs[s][layer][seq.modality == code] for s, seq in enumerate(calib)]
        out[name] = np.concatenate(cols, axis=0).T if cols else np.zeros((0, 0))
    return out


def split_key_rows(cfg: ModelConfig, w_k: np.ndarray, retained: np.ndarray):
    """Split ``w_k`` per kv head into retained rope rows and the rest.

    Returns ``(k_rope_rows (G * d_rope, d_model), [nope rows (d_nope, d_model)] * G)``.
    Rows are copied verbatim, in permuted order.
    """
    d = cfg.d_head
    rope, nope = [], []
    for g in range(cfg.n_kv_heads):
        perm = dim_permutation(retained[g], d)
        rows = w_k[g * d : (g + 1) * d][perm]
        rope.append(rows[: cfg.d_rope])
        nope.append(rows[cfg.d_rope :])
    return np.concatenate(rope, axis=0), nope


def permute_queries(cfg: ModelConfig, w_q: np.ndarray, retained: np.ndarray) -> np.ndarray:
    d = cfg.d_head
    out = np.empty_like(w_q)
    for h in range(cfg.n_heads):
        perm = dim_permutation(retained[h // cfg.group_size], d)
        out[h * d : (h + 1) * d] = w_q[h * d : (h + 1) * d][perm]
    return out


def kv_stack(cfg: ModelConfig, nope_rows: np.ndarray, w_v: np.ndarray, g: int) -> np.ndarray:
    """``[k_nope; v]`` rows of kv head ``g`` -- the matrix that gets factorized."""
    d = cfg.d_head
    return np.concatenate([nope_rows, w_v[g * d : (g + 1) * d]], axis=0)


def convert_layer(
    cfg: ModelConfig,
    w: AttentionWeights,
    retained: np.ndarray,
    acts: dict[str, np.ndarray],
    ridge: float = DEFAULT_RIDGE,
    r_visual: int | None = None,
    r_text: int | None = None,
) -> tuple[MlaLayerWeights, list[dict[str, FactorizationResult]]]:
    r_visual = cfg.d_latent if r_visual is None else r_visual
    r_text = cfg.d_latent if r_text is None else r_text
    if r_visual != r_text:
        raise ConversionError("per-modality latent widths must match for a single cache layout")
    if r_visual > min(cfg.d_kv_rows, cfg.d_model):
        raise ConversionError(f"latent rank {r_visual} exceeds min(2*d_head - d_rope, d_model)")
    retained = np.asarray(retained, dtype=np.int64)
    k_rope_rows, nope = split_key_rows(cfg, w.w_k, retained)
    results = []
    w_down = {m: [] for m in MODALITIES}
    w_up = {m: [] for m in MODALITIES}
    for g in range(cfg.n_kv_heads):
        stack = kv_stack(cfg, nope[g], w.w_v, g)
        res = md_svd(stack, acts["visual"], acts["text"], r_visual, r_text, ridge)
        results.append(res)
        for m in MODALITIES:
            w_down[m].append(res[m].w_down)
            w_up[m].append(res[m].w_up)
    mla = MlaLayerWeights(
        retained=retained.copy(),
        w_q=permute_queries(cfg, w.w_q, retained),
        k_rope_rows=k_rope_rows,
        w_down=w_down,
        w_up=w_up,
        w_o=w.w_o.copy(),
    )
    mla.check(cfg)
    return mla, results


def teacher_inputs(cfg: ModelConfig, layers, calib: list[TokenSequence]):
    """``(inputs[s][l], outputs[s][l])`` of the original model, token-major."""
    traces = [run_gqa(cfg, layers, seq) for seq in calib]
    return [t.inputs for t in traces], [t.outputs for t in traces]


def layer_residual(outputs_ref: list[np.ndarray], outputs_new: list[np.ndarray]) -> float:
    """Max over tokens of ``|y_new - y_ref| / |y_ref|``."""
    worst = 0.0
    for ref, new in zip(outputs_ref, outputs_new):
        num = np.linalg.norm(new - ref, axis=1)
        den = np.maximum(np.linalg.norm(ref, axis=1), np.finfo(np.float64).tiny)
        worst = max(worst, float(np.max(num / den)))
    return worst


def full_rank_residuals(cfg: ModelConfig, layers, calib, inputs, outputs, ridge: float) -> list[float]:
    """Per-layer residual of an exact (d_rope = d_head, full rank) conversion."""
    full_cfg = cfg.replace(d_rope=cfg.d_head)
    sel = SubspaceSelection.full(full_cfg)
    res = []
    for l, w in enumerate(layers):
        acts = modality_activations(inputs, calib, l)
        mla, _ = convert_layer(full_cfg, w, sel.retained[l], acts, ridge)
        y_new = [run_mla_teacher_forced(full_cfg, [mla], seq, [inputs[s][l]])[0] for s, seq in enumerate(calib)]
        res.append(layer_residual([outputs[s][l] for s in range(len(calib))], y_new))
    return res


def convert(
    cfg: ModelConfig,
    layers: list[AttentionWeights],
    calib: list[TokenSequence],
    strategy: str = "mkl",
    ridge: float = DEFAULT_RIDGE,
    selection: SubspaceSelection | None = None,
    r_visual: int | None = None,
    r_text: int | None = None,
    check_equivalence: bool = True,
    allow_single_modality: bool = False,
    teacher_layers: list[AttentionWeights] | None = None,
) -> tuple[list[MlaLayerWeights], ConversionReport]:
    """Convert every layer of an MHA/GQA model to MLA.

    ``cfg.d_rope`` and ``cfg.d_latent`` set the target layout. Pass
    ``selection`` to reuse precomputed retained subspaces (the strategy is
    then only recorded). With ``check_equivalence`` each layer also gets
    the residual of a full-rank, full-RoPE conversion as a sanity anchor.

    ``teacher_layers`` supplies the model whose hidden states serve as
    calibration activations (default: ``layers`` itself). This is used
    after stage-1 tuning, where the tuned weights are converted but the
    activation distribution is still the original model's.
    """
    strategy = canonical_strategy(strategy)
    if not calib:
        raise ConversionError("calibration batch is empty")
    if len(layers) != cfg.n_layers:
        raise ConversionError(f"expected {cfg.n_layers} layers, got {len(layers)}")
    present = {int(c) for seq in calib for c in np.unique(seq.modality)}
    if len(present) < 2 and not allow_single_modality:
        raise ConversionError("calibration must contain both modalities (or set allow_single_modality)")
    if teacher_layers is None:
        inputs, outputs = teacher_inputs(cfg, layers, calib)
    else:
        inputs, _ = teacher_inputs(cfg, teacher_layers, calib)
        spec = cfg.rope_spec()
        outputs = [[gqa_layer_forward(cfg, w, inputs[s][l], seq.positions, None, spec)[0] for l, w in enumerate(layers)] for s, seq in enumerate(calib)]
    if selection is None:
        if cfg.d_rope == cfg.d_head:
            full = SubspaceSelection.full(cfg)
            selection = SubspaceSelection(full.retained, strategy)
        else:
            selection, _ = select_subspaces(cfg, layers, calib, strategy, activations=inputs)
    if selection.retained.shape != (cfg.n_layers, cfg.n_kv_heads, cfg.r):
        raise ConversionError(f"selection shape {selection.retained.shape} does not match the config")

    baseline = "mha" if cfg.n_kv_heads == cfg.n_heads else "gqa"
    report = ConversionReport(
        strategy=selection.strategy,
        d_rope=cfg.d_rope,
        d_latent=cfg.d_latent,
        cache_before=account(cfg.replace(d_rope=cfg.d_head, d_latent=cfg.d_head), baseline),
        cache_after=account(cfg, baseline),
    )
    residuals = full_rank_residuals(cfg, layers, calib, inputs, outputs, ridge) if check_equivalence else [None] * cfg.n_layers
    converted = []
    for l, w in enumerate(layers):
        try:
            acts = modality_activations(inputs, calib, l)
            mla, results = convert_layer(cfg, w, selection.retained[l], acts, ridge, r_visual, r_text)
        except Exception as exc:
            raise ConversionError(f"layer {l}: {exc}") from exc
        converted.append(mla)
        losses = {m: float(sum(r[m].loss_sq for r in results)) for m in MODALITIES}
        fallback = any(r["visual"].fallback for r in results)
        report.layers.append(LayerReport(l, selection.retained[l].tolist(), losses, fallback, residuals[l]))
        log.debug("layer %d converted: %s", l, losses)
    return converted, report
