"""Seeded toy models and calibration data.

Everything here is driven by a ``numpy.random.Generator`` so that a seed
fully determines weights and data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import AttentionWeights, ModelConfig, TokenSequence
from .rope import Segment, assign_positions, image, layout_modality, text, video


def random_layers(cfg: ModelConfig, rng: np.random.Generator, qk_gain: float = 1.0) -> list[AttentionWeights]:
    """Gaussian weights scaled by ``1/sqrt(d_model)``; ``qk_gain`` sharpens attention."""
    s = 1.0 / np.sqrt(cfg.d_model)
    layers = []
    for _ in range(cfg.n_layers):
        layers.append(
            AttentionWeights(
                w_q=rng.normal(0.0, s * qk_gain, (cfg.n_heads * cfg.d_head, cfg.d_model)),
                w_k=rng.normal(0.0, s * qk_gain, (cfg.n_kv_heads * cfg.d_head, cfg.d_model)),
                w_v=rng.normal(0.0, s, (cfg.n_kv_heads * cfg.d_head, cfg.d_model)),
                w_o=rng.normal(0.0, s / np.sqrt(cfg.n_heads), (cfg.d_model, cfg.n_heads * cfg.d_head)),
            )
        )
    return layers


@dataclass(frozen=True)
class ModalityStyle:
    """Linear generators ``x = mix @ z + offset`` for visual and text embeddings.

    Heterogeneous styles use different random mixing matrices with
    different spectra, so the two modalities occupy different principal
    subspaces. A mirrored style uses the text generator for both.
    """

    text_mix: np.ndarray
    visual_mix: np.ndarray
    visual_offset: np.ndarray

    @classmethod
    def make(cls, rng: np.random.Generator, d_model: int, mirror: bool = False) -> "ModalityStyle":
        def mix(decay):
            q, _ = np.linalg.qr(rng.normal(size=(d_model, d_model)))
            return q * np.exp(-decay * np.arange(d_model) / d_model)

        t = mix(3.0)
        if mirror:
            return cls(t, t, np.zeros(d_model))
        return cls(t, 2.0 * mix(6.0), rng.normal(0.0, 0.5, d_model))

    def sample(self, rng: np.random.Generator, modality: np.ndarray) -> np.ndarray:
        d = self.text_mix.shape[0]
        z = rng.normal(size=(d, modality.shape[0]))
        out = self.text_mix @ z
        vis = modality == 0
        if np.any(vis):
            out[:, vis] = self.visual_mix @ z[:, vis] + self.visual_offset[:, None]
        return out


def parse_images(spec: str) -> list[tuple[int, int, int]]:
    """``"2x3x4,1x2x2"`` -> ``[(2, 3, 4), (1, 2, 2)]`` as (frames, rows, cols)."""
    out = []
    for part in filter(None, (p.strip() for p in spec.split(","))):
        dims = tuple(int(v) for v in part.lower().split("x"))
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"image spec {part!r} must be KxHxW with positive sizes")
        out.append(dims)
    return out


def make_layout(n_text: int, images: list[tuple[int, int, int]]) -> list[Segment]:
    """Text split around the visual segments: prefix, visuals, suffix."""
    head = n_text // 2
    layout = [text(head)] if head else []
    for k, h, w in images:
        layout.append(image(h, w) if k == 1 else video(k, h, w))
    if n_text - head:
        layout.append(text(n_text - head))
    return layout


def make_calibration(
    rng: np.random.Generator,
    d_model: int,
    n_seqs: int,
    n_text: int,
    images: list[tuple[int, int, int]],
    rope_kind: str = "mrope",
    mirror: bool = False,
    style: ModalityStyle | None = None,
) -> list[TokenSequence]:
    """Calibration sequences that share one layout and one modality style."""
    style = style or ModalityStyle.make(rng, d_model, mirror)
    layout = make_layout(n_text, images)
    positions = assign_positions(layout, rope_kind)
    modality = layout_modality(layout)
    if modality.size == 0:
        raise ValueError("layout has no tokens")
    return [TokenSequence(style.sample(rng, modality), modality, positions) for _ in range(n_seqs)]


# ---------------------------------------------------------------------------
# planted-subspace model
# ---------------------------------------------------------------------------


@dataclass
class PlantedModel:
    cfg: ModelConfig
    layers: list[AttentionWeights]
    planted: np.ndarray  # (n_layers, n_kv_heads) subspace index carrying the signal


def planted_model(cfg: ModelConfig, rng: np.random.Generator, strength: float = 4.0, noise: float = 0.05) -> PlantedModel:
    """One dominant rotary subspace per kv group.

    Embedding feature 0 is a constant 1 (see :func:`planted_calibration`).
    The planted pair of every query and key head reads that feature with a
    large weight, so its chunks are ``[strength, 0]`` for every token and
    its contribution to the score depends only on the relative position.
    All other weights are small noise.
    """
    d = cfg.d_head
    planted = rng.integers(0, cfg.n_subspaces, size=(cfg.n_layers, cfg.n_kv_heads))
    layers = random_layers(cfg, rng)
    for l, w in enumerate(layers):
        w.w_q *= noise
        w.w_k *= noise
        for g in range(cfg.n_kv_heads):
            k = int(planted[l, g])
            w.w_k[g * d + 2 * k, 0] = strength
            for h in range(g * cfg.group_size, (g + 1) * cfg.group_size):
                w.w_q[h * d + 2 * k, 0] = strength
        # keep the constant feature intact in deeper layers
        w.w_o[0, :] = 0.0
    return PlantedModel(cfg, layers, planted)


def planted_calibration(rng: np.random.Generator, cfg: ModelConfig, n_seqs: int, n_tokens: int) -> list[TokenSequence]:
    """Text-only sequences whose embedding feature 0 is constantly 1."""
    out = []
    for _ in range(n_seqs):
        x = rng.normal(0.0, 1.0, (cfg.d_model, n_tokens))
        x[0] = 1.0
        idx = np.arange(n_tokens)
        out.append(TokenSequence(x, np.ones(n_tokens, np.int8), np.stack([idx, idx, idx], axis=1)))
    return out


# ---------------------------------------------------------------------------
# the standard toy distillation task
# ---------------------------------------------------------------------------

TOY_CONFIG = ModelConfig(n_layers=2, n_heads=4, n_kv_heads=2, d_model=32, d_head=16, rope_kind="mrope", d_rope=4, d_latent=8)


@dataclass
class ToyTask:
    cfg: ModelConfig  # target layout (partial RoPE, compressed latent)
    layers: list[AttentionWeights]  # frozen original model
    calib: list[TokenSequence]
    train: list[TokenSequence]


def toy_task(seed: int, cfg: ModelConfig = TOY_CONFIG, n_calib: int = 8, n_train: int = 8, qk_gain: float = 3.0) -> ToyTask:
    """Random GQA teacher plus heterogeneous image/text data.

    The default target keeps ``d_rope = d_head / 4`` rotary dims and an
    8-wide latent per kv head.
    """
    rng = np.random.default_rng(seed)
    layers = random_layers(cfg, rng, qk_gain)
    style = ModalityStyle.make(rng, cfg.d_model)
    images = [(1, 3, 4)]
    calib = make_calibration(rng, cfg.d_model, n_calib, 12, images, cfg.rope_kind, style=style)
    train = make_calibration(rng, cfg.d_model, n_train, 12, images, cfg.rope_kind, style=style)
    return ToyTask(cfg, layers, calib, train)
