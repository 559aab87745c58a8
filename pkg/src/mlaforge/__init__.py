"""Convert MHA/GQA attention to multi-head latent attention (MLA).

Modules: ``rope`` (RoPE / M-RoPE), ``model`` (toy GQA and MLA forward
passes, KV cache), ``selection`` (which rotary subspaces to keep),
``mdsvd`` (modality-decoupled whitened SVD), ``convert`` (the pipeline),
``adapt`` (two-stage recovery), ``cachekit`` (memory accounting and
cache quantization), ``checkpoint`` and ``cli``.
"""

from .model import AttentionWeights, KvCache, MlaLayerWeights, ModelConfig, TokenSequence, forward_mha_gqa, forward_mla
from .convert import ConversionReport, convert
from .cachekit import account, decode_fidelity, quantize_cache, QuantSpec
from .mdsvd import md_svd, split_loss_report, whitened_factorize

__version__ = "0.1.0"

__all__ = [
    "AttentionWeights",
    "ConversionReport",
    "KvCache",
    "MlaLayerWeights",
    "ModelConfig",
    "QuantSpec",
    "TokenSequence",
    "account",
    "convert",
    "decode_fidelity",
    "forward_mha_gqa",
    "forward_mla",
    "md_svd",
    "quantize_cache",
    "split_loss_report",
    "whitened_factorize",
]
