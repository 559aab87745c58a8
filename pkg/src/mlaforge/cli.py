"""``mlaforge`` command line.

Commands: init-model, gen-calib, convert, verify, account, analyze, select.
Failures print one line ``mlaforge: error: <kind>: <message>`` to stderr
and exit 1; bad usage exits 2 (argparse). Outputs are written all at once
at the end of a command, so a failing command leaves nothing behind.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .cachekit import PRESETS, account
from .checkpoint import load_calibration, load_checkpoint, save_calibration, save_checkpoint
from .convert import ConversionError, convert, layer_residual, modality_activations, teacher_inputs
from .mdsvd import LossEntry, LossReport, split_loss_report
from .model import AttentionWeights, ModelConfig, TokenSequence, forward_mha_gqa, forward_mla
from .selection import SensitivityMap, canonical_strategy, score_mkl, score_two_norm, select_top_r
from .synthetic import make_calibration, parse_images, random_layers

STRATEGY_CHOICES = ("2norm", "mkl")


class CliError(Exception):
    pass


def _threads():
    n = os.environ.get("MLAFORGE_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    try:
        return threadpool_limits(limits=max(1, int(n)))
    except ValueError:
        raise CliError(f"MLAFORGE_THREADS must be an integer, got {n!r}") from None


def _write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    wr.writerows(rows)
    return buf.getvalue()


def _load_gqa(path):
    cfg, layers, _ = load_checkpoint(path)
    if not isinstance(layers[0], AttentionWeights):
        raise CliError(f"{path} is an MLA checkpoint; expected an MHA/GQA one")
    return cfg, layers


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_init_model(a) -> None:
    cfg = ModelConfig(a.layers, a.heads, a.kv_heads, a.d_model, a.d_head, a.rope, a.rope_base)
    layers = random_layers(cfg, np.random.default_rng(a.seed), a.qk_gain)
    save_checkpoint(a.out, cfg, layers)
    print(f"wrote {a.out}")


def cmd_gen_calib(a) -> None:
    rng = np.random.default_rng(a.seed)
    images = parse_images(a.images) if a.images else []
    seqs = make_calibration(rng, a.d_model, a.n_seqs, a.text, images, a.rope, mirror=a.mirror_modalities)
    if a.mirror_modalities:
        # same tokens tagged once as text and once as visual, flat positions:
        # every layer then sees identical hidden states for both modalities
        mirrored = []
        for s in seqs:
            n = s.n_tokens
            idx = np.arange(n)
            flat = np.stack([idx, idx, idx], axis=1)
            mirrored.append(TokenSequence(s.embeddings, np.ones(n, np.int8), flat))
            mirrored.append(TokenSequence(s.embeddings, np.zeros(n, np.int8), flat))
        seqs = mirrored
    meta = {"seed": a.seed, "text": a.text, "images": a.images or "", "rope": a.rope, "mirror_modalities": a.mirror_modalities}
    save_calibration(a.out, seqs, meta)
    print(f"wrote {a.out} ({len(seqs)} sequences)")


def cmd_convert(a) -> None:
    cfg, layers = _load_gqa(a.inp)
    calib, _ = load_calibration(a.calib)
    d_rope = cfg.d_head if a.d_rope is None else a.d_rope
    try:
        target = cfg.replace(d_rope=d_rope, d_latent=a.d_latent)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    mla, report = convert(target, layers, calib, strategy=a.strategy, ridge=a.ridge)
    if report.max_residual is not None and not np.isfinite(report.max_residual):
        raise ConversionError("non-finite full-rank residual")
    save_checkpoint(a.out, target, mla, {"strategy": report.strategy, "aggregation": "mean"})
    if a.report:
        rep = Path(a.report)
        rep.mkdir(parents=True, exist_ok=True)
        report.to_csv(rep / "report.csv")
        _write_text(rep / "report.txt", report.to_text())
    print(report.cache_after.display())


def cmd_verify(a) -> None:
    cfg_m, mla, _ = load_checkpoint(a.inp)
    if isinstance(mla[0], AttentionWeights):
        raise CliError(f"{a.inp} is not an MLA checkpoint")
    cfg_r, ref = _load_gqa(a.ref)
    calib, _ = load_calibration(a.calib)
    refs, news = [], []
    for seq in calib:
        refs.append(forward_mha_gqa(cfg_r, ref, seq)[0].T)
        news.append(forward_mla(cfg_m, mla, seq)[0].T)
    res = layer_residual(refs, news)
    print(f"residual: {res:.6e}")
    if a.tol is not None and not res <= a.tol:
        raise CliError(f"residual {res:.6e} exceeds tolerance {a.tol:g}")


def cmd_account(a) -> None:
    if a.preset not in PRESETS:
        raise CliError(f"unknown preset {a.preset!r}; choose from {sorted(PRESETS)}")
    cfg = PRESETS[a.preset]
    changes = {}
    if a.d_rope is not None:
        changes["d_rope"] = a.d_rope
    changes["d_latent"] = cfg.d_latent if a.d_latent is None else a.d_latent
    try:
        cfg = cfg.replace(**changes)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    print(account(cfg, a.baseline, a.bits).display())


def cmd_analyze(a) -> None:
    """Joint vs modality-split truncation loss of each layer's stacked [w_k; w_v]."""
    cfg, layers = _load_gqa(a.inp)
    calib, _ = load_calibration(a.calib)
    inputs, _ = teacher_inputs(cfg, layers, calib)
    report = LossReport()
    d = cfg.d_head
    for l, w in enumerate(layers):
        acts = modality_activations(inputs, calib, l)
        if acts["visual"].size == 0 or acts["text"].size == 0:
            raise CliError("analyze needs calibration tokens of both modalities")
        joint = vis = txt = 0.0
        for g in range(cfg.n_kv_heads):
            stack = np.concatenate([w.w_k[g * d : (g + 1) * d], w.w_v[g * d : (g + 1) * d]], axis=0)
            e = split_loss_report(stack, acts["visual"], acts["text"], a.rank, a.ridge, layer=l)
            joint += e.loss_joint
            vis += e.loss_visual
            txt += e.loss_text
        report.add(LossEntry(l, joint, vis, txt))
    text = _csv_text(LossReport.COLUMNS, [[e.layer, repr(e.loss_joint), repr(e.loss_visual), repr(e.loss_text), repr(e.ratio)] for e in report.entries])
    _write_text(a.out, text)
    for e in report.entries:
        print(f"layer {e.layer}: ratio {e.ratio:.6f}")


def cmd_select(a) -> None:
    cfg, layers = _load_gqa(a.inp)
    calib, _ = load_calibration(a.calib)
    strategy = canonical_strategy(a.strategy)
    inputs, _ = teacher_inputs(cfg, layers, calib)
    smap: SensitivityMap = score_two_norm(cfg, layers, calib, inputs) if strategy == "two_norm" else score_mkl(cfg, layers, calib, activations=inputs)
    _write_text(a.out, _csv_text(("layer", "head", "k", "score"), [(l, h, k, repr(s)) for l, h, k, s in smap.rows()]))
    if a.d_rope is not None:
        sel = select_top_r(smap, cfg.replace(d_rope=a.d_rope), a.d_rope // 2)
        for l in range(cfg.n_layers):
            print(f"layer {l}: " + " | ".join(" ".join(map(str, g)) for g in sel.retained[l].tolist()))


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mlaforge", description="MHA/GQA to MLA conversion toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init-model", help="write a random MHA/GQA checkpoint")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--layers", type=int, default=2)
    s.add_argument("--heads", type=int, default=4)
    s.add_argument("--kv-heads", type=int, default=2)
    s.add_argument("--d-model", type=int, default=32)
    s.add_argument("--d-head", type=int, default=16)
    s.add_argument("--rope", choices=("vanilla_1d", "mrope"), default="mrope")
    s.add_argument("--rope-base", type=float, default=10000.0)
    s.add_argument("--qk-gain", type=float, default=1.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_init_model)

    s = sub.add_parser("gen-calib", help="write a synthetic calibration set")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--text", type=int, default=16, help="text tokens per sequence")
    s.add_argument("--images", default="", help="comma-separated KxHxW visual grids")
    s.add_argument("--d-model", type=int, default=32)
    s.add_argument("--n-seqs", type=int, default=4)
    s.add_argument("--rope", choices=("vanilla_1d", "mrope"), default="mrope")
    s.add_argument("--mirror-modalities", action="store_true", help="identical activations for both modalities")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_calib)

    s = sub.add_parser("convert", help="convert an MHA/GQA checkpoint to MLA")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--calib", required=True)
    s.add_argument("--strategy", choices=STRATEGY_CHOICES, default="mkl")
    s.add_argument("--d-rope", type=int)
    s.add_argument("--d-latent", type=int)
    s.add_argument("--ridge", type=float, default=1e-6)
    s.add_argument("--out", required=True)
    s.add_argument("--report")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_convert)

    s = sub.add_parser("verify", help="max relative output difference of an MLA checkpoint vs its source")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--calib", required=True)
    s.add_argument("--tol", type=float)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("account", help="KV-cache reduction of a preset model")
    s.add_argument("--preset", required=True, choices=sorted(PRESETS))
    s.add_argument("--d-latent", type=int)
    s.add_argument("--d-rope", type=int)
    s.add_argument("--baseline", choices=("mha", "gqa"), default="mha")
    s.add_argument("--bits", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_account)

    s = sub.add_parser("analyze", help="joint vs modality-split truncation loss per layer")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--calib", required=True)
    s.add_argument("--rank", type=int, required=True)
    s.add_argument("--ridge", type=float, default=0.0)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("select", help="rotary subspace sensitivity scores")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--calib", required=True)
    s.add_argument("--strategy", choices=STRATEGY_CHOICES, default="mkl")
    s.add_argument("--d-rope", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_select)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _threads():
            args.func(args)
    except (CliError, ValueError, RuntimeError, OSError, KeyError, ArithmeticError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"mlaforge: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
