"""On-disk formats: model checkpoints and calibration sets.

Both are a directory holding a JSON manifest plus one binary blob of
little-endian values. Manifests are written with sorted keys and a fixed
indent, and tensors are laid out in canonical order, so a
write -> read -> write cycle reproduces the files byte for byte.

Checkpoint: ``manifest.json`` + ``tensors.bin`` (float32).
Calibration: ``calib.json`` + ``calib.bin`` (float32 embeddings, int32 tokens).
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np

from .model import MODALITIES, AttentionWeights, MlaLayerWeights, ModelConfig, TokenSequence, named_parameters

FORMAT_VERSION = 1
ROPE_LAYOUT = "paired_even_odd"
F32 = np.dtype("<f4")
I32 = np.dtype("<i4")


class FormatError(ValueError):
    pass


def _dump_json(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode()


def _write_dir(path: Path, files: dict[str, bytes]) -> None:
    """Write all files or none: stage in a sibling temp dir, then move in."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        for name, data in files.items():
            (stage / name).write_bytes(data)
        if not path.exists():
            os.replace(stage, path)
            return
        if not path.is_dir():
            raise FormatError(f"{path} exists and is not a directory")
        for name in files:
            os.replace(stage / name, path / name)
    finally:
        shutil.rmtree(stage, ignore_errors=True)


def _read_manifest(path: Path, name: str) -> dict:
    try:
        return json.loads((Path(path) / name).read_text())
    except FileNotFoundError:
        raise FormatError(f"missing {name} in {path}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path / name}: invalid JSON ({exc.msg})") from None


def _read_blob(path: Path, name: str) -> bytes:
    try:
        return (Path(path) / name).read_bytes()
    except FileNotFoundError:
        raise FormatError(f"missing {name} in {path}") from None


def _check_extents(entries: list[dict], blob_len: int, what: str) -> None:
    spans = sorted((int(e["offset"]), int(e["offset"]) + int(e["length"]), e.get("name", "?")) for e in entries)
    end = 0
    for lo, hi, name in spans:
        if lo < end:
            raise FormatError(f"{what}: entry {name} overlaps the previous one")
        if hi > blob_len or lo < 0:
            raise FormatError(f"{what}: entry {name} lies outside the blob")
        end = hi


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, cfg: ModelConfig, layers, selection: dict | None = None) -> None:
    """Write a GQA/MHA or MLA model. MLA layers also record their retained subspaces."""
    params = named_parameters(layers)
    index, chunks, offset = [], [], 0
    for name, arr in params.items():
        data = np.ascontiguousarray(arr, dtype=F32).tobytes()
        index.append({"name": name, "shape": list(arr.shape), "dtype": "f32", "offset": offset, "length": len(data)})
        chunks.append(data)
        offset += len(data)
    is_mla = bool(layers) and isinstance(layers[0], MlaLayerWeights)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "mla" if is_mla else "gqa",
        "config": cfg.to_dict(),
        "rope_layout": ROPE_LAYOUT,
        "tensors": index,
    }
    if is_mla:
        manifest["selection"] = {"retained": [w.retained.tolist() for w in layers], **(selection or {})}
        manifest["modality_routing"] = {m: i for i, m in enumerate(MODALITIES)}
    elif selection is not None:
        manifest["selection"] = selection
    _write_dir(Path(path), {"manifest.json": _dump_json(manifest), "tensors.bin": b"".join(chunks)})


def load_checkpoint(path) -> tuple[ModelConfig, list, dict]:
    """Returns ``(cfg, layers, manifest)``; arrays come back as float64."""
    path = Path(path)
    man = _read_manifest(path, "manifest.json")
    if man.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported format_version {man.get('format_version')!r}")
    if man.get("rope_layout") != ROPE_LAYOUT:
        raise FormatError(f"unsupported rope layout {man.get('rope_layout')!r}")
    blob = _read_blob(path, "tensors.bin")
    try:
        cfg = ModelConfig.from_dict(man["config"])
        entries = man["tensors"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed manifest: {exc}") from None
    _check_extents(entries, len(blob), "tensors.bin")
    tensors = {}
    for e in entries:
        if e.get("dtype") != "f32":
            raise FormatError(f"tensor {e['name']}: unsupported dtype {e.get('dtype')!r}")
        shape = tuple(e["shape"])
        if int(np.prod(shape, dtype=np.int64)) * 4 != e["length"]:
            raise FormatError(f"tensor {e['name']}: length does not match shape {shape}")
        raw = np.frombuffer(blob, dtype=F32, count=e["length"] // 4, offset=e["offset"])
        tensors[e["name"]] = raw.astype(np.float64).reshape(shape)
    try:
        if man.get("kind") == "mla":
            layers = _mla_layers(cfg, tensors, man["selection"]["retained"])
        else:
            layers = [AttentionWeights(*(tensors[f"layer.{i}.{n}"] for n in ("w_q", "w_k", "w_v", "w_o"))) for i in range(cfg.n_layers)]
            for w in layers:
                w.check(cfg)
    except KeyError as exc:
        raise FormatError(f"checkpoint is missing tensor {exc.args[0]}") from None
    return cfg, layers, man


def _mla_layers(cfg: ModelConfig, t: dict, retained) -> list[MlaLayerWeights]:
    out = []
    for i in range(cfg.n_layers):
        p = f"layer.{i}."
        w = MlaLayerWeights(
            retained=np.asarray(retained[i], dtype=np.int64),
            w_q=t[p + "w_q"],
            k_rope_rows=t[p + "k_rope_rows"],
            w_down={m: [t[f"{p}w_down.{m}.{g}"] for g in range(cfg.n_kv_heads)] for m in MODALITIES},
            w_up={m: [t[f"{p}w_up.{m}.{g}"] for g in range(cfg.n_kv_heads)] for m in MODALITIES},
            w_o=t[p + "w_o"],
        )
        w.check(cfg)
        out.append(w)
    return out


# ---------------------------------------------------------------------------
# calibration sets
# ---------------------------------------------------------------------------


def save_calibration(path, seqs: list[TokenSequence], meta: dict | None = None) -> None:
    if not seqs:
        raise FormatError("calibration set is empty")
    d_model = seqs[0].embeddings.shape[0]
    records, chunks, offset = [], [], 0

    def put(arr, dtype):
        nonlocal offset
        data = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        rec = {"offset": offset, "length": len(data)}
        chunks.append(data)
        offset += len(data)
        return rec

    for s in seqs:
        if s.embeddings.shape[0] != d_model:
            raise FormatError("all sequences must share d_model")
        records.append({
            "n_tokens": s.n_tokens,
            "embeddings": put(s.embeddings.T, F32),  # token-major
            "tokens": {"modality": put(s.modality, I32), "positions": put(s.positions, I32)},
        })
    manifest = {"format_version": FORMAT_VERSION, "d_model": d_model, "sequences": records, "meta": meta or {}}
    _write_dir(Path(path), {"calib.json": _dump_json(manifest), "calib.bin": b"".join(chunks)})


def load_calibration(path) -> tuple[list[TokenSequence], dict]:
    path = Path(path)
    man = _read_manifest(path, "calib.json")
    if man.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported calibration format_version {man.get('format_version')!r}")
    blob = _read_blob(path, "calib.bin")
    try:
        d = int(man["d_model"])
        recs = man["sequences"]
        extents = []
        for i, r in enumerate(recs):
            for key, e in (("embeddings", r["embeddings"]), ("modality", r["tokens"]["modality"]), ("positions", r["tokens"]["positions"])):
                extents.append({"name": f"seq{i}.{key}", **e})
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed calibration manifest: {exc}") from None
    _check_extents(extents, len(blob), "calib.bin")

    def get(e, dtype, count):
        if e["length"] != count * dtype.itemsize:
            raise FormatError("calibration record length does not match its token count")
        return np.frombuffer(blob, dtype=dtype, count=count, offset=e["offset"])

    seqs = []
    for r in recs:
        n = int(r["n_tokens"])
        emb = get(r["embeddings"], F32, n * d).astype(np.float64).reshape(n, d).T
        mod = get(r["tokens"]["modality"], I32, n).astype(np.int8)
        pos = get(r["tokens"]["positions"], I32, 3 * n).astype(np.int64).reshape(n, 3)
        seqs.append(TokenSequence(emb, mod, pos))
    if not seqs:
        raise FormatError("calibration set is empty")
    return seqs, man.get("meta", {})
