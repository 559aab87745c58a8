"""Two-stage parameter-efficient recovery by layerwise output distillation.

The student is either a partial-RoPE GQA model (stage 1: only ``w_q`` and
``w_k`` move) or a converted MLA model (stage 2: only ``w_q``,
``k_rope_rows`` and the factor pairs move). Every student layer is fed the
frozen original model's hidden state at that layer, and the loss is the
mean squared error between student and original attention outputs, summed
over layers. Gradients are derived by hand and checked against finite
differences in the test suite.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import (
    MODALITIES,
    AttentionWeights,
    ModelConfig,
    TokenSequence,
    _merge_heads,
    _split_heads,
    gqa_layer_forward,
    mla_layer_forward,
    named_parameters,
    param_class,
    rotate_grouped,
    run_gqa,
    with_parameters,
)
from .rope import rope_angles, rotate_pairs

log = logging.getLogger(__name__)

STAGE1 = frozenset({"w_q", "w_k"})
STAGE2 = frozenset({"w_q", "k_rope_rows", "w_down", "w_up"})


class AdaptError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class TrainMask:
    stage: str
    tunable: frozenset[str]

    @classmethod
    def stage1(cls) -> "TrainMask":
        return cls("stage1", STAGE1)

    @classmethod
    def stage2(cls) -> "TrainMask":
        return cls("stage2", STAGE2)

    def names(self, params: dict[str, np.ndarray]) -> list[str]:
        """Parameter names selected by this mask; unknown classes are an error."""
        classes = {param_class(n) for n in params}
        unknown = set(self.tunable) - classes
        if unknown:
            raise AdaptError(f"mask references unknown parameter(s): {sorted(unknown)}")
        return [n for n in params if param_class(n) in self.tunable]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    steps: int
    warmup_ratio: float = 0.1
    decay_ratio: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.warmup_ratio <= 1.0 and 0.0 <= self.decay_ratio <= 1.0):
            raise AdaptError("warmup_ratio and decay_ratio must lie in [0, 1]")
        if self.steps < 0:
            raise AdaptError("steps must be nonnegative")

    def lr_at(self, step: int) -> float:
        """Linear warmup, constant, linear decay."""
        warm = int(round(self.warmup_ratio * self.steps))
        decay = int(round(self.decay_ratio * self.steps))
        if warm and step < warm:
            return self.learning_rate * (step + 1) / warm
        if decay and step >= self.steps - decay:
            return self.learning_rate * (self.steps - step) / decay
        return self.learning_rate


@dataclass
class Student:
    """Model being trained: GQA layers (optionally partial RoPE) or MLA layers."""

    cfg: ModelConfig
    layers: list
    retained: np.ndarray | None = None  # (L, G, r) partial RoPE for GQA students

    @property
    def is_mla(self) -> bool:
        return not isinstance(self.layers[0], AttentionWeights)

    def parameters(self) -> dict[str, np.ndarray]:
        return named_parameters(self.layers)

    def with_parameters(self, params: dict[str, np.ndarray]) -> "Student":
        return Student(self.cfg, with_parameters(self.layers, params), self.retained)


@dataclass
class TeacherBatch:
    """Frozen original-model activations for a list of sequences (token-major)."""

    seqs: list[TokenSequence]
    inputs: list[list[np.ndarray]]
    outputs: list[list[np.ndarray]]

    @classmethod
    def from_model(cls, cfg: ModelConfig, layers, seqs: list[TokenSequence]) -> "TeacherBatch":
        traces = [run_gqa(cfg, layers, s) for s in seqs]
        return cls(list(seqs), [t.inputs for t in traces], [t.outputs for t in traces])


# ---------------------------------------------------------------------------
# backward passes
# ---------------------------------------------------------------------------


def _attention_backward(d_out, q, k, v, p, scale, group):
    """Gradients of grouped attention w.r.t. rotated ``q``, ``k`` and ``v``."""
    vh = np.repeat(v, group, axis=0)
    kh = np.repeat(k, group, axis=0)
    dp = np.einsum("hid,hjd->hij", d_out, vh)
    dv_h = np.einsum("hij,hid->hjd", p, d_out)
    ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True)) * scale
    dq = np.einsum("hij,hjd->hid", ds, kh)
    dk_h = np.einsum("hij,hid->hjd", ds, q)
    G = k.shape[0]
    dk = dk_h.reshape(G, group, *dk_h.shape[1:]).sum(axis=1)
    dv = dv_h.reshape(G, group, *dv_h.shape[1:]).sum(axis=1)
    return dq, dk, dv


def _gqa_layer_grads(cfg, w, x, positions, retained, dy, names, prefix, spec):
    _, it = gqa_layer_forward(cfg, w, x, positions, retained, spec)
    d_out = _split_heads(dy @ w.w_o, cfg.n_heads)
    dq, dk, dv = _attention_backward(d_out, it["q"], it["k"], it["v"], it["p"], 1.0 / np.sqrt(cfg.d_head), cfg.group_size)
    grads = {}
    if prefix + "w_q" in names:
        dq_pre = rotate_grouped(spec, dq, positions, retained, cfg.group_size, inverse=True)
        grads[prefix + "w_q"] = _merge_heads(dq_pre).T @ x
    if prefix + "w_k" in names:
        dk_pre = rotate_grouped(spec, dk, positions, retained, 1, inverse=True)
        grads[prefix + "w_k"] = _merge_heads(dk_pre).T @ x
    if prefix + "w_v" in names:
        grads[prefix + "w_v"] = _merge_heads(dv).T @ x
    if prefix + "w_o" in names:
        grads[prefix + "w_o"] = dy.T @ it["merged"]
    return grads


def _mla_layer_grads(cfg, w, x, modality, positions, dy, names, prefix, spec):
    G, dr = cfg.n_kv_heads, cfg.d_rope
    dl = w.latent_width
    y, lat, _, it = mla_layer_forward(
        cfg, w, x, modality, positions, np.zeros((0, G * dl)), np.zeros((0, G * dr)), np.zeros(0, np.int8), spec
    )
    n = x.shape[0]
    d_out = _split_heads(dy @ w.w_o, cfg.n_heads)
    dq, dk, dv = _attention_backward(d_out, it["q"], it["k"], it["v"], it["p"], 1.0 / np.sqrt(cfg.d_head), cfg.group_size)
    grads = {}
    angles = [rope_angles(spec, positions, w.retained[g]) for g in range(G)]
    if prefix + "w_q" in names:
        dq_pre = dq.copy()
        for h in range(cfg.n_heads):
            dq_pre[h, :, :dr] = rotate_pairs(dq[h, :, :dr], angles[h // cfg.group_size], inverse=True)
        grads[prefix + "w_q"] = _merge_heads(dq_pre).T @ x
    if prefix + "k_rope_rows" in names:
        dk_pre = np.stack([rotate_pairs(dk[g, :, :dr], angles[g], inverse=True) for g in range(G)])
        grads[prefix + "k_rope_rows"] = _merge_heads(dk_pre).T @ x
    if prefix + "w_o" in names:
        grads[prefix + "w_o"] = dy.T @ it["merged"]
    d_kv = np.concatenate([dk[:, :, dr:], dv], axis=2)  # (G, n, d_kv_rows)
    c = lat.reshape(n, G, dl)
    for code, m in enumerate(MODALITIES):
        idx = np.flatnonzero(modality == code)
        for g in range(G):
            up_name = f"{prefix}w_up.{m}.{g}"
            down_name = f"{prefix}w_down.{m}.{g}"
            if up_name in names:
                grads[up_name] = d_kv[g, idx].T @ c[idx, g] if idx.size else np.zeros_like(w.w_up[m][g])
            if down_name in names:
                if idx.size:
                    dc = d_kv[g, idx] @ w.w_up[m][g]
                    grads[down_name] = dc.T @ x[idx]
                else:
                    grads[down_name] = np.zeros_like(w.w_down[m][g])
    return grads


def student_outputs(student: Student, batch: TeacherBatch) -> list[list[np.ndarray]]:
    """Teacher-forced per-layer outputs ``[s][l]`` of the student."""
    cfg = student.cfg
    spec = cfg.rope_spec()
    out = []
    for s, seq in enumerate(batch.seqs):
        ys = []
        for l, w in enumerate(student.layers):
            x = batch.inputs[s][l]
            if student.is_mla:
                G = cfg.n_kv_heads
                y, *_ = mla_layer_forward(
                    cfg, w, x, seq.modality, seq.positions,
                    np.zeros((0, G * w.latent_width)), np.zeros((0, G * cfg.d_rope)), np.zeros(0, np.int8), spec,
                )
            else:
                sel = None if student.retained is None else student.retained[l]
                y, _ = gqa_layer_forward(cfg, w, x, seq.positions, sel, spec)
            ys.append(y)
        out.append(ys)
    return out


def distill_loss(student: Student, batch: TeacherBatch) -> float:
    ys = student_outputs(student, batch)
    total = 0.0
    for l in range(student.cfg.n_layers):
        num = sum(float(np.sum((ys[s][l] - batch.outputs[s][l]) ** 2)) for s in range(len(batch.seqs)))
        den = sum(batch.outputs[s][l].size for s in range(len(batch.seqs)))
        total += num / den
    return total


def loss_and_grads(student: Student, batch: TeacherBatch, mask: TrainMask) -> tuple[float, dict[str, np.ndarray]]:
    """Distillation loss and its gradient on the parameters selected by ``mask``.

    The returned dict only holds tunable parameters.
    """
    params = student.parameters()
    names = set(mask.names(params))
    cfg = student.cfg
    spec = cfg.rope_spec()
    ys = student_outputs(student, batch)
    counts = [sum(batch.outputs[s][l].size for s in range(len(batch.seqs))) for l in range(cfg.n_layers)]
    grads = {n: np.zeros_like(params[n]) for n in params if n in names}
    loss = 0.0
    for s, seq in enumerate(batch.seqs):
        for l, w in enumerate(student.layers):
            diff = ys[s][l] - batch.outputs[s][l]
            loss += float(np.sum(diff * diff)) / counts[l]
            dy = 2.0 * diff / counts[l]
            prefix = f"layer.{l}."
            if student.is_mla:
                g = _mla_layer_grads(cfg, w, batch.inputs[s][l], seq.modality, seq.positions, dy, names, prefix, spec)
            else:
                sel = None if student.retained is None else student.retained[l]
                g = _gqa_layer_grads(cfg, w, batch.inputs[s][l], seq.positions, sel, dy, names, prefix, spec)
            for k, v in g.items():
                grads[k] += v
    return loss, grads


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class LossTrace:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    final_loss: float | None = None

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(("step", "loss", "lr"))
            for s, l, r in zip(self.steps, self.losses, self.lrs):
                wr.writerow((s, repr(l), repr(r)))


def train_stage(student: Student, batches: list[TeacherBatch], mask: TrainMask, cfg: TrainConfig) -> tuple[Student, LossTrace]:
    """Plain gradient descent on the masked parameters.

    Each epoch visits ``batches`` in an order drawn from ``cfg.seed``. The
    trace records the loss before each update; ``final_loss`` is the mean
    loss over all batches after the last update.
    """
    if not batches:
        raise AdaptError("no training batches")
    rng = np.random.default_rng(cfg.seed)
    params = {n: a.copy() for n, a in student.parameters().items()}
    names = mask.names(params)
    current = student.with_parameters(params)
    trace = LossTrace()
    order: list[int] = []
    for step in range(cfg.steps):
        if not order:
            order = list(rng.permutation(len(batches)))
        batch = batches[order.pop(0)]
        # overflow shows up as a non-finite loss, reported below with the step
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grads = loss_and_grads(current, batch, mask)
        if not np.isfinite(loss):
            raise TrainingDiverged(step, loss)
        lr = cfg.lr_at(step)
        trace.steps.append(step)
        trace.losses.append(loss)
        trace.lrs.append(lr)
        if lr != 0.0:
            for n in names:
                params[n] = params[n] - lr * grads[n]
            current = student.with_parameters({n: params[n] for n in names})
            student = current
    final = float(np.mean([distill_loss(current, b) for b in batches]))
    if not np.isfinite(final):
        raise TrainingDiverged(cfg.steps, final)
    trace.final_loss = final
    return current, trace


# ---------------------------------------------------------------------------
# two-stage versus single-stage recovery
# ---------------------------------------------------------------------------


@dataclass
class RecoveryResult:
    final_loss: float
    converted_loss: float  # loss right after conversion, before stage 2 / single stage
    traces: list[LossTrace]
    student: Student


def _batches(cfg, layers, seqs, batch_size):
    return [TeacherBatch.from_model(cfg, layers, seqs[i : i + batch_size]) for i in range(0, len(seqs), batch_size)]


def two_stage(task, selection, steps1: int, steps2: int, lr1: float, lr2: float, seed: int = 0, batch_size: int = 4) -> RecoveryResult:
    """Stage 1 on the partial-RoPE GQA model, convert the tuned weights, then stage 2."""
    from .convert import convert

    cfg = task.cfg
    batches = _batches(cfg, task.layers, task.train, batch_size)
    s1, tr1 = train_stage(Student(cfg, task.layers, selection.retained), batches, TrainMask.stage1(), TrainConfig(lr1, steps1, seed=seed))
    mla, _ = convert(cfg, s1.layers, task.calib, selection=selection, check_equivalence=False, teacher_layers=task.layers)
    start = Student(cfg, mla)
    converted = float(np.mean([distill_loss(start, b) for b in batches]))
    s2, tr2 = train_stage(start, batches, TrainMask.stage2(), TrainConfig(lr2, steps2, seed=seed))
    return RecoveryResult(tr2.final_loss if steps2 else converted, converted, [tr1, tr2], s2)


def single_stage(task, selection, steps: int, lr: float, seed: int = 0, batch_size: int = 4) -> RecoveryResult:
    """Convert the original weights, then tune all MLA parameters for ``steps``."""
    from .convert import convert

    cfg = task.cfg
    batches = _batches(cfg, task.layers, task.train, batch_size)
    mla, _ = convert(cfg, task.layers, task.calib, selection=selection, check_equivalence=False)
    start = Student(cfg, mla)
    converted = float(np.mean([distill_loss(start, b) for b in batches]))
    s, tr = train_stage(start, batches, TrainMask.stage2(), TrainConfig(lr, steps, seed=seed))
    return RecoveryResult(tr.final_loss if steps else converted, converted, [tr], s)
