import numpy as np
import pytest

from mlaforge.model import ModelConfig, TokenSequence
from mlaforge.synthetic import random_layers


def jacobi_eigh(a, tol=1e-14, max_sweeps=100):
    """Cyclic Jacobi eigensolver for a symmetric matrix (test oracle)."""
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off < tol * max(1.0, np.linalg.norm(a)):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) < 1e-300:
                    continue
                tau = (a[q, q] - a[p, p]) / (2 * a[p, q])
                t = np.sign(tau) / (abs(tau) + np.sqrt(1 + tau * tau)) if tau != 0 else 1.0
                c = 1 / np.sqrt(1 + t * t)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                v = v @ rot
    w = np.diag(a).copy()
    order = np.argsort(-w)
    return w[order], v[:, order]


def random_sequence(rng, d_model, n, n_visual=0, flat=True):
    """Embeddings with the first ``n_visual`` tokens tagged visual; flat positions."""
    idx = np.arange(n)
    modality = np.ones(n, np.int8)
    modality[:n_visual] = 0
    pos = np.stack([idx, idx, idx], axis=1)
    return TokenSequence(rng.normal(size=(d_model, n)), modality, pos)


@pytest.fixture
def gqa_toy():
    """The 2-layer GQA toy: d_model=32, 4 heads, 2 kv heads, d_head=8."""
    cfg = ModelConfig(n_layers=2, n_heads=4, n_kv_heads=2, d_model=32, d_head=8)
    return cfg, random_layers(cfg, np.random.default_rng(7), qk_gain=2.0)


def fd_gradient_errors(student, batch, mask, h=1e-5):
    """Max per-entry relative error of analytic vs central-difference gradients, per class."""
    from mlaforge.adapt import distill_loss, loss_and_grads
    from mlaforge.model import param_class

    _, grads = loss_and_grads(student, batch, mask)
    params = student.parameters()
    worst = {}
    for name, g in grads.items():
        num = np.zeros_like(g)
        base = params[name]
        for i in range(base.size):
            vals = []
            for sgn in (1.0, -1.0):
                arr = base.copy()
                arr.flat[i] += sgn * h
                vals.append(distill_loss(student.with_parameters({name: arr}), batch))
            num.flat[i] = (vals[0] - vals[1]) / (2 * h)
        rel = np.abs(g - num) / np.maximum(np.maximum(np.abs(g), np.abs(num)), 1e-7)
        c = param_class(name)
        worst[c] = max(worst.get(c, 0.0), float(rel.max()))
    return worst


def gradcheck_setup(seed=0):
    """2-layer, d_model=16 model with a partial-RoPE GQA student and a converted MLA student."""
    from mlaforge.adapt import Student, TeacherBatch
    from mlaforge.convert import convert
    from mlaforge.selection import select_subspaces
    from mlaforge.synthetic import make_calibration

    rng = np.random.default_rng(seed)
    cfg = ModelConfig(n_layers=2, n_heads=4, n_kv_heads=2, d_model=16, d_head=16, rope_kind="mrope", d_rope=8, d_latent=6)
    layers = random_layers(cfg, rng, 2.0)
    calib = make_calibration(rng, 16, 2, 5, [(1, 2, 2)], "mrope")
    batch = TeacherBatch.from_model(cfg, layers, calib)
    sel, _ = select_subspaces(cfg, layers, calib, "mkl")
    mla, _ = convert(cfg, layers, calib, selection=sel, check_equivalence=False)
    return batch, Student(cfg, layers, sel.retained), Student(cfg, mla)


# acceptance criteria register one summary line each (see test_acceptance.py)
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
