"""The ten acceptance criteria, each at its stated tolerance.

Every criterion prints one ``PASS``/``FAIL`` line in the pytest terminal
summary (and immediately, when run with ``-s``). Run alone with::

    pytest tests/test_acceptance.py -v
"""

import functools
import os
import time
from pathlib import Path

import numpy as np

from mlaforge.adapt import Student, TeacherBatch, TrainConfig, TrainMask, distill_loss, single_stage, train_stage, two_stage
from mlaforge.cachekit import PRESETS, QuantSpec, account, decode_fidelity
from mlaforge.cli import main
from mlaforge.convert import convert
from mlaforge.mdsvd import md_svd, split_loss_report, whitened_factorize
from mlaforge.model import ModelConfig, forward_mha_gqa, forward_mla
from mlaforge.rope import RopeSpec, apply_rope, apply_rope_tokens, relative_score
from mlaforge.selection import score_mkl, score_two_norm, select_subspaces
from mlaforge.synthetic import planted_calibration, planted_model, random_layers, toy_task

import conftest
from conftest import fd_gradient_errors, gradcheck_setup, random_sequence
from test_cachekit import KNOWN_MISMATCH, CONVERSION_CELLS, QUANTIZED_CELLS
from test_mdsvd import whitened_svd_transcript
from test_selection import ablation_oracle


def criterion(n, title):
    """Record a PASS/FAIL line for criterion ``n``; the test returns a detail string."""

    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            t0 = time.perf_counter()
            try:
                detail = fn(*args, **kwargs)
            except BaseException as exc:
                line = f"FAIL  {n:>2}. {title}: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
                conftest.ACCEPTANCE_LINES[n] = line
                print(line)
                raise
            line = f"PASS  {n:>2}. {title}: {detail} [{time.perf_counter() - t0:.2f}s]"
            conftest.ACCEPTANCE_LINES[n] = line
            print(line)

        return run

    return wrap


@criterion(1, "memory accounting")
def test_c01_memory_accounting():
    flagged, bad = [], []
    for rows in (CONVERSION_CELLS, QUANTIZED_CELLS):
        for preset, dkv, baseline, bits, printed in rows:
            got = account(PRESETS[preset].replace(d_latent=dkv), baseline, bits).display()
            if got == printed:
                continue
            if KNOWN_MISMATCH.get((preset, dkv, baseline, bits)) == got:
                flagged.append(f"{preset} d_kv={dkv} gives {got}, printed {printed}")
            else:
                bad.append(f"{preset} d_kv={dkv} {baseline} int{bits}: {got} != {printed}")
    assert not bad, "; ".join(bad)
    assert len(flagged) == 1
    return f"conversion cells {len(CONVERSION_CELLS)}/{len(CONVERSION_CELLS)}, quantized cells {len(QUANTIZED_CELLS)}/{len(QUANTIZED_CELLS)}; FLAGGED {flagged[0]}"


def split_loss_instance(rng, hetero):
    d = int(rng.integers(2, 33))
    rows = int(rng.integers(1, 33))
    r = int(rng.integers(1, min(rows, d, 16) + 1))
    nv, nt = (int(v) for v in rng.integers(d, 3 * d + 1, size=2))
    w = rng.normal(size=(rows, d))
    if not hetero:
        mix = rng.normal(size=(d, d))
        return w, mix @ rng.normal(size=(d, nv)), mix @ rng.normal(size=(d, nt)), r
    # each modality concentrates its energy on its own random subspace
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    k = max(1, d // 2)
    perm = rng.permutation(d)
    sv, st = np.full(d, 0.05), np.full(d, 0.05)
    sv[perm[:k]] = rng.uniform(1, 5, k)
    st[perm[-k:]] = rng.uniform(1, 5, k)
    return w, q @ (sv[:, None] * rng.normal(size=(d, nv))), q @ (st[:, None] * rng.normal(size=(d, nt))), r


@criterion(2, "modality-split truncation loss")
def test_c02_split_loss_property():
    rng = np.random.default_rng(2024)
    ratios = {False: [], True: []}
    for i in range(1000):
        hetero = i % 2 == 1
        # rtol=inf: never raise inside the library, judge the ratio here
        ratios[hetero].append(split_loss_report(*split_loss_instance(rng, hetero), rtol=np.inf).ratio)
    homo, het = np.array(ratios[False]), np.array(ratios[True])
    worst = max(homo.max(), het.max())
    assert worst <= 1 + 1e-9, f"max ratio {worst!r}"
    assert het.mean() < 0.95, f"heterogeneous mean ratio {het.mean():.4f}"
    return f"1000 instances, max ratio {worst:.12f}, mean homogeneous {homo.mean():.3f}, mean heterogeneous {het.mean():.3f}"


@criterion(3, "whitened SVD oracle")
def test_c03_algorithm_oracle():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(6, 4))
    xv, xt = rng.normal(size=(4, 10)) * 3, rng.normal(size=(4, 10))
    res = md_svd(w, xv, xt, 2, 2, ridge=0.0)
    dev = 0.0
    for m, x in (("visual", xv), ("text", xt)):
        up, down = whitened_svd_transcript(w, x, 2)
        dev = max(dev, np.max(np.abs(res[m].w_up - up)), np.max(np.abs(res[m].w_down - down)))
    assert dev <= 1e-8, f"oracle deviation {dev:.3e}"
    worst = 0.0
    for _ in range(100):
        rows, d = (int(v) for v in rng.integers(2, 13, size=2))
        x = rng.normal(size=(d, int(rng.integers(d, 3 * d + 1)))) * rng.uniform(0.1, 5.0, size=(d, 1))
        wi = rng.normal(size=(rows, d))
        fac = whitened_factorize(wi, x, int(rng.integers(1, min(rows, d) + 1)), ridge=0.0)
        direct = float(np.sum((wi @ x - fac.reconstruct() @ x) ** 2))
        scale = max(direct, 1e-12 * float(np.sum((wi @ x) ** 2)))
        worst = max(worst, abs(fac.loss_sq_closed_form - direct) / scale)
    assert worst <= 1e-6, f"closed-form vs direct {worst:.3e}"
    return f"6x4/4x10 max deviation {dev:.2e}; closed form vs direct max rel {worst:.2e} over 100"


@criterion(4, "full-rank conversion equivalence")
def test_c04_full_rank_conversion(gqa_toy):
    cfg, layers = gqa_toy
    rng = np.random.default_rng(4)
    calib = [random_sequence(rng, cfg.d_model, 10, n_visual=4) for _ in range(6)]
    mla, _ = convert(cfg, layers, calib)
    worst = 0.0
    for _ in range(32):
        seq = random_sequence(rng, cfg.d_model, int(rng.integers(2, 17)), n_visual=int(rng.integers(0, 4)))
        a, b = forward_mla(cfg, mla, seq)[0], forward_mha_gqa(cfg, layers, seq)[0]
        worst = max(worst, float(np.max(np.linalg.norm(a - b, axis=0) / np.linalg.norm(b, axis=0))))
    assert worst <= 1e-6, f"max relative error {worst:.3e}"
    return f"32 sequences, max relative error {worst:.2e}"


@criterion(5, "RoPE invariants")
def test_c05_rope_invariants():
    rng = np.random.default_rng(5)
    n, stats = 128, {}
    for kind, d in (("vanilla_1d", 16), ("mrope", 32)):
        spec = RopeSpec(kind, 10000.0, d)
        shift = norm = 0.0
        for _ in range(n):
            q, k = rng.normal(size=(2, d))
            pq, pk = rng.integers(0, 200, size=(2, 3))
            s = rng.integers(0, 300, size=3) if kind == "mrope" else np.full(3, rng.integers(0, 300))
            if kind == "vanilla_1d":
                pq, pk = np.full(3, pq[0]), np.full(3, pk[0])
            shift = max(shift, abs(relative_score(spec, q, k, pq, pk) - relative_score(spec, q, k, pq + s, pk + s)))
            norm = max(norm, abs(np.linalg.norm(apply_rope(spec, q, pq)) - np.linalg.norm(q)) / np.linalg.norm(q))
        x = rng.normal(size=(n, d))
        pos = rng.integers(0, 1000, size=(n, 3))
        assert shift <= 1e-10, f"{kind} shift {shift:.3e}"
        assert norm <= 1e-12, f"{kind} norm {norm:.3e}"
        assert np.array_equal(apply_rope_tokens(spec, x, pos, retained=list(range(d // 2))), apply_rope_tokens(spec, x, pos)), f"{kind} partial != full"
        assert np.array_equal(apply_rope_tokens(spec, x, np.zeros((n, 3), int)), x), f"{kind} position 0 not identity"
        stats[kind] = (shift, norm)
    v_spec, m_spec = RopeSpec("vanilla_1d", 10000.0, 32), RopeSpec("mrope", 10000.0, 32)
    text = 0.0
    for _ in range(n):
        v = rng.normal(size=32)
        i = int(rng.integers(0, 10000))
        text = max(text, float(np.max(np.abs(apply_rope(m_spec, v, (i, i, i)) - apply_rope(v_spec, v, (i, i, i))))))
    assert text <= 1e-12, f"M-RoPE vs 1D on text {text:.3e}"
    shift = max(s for s, _ in stats.values())
    norm = max(m for _, m in stats.values())
    return f"{n} vectors each; shift {shift:.1e}, norm {norm:.1e}, text {text:.1e}, partial/position-0 bit-exact"


@criterion(6, "subspace selection")
def test_c06_planted_selection():
    cfg = ModelConfig(2, 4, 2, 32, 16, d_rope=2)
    rng = np.random.default_rng(0)
    pm = planted_model(cfg, rng)
    calib = planted_calibration(rng, cfg, 6, 20)
    truth = np.repeat(pm.planted, cfg.group_size, axis=1)
    oracle = ablation_oracle(cfg, pm.layers, calib).argmax(-1)
    hits = {"oracle": np.mean(oracle == truth)}
    for name, fn in (("2-norm", score_two_norm), ("MKL", score_mkl)):
        top = fn(cfg, pm.layers, calib).scores.argmax(-1)
        hits[name] = np.mean((top == truth) & (top == oracle))
    assert min(hits.values()) >= 0.9, f"top-1 hit rates {hits}"
    scaled = [w.copy() for w in pm.layers]
    for w in scaled:
        w.w_q *= 10
    for strategy in ("two_norm", "mkl"):
        a, _ = select_subspaces(cfg, pm.layers, calib, strategy)
        b, _ = select_subspaces(cfg, scaled, calib, strategy)
        assert np.array_equal(a.retained, b.retained), f"{strategy} selection changed under w_q x 10"
    return "top-1 planted hit rate " + ", ".join(f"{k} {v:.0%}" for k, v in hits.items()) + "; w_q x 10 invariant"


@criterion(7, "gradient check")
def test_c07_gradients():
    batch, gqa, mla = gradcheck_setup()
    e1 = fd_gradient_errors(gqa, batch, TrainMask.stage1())
    e2 = fd_gradient_errors(mla, batch, TrainMask.stage2())
    assert set(e1) == {"w_q", "w_k"} and set(e2) == {"w_q", "k_rope_rows", "w_down", "w_up"}
    worst = max(list(e1.values()) + list(e2.values()))
    assert worst <= 1e-4, f"stage1 {e1}, stage2 {e2}"
    return f"max relative error {worst:.1e} over {sorted(e1)} + {sorted(e2)}"


SEEDS = range(10)


@criterion(8, "two-stage trainability")
def test_c08_two_stage():
    halved, wins, detail = 0, 0, []
    for seed in SEEDS:
        task = toy_task(seed)
        sel, _ = select_subspaces(task.cfg, task.layers, task.calib, "mkl")
        two = two_stage(task, sel, 150, 150, 5.0, 0.2, seed=seed)
        one = single_stage(task, sel, 300, 0.2, seed=seed)
        batches = [TeacherBatch.from_model(task.cfg, task.layers, task.train[i : i + 4]) for i in range(0, len(task.train), 4)]
        start = float(np.mean([distill_loss(Student(task.cfg, task.layers, sel.retained), b) for b in batches]))
        stage1 = two.traces[0].final_loss
        if stage1 > start / 2:
            # 150 steps were not enough; give stage 1 its full 500-step budget
            _, tr = train_stage(Student(task.cfg, task.layers, sel.retained), batches, TrainMask.stage1(), TrainConfig(5.0, 500, seed=seed))
            stage1 = tr.final_loss
        halved += stage1 <= start / 2
        wins += two.final_loss <= one.final_loss
        detail.append(f"{two.final_loss / one.final_loss:.2f}")
    assert halved == len(SEEDS), f"stage 1 halved on {halved}/{len(SEEDS)} seeds"
    assert wins >= 7, f"two-stage <= single-stage on {wins}/10 seeds"
    return f"stage 1 halved {halved}/10; two-stage <= single-stage {wins}/10 (loss ratios {' '.join(detail)})"


@criterion(9, "int4 cache quantization")
def test_c09_quantization():
    worst_block, worst_token = 1.0, 1.0
    for seed in range(5):
        task = toy_task(seed)
        sel, _ = select_subspaces(task.cfg, task.layers, task.calib, "mkl")
        mla, _ = convert(task.cfg, task.layers, task.calib, selection=sel, check_equivalence=False)
        for seq in task.train:
            f = decode_fidelity(task.cfg, mla, seq, QuantSpec(4), 6)
            worst_block = min(worst_block, f.cosine)
            worst_token = min(worst_token, float(f.per_token.min()))
    assert worst_block >= 0.99, f"min output cosine {worst_block:.4f}"
    cfg = PRESETS["llava-next"].replace(d_latent=128)
    pair = (account(cfg, "gqa").display(), account(cfg, "gqa", bits=4).display())
    assert pair == ("-37.50%", "-84.38%"), pair
    return f"min output cosine {worst_block:.4f} over 40 decodes (per-token min {worst_token:.4f}); {pair[0]} -> {pair[1]} at int4"


def cli_session(root: Path) -> dict[str, bytes]:
    """Run every command once under ``root``; return all outputs keyed by name."""
    import contextlib
    import io

    outputs = {}
    cwd = os.getcwd()
    os.chdir(root)
    try:
        cmds = [
            ["init-model", "--seed", "3", "--qk-gain", "2", "--out", "m"],
            ["gen-calib", "--seed", "3", "--text", "10", "--images", "1x2x3", "--out", "c"],
            ["gen-calib", "--seed", "3", "--text", "10", "--mirror-modalities", "--out", "cm"],
            ["select", "--seed", "3", "--in", "m", "--calib", "c", "--d-rope", "4", "--out", "sel.csv"],
            ["convert", "--seed", "3", "--in", "m", "--calib", "c", "--d-rope", "4", "--d-latent", "6", "--out", "mla", "--report", "rep"],
            ["verify", "--seed", "3", "--in", "mla", "--ref", "m", "--calib", "c"],
            ["analyze", "--seed", "3", "--in", "m", "--calib", "c", "--rank", "4", "--out", "losses.csv"],
            ["analyze", "--seed", "3", "--in", "m", "--calib", "cm", "--rank", "4", "--out", "losses_mirror.csv"],
            ["account", "--seed", "3", "--preset", "llava-next", "--baseline", "gqa", "--bits", "4"],
        ]
        for i, argv in enumerate(cmds):
            buf = io.StringIO()
            with contextlib.redirect_stdout(buf):
                assert main(argv) == 0, argv
            outputs[f"stdout.{i}.{argv[0]}"] = buf.getvalue().encode()
    finally:
        os.chdir(cwd)
    for p in sorted(root.rglob("*")):
        if p.is_file():
            outputs[str(p.relative_to(root))] = p.read_bytes()
    return outputs


@criterion(10, "CLI determinism")
def test_c10_cli_determinism(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    a, b = cli_session(tmp_path / "a"), cli_session(tmp_path / "b")
    assert sorted(a) == sorted(b)
    differ = [k for k in a if a[k] != b[k]]
    assert not differ, f"outputs differ: {differ}"
    commands = {k.split(".")[2] for k in a if k.startswith("stdout.")}
    return f"{len(commands)} commands, {len(a)} outputs byte-identical across two runs"
