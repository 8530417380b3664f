"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The desk-scale pipeline (criteria 5 to 7) drives the real CLI end to end and
is run twice into separate directories so the second run can be compared
byte for byte with the first.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from anomaly_forge import learn, mmf, numerics as nx, scoring, textures, tge
from anomaly_forge.cli import main
from anomaly_forge.encoders import EncoderConfig, encode_image, unit_rows
from anomaly_forge.evaluation import (
    ANSWER_TEMPLATES,
    CELL_LABELS,
    NORMAL_ANSWER,
    auroc,
    position_cells,
    render_answer,
    render_answer_with,
)
from anomaly_forge.synth import poisson_normal_clone
from model_cases import smooth_instances
from op_cases import random_op

GRAD_TOL = 1e-4
SEED = 7
SHOTS = (1, 2, 4)
BANK_SEEDS = range(5)


# --- criterion 1 -------------------------------------------------------------


def _loss_instances(rng):
    p = rng.uniform(0.05, 1.0, (4, 3))
    t = np.eye(3)[rng.integers(0, 3, 4)]
    yield nx.record_custom("ce", lambda q: learn.cross_entropy(q, t), lambda q, g: (learn.cross_entropy_vjp(q, t, g),), p)
    m = rng.uniform(0.05, 0.95, (4, 4))
    gt = (rng.uniform(size=(4, 4)) > 0.6).astype(float)
    cfg = learn.FocalConfig()
    yield nx.record_custom("focal", lambda x: learn.focal_loss(x, gt, cfg), lambda x, u: (learn.focal_loss_vjp(x, gt, cfg, u),), m)
    yield nx.record_custom("dice", lambda x: learn.dice_loss(x, gt), lambda x, u: (learn.dice_loss_vjp(x, gt, u),), m)


@pytest.mark.slow
def test_criterion_1_gradient_suite(criterion):
    t0 = time.perf_counter()
    worst = {}
    for name in sorted(nx.OPS):
        worst[name] = max(nx.vjp_check(random_op(name, np.random.default_rng([11, i])), i) for i in range(100))
    for i in range(100):
        for op in _loss_instances(np.random.default_rng([12, i])):
            worst[op.name] = max(worst.get(op.name, 0.0), nx.vjp_check(op, i))
    model_runs = 0
    for stage, count in ((1, 34), (2, 33), (3, 33)):
        key = f"model stage {stage}"
        worst[key] = 0.0
        for seed, params, batch, ctx, plan in smooth_instances(stage, count, start=1000 * stage):
            _, grads = learn.loss_and_grads(params, batch, ctx, plan)
            keys = sorted(grads)

            def loss():
                return learn.total_loss(*learn.loss_and_grads(params, batch, ctx, plan)[0], plan)

            err = nx.directional_check(loss, [params[k] for k in keys], [grads[k] for k in keys], seed)
            worst[key] = max(worst[key], err)
            model_runs += 1
    elapsed = time.perf_counter() - t0
    top = max(worst.values())
    ok = top <= GRAD_TOL and elapsed <= 120 and model_runs >= 100
    criterion(1, ok, f"worst rel err {top:.2e} over {len(worst)} checks, {model_runs} model instances, {elapsed:.1f}s")
    assert ok, worst


# --- criterion 2 -------------------------------------------------------------


def pairwise_auroc(s, y):
    pos, neg = s[y == 1], s[y == 0]
    gt = (pos[:, None] > neg[None, :]).sum()
    eq = (pos[:, None] == neg[None, :]).sum()
    return (gt + 0.5 * eq) / (len(pos) * len(neg))


def test_criterion_2_auroc_oracle(criterion):
    worst, mono = 0.0, 0.0
    for i in range(200):
        rng = np.random.default_rng([21, i])
        n = int(rng.integers(2, 101))
        s = rng.integers(0, 3, n).astype(float) if i % 2 else rng.standard_normal(n)
        y = rng.integers(0, 2, n)
        y[:2] = (0, 1)
        a = auroc(s, y)
        worst = max(worst, abs(a - pairwise_auroc(s, y)))
        mono = max(mono, abs(auroc(np.tanh(2 * s) + 5, y) - a), abs(auroc(np.exp(s), y) - a))
    ok = worst <= 1e-12 and mono == 0.0
    criterion(2, ok, f"max |fast - pairwise| {worst:.1e} on 200 instances, monotone drift {mono:.1e}")
    assert ok


# --- criterion 3 -------------------------------------------------------------


def stencil_residual(result, src, top, left):
    lap = lambda a: 4 * a[1:-1, 1:-1] - a[:-2, 1:-1] - a[2:, 1:-1] - a[1:-1, :-2] - a[1:-1, 2:]
    window = result[top : top + src.shape[0], left : left + src.shape[1]]
    return float(np.max(np.abs(lap(window) - lap(src))))


def test_criterion_3_poisson_cloning(criterion):
    res, exterior_ok, ident = 0.0, True, 0.0
    for i in range(50):
        rng = np.random.default_rng([31, i])
        dst = textures.generate(int(rng.integers(1 << 30)))[:, :, 0] if i % 2 else rng.uniform(size=(64, 64))
        src = rng.uniform(size=(16, 16))
        cr, cc = (int(v) for v in rng.integers(8, 57, 2))
        top, left = cr - 8, cc - 8
        free = np.zeros((64, 64), bool)
        free[top + 1 : top + 15, left + 1 : left + 15] = True
        raw = poisson_normal_clone(src, dst, np.ones((16, 16)), (cr, cc), clamp=False)
        res = max(res, stencil_residual(raw, src, top, left))
        clamped = poisson_normal_clone(src, dst, np.ones((16, 16)), (cr, cc))
        exterior_ok &= np.array_equal(raw[~free], dst[~free]) and np.array_equal(clamped[~free], dst[~free])
        patch = dst[top : top + 16, left : left + 16]
        ident = max(ident, float(np.max(np.abs(poisson_normal_clone(patch, dst, np.ones((16, 16)), (cr, cc)) - dst))))
    ok = res <= 1e-6 and exterior_ok and ident <= 1e-9
    criterion(3, ok, f"residual {res:.1e}, exterior bitwise {exterior_ok}, identity error {ident:.1e} on 50 cases")
    assert ok


# --- criterion 4 -------------------------------------------------------------


def test_criterion_4_structural_invariants(criterion):
    checks = {}
    cfg = EncoderConfig(seed=SEED)
    dims = learn.ModelDims()
    checks["C_emb = 4 C3"] = dims.c_emb == 4 * dims.c3 == 64 and cfg.c3 == dims.c3
    simplex = softmax_ok = decode_ok = fused_ok = perm_ok = fewshot_ok = True
    for i in range(20):
        rng = np.random.default_rng([41, i])
        p = tge.init_tge(rng, 6, 5, 16, n_experts=int(rng.integers(2, 5)))
        w = tge.gate(rng.standard_normal((1, 6)), rng.standard_normal((tge.n_experts(p), 5)) * 3, p)
        simplex &= bool(np.all(w >= 0) and abs(w.sum() - 1) <= 1e-12)
        x = rng.standard_normal((5, 7)) * 10
        y = nx.softmax_rows(x)
        softmax_ok &= bool(np.all(np.abs(y.sum(1) - 1) <= 1e-12) and np.allclose(y, nx.softmax_rows(x + 3.7), atol=1e-12, rtol=0))

        emb = unit_rows(rng.standard_normal((7, 6)))
        mask = np.array([False] * 3 + [True] * 4)
        levels = [unit_rows(rng.standard_normal((s, s, 5))) for s in (8, 4, 4, 2)]
        params = scoring.init_decoder(rng, 5, 6, scale=3.0)
        fused, lmaps, _ = scoring.decoder_forward([l[None] for l in levels], emb, mask, params, (16, 16))
        decode_ok &= bool(np.all(fused > 0) and np.all(fused < 1))
        mean = sum(nx.bilinear_upsample(m[0], 16, 16) for m in lmaps) / 4
        fused_ok &= bool(np.max(np.abs(fused[0] - mean)) <= 1e-12)
        order = np.concatenate([rng.permutation(3), 3 + rng.permutation(4)])
        pf, _, _ = scoring.decoder_forward([l[None] for l in levels], emb[order], mask[order], params, (16, 16))
        perm_ok &= bool(np.max(np.abs(pf - fused)) <= 1e-12)

        imgs = [textures.generate(int(s)) for s in rng.integers(1 << 30, size=3)]
        bank = scoring.build_memory_bank(imgs[:2], cfg, 2, seed=i)
        fm = scoring.fewshot_map(encode_image(imgs[2], cfg)[1], bank, cfg.image_size).fused
        fewshot_ok &= bool(np.all(fm >= 0) and np.all(fm <= 1))
    blocks = [np.random.default_rng(b).standard_normal((4, 16)) for b in range(4)]
    checks["fuse/split identity"] = all(np.array_equal(a, b) for a, b in zip(mmf.split(mmf.fuse(blocks)), blocks))
    checks.update(
        {
            "gate simplex": simplex,
            "softmax rows": softmax_ok,
            "decoder scores in (0,1)": decode_ok,
            "few-shot scores in [0,1]": fewshot_ok,
            "fused = mean of levels": fused_ok,
            "prompt permutation": perm_ok,
        }
    )
    failed = [k for k, v in checks.items() if not v]
    ok = not failed
    criterion(4, ok, f"{len(checks) - len(failed)}/{len(checks)} invariants hold" + (f"; failed: {failed}" if failed else ""))
    assert ok


# --- criteria 5 to 7: desk-scale pipeline ------------------------------------


def cli(out, *args):
    code = main([*args, "--seed", str(SEED), "--out", str(out)])
    if code != 0:
        raise RuntimeError(f"anomaly-forge {' '.join(args)} exited with {code}")


def pipeline(out: Path) -> dict:
    t0 = time.perf_counter()
    cli(out, "forge")
    cli(out, "train")
    cli(out, "eval", "--heatmaps")
    elapsed = time.perf_counter() - t0
    fewshot = {}
    for k in SHOTS:
        for s in BANK_SEEDS:
            bank = out / "checkpoints" / f"bank_k{k}_s{s}.json"
            cli(out, "bank", "--k", str(k), "--bank-seed", str(s), "--output", str(bank))
            stem = f"fewshot_k{k}_s{s}"
            cli(out, "eval", "--bank", str(bank), "--stem", stem, "--heatmaps")
            fewshot[k, s] = json.loads((out / "reports" / f"{stem}.json").read_text())
    report = json.loads((out / "reports" / "metrics.json").read_text())
    return {"elapsed": elapsed, "report": report, "fewshot": fewshot}


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    a, b = tmp_path_factory.mktemp("desk_a"), tmp_path_factory.mktemp("desk_b")
    return (a, pipeline(a)), (b, pipeline(b))


@pytest.mark.slow
def test_criterion_5_end_to_end(desk_runs, criterion):
    _, run = desk_runs[0]
    r = run["report"]
    ok = (
        r["n_images"] == 100
        and r["i_auroc"] >= 0.85
        and r["p_auroc"] >= 0.80
        and r["accuracy"] >= 0.80
        and run["elapsed"] <= 600
    )
    criterion(
        5,
        ok,
        f"I-AUROC {r['i_auroc']:.4f}, P-AUROC {r['p_auroc']:.4f}, accuracy {r['accuracy']:.4f} "
        f"on {r['n_images']} held-out images, {run['elapsed']:.1f}s",
    )
    assert ok


@pytest.mark.slow
def test_criterion_6_few_shot(desk_runs, criterion):
    _, run = desk_runs[0]
    fs = run["fewshot"]
    p_min = {k: min(fs[k, s]["p_auroc"] for s in BANK_SEEDS) for k in SHOTS}
    i_mean = {k: float(np.mean([fs[k, s]["i_auroc"] for s in BANK_SEEDS])) for k in SHOTS}
    ok = all(v >= 0.70 for v in p_min.values()) and i_mean[4] >= i_mean[1]
    detail = ", ".join(f"k={k}: min P {p_min[k]:.4f} mean I {i_mean[k]:.4f}" for k in SHOTS)
    criterion(6, ok, detail)
    assert ok


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.slow
def test_criterion_7_determinism(desk_runs, criterion):
    (a, _), (b, _) = desk_runs
    ta, tb = tree_bytes(a), tree_bytes(b)
    differing = sorted(k for k in ta.keys() | tb.keys() if ta.get(k) != tb.get(k))
    kinds = {
        "checkpoints": sum(1 for k in ta if k.startswith("checkpoints/")),
        "reports": sum(1 for k in ta if k.startswith("reports/") and not k.endswith(".pgm")),
        "heatmaps": sum(1 for k in ta if k.endswith(".pgm") and k.startswith("reports/")),
    }
    ok = not differing and all(kinds.values())
    criterion(7, ok, f"{len(ta)} files compared ({kinds}), {len(differing)} differ")
    assert ok, differing[:10]


# --- criterion 8 -------------------------------------------------------------


def _mask(shape, *rects):
    m = np.zeros(shape)
    for r0, r1, c0, c1 in rects:
        m[r0:r1, c0:c1] = 1
    return m


def _disk(shape, centre, radius):
    yy, xx = np.mgrid[: shape[0], : shape[1]]
    return (((yy - centre[0]) ** 2 + (xx - centre[1]) ** 2) <= radius**2).astype(float)


# 90x90 masks make every cell exactly 30x30; cell sets are worked out by hand
# from the 10% area rule with the centroid fallback.
POSITION_SUITE = [
    ("top-left corner", _mask((90, 90), (0, 10, 0, 10)), [0]),
    ("top-right corner", _mask((90, 90), (0, 10, 80, 90)), [2]),
    ("bottom-left corner", _mask((90, 90), (80, 90, 0, 10)), [6]),
    ("bottom-right corner", _mask((90, 90), (80, 90, 80, 90)), [8]),
    ("full image", np.ones((90, 90)), list(range(9))),
    ("centre block", _mask((90, 90), (40, 50, 40, 50)), [4]),
    ("straddle top-left/top", _mask((90, 90), (5, 15, 25, 35)), [0, 1]),
    ("straddle left/bottom-left", _mask((90, 90), (55, 65, 5, 15)), [3, 6]),
    ("four-cell straddle", _mask((90, 90), (25, 35, 25, 35)), [0, 1, 3, 4]),
    ("straddle centre/right", _mask((90, 90), (40, 50, 55, 65)), [4, 5]),
    ("18% spill counts", _mask((90, 90), (40, 50, 21, 32)), [3, 4]),
    ("5% spill ignored", _mask((90, 90), (40, 50, 29, 50)), [4]),
    ("top strip", _mask((90, 90), (0, 10, 0, 90)), [0, 1, 2]),
    ("left strip", _mask((90, 90), (0, 90, 0, 10)), [0, 3, 6]),
    ("opposite corners", _mask((90, 90), (0, 10, 0, 10), (80, 90, 80, 90)), [0, 8]),
    ("single centre pixel", _mask((90, 90), (45, 46, 45, 46)), [4]),
    ("single corner pixel", _mask((90, 90), (89, 90, 0, 1)), [6]),
    ("64x64 full image", np.ones((64, 64)), list(range(9))),
    ("224 blob at (30,30)", _disk((224, 224), (30, 30), 12), [0]),
    ("bottom strip plus stray pixel", _mask((90, 90), (85, 90, 0, 90), (0, 1, 0, 1)), [6, 7, 8]),
]


def test_criterion_8_position_grid(criterion):
    wrong = []
    for name, mask, expected in POSITION_SUITE:
        cells = [c.id for c in position_cells(mask)]
        answer = render_answer_with(0, cells)
        expected_answer = "Yes, the anomaly is visible at " + ", ".join(CELL_LABELS[i] for i in expected) + "."
        family = all(
            render_answer("abnormal", cells, template_seed=s)
            in {t.format(position=", ".join(CELL_LABELS[i] for i in expected)) for t in ANSWER_TEMPLATES}
            for s in range(10)
        )
        if cells != expected or answer != expected_answer or not family:
            wrong.append(name)
    normal_ok = render_answer("normal", []) == "No, there are no abnormalities in the image." == NORMAL_ANSWER
    ok = not wrong and normal_ok and len(POSITION_SUITE) == 20
    criterion(8, ok, f"{len(POSITION_SUITE) - len(wrong)}/{len(POSITION_SUITE)} masks exact, normal answer {normal_ok}")
    assert ok, wrong
