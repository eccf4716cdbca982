"""Acceptance gate: one test per release criterion, each printing a
PASS/FAIL verdict line (run with `pytest -s tests/test_acceptance.py` to
see them as they complete)."""

import hashlib
import os
import time

import numpy as np
from click.testing import CliRunner

from tapgen import synth
from tapgen.cli import main as cli_main
from tapgen.fusion import (
    FeatureMap,
    FusionConfig,
    agent_fusion,
    attention_encoder,
    random_weights,
    roi_align,
)
from tapgen.inference import form_proposals, infer, soft_nms
from tapgen.metrics import evaluate
from tapgen.supervision import (
    LossConfig,
    ScoreGrids,
    gen_duration_labels,
    gen_labels,
    l2_loss,
    l2_loss_grad,
    weighted_binary_loss,
    weighted_binary_loss_grad,
)
from tapgen.timeline import build_grid

from test_fusion import brute_force_roi_align
from test_inference import mk, reference_soft_nms
from test_supervision import brute_force_duration_labels, make_grid, random_gts


def verdict(num: int, name: str, ok: bool) -> None:
    print(f"criterion {num} ({name}): {'PASS' if ok else 'FAIL'}")
    assert ok, f"criterion {num} ({name}) failed"


def test_criterion_1_oracle_end_to_end():
    t0 = time.perf_counter()
    videos = synth.synth_corpus(n_videos=60, max_actions=1, seed=1234, t_min=8, t_max=32)
    props = {}
    gts = {}
    for sv in videos:
        grid = build_grid(sv.manifest.video)
        props[sv.manifest.video.video_id] = infer(sv.grids, grid)
        gts[sv.manifest.video.video_id] = list(sv.manifest.annotations)
    assert all(len(g) == 1 for g in gts.values())
    result = evaluate(props, gts)
    elapsed = time.perf_counter() - t0
    ok = (
        len(videos) >= 50
        and all(abs(ar - 1.0) <= 1e-9 for ar in result.ar_at_an.values())
        and abs(result.auc - 100.0) <= 1e-9
        and elapsed < 10.0
    )
    verdict(1, f"oracle end-to-end, {elapsed:.2f}s", ok)


def test_criterion_2_soft_nms_oracle():
    rng = np.random.default_rng(202)
    ok = True
    for _ in range(200):
        props = []
        for _ in range(int(rng.integers(0, 21))):
            a = int(rng.integers(0, 12))
            b = a + int(rng.integers(1, 8))
            props.append(mk(a, b, float(rng.random())))
        sigma = float(rng.choice([0.2, 0.4, 0.8]))
        floor = float(rng.choice([0.0, 0.001, 0.05]))
        top_k = int(rng.integers(1, 25))
        got = soft_nms(props, sigma=sigma, score_floor=floor, top_k=top_k)
        want = reference_soft_nms(props, sigma, floor, top_k)
        ok = ok and len(got) == len(want) and all(
            (g.start_sec, g.end_sec, g.score) == (w[0], w[1], w[2])
            for g, w in zip(got, want)
        )
    verdict(2, "soft-nms reference equivalence", ok)


def test_criterion_3_duration_label_oracle():
    rng = np.random.default_rng(303)
    ok = True
    for _ in range(500):
        T = int(rng.integers(2, 17))
        grid = make_grid(T)
        D = T if rng.random() < 0.5 else max(1, T // 2)
        gts = random_gts(rng, grid.T * grid.snippet_seconds, int(rng.integers(1, 4)))
        got = gen_duration_labels(grid, gts, D)
        want = brute_force_duration_labels(grid, gts, D)
        ok = ok and np.array_equal(got, want)
    verdict(3, "duration labels vs exhaustive scan", ok)


def test_criterion_4_gradient_checks():
    rng = np.random.default_rng(404)
    h = 1e-6
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(3, 30))
        p = rng.uniform(0.05, 0.95, size=n)
        labels = (rng.random(n) < 0.5).astype(float)
        if labels.sum() in (0, n):
            labels[0], labels[-1] = 1.0, 0.0
        for loss, grad_fn in (
            (weighted_binary_loss, weighted_binary_loss_grad),
            (l2_loss, l2_loss_grad),
        ):
            grad = grad_fn(p, labels)
            for i in range(n):
                hi, lo = p.copy(), p.copy()
                hi[i] += h
                lo[i] -= h
                fd = (loss(hi, labels) - loss(lo, labels)) / (2 * h)
                denom = max(abs(fd), abs(grad[i]), 1e-8)
                worst = max(worst, abs(fd - grad[i]) / denom)
    verdict(4, f"finite-difference gradients, max rel err {worst:.2e}", worst <= 1e-5)


def test_criterion_5_roi_align_oracle():
    rng = np.random.default_rng(505)
    worst = 0.0
    for _ in range(200):
        C = int(rng.integers(1, 5))
        H, W = int(rng.integers(2, 9)), int(rng.integers(2, 9))
        values = rng.standard_normal((C, H, W))
        x1, y1 = rng.uniform(0.0, 0.6, size=2)
        box = (float(x1), float(y1),
               float(min(x1 + rng.uniform(0.05, 0.4), 1.0)),
               float(min(y1 + rng.uniform(0.05, 0.4), 1.0)))
        out_grid = (int(rng.integers(1, 5)), int(rng.integers(1, 5)))
        samples = (int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        got = roi_align(FeatureMap(values=values), box, out_grid, samples)
        want = brute_force_roi_align(values, box, out_grid, samples)
        worst = max(worst, float(np.max(np.abs(got - want))))
    verdict(5, f"roi-align vs brute force, max abs err {worst:.2e}", worst <= 1e-9)


def test_criterion_6_permutation_invariance():
    rng = np.random.default_rng(606)
    cfg = FusionConfig(channels=3, d_model=8, num_heads=2, num_layers=1, ff_dim=16)
    w = random_weights(cfg, seed=66)
    ok = True
    for _ in range(20):
        n = int(rng.integers(1, 9))
        patches = [rng.standard_normal((3, 4, 4)) for _ in range(n)]
        base = agent_fusion(patches, w)
        perm = rng.permutation(n)
        out = agent_fusion([patches[i] for i in perm], w)
        ok = ok and float(np.max(np.abs(out - base))) <= 1e-12
    # encoder equivariance: permuting input tokens permutes output rows
    tokens = rng.standard_normal((6, 8))
    base = attention_encoder(tokens, w.agent_encoder)
    for _ in range(5):
        perm = rng.permutation(6)
        out = attention_encoder(tokens[perm], w.agent_encoder)
        ok = ok and float(np.max(np.abs(out - base[perm]))) <= 1e-12
    verdict(6, "agent permutation invariance / encoder equivariance", ok)


def test_criterion_7_score_spot_value_and_monotonicity():
    T, D = 10, 10
    ps, pe = np.zeros(T), np.zeros(T)
    cc, cr = np.zeros((D, T)), np.zeros((D, T))
    ps[2], pe[7] = 0.8, 0.9
    cc[4, 2], cr[4, 2] = 0.25, 0.64
    grids = ScoreGrids(start_probs=ps, end_probs=pe, conf_cls=cc, conf_reg=cr)
    grid = make_grid(T)
    score = form_proposals([2], [7], grids, grid)[0].score
    # 0.8 * 0.9 * sqrt(0.25 * 0.64) = 0.288; f64 rounding of the products
    # lands one ulp away from the literal, so compare at the ulp scale
    ok = abs(score - 0.288) <= 1e-15
    rng = np.random.default_rng(707)
    for _ in range(1000):
        vals = [0.8, 0.9, 0.25, 0.64]
        k = int(rng.integers(0, 4))
        bumped = list(vals)
        bumped[k] = min(1.0, vals[k] + float(rng.uniform(0.001, 0.3)))
        ps2, pe2 = ps.copy(), pe.copy()
        cc2, cr2 = cc.copy(), cr.copy()
        ps2[2], pe2[7] = bumped[0], bumped[1]
        cc2[4, 2], cr2[4, 2] = bumped[2], bumped[3]
        g2 = ScoreGrids(start_probs=ps2, end_probs=pe2, conf_cls=cc2, conf_reg=cr2)
        score2 = form_proposals([2], [7], g2, grid)[0].score
        ok = ok and score2 > score
    verdict(7, "score spot value and factor monotonicity", ok)


def test_criterion_8_constants_fidelity():
    cfg = LossConfig()
    ok = cfg.lambda_reg == 10.0 and cfg.lambda_1 == 1.0 and cfg.lambda_2 == 1.0
    for T in (9, 16, 31):
        grid = make_grid(T)
        gts = random_gts(np.random.default_rng(T), grid.T * grid.snippet_seconds, 2)
        for policy, expect in (("full", T), ("half", max(1, T // 2))):
            D = grid.T if policy == "full" else max(1, grid.T // 2)
            labels = gen_labels(grid, gts, D)
            ok = ok and labels.durations.shape[0] == expect and expect in (T, T // 2, max(1, T // 2))
    verdict(8, "default constants and duration-range policy", ok)


def _digests(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in files:
            if name == "run_summary.json":
                continue
            path = os.path.join(dirpath, name)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, root)] = hashlib.sha256(fh.read()).hexdigest()
    return out


def _full_pipeline(root, workers=1):
    runner = CliRunner()
    base = ["--seed", "77"] + ([] if workers == 1 else ["--workers", str(workers)])
    steps = [
        base + ["synth", "--n-videos", "6", "--max-actions", "1", "--out", f"{root}/corpus"],
        base + ["featurize", "--manifests", f"{root}/corpus/manifests",
                "--d-model", "16", "--heads", "2", "--out", f"{root}/features"],
        base + ["infer", "--manifests", f"{root}/corpus/manifests",
                "--grids", f"{root}/corpus/grids", "--out", f"{root}/proposals"],
        base + ["eval", "--manifests", f"{root}/corpus/manifests",
                "--proposals", f"{root}/proposals", "--out", f"{root}/eval"],
    ]
    for args in steps:
        r = runner.invoke(cli_main, args, catch_exceptions=False)
        assert r.exit_code == 0, r.output
    return _digests(root)


def test_criterion_9_determinism(tmp_path):
    a = _full_pipeline(tmp_path / "a")
    b = _full_pipeline(tmp_path / "b")
    c = _full_pipeline(tmp_path / "c", workers=3)
    ok = bool(a) and a == b == c
    verdict(9, "byte-identical reruns, parallel equals serial", ok)
