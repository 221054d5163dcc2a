"""End-to-end acceptance criteria, each checked at its stated tolerance and time budget.

Every criterion prints one PASS/FAIL line; the lines are repeated in the
terminal summary. Criterion 9 needs real footage and detector dumps and
runs only when ``KPREFINE_REAL_DATA`` points at them.
"""
import math
import os
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

import planted
from conftest import ACCEPTANCE_LINES
from oracles import brute_frame_ap, brute_k_nearest, brute_pck, brute_torso, brute_weighted_mean
from kprefine import abg
from kprefine.cli import main
from kprefine.metrics import (
    CATEGORIES,
    MetricConfig,
    PosePrediction,
    average_precision,
    pck,
    predictions_from_record,
    predictions_from_refined,
)
from kprefine.refine import FusionConfig, k_nearest, refine_sequence, weighted_mean
from kprefine.rotation import RotationSpec, back_rotate_point, forward_rotate_point
from kprefine.schema import (
    DEFAULT_SCHEME,
    AnnotatedFrame,
    AnnotatedSequence,
    FrameCategory,
    GroundTruthKeypoint,
    KeypointCandidate,
    load_annotations,
    load_detections,
)
from kprefine.search import GridSpec, grid_search
from kprefine.synth import NoiseModel, Scenario

pytestmark = pytest.mark.acceptance


@contextmanager
def criterion(number, title, budget_s):
    info = {}
    t0 = time.perf_counter()
    try:
        yield info
        elapsed = time.perf_counter() - t0
        assert elapsed < budget_s, f"took {elapsed:.2f}s, budget {budget_s}s"
    except BaseException as exc:
        line = f"FAIL criterion {number}: {title} ({exc})"
        print(line)
        ACCEPTANCE_LINES.append(line)
        raise
    elapsed = time.perf_counter() - t0
    detail = ", ".join(f"{k}={v}" for k, v in info.items())
    line = f"PASS criterion {number}: {title} [{elapsed:.2f}s{', ' + detail if detail else ''}]"
    print(line)
    ACCEPTANCE_LINES.append(line)


def test_1_rotation_round_trip():
    rng = np.random.default_rng(1)
    n = 10_000
    sizes = rng.integers(1, 4097, (n, 2))
    angles = rng.uniform(0, 360, n)
    uv = rng.random((n, 2))
    specs = [RotationSpec.expanded((int(w), int(h)), float(a)) for (w, h), a in zip(sizes, angles)]
    with criterion(1, "rotation round trip within 1e-6 px on 10,000 triples", 1.0) as info:
        worst = 0.0
        for spec, (u, v), (w, h) in zip(specs, uv, sizes):
            p = (u * w, v * h)
            q = back_rotate_point(forward_rotate_point(p, spec), spec)
            worst = max(worst, math.hypot(q[0] - p[0], q[1] - p[1]))
        info["max_error_px"] = f"{worst:.2e}"
        assert worst <= 1e-6


def test_2_filter_exactness():
    p = abg.FilterParams(1.0, 1.0, 0.0)
    # integer and dyadic trajectories, so every prediction is exact in floating point
    lines = [(3, 0, 0, 0), (2.5, -1.25, 100, 40), (-7, 4, 13.5, 900), (0.125, 0.375, 1.0, 2.0)]
    with criterion(2, "constant-velocity residuals exactly 0 after first update, acceleration stays 0", 1.0) as info:
        nonzero = 0
        for vx, vy, x0, y0 in lines:
            s = abg.init_state((x0, y0))
            for n in range(1, 200):
                z = (x0 + vx * n, y0 + vy * n)
                r = abg.residual(s, p, z)
                s = abg.update(s, p, z)
                assert s.acc == (0.0, 0.0)
                if n >= 2 and r != (0.0, 0.0):
                    nonzero += 1
        info["nonzero_residuals"] = nonzero
        assert nonzero == 0


def test_3_fusion_oracle_equivalence():
    rng = np.random.default_rng(3)
    cases = []
    for _ in range(1000):
        size = int(rng.integers(1, 37))
        # half the pools sit on an integer grid so distance ties are common
        if rng.random() < 0.5:
            xy = rng.integers(-10, 11, (size, 2)).astype(float)
        else:
            xy = rng.normal(0, 50, (size, 2))
        conf = rng.random(size)
        conf[rng.random(size) < 0.1] = 0.0
        angle_idx = rng.permutation(36)[:size]
        pool = [KeypointCandidate(float(x), float(y), float(c), int(a)) for (x, y), c, a in zip(xy, conf, angle_idx)]
        p_e = (float(rng.integers(-10, 11)), float(rng.integers(-10, 11)))
        cases.append((pool, p_e, int(rng.integers(1, 37))))
    with criterion(3, "k_nearest + weighted_mean bit-equal to exhaustive reference on 1,000 pools", 1.0) as info:
        mismatches = 0
        for pool, p_e, k in cases:
            got = k_nearest(pool, p_e, k)
            want = brute_k_nearest(pool, p_e, k)
            if got != want or weighted_mean(got) != brute_weighted_mean(want):
                mismatches += 1
        info["mismatches"] = mismatches
        assert mismatches == 0


def _random_instance(rng):
    n = int(rng.integers(1, 21))
    frames, preds, rows, ap_rows = [], {}, [], []
    cats = [FrameCategory.REGULAR, FrameCategory.OUT_OF_BALANCE, FrameCategory.FALL]
    keys = {FrameCategory.REGULAR: "reg", FrameCategory.OUT_OF_BALANCE: "oob", FrameCategory.FALL: "fall"}
    for i in range(n):
        cat = cats[int(rng.integers(3))]
        gt = rng.uniform(0, 400, (24, 2))
        vis = rng.random(24) > 0.25
        if rng.random() < 0.1:
            vis[:] = False
        frames.append(AnnotatedFrame(i, cat, tuple(GroundTruthKeypoint(float(x), float(y), bool(v)) for (x, y), v in zip(gt, vis))))
        if rng.random() < 0.15:
            rows.append((keys[cat], [(x, y, v) for (x, y), v in zip(gt, vis)], [None] * 24))
            ap_rows.append((keys[cat], [(x, y, v) for (x, y), v in zip(gt, vis)], None, [0.0] * 24))
            continue
        pred = gt + rng.normal(0, rng.choice([5.0, 20.0, 80.0]), (24, 2))
        present = rng.random(24) > 0.1
        conf = np.where(present, np.round(rng.random(24), 1), 0.0)
        preds[i] = PosePrediction.from_triples(np.column_stack([pred, conf]), present)
        pts = [tuple(p) if m else None for p, m in zip(pred, present)]
        rows.append((keys[cat], [(x, y, v) for (x, y), v in zip(gt, vis)], pts))
        ap_rows.append((keys[cat], [(x, y, v) for (x, y), v in zip(gt, vis)], pts, list(conf)))
    return AnnotatedSequence("r", (400, 400), tuple(frames), DEFAULT_SCHEME), preds, rows, ap_rows


def _rel_ok(a, b, tol=1e-12):
    if a is None or b is None:
        return a is None and b is None
    return abs(a - b) <= tol * max(1.0, abs(b))


def test_4_metric_oracle_equivalence():
    rng = np.random.default_rng(4)
    cfg = MetricConfig()
    instances = []
    while len(instances) < 200:
        seq, preds, rows, ap_rows = _random_instance(rng)
        ends = cfg.torso_endpoints
        if not any(f.keypoints[ends[0]].visible and f.keypoints[ends[1]].visible
                   and (f.keypoints[ends[0]].x, f.keypoints[ends[0]].y) != (f.keypoints[ends[1]].x, f.keypoints[ends[1]].y)
                   for f in seq.frames):
            continue
        instances.append((seq, preds, rows, ap_rows))
    with criterion(4, "PCK and AP equal counting and PR-enumeration references on 200 instances (rel 1e-12)", 5.0) as info:
        checked = 0
        for seq, preds, rows, ap_rows in instances:
            got_pck = pck([(preds, seq)], cfg).value
            got_ap = average_precision([(preds, seq)], cfg).value
            counts = brute_pck(rows, cfg.pck_fraction, cfg.indices, cfg.torso_endpoints)
            torso = brute_torso([r[1] for r in rows], cfg.torso_endpoints)
            for cat in CATEGORIES:
                c, e = counts[cat]
                assert _rel_ok(got_pck[cat], c / e if e else None), (cat, got_pck[cat], c, e)
                sel = [i for i, r in enumerate(ap_rows) if cat == "all" or r[0] == cat]
                want_ap = brute_frame_ap([ap_rows[i][1:] for i in sel], cfg.indices, cfg.ap_thresholds, 0.1,
                                         lambda j, sel=sel: torso[sel[j]])
                assert _rel_ok(got_ap[cat], want_ap), (cat, got_ap[cat], want_ap)
                checked += 2
        info["comparisons"] = checked


@pytest.fixture(scope="module")
def rescue_runs():
    """Standard fall scenario over 20 seeds: baseline angle-0 PCK and refined PCK per category."""
    # a detector that still finds half the inverted poses and sometimes reads them mirrored,
    # so the angle-0 baseline is degraded rather than empty on fall frames
    noise = NoiseModel(sigma=6.0, p_inverted=0.5, upright_halfwidth=60.0, falloff=90.0,
                       outlier_prob=0.08, mirror_prob=0.5)
    scenario = Scenario(noise=noise)
    t0 = time.perf_counter()
    runs = []
    for seed in range(20):
        gt, dets = scenario.run(seed)
        base = pck([(predictions_from_record(dets.records[0]), gt)]).value
        refined = pck([(predictions_from_refined(refine_sequence(dets)), gt)]).value
        runs.append((seed, base, refined))
    return runs, time.perf_counter() - t0


def test_5_rotation_rescue(rescue_runs):
    runs, elapsed = rescue_runs
    with criterion(5, "refined fall PCK@0.2 beats angle-0 baseline by >= 0.10 on all 20 seeds", 30.0 - elapsed) as info:
        gains = [r["fall"] - b["fall"] for _, b, r in runs]
        info["min_gain"] = f"{min(gains):.3f}"
        info["mean_fall"] = f"{np.mean([b['fall'] for _, b, _ in runs]):.3f}->{np.mean([r['fall'] for _, _, r in runs]):.3f}"
        info["sim_s"] = f"{elapsed:.1f}"
        assert all(g >= 0.10 for g in gains), gains


def test_6_regular_non_degradation(rescue_runs):
    runs, _ = rescue_runs
    with criterion(6, "refined regular PCK@0.2 not below baseline by more than 0.02 on all 20 seeds", 1.0) as info:
        diffs = [r["reg"] - b["reg"] for _, b, r in runs]
        info["min_diff"] = f"{min(diffs):+.3f}"
        info["max_diff"] = f"{max(diffs):+.3f}"
        assert all(d >= -0.02 for d in diffs), diffs


def test_7_grid_search_recovery():
    with criterion(7, "grid search recovers the planted (k, alpha, beta, gamma) on the reduced grid", 120.0) as info:
        gt, dets, _ = planted.build()
        grid = GridSpec(planted.K_VALUES, planted.GAINS, planted.GAINS, planted.GAINS)
        result = grid_search([dets], [gt], grid)
        b = result.best
        got = (b.k, b.params.alpha, b.params.beta, b.params.gamma)
        info["best"] = got
        info["points"] = len(result.table)
        assert got == planted.PLANTED
        assert result.best_score == max(row[4] for row in result.table)
        runner_up = sorted((row[4] for row in result.table), reverse=True)[1]
        info["margin"] = f"{result.best_score - runner_up:.3f}"
        assert runner_up < result.best_score


def _tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_8_cli_determinism(tmp_path, monkeypatch):
    monkeypatch.delenv("KPREFINE_OUTPUT_DIR", raising=False)

    def pipeline(jobs: int, out: Path) -> dict:
        j = ["--jobs", str(jobs)]
        data = out / "data"
        assert main(["simulate", "--frames", "30", "--seed", "5", "--out", str(data), *j]) == 0
        assert main(["refine", "--detections", str(data / "detections"), "--annotations", str(data / "annotations.json"),
                     "--out", str(out / "refined.json"), *j]) == 0
        assert main(["evaluate", "--predictions", str(out / "refined.json"), "--annotations", str(data / "annotations.json"),
                     "--label", "pp", "--out", str(out / "eval"), *j]) == 0
        assert main(["gridsearch", "--data", str(data), "--k-values", "1,12", "--alpha-values", "0.5,1",
                     "--beta-values", "1", "--gamma-values", "0", "--out", str(out / "gs"), *j]) == 0
        return _tree_bytes(out)

    with criterion(8, "simulate/refine/evaluate/gridsearch byte-identical across reruns and --jobs 1 vs 8", 60.0) as info:
        # the same relative layout under one working directory keeps echoed input paths equal
        runs = []
        for name, jobs in (("a", 1), ("b", 1), ("c", 8)):
            monkeypatch.chdir(tmp_path)
            (tmp_path / name).mkdir()
            monkeypatch.chdir(tmp_path / name)
            runs.append(pipeline(jobs, Path("out")))
        info["files"] = len(runs[0])
        assert runs[0] == runs[1]
        assert runs[0] == runs[2]


REPORTED_REFINED_PCK = {"all": 0.87, "reg": 0.93, "oob": 0.88, "fall": 0.72}


def test_9_real_data_reproduction():
    root = os.environ.get("KPREFINE_REAL_DATA")
    if not root:
        line = ("SKIP criterion 9: conditional on the published ski dataset and per-rotation detector dumps; "
                "set KPREFINE_REAL_DATA to a directory of <video>/annotations.json + <video>/detections/")
        print(line)
        ACCEPTANCE_LINES.append(line)
        pytest.skip("KPREFINE_REAL_DATA not set")
    with criterion(9, "refined PCK@0.2 within 0.03 of 0.87/0.93/0.88/0.72 on real data", 3600.0) as info:
        pairs = []
        for video in sorted(p for p in Path(root).iterdir() if (p / "annotations.json").is_file()):
            seq = load_annotations(video / "annotations.json")
            refined = refine_sequence(load_detections(video / "detections"), FusionConfig(), seq.frame_indices)
            pairs.append((predictions_from_refined(refined), seq))
        got = pck(pairs).value
        info.update({k: f"{v:.3f}" for k, v in got.items() if v is not None})
        for cat, want in REPORTED_REFINED_PCK.items():
            assert got[cat] is not None and abs(got[cat] - want) <= 0.03, (cat, got[cat], want)
