"""Acceptance gate: one PASS/FAIL line per criterion at the stated tolerances.

Criterion 5 trains 9 detectors (3 configs x 3 seeds, 30 epochs, 96 px) and
takes roughly 20-30 minutes on one CPU core.
"""
import json
import shutil
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from finsight import gradcheck
from finsight.detect.ablation import BRANCH_GRID, COMPONENT_GRID, run_cell
from finsight.detect.boxes import DetectionBox, iou, nms
from finsight.detect.metrics import evaluate_map, f1_score
from finsight.detect.train import TrainConfig
from finsight.epafpn import count_cost
from finsight.msddsp import attention_fuse, branch4_identity
from finsight.tensor import functional as F
from finsight.uwdeg import (DEFAULT_B_INF, DEFAULT_ETA, DatasetSpec, OpticalParams, SceneSpec, degrade, luminance,
                            make_dataset, power_spectrum, synth_scene, transmission, write_ppm)


@pytest.fixture
def report(capsys):
    def emit(n: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} | {detail}")
        return ok
    return emit


def test_criterion_1_gradient_oracle(report):
    t0 = time.perf_counter()
    rows = gradcheck.run(seeds=20, eps=1e-5)
    secs = time.perf_counter() - t0
    worst = max(rows, key=lambda r: r["max_rel_err"])
    ok = all(r["max_rel_err"] <= 1e-4 for r in rows) and secs <= 120
    detail = (f"{len(rows)} ops x 20 seeds, worst {worst['op']} rel err {worst['max_rel_err']:.2e} "
              f"(tol 1e-4), {secs:.0f}s (limit 120s)")
    assert report(1, ok, detail), detail


def test_criterion_2_fusion_invariants(report):
    t0 = time.perf_counter()
    checks = {}
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 64, 5, 5))
    checks["split/concat bitwise"] = F.concat_channels(F.split_channels(x, 4)).tobytes() == x.tobytes()
    worst_sum = 0.0
    for _ in range(100):
        _, w = attention_fuse([rng.normal(size=(2, 8, 4, 4)) * rng.uniform(0.1, 10) for _ in range(4)])
        worst_sum = max(worst_sum, float(np.max(np.abs(w.beta.sum(axis=0) - 1))))
    checks["beta sums to 1 +- 1e-6"] = worst_sum <= 1e-6
    same = rng.normal(size=(2, 8, 4, 4))
    _, w = attention_fuse([same] * 4)
    checks["symmetric beta = 0.25 +- 1e-12"] = float(np.max(np.abs(w.beta - 0.25))) <= 1e-12
    checks["branch 4 bitwise identity"] = branch4_identity(x).tobytes() == x.tobytes()
    secs = time.perf_counter() - t0
    ok = all(checks.values())
    detail = ", ".join(f"{k}: {'ok' if v else 'FAIL'}" for k, v in checks.items()) + \
        f", max |sum beta - 1| = {worst_sum:.1e}, {secs:.1f}s"
    assert report(2, ok, detail), detail


def test_criterion_3_parameter_reduction(report):
    pan, epa = count_cost("panet", width=64), count_cost("epa-fpn", width=64)
    red = 1 - epa["params"] / pan["params"]
    per_width = {w: (count_cost("epa-fpn", width=w)["params"], count_cost("panet", width=w)["params"])
                 for w in (32, 64, 128)}
    ok = 0.25 <= red <= 0.35 and all(e < p for e, p in per_width.values())
    detail = (f"reduction at width 64 = {red:.4f} ({epa['params']} vs {pan['params']}) in [0.25, 0.35]; "
              + ", ".join(f"w{w}: {e} < {p}" for w, (e, p) in per_width.items()))
    assert report(3, ok, detail), detail


def test_criterion_4_degradation_physics(report):
    t0 = time.perf_counter()
    checks = {}
    clean, _ = synth_scene(SceneSpec(size=64, seed=0))
    checks["d=0 identity"] = np.array_equal(degrade(clean, OpticalParams(d=0.0, noise_sigma=0.0, fs_weight=0.0)),
                                            clean)
    far = degrade(clean, OpticalParams(d=1e3, noise_sigma=0.0))
    far_err = float(np.max(np.abs(far - np.asarray(DEFAULT_B_INF)[:, None, None])))
    checks["d->inf gives B_inf within 1e-6"] = far_err <= 1e-6
    ds = np.concatenate([np.geomspace(1e-4, 1e3, 200), [0.5, 1, 2, 5, 10]])
    checks["red <= green <= blue"] = all(t[0] <= t[1] <= t[2] for t in (transmission(DEFAULT_ETA, d) for d in ds))
    worst_parseval = 0.0
    for k in range(10):
        img = np.random.default_rng(k).normal(size=(32 + 8 * k, 32 + 8 * k))
        e = float(np.sum(img * img))
        worst_parseval = max(worst_parseval, abs(power_spectrum(img).energy.sum() - e) / e)
    checks["Parseval within 1e-6"] = worst_parseval <= 1e-6
    hf_ok = True
    for seed in range(3):
        img, _ = synth_scene(SceneSpec(size=64, seed=seed))
        ref = power_spectrum(luminance(img)).high_band()
        for d in (0.05, 0.5, 1.0, 3.0, 8.0):
            out = degrade(img, OpticalParams(d=d, noise_sigma=0.0))
            hf_ok &= power_spectrum(luminance(out)).high_band() < ref
    checks["high band strictly below clean"] = bool(hf_ok)
    secs = time.perf_counter() - t0
    ok = all(checks.values()) and secs <= 60
    detail = ", ".join(f"{k}: {'ok' if v else 'FAIL'}" for k, v in checks.items()) + \
        f" (asymptote err {far_err:.1e}, Parseval rel err {worst_parseval:.1e}), {secs:.1f}s"
    assert report(4, ok, detail), detail


@pytest.mark.slow
def test_criterion_5_ablation_ordering(report):
    samples = make_dataset(DatasetSpec(n_train=256, n_val=36, n_test=72, size=96, seed=0))
    grid = {"baseline": COMPONENT_GRID["baseline"], "full": COMPONENT_GRID["full"],
            "full-b2": BRANCH_GRID["full-b2"]}
    cfg = TrainConfig(epochs=30)
    maps, cell_secs = {}, []
    for name, arch in grid.items():
        maps[name] = []
        for seed in (0, 1, 2):
            t0 = time.perf_counter()
            maps[name].append(run_cell(samples, arch, replace(cfg, seed=seed))["map50"])
            cell_secs.append(time.perf_counter() - t0)
    mean = {k: float(np.mean(v)) for k, v in maps.items()}
    ok = mean["full"] >= mean["baseline"] and mean["full"] >= mean["full-b2"] and max(cell_secs) <= 600
    detail = (f"mean test mAP50 full {mean['full']:.4f}, baseline {mean['baseline']:.4f}, "
              f"full-b2 {mean['full-b2']:.4f}; per-seed {json.dumps({k: [round(x, 4) for x in v] for k, v in maps.items()})}; "
              f"slowest cell {max(cell_secs):.0f}s (limit 600s), total {sum(cell_secs) / 60:.1f} min")
    assert report(5, ok, detail), detail


def test_criterion_6_metric_correctness(report):
    B = DetectionBox
    checks = {}
    r = evaluate_map([[B(0, 0, 10, 10, 0.9)]], [[[0, 0, 10, 9]]])
    checks["1 GT 1 pred IoU 0.9"] = (r.map50, r.precision, r.recall, r.f1) == (1.0, 1.0, 1.0, 1.0)
    r = evaluate_map([[]], [[[0, 0, 10, 10]]])
    checks["no predictions"] = r.map50 == 0.0 and r.recall == 0.0
    r = evaluate_map([[B(0, 0, 10, 10, 0.9), B(50, 50, 60, 60, 0.8)]], [[[0, 0, 10, 10]]])
    checks["TP then FP"] = r.map50 == 1.0 and r.precision == 0.5
    checks["F1 = 2PR/(P+R)"] = r.f1 == 2 * 0.5 * 1.0 / 1.5 and f1_score(0.0, 0.0) == 0.0
    checks["IoU examples"] = (iou([0, 0, 2, 2], [0, 0, 2, 2]) == 1.0 and iou([0, 0, 1, 1], [2, 2, 3, 3]) == 0.0
                              and iou([0, 0, 2, 2], [1, 0, 3, 2]) == 1 / 3)
    a, b = B(0, 0, 2, 2, 0.9), B(0, 0, 2, 2, 0.8)
    checks["NMS identical pair"] = nms([b, a], 0.5) == [a]
    c, d = B(0, 0, 3, 1, 0.9), B(1, 0, 4, 1, 0.8)
    checks["NMS IoU == threshold suppressed"] = iou(c, d) == 0.5 and nms([c, d], 0.5) == [c]
    t1, t2 = B(0, 0, 2, 2, 0.7), B(0, 0, 2, 2.1, 0.7)
    checks["NMS tie by index"] = nms([t1, t2], 0.5) == [t1] and nms([t2, t1], 0.5) == [t2]
    checks["NMS disjoint kept"] = len(nms([B(0, 0, 1, 1, 0.5), B(5, 5, 6, 6, 0.6)], 0.5)) == 2
    ok = all(checks.values())
    detail = ", ".join(f"{k}: {'ok' if v else 'FAIL'}" for k, v in checks.items())
    assert report(6, ok, detail), detail


def _cli(*args, cwd):
    return subprocess.run([sys.executable, "-m", "finsight.cli", *map(str, args)], cwd=cwd,
                          capture_output=True, text=True)


def _files(d: Path) -> dict[str, bytes]:
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*"))
            if p.is_file() and not p.name.startswith("manifest-")}


def test_criterion_7_cli_determinism(report, tmp_path):
    write_ppm(tmp_path / "scene.ppm", synth_scene(SceneSpec(size=64, seed=2))[0])
    tiny = ["--n-train", "8", "--n-val", "2", "--n-test", "4", "--size", "64"]
    assert _cli("synth", "--out", "data", *tiny, "-q", cwd=tmp_path).returncode == 0
    assert _cli("train", "--data", "data", "--epochs", "1", "--out", "model", "-q", cwd=tmp_path).returncode == 0
    commands = {
        "gradcheck": ["gradcheck", "conv2d", "msddsp", "--seeds", "2"],
        "degrade": ["degrade", "scene.ppm", "OUT/degraded.ppm", "--d", "3", "--noise-sigma", "0.05"],
        "synth": ["synth", *tiny],
        "spectrum": ["spectrum", "scene.ppm", "OUT/spectrum.csv"],
        "params": ["params", "--width", "64"],
        "train": ["train", "--data", "data", "--epochs", "1"],
        "eval": ["eval", "--data", "data", "--checkpoint", "model/checkpoint"],
        "ablate": ["ablate", "--data", "data", "--epochs", "1", "--seeds", "1"],
    }
    status = {}
    for name, args in commands.items():
        out = tmp_path / f"run_{name}"
        args = [a.replace("OUT", out.name) for a in args]
        first = _cli(*args, "--out", out.name, "-q", cwd=tmp_path)
        if first.returncode != 0:
            status[name] = f"exit {first.returncode}"
            continue
        snapshot = _files(out)
        manifest = tmp_path / f"manifest-{name}.json"
        shutil.copy(out / manifest.name, manifest)
        shutil.rmtree(out)
        again = _cli("replay", manifest.name, cwd=tmp_path)
        same = again.returncode == 0 and bool(snapshot) and _files(out) == snapshot
        status[name] = "identical" if same else "DIFFERS"
    ok = all(v == "identical" for v in status.values())
    assert report(7, ok, ", ".join(f"{k}: {v}" for k, v in status.items())), status
