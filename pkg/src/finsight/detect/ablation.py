"""Ablation grids: neck/bottleneck combinations and MS-DDSP branch removal.

Every cell trains on the same dataset with the same seeds, picks the epoch
with the best val mAP50 and reports mAP50 on the test split.
"""
from __future__ import annotations

import time
from dataclasses import replace

import numpy as np

from ..epafpn import count_cost
from .model import Arch, Detector, predict
from .train import TrainConfig, _split, evaluate, train

COMPONENT_GRID = {
    "baseline": Arch(neck="panet", bottleneck="standard"),
    "+epa-fpn": Arch(neck="epa-fpn", bottleneck="standard"),
    "+msddsp": Arch(neck="panet", bottleneck="msddsp"),
    "full": Arch(neck="epa-fpn", bottleneck="msddsp"),
}
BRANCH_GRID = {
    "full-b2": Arch(disabled_branches=(2,)),
    "full-b3": Arch(disabled_branches=(3,)),
    "full-b4": Arch(disabled_branches=(4,)),
}


def param_count(arch: Arch) -> int:
    return Detector(arch).param_count()


def latency_ms(arch: Arch, params, images: np.ndarray, repeats: int = 3) -> float:
    """Median per-image inference time over ``repeats`` passes."""
    det = Detector(arch)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        predict(det, params, images)
        times.append((time.perf_counter() - t0) * 1000 / max(len(images), 1))
    return float(np.median(times))


def run_cell(samples, arch: Arch, cfg: TrainConfig, timing: bool = False, log=None) -> dict:
    params, rows = train(samples, arch, cfg, log)
    xte, bte = _split(samples, "test")
    xte = xte.astype(cfg.dtype)
    res = evaluate(Detector(arch), params, xte, bte)
    return {"map50": res.map50, "best_val": max(r["val_map50"] for r in rows),
            "latency_ms": latency_ms(arch, params, xte[:16]) if timing else None}


def run_grid(samples, grid: dict[str, Arch], seeds, cfg: TrainConfig, timing: bool = False,
             log=None) -> dict[str, dict]:
    """Mean test mAP50 per config over ``seeds``, plus the per-seed values."""
    out = {}
    for name, arch in grid.items():
        per_seed, lat = [], []
        for s in seeds:
            cell = run_cell(samples, arch, replace(cfg, seed=int(s)), timing)
            per_seed.append(cell["map50"])
            if cell["latency_ms"] is not None:
                lat.append(cell["latency_ms"])
            if log:
                log({"config": name, "seed": int(s), **cell})
        out[name] = {"map50": float(np.mean(per_seed)), "per_seed": per_seed,
                     "params": param_count(arch), "latency_ms": float(np.mean(lat)) if lat else None}
    return out


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


def table_csv(results: dict[str, dict], reference: float | None = None) -> str:
    """Rows of (config, map50, params, latency_ms); with a ``reference`` mAP a delta column is added."""
    head = ["config", "map50", "params", "latency_ms"] + (["delta_map50"] if reference is not None else [])
    lines = [",".join(head)]
    for name, r in results.items():
        row = [name, _fmt(r["map50"]), _fmt(r["params"]), _fmt(r["latency_ms"])]
        if reference is not None:
            row.append(_fmt(r["map50"] - reference))
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def cost_csv(grid: dict[str, Arch] | None = None) -> str:
    """Parameter and neck-FLOP table; neck FLOPs scaled to a 640x640 input."""
    grid = COMPONENT_GRID if grid is None else grid
    lines = ["config,params,neck_params,neck_gflops"]
    for name, arch in grid.items():
        c = count_cost(arch.neck, width=arch.neck_width, widths=arch.widths)
        lines.append(f"{name},{param_count(arch)},{c['params']},{c['flops'] / 1e9!r}")
    return "\n".join(lines) + "\n"


def ablate(samples, seeds, cfg: TrainConfig, timing: bool = False, log=None) -> dict[str, str]:
    """Both grids; returns the three CSV documents keyed by file name."""
    comp = run_grid(samples, COMPONENT_GRID, seeds, cfg, timing, log)
    branch = run_grid(samples, BRANCH_GRID, seeds, cfg, timing, log)
    return {"table2.csv": table_csv(comp), "table3.csv": cost_csv(),
            "table4.csv": table_csv(branch, reference=comp["full"]["map50"])}
