"""``finsight`` command line: one subcommand per experiment.

Every run writes its outputs plus exactly one JSON manifest recording the
subcommand, the full config, argv, seed, tool version, output paths and
wall-clock time. ``finsight replay MANIFEST`` reruns a manifest.

Exit codes: 0 success, 1 tolerance or assertion failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .errors import FinsightError, ParseError

log = logging.getLogger("finsight")

SEED_ENV = "FINSIGHT_SEED"
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _csv(rows: list[dict], cols: list[str]) -> str:
    lines = [",".join(cols)]
    for r in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in (r[c] for c in cols)))
    return "\n".join(lines) + "\n"


# --- subcommands ---------------------------------------------------------------
# each returns (exit code, config snapshot, output paths)

def cmd_gradcheck(a):
    from . import gradcheck

    names = list(gradcheck.CASES) if a.all or not a.op else a.op
    unknown = [n for n in names if n not in gradcheck.CASES]
    if unknown:
        raise UsageError(f"unknown op(s) {unknown}; choose from {sorted(gradcheck.CASES)}")
    rows = gradcheck.run(names, seeds=a.seeds, eps=a.eps)
    for r in rows:
        log.info("%-20s max_rel_err=%.3e %s (%.1fs)", r["op"], r["max_rel_err"], "ok" if r["ok"] else "FAIL",
                 r["seconds"])
    out = _write(Path(a.out) / "gradcheck.csv", _csv(rows, ["op", "seeds", "max_rel_err", "tol", "ok"]))
    code = EXIT_OK if all(r["ok"] for r in rows) else EXIT_FAIL
    return code, {"ops": names, "seeds": a.seeds, "eps": a.eps}, [out]


def _optics(a):
    from .uwdeg import OpticalParams

    return OpticalParams(eta=tuple(a.eta), d=a.d, b_inf=tuple(a.b_inf), fs_sigma=a.fs_sigma,
                         noise_sigma=a.noise_sigma, fs_weight=a.fs_weight, motion_blur=a.motion_blur).validate()


def cmd_degrade(a):
    from .uwdeg import degrade, from_uint8, read_ppm, write_ppm

    p = _optics(a)
    img = from_uint8(read_ppm(a.input))
    out = Path(a.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_ppm(out, degrade(img, p, seed=a.seed))
    side = _write(out.with_suffix(".json"), _dump({"input": str(a.input), "seed": a.seed, "optics": p.to_json()}))
    return EXIT_OK, {"input": str(a.input), "optics": p.to_json()}, [out, side]


def _dataset_spec(a):
    from .uwdeg import DatasetSpec

    return DatasetSpec(n_train=a.n_train, n_val=a.n_val, n_test=a.n_test, size=a.size, seed=a.data_seed,
                       d_range=tuple(a.d_range), noise_sigma=a.noise_sigma)


def cmd_synth(a):
    from .uwdeg import make_dataset, write_dataset

    spec = _dataset_spec(a)
    manifest = write_dataset(make_dataset(spec), a.out, spec)
    return EXIT_OK, {"dataset": asdict(spec)}, [manifest]


def cmd_spectrum(a):
    from .uwdeg import from_uint8, luminance, power_spectrum, read_ppm

    spec = power_spectrum(luminance(from_uint8(read_ppm(a.image))))
    out = _write(Path(a.output), spec.to_csv())
    log.info("high-band energy %.6g of %.6g total", spec.high_band(), spec.energy.sum())
    return EXIT_OK, {"image": str(a.image)}, [out]


def cmd_params(a):
    from .epafpn import count_cost

    rows = [count_cost(n, widths=a.widths, width=a.width, ref_size=a.ref_size) for n in a.neck]
    ref = next((r for r in rows if r["variant"] == "panet"), None)
    if ref is None:
        ref = count_cost("panet", widths=a.widths, width=a.width, ref_size=a.ref_size)
    for r in rows:
        r["gflops"] = r["flops"] / 1e9
        r["reduction_vs_panet"] = 1 - r["params"] / ref["params"]
    text = _csv(rows, ["variant", "width", "params", "macs", "flops", "gflops", "reduction_vs_panet"])
    out = _write(Path(a.out) / "params.csv", text)
    sys.stdout.write(text)
    return EXIT_OK, {"neck": a.neck, "width": a.width, "widths": a.widths, "ref_size": a.ref_size}, [out]


def _samples(a):
    from .uwdeg import load_dataset, make_dataset

    if a.data:
        return load_dataset(a.data), {"data": str(a.data)}
    spec = _dataset_spec(a)
    return make_dataset(spec), {"dataset": asdict(spec)}


def _arch(a):
    from .detect.model import Arch

    return Arch(neck=a.neck, bottleneck=a.bottleneck, neck_width=a.neck_width,
                disabled_branches=tuple(a.disabled_branches))


def _train_cfg(a):
    from .detect.train import TrainConfig

    return TrainConfig(lr=a.lr, momentum=a.momentum, weight_decay=a.weight_decay, epochs=a.epochs,
                       batch_size=a.batch_size, seed=a.seed, grad_clip=a.grad_clip, dtype=a.dtype)


def cmd_train(a):
    from .detect.train import log_csv, train
    from .tensor.serialize import save_params

    samples, data_cfg = _samples(a)
    arch, cfg = _arch(a), _train_cfg(a)
    params, rows = train(samples, arch, cfg, log=lambda r: log.info("epoch %(epoch)d loss %(loss).4f val_map50 "
                                                                      "%(val_map50).4f", r))
    out = Path(a.out)
    csv = _write(out / "train_log.csv", log_csv(rows))
    ckpt = save_params(out / "checkpoint", params, {"arch": arch.to_json(), "train": asdict(cfg)})
    return EXIT_OK, {**data_cfg, "arch": arch.to_json(), "train": asdict(cfg)}, [csv, ckpt / "arch.json"]


def _load_predictions(path) -> dict[str, list]:
    from .detect.boxes import DetectionBox

    doc = json.loads(Path(path).read_text())
    items = doc["items"] if isinstance(doc, dict) else doc
    try:
        return {e["file"]: [DetectionBox.from_json(b) for b in e["boxes"]] for e in items}
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{path}: malformed predictions file ({exc})") from None


def cmd_eval(a):
    from .detect.metrics import evaluate_map

    manifest = Path(a.data)
    if manifest.is_dir():
        manifest = manifest / "manifest.json"
    items = [e for e in json.loads(manifest.read_text())["items"] if e["split"] == a.split]
    out = Path(a.out)
    outputs = []
    if a.predictions:
        preds = _load_predictions(a.predictions)
    elif a.checkpoint:
        preds = _predict_items(a.checkpoint, manifest, items, a.score_thr)
        outputs.append(_write(out / "predictions.json", _dump(
            {"format": "finsight-predictions/1",
             "items": [{"file": f, "boxes": [b.to_json() for b in bs]} for f, bs in preds.items()]})))
    else:
        raise UsageError("eval needs --predictions or --checkpoint")
    res = evaluate_map([preds.get(e["file"], []) for e in items], [e["boxes"] for e in items], a.iou_thr)
    text = _dump(res.to_json(with_matches=a.matches))
    outputs.append(_write(out / "eval.json", text))
    sys.stdout.write(text)
    return EXIT_OK, {"data": str(a.data), "split": a.split, "iou_thr": a.iou_thr,
                     "predictions": a.predictions, "checkpoint": a.checkpoint}, outputs


def _predict_items(checkpoint, manifest: Path, items, score_thr):
    from .detect.model import Arch, Detector, predict
    from .tensor.serialize import load_params
    from .uwdeg import from_uint8, read_ppm

    params, doc = load_params(checkpoint)
    arch = Arch.from_json(doc["arch"])
    if not items:
        return {}
    images = np.stack([from_uint8(read_ppm(manifest.parent / e["file"])) for e in items])
    preds = predict(Detector(arch), params, images, score_thr)
    return {e["file"]: p for e, p in zip(items, preds)}


def cmd_ablate(a):
    from .detect.ablation import ablate

    samples, data_cfg = _samples(a)
    cfg = _train_cfg(a)
    seeds = list(range(a.seed, a.seed + a.seeds))
    tables = ablate(samples, seeds, cfg, timing=a.timing,
                    log=lambda r: log.info("%(config)s seed %(seed)d test map50 %(map50).4f", r))
    out = Path(a.out)
    paths = [_write(out / name, text) for name, text in tables.items()]
    return EXIT_OK, {**data_cfg, "train": asdict(cfg), "seeds": seeds, "timing": a.timing}, paths


# --- argument parsing ----------------------------------------------------------

def _add_dataset_flags(p, with_data=True):
    from .uwdeg import DatasetSpec

    d = DatasetSpec()
    if with_data:
        p.add_argument("--data", help="dataset directory or manifest (default: generate one)")
    p.add_argument("--n-train", dest="n_train", type=int, default=d.n_train)
    p.add_argument("--n-val", dest="n_val", type=int, default=d.n_val)
    p.add_argument("--n-test", dest="n_test", type=int, default=d.n_test)
    p.add_argument("--size", type=int, default=d.size)
    p.add_argument("--data-seed", dest="data_seed", type=int, default=d.seed)
    p.add_argument("--d-range", dest="d_range", type=float, nargs=2, default=list(d.d_range))
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float, default=d.noise_sigma)


def _add_train_flags(p, epochs=None):
    from .detect.model import Arch
    from .detect.train import TrainConfig

    t, ar = TrainConfig(), Arch()
    p.add_argument("--neck", default=ar.neck)
    p.add_argument("--bottleneck", default=ar.bottleneck)
    p.add_argument("--neck-width", dest="neck_width", type=int, default=ar.neck_width)
    p.add_argument("--disabled-branches", dest="disabled_branches", type=int, nargs="*", default=[])
    p.add_argument("--lr", type=float, default=t.lr)
    p.add_argument("--momentum", type=float, default=t.momentum)
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=t.weight_decay)
    p.add_argument("--epochs", type=int, default=t.epochs if epochs is None else epochs)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=t.batch_size)
    p.add_argument("--grad-clip", dest="grad_clip", type=float, default=t.grad_clip)
    p.add_argument("--dtype", default=t.dtype, choices=["float32", "float64"])


def build_parser() -> argparse.ArgumentParser:
    from .gradcheck import DEFAULT_SEEDS, EPS
    from .uwdeg import OpticalParams

    ap = argparse.ArgumentParser(prog="finsight", description=__doc__.split("\n\n")[0])
    ap.add_argument("--version", action="version", version=f"finsight {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help=f"default from ${SEED_ENV}, else 0")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--manifest", default=None, help="manifest path (default OUT/manifest-<cmd>.json)")
    common.add_argument("-q", "--quiet", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient oracle")
    p.add_argument("op", nargs="*")
    p.add_argument("--all", action="store_true")
    p.add_argument("--seeds", type=int, default=DEFAULT_SEEDS)
    p.add_argument("--eps", type=float, default=EPS)
    p.set_defaults(fn=cmd_gradcheck)

    o = OpticalParams()
    p = sub.add_parser("degrade", parents=[common], help="apply the underwater formation model to a PPM")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--eta", type=float, nargs=3, default=list(o.eta))
    p.add_argument("--d", type=float, default=o.d)
    p.add_argument("--b-inf", dest="b_inf", type=float, nargs=3, default=list(o.b_inf))
    p.add_argument("--fs-sigma", dest="fs_sigma", type=float, default=o.fs_sigma)
    p.add_argument("--fs-weight", "--fs", dest="fs_weight", type=float, default=o.fs_weight)
    p.add_argument("--noise-sigma", "--noise", dest="noise_sigma", type=float, default=o.noise_sigma)
    p.add_argument("--motion-blur", dest="motion_blur", type=int, default=o.motion_blur)
    p.set_defaults(fn=cmd_degrade)

    p = sub.add_parser("synth", parents=[common], help="generate a degraded synthetic dataset")
    _add_dataset_flags(p, with_data=False)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("spectrum", parents=[common], help="radial power spectrum of a PPM as CSV")
    p.add_argument("image")
    p.add_argument("output")
    p.set_defaults(fn=cmd_spectrum)

    p = sub.add_parser("params", parents=[common], help="neck parameter and FLOP counts")
    p.add_argument("--neck", nargs="+", default=["topdown-fpn", "panet", "epa-fpn"])
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--widths", type=int, nargs=4, default=[16, 32, 64, 128])
    p.add_argument("--ref-size", dest="ref_size", type=int, default=640)
    p.set_defaults(fn=cmd_params)

    p = sub.add_parser("train", parents=[common], help="train the detector")
    _add_dataset_flags(p)
    _add_train_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="mAP50 of predictions or a checkpoint on a dataset split")
    p.add_argument("--data", required=True)
    p.add_argument("--predictions")
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="test")
    p.add_argument("--iou-thr", dest="iou_thr", type=float, default=0.5)
    p.add_argument("--score-thr", dest="score_thr", type=float, default=0.05)
    p.add_argument("--matches", action="store_true", help="include per-prediction matches in the JSON")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="component and branch ablation grids")
    _add_dataset_flags(p)
    _add_train_flags(p)
    p.add_argument("--seeds", type=int, default=3, help="number of training seeds, starting at --seed")
    p.add_argument("--timing", action="store_true", help="measure latency (not byte-reproducible)")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("replay", help="rerun the command recorded in a manifest")
    p.add_argument("manifest")
    p.set_defaults(fn=None)
    return ap


def _replay_argv(path) -> list[str]:
    try:
        doc = json.loads(Path(path).read_text())
        return list(doc["argv"])
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot replay {path}: {exc}") from None


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        a = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    if a.command == "replay":
        try:
            return main(_replay_argv(a.manifest))
        except UsageError as exc:
            print(f"finsight: error: {exc}", file=sys.stderr)
            return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING if a.quiet else logging.INFO, format="%(message)s")
    t0 = time.perf_counter()
    try:
        if a.seed is None:
            a.seed = default_seed()
        code, config, outputs = a.fn(a)
    except (UsageError, FinsightError, ValueError, OSError) as exc:
        print(f"finsight: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RuntimeError as exc:
        print(f"finsight: error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    # the recorded argv pins the resolved seed so a replay ignores the environment
    pinned = any(x == "--seed" or x.startswith("--seed=") for x in argv)
    recorded = argv if pinned else argv + ["--seed", str(a.seed)]
    manifest = {"subcommand": a.command, "config": config, "argv": recorded, "seed": a.seed,
                "version": __version__, "outputs": [str(p) for p in outputs],
                "wall_clock_s": round(time.perf_counter() - t0, 3), "exit_code": code}
    mpath = Path(a.manifest) if a.manifest else Path(a.out) / f"manifest-{a.command}.json"
    _write(mpath, _dump(manifest))
    return code


if __name__ == "__main__":
    sys.exit(main())
