"""SGD with momentum and weight decay, and the detector training loop."""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from ..errors import ConfigError, TrainingError
from ..nn import as_vars
from ..tensor import autograd as ag
from .metrics import EvalResult, evaluate_map
from .model import Arch, Detector, build_targets, detection_loss, predict


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.937
    weight_decay: float = 5e-4
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    final_lr_frac: float = 0.1
    warmup_epochs: int = 1
    dtype: str = "float32"
    eval_every: int = 1
    grad_clip: float = 10.0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    def lr_at(self, epoch: int, step: int, steps_per_epoch: int) -> float:
        """Linear warmup over ``warmup_epochs``, then linear decay to ``final_lr_frac * lr``."""
        t = epoch + step / max(steps_per_epoch, 1)
        if t < self.warmup_epochs:
            return self.lr * (t + 1 / max(steps_per_epoch, 1)) / self.warmup_epochs
        span = max(self.epochs - self.warmup_epochs, 1)
        frac = min((t - self.warmup_epochs) / span, 1.0)
        return self.lr * (1 - frac * (1 - self.final_lr_frac))


def is_decayed(name: str) -> bool:
    """Weight decay hits weight tensors only, never norm scale/shift or biases."""
    return name.endswith(".w")


def sgd_step(params: dict, grads: dict, state: dict, cfg: TrainConfig, lr: float | None = None,
             decay: Callable[[str], bool] | None = None) -> dict:
    """v <- momentum * v + (grad + wd * param);  param <- param - lr * v.

    ``state`` holds the velocities and is updated in place; a new params dict
    is returned. Parameters without a gradient are left untouched.
    """
    lr = cfg.lr if lr is None else lr
    out = dict(params)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        p_arr, g = np.asarray(p), np.asarray(g)
        if g.shape != p_arr.shape:
            raise TrainingError(f"gradient for {name} shaped {g.shape}, parameter {p_arr.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name} (max |g| = {np.nanmax(np.abs(g))})")
        wd = cfg.weight_decay if (decay is None or decay(name)) else 0.0
        d = g + wd * p_arr if wd else g
        v = state.get(name)
        v = d if v is None else cfg.momentum * v + d
        state[name] = v
        out[name] = p_arr - lr * v
    return out


def clip_grads(grads: dict, max_norm: float) -> dict:
    """Rescale all gradients together so their global L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        return grads
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if norm <= max_norm or not math.isfinite(norm):
        return grads
    k = max_norm / norm
    return {name: g * k for name, g in grads.items()}


def loss_and_grads(det: Detector, params: dict, images: np.ndarray, boxes, size: int):
    pv = as_vars(params, requires_grad=True)
    out = det(pv, ag.Var(images))
    loss = detection_loss(out, build_targets(boxes, size))
    loss.backward()
    return float(loss.data), {k: v.grad for k, v in pv.items() if v.grad is not None}


def _split(samples, name):
    sel = [s for s in samples if s.split == name]
    if not sel:
        return np.zeros((0, 3, 1, 1)), []
    return np.stack([s.image for s in sel]), [s.boxes for s in sel]


def evaluate(det: Detector, params, images, boxes, score_thr: float = 0.05) -> EvalResult:
    if len(images) == 0:
        return evaluate_map([], [])
    return evaluate_map(predict(det, params, images, score_thr), boxes)


def train(samples, arch: Arch, cfg: TrainConfig, log: Callable[[dict], None] | None = None):
    """Train on the ``train`` split, select the epoch with the best val mAP50.

    Returns (params, rows) where rows are the per-epoch log entries
    (epoch, loss, val_map50, lr). Epoch 0 records the loss at initialisation.
    """
    dtype = np.dtype(cfg.dtype)
    det = Detector(arch)
    params = det.init(np.random.default_rng(cfg.seed), dtype)
    xtr, btr = _split(samples, "train")
    xva, bva = _split(samples, "val")
    if len(xtr) == 0:
        raise TrainingError("dataset has no training images")
    xtr, xva = xtr.astype(dtype), xva.astype(dtype)
    size = xtr.shape[-1]
    n = len(xtr)
    steps = math.ceil(n / cfg.batch_size)
    rng = np.random.default_rng(cfg.seed + 1)

    init_losses = [loss_and_grads(det, params, xtr[lo : lo + cfg.batch_size], btr[lo : lo + cfg.batch_size], size)[0]
                   for lo in range(0, n, cfg.batch_size)]
    rows = [{"epoch": 0, "loss": float(np.mean(init_losses)), "val_map50": evaluate(det, params, xva, bva).map50,
             "lr": 0.0}]
    if log:
        log(rows[-1])
    best = (rows[0]["val_map50"], params)
    state: dict = {}
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        lr = cfg.lr
        for step in range(steps):
            idx = order[step * cfg.batch_size : (step + 1) * cfg.batch_size]
            loss, grads = loss_and_grads(det, params, xtr[idx], [btr[k] for k in idx], size)
            if not math.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch + 1}, step {step}")
            lr = cfg.lr_at(epoch, step, steps)
            grads = clip_grads(grads, cfg.grad_clip)
            params = sgd_step(params, grads, state, cfg, lr=lr, decay=is_decayed)
            losses.append(loss)
        row = {"epoch": epoch + 1, "loss": float(np.mean(losses)), "val_map50": float("nan"), "lr": lr}
        if (epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs:
            row["val_map50"] = evaluate(det, params, xva, bva).map50
            if row["val_map50"] > best[0]:
                best = (row["val_map50"], params)
        rows.append(row)
        if log:
            log(row)
    return best[1], rows


def log_csv(rows) -> str:
    lines = ["epoch,loss,val_map50,lr"]
    for r in rows:
        lines.append(f"{r['epoch']},{r['loss']!r},{r['val_map50']!r},{r['lr']!r}")
    return "\n".join(lines) + "\n"


def config_json(cfg: TrainConfig) -> dict:
    return asdict(cfg)
