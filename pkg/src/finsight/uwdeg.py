"""Underwater degradation simulator, synthetic fish scenes, radial spectra.

Image formation per channel c with transmission t_c = exp(-eta_c * d):

    I = J * t  +  a_fs * (1 - t) * blur(J * t)  +  B_inf * (1 - t)  +  noise

J is the clean image, the second term is forward scatter (a blurred copy of
the attenuated direct signal whose share grows with path length) and the
third is the veiling backscatter. Output is clamped to [0, 1].
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, GenerationError, GeometryError, ParseError

DEFAULT_ETA = (0.6, 0.20, 0.08)
DEFAULT_B_INF = (0.05, 0.35, 0.45)


@dataclass
class OpticalParams:
    eta: tuple[float, float, float] = DEFAULT_ETA
    d: float | np.ndarray = 2.0
    b_inf: tuple[float, float, float] = DEFAULT_B_INF
    fs_sigma: float = 1.0
    noise_sigma: float = 0.0
    fs_weight: float = 0.1
    motion_blur: int = 0

    def validate(self) -> "OpticalParams":
        eta, b = np.asarray(self.eta, float), np.asarray(self.b_inf, float)
        if eta.shape != (3,) or b.shape != (3,):
            raise ConfigError("eta and b_inf must be RGB triples")
        if np.any(eta < 0):
            raise ConfigError(f"attenuation must be >= 0, got {self.eta}")
        if np.any(np.asarray(self.d) < 0):
            raise ConfigError("distance must be >= 0")
        if np.any(b < 0) or np.any(b > 1):
            raise ConfigError(f"veiling light must lie in [0, 1], got {self.b_inf}")
        if self.fs_sigma < 0 or self.noise_sigma < 0 or self.fs_weight < 0 or self.motion_blur < 0:
            raise ConfigError("fs_sigma, noise_sigma, fs_weight and motion_blur must be >= 0")
        return self

    def to_json(self) -> dict:
        out = asdict(self)
        out["eta"], out["b_inf"] = list(self.eta), list(self.b_inf)
        if isinstance(self.d, np.ndarray):
            out["d"] = {"map_mean": float(self.d.mean())}
        return out


def transmission(eta, d) -> np.ndarray:
    """exp(-eta * d) per channel; shape (3,) for scalar d, (3, H, W) for a depth map."""
    eta = np.asarray(eta, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    return np.exp(-eta.reshape((3,) + (1,) * d.ndim) * d)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return img
    return ndimage.gaussian_filter(img, sigma=(0, sigma, sigma), mode="reflect")


def degrade(clean, p: OpticalParams, seed: int = 0) -> np.ndarray:
    """Apply the formation model to a (3, H, W) image with values in [0, 1]."""
    p.validate()
    clean = np.asarray(clean, dtype=np.float64)
    if clean.ndim != 3 or clean.shape[0] != 3:
        raise GeometryError(f"expected a (3, H, W) image, got {clean.shape}")
    if clean.min() < 0 or clean.max() > 1:
        raise ConfigError("clean image values must lie in [0, 1]")
    t = transmission(p.eta, p.d)
    if t.ndim == 1:
        t = t[:, None, None]
    direct = clean * t
    img = direct
    if p.fs_weight > 0:
        img = img + p.fs_weight * (1 - t) * gaussian_blur(direct, p.fs_sigma)
    if p.motion_blur > 1:
        img = ndimage.uniform_filter1d(img, size=int(p.motion_blur), axis=2, mode="reflect")
    img = img + np.asarray(p.b_inf, dtype=np.float64)[:, None, None] * (1 - t)
    if p.noise_sigma > 0:
        img = img + np.random.default_rng(seed).normal(0.0, p.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0)


# --- synthetic scenes -----------------------------------------------------------

@dataclass
class SceneSpec:
    size: int = 96
    fish_count: tuple[int, int] = (1, 4)
    fish_length: tuple[float, float] = (16.0, 40.0)
    aspect: tuple[float, float] = (0.28, 0.45)
    max_tilt: float = math.pi / 5
    max_overlap_iou: float = 0.15
    texture_seed: int | None = None
    seed: int = 0
    max_retries: int = 200


def _background(rng: np.random.Generator, n: int) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n] / n
    base = np.array([0.35, 0.55, 0.5]) + rng.uniform(-0.12, 0.12, 3)
    field_ = np.zeros((n, n))
    for _ in range(4):
        fx, fy = rng.uniform(0.5, 3.0, 2)
        ph = rng.uniform(0, 2 * np.pi)
        field_ += rng.uniform(0.02, 0.06) * np.sin(2 * np.pi * (fx * xx + fy * yy) + ph)
    grain = ndimage.gaussian_filter(rng.normal(0, 1, (n, n)), 1.2)
    field_ += 0.05 * grain / (grain.std() + 1e-12)
    img = base[:, None, None] + field_[None] * np.array([1.0, 0.8, 0.7])[:, None, None]
    return np.clip(img, 0.0, 1.0)


def _fish_mask(n: int, cx, cy, length, aspect, angle, ss: int = 4) -> np.ndarray:
    """Anti-aliased coverage of an ellipse body plus a forked tail fin."""
    coords = (np.arange(n * ss) + 0.5) / ss
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    c, s = math.cos(angle), math.sin(angle)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    a = 0.36 * length
    b = a * aspect * 1.4
    body = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    # tail: triangle from the body's rear to the fin tip with a shallow fork
    tail_x0, tail_x1 = -a * 0.85, -0.5 * length
    span = (u - tail_x1) / (tail_x0 - tail_x1)
    half = 0.9 * b * (1 - span)
    fork = np.abs(v) >= 0.35 * b * (1 - span) * (span < 0.35)
    tail = (u <= tail_x0) & (u >= tail_x1) & (np.abs(v) <= half + 0.25 * b) & fork
    dorsal = (np.abs(u) < 0.3 * a) & (v < -b * 0.8) & (v > -b * 1.25) & (np.abs(u) < 0.3 * a * (v + b * 1.25) / (0.45 * b))
    mask = (body | tail | dorsal).astype(np.float64)
    return mask.reshape(n, ss, n, ss).mean(axis=(1, 3))


def _box_of(mask: np.ndarray, thr: float = 0.25):
    ys, xs = np.nonzero(mask >= thr)
    if ys.size == 0:
        return None
    return [int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1]


def _box_iou(a, b) -> float:
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def synth_scene(spec: SceneSpec) -> tuple[np.ndarray, list[list[int]]]:
    """Clean (3, H, W) image in [0, 1] and tight [x1, y1, x2, y2] fish boxes."""
    lo, hi = spec.fish_count
    if lo < 0 or hi < lo or spec.size < 8:
        raise ConfigError(f"invalid scene spec {spec}")
    rng = np.random.default_rng(spec.seed)
    tex_rng = np.random.default_rng(spec.texture_seed) if spec.texture_seed is not None else rng
    n = spec.size
    img = _background(tex_rng, n)
    count = int(rng.integers(lo, hi + 1))
    boxes: list[list[int]] = []
    for _ in range(count):
        for _attempt in range(spec.max_retries):
            length = rng.uniform(*spec.fish_length)
            aspect = rng.uniform(*spec.aspect)
            angle = rng.uniform(-spec.max_tilt, spec.max_tilt) + (math.pi if rng.random() < 0.5 else 0.0)
            r = 0.55 * length
            cx, cy = rng.uniform(r, n - r), rng.uniform(r, n - r)
            mask = _fish_mask(n, cx, cy, length, aspect, angle)
            box = _box_of(mask)
            if box is None or box[0] == 0 or box[1] == 0 or box[2] == n or box[3] == n:
                continue
            if any(_box_iou(box, other) > spec.max_overlap_iou for other in boxes):
                continue
            break
        else:
            raise GenerationError(f"could not place fish {len(boxes) + 1} after {spec.max_retries} tries")
        color = np.array([rng.uniform(0.55, 0.95), rng.uniform(0.25, 0.6), rng.uniform(0.1, 0.4)])
        shade = 0.75 + 0.25 * np.linspace(1, 0, n)[None, :, None] * np.ones((1, 1, n))
        fish = color[:, None, None] * shade
        # fine stripes give the fish some high-frequency texture
        yy, xx = np.mgrid[0:n, 0:n]
        stripes = 0.12 * np.sin(2 * np.pi * (xx * math.cos(angle) + yy * math.sin(angle)) / 3.5)
        fish = np.clip(fish + stripes[None], 0, 1)
        img = img * (1 - mask[None]) + fish * mask[None]
        boxes.append(box)
    return np.clip(img, 0.0, 1.0), boxes


# --- spectra --------------------------------------------------------------------

@dataclass
class RadialSpectrum:
    radius: np.ndarray
    energy: np.ndarray
    counts: np.ndarray

    @property
    def profile(self) -> np.ndarray:
        return self.energy / np.maximum(self.counts, 1)

    def band_energy(self, lo_frac: float, hi_frac: float = 1.0) -> float:
        nyq = self.radius[-1]
        sel = (self.radius > lo_frac * nyq) & (self.radius <= hi_frac * nyq)
        return float(self.energy[sel].sum())

    def high_band(self) -> float:
        """Energy in the top third of radii."""
        return self.band_energy(2.0 / 3.0)

    def to_csv(self) -> str:
        lines = ["radius,energy,count,mean_energy"]
        for r, e, c, m in zip(self.radius, self.energy, self.counts, self.profile):
            lines.append(f"{int(r)},{e!r},{int(c)},{m!r}")
        return "\n".join(lines) + "\n"


def dft_matrix(n: int) -> np.ndarray:
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n)


def power_spectrum(x) -> RadialSpectrum:
    """Radially binned |DFT|^2 / N^2 of a square single-channel image.

    Uses a direct DFT by matrix products. Bins run from DC to Nyquist; the
    corner frequencies beyond Nyquist fold into the last bin, so the bins
    sum to the spatial energy (Parseval).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise GeometryError(f"power_spectrum needs a square 2-D image, got {x.shape}")
    n = x.shape[0]
    if n > 128:
        raise GeometryError("power_spectrum is limited to side <= 128")
    W = dft_matrix(n)
    X = W @ x @ W
    power = (X.real ** 2 + X.imag ** 2) / (n * n)
    k = np.arange(n)
    k = np.where(k < (n + 1) // 2, k, k - n)
    r = np.sqrt(k[:, None] ** 2 + k[None, :] ** 2)
    nyq = n // 2
    bins = np.minimum(np.rint(r).astype(int), nyq)
    energy = np.bincount(bins.ravel(), weights=power.ravel(), minlength=nyq + 1)
    counts = np.bincount(bins.ravel(), minlength=nyq + 1)
    return RadialSpectrum(np.arange(nyq + 1), energy, counts)


def luminance(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64).mean(axis=0)


# --- PPM I/O -------------------------------------------------------------------

def write_ppm(path, img) -> None:
    """Write a (3, H, W) float image in [0, 1] (or uint8 HxWx3) as binary P6."""
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    h, w, _ = arr.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


def to_uint8(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return np.rint(np.clip(img, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(arr) -> np.ndarray:
    return np.asarray(arr, dtype=np.float64).transpose(2, 0, 1) / 255.0


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file into an (H, W, 3) uint8 array."""
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise ParseError(f"{path}: truncated PPM header")
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise ParseError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ParseError(f"{path}: malformed PPM header") from exc
    if maxval != 255 or w < 1 or h < 1:
        raise ParseError(f"{path}: only 8-bit PPM with positive size is supported")
    pos += 1
    body = data[pos : pos + w * h * 3]
    if len(body) != w * h * 3:
        raise ParseError(f"{path}: expected {w * h * 3} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


# --- datasets ------------------------------------------------------------------

@dataclass
class DatasetSpec:
    n_train: int = 256
    n_val: int = 36
    n_test: int = 72
    size: int = 96
    seed: int = 0
    fish_count: tuple[int, int] = (1, 4)
    d_range: tuple[float, float] = (1.0, 6.0)
    fs_sigma_range: tuple[float, float] = (0.5, 2.0)
    noise_sigma: float = 0.02
    eta: tuple[float, float, float] = DEFAULT_ETA
    b_inf: tuple[float, float, float] = DEFAULT_B_INF

    @classmethod
    def from_ratio(cls, n: int, ratio: Sequence[int] = (7, 1, 2), **kw) -> "DatasetSpec":
        tot = sum(ratio)
        n_val = round(n * ratio[1] / tot)
        n_test = round(n * ratio[2] / tot)
        return cls(n - n_val - n_test, n_val, n_test, **kw)


@dataclass
class Sample:
    split: str
    index: int
    image: np.ndarray
    clean: np.ndarray
    boxes: list
    optics: dict = field(default_factory=dict)


def _item_seeds(root: int, n: int) -> list[int]:
    """Per-item seeds derived from the root seed by SeedSequence.spawn."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(root).spawn(n)]


def make_dataset(spec: DatasetSpec) -> list[Sample]:
    splits = ["train"] * spec.n_train + ["val"] * spec.n_val + ["test"] * spec.n_test
    seeds = _item_seeds(spec.seed, len(splits))
    samples, counters = [], {"train": 0, "val": 0, "test": 0}
    for split, s in zip(splits, seeds):
        rng = np.random.default_rng(s)
        clean, boxes = synth_scene(SceneSpec(size=spec.size, fish_count=spec.fish_count,
                                             seed=int(rng.integers(2**31))))
        optics = OpticalParams(eta=spec.eta, d=float(rng.uniform(*spec.d_range)), b_inf=spec.b_inf,
                               fs_sigma=float(rng.uniform(*spec.fs_sigma_range)), noise_sigma=spec.noise_sigma)
        img = degrade(clean, optics, seed=int(rng.integers(2**31)))
        # quantise like a stored 8-bit frame so on-disk and in-memory data match
        img = from_uint8(to_uint8(img))
        samples.append(Sample(split, counters[split], img, clean, boxes, optics.to_json()))
        counters[split] += 1
    return samples


def write_dataset(samples: list[Sample], out_dir, spec: DatasetSpec | None = None) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        name = f"images/{s.split}_{s.index:04d}.ppm"
        write_ppm(out / name, s.image)
        entries.append({"file": name, "split": s.split, "boxes": s.boxes,
                        "class": ["fish"] * len(s.boxes), "optics": s.optics})
    manifest = {"format": "finsight-dataset/1", "spec": asdict(spec) if spec else None, "items": entries}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_dataset(path) -> list[Sample]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text())
    counters: dict[str, int] = {}
    samples = []
    for e in manifest["items"]:
        img = from_uint8(read_ppm(path.parent / e["file"]))
        idx = counters.get(e["split"], 0)
        counters[e["split"]] = idx + 1
        samples.append(Sample(e["split"], idx, img, None, [list(b) for b in e["boxes"]], e.get("optics", {})))
    return samples
