"""Synthetic paired pseudo-modalities, image metrics, and simple image IO.

One Scene (a few soft blobs) renders deterministically into four styles that
stand in for paired acquisitions of the same underlying anatomy:

* xray - soft grayscale render
* ct   - intensity inversion plus edge sharpening
* mri  - gamma 0.5 with a deterministic sinusoidal texture
* text - quantized token description ("blobs=2 x3 y5 r1 i6 ...")

Rendering is a pure function of the scene seed, so datasets regenerate
bit-identically from seed ranges.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

IMG_SIZE = 16
MAX_TOKENS = 16

# token vocabulary: pad, blob count, then quantized center / radius / intensity
PAD_TOKEN = "_"
_X_BINS, _Y_BINS, _R_BINS, _I_BINS = 8, 8, 4, 8
VOCAB = (
    [PAD_TOKEN]
    + [f"blobs={n}" for n in (1, 2, 3)]
    + [f"x{i}" for i in range(_X_BINS)]
    + [f"y{i}" for i in range(_Y_BINS)]
    + [f"r{i}" for i in range(_R_BINS)]
    + [f"i{i}" for i in range(_I_BINS)]
)
TOKEN_TO_ID = {tok: i for i, tok in enumerate(VOCAB)}
VOCAB_SIZE = len(VOCAB)

MODALITIES = ("text", "xray", "ct", "mri")


@dataclass(frozen=True)
class Blob:
    cx: float
    cy: float
    radius: float
    intensity: float


@dataclass(frozen=True)
class Scene:
    seed: int
    blobs: tuple

    @classmethod
    def from_seed(cls, seed: int) -> "Scene":
        rng = np.random.default_rng(np.random.SeedSequence([0xB10B, int(seed)]))
        n = int(rng.integers(1, 4))
        blobs = tuple(
            Blob(
                cx=float(rng.uniform(0.0, 1.0)),
                cy=float(rng.uniform(0.0, 1.0)),
                radius=float(rng.uniform(0.05, 0.2)),
                intensity=float(rng.uniform(0.3, 1.0)),
            )
            for _ in range(n)
        )
        return cls(seed=int(seed), blobs=blobs)


# ---------------------------------------------------------------------------
# rendering


def _grid():
    c = (np.arange(IMG_SIZE) + 0.5) / IMG_SIZE
    return np.meshgrid(c, c, indexing="xy")


def soft_render(scene: Scene) -> np.ndarray:
    """Additive Gaussian blobs on a 1x16x16 canvas, clipped to [0, 1]."""
    X, Y = _grid()
    img = np.zeros((IMG_SIZE, IMG_SIZE))
    for b in scene.blobs:
        sigma = 0.85 * b.radius
        img += b.intensity * np.exp(-((X - b.cx) ** 2 + (Y - b.cy) ** 2) / (2 * sigma**2))
    return np.clip(img, 0.0, 1.0)[None]


def _box_blur3(img: np.ndarray) -> np.ndarray:
    p = np.pad(img, 1, mode="edge")
    out = np.zeros_like(img)
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            out += p[dy:dy + img.shape[0], dx:dx + img.shape[1]]
    return out / 9.0


def edge_sharpen(img: np.ndarray, amount: float = 1.5) -> np.ndarray:
    """Unsharp-mask hardening of edges; keeps the [0, 1] range."""
    flat = img[0] if img.ndim == 3 else img
    sharp = np.clip(flat + amount * (flat - _box_blur3(flat)), 0.0, 1.0)
    return sharp[None] if img.ndim == 3 else sharp


def _texture(scene: Scene) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([0x7E97, scene.seed]))
    fx, fy = rng.integers(2, 6, size=2)
    phase = rng.uniform(0, 2 * np.pi)
    X, Y = _grid()
    return 0.5 + 0.5 * np.sin(2 * np.pi * (fx * X + fy * Y) + phase)


def _quantize(value, lo, hi, bins):
    frac = (value - lo) / (hi - lo)
    return min(bins - 1, max(0, int(frac * bins)))


def scene_tokens(scene: Scene) -> list:
    toks = [f"blobs={len(scene.blobs)}"]
    for b in scene.blobs:
        toks.append(f"x{_quantize(b.cx, 0.0, 1.0, _X_BINS)}")
        toks.append(f"y{_quantize(b.cy, 0.0, 1.0, _Y_BINS)}")
        toks.append(f"r{_quantize(b.radius, 0.05, 0.2, _R_BINS)}")
        toks.append(f"i{_quantize(b.intensity, 0.3, 1.0, _I_BINS)}")
    return toks


def tokens_to_ids(tokens) -> np.ndarray:
    ids = [TOKEN_TO_ID[t] for t in tokens]
    if len(ids) > MAX_TOKENS:
        raise ValueError(f"token sequence longer than {MAX_TOKENS}")
    return np.array(ids + [0] * (MAX_TOKENS - len(ids)), dtype=np.int64)


def ids_to_tokens(ids) -> list:
    toks = [VOCAB[int(i)] for i in ids]
    while toks and toks[-1] == PAD_TOKEN:
        toks.pop()
    return toks


def render_modality(scene: Scene, modality: str):
    """Render one scene into one modality: (1, 16, 16) image in [0, 1] for the
    imaging styles, padded token ids for text."""
    if modality == "xray":
        return soft_render(scene)
    if modality == "ct":
        return edge_sharpen(1.0 - soft_render(scene))
    if modality == "mri":
        soft = soft_render(scene)
        return np.clip(np.sqrt(soft) * (0.8 + 0.2 * _texture(scene)[None]), 0.0, 1.0)
    if modality == "text":
        return tokens_to_ids(scene_tokens(scene))
    raise ValueError(f"unknown modality {modality!r}")


# ---------------------------------------------------------------------------
# paired datasets


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class PairedDataset:
    pair: tuple  # (modality_a, modality_b)
    seeds: np.ndarray
    samples_a: np.ndarray
    samples_b: np.ndarray

    def __len__(self):
        return len(self.seeds)

    @classmethod
    def generate(cls, pair, seeds) -> "PairedDataset":
        a, b = pair
        seeds = np.asarray(list(seeds), dtype=np.int64)
        scenes = [Scene.from_seed(int(s)) for s in seeds]
        sa = np.stack([render_modality(sc, a) for sc in scenes])
        sb = np.stack([render_modality(sc, b) for sc in scenes])
        return cls(pair=(a, b), seeds=seeds, samples_a=sa, samples_b=sb)


def train_val_seeds(base: int, n_train: int, n_val: int):
    """Disjoint seed ranges; validation seeds never appear in training."""
    train = np.arange(base, base + n_train, dtype=np.int64)
    val = np.arange(base + n_train, base + n_train + n_val, dtype=np.int64)
    return train, val


# ---------------------------------------------------------------------------
# metrics


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return 99.0
    return min(99.0, 10.0 * np.log10(peak * peak / mse))


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0, window: int = 8) -> float:
    """Single-scale SSIM, uniform window, stride 1, mean over windows."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    x = a[0] if a.ndim == 3 else a
    y = b[0] if b.ndim == 3 else b
    if x.shape[0] < window or x.shape[1] < window:
        raise ValueError(f"image {x.shape} smaller than {window}x{window} window")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    from numpy.lib.stride_tricks import sliding_window_view

    wx = sliding_window_view(x, (window, window))
    wy = sliding_window_view(y, (window, window))
    mx = wx.mean(axis=(2, 3))
    my = wy.mean(axis=(2, 3))
    vx = (wx * wx).mean(axis=(2, 3)) - mx * mx
    vy = (wy * wy).mean(axis=(2, 3)) - my * my
    cov = (wx * wy).mean(axis=(2, 3)) - mx * my
    score = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(score.mean())


def retrieval_topk(zA: np.ndarray, zB: np.ndarray, k: int = 1) -> float:
    """Fraction of rows whose true partner is among the k highest-dot-product
    candidates; ties resolve toward the lowest index."""
    zA, zB = np.asarray(zA), np.asarray(zB)
    n = zA.shape[0]
    if k > n:
        raise ValueError(f"k={k} exceeds candidate count {n}")
    sims = zA @ zB.T
    hits = 0
    for i in range(n):
        row = sims[i]
        better = np.sum(row > row[i])
        tied_low = np.sum((row == row[i]) & (np.arange(n) < i))
        if better + tied_low < k:
            hits += 1
    return hits / n


# ---------------------------------------------------------------------------
# image file IO (PGM/PPM, binary, maxval 255)


def write_pgm(path, img: np.ndarray) -> None:
    flat = img[0] if img.ndim == 3 else img
    data = np.clip(np.rint(flat * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise ValueError(f"not a binary PGM file: {magic!r}")
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(fh.readline())
        data = np.frombuffer(fh.read(w * h), dtype=np.uint8).reshape(h, w)
    return data.astype(np.float64)[None] / maxval


def write_ppm(path, img: np.ndarray) -> None:
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"ppm wants (3, H, W), got {img.shape}")
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    data = np.transpose(data, (1, 2, 0))
    with open(path, "wb") as fh:
        fh.write(f"P6\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())
