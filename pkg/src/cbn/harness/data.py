"""Datasets: MNIST IDX ingestion and synthetic generators."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..te_linalg import as_shape

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


@dataclass
class Dataset:
    inputs: np.ndarray  # (B, *spatial, c)
    targets: np.ndarray  # signals (B, *spatial, c_out) or integer labels (B,)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets)
        if len(self.inputs) == 0:
            raise ValueError("dataset is empty")
        if len(self.targets) != len(self.inputs):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.targets)} targets")

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def spatial_shape(self) -> tuple[int, ...]:
        return self.inputs.shape[1:-1]

    @property
    def is_classification(self) -> bool:
        return self.targets.ndim == 1

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.targets[idx], dict(self.metadata))

    def save(self, path) -> Path:
        p = Path(path)
        np.savez(p, inputs=self.inputs, targets=self.targets)
        return p


# ---------------------------------------------------------------------------
# MNIST
# ---------------------------------------------------------------------------


def _read(path) -> bytes:
    p = Path(path)
    raw = p.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx_images(path) -> np.ndarray:
    raw = _read(path)
    if len(raw) < 16:
        raise ValueError(f"{path}: truncated IDX header")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES:
        raise ValueError(f"{path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES:08x}")
    need = 16 + count * rows * cols
    if len(raw) < need:
        raise ValueError(f"{path}: truncated, expected {need} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols, offset=16).reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    raw = _read(path)
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated IDX header")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != IDX_LABELS:
        raise ValueError(f"{path}: bad magic 0x{magic:08x}, expected 0x{IDX_LABELS:08x}")
    if len(raw) < 8 + count:
        raise ValueError(f"{path}: truncated, expected {8 + count} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=8).copy()


def write_idx(images: np.ndarray | None, labels: np.ndarray | None, images_path=None, labels_path=None):
    """Write IDX files (used to build fixtures)."""
    if images is not None:
        images = np.asarray(images, dtype=np.uint8)
        head = struct.pack(">IIII", IDX_IMAGES, *images.shape)
        Path(images_path).write_bytes(head + images.tobytes())
    if labels is not None:
        labels = np.asarray(labels, dtype=np.uint8)
        Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS, len(labels)) + labels.tobytes())


def area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic matrix averaging ``n_in`` cells onto ``n_out`` equal intervals."""
    R = np.zeros((n_out, n_in))
    step = n_in / n_out
    for i in range(n_out):
        lo, hi = i * step, (i + 1) * step
        for j in range(int(np.floor(lo)), min(n_in, int(np.ceil(hi)))):
            R[i, j] = max(0.0, min(hi, j + 1) - max(lo, j))
    return R / step


def area_downscale(images: np.ndarray, size: int) -> np.ndarray:
    """Area-average ``(B, H, W)`` images to ``(B, size, size)``."""
    Rh = area_matrix(images.shape[1], size)
    Rw = area_matrix(images.shape[2], size)
    return np.einsum("ih,bhw,jw->bij", Rh, images, Rw)


def load_mnist_idx(images_path, labels_path, filter_digit: int | None = None,
                   downscale_to: int | None = None, limit: int | None = None) -> Dataset:
    """Load MNIST from (optionally gzipped) IDX files, scaled to ``[0, 1]``."""
    imgs = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(imgs) != len(labels):
        raise ValueError(f"{len(imgs)} images but {len(labels)} labels")
    if filter_digit is not None:
        keep = labels == filter_digit
        imgs, labels = imgs[keep], labels[keep]
    if limit is not None:
        imgs, labels = imgs[:limit], labels[:limit]
    x = imgs.astype(np.float64) / 255.0
    if downscale_to is not None:
        x = area_downscale(x, downscale_to)
    meta = {"source": "mnist_idx", "images": str(images_path), "labels": str(labels_path),
            "filter_digit": filter_digit, "downscale_to": downscale_to}
    return Dataset(x[..., None], labels.astype(np.int64), meta)


# ---------------------------------------------------------------------------
# Synthetic generators
# ---------------------------------------------------------------------------


def _cyclic_distance(shape: tuple[int, ...], centre) -> np.ndarray:
    """Euclidean cyclic distance from ``centre`` for every pixel."""
    coords = np.indices(shape).astype(np.float64)
    d2 = np.zeros(shape)
    for a, n in enumerate(shape):
        diff = np.abs(coords[a] - centre[a]) % n
        diff = np.minimum(diff, n - diff)
        d2 += diff ** 2
    return np.sqrt(d2)


def bump(shape, centre, width: float) -> np.ndarray:
    """Cyclic Gaussian bump; ``width <= 1`` gives a one-hot pixel at ``round(centre)``."""
    shape = as_shape(shape)
    centre = np.atleast_1d(np.asarray(centre, dtype=np.float64))
    if width <= 1:
        out = np.zeros(shape)
        out[tuple(int(round(c)) % n for c, n in zip(centre, shape))] = 1.0
        return out
    sigma = width / 2.0
    d = _cyclic_distance(shape, centre)
    return np.exp(-d ** 2 / (2 * sigma ** 2))


def gen_translated_bumps(count: int, n, width: float = 2.0, seed: int = 0,
                         amplitude: tuple[float, float] = (0.5, 1.5)) -> Dataset:
    """Bumps at random cyclic positions with random amplitudes (autoencoding targets).

    Positions are drawn without repetition while possible; the random
    amplitudes make the samples translationally unique.
    """
    shape = as_shape(n)
    if width >= min(shape):
        raise ValueError("width must be smaller than n")
    rng = np.random.default_rng(seed)
    N = int(np.prod(shape))
    if count <= N:
        flat = rng.choice(N, size=count, replace=False)
    else:
        flat = rng.integers(0, N, size=count)
    pos = np.array(np.unravel_index(flat, shape)).T
    amps = rng.uniform(*amplitude, size=count)
    x = np.stack([a * bump(shape, p, width) for a, p in zip(amps, pos)])[..., None]
    meta = {"source": "translated_bumps", "n": list(shape), "width": width, "seed": seed,
            "positions": pos.tolist(), "amplitudes": amps.tolist()}
    return Dataset(x, x.copy(), meta)


def gen_bump_classes(count: int, n, widths=(1.0, 4.0), seed: int = 0,
                     amplitude: tuple[float, float] = (0.5, 1.5)) -> Dataset:
    """Bumps labelled by width class, a translation-invariant classification task.

    Every bump is scaled to total mass equal to its random amplitude, so the
    constant frequency of the input carries no class information.
    """
    shape = as_shape(n)
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, len(widths), size=count)
    N = int(np.prod(shape))
    pos = np.array(np.unravel_index(rng.integers(0, N, size=count), shape)).T
    amps = rng.uniform(*amplitude, size=count)
    bumps = [bump(shape, p, widths[k]) for p, k in zip(pos, labels)]
    x = np.stack([a * b / b.sum() for a, b in zip(amps, bumps)])[..., None]
    meta = {"source": "bump_classes", "n": list(shape), "widths": list(widths), "seed": seed}
    return Dataset(x, labels.astype(np.int64), meta)


def gen_shape_pattern(count: int, n, shape_max_freq: int = 1, pattern_freq=(5, 5),
                      seed: int = 0) -> Dataset:
    """Nonnegative low-frequency shapes multiplied by a single-frequency pattern.

    The pattern is ``cos(2 pi <f, i / n> + phase)`` with a random phase; the
    shape only uses frequencies with every component at most ``shape_max_freq``.
    """
    shape = as_shape(n)
    dims = len(shape)
    f = np.atleast_1d(np.asarray(pattern_freq, dtype=int))
    if f.size == 1 and dims > 1:
        f = np.repeat(f, dims)
    if any(2 * int(fi) > ni for fi, ni in zip(f, shape)):
        raise ValueError(f"pattern frequency {tuple(f)} exceeds the Nyquist limit of {shape}")
    rng = np.random.default_rng(seed)
    coords = np.indices(shape).astype(np.float64)
    ks = [k for k in np.ndindex(*([2 * shape_max_freq + 1] * dims))]
    ks = [tuple(v - shape_max_freq for v in k) for k in ks]
    ks = [k for k in ks if any(k)]
    out = []
    for _ in range(count):
        s = np.ones(shape)
        for k in ks:
            amp = rng.normal() * 0.5
            ph = rng.uniform(0, 2 * np.pi)
            s += amp * np.cos(2 * np.pi * sum(k[a] * coords[a] / shape[a] for a in range(dims)) + ph)
        s = s - s.min() if ks else s
        phase = rng.uniform(0, 2 * np.pi)
        pat = np.cos(2 * np.pi * sum(f[a] * coords[a] / shape[a] for a in range(dims)) + phase)
        out.append(s * pat)
    x = np.stack(out)[..., None]
    meta = {"source": "shape_pattern", "n": list(shape), "shape_max_freq": shape_max_freq,
            "pattern_freq": [int(v) for v in f], "seed": seed}
    return Dataset(x, x.copy(), meta)


def ball_positions(p0, v, g, steps: int) -> np.ndarray:
    """``p_t = p0 + t v + t^2 g / 2`` for ``t = 0..steps-1`` (unwrapped)."""
    t = np.arange(steps, dtype=np.float64)[:, None]
    return np.asarray(p0, float)[None] + t * np.asarray(v, float)[None] + 0.5 * t ** 2 * np.asarray(g, float)[None]


def gen_ball_trajectory(count: int, n, frames_in: int = 4, frames_out: int = 4,
                        gravity: float = 0.5, seed: int = 0, width: float = 1.5,
                        max_speed: int = 2) -> Dataset:
    """Dots moving under constant acceleration; frames are stacked as channels.

    Initial positions are integers and velocities are integers in
    ``[-max_speed, max_speed]``; gravity acts along the first axis.
    """
    if frames_in < 1 or frames_out < 1:
        raise ValueError("frames must be positive")
    shape = as_shape(n)
    dims = len(shape)
    rng = np.random.default_rng(seed)
    g = np.zeros(dims)
    g[0] = gravity
    xs, ys, meta_pos = [], [], []
    T = frames_in + frames_out
    for _ in range(count):
        p0 = np.array([rng.integers(0, ni) for ni in shape], dtype=float)
        v = rng.integers(-max_speed, max_speed + 1, size=dims).astype(float)
        pos = ball_positions(p0, v, g, T)
        frames = np.stack([bump(shape, p, width) for p in pos], axis=-1)
        xs.append(frames[..., :frames_in])
        ys.append(frames[..., frames_in:])
        meta_pos.append(pos.tolist())
    meta = {"source": "ball_trajectory", "n": list(shape), "frames_in": frames_in,
            "frames_out": frames_out, "gravity": gravity, "seed": seed, "positions": meta_pos}
    return Dataset(np.stack(xs), np.stack(ys), meta)
