"""Experiment driver: dataset, training, spectra and bounds written to one directory."""

from __future__ import annotations

import hashlib
import json
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__
from ..bounds import (
    jsonable,
    bounds_report,
    default_probes,
    layer_spectrum_report,
    nonconstant_mass_fraction,
    spectral_concentration,
    spectrum_csv,
)
from ..checkpoint import save_params
from ..cnn_core import NetworkParams, TrainConfig, global_average, init_params, predict, train
from ..te_linalg import as_shape, pooling_operator
from .data import (
    Dataset,
    gen_ball_trajectory,
    gen_bump_classes,
    gen_shape_pattern,
    gen_translated_bumps,
    load_mnist_idx,
)

TASKS = ("autoencode_bumps_1d", "bumps_classify", "mnist_classify", "mnist_zero_autoencode",
         "shape_pattern", "ball_trajectory")


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 1)."""


@dataclass
class ExperimentConfig:
    task: str = "autoencode_bumps_1d"
    n: int | list[int] = 16
    L: int = 8
    channels: int = 16
    pooling: dict = field(default_factory=lambda: {"kind": "blend_avg3", "beta": 0.25})
    lam: float = 1e-3
    lr: float = 1e-2
    steps: int = 5000
    seed: int = 0
    optimizer: str = "momentum"
    momentum: float = 0.9
    init_scale: float = 1.0
    count: int = 32
    data: dict = field(default_factory=dict)
    downsample_layers: list[int] = field(default_factory=list)
    mnist_images: str | None = None
    mnist_labels: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    @property
    def spatial_shape(self) -> tuple[int, ...]:
        if self.task == "shape_pattern" and isinstance(self.n, int):
            return (self.n, self.n)
        if self.task.startswith("mnist"):
            size = self.data.get("downscale_to", 13)
            return (size, size)
        return as_shape(self.n)

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; choose from {TASKS}")
        try:
            shape = self.spatial_shape
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.L < 1:
            raise ConfigError("L must be at least 1")
        if self.channels < 1:
            raise ConfigError("channels must be positive")
        if self.lam < 0 or self.lr <= 0 or self.steps < 0 or self.count < 1:
            raise ConfigError("need lam >= 0, lr > 0, steps >= 0, count >= 1")
        if self.optimizer not in ("gd", "momentum"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.downsample_layers:
            raise ConfigError("in-network down-sampling is not supported by the trainer; "
                              "use the stride-network evaluator for Fourier resampling")
        kind = self.pooling.get("kind", "identity")
        try:
            pooling_operator(kind, float(self.pooling.get("beta", 0.0)), n=shape, m=self.pooling.get("m"))
        except ValueError as exc:
            raise ConfigError(f"pooling: {exc}") from exc
        if self.task == "autoencode_bumps_1d" and len(shape) != 1:
            raise ConfigError("autoencode_bumps_1d needs a 1D size")
        if self.task.startswith("mnist"):
            for p in (self.mnist_images, self.mnist_labels):
                if p is None or not Path(p).exists():
                    raise ConfigError(f"MNIST file not found: {p}")
        if self.task == "shape_pattern":
            f = self.data.get("pattern_freq", 5)
            f = [f] * len(shape) if isinstance(f, int) else list(f)
            if any(2 * fi > ni for fi, ni in zip(f, shape)):
                raise ConfigError("pattern frequency beyond the Nyquist limit")


def build_dataset(cfg: ExperimentConfig) -> tuple[Dataset, str, int, int]:
    """Return ``(dataset, loss, c_in, c_out)``."""
    d = cfg.data
    seed = d.get("seed", cfg.seed)
    shape = cfg.spatial_shape
    if cfg.task == "autoencode_bumps_1d":
        ds = gen_translated_bumps(cfg.count, shape, d.get("width", 2.0), seed)
        return ds, "mse", 1, 1
    if cfg.task == "bumps_classify":
        widths = tuple(d.get("widths", (1.0, 4.0)))
        ds = gen_bump_classes(cfg.count, shape, widths, seed)
        return ds, "softmax_xent", 1, len(widths)
    if cfg.task == "mnist_classify":
        ds = load_mnist_idx(cfg.mnist_images, cfg.mnist_labels, downscale_to=shape[0], limit=cfg.count)
        return ds, "softmax_xent", 1, 10
    if cfg.task == "mnist_zero_autoencode":
        ds = load_mnist_idx(cfg.mnist_images, cfg.mnist_labels, filter_digit=0,
                            downscale_to=shape[0], limit=cfg.count)
        return Dataset(ds.inputs, ds.inputs.copy(), ds.metadata), "mse", 1, 1
    if cfg.task == "shape_pattern":
        ds = gen_shape_pattern(cfg.count, shape, d.get("shape_max_freq", 1), d.get("pattern_freq", 5), seed)
        return ds, "mse", 1, 1
    if cfg.task == "ball_trajectory":
        fi, fo = d.get("frames_in", 4), d.get("frames_out", 4)
        ds = gen_ball_trajectory(cfg.count, shape, fi, fo, d.get("gravity", 0.5), seed,
                                 d.get("width", 1.5), d.get("max_speed", 2))
        return ds, "mse", fi, fo
    raise ConfigError(f"unknown task {cfg.task!r}")


@dataclass
class LayerSummary:
    layer: int
    entries_95: int
    frequencies_95: list
    nonconstant_mass: float


@dataclass
class ExperimentResult:
    params: NetworkParams
    history: object
    report: object
    spectrum: list[dict]
    dataset: Dataset
    layers: list[LayerSummary]
    metrics: dict
    out_dir: Path | None


def summarize_layers(params: NetworkParams, mass: float = 0.95) -> list[LayerSummary]:
    out = []
    for ell in range(1, params.depth + 1):
        c = spectral_concentration(params, ell, mass)
        out.append(LayerSummary(ell, c.count, sorted(c.frequencies), nonconstant_mass_fraction(params, ell)))
    return out


def run_experiment(cfg: ExperimentConfig, out_dir=None, with_bounds: bool = True) -> ExperimentResult:
    """Train according to ``cfg`` and (optionally) write all artifacts to ``out_dir``."""
    cfg.validate()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "FAILED").unlink(missing_ok=True)
    t0 = time.time()
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "code_version": __version__,
        "numpy_version": np.__version__,
        "python": platform.python_version(),
        "seeds": {"init": cfg.seed, "data": cfg.data.get("seed", cfg.seed)},
        "resampling": "none",
        "status": "running",
    }
    try:
        ds, loss, c_in, c_out = build_dataset(cfg)
        shape = cfg.spatial_shape
        pool = pooling_operator(cfg.pooling.get("kind", "identity"), float(cfg.pooling.get("beta", 0.0)),
                                n=shape, m=cfg.pooling.get("m"))
        widths = [c_in] + [cfg.channels] * (cfg.L - 1) + [c_out]
        params = init_params(shape, widths, pool, cfg.init_scale, cfg.seed)
        tc = TrainConfig(lam=cfg.lam, lr=cfg.lr, steps=cfg.steps, optimizer=cfg.optimizer,
                         momentum=cfg.momentum, seed=cfg.seed, init_scale=cfg.init_scale, loss=loss)
        trained, hist = train(params, ds.inputs, ds.targets, tc)
        spectrum = layer_spectrum_report(trained)
        report = None
        if with_bounds:
            report = bounds_report(trained, default_probes(ds.inputs))
        layers = summarize_layers(trained)
        metrics = {"final_objective": hist.loss[-1], "final_data_loss": hist.data_loss[-1],
                   "norm_sq": trained.norm_sq(), "norm_per_layer": trained.norm_sq() / trained.depth}
        if loss == "softmax_xent":
            logits = global_average(predict(trained, ds.inputs), trained.dims)
            metrics["train_accuracy"] = float(np.mean(logits.argmax(axis=1) == ds.targets))
        manifest["dataset"] = {k: v for k, v in ds.metadata.items() if k not in ("positions", "amplitudes")}
        manifest["metrics"] = metrics
        manifest["layers"] = [asdict(s) for s in layers]
        manifest["runtime_seconds"] = time.time() - t0
        manifest["status"] = "ok"
        if out is not None:
            save_params(trained, out / "model.cbn", seed=cfg.seed)
            (out / "history.csv").write_text(hist.to_csv())
            (out / "spectrum.csv").write_text(spectrum_csv(spectrum))
            if report is not None:
                (out / "bounds.json").write_text(report.to_json() + "\n")
            manifest["files"] = ["model.cbn", "history.csv", "spectrum.csv"] + (["bounds.json"] if report else [])
            (out / "manifest.json").write_text(json.dumps(jsonable(manifest), indent=2, sort_keys=True) + "\n")
        return ExperimentResult(trained, hist, report, spectrum, ds, layers, metrics, out)
    except Exception as exc:
        if out is not None:
            manifest["status"] = "failed"
            manifest["error"] = f"{type(exc).__name__}: {exc}"
            manifest["runtime_seconds"] = time.time() - t0
            (out / "manifest.json").write_text(json.dumps(jsonable(manifest), indent=2, sort_keys=True) + "\n")
            (out / "FAILED").write_text(manifest["error"] + "\n")
        raise


def bottleneck_emergence(params: NetworkParams, mass: float = 0.95, max_entries: int = 3) -> dict:
    """Middle-layer concentration summary.

    A middle layer (``2..L-1``) qualifies when ``max_entries`` pooled singular
    values carry ``mass`` of its spectral mass; the retained frequency sets of
    qualifying layers are compared.
    """
    mids = range(2, params.depth)
    quals = []
    for ell in mids:
        c = spectral_concentration(params, ell, mass)
        if c.count <= max_entries:
            quals.append((ell, c.frequencies))
    freq_sets = {fs for _, fs in quals}
    n_mid = len(list(mids))
    return {
        "middle_layers": n_mid,
        "qualifying_layers": [ell for ell, _ in quals],
        "fraction": len(quals) / n_mid if n_mid else 0.0,
        "frequency_sets": [sorted(fs) for fs in freq_sets],
        "identical_frequencies": len(freq_sets) <= 1,
    }
