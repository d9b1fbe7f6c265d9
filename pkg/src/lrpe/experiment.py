"""Experiment configuration and the phantom -> scan -> reconstruct -> score pipeline."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import classical, io, metrics, nn
from . import phantoms as ph
from .certify import certify, sample_inputs_along_path
from .equilibrium import (LRPEConfig, ScanOperators, TrainConfig, load_checkpoint, lrpe_infer,
                          lrpe_train, prepare_dataset, save_checkpoint)
from .tomo import GeometryConfig, forward_project

log = logging.getLogger(__name__)

METHODS = ("fbp", "tv", "grad", "lrpe")
CSV_HEADER = ["method", "psnr_db", "ssim", "runtime_s"]


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    # geometry
    fine_size: int = 32
    coarse_size: int = 16
    mode: str = "sparse_view"
    views: int = 30
    angular_range: float = 180.0
    beam: str = "parallel"
    source_radius: float = 0.0
    fov_radius: float = math.sqrt(2.0)
    num_bins: int = 0
    detector_spacing: float = 0.0
    # data
    phantom: str = "random"
    phantom_seed: int = 10_000
    test_count: int = 1
    noise_kind: str = "gaussian_percent"
    noise_level: float = 0.05
    noiseless: bool = False
    seed: int = 0
    # classical
    fbp_window: str = "ramlak"
    tv_lam: float = 0.01
    tv_iters: int = 300
    prior_lam: float = 0.02
    prior_iters: int = 200
    # learned
    stages: int = 10
    eta: float = 0.1
    n_p: int = 5
    fidelity: str = "learned"
    tolerance: float = 0.0
    lrpe_checkpoint: str = ""
    grad_checkpoint: str = ""
    # training
    train_count: int = 20
    train_seed_offset: int = 100
    epochs: int = 200
    lr_init: float = 1e-4
    adam_beta: float = 0.99
    adam_beta2: float = 0.999
    grad_clip_norm: float = 1.0
    batch_size: int = 1
    train_seed: int = 0
    # output
    output_dir: str = "out"
    methods: str = "fbp,tv,grad,lrpe"
    record_runtime: bool = False
    certify_samples: int = 4

    def __post_init__(self):
        if self.mode not in ("sparse_view", "limited_angle"):
            raise ConfigError(f"unknown scan mode {self.mode!r}")
        full = 360.0 if self.beam == "fan" else 180.0
        if self.mode == "sparse_view" and self.angular_range != full:
            raise ConfigError(f"sparse_view scans cover the full {full:g} degrees")
        if self.mode == "limited_angle" and not 0 < self.angular_range < full:
            raise ConfigError(f"limited_angle range must lie in (0, {full:g})")
        for m in self.method_list():
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}")
        if self.test_count < 1 or self.train_count < 1:
            raise ConfigError("test_count and train_count must be >= 1")

    def method_list(self) -> list[str]:
        return [m.strip() for m in self.methods.split(",") if m.strip()]

    # -- construction -----------------------------------------------------------

    @classmethod
    def from_mapping(cls, items: dict) -> "ExperimentConfig":
        defaults = cls()
        known = {f.name for f in fields(cls)}
        kw = {}
        for key, raw in items.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kind = type(getattr(defaults, key))
            try:
                if kind is bool:
                    kw[key] = _parse_bool(str(raw))
                elif kind is int:
                    kw[key] = int(str(raw))
                elif kind is float:
                    kw[key] = float(str(raw))
                else:
                    kw[key] = str(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
        return cls(**kw)

    @classmethod
    def load(cls, path=None, overrides=()) -> "ExperimentConfig":
        """Read a key-value file (optional) and apply ``key=value`` overrides."""
        items = dict(io.read_kv(path)) if path else {}
        for ov in overrides:
            if "=" not in ov:
                raise ConfigError(f"override must be key=value, got {ov!r}")
            k, v = ov.split("=", 1)
            items[k.strip()] = v.strip()
        return cls.from_mapping(items)

    def to_mapping(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def geometry(self) -> GeometryConfig:
        base = GeometryConfig.covering(self.fine_size, self.coarse_size, self.views,
                                       fov_radius=self.fov_radius)
        return GeometryConfig(
            fine_size=self.fine_size, coarse_size=self.coarse_size, num_views=self.views,
            num_bins=self.num_bins or base.num_bins, angle_start=0.0,
            angle_end=self.angular_range, beam=self.beam, source_radius=self.source_radius,
            detector_spacing=self.detector_spacing or base.detector_spacing,
            fov_radius=self.fov_radius)

    def lrpe_config(self, use_prior: bool = True) -> LRPEConfig:
        return LRPEConfig(stages=self.stages, eta=self.eta, n_p=self.n_p, fidelity=self.fidelity,
                          use_prior=use_prior, tolerance=self.tolerance)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, lr_init=self.lr_init, adam_beta=self.adam_beta,
                           adam_beta2=self.adam_beta2, grad_clip_norm=self.grad_clip_norm,
                           batch_size=self.batch_size, seed=self.train_seed)

    def tv_params(self) -> classical.TVParams:
        return classical.TVParams(lam=self.tv_lam, iters=self.tv_iters)

    def operators(self) -> ScanOperators:
        return ScanOperators(self.geometry(),
                             prior_params=classical.TVParams(lam=self.prior_lam, iters=self.prior_iters))


# -- data -------------------------------------------------------------------------

def make_phantom(cfg: ExperimentConfig, seed: int) -> np.ndarray:
    n = cfg.fine_size
    if cfg.phantom == "random":
        return ph.random_phantom(seed, n)
    if cfg.phantom == "shepp_logan":
        return ph.rasterize_phantom(ph.SHEPP_LOGAN, n)
    if cfg.phantom == "disk":
        return ph.rasterize_phantom(ph.EllipsePhantomSpec((ph.Ellipse(0, 0, 0.6, 0.6, 0, 1.0),)), n)
    if cfg.phantom.startswith("file:"):
        return ph.rasterize_phantom(ph.read_phantom_spec(cfg.phantom[5:]), n)
    raise ConfigError(f"unknown phantom {cfg.phantom!r}")


def simulate(cfg: ExperimentConfig, ops: ScanOperators, phantom_seed: int):
    """Ground truth and (noisy) sinogram for one phantom seed."""
    u = make_phantom(cfg, phantom_seed)
    b = forward_project(ops.A, u)
    if not cfg.noiseless:
        noise_seed = cfg.seed * 1_000_003 + phantom_seed
        b = ph.add_noise(b, ph.NoiseSpec(cfg.noise_kind, cfg.noise_level, noise_seed))
    return u, b


def training_set(cfg: ExperimentConfig, ops: ScanOperators):
    return [simulate(cfg, ops, cfg.train_seed_offset + i) for i in range(cfg.train_count)]


def evaluation_set(cfg: ExperimentConfig, ops: ScanOperators):
    return [simulate(cfg, ops, cfg.phantom_seed + i) for i in range(cfg.test_count)]


def tune_tv_lambda(cfg: ExperimentConfig, ops: ScanOperators, candidates, data=None) -> float:
    """Pick the TV weight with the best mean PSNR on the training phantoms."""
    data = training_set(cfg, ops) if data is None else data
    best, best_lam = -math.inf, None
    for lam in candidates:
        p = classical.TVParams(lam=lam, iters=cfg.tv_iters)
        score = np.mean([metrics.psnr(classical.tv_reconstruct(b, ops.A, p).image, u)
                         for u, b in data])
        log.info("tv lam %g: %.3f dB", lam, score)
        if score > best:
            best, best_lam = score, lam
    return best_lam


def train_model(cfg: ExperimentConfig, ops: ScanOperators, use_prior: bool = True,
                data=None, callback=None):
    """Train LRPE (or GRAD when ``use_prior`` is off) on the configured phantom set."""
    data = training_set(cfg, ops) if data is None else data
    lcfg = cfg.lrpe_config(use_prior)
    prepared = prepare_dataset(data, ops, lcfg)
    w0 = nn.xavier_init(cfg.train_seed, cfg.n_p)
    return lrpe_train(prepared, w0, lcfg, cfg.train_config(), ops, callback)


# -- run --------------------------------------------------------------------------

@dataclass
class MetricsRow:
    method: str
    psnr_db: float
    ssim: float
    runtime_s: float


@dataclass
class ExperimentResult:
    rows: list[MetricsRow]
    skipped: dict[str, str] = field(default_factory=dict)
    per_sample: dict[str, list[float]] = field(default_factory=dict)
    output_dir: Path | None = None


def _load_model(path: str, cfg: ExperimentConfig, geom: GeometryConfig):
    if not path:
        return None, "no checkpoint configured"
    p = Path(path)
    if not p.exists():
        return None, f"checkpoint not found: {path}"
    w, meta = load_checkpoint(p)
    if w.n_p != cfg.n_p:
        return None, f"checkpoint n_p={w.n_p} does not match config n_p={cfg.n_p}"
    if meta.get("geometry_hash") not in (None, geom.content_hash()):
        log.warning("checkpoint %s was trained on a different geometry", path)
    return w, ""


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(CSV_HEADER)
        for r in rows:
            wr.writerow([r.method, f"{r.psnr_db:.6f}", f"{r.ssim:.6f}", f"{r.runtime_s:.3f}"])


def read_metrics_csv(path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        if next(rd) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header")
        return [MetricsRow(m, float(p), float(s), float(t)) for m, p, s, t in rd]


def _write_trace(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["stage", "residual", "psnr_db"])
        for k, r in enumerate(trace.residuals):
            p = trace.psnr[k] if k < len(trace.psnr) else ""
            wr.writerow([k + 1, repr(r), "" if p == "" else repr(p)])


def run_experiment(cfg: ExperimentConfig, ops: ScanOperators | None = None,
                   models: dict | None = None, write: bool = True) -> ExperimentResult:
    """Reconstruct every test phantom with each configured method and score it.

    ``models`` may map ``"lrpe"``/``"grad"`` to in-memory weights, bypassing
    the checkpoint paths.
    """
    ops = ops if ops is not None else cfg.operators()
    geom = ops.geom
    out = Path(cfg.output_dir)
    if write:
        out.mkdir(parents=True, exist_ok=True)
    models = dict(models or {})
    skipped = {}
    for name, path in (("lrpe", cfg.lrpe_checkpoint), ("grad", cfg.grad_checkpoint)):
        if name in cfg.method_list() and name not in models:
            w, why = _load_model(path, cfg, geom)
            if w is None:
                skipped[name] = why
                log.warning("skipping %s: %s", name, why)
            else:
                models[name] = w
    methods = [m for m in cfg.method_list() if m not in skipped]
    data = evaluation_set(cfg, ops)
    scores = {m: ([], [], []) for m in methods}
    first = {}
    traces = {}
    for idx, (u, b) in enumerate(data):
        prior = None
        for m in methods:
            t0 = time.perf_counter()
            if m == "fbp":
                img = classical.fbp(b, geom, window=cfg.fbp_window)
            elif m == "tv":
                img = classical.tv_reconstruct(b, ops.A, cfg.tv_params()).image
            else:
                lcfg = cfg.lrpe_config(use_prior=(m == "lrpe"))
                if m == "lrpe" and prior is None:
                    prior = ops.prior_image(b)
                p = prior if m == "lrpe" else np.zeros_like(u)
                img, trace = lrpe_infer(b, models[m], ops, lcfg, truth=u, prior=p)
                if idx == 0:
                    traces[m] = (trace, p)
            dt = time.perf_counter() - t0
            scores[m][0].append(metrics.psnr(img, u))
            scores[m][1].append(metrics.ssim(img, u) if min(u.shape) >= 11 else math.nan)
            scores[m][2].append(dt)
            if idx == 0:
                first[m] = img
    rows = [MetricsRow(m, float(np.mean(scores[m][0])), float(np.mean(scores[m][1])),
                       float(np.mean(scores[m][2])) if cfg.record_runtime else 0.0)
            for m in methods]
    result = ExperimentResult(rows, skipped, {m: scores[m][0] for m in methods},
                              out if write else None)
    if write:
        u0, b0 = data[0]
        io.write_image(out / "truth.lrim", u0)
        io.write_pgm(out / "truth.pgm", u0)
        io.write_sinogram(out / "sinogram.lrsg", b0)
        for m, img in first.items():
            io.write_image(out / f"{m}.lrim", img)
            io.write_pgm(out / f"{m}.pgm", img)
        for m, (trace, _) in traces.items():
            _write_trace(out / f"{m}_trace.csv", trace)
        if "lrpe" in traces:
            lcfg = cfg.lrpe_config(True)
            samples = sample_inputs_along_path(b0, traces["lrpe"][1], models["lrpe"], lcfg, ops.A,
                                               count=cfg.certify_samples, seed=cfg.seed)
            certify(ops.A, models["lrpe"], lcfg, samples, seed=cfg.seed).write(
                out / "certificate.txt", out / "certificate_eps.csv")
        write_metrics_csv(out / "metrics.csv", rows)
        if skipped:
            io.write_kv(out / "skipped.txt", skipped)
        io.write_kv(out / "config.txt", {**cfg.to_mapping(), "psnr_peak": 1.0,
                                          "geometry_hash": geom.content_hash()})
    return result


def save_model(path, w, cfg: ExperimentConfig, use_prior: bool = True) -> None:
    save_checkpoint(path, w, cfg.lrpe_config(use_prior), cfg.geometry(), cfg.train_seed)
