"""VP-SDE training with condition dropout, classifier-free guidance and predictor-corrector sampling."""
from __future__ import annotations

import csv
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, ParamStore
from .checkpoint import load_checkpoint, save_checkpoint
from .dataio import condition_seed
from .epochs import ConditionKey, EpochSet
from .model import ModelConfig, NetworkDenoiser, ScoreNet

log = logging.getLogger(__name__)

T_EPS = 1e-5
DIVERGENCE_LIMIT = 1e6  # µV

# (x, t, cond_idx) -> predicted noise, all plain arrays
Denoiser = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def n_threads() -> int:
    try:
        return max(1, int(os.environ.get("ERPDIFF_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class VpSchedule:
    beta_min: float = 0.1
    beta_max: float = 20.0

    def __post_init__(self):
        if not 0 < self.beta_min < self.beta_max:
            raise ValueError("need 0 < beta_min < beta_max")

    def beta(self, t):
        return self.beta_min + np.asarray(t, dtype=np.float64) * (self.beta_max - self.beta_min)

    def marginal(self, t):
        """Mean coefficient m(t) and std sigma(t) of the perturbation kernel."""
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0) or np.any(t > 1):
            raise ValueError("diffusion time must lie in [0, 1]")
        log_m = -0.25 * t * t * (self.beta_max - self.beta_min) - 0.5 * t * self.beta_min
        m = np.exp(log_m)
        sigma = np.sqrt(-np.expm1(2.0 * log_m))
        return m, sigma

    def perturb(self, x0: np.ndarray, t, z: np.ndarray) -> np.ndarray:
        m, s = self.marginal(t)
        shape = (-1,) + (1,) * (x0.ndim - 1)
        m = np.reshape(m, shape) if np.ndim(m) else m
        s = np.reshape(s, shape) if np.ndim(s) else s
        return (m * x0 + s * z).astype(x0.dtype)

    def to_dict(self) -> dict:
        return asdict(self)


def marginal(t, schedule: VpSchedule = VpSchedule()):
    return schedule.marginal(t)


@dataclass
class TrainConfig:
    steps: int = 900_000
    batch_size: int = 64
    lr: float = 1e-4
    ema_decay: float = 0.999
    p_uncond: float = 0.1
    eval_every: int = 100_000
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.p_uncond < 1:
            raise ValueError("p_uncond must lie in [0, 1)")
        if self.steps < 1 or self.eval_every < 1 or self.steps % self.eval_every:
            raise ValueError(f"eval_every ({self.eval_every}) must divide steps ({self.steps})")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must lie in [0, 1)")


@dataclass
class SampleConfig:
    n_steps: int = 1000
    guidance_scale: float = 1.0
    corrector_snr: float = 0.16
    corrector_steps: int = 1
    predictor: str = "reverse_diffusion"
    batch_size: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be >= 0")
        if self.corrector_snr <= 0:
            raise ValueError("corrector_snr must be positive")
        if self.corrector_steps < 0:
            raise ValueError("corrector_steps must be >= 0")
        if self.predictor not in PREDICTORS:
            raise ValueError(f"unknown predictor {self.predictor!r}; choose from {sorted(PREDICTORS)}")


class TrainingDivergence(RuntimeError):
    pass


class SamplerDivergence(RuntimeError):
    pass


# ----------------------------------------------------------------------
# training
# ----------------------------------------------------------------------

def train_step(net: ScoreNet, store: ParamStore, opt: Adam, x0: np.ndarray, cond_idx: np.ndarray,
               schedule: VpSchedule, p_uncond: float, rng: np.random.Generator,
               ema_decay: float | None = None) -> float:
    """One denoising-score-matching update; returns the batch loss."""
    bsz = x0.shape[0]
    t = rng.uniform(T_EPS, 1.0, size=bsz)
    z = rng.standard_normal(x0.shape).astype(x0.dtype)
    xt = schedule.perturb(x0, t, z)
    cond_idx = np.array(cond_idx, copy=True)
    if p_uncond > 0:
        drop = rng.random(bsz) < p_uncond
        cond_idx[drop] = net.null_indices(int(drop.sum()))
    params = store.tensors("raw", requires_grad=True)
    loss = ad.mse_loss(net.forward(params, xt, t, cond_idx), z)
    value = float(loss.data)
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite loss (t in [{t.min():.4g}, {t.max():.4g}])")
    ad.backward(loss)
    opt.step(store.raw, ad.collect_grads(params))
    if ema_decay is not None:
        ad.ema_update(store, ema_decay)
    return value


def validation_loss(net: ScoreNet, weights: Mapping[str, np.ndarray], val: EpochSet,
                    schedule: VpSchedule, seed: int, batch_size: int = 256) -> float:
    """Noise-prediction loss on held-out epochs with a fixed noise draw."""
    if len(val) == 0:
        return float("nan")
    rng = np.random.default_rng(seed)
    cond = net.condition_indices([val.condition_of(i) for i in range(len(val))])
    denoise = NetworkDenoiser(net, weights)
    total = 0.0
    for start in range(0, len(val), batch_size):
        x0 = val.data[start:start + batch_size]
        t = rng.uniform(T_EPS, 1.0, size=x0.shape[0])
        z = rng.standard_normal(x0.shape).astype(x0.dtype)
        pred = denoise(schedule.perturb(x0, t, z), t, cond[start:start + batch_size])
        total += float(np.sum((pred - z) ** 2))
    return total / val.data.size


def model_config_for(epochs: EpochSet, base: ModelConfig | None = None) -> ModelConfig:
    """Adapt a model config to the channel count, length and conditions of a dataset."""
    d = (base or ModelConfig()).to_dict()
    d.update(n_channels=epochs.n_channels, n_samples=epochs.epoch_len,
             subject_ids=epochs.subject_ids, session_ids=epochs.session_ids)
    return ModelConfig.from_dict(d)


def checkpoint_config(model_cfg: ModelConfig, schedule: VpSchedule, step: int, extra: dict | None = None) -> dict:
    cfg = {"kind": "score_model", "model": model_cfg.to_dict(), "schedule": schedule.to_dict(), "step": step}
    if extra:
        cfg.update(extra)
    return cfg


@dataclass
class TrainResult:
    store: ParamStore
    net: ScoreNet
    history: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def train(train_set: EpochSet, model_cfg: ModelConfig, cfg: TrainConfig, schedule: VpSchedule = VpSchedule(),
          val_set: EpochSet | None = None, out_dir=None, on_eval: Callable | None = None,
          log_every: int = 0, meta: dict | None = None) -> TrainResult:
    """Train the score network; checkpoint and log every ``cfg.eval_every`` steps.

    ``on_eval(step, result)`` is invoked after each checkpoint. ``meta`` is
    merged into every checkpoint header.
    """
    rng = np.random.default_rng(cfg.seed)
    net = ScoreNet(model_cfg)
    store = net.init_params(np.random.default_rng(condition_seed(cfg.seed, 1)))
    opt = Adam(lr=cfg.lr)
    cond_all = net.condition_indices([train_set.condition_of(i) for i in range(len(train_set))])
    result = TrainResult(store, net)
    out_dir = Path(out_dir) if out_dir is not None else None
    log_rows: list[dict] = []
    recent: list[float] = []
    start = time.perf_counter()
    n = len(train_set)
    if n == 0:
        raise ValueError("training set is empty")
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, n, size=min(cfg.batch_size, n))
        try:
            loss = train_step(net, store, opt, train_set.data[idx], cond_all[idx], schedule,
                              cfg.p_uncond, rng, cfg.ema_decay)
        except FloatingPointError as exc:
            raise TrainingDivergence(
                f"training diverged at step {step}: {exc}; recent losses {recent[-10:]}"
            ) from None
        recent.append(loss)
        if log_every and step % log_every == 0:
            log.info("step %d loss %.5f", step, float(np.mean(recent[-log_every:])))
        if step % cfg.eval_every == 0:
            val = validation_loss(net, store.ema, val_set, schedule, cfg.seed) if val_set is not None else float("nan")
            row = {"step": step, "loss": float(np.mean(recent)), "val_loss": val,
                   "wall_time": time.perf_counter() - start}
            recent = []
            log_rows.append(row)
            result.history.append(row)
            if out_dir is not None:
                path = out_dir / f"ckpt_{step:08d}.erpd"
                save_checkpoint(path, checkpoint_config(model_cfg, schedule, step, {"train": asdict(cfg), **(meta or {})}), store)
                result.checkpoints.append(path)
                write_train_log(out_dir / "train_log.csv", log_rows)
            if on_eval is not None:
                on_eval(step, result)
    return result


def write_train_log(path, rows: Sequence[dict]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss", "val_loss", "wall_time"])
        for r in rows:
            writer.writerow([r["step"], f"{r['loss']:.8g}", f"{r['val_loss']:.8g}", f"{r['wall_time']:.3f}"])


def load_model(path) -> tuple[ScoreNet, ParamStore, VpSchedule, dict]:
    config, store = load_checkpoint(path)
    if config.get("kind") != "score_model":
        raise ValueError(f"{path} is not a score-model checkpoint")
    net = ScoreNet(ModelConfig.from_dict(config["model"]))
    return net, store, VpSchedule(**config["schedule"]), config


# ----------------------------------------------------------------------
# guidance and sampling
# ----------------------------------------------------------------------

def guided_eps(denoiser: Denoiser, x: np.ndarray, t, cond_idx: np.ndarray, w: float,
               null_idx: np.ndarray | None = None) -> np.ndarray:
    """Classifier-free guidance: eps_c + w * (eps_c - eps_null), i.e. (1+w) eps_c - w eps_null."""
    eps_c = denoiser(x, t, cond_idx)
    if w == 0:
        return eps_c
    if null_idx is None:
        null_idx = denoiser.null_indices(x.shape[0])
    eps_u = denoiser(x, t, null_idx)
    return eps_c + w * (eps_c - eps_u)


def _reverse_diffusion(x, score, beta_dt, z):
    mean = (2.0 - np.sqrt(1.0 - beta_dt)) * x + beta_dt * score
    return mean + np.sqrt(beta_dt) * z, mean


def _ancestral(x, score, beta_dt, z):
    mean = (x + beta_dt * score) / np.sqrt(1.0 - beta_dt)
    return mean + np.sqrt(beta_dt) * z, mean


def _euler_maruyama(x, score, beta_dt, z):
    mean = x + (0.5 * beta_dt) * x + beta_dt * score
    return mean + np.sqrt(beta_dt) * z, mean


PREDICTORS = {
    "reverse_diffusion": _reverse_diffusion,
    "ancestral": _ancestral,
    "euler_maruyama": _euler_maruyama,
}


def time_grid(n_steps: int, t_eps: float = T_EPS) -> tuple[np.ndarray, float]:
    """Descending sampling times from 1 to ``t_eps`` and the step length ``1 / n_steps``."""
    return np.linspace(1.0, t_eps, n_steps), 1.0 / n_steps


def pc_sample(denoiser: Denoiser, cond_idx: np.ndarray, shape: tuple[int, ...], cfg: SampleConfig,
              schedule: VpSchedule = VpSchedule(), rng: np.random.Generator | None = None,
              dtype=np.float32, null_idx: np.ndarray | None = None) -> np.ndarray:
    """Predictor-corrector sampling of ``len(cond_idx)`` epochs of ``shape``.

    Each step runs the predictor at ``t_i`` followed by ``corrector_steps``
    Langevin updates at the next grid time, with step size
    ``2 * (snr * |z| / |score|)**2``; the norms are per-sample L2 norms
    averaged over the batch.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    cond_idx = np.asarray(cond_idx)
    n = cond_idx.shape[0]
    if null_idx is None and cfg.guidance_scale != 0:
        null_idx = denoiser.null_indices(n)
    predictor = PREDICTORS[cfg.predictor]
    ts, dt = time_grid(cfg.n_steps)
    if cfg.predictor != "euler_maruyama" and schedule.beta_max * dt >= 1.0:
        raise ValueError(f"the {cfg.predictor} predictor needs n_steps > beta_max ({schedule.beta_max:g}), "
                         f"got {cfg.n_steps}")
    x = rng.standard_normal((n,) + tuple(shape)).astype(dtype)
    axes = tuple(range(1, x.ndim))

    def score(x, t):
        _, sigma = schedule.marginal(t)
        eps = guided_eps(denoiser, x, np.full(n, t), cond_idx, cfg.guidance_scale, null_idx)
        return -eps / sigma

    for i, t in enumerate(ts):
        beta_dt = float(schedule.beta(t)) * dt
        z = rng.standard_normal(x.shape).astype(dtype)
        x, _ = predictor(x, score(x, t), beta_dt, z)
        t_next = ts[i + 1] if i + 1 < len(ts) else ts[-1]
        for _ in range(cfg.corrector_steps):
            s = score(x, t_next)
            z = rng.standard_normal(x.shape).astype(dtype)
            z_norm = np.mean(np.sqrt(np.sum(z.astype(np.float64) ** 2, axis=axes)))
            s_norm = np.mean(np.sqrt(np.sum(s.astype(np.float64) ** 2, axis=axes)))
            if s_norm == 0.0:
                continue  # a zero score carries no direction and the step size is unbounded
            delta = 2.0 * (cfg.corrector_snr * z_norm / s_norm) ** 2
            x = (x + delta * s + math.sqrt(2.0 * delta) * z).astype(dtype)
        peak = float(np.max(np.abs(x))) if x.size else 0.0
        if not math.isfinite(peak) or peak > DIVERGENCE_LIMIT:
            raise SamplerDivergence(
                f"sampler diverged at step {i + 1}/{cfg.n_steps} (t={t:.5f}): max |x| = {peak:.4g}"
            )
    return x


def sample_condition(net: ScoreNet, weights: Mapping[str, np.ndarray], key: ConditionKey, count: int,
                     cfg: SampleConfig, schedule: VpSchedule) -> np.ndarray:
    """``count`` epochs for one condition, drawn in batches from a condition-specific stream."""
    denoiser = NetworkDenoiser(net, weights)
    rng = np.random.default_rng(condition_seed(cfg.seed, key.subject, key.session, key.cls))
    idx = net.condition_indices([key])
    shape = (net.config.n_channels, net.config.n_samples)
    chunks = []
    for start in range(0, count, cfg.batch_size):
        m = min(cfg.batch_size, count - start)
        chunks.append(pc_sample(denoiser, np.repeat(idx, m, axis=0), shape, cfg, schedule, rng))
    if not chunks:
        return np.zeros((0,) + shape, dtype=np.float32)
    return np.concatenate(chunks)


def sample_matched(real: EpochSet, net: ScoreNet, weights: Mapping[str, np.ndarray], cfg: SampleConfig,
                   schedule: VpSchedule = VpSchedule(), counts: Mapping[ConditionKey, int] | None = None) -> EpochSet:
    """Generate exactly as many epochs per condition as ``real`` holds (or ``counts`` says)."""
    counts = dict(counts) if counts is not None else real.counts()
    keys = sorted(counts)
    net.condition_indices(keys)  # fail early on conditions the model cannot express
    if not keys:
        return EpochSet.empty(real.layout, real.epoch_len, real.fs)

    def job(key):
        return sample_condition(net, weights, key, counts[key], cfg, schedule)

    with ThreadPoolExecutor(max_workers=n_threads()) as pool:
        arrays = list(pool.map(job, keys))
    subjects, sessions, classes = [], [], []
    for key in keys:
        subjects += [key.subject] * counts[key]
        sessions += [key.session] * counts[key]
        classes += [key.cls] * counts[key]
    return EpochSet(np.concatenate(arrays), subjects, sessions, classes, real.fs, real.layout)
