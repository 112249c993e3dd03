"""Compact convolutional target/non-target classifier whose pooled activations feed the FID."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .. import autodiff as ad
from ..autodiff import Adam, ParamStore, Tensor
from ..checkpoint import load_checkpoint, save_checkpoint
from ..epochs import NONTARGET, TARGET, EpochSet
from .lda import balanced_accuracy

POOL = 4


@dataclass
class ExtractorConfig:
    n_channels: int
    n_samples: int
    spatial_filters: int = 8
    temporal_kernel: int = 17
    separable_filters: int = 8
    separable_kernel: int = 5
    input_scale: float = 1.0
    seed: int = 0

    @property
    def pooled_len(self) -> int:
        return self.n_samples // POOL // POOL

    @property
    def feature_dim(self) -> int:
        return self.separable_filters * self.pooled_len


def _avg_pool(x: Tensor, size: int) -> Tensor:
    b, c, t = x.shape
    t_used = t // size * size
    if t_used != t:
        x = x[:, :, :t_used]
    return ad.mean(ad.reshape(x, (b, c, t_used // size, size)), axis=3)


class FeatureExtractor:
    """Spatial mixing -> temporal conv -> pool -> separable temporal conv -> pool -> linear head."""

    def __init__(self, config: ExtractorConfig, store: ParamStore | None = None):
        if config.pooled_len < 1:
            raise ValueError("epochs are too short for two pooling stages")
        self.config = config
        self.store = store if store is not None else self.init_params(np.random.default_rng(config.seed))

    def init_params(self, rng: np.random.Generator) -> ParamStore:
        c = self.config

        def dense(fan_in, *shape):
            return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape).astype(np.float32)

        return ParamStore({
            "spatial.w": dense(c.n_channels, c.spatial_filters, c.n_channels, 1),
            "temporal.w": dense(c.spatial_filters * c.temporal_kernel, c.spatial_filters, c.spatial_filters,
                                c.temporal_kernel),
            "temporal.b": np.zeros(c.spatial_filters, np.float32),
            "separable.w": dense(c.spatial_filters * c.separable_kernel, c.separable_filters, c.spatial_filters,
                                 c.separable_kernel),
            "separable.b": np.zeros(c.separable_filters, np.float32),
            "head.w": dense(c.feature_dim, c.feature_dim, 1),
            "head.b": np.zeros(1, np.float32),
        })

    def _pooled(self, params, x) -> Tensor:
        x = Tensor(np.asarray(x, dtype=np.float32) * np.float32(self.config.input_scale))
        h = ad.conv1d(x, params["spatial.w"])
        h = ad.silu(ad.bias_add(ad.conv1d(h, params["temporal.w"]), params["temporal.b"]))
        h = _avg_pool(h, POOL)
        h = ad.silu(ad.bias_add(ad.conv1d(h, params["separable.w"]), params["separable.b"]))
        h = _avg_pool(h, POOL)
        return ad.reshape(h, (h.shape[0], -1))

    def _logits(self, params, x) -> Tensor:
        f = self._pooled(params, x)
        return ad.reshape(ad.bias_add(ad.matmul(f, params["head.w"]), params["head.b"]), (f.shape[0],))

    def features(self, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        """Activations after the last pooling stage, ``(n, feature_dim)``."""
        x = np.asarray(x)
        if x.ndim != 3 or x.shape[1:] != (self.config.n_channels, self.config.n_samples):
            raise ValueError(f"expected epochs of shape (*, {self.config.n_channels}, {self.config.n_samples})")
        params = self.store.tensors()
        out = [self._pooled(params, x[i:i + batch_size]).data for i in range(0, len(x), batch_size)]
        if not out:
            return np.zeros((0, self.config.feature_dim), np.float32)
        return np.concatenate(out).astype(np.float64)

    def predict(self, x: np.ndarray) -> np.ndarray:
        params = self.store.tensors()
        return (self._logits(params, x).data > 0).astype(np.int64)

    def save(self, path):
        save_checkpoint(path, {"kind": "feature_extractor", "config": asdict(self.config)}, self.store)

    @classmethod
    def load(cls, path) -> "FeatureExtractor":
        meta, store = load_checkpoint(path)
        if meta.get("kind") != "feature_extractor":
            raise ValueError(f"{path} is not a feature-extractor checkpoint")
        return cls(ExtractorConfig(**meta["config"]), store)


def train_feature_extractor(real: EpochSet, seed: int = 0, steps: int = 1500, batch_size: int = 64,
                            lr: float = 2e-3, config: ExtractorConfig | None = None) -> FeatureExtractor:
    """Fit the classifier on target vs non-target with class-balanced loss weights."""
    counts = [int(np.sum(real.classes == c)) for c in (NONTARGET, TARGET)]
    if min(counts) == 0:
        raise ValueError("the feature extractor needs both classes")
    if config is None:
        kernel = max(3, int(round(real.fs / 4)) | 1)
        scale = 1.0 / max(float(real.data.std()), 1e-6)
        config = ExtractorConfig(real.n_channels, real.epoch_len, temporal_kernel=kernel,
                                 input_scale=scale, seed=seed)
    fx = FeatureExtractor(config)
    rng = np.random.default_rng(seed)
    opt = Adam(lr=lr)
    class_weight = np.array([len(real) / (2.0 * counts[0]), len(real) / (2.0 * counts[1])])
    for step in range(steps):
        idx = rng.integers(0, len(real), size=min(batch_size, len(real)))
        y = real.classes[idx]
        params = fx.store.tensors(requires_grad=True)
        loss = ad.bce_with_logits(fx._logits(params, real.data[idx]), y, class_weight[y])
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"feature extractor training diverged at step {step}")
        ad.backward(loss)
        opt.step(fx.store.raw, ad.collect_grads(params))
    # evaluation and feature extraction use the trained weights directly
    fx.store.ema = {k: v.copy() for k, v in fx.store.raw.items()}
    return fx


def extractor_accuracy(fx: FeatureExtractor, epochs: EpochSet) -> float:
    return balanced_accuracy(epochs.classes, fx.predict(epochs.data))
