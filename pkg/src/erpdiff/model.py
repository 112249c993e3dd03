"""Conditional noise-prediction network (dilated residual stack, WaveNet-style gating)."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .epochs import ConditionKey


@dataclass
class ModelConfig:
    n_channels: int = 19
    n_samples: int = 128
    n_blocks: int = 8
    residual_channels: int = 64
    skip_channels: int = 64
    kernel_size: int = 3
    dilation_cycle: tuple[int, ...] = (1, 2, 4, 8)
    time_embed_dim: int = 128
    cond_embed_dim: int = 64
    subject_ids: tuple[int, ...] = (1,)
    session_ids: tuple[int, ...] = (1, 2)
    n_classes: int = 2
    pos_channels: int = 8
    time_scale: float = 1000.0

    def __post_init__(self):
        self.dilation_cycle = tuple(int(d) for d in self.dilation_cycle)
        self.subject_ids = tuple(int(s) for s in self.subject_ids)
        self.session_ids = tuple(int(s) for s in self.session_ids)
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        if not self.dilation_cycle or min(self.dilation_cycle) < 1:
            raise ValueError("dilation_cycle must hold positive integers")
        if len(set(self.subject_ids)) != len(self.subject_ids):
            raise ValueError("duplicate subject ids")
        for name in ("n_channels", "n_samples", "n_blocks", "residual_channels", "skip_channels",
                     "cond_embed_dim", "n_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def n_subjects(self) -> int:
        return len(self.subject_ids)

    @property
    def n_sessions(self) -> int:
        return len(self.session_ids)

    def dilation(self, block: int) -> int:
        return self.dilation_cycle[block % len(self.dilation_cycle)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilation_cycle"] = list(self.dilation_cycle)
        d["subject_ids"] = list(self.subject_ids)
        d["session_ids"] = list(self.session_ids)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def parameter_count(self) -> int:
        """Closed-form number of scalar parameters.

        input projection  R(C+P) + R
        time MLP          2(D_t^2 + D_t)
        condition tables  (n_subj+1 + n_sess+1 + n_cls+1) D_c
        each block        2R*R*K + 2R + 2R(D_t + D_c) + 2R + (R+S)R + (R+S)
        output head       S^2 + S + C*S + C
        """
        C, P, R, S, K = self.n_channels, self.pos_channels, self.residual_channels, self.skip_channels, self.kernel_size
        Dt, Dc = self.time_embed_dim, self.cond_embed_dim
        total = R * (C + P) + R
        total += 2 * (Dt * Dt + Dt)
        total += (self.n_subjects + 1 + self.n_sessions + 1 + self.n_classes + 1) * Dc
        block = 2 * R * R * K + 2 * R + 2 * R * (Dt + Dc) + 2 * R + (R + S) * R + (R + S)
        total += self.n_blocks * block
        total += S * S + S + C * S + C
        return total


def sinusoidal_time(t, dim: int, scale: float = 1000.0) -> np.ndarray:
    """Raw sinusoidal features of continuous time, shape ``(len(t), dim)``.

    The first half holds ``sin(tau * f_i)``, the second ``cos(tau * f_i)`` with
    ``tau = scale * t`` and ``f_i = 10000 ** (-2 i / dim)``.
    """
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("diffusion time must lie in [0, 1]")
    half = dim // 2
    freqs = 10000.0 ** (-2.0 * np.arange(half) / dim)
    arg = (scale * t)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def positional_channels(n_channels: int, n_samples: int) -> np.ndarray:
    """Fixed cosine basis over sample index, ``(n_channels, n_samples)``."""
    n = np.arange(n_samples) + 0.5
    k = np.arange(1, n_channels + 1)[:, None]
    return np.cos(np.pi * k * n[None, :] / n_samples)


class ScoreNet:
    """Predicts the noise added to an epoch at diffusion time ``t`` under a condition."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self._pos = positional_channels(config.pos_channels, config.n_samples)
        self._subject_index = {s: i for i, s in enumerate(config.subject_ids)}
        self._session_index = {s: i for i, s in enumerate(config.session_ids)}

    # -- parameters ----------------------------------------------------
    def init_params(self, rng: np.random.Generator, dtype=np.float32) -> ParamStore:
        c = self.config
        C, P, R, S, K = c.n_channels, c.pos_channels, c.residual_channels, c.skip_channels, c.kernel_size
        Dt, Dc = c.time_embed_dim, c.cond_embed_dim

        def dense(fan_in, *shape):
            return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)

        p: dict[str, np.ndarray] = {
            "input.w": dense(C + P, R, C + P, 1),
            "input.b": np.zeros(R),
            "time.w1": dense(Dt, Dt, Dt),
            "time.b1": np.zeros(Dt),
            "time.w2": dense(Dt, Dt, Dt),
            "time.b2": np.zeros(Dt),
            "cond.subject": rng.normal(0.0, 1.0, size=(c.n_subjects + 1, Dc)),
            "cond.session": rng.normal(0.0, 1.0, size=(c.n_sessions + 1, Dc)),
            "cond.class": rng.normal(0.0, 1.0, size=(c.n_classes + 1, Dc)),
        }
        for i in range(c.n_blocks):
            p[f"block{i}.dil.w"] = dense(R * K, 2 * R, R, K)
            p[f"block{i}.dil.b"] = np.zeros(2 * R)
            p[f"block{i}.time.w"] = dense(Dt, Dt, 2 * R)
            p[f"block{i}.cond.w"] = dense(Dc, Dc, 2 * R)
            p[f"block{i}.emb.b"] = np.zeros(2 * R)
            p[f"block{i}.out.w"] = dense(R, R + S, R, 1)
            p[f"block{i}.out.b"] = np.zeros(R + S)
        p["head.w1"] = dense(S, S, S, 1)
        p["head.b1"] = np.zeros(S)
        p["head.w2"] = np.zeros((C, S, 1))
        p["head.b2"] = np.zeros(C)
        return ParamStore({k: v.astype(dtype) for k, v in p.items()})

    # -- conditioning --------------------------------------------------
    def condition_indices(self, keys: Sequence[ConditionKey]) -> np.ndarray:
        """Embedding-row indices ``(n, 3)`` for subject, session and class."""
        c = self.config
        out = np.empty((len(keys), 3), dtype=np.int64)
        for row, key in enumerate(keys):
            if key.is_unconditional:
                out[row] = (c.n_subjects, c.n_sessions, c.n_classes)
                continue
            try:
                out[row] = (self._subject_index[key.subject], self._session_index[key.session], key.cls)
            except KeyError:
                raise ValueError(f"condition {key} is outside the model's embedding ranges") from None
            if not 0 <= key.cls < c.n_classes:
                raise ValueError(f"class {key.cls} outside the model's {c.n_classes} classes")
        return out

    def null_indices(self, n: int) -> np.ndarray:
        c = self.config
        return np.tile(np.array([c.n_subjects, c.n_sessions, c.n_classes], dtype=np.int64), (n, 1))

    def embed_condition(self, params: Mapping, cond_idx: np.ndarray) -> Tensor:
        cond_idx = np.asarray(cond_idx, dtype=np.int64).reshape(-1, 3)
        return ad.add(
            ad.add(ad.embedding(params["cond.subject"], cond_idx[:, 0]),
                   ad.embedding(params["cond.session"], cond_idx[:, 1])),
            ad.embedding(params["cond.class"], cond_idx[:, 2]),
        )

    def embed_time(self, params: Mapping, t) -> Tensor:
        c = self.config
        dtype = params["time.w1"].dtype if not isinstance(params["time.w1"], Tensor) else params["time.w1"].data.dtype
        raw = Tensor(sinusoidal_time(t, c.time_embed_dim, c.time_scale).astype(dtype))
        h = ad.silu(ad.bias_add(ad.matmul(raw, params["time.w1"]), params["time.b1"]))
        return ad.silu(ad.bias_add(ad.matmul(h, params["time.w2"]), params["time.b2"]))

    # -- forward -------------------------------------------------------
    def forward(self, params: Mapping, x, t, cond_idx) -> Tensor:
        """Predicted noise for a batch ``x`` of shape ``(B, C, T)``.

        ``params`` maps names to arrays or :class:`Tensor` leaves; ``t`` is a
        scalar or ``(B,)`` array of diffusion times; ``cond_idx`` is the
        ``(B, 3)`` output of :meth:`condition_indices`.
        """
        c = self.config
        x = ad.as_tensor(x)
        if x.ndim != 3 or x.shape[1:] != (c.n_channels, c.n_samples):
            raise ValueError(f"expected input (B, {c.n_channels}, {c.n_samples}), got {x.shape}")
        bsz = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (bsz,))
        R = c.residual_channels

        pos = Tensor(np.broadcast_to(self._pos.astype(x.dtype), (bsz,) + self._pos.shape))
        h = ad.concat([x, pos], axis=1)
        h = ad.silu(ad.bias_add(ad.conv1d(h, params["input.w"]), params["input.b"]))
        temb = self.embed_time(params, t)
        cemb = self.embed_condition(params, cond_idx)

        skips = None
        inv_sqrt2 = 1.0 / math.sqrt(2.0)
        for i in range(c.n_blocks):
            y = ad.bias_add(ad.conv1d(h, params[f"block{i}.dil.w"], c.dilation(i)), params[f"block{i}.dil.b"])
            proj = ad.add(ad.matmul(temb, params[f"block{i}.time.w"]), ad.matmul(cemb, params[f"block{i}.cond.w"]))
            proj = ad.bias_add(proj, params[f"block{i}.emb.b"])
            y = ad.add(y, ad.reshape(proj, (bsz, 2 * R, 1)))
            gated = ad.mul(ad.tanh(y[:, :R]), ad.sigmoid(y[:, R:]))
            o = ad.bias_add(ad.conv1d(gated, params[f"block{i}.out.w"]), params[f"block{i}.out.b"])
            h = ad.mul(ad.add(h, o[:, :R]), inv_sqrt2)
            skips = o[:, R:] if skips is None else ad.add(skips, o[:, R:])

        s = ad.mul(skips, 1.0 / math.sqrt(c.n_blocks))
        s = ad.silu(ad.bias_add(ad.conv1d(s, params["head.w1"]), params["head.b1"]))
        return ad.bias_add(ad.conv1d(s, params["head.w2"]), params["head.b2"])


class NetworkDenoiser:
    """Callable ``(x, t, cond_idx) -> eps`` over plain arrays, for sampling."""

    def __init__(self, net: ScoreNet, weights: Mapping[str, np.ndarray]):
        self.net = net
        self.weights = {k: Tensor(v) for k, v in weights.items()}

    def __call__(self, x: np.ndarray, t, cond_idx: np.ndarray) -> np.ndarray:
        return self.net.forward(self.weights, x, t, cond_idx).data

    def null_indices(self, n: int) -> np.ndarray:
        return self.net.null_indices(n)
