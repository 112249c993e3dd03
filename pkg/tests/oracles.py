"""Independent reference computations used by both the unit and acceptance tests."""
import math

import numpy as np

from erpdiff.diffusion import VpSchedule


def analog_bandpass_gain(f, lo, hi, order, fs):
    """|H| of the analog Butterworth bandpass after bilinear pre-warping of all frequencies."""
    warp = lambda v: 2 * fs * np.tan(np.pi * v / fs)  # noqa: E731
    w, w1, w2 = warp(f), warp(lo), warp(hi)
    w0sq, bw = w1 * w2, w2 - w1
    return 1.0 / np.sqrt(1.0 + ((w * w - w0sq) / (w * bw)) ** (2 * order))


def steady_amplitude(y, fs, f):
    """Amplitude of the ``f`` Hz component over the middle half of ``y`` (least squares)."""
    n = len(y)
    sl = slice(n // 4, 3 * n // 4)
    t = np.arange(n)[sl] / fs
    basis = np.stack([np.sin(2 * np.pi * f * t), np.cos(2 * np.pi * f * t)], axis=1)
    coef, *_ = np.linalg.lstsq(basis, y[sl], rcond=None)
    return float(np.hypot(*coef))


class GaussianDenoiser:
    """Exact noise predictor for 1-D data N(mu, s^2) under the VP perturbation kernel."""

    def __init__(self, mu=3.0, s=0.5, schedule=VpSchedule()):
        self.mu, self.s, self.schedule = mu, s, schedule

    def __call__(self, x, t, cond_idx):
        m, sigma = self.schedule.marginal(np.asarray(t))
        m = np.reshape(m, (-1,) + (1,) * (x.ndim - 1))
        sigma = np.reshape(sigma, m.shape)
        var = m * m * self.s ** 2 + sigma * sigma
        return (sigma * (x - m * self.mu) / var).astype(x.dtype)

    def null_indices(self, n):
        return np.full((n, 3), -1)


def ancestral_reference(denoiser, n, n_steps, seed, schedule=VpSchedule()):
    """Plain DDPM-style ancestral sampler written independently of the engine."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 1, 1)).astype(np.float32)
    dt = 1.0 / n_steps
    for t in np.linspace(1.0, 1e-5, n_steps):
        b = (schedule.beta_min + t * (schedule.beta_max - schedule.beta_min)) * dt
        sigma = math.sqrt(1.0 - math.exp(-0.5 * t * t * (schedule.beta_max - schedule.beta_min) - t * schedule.beta_min))
        score = -denoiser(x, np.full(n, t), None) / sigma
        z = rng.standard_normal(x.shape).astype(np.float32)
        x = (x + b * score) / math.sqrt(1.0 - b) + math.sqrt(b) * z
    return x


def gaussian_classes(n, d, sep, seed):
    """Two spherical Gaussian classes of ``n // 2`` samples whose means differ by ``sep`` along axis 0."""
    rng = np.random.default_rng(seed)
    y = np.repeat([0, 1], n // 2)
    mu = np.zeros(d)
    mu[0] = sep
    return rng.normal(size=(n, d)) + y[:, None] * mu, y
