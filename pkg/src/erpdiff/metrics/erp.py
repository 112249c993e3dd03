"""Averaged-response metrics: peak amplitude/latency deltas and the std Manhattan distance."""
from __future__ import annotations

import numpy as np

from ..epochs import TARGET, EpochSet
from ..preprocess import round_half_away


class EvokedResponse:
    def __init__(self, data: np.ndarray, n_epochs: int, fs: float):
        if n_epochs < 1:
            raise ValueError("an evoked response needs at least one epoch")
        self.data = np.asarray(data, dtype=np.float64)
        self.n_epochs = n_epochs
        self.fs = fs

    def __repr__(self):
        return f"EvokedResponse(shape={self.data.shape}, n_epochs={self.n_epochs})"


def evoked(epochs: EpochSet, condition=None) -> EvokedResponse:
    """Mean over epochs (optionally of a single condition)."""
    sel = epochs if condition is None else epochs.condition(condition)
    if len(sel) == 0:
        raise ValueError(f"no epochs for condition {condition}")
    return EvokedResponse(sel.data.astype(np.float64).mean(axis=0), len(sel), epochs.fs)


def peak_window(fs: float, n_samples: int, window: tuple[float, float] | None) -> slice:
    """Sample slice of the peak-search window; ``None`` means the whole epoch."""
    if window is None:
        return slice(0, n_samples)
    lo, hi = round_half_away(window[0] * fs), round_half_away(window[1] * fs)
    lo, hi = max(lo, 0), min(hi, n_samples)
    if hi <= lo:
        raise ValueError(f"peak window {window} is empty at {fs} Hz")
    return slice(lo, hi)


def select_p300_channel(real_target: EpochSet, window: tuple[float, float] | None = None) -> int:
    """Channel whose pooled target evoked response has the highest peak."""
    sel = real_target.subset(cls=TARGET) if np.any(real_target.classes != TARGET) else real_target
    if len(sel) == 0:
        raise ValueError("no target epochs to select the P300 channel from")
    ev = evoked(sel).data
    win = peak_window(sel.fs, sel.epoch_len, window)
    return int(np.argmax(ev[:, win].max(axis=1)))


def _peak(ev: EvokedResponse, channel: int, window) -> tuple[float, int]:
    win = peak_window(ev.fs, ev.data.shape[1], window)
    trace = ev.data[channel, win]
    i = int(np.argmax(trace))
    return float(trace[i]), i + win.start


def pad(real_evoked: EvokedResponse, gen_evoked: EvokedResponse, channel: int,
        window: tuple[float, float] | None = None) -> float:
    """Absolute difference of the highest peaks, in the data unit (µV)."""
    return abs(_peak(real_evoked, channel, window)[0] - _peak(gen_evoked, channel, window)[0])


def pld(real_evoked: EvokedResponse, gen_evoked: EvokedResponse, channel: int,
        window: tuple[float, float] | None = None) -> float:
    """Absolute latency difference of the highest peaks, in seconds."""
    a = _peak(real_evoked, channel, window)[1]
    b = _peak(gen_evoked, channel, window)[1]
    return abs(a - b) / real_evoked.fs


def channel_std(epochs: EpochSet) -> np.ndarray:
    """Per-channel std pooling every epoch and time point."""
    x = epochs.data.astype(np.float64)
    return x.transpose(1, 0, 2).reshape(x.shape[1], -1).std(axis=1)


def sd_md(a: EpochSet, b: EpochSet) -> float:
    if len(a) == 0 or len(b) == 0:
        raise ValueError("sd_md needs non-empty epoch sets")
    if a.n_channels != b.n_channels:
        raise ValueError("sd_md needs the same channels on both sides")
    return float(np.mean(np.abs(channel_std(a) - channel_std(b))))
