"""Continuous recording -> filtered, downsampled, epoched and ptp-rejected epochs."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import signal

from .epochs import CANONICAL_LAYOUT, ChannelLayout, EpochSet, parse_class

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ContinuousRecording:
    data: np.ndarray
    fs: float
    events: tuple[tuple[int, int], ...]
    layout: ChannelLayout

    def __post_init__(self):
        data = np.asarray(self.data)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "events", tuple((int(o), parse_class(c)) for o, c in self.events))
        if self.fs <= 0:
            raise ValueError("sampling rate must be positive")
        if data.ndim != 2 or data.shape[0] != self.layout.count:
            raise ValueError(f"data shape {data.shape} does not match {self.layout.count} channels")
        n = data.shape[1]
        bad = [o for o, _ in self.events if not 0 <= o < n]
        if bad:
            raise ValueError(f"event onsets outside [0, {n}): {bad[:5]}")

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class PreprocessConfig:
    band_lo: float = 1.0
    band_hi: float = 40.0
    filter_order: int = 4
    fs_out: float = 128.0
    epoch_seconds: float = 1.0
    ptp_threshold: float = 150.0
    channels: tuple[str, ...] = field(default=CANONICAL_LAYOUT.names)

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        if not 0 < self.band_lo < self.band_hi < self.fs_out / 2:
            raise ValueError(
                f"need 0 < band_lo < band_hi < fs_out/2, got {self.band_lo}, {self.band_hi}, fs_out={self.fs_out}"
            )
        if self.filter_order < 2 or self.filter_order % 2:
            raise ValueError(f"filter_order must be even and >= 2, got {self.filter_order}")
        if self.ptp_threshold <= 0:
            raise ValueError("ptp_threshold must be positive")
        if self.epoch_seconds <= 0:
            raise ValueError("epoch_seconds must be positive")

    @property
    def epoch_len(self) -> int:
        return round_half_away(self.epoch_seconds * self.fs_out)


@dataclass(frozen=True)
class RejectionStats:
    kept: int
    dropped: int

    @property
    def total(self) -> int:
        return self.kept + self.dropped

    @property
    def fraction(self) -> float:
        return self.dropped / self.total if self.total else 0.0

    def __str__(self):
        return f"dropped {self.dropped} of {self.total} epochs ({100 * self.fraction:.2f} %)"


def round_half_away(x):
    """Round to nearest integer, halves away from zero."""
    out = np.sign(x) * np.floor(np.abs(x) + 0.5)
    return int(out) if np.ndim(out) == 0 else out.astype(np.int64)


def butter_sos(cfg: PreprocessConfig, fs: float) -> np.ndarray:
    if cfg.band_hi >= fs / 2:
        raise ValueError(f"passband upper edge {cfg.band_hi} Hz is not below Nyquist ({fs / 2} Hz)")
    return signal.butter(cfg.filter_order, [cfg.band_lo, cfg.band_hi], btype="bandpass", output="sos", fs=fs)


def select_channels(rec: ContinuousRecording, names: Sequence[str]) -> ContinuousRecording:
    missing = [n for n in names if n not in rec.layout.names]
    if missing:
        raise ValueError(f"recording lacks channels {missing}")
    idx = [rec.layout.index(n) for n in names]
    return replace(rec, data=rec.data[idx], layout=ChannelLayout(tuple(names)))


def bandpass_filter(rec: ContinuousRecording, cfg: PreprocessConfig) -> ContinuousRecording:
    """Zero-phase Butterworth bandpass applied forward and backward along time.

    ``filter_order`` is the Butterworth prototype order handed to the design
    routine; both passes together square the magnitude response.
    """
    if not np.all(np.isfinite(rec.data)):
        raise ValueError("recording contains non-finite samples")
    sos = butter_sos(cfg, rec.fs)
    padlen = min(3 * cfg.filter_order, rec.n_samples - 1)
    out = signal.sosfiltfilt(sos, rec.data.astype(np.float64), axis=-1, padtype="even", padlen=padlen)
    return replace(rec, data=out)


def downsample(rec: ContinuousRecording, fs_out: float, band_hi: float | None = None) -> ContinuousRecording:
    """FFT resampling to ``fs_out``; event onsets are remapped by rounding."""
    if fs_out >= rec.fs:
        raise ValueError(f"fs_out ({fs_out}) must be below the input rate ({rec.fs})")
    if band_hi is not None and band_hi >= fs_out / 2:
        raise ValueError(f"aliasing: content up to {band_hi} Hz cannot be kept at {fs_out} Hz")
    ratio = fs_out / rec.fs
    n_out = round_half_away(rec.n_samples * ratio)
    data = signal.resample(rec.data, n_out, axis=-1)
    events = []
    for onset, cls in rec.events:
        new = round_half_away(onset * ratio)
        if new < n_out:
            events.append((new, cls))
    return ContinuousRecording(data, fs_out, tuple(events), rec.layout)


def epoch_recording(rec: ContinuousRecording, cfg: PreprocessConfig, subject: int,
                    session: int) -> tuple[EpochSet, int]:
    """Cut one window per event starting at its onset.

    Returns the epochs and the number of events skipped because the window
    ran past the end of the recording.
    """
    n = round_half_away(cfg.epoch_seconds * rec.fs)
    keep, skipped = [], 0
    for onset, cls in rec.events:
        if onset + n > rec.n_samples:
            skipped += 1
            continue
        keep.append((onset, cls))
    if skipped:
        log.warning("subject %s session %s: skipped %d event(s) too close to the recording end",
                    subject, session, skipped)
    if not keep:
        return EpochSet.empty(rec.layout, n, rec.fs), skipped
    data = np.stack([rec.data[:, o:o + n] for o, _ in keep]).astype(np.float32)
    k = len(keep)
    return EpochSet(data, [subject] * k, [session] * k, [c for _, c in keep], rec.fs, rec.layout), skipped


def peak_to_peak(data: np.ndarray) -> np.ndarray:
    """Largest channel peak-to-peak per epoch, for ``(n, C, T)`` data."""
    if data.shape[0] == 0:
        return np.zeros(0)
    return (data.max(axis=2) - data.min(axis=2)).max(axis=1)


def reject_ptp(epochs: EpochSet, threshold: float) -> tuple[EpochSet, RejectionStats]:
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    keep = peak_to_peak(epochs.data) <= threshold
    kept = epochs.select(keep)
    return kept, RejectionStats(int(keep.sum()), int((~keep).sum()))


def preprocess_recording(rec: ContinuousRecording, cfg: PreprocessConfig, subject: int,
                         session: int) -> tuple[EpochSet, RejectionStats, int]:
    """Channel selection, bandpass, downsampling, epoching and rejection, in that order."""
    if cfg.channels:
        rec = select_channels(rec, cfg.channels)
    rec = bandpass_filter(rec, cfg)
    if not math.isclose(rec.fs, cfg.fs_out):
        rec = downsample(rec, cfg.fs_out, cfg.band_hi)
    epochs, skipped = epoch_recording(rec, cfg, subject, session)
    epochs, stats = reject_ptp(epochs, cfg.ptp_threshold)
    return epochs, stats, skipped
