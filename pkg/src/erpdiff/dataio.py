"""Dataset container I/O, the seeded synthetic ERP generator and train/validation splitting.

A dataset is a directory holding ``manifest.json``, ``epochs.f32le`` (float32,
little-endian, epochs concatenated channel-major) and ``labels.csv``
(``epoch_index,subject,session,class``).
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .epochs import CANONICAL_19, CLASS_NAMES, NONTARGET, TARGET, ChannelLayout, EpochSet, parse_class
from .preprocess import ContinuousRecording, round_half_away

FORMAT = "erpdiff-epochs"
FORMAT_VERSION = 1
RAW_FORMAT = "erpdiff-raw"


class ContainerError(ValueError):
    pass


class ShapeMismatchError(ContainerError):
    pass


# ----------------------------------------------------------------------
# epoch container
# ----------------------------------------------------------------------

def manifest_for(epochs: EpochSet) -> dict:
    counts = [
        {"subject": k.subject, "session": k.session, "class": k.class_name, "count": n}
        for k, n in epochs.counts().items()
    ]
    return {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "fs": float(epochs.fs),
        "channels": list(epochs.layout.names),
        "epoch_len": int(epochs.epoch_len),
        "n_epochs": len(epochs),
        "subjects": epochs.subject_ids,
        "sessions": epochs.session_ids,
        "class_counts": counts,
        "excluded_subjects": list(epochs.excluded_subjects),
    }


def save_epochs(epochs: EpochSet, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = manifest_for(epochs)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    (path / "epochs.f32le").write_bytes(np.ascontiguousarray(epochs.data, dtype="<f4").tobytes())
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch_index", "subject", "session", "class"])
    for i in range(len(epochs)):
        writer.writerow([i, int(epochs.subjects[i]), int(epochs.sessions[i]), CLASS_NAMES[int(epochs.classes[i])]])
    (path / "labels.csv").write_text(buf.getvalue(), encoding="utf-8", newline="")
    return path


def load_epochs(path) -> EpochSet:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json in {path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format") != FORMAT:
        raise ContainerError(f"{manifest_path}: not an epoch container (format={manifest.get('format')!r})")
    if manifest.get("version") != FORMAT_VERSION:
        raise ContainerError(f"{manifest_path}: unsupported version {manifest.get('version')!r}")
    layout = ChannelLayout(tuple(manifest["channels"]))
    n, c, t = int(manifest["n_epochs"]), layout.count, int(manifest["epoch_len"])
    payload = (path / "epochs.f32le").read_bytes()
    expected = n * c * t * 4
    if len(payload) != expected:
        rows = len(payload) // (4 * t) if t else 0
        if n and len(payload) % (4 * t * n) == 0 and rows // n != c:
            raise ShapeMismatchError(
                f"{path}: manifest declares {c}x{t} epochs but payload holds {rows // n}x{t} records"
            )
        raise ContainerError(f"{path}: truncated payload ({len(payload)} bytes, expected {expected})")
    data = np.frombuffer(payload, dtype="<f4").reshape(n, c, t).astype(np.float32)

    with open(path / "labels.csv", newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != n:
        raise ShapeMismatchError(f"{path}: labels.csv has {len(rows)} rows for {n} epochs")
    for i, row in enumerate(rows):
        if int(row["epoch_index"]) != i:
            raise ContainerError(f"{path}: labels.csv out of order at row {i}")
    epochs = EpochSet(
        data,
        [int(r["subject"]) for r in rows],
        [int(r["session"]) for r in rows],
        [parse_class(r["class"]) for r in rows],
        float(manifest["fs"]),
        layout,
        tuple(manifest.get("excluded_subjects", ())),
    )
    declared = {(d["subject"], d["session"], parse_class(d["class"])): d["count"] for d in manifest["class_counts"]}
    found = {(k.subject, k.session, k.cls): v for k, v in epochs.counts().items()}
    if declared != found:
        raise ContainerError(f"{path}: manifest class_counts disagree with labels.csv")
    return epochs


# ----------------------------------------------------------------------
# raw (continuous) container, consumed by the preprocess command
# ----------------------------------------------------------------------

def save_recordings(recordings: Sequence[tuple[int, int, ContinuousRecording]], path) -> Path:
    """Write continuous recordings as ``raw_manifest.json`` plus one ``.f32le`` file each."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (subject, session, rec) in enumerate(recordings):
        name = f"rec{i:04d}.f32le"
        (path / name).write_bytes(np.ascontiguousarray(rec.data, dtype="<f4").tobytes())
        entries.append({
            "file": name, "subject": subject, "session": session, "fs": rec.fs,
            "channels": list(rec.layout.names), "n_samples": rec.n_samples,
            "events": [[o, CLASS_NAMES[c]] for o, c in rec.events],
        })
    manifest = {"format": RAW_FORMAT, "version": FORMAT_VERSION, "recordings": entries}
    (path / "raw_manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def load_recordings(path) -> list[tuple[int, int, ContinuousRecording]]:
    path = Path(path)
    mpath = path / "raw_manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no raw_manifest.json in {path}")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    if manifest.get("format") != RAW_FORMAT or manifest.get("version") != FORMAT_VERSION:
        raise ContainerError(f"{mpath}: not a raw recording container")
    out = []
    for entry in manifest["recordings"]:
        layout = ChannelLayout(tuple(entry["channels"]))
        payload = (path / entry["file"]).read_bytes()
        n = int(entry["n_samples"])
        if len(payload) != layout.count * n * 4:
            raise ShapeMismatchError(f"{entry['file']}: payload does not match {layout.count}x{n}")
        data = np.frombuffer(payload, dtype="<f4").reshape(layout.count, n).astype(np.float64)
        events = tuple((int(o), parse_class(c)) for o, c in entry["events"])
        out.append((int(entry["subject"]), int(entry["session"]),
                    ContinuousRecording(data, float(entry["fs"]), events, layout)))
    return out


# ----------------------------------------------------------------------
# synthetic ERP generator
# ----------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Parameters of the synthetic oddball dataset.

    ``p300_amp`` and ``p300_latency`` take one value per subject (a scalar is
    broadcast). ``session_shift`` is ``(amplitude scale, latency offset in
    seconds)`` applied once per session after the first; ``session_noise_scale``
    scales the noise the same way. ``noise_std`` is the AR(1) innovation
    standard deviation, so the stationary std is ``noise_std / sqrt(1 - a^2)``.
    """

    n_subjects: int = 2
    sessions: tuple[int, ...] = (1, 2)
    epochs_per_condition: int = 100
    nontarget_epochs: int | None = None
    p300_amp: float | tuple[float, ...] = 8.0
    p300_latency: float | tuple[float, ...] = 0.3
    bump_width: float = 0.05
    session_shift: tuple[float, float] = (0.8, 0.015625)
    session_noise_scale: float = 1.0
    noise_std: float = 2.0
    ar_coef: float = 0.95
    fs: float = 128.0
    epoch_len: int = 128
    channels: tuple[str, ...] = CANONICAL_19
    bump_channels: tuple[str, ...] = ("O1", "Pz", "O2")
    bump_weights: tuple[float, ...] = (1.0, 0.7, 0.5)
    subject_ids: tuple[int, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        self.sessions = tuple(int(s) for s in self.sessions)
        self.channels = tuple(self.channels)
        self.bump_channels = tuple(self.bump_channels)
        self.bump_weights = tuple(float(w) for w in self.bump_weights)
        self.session_shift = tuple(float(v) for v in self.session_shift)
        if self.subject_ids is None:
            self.subject_ids = tuple(range(1, self.n_subjects + 1))
        self.subject_ids = tuple(int(s) for s in self.subject_ids)
        if len(self.subject_ids) != self.n_subjects:
            raise ValueError("subject_ids must list n_subjects ids")
        if not 0.0 <= self.ar_coef < 1.0:
            raise ValueError("ar_coef must lie in [0, 1)")
        if len(self.bump_channels) != len(self.bump_weights):
            raise ValueError("bump_channels and bump_weights differ in length")
        missing = set(self.bump_channels) - set(self.channels)
        if missing:
            raise ValueError(f"bump channels {sorted(missing)} not in the channel list")
        if self.epochs_per_condition < 1 or self.noise_std < 0 or self.bump_width <= 0:
            raise ValueError("epochs_per_condition >= 1, noise_std >= 0 and bump_width > 0 are required")
        duration = self.epoch_len / self.fs
        for s in range(self.n_subjects):
            for k in range(len(self.sessions)):
                lat = self.latency(s, k)
                if lat - self.bump_width < 0 or lat + self.bump_width > duration:
                    raise ValueError(f"P300 latency {lat:.3f} s +- width does not fit in a {duration} s epoch")

    def _per_subject(self, value, i: int) -> float:
        if np.ndim(value) == 0:
            return float(value)
        value = tuple(value)
        if len(value) != self.n_subjects:
            raise ValueError("per-subject values must list one entry per subject")
        return float(value[i])

    def amplitude(self, subject_index: int, session_index: int) -> float:
        return self._per_subject(self.p300_amp, subject_index) * self.session_shift[0] ** session_index

    def latency(self, subject_index: int, session_index: int) -> float:
        return self._per_subject(self.p300_latency, subject_index) + self.session_shift[1] * session_index

    def n_epochs(self, cls: int) -> int:
        if cls == NONTARGET and self.nontarget_epochs is not None:
            return self.nontarget_epochs
        return self.epochs_per_condition

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SyntheticSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synthetic spec keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("p300_amp", "p300_latency"):
            if isinstance(d.get(k), list):
                d[k] = tuple(d[k])
        return cls(**d)


def condition_seed(master: int, *parts: int) -> np.random.SeedSequence:
    """Per-condition RNG seed derived from a master seed and integer labels."""
    return np.random.SeedSequence([int(master) & 0xFFFFFFFF] + [int(p) & 0xFFFFFFFF for p in parts])


def ar1_noise(rng: np.random.Generator, shape: tuple[int, ...], innovation_std: float, coef: float) -> np.ndarray:
    """Stationary AR(1) noise along the last axis."""
    e = rng.normal(0.0, innovation_std, size=shape)
    out = np.empty(shape)
    out[..., 0] = e[..., 0] / math.sqrt(1.0 - coef * coef)
    for i in range(1, shape[-1]):
        out[..., i] = coef * out[..., i - 1] + e[..., i]
    return out


def p300_template(spec: SyntheticSpec, subject_index: int, session_index: int) -> np.ndarray:
    """Noise-free target response ``(C, T)`` for one subject and session."""
    t = np.arange(spec.epoch_len) / spec.fs
    lat = spec.latency(subject_index, session_index)
    bump = spec.amplitude(subject_index, session_index) * np.exp(-0.5 * ((t - lat) / spec.bump_width) ** 2)
    out = np.zeros((len(spec.channels), spec.epoch_len))
    for name, weight in zip(spec.bump_channels, spec.bump_weights):
        out[spec.channels.index(name)] = weight * bump
    return out


def generate_synthetic(spec: SyntheticSpec) -> EpochSet:
    layout = ChannelLayout(spec.channels)
    chunks, subjects, sessions, classes = [], [], [], []
    for si, subject in enumerate(spec.subject_ids):
        for ki, session in enumerate(spec.sessions):
            for cls in (NONTARGET, TARGET):
                n = spec.n_epochs(cls)
                rng = np.random.default_rng(condition_seed(spec.seed, subject, session, cls))
                std = spec.noise_std * spec.session_noise_scale ** ki
                x = ar1_noise(rng, (n, layout.count, spec.epoch_len), std, spec.ar_coef)
                if cls == TARGET:
                    x += p300_template(spec, si, ki)[None]
                chunks.append(x.astype(np.float32))
                subjects += [subject] * n
                sessions += [session] * n
                classes += [cls] * n
    return EpochSet(np.concatenate(chunks), subjects, sessions, classes, spec.fs, layout)


# ----------------------------------------------------------------------
# splitting
# ----------------------------------------------------------------------

def split_train_val(epochs: EpochSet, val_fraction: float, seed: int) -> tuple[EpochSet, EpochSet]:
    """Stratified split: every condition contributes ``round(val_fraction * n)`` validation epochs."""
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for key in epochs.conditions():
        idx = np.flatnonzero(epochs.mask(key.subject, key.session, key.cls))
        if len(idx) < 2:
            raise ValueError(f"condition {key} has {len(idx)} epoch(s); at least 2 are needed to split")
        n_val = min(max(round_half_away(val_fraction * len(idx)), 1), len(idx) - 1)
        perm = rng.permutation(idx)
        val_idx.append(np.sort(perm[:n_val]))
        train_idx.append(np.sort(perm[n_val:]))
    if not train_idx:
        return epochs, epochs.select(np.zeros(0, dtype=np.int64))
    return epochs.select(np.concatenate(train_idx)), epochs.select(np.concatenate(val_idx))
