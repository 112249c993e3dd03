"""Epoch data model shared by preprocessing, the diffusion model and the metrics."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

CANONICAL_19 = (
    "Fp1", "Fp2", "F7", "F8", "F3", "F4", "Fz", "T7", "T8", "C3",
    "C4", "Cz", "P7", "P8", "P3", "P4", "Pz", "O1", "O2",
)

NONTARGET = 0
TARGET = 1
CLASS_NAMES = {NONTARGET: "non-target", TARGET: "target"}


def parse_class(value) -> int:
    """Map a class label ("target", "non-target", "nontarget", 0/1) to its integer code."""
    if isinstance(value, (int, np.integer)):
        if int(value) in CLASS_NAMES:
            return int(value)
        raise ValueError(f"unknown class code {value!r}")
    key = str(value).strip().lower().replace("_", "-")
    if key == "target":
        return TARGET
    if key in ("non-target", "nontarget"):
        return NONTARGET
    raise ValueError(f"unknown class label {value!r}")


@dataclass(frozen=True)
class ChannelLayout:
    names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if not self.names:
            raise ValueError("channel layout must contain at least one channel")
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"duplicate channel names in {self.names}")

    @property
    def count(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


CANONICAL_LAYOUT = ChannelLayout(CANONICAL_19)


@dataclass(frozen=True, order=True)
class ConditionKey:
    """A (subject, session, class) triple, or the reserved unconditional token."""

    subject: int = -1
    session: int = -1
    cls: int = -1
    is_unconditional: bool = False

    def __post_init__(self):
        if self.is_unconditional:
            if (self.subject, self.session, self.cls) != (-1, -1, -1):
                raise ValueError("the unconditional token carries no subject/session/class")
        elif self.cls not in CLASS_NAMES:
            raise ValueError(f"class must be 0 (non-target) or 1 (target), got {self.cls}")

    @property
    def class_name(self) -> str:
        return "none" if self.is_unconditional else CLASS_NAMES[self.cls]

    def __str__(self):
        if self.is_unconditional:
            return "<unconditional>"
        return f"subject={self.subject} session={self.session} class={self.class_name}"


UNCONDITIONAL = ConditionKey(is_unconditional=True)


@dataclass(frozen=True)
class Epoch:
    data: np.ndarray
    condition: ConditionKey


@dataclass
class EpochSet:
    """Fixed-shape epochs stored as one ``(n_epochs, n_channels, n_samples)`` array.

    Labels are kept as parallel integer arrays; :meth:`__iter__` yields
    :class:`Epoch` views for code that wants per-epoch objects.
    """

    data: np.ndarray
    subjects: np.ndarray
    sessions: np.ndarray
    classes: np.ndarray
    fs: float
    layout: ChannelLayout
    excluded_subjects: tuple[int, ...] = field(default=())

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"epoch data must be 3-D (epochs, channels, samples), got {self.data.shape}")
        n = self.data.shape[0]
        self.subjects = np.asarray(self.subjects, dtype=np.int64).reshape(n)
        self.sessions = np.asarray(self.sessions, dtype=np.int64).reshape(n)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(n)
        if self.data.shape[1] != self.layout.count:
            raise ValueError(
                f"epochs have {self.data.shape[1]} channels but layout declares {self.layout.count}"
            )
        if not np.all(np.isin(self.classes, list(CLASS_NAMES))):
            raise ValueError("class labels must be 0 (non-target) or 1 (target)")
        if self.fs <= 0:
            raise ValueError("fs must be positive")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("epoch data contains non-finite values")
        clash = set(self.excluded_subjects) & set(self.subjects.tolist())
        if clash:
            raise ValueError(f"excluded subjects {sorted(clash)} still have epochs")

    @classmethod
    def empty(cls, layout: ChannelLayout, epoch_len: int, fs: float, dtype=np.float32) -> "EpochSet":
        z = np.zeros(0, dtype=np.int64)
        return cls(np.zeros((0, layout.count, epoch_len), dtype=dtype), z, z, z, fs, layout)

    @classmethod
    def from_epochs(cls, epochs: Sequence[Epoch], layout: ChannelLayout, fs: float,
                    epoch_len: int | None = None) -> "EpochSet":
        if not epochs:
            if epoch_len is None:
                raise ValueError("epoch_len is required to build an empty EpochSet")
            return cls.empty(layout, epoch_len, fs)
        shapes = {e.data.shape for e in epochs}
        if len(shapes) != 1:
            raise ValueError(f"epochs differ in shape: {sorted(shapes)}")
        return cls(
            np.stack([e.data for e in epochs]),
            [e.condition.subject for e in epochs],
            [e.condition.session for e in epochs],
            [e.condition.cls for e in epochs],
            fs,
            layout,
        )

    def __len__(self) -> int:
        return self.data.shape[0]

    def __iter__(self) -> Iterator[Epoch]:
        for i in range(len(self)):
            yield Epoch(self.data[i], self.condition_of(i))

    @property
    def epoch_len(self) -> int:
        return self.data.shape[2]

    @property
    def n_channels(self) -> int:
        return self.data.shape[1]

    def condition_of(self, i: int) -> ConditionKey:
        return ConditionKey(int(self.subjects[i]), int(self.sessions[i]), int(self.classes[i]))

    def conditions(self) -> list[ConditionKey]:
        """Distinct conditions present, sorted by (subject, session, class)."""
        keys = {(int(a), int(b), int(c)) for a, b, c in zip(self.subjects, self.sessions, self.classes)}
        return [ConditionKey(*k) for k in sorted(keys)]

    def counts(self) -> dict[ConditionKey, int]:
        out: dict[ConditionKey, int] = {}
        for key in self.conditions():
            out[key] = int(self.mask(key.subject, key.session, key.cls).sum())
        return out

    def mask(self, subject=None, session=None, cls=None) -> np.ndarray:
        m = np.ones(len(self), dtype=bool)
        if subject is not None:
            m &= self.subjects == subject
        if session is not None:
            m &= self.sessions == session
        if cls is not None:
            m &= self.classes == cls
        return m

    def select(self, mask_or_index) -> "EpochSet":
        idx = np.asarray(mask_or_index)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return EpochSet(
            self.data[idx], self.subjects[idx], self.sessions[idx], self.classes[idx],
            self.fs, self.layout, self.excluded_subjects,
        )

    def subset(self, subject=None, session=None, cls=None) -> "EpochSet":
        return self.select(self.mask(subject, session, cls))

    def condition(self, key: ConditionKey) -> "EpochSet":
        return self.subset(key.subject, key.session, key.cls)

    @property
    def subject_ids(self) -> list[int]:
        return sorted({int(s) for s in self.subjects})

    @property
    def session_ids(self) -> list[int]:
        return sorted({int(s) for s in self.sessions})

    def same_shape(self, other: "EpochSet") -> bool:
        return self.data.shape[1:] == other.data.shape[1:]


def concatenate(sets: Sequence[EpochSet]) -> EpochSet:
    if not sets:
        raise ValueError("nothing to concatenate")
    first = sets[0]
    for s in sets[1:]:
        if s.layout != first.layout or s.fs != first.fs or not s.same_shape(first):
            raise ValueError("cannot concatenate epoch sets with different layout, fs or shape")
    excluded = tuple(sorted(set().union(*(s.excluded_subjects for s in sets))))
    return EpochSet(
        np.concatenate([s.data for s in sets]),
        np.concatenate([s.subjects for s in sets]),
        np.concatenate([s.sessions for s in sets]),
        np.concatenate([s.classes for s in sets]),
        first.fs,
        first.layout,
        excluded,
    )
