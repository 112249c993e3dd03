"""Shrinkage LDA on windowed-mean features and the averaged balanced accuracy (ABA)."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from ..dataio import condition_seed
from ..epochs import NONTARGET, TARGET, EpochSet
from ..preprocess import round_half_away

log = logging.getLogger(__name__)

WINDOW_STARTS = tuple(0.1 * k for k in range(1, 9))
WINDOW_LENGTH = 0.1


def window_bounds(fs: float) -> list[tuple[int, int]]:
    """Sample ranges of the eight 100 ms windows covering 0.1-0.9 s."""
    return [(round_half_away(s * fs), round_half_away((s + WINDOW_LENGTH) * fs)) for s in WINDOW_STARTS]


def lda_features(epochs: EpochSet) -> np.ndarray:
    """Mean amplitude per channel in each window; ``(n_epochs, 8 * n_channels)``, window-major."""
    bounds = window_bounds(epochs.fs)
    if bounds[-1][1] > epochs.epoch_len:
        raise ValueError(f"epochs of {epochs.epoch_len} samples at {epochs.fs} Hz do not cover 0.9 s")
    x = epochs.data.astype(np.float64)
    feats = np.stack([x[:, :, lo:hi].mean(axis=2) for lo, hi in bounds], axis=1)
    return feats.reshape(len(epochs), -1)


def ledoit_wolf_shrinkage(centered: np.ndarray) -> float:
    """Analytic Ledoit-Wolf intensity for shrinking towards a scaled identity."""
    n, d = centered.shape
    s = centered.T @ centered / n
    mu = np.trace(s) / d
    d2 = np.sum((s - mu * np.eye(d)) ** 2)
    if d2 <= 0:
        return 1.0
    sq_norms = np.sum(centered ** 2, axis=1)
    b2 = (np.sum(sq_norms ** 2) - n * np.sum(s ** 2)) / n ** 2
    return float(np.clip(min(b2, d2) / d2, 0.0, 1.0))


@dataclass
class LdaModel:
    weights: np.ndarray
    bias: float
    shrinkage: float

    def decision(self, features: np.ndarray) -> np.ndarray:
        return features @ self.weights + self.bias

    def predict(self, features: np.ndarray) -> np.ndarray:
        return (self.decision(features) > 0).astype(np.int64)


def lda_fit(features: np.ndarray, labels: np.ndarray, shrinkage: float | None = None) -> LdaModel:
    """Binary LDA with covariance ``(1-g) S + g (tr S / d) I``; ``g`` from Ledoit-Wolf if not given.

    Label 1 (target) receives positive scores.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if not (np.any(y == 0) and np.any(y == 1)):
        raise ValueError("lda_fit needs samples from both classes")
    mu0, mu1 = x[y == 0].mean(axis=0), x[y == 1].mean(axis=0)
    centered = np.concatenate([x[y == 0] - mu0, x[y == 1] - mu1])
    gamma = ledoit_wolf_shrinkage(centered) if shrinkage is None else float(shrinkage)
    if not 0 <= gamma <= 1:
        raise ValueError("shrinkage must lie in [0, 1]")
    d = x.shape[1]
    s = centered.T @ centered / centered.shape[0]
    cov = (1 - gamma) * s + gamma * (np.trace(s) / d) * np.eye(d)
    if np.linalg.matrix_rank(cov) < d:
        raise ValueError("shrunk covariance is singular; use a shrinkage intensity > 0")
    w = np.linalg.solve(cov, mu1 - mu0)
    b = -0.5 * float((mu0 + mu1) @ w)
    return LdaModel(w, b, gamma)


def lda_predict(model: LdaModel, features: np.ndarray) -> np.ndarray:
    return model.predict(features)


def balanced_accuracy(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    """Mean per-class recall over the classes present in ``y_true``."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    recalls = [np.mean(y_pred[y_true == c] == c) for c in np.unique(y_true)]
    return float(np.mean(recalls))


def stratified_kfold(labels: np.ndarray, n_folds: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Test-index arrays of ``n_folds`` folds with per-class proportions preserved."""
    labels = np.asarray(labels)
    folds: list[list[np.ndarray]] = [[] for _ in range(n_folds)]
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        for f, part in enumerate(np.array_split(idx, n_folds)):
            folds[f].append(part)
    return [np.sort(np.concatenate(parts)) for parts in folds]


@dataclass
class AbaResult:
    scores: dict[tuple[int, int], float] = field(default_factory=dict)
    skipped: list[tuple[int, int]] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.scores.values()))) if self.scores else float("nan")


def aba(real: EpochSet, gen: EpochSet | None = None, n_folds: int = 5, seed: int = 0,
        gen_train: str = "all", shrinkage: float | None = None) -> AbaResult:
    """Averaged balanced accuracy over subject/session pairs.

    Every pair gets a stratified ``n_folds`` split of its real epochs; the
    held-out real fold is always the test set. With ``gen=None`` the LDA is
    trained on the remaining real folds (within-session baseline). Otherwise
    it is trained on the generated epochs of that pair: all of them
    (``gen_train="all"``) or a class-matched random draw the size of the
    real training folds (``"matched"``).
    """
    if gen_train not in ("all", "matched"):
        raise ValueError("gen_train must be 'all' or 'matched'")
    result = AbaResult()
    pairs = sorted({(int(s), int(k)) for s, k in zip(real.subjects, real.sessions)})
    for subject, session in pairs:
        part = real.subset(subject, session)
        counts = [int(np.sum(part.classes == c)) for c in (NONTARGET, TARGET)]
        if min(counts) < n_folds:
            warnings.warn(f"ABA: subject {subject} session {session} has too few epochs per class "
                          f"({counts}) for {n_folds} folds; skipped")
            result.skipped.append((subject, session))
            continue
        feats, labels = lda_features(part), part.classes
        rng = np.random.default_rng(condition_seed(seed, subject, session))
        folds = stratified_kfold(labels, n_folds, rng)
        gen_feats = gen_labels = None
        if gen is not None:
            gpart = gen.subset(subject, session)
            if len(gpart) == 0 or len(np.unique(gpart.classes)) < 2:
                warnings.warn(f"ABA: no two-class generated data for subject {subject} session {session}; skipped")
                result.skipped.append((subject, session))
                continue
            gen_feats, gen_labels = lda_features(gpart), gpart.classes
        fold_scores = []
        for test in folds:
            train = np.setdiff1d(np.arange(len(part)), test)
            if gen is None:
                model = lda_fit(feats[train], labels[train], shrinkage)
            elif gen_train == "all":
                model = lda_fit(gen_feats, gen_labels, shrinkage)
            else:
                pick = []
                for c in (NONTARGET, TARGET):
                    pool = np.flatnonzero(gen_labels == c)
                    want = min(int(np.sum(labels[train] == c)), len(pool))
                    pick.append(rng.choice(pool, size=want, replace=False))
                pick = np.concatenate(pick)
                model = lda_fit(gen_feats[pick], gen_labels[pick], shrinkage)
            fold_scores.append(balanced_accuracy(labels[test], model.predict(feats[test])))
        result.scores[(subject, session)] = float(np.mean(fold_scores))
    return result
