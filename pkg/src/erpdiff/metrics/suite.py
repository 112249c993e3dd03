"""Per-condition evaluation of generated epochs, the baselines, and the report CSV."""
from __future__ import annotations

import csv
import io
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..dataio import condition_seed
from ..epochs import CLASS_NAMES, NONTARGET, TARGET, EpochSet
from .distances import fid, swd
from .erp import evoked, pad, pld, sd_md, select_p300_channel
from .lda import aba

ALL_METRICS = ("ABA", "SWD", "FID", "PAD", "PLD", "SD-MD")
BETWEEN_SESSION_METRICS = ("SWD", "PAD", "PLD", "SD-MD")
CSV_COLUMNS = ("step", "subject", "session", "class_scope", "metric", "value", "baseline_value")
ALL = "ALL"


class ConditionMismatch(ValueError):
    pass


@dataclass
class MetricOptions:
    metrics: tuple[str, ...] = ALL_METRICS
    n_projections: int = 128
    seed: int = 0
    peak_window: tuple[float, float] | None = None
    aba_folds: int = 5
    aba_gen_train: str = "all"
    fid_repeats: int = 20

    def __post_init__(self):
        self.metrics = tuple(self.metrics)
        unknown = set(self.metrics) - set(ALL_METRICS)
        if unknown:
            raise ValueError(f"unknown metrics {sorted(unknown)}; choose from {ALL_METRICS}")
        if self.peak_window is not None:
            self.peak_window = tuple(self.peak_window)


@dataclass
class MetricRow:
    subject: str
    session: str
    class_scope: str
    metric: str
    value: float
    baseline_value: float = float("nan")
    step: int | None = None


def _fmt(v: float) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.10g}"


@dataclass
class MetricReport:
    rows: list[MetricRow] = field(default_factory=list)

    def add(self, subject, session, class_scope, metric, value, baseline=float("nan"), step=None):
        self.rows.append(MetricRow(str(subject), str(session), class_scope, metric, float(value),
                                   float(baseline), step))

    def find(self, metric: str, subject=ALL, session=ALL, class_scope: str | None = None) -> list[MetricRow]:
        return [r for r in self.rows if r.metric == metric and r.subject == str(subject)
                and r.session == str(session) and (class_scope is None or r.class_scope == class_scope)]

    def value(self, metric: str, subject=ALL, session=ALL, class_scope: str = "both") -> float:
        rows = self.find(metric, subject, session, class_scope)
        if len(rows) != 1:
            raise KeyError(f"{len(rows)} rows for {metric} {subject}/{session}/{class_scope}")
        return rows[0].value

    def baseline(self, metric: str, subject=ALL, session=ALL, class_scope: str = "both") -> float:
        rows = self.find(metric, subject, session, class_scope)
        if len(rows) != 1:
            raise KeyError(f"{len(rows)} rows for {metric} {subject}/{session}/{class_scope}")
        return rows[0].baseline_value

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.rows:
            writer.writerow(["" if r.step is None else r.step, r.subject, r.session, r.class_scope, r.metric,
                             _fmt(r.value), _fmt(r.baseline_value)])
        text = buf.getvalue()
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            Path(path).write_text(text, encoding="utf-8", newline="")
        return text

    @classmethod
    def from_csv(cls, path) -> "MetricReport":
        report = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            missing = set(CSV_COLUMNS[1:]) - set(reader.fieldnames or ())
            if missing:
                raise ValueError(f"{path}: missing columns {sorted(missing)}")
            for row in reader:
                step = row.get("step") or None
                report.rows.append(MetricRow(
                    row["subject"], row["session"], row["class_scope"], row["metric"],
                    float(row["value"]) if row["value"] else float("nan"),
                    float(row["baseline_value"]) if row["baseline_value"] else float("nan"),
                    int(step) if step is not None else None,
                ))
        return report


def _nanmean(values: Iterable[float]) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


# ----------------------------------------------------------------------
# pairwise metric between two epoch sets of one condition
# ----------------------------------------------------------------------

def pair_metric(metric: str, real: EpochSet, other: EpochSet, channel: int, options: MetricOptions,
                seed_parts: Sequence[int] = ()) -> float:
    if metric == "SWD":
        rng = np.random.default_rng(condition_seed(options.seed, *seed_parts))
        return swd(real, other, options.n_projections, rng)
    if metric == "SD-MD":
        return sd_md(real, other)
    if metric == "PAD":
        return pad(evoked(real), evoked(other), channel, options.peak_window)
    if metric == "PLD":
        return pld(evoked(real), evoked(other), channel, options.peak_window)
    raise ValueError(f"{metric} is not a pairwise epoch-set metric")


def _applies(metric: str, cls: int) -> bool:
    return cls == TARGET if metric in ("PAD", "PLD") else True


def _sessions_pair(real: EpochSet, subject: int) -> tuple[int, int] | None:
    sessions = sorted({int(s) for s in real.sessions[real.subjects == subject]})
    if len(sessions) < 2:
        return None
    return sessions[0], sessions[1]


def between_session_values(real: EpochSet, metric: str, channel: int | None = None,
                           options: MetricOptions | None = None) -> dict[tuple[int, int], float]:
    """Metric between the first two sessions of each subject, per ``(subject, class)``.

    Subjects with a single session are skipped with a warning. PAD and PLD
    are only defined for the target class.
    """
    options = options or MetricOptions()
    if metric not in BETWEEN_SESSION_METRICS:
        raise ValueError(f"between-session baseline is defined for {BETWEEN_SESSION_METRICS}, not {metric}")
    if channel is None and metric in ("PAD", "PLD"):
        channel = select_p300_channel(real.subset(cls=TARGET), options.peak_window)
    out = {}
    for subject in real.subject_ids:
        pair = _sessions_pair(real, subject)
        if pair is None:
            warnings.warn(f"subject {subject} lacks a second session; excluded from the between-session baseline")
            continue
        for cls in (NONTARGET, TARGET):
            if not _applies(metric, cls):
                continue
            a, b = real.subset(subject, pair[0], cls), real.subset(subject, pair[1], cls)
            if len(a) == 0 or len(b) == 0:
                continue
            out[(subject, cls)] = pair_metric(metric, a, b, channel, options, (subject, 0, cls))
    return out


def between_session_baseline(real: EpochSet, metric: str, channel: int | None = None,
                             options: MetricOptions | None = None) -> float:
    """Average of :func:`between_session_values` over subjects and classes."""
    values = between_session_values(real, metric, channel, options)
    return float(np.mean(list(values.values()))) if values else float("nan")


# ----------------------------------------------------------------------
# full evaluation
# ----------------------------------------------------------------------

def _check_conditions(real: EpochSet, gen: EpochSet):
    if not real.same_shape(gen):
        raise ConditionMismatch(f"epoch shapes differ: real {real.data.shape[1:]} vs generated {gen.data.shape[1:]}")
    missing = [k for k in real.conditions() if not np.any(gen.mask(k.subject, k.session, k.cls))]
    if missing:
        raise ConditionMismatch(f"generated set lacks conditions: {', '.join(map(str, missing[:5]))}")


def _aggregate(report: MetricReport, metric: str, per_condition: list[MetricRow], step):
    by_scope = {"target": [], "non-target": []}
    for r in per_condition:
        by_scope[r.class_scope].append(r)
    for scope in ("target", "non-target"):
        rows = by_scope[scope]
        if rows:
            report.add(ALL, ALL, scope, metric, np.mean([r.value for r in rows]),
                       _nanmean(r.baseline_value for r in rows), step)
    if by_scope["target"] and by_scope["non-target"]:
        report.add(ALL, ALL, "both", metric, np.mean([r.value for r in per_condition]),
                   _nanmean(r.baseline_value for r in per_condition), step)


def evaluate(real: EpochSet, gen: EpochSet, extractor=None, options: MetricOptions | None = None,
             step: int | None = None, threads: int = 1) -> MetricReport:
    """Score generated epochs against real ones, condition by condition.

    Each per-condition row carries the matching between-session baseline
    (ABA rows carry the within-session baseline). Aggregate rows use
    ``subject = session = "ALL"`` and average over conditions.
    """
    options = options or MetricOptions()
    _check_conditions(real, gen)
    report = MetricReport()
    metrics = options.metrics
    channel = None
    if any(m in metrics for m in ("PAD", "PLD")) and np.any(real.classes == TARGET):
        channel = select_p300_channel(real.subset(cls=TARGET), options.peak_window)

    baselines = {m: between_session_values(real, m, channel, options)
                 for m in BETWEEN_SESSION_METRICS if m in metrics and not (m in ("PAD", "PLD") and channel is None)}

    keys = real.conditions()
    for metric in ("SWD", "PAD", "PLD", "SD-MD"):
        if metric not in baselines:
            continue
        todo = [k for k in keys if _applies(metric, k.cls)]

        def job(key, metric=metric):
            return pair_metric(metric, real.condition(key), gen.condition(key), channel, options,
                               (key.subject, key.session, key.cls))

        with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
            values = list(pool.map(job, todo))
        rows = []
        for key, value in zip(todo, values):
            base = baselines[metric].get((key.subject, key.cls), float("nan"))
            row = MetricRow(str(key.subject), str(key.session), CLASS_NAMES[key.cls], metric, value, base, step)
            rows.append(row)
            report.rows.append(row)
            if metric == "PLD":
                report.add(key.subject, key.session, CLASS_NAMES[key.cls], "PLD_ms", 1000 * value, 1000 * base, step)
        _aggregate(report, metric, rows, step)
        if metric == "PLD":
            report.add(ALL, ALL, "target", "PLD_ms", 1000 * report.value("PLD", class_scope="target"),
                       1000 * report.baseline("PLD", class_scope="target"), step)

    if "ABA" in metrics:
        gen_scores = aba(real, gen, options.aba_folds, options.seed, options.aba_gen_train)
        base_scores = aba(real, None, options.aba_folds, options.seed)
        for (subject, session), value in sorted(gen_scores.scores.items()):
            report.add(subject, session, "both", "ABA", value, base_scores.scores.get((subject, session), float("nan")), step)
        report.add(ALL, ALL, "both", "ABA", gen_scores.mean, base_scores.mean, step)

    if "FID" in metrics:
        if extractor is None:
            warnings.warn("FID requested but no feature extractor given; skipped")
        else:
            report.add(ALL, ALL, "both", "FID", fid(real, gen, extractor), float("nan"), step)
    return report


def fid_references(real: EpochSet, extractor, repeats: int = 20, seed: int = 0) -> dict[str, float]:
    """Reference FIDs on real data: random halves, session 1 vs 2, first vs second half of subjects."""
    out = {}
    rng = np.random.default_rng(condition_seed(seed, 7))
    feats = extractor.features(real.data)
    from .distances import fid_from_features

    halves = []
    for _ in range(repeats):
        perm = rng.permutation(len(real))
        half = len(real) // 2
        halves.append(fid_from_features(feats[perm[:half]], feats[perm[half:2 * half]]))
    out["FID_random_halves"] = float(np.mean(halves))
    sessions = real.session_ids
    if len(sessions) >= 2:
        out["FID_cross_session"] = fid_from_features(feats[real.sessions == sessions[0]],
                                                     feats[real.sessions == sessions[1]])
    subjects = real.subject_ids
    if len(subjects) >= 2:
        first = subjects[: (len(subjects) + 1) // 2]
        m = np.isin(real.subjects, first)
        out["FID_subject_split"] = fid_from_features(feats[m], feats[~m])
    return out


def baseline_report(real: EpochSet, extractor=None, options: MetricOptions | None = None) -> MetricReport:
    """Reference scores computed on real data only."""
    options = options or MetricOptions()
    report = MetricReport()
    base = aba(real, None, options.aba_folds, options.seed)
    for (subject, session), value in sorted(base.scores.items()):
        report.add(subject, session, "both", "ABA_within_session", value)
    report.add(ALL, ALL, "both", "ABA_within_session", base.mean)
    channel = select_p300_channel(real.subset(cls=TARGET), options.peak_window) if np.any(real.classes == TARGET) else None
    for metric in BETWEEN_SESSION_METRICS:
        if metric in ("PAD", "PLD") and channel is None:
            continue
        values = between_session_values(real, metric, channel, options)
        name = f"{metric}_between_session"
        for (subject, cls), value in sorted(values.items()):
            report.add(subject, ALL, CLASS_NAMES[cls], name, value)
        for scope, cls in (("non-target", NONTARGET), ("target", TARGET)):
            vals = [v for (s, c), v in values.items() if c == cls]
            if vals:
                report.add(ALL, ALL, scope, name, np.mean(vals))
        if metric not in ("PAD", "PLD") and values:
            report.add(ALL, ALL, "both", name, np.mean(list(values.values())))
    if extractor is not None:
        for name, value in fid_references(real, extractor, options.fid_repeats, options.seed).items():
            report.add(ALL, ALL, "both", name, value)
    return report
