"""Command-line front end: preprocess, synth, train, sample, eval, baseline, report, train-fx."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, RunConfig
from .dataio import (ContainerError, SyntheticSpec, generate_synthetic, load_epochs, load_recordings, save_epochs,
                     split_train_val)
from .diffusion import (SamplerDivergence, TrainingDivergence, load_model, model_config_for, n_threads,
                        sample_condition, sample_matched, train)
from .epochs import ChannelLayout, ConditionKey, EpochSet, concatenate, parse_class
from .metrics.extractor import FeatureExtractor, train_feature_extractor
from .metrics.suite import ALL_METRICS, ConditionMismatch, MetricReport, baseline_report, evaluate
from .preprocess import RejectionStats, preprocess_recording
from . import plots

log = logging.getLogger("erpdiff")


class CliError(Exception):
    """Reported on stderr with exit code 1."""


def _exists(path, what: str, kind: str = "dir") -> Path:
    p = Path(path)
    ok = p.is_dir() if kind == "dir" else p.is_file()
    if not ok:
        raise CliError(f"{what} not found: {p}")
    return p


def _run_config(args, overrides: dict) -> RunConfig:
    if getattr(args, "config", None):
        return RunConfig.load(_exists(args.config, "config file", "file"), overrides)
    return RunConfig.from_dict({}, overrides)


def _pair(text: str, name: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise CliError(f"{name} expects LO,HI, got {text!r}") from None
    return lo, hi


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------

def cmd_preprocess(args) -> int:
    overrides = {"preprocess.filter_order": args.order, "preprocess.fs_out": args.fs_out,
                 "preprocess.epoch_seconds": args.epoch_len, "preprocess.ptp_threshold": args.ptp_reject}
    if args.band:
        overrides["preprocess.band_lo"], overrides["preprocess.band_hi"] = _pair(args.band, "--band")
    if args.channels:
        overrides["preprocess.channels"] = args.channels.split(",")
    cfg = _run_config(args, overrides).preprocess
    recordings = load_recordings(_exists(args.inp, "input container"))
    excluded = tuple(int(s) for s in args.exclude.split(",")) if args.exclude else ()
    sets, total, skipped = [], RejectionStats(0, 0), 0
    for subject, session, rec in recordings:
        if subject in excluded:
            continue
        epochs, stats, n_skip = preprocess_recording(rec, cfg, subject, session)
        sets.append(epochs)
        total = RejectionStats(total.kept + stats.kept, total.dropped + stats.dropped)
        skipped += n_skip
    if not sets:
        raise CliError(f"no recordings left in {args.inp} after exclusions")
    out = concatenate(sets)
    out = EpochSet(out.data, out.subjects, out.sessions, out.classes, out.fs, out.layout, excluded)
    save_epochs(out, args.out)
    print(f"{args.out}: {len(out)} epochs; rejection {total}; skipped at recording end: {skipped}")
    return 0


def cmd_synth(args) -> int:
    spec_path = _exists(args.spec, "synthetic spec", "file")
    try:
        doc = json.loads(spec_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{spec_path}: invalid JSON ({exc})") from None
    if args.seed is not None:
        doc["seed"] = args.seed
    try:
        spec = SyntheticSpec.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{spec_path}: {exc}") from None
    epochs = generate_synthetic(spec)
    save_epochs(epochs, args.out)
    print(f"{args.out}: {len(epochs)} synthetic epochs")
    return 0


class _Lock:
    def __init__(self, directory: Path):
        self.path = directory / ".train.lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise CliError(f"{self.path} exists: another training run owns this directory") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def cmd_train(args) -> int:
    overrides = {"train.steps": args.steps, "train.eval_every": args.eval_every, "seed": args.seed}
    doc_train = {}
    if args.config:
        doc_train = json.loads(_exists(args.config, "config file", "file").read_text(encoding="utf-8")).get("train") or {}
    if args.steps is not None and args.eval_every is None and "eval_every" not in doc_train:
        overrides["train.eval_every"] = args.steps
    cfg = _run_config(args, overrides)
    data = load_epochs(_exists(args.data, "dataset"))
    if len(data) == 0:
        raise CliError(f"{args.data} holds no epochs")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_cfg = model_config_for(data, cfg.model)
    with _Lock(out):
        train_set, val_set = split_train_val(data, cfg.train.val_fraction, cfg.train.seed)
        (out / "run_config.json").write_text(json.dumps(
            {**cfg.to_dict(), "model": model_cfg.to_dict()}, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        meta = {"data": {"fs": data.fs, "channels": list(data.layout.names)}}
        result = train(train_set, model_cfg, cfg.train, cfg.schedule, val_set, out, log_every=args.log_every,
                       meta=meta)
    print(f"{out}: {len(result.checkpoints)} checkpoint(s), final loss {result.history[-1]['loss']:.5f}")
    return 0


def _sample_overrides(args) -> dict:
    return {"sample.guidance_scale": args.guidance, "sample.corrector_snr": args.corrector_snr,
            "sample.n_steps": args.steps, "sample.corrector_steps": args.corrector_steps,
            "sample.predictor": args.predictor, "sample.batch_size": args.batch_size, "seed": args.seed}


def _generate_matched(ckpt: Path, real: EpochSet, cfg: RunConfig) -> EpochSet:
    net, store, schedule, _ = load_model(ckpt)
    missing = [k for k in real.conditions() if k.subject not in net.config.subject_ids
               or k.session not in net.config.session_ids]
    if missing:
        raise ConditionMismatch(f"{ckpt} was not trained on condition(s) {', '.join(map(str, missing[:5]))}")
    return sample_matched(real, net, store.ema, cfg.sample, schedule)


def cmd_sample(args) -> int:
    cfg = _run_config(args, _sample_overrides(args))
    ckpt = _exists(args.ckpt, "checkpoint", "file")
    if args.match:
        real = load_epochs(_exists(args.match, "--match dataset"))
        gen = _generate_matched(ckpt, real, cfg)
    else:
        missing = [f for f in ("subject", "session", "cls", "count") if getattr(args, f) is None]
        if missing:
            names = ["--class" if f == "cls" else f"--{f}" for f in missing]
            raise CliError(f"without --match, sample needs {', '.join(names)}")
        net, store, schedule, meta = load_model(ckpt)
        key = ConditionKey(args.subject, args.session, parse_class(args.cls))
        data_meta = meta.get("data") or {}
        if "fs" not in data_meta:
            raise CliError(f"{ckpt} lacks dataset metadata; use --match")
        x = sample_condition(net, store.ema, key, args.count, cfg.sample, schedule)
        n = len(x)
        gen = EpochSet(x, [key.subject] * n, [key.session] * n, [key.cls] * n, float(data_meta["fs"]),
                       ChannelLayout(tuple(data_meta["channels"])))
    save_epochs(gen, args.out)
    print(f"{args.out}: {len(gen)} generated epochs")
    return 0


def _metric_list(text: str | None) -> tuple[str, ...]:
    if not text or text == "all":
        return ALL_METRICS
    names = tuple(m.strip() for m in text.split(","))
    unknown = [m for m in names if m not in ALL_METRICS]
    if unknown:
        raise ConfigError(f"unknown metric(s) {unknown} in --metrics; choose from {','.join(ALL_METRICS)}")
    return names


def _load_fx(path) -> FeatureExtractor | None:
    return FeatureExtractor.load(_exists(path, "feature extractor", "file")) if path else None


def _eval_options(args, cfg: RunConfig, fx):
    metrics = _metric_list(args.metrics) if args.metrics else cfg.metrics.metrics
    if "FID" in metrics and fx is None:
        if args.metrics and args.metrics != "all":
            raise CliError("FID requested but no --fx feature-extractor checkpoint given")
        warnings.warn("no --fx given; FID skipped")
        metrics = tuple(m for m in metrics if m != "FID")
    return replace(cfg.metrics, metrics=metrics)


def cmd_eval(args) -> int:
    cfg = _run_config(args, {"seed": args.seed})
    real = load_epochs(_exists(args.real, "--real dataset"))
    fx = _load_fx(args.fx)
    options = _eval_options(args, cfg, fx)
    report = MetricReport()
    if args.ckpt_dir:
        ckpts = sorted(_exists(args.ckpt_dir, "checkpoint directory").glob("ckpt_*.erpd"))
        if not ckpts:
            raise CliError(f"no ckpt_*.erpd files in {args.ckpt_dir}")
        cfg = _run_config(args, {**_sample_overrides(args)})
        for ckpt in ckpts:
            step = load_model(ckpt)[3].get("step")
            gen = _generate_matched(ckpt, real, cfg)
            report.rows += evaluate(real, gen, fx, options, step=step, threads=n_threads()).rows
            if args.gen_out:
                save_epochs(gen, Path(args.gen_out) / ckpt.stem)
    else:
        if not args.gen:
            raise CliError("eval needs --gen DIR or --ckpt-dir DIR")
        gen = load_epochs(_exists(args.gen, "--gen dataset"))
        report = evaluate(real, gen, fx, options, step=args.step, threads=n_threads())
    report.to_csv(args.out)
    print(f"{args.out}: {len(report.rows)} rows")
    return 0


def cmd_baseline(args) -> int:
    cfg = _run_config(args, {"seed": args.seed})
    real = load_epochs(_exists(args.real, "--real dataset"))
    fx = _load_fx(args.fx)
    report = baseline_report(real, fx, cfg.metrics)
    report.to_csv(args.out)
    print(f"{args.out}: {len(report.rows)} rows")
    return 0


def cmd_train_fx(args) -> int:
    real = load_epochs(_exists(args.real, "--real dataset"))
    fx = train_feature_extractor(real, seed=args.seed, steps=args.steps)
    fx.save(args.out)
    print(f"{args.out}: feature extractor with {fx.config.feature_dim} features")
    return 0


def cmd_report(args) -> int:
    out = Path(args.out)
    report = MetricReport()
    for part in args.inp.split(","):
        report.rows += MetricReport.from_csv(_exists(part, "report CSV", "file")).rows
    written = [plots.metric_curves(report, out / "metrics.svg", args.deterministic)]
    bars = plots.pld_bars(report, out / "pld_per_subject.svg", args.deterministic)
    if bars is not None:
        written.append(bars)
    if args.real and args.gen:
        real = load_epochs(_exists(args.real, "--real dataset"))
        gen = load_epochs(_exists(args.gen, "--gen dataset"))
        channels = None
        if args.channels:
            try:
                channels = [real.layout.index(c) for c in args.channels.split(",")]
            except (KeyError, ValueError) as exc:
                raise CliError(f"--channels: {exc}") from None
        written.append(plots.evoked_overlay(real, gen, out / "evoked.svg", channels, args.deterministic))
        written.append(plots.covariance_heatmaps(real, gen, out / "covariance.svg", args.deterministic))
    elif args.real or args.gen:
        raise CliError("--real and --gen must be given together")
    for p in written:
        print(p)
    return 0


# ----------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="erpdiff", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="continuous recordings -> rejected epochs")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--band", help="LO,HI in Hz")
    p.add_argument("--order", type=int)
    p.add_argument("--fs-out", type=float)
    p.add_argument("--epoch-len", type=float, help="seconds")
    p.add_argument("--ptp-reject", type=float, help="peak-to-peak threshold in µV")
    p.add_argument("--channels", help="comma-separated channel names")
    p.add_argument("--exclude", help="comma-separated subject ids to drop")
    p.add_argument("--config")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", help="synthetic dataset from a spec JSON")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the score network")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--steps", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    def sampling_flags(p):
        p.add_argument("--guidance", type=float)
        p.add_argument("--corrector-snr", type=float)
        p.add_argument("--corrector-steps", type=int)
        p.add_argument("--steps", type=int, help="sampler discretization steps")
        p.add_argument("--predictor", choices=("reverse_diffusion", "ancestral", "euler_maruyama"))
        p.add_argument("--batch-size", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--config")

    p = sub.add_parser("sample", help="generate epochs from a checkpoint (EMA weights)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--match")
    p.add_argument("--subject", type=int)
    p.add_argument("--session", type=int)
    p.add_argument("--class", dest="cls", choices=("target", "nontarget", "non-target"))
    p.add_argument("--count", type=int)
    p.add_argument("--out", required=True)
    sampling_flags(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score generated epochs against real ones")
    p.add_argument("--real", required=True)
    p.add_argument("--gen")
    p.add_argument("--ckpt-dir", help="sample and score every checkpoint in this directory")
    p.add_argument("--gen-out", help="with --ckpt-dir, keep generated sets under this directory")
    p.add_argument("--metrics", help="all or a comma-separated list")
    p.add_argument("--fx")
    p.add_argument("--step", type=int)
    p.add_argument("--out", required=True)
    sampling_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="within/between-session and FID reference baselines")
    p.add_argument("--real", required=True)
    p.add_argument("--fx")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("train-fx", help="train the FID feature extractor")
    p.add_argument("--real", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=1500)
    p.set_defaults(func=cmd_train_fx)

    p = sub.add_parser("report", help="SVG plots from metric CSVs")
    p.add_argument("--in", dest="inp", required=True, help="CSV[,CSV...]")
    p.add_argument("--out", required=True)
    p.add_argument("--deterministic", action="store_true", help="omit the timestamp comment")
    p.add_argument("--real")
    p.add_argument("--gen")
    p.add_argument("--channels", help="channel names for the evoked overlay")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"erpdiff {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    except (CliError, ContainerError, ConditionMismatch, FileNotFoundError, KeyError, ValueError,
            TrainingDivergence, SamplerDivergence) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"erpdiff {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
