"""Command-line entry point.

Every subcommand reads an optional YAML/JSON config (``--config``), with
``--seed``, ``--out`` and ``--methods`` taking precedence over the file.
All configuration is validated before anything is written.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import yaml

from . import estimators as est
from .cir import ChannelParams, preprocess_record, synth_dataset, synth_record
from .errors import CirToaError, ParameterError
from .evalkit import (
    CNN,
    SplitPolicy,
    bench_latency,
    conventional_toa,
    error_dataset,
    load_report,
    method_names,
    parse_method,
    run_experiment,
    split,
)
from .neuralnet import CnnModel, TrainConfig, save_checkpoint, train
from .records import csv_format, ingest_csv, read_records, write_records

log = logging.getLogger("cirtoa")


class StageError(Exception):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise StageError("config", f"config file {p} not found")
    doc = yaml.safe_load(p.read_text()) or {}
    if not isinstance(doc, dict):
        raise StageError("config", "config must be a mapping")
    return doc


def _channel_params(doc: dict) -> ChannelParams:
    names = {f.name for f in fields(ChannelParams)}
    unknown = set(doc) - names - {"n"}
    if unknown:
        raise ParameterError(f"unknown channel fields {sorted(unknown)}")
    kw = {k: v for k, v in doc.items() if k in names}
    if "true_range_bounds" in kw:
        kw["true_range_bounds"] = tuple(kw["true_range_bounds"])
    return ChannelParams(**kw)


class Run:
    """Resolved options for one invocation."""

    def __init__(self, args: argparse.Namespace):
        self.cfg = load_config(args.config)
        self.seed = int(args.seed if args.seed is not None else self.cfg.get("seed", 0))
        if self.seed < 0 or self.seed >= 2**64:
            raise StageError("config", "seed must be an unsigned 64-bit integer")
        self.out = Path(args.out or self.cfg.get("out", "out"))
        methods = args.methods.split(",") if args.methods else self.cfg.get("methods")
        self.methods = [m.strip() for m in methods] if methods else method_names()
        try:
            for m in self.methods:
                parse_method(m)
        except ParameterError as exc:
            raise StageError("config", str(exc)) from None
        self.grid = self.cfg.get("grid")

    def policy(self) -> SplitPolicy:
        doc = dict(self.cfg.get("split") or {})
        try:
            return SplitPolicy(
                train_env=doc.get("train_env", "room_a"),
                test_env=doc.get("test_env", "room_b"),
                train_fraction=float(doc.get("train_fraction", 0.7)),
                n_repeats=int(doc.get("n_repeats", 10)),
                seed=self.seed,
            )
        except CirToaError as exc:
            raise StageError("config", str(exc)) from None

    def train_config(self) -> TrainConfig:
        doc = dict(self.cfg.get("train") or {})
        try:
            return TrainConfig(
                batch_size=int(doc.get("batch_size", 32)),
                max_epochs=int(doc.get("max_epochs", 200)),
                patience=int(doc.get("patience", 20)),
                seed=self.seed,
            )
        except CirToaError as exc:
            raise StageError("config", str(exc)) from None

    def records(self):
        path = self.cfg.get("records") or (self.out / "records.jsonl")
        if not Path(path).is_file():
            raise StageError("config", f"record file {path} not found")
        try:
            return read_records(path)
        except CirToaError as exc:
            raise StageError("ingest", str(exc)) from None

    def bases(self):
        return list(dict.fromkeys(parse_method(m)[0] for m in self.methods))


def _mkout(run: Run) -> Path:
    try:
        run.out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StageError("io", f"cannot create output directory {run.out}: {exc}") from None
    return run.out


def _meta(run: Run, **extra) -> dict:
    return {"seed": run.seed, **extra}


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands


def cmd_synth(run: Run) -> int:
    envs = (run.cfg.get("synth") or {}).get("environments")
    if not envs:
        envs = [{"environment": "room_a", "n": 7143}, {"environment": "room_b", "n": 2000, "los_probability": 0.4}]
    plan = []
    try:
        for doc in envs:
            n = int(doc.get("n", 0))
            if n < 0:
                raise ParameterError("record count n must be >= 0")
            plan.append((_channel_params(doc), n))
    except (CirToaError, TypeError) as exc:
        raise StageError("config", str(exc)) from None
    out = _mkout(run)
    records = []
    for i, (params, n) in enumerate(plan):
        records += synth_dataset(params, n, run.seed * 1000 + i)
    try:
        write_records(out / "records.jsonl", records)
    except OSError as exc:
        raise StageError("io", str(exc)) from None
    _write_json(out / "synth_meta.json", _meta(run, environments=envs, n_records=len(records)))
    print(f"wrote {len(records)} records to {out / 'records.jsonl'}")
    return 0


def cmd_ingest(run: Run) -> int:
    doc = run.cfg.get("ingest") or {}
    source = doc.get("source")
    if not source or not Path(source).is_file():
        raise StageError("config", f"ingest source {source!r} not found")
    try:
        if str(source).endswith(".jsonl"):
            records = read_records(source)
        else:
            records = ingest_csv(source, csv_format(doc.get("hints"), doc.get("preset", "generic")))
    except (CirToaError, TypeError) as exc:
        raise StageError("ingest", str(exc)) from None
    out = _mkout(run)
    write_records(out / "records.jsonl", records)
    _write_json(out / "ingest_meta.json", _meta(run, source=str(source), n_records=len(records)))
    print(f"ingested {len(records)} records into {out / 'records.jsonl'}")
    return 0


def _first_repeat(run: Run, records):
    policy = run.policy()
    rng = np.random.default_rng([policy.repeat_seed(0), 1])
    try:
        recs = [preprocess_record(r, rng) for r in records]
        return split(recs, policy, 0)
    except CirToaError as exc:
        raise StageError("split", str(exc)) from None


def _optimize(run: Run, trainval, base):
    try:
        return est.optimize_params(trainval, base, run.grid)
    except CirToaError as exc:
        raise StageError("optimize", str(exc)) from None


def cmd_optimize(run: Run) -> int:
    records = run.records()
    train_set, val_set, _ = _first_repeat(run, records)
    trainval = train_set + val_set
    fp = est.records_fingerprint(trainval)
    out = _mkout(run)
    for base in run.bases():
        if base == est.DWM:
            continue
        p = _optimize(run, trainval, base)
        est.save_params(out / f"params_{base}.json", base, p, fp)
        print(f"{base}: {p}")
    return 0


def cmd_train(run: Run) -> int:
    records = run.records()
    cfg = run.train_config()
    train_set, val_set, _ = _first_repeat(run, records)
    out = _mkout(run)
    for base in run.bases():
        if not any(m == f"{base}+{CNN}" for m in run.methods):
            continue
        p = None
        if base != est.DWM:
            pfile = out / f"params_{base}.json"
            p = est.load_params(pfile)[1] if pfile.is_file() else _optimize(run, train_set + val_set, base)
        try:
            toa_tr = conventional_toa(train_set, base, p)
            toa_va = conventional_toa(val_set, base, p)
            model = CnnModel.build(input_length=len(train_set[0].cir), seed=run.seed)
            model, hist = train(model, error_dataset(train_set, toa_tr), error_dataset(val_set, toa_va), cfg)
        except CirToaError as exc:
            raise StageError("train", str(exc)) from None
        meta = _meta(run, method=f"{base}+{CNN}", epochs=len(hist.val_loss), best_val_mse=hist.best_val_loss)
        save_checkpoint(out / f"cnn_{base}.json", model, meta)
        print(f"{base}+{CNN}: best validation MSE {hist.best_val_loss:.4f} after {len(hist.val_loss)} epochs")
    return 0


def cmd_eval(run: Run) -> int:
    records = run.records()
    policy = run.policy()
    cfg = run.train_config()
    try:
        report = run_experiment(
            records,
            policy,
            run.methods,
            grid=run.grid,
            train_config=cfg,
            keep_models=True,
            log=log.info,
        )
    except CirToaError as exc:
        raise StageError("split" if "environment" in str(exc) else "eval", str(exc)) from None
    out = _mkout(run)
    report.write(out)
    for r, models in enumerate(report.models):
        for base, model in models.items():
            save_checkpoint(out / f"cnn_{base}_r{r}.json", model, _meta(run, method=f"{base}+{CNN}", repeat=r))
    print(report.table(), end="")
    return 0


def cmd_bench(run: Run) -> int:
    doc = run.cfg.get("bench") or {}
    n_iter = int(doc.get("n_iterations", 50))
    n_traces = int(doc.get("n_traces", 50))
    length = int(doc.get("length", 187))
    if n_iter < 10:
        raise StageError("config", "bench n_iterations must be >= 10")
    params = ChannelParams(raw_length=length)
    traces = [synth_record(params, [run.seed, i]).cir for i in range(n_traces)]
    methods = [b for b in est.METHODS if b in run.bases()] + [CNN]
    table = bench_latency(methods, traces, n_iter, model=CnnModel.build(input_length=length, seed=run.seed))
    out = _mkout(run)
    _write_json(out / "bench.json", _meta(run, length=length, n_traces=n_traces, n_iterations=n_iter, median_ms=table))
    for m, ms in table.items():
        print(f"{('+' if m == CNN else '') + m:<6}{ms:9.4f} ms")
    return 0


def cmd_report(run: Run) -> int:
    path = Path((run.cfg.get("report") or {}).get("path") or run.out / "report.json")
    if not path.is_file():
        raise StageError("config", f"report {path} not found")
    report = load_report(path)
    print(report.table(), end="")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "optimize": cmd_optimize,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cirtoa", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML or JSON run configuration")
        p.add_argument("--seed", type=int, help="global seed (unsigned 64-bit)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--methods", help="comma-separated list, e.g. Peak,Peak+CnstAvg,Peak+CNN")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](Run(args))
    except StageError as exc:
        print(f"cirtoa {args.command}: error {exc}", file=sys.stderr)
        return 2 if exc.stage == "config" else 1


if __name__ == "__main__":
    sys.exit(main())
