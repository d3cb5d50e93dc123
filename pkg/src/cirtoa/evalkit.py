"""Experiment harness: cross-environment splits, repeated trials, metrics.

Method names follow the ``<estimator>[+<mitigation>]`` convention, e.g.
``"LDE"``, ``"LDE+CnstAvg"`` or ``"IFP+CNN"``.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import estimators as est
from .cir import MeasurementRecord, preprocess_record
from .errors import DatasetError, ParameterError
from .mitigation import abs_ranging_error, fit_cnst_avg, mitigate, range_from_toa
from .neuralnet import CnnModel, ErrorDataset, TrainConfig, forward, train

CNST_AVG = "CnstAvg"
CNN = "CNN"
MITIGATIONS = ("", CNST_AVG, CNN)
BASES = est.METHODS + (est.DWM,)


def parse_method(name: str) -> tuple[str, str]:
    base, sep, mitigation = name.partition("+")
    if base not in BASES or mitigation not in MITIGATIONS or (sep and not mitigation):
        raise ParameterError(f"unknown method {name!r}")
    return base, mitigation


def method_names(bases: Sequence[str] = est.METHODS) -> list[str]:
    return [b + (f"+{m}" if m else "") for b in bases for m in MITIGATIONS]


# ------------------------------------------------------------------ splits


@dataclass(frozen=True)
class SplitPolicy:
    train_env: str
    test_env: str
    train_fraction: float = 0.7
    n_repeats: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.train_env == self.test_env:
            raise DatasetError("train and test environments must differ")
        if not 0 < self.train_fraction < 1:
            raise ParameterError("train_fraction must lie in (0, 1)")
        if self.n_repeats < 1:
            raise ParameterError("n_repeats must be >= 1")

    def repeat_seed(self, repeat_index: int) -> int:
        return self.seed ^ repeat_index


def split(records: Sequence[MeasurementRecord], policy: SplitPolicy, repeat_index: int = 0):
    """(train, validation, test) for one repeat.

    Test is the whole test environment; the training environment is
    shuffled and cut at ``train_fraction``.
    """
    pool = [r for r in records if r.environment == policy.train_env]
    test = [r for r in records if r.environment == policy.test_env]
    if not pool:
        raise DatasetError(f"no records with environment {policy.train_env!r}")
    if not test:
        raise DatasetError(f"no records with environment {policy.test_env!r}")
    order = np.random.default_rng(policy.repeat_seed(repeat_index)).permutation(len(pool))
    n_train = int(round(policy.train_fraction * len(pool)))
    train_set = [pool[i] for i in order[:n_train]]
    val_set = [pool[i] for i in order[n_train:]]
    return train_set, val_set, test


# ----------------------------------------------------------------- metrics


def empirical_cdf(errors) -> list[tuple[float, float]]:
    values = np.sort(np.asarray(errors, dtype=np.float64).reshape(-1))
    n = values.size
    return [(float(v), (i + 1) / n) for i, v in enumerate(values)]


def percentile_nearest_rank(errors, percent: int) -> float:
    values = np.sort(np.asarray(errors, dtype=np.float64).reshape(-1))
    if values.size == 0:
        raise ParameterError("percentile of an empty sample")
    if not 0 < percent <= 100:
        raise ParameterError("percent must lie in (0, 100]")
    rank = -(-percent * values.size // 100)  # ceil without float rounding
    return float(values[rank - 1])


def percentile_90(errors) -> float:
    return percentile_nearest_rank(errors, 90)


# ----------------------------------------------------------------- reports


@dataclass
class ExperimentReport:
    """Pooled per-method absolute ranging errors (m) over all repeats."""

    errors: dict[str, np.ndarray]
    n_repeats: int
    seed: int
    policy: SplitPolicy | None = None
    params: list[dict] = field(default_factory=list)
    biases: list[dict] = field(default_factory=list)
    best_val_loss: list[dict] = field(default_factory=list)
    latency_ms: dict[str, float] | None = None
    models: list[dict] = field(default_factory=list, repr=False)

    @property
    def methods(self) -> list[str]:
        return list(self.errors)

    @property
    def p90(self) -> dict[str, float]:
        return {m: percentile_90(e) for m, e in self.errors.items()}

    @property
    def mean(self) -> dict[str, float]:
        return {m: float(np.mean(e)) for m, e in self.errors.items()}

    def table(self) -> str:
        """Plain-text table of 90th percentile and mean error in cm."""
        width = max(len(m) for m in self.errors) + 2
        lines = [
            f"{'method':<{width}}{'p90 (cm)':>10}{'mean (cm)':>11}{'n':>8}",
            "-" * (width + 29),
        ]
        p90, mean = self.p90, self.mean
        for base in BASES:
            rows = [m for m in self.errors if parse_method(m)[0] == base]
            for m in rows:
                lines.append(f"{m:<{width}}{100 * p90[m]:>10.1f}{100 * mean[m]:>11.1f}{self.errors[m].size:>8d}")
        lines.append(f"pooled over {self.n_repeats} repeat(s), seed {self.seed}")
        return "\n".join(lines) + "\n"

    def to_dict(self, samples_dir: str = "samples") -> dict:
        p90, mean = self.p90, self.mean
        doc = {
            "seed": self.seed,
            "n_repeats": self.n_repeats,
            "pooling": "errors pooled across repeats before statistics",
            "percentile": "nearest-rank",
            "method_order": list(self.errors),
            "methods": {
                m: {
                    "samples_path": f"{samples_dir}/{_slug(m)}.txt",
                    "p90_m": p90[m],
                    "mean_m": mean[m],
                    "n": int(self.errors[m].size),
                    "latency_ms": None if self.latency_ms is None else self.latency_ms.get(m),
                }
                for m in self.errors
            },
            "params": [{b: _params_doc(p) for b, p in rep.items()} for rep in self.params],
            "cnst_avg_bias": self.biases,
            "cnn_best_val_mse": self.best_val_loss,
        }
        if self.policy is not None:
            doc["split"] = {
                "train_env": self.policy.train_env,
                "test_env": self.policy.test_env,
                "train_fraction": self.policy.train_fraction,
                "n_repeats": self.policy.n_repeats,
                "seed": self.policy.seed,
            }
        return doc

    def write(self, out_dir) -> Path:
        """Write report.json, table.txt, per-method samples and CDF files."""
        out = Path(out_dir)
        (out / "samples").mkdir(parents=True, exist_ok=True)
        (out / "cdf").mkdir(parents=True, exist_ok=True)
        for m, e in self.errors.items():
            np.savetxt(out / "samples" / f"{_slug(m)}.txt", e, fmt="%.17g")
            cdf = np.array(empirical_cdf(e)).reshape(-1, 2)
            np.savetxt(out / "cdf" / f"{_slug(m)}.txt", cdf, fmt="%.17g", header="error_m cumulative_fraction")
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        (out / "table.txt").write_text(self.table())
        return out / "report.json"


def load_report(path) -> ExperimentReport:
    path = Path(path)
    doc = json.loads(path.read_text())
    errors = {}
    for m in doc.get("method_order", sorted(doc["methods"])):
        entry = doc["methods"][m]
        errors[m] = np.atleast_1d(np.loadtxt(path.parent / entry["samples_path"], dtype=np.float64))
    return ExperimentReport(errors, doc["n_repeats"], doc["seed"], biases=doc.get("cnst_avg_bias", []))


def _slug(method: str) -> str:
    return method.replace("+", "_")


def _params_doc(p):
    if p is None:
        return None
    return {k: getattr(p, k) for k in ("alpha", "avg_window", "lde_small_window", "lde_large_window", "lde_factor")}


# -------------------------------------------------------------- experiment

ParamsOverride = Mapping[str, est.EstimatorParams] | Callable[[str, est.EstimatorParams], est.EstimatorParams]


def conventional_toa(records, base: str, params: est.EstimatorParams | None) -> np.ndarray:
    if base == est.DWM:
        if any(r.toa_device is None for r in records):
            raise DatasetError("DWM needs toa_device on every record")
        return np.array([r.toa_device for r in records])
    samples = np.stack([r.cir.samples for r in records])
    idx = est.estimate_indices(samples, base, params).astype(np.float64)
    # no arrival: fall back to the strongest sample
    missing = idx < 0
    idx[missing] = np.argmax(samples[missing], axis=1)
    return idx


def _truth(records) -> np.ndarray:
    return np.array([r.toa_true for r in records])


def _ranging_errors(records, toa) -> np.ndarray:
    dt = np.array([r.cir.delta_t for r in records])
    tot = np.array([r.tot for r in records])
    rng_true = np.array([r.range_true for r in records])
    r_hat = range_from_toa(toa, tot, dt)
    return np.atleast_1d(abs_ranging_error(r_hat, rng_true))


def error_dataset(records, toa) -> ErrorDataset:
    return ErrorDataset(np.stack([r.cir.samples for r in records]), toa, toa - _truth(records))


def run_experiment(
    records: Sequence[MeasurementRecord],
    policy: SplitPolicy,
    methods: Sequence[str],
    *,
    grid: Mapping | None = None,
    train_config: TrainConfig | None = None,
    params: ParamsOverride | None = None,
    preprocess: bool = True,
    keep_models: bool = False,
    model_options: Mapping | None = None,
    log: Callable[[str], None] | None = None,
) -> ExperimentReport:
    """Run every requested method over ``policy.n_repeats`` random splits.

    Per repeat: shift/pad/normalize, split, grid-optimise each estimator on
    train+validation (unless ``params`` overrides it), fit CnstAvg on the
    same data, train the CNN on train with validation early stopping, and
    score all methods on the test environment.
    """
    if not methods:
        raise ParameterError("no methods requested")
    parsed = [parse_method(m) for m in methods]
    if len(set(methods)) != len(methods):
        raise ParameterError("duplicate method names")
    bases = list(dict.fromkeys(b for b, _ in parsed))
    train_config = train_config or TrainConfig()
    pooled: dict[str, list] = {m: [] for m in methods}
    report = ExperimentReport({}, policy.n_repeats, policy.seed, policy)

    for r in range(policy.n_repeats):
        seed_r = policy.repeat_seed(r)
        if preprocess:
            rng = np.random.default_rng([seed_r, 1])
            recs = [preprocess_record(rec, rng) for rec in records]
        else:
            recs = list(records)
        train_set, val_set, test_set = split(recs, policy, r)
        trainval = train_set + val_set
        rep_params, rep_bias, rep_val, rep_models = {}, {}, {}, {}
        for base in bases:
            wanted = {mit for b, mit in parsed if b == base}
            p = None
            if base != est.DWM:
                p = est.optimize_params(trainval, base, grid)
                if params is not None:
                    p = params(base, p) if callable(params) else params.get(base, p)
            rep_params[base] = p
            toa_tv = conventional_toa(trainval, base, p)
            toa_test = conventional_toa(test_set, base, p)
            if "" in wanted:
                pooled[base].append(_ranging_errors(test_set, toa_test))
            if CNST_AVG in wanted:
                bias = fit_cnst_avg(toa_tv - _truth(trainval), base)
                rep_bias[base] = bias.bias
                pooled[f"{base}+{CNST_AVG}"].append(_ranging_errors(test_set, mitigate(toa_test, bias.bias)))
            if CNN in wanted:
                n_tr = len(train_set)
                cfg = TrainConfig(
                    train_config.batch_size,
                    train_config.max_epochs,
                    train_config.patience,
                    seed_r * 1000 + BASES.index(base),
                    train_config.lr,
                )
                model = CnnModel.build(input_length=len(test_set[0].cir), seed=cfg.seed, **(model_options or {}))
                model, hist = train(
                    model,
                    error_dataset(train_set, toa_tv[:n_tr]),
                    error_dataset(val_set, toa_tv[n_tr:]),
                    cfg,
                )
                rep_val[base] = hist.best_val_loss
                eps = forward(model, np.stack([t.cir.samples for t in test_set]), toa_test)
                pooled[f"{base}+{CNN}"].append(_ranging_errors(test_set, mitigate(toa_test, eps)))
                if keep_models:
                    rep_models[base] = model
            if log:
                log(f"repeat {r}: {base} done")
        report.params.append(rep_params)
        report.biases.append(rep_bias)
        report.best_val_loss.append(rep_val)
        report.models.append(rep_models)

    report.errors = {m: np.concatenate(pooled[m]) for m in methods}
    return report


@dataclass
class SuboptimalityReport:
    optimized: ExperimentReport
    suboptimal: ExperimentReport

    @property
    def increase(self) -> dict[str, float]:
        """Change of the 90th-percentile error (m) caused by detuning."""
        a, b = self.optimized.p90, self.suboptimal.p90
        return {m: b[m] - a[m] for m in a}

    def table(self) -> str:
        inc = self.increase
        width = max(len(m) for m in inc) + 2
        lines = [f"{'method':<{width}}{'optimized':>11}{'suboptimal':>12}{'increase':>10}  (p90, cm)"]
        a, b = self.optimized.p90, self.suboptimal.p90
        for m in inc:
            lines.append(f"{m:<{width}}{100 * a[m]:>11.1f}{100 * b[m]:>12.1f}{100 * inc[m]:>+10.1f}")
        return "\n".join(lines) + "\n"


def detune(base: str, p: est.EstimatorParams) -> est.EstimatorParams:
    """Default detuning: halve alpha and raise the LDE factor by 0.2."""
    return p.perturbed(0.5, 0.2 if base == est.LDE else 0.0)


def suboptimality_study(
    records,
    policy: SplitPolicy,
    perturbed_params: ParamsOverride = detune,
    methods: Sequence[str] | None = None,
    optimized: ExperimentReport | None = None,
    **kwargs,
) -> SuboptimalityReport:
    """Optimised versus detuned estimators under identical splits.

    ``optimized`` may pass in an already computed optimised arm.
    """
    methods = list(methods or method_names())
    if optimized is None:
        optimized = run_experiment(records, policy, methods, **kwargs)
    detuned = run_experiment(records, policy, methods, params=perturbed_params, **kwargs)
    return SuboptimalityReport(optimized, detuned)


# ----------------------------------------------------------------- latency


def bench_latency(
    methods: Sequence[str],
    traces: Sequence,
    n_iterations: int = 50,
    params: Mapping[str, est.EstimatorParams] | None = None,
    model: CnnModel | None = None,
    warmup: int = 3,
) -> dict[str, float]:
    """Median wall-clock milliseconds per single-trace call.

    ``methods`` may contain ``Peak``, ``IFP``, ``LDE`` and ``CNN``; the CNN
    entry is the forward pass alone, i.e. the latency added on top of a
    conventional estimator.
    """
    if n_iterations < 10:
        raise ParameterError("bench_latency needs n_iterations >= 10")
    samples = [np.asarray(getattr(t, "samples", t), dtype=np.float64) for t in traces]
    if not samples:
        raise ParameterError("no traces to benchmark")
    params = dict(params or {})
    if CNN in methods and model is None:
        model = CnnModel.build(input_length=samples[0].size)

    calls: dict[str, Callable] = {}
    for m in methods:
        if m == CNN:
            calls[m] = lambda s: forward(model, s, 10.0)
        elif m in est.METHODS:
            p = params.get(m, est.EstimatorParams())
            calls[m] = lambda s, m=m, p=p: est.estimate_indices(s, m, p)
        else:
            raise ParameterError(f"cannot benchmark {m!r}")

    out = {}
    for m, fn in calls.items():
        for _ in range(warmup):
            for s in samples:
                fn(s)
        per_iter = []
        for _ in range(n_iterations):
            t0 = time.perf_counter()
            for s in samples:
                fn(s)
            per_iter.append((time.perf_counter() - t0) / len(samples))
        out[m] = 1e3 * float(np.median(per_iter))
    return out
