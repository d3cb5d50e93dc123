"""Conventional ToA estimators (Peak, IFP, LDE) and their grid search.

Every estimator has a vectorised core working on the last axis of a 2-D
array; it returns ``-1`` where no sample qualifies. The per-trace wrappers
raise :class:`NoArrivalError` instead.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .cir import CirTrace, MeasurementRecord
from .errors import NoArrivalError, ParameterError, ShapeError

PEAK = "Peak"
IFP = "IFP"
LDE = "LDE"
DWM = "DWM"
METHODS = (PEAK, IFP, LDE)

IFP_FLUSH = 1e-12

DEFAULT_GRID = {
    "alpha": [round(0.05 * i, 2) for i in range(1, 13)],
    "avg_window": [1, 2, 4],
    "lde_small_window": [2, 4, 6],
    "lde_large_window": [8, 12, 16, 24],
    "lde_factor": [0.8, 0.9, 1.0, 1.1, 1.2],
}


@dataclass(frozen=True)
class EstimatorParams:
    """Noise-threshold factor plus the LDE filter settings.

    Peak and IFP only read ``alpha``.
    """

    alpha: float = 0.2
    lde_small_window: int = 4
    lde_large_window: int = 16
    lde_factor: float = 1.1
    avg_window: int = 1

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ParameterError(f"alpha must lie in (0, 1), got {self.alpha}")
        for name in ("lde_small_window", "lde_large_window", "avg_window"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ParameterError(f"{name} must be an integer >= 1, got {v}")
            object.__setattr__(self, name, int(v))
        if self.lde_large_window <= self.lde_small_window:
            raise ParameterError("lde_large_window must exceed lde_small_window")
        if not self.lde_factor > 0:
            raise ParameterError(f"lde_factor must be positive, got {self.lde_factor}")
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "lde_factor", float(self.lde_factor))

    def perturbed(self, alpha_scale: float = 0.5, factor_offset: float = 0.2) -> "EstimatorParams":
        """Deliberately detuned copy used by the robustness study."""
        return replace(self, alpha=self.alpha * alpha_scale, lde_factor=self.lde_factor + factor_offset)


@dataclass(frozen=True)
class ToaEstimate:
    index: float
    method: str


def _samples(trace) -> np.ndarray:
    if isinstance(trace, CirTrace):
        return trace.samples
    return np.asarray(trace, dtype=np.float64)


def noise_threshold(trace, alpha: float) -> float:
    """Detection threshold relative to the strongest CIR sample."""
    if not 0 < alpha < 1:
        raise ParameterError(f"alpha must lie in (0, 1), got {alpha}")
    peak = float(_samples(trace).max())
    if peak <= 0:
        raise ParameterError("noise threshold needs a trace with positive maximum")
    return alpha * peak


def _first_true(mask: np.ndarray) -> np.ndarray:
    idx = np.argmax(mask, axis=-1)
    return np.where(mask.any(axis=-1), idx, -1)


def _as_batch(samples) -> np.ndarray:
    s = np.asarray(samples, dtype=np.float64)
    if s.ndim == 1:
        s = s[None, :]
    if s.ndim != 2 or s.shape[1] == 0:
        raise ShapeError(f"expected a (traces, samples) array, got shape {s.shape}")
    return s


def peak_indices(samples, alpha: float) -> np.ndarray:
    s = _as_batch(samples)
    thr = alpha * s.max(axis=1, keepdims=True)
    ok = s > thr
    ok[:, 1:] &= s[:, 1:] >= s[:, :-1]
    ok[:, :-1] &= s[:, :-1] >= s[:, 1:]
    return _first_true(ok)


def ifp_indices(samples, alpha: float) -> np.ndarray:
    s = _as_batch(samples)
    n = s.shape[1]
    if n < 3:
        raise ShapeError("IFP needs at least 3 samples")
    thr = alpha * s.max(axis=1, keepdims=True)
    # d2[:, j] is the second difference centred on sample j, with s[-1] read
    # as s[0] like the causal LDE windows
    left = np.concatenate([s[:, :1], s[:, :-2]], axis=1)
    d2 = s[:, 1:] - 2.0 * s[:, :-1] + left
    d2[np.abs(d2) < IFP_FLUSH] = 0.0
    sign = np.sign(d2)
    flip = (sign[:, 1:] != sign[:, :-1]) & (sign[:, 1:] != 0) & (sign[:, :-1] != 0)
    ok = np.zeros_like(s, dtype=bool)
    ok[:, 1 : n - 1] = flip & (s[:, 1 : n - 1] > thr)
    return _first_true(ok)


def causal_moving_average(samples, window: int) -> np.ndarray:
    s = _as_batch(samples)
    padded = np.concatenate([np.repeat(s[:, :1], window - 1, axis=1), s], axis=1)
    return sliding_window_view(padded, window, axis=1).sum(axis=-1) / window


def causal_moving_max(samples, window: int, lag: int = 0) -> np.ndarray:
    """Max over ``x[i-lag-window+1 .. i-lag]``; indices before 0 read ``x[0]``."""
    x = _as_batch(samples)
    n = x.shape[1]
    padded = np.concatenate([np.repeat(x[:, :1], window + lag - 1, axis=1), x], axis=1)
    return sliding_window_view(padded, window, axis=1)[:, :n].max(axis=-1)


def lde_indices(samples, params: EstimatorParams, averaged: np.ndarray | None = None) -> np.ndarray:
    """Leading-edge detection.

    The small moving-max window ends at the current sample; the large one
    covers the samples just before it, so the test is a jump of recent
    energy over the preceding floor.
    """
    s = _as_batch(samples)
    if s.shape[1] <= params.lde_large_window:
        raise ShapeError(
            f"LDE needs more than {params.lde_large_window} samples, got {s.shape[1]}"
        )
    thr = params.alpha * s.max(axis=1, keepdims=True)
    a = causal_moving_average(s, params.avg_window) if averaged is None else averaged
    small = causal_moving_max(a, params.lde_small_window)
    large = causal_moving_max(a, params.lde_large_window, lag=params.lde_small_window)
    return _first_true((a > thr) & (small > params.lde_factor * large))


def estimate_indices(samples, method: str, params: EstimatorParams) -> np.ndarray:
    if method == PEAK:
        return peak_indices(samples, params.alpha)
    if method == IFP:
        return ifp_indices(samples, params.alpha)
    if method == LDE:
        return lde_indices(samples, params)
    raise ParameterError(f"unknown estimator {method!r}")


def _single(trace, method: str, params: EstimatorParams) -> ToaEstimate:
    s = _samples(trace)
    if s.ndim != 1:
        raise ShapeError("expected a single trace")
    if not s.max() > 0:
        raise ParameterError("estimators need a trace with positive maximum")
    idx = int(estimate_indices(s, method, params)[0])
    if idx < 0:
        raise NoArrivalError(f"{method}: no sample satisfies the arrival condition")
    return ToaEstimate(float(idx), method)


def estimate_peak(trace, params: EstimatorParams) -> ToaEstimate:
    """First local maximum above the noise threshold."""
    return _single(trace, PEAK, params)


def estimate_ifp(trace, params: EstimatorParams) -> ToaEstimate:
    """First above-threshold sample where the second difference changes sign."""
    return _single(trace, IFP, params)


def estimate_lde(trace, params: EstimatorParams) -> ToaEstimate:
    return _single(trace, LDE, params)


def estimate(trace, method: str, params: EstimatorParams) -> ToaEstimate:
    return _single(trace, method, params)


# ---------------------------------------------------------------- grid search


def _grid_points(method: str, grid: Mapping[str, Sequence]) -> list[EstimatorParams]:
    if method not in METHODS:
        raise ParameterError(f"unknown estimator {method!r}")
    base = EstimatorParams()
    alphas = sorted(set(grid.get("alpha", [])))
    if not alphas:
        raise ParameterError("grid needs at least one alpha")
    if method != LDE:
        return [replace(base, alpha=a) for a in alphas]
    keys = ("avg_window", "lde_small_window", "lde_large_window", "lde_factor")
    axes = [sorted(set(grid.get(k, [getattr(base, k)]))) for k in keys]
    points = []
    for a, avg, ws, wl, f in itertools.product(alphas, *axes):
        if wl > ws:
            points.append(EstimatorParams(a, ws, wl, f, avg))
    if not points:
        raise ParameterError("grid has no valid LDE point (large window must exceed small)")
    return points


def _tie_key(p: EstimatorParams):
    return (p.alpha, p.avg_window, p.lde_small_window, p.lde_large_window, p.lde_factor)


def _stack(records: Sequence[MeasurementRecord]):
    groups: dict[int, list[int]] = {}
    for i, r in enumerate(records):
        if r.toa_true is None:
            raise ParameterError("optimisation needs records with toa_true labels")
        groups.setdefault(len(r.cir), []).append(i)
    out = []
    for n, idx in sorted(groups.items()):
        s = np.stack([records[i].cir.samples for i in idx])
        t = np.array([records[i].toa_true for i in idx])
        out.append((s, t))
    return out


def mean_abs_toa_error(indices: np.ndarray, toa_true: np.ndarray, length: int) -> np.ndarray:
    err = np.abs(indices - toa_true)
    return np.where(indices < 0, float(length), err)


def _lde_errors(s: np.ndarray, t: np.ndarray, points: list[EstimatorParams]) -> dict:
    """Per-point error arrays for LDE, sharing filters across the grid."""
    n = s.shape[1]
    peak = s.max(axis=1, keepdims=True)
    out = {}
    for avg in sorted({p.avg_window for p in points}):
        a = causal_moving_average(s, avg)
        sub = [p for p in points if p.avg_window == avg]
        above = {al: a > al * peak for al in {p.alpha for p in sub}}
        small_cache = {}
        for ws, wl in sorted({(p.lde_small_window, p.lde_large_window) for p in sub}):
            if n <= wl:
                raise ShapeError(f"LDE needs more than {wl} samples, got {n}")
            if ws not in small_cache:
                small_cache[ws] = causal_moving_max(a, ws)
            small = small_cache[ws]
            large = causal_moving_max(a, wl, lag=ws)
            pts = [p for p in sub if (p.lde_small_window, p.lde_large_window) == (ws, wl)]
            for f in sorted({p.lde_factor for p in pts}):
                jump = small > f * large
                for p in pts:
                    if p.lde_factor == f:
                        idx = _first_true(above[p.alpha] & jump)
                        out[p] = mean_abs_toa_error(idx, t, n)
    return out


def _costs(batches, method: str, points: list[EstimatorParams]) -> list[float]:
    errs: dict = {p: [] for p in points}
    for s, t in batches:
        if method == LDE:
            for p, e in _lde_errors(s, t, points).items():
                errs[p].append(e)
        else:
            for p in points:
                errs[p].append(mean_abs_toa_error(estimate_indices(s, method, p), t, s.shape[1]))
    costs = []
    for p in points:
        flat = np.concatenate(errs[p])
        # fsum is exact, so the objective does not depend on record order
        costs.append(math.fsum(flat.tolist()) / flat.size)
    return costs


def optimize_params(
    records: Sequence[MeasurementRecord],
    method: str,
    grid: Mapping[str, Sequence] | None = None,
) -> EstimatorParams:
    """Exhaustive search for the lowest mean absolute ToA error.

    A trace without arrival costs its length in samples. Ties go to the
    smallest alpha, then the smallest windows, then the smallest factor.
    """
    if not records:
        raise ParameterError("optimize_params needs at least one record")
    points = _grid_points(method, DEFAULT_GRID if grid is None else grid)
    costs = _costs(_stack(records), method, points)
    return min(zip(costs, points), key=lambda cp: (cp[0], _tie_key(cp[1])))[1]


def search_costs(records, method, grid=None) -> list[tuple[EstimatorParams, float]]:
    """Objective value at every grid point (for diagnostics)."""
    points = _grid_points(method, DEFAULT_GRID if grid is None else grid)
    return list(zip(points, _costs(_stack(records), method, points)))


# ------------------------------------------------------------- serialisation


def records_fingerprint(records: Iterable[MeasurementRecord]) -> str:
    h = hashlib.sha256()
    for r in records:
        h.update(np.ascontiguousarray(r.cir.samples).tobytes())
        h.update(repr((r.cir.delta_t, r.toa_true, r.toa_device, r.range_true, r.environment)).encode())
    return h.hexdigest()


def params_to_dict(method: str, params: EstimatorParams, fingerprint: str = "") -> dict:
    return {"method": method, **asdict(params), "training_fingerprint": fingerprint}


def params_from_dict(doc: Mapping) -> tuple[str, EstimatorParams]:
    names = {f.name for f in fields(EstimatorParams)}
    missing = names - set(doc)
    if missing or "method" not in doc:
        raise ParameterError(f"parameter document misses {sorted(missing | ({'method'} - set(doc)))}")
    return doc["method"], EstimatorParams(**{k: doc[k] for k in names})


def save_params(path, method: str, params: EstimatorParams, fingerprint: str = "") -> None:
    Path(path).write_text(json.dumps(params_to_dict(method, params, fingerprint), indent=2) + "\n")


def load_params(path) -> tuple[str, EstimatorParams]:
    return params_from_dict(json.loads(Path(path).read_text()))
