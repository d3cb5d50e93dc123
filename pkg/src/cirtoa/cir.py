"""CIR containers, synthetic channel generation and pre-processing.

All ToA quantities are fractional sample indices. Conversion to metres
happens only through :data:`SPEED_OF_LIGHT` and the per-trace ``delta_t``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateTraceError, ParameterError

SPEED_OF_LIGHT = 0.299792458  # m/ns
DEFAULT_BANDWIDTH_HZ = 499.2e6
DEFAULT_DELTA_T_NS = 1e9 / (2 * DEFAULT_BANDWIDTH_HZ)

RAW_LENGTH = 157
MAX_SHIFT = 30
CNN_LENGTH = RAW_LENGTH + MAX_SHIFT  # 187
NOISE_WINDOW = 8

# index of zero range in synthetic traces
ORIGIN_OFFSET = 5.0
# half-span of the Hann taper applied to the sinc pulse, in units of B*t
PULSE_TAPER = 4.0


@dataclass(frozen=True, eq=False)
class CirTrace:
    """One magnitude CIR.

    ``samples`` are linear, non-negative amplitudes, ``delta_t`` the time
    between consecutive samples in ns and ``noise_sigma`` the noise-floor
    scale in the units of ``samples``.
    """

    samples: np.ndarray
    delta_t: float = DEFAULT_DELTA_T_NS
    noise_sigma: float = 0.0

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float64).reshape(-1)
        if samples.size == 0:
            raise ParameterError("CIR must contain at least one sample")
        if not np.all(np.isfinite(samples)) or np.any(samples < 0):
            raise ParameterError("CIR samples must be finite and non-negative")
        if not (np.isfinite(self.delta_t) and self.delta_t > 0):
            raise ParameterError(f"delta_t must be positive, got {self.delta_t}")
        if not (np.isfinite(self.noise_sigma) and self.noise_sigma >= 0):
            raise ParameterError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "delta_t", float(self.delta_t))
        object.__setattr__(self, "noise_sigma", float(self.noise_sigma))

    def __len__(self):
        return self.samples.size

    def __eq__(self, other):
        if not isinstance(other, CirTrace):
            return NotImplemented
        return (
            self.delta_t == other.delta_t
            and self.noise_sigma == other.noise_sigma
            and np.array_equal(self.samples, other.samples)
        )


@dataclass(frozen=True)
class MeasurementRecord:
    """A CIR plus its labels.

    ``toa_true`` and ``toa_device`` are fractional sample indices into
    ``cir.samples``; ``range_true`` is in metres.
    """

    cir: CirTrace
    toa_true: float | None
    range_true: float
    environment: str = ""
    toa_device: float | None = None

    def __post_init__(self):
        n = len(self.cir)
        if self.toa_true is not None:
            if not (np.isfinite(self.toa_true) and 0 <= self.toa_true < n):
                raise ParameterError(
                    f"toa_true={self.toa_true} outside [0, {n}) for this CIR"
                )
            object.__setattr__(self, "toa_true", float(self.toa_true))
        if self.toa_device is not None:
            if not np.isfinite(self.toa_device):
                raise ParameterError("toa_device must be finite")
            object.__setattr__(self, "toa_device", float(self.toa_device))
        if not (np.isfinite(self.range_true) and self.range_true >= 0):
            raise ParameterError(f"range_true must be >= 0, got {self.range_true}")
        object.__setattr__(self, "range_true", float(self.range_true))

    @property
    def tot(self) -> float:
        """Transmission-time index that makes ranging from ``toa_true`` exact."""
        if self.toa_true is None:
            raise ParameterError("record has no toa_true label")
        return self.toa_true - self.range_true / (SPEED_OF_LIGHT * self.cir.delta_t)

    def replace(self, **changes) -> "MeasurementRecord":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class ChannelParams:
    """Knobs of the synthetic pulse-plus-taps channel.

    Delays and the decay constant are in samples. ``snr_db`` is the power
    ratio of the strongest path to the complex noise.
    """

    bandwidth_hz: float = DEFAULT_BANDWIDTH_HZ
    los_probability: float = 0.5
    direct_excess_delay_mean: float = 6.0
    n_multipath: int = 12
    decay_constant: float = 20.0
    snr_db: float = 30.0
    raw_length: int = RAW_LENGTH
    true_range_bounds: tuple[float, float] = (0.5, 6.0)
    environment: str = "synthetic"
    tap_spacing_mean: float = 3.0
    tap_gain: float = 0.5

    def __post_init__(self):
        if not (np.isfinite(self.bandwidth_hz) and self.bandwidth_hz > 0):
            raise ParameterError("bandwidth_hz must be positive")
        if not (0.0 <= self.los_probability <= 1.0):
            raise ParameterError(
                f"los_probability must lie in [0, 1], got {self.los_probability}"
            )
        if not self.direct_excess_delay_mean >= 0:
            raise ParameterError("direct_excess_delay_mean must be >= 0")
        if int(self.n_multipath) != self.n_multipath or self.n_multipath < 0:
            raise ParameterError("n_multipath must be a non-negative integer")
        if not self.decay_constant > 0:
            raise ParameterError("decay_constant must be positive")
        if not np.isfinite(self.snr_db):
            raise ParameterError("snr_db must be finite")
        if int(self.raw_length) != self.raw_length or self.raw_length < 32:
            raise ParameterError("raw_length must be an integer >= 32")
        lo, hi = self.true_range_bounds
        if not (0 <= lo <= hi):
            raise ParameterError("true_range_bounds must satisfy 0 <= min <= max")
        if ORIGIN_OFFSET + hi / (SPEED_OF_LIGHT * self.delta_t) >= self.raw_length:
            raise ParameterError("true_range_bounds place the arrival outside the trace")
        if not self.tap_spacing_mean > 0:
            raise ParameterError("tap_spacing_mean must be positive")
        if not self.tap_gain >= 0:
            raise ParameterError("tap_gain must be >= 0")
        object.__setattr__(self, "true_range_bounds", (float(lo), float(hi)))
        object.__setattr__(self, "n_multipath", int(self.n_multipath))
        object.__setattr__(self, "raw_length", int(self.raw_length))

    @property
    def delta_t(self) -> float:
        return 1e9 / (2.0 * self.bandwidth_hz)


def normalize_cir(trace: CirTrace) -> CirTrace:
    peak = trace.samples.max()
    if peak <= 0:
        raise DegenerateTraceError("cannot normalize an all-zero trace")
    return CirTrace(trace.samples / peak, trace.delta_t, trace.noise_sigma / peak)


def estimate_noise_sigma(trace: CirTrace | np.ndarray, window: int = NOISE_WINDOW) -> float:
    """RMS of the quietest contiguous ``window``-sample stretch of the trace."""
    samples = trace.samples if isinstance(trace, CirTrace) else np.asarray(trace, float)
    if samples.size < 2 * window:
        raise ParameterError(
            f"noise estimation needs at least {2 * window} samples, got {samples.size}"
        )
    energy = np.convolve(samples * samples, np.ones(window), mode="valid")
    return float(np.sqrt(max(energy.min(), 0.0) / window))


def _noise_like(rng: np.random.Generator, scale: float, n: int) -> np.ndarray:
    return rng.rayleigh(scale, size=n) if scale > 0 else np.zeros(n)


def pad_to_length(trace: CirTrace, length: int, rng: np.random.Generator) -> CirTrace:
    """End-pad ``trace`` to ``length`` with Rayleigh noise of scale ``noise_sigma``."""
    n = len(trace)
    if n > length:
        raise ParameterError(f"trace of length {n} is longer than {length}")
    if n == length:
        return trace
    tail = _noise_like(rng, trace.noise_sigma, length - n)
    return CirTrace(np.concatenate([trace.samples, tail]), trace.delta_t, trace.noise_sigma)


def shift_and_pad(
    trace: CirTrace,
    toa_label: float,
    k: int,
    rng: np.random.Generator,
    max_shift: int = MAX_SHIFT,
) -> tuple[CirTrace, float]:
    """Prepend ``k`` and append ``max_shift - k`` noise-like samples.

    The label moves with the CIR, so the returned label is ``toa_label + k``.
    """
    if int(k) != k or not 0 <= k <= max_shift:
        raise ParameterError(f"shift k must be an integer in [0, {max_shift}], got {k}")
    if len(trace) != RAW_LENGTH:
        raise ParameterError(f"shift_and_pad expects {RAW_LENGTH} samples, got {len(trace)}")
    k = int(k)
    head = _noise_like(rng, trace.noise_sigma, k)
    tail = _noise_like(rng, trace.noise_sigma, max_shift - k)
    samples = np.concatenate([head, trace.samples, tail])
    return CirTrace(samples, trace.delta_t, trace.noise_sigma), toa_label + k


def label_toa(toa_device: float, ranging_error: float, delta_t: float) -> float:
    """Ground-truth ToA index from a device estimate and its ranging error (m)."""
    if not all(np.isfinite(v) for v in (toa_device, ranging_error, delta_t)):
        raise ParameterError("label_toa inputs must be finite")
    if delta_t <= 0:
        raise ParameterError(f"delta_t must be positive, got {delta_t}")
    return toa_device - ranging_error / (SPEED_OF_LIGHT * delta_t)


def preprocess_record(
    record: MeasurementRecord,
    rng: np.random.Generator,
    k: int | None = None,
) -> MeasurementRecord:
    """Unify the raw length, apply a random shift/pad and normalize.

    The output CIR always has :data:`CNN_LENGTH` samples with maximum 1.
    """
    trace = record.cir
    if trace.noise_sigma == 0 and len(trace) >= 2 * NOISE_WINDOW:
        trace = CirTrace(trace.samples, trace.delta_t, estimate_noise_sigma(trace))
    trace = pad_to_length(trace, RAW_LENGTH, rng)
    if k is None:
        k = int(rng.integers(0, MAX_SHIFT + 1))
    toa_true = record.toa_true if record.toa_true is not None else 0.0
    trace, toa_true = shift_and_pad(trace, toa_true, k, rng)
    trace = normalize_cir(trace)
    return MeasurementRecord(
        cir=trace,
        toa_true=toa_true if record.toa_true is not None else None,
        range_true=record.range_true,
        environment=record.environment,
        toa_device=None if record.toa_device is None else record.toa_device + k,
    )


def band_limited_pulse(tau: np.ndarray, bandwidth_hz: float, delta_t: float) -> np.ndarray:
    """Hann-tapered sinc pulse; ``tau`` is the offset from the arrival in samples."""
    x = np.asarray(tau, float) * delta_t * bandwidth_hz * 1e-9
    taper = np.where(np.abs(x) < PULSE_TAPER, 0.5 * (1 + np.cos(np.pi * x / PULSE_TAPER)), 0.0)
    return np.sinc(x) * taper


def synth_record(params: ChannelParams, seed) -> MeasurementRecord:
    """Draw one labelled record from the pulse-plus-taps channel.

    The direct path always arrives at ``toa_true``. Under NLOS it is
    attenuated and the strongest path arrives after an exponential excess
    delay. Multipath taps decay with their delay after the direct path, so
    under NLOS some of them land between the direct and strongest path.
    """
    rng = np.random.default_rng(seed)
    dt = params.delta_t
    lo, hi = params.true_range_bounds
    range_true = float(rng.uniform(lo, hi))
    toa_true = range_true / (SPEED_OF_LIGHT * dt) + ORIGIN_OFFSET

    los = rng.random() < params.los_probability
    if los:
        delays = [toa_true]
        amps = [1.0]
    else:
        excess = rng.exponential(params.direct_excess_delay_mean) if params.direct_excess_delay_mean > 0 else 0.0
        delays = [toa_true, toa_true + excess]
        amps = [rng.uniform(0.05, 0.5), 1.0]

    gaps = np.cumsum(rng.exponential(params.tap_spacing_mean, size=params.n_multipath)) + 1.0
    tap_amps = params.tap_gain * np.exp(-gaps / (2 * params.decay_constant))
    tap_amps = tap_amps * rng.rayleigh(np.sqrt(0.5), size=params.n_multipath)

    delays = np.concatenate([delays, toa_true + gaps])
    amps = np.concatenate([amps, tap_amps])
    phases = np.exp(2j * np.pi * rng.random(delays.size))

    n = np.arange(params.raw_length)
    pulses = band_limited_pulse(n[None, :] - delays[:, None], params.bandwidth_hz, dt)
    h = (amps * phases) @ pulses

    noise_power = 10.0 ** (-params.snr_db / 10.0)
    noise = rng.normal(size=(2, params.raw_length)) * np.sqrt(noise_power / 2.0)
    samples = np.abs(h + noise[0] + 1j * noise[1])

    trace = CirTrace(samples, dt, estimate_noise_sigma(samples))
    return MeasurementRecord(trace, toa_true, range_true, params.environment)


def synth_dataset(params: ChannelParams, n: int, seed: int) -> list[MeasurementRecord]:
    """``n`` independent records; record ``i`` uses the seed pair ``(seed, i)``."""
    return [synth_record(params, [seed, i]) for i in range(n)]
