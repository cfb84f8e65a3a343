"""Homodyne photocurrents: shot noise, detection filters and digitization.

Photocurrents are expressed in units of the intracavity phase-quadrature
amplitude Y.  Over an interval Δt the ideal record gives

    I = <Y> + ΔW / (√(8 η κ) Δt),

i.e. white shot noise of variance 1/(8ηκΔt).  The detection chain is: sum
the trajectory record into blocks at ``sample_rate * oversample``, apply a
causal Butterworth filter at that rate, then keep every ``oversample``-th
sample.  After a filter with impulse response h the per-sample shot-noise
variance is Σh² / (8ηκΔt) = B / (4ηκ), B the one-sided noise-equivalent
bandwidth.

Each trace carries the normalized autocorrelation of its noise component
(``noise_acf``) so further filtering can propagate ``shot_sigma`` exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import signal

from .errors import InvalidArgument, ResamplingError

FILTER_KINDS = ("none", "lowpass", "bandpass", "ac-highpass")
NOISE_ACF_TOL = 1e-12


@dataclass(frozen=True)
class FilterBand:
    kind: str
    low: float = 0.0
    high: float = 0.0
    order: int = 4

    @property
    def label(self) -> str:
        if self.kind == "lowpass":
            return f"{self.high / 1e6:g}"
        if self.kind == "bandpass":
            return f"{self.low / 1e6:g}-{self.high / 1e6:g}"
        if self.kind == "ac-highpass":
            return f"ac{self.low / 1e3:g}k"
        return "wide"


@dataclass(frozen=True)
class DetectorConfig:
    sample_rate: float = 2.5e7
    filter_kind: str = "lowpass"
    band_low: float = 0.0
    band_high: float = 10e6
    filter_order: int = 4
    eta: float = 1.0
    oversample: int = 8

    def __post_init__(self):
        if not self.sample_rate > 0:
            raise InvalidArgument(f"sample_rate must be > 0, got {self.sample_rate}")
        if self.filter_kind not in FILTER_KINDS:
            raise InvalidArgument(f"filter_kind must be one of {FILTER_KINDS}, got {self.filter_kind!r}")
        if self.filter_kind == "bandpass" and not 0 < self.band_low < self.band_high:
            raise InvalidArgument("bandpass needs 0 < band_low < band_high")
        if self.filter_kind == "lowpass" and not self.band_high > 0:
            raise InvalidArgument("lowpass needs band_high > 0")
        if self.filter_kind == "ac-highpass" and not self.band_low > 0:
            raise InvalidArgument("ac-highpass needs band_low > 0")
        if int(self.filter_order) != self.filter_order or self.filter_order < 1:
            raise InvalidArgument(f"filter_order must be an integer >= 1, got {self.filter_order}")
        if not 0 < self.eta <= 1:
            raise InvalidArgument(f"eta must lie in (0, 1], got {self.eta}")
        if int(self.oversample) != self.oversample or self.oversample < 1:
            raise InvalidArgument(f"oversample must be an integer >= 1, got {self.oversample}")

    @property
    def band(self) -> FilterBand:
        return FilterBand(self.filter_kind, self.band_low, self.band_high, self.filter_order)

    @property
    def fine_rate(self) -> float:
        return self.sample_rate * self.oversample


PRESETS = {
    "lp10": DetectorConfig(filter_kind="lowpass", band_high=10e6),
    "lp4": DetectorConfig(filter_kind="lowpass", band_high=4e6),
    "lp2": DetectorConfig(filter_kind="lowpass", band_high=2e6),
    "bp0.1-8": DetectorConfig(filter_kind="bandpass", band_low=0.1e6, band_high=8e6),
    "ac20k": DetectorConfig(filter_kind="ac-highpass", band_low=20e3),
    "wide": DetectorConfig(filter_kind="none"),
}


def preset(name: str, **overrides) -> DetectorConfig:
    try:
        det = PRESETS[name]
    except KeyError:
        raise InvalidArgument(
            f"unknown detector preset {name!r}; valid presets: {', '.join(PRESETS)}") from None
    return replace(det, **overrides) if overrides else det


@dataclass
class PhotocurrentTrace:
    values: np.ndarray
    sample_rate: float
    shot_sigma: float
    band: tuple = ()
    noise_acf: np.ndarray = field(default_factory=lambda: np.ones(1))
    t0: float = 0.0
    source: str = "simulated"
    dark_time: float | None = None
    settle_time: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        if not self.shot_sigma > 0:
            raise InvalidArgument(f"shot_sigma must be > 0, got {self.shot_sigma}")

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(len(self.values)) / self.sample_rate

    def coupled_mask(self) -> np.ndarray:
        t = self.times
        mask = t >= self.settle_time
        if self.dark_time is not None:
            mask &= t < self.dark_time
        return mask


# -- filters -----------------------------------------------------------------

def design_sos(band: FilterBand, fs: float):
    """Butterworth second-order sections at rate ``fs``; None for ``kind='none'``."""
    if band.kind == "none":
        return None
    nyq = fs / 2
    edges = {"lowpass": [band.high], "bandpass": [band.low, band.high],
             "ac-highpass": [band.low]}[band.kind]
    if max(edges) >= nyq:
        raise InvalidArgument(
            f"band edge {max(edges) / 1e6:g} MHz is at or beyond Nyquist ({nyq / 1e6:g} MHz)")
    btype = {"lowpass": "lowpass", "bandpass": "bandpass", "ac-highpass": "highpass"}[band.kind]
    wn = edges[0] if len(edges) == 1 else edges
    return signal.butter(band.order, wn, btype=btype, fs=fs, output="sos")


def impulse_response(sos, tol: float = 1e-15, max_len: int = 1 << 23) -> np.ndarray:
    """Impulse response long enough that the discarded tail energy is below ``tol``."""
    if sos is None:
        return np.ones(1)
    n = 4096
    while True:
        x = np.zeros(n)
        x[0] = 1.0
        h = signal.sosfilt(sos, x)
        energy = np.cumsum(h[::-1] ** 2)[::-1]
        tail = energy[n // 2]
        if tail <= tol * energy[0] or n >= max_len:
            return h
        n *= 2


def _acf_of(h: np.ndarray, max_lag: int | None = None) -> np.ndarray:
    """Unnormalized autocorrelation Σ_i h_i h_{i+k} for k >= 0."""
    n = len(h)
    nfft = 1 << int(math.ceil(math.log2(2 * n)))
    H = np.fft.rfft(h, nfft)
    r = np.fft.irfft(np.abs(H) ** 2, nfft)[:n]
    return r if max_lag is None else r[: max_lag + 1]


def _trim_acf(r: np.ndarray) -> np.ndarray:
    r = r / r[0]
    big = np.flatnonzero(np.abs(r) > NOISE_ACF_TOL)
    return r[: big[-1] + 1].copy()


def noise_equivalent_bandwidth(det: DetectorConfig) -> float:
    """One-sided noise bandwidth (Hz) of the detector filter at its working rate."""
    h = impulse_response(design_sos(det.band, det.fine_rate))
    return float(np.sum(h**2) * det.fine_rate / 2)


def shot_noise_sigma(det: DetectorConfig, kappa: float) -> float:
    """Per-sample std of pure shot noise after the detection chain."""
    h = impulse_response(design_sos(det.band, det.fine_rate))
    return math.sqrt(np.sum(h**2) * det.fine_rate / (8 * det.eta * kappa))


def filter_latency(det: DetectorConfig) -> float:
    """Group delay (s) of the detector filter in its passband.

    Evaluated at DC for lowpass, at the geometric band centre for bandpass;
    zero for ``none`` and ``ac-highpass`` (flat phase well above cutoff).
    """
    band = det.band
    if band.kind in ("none", "ac-highpass"):
        return 0.0
    sos = design_sos(band, det.fine_rate)
    f_ref = 0.0 if band.kind == "lowpass" else math.sqrt(band.low * band.high)
    df = 1e-4 * (band.high if band.kind == "lowpass" else band.low)
    _, resp = signal.sosfreqz(sos, worN=[f_ref - df, f_ref + df], fs=det.fine_rate)
    dphi = np.angle(resp[1] / resp[0])
    return float(-dphi / (2 * math.pi * 2 * df))


# -- synthesis ---------------------------------------------------------------

def _detect(raw_fine: np.ndarray, det: DetectorConfig, white_sigma: float, *, t0: float,
            source: str, dark_time=None, settle_time=0.0, seed=None) -> PhotocurrentTrace:
    sos = design_sos(det.band, det.fine_rate)
    filtered = raw_fine if sos is None else signal.sosfilt(sos, raw_fine)
    h = impulse_response(sos)
    r_fine = _acf_of(h)
    r = _trim_acf(r_fine[:: det.oversample])
    sigma = white_sigma * math.sqrt(r_fine[0])
    return PhotocurrentTrace(
        values=filtered[:: det.oversample].copy(), sample_rate=det.sample_rate, shot_sigma=sigma,
        band=(det.band,), noise_acf=r, t0=t0, source=source, dark_time=dark_time,
        settle_time=settle_time, seed=seed)


def synthesize_photocurrent(record, det: DetectorConfig, seed: int | None = None, *,
                            noise_scale: float = 1.0) -> PhotocurrentTrace:
    """Measured photocurrent for a trajectory, consistent with its own dW record.

    With η < 1 the detected noise is √η dW + √(1-η) dV for fresh dV, which is
    exactly the current seen by an inefficient detector on a state
    conditioned on the full record.  ``noise_scale`` multiplies the noise term
    (1 for physical data).
    """
    fine_dt = 1.0 / det.fine_rate
    ratio = fine_dt / record.record_interval
    m = int(round(ratio))
    if m < 1 or abs(ratio - m) > 1e-6 * ratio:
        raise ResamplingError(
            f"record interval {record.record_interval:.4e} s does not divide the "
            f"detector's working interval {fine_dt:.4e} s")
    kappa = record.params_snapshot.kappa
    eta = det.eta
    y = record.y_cond
    y_mid = 0.5 * (y[:-1] + y[1:])
    dw = record.wiener_increments[1:]
    n_blocks = len(dw) // m
    if n_blocks < det.oversample:
        raise ResamplingError("record too short for one digitizer sample")
    y_blk = y_mid[: n_blocks * m].reshape(n_blocks, m).mean(axis=1)
    w_blk = dw[: n_blocks * m].reshape(n_blocks, m).sum(axis=1)
    if eta < 1:
        rng = np.random.default_rng(seed)
        fresh = rng.standard_normal(n_blocks) * math.sqrt(fine_dt)
        w_blk = math.sqrt(eta) * w_blk + math.sqrt(1 - eta) * fresh
    raw = y_blk + noise_scale * w_blk / (math.sqrt(8 * eta * kappa) * fine_dt)
    white = noise_scale / math.sqrt(8 * eta * kappa * fine_dt)
    return _detect(raw, det, white, t0=0.5 * fine_dt, source="simulated",
                   dark_time=record.dark_time, settle_time=record.settle_time, seed=seed)


def synthesize_from_signal(y_fine: np.ndarray, det: DetectorConfig, kappa: float,
                           seed: int | None = None, *, noise_scale: float = 1.0,
                           source: str = "synthetic-telegraph") -> PhotocurrentTrace:
    """Photocurrent for a prescribed intracavity Y(t) sampled at ``det.fine_rate``,
    with fresh shot noise."""
    y_fine = np.asarray(y_fine, dtype=float)
    fine_dt = 1.0 / det.fine_rate
    rng = np.random.default_rng(seed)
    white = noise_scale / math.sqrt(8 * det.eta * kappa * fine_dt)
    raw = y_fine + white * rng.standard_normal(len(y_fine))
    return _detect(raw, det, white, t0=0.5 * fine_dt, source=source, seed=seed)


def telegraph_signal(n: int, dt: float, level: float, rate: float, rng,
                     start: int | None = None) -> np.ndarray:
    """Symmetric random telegraph ±level switching at ``rate`` per second,
    sampled exactly: the sign changes between samples with the probability
    of an odd number of switches in ``dt``, so <y(t)y(t+τ)> = level² e^{-2 rate τ}."""
    flips = rng.random(n) < -0.5 * math.expm1(-2 * rate * dt)
    s0 = (1 if rng.random() < 0.5 else -1) if start is None else start
    state = s0 * np.where(np.cumsum(flips) % 2 == 0, 1.0, -1.0)
    return level * state


def apply_filter(trace: PhotocurrentTrace, det: DetectorConfig) -> PhotocurrentTrace:
    """Causal Butterworth (kind/order from ``det``) at the trace's own sample rate.

    ``shot_sigma`` and ``noise_acf`` are propagated through the filter using
    the trace's current noise autocorrelation.
    """
    sos = design_sos(det.band, trace.sample_rate)
    if sos is None:
        return replace(trace, values=trace.values.copy(), band=trace.band + (det.band,))
    h = impulse_response(sos)
    values = signal.sosfilt(sos, trace.values)
    r_in = trace.noise_acf
    k = len(r_in) - 1
    r_in_full = np.concatenate([r_in[:0:-1], r_in])
    R_h = _acf_of(h)
    R_h_full = np.concatenate([R_h[:0:-1], R_h])
    r_out = signal.fftconvolve(R_h_full, r_in_full)
    centre = len(R_h_full) // 2 + k
    r_out = r_out[centre:]
    sigma = trace.shot_sigma * math.sqrt(r_out[0])
    return replace(trace, values=values, shot_sigma=sigma, band=trace.band + (det.band,),
                   noise_acf=_trim_acf(r_out))


# -- CSV ---------------------------------------------------------------------

def write_trace_csv(trace: PhotocurrentTrace, path) -> Path:
    """Columns t_us, y; ``# key: <json>`` header lines carry the metadata."""
    path = Path(path)
    meta = {
        "source": trace.source,
        "sample_rate": trace.sample_rate,
        "t0_s": trace.t0,
        "shot_sigma": trace.shot_sigma,
        "band": [asdict(b) for b in trace.band],
        "dark_time_s": trace.dark_time,
        "settle_time_s": trace.settle_time,
        "seed": trace.seed,
        "noise_acf": [float(v) for v in trace.noise_acf],
    }
    lines = [f"# {k}: {json.dumps(v)}" for k, v in meta.items()]
    lines.append("t_us,y")
    lines.extend(f"{t!r},{v!r}" for t, v in zip((trace.times * 1e6).tolist(), trace.values.tolist()))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_trace_csv(path) -> PhotocurrentTrace:
    meta, values = {}, []
    with open(path) as fh:
        for line in fh:
            if line.startswith("# "):
                key, _, val = line[2:].partition(": ")
                meta[key] = json.loads(val)
            elif line.startswith("t_us"):
                continue
            elif line.strip():
                values.append(float(line.split(",")[1]))
    return PhotocurrentTrace(
        values=np.array(values), sample_rate=meta["sample_rate"], shot_sigma=meta["shot_sigma"],
        band=tuple(FilterBand(**b) for b in meta["band"]),
        noise_acf=np.array(meta["noise_acf"], dtype=float), t0=meta["t0_s"],
        source=meta["source"], dark_time=meta["dark_time_s"],
        settle_time=meta["settle_time_s"], seed=meta["seed"])
