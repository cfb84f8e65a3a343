"""Photocurrent statistics: histograms, shot-noise-constrained bi-Gaussian
fits, splitting sweeps over drive strength, autocorrelations, and the
large-N splitting predicted by the steady-state master equation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize, stats
from scipy.special import ndtr

from .errors import CqedError, FitError, InvalidArgument, TruncationError
from .model import SystemParams, steady_state, truncation_heuristic
from .photocurrent import PhotocurrentTrace, apply_filter, preset, synthesize_photocurrent
from .quantum import Space, expectation, quadratures
from .trajectory import SimConfig, ensemble_run

log = logging.getLogger(__name__)

N_BOOTSTRAP = 200
MIN_FIT_TOTAL = 1000


# -- histograms --------------------------------------------------------------

@dataclass
class HistogramData:
    bin_edges: np.ndarray
    counts: np.ndarray
    total: int
    source_band: tuple = ()

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])


def pooled_samples(traces: list[PhotocurrentTrace]) -> np.ndarray:
    """Samples from atom-coupled segments of all traces (settle and dark excluded)."""
    if not traces:
        raise InvalidArgument("need at least one trace")
    band = traces[0].band
    for tr in traces[1:]:
        if tr.band != band:
            raise InvalidArgument("traces were filtered with different bands")
    return np.concatenate([tr.values[tr.coupled_mask()] for tr in traces])


def freedman_diaconis_bins(x: np.ndarray, lo: int = 30, hi: int = 200) -> int:
    q75, q25 = np.percentile(x, [75, 25])
    iqr = q75 - q25
    if iqr <= 0:
        return lo
    width = 2 * iqr / len(x) ** (1 / 3)
    return int(np.clip(math.ceil((x.max() - x.min()) / width), lo, hi))


def make_histogram(traces: list[PhotocurrentTrace], n_bins: int | None = None,
                   bin_range: tuple[float, float] | None = None) -> HistogramData:
    x = pooled_samples(traces)
    if n_bins is None:
        n_bins = freedman_diaconis_bins(x)
    if n_bins < 10:
        raise InvalidArgument(f"n_bins must be >= 10, got {n_bins}")
    counts, edges = np.histogram(x, bins=n_bins, range=bin_range)
    return HistogramData(edges, counts.astype(np.int64), int(counts.sum()), traces[0].band)


def excess_kurtosis(x: np.ndarray) -> float:
    return float(stats.kurtosis(x, fisher=True, bias=True))


# -- constrained fits ----------------------------------------------------------

@dataclass
class BiGaussianFit:
    c1: float
    c2: float
    w1: float
    w2: float
    sigma: float
    splitting: float
    goodness: float
    log_likelihood: float

    def density(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return (self.w1 * stats.norm.pdf(y, self.c1, self.sigma)
                + self.w2 * stats.norm.pdf(y, self.c2, self.sigma))


def _bin_probs(edges, sigma, c1, c2, w):
    z = (edges[None, :] - np.array([[c1], [c2]])) / sigma
    lo, hi = z[:, :-1], z[:, 1:]
    # upper-tail bins from the survival side, where ndtr(z) would round to 1
    mass = np.where(lo > 0, ndtr(-lo) - ndtr(-hi), ndtr(hi) - ndtr(lo))
    # not renormalized: mass outside the histogram range is lost likelihood
    return w * mass[0] + (1 - w) * mass[1]


def _nll(theta, edges, counts, sigma):
    c1, c2, logit_w = theta
    w = 1.0 / (1.0 + math.exp(-np.clip(logit_w, -50, 50)))
    p = _bin_probs(edges, sigma, c1, c2, w)
    return -float(np.sum(counts * np.log(np.maximum(p, 1e-300))))


def fit_bigaussian(hist: HistogramData, sigma_shot: float,
                   starts: list[tuple[float, float, float]] | None = None) -> BiGaussianFit:
    """Binned maximum-likelihood fit of w N(c1, σ) + (1-w) N(c2, σ), σ fixed.

    Multi-start over centroid guesses ±σ, ±2σ, ±4σ about the histogram mean
    unless ``starts`` (c1, c2, w triples) are supplied.
    """
    if hist.total < MIN_FIT_TOTAL:
        raise InvalidArgument(f"histogram total {hist.total} below {MIN_FIT_TOTAL}")
    if not sigma_shot > 0:
        raise InvalidArgument("sigma_shot must be > 0")
    edges = hist.bin_edges
    counts = hist.counts.astype(float)
    centre = float(np.sum(hist.centers * counts) / counts.sum())
    if starts is None:
        starts = [(centre - k * sigma_shot, centre + k * sigma_shot, 0.5) for k in (1, 2, 4)]
    best = None
    for c1, c2, w in starts:
        w = min(max(w, 1e-6), 1 - 1e-6)
        x0 = [c1, c2, math.log(w / (1 - w))]
        res = optimize.minimize(_nll, x0, args=(edges, counts, sigma_shot), method="Nelder-Mead",
                                options={"xatol": 1e-7, "fatol": 1e-9, "maxiter": 6000})
        if best is None or res.fun < best.fun:
            best = res
    if best is None or not best.success or not np.all(np.isfinite(best.x)):
        raise FitError("bi-Gaussian fit did not converge from any start",
                       best_residual=None if best is None else float(best.fun))
    c1, c2, lw = best.x
    w = 1.0 / (1.0 + math.exp(-lw))
    if c1 > c2:
        c1, c2, w = c2, c1, 1 - w
    expected = counts.sum() * _bin_probs(edges, sigma_shot, c1, c2, w)
    used = expected > 0
    chi2 = float(np.sum((counts[used] - expected[used]) ** 2 / expected[used]))
    dof = max(int(used.sum()) - 3, 1)
    return BiGaussianFit(c1=float(c1), c2=float(c2), w1=float(w), w2=float(1 - w),
                         sigma=float(sigma_shot), splitting=float(c2 - c1), goodness=chi2 / dof,
                         log_likelihood=-float(best.fun))


def fit_single_gaussian(hist: HistogramData, sigma_shot: float) -> tuple[float, float]:
    """Best centre and log-likelihood of a single N(c, σ) with σ fixed."""
    edges = hist.bin_edges
    counts = hist.counts.astype(float)

    def nll(c):
        return _nll([c, c, 0.0], edges, counts, sigma_shot)

    span = float(edges[-1] - edges[0])
    res = optimize.minimize_scalar(nll, bounds=(float(edges[0]), float(edges[-1])), method="bounded",
                                   options={"xatol": 1e-9 * span})
    return float(res.x), -float(res.fun)


def likelihood_ratio_test(hist: HistogramData, sigma_shot: float,
                          fit: BiGaussianFit | None = None) -> tuple[float, float]:
    """Bi-Gaussian vs single Gaussian (both with σ fixed): statistic and χ²(2) p-value."""
    if fit is None:
        fit = fit_bigaussian(hist, sigma_shot)
    _, ll1 = fit_single_gaussian(hist, sigma_shot)
    stat = max(2.0 * (fit.log_likelihood - ll1), 0.0)
    return stat, float(stats.chi2.sf(stat, df=2))


# -- splitting sweep -----------------------------------------------------------

@dataclass
class SplittingRow:
    N: float
    band: str
    splitting: float
    stderr: float
    n_traj: int
    error: str | None = None


def band_label(det) -> str:
    return det.band.label


def splitting_with_error(traces: list[PhotocurrentTrace], rng, n_bootstrap: int = N_BOOTSTRAP
                         ) -> tuple[BiGaussianFit, float]:
    """Fit of the pooled histogram and bootstrap stderr of the splitting,
    resampling whole traces (trajectories)."""
    sigma = traces[0].shot_sigma
    hist = make_histogram(traces)
    fit = fit_bigaussian(hist, sigma)
    start = [(fit.c1, fit.c2, fit.w1)]
    values = []
    for _ in range(n_bootstrap):
        pick = rng.integers(0, len(traces), len(traces))
        sample = [traces[i] for i in pick]
        try:
            h = make_histogram(sample, n_bins=len(hist.counts),
                               bin_range=(hist.bin_edges[0], hist.bin_edges[-1]))
            values.append(fit_bigaussian(h, sigma, starts=start).splitting)
        except CqedError:
            continue
    stderr = float(np.std(values, ddof=1)) if len(values) > 1 else float("nan")
    return fit, stderr


def splitting_curve(params_base: SystemParams, N_values, det_presets, n_traj: int, *,
                    t_end: float = 5e-6, seed: int = 0, workers: int = 1,
                    n_bootstrap: int = N_BOOTSTRAP, record_interval: float = 2.5e-9,
                    ensembles: dict | None = None) -> list[SplittingRow]:
    """Splitting of bi-Gaussian centroids for every (N, detector) cell.

    One ensemble per N (seeded from ``seed`` and the position of N in the
    list) is shared by all detector bands.  Failed cells are returned with a
    NaN splitting and the error message.  ``ensembles`` may pre-supply
    records keyed by N.
    """
    N_values = list(N_values)
    if not N_values:
        raise InvalidArgument("N_values must be nonempty")
    dets = [preset(d) if isinstance(d, str) else d for d in det_presets]
    rows = []
    for k, N in enumerate(N_values):
        params = params_base.with_N(N)
        cell_seed = int(np.random.SeedSequence(seed, spawn_key=(k,)).generate_state(1, np.uint64)[0])
        try:
            if ensembles is not None and N in ensembles:
                records = ensembles[N]
            else:
                cfg = SimConfig.for_params(params, t_end, record_interval=record_interval,
                                           seed=cell_seed)
                records = ensemble_run(params, cfg, n_traj, workers=workers)
        except CqedError as exc:
            log.warning("N=%g: ensemble failed: %s", N, exc)
            rows.extend(SplittingRow(N, band_label(d), math.nan, math.nan, 0, str(exc)) for d in dets)
            continue
        for j, det in enumerate(dets):
            rng = np.random.default_rng([cell_seed, j])
            try:
                traces = [synthesize_photocurrent(r, det, seed=r.seed) for r in records]
                fit, err = splitting_with_error(traces, rng, n_bootstrap)
                rows.append(SplittingRow(N, band_label(det), fit.splitting, err, len(records)))
            except CqedError as exc:
                log.warning("N=%g band %s failed: %s", N, band_label(det), exc)
                rows.append(SplittingRow(N, band_label(det), math.nan, math.nan, len(records), str(exc)))
    return rows


# -- autocorrelation -----------------------------------------------------------

def biased_acf(x: np.ndarray, n_lags: int) -> np.ndarray:
    """(1/n) Σ_t x_t x_{t+k} for k = 0..n_lags."""
    n = len(x)
    nfft = 1 << int(math.ceil(math.log2(2 * n)))
    X = np.fft.rfft(x, nfft)
    r = np.fft.irfft(X * np.conj(X), nfft)[: n_lags + 1]
    return r / n


def autocorrelation(trace: PhotocurrentTrace, max_lag: float, *, ac_filter: bool = True,
                    two_sided: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Biased, unnormalized autocorrelation <y(t) y(t+τ)> of a photocurrent.

    The 20 kHz ac-highpass preset is applied first unless ``ac_filter`` is
    False.  Lags are in seconds.
    """
    n_lags = int(round(max_lag * trace.sample_rate))
    if n_lags < 1:
        raise InvalidArgument("max_lag shorter than one sample")
    if len(trace.values) < 10 * n_lags:
        raise InvalidArgument(
            f"trace of {len(trace.values)} samples is shorter than 10x max_lag ({10 * n_lags})")
    if ac_filter:
        trace = apply_filter(trace, preset("ac20k"))
    acf = biased_acf(trace.values, n_lags)
    lags = np.arange(n_lags + 1) / trace.sample_rate
    if two_sided:
        return np.concatenate([-lags[:0:-1], lags]), np.concatenate([acf[:0:-1], acf])
    return lags, acf


def noise_autocorrelation(trace: PhotocurrentTrace, n_lags: int, *, ac_filter: bool = True
                          ) -> np.ndarray:
    """Shot-noise contribution σ² r(k) to the acf of ``trace``, k = 0..n_lags."""
    if ac_filter:
        trace = apply_filter(trace, preset("ac20k"))
    r = np.zeros(n_lags + 1)
    m = min(len(trace.noise_acf), n_lags + 1)
    r[:m] = trace.noise_acf[:m]
    return trace.shot_sigma**2 * r


def ensemble_autocorrelation(traces: list[PhotocurrentTrace], max_lag: float, *,
                             coupled_only: bool = True):
    """Mean acf over traces, its standard error, and the mean shot-noise part."""
    curves, noise = [], []
    lags = None
    for tr in traces:
        if coupled_only:
            mask = tr.coupled_mask()
            tr = replace(tr, values=tr.values[mask], dark_time=None, settle_time=0.0)
        lags, acf = autocorrelation(tr, max_lag)
        curves.append(acf)
        noise.append(noise_autocorrelation(tr, len(acf) - 1))
    curves = np.array(curves)
    se = curves.std(axis=0, ddof=1) / math.sqrt(len(curves)) if len(curves) > 1 else np.zeros_like(lags)
    return lags, curves.mean(axis=0), se, np.mean(noise, axis=0)


def decay_time(lags: np.ndarray, acf: np.ndarray, noise: np.ndarray | None = None) -> float:
    """First lag at which the (noise-subtracted) acf drops to 1/e of its zero-lag value."""
    excess = acf - (0.0 if noise is None else noise)
    target = excess[0] / math.e
    below = np.flatnonzero(excess <= target)
    if len(below) == 0:
        return math.inf
    k = below[0]
    if k == 0:
        return 0.0
    y0, y1 = excess[k - 1], excess[k]
    return float(lags[k - 1] + (y0 - target) / (y0 - y1) * (lags[k] - lags[k - 1]))


# -- switching statistics ------------------------------------------------------

def hysteresis_labels(y: np.ndarray, threshold: float) -> np.ndarray:
    """±1 labels that only change when ``y`` crosses ∓threshold.

    Samples before the first excursion beyond the band take the sign of that
    first excursion (or +1 if there is none).
    """
    y = np.asarray(y, dtype=float)
    out = np.empty(len(y), dtype=np.int8)
    beyond = np.flatnonzero(np.abs(y) > threshold)
    state = 1 if len(beyond) == 0 or y[beyond[0]] > 0 else -1
    for i, v in enumerate(y):
        if v > threshold:
            state = 1
        elif v < -threshold:
            state = -1
        out[i] = state
    return out


def switching_dwell_times(y: np.ndarray, dt: float, threshold: float) -> np.ndarray:
    """Durations between successive hysteresis-confirmed sign changes."""
    labels = hysteresis_labels(y, threshold)
    switches = np.flatnonzero(np.diff(labels) != 0) + 1
    return np.diff(switches) * dt


# -- large-N asymptote ---------------------------------------------------------

def steady_state_splitting(params: SystemParams, n_max: int | None = None) -> float:
    """Branch separation s = 2√<:ΔY²:> of the steady state.

    A symmetric two-level mixture of coherent branches at ±s/2 has normally
    ordered Y variance s²/4; normal ordering strips the vacuum (shot-noise)
    part exactly as the constrained-width fit does.
    """
    if n_max is None:
        n_max = truncation_heuristic(params.N)
    space = Space(n_max)
    rho = steady_state(params, space)
    _, Y = quadratures(space)
    var = expectation(rho, Y @ Y).real - expectation(rho, Y).real ** 2 - 0.25
    return 2.0 * math.sqrt(max(var, 0.0))


@dataclass
class AsymptoteResult:
    value: float
    N_sequence: list = field(default_factory=list)
    splittings: list = field(default_factory=list)


def asymptotic_splitting_sequence(params: SystemParams, *, n_max: int = 200, N_start: float = 10.0,
                                  growth: float = 1.5, rtol: float = 0.01) -> AsymptoteResult:
    """Steady-state splittings at N_start·growth^k until successive values
    differ by less than ``rtol``; the space for each N follows the
    truncation heuristic.  Raises TruncationError once N would exceed n_max/2."""
    result = AsymptoteResult(math.nan)
    N = N_start
    while N <= n_max / 2:
        s = steady_state_splitting(params.with_N(N), min(truncation_heuristic(N), n_max))
        result.N_sequence.append(N)
        result.splittings.append(s)
        if len(result.splittings) > 1:
            prev = result.splittings[-2]
            if abs(s - prev) <= rtol * abs(s) + 1e-6:
                result.value = s
                return result
        N *= growth
    raise TruncationError(
        f"splitting did not converge to {rtol:.0%} before N = n_max/2 = {n_max / 2:g}; "
        f"sequence {[round(v, 4) for v in result.splittings]}", required_n_max=2 * n_max)


def asymptotic_splitting(params: SystemParams, **kwargs) -> float:
    return asymptotic_splitting_sequence(params, **kwargs).value


# -- figure CSVs ---------------------------------------------------------------

def write_fig1b_csv(hist: HistogramData, fit: BiGaussianFit, path):
    lines = ["bin_center,count,fit_density"]
    for c, n, d in zip(hist.centers.tolist(), hist.counts.tolist(), fit.density(hist.centers).tolist()):
        lines.append(f"{c!r},{n},{d!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_fig2_csv(rows: list[SplittingRow], path):
    lines = ["N,band_MHz,splitting,stderr"]
    for r in rows:
        lines.append(f"{float(r.N)!r},{r.band},{float(r.splitting)!r},{float(r.stderr)!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_fig3_csv(curves: dict, path):
    """``curves`` maps case label -> (lags_s, acf)."""
    lines = ["lag_us,acf,case"]
    for label, (lags, acf) in curves.items():
        for t, v in zip((np.asarray(lags) * 1e6).tolist(), np.asarray(acf).tolist()):
            lines.append(f"{t!r},{v!r},{label}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
