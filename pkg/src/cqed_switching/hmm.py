"""Three-state telegraph HMM (negative, positive, dark) with posterior decoding."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from numba import njit

from .analysis import fit_bigaussian, hysteresis_labels, make_histogram
from .errors import DecodingError, InvalidArgument, UndersampledModelError
from .model import SystemParams
from .photocurrent import (DetectorConfig, PhotocurrentTrace, filter_latency, shot_noise_sigma,
                           synthesize_photocurrent)
from .trajectory import SimConfig, TrajectoryRecord, ensemble_run

NEG, POS, DARK = 0, 1, 2
STATE_NAMES = ("neg", "pos", "dark")
ROW_TOL = 1e-12
MAX_STEP_RATE = 0.5


def transition_from_rates(switch_rate: float, dark_rate: float, dt: float) -> np.ndarray:
    p_s = -math.expm1(-switch_rate * dt)
    p_d = -math.expm1(-dark_rate * dt)
    if p_s + p_d > 1:
        raise InvalidArgument("switch and dark probabilities per step exceed 1")
    stay = 1.0 - p_s - p_d
    return np.array([[stay, p_s, p_d],
                     [p_s, stay, p_d],
                     [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class HmmSpec:
    mu: float
    sigma: float
    switch_rate: float
    dark_rate: float
    dt: float
    transition_matrix: np.ndarray
    initial_distribution: np.ndarray
    band: tuple | None = None

    def __post_init__(self):
        A = np.asarray(self.transition_matrix, dtype=float)
        pi = np.asarray(self.initial_distribution, dtype=float)
        if A.shape != (3, 3) or pi.shape != (3,):
            raise InvalidArgument("transition matrix must be 3x3 and initial distribution length 3")
        if np.any(A < 0) or np.any(A > 1) or np.any(pi < 0) or np.any(pi > 1):
            raise InvalidArgument("probabilities must lie in [0, 1]")
        if np.any(np.abs(A.sum(axis=1) - 1) > ROW_TOL):
            raise InvalidArgument("transition matrix rows must sum to 1")
        if abs(pi.sum() - 1) > ROW_TOL:
            raise InvalidArgument("initial distribution must sum to 1")
        if A[DARK, DARK] != 1.0:
            raise InvalidArgument("dark state must be absorbing")
        if not self.sigma > 0:
            raise InvalidArgument("sigma must be > 0")
        object.__setattr__(self, "transition_matrix", A)
        object.__setattr__(self, "initial_distribution", pi)

    @classmethod
    def from_rates(cls, mu: float, sigma: float, switch_rate: float, dark_rate: float, dt: float,
                   initial=(0.5, 0.5, 0.0), band=None) -> "HmmSpec":
        return cls(mu, sigma, switch_rate, dark_rate, dt,
                   transition_from_rates(switch_rate, dark_rate, dt), np.asarray(initial, float), band)

    @property
    def means(self) -> np.ndarray:
        return np.array([-self.mu, self.mu, 0.0])

    def with_switch_rate(self, rate: float) -> "HmmSpec":
        return replace(self, switch_rate=rate,
                       transition_matrix=transition_from_rates(rate, self.dark_rate, self.dt))


@dataclass
class DecodedPath:
    states: np.ndarray
    posteriors: np.ndarray
    log_likelihood: float
    times: np.ndarray | None = None


def build_hmm(params: SystemParams, det: DetectorConfig, mu: float, dark_lifetime: float | None,
              switch_rate: float | None = None, noise_scale: float = 1.0) -> HmmSpec:
    """HMM matched to a detector: one step per digitizer sample, emission
    width equal to the band's shot noise, switching at γ⊥/2 unless given."""
    if not mu > 0:
        raise InvalidArgument(f"mu must be > 0, got {mu}")
    dt = 1.0 / det.sample_rate
    if switch_rate is None:
        switch_rate = params.gamma_perp / 2
    if dt * switch_rate > MAX_STEP_RATE:
        raise UndersampledModelError(
            f"dt*switch_rate = {dt * switch_rate:.3f} > {MAX_STEP_RATE}: the sample rate "
            f"{det.sample_rate:.3g}/s cannot resolve switching at {switch_rate:.3g}/s")
    dark_rate = 0.0 if dark_lifetime is None or math.isinf(dark_lifetime) else 1.0 / dark_lifetime
    sigma = noise_scale * shot_noise_sigma(det, params.kappa)
    return HmmSpec.from_rates(mu, sigma, switch_rate, dark_rate, dt, band=(det.band,))


# -- decoding ------------------------------------------------------------------

@njit(cache=True)
def _lse3(a0, a1, a2):
    m = max(a0, a1, a2)
    if m == -np.inf:
        return -np.inf
    return m + np.log(np.exp(a0 - m) + np.exp(a1 - m) + np.exp(a2 - m))


@njit(cache=True)
def _forward_backward(logb, logA, logpi, is_reset):
    """Log-domain recursion with per-step normalization.

    Returns the normalized forward and backward messages and the per-step log
    normalizers, whose sum is the log-likelihood. Keeping every message O(1)
    avoids the cancellation that raw log-alphas of size ~T suffer when summed.
    """
    T = logb.shape[0]
    la = np.empty((T, 3))
    lb = np.empty((T, 3))
    c = np.empty(T)
    for t in range(T):
        for j in range(3):
            if t == 0 or is_reset[t]:
                la[t, j] = logpi[j] + logb[t, j]
            else:
                la[t, j] = logb[t, j] + _lse3(la[t - 1, 0] + logA[0, j], la[t - 1, 1] + logA[1, j],
                                              la[t - 1, 2] + logA[2, j])
        c[t] = _lse3(la[t, 0], la[t, 1], la[t, 2])
        if c[t] == -np.inf:
            return la, lb, c
        for j in range(3):
            la[t, j] -= c[t]
    for j in range(3):
        lb[T - 1, j] = 0.0
    for t in range(T - 2, -1, -1):
        if is_reset[t + 1]:
            v = _lse3(logpi[0] + logb[t + 1, 0] + lb[t + 1, 0], logpi[1] + logb[t + 1, 1] + lb[t + 1, 1],
                      logpi[2] + logb[t + 1, 2] + lb[t + 1, 2]) - c[t + 1]
            for i in range(3):
                lb[t, i] = v
        else:
            for i in range(3):
                lb[t, i] = _lse3(logA[i, 0] + logb[t + 1, 0] + lb[t + 1, 0],
                                 logA[i, 1] + logb[t + 1, 1] + lb[t + 1, 1],
                                 logA[i, 2] + logb[t + 1, 2] + lb[t + 1, 2]) - c[t + 1]
    return la, lb, c


def emission_logpdf(hmm: HmmSpec, y: np.ndarray) -> np.ndarray:
    z = (np.asarray(y, float)[:, None] - hmm.means[None, :]) / hmm.sigma
    return -0.5 * z * z - math.log(hmm.sigma * math.sqrt(2 * math.pi))


def posterior_decode(hmm: HmmSpec, y: np.ndarray, resets=()) -> DecodedPath:
    """Forward-backward in the log domain on raw observations.

    Indices in ``resets`` restart the chain from the initial distribution, so
    the segments are independent and their log-likelihoods add.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or len(y) == 0:
        raise InvalidArgument("observations must be a nonempty 1-D array")
    if not np.all(np.isfinite(y)):
        raise InvalidArgument("observations contain non-finite values")
    is_reset = np.zeros(len(y), dtype=np.bool_)
    for r in resets:
        if not 0 < r < len(y):
            raise InvalidArgument(f"reset index {r} out of range")
        is_reset[r] = True
    with np.errstate(divide="ignore"):
        logA = np.log(hmm.transition_matrix)
        logpi = np.log(hmm.initial_distribution)
    with np.errstate(over="ignore"):
        logb = emission_logpdf(hmm, y)
    la, lb, c = _forward_backward(logb, logA, logpi, is_reset)
    loglik = float(math.fsum(c))
    if not np.isfinite(loglik):
        raise DecodingError("observation sequence has zero likelihood under the model")
    post = np.exp(la + lb)
    sums = post.sum(axis=1)
    if not np.all(np.isfinite(sums)) or np.any(np.abs(sums - 1) > 1e-6):
        raise DecodingError("posterior normalization failed")
    post = (post / sums[:, None]).T
    return DecodedPath(np.argmax(post, axis=0).astype(np.int8), post, loglik)


def forward_backward(hmm: HmmSpec, trace: PhotocurrentTrace) -> DecodedPath:
    if hmm.band is not None and tuple(trace.band) != tuple(hmm.band):
        raise InvalidArgument(f"trace band {trace.band} does not match the HMM's {hmm.band}")
    if abs(trace.sample_rate * hmm.dt - 1) > 1e-9:
        raise InvalidArgument("trace sample rate does not match the HMM step")
    path = posterior_decode(hmm, trace.values)
    path.times = trace.times
    return path


# -- evaluation ----------------------------------------------------------------

def truth_labels(record: TrajectoryRecord, times: np.ndarray, mu: float,
                 latency: float = 0.0) -> np.ndarray:
    """Reference state at each of ``times``: sign of y_cond with ±0.1·mu
    hysteresis, read ``latency`` earlier, and dark from dark_time on."""
    labels = hysteresis_labels(record.y_cond, 0.1 * mu)
    states = np.where(labels > 0, POS, NEG).astype(np.int8)
    idx = np.clip(np.rint((np.asarray(times) - latency) / record.record_interval).astype(int),
                  0, len(states) - 1)
    out = states[idx]
    if record.dark_time is not None:
        out[np.asarray(times) >= record.dark_time] = DARK
    return out


def mu_from_traces(traces: list[PhotocurrentTrace]) -> float:
    """Telegraph level from the bi-Gaussian centroid separation of the data."""
    fit = fit_bigaussian(make_histogram(traces), traces[0].shot_sigma)
    return 0.5 * fit.splitting


def evaluate_accuracy(hmm: HmmSpec | None, n_trials: int, params: SystemParams, cfg: SimConfig,
                      det: DetectorConfig, *, noise_scale: float = 1.0, workers: int = 1,
                      records: list[TrajectoryRecord] | None = None):
    """Misclassification fraction over atom-coupled samples and the 3x3
    confusion matrix (rows truth, columns decoded) over all post-settle samples.

    With ``hmm=None`` the model is built from ``params``/``det`` with mu taken
    from the bi-Gaussian fit of the generated photocurrents.
    """
    if n_trials < 50:
        raise InvalidArgument(f"n_trials must be >= 50, got {n_trials}")
    if records is None:
        records = ensemble_run(params, cfg, n_trials, workers=workers)
    elif len(records) < n_trials:
        raise InvalidArgument("fewer records supplied than n_trials")
    records = records[:n_trials]
    traces = [synthesize_photocurrent(r, det, seed=r.seed, noise_scale=noise_scale) for r in records]
    if hmm is None:
        hmm = build_hmm(params, det, mu_from_traces(traces), cfg.dark_lifetime, noise_scale=noise_scale)
    latency = filter_latency(det)
    confusion = np.zeros((3, 3), dtype=np.int64)
    wrong = total = 0
    for rec, tr in zip(records, traces):
        path = forward_backward(hmm, tr)
        truth = truth_labels(rec, tr.times, hmm.mu, latency)
        keep = tr.times >= tr.settle_time
        np.add.at(confusion, (truth[keep], path.states[keep]), 1)
        coupled = keep & (truth != DARK)
        wrong += int(np.sum(path.states[coupled] != truth[coupled]))
        total += int(coupled.sum())
    if total == 0:
        raise InvalidArgument("no atom-coupled samples to score")
    return wrong / total, confusion


# -- output --------------------------------------------------------------------

def write_decoded_csv(path_obj: DecodedPath, path):
    times = path_obj.times if path_obj.times is not None else np.arange(len(path_obj.states))
    lines = ["t_us,state,p_neg,p_pos,p_dark"]
    for t, s, p in zip((np.asarray(times) * 1e6).tolist(), path_obj.states.tolist(),
                       path_obj.posteriors.T.tolist()):
        lines.append(f"{t!r},{STATE_NAMES[s]},{p[0]!r},{p[1]!r},{p[2]!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def confusion_report(confusion: np.ndarray, fraction: float | None = None) -> str:
    lines = ["truth \\ decoded " + "".join(f"{n:>12}" for n in STATE_NAMES)]
    for name, row in zip(STATE_NAMES, confusion):
        lines.append(f"{name:<16}" + "".join(f"{int(v):>12}" for v in row))
    if fraction is not None:
        lines.append(f"misclassified (atom-coupled): {fraction:.4f}")
    return "\n".join(lines) + "\n"
