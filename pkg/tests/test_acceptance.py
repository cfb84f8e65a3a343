"""End-to-end acceptance checks, one test per criterion.

Each test prints a PASS/FAIL line and the run ends with a summary of all of
them.  Ensembles shared between criteria are built once per session.
"""

import itertools
import math

import numpy as np
import pytest

from cqed_switching.analysis import (asymptotic_splitting, ensemble_autocorrelation, decay_time,
                                     excess_kurtosis, fit_bigaussian, likelihood_ratio_test,
                                     make_histogram, pooled_samples, splitting_curve,
                                     switching_dwell_times)
from cqed_switching.cli import main
from cqed_switching.hmm import HmmSpec, emission_logpdf, evaluate_accuracy, posterior_decode
from cqed_switching.model import paper_params, propagate_series, steady_state, truncation_heuristic
from cqed_switching.photocurrent import (PRESETS, preset, shot_noise_sigma, synthesize_from_signal,
                                         synthesize_photocurrent)
from cqed_switching.quantum import Space, expectation, ket_to_density, operator_set, quadratures
from cqed_switching.trajectory import SimConfig, ensemble_run, initial_ket

pytestmark = pytest.mark.acceptance

P = paper_params()


@pytest.fixture(scope="session")
def ensembles():
    """Trajectory ensembles keyed by (N, delta_atom in MHz), built on first use."""
    cache = {}

    def get(N, detuning_mhz=0.0, n_traj=40, t_end=10e-6, seed=0):
        key = (N, detuning_mhz, n_traj, t_end, seed)
        if key not in cache:
            params = paper_params(N, delta_atom=detuning_mhz)
            cfg = SimConfig.for_params(params, t_end, seed=seed)
            cache[key] = ensemble_run(params, cfg, n_traj)
        return cache[key]

    return get


def test_criterion_01_unraveling_consistency(verdict):
    p = paper_params(4)
    cfg = SimConfig.for_params(p, 0.5e-6, seed=101)
    records = ensemble_run(p, cfg, 500)
    idx = np.linspace(0, len(records[0].times) - 1, 21).astype(int)
    times = records[0].times[idx]
    space = Space(cfg.n_max)
    rhos = propagate_series(ket_to_density(initial_ket(p, cfg.n_max)), times, p, space)
    _, Y = quadratures(space)
    worst = {}
    for attr, op in (("y_cond", Y), ("n_cond", operator_set(space).n_phot)):
        vals = np.array([getattr(r, attr)[idx] for r in records])
        se = np.maximum(vals.std(axis=0, ddof=1) / math.sqrt(len(records)), 1e-9)
        exact = np.array([expectation(r, op).real for r in rhos])
        worst[attr] = float(np.max(np.abs(vals.mean(axis=0) - exact) / se))
    ok = max(worst.values()) < 3
    verdict(1, ok, f"max |ensemble - master|/SE over {len(times)} times: "
                   f"<Y> {worst['y_cond']:.2f}, <a+a> {worst['n_cond']:.2f} (limit 3)")


def test_criterion_02_empty_cavity_exactness(verdict):
    errs = []
    for N in (4.0, 20.0, 56.0):
        space = Space(truncation_heuristic(N))
        assert space.n_max >= N + 8 * math.sqrt(N) + 10
        rho = steady_state(paper_params(N, g=0), space)
        _, Y = quadratures(space)
        errs.append((abs(expectation(rho, operator_set(space).n_phot).real - N),
                     abs(expectation(rho, Y))))
    dn = max(e[0] for e in errs)
    dy = max(e[1] for e in errs)
    verdict(2, dn <= 1e-6 and dy <= 1e-8,
            f"N in (4, 20, 56): max |<a+a> - N| = {dn:.1e} (1e-6), max |<Y>| = {dy:.1e} (1e-8)")


def test_criterion_03_weak_driving_suppression(verdict):
    p = paper_params(1e-4)
    space = Space(truncation_heuristic(p.N))
    rho = steady_state(p, space)
    ratio = abs(expectation(rho, operator_set(space).a)) / (p.drive_E / p.kappa)
    expected = 1 / (1 + 2 * p.cooperativity)
    rel = abs(ratio / expected - 1)
    verdict(3, rel <= 0.02 and abs(p.cooperativity - 6.15) < 0.01,
            f"|<a>|/(E/kappa) = {ratio:.5f} vs 1/(1+2C) = {expected:.5f} (C = {p.cooperativity:.3f}), "
            f"rel. error {rel:.2%} (2%)")


def test_criterion_04_photon_number_deficit(verdict):
    p = paper_params(20)
    space = Space(truncation_heuristic(20))
    n = expectation(steady_state(p, space), operator_set(space).n_phot).real
    verdict(4, abs(n - 19) <= 1, f"<a+a> at N=20 is {n:.3f} (19 +- 1)")


def test_criterion_05_bimodality_and_asymptote(verdict, ensembles):
    sets = {20.0: ensembles(20.0), 30.0: ensembles(30.0, t_end=5e-6), 56.0: ensembles(56.0, t_end=5e-6)}
    rows = splitting_curve(P, list(sets), ["lp10", "lp2"], 40, seed=5, n_bootstrap=100,
                           ensembles=sets)
    s = {(r.N, r.band): r.splitting for r in rows}
    asym = asymptotic_splitting(P)
    ratio = s[(56.0, "10")] / s[(30.0, "10")]
    dev = [abs(s[(N, "10")] / asym - 1) for N in (30.0, 56.0)]
    below = all(s[(N, "2")] < s[(N, "10")] for N in sets)
    ok = abs(ratio - 1) <= 0.1 and max(dev) <= 0.15 and below
    table = ", ".join(f"N={N:g}: {s[(N, '10')]:.3f}/{s[(N, '2')]:.3f}" for N in sets)
    verdict(5, ok, f"splitting 10/2 MHz {table}; ratio 56/30 = {ratio:.3f} (1 +- 0.1); "
                   f"asymptote {asym:.3f}, deviations {dev[0]:.1%}, {dev[1]:.1%} (15%)")


def test_criterion_06_switching_timescale(verdict, ensembles):
    records = ensembles(20.0)
    threshold = 0.1 * P.g / (2 * P.kappa)
    dwell = np.concatenate([switching_dwell_times(r.y_cond[r.coupled_mask()], r.record_interval,
                                                  threshold) for r in records])
    reference = 2 / P.gamma_perp
    ratio = dwell.mean() / reference
    verdict(6, 0.5 <= ratio <= 2,
            f"mean dwell {dwell.mean() * 1e6:.4f} us over {len(dwell)} intervals, "
            f"2/gamma_perp = {reference * 1e6:.4f} us, ratio {ratio:.2f} (0.5-2)")


def test_criterion_07_detuned_correlation_time(verdict, ensembles):
    det = preset("lp10")
    curves = {}
    for d in (0.0, 40.0, -40.0):
        traces = [synthesize_photocurrent(r, det, seed=r.seed) for r in ensembles(20.0, d)]
        lags, acf, se, noise = ensemble_autocorrelation(traces, 0.5e-6)
        curves[d] = (acf, se, decay_time(lags, acf, noise))
    tau = {d: c[2] for d, c in curves.items()}
    longer = tau[40.0] > tau[0.0] and tau[-40.0] > tau[0.0]
    diff = np.abs(curves[40.0][0] - curves[-40.0][0])
    combined = np.hypot(curves[40.0][1], curves[-40.0][1])
    z = float(np.max(diff / combined))
    verdict(7, longer and z <= 3,
            f"1/e times: resonant {tau[0.0] * 1e9:.1f} ns, +40 MHz {tau[40.0] * 1e9:.1f} ns, "
            f"-40 MHz {tau[-40.0] * 1e9:.1f} ns; max |acf(+40)-acf(-40)|/SE = {z:.2f} (3)")


def test_criterion_08_histogram_shape(verdict, ensembles):
    det = preset("bp0.1-8")
    traces = [synthesize_photocurrent(r, det, seed=r.seed) for r in ensembles(20.0)]
    kurt = excess_kurtosis(pooled_samples(traces))
    hist = make_histogram(traces)
    fit = fit_bigaussian(hist, traces[0].shot_sigma)
    stat, pval = likelihood_ratio_test(hist, traces[0].shot_sigma, fit)
    verdict(8, kurt < 0 and pval < 1e-3,
            f"excess kurtosis {kurt:.3f} (< 0), LR statistic {stat:.1f}, p = {pval:.1e} (< 1e-3), "
            f"splitting {fit.splitting:.3f}")


def _enumerated(hmm, y):
    b = np.exp(emission_logpdf(hmm, y))
    A, pi = hmm.transition_matrix, hmm.initial_distribution
    post = np.zeros((3, len(y)))
    for path in itertools.product(range(3), repeat=len(y)):
        w = pi[path[0]] * b[0, path[0]]
        for t in range(1, len(y)):
            w *= A[path[t - 1], path[t]] * b[t, path[t]]
        post[list(path), range(len(y))] += w
    return post / post[:, 0].sum()


def test_criterion_09_hmm_correctness(verdict):
    rng = np.random.default_rng(909)
    worst_enum = worst_sum = 0.0
    for trial in range(400):
        a = rng.random((3, 3)) + 0.02
        a[2] = (0, 0, 1)
        a /= a.sum(axis=1, keepdims=True)
        pi = rng.random(3) + 0.02
        hmm = HmmSpec(float(rng.uniform(0.2, 2)), float(rng.uniform(0.2, 1.5)), 1.0, 1.0, 1.0,
                      a, pi / pi.sum())
        T = trial % 8 + 1
        y = rng.normal(scale=1.5, size=T)
        worst_enum = max(worst_enum, float(np.max(np.abs(posterior_decode(hmm, y).posteriors
                                                         - _enumerated(hmm, y)))))
        long = posterior_decode(hmm, rng.normal(scale=rng.uniform(0.1, 50), size=2000))
        worst_sum = max(worst_sum, float(np.max(np.abs(long.posteriors.sum(axis=0) - 1))))
    verdict(9, worst_enum <= 1e-10 and worst_sum <= 1e-9,
            f"400 random chains: max posterior deviation from enumeration {worst_enum:.1e} (1e-10), "
            f"max |column sum - 1| {worst_sum:.1e} (1e-9)")


def test_criterion_10_hmm_reconstruction(verdict):
    p = paper_params(37)
    cfg = SimConfig.for_params(p, 5e-6, seed=1010, dark_lifetime=4e-6)
    frac, confusion = evaluate_accuracy(None, 50, p, cfg, preset("lp10"))
    verdict(10, 0.05 <= frac <= 0.15,
            f"misclassification {frac:.2%} over {int(confusion[:2].sum())} atom-coupled samples "
            f"(target 10% +- 5 points)")


def test_criterion_11_noise_calibration(verdict):
    kappa = P.kappa
    worst, parts = 0.0, []
    for k, (name, det) in enumerate(PRESETS.items()):
        tr = synthesize_from_signal(np.zeros(1_000_000 * det.oversample), det, kappa, seed=1100 + k)
        settle = int(2e-4 * det.sample_rate) if name == "ac20k" else 200
        rel = abs(tr.values[settle:].std() / shot_noise_sigma(det, kappa) - 1)
        worst = max(worst, rel)
        parts.append(f"{name} {rel:.2%}")
    verdict(11, worst <= 0.02, "MC sigma vs analytic: " + ", ".join(parts) + " (2%)")


CLI_CASES = {
    "steady": "[params]\nN = 20\n",
    "trajectory": "[params]\nN = 8\n[sim]\nt_end = 1\n",
    "ensemble": "[params]\nN = 4\n[sim]\nt_end = 0.3\nn_traj = 6\n",
    "fig1b": "[params]\nN = 20\n[sim]\nt_end = 6\nn_traj = 8\n",
    "fig2": "[sim]\nt_end = 6\nn_traj = 8\n[sweep]\nN_values = 4, 20\nn_bootstrap = 20\n",
    "fig3": "[sim]\nt_end = 6\nn_traj = 2\n",
    "fig4": "[sim]\nt_end = 10\nn_traj = 8\n",
    "hmm-eval": "[sim]\nt_end = 2\n",
}


def test_criterion_12_determinism(verdict, tmp_path):
    mismatched = []
    for experiment, body in CLI_CASES.items():
        cfg = tmp_path / f"{experiment}.ini"
        cfg.write_text(f"[run]\nexperiment = {experiment}\nseed = 12\n" + body)
        outputs = []
        for workers in (1, 2):
            out = tmp_path / f"{experiment}-{workers}"
            code = main(["run", "--config", str(cfg), "--out", str(out), "--workers", str(workers)])
            outputs.append((code, {f.name: f.read_bytes() for f in sorted(out.iterdir())}))
        if outputs[0] != outputs[1] or outputs[0][0] != 0:
            mismatched.append(experiment)
    verdict(12, not mismatched,
            f"{len(CLI_CASES)} experiments run with 1 and 2 workers; "
            f"differing or failed: {', '.join(mismatched) or 'none'}")
