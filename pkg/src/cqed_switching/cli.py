"""Command-line experiment runner.

    cqed-switching run --config run.ini [--experiment fig2] [--seed 1] [--workers 4] [--out dir]
    cqed-switching validate --config run.ini

Exit status: 0 ok, 1 configuration error, 2 runtime error (partial
artifacts are kept and listed in the manifest).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import platform
import sys
from pathlib import Path

import numba
import numpy as np
import scipy

from . import __version__
from .analysis import (ensemble_autocorrelation, decay_time, excess_kurtosis, fit_bigaussian,
                       likelihood_ratio_test, make_histogram, pooled_samples, splitting_curve,
                       steady_state_splitting, write_fig1b_csv, write_fig2_csv, write_fig3_csv)
from .config import RunConfig, diagnostics, load_config, parse_config
from .errors import ConfigError, CqedError, InvalidArgument
from .hmm import (build_hmm, confusion_report, evaluate_accuracy, forward_backward, mu_from_traces,
                  write_decoded_csv)
from .model import steady_state, truncation_heuristic
from .photocurrent import synthesize_photocurrent, write_trace_csv
from .quantum import Space, expectation, operator_set, quadratures
from .trajectory import child_seed, ensemble_run, simulate_trajectory, write_trajectory_csv

log = logging.getLogger("cqed_switching")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
FIG3_CASES = (("N4", 4.0, 0.0), ("N20", 20.0, 0.0), ("N56", 56.0, 0.0), ("N20_det40", 20.0, 40.0))
FIG3_MAX_LAG = 0.5e-6


class Outcome:
    """Artifacts written so far and whether every part of the run succeeded."""

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.files: list[Path] = []
        self.ok = True
        self.notes: list[str] = []

    def path(self, name: str) -> Path:
        p = self.out_dir / name
        self.files.append(p)
        return p

    def write_table(self, name: str, header: str, rows):
        lines = [header] + [",".join(_cell(v) for v in r) for r in rows]
        self.path(name).write_text("\n".join(lines) + "\n")


def _cell(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _sim(cfg: RunConfig, params=None, seed=None):
    params = params or cfg.params
    return cfg.sim.sim_config(params, cfg.seed if seed is None else seed)


def _ensemble(cfg: RunConfig, n: int, params=None, seed=None, out: Outcome | None = None):
    params = params or cfg.params
    errors = []
    records = ensemble_run(params, _sim(cfg, params, seed), n, workers=cfg.workers, errors=errors)
    if errors and out is not None:
        out.ok = False
        out.notes.extend(f"trajectory {i} failed: {e}" for i, e in errors)
    return records


def _traces(cfg: RunConfig, records, det=None):
    det = det or cfg.detector
    return [synthesize_photocurrent(r, det, seed=r.seed) for r in records]


def exp_steady(cfg: RunConfig, out: Outcome):
    p = cfg.params
    n_max = cfg.sim.n_max or truncation_heuristic(p.N)
    space = Space(n_max)
    rho = steady_state(p, space)
    ops = operator_set(space)
    X, Y = quadratures(space)
    n = expectation(rho, ops.n_phot).real
    y = expectation(rho, Y).real
    x = expectation(rho, X).real
    split = steady_state_splitting(p, n_max)
    rows = [("N", p.N), ("n_max", n_max), ("photon_number", n), ("mean_X", x), ("mean_Y", y),
            ("atom_excitation", expectation(rho, ops.n_atom).real), ("branch_splitting", split),
            ("cooperativity", p.cooperativity)]
    out.write_table("steady.csv", "quantity,value", rows)
    print(f"<a+a> = {n:.4f}  (N - 1 = {p.N - 1:g})")
    print(f"<X> = {x:.4f}, <Y> = {y:.3e}: the phase quadrature averages to zero over the two branches")
    print(f"branch splitting 2 sqrt(<:dY^2:>) = {split:.4f}; dressed-state branches at "
          f"Y = +-g/2kappa = +-{p.g / (2 * p.kappa):.3f}")


def exp_trajectory(cfg: RunConfig, out: Outcome):
    rec = simulate_trajectory(cfg.params, _sim(cfg))
    write_trajectory_csv(rec, out.path("trajectory.csv"))
    out.files.append(out.out_dir / "trajectory.json")
    write_trace_csv(_traces(cfg, [rec])[0], out.path("photocurrent.csv"))
    print(f"{len(rec.times)} records, {len(rec.jump_times)} atomic jumps, "
          f"max top-level population {rec.max_top_population:.2e}")


def exp_ensemble(cfg: RunConfig, out: Outcome):
    records = _ensemble(cfg, cfg.sim.n_traj, out=out)
    ys = np.array([r.y_cond for r in records])
    ns = np.array([r.n_cond for r in records])
    k = len(records)
    se = (lambda a: a.std(axis=0, ddof=1) / math.sqrt(k)) if k > 1 else (lambda a: np.zeros(a.shape[1]))
    rows = zip(records[0].times * 1e6, ys.mean(axis=0), se(ys), ns.mean(axis=0), se(ns))
    out.write_table("ensemble.csv", "t_us,mean_y,se_y,mean_n,se_n", rows)
    print(f"{k} trajectories; final <a+a> = {ns[:, -1].mean():.3f}")


def exp_fig1b(cfg: RunConfig, out: Outcome):
    traces = _traces(cfg, _ensemble(cfg, cfg.sim.n_traj, out=out))
    hist = make_histogram(traces)
    sigma = traces[0].shot_sigma
    fit = fit_bigaussian(hist, sigma)
    stat, pval = likelihood_ratio_test(hist, sigma, fit)
    kurt = excess_kurtosis(pooled_samples(traces))
    write_fig1b_csv(hist, fit, out.path("fig1b.csv"))
    out.write_table("fig1b_fit.csv", "quantity,value",
                    [("c1", fit.c1), ("c2", fit.c2), ("w1", fit.w1), ("w2", fit.w2),
                     ("sigma", fit.sigma), ("splitting", fit.splitting), ("goodness", fit.goodness),
                     ("excess_kurtosis", kurt), ("lr_statistic", stat), ("lr_p_value", pval)])
    print(f"splitting {fit.splitting:.4f}, excess kurtosis {kurt:.3f}, LR p = {pval:.2e}")


def exp_fig2(cfg: RunConfig, out: Outcome):
    rows = splitting_curve(cfg.params, cfg.sweep_N, cfg.sweep_bands, cfg.sim.n_traj,
                           t_end=cfg.sim.t_end, seed=cfg.seed, workers=cfg.workers,
                           n_bootstrap=cfg.n_bootstrap, record_interval=cfg.sim.record_interval)
    write_fig2_csv(rows, out.path("fig2.csv"))
    for r in rows:
        if r.error:
            out.ok = False
            out.notes.append(f"N={r.N:g} band {r.band}: {r.error}")
        print(f"N={r.N:<6g} band {r.band:>8} MHz  splitting {r.splitting:.4f} +- {r.stderr:.4f}")


def exp_fig3(cfg: RunConfig, out: Outcome):
    curves, decay = {}, []
    for k, (label, N, det_mhz) in enumerate(FIG3_CASES):
        params = cfg.params.with_N(N).replace(delta_atom=2 * math.pi * 1e6 * det_mhz)
        records = _ensemble(cfg, cfg.sim.n_traj, params, child_seed(cfg.seed, k), out)
        lags, acf, _, noise = ensemble_autocorrelation(_traces(cfg, records), FIG3_MAX_LAG)
        curves[label] = (lags, acf)
        decay.append((label, decay_time(lags, acf, noise) * 1e6))
    write_fig3_csv(curves, out.path("fig3.csv"))
    out.write_table("fig3_decay.csv", "case,decay_time_us", decay)
    for label, tau in decay:
        print(f"{label:>10}: acf 1/e time {tau:.4f} us")


def exp_fig4(cfg: RunConfig, out: Outcome):
    records = _ensemble(cfg, cfg.sim.n_traj, out=out)
    traces = _traces(cfg, records)
    mu = mu_from_traces(traces)
    hmm = build_hmm(cfg.params, cfg.detector, mu, cfg.sim.dark_lifetime,
                    switch_rate=cfg.hmm_switch_rate)
    path = forward_backward(hmm, traces[0])
    write_trace_csv(traces[0], out.path("fig4_trace.csv"))
    write_decoded_csv(path, out.path("fig4_decoded.csv"))
    write_trajectory_csv(records[0], out.path("fig4_simulation.csv"))
    out.files.append(out.out_dir / "fig4_simulation.json")
    print(f"mu = {mu:.4f}, dark time {records[0].dark_time}, "
          f"decoded states {np.bincount(path.states, minlength=3).tolist()} (neg, pos, dark)")


def exp_hmm_eval(cfg: RunConfig, out: Outcome):
    records = _ensemble(cfg, cfg.hmm_trials, out=out)
    traces = [synthesize_photocurrent(r, cfg.detector, seed=r.seed, noise_scale=cfg.noise_scale)
              for r in records]
    hmm = build_hmm(cfg.params, cfg.detector, mu_from_traces(traces), cfg.sim.dark_lifetime,
                    switch_rate=cfg.hmm_switch_rate, noise_scale=cfg.noise_scale)
    frac, conf = evaluate_accuracy(hmm, len(records), cfg.params, _sim(cfg), cfg.detector,
                                   noise_scale=cfg.noise_scale, records=records)
    report = confusion_report(conf, frac)
    out.path("hmm_confusion.txt").write_text(report)
    out.write_table("hmm_eval.csv", "quantity,value",
                    [("misclassification", frac), ("mu", hmm.mu), ("sigma", hmm.sigma),
                     ("switch_rate", hmm.switch_rate), ("n_trials", len(records))])
    print(report, end="")


EXPERIMENT_RUNNERS = {
    "steady": exp_steady, "trajectory": exp_trajectory, "ensemble": exp_ensemble,
    "fig1b": exp_fig1b, "fig2": exp_fig2, "fig3": exp_fig3, "fig4": exp_fig4,
    "hmm-eval": exp_hmm_eval,
}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(cfg: RunConfig, out: Outcome, status: str) -> Path:
    digest = cfg.hash()
    manifest = {
        "config_hash": digest,
        "experiment": cfg.experiment,
        "status": status,
        "seeds": {"master": cfg.seed,
                  "per_trajectory": "first uint64 of SeedSequence(master, spawn_key=(index,))"},
        "versions": {"cqed_switching": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__,
                     "numba": numba.__version__},
        "artifacts": [{"file": p.name, "sha256": _sha256(p), "config_hash": digest}
                      for p in out.files if p.exists()],
        "notes": out.notes,
    }
    path = out.out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def run(cfg: RunConfig) -> int:
    try:
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: cannot create output directory {cfg.output_dir}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Outcome(cfg.output_dir)
    try:
        EXPERIMENT_RUNNERS[cfg.experiment](cfg, out)
    except CqedError as exc:
        out.ok = False
        out.notes.append(f"{type(exc).__name__}: {exc}")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
    status = "ok" if out.ok else "failed"
    write_manifest(cfg, out, status)
    for note in out.notes:
        log.warning(note)
    return EXIT_OK if out.ok else EXIT_RUNTIME


def validate(cfg: RunConfig) -> list[tuple[str, str]]:
    return diagnostics(cfg)


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cqed-switching", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("run", "validate"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="INI configuration file")
        p.add_argument("--experiment", help="steady, trajectory, ensemble, fig1b, fig2, fig3, fig4, hmm-eval")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--out", type=Path, dest="output_dir")
        p.add_argument("--N", type=float, dest="N", help="empty-cavity photon number")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {"experiment": args.experiment, "seed": args.seed, "workers": args.workers,
                 "output_dir": args.output_dir, "N": args.N}
    try:
        if args.config is not None:
            cfg = load_config(args.config, **overrides)
        else:
            cfg = parse_config("", overrides=overrides)
    except (ConfigError, InvalidArgument) as exc:
        where = f"{args.config}: " if args.config else ""
        print(f"config error: {where}{exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "validate":
        diags = validate(cfg)
        for level, msg in diags:
            print(f"{level}: {msg}")
        return EXIT_CONFIG if any(level == "error" for level, _ in diags) else EXIT_OK
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
