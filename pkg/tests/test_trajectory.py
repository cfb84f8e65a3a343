import math

import numpy as np
import pytest
from scipy import stats

from cqed_switching import _kernels
from cqed_switching.analysis import switching_dwell_times
from cqed_switching.errors import InvalidArgument, TruncationError
from cqed_switching.model import paper_params, propagate_series, truncation_heuristic
from cqed_switching.quantum import Space, basis_ket, expectation, ket_to_density, operator_set, quadratures
from cqed_switching.trajectory import (SimConfig, _generators, child_seed, ensemble_run, initial_ket,
                                       read_trajectory_csv, simulate_trajectory, truncation_check,
                                       write_trajectory_csv)


def test_simconfig_validation():
    with pytest.raises(InvalidArgument):
        SimConfig(dt=0.0, t_end=1e-6, record_stride=1, n_max=5)
    with pytest.raises(InvalidArgument):
        SimConfig(dt=1e-9, t_end=1e-10, record_stride=1, n_max=5)
    with pytest.raises(InvalidArgument):
        SimConfig(dt=1e-9, t_end=1e-6, record_stride=0, n_max=5)
    with pytest.raises(InvalidArgument):
        SimConfig(dt=1e-9, t_end=1e-6, record_stride=1, n_max=5, dark_lifetime=-1.0)


def test_step_bound_enforced():
    p = paper_params(20)
    cfg = SimConfig.for_params(p, 1e-7)
    assert cfg.dt <= cfg.dt_bound(p)
    assert cfg.dt_bound(p) == pytest.approx(1 / (20 * p.g * math.sqrt(cfg.n_max)))
    with pytest.raises(InvalidArgument):
        SimConfig(dt=2 * cfg.dt_bound(p), t_end=1e-7, record_stride=1, n_max=cfg.n_max).check(p)


def test_child_seed_rule():
    expected = int(np.random.SeedSequence(7, spawn_key=(3,)).generate_state(1, np.uint64)[0])
    assert child_seed(7, 3) == expected
    assert child_seed(7, 3) != child_seed(7, 4)


def test_norm_preserved_each_step():
    p = paper_params(20)
    cfg = SimConfig.for_params(p, 2e-7, seed=1)
    psi = initial_ket(p, cfg.n_max)
    n_steps = 10 * cfg.record_stride
    rng = np.random.default_rng(0)
    a, on, off, s = _generators(p, cfg.n_max)
    out = _kernels.run_hybrid(psi, *a, *on, *off, *s, cfg.dt, n_steps, cfg.record_stride,
                              n_steps + 1, rng.standard_normal(n_steps) * math.sqrt(cfg.dt),
                              rng.random(n_steps), math.sqrt(2 * p.kappa), 2 * p.gamma_perp)
    assert out[6] == _kernels.STATUS_OK
    assert abs(np.linalg.norm(psi) - 1) <= 1e-12


def test_empty_cavity_trajectory():
    p = paper_params(20, g=0)
    rec = simulate_trajectory(p, SimConfig.for_params(p, 1e-6, seed=3))
    late = rec.times >= 5 / p.kappa
    assert np.all(np.abs(rec.y_cond[late]) <= 0.05)
    assert np.all(np.abs(rec.n_cond[late] - 20) <= 0.5)


def test_record_shapes_and_seed():
    p = paper_params(4)
    cfg = SimConfig.for_params(p, 1e-7, seed=42)
    rec = simulate_trajectory(p, cfg)
    n = len(rec.times)
    assert all(len(a) == n for a in (rec.y_cond, rec.x_cond, rec.n_cond, rec.wiener_increments))
    assert np.all(np.diff(rec.times) > 0)
    assert rec.seed == 42 and rec.params_snapshot == p
    assert np.all((rec.jump_times >= 0) & (rec.jump_times <= cfg.t_end + cfg.dt))


def test_same_seed_bitwise_identical():
    p = paper_params(4)
    cfg = SimConfig.for_params(p, 2e-7, seed=9)
    r1 = simulate_trajectory(p, cfg)
    r2 = simulate_trajectory(p, cfg)
    for field in ("y_cond", "x_cond", "n_cond", "wiener_increments", "jump_times"):
        assert np.array_equal(getattr(r1, field), getattr(r2, field))


def test_ensemble_independent_of_workers():
    p = paper_params(2)
    cfg = SimConfig.for_params(p, 1e-7, seed=5)
    serial = ensemble_run(p, cfg, 4, workers=1)
    pooled = ensemble_run(p, cfg, 4, workers=2)
    for a, b in zip(serial, pooled):
        assert a.seed == b.seed
        assert np.array_equal(a.y_cond, b.y_cond)
    assert len({r.seed for r in serial}) == 4


def test_psi0_shape_checked():
    p = paper_params(1)
    cfg = SimConfig.for_params(p, 1e-8)
    with pytest.raises(InvalidArgument):
        simulate_trajectory(p, cfg, psi0=np.ones(3))


def test_switching_between_branches():
    p = paper_params(20)
    recs = ensemble_run(p, SimConfig.for_params(p, 4e-6, seed=2), 4)
    y = np.concatenate([r.y_cond[r.coupled_mask()] for r in recs])
    # two-valued: most of the time near one of the branches at ±g/2κ
    assert np.mean(np.abs(y) > 0.5) > 0.6
    assert 0.3 < np.mean(y > 0) < 0.7
    dwell = np.concatenate([switching_dwell_times(r.y_cond[r.coupled_mask()], r.record_interval, 0.1)
                            for r in recs])
    assert 0.5 < dwell.mean() / (2 / p.gamma_perp) < 2


def test_detuned_favours_one_branch():
    p = paper_params(20, delta_atom=40)
    recs = ensemble_run(p, SimConfig.for_params(p, 3e-6, seed=4), 3)
    y = np.concatenate([r.y_cond[r.coupled_mask()] for r in recs])
    assert max(np.mean(y > 0), np.mean(y < 0)) > 0.75


def test_jump_times_exponential():
    # atom starts excited with no coupling and no drive: one decay at rate 2γ⊥
    p = paper_params(0, g=0)
    psi0 = basis_ket(Space(3), 0, 1)
    cfg = SimConfig.for_params(p, 12 / (2 * p.gamma_perp), record_interval=1e-10, n_max=3, seed=8)
    first = []
    for rec in ensemble_run(p, cfg, 2000, psi0=psi0):
        assert len(rec.jump_times) == 1
        first.append(rec.jump_times[0] - cfg.dt / 2)
    assert stats.kstest(first, "expon", args=(0, 1 / (2 * p.gamma_perp))).pvalue > 0.01


def test_truncation_check_passes_for_adequate_space():
    p = paper_params(20)
    rec = simulate_trajectory(p, SimConfig.for_params(p, 1e-6, n_max=60, seed=1))
    assert truncation_check(rec, 1e-6).passed


def test_truncation_check_fails_when_too_small():
    p = paper_params(56)
    cfg = SimConfig.for_params(p, 2e-7, n_max=60, seed=1)
    rec = simulate_trajectory(p, cfg, raise_on_truncation=False)
    check = truncation_check(rec, 1e-6)
    assert not check.passed and check.max_top_population > 1e-3
    with pytest.raises(TruncationError) as info:
        simulate_trajectory(p, cfg)
    assert info.value.required_n_max >= truncation_heuristic(56)


def test_vacuum_passes_truncation():
    p = paper_params(0)
    rec = simulate_trajectory(p, SimConfig.for_params(p, 1e-7, n_max=2))
    assert truncation_check(rec).passed and rec.max_top_population == 0


def test_all_failures_raise_and_are_reported():
    p = paper_params(56)
    cfg = SimConfig.for_params(p, 1e-7, n_max=60)
    with pytest.raises(TruncationError):
        ensemble_run(p, cfg, 2)
    errors = []
    with pytest.raises(TruncationError):
        ensemble_run(p, cfg, 2, errors=errors)
    assert [i for i, _ in errors] == [0, 1]


def test_dark_transition_returns_to_empty_cavity():
    p = paper_params(20)
    cfg = SimConfig.for_params(p, 3e-6, seed=6, dark_lifetime=0.5e-6)
    rec = simulate_trajectory(p, cfg)
    assert rec.dark_time is not None
    after = rec.times >= rec.dark_time + 6 / p.kappa
    assert np.all(np.abs(rec.y_cond[after]) <= 0.05)
    assert not rec.coupled_mask()[after].any()


def test_csv_round_trip(tmp_path):
    p = paper_params(4)
    rec = simulate_trajectory(p, SimConfig.for_params(p, 1e-7, seed=3, dark_lifetime=1e-8))
    path = tmp_path / "traj.csv"
    write_trajectory_csv(rec, path)
    assert path.read_text().splitlines()[0] == "t_us,y_cond,x_cond,n_cond,dW"
    back = read_trajectory_csv(path)
    for field in ("y_cond", "x_cond", "n_cond", "wiener_increments", "jump_times"):
        assert np.array_equal(getattr(back, field), getattr(rec, field))
    assert back.seed == rec.seed and back.params_snapshot == rec.params_snapshot
    assert back.dark_time == rec.dark_time


def _ensemble_vs_master(N, n_traj, t_end, seed):
    p = paper_params(N)
    cfg = SimConfig.for_params(p, t_end, seed=seed)
    recs = ensemble_run(p, cfg, n_traj)
    space = Space(cfg.n_max)
    keep = np.arange(0, len(recs[0].times), len(recs[0].times) // 12)
    times = recs[0].times[keep]
    rhos = propagate_series(ket_to_density(initial_ket(p, cfg.n_max)), times, p, space)
    _, Y = quadratures(space)
    n_op = operator_set(space).n_phot
    out = []
    for attr, op in (("y_cond", Y), ("n_cond", n_op)):
        vals = np.array([getattr(r, attr)[keep] for r in recs])
        mean = vals.mean(axis=0)
        se = np.maximum(vals.std(axis=0, ddof=1) / math.sqrt(len(recs)), 1e-9)
        exact = np.array([expectation(r, op).real for r in rhos])
        out.append(np.abs(mean - exact) / se)
    return out


def test_unraveling_consistency_weak_drive():
    z_y, z_n = _ensemble_vs_master(1, 500, 0.3e-6, seed=31)
    assert z_y.max() < 3.5 and z_n.max() < 3.5


def test_dt_refinement():
    p = paper_params(2, delta_atom=20)
    means, ses = [], []
    for safety in (20, 40):
        cfg = SimConfig.for_params(p, 0.2e-6, seed=77, safety=safety)
        ys = np.array([r.y_cond for r in ensemble_run(p, cfg, 300)])
        means.append(ys.mean(axis=0))
        ses.append(ys.std(axis=0, ddof=1) / math.sqrt(len(ys)))
    band = 3 * np.hypot(ses[0], ses[1])[1:]
    assert np.all(np.abs(means[0] - means[1])[1:] < band + 1e-9)
