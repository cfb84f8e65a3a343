"""Hybrid quantum trajectories: diffusive homodyne of the cavity output plus
Poisson jumps for atomic spontaneous emission.

The cavity channel √(2κ) a is unravelled by homodyne detection of the
phase quadrature; the measurement record per step is

    dq = 2√(2κ) <Y> dt + dW,

so ``dq / (2√(2κ) dt)`` is a photocurrent in units of the intracavity Y
amplitude.  The atomic channel √(2γ⊥) σ is unobserved and unravelled as
jumps.  This is an unravelling of the same master equation as
:func:`cqed_switching.model.liouvillian`, so ensemble averages reproduce it.

Seeds: trajectory ``i`` of an ensemble seeded with ``master`` uses
``child_seed(master, i)``, the first 64-bit word generated by
``numpy.random.SeedSequence(master, spawn_key=(i,))``.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from . import _kernels
from .errors import CqedError, InvalidArgument, NumericalInstability, TruncationError
from .model import SystemParams, hamiltonian, truncation_heuristic
from .quantum import Space, coherent_ket, operator_set

log = logging.getLogger(__name__)

DEFAULT_TRUNCATION_THRESHOLD = 1e-6
SETTLE_KAPPA_TIMES = 10.0


@dataclass(frozen=True)
class SimConfig:
    dt: float
    t_end: float
    record_stride: int
    n_max: int
    seed: int = 0
    dark_lifetime: float | None = None
    settle_time: float | None = None

    def __post_init__(self):
        if not self.dt > 0:
            raise InvalidArgument(f"dt must be > 0, got {self.dt}")
        if not self.t_end >= self.dt:
            raise InvalidArgument(f"t_end must be >= dt, got {self.t_end}")
        if int(self.record_stride) != self.record_stride or self.record_stride < 1:
            raise InvalidArgument(f"record_stride must be an integer >= 1, got {self.record_stride}")
        if int(self.n_max) != self.n_max or self.n_max < 1:
            raise InvalidArgument(f"n_max must be an integer >= 1, got {self.n_max}")
        if self.dark_lifetime is not None and not self.dark_lifetime > 0:
            raise InvalidArgument("dark_lifetime must be positive or None")

    @classmethod
    def for_params(cls, params: SystemParams, t_end: float, *, record_interval: float = 2.5e-9,
                   n_max: int | None = None, seed: int = 0, dark_lifetime: float | None = None,
                   settle_time: float | None = None, safety: float = 20.0) -> "SimConfig":
        """Pick n_max from the truncation heuristic and the largest stable dt
        that divides ``record_interval``."""
        if n_max is None:
            n_max = truncation_heuristic(params.N)
        dt_max = 1.0 / (safety * max_rate(params, n_max))
        stride = max(1, math.ceil(record_interval / dt_max * (1 - 1e-12)))
        return cls(dt=record_interval / stride, t_end=t_end, record_stride=stride, n_max=n_max,
                   seed=seed, dark_lifetime=dark_lifetime, settle_time=settle_time)

    @property
    def record_interval(self) -> float:
        return self.dt * self.record_stride

    def dt_bound(self, params: SystemParams) -> float:
        return 1.0 / (20.0 * max_rate(params, self.n_max))

    def check(self, params: SystemParams):
        bound = self.dt_bound(params)
        if self.dt > bound * (1 + 1e-9):
            raise InvalidArgument(
                f"dt={self.dt:.3e} s exceeds the stability bound {bound:.3e} s "
                f"= 1/(20 max(κ, g√n_max, E))")

    def settle(self, params: SystemParams) -> float:
        if self.settle_time is not None:
            return self.settle_time
        return SETTLE_KAPPA_TIMES / params.kappa


def max_rate(params: SystemParams, n_max: int) -> float:
    return max(params.kappa, params.g * math.sqrt(n_max), params.drive_E)


@dataclass
class TrajectoryRecord:
    times: np.ndarray
    y_cond: np.ndarray
    x_cond: np.ndarray
    n_cond: np.ndarray
    wiener_increments: np.ndarray
    jump_times: np.ndarray
    dark_time: float | None
    seed: int
    params_snapshot: SystemParams
    n_max: int
    record_interval: float
    settle_time: float
    max_top_population: float

    def coupled_mask(self) -> np.ndarray:
        """Samples after the settling window and before the dark transition."""
        mask = self.times >= self.settle_time
        if self.dark_time is not None:
            mask &= self.times < self.dark_time
        return mask


class TruncationCheck(NamedTuple):
    passed: bool
    max_top_population: float


def truncation_check(record: TrajectoryRecord,
                     threshold: float = DEFAULT_TRUNCATION_THRESHOLD) -> TruncationCheck:
    """Fail iff the population of the top two Fock levels ever exceeded ``threshold``."""
    return TruncationCheck(record.max_top_population <= threshold, record.max_top_population)


def child_seed(master: int, index: int) -> int:
    ss = np.random.SeedSequence(int(master), spawn_key=(int(index),))
    return int(ss.generate_state(1, np.uint64)[0])


def empty_cavity_amplitude(params: SystemParams) -> complex:
    """Steady field E / (κ + iΔ_c) of the cavity without the atom."""
    return params.drive_E / complex(params.kappa, params.delta_cavity)


def initial_ket(params: SystemParams, n_max: int) -> np.ndarray:
    return coherent_ket(Space(n_max), empty_cavity_amplitude(params), atom_excited=False)


def _csr_parts(m) -> tuple:
    m = sp.csr_matrix(m)
    m.sort_indices()
    return (m.indptr.astype(np.int64), m.indices.astype(np.int64),
            np.ascontiguousarray(m.data, dtype=np.complex128))


@lru_cache(maxsize=16)
def _generators(params: SystemParams, n_max: int):
    space = Space(n_max)
    ops = operator_set(space)
    damping = 1j * (params.kappa * ops.n_phot + params.gamma_perp * ops.n_atom)
    on = -1j * (hamiltonian(params, space) - damping)
    off = -1j * (hamiltonian(params.replace(g=0.0), space) - damping)
    return _csr_parts(ops.a), _csr_parts(on), _csr_parts(off), _csr_parts(ops.sigma)


def simulate_trajectory(params: SystemParams, cfg: SimConfig, psi0: np.ndarray | None = None, *,
                        truncation_threshold: float = DEFAULT_TRUNCATION_THRESHOLD,
                        raise_on_truncation: bool = True) -> TrajectoryRecord:
    """Integrate one conditional ket from ``psi0`` (default: empty-cavity coherent
    state with the atom in its ground state) and return its record."""
    cfg.check(params)
    space = Space(cfg.n_max)
    if psi0 is None:
        psi = initial_ket(params, cfg.n_max)
    else:
        psi = np.array(psi0, dtype=complex)
        if psi.shape != (space.dim,):
            raise InvalidArgument(f"psi0 of shape {psi.shape} does not match dimension {space.dim}")
        psi /= np.linalg.norm(psi)

    stride = int(cfg.record_stride)
    n_rec = max(1, int(round(cfg.t_end / cfg.record_interval)))
    n_steps = n_rec * stride

    rng = np.random.default_rng(cfg.seed)
    dark_time = None
    dark_step = n_steps + 1
    if cfg.dark_lifetime is not None:
        t_dark = float(rng.exponential(cfg.dark_lifetime))
        if t_dark < n_steps * cfg.dt:
            dark_step = int(math.ceil(t_dark / cfg.dt))
            dark_time = dark_step * cfg.dt
    dw = rng.standard_normal(n_steps) * math.sqrt(cfg.dt)
    u = rng.random(n_steps)

    a_csr, on_csr, off_csr, s_csr = _generators(params, cfg.n_max)
    ys, xs, ns, ws, jumped, max_top, status, bad = _kernels.run_hybrid(
        psi, *a_csr, *on_csr, *off_csr, *s_csr, cfg.dt, n_steps, stride, dark_step, dw, u,
        math.sqrt(2 * params.kappa), 2 * params.gamma_perp)
    if status != _kernels.STATUS_OK:
        kind = "non-finite state" if status == _kernels.STATUS_NAN else "norm collapse"
        raise NumericalInstability(f"{kind} at step {bad} (t={bad * cfg.dt:.3e} s)", step=int(bad))

    record = TrajectoryRecord(
        times=np.arange(n_rec + 1) * cfg.record_interval,
        y_cond=ys, x_cond=xs, n_cond=ns, wiener_increments=ws,
        jump_times=(np.flatnonzero(jumped) + 1) * cfg.dt,
        dark_time=dark_time, seed=int(cfg.seed), params_snapshot=params,
        n_max=int(cfg.n_max), record_interval=cfg.record_interval,
        settle_time=cfg.settle(params), max_top_population=float(max_top),
    )
    if raise_on_truncation and not truncation_check(record, truncation_threshold).passed:
        required = max(truncation_heuristic(max(params.N, float(ns.max()))), cfg.n_max + 10)
        raise TruncationError(
            f"top Fock-level population reached {max_top:.2e} (> {truncation_threshold:.0e}) "
            f"with n_max={cfg.n_max}; use n_max >= {required}",
            required_n_max=required, max_top_population=float(max_top))
    return record


def _run_one(args):
    params, cfg, index, psi0, threshold, strict = args
    cfg_i = dataclasses.replace(cfg, seed=child_seed(cfg.seed, index))
    try:
        return simulate_trajectory(params, cfg_i, psi0, truncation_threshold=threshold,
                                   raise_on_truncation=strict)
    except CqedError as exc:
        return exc


def ensemble_run(params: SystemParams, cfg: SimConfig, n_traj: int, *, workers: int = 1,
                 psi0: np.ndarray | None = None,
                 truncation_threshold: float = DEFAULT_TRUNCATION_THRESHOLD,
                 raise_on_truncation: bool = True,
                 errors: list | None = None) -> list[TrajectoryRecord]:
    """``n_traj`` independent trajectories seeded by :func:`child_seed`.

    Failed trajectories are logged and appended to ``errors`` (as
    ``(index, exception)``); the call raises only if every one failed.
    Results are ordered by index and do not depend on ``workers``.
    """
    if n_traj < 1:
        raise InvalidArgument(f"n_traj must be >= 1, got {n_traj}")
    cfg.check(params)
    tasks = [(params, cfg, i, psi0, truncation_threshold, raise_on_truncation) for i in range(n_traj)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, tasks, chunksize=max(1, n_traj // (4 * workers))))
    else:
        results = [_run_one(t) for t in tasks]
    records, failures = [], []
    for i, res in enumerate(results):
        if isinstance(res, Exception):
            log.warning("trajectory %d failed: %s", i, res)
            failures.append((i, res))
        else:
            records.append(res)
    if errors is not None:
        errors.extend(failures)
    if not records:
        raise failures[0][1]
    return records


# -- serialization ---------------------------------------------------------

def _params_dict(params: SystemParams) -> dict:
    return dataclasses.asdict(params)


def write_trajectory_csv(record: TrajectoryRecord, path) -> Path:
    """Write ``path`` (columns t_us, y_cond, x_cond, n_cond, dW) and a JSON sidecar."""
    path = Path(path)
    lines = ["t_us,y_cond,x_cond,n_cond,dW"]
    cols = (record.times * 1e6, record.y_cond, record.x_cond, record.n_cond, record.wiener_increments)
    for t, y, x, n, w in zip(*(c.tolist() for c in cols)):
        lines.append(f"{t!r},{y!r},{x!r},{n!r},{w!r}")
    path.write_text("\n".join(lines) + "\n")
    meta = {
        "params": _params_dict(record.params_snapshot),
        "seed": record.seed,
        "jump_times_s": [float(t) for t in record.jump_times],
        "dark_time_s": record.dark_time,
        "n_max": record.n_max,
        "record_interval_s": record.record_interval,
        "settle_time_s": record.settle_time,
        "max_top_population": record.max_top_population,
    }
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return sidecar


def read_trajectory_csv(path) -> TrajectoryRecord:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return TrajectoryRecord(
        times=np.arange(len(data)) * meta["record_interval_s"],
        y_cond=data[:, 1].copy(), x_cond=data[:, 2].copy(), n_cond=data[:, 3].copy(),
        wiener_increments=data[:, 4].copy(),
        jump_times=np.array(meta["jump_times_s"], dtype=float),
        dark_time=meta["dark_time_s"], seed=meta["seed"],
        params_snapshot=SystemParams(**meta["params"]), n_max=meta["n_max"],
        record_interval=meta["record_interval_s"], settle_time=meta["settle_time_s"],
        max_top_population=meta["max_top_population"],
    )
