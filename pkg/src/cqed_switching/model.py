"""Driven, damped Jaynes-Cummings model.

All rates are angular frequencies in rad/s.  The Hamiltonian is written in
the frame rotating at the probe frequency,

    H = delta_atom σ†σ + delta_cavity a†a + g (a†σ + σ†a) + i E (a† - a),

so that the empty-cavity steady field E/κ is real and positive: the drive
lies along the amplitude quadrature X and anything the atom does to the
transmitted phase shows up in Y = (a - a†)/2i.  Damping is pure radiative:
cavity field decay √(2κ) a and atomic decay √(2γ⊥) σ.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConvergenceError, DegenerateSteadyState, InvalidArgument
from .quantum import Space, operator_set, physical_density

log = logging.getLogger(__name__)

TWO_PI = 2 * math.pi
STEADY_STATE_TOL = 1e-8


@dataclass(frozen=True)
class SystemParams:
    g: float
    kappa: float
    gamma_perp: float
    delta_atom: float = 0.0
    delta_cavity: float = 0.0
    drive_E: float = 0.0
    eta: float = 1.0

    def __post_init__(self):
        if not self.kappa > 0:
            raise InvalidArgument(f"kappa must be > 0, got {self.kappa}")
        if not self.gamma_perp > 0:
            raise InvalidArgument(f"gamma_perp must be > 0, got {self.gamma_perp}")
        if self.g < 0:
            raise InvalidArgument(f"g must be >= 0, got {self.g}")
        if self.drive_E < 0:
            raise InvalidArgument(f"drive_E must be >= 0, got {self.drive_E}")
        if not 0 < self.eta <= 1:
            raise InvalidArgument(f"eta must lie in (0, 1], got {self.eta}")

    @classmethod
    def from_mhz(cls, g=16.0, kappa=8.0, gamma_perp=2.6, delta_atom=0.0,
                 delta_cavity=0.0, N=0.0, eta=1.0) -> "SystemParams":
        """Build from rate/2π values in MHz; drive given as empty-cavity photon number."""
        k = TWO_PI * 1e6 * kappa
        return cls(
            g=TWO_PI * 1e6 * g,
            kappa=k,
            gamma_perp=TWO_PI * 1e6 * gamma_perp,
            delta_atom=TWO_PI * 1e6 * delta_atom,
            delta_cavity=TWO_PI * 1e6 * delta_cavity,
            drive_E=drive_from_N(N, k),
            eta=eta,
        )

    @property
    def N(self) -> float:
        """Empty-cavity photon number |E/κ|² produced by this drive."""
        return (self.drive_E / self.kappa) ** 2

    @property
    def cooperativity(self) -> float:
        return self.g**2 / (2 * self.kappa * self.gamma_perp)

    def with_N(self, N: float) -> "SystemParams":
        return replace(self, drive_E=drive_from_N(N, self.kappa))

    def replace(self, **changes) -> "SystemParams":
        return replace(self, **changes)


def paper_params(N: float = 0.0, **overrides) -> SystemParams:
    """g/2π = 16 MHz, κ/2π = 8 MHz, γ⊥/2π = 2.6 MHz, resonant unless overridden."""
    return SystemParams.from_mhz(N=N, **overrides)


def drive_from_N(N: float, kappa: float) -> float:
    if N < 0:
        raise InvalidArgument(f"N must be >= 0, got {N}")
    return kappa * math.sqrt(N)


def truncation_heuristic(N: float) -> int:
    """Smallest n_max satisfying n_max >= N + 8√N + 10."""
    return int(math.ceil(N + 8 * math.sqrt(N) + 10))


def hamiltonian(params: SystemParams, space: Space) -> np.ndarray:
    ops = operator_set(space)
    return (
        params.delta_atom * ops.n_atom
        + params.delta_cavity * ops.n_phot
        + params.g * (ops.a_dag @ ops.sigma + ops.sigma_dag @ ops.a)
        + 1j * params.drive_E * (ops.a_dag - ops.a)
    )


def collapse_operators(params: SystemParams, space: Space) -> list[np.ndarray]:
    ops = operator_set(space)
    return [math.sqrt(2 * params.kappa) * ops.a, math.sqrt(2 * params.gamma_perp) * ops.sigma]


@dataclass(frozen=True)
class Superoperator:
    """Sparse generator acting on row-major vectorized density matrices.

    With C-order flattening, vec(A ρ B) = (A ⊗ Bᵀ) vec(ρ).
    """

    space: Space
    matrix: sp.csr_matrix

    def apply(self, rho: np.ndarray) -> np.ndarray:
        d = self.space.dim
        return (self.matrix @ rho.reshape(d * d)).reshape(d, d)


def liouvillian(params: SystemParams, space: Space) -> Superoperator:
    d = space.dim
    eye = sp.identity(d, dtype=complex, format="csr")
    H = sp.csr_matrix(hamiltonian(params, space))
    L = -1j * (sp.kron(H, eye) - sp.kron(eye, H.T))
    for c in collapse_operators(params, space):
        c = sp.csr_matrix(c)
        cdc = (c.conj().T @ c).tocsr()
        L = L + sp.kron(c, c.conj()) - 0.5 * sp.kron(cdc, eye) - 0.5 * sp.kron(eye, cdc.T)
    return Superoperator(space, L.tocsr())


def _trace_row(d: int) -> np.ndarray:
    row = np.zeros(d * d, dtype=complex)
    row[:: d + 1] = 1.0
    return row


def solve_steady(L: Superoperator) -> np.ndarray:
    """Null vector of ``L`` normalized to unit trace.

    The first equation (the ρ_00 row) is replaced by the trace condition,
    which makes the linear system regular exactly when the null space is
    one-dimensional.
    """
    d = L.space.dim
    M = L.matrix
    scale = spla.norm(M, np.inf)
    if scale == 0:
        raise DegenerateSteadyState("Liouvillian is identically zero")
    A = (M / scale).tolil()
    A[0, :] = _trace_row(d)
    b = np.zeros(d * d, dtype=complex)
    b[0] = 1.0
    if d * d <= 2500:
        # cheap exact nullity check for small spaces
        s = np.linalg.svd(M.toarray() / scale, compute_uv=False)
        nullity = int(np.sum(s < 1e-10 * s[0]))
        if nullity != 1:
            raise DegenerateSteadyState(f"null space of L has dimension {nullity}")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", spla.MatrixRankWarning)
            x = spla.splu(A.tocsc()).solve(b)
    except (RuntimeError, spla.MatrixRankWarning) as exc:
        raise DegenerateSteadyState(f"steady-state system is singular: {exc}") from exc
    if not np.all(np.isfinite(x)):
        raise DegenerateSteadyState("steady-state solve produced non-finite entries")
    residual = np.abs(M @ x).max() / scale
    if residual > STEADY_STATE_TOL:
        raise ConvergenceError(f"steady-state residual {residual:.2e} exceeds {STEADY_STATE_TOL:.0e}")
    return physical_density(x.reshape(d, d))


def steady_state(params: SystemParams, space: Space) -> np.ndarray:
    return solve_steady(liouvillian(params, space))


def steady_state_residual(rho: np.ndarray, L: Superoperator) -> float:
    """‖L(ρ)‖∞ relative to the ∞-norm of L."""
    d = L.space.dim
    return float(np.abs(L.matrix @ rho.reshape(d * d)).max() / spla.norm(L.matrix, np.inf))


def propagate_series(rho0: np.ndarray, times, params: SystemParams, space: Space,
                     L: Superoperator | None = None) -> np.ndarray:
    """ρ(t) = exp(L t) ρ0 at each of the non-decreasing ``times``; shape (len(times), d, d)."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if np.any(times < 0) or np.any(np.diff(times) < 0):
        raise InvalidArgument("times must be non-negative and non-decreasing")
    d = space.dim
    if rho0.shape != (d, d):
        raise InvalidArgument(f"rho0 of shape {rho0.shape} does not match dimension {d}")
    if L is None:
        L = liouvillian(params, space)
    out = np.empty((len(times), d, d), dtype=complex)
    v = rho0.reshape(d * d).astype(complex)
    t_prev = 0.0
    for k, t in enumerate(times):
        if t > t_prev:
            v = spla.expm_multiply(L.matrix * (t - t_prev), v)
            t_prev = t
        out[k] = v.reshape(d, d)
        tr = np.trace(out[k]).real
        if not np.isfinite(tr) or abs(tr - 1) > 1e-8:
            raise ConvergenceError(f"trace drifted to {tr!r} at t={t:.3e} s")
    return out


def propagate_density(rho0: np.ndarray, t: float, params: SystemParams, space: Space) -> np.ndarray:
    if t < 0:
        raise InvalidArgument(f"t must be >= 0, got {t}")
    return propagate_series(rho0, [t], params, space)[0]
