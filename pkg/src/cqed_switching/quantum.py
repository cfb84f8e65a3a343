"""Truncated Fock (x) two-level Hilbert space.

Basis ordering is fixed: composite index ``2*n + s`` where ``n`` is the
photon number (0..n_max) and ``s`` is the atomic level (0 = ground,
1 = excited).  The atomic index varies fastest.

Operators are plain dense ``numpy`` arrays and states are either kets
(1-d arrays) or density matrices (2-d arrays); the space a given array
lives on is implied by its dimension and checked against a
:class:`Space` where it matters.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import gammaln

from .errors import InvalidArgument, NumericalDegeneracy

log = logging.getLogger(__name__)

POSITIVITY_TOL = 1e-10


@dataclass(frozen=True)
class Space:
    n_max: int

    def __post_init__(self):
        if int(self.n_max) != self.n_max or self.n_max < 1:
            raise InvalidArgument(f"n_max must be an integer >= 1, got {self.n_max!r}")

    @property
    def dim(self) -> int:
        return 2 * (self.n_max + 1)

    def index(self, n: int, s: int) -> int:
        """Composite index of |n> (x) |s>."""
        if not (0 <= n <= self.n_max and s in (0, 1)):
            raise InvalidArgument(f"basis label ({n}, {s}) outside the space")
        return 2 * n + s


def build_space(n_max: int) -> Space:
    return Space(n_max)


class OperatorSet(NamedTuple):
    a: np.ndarray
    a_dag: np.ndarray
    sigma: np.ndarray
    sigma_dag: np.ndarray
    n_phot: np.ndarray
    n_atom: np.ndarray


def field_lowering(n_max: int) -> np.ndarray:
    """``a`` on the bare Fock factor: a|n> = sqrt(n)|n-1>."""
    return np.diag(np.sqrt(np.arange(1, n_max + 1, dtype=float)), 1).astype(complex)


# |e> -> |g> with ordering (g, e)
ATOM_LOWERING = np.array([[0, 1], [0, 0]], dtype=complex)


def operator_set(space: Space) -> OperatorSet:
    nf = space.n_max + 1
    a = np.kron(field_lowering(space.n_max), np.eye(2))
    sigma = np.kron(np.eye(nf), ATOM_LOWERING)
    a_dag = a.conj().T
    sigma_dag = sigma.conj().T
    # number operator built diagonally so its entries are exact integers
    n_phot = np.kron(np.diag(np.arange(nf, dtype=float)), np.eye(2)).astype(complex)
    return OperatorSet(a, a_dag, sigma, sigma_dag, n_phot, sigma_dag @ sigma)


def quadratures(space: Space) -> tuple[np.ndarray, np.ndarray]:
    """Amplitude and phase quadratures X = (a + a†)/2, Y = (a - a†)/2i."""
    ops = operator_set(space)
    return (ops.a + ops.a_dag) / 2, (ops.a - ops.a_dag) / 2j


def _check_dims(state: np.ndarray, dim: int):
    if state.ndim == 1:
        ok = state.shape[0] == dim
    elif state.ndim == 2:
        ok = state.shape == (dim, dim)
    else:
        ok = False
    if not ok:
        raise InvalidArgument(f"state of shape {state.shape} does not match dimension {dim}")


def expectation(state: np.ndarray, op: np.ndarray) -> complex:
    """<psi|O|psi> for a ket, Tr(rho O) for a density matrix."""
    op = np.asarray(op)
    if op.ndim != 2 or op.shape[0] != op.shape[1]:
        raise InvalidArgument(f"operator must be square, got shape {op.shape}")
    _check_dims(state, op.shape[0])
    if state.ndim == 1:
        return complex(np.vdot(state, op @ state))
    # Tr(rho O) without forming the product
    return complex(np.einsum("ij,ji->", state, op))


def renormalize(state: np.ndarray) -> np.ndarray:
    """Ket scaled to unit norm, or density matrix scaled to unit trace."""
    state = np.asarray(state)
    if state.ndim == 1:
        norm = np.linalg.norm(state)
        if not np.isfinite(norm) or norm == 0:
            raise NumericalDegeneracy("cannot renormalize a zero-norm ket")
        return state / norm
    if state.ndim == 2:
        tr = np.trace(state).real
        if not np.isfinite(tr) or abs(tr) == 0:
            raise NumericalDegeneracy("cannot renormalize a zero-trace density matrix")
        return state / tr
    raise InvalidArgument(f"state must be 1-d or 2-d, got ndim={state.ndim}")


def physical_density(rho: np.ndarray, tol: float = POSITIVITY_TOL) -> np.ndarray:
    """Hermitize, clip eigenvalues below ``-tol`` and restore unit trace."""
    rho = 0.5 * (rho + rho.conj().T)
    w, v = np.linalg.eigh(rho)
    if w.min() < -tol:
        log.warning("density matrix eigenvalue %.3e below -%.0e; clipping", w.min(), tol)
        w = np.clip(w, 0.0, None)
        rho = (v * w) @ v.conj().T
    return renormalize(rho)


def coherent_amplitudes(alpha: complex, n_max: int) -> np.ndarray:
    """Fock amplitudes of |alpha> truncated at n_max (not renormalized)."""
    n = np.arange(n_max + 1)
    amp = abs(alpha)
    if amp == 0:
        out = np.zeros(n_max + 1, dtype=complex)
        out[0] = 1.0
        return out
    log_mag = -0.5 * amp**2 + n * np.log(amp) - 0.5 * gammaln(n + 1)
    return np.exp(log_mag) * np.exp(1j * n * np.angle(alpha))


def product_ket(field: np.ndarray, atom_excited: bool = False) -> np.ndarray:
    """Field amplitudes (x) atomic basis state, renormalized."""
    psi = np.zeros(2 * len(field), dtype=complex)
    psi[int(atom_excited)::2] = field
    return renormalize(psi)


def coherent_ket(space: Space, alpha: complex, atom_excited: bool = False) -> np.ndarray:
    return product_ket(coherent_amplitudes(alpha, space.n_max), atom_excited)


def basis_ket(space: Space, n: int, s: int) -> np.ndarray:
    psi = np.zeros(space.dim, dtype=complex)
    psi[space.index(n, s)] = 1.0
    return psi


def ket_to_density(psi: np.ndarray) -> np.ndarray:
    return np.outer(psi, psi.conj())
