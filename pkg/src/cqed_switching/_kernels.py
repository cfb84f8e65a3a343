"""Compiled inner loop for hybrid homodyne/jump trajectories.

Operators arrive in CSR form (indptr, indices, data).  The loop per step is

1. homodyne kick for L = c·a (c = -i√(2κ)), centred on ℓ = <L>:
   ψ += L'ψ dY' + ½ L'²ψ (dY'² - dt), with L' = L - ℓ and dY' = dW + ℓ* dt;
   this is the Milstein truncation of exp(L dY - ½L² dt) up to a scalar,
2. RK4 step of dψ/dt = Mψ, M = -i H_eff (coupled or dark generator),
3. atomic jump ψ -> σψ with probability 2γ⊥<σ†σ> dt,
4. renormalization.
"""

import numpy as np
from numba import njit

STATUS_OK = 0
STATUS_NAN = 1
STATUS_COLLAPSE = 2


@njit(cache=True, nogil=True)
def _matvec(indptr, indices, data, x, out):
    for i in range(indptr.shape[0] - 1):
        acc = 0j
        for k in range(indptr[i], indptr[i + 1]):
            acc += data[k] * x[indices[k]]
        out[i] = acc


@njit(cache=True, nogil=True)
def run_hybrid(psi, a_ptr, a_idx, a_dat, on_ptr, on_idx, on_dat, off_ptr, off_idx, off_dat,
               s_ptr, s_idx, s_dat, dt, n_steps, stride, dark_step, dw, u, sqrt_2kappa,
               two_gamma):
    # n_steps must be a multiple of stride
    d = psi.shape[0]
    n_rec = n_steps // stride + 1
    ys = np.empty(n_rec)
    xs = np.empty(n_rec)
    ns = np.empty(n_rec)
    ws = np.zeros(n_rec)
    jumped = np.zeros(n_steps, np.uint8)
    a1 = np.empty(d, np.complex128)
    a2 = np.empty(d, np.complex128)
    k1 = np.empty(d, np.complex128)
    k2 = np.empty(d, np.complex128)
    k3 = np.empty(d, np.complex128)
    k4 = np.empty(d, np.complex128)
    tmp = np.empty(d, np.complex128)
    c = -1j * sqrt_2kappa

    max_top = 0.0
    for i in range(d - 4, d):
        max_top += psi[i].real ** 2 + psi[i].imag ** 2

    _matvec(a_ptr, a_idx, a_dat, psi, a1)
    amean = 0j
    nmean = 0.0
    for i in range(d):
        amean += np.conj(psi[i]) * a1[i]
        nmean += (i // 2) * (psi[i].real ** 2 + psi[i].imag ** 2)
    ys[0] = amean.imag
    xs[0] = amean.real
    ns[0] = nmean

    for step in range(n_steps):
        _matvec(a_ptr, a_idx, a_dat, psi, a1)
        _matvec(a_ptr, a_idx, a_dat, a1, a2)
        amean = 0j
        pe = 0.0
        for i in range(d):
            amean += np.conj(psi[i]) * a1[i]
        for i in range(1, d, 2):
            pe += psi[i].real ** 2 + psi[i].imag ** 2
        ell = c * amean
        dwk = dw[step]
        dyp = dwk + np.conj(ell) * dt
        q = 0.5 * (dyp * dyp - dt)
        for i in range(d):
            lp = c * a1[i] - ell * psi[i]
            lp2 = c * c * a2[i] - 2.0 * ell * c * a1[i] + ell * ell * psi[i]
            psi[i] = psi[i] + lp * dyp + lp2 * q
        ws[step // stride + 1] += dwk

        if step < dark_step:
            ptr, idx, dat = on_ptr, on_idx, on_dat
        else:
            ptr, idx, dat = off_ptr, off_idx, off_dat
        _matvec(ptr, idx, dat, psi, k1)
        for i in range(d):
            tmp[i] = psi[i] + 0.5 * dt * k1[i]
        _matvec(ptr, idx, dat, tmp, k2)
        for i in range(d):
            tmp[i] = psi[i] + 0.5 * dt * k2[i]
        _matvec(ptr, idx, dat, tmp, k3)
        for i in range(d):
            tmp[i] = psi[i] + dt * k3[i]
        _matvec(ptr, idx, dat, tmp, k4)
        for i in range(d):
            psi[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])

        if u[step] < two_gamma * pe * dt:
            _matvec(s_ptr, s_idx, s_dat, psi, tmp)
            for i in range(d):
                psi[i] = tmp[i]
            jumped[step] = 1

        norm2 = 0.0
        for i in range(d):
            norm2 += psi[i].real ** 2 + psi[i].imag ** 2
        if not np.isfinite(norm2):
            return ys, xs, ns, ws, jumped, max_top, STATUS_NAN, step
        if norm2 < 1e-200:
            return ys, xs, ns, ws, jumped, max_top, STATUS_COLLAPSE, step
        inv = 1.0 / np.sqrt(norm2)
        for i in range(d):
            psi[i] *= inv

        top = 0.0
        for i in range(d - 4, d):
            top += psi[i].real ** 2 + psi[i].imag ** 2
        if top > max_top:
            max_top = top

        if (step + 1) % stride == 0:
            r = (step + 1) // stride
            _matvec(a_ptr, a_idx, a_dat, psi, a1)
            amean = 0j
            nmean = 0.0
            for i in range(d):
                amean += np.conj(psi[i]) * a1[i]
                nmean += (i // 2) * (psi[i].real ** 2 + psi[i].imag ** 2)
            ys[r] = amean.imag
            xs[r] = amean.real
            ns[r] = nmean
    return ys, xs, ns, ws, jumped, max_top, STATUS_OK, -1
