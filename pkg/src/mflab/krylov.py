"""Krylov-subspace action of the matrix exponential, exp(t A) v.

Arnoldi with adaptive sub-stepping: a Krylov space of dimension up to
``m`` is built at the current vector, the small exponential is taken with
scipy, and the step is halved until the a-posteriori error estimate
beta * |h_{k+1,k} tau [exp(tau H_k)]_{k,0}| falls below the local share of the
tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .errors import NumericalAbort

__all__ = ["KrylovError", "KrylovStats", "expm_krylov"]


class KrylovError(NumericalAbort):
    """Krylov propagation did not meet its tolerance."""


@dataclass
class KrylovStats:
    substeps: int = 0
    matvecs: int = 0
    rejected: int = 0
    error_estimate: float = 0.0


def _arnoldi(A, v, m):
    n = v.size
    V = np.zeros((m + 1, n), dtype=complex)
    H = np.zeros((m + 1, m), dtype=complex)
    V[0] = v
    for j in range(m):
        w = A @ V[j]
        for _ in range(2):  # re-orthogonalise once for stability
            h = V[: j + 1].conj() @ w
            w = w - h @ V[: j + 1]
            H[: j + 1, j] += h
        hn = np.linalg.norm(w)
        H[j + 1, j] = hn
        if hn < 1e-13:
            return V[: j + 1], H[: j + 1, : j + 1], j + 1, 0.0
        V[j + 1] = w / hn
    return V[:m], H[:m, :m], m, float(H[m, m - 1].real)


def expm_krylov(A, v: np.ndarray, t: float = 1.0, m: int = 30, tol: float = 1e-10, max_substeps: int = 100000):
    """Return (exp(t A) v, stats). ``A`` supports ``A @ x``."""
    w = np.array(v, dtype=complex, copy=True)
    stats = KrylovStats()
    if t == 0:
        return w, stats
    beta = np.linalg.norm(w)
    if beta == 0:
        return w, stats
    n = w.size
    m = max(1, min(m, n))
    sign = 1.0 if t > 0 else -1.0
    total = abs(t)
    done = 0.0
    tau = total
    while done < total * (1 - 1e-15):
        beta = np.linalg.norm(w)
        V, H, k, hnext = _arnoldi(A, w / beta, m)
        stats.matvecs += k
        tau = min(tau, total - done)
        while True:
            E = expm(sign * tau * H)
            err = beta * abs(hnext * tau * E[k - 1, 0])
            if hnext == 0.0 or err <= tol * tau / total:
                break
            tau *= 0.5
            stats.rejected += 1
            if tau < total * 1e-12:
                raise KrylovError(f"step size underflow at t={done:g}; error estimate {err:.2e}")
        w = beta * (E[:, 0] @ V)
        done += tau
        stats.substeps += 1
        stats.error_estimate += err
        if stats.substeps > max_substeps:
            raise KrylovError("too many Krylov sub-steps")
        if hnext == 0.0:
            tau = total - done
        elif err < 0.1 * tol * tau / total:
            tau *= 2.0
    if not np.all(np.isfinite(w)):
        raise KrylovError("non-finite Krylov result")
    return w, stats
