"""Brute-force phi coefficients of small stationary chains.

States ``0..n-1`` are real points in increasing order.  Everything is
enumerated with plain loops: start state, lags, thresholds and the joint law
of the visited states.  Used as an oracle for the vectorized routine.
"""
import numpy as np


def stationary(P):
    w, v = np.linalg.eig(P.T)
    pi = np.real(v[:, np.argmin(np.abs(w - 1.0))])
    return pi / pi.sum()


def random_chain(rng, n):
    P = rng.random((n, n)) + 0.05
    # sprinkle zeros but keep every row non-trivial and the chain irreducible
    P[rng.random((n, n)) < 0.25] = 0.0
    P[np.arange(n), (np.arange(n) + 1) % n] += 0.1
    P /= P.sum(axis=1, keepdims=True)
    return P, stationary(P)


def phi_single(P, pi, i):
    """sup_x || P(Y_i <= x | Y_0) - P(Y_0 <= x) ||_inf for one lag ``i``."""
    n = len(pi)
    Pi = np.linalg.matrix_power(P, i)
    best = 0.0
    for s in range(n):
        if pi[s] <= 0:
            continue
        for t in range(n):
            cond = sum(Pi[s, j] for j in range(t + 1))
            marg = sum(pi[j] for j in range(t + 1))
            best = max(best, abs(cond - marg))
    return best


def phi_pair(P, pi, i1, i2):
    """Pair coefficient built from centred indicator products for lags ``i1 <= i2``."""
    n = len(pi)
    A = np.linalg.matrix_power(P, i1)
    D = np.linalg.matrix_power(P, i2 - i1)
    F = np.cumsum(pi)
    cond = np.zeros((n, n, n))          # (start, t1, t2)
    for s in range(n):
        for t1 in range(n):
            for t2 in range(n):
                acc = 0.0
                for a in range(n):
                    for b in range(n):
                        pab = A[s, a] * D[a, b]
                        if pab == 0.0:
                            continue
                        acc += pab * ((a <= t1) - F[t1]) * ((b <= t2) - F[t2])
                cond[s, t1, t2] = acc
    mean = np.einsum("s,sij->ij", pi, cond)
    return float(np.max(np.abs(cond - mean[None])[pi > 0]))


def phi_profiles(P, pi, kmax, horizon=None):
    H = 2 * kmax if horizon is None else horizon
    single = [phi_single(P, pi, i) for i in range(H + 1)]
    pair = [0.0] + [max(phi_pair(P, pi, i1, i2) for i2 in range(i1, H + 1))
                    for i1 in range(1, H + 1)]
    phi1 = np.array([max(single[k:]) for k in range(kmax + 1)])
    phi2 = np.array([max(phi1[k], max(pair[k:])) for k in range(kmax + 1)])
    phi1[0] = phi2[0] = 1.0
    return phi1, phi2
