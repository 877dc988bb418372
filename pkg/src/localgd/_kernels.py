"""Margin-space inner loops for datasets with one sample per client.

When every client holds a single folded point z_m = gamma_m * u_m, local
updates move each client iterate only along u_m, so a whole run is determined
by the scalar projections a_m = <w, u_m> and the Gram matrix of the
directions. These kernels run the (rounds x K) recurrences at machine speed;
they are compiled with numba when available and fall back to pure Python
otherwise. Histories are sampled every ``stride`` rounds (round 0 and the
final round always included).
"""

from __future__ import annotations

import math

import numpy as np

try:  # pragma: no cover - exercised implicitly by import
    from numba import njit as _njit

    def _jit(func):
        return _njit(cache=True)(func)

except ImportError:  # pragma: no cover

    def _jit(func):
        return func


def _trace_slots(rounds, stride):
    return rounds // stride + (1 if rounds % stride else 0) + 1


@_jit
def _local_gd_margin_core(gammas, G, a0, eta, K, rounds, stride, a_hist, C_hist, r_hist):
    M = gammas.shape[0]
    a = a0.copy()
    C = np.zeros(M)
    C_sum = np.zeros(M)
    S_local = np.zeros(M)
    delta = np.zeros(M)
    slot = 0
    a_hist[slot] = a
    C_hist[slot] = C
    r_hist[slot] = 0
    slot += 1
    for r in range(rounds):
        for m in range(M):
            C_sum[m] += C[m]
        for m in range(M):
            al = a[m]
            g = gammas[m]
            acc = 0.0
            for _k in range(K):
                acc += al - a[m]
                al = al + eta * g / (1.0 + math.exp(g * al))
            S_local[m] += acc
            delta[m] = al - a[m]
        for m in range(M):
            upd = 0.0
            for mm in range(M):
                upd += G[m, mm] * delta[mm]
            a[m] = a[m] + upd / M
        for m in range(M):
            C[m] += delta[m]
        if (r + 1) % stride == 0 or r + 1 == rounds:
            a_hist[slot] = a
            C_hist[slot] = C
            r_hist[slot] = r + 1
            slot += 1
    return slot, C_sum, S_local


def local_gd_margin(gammas, G, a0, eta, K, rounds, stride=1):
    """Run ``rounds`` local-GD rounds of K steps each in margin space.

    Returns (rounds_traced, a_hist, C_hist, C_sum, S_local) where C_hist holds
    cumulative client displacements (the average iterate is
    w0 + (1/M) * sum_m C[m] * u_m), C_sum accumulates C over round starts and
    S_local the within-round partial sums needed for uniform iterate averaging.
    """
    slots = _trace_slots(rounds, stride)
    a_hist = np.zeros((slots, len(gammas)))
    C_hist = np.zeros((slots, len(gammas)))
    r_hist = np.zeros(slots, dtype=np.int64)
    used, C_sum, S_local = _local_gd_margin_core(
        np.asarray(gammas, dtype=np.float64),
        np.asarray(G, dtype=np.float64),
        np.asarray(a0, dtype=np.float64),
        float(eta),
        int(K),
        int(rounds),
        int(stride),
        a_hist,
        C_hist,
        r_hist,
    )
    return r_hist[:used], a_hist[:used], C_hist[:used], C_sum, S_local


@_jit
def _rk4_flow(a, g, eta, t_total, substeps):
    h = t_total / substeps
    for _ in range(substeps):
        k1 = eta * g / (1.0 + math.exp(g * a))
        a2 = a + 0.5 * h * k1
        k2 = eta * g / (1.0 + math.exp(g * a2))
        a3 = a + 0.5 * h * k2
        k3 = eta * g / (1.0 + math.exp(g * a3))
        a4 = a + h * k3
        k4 = eta * g / (1.0 + math.exp(g * a4))
        a = a + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return a


@_jit
def _gf_numeric_margin_core(
    gammas, G, a0, eta, K, rounds, substeps, probe, stride, a_hist, C_hist, r_hist
):
    M = gammas.shape[0]
    a = a0.copy()
    C = np.zeros(M)
    delta = np.zeros(M)
    err_max = 0.0
    slot = 0
    a_hist[slot] = a
    C_hist[slot] = C
    r_hist[slot] = 0
    slot += 1
    for r in range(rounds):
        for m in range(M):
            end = _rk4_flow(a[m], gammas[m], eta, float(K), substeps)
            if probe and substeps >= 2:
                half = _rk4_flow(a[m], gammas[m], eta, float(K), substeps // 2)
                diff = abs(end - half)
                if diff > err_max:
                    err_max = diff
            delta[m] = end - a[m]
        for m in range(M):
            upd = 0.0
            for mm in range(M):
                upd += G[m, mm] * delta[mm]
            a[m] = a[m] + upd / M
        for m in range(M):
            C[m] += delta[m]
        if (r + 1) % stride == 0 or r + 1 == rounds:
            a_hist[slot] = a
            C_hist[slot] = C
            r_hist[slot] = r + 1
            slot += 1
    return slot, err_max


def gf_numeric_margin(gammas, G, a0, eta, K, rounds, substeps, probe=True, stride=1):
    """Classical fixed-step RK4 integration of the local flows in margin space.

    Each round integrates every client's scalar flow for K time units with
    ``substeps`` steps, then averages through the Gram matrix. Returns
    (rounds_traced, a_hist, C_hist, err_max) where err_max is the largest
    endpoint discrepancy against a half-resolution integration (0.0 when the
    probe is disabled).
    """
    slots = _trace_slots(rounds, stride)
    a_hist = np.zeros((slots, len(gammas)))
    C_hist = np.zeros((slots, len(gammas)))
    r_hist = np.zeros(slots, dtype=np.int64)
    used, err_max = _gf_numeric_margin_core(
        np.asarray(gammas, dtype=np.float64),
        np.asarray(G, dtype=np.float64),
        np.asarray(a0, dtype=np.float64),
        float(eta),
        int(K),
        int(rounds),
        int(substeps),
        bool(probe),
        int(stride),
        a_hist,
        C_hist,
        r_hist,
    )
    return r_hist[:used], a_hist[:used], C_hist[:used], err_max
