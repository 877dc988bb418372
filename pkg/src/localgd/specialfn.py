"""Log-domain Lambert W machinery for the exact local-gradient-flow round map.

The flow of a single folded sample z = gamma * u (u a unit vector) moves the
margin projection a = <w, u> according to a separable ODE whose solution is
expressible through the principal Lambert W branch. Everything here works with
W(exp(.)) without ever forming exp(.), so arguments far beyond the overflow
threshold of float64 are handled exactly in log space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import DegenerateGeometryError, DomainError

__all__ = [
    "lambert_w_exp",
    "log_phi",
    "surrogate_loss",
    "gf_flow_advance",
    "GfState",
    "make_gf_state",
    "gf_round",
    "TheoryConstants",
    "theory_constants",
]

_NEWTON_STALL = 50


def lambert_w_exp(u: float) -> float:
    """Solve w + ln(w) = u for w > 0, i.e. compute W(exp(u)) in log space.

    Newton iteration on f(w) = w + ln(w) - u, seeded with w = u - ln(max(u, 1))
    for u > 2 and w = exp(u - 1) (clamped away from zero) otherwise. f is
    concave and increasing, so Newton converges monotonically once above the
    root; a bisection fallback guards the (unobserved) stall case.
    """
    u = float(u)
    if not math.isfinite(u):
        raise ValueError("u must be finite")
    if u < -700.0:
        # the root sits at the edge of the subnormal range where Newton's
        # iterates would round to zero; the series w = e^u*(1 - e^u + ...) is
        # already beyond full precision here
        w = math.exp(u)
        return max(w * (1.0 - w), 5e-324)
    if u > 2.0:
        w = u - math.log(max(u, 1.0))
    else:
        w = max(math.exp(u - 1.0), 5e-324)
    for _ in range(_NEWTON_STALL):
        f = w + math.log(w) - u
        step = f * w / (w + 1.0)
        wn = w - step
        if wn <= 0.0:
            wn = max(w * 0.5, 5e-324)
        if abs(wn - w) <= 1e-16 * abs(wn):
            return wn
        w = wn
    return _bisect_w(u, w)


def _bisect_w(u, w_hint):
    lo, hi = w_hint, w_hint
    while lo + math.log(lo) > u:
        lo *= 0.5
    while hi + math.log(hi) < u:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid + math.log(mid) < u:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-16 * hi:
            break
    return 0.5 * (lo + hi)


def log_phi(b: float, x: float) -> float:
    """log of the round-amplification factor W(exp(b + exp(x) + x)) / exp(x).

    With u = b + exp(x) + x and w = W(exp(u)), the result is u - w - x. That
    difference is obtained directly by Newton on its residual equation
    exp(x)*(exp(L) - 1) + L = b, which is cancellation-free even when exp(x)
    dwarfs the result. Nonnegative; zero exactly when b = 0.
    """
    b = float(b)
    x = float(x)
    if b < 0.0:
        raise ValueError(f"b must be nonnegative, got {b}")
    if not math.isfinite(x) or abs(x) > 700.0:
        raise DomainError(f"x={x} outside representable range (|x| <= 700)")
    if b == 0.0:
        return 0.0
    y = math.exp(x)
    # Newton on g(L) = y*expm1(L) + L - b; g is convex and increasing, and
    # both b/(y+1) (linearization) and log1p(b/y) (exponential branch) sit at
    # or above the root, so starting from their minimum keeps the iteration
    # monotone from above and within a few steps of the root.
    ratio = b / y
    exp_branch = math.log1p(ratio) if math.isfinite(ratio) else math.log(b) - x
    L = min(b / (y + 1.0), exp_branch)
    for _ in range(_NEWTON_STALL):
        g = y * math.expm1(L) + L - b
        dg = y * math.exp(L) + 1.0
        Ln = L - g / dg
        if Ln < 0.0:
            Ln = L * 0.5
        if abs(Ln - L) <= 1e-16 * max(abs(Ln), 1e-300):
            return max(Ln, 0.0)
        L = Ln
    return _bisect_log_phi(b, y, L)


def _bisect_log_phi(b, y, hint):
    lo, hi = 0.0, max(hint, 1e-300)
    while y * math.expm1(hi) + hi < b:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if y * math.expm1(mid) + mid < b:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-16 * max(hi, 1e-300):
            break
    return 0.5 * (lo + hi)


def surrogate_loss(gamma_m: float, etaK: float, a_m: float) -> float:
    """Surrogate client loss: log_phi(etaK*gamma^2, gamma*a) / gamma.

    Strictly decreasing in the margin projection a_m; strictly positive for
    etaK > 0.
    """
    if gamma_m <= 0.0:
        raise ValueError(f"gamma_m must be positive, got {gamma_m}")
    if etaK <= 0.0:
        raise ValueError(f"etaK must be positive, got {etaK}")
    return log_phi(etaK * gamma_m * gamma_m, gamma_m * a_m) / gamma_m


def gf_flow_advance(gamma: float, a0: float, eta_t: float) -> float:
    """Advance the margin projection of one client along its exact local flow.

    Returns a(t) with exp(g*a(t)) + g*a(t) = eta_t*g^2 + exp(g*a0) + g*a0,
    where eta_t is the stepsize-time product eta*t. Equals a0 exactly when
    eta_t = 0, and is strictly larger otherwise.
    """
    if gamma <= 0.0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    if eta_t < 0.0:
        raise ValueError(f"eta_t must be nonnegative, got {eta_t}")
    if eta_t == 0.0:
        return float(a0)
    return a0 + log_phi(eta_t * gamma * gamma, gamma * a0) / gamma


@dataclass(frozen=True)
class GfState:
    """Margin-space state of an exact local-gradient-flow run with n=1 clients.

    gammas[m] is the norm of client m's folded sample, directions[m] the unit
    vector along it, gram the M x M Gram matrix of the directions, a[m] the
    projection of the current average iterate onto directions[m], rho[m] the
    surrogate loss, and lyapunov = max(rho). c is gram[0][1] and is only
    geometrically meaningful when M = 2.
    """

    gammas: np.ndarray
    directions: np.ndarray
    gram: np.ndarray
    a: np.ndarray
    rho: np.ndarray
    lyapunov: float
    c: float


def make_gf_state(gammas, directions, etaK, a=None) -> GfState:
    """Assemble a GfState, computing the Gram matrix and surrogates at etaK."""
    gammas = np.asarray(gammas, dtype=np.float64)
    directions = np.asarray(directions, dtype=np.float64)
    M = gammas.shape[0]
    if directions.shape[0] != M:
        raise ValueError("gammas and directions disagree on the client count")
    if np.any(gammas <= 0):
        raise ValueError("all gammas must be positive")
    gram = directions @ directions.T
    if a is None:
        a = np.zeros(M)
    a = np.asarray(a, dtype=np.float64)
    rho = np.array([surrogate_loss(g, etaK, ai) for g, ai in zip(gammas, a)])
    return GfState(
        gammas=gammas,
        directions=directions,
        gram=gram,
        a=a,
        rho=rho,
        lyapunov=float(rho.max()),
        c=float(gram[0, 1]) if M >= 2 else 1.0,
    )


def gf_round(state: GfState, etaK: float) -> GfState:
    """One averaging round of exact local gradient flow in margin space.

    The projections advance by (1/M) * G @ rho where rho are the surrogate
    losses at the current state; surrogates and the Lyapunov value are then
    recomputed. Valid for any number of clients with one sample each.
    """
    rho = np.array(
        [surrogate_loss(g, etaK, ai) for g, ai in zip(state.gammas, state.a)]
    )
    a_next = state.a + (state.gram @ rho) / len(state.gammas)
    rho_next = np.array(
        [surrogate_loss(g, etaK, ai) for g, ai in zip(state.gammas, a_next)]
    )
    return replace(
        state, a=a_next, rho=rho_next, lyapunov=float(rho_next.max())
    )


def _log1p_ratio(etaK, gamma):
    return math.log1p(etaK * gamma * gamma) / gamma


@dataclass(frozen=True)
class TheoryConstants:
    """Rate constants and envelope evaluators for two-client exact flow runs.

    L0 and H0 are the max resp. min over clients of log(1 + etaK*gamma^2)/gamma.
    tau is the main transition time; tau0/tau1 belong to the variant envelope
    with its warm-in threshold; nu is the per-two-rounds contraction constant
    used by the variant form; a_floor bounds the margin projections from below.
    Any of tau, tau0, tau1 may be +inf when the geometry makes the closed-form
    constants overflow, in which case the corresponding envelope is never
    applicable.
    """

    L0: float
    H0: float
    nu: float
    tau: float
    c: float
    gamma_min: float
    gamma_max: float
    etaK: float
    a_floor: float
    tau0: float
    tau1: float

    def envelope(self, r: float, variant: str = "main") -> float:
        """Loss bound at round r; r must exceed the variant's threshold.

        "main": 32*(1+log(1+etaK))^2 / ((1+c)*gamma_min^4*etaK*(r - tau)),
        valid for r > tau. "warm": 64*(L0+1)^2 / ((1+c)*gamma_min^2*etaK*
        (r - tau0)), valid for r >= tau1.
        """
        if variant == "main":
            if not r > self.tau:
                raise ValueError(f"round {r} not past threshold tau={self.tau}")
            num = 32.0 * (1.0 + math.log1p(self.etaK)) ** 2
            return num / ((1.0 + self.c) * self.gamma_min**4 * self.etaK * (r - self.tau))
        if variant == "warm":
            if not (r >= self.tau1 and r > self.tau0):
                raise ValueError(f"round {r} not past threshold tau1={self.tau1}")
            num = 64.0 * (self.L0 + 1.0) ** 2
            return num / ((1.0 + self.c) * self.gamma_min**2 * self.etaK * (r - self.tau0))
        raise ValueError(f"unknown envelope variant {variant!r}")


def theory_constants(state: GfState, etaK: float) -> TheoryConstants:
    """Rate constants for a two-client, one-sample-per-client flow run.

    Exponentials that would overflow are mapped to +inf transition times, which
    downstream envelope checks treat as "never applicable".
    """
    if len(state.gammas) != 2:
        raise ValueError("theory constants are defined for exactly two clients")
    c = state.c
    if c <= -1.0:
        raise DegenerateGeometryError(f"antipodal client directions (c={c})")
    if etaK <= 0.0:
        raise ValueError(f"etaK must be positive, got {etaK}")
    g1, g2 = float(state.gammas[0]), float(state.gammas[1])
    gmin, gmax = min(g1, g2), max(g1, g2)
    vals = (_log1p_ratio(etaK, g1), _log1p_ratio(etaK, g2))
    L0, H0 = max(vals), min(vals)
    lead = 16.0 * (L0 + 1.0) ** 2 / ((1.0 + c) * gmin)

    # tau's first term is (1/H0 - 1/L0) * (L0/H0)^p, evaluated in log space.
    gap = 1.0 / H0 - 1.0 / L0
    p = 3.0 * (L0 + 1.0) ** 2 * (1.0 - c) * gmax / ((1.0 + c) * gmin)
    if gap > 0.0:
        log_term = math.log(gap) + p * math.log(L0 / H0)
        first = math.exp(log_term) if log_term < 709.0 else math.inf
    else:
        first = 0.0
    tau = lead * (first + 4.0 * gmax + 2.0 / H0)

    # Floor on the projections, and the transition times of the variant form.
    a_floor = (
        -3.0 * (1.0 - c) * (L0 + 1.0) ** 2 / ((1.0 + c) * gmin) * math.log(L0 / H0)
        if L0 > H0
        else 0.0
    )
    exp_arg = -gmax * a_floor
    if exp_arg < 709.0:
        nu0 = (1.0 + c) * gmin / (4.0 * (L0 + 1.0) ** 2 * (1.0 + math.exp(exp_arg)))
        tau0 = 2.0 / nu0 * gap
    else:
        tau0 = math.inf
    nu = (1.0 + c) * gmin / (16.0 * (L0 + 1.0) ** 2)
    tau1 = tau0 + 32.0 * (L0 + 1.0) ** 2 / ((1.0 + c) * gmin) * (2.0 * gmax + 1.0 / H0)

    return TheoryConstants(
        L0=L0,
        H0=H0,
        nu=nu,
        tau=tau,
        c=c,
        gamma_min=gmin,
        gamma_max=gmax,
        etaK=etaK,
        a_floor=a_floor,
        tau0=tau0,
        tau1=tau1,
    )
