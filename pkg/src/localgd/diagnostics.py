"""Executable checks of the convergence analysis along real trajectories.

Each check turns an inequality the analysis proves into a measurement on a
completed run and reports slack (bound minus quantity) rather than bare
pass/fail, so regressions surface as shrinking slack before they become
violations. Loss-scale comparisons use an absolute tolerance of 1e-9; Hessian
norms, which come out of an iterative solver, use 1e-8 relative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import losses
from .data import compute_margin
from .errors import MissingTraceDataError
from .specialfn import TheoryConstants, theory_constants  # re-exported  # noqa: F401

__all__ = [
    "CheckReport",
    "TheoryConstants",
    "theory_constants",
    "check_gradient_objective_bounds",
    "check_local_hessian_growth",
    "check_run",
    "envelope_two_stage",
    "envelope_baseline",
    "envelope_gf",
    "RUN_CHECKS",
]

LOSS_TOL = 1e-9
HESS_RTOL = 1e-8
MONOTONE_TOL = 1e-12


@dataclass
class CheckReport:
    """Outcome of one check: violations are (round, quantity, bound, slack).

    ``passed`` is true exactly when no violation was recorded; ``na_count``
    counts rounds skipped because the check's preconditions did not hold there,
    and ``min_slack`` is the smallest slack seen over all evaluated instances.
    Informational reports are recorded but never fail a run.
    """

    name: str
    instances_checked: int = 0
    violations: list = field(default_factory=list)
    passed: bool = True
    tolerance: float = LOSS_TOL
    na_count: int = 0
    min_slack: float | None = None
    informational: bool = False

    def record(self, round_index, quantity, bound, tol=None):
        tol = self.tolerance if tol is None else tol
        slack = bound - quantity
        self.instances_checked += 1
        if self.min_slack is None or slack < self.min_slack:
            self.min_slack = float(slack)
        if slack < -tol:
            self.violations.append(
                (round_index, float(quantity), float(bound), float(slack))
            )
            self.passed = False

    def to_dict(self):
        return asdict(self)


def check_gradient_objective_bounds(dataset, weight_samples) -> CheckReport:
    """Gradient and Hessian norms against the objective, at sample weights.

    Per client: ||grad F_m|| <= F_m and ||hess F_m|| <= F_m; globally
    ||hess F|| <= F; and at weights whose minimum margin is nonnegative,
    ||grad F|| >= (gamma/2) F with gamma the cached maximum margin.
    """
    report = CheckReport(name="gradient-objective-bounds")
    gamma = None
    for idx, w in enumerate(weight_samples):
        w = np.asarray(w, dtype=np.float64)
        rep = losses.objective(dataset, w)
        for m in range(dataset.M):
            fm = rep.per_client_values[m]
            gm = float(np.linalg.norm(losses.client_gradient(dataset, m, w)))
            report.record(idx, gm, fm)
            hm = losses.client_hessian_spectral_norm(dataset, m, w)
            report.record(idx, hm, fm, tol=HESS_RTOL * max(1.0, fm))
        h = losses.hessian_spectral_norm(dataset, w)
        report.record(idx, h, rep.value, tol=HESS_RTOL * max(1.0, rep.value))
        if losses.min_margin(dataset, w) >= 0.0:
            if gamma is None:
                gamma, _ = compute_margin(dataset)
            # lower bound on the gradient: operands swapped so that positive
            # slack still means the inequality holds
            report.record(idx, (gamma / 2.0) * rep.value, rep.grad_norm)
        else:
            report.na_count += 1
    return report


def _hessian_growth_rhs(f1, dist):
    # exp(dist^2) overflows past ~26.6; the bound is then vacuously infinite
    if dist * dist > 700.0:
        return math.inf if f1 > 0.0 else 0.0
    return f1 * (1.0 + dist * (1.0 + math.exp(dist * dist) * (1.0 + 0.5 * dist * dist)))


def check_local_hessian_growth(dataset, w1, w2) -> CheckReport:
    """Per-client Hessian norm at w2 against the growth bound anchored at w1.

    The bound is F_m(w1) * (1 + t*(1 + exp(t^2)*(1 + t^2/2))) with
    t = ||w2 - w1||.
    """
    report = CheckReport(name="hessian-growth", tolerance=HESS_RTOL)
    w1 = np.asarray(w1, dtype=np.float64)
    w2 = np.asarray(w2, dtype=np.float64)
    dist = float(np.linalg.norm(w2 - w1))
    for m in range(dataset.M):
        f1 = losses.client_value(dataset, m, w1)
        rhs = _hessian_growth_rhs(f1, dist)
        lhs = losses.client_hessian_spectral_norm(dataset, m, w2)
        report.record(m, lhs, rhs, tol=HESS_RTOL * max(1.0, rhs))
    return report


def _check_drift(run, dataset):
    report = CheckReport(name="client-drift")
    K = run.config.K
    for t in run.traces:
        if t.drift is None:
            continue
        if t.eta_used > 8.0:
            report.na_count += 1
            continue
        budget = t.eta_used * K
        for m, d in enumerate(t.drift):
            report.record(t.r, d, budget * t.client_losses[m])
    return report


def _check_bias(run, dataset):
    report = CheckReport(name="gradient-bias")
    K = run.config.K
    M = dataset.M
    for t in run.traces:
        if t.bias is None:
            continue
        if t.eta_used > 8.0 or t.global_loss > 1.0 / (t.eta_used * K * M):
            report.na_count += 1
            continue
        for m, b in enumerate(t.bias):
            report.record(t.r, b, 7.0 * t.eta_used * K * t.client_losses[m] ** 2)
    return report


def _stages(run):
    by_stage: dict[int, list] = {}
    for t in run.traces:
        by_stage.setdefault(t.stage, []).append(t)
    return by_stage


def _check_stable_rate(run, dataset, strict=False):
    """Loss envelope after a constant-stepsize stretch enters the stable region.

    The entry round is the first traced round of a stage where eta <= 4 and
    F <= gamma^2 / (42 * eta * K * M); afterwards the loss must satisfy
    F(round r) <= 4 / (eta * gamma^2 * K * (r - entry)). The strict variant
    checks the factor-2 form and is informational.
    """
    name = "stable-rate-strict" if strict else "stable-rate"
    report = CheckReport(name=name, informational=strict)
    gamma, _ = compute_margin(dataset)
    K = run.config.K
    M = dataset.M
    factor = 2.0 if strict else 4.0
    for stage_traces in _stages(run).values():
        entry = None
        for t in stage_traces:
            if entry is None:
                if t.eta_used <= 4.0 and t.global_loss <= gamma**2 / (
                    42.0 * t.eta_used * K * M
                ):
                    entry = t
                else:
                    report.na_count += 1
                continue
            bound = factor / (entry.eta_used * gamma**2 * K * (t.r - entry.r))
            report.record(t.r, t.global_loss, bound)
    return report


def _check_stable_monotone(run, dataset):
    """Loss is non-increasing once a stage has entered the stable region."""
    report = CheckReport(name="stable-monotone", tolerance=MONOTONE_TOL)
    gamma, _ = compute_margin(dataset)
    K = run.config.K
    M = dataset.M
    for stage_traces in _stages(run).values():
        prev = None
        for t in stage_traces:
            if prev is None:
                if t.eta_used <= 4.0 and t.global_loss <= gamma**2 / (
                    42.0 * t.eta_used * K * M
                ):
                    prev = t
                else:
                    report.na_count += 1
                continue
            report.record(t.r, t.global_loss, prev.global_loss)
            prev = t
    return report


def _check_lyapunov(run, dataset):
    report = CheckReport(name="lyapunov-monotone", tolerance=MONOTONE_TOL)
    prev = None
    for t in run.traces:
        if t.lyapunov is None:
            continue
        if prev is not None:
            report.record(t.r, t.lyapunov, prev)
        prev = t.lyapunov
    return report


def _check_lyapunov_rate(run, dataset):
    """Lyapunov decay 1/(1/L_q + nu*(r-q)/2) with the observed projection floor.

    nu = (1+c)*gmin / (4*(L0+1)^2*(1+exp(-gmax*floor))) where L0 is the
    closed-form initial level max_m log(1+etaK*gamma_m^2)/gamma_m and the
    floor is the smallest worst-client projection seen along the traced
    rounds, so the check is meaningful for unthinned traces. Two clients only.
    """
    report = CheckReport(name="lyapunov-rate")
    traced = [t for t in run.traces if t.lyapunov is not None and t.rho is not None]
    if not traced or len(traced[0].rho) != 2 or run.config.eta is None:
        report.na_count = len(run.traces)
        return report
    gammas = np.array([float(np.linalg.norm(Z[0])) for Z in dataset.clients])
    U = np.array([Z[0] / np.linalg.norm(Z[0]) for Z in dataset.clients])
    c = float(U[0] @ U[1])
    gmin, gmax = float(gammas.min()), float(gammas.max())
    etaK = run.config.eta * run.config.K
    L0 = max(math.log1p(etaK * g * g) / g for g in gammas)
    # floor over the trajectory of the worst client's projection
    alphas = [t.a[int(np.argmax(t.rho))] for t in traced]
    a_floor = min(alphas)
    exp_arg = -gmax * a_floor
    if exp_arg > 700.0 or c <= -1.0:
        report.na_count = len(traced)
        return report
    nu = (1.0 + c) * gmin / (4.0 * (L0 + 1.0) ** 2 * (1.0 + math.exp(exp_arg)))
    Lq = traced[0].lyapunov
    q = traced[0].r
    for t in traced[1:]:
        bound = 1.0 / (1.0 / Lq + nu * (t.r - q) / 2.0)
        report.record(t.r, t.lyapunov, bound)
    return report


RUN_CHECKS = {
    "drift": _check_drift,
    "bias": _check_bias,
    "stable-rate": _check_stable_rate,
    "stable-monotone": _check_stable_monotone,
    "lyapunov": _check_lyapunov,
    "lyapunov-rate": _check_lyapunov_rate,
}


def _is_discrete(run):
    # the stable-phase rate is a claim about discrete local steps; flow runs
    # can still request it explicitly
    return getattr(run, "optimizer", "local-gd") != "local-gf"


_CHECK_NEEDS = {
    "drift": lambda run: any(t.drift is not None for t in run.traces),
    "bias": lambda run: any(t.bias is not None for t in run.traces),
    "stable-rate": lambda run: True,
    "stable-monotone": lambda run: True,
    "lyapunov": lambda run: any(t.lyapunov is not None for t in run.traces),
    "lyapunov-rate": lambda run: any(t.lyapunov is not None for t in run.traces),
}

_AUTO_ONLY_IF = {
    "stable-rate": _is_discrete,
    "stable-monotone": _is_discrete,
}


def check_run(run, dataset, checks=None) -> list[CheckReport]:
    """Run trajectory checks against a completed run.

    With checks=None, every check whose required trace fields are present is
    executed. Explicitly requested checks whose data is missing raise
    MissingTraceDataError; unknown names raise ValueError.
    """
    if checks is None:
        selected = [
            n for n in RUN_CHECKS
            if _CHECK_NEEDS[n](run) and _AUTO_ONLY_IF.get(n, lambda _run: True)(run)
        ]
    else:
        selected = list(checks)
        for name in selected:
            if name not in RUN_CHECKS:
                raise ValueError(
                    f"unknown check {name!r}; available: {', '.join(RUN_CHECKS)}"
                )
            if not _CHECK_NEEDS[name](run):
                raise MissingTraceDataError(
                    f"run traces lack the data needed by check {name!r}"
                )
    reports = [RUN_CHECKS[name](run, dataset) for name in selected]
    if checks is None and any(r.name == "stable-rate" for r in reports):
        reports.append(_check_stable_rate(run, dataset, strict=True))
    return reports


def envelope_two_stage(eta2, gamma, K, R, r0) -> float:
    """Final-loss bound 2/(eta2 * gamma^2 * K * (R - r0)) of the two-stage rate."""
    if R <= r0:
        raise ValueError(f"R={R} must exceed r0={r0}")
    return 2.0 / (eta2 * gamma**2 * K * (R - r0))


def _pos_log(x):
    return max(0.0, math.log(x)) if x > 0 else 0.0


def envelope_baseline(kind, gamma, K, R) -> float:
    """Explicit two-term baseline rate bounds for averaged-iterate local GD.

    kind="global": (2 + plog(K*R*g^2)^2)/(K*R*g^2)
                   + (2 + plog(R^(2/3)*g^(4/3))^(4/3))/(R^(2/3)*g^(4/3))
    kind="local":  (1 + plog(R)^2)/(g^2*R) + plog(R)^(4/3)/(g^(4/3)*R^(4/3))
    with plog(x) = max(0, log(x)).
    """
    if not 0 < gamma <= 1:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    if K < 1 or R < 1:
        raise ValueError("K and R must be >= 1")
    if kind == "global":
        t1_arg = K * R * gamma**2
        t2_arg = R ** (2.0 / 3.0) * gamma ** (4.0 / 3.0)
        return (2.0 + _pos_log(t1_arg) ** 2) / t1_arg + (
            2.0 + _pos_log(t2_arg) ** (4.0 / 3.0)
        ) / t2_arg
    if kind == "local":
        pl = _pos_log(R)
        return (1.0 + pl**2) / (gamma**2 * R) + pl ** (4.0 / 3.0) / (
            gamma ** (4.0 / 3.0) * R ** (4.0 / 3.0)
        )
    raise ValueError(f"kind must be 'global' or 'local', got {kind!r}")


def envelope_gf(constants: TheoryConstants, etaK, r, variant="main") -> float:
    """Loss bound of the flow analysis at round r (must exceed the threshold).

    variant="main" uses the closed-form transition time tau; variant="warm"
    uses the two-phase form with thresholds tau0/tau1 (see TheoryConstants).
    """
    if etaK != constants.etaK:
        raise ValueError(
            f"constants were built for etaK={constants.etaK}, got {etaK}"
        )
    return constants.envelope(r, variant=variant)
