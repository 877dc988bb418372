"""The three optimizers: local GD, two-stage local GD, and local gradient flow.

Every runner starts from the zero vector unless the config overrides it,
records one trace per round (round 0 included), and is bitwise deterministic
for a fixed dataset, config, and engine. Client loops always reduce in
ascending client order.

Two engines are available for local GD. The default "numpy" engine runs the
generic d-dimensional recursion and collects the per-round drift/bias data the
diagnostic checks consume. The "margin" engine is restricted to datasets with one
sample per client; it runs the same recursion in the scalar margin
representation (see _kernels) at machine speed, for warmup studies whose round
counts reach into the millions, and does not collect drift/bias data.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import losses, specialfn
from ._kernels import gf_numeric_margin, local_gd_margin
from .errors import DivergenceError

__all__ = [
    "RunConfig",
    "RoundTrace",
    "RunResult",
    "local_gd_round",
    "run_local_gd",
    "run_two_stage",
    "run_local_gf",
]

AVERAGING_MODES = ("final_iterate", "uniform_average")
ENGINES = ("numpy", "margin")
GF_METHODS = ("auto", "exact", "numeric")


@dataclass(frozen=True)
class RunConfig:
    """Round/step counts, stepsizes, and run options shared by all optimizers.

    eta drives local GD and local GF; (eta1, eta2, r0) drive the two-stage
    runner. trace_every > 1 thins the recorded traces (round 0 and the final
    round are always kept) for very long runs.
    """

    R: int
    K: int
    eta: float | None = None
    eta1: float | None = None
    eta2: float | None = None
    r0: int | None = None
    averaging: str = "final_iterate"
    H: float = 0.25
    gf_substeps: int = 1000
    gf_method: str = "auto"
    engine: str = "numpy"
    w0: tuple[float, ...] | None = None
    track_bounds: bool = True
    trace_every: int = 1
    seed: int | None = None

    def __post_init__(self):
        if self.R < 1:
            raise ValueError(f"R must be >= 1, got {self.R}")
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if self.averaging not in AVERAGING_MODES:
            raise ValueError(f"averaging must be one of {AVERAGING_MODES}")
        if self.engine not in ENGINES:
            raise ValueError(f"engine must be one of {ENGINES}")
        if self.gf_method not in GF_METHODS:
            raise ValueError(f"gf_method must be one of {GF_METHODS}")
        if self.gf_substeps < 1:
            raise ValueError(f"gf_substeps must be >= 1, got {self.gf_substeps}")
        if self.trace_every < 1:
            raise ValueError(f"trace_every must be >= 1, got {self.trace_every}")


@dataclass
class RoundTrace:
    """Measurements at one recorded round.

    drift[m]/bias[m] describe the round that STARTS here: the largest local
    iterate deviation resp. local gradient deviation of client m during it
    (None on the final trace and when not collected). The lyapunov triple
    (lyapunov, rho, a) is populated by gradient-flow runs on one-sample-per-
    client data.
    """

    r: int
    global_loss: float
    client_losses: list[float]
    grad_norm: float
    iterate_norm: float
    min_margin: float
    eta_used: float
    stage: int = 1
    lyapunov: float | None = None
    rho: list[float] | None = None
    a: list[float] | None = None
    drift: list[float] | None = None
    bias: list[float] | None = None


@dataclass
class RunResult:
    """Traces plus final (and optionally averaged) weights of one run.

    ``optimizer`` records which runner produced the result; descent-rate
    checks that only apply to the discrete-step family consult it.
    """

    traces: list[RoundTrace]
    final_weights: np.ndarray
    averaged_weights: np.ndarray | None
    config: RunConfig
    dataset_fingerprint: str
    seed: int | None = None
    optimizer: str = "local-gd"


def _initial_weights(dataset, config):
    if config.w0 is None:
        return np.zeros(dataset.d)
    w0 = np.asarray(config.w0, dtype=np.float64)
    if w0.shape != (dataset.d,):
        raise ValueError(f"w0 has shape {w0.shape}, expected ({dataset.d},)")
    return w0.copy()


def _make_trace(dataset, w, r, eta, stage=1, lyap=None):
    rep = losses.objective(dataset, w)
    trace = RoundTrace(
        r=r,
        global_loss=rep.value,
        client_losses=rep.per_client_values,
        grad_norm=rep.grad_norm,
        iterate_norm=float(np.linalg.norm(w)),
        min_margin=losses.min_margin(dataset, w),
        eta_used=eta,
        stage=stage,
    )
    if lyap is not None:
        trace.lyapunov, trace.rho, trace.a = lyap
    return trace


def _client_pass(Z, w_bar, K, eta, collect):
    """K local full-gradient steps of one client from the shared iterate.

    Returns (w_final, iterate_sum, drift, bias): iterate_sum adds up the K
    iterates w_0..w_{K-1} (for uniform averaging); drift is max_k ||w_k - w_bar||
    and bias max_k of the gradient deviation from the round start, both over
    k = 1..K (None when not collected).
    """
    n = Z.shape[0]

    def grad(w):
        return (Z.T @ losses.ell_prime(Z @ w)) / n

    g_ref = grad(w_bar) if collect else None
    w = w_bar
    iterate_sum = np.zeros_like(w_bar)
    drift = 0.0
    bias = 0.0
    g = grad(w_bar) if not collect else g_ref
    for _k in range(K):
        iterate_sum = iterate_sum + w
        w = w - eta * g
        if collect:
            drift = max(drift, float(np.linalg.norm(w - w_bar)))
        g = grad(w)
        if collect:
            bias = max(bias, float(np.linalg.norm(g - g_ref)))
    # the gradient at w_K is computed either way; only its use differs
    return w, iterate_sum, (drift if collect else None), (bias if collect else None)


def local_gd_round(dataset, w_bar, K, eta):
    """One communication round: K local steps per client, then the average.

    Returns (w_next, client_finals, drift_max) with the average reduced in
    ascending client order; drift_max is the largest deviation of any local
    iterate from w_bar during the round.
    """
    if eta <= 0:
        raise ValueError(f"eta must be positive, got {eta}")
    w_bar = np.asarray(w_bar, dtype=np.float64)
    finals = []
    drift_max = 0.0
    acc = np.zeros_like(w_bar)
    for Z in dataset.clients:
        w_final, _s, drift, _b = _client_pass(Z, w_bar, K, eta, collect=True)
        finals.append(w_final)
        drift_max = max(drift_max, drift)
        acc = acc + w_final
    return acc / len(dataset.clients), finals, drift_max


def _traced(r, R, every):
    return r % every == 0 or r == R


def run_local_gd(dataset, config: RunConfig) -> RunResult:
    """Local GD for R rounds from w0 (zero by default), with full tracing.

    With averaging="uniform_average" the result also carries the uniform
    average of all K*R client-averaged local iterates.
    """
    if config.eta is None:
        raise ValueError("run_local_gd requires config.eta")
    if config.eta <= 0:
        raise ValueError(f"eta must be positive, got {config.eta}")
    if config.engine == "margin":
        return _run_margin_engine(dataset, config)
    eta = config.eta
    M = dataset.M
    w = _initial_weights(dataset, config)
    uniform = config.averaging == "uniform_average"
    avg_acc = np.zeros_like(w) if uniform else None
    traces = [_make_trace(dataset, w, 0, eta)]
    for r in range(config.R):
        acc = np.zeros_like(w)
        round_iterate_sum = np.zeros_like(w) if uniform else None
        drift = []
        bias = []
        for Z in dataset.clients:
            w_final, it_sum, dr, bi = _client_pass(Z, w, config.K, eta, config.track_bounds)
            acc = acc + w_final
            if uniform:
                round_iterate_sum = round_iterate_sum + it_sum
            if config.track_bounds:
                drift.append(dr)
                bias.append(bi)
        if config.track_bounds and traces and traces[-1].r == r:
            traces[-1].drift = drift
            traces[-1].bias = bias
        w_next = acc / M
        if uniform:
            avg_acc = avg_acc + round_iterate_sum / M
        if not np.all(np.isfinite(w_next)):
            raise DivergenceError(r + 1, traces)
        w = w_next
        if _traced(r + 1, config.R, config.trace_every):
            traces.append(_make_trace(dataset, w, r + 1, eta))
    averaged = avg_acc / (config.K * config.R) if uniform else None
    return RunResult(
        traces=traces,
        final_weights=w,
        averaged_weights=averaged,
        config=config,
        dataset_fingerprint=dataset.fingerprint(),
        seed=config.seed,
    )


def _margin_geometry(dataset):
    if any(Z.shape[0] != 1 for Z in dataset.clients):
        raise ValueError("margin-space runs need exactly one sample per client")
    points = np.array([Z[0] for Z in dataset.clients])
    gammas = np.linalg.norm(points, axis=1)
    if np.any(gammas == 0):
        raise ValueError("margin-space runs need nonzero samples")
    directions = points / gammas[:, None]
    return gammas, directions


def _run_margin_engine(dataset, config: RunConfig) -> RunResult:
    eta = config.eta
    M = dataset.M
    gammas, U = _margin_geometry(dataset)
    w0 = _initial_weights(dataset, config)
    a0 = U @ w0
    G = U @ U.T
    rounds_traced, _a_hist, C_hist, C_sum, S_local = local_gd_margin(
        gammas, G, a0, eta, config.K, config.R, stride=config.trace_every
    )
    traces = []
    for idx, r in enumerate(rounds_traced):
        w_r = w0 + (U.T @ C_hist[idx]) / M
        if not np.all(np.isfinite(w_r)):
            raise DivergenceError(int(r), traces)
        traces.append(_make_trace(dataset, w_r, int(r), eta))
    final = w0 + (U.T @ C_hist[-1]) / M
    averaged = None
    if config.averaging == "uniform_average":
        coef = (C_sum + S_local / config.K) / config.R
        averaged = w0 + (U.T @ coef) / M
    return RunResult(
        traces=traces,
        final_weights=final,
        averaged_weights=averaged,
        config=config,
        dataset_fingerprint=dataset.fingerprint(),
        seed=config.seed,
    )


def run_two_stage(dataset, config: RunConfig) -> RunResult:
    """Warmup at eta1 for r0 rounds, restart at eta2, return the last iterate.

    Stage 1 runs local GD with uniform iterate averaging and hands its average
    to stage 2 as the initial point; stage 2's final iterate is the output.
    Traces carry stage labels, switching at round r0.
    """
    if config.eta1 is None or config.eta2 is None or config.r0 is None:
        raise ValueError("run_two_stage requires config.eta1, eta2 and r0")
    if not 0 <= config.r0 <= config.R:
        raise ValueError(f"r0 must lie in [0, R], got {config.r0}")
    if config.eta2 > 4.0:
        warnings.warn(
            f"eta2 = {config.eta2} exceeds 4 = 1/H; the two-stage rate "
            "guarantee does not apply",
            stacklevel=2,
        )
    r0, R = config.r0, config.R
    w0 = _initial_weights(dataset, config)
    traces: list[RoundTrace] = []
    if r0 > 0:
        stage1_cfg = replace(
            config, R=r0, eta=config.eta1, averaging="uniform_average", w0=tuple(w0)
        )
        try:
            res1 = run_local_gd(dataset, stage1_cfg)
        except DivergenceError as err:
            raise DivergenceError(err.round_index, err.traces) from None
        w_hat1 = res1.averaged_weights
        traces.extend(t for t in res1.traces if t.r < r0)
    else:
        w_hat1 = w0
    for t in traces:
        t.stage = 1

    if r0 < R:
        stage2_cfg = replace(
            config,
            R=R - r0,
            eta=config.eta2,
            averaging="final_iterate",
            w0=tuple(w_hat1),
        )
        try:
            res2 = run_local_gd(dataset, stage2_cfg)
        except DivergenceError as err:
            for t in err.traces:
                t.r += r0
                t.stage = 2
            raise DivergenceError(r0 + err.round_index, traces + err.traces) from None
        for t in res2.traces:
            t.r += r0
            t.stage = 2
        traces.extend(res2.traces)
        final = res2.final_weights
    else:
        final = np.asarray(w_hat1, dtype=np.float64)
        traces.append(_make_trace(dataset, final, r0, config.eta2, stage=2))
    return RunResult(
        traces=traces,
        final_weights=final,
        averaged_weights=final.copy(),
        config=config,
        dataset_fingerprint=dataset.fingerprint(),
        seed=config.seed,
        optimizer="two-stage",
    )


def _lyap_fields(gammas, etaK, a):
    rho = [specialfn.surrogate_loss(g, etaK, ai) for g, ai in zip(gammas, a)]
    return (max(rho), rho, list(map(float, a)))


def _rk4_client_flow(Z, w_start, eta, t_total, substeps):
    n = Z.shape[0]

    def f(w):
        return -eta * (Z.T @ losses.ell_prime(Z @ w)) / n

    h = t_total / substeps
    w = w_start
    for _ in range(substeps):
        k1 = f(w)
        k2 = f(w + 0.5 * h * k1)
        k3 = f(w + 0.5 * h * k2)
        k4 = f(w + h * k3)
        w = w + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return w


def run_local_gf(dataset, config: RunConfig) -> RunResult:
    """Local gradient flow: each client follows its exact loss flow for K time
    units per round, then the averages are exchanged.

    With one sample per client the per-round flow has a closed form in the
    margin representation and the run is exact (gf_method="auto"/"exact");
    otherwise each flow is integrated by classical fixed-step RK4 with
    config.gf_substeps steps per round. Lyapunov trace fields are populated
    whenever every client has a single sample.
    """
    if config.eta is None:
        raise ValueError("run_local_gf requires config.eta")
    if config.eta <= 0:
        raise ValueError(f"eta must be positive, got {config.eta}")
    eta = config.eta
    n1 = all(Z.shape[0] == 1 for Z in dataset.clients)
    method = config.gf_method
    if method == "auto":
        method = "exact" if n1 else "numeric"
    if method == "exact" and not n1:
        raise ValueError("exact local gradient flow needs one sample per client")

    M = dataset.M
    etaK = eta * config.K
    w = _initial_weights(dataset, config)
    traces: list[RoundTrace] = []

    if method == "exact":
        gammas, U = _margin_geometry(dataset)
        state = specialfn.make_gf_state(gammas, U, etaK, a=U @ w)
        traces.append(_make_trace(dataset, w, 0, eta, lyap=(state.lyapunov, list(map(float, state.rho)), list(map(float, state.a)))))
        for r in range(config.R):
            w_next = w + (U.T @ state.rho) / M
            state = specialfn.gf_round(state, etaK)
            if not np.all(np.isfinite(w_next)):
                raise DivergenceError(r + 1, traces)
            w = w_next
            if _traced(r + 1, config.R, config.trace_every):
                lyap = (state.lyapunov, list(map(float, state.rho)), list(map(float, state.a)))
                traces.append(_make_trace(dataset, w, r + 1, eta, lyap=lyap))
        final = w
    elif n1:
        gammas, U = _margin_geometry(dataset)
        G = U @ U.T
        a0 = U @ w
        rounds_traced, a_hist, C_hist, err_max = gf_numeric_margin(
            gammas, G, a0, eta, config.K, config.R,
            config.gf_substeps, probe=True, stride=config.trace_every,
        )
        if err_max > 1e-6:
            warnings.warn(
                f"flow integration error estimate {err_max:.3e} exceeds 1e-6; "
                "increase gf_substeps",
                stacklevel=2,
            )
        for idx, r in enumerate(rounds_traced):
            w_r = w + (U.T @ C_hist[idx]) / M
            if not np.all(np.isfinite(w_r)):
                raise DivergenceError(int(r), traces)
            traces.append(
                _make_trace(dataset, w_r, int(r), eta, lyap=_lyap_fields(gammas, etaK, a_hist[idx]))
            )
        final = w + (U.T @ C_hist[-1]) / M
    else:
        traces.append(_make_trace(dataset, w, 0, eta))
        half = max(1, config.gf_substeps // 2)
        err_max = 0.0
        for r in range(config.R):
            acc = np.zeros_like(w)
            for Z in dataset.clients:
                w_end = _rk4_client_flow(Z, w, eta, float(config.K), config.gf_substeps)
                w_half = _rk4_client_flow(Z, w, eta, float(config.K), half)
                err_max = max(err_max, float(np.max(np.abs(w_end - w_half))))
                acc = acc + w_end
            w_next = acc / M
            if not np.all(np.isfinite(w_next)):
                raise DivergenceError(r + 1, traces)
            w = w_next
            if _traced(r + 1, config.R, config.trace_every):
                traces.append(_make_trace(dataset, w, r + 1, eta))
        if err_max > 1e-6:
            warnings.warn(
                f"flow integration error estimate {err_max:.3e} exceeds 1e-6; "
                "increase gf_substeps",
                stacklevel=2,
            )
        final = w
    return RunResult(
        traces=traces,
        final_weights=final,
        averaged_weights=None,
        config=config,
        dataset_fingerprint=dataset.fingerprint(),
        seed=config.seed,
        optimizer="local-gf",
    )
