"""Data-driven unit weights from a penalized pre-period balance problem.

The weights minimize, over the pre block t <= T0,

    zeta^2 (T0/n^2) ||w||^2
      + sum_t ((1/n) sum_i w_i Y_it - eta_psi^y' psi_t - eta_z^y Z_t)^2 / s2_y
      + sum_t ((1/n) sum_i w_i W_it - eta_psi^w' psi_t - eta_z^w Z_t)^2 / s2_w

subject to (1/n) sum_i w_i = 0 and (1/n) sum_i w_i D_i = 1, where s2_y and
s2_w are the pre-period noise scales. The nuisance coefficients eta are
profiled out analytically: with M the annihilator of span(Psi, Z) over the
pre block, the problem reduces to minimizing w' Q w with

    Q = zeta^2 (T0/n^2) I + (Y0 M Y0' / s2_y + W0 M W0' / s2_w) / n^2

over the two affine constraints, a symmetric KKT system of size n + 2.
As zeta -> infinity the solution approaches (D_i - mean(D)) / var(D), the
aggregation weights of the fixed-effects TSLS benchmark.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import (
    CollinearInstrumentPre,
    DataError,
    DegenerateScale,
    InfeasibleConstraints,
    MaxIterations,
    RankDeficientPsi,
    SingularKKT,
)
from .panel import (
    AggregateData,
    BalancedPanel,
    ExposureVector,
    SampleSplit,
    default_t0,
    demean_two_way,
    scaling_factors,
)
from .tsls import tsls_weights

__all__ = [
    "WeightConfig",
    "WeightSolution",
    "BalanceReport",
    "default_zeta",
    "solve_weights",
    "solve_weights_constrained",
    "balance_diagnostics",
]


@dataclass(frozen=True)
class WeightConfig:
    """Solver configuration; ``None`` fields resolve to data-driven defaults."""

    zeta: float | None = None
    t0: int | None = None
    sign_constraint: bool = False
    covariate_constraints: np.ndarray | None = None

    def __post_init__(self):
        if self.zeta is not None and not (math.isfinite(self.zeta) and self.zeta > 0):
            raise DataError(f"zeta must be a positive finite number, got {self.zeta}")
        if self.t0 is not None and self.t0 < 1:
            raise DataError(f"t0 must be >= 1, got {self.t0}")
        if self.covariate_constraints is not None:
            X = np.asarray(self.covariate_constraints, dtype=float)
            if X.ndim == 1:
                X = X[:, None]
            if X.ndim != 2 or X.shape[1] < 1:
                raise DataError(f"covariate constraints must be (n, q), got shape {X.shape}")
            if not np.all(np.isfinite(X)):
                raise DataError("covariate constraints contain non-finite entries")
            object.__setattr__(self, "covariate_constraints", X)


@dataclass(frozen=True)
class WeightSolution:
    """Solved weights with profiled nuisance fits and balance diagnostics."""

    omega: np.ndarray
    eta_y: np.ndarray
    eta_w: np.ndarray
    objective: float
    balance_y: np.ndarray
    balance_w: np.ndarray
    zeta: float
    t0: int
    sigma2_y: float
    sigma2_w: float
    active_set: tuple[int, ...]
    iterations: int
    zeta_retried: bool
    kkt_residual: float
    benchmark_rms_y: float
    benchmark_rms_w: float


@dataclass(frozen=True)
class BalanceReport:
    """Pre-period fit quality of the solved weights against the ridge-free
    TSLS benchmark weights."""

    rms_y: float
    rms_w: float
    benchmark_rms_y: float
    benchmark_rms_w: float
    ratio_y: float
    ratio_w: float
    balance_y: np.ndarray
    balance_w: np.ndarray


def default_zeta(panel: BalancedPanel) -> float:
    """Ridge level from the middle of the noise spectrum.

    Two-way demean Y and W over all periods, take the floor(T/2)-th largest
    singular value of each, and divide the smaller one by sqrt(n + T).
    """
    k = panel.T // 2
    n, T = panel.n, panel.T
    mids = []
    for M, name in ((panel.Y, "Y"), (panel.W, "W")):
        s = np.linalg.svd(demean_two_way(M), compute_uv=False)
        if k > s.size or s[k - 1] <= s[0] * max(n, T) * np.finfo(float).eps:
            raise DegenerateScale(f"singular value {k} of demeaned {name} is zero")
        mids.append(s[k - 1])
    return float(min(mids)) / math.sqrt(n + T)


def _pre_blocks(panel: BalancedPanel, agg: AggregateData, t0: int):
    """Slice and validate the pre-period pieces of the balance problem."""
    split = SampleSplit(T0=t0, T1=panel.T - t0)
    split.validate_for(agg.p)
    Psi0 = agg.Psi[:t0]
    Z0 = agg.Z[:t0]
    X = np.column_stack([Psi0, Z0])
    if np.linalg.matrix_rank(X) < X.shape[1]:
        if np.linalg.matrix_rank(Psi0) < Psi0.shape[1]:
            raise RankDeficientPsi("Psi is rank deficient over the pre-period")
        raise CollinearInstrumentPre("Z lies in the span of Psi over the pre-period")
    q, _ = np.linalg.qr(X)
    return panel.Y[:, :t0], panel.W[:, :t0], X, q


def _profiled_hessian(panel, agg, t0, zeta):
    """Q of the reduced problem plus the pieces needed to recover eta."""
    Y0, W0, X, qx = _pre_blocks(panel, agg, t0)
    s2y, s2w = scaling_factors(panel, t0)
    n = panel.n
    Ym = Y0 - (Y0 @ qx) @ qx.T
    Wm = W0 - (W0 @ qx) @ qx.T
    Q = (Ym @ Ym.T / s2y + Wm @ Wm.T / s2w) / n**2
    Q[np.diag_indices(n)] += zeta**2 * t0 / n**2
    return Q, Y0, W0, X, s2y, s2w


def _constraint_rows(panel: BalancedPanel, exposure: ExposureVector, config: WeightConfig):
    """Equality constraint matrix E and right-hand side b."""
    n = panel.n
    rows = [np.ones(n) / n, exposure.D / n]
    b = [0.0, 1.0]
    if config.covariate_constraints is not None:
        Xc = config.covariate_constraints
        if Xc.shape[0] != n:
            raise DataError(f"covariate constraints must have {n} rows, got {Xc.shape[0]}")
        if Xc.shape[1] + 2 > n:
            raise DataError("too many constraints for the number of units")
        rows.extend(Xc[:, j] / n for j in range(Xc.shape[1]))
        b.extend([0.0] * Xc.shape[1])
    E = np.vstack(rows)
    b = np.array(b)
    rank_e = np.linalg.matrix_rank(E)
    if rank_e < E.shape[0]:
        if np.linalg.matrix_rank(np.column_stack([E, b])) > rank_e:
            raise InfeasibleConstraints("equality constraints are inconsistent")
        # consistent but redundant rows: keep an independent subset
        _, _, piv = scipy.linalg.qr(E.T, pivoting=True)
        keep = np.sort(piv[:rank_e])
        E, b = E[keep], b[keep]
    return E, b


def _solve_kkt(Q, E, b, working: list[int]):
    """Solve the equality KKT system with extra pinned coordinates.

    Returns (w, lam, nu, residual) where lam are multipliers of the rows of
    E and nu those of the pinned w_i = 0 constraints.
    """
    n = Q.shape[0]
    q0 = float(np.max(np.diag(Q)))
    sel = np.zeros((len(working), n))
    for r, i in enumerate(working):
        sel[r, i] = 1.0
    A = np.vstack([E, sel])
    m = A.shape[0]
    K = np.zeros((n + m, n + m))
    K[:n, :n] = 2.0 * Q / q0
    K[:n, n:] = A.T
    K[n:, :n] = A
    rhs = np.concatenate([np.zeros(n), b, np.zeros(len(working))])
    try:
        sol = scipy.linalg.solve(K, rhs, assume_a="sym")
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise SingularKKT(f"KKT solve failed: {exc}") from None
    resid = float(np.linalg.norm(K @ sol - rhs))
    scale = float(np.linalg.norm(rhs)) + float(np.linalg.norm(K, ord=np.inf)) * float(
        np.linalg.norm(sol)
    )
    if not np.all(np.isfinite(sol)) or resid > 1e-8 * max(scale, 1.0):
        raise SingularKKT("KKT system is numerically singular")
    w = sol[:n]
    # stationarity in the assembled system is 2Qw + A'm = 0, so the
    # Lagrange multipliers of the minimization are -m (times the Q scaling)
    mult = -sol[n:] * q0
    return w, mult[: E.shape[0]], mult[E.shape[0] :], resid


def _finish(panel, exposure, agg, config, t0, zeta, w, active, iters, retried, kkt_res):
    """Recover eta by regression of the aggregated pre series and package."""
    Y0, W0, X, _ = _pre_blocks(panel, agg, t0)
    s2y, s2w = scaling_factors(panel, t0)
    n = panel.n
    a_y = Y0.T @ w / n
    a_w = W0.T @ w / n
    eta_y, *_ = np.linalg.lstsq(X, a_y, rcond=None)
    eta_w, *_ = np.linalg.lstsq(X, a_w, rcond=None)
    bal_y = a_y - X @ eta_y
    bal_w = a_w - X @ eta_w
    objective = (
        zeta**2 * t0 / n**2 * float(w @ w)
        + float(bal_y @ bal_y) / s2y
        + float(bal_w @ bal_w) / s2w
    )
    bench = tsls_weights(exposure)
    coef_by, *_ = np.linalg.lstsq(X, Y0.T @ bench / n, rcond=None)
    coef_bw, *_ = np.linalg.lstsq(X, W0.T @ bench / n, rcond=None)
    bench_y = Y0.T @ bench / n - X @ coef_by
    bench_w = W0.T @ bench / n - X @ coef_bw
    return WeightSolution(
        omega=w,
        eta_y=eta_y,
        eta_w=eta_w,
        objective=objective,
        balance_y=bal_y,
        balance_w=bal_w,
        zeta=zeta,
        t0=t0,
        sigma2_y=s2y,
        sigma2_w=s2w,
        active_set=tuple(sorted(active)),
        iterations=iters,
        zeta_retried=retried,
        kkt_residual=kkt_res,
        benchmark_rms_y=float(np.sqrt(np.mean(bench_y**2))),
        benchmark_rms_w=float(np.sqrt(np.mean(bench_w**2))),
    )


def _resolve(panel: BalancedPanel, config: WeightConfig | None) -> tuple[WeightConfig, int, float]:
    config = config or WeightConfig()
    t0 = config.t0 if config.t0 is not None else default_t0(panel.T)
    if not 1 <= t0 < panel.T:
        raise DataError(f"t0={t0} outside 1..{panel.T - 1}")
    zeta = config.zeta if config.zeta is not None else default_zeta(panel)
    return config, t0, zeta


def solve_weights(
    panel: BalancedPanel,
    exposure: ExposureVector,
    agg: AggregateData,
    config: WeightConfig | None = None,
) -> WeightSolution:
    """Solve the penalized balance problem on the pre block.

    Delegates to :func:`solve_weights_constrained` when the configuration
    carries a sign constraint or covariate constraints. A singular KKT
    system is retried once with zeta scaled up tenfold (recorded on the
    solution) before giving up.
    """
    config, t0, zeta = _resolve(panel, config)
    if config.sign_constraint or config.covariate_constraints is not None:
        return solve_weights_constrained(panel, exposure, agg, config)
    if exposure.n != panel.n:
        raise DataError(f"exposure length {exposure.n} does not match n={panel.n}")
    if agg.T != panel.T:
        raise DataError(f"aggregate length {agg.T} does not match T={panel.T}")
    E, b = _constraint_rows(panel, exposure, config)
    retried = False
    for attempt in range(2):
        Q, *_ = _profiled_hessian(panel, agg, t0, zeta)
        try:
            w, _, _, kkt_res = _solve_kkt(Q, E, b, [])
            break
        except SingularKKT:
            if attempt == 1:
                raise
            zeta *= 10.0
            retried = True
    return _finish(panel, exposure, agg, config, t0, zeta, w, (), 0, retried, kkt_res)


def solve_weights_constrained(
    panel: BalancedPanel,
    exposure: ExposureVector,
    agg: AggregateData,
    config: WeightConfig | None = None,
) -> WeightSolution:
    """Variant with sign constraints omega_i (D_i - mean(D)) >= 0 and, when
    configured, covariate balance equalities (1/n) sum_i w_i X_i = 0.

    Primal-dual active-set iteration: pin violating coordinates at zero,
    release pinned coordinates whose multiplier has the wrong sign, resolve
    the equality KKT system. The cap is 10 n iterations; on hitting it the
    best feasible iterate found is attached to the error.
    """
    config, t0, zeta = _resolve(panel, config)
    if exposure.n != panel.n:
        raise DataError(f"exposure length {exposure.n} does not match n={panel.n}")
    if agg.T != panel.T:
        raise DataError(f"aggregate length {agg.T} does not match T={panel.T}")
    E, b = _constraint_rows(panel, exposure, config)
    n = panel.n
    d = exposure.D - exposure.D.mean()
    signs = np.sign(d) * (np.abs(d) > 1e-14 * max(np.ptp(exposure.D), np.finfo(float).tiny))
    if not config.sign_constraint:
        signs = np.zeros(n)
    inequality = [i for i in range(n) if signs[i] != 0.0]

    retried = False
    Q = None
    for attempt in range(2):
        Q, *_ = _profiled_hessian(panel, agg, t0, zeta)
        try:
            _solve_kkt(Q, E, b, [])
            break
        except SingularKKT:
            if attempt == 1:
                raise
            zeta *= 10.0
            retried = True

    working: list[int] = []
    seen: set[frozenset] = set()
    single_mode = False
    best: tuple[float, np.ndarray] | None = None
    cap = 10 * n
    for it in range(cap):
        key = frozenset(working)
        if key in seen:
            single_mode = True
        seen.add(key)
        try:
            w, lam, nu, kkt_res = _solve_kkt(Q, E, b, working)
        except SingularKKT:
            if not working:
                raise
            working.pop()
            continue
        w_scale = max(1.0, float(np.abs(w).max()))
        viol = [j for j in inequality if j not in working and signs[j] * w[j] < -1e-12 * w_scale]
        mu = {i: signs[i] * nu[r] for r, i in enumerate(working)}
        nu_scale = max(1.0, float(np.abs(nu).max()) if len(nu) else 0.0)
        neg = [i for i in working if mu[i] < -1e-12 * nu_scale]
        if not viol:
            obj = float(w @ Q @ w)
            if best is None or obj < best[0]:
                best = (obj, w.copy())
            if not neg:
                return _finish(
                    panel, exposure, agg, config, t0, zeta, w, tuple(working), it + 1, retried, kkt_res
                )
        if single_mode:
            if neg:
                working.remove(min(neg, key=lambda i: mu[i]))
            else:
                working.append(min(viol, key=lambda j: signs[j] * w[j]))
        else:
            working = [i for i in working if i not in neg] + viol
    raise MaxIterations(
        f"active set did not settle within {cap} iterations",
        best=None if best is None else best[1],
    )


def balance_diagnostics(solution: WeightSolution) -> BalanceReport:
    """Pre-period residual summaries and the ratio to the TSLS benchmark."""

    def _ratio(rms: float, bench: float) -> float:
        tiny = np.finfo(float).tiny
        if bench <= tiny:
            return 1.0 if rms <= tiny else float("inf")
        return rms / bench

    rms_y = float(np.sqrt(np.mean(solution.balance_y**2)))
    rms_w = float(np.sqrt(np.mean(solution.balance_w**2)))
    return BalanceReport(
        rms_y=rms_y,
        rms_w=rms_w,
        benchmark_rms_y=solution.benchmark_rms_y,
        benchmark_rms_w=solution.benchmark_rms_w,
        ratio_y=_ratio(rms_y, solution.benchmark_rms_y),
        ratio_w=_ratio(rms_w, solution.benchmark_rms_w),
        balance_y=solution.balance_y,
        balance_w=solution.balance_w,
    )
