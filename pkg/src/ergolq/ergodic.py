"""Long-run average cost: burn-in, estimators and optimality checks.

The ergodic cost of a feedback law is estimated as the expected running
cost over one period started from the law's random-periodic steady state.
Burn-in length is derived from the certified mean-square decay rate (ten
e-foldings by default) and the reached state is audited by comparing the
last two period-boundary second moments at paired-path resolution.

The optimal law is assembled from the Riccati gain plus the affine offset
solved from the vector equation on the same bundle.  Its predicted average
cost admits closed-form verification hooks: the value formula integrates
solved quantities only, and the completion-of-square identity expresses
any other law's cost as the optimal value plus a quadratic control
penalty, which is checked pathwise on common noise.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

from .bsde_engine import (
    BsdeGridSolution,
    RegressionBasis,
    solution_coeff,
    solve_vector_bsde,
)
from .coefficients import (
    CoefficientFn,
    FeedbackLaw,
    PeriodicCoefficientSet,
    cf_add,
    cf_matmul,
    cf_rinv_mul,
    cf_scale,
    cf_transpose,
    perturbed_feedback,
)
from .riccati import RiccatiSolution, stabilizer_check
from .sde_engine import (
    PathBundle,
    derive_seed,
    mean_se,
    stream_closed_loop,
)


class BurnInError(RuntimeError):
    """Raised when the reached state fails the stationarity audit."""


def running_cost_values(
    coeffs: PeriodicCoefficientSet, phase: float, prefix, x: np.ndarray, u: np.ndarray
) -> np.ndarray:
    """Per-path running cost x'Qx + 2u'Sx + u'Ru + 2q'x + 2rho'u."""
    q = coeffs.Q.eval_batch(phase, prefix)
    s = coeffs.S.eval_batch(phase, prefix)
    r = coeffs.R.eval_batch(phase, prefix)
    qlin = coeffs.q.eval_batch(phase, prefix)
    rho = coeffs.rho.eval_batch(phase, prefix)
    xc = x[..., None]
    uc = u[..., None]
    qx = np.matmul(q, xc)[..., 0]
    sx = np.matmul(s, xc)[..., 0]
    ru = np.matmul(r, uc)[..., 0]
    out = np.einsum("pi,pi->p", x, qx)
    out += 2.0 * np.einsum("pi,pi->p", u, sx)
    out += np.einsum("pi,pi->p", u, ru)
    out += 2.0 * np.sum(np.broadcast_to(qlin, x.shape) * x, axis=-1)
    out += 2.0 * np.sum(np.broadcast_to(rho, u.shape) * u, axis=-1)
    return out


def _control_values(feedback: FeedbackLaw, phase, prefix, x: np.ndarray) -> np.ndarray:
    theta = feedback.Theta.eval_batch(phase, prefix)
    vval = feedback.v.eval_batch(phase, prefix)
    return np.matmul(theta, x[..., None])[..., 0] + np.broadcast_to(
        vval, x.shape[:-1] + (theta.shape[-2],)
    )


@dataclass
class CostEstimate:
    """Normalized (per unit time) cost average with its sampling error."""

    value: float
    se: float
    n_paths: int
    n_overflow: int
    duration: float
    checkpoints: Dict[int, tuple] = field(default_factory=dict)
    per_path: Optional[np.ndarray] = None


@dataclass(eq=False)
class RandomPeriodicState:
    """Path ensemble at a period boundary after closed-loop burn-in."""

    samples: np.ndarray
    tau: float
    steps_per_period: int
    k_burn: int
    seed: int
    feedback_token: str
    moment: float
    moment_se: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.samples.shape[0]


def burn_in_state(
    coeffs: PeriodicCoefficientSet,
    feedback: FeedbackLaw,
    seed: int,
    n_paths: int,
    steps_per_period: int = 64,
    x0=None,
    lambda_hat: Optional[float] = None,
    target_efold: float = 10.0,
    max_periods: int = 400,
    antithetic: bool = False,
) -> RandomPeriodicState:
    """Run the closed loop to its random-periodic steady state.

    The number of discarded periods is target_efold / (lambda_hat tau),
    with the decay rate measured on auxiliary paths when not supplied.
    The last two period boundaries must agree in second moment within
    three paired standard errors (plus a small absolute slack); otherwise
    a BurnInError suggests doubling the burn-in.
    """
    if lambda_hat is None:
        report = stabilizer_check(
            coeffs,
            feedback,
            derive_seed(seed, "burn-decay"),
            n_paths=min(n_paths, 4000),
            steps_per_period=steps_per_period,
        )
        if not report.stable:
            raise BurnInError(
                f"law is not mean-square stable (decay {report.lambda_hat:.4f}, "
                f"95% low {report.ci_low:.4f}); no steady state to reach"
            )
        lambda_hat = report.lambda_hat
    k_burn = int(np.clip(math.ceil(target_efold / (lambda_hat * coeffs.tau)), 2, max_periods))

    bundle = PathBundle.generate(
        seed, n_paths, steps_per_period, k_burn, tau=coeffs.tau, antithetic=antithetic
    )
    sp = steps_per_period
    n_steps = bundle.n_steps
    boundary_sq = np.full((n_paths, k_burn + 1), np.nan)
    final = np.empty((n_paths, coeffs.n))

    def visit(k, phase, prefix, x):
        if k % sp == 0:
            boundary_sq[:, k // sp] = np.einsum("pi,pi->p", x, x)
        if k == n_steps:
            final[:] = x

    overflow = stream_closed_loop(
        coeffs, feedback, np.zeros(coeffs.n) if x0 is None else x0, bundle, visit
    )
    if overflow.any():
        raise BurnInError(
            f"{int(overflow.sum())} of {n_paths} paths overflowed during burn-in; "
            "the law does not look stabilizing"
        )

    diff = boundary_sq[:, k_burn] - boundary_sq[:, k_burn - 1]
    d_mean, d_se = mean_se(diff, antithetic)
    m_mean, m_se = mean_se(boundary_sq[:, k_burn], antithetic)
    slack = 3.0 * float(d_se) + 1e-3 * max(1.0, float(m_mean))
    if abs(float(d_mean)) > slack:
        raise BurnInError(
            f"second moment still drifting after {k_burn} periods "
            f"(change {float(d_mean):.4e} vs allowance {slack:.4e}); "
            f"retry with target_efold={2 * target_efold:g}"
        )
    return RandomPeriodicState(
        samples=final,
        tau=coeffs.tau,
        steps_per_period=steps_per_period,
        k_burn=k_burn,
        seed=seed,
        feedback_token=feedback.token,
        moment=float(m_mean),
        moment_se=float(m_se),
        diagnostics={
            "lambda_hat": float(lambda_hat),
            "moment_change": float(d_mean),
            "moment_change_se": float(d_se),
            "antithetic": antithetic,
        },
    )


def _accumulate_cost(coeffs, feedback, x0, bundle, start_node=0, extra_integrand=None):
    """Stream the closed loop and trapezoid-integrate the running cost.

    Returns (cost integrals from start_node to the end, per path;
    extra integrals when an extra integrand is given; overflow mask).
    The extra integrand is called as extra(phase, prefix, x, u).
    """
    n_paths = bundle.n_paths
    n_steps = bundle.n_steps
    dt = bundle.dt
    acc = np.zeros(n_paths)
    extra_acc = np.zeros(n_paths) if extra_integrand is not None else None

    def visit(k, phase, prefix, x):
        if k < start_node:
            return
        u = _control_values(feedback, phase, prefix, x)
        weight = 0.5 * dt if k in (start_node, n_steps) else dt
        with np.errstate(invalid="ignore"):
            f = running_cost_values(coeffs, phase, prefix, x, u)
            np.add(acc, weight * f, out=acc)
            if extra_acc is not None:
                np.add(extra_acc, weight * extra_integrand(phase, prefix, x, u), out=extra_acc)

    overflow = stream_closed_loop(coeffs, feedback, x0, bundle, visit)
    return acc, extra_acc, overflow


def single_period_cost(
    coeffs: PeriodicCoefficientSet,
    feedback: FeedbackLaw,
    state: RandomPeriodicState,
    tag: str = "cost-period",
    keep_per_path: bool = False,
) -> CostEstimate:
    """Ergodic cost estimate: one period of running cost from steady state.

    Fresh increments are drawn for the cost period (independent of the
    burn-in noise), which is exactly the one-step transition of the
    period-to-period chain started from its steady state.
    """
    if state.feedback_token != feedback.token:
        raise ValueError("state was burned in under a different feedback law")
    bundle = PathBundle.generate(
        derive_seed(state.seed, tag),
        state.n_paths,
        state.steps_per_period,
        1,
        tau=coeffs.tau,
    )
    acc, _, overflow = _accumulate_cost(coeffs, feedback, state.samples, bundle)
    good = ~overflow
    per_path = acc[good] / coeffs.tau
    mean, se = mean_se(per_path)
    return CostEstimate(
        value=float(mean),
        se=float(se),
        n_paths=state.n_paths,
        n_overflow=int(overflow.sum()),
        duration=coeffs.tau,
        per_path=per_path if keep_per_path else None,
    )


def finite_horizon_cost(
    coeffs: PeriodicCoefficientSet,
    feedback: FeedbackLaw,
    x0,
    bundle: PathBundle,
    checkpoint_periods: Optional[Sequence[int]] = None,
) -> CostEstimate:
    """Average cost over the bundle horizon from a fixed start.

    checkpoint_periods asks for intermediate normalized averages after the
    given period counts; all checkpoints come from the same paths, so their
    differences are paired.
    """
    sp = bundle.steps_per_period
    n_paths, n_steps, dt = bundle.n_paths, bundle.n_steps, bundle.dt
    checkpoints = sorted(set(checkpoint_periods or []) | {bundle.n_periods})
    for kper in checkpoints:
        if not 1 <= kper <= bundle.n_periods:
            raise ValueError(f"checkpoint {kper} outside 1..{bundle.n_periods}")
    acc = np.zeros(n_paths)
    f0 = np.zeros(n_paths)
    cp_values: Dict[int, np.ndarray] = {}

    def visit(k, phase, prefix, x):
        u = _control_values(feedback, phase, prefix, x)
        with np.errstate(invalid="ignore"):
            f = running_cost_values(coeffs, phase, prefix, x, u)
            if k == 0:
                f0[:] = f
            np.add(acc, dt * f, out=acc)
            if k % sp == 0 and k // sp in checkpoints:
                horizon = k * dt
                cp_values[k // sp] = (acc - 0.5 * dt * (f0 + f)) / horizon

    overflow = stream_closed_loop(coeffs, feedback, x0, bundle, visit)
    good = ~overflow
    cp_stats = {}
    for kper, vals in cp_values.items():
        finite = vals[np.isfinite(vals)]
        m, s = mean_se(finite)
        cp_stats[kper] = (float(m), float(s))
    last = cp_values[bundle.n_periods]
    finite_last = last[good & np.isfinite(last)]
    mean, se = mean_se(finite_last)
    return CostEstimate(
        value=float(mean),
        se=float(se),
        n_paths=n_paths,
        n_overflow=int(overflow.sum()),
        duration=bundle.duration,
        checkpoints=cp_stats,
        per_path=last,
    )


# ---------------------------------------------------------------------------
# optimal control assembly


@dataclass(eq=False)
class OptimalControl:
    """The Riccati gain with its affine offset and the backing solutions."""

    coeffs: PeriodicCoefficientSet
    riccati: RiccatiSolution
    eta_solution: BsdeGridSolution
    eta_fn: CoefficientFn
    v_fn: CoefficientFn
    feedback: FeedbackLaw

    @property
    def theta(self) -> CoefficientFn:
        return self.riccati.theta


def optimal_feedback(
    riccati: RiccatiSolution,
    bundle: PathBundle,
    tol: float = 1e-6,
    basis: Optional[RegressionBasis] = None,
) -> OptimalControl:
    """Solve the affine offset on the Riccati solve bundle and assemble u*.

    The vector equation runs under the optimal closed-loop drift with
    inhomogeneity q + Theta' rho; the offset is v = -R^{-1}(B' eta + rho).
    """
    coeffs = riccati.coeffs
    theta = riccati.theta
    a_cl = cf_add(coeffs.A, cf_matmul(coeffs.B, theta))
    lam = cf_add(coeffs.q, cf_matmul(cf_transpose(theta), coeffs.rho))
    eta_solution = solve_vector_bsde(
        a_cl,
        coeffs.C,
        riccati.k_solution,
        coeffs.b,
        coeffs.sigma,
        lam,
        bundle,
        basis=basis or riccati.k_solution.basis,
        tol=tol,
    )
    eta_fn = solution_coeff(eta_solution)
    bt_eta = cf_matmul(cf_transpose(coeffs.B), eta_fn)
    v_fn = cf_scale(cf_rinv_mul(coeffs.R, cf_add(bt_eta, coeffs.rho)), -1.0)
    feedback = FeedbackLaw(Theta=theta, v=v_fn, label="optimal")
    return OptimalControl(
        coeffs=coeffs,
        riccati=riccati,
        eta_solution=eta_solution,
        eta_fn=eta_fn,
        v_fn=v_fn,
        feedback=feedback,
    )


@dataclass
class ValueEstimate:
    """Predicted long-run average cost from solved quantities only."""

    value: float
    se: float
    mc_se: float
    solver_floor: float
    n_paths: int


def value_function(opt: OptimalControl, bundle: PathBundle) -> ValueEstimate:
    """Average the closed-form rate over one period of solution samples.

    The rate at each node is -(B'eta+rho)' R^{-1} (B'eta+rho)
    + sigma'K sigma + 2 eta'b + 2 zeta'sigma, integrated by trapezoid and
    divided by the period.  The reported se combines the path average's
    sampling error with the two solver fixed-point floors.
    """
    coeffs = opt.coeffs
    ks = opt.riccati.k_solution
    es = opt.eta_solution
    if es.bundle_token != bundle.token():
        raise ValueError("value must be evaluated on the solve bundle")
    sp, dt = es.steps_per_period, es.dt
    n_paths = bundle.n_paths
    acc = np.zeros(n_paths)
    for i in range(sp + 1):
        phase = bundle.phase(i)
        prefix = bundle.prefix(i)
        k_i = ks.values[:, min(i, sp)]
        eta_i = es.values[:, min(i, sp)]
        zeta_i = es.integrand[:, i] if i < sp else es.integrand[:, 0]
        r = coeffs.R.eval_batch(phase, prefix)
        bmat = coeffs.B.eval_batch(phase, prefix)
        rho = coeffs.rho.eval_batch(phase, prefix)
        bd = coeffs.b.eval_batch(phase, prefix)
        sg = coeffs.sigma.eval_batch(phase, prefix)
        g = np.matmul(np.swapaxes(bmat, -1, -2), eta_i[..., None])[..., 0]
        g = g + np.broadcast_to(rho, g.shape)
        if r.ndim == 2:
            r_b = np.broadcast_to(r, g.shape[:-1] + r.shape)
        else:
            r_b = r
        rinv_g = np.linalg.solve(r_b, g[..., None])[..., 0]
        sg_b = np.broadcast_to(sg, eta_i.shape)
        k_sg = np.matmul(k_i, sg_b[..., None])[..., 0]
        rate = (
            -np.einsum("pi,pi->p", g, rinv_g)
            + np.einsum("pi,pi->p", sg_b, k_sg)
            + 2.0 * np.sum(np.broadcast_to(bd, eta_i.shape) * eta_i, axis=-1)
            + 2.0 * np.sum(sg_b * zeta_i, axis=-1)
        )
        weight = 0.5 * dt if i in (0, sp) else dt
        acc += weight * rate
    per_path = acc / coeffs.tau
    mean, mc_se = mean_se(per_path, bundle.antithetic)
    floor = math.hypot(ks.fixed_point_se, es.fixed_point_se)
    return ValueEstimate(
        value=float(mean),
        se=float(math.hypot(mc_se, floor)),
        mc_se=float(mc_se),
        solver_floor=float(floor),
        n_paths=n_paths,
    )


@dataclass
class CompletionReport:
    """Pathwise check of cost(law) - penalty(law) = optimal value."""

    lhs: float
    lhs_se: float
    value: float
    value_se: float
    gap: float
    combined_se: float
    n_overflow: int
    min_penalty: float = 0.0
    mean_penalty: float = 0.0

    @property
    def gap_in_se(self) -> float:
        return abs(self.gap) / max(self.combined_se, 1e-300)


def completion_of_square_check(
    opt: OptimalControl,
    feedback: FeedbackLaw,
    state: RandomPeriodicState,
    value: ValueEstimate,
    tag: str = "completion",
) -> CompletionReport:
    """Verify the quadratic penalty identity on common noise.

    One period is simulated under ``feedback`` from its steady state; on the
    same paths the running cost and the penalty (u - u*)' R (u - u*) are
    integrated, with u* read off the optimal law's surrogates.  The
    difference of their averages must match the predicted optimal value.
    """
    coeffs = opt.coeffs
    if state.feedback_token != feedback.token:
        raise ValueError("state was burned in under a different feedback law")
    bundle = PathBundle.generate(
        derive_seed(state.seed, tag),
        state.n_paths,
        state.steps_per_period,
        1,
        tau=coeffs.tau,
    )

    def penalty(phase, prefix, x, u):
        u_star = _control_values(opt.feedback, phase, prefix, x)
        du = u - u_star
        r = coeffs.R.eval_batch(phase, prefix)
        r_du = np.matmul(r, du[..., None])[..., 0]
        return np.einsum("pi,pi->p", du, r_du)

    acc, pen, overflow = _accumulate_cost(
        coeffs, feedback, state.samples, bundle, extra_integrand=penalty
    )
    good = ~overflow
    stat = (acc[good] - pen[good]) / coeffs.tau
    mean, se = mean_se(stat)
    combined = math.hypot(float(se), value.se)
    return CompletionReport(
        lhs=float(mean),
        lhs_se=float(se),
        value=value.value,
        value_se=value.se,
        gap=float(mean) - value.value,
        combined_se=combined,
        n_overflow=int(overflow.sum()),
        min_penalty=float(pen[good].min()) if good.any() else math.nan,
        mean_penalty=float(pen[good].mean() / coeffs.tau) if good.any() else math.nan,
    )


def completion_identity_check(
    opt: OptimalControl,
    feedback: FeedbackLaw,
    seed: int,
    n_paths: int = 20000,
    steps_per_period: int = 64,
    lambda_hat: Optional[float] = None,
    target_efold: float = 10.0,
    tag: str = "completion",
) -> CompletionReport:
    """Paired form of the quadratic penalty identity.

    cost(law) - penalty(law) is compared with the measured ergodic cost of
    the solved optimum itself, on common random numbers: both laws burn in
    from the same seed (hence identical increments) and integrate their
    costs over the same fresh period, so the gap is a mean of per-path
    differences and its standard error reflects the pairing.  Anchoring at
    the optimum's own measured cost keeps the check first-order insensitive
    to error in the solved gain: a gain error d shifts the anchor and the
    penalty together, leaving only O(d * (law - optimum)) in the gap.
    """
    coeffs = opt.coeffs
    if lambda_hat is None:
        report = stabilizer_check(
            coeffs,
            opt.feedback,
            derive_seed(seed, "identity-decay"),
            steps_per_period=steps_per_period,
        )
        if not report.stable:
            raise BurnInError("optimal law failed its decay certificate")
        lambda_hat = 0.7 * report.lambda_hat  # slack for the perturbed law
    state_u = burn_in_state(
        coeffs, feedback, seed, n_paths,
        steps_per_period=steps_per_period,
        lambda_hat=lambda_hat, target_efold=target_efold,
    )
    state_opt = burn_in_state(
        coeffs, opt.feedback, seed, n_paths,
        steps_per_period=steps_per_period,
        lambda_hat=lambda_hat, target_efold=target_efold,
    )
    bundle = PathBundle.generate(
        derive_seed(seed, tag), n_paths, steps_per_period, 1, tau=coeffs.tau
    )

    def penalty(phase, prefix, x, u):
        u_star = _control_values(opt.feedback, phase, prefix, x)
        du = u - u_star
        r = coeffs.R.eval_batch(phase, prefix)
        r_du = np.matmul(r, du[..., None])[..., 0]
        return np.einsum("pi,pi->p", du, r_du)

    acc_u, pen, over_u = _accumulate_cost(
        coeffs, feedback, state_u.samples, bundle, extra_integrand=penalty
    )
    acc_opt, _, over_opt = _accumulate_cost(
        coeffs, opt.feedback, state_opt.samples, bundle
    )
    good = ~(over_u | over_opt)
    lhs = (acc_u[good] - pen[good]) / coeffs.tau
    anchor = acc_opt[good] / coeffs.tau
    lhs_mean, lhs_se = mean_se(lhs)
    anchor_mean, anchor_se = mean_se(anchor)
    gap_mean, gap_se = mean_se(lhs - anchor)
    return CompletionReport(
        lhs=float(lhs_mean),
        lhs_se=float(lhs_se),
        value=float(anchor_mean),
        value_se=float(anchor_se),
        gap=float(gap_mean),
        combined_se=float(gap_se),
        n_overflow=int((~good).sum()),
        min_penalty=float(pen[good].min()) if good.any() else math.nan,
        mean_penalty=float(pen[good].mean() / coeffs.tau) if good.any() else math.nan,
    )


# ---------------------------------------------------------------------------
# perturbation scan


@dataclass
class ScanResult:
    """Ergodic cost along a feedback perturbation line on common noise."""

    eps: np.ndarray
    cost: np.ndarray
    cost_se: np.ndarray
    diff: np.ndarray
    diff_se: np.ndarray
    n_overflow: np.ndarray
    eps_star: float
    k_burn: int
    seed: int
    n_paths: int

    @property
    def argmin_index(self) -> int:
        masked = np.where(self.n_overflow > 0, np.inf, self.cost)
        return int(np.argmin(masked))


def optimality_scan(
    coeffs: PeriodicCoefficientSet,
    base: FeedbackLaw,
    d_theta,
    d_v,
    eps_grid: Sequence[float],
    seed: int,
    n_paths: int = 20000,
    steps_per_period: int = 64,
    lambda_hat: Optional[float] = None,
    target_efold: float = 10.0,
    x0=None,
) -> ScanResult:
    """Estimate the ergodic cost of base + eps (d_theta, d_v) over a grid.

    All candidates run on one common increment bundle: burn-in periods are
    discarded, the final period is cost-averaged, and differences against
    eps = 0 are paired per path, which is what makes neighbor contrasts on
    the grid sharp enough to locate the minimizer.  The grid must contain 0.
    """
    eps_grid = np.asarray(list(eps_grid), dtype=float)
    zero_pos = int(np.argmin(np.abs(eps_grid)))
    if abs(eps_grid[zero_pos]) > 0:
        raise ValueError("the scan grid must contain eps = 0")

    if lambda_hat is None:
        report = stabilizer_check(
            coeffs,
            base,
            derive_seed(seed, "scan-decay"),
            n_paths=min(n_paths, 4000),
            steps_per_period=steps_per_period,
        )
        if not report.stable:
            raise ValueError("base law is not mean-square stable; nothing to scan")
        lambda_hat = report.lambda_hat
    k_burn = int(np.clip(math.ceil(target_efold / (lambda_hat * coeffs.tau)), 2, 400))

    bundle = PathBundle.generate(
        derive_seed(seed, "scan"), n_paths, steps_per_period, k_burn + 1, tau=coeffs.tau
    )
    start_node = k_burn * steps_per_period
    x_start = np.zeros(coeffs.n) if x0 is None else x0

    per_path = np.empty((len(eps_grid), n_paths))
    n_over = np.zeros(len(eps_grid), dtype=int)
    for j, eps in enumerate(eps_grid):
        if eps == 0.0:
            law = base
        else:
            law = perturbed_feedback(base, d_theta, d_v, eps=float(eps))
        acc, _, overflow = _accumulate_cost(
            coeffs, law, x_start, bundle, start_node=start_node
        )
        per_path[j] = acc / coeffs.tau
        per_path[j, overflow] = np.nan
        n_over[j] = int(overflow.sum())

    cost = np.empty(len(eps_grid))
    cost_se = np.empty(len(eps_grid))
    diff = np.empty(len(eps_grid))
    diff_se = np.empty(len(eps_grid))
    base_vals = per_path[zero_pos]
    for j in range(len(eps_grid)):
        vals = per_path[j]
        finite = np.isfinite(vals)
        m, s = mean_se(vals[finite])
        cost[j], cost_se[j] = float(m), float(s)
        both = finite & np.isfinite(base_vals)
        dm, ds = mean_se(vals[both] - base_vals[both])
        diff[j], diff_se[j] = float(dm), float(ds)

    masked = np.where(n_over > 0, np.inf, cost)
    eps_star = float(eps_grid[int(np.argmin(masked))])
    return ScanResult(
        eps=eps_grid,
        cost=cost,
        cost_se=cost_se,
        diff=diff,
        diff_se=diff_se,
        n_overflow=n_over,
        eps_star=eps_star,
        k_burn=k_burn,
        seed=seed,
        n_paths=n_paths,
    )


@dataclass
class QuadraticFit:
    linear: float
    linear_se: float
    curvature: float
    curvature_se: float
    chi2_dof: float

    @property
    def curvature_t(self) -> float:
        return self.curvature / max(self.curvature_se, 1e-300)


def fit_quadratic_excess(scan: ScanResult) -> QuadraticFit:
    """Weighted fit of the paired excess cost to b eps + c eps^2."""
    mask = (scan.eps != 0.0) & (scan.n_overflow == 0)
    eps = scan.eps[mask]
    y = scan.diff[mask]
    se = np.maximum(scan.diff_se[mask], 1e-12)
    if eps.size < 3:
        raise ValueError("need at least three off-center scan points to fit")
    design = np.stack([eps, eps**2], axis=1)
    w = 1.0 / se**2
    gram = design.T @ (design * w[:, None])
    rhs = design.T @ (y * w)
    cov = np.linalg.inv(gram)
    beta = cov @ rhs
    resid = y - design @ beta
    chi2 = float(np.sum((resid / se) ** 2))
    dof = max(eps.size - 2, 1)
    return QuadraticFit(
        linear=float(beta[0]),
        linear_se=float(math.sqrt(cov[0, 0])),
        curvature=float(beta[1]),
        curvature_se=float(math.sqrt(cov[1, 1])),
        chi2_dof=chi2 / dof,
    )


def export_scan_csv(scan: ScanResult, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["eps", "cost", "cost_se", "excess", "excess_se", "n_overflow"])
        for j in range(scan.eps.size):
            writer.writerow(
                [
                    repr(float(scan.eps[j])),
                    repr(float(scan.cost[j])),
                    repr(float(scan.cost_se[j])),
                    repr(float(scan.diff[j])),
                    repr(float(scan.diff_se[j])),
                    int(scan.n_overflow[j]),
                ]
            )
