"""Backward equations over one period by regression Monte Carlo.

The matrix equation (the second-moment / Riccati family) and the vector
equation (the first-order correction) are both solved by the same scheme:

* one backward sweep discretizes the equation on the period grid; at node i
  the martingale integrand is estimated as the regression of
  ``K_{i+1} dW_i / dt`` on polynomial features of the within-period
  increment partial sum, and the node value as the regression of
  ``K_{i+1} + drift(t_i, path, K_{i+1}, L_i) dt``;
* the periodic solution is the fixed point of the map sending a terminal
  value to the resulting time-0 value.  Under mean-square stability the map
  contracts at a rate comparable to E|Phi_tau|^2 < 1, so plain iteration
  from zero converges geometrically.

All sweeps of one solve run on a single frozen path bundle, which makes the
iteration a deterministic map with an honest fixed point; the statistical
error is then controlled by the stopping rule, which refuses to iterate
below the Monte Carlo resolution of the update.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .coefficients import CoefficientFn, PathPrefix, as_prefix, composite_coeff
from .sde_engine import PathBundle, mean_se, poly_design, stream_fundamental


class RegressionError(RuntimeError):
    """Raised when a least-squares node problem is numerically singular."""


class ConvergenceError(RuntimeError):
    """Raised when the outer fixed-point iteration fails to contract."""


@dataclass
class RegressionBasis:
    """Polynomial basis in the within-period increment partial sum."""

    degree: int = 2
    ridge: float = 1e-8

    def design(self, prefix: PathPrefix, phase: float) -> np.ndarray:
        if not 0 <= self.degree <= 6:
            raise RegressionError("basis degree must lie in 0..6")
        return poly_design(prefix, phase, self.degree)


def ridge_solve(design: np.ndarray, targets: np.ndarray, ridge: float):
    """Least squares with a ridge on the non-constant columns.

    Returns the coefficient matrix (n_features, n_targets) and the condition
    number of the regularized normal matrix.
    """
    n_paths, n_feat = design.shape
    gram = design.T @ design / n_paths
    if n_feat > 1:
        idx = np.arange(1, n_feat)
        gram[idx, idx] += ridge
    cond = float(np.linalg.cond(gram))
    if not math.isfinite(cond) or cond > 1e12:
        raise RegressionError(f"singular regression at condition number {cond:.3e}")
    rhs = design.T @ targets / n_paths
    return np.linalg.solve(gram, rhs), cond


@dataclass
class SweepResult:
    values: np.ndarray          # (P, sp+1) + vshape
    integrand: np.ndarray       # (P, sp) + vshape
    value_coeffs: List[np.ndarray]
    integrand_coeffs: List[np.ndarray]
    node0_target: np.ndarray    # (P, prod(vshape)) regression target at node 0
    max_cond: float


def backward_sweep(
    drift: Callable,
    terminal: np.ndarray,
    bundle: PathBundle,
    basis: RegressionBasis,
) -> SweepResult:
    """One explicit backward pass over a single period.

    drift(phase, prefix, value_next, integrand_est) must return an array
    broadcastable to (n_paths,) + value shape.  Matrix-valued sweeps keep
    every stored node value exactly symmetric.
    """
    if bundle.n_periods != 1:
        raise ValueError("backward sweeps operate on single-period bundles")
    terminal = np.asarray(terminal, dtype=float)
    vshape = terminal.shape
    is_matrix = len(vshape) == 2
    flat_dim = int(np.prod(vshape))
    sp, dt = bundle.steps_per_period, bundle.dt
    n_paths = bundle.n_paths

    values = np.empty((n_paths, sp + 1) + vshape)
    integrand = np.empty((n_paths, sp) + vshape)
    values[:, sp] = terminal
    value_coeffs: List[Optional[np.ndarray]] = [None] * sp
    integrand_coeffs: List[Optional[np.ndarray]] = [None] * sp
    node0_target = None
    max_cond = 0.0

    for i in range(sp - 1, -1, -1):
        phase = bundle.phase(i)
        prefix = bundle.prefix(i)
        design = basis.design(prefix, phase)
        v_next = values[:, i + 1]
        flat_next = v_next.reshape(n_paths, flat_dim)

        dw = bundle.increments[:, i] / dt
        beta_l, cond_l = ridge_solve(design, flat_next * dw[:, None], basis.ridge)
        l_est = (design @ beta_l).reshape((n_paths,) + vshape)
        if is_matrix:
            l_est = 0.5 * (l_est + np.swapaxes(l_est, -1, -2))

        d = np.asarray(drift(phase, prefix, v_next, l_est), dtype=float)
        if d.ndim == len(vshape):
            d = d[None]
        target = flat_next + dt * d.reshape(d.shape[0], flat_dim)
        beta_v, cond_v = ridge_solve(design, target, basis.ridge)
        fitted = (design @ beta_v).reshape((n_paths,) + vshape)
        if is_matrix:
            fitted = 0.5 * (fitted + np.swapaxes(fitted, -1, -2))
        values[:, i] = fitted
        integrand[:, i] = l_est
        value_coeffs[i] = beta_v
        integrand_coeffs[i] = beta_l
        max_cond = max(max_cond, cond_l, cond_v)
        if i == 0:
            node0_target = np.broadcast_to(target, (n_paths, flat_dim)).copy()

    return SweepResult(
        values=values,
        integrand=integrand,
        value_coeffs=value_coeffs,
        integrand_coeffs=integrand_coeffs,
        node0_target=node0_target,
        max_cond=max_cond,
    )


@dataclass
class IterationTrace:
    updates: List[float] = field(default_factory=list)
    update_ses: List[float] = field(default_factory=list)
    fixed_points: List[np.ndarray] = field(default_factory=list)
    stop_reason: str = ""
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_iterations(self) -> int:
        return len(self.updates)

    @property
    def contraction_ratio(self) -> Optional[float]:
        usable = [
            self.updates[i + 1] / self.updates[i]
            for i in range(len(self.updates) - 1)
            if self.updates[i] > 0.0
        ]
        if not usable:
            return None
        tail = usable[-3:]
        return float(np.median(tail))


@dataclass(eq=False)
class BsdeGridSolution:
    """Periodic solution samples on the solve bundle plus node surrogates.

    values holds the per-path node samples (deterministic at phase 0);
    integrand holds the martingale coefficient estimates at nodes 0..sp-1.
    value_coeffs / integrand_coeffs are the per-node regression weights that
    define out-of-sample surrogates.
    """

    kind: str                 # "matrix" or "vector"
    tau: float
    steps_per_period: int
    values: np.ndarray
    integrand: np.ndarray
    value_coeffs: List[np.ndarray]
    integrand_coeffs: List[np.ndarray]
    terminal: np.ndarray
    fixed_point: np.ndarray
    fixed_point_se: float
    trace: IterationTrace
    basis: RegressionBasis
    bundle_token: tuple

    @property
    def dt(self) -> float:
        return self.tau / self.steps_per_period

    @property
    def periodic_residual(self) -> float:
        return float(np.linalg.norm(self.fixed_point - self.terminal))

    def _node_for_phase(self, phase: float) -> int:
        return int(round(phase / self.dt))

    def value_at(self, phase: float, prefix) -> np.ndarray:
        """Surrogate value at the node nearest to phase, on fresh prefixes."""
        node = min(max(self._node_for_phase(phase), 0), self.steps_per_period)
        prefix = as_prefix(prefix)
        if node == self.steps_per_period or node == 0:
            anchor = self.terminal if node == self.steps_per_period else self.fixed_point
            reps = (prefix.n_paths,) + (1,) * anchor.ndim
            return np.tile(anchor, reps)
        beta = self.value_coeffs[node]
        design = poly_design(prefix, node * self.dt, self.basis.degree)
        out = (design @ beta).reshape((prefix.n_paths,) + self.fixed_point.shape)
        if self.kind == "matrix":
            out = 0.5 * (out + np.swapaxes(out, -1, -2))
        return out

    def integrand_at(self, phase: float, prefix) -> np.ndarray:
        node = min(max(self._node_for_phase(phase), 0), self.steps_per_period - 1)
        prefix = as_prefix(prefix)
        beta = self.integrand_coeffs[node]
        design = poly_design(prefix, node * self.dt, self.basis.degree)
        out = (design @ beta).reshape((prefix.n_paths,) + self.fixed_point.shape)
        if self.kind == "matrix":
            out = 0.5 * (out + np.swapaxes(out, -1, -2))
        return out


def _default_basis(*fns: CoefficientFn) -> RegressionBasis:
    """Constant basis when no input carries path dependence, else cubic.

    A deterministic problem has a deterministic solution; fitting it on
    path features would only launder martingale noise into spurious slope
    coefficients, so the basis collapses to the constant column.  For
    path-functional problems the cubic captures the leading odd component
    of smooth link functions of the partial sum; stopping at the quadratic
    leaves a deterministic projection bias in the solved feedback that
    paired cost tests resolve at several standard errors.
    """
    degree = 0 if all(fn.kind != "path-functional" for fn in fns) else 3
    return RegressionBasis(degree=degree)


def solution_coeff(solution: BsdeGridSolution) -> CoefficientFn:
    """Wrap a grid solution as a coefficient for composition and reuse.

    On the solve bundle's own prefixes the wrapper reproduces the stored
    node samples bit for bit (same design, same weights); on fresh prefixes
    it acts as the out-of-sample regression surrogate.
    """
    shape = tuple(solution.fixed_point.shape)
    bound = float(np.nanmax(np.abs(solution.values))) if solution.values.size else 0.0
    kind = "deterministic-periodic" if solution.basis.degree == 0 else "path-functional"

    def evaluator(phase, prefix):
        return solution.value_at(phase, prefix)

    return composite_coeff(shape, solution.tau, kind, evaluator, max(bound, 1e-30))


def _min_eig_batch(mats: np.ndarray) -> np.ndarray:
    n = mats.shape[-1]
    if n == 1:
        return mats[..., 0, 0]
    if n == 2:
        tr = mats[..., 0, 0] + mats[..., 1, 1]
        det_gap = np.sqrt(
            np.maximum((mats[..., 0, 0] - mats[..., 1, 1]) ** 2, 0.0)
            + 4.0 * mats[..., 0, 1] ** 2
        )
        return 0.5 * (tr - det_gap)
    return np.linalg.eigvalsh(mats)[..., 0]


def _outer_fixed_point(
    drift: Callable,
    shape: tuple,
    bundle: PathBundle,
    basis: RegressionBasis,
    tol: float,
    max_iter: int,
    initial_terminal: Optional[np.ndarray] = None,
) -> tuple:
    if initial_terminal is None:
        terminal = np.zeros(shape)
    else:
        terminal = np.array(initial_terminal, dtype=float)
        if terminal.shape != shape:
            raise ValueError(f"warm start shape {terminal.shape}, expected {shape}")
    trace = IterationTrace()
    prev_target = None
    sweep = None
    scale = 1.0
    for _ in range(max_iter):
        sweep = backward_sweep(drift, terminal, bundle, basis)
        fixed = sweep.values[0, 0].copy()
        update = float(np.linalg.norm(fixed - terminal))
        if prev_target is None:
            se_norm = 0.0
        else:
            _, se = mean_se(sweep.node0_target - prev_target, bundle.antithetic)
            se_norm = float(np.linalg.norm(se))
        prev_target = sweep.node0_target
        trace.updates.append(update)
        trace.update_ses.append(se_norm)
        trace.fixed_points.append(fixed)
        scale = max(1.0, float(np.linalg.norm(fixed)))
        stopped = update < max(tol * scale, 0.5 * se_norm)
        old_terminal = terminal
        terminal = fixed
        if stopped:
            trace.stop_reason = (
                "tolerance" if update < tol * scale else "statistical floor"
            )
            _, fp_se = mean_se(sweep.node0_target, bundle.antithetic)
            fp_se_norm = float(np.linalg.norm(fp_se))
            return sweep, old_terminal, fixed, math.hypot(update, fp_se_norm), trace
    ratio = trace.contraction_ratio
    raise ConvergenceError(
        f"no fixed point in {max_iter} outer iterations "
        f"(last update {trace.updates[-1]:.3e}, ratio estimate {ratio})"
    )


def _sample_psd(lam_fn: CoefficientFn, tau: float, seed: int = 11) -> bool:
    rng = np.random.default_rng(seed)
    dt = tau / 64.0
    for _ in range(16):
        steps = int(rng.integers(0, 64))
        prefix = PathPrefix(rng.normal(0.0, math.sqrt(dt), size=(4, steps)))
        val = lam_fn.eval_batch(steps * dt, prefix)
        mats = val if val.ndim == 3 else val[None]
        if float(_min_eig_batch(mats).min()) < -1e-10:
            return False
    return True


def solve_linear_matrix_bsde(
    a_fn: CoefficientFn,
    c_fn: CoefficientFn,
    lam_fn: CoefficientFn,
    bundle: PathBundle,
    basis: Optional[RegressionBasis] = None,
    tol: float = 1e-6,
    max_iter: int = 200,
    psd_source: Optional[bool] = None,
    initial_terminal: Optional[np.ndarray] = None,
) -> BsdeGridSolution:
    """Periodic matrix equation with drift K A + A'K + C'K C + L C + C'L + Lam.

    Iterates the terminal map from zero on a frozen bundle.  When the source
    is (sampled as) positive semidefinite, returned samples are cleaned to
    min eigenvalue >= -1e-8 relative; deeper violations are recorded in the
    trace diagnostics instead of silently clipped.
    """
    basis = basis or _default_basis(a_fn, c_fn, lam_fn)
    n = a_fn.shape[0]

    def drift(phase, prefix, k_next, l_est):
        a = a_fn.eval_batch(phase, prefix)
        c = c_fn.eval_batch(phase, prefix)
        lam = lam_fn.eval_batch(phase, prefix)
        ka = np.matmul(k_next, a)
        ckc = np.matmul(np.swapaxes(c, -1, -2), np.matmul(k_next, c))
        lc = np.matmul(l_est, c)
        out = ka + np.swapaxes(ka, -1, -2) + ckc + lc + np.swapaxes(lc, -1, -2)
        return out + lam

    sweep, terminal, fixed, fp_se, trace = _outer_fixed_point(
        drift, (n, n), bundle, basis, tol, max_iter, initial_terminal
    )

    if psd_source is None:
        psd_source = _sample_psd(lam_fn, bundle.tau)
    if psd_source:
        eps = 1e-8 * max(1.0, float(np.linalg.norm(fixed)))
        lows = _min_eig_batch(sweep.values)
        worst = float(lows.min())
        trace.diagnostics["min_sample_eig"] = worst
        if worst < -eps:
            trace.diagnostics["positivity_violation"] = worst
        shift = np.clip(-lows, 0.0, eps)
        if np.any(shift > 0.0):
            sweep.values += shift[..., None, None] * np.eye(n)

    return BsdeGridSolution(
        kind="matrix",
        tau=bundle.tau,
        steps_per_period=bundle.steps_per_period,
        values=sweep.values,
        integrand=sweep.integrand,
        value_coeffs=sweep.value_coeffs,
        integrand_coeffs=sweep.integrand_coeffs,
        terminal=terminal,
        fixed_point=fixed,
        fixed_point_se=fp_se,
        trace=trace,
        basis=basis,
        bundle_token=bundle.token(),
    )


def solve_vector_bsde(
    a_fn: CoefficientFn,
    c_fn: CoefficientFn,
    kl_solution: BsdeGridSolution,
    b_fn: CoefficientFn,
    sigma_fn: CoefficientFn,
    lam_fn: CoefficientFn,
    bundle: PathBundle,
    basis: Optional[RegressionBasis] = None,
    tol: float = 1e-6,
    max_iter: int = 200,
) -> BsdeGridSolution:
    """Periodic vector equation with drift A'eta + C'zeta + K b + C'K sigma
    + L sigma + lam, where (K, L) are the matrix solution's samples on the
    same bundle (enforced by token).
    """
    basis = basis or (
        kl_solution.basis
        if kl_solution.basis.degree > 0
        else _default_basis(a_fn, c_fn, b_fn, sigma_fn, lam_fn)
    )
    if kl_solution.bundle_token != bundle.token():
        raise ValueError("vector solve must run on the matrix solution's bundle")
    n = a_fn.shape[0]
    sp = bundle.steps_per_period
    dt = bundle.dt

    def drift(phase, prefix, eta_next, zeta_est):
        i = min(int(round(phase / dt)), sp - 1)
        k_i = kl_solution.values[:, i]
        l_i = kl_solution.integrand[:, i]
        a = a_fn.eval_batch(phase, prefix)
        c = c_fn.eval_batch(phase, prefix)
        bd = b_fn.eval_batch(phase, prefix)
        sg = sigma_fn.eval_batch(phase, prefix)
        lam = lam_fn.eval_batch(phase, prefix)
        at_eta = np.matmul(np.swapaxes(a, -1, -2), eta_next[..., None])[..., 0]
        ct_zeta = np.matmul(np.swapaxes(c, -1, -2), zeta_est[..., None])[..., 0]
        kb = np.matmul(k_i, np.broadcast_to(bd, eta_next.shape)[..., None])[..., 0]
        ksig = np.matmul(k_i, np.broadcast_to(sg, eta_next.shape)[..., None])[..., 0]
        ct_ksig = np.matmul(np.swapaxes(c, -1, -2), ksig[..., None])[..., 0]
        lsig = np.matmul(l_i, np.broadcast_to(sg, eta_next.shape)[..., None])[..., 0]
        return at_eta + ct_zeta + kb + ct_ksig + lsig + lam

    sweep, terminal, fixed, fp_se, trace = _outer_fixed_point(
        drift, (n,), bundle, basis, tol, max_iter
    )
    return BsdeGridSolution(
        kind="vector",
        tau=bundle.tau,
        steps_per_period=bundle.steps_per_period,
        values=sweep.values,
        integrand=sweep.integrand,
        value_coeffs=sweep.value_coeffs,
        integrand_coeffs=sweep.integrand_coeffs,
        terminal=terminal,
        fixed_point=fixed,
        fixed_point_se=fp_se,
        trace=trace,
        basis=basis,
        bundle_token=bundle.token(),
    )


@dataclass
class RepresentationReport:
    estimate: np.ndarray
    se: float
    reference: np.ndarray
    residual: float
    rel_residual: float
    tail_note: str = ""


def representation_check(
    a_fn: CoefficientFn,
    c_fn: CoefficientFn,
    lam_fn: CoefficientFn,
    solution: BsdeGridSolution,
    bundle: PathBundle,
) -> RepresentationReport:
    """Compare the fixed point against a truncated occupation integral.

    Streams the fundamental solution over the (long) audit bundle and
    accumulates the pathwise trapezoid of Phi' Lam Phi; the fixed point
    should match the ensemble mean within combined uncertainty.
    """
    n = a_fn.shape[0]
    n_paths = bundle.n_paths
    acc = np.zeros((n_paths, n, n))
    n_steps = bundle.n_steps
    dt = bundle.dt

    class _Coeffs:
        A = a_fn
        C = c_fn
        n = a_fn.shape[0]

    def visit(k, phase, prefix, phi):
        lam = lam_fn.eval_batch(phase, prefix)
        integ = np.matmul(np.swapaxes(phi, -1, -2), np.matmul(lam, phi))
        weight = 0.5 * dt if (k == 0 or k == n_steps) else dt
        np.add(acc, weight * integ, out=acc)

    overflow = stream_fundamental(_Coeffs, bundle, visit)
    good = ~overflow
    paired = bundle.antithetic and bool(good.all())
    mean, se = mean_se(acc[good].reshape(int(good.sum()), -1), paired)
    estimate = mean.reshape(n, n)
    se_norm = float(np.linalg.norm(se))
    residual = float(np.linalg.norm(estimate - solution.fixed_point))
    ref_norm = float(np.linalg.norm(solution.fixed_point))
    return RepresentationReport(
        estimate=estimate,
        se=se_norm,
        reference=solution.fixed_point,
        residual=residual,
        rel_residual=residual / max(ref_norm, 1e-12),
    )


def export_node_table_csv(solution: BsdeGridSolution, path) -> None:
    """Write (node, t, mean entries.., se entries..) over the period grid."""
    sp = solution.steps_per_period
    flat = solution.values.reshape(solution.values.shape[:2] + (-1,))
    n_comp = flat.shape[2]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["node", "t"]
            + [f"mean_c{i}" for i in range(n_comp)]
            + [f"se_c{i}" for i in range(n_comp)]
        )
        for k in range(sp + 1):
            mean, se = mean_se(flat[:, k])
            writer.writerow(
                [k, repr(float(k * solution.dt))]
                + [repr(float(v)) for v in mean]
                + [repr(float(v)) for v in np.atleast_1d(se)]
            )
