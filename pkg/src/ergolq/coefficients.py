"""Coefficient processes with a built-in period.

Every model coefficient is a functional of two things only: the phase
``t mod tau`` inside the current period, and the Brownian increments
accumulated since the last period boundary.  Restricting coefficients to
this form makes the shift identity ``f(t + tau, W) = f(t, shifted W)``
hold by construction instead of by assumption, so downstream solvers can
treat one period as the whole problem.

Three concrete families are provided and are exactly the families the
scenario file grammar can express:

* ``constant``: a fixed matrix.
* ``harmonic``: deterministic trigonometric polynomial of the phase.
* ``tanh_sum``: a bounded link function (tanh, sin or cos) of the
  within-period increment partial sum, scaled and offset entrywise.

Arbitrary in-memory compositions (sums, products, transposes) are
supported for solver internals; those are not serializable.
"""

from __future__ import annotations

import configparser
import io
import math
import re
import uuid
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

SYMMETRY_TOL = 1e-12

_KIND_ORDER = {"constant": 0, "deterministic-periodic": 1, "path-functional": 2}
_LINKS = {"tanh": np.tanh, "sin": np.sin, "cos": np.cos}


class CoefficientError(ValueError):
    """Raised for invalid coefficient evaluations or malformed sets."""


class ScenarioFormatError(ValueError):
    """Raised when a scenario definition file cannot be parsed or written."""


class PathPrefix:
    """Within-period increment history of a path batch.

    Wraps the ``(n_paths, k)`` array of increments observed since the last
    period boundary and caches the partial sum, which is the only statistic
    the built-in families and regression bases consume.
    """

    __slots__ = ("increments", "_partial_sum")

    def __init__(self, increments, partial_sum=None):
        arr = np.asarray(increments, dtype=float)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2:
            raise CoefficientError("prefix must be a 1-d or 2-d increment array")
        self.increments = arr
        self._partial_sum = partial_sum

    @property
    def n_paths(self) -> int:
        return self.increments.shape[0]

    @property
    def n_steps(self) -> int:
        return self.increments.shape[1]

    @property
    def partial_sum(self) -> np.ndarray:
        if self._partial_sum is None:
            self._partial_sum = self.increments.sum(axis=1)
        return self._partial_sum

    @staticmethod
    def empty(n_paths: int = 1) -> "PathPrefix":
        return PathPrefix(np.zeros((n_paths, 0)), partial_sum=np.zeros(n_paths))


def as_prefix(prefix) -> PathPrefix:
    if isinstance(prefix, PathPrefix):
        return prefix
    return PathPrefix(prefix)


@dataclass(eq=False)
class CoefficientFn:
    """A single model coefficient.

    kind is one of ``constant``, ``deterministic-periodic`` or
    ``path-functional``; ``shape`` is the matrix shape (vectors use a
    length-1 tuple); ``bound`` is a declared essential sup of the entries.
    ``evaluator(phase, prefix)`` returns either ``shape`` (path independent)
    or ``(n_paths,) + shape``.

    ``family``/``params`` are set for the serializable families and None for
    in-memory compositions.
    """

    kind: str
    shape: tuple
    evaluator: Callable
    bound: float
    tau: float
    family: Optional[str] = None
    params: Optional[dict] = None
    symmetrize: bool = False
    diagnostics: dict = field(default_factory=dict)

    def eval_batch(self, phase: float, prefix) -> np.ndarray:
        """Evaluate on a path batch; result broadcasts against per-path arrays."""
        if not 0.0 <= phase < self.tau:
            raise CoefficientError(
                f"phase {phase!r} outside [0, {self.tau!r})"
            )
        prefix = as_prefix(prefix)
        out = self.evaluator(phase, prefix)
        out = np.asarray(out, dtype=float)
        if out.shape[-len(self.shape):] != self.shape:
            raise CoefficientError(
                f"evaluator returned shape {out.shape}, declared {self.shape}"
            )
        if self.symmetrize and len(self.shape) == 2 and self.shape[0] == self.shape[1]:
            sym = 0.5 * (out + np.swapaxes(out, -1, -2))
            asym = float(np.max(np.abs(out - np.swapaxes(out, -1, -2)))) if out.size else 0.0
            if asym > SYMMETRY_TOL:
                prev = self.diagnostics.get("max_asymmetry", 0.0)
                self.diagnostics["max_asymmetry"] = max(prev, asym)
            out = sym
        return out

    @property
    def is_zero(self) -> bool:
        return (
            self.family == "constant"
            and self.params is not None
            and not np.any(self.params["value"])
        )

    def signature(self):
        """Plain structure for serialization equality; None for composites."""
        if self.family is None or self.params is None:
            return None
        plain = {}
        for key, val in self.params.items():
            if isinstance(val, np.ndarray):
                plain[key] = val.tolist()
            elif isinstance(val, dict):
                plain[key] = {k: np.asarray(v).tolist() for k, v in val.items()}
            else:
                plain[key] = val
        return (self.family, self.kind, self.shape, self.tau, plain)


def eval_coeff(fn: CoefficientFn, phase: float, prefix) -> np.ndarray:
    """Evaluate a coefficient on a single path prefix.

    ``prefix`` is the 1-d array of within-period increments accumulated up
    to ``phase`` (its length is the caller's responsibility; the evaluator
    only consumes the partial sum).  Returns an array of ``fn.shape``.
    """
    prefix = as_prefix(prefix)
    if prefix.n_paths != 1:
        raise CoefficientError("eval_coeff expects a single path; use eval_batch")
    out = fn.eval_batch(phase, prefix)
    if out.ndim == len(fn.shape):
        return out
    return out[0]


def theta_shift(path, k: int, steps_per_period: int):
    """Drop the first k periods of a discretized increment sequence.

    Realizes the measure-preserving shift on grid paths: the returned view
    starts at the increment following node ``k * steps_per_period``.
    """
    arr = np.asarray(path)
    if k < 0:
        raise CoefficientError("shift count must be nonnegative")
    drop = k * steps_per_period
    if drop > arr.shape[-1]:
        raise CoefficientError(
            f"cannot shift {k} periods: path holds {arr.shape[-1]} increments"
        )
    return arr[..., drop:]


# ---------------------------------------------------------------------------
# concrete families


def _as_matrix(value, shape) -> np.ndarray:
    arr = np.array(value, dtype=float)
    if arr.shape != tuple(shape):
        raise CoefficientError(f"value shape {arr.shape} != declared {tuple(shape)}")
    arr.setflags(write=False)
    return arr


def constant_coeff(value, tau: float, *, symmetrize: bool = False) -> CoefficientFn:
    arr = np.array(value, dtype=float)
    arr.setflags(write=False)
    shape = arr.shape

    def evaluator(phase, prefix):
        return arr

    return CoefficientFn(
        kind="constant",
        shape=shape,
        evaluator=evaluator,
        bound=float(np.max(np.abs(arr))) if arr.size else 0.0,
        tau=tau,
        family="constant",
        params={"value": arr},
        symmetrize=symmetrize,
    )


def harmonic_coeff(
    tau: float,
    base,
    sin_terms: Optional[dict] = None,
    cos_terms: Optional[dict] = None,
    *,
    symmetrize: bool = False,
) -> CoefficientFn:
    """Deterministic periodic coefficient: trigonometric polynomial of the phase.

    ``sin_terms``/``cos_terms`` map harmonic order (a positive int) to a
    matrix of the same shape as ``base``.
    """
    base = np.array(base, dtype=float)
    shape = base.shape
    sin_terms = {int(k): _as_matrix(v, shape) for k, v in (sin_terms or {}).items()}
    cos_terms = {int(k): _as_matrix(v, shape) for k, v in (cos_terms or {}).items()}
    for order in list(sin_terms) + list(cos_terms):
        if order < 1:
            raise CoefficientError("harmonic orders must be >= 1")
    omega = 2.0 * math.pi / tau

    def evaluator(phase, prefix):
        out = base.copy()
        for order, mat in sin_terms.items():
            out += mat * math.sin(omega * order * phase)
        for order, mat in cos_terms.items():
            out += mat * math.cos(omega * order * phase)
        return out

    bound = float(np.max(np.abs(base))) if base.size else 0.0
    for mat in list(sin_terms.values()) + list(cos_terms.values()):
        bound += float(np.max(np.abs(mat)))
    base.setflags(write=False)
    return CoefficientFn(
        kind="deterministic-periodic",
        shape=shape,
        evaluator=evaluator,
        bound=bound,
        tau=tau,
        family="harmonic",
        params={"base": base, "sin": sin_terms, "cos": cos_terms},
        symmetrize=symmetrize,
    )


def tanh_sum_coeff(
    tau: float,
    base,
    amplitude,
    scale: float = 1.0,
    offset: float = 0.0,
    link: str = "tanh",
    *,
    symmetrize: bool = False,
) -> CoefficientFn:
    """Path-functional coefficient driven by the within-period increment sum.

    value = base + amplitude * link(scale * S + offset) with S the partial
    sum of the current period's increments.  The link is bounded by 1, so
    the entrywise bound max|base| + max|amplitude| is exact.
    """
    base = np.array(base, dtype=float)
    shape = base.shape
    amp = _as_matrix(amplitude, shape)
    if link not in _LINKS:
        raise CoefficientError(f"unknown link {link!r}; choose from {sorted(_LINKS)}")
    link_fn = _LINKS[link]

    def evaluator(phase, prefix):
        s = link_fn(scale * prefix.partial_sum + offset)
        return base + amp * s.reshape((-1,) + (1,) * len(shape))

    base.setflags(write=False)
    return CoefficientFn(
        kind="path-functional",
        shape=shape,
        evaluator=evaluator,
        bound=float(np.max(np.abs(base)) + np.max(np.abs(amp))) if base.size else 0.0,
        tau=tau,
        family="tanh_sum",
        params={
            "base": base,
            "amp": amp,
            "scale": float(scale),
            "offset": float(offset),
            "link": link,
        },
        symmetrize=symmetrize,
    )


def composite_coeff(
    shape, tau: float, kind: str, evaluator: Callable, bound: float, *, symmetrize: bool = False
) -> CoefficientFn:
    """In-memory coefficient from a raw evaluator (not serializable)."""
    return CoefficientFn(
        kind=kind,
        shape=tuple(shape),
        evaluator=evaluator,
        bound=float(bound),
        tau=tau,
        symmetrize=symmetrize,
    )


# ---------------------------------------------------------------------------
# composition algebra (solver internals)


def _join_kind(*fns) -> str:
    return max((f.kind for f in fns), key=_KIND_ORDER.__getitem__)


def cf_add(f: CoefficientFn, g: CoefficientFn) -> CoefficientFn:
    if f.shape != g.shape:
        raise CoefficientError(f"shape mismatch in sum: {f.shape} vs {g.shape}")

    def evaluator(phase, prefix):
        return f.eval_batch(phase, prefix) + g.eval_batch(phase, prefix)

    return composite_coeff(f.shape, f.tau, _join_kind(f, g), evaluator, f.bound + g.bound)


def cf_scale(f: CoefficientFn, alpha: float) -> CoefficientFn:
    def evaluator(phase, prefix):
        return alpha * f.eval_batch(phase, prefix)

    return composite_coeff(f.shape, f.tau, f.kind, evaluator, abs(alpha) * f.bound)


def cf_transpose(f: CoefficientFn) -> CoefficientFn:
    if len(f.shape) != 2:
        raise CoefficientError("transpose needs a matrix coefficient")

    def evaluator(phase, prefix):
        return np.swapaxes(f.eval_batch(phase, prefix), -1, -2)

    return composite_coeff((f.shape[1], f.shape[0]), f.tau, f.kind, evaluator, f.bound)


def _matmul_shapes(fs, gs):
    # vectors on the right are treated as columns
    left = fs if len(fs) == 2 else (1, fs[0])
    right = gs if len(gs) == 2 else (gs[0], 1)
    if left[1] != right[0]:
        raise CoefficientError(f"inner dimensions differ: {fs} @ {gs}")
    if len(gs) == 1:
        return (left[0],) if len(fs) == 2 else (1,)
    return (left[0], right[1])


def cf_matmul(f: CoefficientFn, g: CoefficientFn) -> CoefficientFn:
    """Matrix product; a 1-d right factor is treated as a column vector."""
    shape = _matmul_shapes(f.shape, g.shape)
    inner = f.shape[-1]

    def evaluator(phase, prefix):
        a = f.eval_batch(phase, prefix)
        bmat = g.eval_batch(phase, prefix)
        if len(g.shape) == 1:
            out = np.matmul(a, bmat[..., None])[..., 0]
        else:
            out = np.matmul(a, bmat)
        return out

    return composite_coeff(shape, f.tau, _join_kind(f, g), evaluator, inner * f.bound * g.bound)


def cf_rinv_mul(r_fn: CoefficientFn, g: CoefficientFn) -> CoefficientFn:
    """R^{-1} @ g evaluated by batched linear solves (R must stay invertible)."""
    shape = _matmul_shapes(r_fn.shape, g.shape)

    def evaluator(phase, prefix):
        r = r_fn.eval_batch(phase, prefix)
        rhs = g.eval_batch(phase, prefix)
        vec = len(g.shape) == 1
        if vec:
            rhs = rhs[..., None]
        if r.ndim == 2 and rhs.ndim == 3:
            r = np.broadcast_to(r, rhs.shape[:1] + r.shape)
        out = np.linalg.solve(r, rhs)
        return out[..., 0] if vec else out

    # declared bound is a sampled estimate; exact bounds need min-eig knowledge
    bound = _sampled_bound(shape, r_fn.tau, evaluator)
    return composite_coeff(shape, r_fn.tau, _join_kind(r_fn, g), evaluator, bound)


def _sampled_bound(shape, tau, evaluator, n_samples: int = 64, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_samples):
        steps = int(rng.integers(0, 65))
        phase = steps * tau / 64.0
        if phase >= tau:
            phase, steps = 0.0, 0
        prefix = PathPrefix(rng.normal(0.0, math.sqrt(tau / 64.0), size=(1, steps)))
        val = evaluator(phase, prefix)
        if np.asarray(val).size:
            worst = max(worst, float(np.max(np.abs(val))))
    return 2.0 * worst


# ---------------------------------------------------------------------------
# coefficient sets and feedback laws

_COEFF_FIELDS = ("A", "B", "C", "b", "sigma", "Q", "S", "R", "q", "rho")


@dataclass(eq=False)
class PeriodicCoefficientSet:
    """All model data of one control problem over one period.

    Shapes: A, C, Q are (n, n); B is (n, m); S is (m, n); R is (m, m);
    b, sigma, q are (n,); rho is (m,).  Q and R are symmetrized at every
    evaluation (asymmetry beyond 1e-12 is recorded in their diagnostics).
    """

    tau: float
    n: int
    m: int
    A: CoefficientFn
    B: CoefficientFn
    C: CoefficientFn
    b: CoefficientFn
    sigma: CoefficientFn
    Q: CoefficientFn
    S: CoefficientFn
    R: CoefficientFn
    q: CoefficientFn
    rho: CoefficientFn
    name: str = ""

    def __post_init__(self):
        if self.tau <= 0:
            raise CoefficientError("tau must be positive")
        n, m = self.n, self.m
        expected = {
            "A": (n, n), "B": (n, m), "C": (n, n), "b": (n,), "sigma": (n,),
            "Q": (n, n), "S": (m, n), "R": (m, m), "q": (n,), "rho": (m,),
        }
        for key, shape in expected.items():
            fn = getattr(self, key)
            if fn.shape != shape:
                raise CoefficientError(f"{key} has shape {fn.shape}, expected {shape}")
            if abs(fn.tau - self.tau) > 0.0:
                raise CoefficientError(f"{key} declares period {fn.tau}, set has {self.tau}")
        self.Q.symmetrize = True
        self.R.symmetrize = True

    def coefficient(self, name: str) -> CoefficientFn:
        if name not in _COEFF_FIELDS:
            raise CoefficientError(f"unknown coefficient {name!r}")
        return getattr(self, name)

    @property
    def is_deterministic(self) -> bool:
        """True when no coefficient depends on the driving path."""
        return all(
            getattr(self, k).kind != "path-functional" for k in _COEFF_FIELDS
        )

    def signature(self):
        return {
            "tau": self.tau,
            "n": self.n,
            "m": self.m,
            "name": self.name,
            "coefficients": {k: getattr(self, k).signature() for k in _COEFF_FIELDS},
        }


@dataclass(eq=False)
class FeedbackLaw:
    """Closed-loop control u = Theta(t, path) x + v(t, path).

    Theta has shape (m, n) and v shape (m,).  The token identifies the law
    when burned-in states are reused across calls.
    """

    Theta: CoefficientFn
    v: CoefficientFn
    label: str = ""
    token: str = field(default_factory=lambda: uuid.uuid4().hex)


def zero_feedback(coeffs: PeriodicCoefficientSet, label: str = "zero") -> FeedbackLaw:
    return FeedbackLaw(
        Theta=constant_coeff(np.zeros((coeffs.m, coeffs.n)), coeffs.tau),
        v=constant_coeff(np.zeros(coeffs.m), coeffs.tau),
        label=label,
    )


def constant_feedback(coeffs: PeriodicCoefficientSet, theta, v=None, label: str = "") -> FeedbackLaw:
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    vval = np.zeros(coeffs.m) if v is None else np.atleast_1d(np.asarray(v, dtype=float))
    return FeedbackLaw(
        Theta=constant_coeff(theta, coeffs.tau),
        v=constant_coeff(vval, coeffs.tau),
        label=label,
    )


def perturbed_feedback(
    base: FeedbackLaw, d_theta=None, d_v=None, eps: float = 1.0, label: str = ""
) -> FeedbackLaw:
    """base + eps * (d_theta, d_v) with constant-matrix perturbation directions."""
    theta = base.Theta
    v = base.v
    if d_theta is not None:
        step = constant_coeff(eps * np.atleast_2d(np.asarray(d_theta, float)), theta.tau)
        theta = cf_add(theta, step)
    if d_v is not None:
        step_v = constant_coeff(eps * np.atleast_1d(np.asarray(d_v, float)), v.tau)
        v = cf_add(v, step_v)
    return FeedbackLaw(Theta=theta, v=v, label=label or f"{base.label}+eps={eps}")


# ---------------------------------------------------------------------------
# positivity audit


@dataclass
class PositivityReport:
    min_eig_R: float
    min_eig_cost: float
    n_samples: int

    @property
    def margin(self) -> float:
        return min(self.min_eig_R, self.min_eig_cost)

    @property
    def passed(self) -> bool:
        return self.margin > 0.0


def check_positivity(
    coeffs: PeriodicCoefficientSet, n_samples: int = 64, seed: int = 0
) -> PositivityReport:
    """Sample R and Q - S^T R^{-1} S over random (phase, prefix) draws.

    Raises CoefficientError on an asymmetric Q/R sample (beyond 1e-12) or a
    numerically singular R sample; otherwise reports the worst eigenvalues.
    """
    rng = np.random.default_rng(seed)
    dt = coeffs.tau / 64.0
    min_r = math.inf
    min_cost = math.inf
    for _ in range(n_samples):
        steps = int(rng.integers(0, 64))
        phase = steps * dt
        prefix = PathPrefix(rng.normal(0.0, math.sqrt(dt), size=(1, steps)))
        r = coeffs.R.eval_batch(phase, prefix)
        qm = coeffs.Q.eval_batch(phase, prefix)
        s = coeffs.S.eval_batch(phase, prefix)
        r2 = r if r.ndim == 2 else r[0]
        q2 = qm if qm.ndim == 2 else qm[0]
        s2 = s if s.ndim == 2 else s[0]
        eig_r = np.linalg.eigvalsh(r2)
        if np.min(np.abs(eig_r)) < 1e-12:
            raise CoefficientError("singular R sample in positivity check")
        cost = q2 - s2.T @ np.linalg.solve(r2, s2)
        min_r = min(min_r, float(eig_r.min()))
        min_cost = min(min_cost, float(np.linalg.eigvalsh(cost).min()))
    for fn in (coeffs.Q, coeffs.R):
        if fn.diagnostics.get("max_asymmetry", 0.0) > SYMMETRY_TOL:
            raise CoefficientError(
                f"asymmetric sample: max asymmetry {fn.diagnostics['max_asymmetry']:.3e}"
            )
    return PositivityReport(min_eig_R=min_r, min_eig_cost=min_cost, n_samples=n_samples)


# ---------------------------------------------------------------------------
# scenario catalog


def builtin_scenarios() -> dict:
    """Catalog of named, fully validated scenario definitions."""
    out = {}

    def scalar(name, a, bc, c, bd, sd, qc, sc, rc, ql, rl, **kw):
        tau = 1.0
        return PeriodicCoefficientSet(
            tau=tau, n=1, m=1,
            A=a, B=bc, C=c, b=bd, sigma=sd, Q=qc, S=sc, R=rc, q=ql, rho=rl,
            name=name, **kw,
        )

    tau = 1.0
    const = lambda v, shape=None: constant_coeff(
        np.full(shape, float(v)) if shape else np.array([[float(v)]]), tau
    )
    vconst = lambda v: constant_coeff(np.array([float(v)]), tau)

    out["scalar-constant"] = scalar(
        "scalar-constant",
        const(-1.0), const(1.0), const(0.0), vconst(1.0), vconst(1.0),
        const(1.0), const(0.0), const(1.0), vconst(0.0), vconst(0.0),
    )
    out["scalar-noisy"] = scalar(
        "scalar-noisy",
        const(-1.0), const(1.0), const(1.0), vconst(1.0), vconst(1.0),
        const(1.0), const(0.0), const(1.0), vconst(0.0), vconst(0.0),
    )
    # no control authority; A stable on its own, used for raw decay studies
    out["scalar-moment-decay"] = scalar(
        "scalar-moment-decay",
        const(-1.0), const(0.0), const(0.5), vconst(0.0), vconst(0.0),
        const(1.0), const(0.0), const(1.0), vconst(0.0), vconst(0.0),
    )
    out["scalar-random-periodic"] = scalar(
        "scalar-random-periodic",
        tanh_sum_coeff(tau, [[-1.0]], [[0.25]], scale=1.0),
        const(1.0),
        tanh_sum_coeff(tau, [[0.3]], [[0.1]], scale=1.0),
        tanh_sum_coeff(tau, [0.3], [0.2], scale=0.7),
        tanh_sum_coeff(tau, [0.5], [0.2], scale=0.5),
        tanh_sum_coeff(tau, [[1.0]], [[0.2]], scale=0.8),
        const(0.1),
        const(1.0),
        vconst(0.1),
        vconst(0.05),
    )
    out["planar-deterministic-periodic"] = PeriodicCoefficientSet(
        tau=tau, n=2, m=1,
        A=harmonic_coeff(
            tau,
            [[-1.0, 0.2], [0.0, -1.2]],
            sin_terms={1: [[0.3, 0.0], [0.0, 0.0]]},
            cos_terms={1: [[0.0, 0.0], [0.0, 0.3]]},
        ),
        B=constant_coeff([[0.0], [1.0]], tau),
        C=harmonic_coeff(
            tau,
            [[0.15, 0.0], [0.0, 0.1]],
            sin_terms={1: [[0.05, 0.0], [0.0, 0.0]]},
        ),
        b=harmonic_coeff(tau, [0.2, 0.0], cos_terms={1: [0.1, 0.0]}),
        sigma=constant_coeff([0.1, 0.2], tau),
        Q=harmonic_coeff(
            tau, [[1.0, 0.0], [0.0, 1.0]], sin_terms={1: [[0.2, 0.0], [0.0, 0.0]]}
        ),
        S=constant_coeff([[0.0, 0.0]], tau),
        R=constant_coeff([[1.0]], tau),
        q=constant_coeff([0.0, 0.0], tau),
        rho=constant_coeff([0.0], tau),
        name="planar-deterministic-periodic",
    )
    return out


# ---------------------------------------------------------------------------
# scenario definition files
#
# INI-style grammar (sections are case sensitive):
#
#   [model]
#   tau = <float>      n = <int>      m = <int>      name = <string, optional>
#
#   one section per coefficient: [A] [B] [C] [b] [sigma] [Q] [S] [R] [q] [rho]
#     family = constant | harmonic | tanh_sum
#     constant:  value = <matrix>
#     harmonic:  base = <matrix>, then any of sin1.. sinN / cos1.. cosN
#     tanh_sum:  base, amp = <matrix>; scale, offset = <float>; link = tanh|sin|cos
#
#   matrix literal: rows separated by ';', entries by whitespace.
#   Vectors are written as a single row.

_HARM_KEY = re.compile(r"^(sin|cos)([1-9][0-9]*)$")


def _format_matrix(arr) -> str:
    arr = np.atleast_2d(np.asarray(arr, dtype=float))
    return " ; ".join(" ".join(repr(float(x)) for x in row) for row in arr)


def _parse_matrix(text: str, shape) -> np.ndarray:
    rows = [r.split() for r in text.split(";")]
    try:
        arr = np.array([[float(x) for x in row] for row in rows], dtype=float)
    except ValueError as exc:
        raise ScenarioFormatError(f"bad matrix literal {text!r}") from exc
    if len(shape) == 1:
        if arr.shape != (1, shape[0]):
            raise ScenarioFormatError(
                f"expected a {shape[0]}-entry row vector, got shape {arr.shape}"
            )
        return arr[0]
    if arr.shape != tuple(shape):
        raise ScenarioFormatError(f"expected shape {tuple(shape)}, got {arr.shape}")
    return arr


def _coeff_shapes(n: int, m: int) -> dict:
    return {
        "A": (n, n), "B": (n, m), "C": (n, n), "b": (n,), "sigma": (n,),
        "Q": (n, n), "S": (m, n), "R": (m, m), "q": (n,), "rho": (m,),
    }


def serialize_scenario(coeffs: PeriodicCoefficientSet) -> str:
    """Render a coefficient set in the scenario file grammar.

    Only the serializable families round-trip; composed coefficients raise.
    """
    lines = ["[model]"]
    lines.append(f"tau = {repr(float(coeffs.tau))}")
    lines.append(f"n = {coeffs.n}")
    lines.append(f"m = {coeffs.m}")
    if coeffs.name:
        lines.append(f"name = {coeffs.name}")
    for key in _COEFF_FIELDS:
        fn = getattr(coeffs, key)
        if fn.family is None or fn.params is None:
            raise ScenarioFormatError(
                f"coefficient {key} is a composition and has no file form"
            )
        lines.append("")
        lines.append(f"[{key}]")
        lines.append(f"family = {fn.family}")
        p = fn.params
        if fn.family == "constant":
            lines.append(f"value = {_format_matrix(p['value'])}")
        elif fn.family == "harmonic":
            lines.append(f"base = {_format_matrix(p['base'])}")
            for order in sorted(p["sin"]):
                lines.append(f"sin{order} = {_format_matrix(p['sin'][order])}")
            for order in sorted(p["cos"]):
                lines.append(f"cos{order} = {_format_matrix(p['cos'][order])}")
        elif fn.family == "tanh_sum":
            lines.append(f"base = {_format_matrix(p['base'])}")
            lines.append(f"amp = {_format_matrix(p['amp'])}")
            lines.append(f"scale = {repr(p['scale'])}")
            lines.append(f"offset = {repr(p['offset'])}")
            lines.append(f"link = {p['link']}")
        else:
            raise ScenarioFormatError(f"unknown family {fn.family!r}")
    return "\n".join(lines) + "\n"


def parse_scenario(text: str) -> PeriodicCoefficientSet:
    """Parse a scenario definition; inverse of serialize_scenario."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ScenarioFormatError(f"unparseable scenario file: {exc}") from exc
    if "model" not in cp:
        raise ScenarioFormatError("missing [model] section")
    model = cp["model"]
    try:
        tau = float(model["tau"])
        n = int(model["n"])
        m = int(model["m"])
    except (KeyError, ValueError) as exc:
        raise ScenarioFormatError(f"bad [model] section: {exc}") from exc
    name = model.get("name", "")
    shapes = _coeff_shapes(n, m)
    fns = {}
    for key, shape in shapes.items():
        if key not in cp:
            raise ScenarioFormatError(f"missing [{key}] section")
        sec = cp[key]
        family = sec.get("family")
        if family == "constant":
            fns[key] = constant_coeff(_parse_matrix(sec["value"], shape), tau)
        elif family == "harmonic":
            sin_terms, cos_terms = {}, {}
            for opt in sec:
                match = _HARM_KEY.match(opt)
                if match:
                    target = sin_terms if match.group(1) == "sin" else cos_terms
                    target[int(match.group(2))] = _parse_matrix(sec[opt], shape)
            fns[key] = harmonic_coeff(
                tau, _parse_matrix(sec["base"], shape), sin_terms, cos_terms
            )
        elif family == "tanh_sum":
            fns[key] = tanh_sum_coeff(
                tau,
                _parse_matrix(sec["base"], shape),
                _parse_matrix(sec["amp"], shape),
                scale=float(sec.get("scale", "1.0")),
                offset=float(sec.get("offset", "0.0")),
                link=sec.get("link", "tanh"),
            )
        else:
            raise ScenarioFormatError(f"[{key}] has unknown family {family!r}")
    return PeriodicCoefficientSet(tau=tau, n=n, m=m, name=name, **fns)


def load_scenario(path) -> PeriodicCoefficientSet:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_scenario(fh.read())


def save_scenario(coeffs: PeriodicCoefficientSet, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_scenario(coeffs))
