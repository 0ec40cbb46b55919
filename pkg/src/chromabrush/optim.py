"""Minimizers over a flat parameter vector.

Two methods drive the image synthesis: limited-memory BFGS with a strong
Wolfe line search, and SGD with momentum as the baseline for the optimizer
comparison harness. Both consume a caller-supplied callback mapping a
parameter vector to ``(loss, gradient)``; the callback's objective is allowed
to change between outer iterations (a per-iteration hook runs first, which is
where the decaying style weight is applied), but is held fixed within one
iteration's line search.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import LineSearchFailure

__all__ = [
    "Objective",
    "LineSearchParams",
    "LineSearchResult",
    "LbfgsState",
    "SgdState",
    "TraceRecord",
    "MinimizeResult",
    "lbfgs_direction",
    "wolfe_line_search",
    "sgd_step",
    "minimize",
]

Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]

# Pairs whose curvature s.y falls below this relative threshold are skipped;
# keeping them would destroy positive definiteness of the implied Hessian.
CURVATURE_EPS = 1e-10


@dataclass
class LineSearchParams:
    c1: float = 1e-4
    c2: float = 0.9
    max_evals: int = 20
    initial_step: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.c1 < self.c2 < 1.0):
            raise ValueError("need 0 < c1 < c2 < 1")
        if self.max_evals < 1 or self.initial_step <= 0:
            raise ValueError("max_evals >= 1 and initial_step > 0 required")


@dataclass
class LineSearchResult:
    step: float
    f: float
    g: np.ndarray
    x: np.ndarray
    evals: int
    wolfe: bool  # False when only the Armijo condition was met


class LbfgsState:
    """Curvature history (s, y) pairs plus the gamma scaling of the seed matrix."""

    def __init__(self, history_size: int = 10):
        if history_size < 1:
            raise ValueError("history_size must be >= 1")
        self.history_size = history_size
        self.pairs: list[tuple[np.ndarray, np.ndarray, float]] = []
        self.gamma = 1.0
        self.iteration = 0

    def push(self, s: np.ndarray, y: np.ndarray) -> bool:
        """Store a pair unless its curvature is negligible; returns stored?"""
        sy = float(np.dot(s, y))
        if sy <= CURVATURE_EPS * float(np.linalg.norm(s) * np.linalg.norm(y)):
            return False
        self.pairs.append((s.copy(), y.copy(), 1.0 / sy))
        if len(self.pairs) > self.history_size:
            self.pairs.pop(0)
        self.gamma = sy / float(np.dot(y, y))
        return True

    def clear(self) -> None:
        self.pairs.clear()
        self.gamma = 1.0


def lbfgs_direction(state: LbfgsState, grad: np.ndarray) -> np.ndarray:
    """Two-loop recursion: ``-H_k @ grad`` for the implicit inverse Hessian.

    With no stored pairs this degenerates to scaled steepest descent.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if not state.pairs:
        return -state.gamma * grad
    q = grad.copy()
    alphas: list[float] = []
    for s, y, rho in reversed(state.pairs):
        a = rho * float(np.dot(s, q))
        alphas.append(a)
        q -= a * y
    q *= state.gamma
    for (s, y, rho), a in zip(state.pairs, reversed(alphas)):
        b = rho * float(np.dot(y, q))
        q += (a - b) * s
    return -q


def _cubic_step(a0, f0, d0, a1, f1, d1) -> float:
    """Minimizer of the cubic Hermite interpolant; NaN when degenerate."""
    h = a1 - a0
    if h == 0.0:
        return math.nan
    t1 = d0 + d1 - 3.0 * (f0 - f1) / (a0 - a1)
    disc = t1 * t1 - d0 * d1
    if not (disc >= 0.0):
        return math.nan
    t2 = math.copysign(math.sqrt(disc), h)
    denom = d1 - d0 + 2.0 * t2
    if denom == 0.0:
        return math.nan
    return a1 - h * (d1 + t2 - t1) / denom


def wolfe_line_search(
    objective: Objective,
    x: np.ndarray,
    d: np.ndarray,
    f0: float,
    g0: np.ndarray,
    params: LineSearchParams | None = None,
) -> LineSearchResult:
    """Find a step along ``d`` satisfying the strong Wolfe conditions.

    Uses bracketing plus zoom with safeguarded cubic interpolation. If the
    evaluation budget runs out, the best Armijo-satisfying point seen is
    returned (``wolfe=False``); with no such point, :class:`LineSearchFailure`
    is raised. Requires ``d`` to be a descent direction.
    """
    params = params or LineSearchParams()
    x = np.asarray(x, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    dphi0 = float(np.dot(g0, d))
    if dphi0 >= 0.0:
        raise ValueError(f"not a descent direction: g.d = {dphi0}")
    c1, c2 = params.c1, params.c2

    evals = 0
    best: LineSearchResult | None = None

    def armijo(a: float, fa: float) -> bool:
        return fa <= f0 + c1 * a * dphi0

    def evaluate(a: float):
        nonlocal evals, best
        xa = x + a * d
        fa, ga = objective(xa)
        fa = float(fa)
        ga = np.asarray(ga, dtype=np.float64)
        evals += 1
        if armijo(a, fa) and (best is None or fa < best.f):
            best = LineSearchResult(a, fa, ga, xa, evals, wolfe=False)
        return fa, ga, float(np.dot(ga, d)), xa

    def finish(a, fa, ga, xa, wolfe: bool) -> LineSearchResult:
        return LineSearchResult(a, fa, ga, xa, evals, wolfe)

    def refine(a, fa, ga, da, xa) -> LineSearchResult:
        # The trial already satisfies strong Wolfe. If it sits far from the
        # one-dimensional minimizer, one cubic interpolation (exact on a
        # quadratic) usually lands much closer; keep whichever Wolfe point
        # is lower. This is what makes curvature pairs CG-quality.
        if abs(da) <= 0.2 * abs(dphi0) or evals >= params.max_evals:
            return finish(a, fa, ga, xa, wolfe=True)
        c = _cubic_step(0.0, f0, dphi0, a, fa, da)
        if not math.isfinite(c):
            return finish(a, fa, ga, xa, wolfe=True)
        c = min(max(c, 0.1 * a), 3.0 * a)
        fc, gc, dc, xc = evaluate(c)
        if fc < fa and armijo(c, fc) and abs(dc) <= -c2 * dphi0:
            return finish(c, fc, gc, xc, wolfe=True)
        return finish(a, fa, ga, xa, wolfe=True)

    def fallback() -> LineSearchResult:
        if best is not None:
            return best
        raise LineSearchFailure(
            f"no sufficient decrease within {evals} evaluations", evals
        )

    def zoom(a_lo, f_lo, d_lo, a_hi, f_hi, d_hi) -> LineSearchResult:
        # Invariant: a_lo satisfies Armijo with the lowest f seen, and the
        # interval [a_lo, a_hi] (in either order) brackets a Wolfe point.
        while evals < params.max_evals:
            lo_, hi_ = (a_lo, a_hi) if a_lo < a_hi else (a_hi, a_lo)
            width = hi_ - lo_
            a = _cubic_step(a_lo, f_lo, d_lo, a_hi, f_hi, d_hi)
            if not math.isfinite(a) or a < lo_ + 0.1 * width or a > hi_ - 0.1 * width:
                a = 0.5 * (lo_ + hi_)
            fa, ga, da, xa = evaluate(a)
            if not armijo(a, fa) or fa >= f_lo:
                a_hi, f_hi, d_hi = a, fa, da
            else:
                if abs(da) <= -c2 * dphi0:
                    return finish(a, fa, ga, xa, wolfe=True)
                if da * (a_hi - a_lo) >= 0.0:
                    a_hi, f_hi, d_hi = a_lo, f_lo, d_lo
                a_lo, f_lo, d_lo = a, fa, da
            if width <= 1e-16 * max(1.0, abs(a_lo)):
                break
        return fallback()

    a_prev, f_prev, d_prev = 0.0, float(f0), dphi0
    a = params.initial_step
    first = True
    while evals < params.max_evals:
        fa, ga, da, xa = evaluate(a)
        if not armijo(a, fa) or (not first and fa >= f_prev):
            return zoom(a_prev, f_prev, d_prev, a, fa, da)
        if abs(da) <= -c2 * dphi0:
            return refine(a, fa, ga, da, xa)
        if da >= 0.0:
            return zoom(a, fa, da, a_prev, f_prev, d_prev)
        a_prev, f_prev, d_prev = a, fa, da
        a *= 2.0
        first = False
    return fallback()


@dataclass
class SgdState:
    """Momentum SGD state over a flat parameter vector."""

    learning_rate: float
    momentum: float = 0.9
    velocity: np.ndarray | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError("momentum must lie in [0, 1)")


def sgd_step(state: SgdState, x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """One momentum update: v <- mu*v - lr*g; returns x + v."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if x.shape != grad.shape:
        raise ValueError(f"x and grad lengths disagree: {x.shape} vs {grad.shape}")
    if state.velocity is None:
        state.velocity = np.zeros_like(x)
    if state.velocity.shape != x.shape:
        raise ValueError("velocity length does not match parameters")
    state.velocity = state.momentum * state.velocity - state.learning_rate * grad
    return x + state.velocity


@dataclass
class TraceRecord:
    """One outer iteration: loss and gradient norm at its start, step taken."""

    iteration: int
    loss: float
    grad_norm: float
    step: float
    extras: dict = field(default_factory=dict)


@dataclass
class MinimizeResult:
    x: np.ndarray
    trace: list[TraceRecord]
    failed: bool = False
    message: str | None = None


def minimize(
    objective: Objective,
    x0: Sequence[float] | np.ndarray,
    method: str = "lbfgs",
    iterations: int = 1,
    *,
    history_size: int = 10,
    clear_history_every: int = 0,
    line_search: LineSearchParams | None = None,
    sgd_learning_rate: float = 1.0,
    sgd_momentum: float = 0.9,
    hook: Callable[[int], None] | None = None,
    extras_fn: Callable[[], dict] | None = None,
    callback: Callable[[TraceRecord], None] | None = None,
) -> MinimizeResult:
    """Run exactly ``iterations`` outer iterations of the chosen method.

    The hook runs at the top of each iteration, before any evaluation, so a
    non-stationary objective (decaying style weight) changes only between
    iterations. Each trace record holds the loss and gradient norm at the
    iteration's start plus whatever ``extras_fn`` reports for that evaluation.

    A line-search failure clears the L-BFGS history and retries once along
    steepest descent; a second failure ends the run early with
    ``failed=True`` and the trace collected so far.
    """
    if method not in ("lbfgs", "sgd"):
        raise ValueError(f"unknown method {method!r}")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    x = np.array(x0, dtype=np.float64).ravel()
    ls_params = line_search or LineSearchParams()
    state = LbfgsState(history_size)
    sgd_state = SgdState(sgd_learning_rate, sgd_momentum, np.zeros_like(x))
    trace: list[TraceRecord] = []
    failed = False
    message = None

    for k in range(iterations):
        if clear_history_every and k > 0 and k % clear_history_every == 0:
            state.clear()
        if hook is not None:
            hook(k)
        f, g = objective(x)
        f = float(f)
        g = np.asarray(g, dtype=np.float64).ravel()
        if g.shape != x.shape:
            raise ValueError("objective returned gradient of wrong length")
        extras = dict(extras_fn()) if extras_fn is not None else {}
        grad_norm = float(np.linalg.norm(g))
        step_len = 0.0

        if method == "sgd":
            x = sgd_step(sgd_state, x, g)
            step_len = sgd_state.learning_rate
        elif grad_norm == 0.0:
            pass  # stationary point: keep x, record the iteration
        else:
            d = lbfgs_direction(state, g)
            if float(np.dot(g, d)) >= 0.0:
                # Numerical loss of descent; restart from steepest descent.
                state.clear()
                d = -g
            try:
                res = wolfe_line_search(objective, x, d, f, g, ls_params)
            except LineSearchFailure:
                state.clear()
                try:
                    res = wolfe_line_search(objective, x, -g, f, g, ls_params)
                except LineSearchFailure as exc:
                    failed = True
                    message = str(exc)
                    rec = TraceRecord(k, f, grad_norm, 0.0, extras)
                    trace.append(rec)
                    if callback is not None:
                        callback(rec)
                    break
            state.push(res.x - x, res.g - g)
            x = res.x
            step_len = res.step
            state.iteration += 1

        rec = TraceRecord(k, f, grad_norm, step_len, extras)
        trace.append(rec)
        if callback is not None:
            callback(rec)

    return MinimizeResult(x=x, trace=trace, failed=failed, message=message)
