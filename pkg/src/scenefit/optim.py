"""Quasi-Newton and first-order optimizers.

Two solvers cover every stage of the pipeline: L-BFGS with a strong-Wolfe
line search for the ellipsoid and scene stages, and AdamW for the mesh
stage. Both consume objectives through the autodiff engine.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import NonFiniteGradient, NonFiniteLoss


@dataclass
class LbfgsConfig:
    memory: int = 10
    max_iters: int = 100
    grad_tol: float = 1e-8
    c1: float = 1e-4
    c2: float = 0.9
    ls_max_steps: int = 25
    # pixel-visibility pops make render losses locally jagged; when a line
    # search finds no decrease at all, take a bounded number of small
    # non-accepted probe steps instead of giving up (the best iterate is
    # still what gets returned).
    max_explore_steps: int = 20
    max_consecutive_explores: int = 8
    explore_step: float = 1e-3

    def __post_init__(self):
        if not (0.0 < self.c1 < self.c2 < 1.0):
            raise ValueError("need 0 < c1 < c2 < 1")
        if self.memory < 1:
            raise ValueError("memory must be >= 1")


@dataclass
class AdamwConfig:
    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    steps: int = 4000

    def __post_init__(self):
        if self.lr <= 0 or self.eps <= 0:
            raise ValueError("lr and eps must be positive")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("betas must lie in (0, 1)")


@dataclass
class StepRecord:
    """Quantities needed to assert the strong Wolfe conditions post hoc."""

    f0: float
    g0_dot_d: float
    alpha: float
    f1: float
    g1_dot_d: float


@dataclass
class OptimResult:
    x: ad.ParamVector
    trace: list = field(default_factory=list)
    converged: bool = False
    line_search_failed: bool = False
    n_evals: int = 0
    step_records: list = field(default_factory=list)
    best_x: ad.ParamVector | None = None
    best_loss: float = np.inf


def _safe_eval(objective, pv):
    """Objective value with NaN/Inf mapped to +inf (line-search probing)."""
    try:
        return ad.evaluate(objective, pv)
    except NonFiniteLoss:
        return np.inf


def _safe_grad(objective, pv):
    try:
        return ad.gradient(objective, pv)
    except (NonFiniteLoss, NonFiniteGradient):
        return np.inf, None


def _cubic_min(a, fa, ga, b, fb, gb):
    """Minimizer of the cubic interpolant on [a,b]; midpoint fallback."""
    with np.errstate(all="ignore"):
        d1 = ga + gb - 3.0 * (fa - fb) / (a - b)
        disc = d1 * d1 - ga * gb
        if disc < 0.0 or not np.isfinite(disc):
            return 0.5 * (a + b)
        d2 = np.sign(b - a) * np.sqrt(disc)
        t = b - (b - a) * (gb + d2 - d1) / (gb - ga + 2.0 * d2)
    if not np.isfinite(t):
        return 0.5 * (a + b)
    lo, hi = min(a, b), max(a, b)
    span = hi - lo
    return float(np.clip(t, lo + 0.1 * span, hi - 0.1 * span))


def _wolfe_line_search(objective, pv, d, f0, g0, cfg):
    """Strong-Wolfe search along d (bracket + zoom).

    Returns (alpha, f_new, grad_new, n_evals, wolfe_ok). When the curvature
    condition cannot be met (e.g. pixel-visibility pops make the objective
    micro-discontinuous), the best Armijo-decrease point seen is returned
    with ``wolfe_ok=False``; alpha is None only if no decrease exists at
    all. Non-finite trial values are treated as too-long steps.
    """
    phi0 = f0
    dphi0 = float(g0 @ d)
    n_evals = 0
    best = {"alpha": None, "f": np.inf, "g": None}

    def phi(alpha):
        nonlocal n_evals
        n_evals += 1
        f, g = _safe_grad(objective, pv.replace(pv.values + alpha * d))
        if g is None:
            return np.inf, np.inf, None
        if f <= phi0 + cfg.c1 * alpha * dphi0 and f < best["f"]:
            best.update(alpha=alpha, f=f, g=g)
        return f, float(g @ d), g

    def zoom(lo, phi_lo, dphi_lo, hi, phi_hi, dphi_hi):
        for _ in range(cfg.ls_max_steps):
            alpha = _cubic_min(lo, phi_lo, dphi_lo, hi, phi_hi, dphi_hi)
            f, dphi, g = phi(alpha)
            if f > phi0 + cfg.c1 * alpha * dphi0 or f >= phi_lo:
                hi, phi_hi, dphi_hi = alpha, f, dphi
            else:
                if abs(dphi) <= -cfg.c2 * dphi0:
                    return alpha, f, g
                if dphi * (hi - lo) >= 0.0:
                    hi, phi_hi, dphi_hi = lo, phi_lo, dphi_lo
                lo, phi_lo, dphi_lo = alpha, f, dphi
            if abs(hi - lo) < 1e-16:
                break
        return None, None, None

    def finish(a, fa, ga):
        if a is not None:
            return a, fa, ga, n_evals, True
        if best["alpha"] is not None:
            return best["alpha"], best["f"], best["g"], n_evals, False
        return None, None, None, n_evals, False

    alpha_prev, phi_prev, dphi_prev = 0.0, phi0, dphi0
    alpha = 1.0
    for _ in range(cfg.ls_max_steps):
        f, dphi, g = phi(alpha)
        if f > phi0 + cfg.c1 * alpha * dphi0 or (f >= phi_prev and alpha_prev > 0.0):
            return finish(*zoom(alpha_prev, phi_prev, dphi_prev, alpha, f, dphi))
        if abs(dphi) <= -cfg.c2 * dphi0:
            return alpha, f, g, n_evals, True
        if dphi >= 0.0:
            return finish(*zoom(alpha, f, dphi, alpha_prev, phi_prev, dphi_prev))
        alpha_prev, phi_prev, dphi_prev = alpha, f, dphi
        alpha *= 2.0
    return finish(None, None, None)


def lbfgs_minimize(objective, x0: ad.ParamVector, cfg: LbfgsConfig) -> OptimResult:
    """L-BFGS with strong-Wolfe line search (two-loop recursion).

    The trace records the loss at x0 and after every accepted step; accepted
    steps satisfy the Wolfe conditions, so the trace is non-increasing.
    On line-search failure a single steepest-descent backtracking step is
    tried before giving up (robustness next to barrier walls).
    """
    x = x0.values.copy()
    f, g = ad.gradient(objective, x0)
    result = OptimResult(x=x0.copy(), trace=[f], n_evals=1)
    result.best_x, result.best_loss = x0.copy(), f

    s_hist, y_hist, rho_hist = [], [], []
    explores = 0
    consecutive_explores = 0
    for _ in range(cfg.max_iters):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= cfg.grad_tol:
            result.converged = True
            break

        # Two-loop recursion for the search direction.
        q = g.copy()
        alphas = []
        for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        if y_hist:
            gamma = (s_hist[-1] @ y_hist[-1]) / (y_hist[-1] @ y_hist[-1])
            q *= gamma
        for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
            beta = rho * (y @ q)
            q += (a - beta) * s
        d = -q

        if float(g @ d) >= 0.0:  # not a descent direction; reset memory
            s_hist, y_hist, rho_hist = [], [], []
            d = -g

        alpha, f_new, g_new, ne, wolfe_ok = _wolfe_line_search(
            objective, x0.replace(x), d, f, g, cfg)
        result.n_evals += ne
        if alpha is None:
            # Fallback 1: one steepest-descent backtracking pass.
            d = -g
            alpha_bt = 1.0 / max(1.0, float(np.linalg.norm(g)))
            ok = False
            for _ in range(cfg.ls_max_steps):
                f_try = _safe_eval(objective, x0.replace(x + alpha_bt * d))
                result.n_evals += 1
                if f_try < f - cfg.c1 * alpha_bt * float(g @ g):
                    ok = True
                    break
                alpha_bt *= 0.5
            if not ok:
                # Fallback 2: probe step through the local jaggedness. Not an
                # accepted step (kept off the trace); memory is reset.
                if explores >= cfg.max_explore_steps or \
                        consecutive_explores >= cfg.max_consecutive_explores:
                    result.line_search_failed = True
                    break
                explores += 1
                consecutive_explores += 1
                step = cfg.explore_step * min(2.0 ** (consecutive_explores - 1), 4.0)
                x_probe = x + step * (-g / max(float(np.linalg.norm(g)), 1e-12))
                f_probe, g_probe = _safe_grad(objective, x0.replace(x_probe))
                result.n_evals += 1
                if g_probe is None:
                    result.line_search_failed = True
                    break
                x, f, g = x_probe, f_probe, g_probe
                s_hist, y_hist, rho_hist = [], [], []
                if f < result.best_loss:
                    result.best_loss = f
                    result.best_x = x0.replace(x.copy())
                continue
            x_new = x + alpha_bt * d
            f_new, g_new = ad.gradient(objective, x0.replace(x_new))
            result.n_evals += 1
            s_hist, y_hist, rho_hist = [], [], []
        elif not wolfe_ok:
            # Armijo decrease without curvature: take it, drop the memory
            # (the curvature pair is unreliable across a discontinuity).
            x_new = x + alpha * d
            s_hist, y_hist, rho_hist = [], [], []
        else:
            x_new = x + alpha * d
            result.step_records.append(
                StepRecord(f0=f, g0_dot_d=float(g @ d), alpha=alpha,
                           f1=f_new, g1_dot_d=float(g_new @ d))
            )
            s = x_new - x
            y = g_new - g
            sy = float(s @ y)
            if sy > 1e-16:
                s_hist.append(s)
                y_hist.append(y)
                rho_hist.append(1.0 / sy)
                if len(s_hist) > cfg.memory:
                    s_hist.pop(0)
                    y_hist.pop(0)
                    rho_hist.pop(0)

        x, f, g = x_new, f_new, g_new
        consecutive_explores = 0
        if f <= result.trace[-1]:
            result.trace.append(f)
        if f < result.best_loss:
            result.best_loss = f
            result.best_x = x0.replace(x.copy())

    result.x = x0.replace(x)
    if float(np.linalg.norm(g)) <= cfg.grad_tol:
        result.converged = True
    return result


def adamw_minimize(objective, x0: ad.ParamVector, cfg: AdamwConfig,
                   callback=None) -> OptimResult:
    """AdamW with decoupled weight decay and bias-corrected moments.

    Runs exactly ``cfg.steps`` updates. ``callback(step, x, loss)`` fires
    after each update when given. Non-finite losses raise with the step
    index attached.
    """
    x = x0.values.copy()
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    result = OptimResult(x=x0.copy())

    for step in range(1, cfg.steps + 1):
        try:
            f, g = ad.gradient(objective, x0.replace(x))
        except NonFiniteLoss:
            raise NonFiniteLoss(step=step)
        result.n_evals += 1
        result.trace.append(f)
        if f < result.best_loss:
            result.best_loss = f
            result.best_x = x0.replace(x.copy())

        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        mhat = m / (1.0 - cfg.beta1 ** step)
        vhat = v / (1.0 - cfg.beta2 ** step)
        x = x - cfg.lr * (mhat / (np.sqrt(vhat) + cfg.eps) + cfg.weight_decay * x)
        if callback is not None:
            callback(step, x0.replace(x), f)

    f_final = _safe_eval(objective, x0.replace(x))
    result.n_evals += 1
    if np.isfinite(f_final):
        result.trace.append(f_final)
        if f_final < result.best_loss:
            result.best_loss = f_final
            result.best_x = x0.replace(x.copy())
    result.x = x0.replace(x)
    return result
