"""Optimizers: L-BFGS with a strong Wolfe line search, Adam, and the
pass-rate schedules of the two fitting stages.

The optimizers operate on ParameterBlocks through a callable objective
that reads ``block.values`` and accumulates ``block.grad``; flattening
and scattering across blocks happens here.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ParameterBlock


# -- parameter vector plumbing ------------------------------------------------


def _flatten(blocks) -> np.ndarray:
    return np.concatenate([b.values.ravel() for b in blocks])


def _scatter(blocks, x: np.ndarray) -> None:
    pos = 0
    for b in blocks:
        n = b.values.size
        b.values[...] = x[pos:pos + n].reshape(b.values.shape)
        pos += n


def _gather_grad(blocks) -> np.ndarray:
    return np.concatenate([b.grad.ravel() for b in blocks])


class _Evaluator:
    """Counts objective evaluations and returns flat (f, g)."""

    def __init__(self, objective, blocks):
        self.objective = objective
        self.blocks = list(blocks)
        self.n_evals = 0

    def __call__(self, x: np.ndarray):
        _scatter(self.blocks, x)
        for b in self.blocks:
            b.zero_grad()
        f = float(self.objective())
        self.n_evals += 1
        return f, _gather_grad(self.blocks)


# -- strong Wolfe line search ---------------------------------------------------


def _cubic_step(a_lo, f_lo, d_lo, a_hi, f_hi, d_hi):
    """Minimizer of the cubic through two (value, slope) samples."""
    d1 = d_lo + d_hi - 3.0 * (f_lo - f_hi) / (a_lo - a_hi)
    disc = d1 * d1 - d_lo * d_hi
    if disc < 0.0:
        return None
    d2 = np.sign(a_hi - a_lo) * np.sqrt(disc)
    denom = d_hi - d_lo + 2.0 * d2
    if denom == 0.0:
        return None
    a = a_hi - (a_hi - a_lo) * (d_hi + d2 - d1) / denom
    if not np.isfinite(a):
        return None
    return float(a)


def strong_wolfe_search(phi, f0: float, dphi0: float, alpha0: float,
                        c1: float = 1e-4, c2: float = 0.9,
                        max_evals: int = 25):
    """Bracket-and-zoom search for a step satisfying both Wolfe conditions.

    ``phi(alpha) -> (f, dphi, g)`` evaluates along the ray.  Returns
    ``(alpha, f, dphi, g, complete)`` where ``complete`` marks full Wolfe
    satisfaction; an Armijo-only rescue point has ``complete`` False.
    Returns None when not even sufficient decrease was found within the
    evaluation budget.
    """
    if dphi0 >= 0.0:
        return None
    evals = 0

    def zoom(a_lo, f_lo, d_lo, g_lo, a_hi, f_hi, d_hi):
        nonlocal evals
        while evals < max_evals:
            a = _cubic_step(a_lo, f_lo, d_lo, a_hi, f_hi, d_hi)
            width = abs(a_hi - a_lo)
            lo, hi = min(a_lo, a_hi), max(a_lo, a_hi)
            if a is None or not (lo + 0.1 * width <= a <= hi - 0.1 * width):
                a = 0.5 * (a_lo + a_hi)
            fa, da, ga = phi(a)
            evals += 1
            if fa > f0 + c1 * a * dphi0 or fa >= f_lo:
                a_hi, f_hi, d_hi = a, fa, da
            else:
                if abs(da) <= -c2 * dphi0:
                    return a, fa, da, ga, True
                if da * (a_hi - a_lo) >= 0.0:
                    a_hi, f_hi, d_hi = a_lo, f_lo, d_lo
                a_lo, f_lo, d_lo, g_lo = a, fa, da, ga
            if width < 1e-16:
                break
        # best sufficient-decrease point found, curvature unmet
        if g_lo is not None and f_lo < f0 + c1 * a_lo * dphi0:
            return a_lo, f_lo, d_lo, g_lo, False
        return None

    a_prev, f_prev, d_prev = 0.0, f0, dphi0
    g_prev = None
    a = float(alpha0)
    first = True
    while evals < max_evals:
        fa, da, ga = phi(a)
        evals += 1
        if fa > f0 + c1 * a * dphi0 or (not first and fa >= f_prev):
            return zoom(a_prev, f_prev, d_prev, g_prev, a, fa, da)
        if abs(da) <= -c2 * dphi0:
            return a, fa, da, ga, True
        if da >= 0.0:
            return zoom(a, fa, da, ga, a_prev, f_prev, d_prev)
        a_prev, f_prev, d_prev, g_prev = a, fa, da, ga
        a *= 2.0
        first = False
    return None


# -- L-BFGS ---------------------------------------------------------------------


@dataclass(frozen=True)
class LbfgsConfig:
    history: int = 20
    max_iterations: int = 20
    grad_tol: float = 1e-10
    c1: float = 1e-4
    c2: float = 0.9
    step_scale: float = 1.0
    max_line_evals: int = 25


@dataclass
class LbfgsTraceEntry:
    iteration: int
    f0: float
    f1: float
    alpha: float
    dphi0: float
    dphi1: float
    grad_norm: float
    fallback: bool


@dataclass
class LbfgsResult:
    f: float
    grad_norm: float
    iterations: int
    converged: bool
    failed: bool
    n_evals: int
    trace: list = field(default_factory=list)


def _two_loop(g, S, Y, rho):
    q = g.copy()
    alphas = []
    for s, y, r in zip(reversed(S), reversed(Y), reversed(rho)):
        a = r * (s @ q)
        alphas.append(a)
        q -= a * y
    if S:
        gamma = (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
        q *= gamma
    for (s, y, r), a in zip(zip(S, Y, rho), reversed(alphas)):
        b = r * (y @ q)
        q += (a - b) * s
    return -q


def lbfgs_minimize(objective, blocks, config: LbfgsConfig = LbfgsConfig(),
                   exact_line_search=None) -> LbfgsResult:
    """Minimize ``objective`` over the given parameter blocks.

    ``objective()`` reads current block values and accumulates block
    gradients; blocks are updated in place.  ``exact_line_search(x, d)``
    optionally overrides the Wolfe search with an externally computed
    step length (used by the quadratic-convergence property tests).
    """
    ev = _Evaluator(objective, blocks)
    x = _flatten(blocks)
    f, g = ev(x)
    gnorm = float(np.linalg.norm(g))
    result = LbfgsResult(f, gnorm, 0, gnorm < config.grad_tol, False, ev.n_evals)
    if result.converged:
        return result

    S: deque = deque(maxlen=config.history)
    Y: deque = deque(maxlen=config.history)
    rho: deque = deque(maxlen=config.history)

    for it in range(config.max_iterations):
        d = _two_loop(g, S, Y, rho)
        dphi0 = float(g @ d)
        if dphi0 >= 0.0:
            # defective curvature memory; restart from steepest descent
            S.clear(), Y.clear(), rho.clear()
            d = -g
            dphi0 = float(g @ d)
        if it == 0 and not S:
            alpha0 = config.step_scale * min(1.0, 1.0 / max(np.sum(np.abs(g)), 1e-30))
        else:
            alpha0 = config.step_scale

        def phi(a, x=x, d=d):
            fa, ga = ev(x + a * d)
            return fa, float(ga @ d), ga

        if exact_line_search is not None:
            a = float(exact_line_search(x, d))
            fa, da, ga = phi(a)
            hit = (a, fa, da, ga, True)
        else:
            hit = strong_wolfe_search(phi, f, dphi0, alpha0, config.c1,
                                      config.c2, config.max_line_evals)
        if hit is None:
            # Armijo backtracking along steepest descent, logged as fallback
            d = -g
            dphi0 = float(g @ d)
            a = alpha0
            for _ in range(40):
                fa, da, ga = phi(a)
                if fa <= f + config.c1 * a * dphi0:
                    hit = (a, fa, da, ga, False)
                    break
                a *= 0.5
            if hit is None:
                _scatter(blocks, x)
                result.failed = True
                break

        a, fa, da, ga, wolfe_ok = hit
        fallback = not wolfe_ok
        x_new = x + a * d
        s = x_new - x
        y = ga - g
        sy = float(s @ y)
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            S.append(s), Y.append(y), rho.append(1.0 / sy)

        result.trace.append(LbfgsTraceEntry(
            iteration=it, f0=f, f1=fa, alpha=a, dphi0=dphi0, dphi1=da,
            grad_norm=float(np.linalg.norm(ga)), fallback=fallback))
        x, f, g = x_new, fa, ga
        result.iterations = it + 1
        result.f = f
        result.grad_norm = float(np.linalg.norm(g))
        if result.grad_norm < config.grad_tol:
            result.converged = True
            break

    _scatter(blocks, x)
    result.n_evals = ev.n_evals
    return result


# -- Adam -----------------------------------------------------------------------


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_blocks(cls, blocks, beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> "AdamState":
        return cls(m=[np.zeros_like(b.values) for b in blocks],
                   v=[np.zeros_like(b.values) for b in blocks],
                   beta1=beta1, beta2=beta2, eps=eps)

    def snapshot(self) -> dict:
        return {"step": self.step,
                "m": [a.copy() for a in self.m],
                "v": [a.copy() for a in self.v],
                "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}

    @classmethod
    def from_snapshot(cls, snap: dict) -> "AdamState":
        return cls(m=[np.array(a, np.float64) for a in snap["m"]],
                   v=[np.array(a, np.float64) for a in snap["v"]],
                   step=int(snap["step"]), beta1=float(snap["beta1"]),
                   beta2=float(snap["beta2"]), eps=float(snap["eps"]))


def adam_step(blocks, state: AdamState, rate: float) -> None:
    """One bias-corrected Adam update from the blocks' accumulated grads."""
    if len(state.m) != len(blocks):
        raise ValueError("Adam state does not match the block list")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for b, m, v in zip(blocks, state.m, state.v):
        if m.shape != b.values.shape:
            raise ValueError(f"Adam moment shape mismatch for block {b.name}")
        g = b.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        b.values -= rate * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- schedules --------------------------------------------------------------------


def linear_decay_rates(fixed_passes: int, rate: float,
                       decay_passes: int) -> np.ndarray:
    """Fixed-rate plateau followed by a linear ramp ending exactly at 0."""
    if fixed_passes <= 0 or decay_passes <= 0:
        raise ValueError("pass counts must be positive")
    if rate < 0:
        raise ValueError("rate must be nonnegative")
    ramp = rate * (1.0 - (np.arange(decay_passes) + 1.0) / decay_passes)
    return np.concatenate([np.full(fixed_passes, rate), ramp])


@dataclass(frozen=True)
class StageOneSchedule:
    """Skeleton fit: sequential warm-started solves, then global passes."""

    sweep_max_iterations: int = 20
    history: int = 20
    fixed_passes: int = 15
    fixed_rate: float = 0.1
    decay_passes: int = 15
    pass_iterations: int = 20
    temporal_from_pass: int = 5
    projective_warmup_solves: int = 2
    divergence_factor: float = 10.0

    def pass_rates(self) -> np.ndarray:
        return linear_decay_rates(self.fixed_passes, self.fixed_rate,
                                  self.decay_passes)


@dataclass(frozen=True)
class StageTwoSchedule:
    """Joint surface fit: Adam over shuffled frames."""

    fixed_passes: int = 100
    fixed_rate: float = 5e-5
    decay_passes: int = 300
    noise_sigma: float = 0.1
    checkpoint_interval: int = 50

    def pass_rates(self) -> np.ndarray:
        return linear_decay_rates(self.fixed_passes, self.fixed_rate,
                                  self.decay_passes)

    def conditioning_active(self, pass_index: int) -> bool:
        """Pose conditioning switches on when the rate starts decaying."""
        return pass_index >= self.fixed_passes
