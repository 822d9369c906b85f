"""Closed-form Brownian-bridge mathematics.

A bridge over B discrete steps interpolates between a start field x_0 and an
end field x_B with marginal

    x_beta ~ N((1 - m_beta) x_0 + m_beta x_B,  delta_beta I),
    m_beta = beta / B,  delta_beta = 2 (m_beta - m_beta^2).

Here x_0 is the baseline field and x_B the change field, so inference runs
the recursion forward from the baseline. The network is trained to predict
(1 - m_beta)(x_0 - x_B) + sqrt(delta_beta) eps, which equals x_beta - x_B,
so subtracting the prediction from the state estimates the change field.

All functions are pure and shape-agnostic: they operate on plain float64
arrays (scalars included) and broadcast nothing silently — shapes must agree.
Masked vertices never receive noise; callers pass fields whose masked entries
are zero and they stay zero through the whole process.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BridgeSchedule:
    """Interpolant fractions m[0..B] and variances delta[0..B]."""

    horizon: int
    m: np.ndarray
    delta: np.ndarray


@dataclass(frozen=True)
class SamplingGrid:
    """Strictly increasing step indices, pinned to 0 and B at the ends."""

    indices: np.ndarray

    @property
    def transitions(self) -> int:
        return self.indices.size - 1


@dataclass(frozen=True)
class TransitionCoeffs:
    zeta1: float
    zeta2: float
    zeta3: float
    delta_tilde: float
    delta_cond: float


def schedule_new(horizon: int) -> BridgeSchedule:
    """Schedule for a bridge of `horizon` steps (>= 2).

    delta is evaluated as 2 beta (B - beta) / B^2, which is algebraically
    identical to 2(m - m^2) but bit-symmetric in beta <-> B - beta and exact
    (0.5) at the midpoint of an even horizon.
    """
    if not isinstance(horizon, (int, np.integer)) or horizon < 2:
        raise ValueError(f"bridge horizon must be an integer >= 2, got {horizon!r}")
    b = int(horizon)
    beta = np.arange(b + 1, dtype=np.float64)
    m = beta / b
    delta = 2.0 * beta * (b - beta) / (float(b) * float(b))
    m.setflags(write=False)
    delta.setflags(write=False)
    return BridgeSchedule(horizon=b, m=m, delta=delta)


def _check_step(beta: int, sched: BridgeSchedule) -> int:
    if not 0 <= beta <= sched.horizon:
        raise ValueError(f"step {beta} outside [0, {sched.horizon}]")
    return int(beta)


def _check_shapes(*arrays) -> None:
    shapes = {a.shape for a in arrays}
    if len(shapes) > 1:
        raise ValueError(f"field shapes disagree: {sorted(shapes, key=str)}")


def forward_sample(start, end, beta: int, eps, sched: BridgeSchedule):
    """Marginal draw x_beta = (1-m) start + m end + sqrt(delta) eps."""
    beta = _check_step(beta, sched)
    start = np.asarray(start, dtype=np.float64)
    end = np.asarray(end, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    _check_shapes(start, end, eps)
    m = sched.m[beta]
    return (1.0 - m) * start + m * end + np.sqrt(sched.delta[beta]) * eps


def training_target(start, end, beta: int, eps, sched: BridgeSchedule):
    """Regression target (1-m)(start - end) + sqrt(delta) eps.

    Identity: target == forward_sample(start, end, beta, eps) - end.
    """
    beta = _check_step(beta, sched)
    start = np.asarray(start, dtype=np.float64)
    end = np.asarray(end, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    _check_shapes(start, end, eps)
    m = sched.m[beta]
    return (1.0 - m) * (start - end) + np.sqrt(sched.delta[beta]) * eps


def delta_estimate(x_beta, net_out):
    """Change-field estimate x_beta - net_out."""
    x_beta = np.asarray(x_beta, dtype=np.float64)
    net_out = np.asarray(net_out, dtype=np.float64)
    _check_shapes(x_beta, net_out)
    return x_beta - net_out


def transition_coeffs(beta: int, beta_next: int, sched: BridgeSchedule) -> TransitionCoeffs:
    """Coefficients of one recursion step x_{beta'} given x_beta:

        x_{beta'} = zeta1 x_beta + zeta2 x_0 - zeta3 net_out + sqrt(delta_tilde) eta.

    Valid for adjacent and non-adjacent grid indices alike; subsampled grids
    reuse the same formulas. The first step (beta = 0, where delta_beta = 0)
    takes the analytic limit (1, 0, m', delta'), which is a fresh marginal
    draw around the current change estimate.
    """
    beta = _check_step(beta, sched)
    beta_next = _check_step(beta_next, sched)
    if beta >= beta_next:
        raise ValueError(f"transition needs beta < beta_next, got {beta} >= {beta_next}")
    m_next = sched.m[beta_next]
    d_next = sched.delta[beta_next]
    if beta == 0:
        return TransitionCoeffs(1.0, 0.0, float(m_next), float(d_next), float(d_next))
    m_cur = sched.m[beta]
    d_cur = sched.delta[beta]
    a = m_cur / m_next
    ratio = d_next / d_cur
    d_cond = d_cur - d_next * a * a
    zeta1 = ratio * a + (d_cond / d_cur) * m_next
    zeta2 = 1.0 - m_next - (1.0 - m_cur) * a * ratio
    zeta3 = m_next * d_cond / d_cur
    delta_tilde = d_cond * ratio
    return TransitionCoeffs(float(zeta1), float(zeta2), float(zeta3),
                            float(delta_tilde), float(d_cond))


def make_grid(horizon: int, count: int) -> SamplingGrid:
    """`count` evenly spaced step indices from 0 to `horizon` inclusive.

    Rounding can collide at small horizons; duplicates are removed, so the
    grid may hold fewer than `count` indices. Endpoints are always present.
    """
    if not 2 <= count <= horizon + 1:
        raise ValueError(f"grid count must be in [2, {horizon + 1}], got {count}")
    raw = np.rint(np.linspace(0.0, horizon, count)).astype(np.int64)
    raw[0] = 0
    raw[-1] = horizon
    indices = np.unique(raw)
    indices.setflags(write=False)
    return SamplingGrid(indices=indices)


def run_recursion(start, net_fn, grid: SamplingGrid, sched: BridgeSchedule,
                  rng: np.random.Generator | None = None, stochastic: bool = True,
                  mask: np.ndarray | None = None):
    """Iterate the transition recursion from x_0 = start to x_B.

    net_fn(x, beta) returns the network output at state x and step beta.
    With stochastic=False (or on the deterministic last step) no noise is
    injected; with a mask, noise is drawn only on unmasked entries.
    Raises FloatingPointError naming the step at which values left the
    finite range.
    """
    x = np.array(start, dtype=np.float64, copy=True)
    if stochastic and rng is None:
        raise ValueError("stochastic recursion needs a random generator")
    start64 = np.asarray(start, dtype=np.float64)
    for k in range(grid.transitions):
        beta = int(grid.indices[k])
        beta_next = int(grid.indices[k + 1])
        c = transition_coeffs(beta, beta_next, sched)
        out = np.asarray(net_fn(x, beta), dtype=np.float64)
        _check_shapes(x, out)
        x = c.zeta1 * x + c.zeta2 * start64 - c.zeta3 * out
        if stochastic and c.delta_tilde > 0.0:
            eta = np.zeros_like(x)
            if mask is not None:
                eta[mask] = rng.standard_normal(int(mask.sum()))
            else:
                eta = rng.standard_normal(x.shape if x.shape else None)
            x = x + np.sqrt(c.delta_tilde) * eta
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite state after transition {beta}->{beta_next}")
    return x


def marginal_moments(start, end, beta: int, sched: BridgeSchedule):
    """Mean and variance of the marginal at step beta (for checks)."""
    beta = _check_step(beta, sched)
    m = sched.m[beta]
    mean = (1.0 - m) * np.asarray(start, dtype=np.float64) + m * np.asarray(end, dtype=np.float64)
    return mean, float(sched.delta[beta])


def composition_check(sched: BridgeSchedule, beta: int, beta_next: int,
                      start: float, end: float, n_samples: int,
                      rng: np.random.Generator) -> tuple[float, float]:
    """Monte-Carlo check of the coefficient algebra on scalars.

    Draws x_beta from the marginal, applies one oracle-network transition and
    compares empirical moments at beta_next against the closed-form marginal.
    Returns (abs mean error, relative variance error); when the target
    variance is zero the second entry is the absolute empirical variance.
    """
    eps = rng.standard_normal(n_samples)
    x = forward_sample(np.full(n_samples, start), np.full(n_samples, end), beta, eps, sched)
    c = transition_coeffs(beta, beta_next, sched)
    net_out = x - end
    x_next = c.zeta1 * x + c.zeta2 * start - c.zeta3 * net_out
    if c.delta_tilde > 0.0:
        x_next = x_next + np.sqrt(c.delta_tilde) * rng.standard_normal(n_samples)
    mean_true, var_true = marginal_moments(start, end, beta_next, sched)
    mean_err = abs(float(x_next.mean()) - float(mean_true))
    var_emp = float(x_next.var())
    if var_true == 0.0:
        return mean_err, abs(var_emp)
    return mean_err, abs(var_emp - var_true) / var_true
