"""Propagation of the circular problem and Poincare-section crossings.

All propagation goes through scipy's DOP853 (explicit Runge-Kutta of order 8
with a 7th order continuous extension).  Negative times are handled by
integrating towards a smaller ``t_bound``, which is the same as integrating
the negated field with identical error control.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.integrate import DOP853, solve_ivp

from .dynamics import (
    SystemParams,
    make_rhs,
    make_variational_rhs,
    vector_field,
)

COORDINATES = {"x": 0, "y": 1, "px": 2, "py": 3}


class FlowError(RuntimeError):
    """Integration failed (step size underflow or similar)."""


class NoCrossingError(FlowError):
    """The requested section crossing did not occur within the horizon."""


class TangentialCrossingError(FlowError):
    """The trajectory touches the section without crossing it transversally."""


@dataclass(frozen=True)
class FlowConfig:
    abs_tol: float = 1e-13
    rel_tol: float = 1e-13
    max_step: float = math.inf
    event_tol: float = 1e-12
    horizon: float = 50.0
    method: str = "DOP853"

    def __post_init__(self):
        if self.abs_tol <= 0 or self.rel_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.event_tol < 1e-15:
            raise ValueError("event tolerance below machine precision scale")
        if self.method != "DOP853":
            raise ValueError(f"unsupported integrator {self.method!r}")


DEFAULT_FLOW = FlowConfig()


@dataclass(frozen=True)
class Section:
    """Hyperplane ``s[coordinate] == level`` with optional direction filter.

    ``direction`` is +1 (coordinate increasing), -1 (decreasing) or 0 (any).
    ``half_plane`` restricts accepted crossings, e.g. ``("x", 1)`` keeps only
    crossings with ``x > 0``.
    """

    coordinate: str = "y"
    level: float = 0.0
    direction: int = 0
    half_plane: Optional[tuple[str, int]] = None

    def __post_init__(self):
        if self.coordinate not in COORDINATES:
            raise ValueError(f"unknown coordinate {self.coordinate!r}")
        if self.direction not in (-1, 0, 1):
            raise ValueError("direction must be -1, 0 or +1")
        if self.half_plane is not None:
            coord, sign = self.half_plane
            if coord not in COORDINATES or sign not in (-1, 1):
                raise ValueError(f"bad half-plane constraint {self.half_plane!r}")

    @property
    def index(self) -> int:
        return COORDINATES[self.coordinate]

    def accepts(self, s: np.ndarray) -> bool:
        if self.half_plane is None:
            return True
        coord, sign = self.half_plane
        return sign * s[COORDINATES[coord]] > 0.0


@dataclass
class Crossing:
    state: np.ndarray
    time: float
    stm: Optional[np.ndarray] = None


def _solve(rhs, y0, t, cfg: FlowConfig, dense=False):
    if t == 0.0:
        return None
    sol = solve_ivp(
        rhs,
        (0.0, t),
        y0,
        method=cfg.method,
        rtol=cfg.rel_tol,
        atol=cfg.abs_tol,
        max_step=cfg.max_step,
        dense_output=dense,
    )
    if sol.status != 0:
        raise FlowError(sol.message)
    return sol


def flow(s, t: float, params: SystemParams = SystemParams(), cfg: FlowConfig = DEFAULT_FLOW):
    """Time-``t`` map of the circular problem (``t`` may be negative)."""
    s = np.asarray(s, dtype=float)
    sol = _solve(make_rhs(params), s, float(t), cfg)
    if sol is None:
        return s.copy()
    return sol.y[:, -1].copy()


def flow_with_variational(
    s, t: float, params: SystemParams = SystemParams(), cfg: FlowConfig = DEFAULT_FLOW
):
    """Return ``(Phi_t(s), DPhi_t(s))`` from the 20-dimensional variational system."""
    s = np.asarray(s, dtype=float)
    y0 = np.concatenate([s, np.eye(4).ravel()])
    sol = _solve(make_variational_rhs(params), y0, float(t), cfg)
    if sol is None:
        return s.copy(), np.eye(4)
    y = sol.y[:, -1]
    return y[:4].copy(), y[4:].reshape(4, 4).copy()


class Trajectory:
    """Dense-output trajectory of the circular problem on ``[t0, t1]``."""

    def __init__(self, sol, t0: float, t1: float):
        self._sol = sol
        self.t0 = t0
        self.t1 = t1

    @property
    def step_times(self) -> np.ndarray:
        return np.asarray(self._sol.t)

    def __call__(self, t):
        return self._sol.sol(t)


def propagate(
    s, t: float, params: SystemParams = SystemParams(), cfg: FlowConfig = DEFAULT_FLOW
) -> Trajectory:
    """Integrate over ``[0, t]`` keeping the continuous extension."""
    s = np.asarray(s, dtype=float)
    if t == 0.0:
        raise ValueError("zero-length trajectory")
    sol = _solve(make_rhs(params), s, float(t), cfg, dense=True)
    return Trajectory(sol, 0.0, float(t))


def propagate_variational(
    s, t: float, params: SystemParams = SystemParams(), cfg: FlowConfig = DEFAULT_FLOW
) -> Trajectory:
    """Dense trajectory of the state and its flattened 4x4 variational matrix."""
    s = np.asarray(s, dtype=float)
    if t == 0.0:
        raise ValueError("zero-length trajectory")
    y0 = np.concatenate([s, np.eye(4).ravel()])
    sol = _solve(make_variational_rhs(params), y0, float(t), cfg, dense=True)
    return Trajectory(sol, 0.0, float(t))


def _locate(dense, t_lo, t_hi, g_lo, idx, level, params, tol):
    """Safeguarded Newton for the section coordinate on a dense-output step."""
    a, b = t_lo, t_hi
    ga = g_lo
    gb = dense(t_hi)[idx] - level
    t = a - ga * (b - a) / (gb - ga)
    for _ in range(60):
        y = dense(t)
        g = y[idx] - level
        dg = vector_field(y, params)[idx]
        if g == 0.0:
            break
        if (g > 0) == (ga > 0):
            a, ga = t, g
        else:
            b, gb = t, g
        step = g / dg if dg != 0.0 else math.inf
        if abs(step) <= 4e-16 * max(1.0, abs(t)) or abs(g) < 1e-3 * tol:
            break
        t_new = t - step
        if not (min(a, b) < t_new < max(a, b)):
            t_new = 0.5 * (a + b)
        t = t_new
    return t


def section_crossings(
    s,
    sec: Section,
    n: int,
    params: SystemParams = SystemParams(),
    cfg: FlowConfig = DEFAULT_FLOW,
    horizon: Optional[float] = None,
    variational: bool = False,
) -> list[Crossing]:
    """Return the first ``n`` accepted crossings of ``sec`` for ``t > 0``.

    A crossing located on the dense output is polished by re-integrating the
    step up to the located time and taking one Newton correction with the
    exact vector field.  The starting point never counts as a crossing.
    """
    if n < 1:
        raise ValueError("n must be positive")
    horizon = cfg.horizon if horizon is None else horizon
    s = np.asarray(s, dtype=float)
    idx = sec.index
    level = sec.level
    if variational:
        rhs = make_variational_rhs(params)
        y0 = np.concatenate([s, np.eye(4).ravel()])
    else:
        rhs = make_rhs(params)
        y0 = s.copy()
    solver = DOP853(
        rhs,
        0.0,
        y0,
        horizon,
        rtol=cfg.rel_tol,
        atol=cfg.abs_tol,
        max_step=cfg.max_step,
    )
    found: list[Crossing] = []
    g_prev = y0[idx] - level
    while solver.status == "running":
        msg = solver.step()
        if solver.status == "failed":
            raise FlowError(msg or "integration failed")
        t_old, t_new = solver.t_old, solver.t
        g_new = solver.y[idx] - level
        if g_prev != 0.0 and (g_new == 0.0 or (g_new > 0) != (g_prev > 0)):
            dense = solver.dense_output()
            y_old = dense(t_old)
            t_c = _locate(dense, t_old, t_new, g_prev, idx, level, params, cfg.event_tol)
            y_c = _polish(rhs, y_old, t_old, t_c, cfg)
            f = vector_field(y_c[:4], params)
            rate = f[idx]
            if abs(rate) <= cfg.event_tol:
                raise TangentialCrossingError(
                    f"tangential crossing at t={t_c:.15g} (rate {rate:.3e})"
                )
            dt = -(y_c[idx] - level) / rate
            if dt != 0.0:
                y_c = _polish(rhs, y_c, t_c, t_c + dt, cfg)
                t_c = t_c + dt
            direction_ok = sec.direction == 0 or (rate > 0) == (sec.direction > 0)
            if direction_ok and sec.accepts(y_c):
                stm = y_c[4:].reshape(4, 4).copy() if variational else None
                found.append(Crossing(state=y_c[:4].copy(), time=t_c, stm=stm))
                if len(found) == n:
                    return found
        if g_new != 0.0:
            g_prev = g_new
    raise NoCrossingError(
        f"only {len(found)} of {n} crossings of {sec.coordinate}={level} "
        f"within horizon {horizon}"
    )


def _polish(rhs, y0, t0, t1, cfg: FlowConfig):
    if t1 == t0:
        return np.array(y0, dtype=float)
    sol = solve_ivp(
        rhs,
        (t0, t1),
        y0,
        method=cfg.method,
        rtol=cfg.rel_tol,
        atol=cfg.abs_tol,
    )
    if sol.status != 0:
        raise FlowError(sol.message)
    return sol.y[:, -1].copy()


def poincare_map(
    s,
    sec: Section,
    n: int = 1,
    params: SystemParams = SystemParams(),
    cfg: FlowConfig = DEFAULT_FLOW,
    horizon: Optional[float] = None,
):
    """State at the ``n``-th accepted crossing and the elapsed time."""
    c = section_crossings(s, sec, n, params, cfg, horizon)[-1]
    return c.state, c.time


def poincare_map_variational(
    s,
    sec: Section,
    n: int = 1,
    params: SystemParams = SystemParams(),
    cfg: FlowConfig = DEFAULT_FLOW,
    horizon: Optional[float] = None,
) -> Crossing:
    """Like :func:`poincare_map` but also returns ``DPhi_t`` at the crossing time."""
    return section_crossings(s, sec, n, params, cfg, horizon, variational=True)[-1]
