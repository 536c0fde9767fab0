"""Lyapunov periodic orbits around the collinear point between the primaries.

Orbits are labelled by their left crossing ``x*`` of the x-axis and found by
symmetric shooting: starting from ``q = (x*, 0, 0, p_y)`` the half-turn to
``y = 0`` must land with ``p_x = 0``; the reversing symmetry then closes the
orbit.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.interpolate import BarycentricInterpolator, CubicSpline
from scipy.optimize import brentq

from .dynamics import (
    TWO_PI,
    SystemParams,
    energy,
    energy_gradient,
    vector_field_jacobian,
)
from .flow import (
    DEFAULT_FLOW,
    FlowConfig,
    FlowError,
    Section,
    flow,
    poincare_map_variational,
)

DEFAULT_INTERVAL = (-0.955, -0.945)
PAPER_NODES = (-0.955, -0.9525, -0.95, -0.9475, -0.945)
POLYNOMIAL_NODES_MAX = 7


class ConvergenceError(RuntimeError):
    pass


class ContinuationError(RuntimeError):
    """Continuation of the family broke down (fold or lost solver basin)."""


class DerivativeError(ValueError):
    pass


@dataclass(frozen=True)
class LyapunovOrbit:
    x_star: float
    kappa: float
    period: float
    energy: float
    residual: float = 0.0

    @property
    def q(self) -> np.ndarray:
        """Symmetric starting point ``(x*, 0, 0, kappa)``."""
        return np.array([self.x_star, 0.0, 0.0, self.kappa])

    @property
    def frequency(self) -> float:
        return TWO_PI / self.period


def inner_libration_point(params: SystemParams = SystemParams()) -> float:
    """x-coordinate of the collinear equilibrium between the two primaries."""
    mu = params.mu

    def om_x(x):
        d1 = x - mu
        d2 = x + 1.0 - mu
        return x - (1.0 - mu) * d1 / abs(d1) ** 3 - mu * d2 / abs(d2) ** 3

    lo = -1.0 + mu + 1e-9
    hi = mu - 1e-9
    return brentq(om_x, lo, hi, xtol=1e-15, rtol=1e-15, maxiter=200)


def linear_seed(params: SystemParams = SystemParams()) -> tuple[float, float]:
    """Libration point ``x_L`` and slope ``d p_y / d x*`` of the linear family."""
    xl = inner_libration_point(params)
    jac = vector_field_jacobian(np.array([xl, 0.0, 0.0, xl]), params)
    vals, vecs = np.linalg.eig(jac)
    k = int(np.argmax(np.where(np.abs(vals.real) < 1e-9, vals.imag, -np.inf)))
    w = vecs[:, k] / vecs[0, k]
    return xl, float(w[3].real)


def _half_turn_section(x_star: float, p_y: float) -> Section:
    # y-velocity at the start is p_y - x*; the half turn crosses the other way
    return Section("y", 0.0, direction=-1 if p_y - x_star > 0 else 1)


def half_turn_residual(
    x_star: float,
    p_y: float,
    params: SystemParams = SystemParams(),
    cfg: FlowConfig = DEFAULT_FLOW,
):
    """Residual ``p_x`` after the half turn, its slope in ``p_y`` and the time."""
    q = np.array([x_star, 0.0, 0.0, p_y])
    c = poincare_map_variational(q, _half_turn_section(x_star, p_y), 1, params, cfg)
    s, m = c.state, c.stm
    x, y, px, py = s
    ydot = py - x
    pxdot = (py - x) + x - _dUx(x, y, params)
    # crossing time shifts with p_y; correct the slope for it
    slope = m[2, 3] - pxdot / ydot * m[1, 3]
    return px, slope, c.time


def _dUx(x, y, params):
    mu = params.mu
    d1 = x - mu
    d2 = x + 1.0 - mu
    r1 = math.hypot(d1, y)
    r2 = math.hypot(d2, y)
    return (1.0 - mu) * d1 / r1**3 + mu * d2 / r2**3


def solve_lyapunov(
    x_star: float,
    p_y_guess: float,
    params: SystemParams = SystemParams(),
    cfg: FlowConfig = DEFAULT_FLOW,
    tol: float = 1e-12,
    max_iter: int = 50,
) -> LyapunovOrbit:
    """Newton on ``p_y`` for the symmetric half-turn condition.

    The Newton step uses the variational derivative.  Steps that do not reduce
    the residual are halved; once a sign change is bracketed, iterates that
    leave the bracket fall back to bisection.
    """
    p = float(p_y_guess)
    try:
        r, d, t_half = half_turn_residual(x_star, p, params, cfg)
    except FlowError as exc:
        raise ConvergenceError(f"no half-turn crossing from guess {p}: {exc}") from exc
    lo = hi = None
    for _ in range(max_iter):
        if abs(r) < tol:
            return LyapunovOrbit(
                x_star=float(x_star),
                kappa=float(p),
                period=float(2.0 * t_half),
                energy=float(energy(np.array([x_star, 0.0, 0.0, p]), params)),
                residual=float(r),
            )
        if r > 0:
            hi = p
        else:
            lo = p
        step = -r / d if d != 0.0 else 0.0
        accepted = False
        for _ in range(30):
            trial = p + step
            if lo is not None and hi is not None and not (
                min(lo, hi) < trial < max(lo, hi)
            ):
                trial = 0.5 * (lo + hi)
            try:
                rt, dt_, tt = half_turn_residual(x_star, trial, params, cfg)
            except FlowError:
                step *= 0.5
                continue
            if abs(rt) < abs(r) or (lo is not None and hi is not None):
                p, r, d, t_half = trial, rt, dt_, tt
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
    raise ConvergenceError(
        f"symmetric shooting did not converge at x*={x_star} (|p_x|={abs(r):.3e})"
    )


def continue_to(
    x_targets: Sequence[float],
    params: SystemParams = SystemParams(),
    cfg: FlowConfig = DEFAULT_FLOW,
    max_step: float = 2.5e-3,
    first_amplitude: float = 1e-3,
) -> list[LyapunovOrbit]:
    """Natural-parameter continuation from the libration point leftwards.

    ``x_targets`` must lie left of the libration point; orbits are returned in
    the order of ``x_targets``.
    """
    xl, slope = linear_seed(params)
    targets = sorted(set(float(x) for x in x_targets), reverse=True)
    if targets and targets[0] >= xl:
        raise ValueError("targets must lie left of the libration point")
    x = xl - first_amplitude
    orb = solve_lyapunov(x, xl + slope * (x - xl), params, cfg)
    prev: Optional[LyapunovOrbit] = None
    solved: dict[float, LyapunovOrbit] = {}
    step = max_step
    for target in targets:
        while orb.x_star > target:
            x_next = max(target, orb.x_star - step)
            if prev is None:
                guess = orb.kappa + slope * (x_next - orb.x_star)
            else:
                sec = (orb.kappa - prev.kappa) / (orb.x_star - prev.x_star)
                guess = orb.kappa + sec * (x_next - orb.x_star)
            try:
                nxt = solve_lyapunov(x_next, guess, params, cfg)
            except ConvergenceError:
                step *= 0.5
                if step < 1e-6:
                    raise ContinuationError(f"continuation stalled near x*={orb.x_star}")
                continue
            if prev is not None:
                s_old = (orb.kappa - prev.kappa) / (orb.x_star - prev.x_star)
                s_new = (nxt.kappa - orb.kappa) / (nxt.x_star - orb.x_star)
                if s_old * s_new <= 0:
                    raise ContinuationError(f"fold detected near x*={nxt.x_star}")
            prev, orb = orb, nxt
            step = min(max_step, 1.5 * step)
        solved[target] = orb
    return [solved[float(x)] for x in x_targets]


@dataclass
class Family:
    """Lyapunov orbits sampled over a closed interval of ``x*``."""

    interval: tuple[float, float]
    orbits: list[LyapunovOrbit]
    params: SystemParams = field(default_factory=SystemParams)

    def __post_init__(self):
        lo, hi = self.interval
        if not lo <= hi:
            raise ValueError("interval must satisfy lo <= hi")
        self.orbits = sorted(self.orbits, key=lambda o: o.x_star)
        xs = [o.x_star for o in self.orbits]
        if any(b <= a for a, b in zip(xs, xs[1:])):
            raise ValueError("family nodes must be strictly ordered")

    @property
    def x_nodes(self) -> np.ndarray:
        return np.array([o.x_star for o in self.orbits])

    def _interp(self, values, x):
        xs = self.x_nodes
        if len(xs) == 1:
            return float(values[0])
        if len(xs) == 2:
            slope = (values[1] - values[0]) / (xs[1] - xs[0])
            return float(values[0] + slope * (x - xs[0]))
        if len(xs) <= POLYNOMIAL_NODES_MAX:
            # few nodes over a short interval: the full interpolating
            # polynomial is an order of magnitude closer than a cubic spline
            return float(BarycentricInterpolator(xs, values)(x))
        return float(CubicSpline(xs, values)(x))

    def kappa(self, x: float) -> float:
        return self._interp([o.kappa for o in self.orbits], x)

    def period(self, x: float) -> float:
        return self._interp([o.period for o in self.orbits], x)

    def energy(self, x: float) -> float:
        return self._interp([o.energy for o in self.orbits], x)

    def nearest(self, x: float) -> LyapunovOrbit:
        return min(self.orbits, key=lambda o: abs(o.x_star - x))

    def orbit_at(
        self, x: float, cfg: FlowConfig = DEFAULT_FLOW
    ) -> LyapunovOrbit:
        """Solve the orbit at ``x`` seeded from the interpolated family."""
        for o in self.orbits:
            if o.x_star == x:
                return o
        return solve_lyapunov(x, self.kappa(x), self.params, cfg)

    def to_rows(self) -> list[dict]:
        return [
            {"x_star": o.x_star, "kappa": o.kappa, "period": o.period, "energy": o.energy}
            for o in self.orbits
        ]

    def to_json(self) -> dict:
        return {
            "mu": self.params.mu,
            "interval": list(self.interval),
            "orbits": [asdict(o) for o in self.orbits],
        }

    @classmethod
    def from_json(cls, data: dict) -> "Family":
        return cls(
            interval=tuple(data["interval"]),
            orbits=[LyapunovOrbit(**o) for o in data["orbits"]],
            params=SystemParams(mu=data["mu"]),
        )


def scan_family(
    interval: tuple[float, float] = DEFAULT_INTERVAL,
    n_nodes: int = 5,
    params: SystemParams = SystemParams(),
    cfg: FlowConfig = DEFAULT_FLOW,
) -> Family:
    """Uniform nodes over ``interval`` (a single node sits at its midpoint)."""
    lo, hi = interval
    if not lo < hi:
        raise ValueError("interval must satisfy lo < hi")
    if n_nodes < 1:
        raise ValueError("need at least one node")
    if n_nodes == 1:
        nodes = [0.5 * (lo + hi)]
    else:
        nodes = [round(float(v), 12) for v in np.linspace(lo, hi, n_nodes)]
    orbits = continue_to(nodes, params, cfg)
    return Family(interval=(lo, hi), orbits=orbits, params=params)


def parameterize_k0(
    orb: LyapunovOrbit,
    theta: float,
    params: SystemParams = SystemParams(),
    cfg: FlowConfig = DEFAULT_FLOW,
) -> np.ndarray:
    """Point of the orbit at angle ``theta`` (angle 0 is ``q(x*)``)."""
    return flow(orb.q, (theta % TWO_PI) * orb.period / TWO_PI, params, cfg)


@dataclass(frozen=True)
class DerivativeEstimate:
    value: float
    error: float
    low_confidence: bool = False
    symmetric: float = math.nan

    def __float__(self):
        return self.value


def _stencil(f_m2, f_m1, f_p1, f_p2, h):
    d1 = (f_p1 - f_m1) / (2.0 * h)
    d2 = (f_p2 - f_m2) / (4.0 * h)
    d4 = (4.0 * d1 - d2) / 3.0
    return d4, d1, d2


def _local_orbits(fam: Family, x_star: float, step: float, cfg: FlowConfig):
    return [
        fam.orbit_at(x_star + k * step, cfg) if k else None
        for k in (-2, -1, 0, 1, 2)
    ]


def family_derivative(
    fam: Family,
    x_star: float,
    quantity: str,
    step: float = 2.5e-4,
    cfg: FlowConfig = DEFAULT_FLOW,
) -> DerivativeEstimate:
    """Derivative of ``period``, ``energy`` or ``kappa`` along the family.

    Orbits are solved at ``x* +- step`` and ``x* +- 2 step``.  The returned
    value is the 4-point stencil; its distance from the 2-point symmetric
    difference is the error estimate (step-halving).
    """
    lo, hi = fam.interval
    if not lo < hi:
        raise DerivativeError("zero-width interval has no derivative")
    if quantity not in ("period", "energy", "kappa"):
        raise ValueError(f"unknown quantity {quantity!r}")
    if len(fam.orbits) == 2:
        a, b = fam.orbits
        slope = (getattr(a, quantity) - getattr(b, quantity)) / (a.x_star - b.x_star)
        return DerivativeEstimate(slope, abs(slope), low_confidence=True, symmetric=slope)
    if not lo <= x_star <= hi:
        raise DerivativeError(f"x*={x_star} outside family interval {fam.interval}")
    orbs = _local_orbits(fam, x_star, step, cfg)
    vals = [getattr(o, quantity) if o is not None else 0.0 for o in orbs]
    d4, d1, _ = _stencil(vals[0], vals[1], vals[3], vals[4], step)
    err = abs(d4 - d1)
    if err > 0.1 * abs(d4):
        raise DerivativeError(
            f"d{quantity}/dx* at {x_star}: error {err:.3e} exceeds 10% of {d4:.3e}"
        )
    return DerivativeEstimate(d4, err, symmetric=d1)


def period_derivative(fam: Family, x_star: float, step: float = 2.5e-4,
                      cfg: FlowConfig = DEFAULT_FLOW) -> DerivativeEstimate:
    return family_derivative(fam, x_star, "period", step, cfg)


def energy_derivative(fam: Family, x_star: float, step: float = 2.5e-4,
                      cfg: FlowConfig = DEFAULT_FLOW) -> DerivativeEstimate:
    return family_derivative(fam, x_star, "energy", step, cfg)


def energy_derivative_chain_rule(
    fam: Family, x_star: float, step: float = 2.5e-4, cfg: FlowConfig = DEFAULT_FLOW
) -> float:
    """``dH/dx*`` as ``dH/dx + dH/dp_y * dkappa/dx*`` at ``q(x*)``."""
    orb = fam.orbit_at(x_star, cfg)
    grad = energy_gradient(orb.q, fam.params)
    dk = family_derivative(fam, x_star, "kappa", step, cfg).value
    return float(grad[0] + grad[3] * dk)


@dataclass
class HypothesisReport:
    """Twist and energy-monotonicity checks over the family."""

    points: list[float]
    period_derivatives: list[DerivativeEstimate]
    energy_derivatives: list[DerivativeEstimate]
    min_margin_ratio: float = 10.0

    @staticmethod
    def _ok(ests, ratio):
        signs = {math.copysign(1.0, e.value) for e in ests}
        return len(signs) == 1 and all(
            e.value != 0.0 and abs(e.value) >= ratio * e.error for e in ests
        )

    @property
    def twist_ok(self) -> bool:
        return self._ok(self.period_derivatives, self.min_margin_ratio)

    @property
    def energy_ok(self) -> bool:
        return self._ok(self.energy_derivatives, self.min_margin_ratio)

    @property
    def passed(self) -> bool:
        return self.twist_ok and self.energy_ok

    def to_json(self) -> dict:
        return {
            "points": self.points,
            "dT_dx": [asdict(e) for e in self.period_derivatives],
            "dH_dx": [asdict(e) for e in self.energy_derivatives],
            "twist_ok": self.twist_ok,
            "energy_ok": self.energy_ok,
        }


def check_kam_hypotheses(
    fam: Family,
    points: Optional[Sequence[float]] = None,
    step: float = 2.5e-4,
    cfg: FlowConfig = DEFAULT_FLOW,
) -> HypothesisReport:
    """Evaluate ``dT/dx*`` and ``dH(q(x*))/dx*`` at the family nodes."""
    if points is None:
        points = list(fam.x_nodes)
    pts = [float(p) for p in points]
    return HypothesisReport(
        points=pts,
        period_derivatives=[period_derivative(fam, p, step, cfg) for p in pts],
        energy_derivatives=[energy_derivative(fam, p, step, cfg) for p in pts],
    )


def write_family_csv(fam: Family, path, header_comment: Optional[str] = None):
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.DictWriter(fh, fieldnames=["x_star", "kappa", "period", "energy"])
        writer.writeheader()
        for row in fam.to_rows():
            writer.writerow({k: repr(float(v)) for k, v in row.items()})


def read_family_csv(path, interval=None, params: SystemParams = SystemParams()) -> Family:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    orbits = [
        LyapunovOrbit(
            x_star=float(r["x_star"]),
            kappa=float(r["kappa"]),
            period=float(r["period"]),
            energy=float(r["energy"]),
        )
        for r in rows
    ]
    if interval is None:
        interval = (min(o.x_star for o in orbits), max(o.x_star for o in orbits))
    return Family(interval=tuple(interval), orbits=orbits, params=params)


def dump_family_json(fam: Family, path):
    with open(path, "w") as fh:
        json.dump(fam.to_json(), fh, indent=2, sort_keys=True)


def load_family_json(path) -> Family:
    with open(path) as fh:
        return Family.from_json(json.load(fh))
