"""Unstable fibers of Lyapunov orbits and their symmetric homoclinic points.

A point ``q_h = q(x*) + h v`` with ``v`` the unstable eigenvector of the
monodromy matrix lies, to second order in ``h``, on the unstable fiber of
``q(x*)``.  Following it to the half-section ``{y = 0, x > 0}`` and asking for
``p_x = 0`` there picks out the two homoclinic orbits that are fixed by the
reversing symmetry.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import brentq

from .dynamics import (
    J4,
    TWO_PI,
    SystemParams,
    energy,
    energy_gradient,
    vector_field,
)
from .flow import (
    DEFAULT_FLOW,
    Crossing,
    FlowConfig,
    FlowError,
    Section,
    flow,
    flow_with_variational,
    section_crossings,
)
from .orbits import Family, LyapunovOrbit, parameterize_k0

POSITIVE_HALF_SECTION = Section("y", 0.0, direction=0, half_plane=("x", 1))

#: Largest fiber offset swept; the seed gap to the orbit never exceeds it.
FIBER_OFFSET_MAX = 1e-8


class MonodromyError(RuntimeError):
    pass


class HomoclinicError(RuntimeError):
    pass


def normalize_first(v, rel_tol: float = 1e-6) -> np.ndarray:
    """Scale ``v`` so its first non-negligible component equals +1."""
    v = np.asarray(v, dtype=float)
    scale = np.max(np.abs(v))
    if scale == 0.0:
        raise ValueError("cannot normalize the zero vector")
    for c in v:
        if abs(c) > rel_tol * scale:
            return v / c
    raise AssertionError("unreachable")


def reduce_angle(theta: float) -> float:
    """Reduce to ``(-pi, pi]``."""
    r = math.remainder(theta, TWO_PI)
    return math.pi if r == -math.pi else r


@dataclass
class MonodromyData:
    """Spectral data of ``A = DPhi_T(q(x*))``.

    The two trivial multipliers are deflated through the exact right
    eigenvector ``F(q)`` and left eigenvector ``grad H(q)``; the raw pair from
    a dense eigen-solver is kept as ``raw_unit_pair`` for reference.
    """

    matrix: np.ndarray
    lambda_u: float
    lambda_s: float
    unit_multipliers: tuple[float, float]
    unstable_vector: np.ndarray
    stable_vector: np.ndarray
    raw_unit_pair: tuple[complex, complex]

    @property
    def eigenvalues(self) -> tuple[float, float, float, float]:
        return (self.lambda_u, self.lambda_s, *self.unit_multipliers)

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.matrix))

    def symplectic_defect(self) -> float:
        a = self.matrix
        return float(np.max(np.abs(a.T @ J4 @ a - J4)))


def monodromy(
    orb: LyapunovOrbit,
    params: SystemParams = SystemParams(),
    cfg: FlowConfig = DEFAULT_FLOW,
    tol: float = 1e-6,
) -> MonodromyData:
    q = orb.q
    end, a = flow_with_variational(q, orb.period, params, cfg)
    vals, vecs = np.linalg.eig(a)
    order = np.argsort(-np.abs(vals))
    vals = vals[order]
    vecs = vecs[:, order]
    lu, ls = vals[0], vals[-1]
    if abs(lu.imag) > tol or abs(ls.imag) > tol or not abs(lu) > 1.0 > abs(ls):
        raise MonodromyError(f"monodromy is not hyperbolic: {vals}")
    f = vector_field(q, params)
    g = energy_gradient(q, params)
    mu_flow = float(f @ a @ f / (f @ f))
    mu_energy = float(g @ a @ g / (g @ g))
    if abs(lu.real * ls.real - 1.0) > tol:
        raise MonodromyError(f"hyperbolic pair not reciprocal: {lu} * {ls}")
    if abs(mu_flow - 1.0) > tol or abs(mu_energy - 1.0) > tol:
        raise MonodromyError(f"trivial multipliers off unity: {mu_flow}, {mu_energy}")
    return MonodromyData(
        matrix=a,
        lambda_u=float(lu.real),
        lambda_s=float(ls.real),
        unit_multipliers=(mu_flow, mu_energy),
        unstable_vector=normalize_first(vecs[:, 0].real),
        stable_vector=normalize_first(vecs[:, -1].real),
        raw_unit_pair=(complex(vals[1]), complex(vals[2])),
    )


@dataclass
class HomoclinicPoint:
    """Symmetric homoclinic point on ``{y = 0, p_x = 0, x > 0}`` and its seed."""

    branch: int
    x_star: float
    point: np.ndarray
    h: float
    tau: float
    omega: float
    tangent: np.ndarray
    crossings: int
    period: float
    linearization_shift: float = math.nan
    alt_h: float = math.nan
    alt_tau: float = math.nan

    def seed(self, mono: MonodromyData, orb: LyapunovOrbit, alt: bool = False):
        """Fiber seed ``q + h v`` and the time it needs to reach the point."""
        h, tau = (self.alt_h, self.alt_tau) if alt else (self.h, self.tau)
        if math.isnan(h):
            raise HomoclinicError("no alternative seed was computed")
        return orb.q + h * mono.unstable_vector, tau

    def to_row(self) -> dict:
        row = {"x_star": self.x_star, "branch": self.branch}
        for name, c in zip(("x", "y", "px", "py"), self.point):
            row[f"p_{name}"] = float(c)
        row["omega"] = self.omega
        for name, c in zip(("x", "y", "px", "py"), self.tangent):
            row[f"v_{name}"] = float(c)
        row.update(
            h=self.h,
            tau=self.tau,
            crossings=self.crossings,
            period=self.period,
            linearization_shift=self.linearization_shift,
            alt_h=self.alt_h,
            alt_tau=self.alt_tau,
        )
        return row

    @classmethod
    def from_row(cls, row: dict) -> "HomoclinicPoint":
        f = lambda k: float(row[k])  # noqa: E731
        return cls(
            branch=int(row["branch"]),
            x_star=f("x_star"),
            point=np.array([f("p_x"), f("p_y"), f("p_px"), f("p_py")]),
            h=f("h"),
            tau=f("tau"),
            omega=f("omega"),
            tangent=np.array([f("v_x"), f("v_y"), f("v_px"), f("v_py")]),
            crossings=int(row["crossings"]),
            period=f("period"),
            linearization_shift=f("linearization_shift"),
            alt_h=f("alt_h"),
            alt_tau=f("alt_tau"),
        )


def fiber_crossing(
    orb: LyapunovOrbit,
    mono: MonodromyData,
    h: float,
    crossings: int = 1,
    params: SystemParams = SystemParams(),
    cfg: FlowConfig = DEFAULT_FLOW,
    variational: bool = False,
) -> Crossing:
    """Follow ``q + h v`` to its ``crossings``-th hit of ``{y = 0, x > 0}``."""
    q_h = orb.q + h * mono.unstable_vector
    return section_crossings(
        q_h, POSITIVE_HALF_SECTION, crossings, params, cfg, variational=variational
    )[-1]


@dataclass
class FiberSweep:
    """Samples of ``h -> p_x`` over one fundamental domain of the fiber."""

    crossings: int
    h: np.ndarray
    px: np.ndarray
    x: np.ndarray
    brackets: dict = field(default_factory=dict)


def sweep_fiber(
    orb: LyapunovOrbit,
    mono: MonodromyData,
    params: SystemParams = SystemParams(),
    cfg: FlowConfig = DEFAULT_FLOW,
    n_samples: int = 48,
    h_max: float = FIBER_OFFSET_MAX,
    max_crossings: int = 3,
) -> FiberSweep:
    """Locate brackets for both symmetric branches by a coarse sweep in ``h``.

    The offsets ``h`` and ``lambda_u h`` seed the same orbit one period apart,
    so sweeping ``[h_max / lambda_u, h_max]`` covers the whole fiber.  The
    crossing count is increased until exactly two sign changes of ``p_x`` are
    found; branch 1 is the one with the smaller ``x``.
    """
    hs = np.geomspace(h_max / mono.lambda_u, h_max, n_samples)
    for n in range(1, max_crossings + 1):
        px = np.full(n_samples, np.nan)
        xs = np.full(n_samples, np.nan)
        for k, h in enumerate(hs):
            try:
                c = fiber_crossing(orb, mono, h, n, params, cfg)
            except FlowError:
                continue
            px[k] = c.state[2]
            xs[k] = c.state[0]
        roots = []
        for k in range(n_samples - 1):
            a, b = px[k], px[k + 1]
            if np.isfinite(a) and np.isfinite(b) and a * b < 0:
                roots.append((0.5 * (xs[k] + xs[k + 1]), (hs[k], hs[k + 1])))
        if len(roots) == 2:
            roots.sort()
            return FiberSweep(
                crossings=n,
                h=hs,
                px=px,
                x=xs,
                brackets={1: roots[0][1], 2: roots[1][1]},
            )
    raise HomoclinicError(
        f"could not isolate two symmetric homoclinic points for x*={orb.x_star}"
    )


def _solve_h(orb, mono, bracket, crossings, params, cfg):
    def px(h):
        return fiber_crossing(orb, mono, h, crossings, params, cfg).state[2]

    a, b = bracket
    if px(a) * px(b) > 0:
        raise HomoclinicError(f"no sign change of p_x on bracket {bracket}")
    return brentq(px, a, b, xtol=abs(a) * 1e-14, rtol=1e-14, maxiter=200)


def _bracket_near(orb, mono, h_hint, crossings, params, cfg):
    def px(h):
        return fiber_crossing(orb, mono, h, crossings, params, cfg).state[2]

    f0 = px(h_hint)
    for factor in (1.01, 1.03, 1.1, 1.25, 1.5, 2.0):
        lo, hi = h_hint / factor, h_hint * factor
        if px(lo) * f0 <= 0:
            return (lo, h_hint)
        if f0 * px(hi) <= 0:
            return (h_hint, hi)
    raise HomoclinicError(f"no sign change of p_x near h={h_hint:.3e}")


@dataclass
class _SectionFit:
    point: np.ndarray
    h: float
    tau: float
    tangent: np.ndarray
    residual: float


def _fit_on_section(orb, mono, h0, crossings, params, cfg, width, n_samples=11):
    """Place the symmetric point on the computed section curve of the fiber.

    Near the orbit, errors of the integrator grow along the unstable
    direction, so crossings of nearby seeds are displaced along the fiber's
    section curve but stay on it.  Sampling that curve over a ``p_x`` window of
    half-width ``width`` and fitting ``x``, ``p_y``, ``tau`` and ``h`` as cubics in
    ``p_x`` recovers the point with ``p_x = 0`` well below the shooting noise.
    ``residual`` is the largest misfit of the samples.
    """
    c0 = fiber_crossing(orb, mono, h0, crossings, params, cfg, variational=True)
    w = c0.stm @ mono.unstable_vector
    f = vector_field(c0.state, params)
    slope = w[2] - f[2] / f[1] * w[1]
    hs = h0 + np.linspace(-1.0, 1.0, n_samples) * width / abs(slope)
    cs = [fiber_crossing(orb, mono, h, crossings, params, cfg) for h in hs]
    px = np.array([c.state[2] for c in cs])
    if not px.min() < 0.0 < px.max():
        raise HomoclinicError("fit window on the fiber section curve misses p_x = 0")
    cols = {
        "x": np.array([c.state[0] for c in cs]),
        "py": np.array([c.state[3] for c in cs]),
        "tau": np.array([c.time for c in cs]),
        "h": hs,
    }
    at_zero = {}
    residual = 0.0
    for name, vals in cols.items():
        coef = np.polyfit(px, vals, 3)
        at_zero[name] = float(np.polyval(coef, 0.0))
        if name in ("x", "py"):
            residual = max(residual, float(np.max(np.abs(np.polyval(coef, px) - vals))))
    point = np.array([at_zero["x"], 0.0, 0.0, at_zero["py"]])
    return _SectionFit(point, at_zero["h"], at_zero["tau"], normalize_first(w), residual)


def find_symmetric_homoclinic(
    orb: LyapunovOrbit,
    branch: int,
    h_bracket: Optional[tuple[float, float]] = None,
    params: SystemParams = SystemParams(),
    cfg: FlowConfig = DEFAULT_FLOW,
    mono: Optional[MonodromyData] = None,
    crossings: int = 1,
    hint: Optional[HomoclinicPoint] = None,
    validate: bool = True,
    fit_width: float = 1e-3,
    fit_tol: float = 1e-10,
) -> HomoclinicPoint:
    """Solve for the fiber offset whose orbit hits ``{y = 0, x > 0}`` at ``p_x = 0``.

    The bracket comes from, in order of preference, ``h_bracket``, a nearby
    solution ``hint`` (used during continuation in ``x*``), or a fresh fiber
    sweep.  A root of ``p_x(h)`` found by bisection is refined by fitting the
    fiber's section curve (see :func:`_fit_on_section`).  With ``validate``
    the same point is recovered from the next-smaller fiber offset (about
    ``h / lambda_u``, one period longer); the distance between the two
    recovered points is stored as ``linearization_shift``.
    """
    if branch not in (1, 2):
        raise ValueError("branch must be 1 or 2")
    if mono is None:
        mono = monodromy(orb, params, cfg)
    if h_bracket is None:
        if hint is not None:
            crossings = hint.crossings
            h_bracket = _bracket_near(orb, mono, hint.h, crossings, params, cfg)
        else:
            sweep = sweep_fiber(orb, mono, params, cfg)
            crossings = sweep.crossings
            h_bracket = sweep.brackets[branch]
    h0 = _solve_h(orb, mono, h_bracket, crossings, params, cfg)
    fit = _fit_on_section(orb, mono, h0, crossings, params, cfg, fit_width)
    if fit.residual > fit_tol:
        raise HomoclinicError(
            f"section-curve fit residual {fit.residual:.2e} exceeds {fit_tol:.0e}"
        )
    p = fit.point
    if abs(energy(p, params) - orb.energy) > 1e-9:
        raise HomoclinicError("homoclinic point left the energy level")
    hp = HomoclinicPoint(
        branch=branch,
        x_star=orb.x_star,
        point=p,
        h=fit.h,
        tau=fit.tau,
        omega=reduce_angle(TWO_PI * fit.tau / orb.period),
        tangent=fit.tangent,
        crossings=crossings,
        period=orb.period,
    )
    if validate:
        lam = mono.lambda_u
        try:
            h_alt = _solve_h(
                orb, mono, (h_bracket[0] / lam, h_bracket[1] / lam), crossings, params, cfg
            )
        except HomoclinicError:
            h_alt = _solve_h(
                orb, mono,
                _bracket_near(orb, mono, hp.h / lam, crossings, params, cfg),
                crossings, params, cfg,
            )
        alt = _fit_on_section(orb, mono, h_alt, crossings, params, cfg, fit_width)
        hp.linearization_shift = float(np.max(np.abs(alt.point - p)))
        hp.alt_h = alt.h
        hp.alt_tau = alt.tau
    return hp


def homoclinic_pair(
    orb: LyapunovOrbit,
    params: SystemParams = SystemParams(),
    cfg: FlowConfig = DEFAULT_FLOW,
    hints: Optional[dict] = None,
    validate: bool = True,
) -> dict[int, HomoclinicPoint]:
    """Both symmetric homoclinic points of one orbit, keyed by branch."""
    mono = monodromy(orb, params, cfg)
    if hints:
        return {
            b: find_symmetric_homoclinic(
                orb, b, params=params, cfg=cfg, mono=mono, hint=hints[b], validate=validate
            )
            for b in (1, 2)
        }
    sweep = sweep_fiber(orb, mono, params, cfg)
    return {
        b: find_symmetric_homoclinic(
            orb, b, sweep.brackets[b], params, cfg, mono, sweep.crossings, validate=validate
        )
        for b in (1, 2)
    }


@dataclass
class ChannelSpans:
    """Tangent data of a homoclinic channel at its symmetric point."""

    dp_dx: np.ndarray
    flow_direction: np.ndarray
    dp_dx_raw: np.ndarray
    dp_dx_error: float


def channel_tangent_spans(
    hp: HomoclinicPoint,
    fam: Family,
    params: SystemParams = SystemParams(),
    cfg: FlowConfig = DEFAULT_FLOW,
    step: float = 2.5e-4,
) -> ChannelSpans:
    """``d p_i / d x*`` by central differences, and the flow direction ``F(p_i)``."""
    pts = {}
    for k in (-2, -1, 1, 2):
        x = hp.x_star + k * step / 2.0
        orb = fam.orbit_at(x, cfg)
        pts[k] = find_symmetric_homoclinic(
            orb, hp.branch, params=params, cfg=cfg, hint=hp, validate=False
        ).point
    d_full = (pts[2] - pts[-2]) / (2.0 * step)
    d_half = (pts[1] - pts[-1]) / step
    d = (4.0 * d_half - d_full) / 3.0
    err = float(np.linalg.norm(d_half - d_full))
    if err > 0.1 * np.linalg.norm(d):
        raise HomoclinicError(
            f"d p/dx* error estimate {err:.3e} exceeds 10% of its norm"
        )
    return ChannelSpans(
        dp_dx=normalize_first(d),
        flow_direction=normalize_first(vector_field(hp.point, params)),
        dp_dx_raw=d,
        dp_dx_error=err,
    )


@dataclass
class TransversalityReport:
    matrix: np.ndarray
    singular_values: np.ndarray
    threshold: float = 1e-3

    @property
    def smallest(self) -> float:
        return float(self.singular_values[-1])

    @property
    def passed(self) -> bool:
        return bool(np.all(np.isfinite(self.matrix))) and self.smallest > self.threshold


def check_transversality(
    tangent, spans: ChannelSpans, threshold: float = 1e-3
) -> TransversalityReport:
    """Rank test of ``[v_i; d p_i/dx*; F(p_i)]`` after row normalization.

    ``tangent`` may be a :class:`HomoclinicPoint` or a bare vector.
    """
    v = tangent.tangent if isinstance(tangent, HomoclinicPoint) else tangent
    rows = np.array([v, spans.dp_dx, spans.flow_direction], dtype=float)
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        rows = rows / norms
    if not np.all(np.isfinite(rows)):
        return TransversalityReport(rows, np.zeros(3), threshold)
    sv = np.linalg.svd(rows, compute_uv=False)
    return TransversalityReport(rows, sv, threshold)


@dataclass(frozen=True)
class HomoclinicChannel:
    """Channel ``(branch, index)``; ``index`` selects the lift of the angle."""

    branch: int
    index: int

    def __post_init__(self):
        if self.branch not in (1, 2) or self.index not in (1, 2):
            raise ValueError("branch and index must be 1 or 2")

    @property
    def theta_domain(self) -> tuple[float, float]:
        if self.index == 1:
            return (-TWO_PI + math.pi / 8.0, math.pi / 8.0)
        return (0.0, TWO_PI)

    def contains(self, theta: float) -> bool:
        lo, hi = self.theta_domain
        return lo < theta < hi

    def lift(self, theta: float) -> float:
        """Representative of ``theta`` (mod 2 pi) inside the open domain."""
        lo, hi = self.theta_domain
        t = lo + (theta - lo) % TWO_PI
        if not lo < t < hi:
            raise ValueError(f"angle {theta} falls on the excluded end of {self}")
        return t


CHANNELS = tuple(HomoclinicChannel(i, j) for i in (1, 2) for j in (1, 2))


def backward_approach(
    hp: HomoclinicPoint,
    orb: LyapunovOrbit,
    mono: MonodromyData,
    params: SystemParams = SystemParams(),
    cfg: FlowConfig = DEFAULT_FLOW,
    linear_regime: float = 1e-3,
):
    """Distances ``d(n) = |Phi_{-nT}(p_i) - k0(x*, omega_i)|`` and their decay.

    The backward orbit of ``p_i`` is read off the forward orbit of its fiber
    seed (the longer alternative seed when available), which avoids the
    instability of integrating ``p_i`` backwards.  The per-period contraction
    factor is fitted on the distances below ``linear_regime`` and should be
    close to ``lambda_u``.  Returns ``(distances, factor)`` with ``distances[n-1]``
    holding ``d(n)``.
    """
    alt = not math.isnan(hp.alt_h)
    q_h, tau = hp.seed(mono, orb, alt=alt)
    base = parameterize_k0(orb, hp.omega, params, cfg)
    dists = []
    n = 1
    while tau - n * orb.period >= 0.0:
        z = flow(q_h, tau - n * orb.period, params, cfg)
        dists.append(float(np.linalg.norm(z - base)))
        n += 1
    dists = np.array(dists)
    idx = np.flatnonzero(dists < linear_regime)
    if idx.size < 2:
        return dists, math.nan
    slope = np.polyfit(idx + 1.0, np.log(dists[idx]), 1)[0]
    return dists, math.exp(-slope)


HOMOCLINIC_COLUMNS = [
    "x_star", "branch", "p_x", "p_y", "p_px", "p_py", "omega",
    "v_x", "v_y", "v_px", "v_py", "h", "tau", "crossings", "period",
    "linearization_shift", "alt_h", "alt_tau",
]


def write_homoclinic_csv(rows: list[dict], path, header_comment: Optional[str] = None,
                         extra_columns=()):
    cols = HOMOCLINIC_COLUMNS + list(extra_columns)
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                        for k, v in r.items()})


def read_homoclinic_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))
