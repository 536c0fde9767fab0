"""First-order change of the scattering maps under the eccentricity perturbation.

For a symmetric homoclinic point ``p_i`` with phase ``omega_i`` the unperturbed
scattering map shifts the angle, ``(x*, theta) -> (x*, theta - 2 omega_i)``.
Its first-order correction is governed by the theta-derivative of a reduced
Poincare function: two boundary terms of ``G`` on the periodic orbit plus two
improper integrals of ``dG/dt`` differences taken along the homoclinic orbit
and its backward and forward asymptotic periodic trajectories.

Two independent evaluations are provided.  :func:`dS_dtheta` tabulates the
trajectories once per homoclinic point and integrates the matched differences
by adaptive Gauss-Legendre quadrature.  :func:`dS_dtheta_cointegrated`
integrates the homoclinic state, the periodic state and the running integral
as a single ODE system started from the fiber seed itself, and serves as the
oracle.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.integrate import solve_ivp

from .dynamics import (
    SYMMETRY_MATRIX,
    TWO_PI,
    SystemParams,
    make_rhs,
    perturbation_G,
    perturbation_G_dt,
)
from .flow import DEFAULT_FLOW, FlowConfig, flow, propagate, propagate_variational
from .manifolds import (
    HomoclinicChannel,
    HomoclinicPoint,
    MonodromyData,
    monodromy,
)
from .orbits import LyapunovOrbit

_X8, _W8 = leggauss(8)
_X16, _W16 = leggauss(16)


class QuadratureError(RuntimeError):
    pass


@dataclass(frozen=True)
class QuadratureConfig:
    """Truncation and quadrature contract for the improper integrals.

    The integrals are cut where the distance between the homoclinic trajectory
    and its asymptotic periodic trajectory stays below ``delta_tail``; the cut
    may not lie farther than ``u_max`` from ``u = 0``.  The neglected remainder
    is bounded by geometric extrapolation and added to the error estimate.
    """

    delta_tail: float = 1e-8
    u_max: float = 40.0
    abs_tol: float = 1e-10
    panels_per_period: int = 8
    max_refinements: int = 30
    accept_rel: float = 1e-6

    def __post_init__(self):
        if self.delta_tail <= 0.0 or self.u_max <= 0.0 or self.abs_tol <= 0.0:
            raise ValueError("tail gap, cap and tolerance must be positive")
        if self.panels_per_period < 1:
            raise ValueError("need at least one panel per period")


DEFAULT_QUADRATURE = QuadratureConfig()


@dataclass
class MelnikovSample:
    x_star: float
    theta: float
    tau: float
    branch: int
    channel: int
    value: float
    error: float
    boundary: float = math.nan
    accepted: bool = True
    reason: str = ""
    node: int = -1

    def to_row(self) -> dict:
        return {
            "x_star": self.x_star,
            "theta": self.theta,
            "tau": self.tau,
            "i": self.branch,
            "j": self.channel,
            "value": self.value,
            "error": self.error,
            "accepted": int(self.accepted),
            "reason": self.reason,
        }


class PeriodicTable:
    """Dense table of the Lyapunov orbit over one period.

    Besides the state ``gamma(t)`` it provides the periodic unstable Floquet
    vector ``E(t) = DPhi_t(q) v lambda_u^{-t/T}`` used to continue the fiber
    seed backwards along its linearization.
    """

    def __init__(
        self,
        orb: LyapunovOrbit,
        mono: MonodromyData,
        params: SystemParams = SystemParams(),
        cfg: FlowConfig = DEFAULT_FLOW,
    ):
        self.period = orb.period
        self.lambda_u = mono.lambda_u
        self.v = mono.unstable_vector
        self._traj = propagate_variational(orb.q, orb.period, params, cfg)

    @property
    def step_times(self) -> np.ndarray:
        return self._traj.step_times

    def _reduce(self, t):
        return np.mod(np.asarray(t, dtype=float), self.period)

    def state(self, t) -> np.ndarray:
        return self._traj(self._reduce(t))[:4]

    def floquet(self, t) -> np.ndarray:
        tm = np.atleast_1d(self._reduce(t))
        y = self._traj(tm)
        stm = y[4:].reshape(4, 4, -1)
        xi = np.einsum("ijn,j->in", stm, self.v)
        return xi * self.lambda_u ** (-tm / self.period)


class HomoclinicTrajectory:
    """``z(s) = Phi_s(p_i)`` for all real ``s``, assembled from stable pieces.

    * ``s`` in ``[-T, 0]``: integrated backwards from ``p_i`` itself;
    * ``s`` in ``[-tau, -T]``: integrated forwards from the fiber seed ``q + h v``;
    * ``s < -tau``: the seed continued along the linearized fiber;
    * ``s > 0``: the reversing symmetry, ``z(s) = S z(-s)``.

    Each piece is used only where integration errors shrink towards the
    orbit, so the table stays accurate over the whole homoclinic excursion.
    """

    def __init__(
        self,
        hp: HomoclinicPoint,
        orb: LyapunovOrbit,
        mono: MonodromyData,
        table: PeriodicTable,
        params: SystemParams = SystemParams(),
        cfg: FlowConfig = DEFAULT_FLOW,
    ):
        self.table = table
        self.period = orb.period
        q_h, tau = hp.seed(mono, orb)
        self.tau = tau
        self.h = hp.h
        self.join = -min(orb.period, tau)
        self._near = propagate(hp.point, self.join, params, cfg)
        self._far = propagate(q_h, tau + self.join, params, cfg) if tau + self.join > 0 else None
        self._tail_cache: dict[float, float] = {}

    def _backward(self, s: np.ndarray) -> np.ndarray:
        out = np.empty((4, s.size))
        near = s >= self.join
        far = (s < self.join) & (s >= -self.tau)
        lin = s < -self.tau
        if near.any():
            out[:, near] = self._near(s[near])
        if far.any():
            out[:, far] = self._far(s[far] + self.tau)
        if lin.any():
            t = s[lin] + self.tau
            growth = self.table.lambda_u ** (t / self.period)
            out[:, lin] = self.table.state(t) + self.h * growth * self.table.floquet(t)
        return out

    def __call__(self, s) -> np.ndarray:
        s = np.atleast_1d(np.asarray(s, dtype=float))
        out = np.empty((4, s.size))
        neg = s <= 0.0
        if neg.any():
            out[:, neg] = self._backward(s[neg])
        if (~neg).any():
            out[:, ~neg] = SYMMETRY_MATRIX @ self._backward(-s[~neg])
        return out

    def gap(self, s) -> np.ndarray:
        """Distance to the asymptotic periodic trajectory at homoclinic time ``s``."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        shift = np.where(s <= 0.0, self.tau, -self.tau)
        return np.linalg.norm(self(s) - self.table.state(s + shift), axis=0)

    def tail_start(self, delta: float, extra_periods: float = 8.0) -> float:
        """Largest ``s <= 0`` beyond which the gap stays below ``delta``.

        By symmetry the forward gap below ``delta`` starts at ``-tail_start``.
        Returns ``-inf`` when the gap never settles within the scanned range.
        """
        if delta in self._tail_cache:
            return self._tail_cache[delta]
        ds = self.period / 32.0
        n = int(math.ceil((self.tau + extra_periods * self.period) / ds))
        s = -ds * np.arange(n + 1)
        g = self.gap(s)
        bad = np.flatnonzero(g >= delta)
        if bad.size == 0:
            start = 0.0
        elif bad[-1] == n:
            start = -math.inf
        else:
            start = float(s[bad[-1] + 1])
        self._tail_cache[delta] = start
        return start


def _panels(a: float, b: float, breaks: Sequence[float], width: float):
    pts = sorted({a, b, *[p for p in breaks if a < p < b]})
    out = []
    for lo, hi in zip(pts[:-1], pts[1:]):
        k = max(1, int(math.ceil((hi - lo) / width)))
        edges = np.linspace(lo, hi, k + 1)
        out.extend(zip(edges[:-1], edges[1:]))
    return out


def adaptive_gauss_legendre(f, a: float, b: float, tol: float, breaks=(), width=None,
                            max_refinements: int = 30):
    """Integrate the vectorized ``f`` over ``[a, b]`` by panel bisection.

    Each panel compares the 8- and 16-point Gauss-Legendre rules and is
    bisected until the difference is below its share ``tol (b_k - a_k)/(b - a)``.
    Returns ``(value, error)`` where ``error`` sums the accepted differences.
    """
    if b <= a:
        return 0.0, 0.0
    width = (b - a) if width is None else width
    pending = _panels(a, b, breaks, width)
    accepted = []
    for _ in range(max_refinements + 1):
        if not pending:
            break
        lo = np.array([p[0] for p in pending])
        hi = np.array([p[1] for p in pending])
        mid = 0.5 * (lo + hi)
        half = 0.5 * (hi - lo)
        nodes = np.concatenate(
            [(mid[:, None] + half[:, None] * _X8).ravel(),
             (mid[:, None] + half[:, None] * _X16).ravel()]
        )
        vals = f(nodes)
        k = len(pending)
        v8 = vals[: 8 * k].reshape(k, 8)
        v16 = vals[8 * k:].reshape(k, 16)
        q8 = half * (v8 @ _W8)
        q16 = half * (v16 @ _W16)
        diff = np.abs(q16 - q8)
        share = tol * (hi - lo) / (b - a)
        nxt = []
        for n in range(k):
            if diff[n] <= share[n]:
                accepted.append((lo[n], q16[n], diff[n]))
            else:
                nxt.append((lo[n], mid[n]))
                nxt.append((mid[n], hi[n]))
        pending = nxt
    if pending:
        raise QuadratureError(f"adaptive quadrature did not converge on [{a}, {b}]")
    accepted.sort(key=lambda r: r[0])
    return math.fsum(r[1] for r in accepted), math.fsum(r[2] for r in accepted)


def _gauss16(f, a: float, b: float, n_sub: int = 8) -> float:
    edges = np.linspace(a, b, n_sub + 1)
    mid = 0.5 * (edges[:-1] + edges[1:])
    half = 0.5 * (edges[1:] - edges[:-1])
    nodes = (mid[:, None] + half[:, None] * _X16).ravel()
    vals = f(nodes).reshape(n_sub, 16)
    return float(np.sum(half * (vals @ _W16)))


def _geometric_tail(a1: float, a2: float) -> float:
    """Remainder of a geometric series whose last two terms are ``a2, a1``."""
    if a1 == 0.0:
        return 0.0
    if not a2 > a1:
        return math.inf
    r = a1 / a2
    return a1 * r / (1.0 - r)


class ChannelIntegrand:
    """Tabulated data for one ``(x*, branch)`` shared by all ``(theta, tau)``."""

    def __init__(
        self,
        orb: LyapunovOrbit,
        hp: HomoclinicPoint,
        mono: Optional[MonodromyData] = None,
        params: SystemParams = SystemParams(),
        cfg: FlowConfig = DEFAULT_FLOW,
    ):
        if abs(orb.x_star - hp.x_star) > 1e-12:
            raise ValueError("homoclinic point belongs to a different orbit")
        self.orb = orb
        self.hp = hp
        self.params = params
        self.mono = monodromy(orb, params, cfg) if mono is None else mono
        self.table = PeriodicTable(orb, self.mono, params, cfg)
        self.z = HomoclinicTrajectory(hp, orb, self.mono, self.table, params, cfg)

    def _lift(self, theta: float, channel) -> tuple[float, int]:
        if channel is None:
            return float(theta), 0
        if isinstance(channel, HomoclinicChannel):
            if channel.branch != self.hp.branch:
                raise ValueError("channel branch differs from the homoclinic point")
            ch = channel
        else:
            ch = HomoclinicChannel(self.hp.branch, int(channel))
        return ch.lift(theta), ch.index

    def boundary_terms(self, theta: float, tau: float) -> float:
        T = self.orb.period
        w = self.hp.omega
        g_in = perturbation_G(self.table.state(theta * T / TWO_PI), tau, self.params)
        g_out = perturbation_G(
            self.table.state((theta - 2.0 * w) * T / TWO_PI), tau, self.params
        )
        return float(np.squeeze(g_out - g_in))

    def evaluate(
        self,
        theta: float,
        tau: float,
        qcfg: QuadratureConfig = DEFAULT_QUADRATURE,
        channel=None,
        boundary_only: bool = False,
    ) -> MelnikovSample:
        theta, j = self._lift(theta, channel)
        T = self.orb.period
        w = self.hp.omega
        scale = T / TWO_PI
        boundary = self.boundary_terms(theta, tau)
        sample = MelnikovSample(
            x_star=self.orb.x_star, theta=theta, tau=float(tau), branch=self.hp.branch,
            channel=j, value=scale * boundary, error=0.0, boundary=scale * boundary,
        )
        if boundary_only:
            return sample
        c = (theta - w) * scale
        s_tail = self.z.tail_start(qcfg.delta_tail)
        u_lo = s_tail - c
        u_hi = -s_tail - c
        if not (-qcfg.u_max <= u_lo and u_hi <= qcfg.u_max):
            sample.accepted = False
            sample.reason = "tail gap above delta_tail at u_max"
            sample.value = sample.error = math.nan
            return sample
        params = self.params
        in_phase = theta * scale
        out_phase = (theta - 2.0 * w) * scale

        def back(u):
            zs = self.z(u + c)
            gs = self.table.state(u + in_phase)
            return perturbation_G_dt(zs, tau + u, params) - perturbation_G_dt(gs, tau + u, params)

        def fwd(u):
            zs = self.z(u + c)
            gs = self.table.state(u + out_phase)
            return perturbation_G_dt(zs, tau + u, params) - perturbation_G_dt(gs, tau + u, params)

        seams = [-c, -c - T, -c + T, -c - self.z.tau, -c + self.z.tau]
        width = T / qcfg.panels_per_period
        try:
            i_back, e_back = adaptive_gauss_legendre(
                back, min(u_lo, 0.0), 0.0, 0.5 * qcfg.abs_tol, seams, width,
                qcfg.max_refinements,
            )
            i_fwd, e_fwd = adaptive_gauss_legendre(
                fwd, 0.0, max(u_hi, 0.0), 0.5 * qcfg.abs_tol, seams, width,
                qcfg.max_refinements,
            )
        except QuadratureError as exc:
            sample.accepted = False
            sample.reason = str(exc)
            sample.value = sample.error = math.nan
            return sample
        tail_back = _geometric_tail(
            _gauss16(lambda u: np.abs(back(u)), u_lo, u_lo + T),
            _gauss16(lambda u: np.abs(back(u)), u_lo + T, u_lo + 2 * T),
        )
        tail_fwd = _geometric_tail(
            _gauss16(lambda u: np.abs(fwd(u)), u_hi - T, u_hi),
            _gauss16(lambda u: np.abs(fwd(u)), u_hi - 2 * T, u_hi - T),
        )
        sample.value = scale * (boundary - i_back - i_fwd)
        sample.error = scale * (e_back + e_fwd + tail_back + tail_fwd)
        if not sample.error < qcfg.accept_rel * max(1.0, abs(sample.value)):
            sample.accepted = False
            sample.reason = f"error estimate {sample.error:.2e} above tolerance"
        return sample


def scattering_s0(x_star: float, theta: float, hp: HomoclinicPoint, channel=None):
    """Unperturbed scattering map ``(x*, theta) -> (x*, theta - 2 omega_i)``.

    With a ``channel`` the angle must lie in its open theta-domain; the result
    is not reduced modulo ``2 pi``.
    """
    if channel is not None:
        ch = channel if isinstance(channel, HomoclinicChannel) else HomoclinicChannel(
            hp.branch, int(channel)
        )
        if not ch.contains(theta):
            raise ValueError(f"theta={theta} outside the domain of {ch}")
    return (x_star, theta - 2.0 * hp.omega)


def dS_dtheta(
    x_star: float,
    theta: float,
    tau: float,
    hp: HomoclinicPoint,
    orb: LyapunovOrbit,
    qcfg: QuadratureConfig = DEFAULT_QUADRATURE,
    channel=None,
    params: SystemParams = SystemParams(),
    cfg: FlowConfig = DEFAULT_FLOW,
    boundary_only: bool = False,
    integrand: Optional[ChannelIntegrand] = None,
) -> MelnikovSample:
    """Theta-derivative of the reduced Poincare function on one channel.

    ``channel`` (an index 1 or 2 or a :class:`HomoclinicChannel`) selects the
    lift of ``theta`` into the channel's angle domain; without it ``theta`` is
    used as given.  Pass a prebuilt ``integrand`` to reuse the tabulated
    trajectories across many evaluations.
    """
    if abs(x_star - orb.x_star) > 1e-12:
        raise ValueError("x_star does not match the orbit")
    if integrand is None:
        integrand = ChannelIntegrand(orb, hp, params=params, cfg=cfg)
    return integrand.evaluate(theta, tau, qcfg, channel, boundary_only)


def _cointegrated_rhs(params: SystemParams, tau: float, direction: float, mirror: bool):
    f = make_rhs(params)
    sm = SYMMETRY_MATRIX

    def rhs(u, y):
        w = y[:4]
        g = y[4:8]
        z = sm @ w if mirror else w
        out = np.empty(9)
        out[:4] = direction * f(u, w)
        out[4:8] = f(u, g)
        out[8] = perturbation_G_dt(z, tau + u, params) - perturbation_G_dt(g, tau + u, params)
        return out

    return rhs


def _co_integrate(rhs, z0, phase0, u0, u1, gamma, seg, tol):
    """``int_{u0}^{u1}`` of the matched difference, in segments of length ``seg``.

    The homoclinic state is carried across segments while the periodic state
    is restarted from the orbit at the matching phase: the periodic orbit is
    itself hyperbolic, so co-integrating it for several periods would let
    round-off grow by ``lambda_u`` per period.
    """
    if u1 == u0:
        return 0.0, np.asarray(z0, dtype=float)
    n = max(1, int(math.ceil(abs(u1 - u0) / seg)))
    edges = np.linspace(u0, u1, n + 1)
    z = np.asarray(z0, dtype=float)
    parts = []
    for a, b in zip(edges[:-1], edges[1:]):
        y0 = np.concatenate([z, gamma(phase0 + (a - u0)), [0.0]])
        sol = solve_ivp(rhs, (a, b), y0, method="DOP853", rtol=tol, atol=tol)
        if sol.status != 0:
            raise QuadratureError(sol.message)
        z = sol.y[:4, -1].copy()
        parts.append(float(sol.y[8, -1]))
    return math.fsum(parts), z


def dS_dtheta_cointegrated(
    x_star: float,
    theta: float,
    tau: float,
    hp: HomoclinicPoint,
    orb: LyapunovOrbit,
    qcfg: QuadratureConfig = QuadratureConfig(u_max=80.0),
    channel=None,
    params: SystemParams = SystemParams(),
    cfg: FlowConfig = DEFAULT_FLOW,
    mono: Optional[MonodromyData] = None,
) -> MelnikovSample:
    """Oracle for :func:`dS_dtheta` built on different numerics.

    Each integral is carried as a ninth ODE component next to the homoclinic
    and periodic states, so the integrand is formed at matched ``u`` without
    tables, and is truncated at the fiber seed itself instead of following
    the linearized fiber.  The forward integral is obtained from the backward
    one through the reversing symmetry,
    ``I_+(theta, tau) = -I_-(2 omega - theta, -tau)``.
    """
    if abs(x_star - orb.x_star) > 1e-12:
        raise ValueError("x_star does not match the orbit")
    mono = monodromy(orb, params, cfg) if mono is None else mono
    if channel is not None:
        ch = channel if isinstance(channel, HomoclinicChannel) else HomoclinicChannel(
            hp.branch, int(channel)
        )
        theta, j = ch.lift(theta), ch.index
    else:
        j = 0
    T = orb.period
    scale = T / TWO_PI
    w = hp.omega
    q = orb.q
    q_seed, tau_seed = hp.seed(mono, orb)
    tol = max(0.1 * cfg.abs_tol, 2.3e-14)

    def gamma(t):
        return flow(q, float(np.mod(t, T)), params, cfg)

    v = mono.unstable_vector
    z_join = flow(hp.point, -T, params, cfg)

    def seed_piece(th, ta, c, s_lo, s_end, h):
        z0 = flow(orb.q + h * v, s_lo + tau_seed, params, cfg)
        return _co_integrate(forward_rhs(ta), z0, s_lo - c + th * scale, s_lo - c,
                             s_end - c, gamma, 0.25 * T, tol)

    def forward_rhs(ta):
        return _cointegrated_rhs(params, ta, 1.0, False)

    def matched_seed_piece(th, ta, c, s_lo):
        # The fiber offset is re-solved so that this integration of the seed
        # reaches the backward orbit of p_i at s = -T: the excursion turns
        # step-sequence differences into a visible shift along the fiber.
        # Seeds q + h v are quantized by round-off, so the secant iteration
        # stalls near 1e-7 and the best iterate is kept.
        h0, h1 = hp.h, hp.h * (1.0 + 1e-5)
        acc0, z0 = seed_piece(th, ta, c, s_lo, -T, h0)
        acc1, z1 = seed_piece(th, ta, c, s_lo, -T, h1)
        best = min((np.max(np.abs(z0 - z_join)), acc0), (np.max(np.abs(z1 - z_join)), acc1))
        for _ in range(4):
            d = (z1 - z0) / (h1 - h0)
            if not np.any(d):
                break
            h2 = h1 - float(d @ (z1 - z_join) / (d @ d))
            h0, z0 = h1, z1
            h1 = h2
            acc1, z1 = seed_piece(th, ta, c, s_lo, -T, h1)
            best = min(best, (np.max(np.abs(z1 - z_join)), acc1))
            if best[0] < 1e-9:
                break
        return best[1]

    def backward_integral(th, ta):
        c = (th - w) * scale
        s_lo = max(-tau_seed, c - qcfg.u_max)
        seg = 0.25 * T
        total = 0.0
        # seed piece: s in [s_lo, min(-T, c)], z integrated forwards from the seed
        if c >= -T:
            total += matched_seed_piece(th, ta, c, s_lo)
        elif c > s_lo:
            total += seed_piece(th, ta, c, s_lo, c, hp.h)[0]
        # near piece: s in [-T, min(0, c)], z integrated backwards from p
        if c > -T:
            s_top = min(0.0, c)
            z0 = flow(hp.point, s_top, params, cfg)
            total -= _co_integrate(forward_rhs(ta), z0, s_top - c + th * scale, s_top - c,
                                   -T - c, gamma, seg, tol)[0]
        # mirrored piece: s in [0, c], z = S Phi_{-s}(p)
        if c > 0.0:
            mirrored = _cointegrated_rhs(params, ta, -1.0, True)
            total += _co_integrate(mirrored, hp.point, w * scale, -c, 0.0,
                                   gamma, seg, tol)[0]
        return total

    g_in = perturbation_G(gamma(theta * scale), tau, params)
    g_out = perturbation_G(gamma((theta - 2.0 * w) * scale), tau, params)
    boundary = float(-g_in + g_out)
    value = scale * (boundary - backward_integral(theta, tau)
                     + backward_integral(2.0 * w - theta, -tau))
    return MelnikovSample(
        x_star=orb.x_star, theta=theta, tau=float(tau), branch=hp.branch, channel=j,
        value=value, error=math.nan, boundary=scale * boundary,
    )


def theta_grid(n: int) -> np.ndarray:
    """Cell midpoints ``2 pi (k + 1/2) / n``; they avoid the excluded domain ends."""
    return TWO_PI * (np.arange(n) + 0.5) / n


def _evaluate_block(args):
    orb, hp, thetas, tau, qcfg, params, cfg, boundary_only = args
    integrand = ChannelIntegrand(orb, hp, params=params, cfg=cfg)
    out = []
    for k, th in enumerate(thetas):
        for j in (1, 2):
            try:
                s = integrand.evaluate(th, tau, qcfg, j, boundary_only)
            except ValueError:
                continue
            s.node = k
            out.append(s)
    return out


def grid_evaluate(
    orbits: Sequence[LyapunovOrbit],
    hps: dict,
    thetas,
    tau: float = 0.0,
    qcfg: QuadratureConfig = DEFAULT_QUADRATURE,
    params: SystemParams = SystemParams(),
    cfg: FlowConfig = DEFAULT_FLOW,
    boundary_only: bool = False,
    executor=None,
) -> list[MelnikovSample]:
    """Samples for every orbit, branch, grid angle and channel.

    ``hps`` maps ``(x_star, branch)`` to :class:`HomoclinicPoint`.  Each sample
    records the grid angle index in ``node``; ``theta`` holds the angle lifted
    into the channel's domain.  Blocks are dispatched to ``executor`` when one
    is given, and results are returned in a fixed order either way.
    """
    thetas = [float(t) for t in np.asarray(thetas, dtype=float).ravel()]
    if not thetas:
        return []
    tasks = []
    for orb in orbits:
        for b in (1, 2):
            hp = hps.get((orb.x_star, b))
            if hp is not None:
                tasks.append((orb, hp, thetas, tau, qcfg, params, cfg, boundary_only))
    mapper = executor.map if executor is not None else map
    out: list[MelnikovSample] = []
    for block in mapper(_evaluate_block, tasks):
        out.extend(block)
    return out


@dataclass
class Witness:
    branch: int
    channel: int
    value: float
    margin: float


@dataclass
class NodeVerdict:
    x_star: float
    theta: float
    positive: Optional[Witness]
    negative: Optional[Witness]

    @property
    def passed(self) -> bool:
        return self.positive is not None and self.negative is not None


@dataclass
class Certificate:
    grid: dict
    nodes: list[NodeVerdict]
    rejected: int
    margin_floor: Optional[float]
    schema: int = 1

    @property
    def passed(self) -> bool:
        return bool(self.nodes) and all(n.passed for n in self.nodes)

    @property
    def min_positive_margin(self) -> float:
        vals = [n.positive.value for n in self.nodes if n.positive is not None]
        return min(vals) if vals else math.nan

    @property
    def max_negative_margin(self) -> float:
        vals = [n.negative.value for n in self.nodes if n.negative is not None]
        return max(vals) if vals else math.nan

    @property
    def failed_nodes(self) -> list[NodeVerdict]:
        return [n for n in self.nodes if not n.passed]

    def to_dict(self) -> dict:
        return {
            "schema": self.schema,
            "passed": self.passed,
            "grid": self.grid,
            "margin_floor": self.margin_floor,
            "rejected_samples": self.rejected,
            "min_positive_margin": self.min_positive_margin,
            "max_negative_margin": self.max_negative_margin,
            "nodes": [
                {
                    "x_star": n.x_star,
                    "theta": n.theta,
                    "passed": n.passed,
                    "positive": asdict(n.positive) if n.positive else None,
                    "negative": asdict(n.negative) if n.negative else None,
                }
                for n in self.nodes
            ],
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def verify_sign_cover(
    samples: Sequence[MelnikovSample],
    margin_floor: Optional[float] = None,
    error_factor: float = 10.0,
    grid: Optional[dict] = None,
) -> Certificate:
    """Check that every grid node has a positive and a negative witness.

    Nodes are ``(x*, theta mod 2 pi)``.  A sample witnesses a sign when
    ``|value|`` exceeds its margin: ``margin_floor`` if given, otherwise
    ``error_factor`` times the sample's error estimate.  Among qualifying
    samples the largest ``|value|`` is kept as the witness.
    """
    groups: dict = {}
    rejected = 0
    for s in samples:
        key = (s.x_star, round(float(np.mod(s.theta, TWO_PI)), 12) % round(TWO_PI, 12))
        groups.setdefault(key, [])
        if not s.accepted or not math.isfinite(s.value):
            rejected += 1
            continue
        groups[key].append(s)
    nodes = []
    for key in sorted(groups):
        pos = neg = None
        for s in groups[key]:
            m = margin_floor if margin_floor is not None else error_factor * s.error
            if s.value > m and (pos is None or s.value > pos.value):
                pos = Witness(s.branch, s.channel, s.value, m)
            if s.value < -m and (neg is None or s.value < neg.value):
                neg = Witness(s.branch, s.channel, s.value, m)
        nodes.append(NodeVerdict(key[0], key[1], pos, neg))
    return Certificate(grid=grid or {}, nodes=nodes, rejected=rejected,
                       margin_floor=margin_floor)


SAMPLE_COLUMNS = ["x_star", "theta", "tau", "i", "j", "value", "error", "accepted", "reason"]


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_samples_csv(samples, path, header_comment: Optional[str] = None):
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.DictWriter(fh, fieldnames=SAMPLE_COLUMNS)
        w.writeheader()
        for s in samples:
            w.writerow({k: _fmt(v) for k, v in s.to_row().items()})


def read_samples_csv(path) -> list[MelnikovSample]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(ln for ln in fh if not ln.startswith("#")))
    return [
        MelnikovSample(
            x_star=float(r["x_star"]), theta=float(r["theta"]), tau=float(r["tau"]),
            branch=int(r["i"]), channel=int(r["j"]), value=float(r["value"]),
            error=float(r["error"]), accepted=bool(int(r["accepted"])), reason=r["reason"],
        )
        for r in rows
    ]


def write_curve_files(samples, directory, prefix: str, header: str = "") -> list[str]:
    """One whitespace-separated file per ``(x*, i, j)`` curve, sorted in theta."""
    curves: dict = {}
    for s in samples:
        curves.setdefault((s.x_star, s.branch, s.channel), []).append(s)
    xs = sorted({k[0] for k in curves})
    paths = []
    for (x, i, j), rows in sorted(curves.items()):
        rows = sorted(rows, key=lambda s: s.theta)
        name = f"{prefix}_x{xs.index(x)}_i{i}_j{j}.dat"
        path = os.path.join(directory, name)
        with open(path, "w") as fh:
            if header:
                fh.write(f"# {header}\n")
            fh.write(f"# x_star={x!r} branch={i} channel={j}\n")
            fh.write("# theta value error accepted\n")
            for s in rows:
                fh.write(f"{s.theta!r} {s.value!r} {s.error!r} {int(s.accepted)}\n")
        paths.append(path)
    return paths
