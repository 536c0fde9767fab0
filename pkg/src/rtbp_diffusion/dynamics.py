"""Planar circular restricted three-body problem in rotating coordinates.

The larger primary (mass ``1 - mu``) sits at ``(mu, 0)`` and the smaller one
(mass ``mu``) at ``(-1 + mu, 0)``.  States are ``(x, y, p_x, p_y)`` arrays;
every function here accepts either a single state of shape ``(4,)`` or a
stack of states of shape ``(4, N)`` so that quantities can be evaluated along
a sampled trajectory in one call.

The elliptic problem enters only through its first-order term ``G`` and the
explicit time derivative ``dG/dt``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi

#: Matrix of the standard symplectic form for ordering (x, y, p_x, p_y).
J4 = np.array(
    [
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
        [-1.0, 0.0, 0.0, 0.0],
        [0.0, -1.0, 0.0, 0.0],
    ]
)

#: Differential of the reversing symmetry.
SYMMETRY_MATRIX = np.diag([1.0, -1.0, -1.0, 1.0])

JUPITER_SUN_MU = 0.0009537


class SingularityError(ArithmeticError):
    """Raised when a state comes closer to a primary than the configured floor."""


@dataclass(frozen=True)
class SystemParams:
    """Mass ratio of the primaries and the collision guard."""

    mu: float = JUPITER_SUN_MU
    singularity_floor: float = 1e-12

    def __post_init__(self):
        if not 0.0 < self.mu < 0.5:
            raise ValueError(f"mass ratio must lie in (0, 1/2), got {self.mu}")
        if self.singularity_floor <= 0.0:
            raise ValueError("singularity floor must be positive")

    @property
    def large_primary(self) -> tuple[float, float]:
        return (self.mu, 0.0)

    @property
    def small_primary(self) -> tuple[float, float]:
        return (-1.0 + self.mu, 0.0)


@dataclass(frozen=True)
class PerturbationParams:
    """Eccentricity scale and phase of the elliptic forcing."""

    eps: float = 0.0
    tau: float = 0.0

    def __post_init__(self):
        if self.eps < 0.0:
            raise ValueError("eccentricity must be non-negative")
        object.__setattr__(self, "tau", float(self.tau) % TWO_PI)


def state(x: float, y: float, p_x: float, p_y: float) -> np.ndarray:
    return np.array([x, y, p_x, p_y], dtype=float)


def _distances(x, y, params: SystemParams):
    mu = params.mu
    r1 = np.hypot(x - mu, y)
    r2 = np.hypot(x + 1.0 - mu, y)
    floor = params.singularity_floor
    if np.any(r1 < floor) or np.any(r2 < floor):
        raise SingularityError("state within singularity floor of a primary")
    return r1, r2


def effective_potential(x, y, params: SystemParams):
    """Centrifugal plus gravitational potential ``Omega(x, y)``."""
    mu = params.mu
    r1, r2 = _distances(x, y, params)
    return 0.5 * (x * x + y * y) + (1.0 - mu) / r1 + mu / r2


def _potential_gradient(x, y, params: SystemParams):
    mu = params.mu
    r1, r2 = _distances(x, y, params)
    a = (1.0 - mu) / r1**3
    b = mu / r2**3
    om_x = x - a * (x - mu) - b * (x + 1.0 - mu)
    om_y = y - (a + b) * y
    return om_x, om_y


def energy(s, params: SystemParams):
    """Hamiltonian ``((p_x + y)^2 + (p_y - x)^2) / 2 - Omega``."""
    x, y, px, py = s[0], s[1], s[2], s[3]
    kinetic = 0.5 * ((px + y) ** 2 + (py - x) ** 2)
    return kinetic - effective_potential(x, y, params)


def energy_gradient(s, params: SystemParams) -> np.ndarray:
    x, y, px, py = s[0], s[1], s[2], s[3]
    om_x, om_y = _potential_gradient(x, y, params)
    u = px + y
    w = py - x
    return np.array([-w - om_x, u - om_y, u, w])


def vector_field(s, params: SystemParams) -> np.ndarray:
    """Hamiltonian vector field ``J grad H``."""
    x, y, px, py = s[0], s[1], s[2], s[3]
    om_x, om_y = _potential_gradient(x, y, params)
    u = px + y
    w = py - x
    return np.array([u, w, w + om_x, -u + om_y])


def vector_field_jacobian(s, params: SystemParams) -> np.ndarray:
    """Jacobian of :func:`vector_field` at a single state."""
    x, y = float(s[0]), float(s[1])
    mu = params.mu
    r1, r2 = _distances(x, y, params)
    d1 = x - mu
    d2 = x + 1.0 - mu
    a = (1.0 - mu) / r1**3
    b = mu / r2**3
    a5 = 3.0 * (1.0 - mu) / r1**5
    b5 = 3.0 * mu / r2**5
    om_xx = 1.0 - a - b + a5 * d1 * d1 + b5 * d2 * d2
    om_yy = 1.0 - a - b + (a5 + b5) * y * y
    om_xy = (a5 * d1 + b5 * d2) * y
    return np.array(
        [
            [0.0, 1.0, 1.0, 0.0],
            [-1.0, 0.0, 0.0, 1.0],
            [om_xx - 1.0, om_xy, 0.0, 1.0],
            [om_xy, om_yy - 1.0, -1.0, 0.0],
        ]
    )


def apply_symmetry(s) -> np.ndarray:
    """Reversing symmetry ``(x, y, p_x, p_y) -> (x, -y, -p_x, p_y)``."""
    s = np.asarray(s, dtype=float)
    out = s.copy()
    out[1] = -s[1]
    out[2] = -s[2]
    return out


def hill_region_indicator(x, y, h, params: SystemParams):
    """True where the position ``(x, y)`` is accessible at energy ``h``."""
    return effective_potential(x, y, params) >= -h


def _g(alpha, x, y, t):
    return alpha * (-2.0 * y * np.sin(t) + x * np.cos(t)) - alpha**2 * np.cos(t)


def _g_dt(alpha, x, y, t):
    return alpha * (-2.0 * y * np.cos(t) - x * np.sin(t)) + alpha**2 * np.sin(t)


def perturbation_G(s, t, params: SystemParams):
    """First-order eccentricity term of the elliptic Hamiltonian."""
    x, y = s[0], s[1]
    mu = params.mu
    r1, r2 = _distances(x, y, params)
    return (1.0 - mu) / r1**3 * _g(mu, x, y, t) + mu / r2**3 * _g(mu - 1.0, x, y, t)


def perturbation_G_dt(s, t, params: SystemParams):
    """Partial derivative of :func:`perturbation_G` in its explicit time."""
    x, y = s[0], s[1]
    mu = params.mu
    r1, r2 = _distances(x, y, params)
    return (1.0 - mu) / r1**3 * _g_dt(mu, x, y, t) + mu / r2**3 * _g_dt(
        mu - 1.0, x, y, t
    )


def make_rhs(params: SystemParams):
    """Return a fast scalar right-hand side ``f(t, s)`` for ODE solvers."""
    mu = params.mu
    m1 = 1.0 - mu
    floor = params.singularity_floor
    sqrt = math.sqrt

    def rhs(t, s):
        x, y, px, py = s[0], s[1], s[2], s[3]
        d1 = x - mu
        d2 = x + m1
        yy = y * y
        r1 = sqrt(d1 * d1 + yy)
        r2 = sqrt(d2 * d2 + yy)
        if r1 < floor or r2 < floor:
            raise SingularityError("trajectory reached the singularity floor")
        a = m1 / (r1 * r1 * r1)
        b = mu / (r2 * r2 * r2)
        u = px + y
        w = py - x
        return np.array([u, w, w + x - a * d1 - b * d2, -u + y - (a + b) * y])

    return rhs


def make_variational_rhs(params: SystemParams):
    """Right-hand side of the state plus flattened 4x4 variational system."""
    mu = params.mu
    m1 = 1.0 - mu
    floor = params.singularity_floor
    sqrt = math.sqrt

    def rhs(t, s):
        x, y, px, py = s[0], s[1], s[2], s[3]
        d1 = x - mu
        d2 = x + m1
        yy = y * y
        r1s = d1 * d1 + yy
        r2s = d2 * d2 + yy
        r1 = sqrt(r1s)
        r2 = sqrt(r2s)
        if r1 < floor or r2 < floor:
            raise SingularityError("trajectory reached the singularity floor")
        a = m1 / (r1s * r1)
        b = mu / (r2s * r2)
        a5 = 3.0 * a / r1s
        b5 = 3.0 * b / r2s
        om_xx = 1.0 - a - b + a5 * d1 * d1 + b5 * d2 * d2
        om_yy = 1.0 - a - b + (a5 + b5) * yy
        om_xy = (a5 * d1 + b5 * d2) * y
        u = px + y
        w = py - x
        m = s[4:].reshape(4, 4)
        dm = np.empty((4, 4))
        dm[0] = m[1] + m[2]
        dm[1] = -m[0] + m[3]
        dm[2] = (om_xx - 1.0) * m[0] + om_xy * m[1] + m[3]
        dm[3] = om_xy * m[0] + (om_yy - 1.0) * m[1] - m[2]
        out = np.empty(20)
        out[0] = u
        out[1] = w
        out[2] = w + x - a * d1 - b * d2
        out[3] = -u + y - (a + b) * y
        out[4:] = dm.ravel()
        return out

    return rhs
