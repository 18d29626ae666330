import logging
from typing import Callable, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.integrate import solve_ivp

from .cluster_lattice import ClusterLattice, MEMBERSHIP_TOL
from .exceptions import ChannelClosed, EnergyMismatch, NotUnitVector, ParameterOutOfRange, SideUnavailable, ZeroSpeed
from .phase_space import (ENERGY_TOL, Channel, CompressedPoint, FiberChoice, FiberPoint, SpectralModel, eta,
                          fiber_preimage, sample_fiber_points)

logger = logging.getLogger(__name__)

S_GUARD = 1e-6


def angle(u: np.ndarray, v: np.ndarray) -> float:
    """
    Angle between `u` and `v`, accurate near 0 and pi.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    u = u / np.linalg.norm(u)
    v = v / np.linalg.norm(v)
    return float(2.0 * np.arctan2(np.linalg.norm(u - v), np.linalg.norm(u + v)))


class FlowSegment:
    """
    Integral curve of the rescaled Hamilton field of the cluster `cluster` in the channel `channel`.

    The momentum `xi` is constant along the segment and the direction `y`
    moves on the great circle of X_a from `-xi/|xi|` (arclength `s0`) to
    `+xi/|xi|` (arclength `s0 + pi`). With `phi = s - s0`,
    `tau = sqrt(sigma) cos(phi)` and `|mu| = sqrt(sigma) sin(phi)`.

    Parameters
    ----------
    cluster : int
        Cluster `a` whose plane X_a carries the segment.
    channel : Channel
        Channel of the segment, with kinetic energy `sigma = lam - energy`.
    lam : float
        Total energy.
    y0 : array_like
        Unit direction of the anchor, in X_a.
    xi0 : array_like
        Momentum, in X_a, with `|xi0|^2 = sigma`.
    s_anchor : float, optional
        Arclength assigned to the anchor, by default 0.
    s_range : tuple, optional
        Arclength interval of the segment, by default the full open range
        shrunk by a guard band of 1e-6 at both ends.

    Attributes
    ----------
    sigma : float
        Kinetic energy.
    s0 : float
        Arclength of the incoming radial limit.
    stationary : bool
        Whether the segment is a constant curve at a radial point.
    """

    def __init__(self, cluster: int, channel: Channel, lam: float, y0: np.ndarray, xi0: np.ndarray,
                 s_anchor: float = 0.0, s_range: Optional[Tuple[float, float]] = None):
        self.cluster = cluster
        self.channel = channel
        self.lam = float(lam)
        self.y0 = np.asarray(y0, dtype=float)
        self.xi = np.asarray(xi0, dtype=float)
        self.s_anchor = float(s_anchor)

        sigma = self.lam - channel.energy
        if sigma < -ENERGY_TOL:
            raise ChannelClosed('Channel energy %r exceeds the total energy %r.' % (channel.energy, self.lam))
        self.sigma = max(sigma, 0.0)

        norm = float(np.linalg.norm(self.y0))
        if abs(norm - 1.0) > MEMBERSHIP_TOL:
            raise NotUnitVector('`y0` must have unit norm, %r found.' % norm)

        xi2 = float(self.xi @ self.xi)
        if abs(xi2 - self.sigma) > ENERGY_TOL * max(1.0, self.sigma):
            raise EnergyMismatch('`|xi0|^2` must equal the kinetic energy %r, %r found.' % (self.sigma, xi2))

        tau0 = float(-self.y0 @ self.xi)
        mu0 = self.xi + tau0 * self.y0
        self.stationary = self.sigma <= ENERGY_TOL or np.linalg.norm(mu0) <= 1e-12 * max(1.0, np.sqrt(self.sigma))

        if self.stationary:
            self.xi_hat = self.xi / np.sqrt(self.sigma) if self.sigma > ENERGY_TOL else np.zeros_like(self.xi)
            self.phase0 = 0.0 if tau0 >= 0 else np.pi
            self.s0 = self.s_anchor - self.phase0
            self.e = np.zeros_like(self.y0)
            default = (self.s_anchor, self.s_anchor)
        else:
            self.xi_hat = self.xi / np.sqrt(self.sigma)
            self.phase0 = angle(self.y0, -self.xi_hat)
            self.s0 = self.s_anchor - self.phase0
            ortho = self.y0 - (self.y0 @ self.xi_hat) * self.xi_hat
            self.e = ortho / np.linalg.norm(ortho)
            default = (self.s0 + S_GUARD, self.s0 + np.pi - S_GUARD)

        if s_range is None:
            s_range = default
        lo, hi = float(s_range[0]), float(s_range[1])
        if lo > hi:
            raise ParameterOutOfRange('`s_range` must be ordered, (%r, %r) found.' % (lo, hi))
        if not self.stationary and (lo < self.s0 - 1e-12 or hi > self.s0 + np.pi + 1e-12):
            raise ParameterOutOfRange('`s_range` must lie in [%r, %r], (%r, %r) found.'
                                      % (self.s0, self.s0 + np.pi, lo, hi))
        self.s_range = (lo, hi)

    @property
    def open_start(self) -> bool:
        """
        Whether the segment starts at its incoming radial limit.
        """
        return not self.stationary and self.s_range[0] <= self.s0 + S_GUARD

    @property
    def open_end(self) -> bool:
        return not self.stationary and self.s_range[1] >= self.s0 + np.pi - S_GUARD

    @property
    def length(self) -> float:
        """
        Arclength of the segment, counting limit ends at the radial points.
        """
        if self.stationary:
            return 0.0
        lo = self.s0 if self.open_start else self.s_range[0]
        hi = self.s0 + np.pi if self.open_end else self.s_range[1]
        return hi - lo

    def phase(self, s: float) -> float:
        return s - self.s0

    def direction(self, phi: float) -> np.ndarray:
        if self.stationary:
            return self.y0
        return np.cos(phi) * (-self.xi_hat) + np.sin(phi) * self.e

    def __repr__(self) -> str:
        return ('FlowSegment(cluster=%d, channel=(%d, %d), sigma=%r, s_range=%r)'
                % (self.cluster, self.channel.cluster, self.channel.index, self.sigma, self.s_range))


def flow_point(segment: FlowSegment, s: float, strict: bool = True) -> CompressedPoint:
    """
    Point of `segment` at arclength `s`.

    Parameters
    ----------
    segment : FlowSegment
        Segment to evaluate.
    s : float
        Arclength.
    strict : bool, optional
        When True `s` must lie in `segment.s_range`, otherwise any value in
        the closed range `[s0, s0 + pi]` is accepted, by default True.

    Returns
    -------
    CompressedPoint
        Point on the cluster of the segment.

    Examples
    --------

    >>> import numpy as np
    >>> from brokenray.phase_space import Channel
    >>> from brokenray.hamilton_flow import FlowSegment, flow_point
    >>>
    >>> seg = FlowSegment(0, Channel(0, 0, 0.0), 1.0, [0, 1], [1, 0])
    >>> flow_point(seg, 0.0).tau
    0.0
    """
    if segment.stationary:
        lo, hi = segment.s_range
        if strict and not lo - 1e-12 <= s <= hi + 1e-12:
            raise ParameterOutOfRange('`s` must equal %r on a stationary segment, %r found.' % (lo, s))
        return CompressedPoint(segment.cluster, segment.y0, segment.xi)

    lo, hi = segment.s_range if strict else (segment.s0, segment.s0 + np.pi)
    if not lo - 1e-12 <= s <= hi + 1e-12:
        raise ParameterOutOfRange('`s` must lie in [%r, %r], %r found.' % (lo, hi, s))

    return CompressedPoint(segment.cluster, segment.direction(segment.phase(s)), segment.xi)


def _origin_phase(segment: FlowSegment, origin: Optional[float]) -> float:
    s = segment.s_range[0] if origin is None else origin
    phi = segment.phase(s)
    if not 0.0 < phi < np.pi:
        raise ParameterOutOfRange('Time origin must lie strictly inside the segment, phase %r found.' % phi)
    return phi


def reparametrize_time(segment: FlowSegment, t: Union[float, np.ndarray],
                       origin: Optional[float] = None) -> Union[float, np.ndarray]:
    """
    Arclength reached after the time `t` of the rescaled Hamilton flow.

    The arclength solves `dS/dt = 2 sqrt(sigma) sin(S - s0)`, which separates to
    `tan(phi / 2) = tan(phi_o / 2) exp(2 sqrt(sigma) t)` for the phase `phi = S - s0`.

    Parameters
    ----------
    segment : FlowSegment
        Moving segment.
    t : float or array_like
        Time measured from `origin`.
    origin : float, optional
        Arclength at time 0, by default the start of `segment.s_range`.

    Returns
    -------
    float or array_like
        Arclength, approaching `s0` and `s0 + pi` as `t` goes to minus and plus infinity.
    """
    if segment.sigma <= ENERGY_TOL:
        raise ZeroSpeed('Time reparametrization needs a positive kinetic energy, %r found.' % segment.sigma)
    if segment.stationary:
        return segment.s_anchor + 0.0 * np.asarray(t, dtype=float)

    phi_o = _origin_phase(segment, origin)
    rate = 2.0 * np.sqrt(segment.sigma)
    phi = 2.0 * np.arctan(np.tan(phi_o / 2.0) * np.exp(rate * np.asarray(t, dtype=float)))
    s = segment.s0 + phi
    return float(s) if np.ndim(s) == 0 else s


def time_of(segment: FlowSegment, s: Union[float, np.ndarray],
            origin: Optional[float] = None) -> Union[float, np.ndarray]:
    """
    Inverse of :func:`reparametrize_time`.
    """
    if segment.sigma <= ENERGY_TOL or segment.stationary:
        raise ZeroSpeed('Time is undefined on a stationary segment.')

    phi_o = _origin_phase(segment, origin)
    phi = np.asarray(s, dtype=float) - segment.s0
    if np.any(phi <= 0.0) or np.any(phi >= np.pi):
        raise ParameterOutOfRange('`s` must lie strictly inside (%r, %r).' % (segment.s0, segment.s0 + np.pi))
    t = np.log(np.tan(phi / 2.0) / np.tan(phi_o / 2.0)) / (2.0 * np.sqrt(segment.sigma))
    return float(t) if np.ndim(t) == 0 else t


def integrate_flow(segment: FlowSegment, s_values: Sequence[float], origin: Optional[float] = None,
                   rtol: float = 1e-12, atol: float = 1e-12) -> np.ndarray:
    """
    Directions of `segment` at `s_values` obtained by numerical integration of `y' = 2 (xi + tau y)`.

    The momentum is held fixed and the times are those of :func:`time_of`.
    This is an oracle for the closed-form evaluation of :func:`flow_point`.

    Returns
    -------
    array_like
        Array of shape (len(s_values), n).
    """
    xi = segment.xi

    def field(_, y):
        return 2.0 * (xi - (y @ xi) * y)

    s_start = segment.s_range[0] if origin is None else origin
    y_start = segment.direction(segment.phase(s_start))
    out = []
    for s in s_values:
        t = time_of(segment, s, s_start)
        if t == 0.0:
            out.append(y_start)
            continue
        sol = solve_ivp(field, (0.0, t), y_start, method='DOP853', rtol=rtol, atol=atol)
        out.append(sol.y[:, -1])
    return np.array(out)


class TestFunctionDerivatives(NamedTuple):
    d_tau: float
    d_eta: float


def deriv_tau(fiber: FiberPoint) -> float:
    """
    Rescaled Hamilton derivative of `tau` at a fiber point, `-2 |mu_b|^2`.
    """
    mu = fiber.base.mu
    return float(-2.0 * (mu @ mu + fiber.nu2))


def deriv_eta(fiber: FiberPoint, eta_a: float) -> float:
    """
    Rescaled Hamilton derivative of `eta_a` on the sphere C_a, `2 tau eta_a + 2 |nu|^2`.
    """
    return float(2.0 * fiber.base.tau * eta_a + 2.0 * fiber.nu2)


def field_derivatives(fiber: FiberPoint, eta_a: float) -> TestFunctionDerivatives:
    return TestFunctionDerivatives(deriv_tau(fiber), deriv_eta(fiber, eta_a))


class PiInvariantFunction:
    """
    Function on the compressed phase space with its rescaled Hamilton derivatives.

    Subclasses implement the value on compressed points, the field
    derivative on fiber points, the infimum of the field over one fiber
    choice, and a bound on the time derivative of the field along flows.
    """

    name: str = 'f'

    def value(self, point: CompressedPoint) -> float:
        raise NotImplementedError

    def field(self, fiber: FiberPoint) -> float:
        raise NotImplementedError

    def choice_infimum(self, point: CompressedPoint, choice: FiberChoice) -> float:
        raise NotImplementedError

    def lipschitz(self, sigma_max: float) -> float:
        raise NotImplementedError

    def __repr__(self) -> str:
        return self.name


class TauFunction(PiInvariantFunction):
    name = 'tau'

    def value(self, point: CompressedPoint) -> float:
        return point.tau

    def field(self, fiber: FiberPoint) -> float:
        return deriv_tau(fiber)

    def choice_infimum(self, point: CompressedPoint, choice: FiberChoice) -> float:
        mu = point.mu
        return float(-2.0 * (mu @ mu + choice.nu2_max))

    def lipschitz(self, sigma_max: float) -> float:
        return 8.0 * sigma_max ** 1.5


class EtaFunction(PiInvariantFunction):
    """
    `eta_a` of the cluster `a`. Field infima are only available at points of C_a.
    """

    def __init__(self, lattice: ClusterLattice, a: int):
        self.lattice = lattice
        self.a = a
        self.name = 'eta[%s]' % lattice.label(a)

    def value(self, point: CompressedPoint) -> float:
        return eta(self.lattice, self.a, point.y, point.xi)

    def field(self, fiber: FiberPoint) -> float:
        normal = self.lattice.project_internal(self.a, fiber.nu)
        return float(2.0 * fiber.base.tau * self.value(fiber.base) + 2.0 * normal @ normal)

    def choice_infimum(self, point: CompressedPoint, choice: FiberChoice) -> float:
        if self.lattice.subspace(self.a).residual(point.y) > MEMBERSHIP_TOL:
            raise ValueError('`point` must lie on the sphere of cluster %d.' % self.a)
        basis = choice.normal_basis
        if basis.shape[1] == 0 or choice.nu2_min == 0.0:
            return 0.0
        external = self.lattice.basis(self.a).T @ basis
        gram = np.eye(basis.shape[1]) - external.T @ external
        return float(2.0 * choice.nu2_min * max(np.linalg.eigvalsh(gram).min(), 0.0))

    def lipschitz(self, sigma_max: float) -> float:
        return 16.0 * sigma_max ** 1.5 + 8.0 * sigma_max


class CoordinateFunction(PiInvariantFunction):
    """
    Linear coordinate `y.e` on the sphere at infinity.
    """

    def __init__(self, e: np.ndarray, name: Optional[str] = None):
        self.e = np.asarray(e, dtype=float)
        self.name = name if name is not None else 'y.e'

    def value(self, point: CompressedPoint) -> float:
        return float(point.y @ self.e)

    def field(self, fiber: FiberPoint) -> float:
        return float(2.0 * fiber.mu_b @ self.e)

    def choice_infimum(self, point: CompressedPoint, choice: FiberChoice) -> float:
        normal = np.linalg.norm(choice.normal_basis.T @ self.e) if choice.normal_basis.shape[1] else 0.0
        return float(2.0 * point.mu @ self.e - 2.0 * np.sqrt(choice.nu2_max) * normal)

    def lipschitz(self, sigma_max: float) -> float:
        return 8.0 * sigma_max


def fiber_infimum(model: SpectralModel, lam: float, point: CompressedPoint, f: PiInvariantFunction) -> float:
    """
    Infimum of the rescaled Hamilton derivatives of `f` over the fiber of `point` at energy `lam`.

    Returns
    -------
    float
        Minimum over the admissible fiber choices, `inf` when the point is
        not on the characteristic variety.
    """
    values = [f.choice_infimum(point, choice) for choice in fiber_preimage(model, lam, point)]
    return min(values) if values else np.inf


def gap_d_fiber(model: SpectralModel, a: int, sigma: float, n_samples: int = 8, seed: Optional[int] = 0) -> float:
    """
    Half the infimum of the rescaled derivative of `eta_a` over the fibers of the subsystem of `a` at energy `sigma`.

    The fibers are sampled over a point of C'_a with zero external momentum,
    where `tau` vanishes and the derivative reduces to `2 |nu|^2`. The
    result is the gap of :func:`brokenray.phase_space.gap_d` whenever no
    eigenvalue of the subsystem of `a` itself lies strictly between
    `sigma` and the thresholds below it: lifts to `a` carry no normal
    momentum and only exist when `sigma` is such an eigenvalue.

    Parameters
    ----------
    model : SpectralModel
        Channel table.
    a : int
        Cluster.
    sigma : float
        Energy of the subsystem.
    n_samples : int, optional
        Fiber points per admissible choice, by default 8.
    seed : int, optional
        Seed of the normal directions, by default 0.

    Returns
    -------
    float
        Non-negative infimum, 0 when no fiber is admissible.
    """
    lattice = model.lattice
    basis = lattice.basis(a)
    # the origin has no sphere, its fibers only depend on the stratum
    y = basis[:, 0] if basis.shape[1] else np.eye(lattice.ambient_dim)[0]
    base = CompressedPoint(a, y, np.zeros(lattice.ambient_dim))
    fibers = sample_fiber_points(model, sigma, base, n_samples=n_samples, seed=seed)
    values = [deriv_eta(fiber, 0.0) for fiber in fibers]
    return 0.5 * min(values) if values else 0.0


class DiniResult(NamedTuple):
    lhs: float
    rhs: float
    tol: float
    passed: bool


def dini_check(curve: Callable[[float], CompressedPoint], f: PiInvariantFunction, t0: float,
               side: Union[int, str], model: SpectralModel, lam: float, h: float = 1e-6, n_windows: int = 3,
               slack: float = 10.0, t_range: Tuple[float, float] = (-np.inf, np.inf)) -> DiniResult:
    """
    One-sided lower Dini derivative test of `f` along `curve` at the time `t0`.

    The lower derivative is estimated by the smallest difference quotient
    over the dyadic windows `h, 2h, ..., 2^(n_windows - 1) h` and compared
    to the infimum of the field derivatives of `f` over the fiber of
    `curve(t0)`.

    Parameters
    ----------
    curve : callable
        Map from time to CompressedPoint.
    f : PiInvariantFunction
        Test function.
    t0 : float
        Time of the test.
    side : int or str
        `+1` or `'+'` for the right derivative, `-1` or `'-'` for the left one.
    model : SpectralModel
        Channel table.
    lam : float
        Total energy.
    h : float, optional
        Smallest window, by default 1e-6.
    n_windows : int, optional
        Number of dyadic windows, by default 3.
    slack : float, optional
        Factor of the tolerance `slack * h_max * L`, with `L` the bound of
        `f.lipschitz`, by default 10.
    t_range : tuple, optional
        Time domain of the curve, by default the real line.

    Returns
    -------
    DiniResult
        Estimated derivative, fiber infimum, tolerance and the outcome.
    """
    if side in ('+', '-'):
        side = 1 if side == '+' else -1
    if side not in (1, -1):
        raise ValueError('`side` must be +1 or -1, %r found.' % (side,))
    if h <= 0 or n_windows < 1:
        raise ValueError('`h` and `n_windows` must be positive, %r and %r found.' % (h, n_windows))

    h_max = h * 2 ** (n_windows - 1)
    if (side > 0 and t0 + h_max > t_range[1]) or (side < 0 and t0 - h_max < t_range[0]):
        raise SideUnavailable('Curve is not defined on the %s side of %r.' % ('right' if side > 0 else 'left', t0))

    f0 = f.value(curve(t0))
    quotients = [(f.value(curve(t0 + side * h * 2 ** k)) - f0) / (side * h * 2 ** k) for k in range(n_windows)]
    lhs = min(quotients)

    point = curve(t0)
    rhs = fiber_infimum(model, lam, point, f)
    energies = model.kinetic_energies(lam)
    sigma_max = float(energies.max()) if energies.size else 0.0
    tol = slack * h_max * f.lipschitz(sigma_max)
    passed = bool(lhs >= rhs - tol)
    if not passed:
        logger.debug('dini check of %r failed at t=%r: %r < %r - %r', f, t0, lhs, rhs, tol)
    return DiniResult(float(lhs), float(rhs), float(tol), passed)
