import dataclasses
import functools
import logging
import warnings
from dataclasses import dataclass
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize

from .cluster_lattice import FREE, ORIGIN, ClusterLattice
from .exceptions import ChannelClosed, DegenerateSegment, InfeasibleRay, ResolutionWarning
from .hamilton_flow import (S_GUARD, CoordinateFunction, EtaFunction, FlowSegment, TauFunction, angle, dini_check,
                            flow_point, reparametrize_time, time_of)
from .phase_space import (ENERGY_TOL, Channel, CompressedPoint, SpectralModel, eta, fiber_preimage,
                          subsystem_model)

logger = logging.getLogger(__name__)

GEOMETRY_TOL = 1e-9

ChannelKey = Tuple[int, int]


@dataclass(frozen=True)
class BreakString:
    """
    Break pattern `a_1, alpha_1, c_1, a_2, ..., c_m, a_{m+1}, alpha_{m+1}` of a broken ray.

    Attributes
    ----------
    clusters : tuple of int
        Propagation clusters `a_j`, one per leg.
    channels : tuple of tuple
        Channels `alpha_j` as `(cluster, index)` pairs, one per leg.
    breaks : tuple of int
        Break clusters `c_j`, one less than the legs.
    """
    clusters: Tuple[int, ...]
    channels: Tuple[ChannelKey, ...]
    breaks: Tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, 'clusters', tuple(int(a) for a in self.clusters))
        object.__setattr__(self, 'channels', tuple((int(b), int(k)) for b, k in self.channels))
        object.__setattr__(self, 'breaks', tuple(int(c) for c in self.breaks))
        if len(self.clusters) != len(self.breaks) + 1 or len(self.channels) != len(self.clusters):
            raise ValueError('Break string needs one cluster and one channel more than breaks, '
                             '%d clusters, %d channels and %d breaks found.'
                             % (len(self.clusters), len(self.channels), len(self.breaks)))

    @property
    def n_breaks(self) -> int:
        return len(self.breaks)

    def key(self) -> Tuple:
        seq = []
        for j, a in enumerate(self.clusters):
            seq.extend((a, self.channels[j]))
            if j < len(self.breaks):
                seq.append(self.breaks[j])
        return (len(self.breaks), tuple(seq))

    def reversed(self) -> 'BreakString':
        return BreakString(self.clusters[::-1], self.channels[::-1], self.breaks[::-1])

    def check(self, lattice: ClusterLattice, model: SpectralModel, lam: float) -> List[str]:
        """
        Problems of the string at energy `lam`, empty when the string is admissible.
        """
        problems = []
        for j, (a, (b, index)) in enumerate(zip(self.clusters, self.channels)):
            if a == ORIGIN:
                problems.append('leg %d propagates in the origin' % j)
                continue
            try:
                ch = model.channel(b, index)
            except ValueError:
                problems.append('leg %d uses the unknown channel (%d, %d)' % (j, b, index))
                continue
            if not lattice.leq(b, a):
                problems.append('leg %d channel cluster %d does not contain the plane of cluster %d' % (j, b, a))
            if lam - ch.energy <= 0.0:
                problems.append('leg %d channel (%d, %d) is closed at energy %r' % (j, b, index, lam))
        for j, c in enumerate(self.breaks):
            a, a_next = self.clusters[j], self.clusters[j + 1]
            if c == ORIGIN:
                problems.append('break %d is at the origin' % j)
            if not (lattice.leq(a, c) and lattice.leq(a_next, c)):
                problems.append('break %d cluster %d is not contained in both adjacent planes' % (j, c))
            if a == c and a_next == c:
                problems.append('break %d stays on its own plane' % j)
        return problems

    def to_dict(self) -> Dict:
        return {'clusters': list(self.clusters), 'channels': [list(ch) for ch in self.channels],
                'breaks': list(self.breaks)}


def _admissible_pairs(lattice: ClusterLattice, model: SpectralModel, lam: float,
                      clusters: Optional[Sequence[int]] = None) -> List[Tuple[int, ChannelKey]]:
    pairs = []
    candidates = range(len(lattice)) if clusters is None else clusters
    for a in candidates:
        if a == ORIGIN:
            continue
        for ch in model.channels:
            if lattice.leq(ch.cluster, a) and lam - ch.energy > 0.0:
                pairs.append((a, (ch.cluster, ch.index)))
    return pairs


def enumerate_strings(lattice: ClusterLattice, model: SpectralModel, lam: float, max_breaks: int) -> List[BreakString]:
    """
    All admissible break strings with at most `max_breaks` breaks.

    Parameters
    ----------
    lattice : ClusterLattice
        Collision planes.
    model : SpectralModel
        Channel table, its thresholds must be discrete.
    lam : float
        Total energy, channels with `lam - eps <= 0` are closed.
    max_breaks : int
        Break budget.

    Returns
    -------
    list of BreakString
        Strings in lexicographic order of `BreakString.key`.
    """
    model.require_discrete()
    if max_breaks < 0:
        raise ValueError('`max_breaks` must be non-negative, %r found.' % max_breaks)

    pairs = _admissible_pairs(lattice, model, lam)
    strings = []

    def extend(clusters, channels, breaks):
        strings.append(BreakString(tuple(clusters), tuple(channels), tuple(breaks)))
        if len(breaks) == max_breaks:
            return
        a = clusters[-1]
        for c in range(len(lattice)):
            if c == ORIGIN or not lattice.leq(a, c):
                continue
            for a_next, ch in _admissible_pairs(lattice, model, lam, lattice.clusters_containing(c)):
                if a == c and a_next == c:
                    continue
                extend(clusters + [a_next], channels + [ch], breaks + [c])

    for a, ch in pairs:
        extend([a], [ch], [])

    strings.sort(key=BreakString.key)
    logger.info('enumerated %d break strings with at most %d breaks', len(strings), max_breaks)
    return strings


@dataclass(eq=False)
class Leg:
    """
    Straight leg of a broken ray in the plane of `cluster`, with its image on the sphere at infinity.

    Attributes
    ----------
    start, end : array_like or None
        Configuration end points, None for the ends at infinity.
    segment : FlowSegment
        Sphere curve of the leg.
    t_start, t_end : float
        Times of the ends, infinite for ends at infinity.
    t_ref, s_ref : float
        Time and arclength of the reference point used to convert between them.
    """
    cluster: int
    channel: Channel
    xi: np.ndarray
    start: Optional[np.ndarray]
    end: Optional[np.ndarray]
    segment: FlowSegment
    t_start: float
    t_end: float
    t_ref: float
    s_ref: float

    @property
    def sigma(self) -> float:
        return float(self.xi @ self.xi)

    @property
    def stationary(self) -> bool:
        return self.segment.stationary

    def point_at_time(self, t: float) -> CompressedPoint:
        if self.segment.stationary:
            return CompressedPoint(self.cluster, self.segment.y0, self.xi)
        s = reparametrize_time(self.segment, t - self.t_ref, origin=self.s_ref)
        return flow_point(self.segment, s, strict=False)

    def time_at(self, s: float) -> float:
        if self.segment.stationary:
            return self.t_ref
        return self.t_ref + time_of(self.segment, s, origin=self.s_ref)


@dataclass(eq=False)
class BreakRecord:
    cluster: int
    w: np.ndarray
    point: CompressedPoint
    xi_in: np.ndarray
    xi_out: np.ndarray
    defect: float
    time: float


class RaySample(NamedTuple):
    leg: int
    s: float
    t: float
    point: CompressedPoint


@dataclass(frozen=True)
class Decision:
    """
    Choice made by the shooter at a plane hit, `option` is None for a pass-through.
    """
    hit_cluster: int
    cluster: Optional[int] = None
    channel: Optional[ChannelKey] = None
    coefficients: Optional[Tuple[float, ...]] = None


@dataclass(eq=False)
class BrokenRay:
    """
    Generalized broken bicharacteristic given by its legs and breaks.

    Time 0 is the first break, or the base point of an unbroken ray.
    """
    string: BreakString
    lam: float
    legs: List[Leg]
    breaks: List[BreakRecord]
    base_point: Optional[np.ndarray] = None
    decisions: Optional[List[Decision]] = None

    @property
    def n_breaks(self) -> int:
        return len(self.breaks)

    @property
    def break_times(self) -> List[float]:
        return [b.time for b in self.breaks]

    @property
    def points(self) -> List[np.ndarray]:
        return [b.w for b in self.breaks]

    @property
    def momenta(self) -> List[np.ndarray]:
        return [leg.xi for leg in self.legs]

    def point_at_time(self, t: float) -> CompressedPoint:
        for b in self.breaks:
            if t == b.time:
                return b.point
        for leg in self.legs:
            if leg.t_start <= t <= leg.t_end:
                return leg.point_at_time(t)
        return self.legs[-1].point_at_time(t)

    def samples(self, n: int = 32) -> List[RaySample]:
        """
        Points of every leg at `n` equally spaced arclengths, in time order.
        """
        out = []
        for j, leg in enumerate(self.legs):
            seg = leg.segment
            if seg.stationary:
                t = leg.t_start if np.isfinite(leg.t_start) else leg.t_ref
                out.append(RaySample(j, seg.s_range[0], t, CompressedPoint(leg.cluster, seg.y0, leg.xi)))
                continue
            for s in np.linspace(seg.s_range[0], seg.s_range[1], n):
                s = min(max(s, seg.s0 + S_GUARD), seg.s0 + np.pi - S_GUARD)
                out.append(RaySample(j, float(s), leg.time_at(s), flow_point(seg, s, strict=False)))
        return out

    def key(self) -> Tuple:
        points = tuple(tuple(np.round(b.w, 9)) for b in self.breaks)
        momenta = tuple(tuple(np.round(xi, 9)) for xi in self.momenta)
        return (self.string.key(), points, momenta)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _phase(w: np.ndarray, xi: np.ndarray) -> float:
    return angle(w, -xi)


def _is_radial(w: np.ndarray, xi: np.ndarray) -> bool:
    y = _unit(w)
    xi2 = float(xi @ xi)
    if xi2 <= ENERGY_TOL:
        return True
    mu = xi - (y @ xi) * y
    return bool(np.linalg.norm(mu) <= 1e-12 * max(1.0, np.sqrt(xi2)))


def _make_leg(cluster: int, channel: Channel, xi: np.ndarray, start: Optional[np.ndarray], end: Optional[np.ndarray],
              ref: np.ndarray, s_start: float, t_start: float, first: bool) -> Tuple[Leg, float, float]:
    # returns the leg, its final arclength and its final time
    energy = channel.energy + float(xi @ xi)
    y_ref = _unit(ref)

    if _is_radial(ref, xi):
        seg = FlowSegment(cluster, channel, energy, y_ref, xi, s_anchor=s_start)
        sigma = float(xi @ xi)
        if start is None or end is None:
            duration = np.inf
        elif sigma > ENERGY_TOL:
            duration = abs(np.log(np.linalg.norm(end) / np.linalg.norm(start))) / (2.0 * np.sqrt(sigma))
        else:
            duration = 0.0
        if first and start is None:
            t0, t1 = -np.inf, (0.0 if end is not None else np.inf)
            t_ref = 0.0
        else:
            t0, t1 = t_start, t_start + duration
            t_ref = t_start
        leg = Leg(cluster, channel, xi, start, end, seg, t0, t1, t_ref, s_start)
        return leg, s_start, t1

    phi_ref = _phase(ref, xi)
    if start is None:
        s0 = s_start
    else:
        s0 = s_start - _phase(start, xi)
    lo = s0 + (_phase(start, xi) if start is not None else S_GUARD)
    hi = s0 + (_phase(end, xi) if end is not None else np.pi - S_GUARD)
    s_end = hi
    if lo > hi:
        lo, hi = hi, lo
    seg = FlowSegment(cluster, channel, energy, y_ref, xi, s_anchor=s0 + phi_ref, s_range=(lo, hi))
    s_ref = s0 + phi_ref

    if start is None:
        t_ref = 0.0
        t0 = -np.inf
        t1 = 0.0 if end is not None else np.inf
    else:
        t_ref = t_start
        t0 = t_start
        if end is None:
            t1 = np.inf
        else:
            t1 = t_start + abs(time_of(seg, s0 + _phase(end, xi), origin=s_ref))
    leg = Leg(cluster, channel, xi, start, end, seg, t0, t1, t_ref, s_ref)
    return leg, s_end, t1


def assemble_ray(lattice: ClusterLattice, model: SpectralModel, lam: float, string: BreakString,
                 points: Sequence[np.ndarray], momenta: Sequence[np.ndarray],
                 base_point: Optional[np.ndarray] = None) -> BrokenRay:
    """
    Assembles a ray from break points and leg momenta without checking conservation or energies.

    :func:`build_ray` is the validating constructor; this one also accepts
    defective data, so that verification can be exercised on it.
    """
    m = string.n_breaks
    points = [np.asarray(w, dtype=float) for w in points]
    momenta = [np.asarray(xi, dtype=float) for xi in momenta]
    if len(points) != m or len(momenta) != m + 1:
        raise ValueError('Ray with %d breaks needs %d points and %d momenta, %d and %d found.'
                         % (m, m, m + 1, len(points), len(momenta)))
    if m == 0 and base_point is None:
        raise ValueError('`base_point` must be provided for an unbroken ray.')
    if base_point is not None:
        base_point = np.asarray(base_point, dtype=float)

    channels = [model.channel(*ch) for ch in string.channels]
    legs = []
    s_cursor, t_cursor = 0.0, 0.0
    for j in range(m + 1):
        start = points[j - 1] if j > 0 else None
        end = points[j] if j < m else None
        ref = start if start is not None else (end if end is not None else base_point)
        leg, s_cursor, t_cursor = _make_leg(string.clusters[j], channels[j], momenta[j], start, end, ref,
                                            s_cursor, t_cursor, first=(j == 0))
        legs.append(leg)

    breaks = []
    for j, c in enumerate(string.breaks):
        w = points[j]
        xi_in, xi_out = momenta[j], momenta[j + 1]
        xi_c = lattice.project_external(c, xi_in)
        defect = float(np.linalg.norm(lattice.project_external(c, xi_out - xi_in)))
        breaks.append(BreakRecord(c, w, CompressedPoint(c, _unit(w), xi_c), xi_in, xi_out, defect, legs[j].t_end))

    return BrokenRay(string, float(lam), legs, breaks, base_point)


def _segment_hits_origin(start: Optional[np.ndarray], end: Optional[np.ndarray], direction: np.ndarray) -> bool:
    # start/end None means the leg extends to infinity on that side
    d = _unit(direction)
    p = start if start is not None else end
    scale = max(1.0, float(np.linalg.norm(p)))
    perp = p - (p @ d) * d
    if np.linalg.norm(perp) > GEOMETRY_TOL * scale:
        return False
    # origin is at parameter u0 along p + u d
    u0 = -float(p @ d)
    if start is not None and end is not None:
        return -GEOMETRY_TOL * scale <= u0 <= float((end - start) @ d) + GEOMETRY_TOL * scale
    if start is not None:
        return u0 >= -GEOMETRY_TOL * scale
    return u0 <= GEOMETRY_TOL * scale


def build_ray(lattice: ClusterLattice, model: SpectralModel, lam: float, string: BreakString,
              points: Sequence[np.ndarray], initial_direction: np.ndarray, final_direction: np.ndarray,
              base_point: Optional[np.ndarray] = None) -> BrokenRay:
    """
    Builds a broken ray from its break string, break points and asymptotic directions.

    Each leg is a straight line in the plane of its cluster with momentum
    `sqrt(lam - eps)` times its unit direction. Interior legs run from
    `w_{j-1}` to `w_j`, the first one comes from infinity along
    `initial_direction` and the last one leaves along `final_direction`.

    Parameters
    ----------
    lattice : ClusterLattice
        Collision planes.
    model : SpectralModel
        Channel table.
    lam : float
        Total energy.
    string : BreakString
        Break pattern.
    points : sequence of array_like
        Break points `w_j`, each on the plane of its break cluster.
    initial_direction, final_direction : array_like
        Directions of the first and last legs.
    base_point : array_like, optional
        Point of the first leg, required for unbroken rays.

    Returns
    -------
    BrokenRay
        Ray with conserved external momenta at every break.

    Raises
    ------
    ChannelClosed
        When a channel is closed at `lam`, or a break carries more external
        kinetic energy than the outgoing channel allows.
    DegenerateSegment
        When consecutive points coincide or a leg passes through the origin.
    InfeasibleRay
        When the external momentum is not conserved at a break, or the legs
        leave their planes.
    """
    m = string.n_breaks
    lam = float(lam)
    channels = [model.channel(*ch) for ch in string.channels]
    for j, ch in enumerate(channels):
        if lam - ch.energy <= 0.0:
            raise ChannelClosed('Channel (%d, %d) of leg %d is closed at energy %r.' % (ch.cluster, ch.index, j, lam))

    problems = string.check(lattice, model, lam)
    if problems:
        raise ValueError('Invalid break string: %s.' % '; '.join(problems))

    points = [np.asarray(w, dtype=float) for w in points]
    if len(points) != m:
        raise ValueError('`points` must have %d entries, %d found.' % (m, len(points)))
    if m == 0 and base_point is None:
        raise ValueError('`base_point` must be provided for an unbroken ray.')

    for j, (c, w) in enumerate(zip(string.breaks, points)):
        if np.linalg.norm(w) <= GEOMETRY_TOL:
            raise DegenerateSegment('Break point %d is the origin.' % j)
        residual = lattice.subspace(c).residual(w)
        if residual > GEOMETRY_TOL * max(1.0, np.linalg.norm(w)):
            raise InfeasibleRay('Break point %d is not on the plane of cluster %d.' % (j, c), residual, j)

    sigmas = [lam - ch.energy for ch in channels]
    momenta = []
    for j in range(m + 1):
        if j == 0:
            direction = np.asarray(initial_direction, dtype=float)
        elif j == m:
            direction = np.asarray(final_direction, dtype=float)
        else:
            direction = points[j] - points[j - 1]
            if np.linalg.norm(direction) <= GEOMETRY_TOL * max(1.0, np.linalg.norm(points[j])):
                raise DegenerateSegment('Break points %d and %d coincide.' % (j - 1, j))
        if np.linalg.norm(direction) == 0.0:
            raise DegenerateSegment('Direction of leg %d is zero.' % j)
        momenta.append(np.sqrt(sigmas[j]) * _unit(direction))

    for j in range(m + 1):
        start = points[j - 1] if j > 0 else None
        end = points[j] if j < m else None
        if start is None and end is None:
            start = np.asarray(base_point, dtype=float)
            if _segment_hits_origin(start, None, momenta[j]) or _segment_hits_origin(None, start, momenta[j]):
                raise DegenerateSegment('Unbroken ray passes through the origin.')
        elif _segment_hits_origin(start, end, momenta[j]):
            raise DegenerateSegment('Leg %d passes through the origin.' % j)

        plane = lattice.subspace(string.clusters[j])
        residual = plane.residual(momenta[j])
        if residual > GEOMETRY_TOL * max(1.0, np.sqrt(sigmas[j])):
            raise InfeasibleRay('Leg %d leaves the plane of cluster %d.' % (j, string.clusters[j]), residual, j)

    for j, c in enumerate(string.breaks):
        xi_in, xi_out = momenta[j], momenta[j + 1]
        xi_c = lattice.project_external(c, xi_in)
        scale = max(1.0, np.sqrt(sigmas[j + 1]))
        if xi_c @ xi_c > sigmas[j + 1] + ENERGY_TOL * scale ** 2:
            raise ChannelClosed('Break %d carries external energy %r above the kinetic energy %r of the next leg.'
                                % (j, float(xi_c @ xi_c), sigmas[j + 1]))
        defect = float(np.linalg.norm(lattice.project_external(c, xi_out - xi_in)))
        if defect > GEOMETRY_TOL * scale:
            raise InfeasibleRay('External momentum is not conserved at break %d, defect %r.' % (j, defect), defect, j)
        for side, xi, a in (('incoming', xi_in, string.clusters[j]), ('outgoing', xi_out, string.clusters[j + 1])):
            normal = np.linalg.norm(lattice.project_internal(c, xi))
            if a != c and normal ** 2 <= ENERGY_TOL * scale ** 2:
                raise InfeasibleRay('The %s leg of break %d is tangent to cluster %d but labelled %d.'
                                    % (side, j, c, a), float(normal), j)

    return assemble_ray(lattice, model, lam, string, points, momenta, base_point)


def continue_momentum(lattice: ClusterLattice, model: SpectralModel, lam: float, xi_in: np.ndarray, c: int,
                      channel: Channel, normal_direction: Optional[np.ndarray] = None,
                      cluster: Optional[int] = None) -> np.ndarray:
    """
    Outgoing momentum at a break on the plane of `c`.

    The outgoing momentum is `pi_c xi_in + r nu` with
    `r = sqrt(lam - eps - |pi_c xi_in|^2)` and `nu` the unit normal direction
    in X^c cap X_{cluster}. Tangency (`r = 0`) returns `pi_c xi_in`.

    Raises
    ------
    ChannelClosed
        When `lam - eps < |pi_c xi_in|^2`.
    """
    xi_in = np.asarray(xi_in, dtype=float)
    xi_c = lattice.project_external(c, xi_in)
    sigma = lam - channel.energy
    r2 = sigma - float(xi_c @ xi_c)
    if r2 < -ENERGY_TOL * max(1.0, sigma):
        raise ChannelClosed('Channel (%d, %d) is closed at the break, kinetic energy %r below %r.'
                            % (channel.cluster, channel.index, sigma, float(xi_c @ xi_c)))
    if r2 <= ENERGY_TOL * max(1.0, sigma):
        return xi_c
    if normal_direction is None:
        raise ValueError('`normal_direction` must be provided for a normal continuation.')

    normal_basis = lattice.split_coordinates(c, FREE if cluster is None else cluster).relative
    nu = normal_basis @ (normal_basis.T @ np.asarray(normal_direction, dtype=float))
    norm = float(np.linalg.norm(nu))
    if norm == 0.0:
        raise ValueError('`normal_direction` must have a component normal to cluster %d.' % c)
    return xi_c + np.sqrt(r2) * nu / norm


class Hit(NamedTuple):
    u: float
    cluster: int
    w: np.ndarray


@dataclass(frozen=True, eq=False)
class ContinuationOption:
    """
    Continuation at a hit into `cluster` with `channel`, normal momentum `r N coefficients`.
    """
    cluster: int
    channel: Channel
    normal_basis: np.ndarray
    r: float
    coefficients: Tuple[float, ...] = ()

    def momentum(self, xi_c: np.ndarray) -> np.ndarray:
        if not self.coefficients:
            return xi_c
        coeffs = np.asarray(self.coefficients, dtype=float)
        return xi_c + self.r * (self.normal_basis @ (coeffs / np.linalg.norm(coeffs)))


def _line_cluster(lattice: ClusterLattice, w: np.ndarray, v: np.ndarray) -> int:
    """
    Smallest plane containing the line through `w` along `v`.
    """
    best, best_dim = FREE, lattice.ambient_dim
    scale_w = max(1.0, float(np.linalg.norm(w)))
    scale_v = max(1.0, float(np.linalg.norm(v)))
    for a, s in enumerate(lattice.subspaces):
        if s.dim < best_dim and s.residual(w) <= GEOMETRY_TOL * scale_w and s.residual(v) <= GEOMETRY_TOL * scale_v:
            best, best_dim = a, s.dim
    return best


def _line_hits(lattice: ClusterLattice, cluster: int, p: np.ndarray, xi: np.ndarray, u_min: float) -> List[Hit]:
    # hits of the line p + u xi_hat, u > u_min, with planes strictly inside X_cluster
    d = _unit(xi)
    scale = max(1.0, float(np.linalg.norm(p)))
    perp = p - (p @ d) * d
    if np.linalg.norm(perp) <= GEOMETRY_TOL * scale and (not np.isfinite(u_min)
                                                        or -float(p @ d) > u_min + GEOMETRY_TOL * scale):
        raise DegenerateSegment('Leg passes through the origin.')

    raw = []
    for c in range(len(lattice)):
        if c in (FREE, ORIGIN) or c == cluster or not lattice.leq(cluster, c):
            continue
        q = lattice.complement(c)
        r0 = q.T @ p
        rd = q.T @ d
        rd2 = float(rd @ rd)
        if rd2 <= 1e-24:
            continue
        u = -float(r0 @ rd) / rd2
        if np.linalg.norm(r0 + u * rd) > GEOMETRY_TOL * scale:
            continue
        if u > u_min + GEOMETRY_TOL * scale:
            raw.append((u, c))

    raw.sort()
    hits = []
    k = 0
    while k < len(raw):
        u, c = raw[k]
        group = [c]
        k += 1
        while k < len(raw) and raw[k][0] - u <= GEOMETRY_TOL * scale:
            group.append(raw[k][1])
            k += 1
        meet = functools.reduce(lattice.meet, group)
        if meet == ORIGIN:
            raise DegenerateSegment('Leg passes through the origin.')
        hits.append(Hit(u, meet, p + u * d))
    return hits


def continuation_options(lattice: ClusterLattice, model: SpectralModel, lam: float, hit: Hit, xi_in: np.ndarray,
                         cluster: int, channel: Channel, n_directions: int = 8,
                         rng: Optional[np.random.Generator] = None) -> List[ContinuationOption]:
    """
    Break continuations available at `hit` for a leg of `cluster` and `channel` with momentum `xi_in`.

    Tangential continuations stay in the plane of the hit and need an exact
    energy match, normal ones leave it with positive normal momentum. A
    one-dimensional normal space gives both signs, larger ones are sampled
    with `n_directions` directions. Continuations identical to passing
    through the hit are left out.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    c, w = hit.cluster, hit.w
    xi_c = lattice.project_external(c, xi_in)
    xi_c2 = float(xi_c @ xi_c)
    options = []
    for a in lattice.clusters_containing(c):
        if a == ORIGIN:
            continue
        for ch in model.channels:
            if not lattice.leq(ch.cluster, a):
                continue
            sigma = lam - ch.energy
            if sigma <= 0.0:
                continue
            r2 = sigma - xi_c2
            tol = ENERGY_TOL * max(1.0, sigma)
            if a == c:
                if abs(r2) > tol or xi_c2 <= tol:
                    continue
                if _segment_hits_origin(w, None, xi_c):
                    continue
                options.append(ContinuationOption(a, ch, np.zeros((lattice.ambient_dim, 0)), 0.0))
                continue
            if r2 <= tol:
                continue
            basis = lattice.split_coordinates(c, a).relative
            k = basis.shape[1]
            if k == 1:
                candidates = [(1.0,), (-1.0,)]
            else:
                candidates = [tuple(_unit(rng.normal(size=k))) for _ in range(n_directions)]
            for coeffs in candidates:
                option = ContinuationOption(a, ch, basis, float(np.sqrt(r2)), coeffs)
                xi_out = option.momentum(xi_c)
                if _line_cluster(lattice, w, xi_out) != a:
                    continue
                if _segment_hits_origin(w, None, xi_out):
                    continue
                if a == cluster and ch == channel and np.linalg.norm(xi_out - xi_in) <= GEOMETRY_TOL * np.sqrt(sigma):
                    continue
                options.append(option)
    return options


Chooser = Callable[[Hit, List[ContinuationOption]], Optional[ContinuationOption]]


def random_chooser(rng: np.random.Generator) -> Chooser:
    """
    Chooser that passes through or breaks with equal odds over all options.
    """
    def choose(hit: Hit, options: List[ContinuationOption]) -> Optional[ContinuationOption]:
        k = int(rng.integers(len(options) + 1))
        return None if k == 0 else options[k - 1]
    return choose


def replay_chooser(decisions: Sequence[Decision]) -> Chooser:
    """
    Chooser repeating recorded decisions, with the recorded normal coefficients.
    """
    pending = iter(decisions)

    def choose(hit: Hit, options: List[ContinuationOption]) -> Optional[ContinuationOption]:
        decision = next(pending, None)
        if decision is None or decision.hit_cluster != hit.cluster:
            raise InfeasibleRay('Replayed ray hits cluster %d out of the recorded order.' % hit.cluster)
        if decision.cluster is None:
            return None
        for option in options:
            key = (option.channel.cluster, option.channel.index)
            if option.cluster == decision.cluster and key == decision.channel:
                return dataclasses.replace(option, coefficients=decision.coefficients or ())
        raise InfeasibleRay('Replayed continuation into cluster %d is not available.' % decision.cluster)
    return choose


def _decision(hit: Hit, option: Optional[ContinuationOption]) -> Decision:
    if option is None:
        return Decision(hit.cluster)
    return Decision(hit.cluster, option.cluster, (option.channel.cluster, option.channel.index),
                    tuple(option.coefficients) if option.coefficients else None)


def _finish(lattice, model, lam, clusters, channels, breaks, points, momenta, start, decisions=None) -> BrokenRay:
    string = BreakString(tuple(clusters), tuple((ch.cluster, ch.index) for ch in channels), tuple(breaks))
    ray = build_ray(lattice, model, lam, string, points, momenta[0], momenta[-1], base_point=start)
    ray.decisions = decisions
    return ray


def shoot_ray(lattice: ClusterLattice, model: SpectralModel, lam: float, start: np.ndarray, xi: np.ndarray,
              channel: Channel, cluster: Optional[int] = None, u_min: float = -np.inf, max_breaks: int = 4,
              chooser: Optional[Chooser] = None, rng: Optional[np.random.Generator] = None,
              n_directions: int = 8) -> BrokenRay:
    """
    Shoots a broken ray along the line through `start` with momentum `xi`.

    At each plane hit after the parameter `u_min` the chooser decides
    between passing through (None) and one of the continuation options.
    Once `max_breaks` breaks are made every further hit is passed through.

    Parameters
    ----------
    lattice : ClusterLattice
        Collision planes.
    model : SpectralModel
        Channel table.
    lam : float
        Total energy.
    start : array_like
        Point of the first leg.
    xi : array_like
        Momentum of the first leg, with `|xi|^2 = lam - eps`.
    channel : Channel
        Channel of the first leg.
    cluster : int, optional
        Cluster of the first leg, by default the smallest plane containing it.
    u_min : float, optional
        Hits at `start + u xi/|xi|` with `u <= u_min` are ignored, by default
        `-inf` so the first leg comes from infinity.
    max_breaks : int, optional
        Break budget, by default 4.
    chooser : callable, optional
        Decision rule, by default :func:`random_chooser` on `rng`.
    rng : Generator, optional
        Random generator for the default chooser and normal directions.
    n_directions : int, optional
        Sampled normal directions for normal spaces of dimension 2 or more.

    Returns
    -------
    BrokenRay
        Validated ray, with its decisions recorded for replay.
    """
    rng = np.random.default_rng() if rng is None else rng
    chooser = random_chooser(rng) if chooser is None else chooser
    start = np.asarray(start, dtype=float)
    xi = np.asarray(xi, dtype=float)
    a = _line_cluster(lattice, start, xi) if cluster is None else cluster

    clusters, channels, breaks, points, momenta = [a], [channel], [], [], [xi]
    decisions = []
    p, u0 = start, u_min
    while True:
        chosen = None
        for hit in _line_hits(lattice, clusters[-1], p, momenta[-1], u0):
            if len(breaks) >= max_breaks:
                decisions.append(Decision(hit.cluster))
                continue
            options = continuation_options(lattice, model, lam, hit, momenta[-1], clusters[-1], channels[-1],
                                           n_directions, rng)
            option = chooser(hit, options)
            decisions.append(_decision(hit, option))
            if option is not None:
                chosen = (hit, option)
                break
        if chosen is None:
            break
        hit, option = chosen
        xi_out = option.momentum(lattice.project_external(hit.cluster, momenta[-1]))
        breaks.append(hit.cluster)
        points.append(hit.w)
        clusters.append(option.cluster)
        channels.append(option.channel)
        momenta.append(xi_out)
        p, u0 = hit.w, 0.0

    return _finish(lattice, model, lam, clusters, channels, breaks, points, momenta, start, decisions)


def branch_rays(lattice: ClusterLattice, model: SpectralModel, lam: float, start: np.ndarray, xi: np.ndarray,
                channel: Channel, cluster: Optional[int] = None, u_min: float = -np.inf, max_breaks: int = 2,
                n_directions: int = 4, max_rays: int = 256, seed: Optional[int] = 0) -> List[BrokenRay]:
    """
    All rays obtained by breaking or passing through at every hit, up to `max_breaks` breaks.

    The family holds the unbroken continuation of every prefix, so it is
    closed under dropping the last break. Enumeration stops after `max_rays` rays.
    """
    rng = np.random.default_rng(seed)
    start = np.asarray(start, dtype=float)
    xi = np.asarray(xi, dtype=float)
    a = _line_cluster(lattice, start, xi) if cluster is None else cluster
    rays = []

    def grow(clusters, channels, breaks, points, momenta, p, u0):
        if len(rays) >= max_rays:
            return
        try:
            rays.append(_finish(lattice, model, lam, clusters, channels, breaks, points, momenta, start))
        except (InfeasibleRay, DegenerateSegment, ChannelClosed) as err:
            logger.debug('dropped branch %r: %s', breaks, err)
            return
        if len(breaks) >= max_breaks:
            return
        try:
            hits = _line_hits(lattice, clusters[-1], p, momenta[-1], u0)
        except DegenerateSegment:
            return
        for hit in hits:
            options = continuation_options(lattice, model, lam, hit, momenta[-1], clusters[-1], channels[-1],
                                           n_directions, rng)
            for option in options:
                if len(rays) >= max_rays:
                    return
                xi_out = option.momentum(lattice.project_external(hit.cluster, momenta[-1]))
                grow(clusters + [option.cluster], channels + [option.channel], breaks + [hit.cluster],
                     points + [hit.w], momenta + [xi_out], hit.w, 0.0)

    grow([a], [channel], [], [], [xi], start, u_min)
    logger.debug('branched %d rays from %r', len(rays), start)
    return rays


def sample_incoming(lattice: ClusterLattice, a: int, rng: np.random.Generator,
                    max_tries: int = 100) -> Tuple[np.ndarray, np.ndarray]:
    """
    Random point `(y, p)` of S*C'_a: a regular unit direction `y` of X_a and a unit `p` in X_a orthogonal to it.
    """
    basis = lattice.basis(a)
    k = basis.shape[1]
    if k < 2:
        raise ValueError('Cluster %d has no tangent directions, dimension %d found.' % (a, k))
    for _ in range(max_tries):
        y = _unit(basis @ rng.normal(size=k))
        if lattice.stratum_of(y, tol=1e-6) != a:
            continue
        v = basis @ rng.normal(size=k)
        p = v - (v @ y) * y
        if np.linalg.norm(p) > 1e-6:
            return y, _unit(p)
    raise ValueError('No regular direction found on cluster %d.' % a)


def _start_pairs(lattice: ClusterLattice, model: SpectralModel, lam: float) -> List[Tuple[int, Channel]]:
    return [(a, model.channel(*ch)) for a, ch in _admissible_pairs(lattice, model, lam) if lattice.dim(a) >= 2]


def random_rays(lattice: ClusterLattice, model: SpectralModel, lam: float, n: int, max_breaks: int = 4,
                seed: Optional[int] = None, n_directions: int = 8, max_tries: int = 20) -> List[BrokenRay]:
    """
    Deterministic family of `n` randomly shot rays.

    Every ray uses its own generator spawned from `seed`, so the family does
    not depend on evaluation order. Starting clusters and channels are drawn
    among the admissible pairs on planes of dimension 2 or more.
    """
    pairs = _start_pairs(lattice, model, lam)
    if not pairs:
        return []
    rays = []
    for child in np.random.SeedSequence(seed).spawn(n):
        rng = np.random.default_rng(child)
        for _ in range(max_tries):
            a, ch = pairs[int(rng.integers(len(pairs)))]
            y, p = sample_incoming(lattice, a, rng)
            xi = -np.sqrt(lam - ch.energy) * y
            impact = rng.uniform(0.2, 1.5) * p
            try:
                rays.append(shoot_ray(lattice, model, lam, impact, xi, ch, cluster=a, max_breaks=max_breaks,
                                      rng=rng, n_directions=n_directions))
                break
            except (InfeasibleRay, DegenerateSegment, ChannelClosed) as err:
                logger.debug('resampling random ray: %s', err)
    logger.info('shot %d random rays with at most %d breaks', len(rays), max_breaks)
    return rays


def sweep_rays(lattice: ClusterLattice, model: SpectralModel, lam: float, max_breaks: int, n_rays: int = 8,
               n_directions: int = 4, seed: Optional[int] = 0, max_rays: int = 256) -> List[BrokenRay]:
    """
    Branched ray families from `n_rays` incoming points per admissible starting pair, sorted by ray key.
    """
    model.require_discrete()
    rng = np.random.default_rng(seed)
    rays = []
    for a, ch in _start_pairs(lattice, model, lam):
        for _ in range(n_rays):
            y, p = sample_incoming(lattice, a, rng)
            xi = -np.sqrt(lam - ch.energy) * y
            rays.extend(branch_rays(lattice, model, lam, p, xi, ch, cluster=a, max_breaks=max_breaks,
                                    n_directions=n_directions, max_rays=max_rays, seed=int(rng.integers(2 ** 31))))
    rays.sort(key=BrokenRay.key)
    logger.info('swept %d rays with at most %d breaks', len(rays), max_breaks)
    return rays


def reverse_ray(ray: BrokenRay, lattice: ClusterLattice, model: SpectralModel) -> BrokenRay:
    """
    Time reversal of `ray`: legs in reverse order with negated momenta.
    """
    points = [b.w for b in ray.breaks][::-1]
    momenta = [-leg.xi for leg in ray.legs][::-1]
    return assemble_ray(lattice, model, ray.lam, ray.string.reversed(), points, momenta, ray.base_point)


VIOLATION_KINDS = ('StringViolation', 'EnergyViolation', 'ClusterViolation', 'ContinuityViolation',
                   'ConservationViolation', 'MonotonicityViolation', 'TangencyViolation', 'BreakBoundViolation',
                   'DiniViolation')


class Violation(NamedTuple):
    kind: str
    position: Optional[int]
    defect: float
    message: str


class RayReport(NamedTuple):
    passed: bool
    violations: List[Violation]

    def kinds(self) -> List[str]:
        return sorted({v.kind for v in self.violations})


def _eta_dichotomy(leg: Leg, lattice: ClusterLattice, c: int, t_break: float, n: int = 32) -> Optional[Violation]:
    # once eta_c is positive, exp(C t) eta_c does not decrease along the leg
    if leg.stationary:
        return None
    sigma = leg.sigma
    span = leg.t_end - t_break
    cap = 1.0 / np.sqrt(sigma)
    times = t_break + min(span, cap) * np.linspace(0.0, 1.0, n + 1)[1:]
    points = [leg.point_at_time(t) for t in times]
    external = np.array([np.linalg.norm(lattice.project_external(c, p.y)) for p in points])
    if external.min() <= 1e-6:
        return None
    rate = 2.0 * np.sqrt(sigma) / external.min()
    if rate * (times[-1] - t_break) > 8.0:
        keep = rate * (times - t_break) <= 8.0
        times, points = times[keep], [p for p, k in zip(points, keep) if k]
    values = np.array([eta(lattice, c, p.y, p.xi) for p in points])
    positive = np.flatnonzero(values > GEOMETRY_TOL)
    if positive.size == 0:
        return None
    tail = slice(positive[0], None)
    g = np.exp(rate * (times[tail] - t_break)) * values[tail]
    drop = float(-np.min(np.diff(g))) if g.size > 1 else 0.0
    if drop > GEOMETRY_TOL * max(1.0, float(np.abs(g).max())):
        return Violation('TangencyViolation', None, drop, 'exp(Ct) eta decreases after leaving the plane')
    return None


def verify_ray(ray: BrokenRay, lattice: ClusterLattice, model: SpectralModel, mode: str = 'structural',
               constants: Optional['BoundConstants'] = None, kinetic_window: Optional[Tuple[float, int]] = None,
               tol: float = GEOMETRY_TOL) -> RayReport:
    """
    Checks a broken ray against the invariants of generalized broken bicharacteristics.

    Parameters
    ----------
    ray : BrokenRay
        Ray to check, possibly assembled from defective data.
    lattice : ClusterLattice
        Collision planes.
    model : SpectralModel
        Channel table.
    mode : str, optional
        `'structural'` for the geometric checks or `'dini'` to also test
        the one-sided Dini inequalities of tau, eta and the coordinates at
        every break, by default 'structural'.
    constants : BoundConstants, optional
        When given, the number of breaks is checked against the bound.
    kinetic_window : tuple, optional
        `(c0, m)`: at most `m` kinetic energies of the ray lie below `c0`.
        Enables the break bound for non-discrete thresholds.
    tol : float, optional
        Geometric tolerance, by default 1e-9.

    Returns
    -------
    RayReport
        Outcome with every violation found.
    """
    if not isinstance(ray, BrokenRay):
        raise TypeError('`ray` must be a BrokenRay, %r found.' % type(ray))
    if mode not in ('structural', 'dini'):
        raise ValueError('`mode` must be "structural" or "dini", %r found.' % mode)

    violations = []
    lam = ray.lam
    string = ray.string

    for problem in string.check(lattice, model, lam):
        violations.append(Violation('StringViolation', None, np.nan, problem))
    for j, leg in enumerate(ray.legs):
        if leg.cluster != string.clusters[j] or (leg.channel.cluster, leg.channel.index) != string.channels[j]:
            violations.append(Violation('StringViolation', j, np.nan, 'leg %d does not match its string entry' % j))

    for j, leg in enumerate(ray.legs):
        sigma = lam - leg.channel.energy
        defect = abs(leg.sigma - sigma)
        if defect > ENERGY_TOL * max(1.0, sigma):
            violations.append(Violation('EnergyViolation', j, defect,
                                        'leg %d has kinetic energy %r instead of %r' % (j, leg.sigma, sigma)))
        plane = lattice.subspace(leg.cluster)
        residual = max([plane.residual(leg.xi)] + [plane.residual(w) for w in (leg.start, leg.end) if w is not None])
        if residual > tol * max(1.0, np.sqrt(leg.sigma)):
            violations.append(Violation('ClusterViolation', j, residual,
                                        'leg %d leaves the plane of cluster %d' % (j, leg.cluster)))
        if leg.start is not None and leg.end is not None:
            delta = leg.end - leg.start
            norm = float(np.linalg.norm(delta))
            if norm > 0.0 and leg.sigma > 0.0:
                d = _unit(leg.xi)
                perp = float(np.linalg.norm(delta - (delta @ d) * d)) / norm
                if perp > tol:
                    violations.append(Violation('ContinuityViolation', j, perp,
                                                'leg %d momentum does not point along the leg' % j))
                if delta @ d < 0.0:
                    violations.append(Violation('MonotonicityViolation', j, -float(delta @ d) / norm,
                                                'leg %d runs against its momentum' % j))

    for j, b in enumerate(ray.breaks):
        c = b.cluster
        residual = lattice.subspace(c).residual(b.w)
        scale = max(1.0, np.sqrt(ray.legs[j + 1].sigma))
        if residual > tol * max(1.0, np.linalg.norm(b.w)):
            violations.append(Violation('ClusterViolation', j, residual, 'break %d is off cluster %d' % (j, c)))
        y = _unit(b.w)
        for side, leg in (('incoming', ray.legs[j]), ('outgoing', ray.legs[j + 1])):
            gap = float(np.linalg.norm(leg.point_at_time(b.time).y - y))
            if gap > 1e-7:
                violations.append(Violation('ContinuityViolation', j, gap,
                                            'the %s leg misses break %d on the sphere' % (side, j)))
        if b.defect > tol * scale:
            violations.append(Violation('ConservationViolation', j, b.defect,
                                        'external momentum jumps by %r at break %d' % (b.defect, j)))
        jump = float(-y @ b.xi_out) - float(-y @ b.xi_in)
        if jump > tol * scale:
            violations.append(Violation('MonotonicityViolation', j, jump, 'tau increases at break %d' % j))
        for side, xi, a in (('incoming', b.xi_in, string.clusters[j]), ('outgoing', b.xi_out, string.clusters[j + 1])):
            normal = float(np.linalg.norm(lattice.project_internal(c, xi)))
            if a != c and normal ** 2 <= ENERGY_TOL * scale ** 2:
                violations.append(Violation('TangencyViolation', j, normal,
                                            'the %s leg of break %d is tangent to cluster %d' % (side, j, c)))
        if string.clusters[j + 1] != c:
            found = _eta_dichotomy(ray.legs[j + 1], lattice, c, b.time)
            if found is not None:
                violations.append(found._replace(position=j))

    samples = sorted(ray.samples(16), key=lambda sample: sample.t)
    taus = np.array([sample.point.tau for sample in samples])
    if taus.size > 1:
        rise = np.diff(taus)
        k = int(np.argmax(rise))
        if rise[k] > tol * max(1.0, float(np.abs(taus).max())):
            violations.append(Violation('MonotonicityViolation', samples[k + 1].leg, float(rise[k]),
                                        'tau increases along leg %d' % samples[k + 1].leg))

    bound = None
    if kinetic_window is not None:
        c0, m = kinetic_window
        if constants is None:
            constants = bound_constants(lattice, model, strict=False)
        bound = break_bound_not_discrete(constants, c0, m, lam, float(model.global_thresholds().min()))
    elif constants is not None:
        bound = constants.max_breaks
    if bound is not None and ray.n_breaks > bound:
        violations.append(Violation('BreakBoundViolation', None, ray.n_breaks - bound,
                                    '%d breaks exceed the bound %r' % (ray.n_breaks, bound)))

    if mode == 'dini':
        violations.extend(_dini_violations(ray, lattice, model))

    if violations:
        logger.debug('ray %r failed: %s', string.key(), ', '.join(v.kind for v in violations))
    return RayReport(not violations, violations)


def _dini_violations(ray: BrokenRay, lattice: ClusterLattice, model: SpectralModel) -> List[Violation]:
    out = []
    identity = np.eye(lattice.ambient_dim)
    for j, b in enumerate(ray.breaks):
        functions = [TauFunction(), EtaFunction(lattice, b.cluster)]
        functions += [CoordinateFunction(identity[k], 'y[%d]' % k) for k in range(lattice.ambient_dim)]
        for side in (1, -1):
            leg = ray.legs[j + 1] if side > 0 else ray.legs[j]
            h = min(1e-6, (leg.t_end - leg.t_start) / 8.0)
            if h <= 1e-12:
                continue
            for f in functions:
                try:
                    result = dini_check(ray.point_at_time, f, b.time, side, model, ray.lam, h=h)
                except ValueError as err:
                    # the fiber infimum of eta_c only exists on the sphere of c
                    residual = lattice.subspace(b.cluster).residual(b.point.y)
                    out.append(Violation('DiniViolation', j, float(residual),
                                         '%r has no fiber bound at break %d: %s' % (f, j, err)))
                    continue
                if not result.passed:
                    out.append(Violation('DiniViolation', j, result.rhs - result.tol - result.lhs,
                                         '%r fails the %s Dini inequality at break %d'
                                         % (f, 'right' if side > 0 else 'left', j)))
    return out


def length_of(ray: BrokenRay) -> float:
    """
    Sphere arclength of the ray, open ends counted up to their radial limits.
    """
    return float(sum(leg.segment.length for leg in ray.legs))


def length_by_energy(ray: BrokenRay) -> Dict[float, float]:
    lengths = {}
    for leg in ray.legs:
        key = round(leg.sigma, 12)
        lengths[key] = lengths.get(key, 0.0) + leg.segment.length
    return lengths


class TauArclength(NamedTuple):
    length: float
    delta_tau: float
    bound: float


def tau_arclength_bound(ray: BrokenRay, c0: Optional[float] = None) -> TauArclength:
    """
    Arclength of the ray against the bound `C0 (sum sigma_j^(-1/2))^(1/2) |delta tau|^(1/2)`.

    The sums run over the moving legs. On a leg of kinetic energy `sigma`
    tau equals `sqrt(sigma) cos(phase)`, and `|cos s - cos s'| >= |s - s'|^2 / C0^2`
    bounds each leg by `C0 (|delta tau_j| / sqrt(sigma_j))^(1/2)`.
    """
    c0 = arc_constant() if c0 is None else c0
    length, delta, weights = 0.0, 0.0, 0.0
    for leg in ray.legs:
        seg = leg.segment
        if seg.stationary:
            continue
        lo = 0.0 if seg.open_start else seg.phase(seg.s_range[0])
        hi = np.pi if seg.open_end else seg.phase(seg.s_range[1])
        length += hi - lo
        delta += np.sqrt(seg.sigma) * abs(np.cos(lo) - np.cos(hi))
        weights += 1.0 / np.sqrt(seg.sigma)
    return TauArclength(float(length), float(delta), float(c0 * np.sqrt(weights * delta)))


def eta_profile(ray: BrokenRay, lattice: ClusterLattice, a: int, n: int = 64,
                margin: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Values of `eta_a` on `n` times around the breaks, `nan` where the external part vanishes.
    """
    times = ray.break_times or [0.0]
    grid = np.linspace(min(times) - margin, max(times) + margin, n)
    values = np.full(n, np.nan)
    for k, t in enumerate(grid):
        point = ray.point_at_time(float(t))
        if np.linalg.norm(lattice.project_external(a, point.y)) > 1e-12:
            values[k] = eta(lattice, a, point.y, point.xi)
    return grid, values


def _sphere_distances(lattice: ClusterLattice, clusters: Sequence[int], q: np.ndarray) -> np.ndarray:
    # angle between each row of q and each sphere C_c
    out = np.empty((q.shape[0], len(clusters)))
    for k, c in enumerate(clusters):
        inside = np.linalg.norm(q @ lattice.basis(c), axis=1)
        outside = np.linalg.norm(q @ lattice.complement(c), axis=1)
        out[:, k] = np.arctan2(outside, inside)
    return out


@functools.lru_cache(maxsize=32)
def local_length(lattice: ClusterLattice, n_samples: int = 4000, seed: int = 0) -> float:
    """
    Length below which every broken ray stays near one cluster.

    For a direction `q` the radius is the largest distance from `q` to the
    union `F_a` of the spheres C_c that do not contain C_a, over all
    clusters `a` but the origin. The local length is half the smallest
    radius, found by sampling the sphere and refining the best samples.

    Returns
    -------
    float
        Local length, `pi` when there is no proper collision plane.
    """
    proper = [c for c in range(len(lattice)) if c not in (FREE, ORIGIN)]
    if not proper:
        return np.pi
    families = []
    for a in range(len(lattice)):
        if a == ORIGIN:
            continue
        families.append([proper.index(c) for c in proper if not lattice.leq(c, a)])

    def radii(q):
        q = np.atleast_2d(q)
        q = q / np.linalg.norm(q, axis=1, keepdims=True)
        dist = _sphere_distances(lattice, proper, q)
        per_family = [dist[:, fam].min(axis=1) if fam else np.full(q.shape[0], np.pi) for fam in families]
        return np.max(per_family, axis=0)

    n = lattice.ambient_dim
    if n == 1:
        return np.pi
    if n == 2:
        theta = np.linspace(0.0, np.pi, 7201)
        values = radii(np.column_stack([np.cos(theta), np.sin(theta)]))
        k = int(np.argmin(values))
        step = theta[1] - theta[0]
        res = optimize.minimize_scalar(lambda th: float(radii([np.cos(th), np.sin(th)])[0]),
                                       bounds=(theta[k] - step, theta[k] + step), method='bounded',
                                       options={'xatol': 1e-12})
        best = min(float(values[k]), float(res.fun))
    else:
        rng = np.random.default_rng(seed)
        q = rng.normal(size=(n_samples, n))
        values = radii(q)
        best = float(values.min())
        for k in np.argsort(values)[:5]:
            res = optimize.minimize(lambda v: float(radii(v)[0]), q[k], method='Nelder-Mead',
                                    options={'xatol': 1e-10, 'fatol': 1e-12, 'maxiter': 4000})
            best = min(best, float(res.fun))
    logger.debug('local length of a lattice with %d clusters: %r', len(lattice), 0.5 * best)
    return 0.5 * best


@functools.lru_cache(maxsize=None)
def arc_constant() -> float:
    """
    Constant `C0 = pi / sqrt(2)` with `|cos s - cos s'| >= |s - s'|^2 / C0^2` on `[0, pi]`.
    """
    def ratio(x):
        s, t = x
        if s - t <= 1e-9:
            return np.inf
        return abs(np.cos(s) - np.cos(t)) / (s - t) ** 2

    grid = np.linspace(0.0, np.pi, 201)
    s, t = np.meshgrid(grid, grid, indexing='ij')
    with np.errstate(divide='ignore', invalid='ignore'):
        values = np.where(s > t, np.abs(np.cos(s) - np.cos(t)) / (s - t) ** 2, np.inf)
    k = np.unravel_index(np.argmin(values), values.shape)
    best = float(values[k])
    res = optimize.minimize(ratio, [s[k], t[k]], method='L-BFGS-B', bounds=[(0.0, np.pi)] * 2)
    if res.success and np.isfinite(res.fun):
        best = min(best, float(res.fun))
    return float(1.0 / np.sqrt(best))


class BoundConstants(NamedTuple):
    """
    Constants of the break bound.

    Attributes
    ----------
    l : float
        Local length of the lattice.
    c0 : float
        Arc constant.
    c1 : int
        Number of global thresholds, `nan` when they are not discrete.
    n_body : int
        Number of bodies.
    max_breaks : float
        Bound on the number of breaks, `nan` when the thresholds are not discrete.
    subsystem_max_breaks : dict
        Bounds of the subsystems of the 2-clusters, by label.
    """
    l: float
    c0: float
    c1: float
    n_body: int
    max_breaks: float
    subsystem_max_breaks: Dict[str, float]


def _max_breaks(lattice: ClusterLattice, model: SpectralModel) -> Tuple[float, Dict[str, float]]:
    n_body = lattice.n_body
    if n_body <= 2:
        return 0.0, {}
    length = local_length(lattice)
    if n_body == 3:
        return 3.0 * (np.pi / length + 1.0), {}
    subs = {}
    for a in range(len(lattice)):
        if lattice.cluster_rank[a] == 2:
            sub_lattice, sub_model, _ = subsystem_model(model, a)
            subs[lattice.label(a)] = _max_breaks(sub_lattice, sub_model)[0]
    sub_max = max(subs.values(), default=0.0)
    c1 = len(model.global_thresholds()) if model.is_discrete else np.nan
    return (c1 * np.pi / length + 1.0) * (2.0 * sub_max + 3.0), subs


def bound_constants(lattice: ClusterLattice, model: SpectralModel, strict: bool = True) -> BoundConstants:
    """
    Break bound of the system and the constants it is built from.

    The bound vanishes for two bodies and is `3 (pi / l + 1)` for three.
    Larger systems subdivide rays of length at most `C1 pi` into pieces of
    length `l`, each with at most `2 M' + 2` breaks, where `M'` is the
    largest bound of the subsystems of the 2-clusters.

    Raises
    ------
    NotDiscrete
        When `strict` is True and the thresholds are not discrete.
    """
    if strict:
        model.require_discrete()
    max_breaks, subs = _max_breaks(lattice, model)
    c1 = float(len(model.global_thresholds())) if model.is_discrete else np.nan
    return BoundConstants(local_length(lattice), arc_constant(), c1, lattice.n_body, max_breaks, subs)


def break_bound_not_discrete(constants: BoundConstants, c0: float, m: int, lam: float, inf_threshold: float) -> float:
    """
    Break bound for rays with at most `m` kinetic energies below `c0`.

    With `M'` the largest subsystem bound, `A = (2M' + 2)(1 + m pi / l)` and
    `B = (2M' + 2) 2 C0 c0^(-1/4) (lam - inf Lambda)^(1/4) / l`, the number
    of breaks `n` satisfies `n <= A + B sqrt(n)`, hence the returned value
    `((B + sqrt(B^2 + 4A)) / 2)^2`.
    """
    if c0 <= 0:
        raise ValueError('`c0` must be positive, %r found.' % c0)
    if m < 0:
        raise ValueError('`m` must be non-negative, %r found.' % m)
    if lam < inf_threshold:
        raise ValueError('`lam` must not lie below the lowest threshold %r, %r found.' % (inf_threshold, lam))
    sub_max = max(constants.subsystem_max_breaks.values(), default=0.0)
    factor = 2.0 * sub_max + 2.0
    a = factor * (1.0 + m * np.pi / constants.l)
    b = factor * 2.0 * constants.c0 * c0 ** -0.25 * (lam - inf_threshold) ** 0.25 / constants.l
    return float(((b + np.sqrt(b * b + 4.0 * a)) / 2.0) ** 2)


class ImagePoint(NamedTuple):
    cluster: int
    y: np.ndarray
    xi: np.ndarray
    label: str
    source: int


def _channel_with_energy(model: SpectralModel, b: int, energy: float) -> Channel:
    for ch in model.channels_of(b):
        if abs(ch.energy - energy) <= 1e-12 * max(1.0, abs(energy)):
            return ch
    raise ValueError('Cluster %d has no channel of energy %r.' % (b, energy))


def _normal_directions(basis: np.ndarray, n_directions: int, rng: np.random.Generator) -> List[np.ndarray]:
    k = basis.shape[1]
    if k == 1:
        return [basis[:, 0], -basis[:, 0]]
    return [basis @ _unit(rng.normal(size=k)) for _ in range(n_directions)]


def forward_image(lattice: ClusterLattice, model: SpectralModel, lam: float, points: Sequence[CompressedPoint],
                  max_breaks: int = 2, n_directions: int = 4, grid_step: float = 1e-6, eps: float = 1e-6,
                  n_samples: int = 16, max_rays: int = 256, seed: Optional[int] = 0) -> List[ImagePoint]:
    """
    Forward image of a set of compressed points under the broken flow.

    Every point is lifted through the fiber at energy `lam` and the lifted
    lines are continued forward by :func:`branch_rays`. The image holds the
    starting points, samples of the forward legs and the outgoing radial
    limits, snapped to a grid of step `grid_step`.

    Rays start exactly at the points of the set. For a finite set this is
    the search for rays whose backward closure meets an `eps`-ball around
    it, taken in the limit `eps -> 0`, so `eps` only sets the resolution
    the snapping grid is checked against.

    Parameters
    ----------
    lattice : ClusterLattice
        Collision planes.
    model : SpectralModel
        Channel table, its thresholds must be discrete.
    lam : float
        Total energy.
    points : sequence of CompressedPoint
        Starting set, points off the characteristic variety are skipped.
    max_breaks : int, optional
        Break budget, by default 2.
    n_directions : int, optional
        Sampled normal directions on normal spaces of dimension 2 or more.
    grid_step : float, optional
        Snapping step, by default 1e-6.
    eps : float, optional
        Resolution the image is meant for, by default 1e-6. A coarser
        `grid_step` issues a ResolutionWarning.
    n_samples : int, optional
        Samples per leg, by default 16.
    max_rays : int, optional
        Rays per lifted point, by default 256.
    seed : int, optional
        Seed of the sampled directions.

    Returns
    -------
    list of ImagePoint
        Distinct snapped image points labelled 'start', 'flow', 'closure' or 'stationary'.
    """
    model.require_discrete()
    if grid_step <= 0:
        raise ValueError('`grid_step` must be positive, %r found.' % grid_step)
    if grid_step > eps:
        warnings.warn('Grid step %r is coarser than the resolution %r.' % (grid_step, eps), ResolutionWarning)

    rng = np.random.default_rng(seed)
    image = {}

    def emit(cluster, y, xi, label, source):
        y = np.round(np.asarray(y) / grid_step) * grid_step
        xi = np.round(np.asarray(xi) / grid_step) * grid_step
        key = (label, cluster, tuple(y), tuple(xi))
        if key not in image:
            image[key] = ImagePoint(cluster, y, xi, label, source)

    for k, point in enumerate(points):
        emit(point.cluster, point.y, point.xi, 'start', k)
        for choice in fiber_preimage(model, lam, point):
            ch = _channel_with_energy(model, choice.cluster, choice.energy)
            nu2 = choice.nu2_min
            if nu2 == 0.0 or choice.normal_basis.shape[1] == 0:
                normals = [np.zeros_like(point.xi)]
            else:
                normals = [np.sqrt(nu2) * v for v in _normal_directions(choice.normal_basis, n_directions, rng)]
            for nu in normals:
                xi = point.xi + nu
                if _is_radial(point.y, xi):
                    emit(point.cluster, point.y, point.xi, 'stationary', k)
                    continue
                try:
                    rays = branch_rays(lattice, model, lam, point.y, xi, ch, u_min=0.0, max_breaks=max_breaks,
                                       n_directions=n_directions, max_rays=max_rays,
                                       seed=int(rng.integers(2 ** 31)))
                except DegenerateSegment:
                    logger.debug('lift of point %d runs into the origin', k)
                    continue
                for ray in rays:
                    for j, leg in enumerate(ray.legs):
                        seg = leg.segment
                        if seg.stationary:
                            emit(leg.cluster, seg.y0, leg.xi, 'flow', k)
                            continue
                        lo, hi = seg.s_range
                        if j == 0:
                            lo = seg.s0 + _phase(point.y, leg.xi)
                        for s in np.linspace(lo, hi, n_samples):
                            p = flow_point(seg, s, strict=False)
                            emit(p.cluster, p.y, p.xi, 'flow', k)
                    last = ray.legs[-1]
                    emit(last.cluster, _unit(last.xi), last.xi, 'closure', k)

    out = sorted(image.values(), key=lambda q: (q.source, q.label, q.cluster, tuple(q.y), tuple(q.xi)))
    logger.info('forward image of %d points has %d points', len(points), len(out))
    return out


def backward_image(lattice: ClusterLattice, model: SpectralModel, lam: float, points: Sequence[CompressedPoint],
                   **kwargs) -> List[ImagePoint]:
    """
    Backward image, the forward image of the time reversed points with momenta negated back.
    """
    reversed_points = [CompressedPoint(p.cluster, p.y, -p.xi) for p in points]
    return [q._replace(xi=-q.xi + 0.0) for q in forward_image(lattice, model, lam, reversed_points, **kwargs)]


class RelationEntry(NamedTuple):
    """
    Broken ray of a relation with its incoming and outgoing asymptotic data.

    `zeta` is `(y_in, p)`, the incoming direction and the unit direction
    the curve leaves it in. `zeta_out` is `(y_out, q)`, the outgoing
    direction and the unit direction the curve reaches it from.
    """
    alpha: Channel
    zeta: Tuple[np.ndarray, np.ndarray]
    terminal: CompressedPoint
    ray: BrokenRay
    beta: Optional[Channel] = None
    zeta_out: Optional[Tuple[np.ndarray, np.ndarray]] = None


def _check_energy(model: SpectralModel, lam: float, margin: float = ENERGY_TOL) -> None:
    thresholds = model.global_thresholds()
    if thresholds.size and np.min(np.abs(thresholds - lam)) <= margin:
        raise ValueError('`lam` must not be a threshold, %r found.' % lam)


def forward_relation(lattice: ClusterLattice, model: SpectralModel, lam: float, alpha: Channel,
                     n_samples: int = 16, max_breaks: int = 2, n_directions: int = 4, max_rays: int = 64,
                     seed: Optional[int] = 0,
                     zetas: Optional[Sequence[Tuple[np.ndarray, np.ndarray]]] = None) -> List[RelationEntry]:
    """
    Terminal points of the broken rays entering along the channel `alpha`.

    The incoming leg of `zeta = (y_in, p)` is the line `p - u y_in` in the
    plane of `alpha` with momentum `-sqrt(lam - eps) y_in`. Channels on
    planes of dimension 1 have no incoming leg and give an empty relation.

    Raises
    ------
    NotDiscrete
        When the thresholds are not discrete.
    ValueError
        When `lam` is a threshold.
    ChannelClosed
        When `alpha` is closed at `lam`.
    """
    model.require_discrete()
    _check_energy(model, lam)
    a = alpha.cluster
    sigma = lam - alpha.energy
    if sigma <= 0.0:
        raise ChannelClosed('Channel (%d, %d) is closed at energy %r.' % (a, alpha.index, lam))
    if lattice.dim(a) < 2:
        logger.info('channel (%d, %d) lives on a line, its relation is empty', a, alpha.index)
        return []

    rng = np.random.default_rng(seed)
    if zetas is None:
        zetas = [sample_incoming(lattice, a, rng) for _ in range(n_samples)]

    entries = []
    for y_in, p in zetas:
        y_in, p = np.asarray(y_in, dtype=float), np.asarray(p, dtype=float)
        try:
            rays = branch_rays(lattice, model, lam, p, -np.sqrt(sigma) * y_in, alpha, cluster=a,
                               max_breaks=max_breaks, n_directions=n_directions, max_rays=max_rays,
                               seed=int(rng.integers(2 ** 31)))
        except DegenerateSegment:
            continue
        for ray in rays:
            last = ray.legs[-1]
            terminal = CompressedPoint(last.cluster, _unit(last.xi), last.xi)
            entries.append(RelationEntry(alpha, (y_in, p), terminal, ray))
    logger.info('forward relation of channel (%d, %d) has %d entries', a, alpha.index, len(entries))
    return entries


def channel_relation(lattice: ClusterLattice, model: SpectralModel, lam: float, alpha: Channel, beta: Channel,
                     **kwargs) -> List[RelationEntry]:
    """
    Entries of the forward relation of `alpha` leaving along the channel `beta` through a regular direction.
    """
    out = []
    for entry in forward_relation(lattice, model, lam, alpha, **kwargs):
        last = entry.ray.legs[-1]
        if last.cluster != beta.cluster or last.channel != beta:
            continue
        y_out = _unit(last.xi)
        if lattice.stratum_of(y_out, tol=1e-6) != beta.cluster:
            continue
        w = last.start if last.start is not None else entry.ray.base_point
        q = w - (w @ y_out) * y_out
        if np.linalg.norm(q) <= GEOMETRY_TOL:
            continue
        out.append(entry._replace(beta=beta, zeta_out=(y_out, -_unit(q))))
    return out


def reduce_to_subsystem(ray: BrokenRay, lattice: ClusterLattice, model: SpectralModel, a: int) -> BrokenRay:
    """
    Internal motion of a ray whose breaks all lie on planes containing X_a.

    The external momentum `xi_a` is conserved along such a ray; the internal
    parts of the break points and momenta form a broken ray of the
    subsystem of `a` at energy `lam - |xi_a|^2`.

    Raises
    ------
    ValueError
        When a break plane does not contain X_a, or a leg lies in X_a.
    """
    if a == FREE:
        raise ValueError('Cluster 0 has no proper subsystem.')
    for j, b in enumerate(ray.breaks):
        if not lattice.leq(b.cluster, a):
            raise ValueError('Break %d on cluster %d does not contain the plane of cluster %d.' % (j, b.cluster, a))

    sub_lattice, sub_model, id_map = subsystem_model(model, a)
    inverse = {v: k for k, v in id_map.items()}
    for cluster in ray.string.clusters:
        if cluster not in inverse or inverse[cluster] == ORIGIN:
            raise ValueError('Leg cluster %d does not reduce to a moving leg of the subsystem.' % cluster)

    q = lattice.complement(a)
    xi_a = lattice.project_external(a, ray.legs[0].xi)
    string = BreakString(tuple(inverse[c] for c in ray.string.clusters),
                         tuple((inverse[b], k) for b, k in ray.string.channels),
                         tuple(inverse[c] for c in ray.string.breaks))
    points = [q.T @ b.w for b in ray.breaks]
    base = None if ray.base_point is None else q.T @ ray.base_point
    return build_ray(sub_lattice, sub_model, ray.lam - float(xi_a @ xi_a), string, points,
                     q.T @ ray.legs[0].xi, q.T @ ray.legs[-1].xi, base_point=base)
