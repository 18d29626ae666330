import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .cluster_lattice import FREE, ORIGIN, ClusterLattice, subsystem_lattice
from .exceptions import DegenerateBasePoint, NotDiscrete

logger = logging.getLogger(__name__)

ENERGY_TOL = 1e-9

Interval = Union[float, Tuple[float, float]]


@dataclass(frozen=True)
class Channel:
    """
    Bound state `index` of the subsystem Hamiltonian of `cluster`, with eigenvalue `energy`.
    """
    cluster: int
    index: int
    energy: float

    def __post_init__(self):
        if self.energy > 0:
            raise ValueError('Channel `energy` must be non-positive, %r found.' % self.energy)


class SpectralModel:
    """
    Channel table of a many-body system together with its threshold sets.

    Parameters
    ----------
    lattice : ClusterLattice
        Collision planes of the system.
    channels : sequence of Channel or tuple
        Bound states `(cluster, index, energy)`. The free cluster carries the
        single channel of energy 0, it is added when missing.
    threshold_intervals : sequence of tuple, optional
        Closed intervals contained in the global threshold set, used to
        describe systems whose thresholds are not discrete.

    Attributes
    ----------
    channels : list of Channel
        Channels sorted by cluster and index.
    """

    def __init__(self, lattice: ClusterLattice, channels: Sequence[Union[Channel, Tuple]],
                 threshold_intervals: Optional[Sequence[Tuple[float, float]]] = None):
        self.lattice = lattice
        parsed = []
        for ch in channels:
            if not isinstance(ch, Channel):
                if len(ch) != 3:
                    raise TypeError('`channels` entries must be Channel or (cluster, index, energy), %r found.' % (ch,))
                ch = Channel(int(ch[0]), int(ch[1]), float(ch[2]))
            lattice.subspace(ch.cluster)
            parsed.append(ch)

        free = [ch for ch in parsed if ch.cluster == FREE]
        if not free:
            warnings.warn('Free channel not provided, using default `(0, 0, 0.0)`.', Warning)
            parsed.append(Channel(FREE, 0, 0.0))
        elif len(free) > 1 or free[0].energy != 0.0:
            raise ValueError('The free cluster must have exactly one channel with energy 0, %r found.' % free)

        keys = [(ch.cluster, ch.index) for ch in parsed]
        if len(set(keys)) != len(keys):
            raise ValueError('`channels` must have unique (cluster, index) pairs.')

        self.channels = sorted(parsed, key=lambda ch: (ch.cluster, ch.index))
        intervals = [] if threshold_intervals is None else threshold_intervals
        self.threshold_intervals = [(float(lo), float(hi)) for lo, hi in intervals]
        for lo, hi in self.threshold_intervals:
            if lo > hi or hi > 0:
                raise ValueError('`threshold_intervals` must be non-positive closed intervals, (%r, %r) found.'
                                 % (lo, hi))

    def channel(self, cluster: int, index: int) -> Channel:
        for ch in self.channels:
            if ch.cluster == cluster and ch.index == index:
                return ch
        raise ValueError('Channel (%r, %r) not found.' % (cluster, index))

    def channels_of(self, a: int) -> List[Channel]:
        return [ch for ch in self.channels if ch.cluster == a]

    def pspec(self, a: int) -> np.ndarray:
        """
        Point spectrum of the subsystem Hamiltonian of `a`.
        """
        self.lattice.subspace(a)
        return np.unique([ch.energy for ch in self.channels_of(a)])

    def _union(self, clusters: Sequence[int]) -> np.ndarray:
        values = [ch.energy for ch in self.channels if ch.cluster in clusters]
        return np.unique(values) if values else np.zeros(0)

    def thresholds(self, a: int) -> np.ndarray:
        """
        Threshold set of the subsystem of `a`, the eigenvalues of the strictly smaller subsystems.
        """
        return self._union([b for b in self.lattice.clusters_containing(a) if b != a])

    def thresholds_closed(self, a: int) -> np.ndarray:
        """
        Thresholds of `a` together with its own eigenvalues.
        """
        return self._union(self.lattice.clusters_containing(a))

    def global_thresholds(self) -> np.ndarray:
        return self.thresholds(ORIGIN)

    @property
    def is_discrete(self) -> bool:
        return not self.threshold_intervals

    def require_discrete(self) -> None:
        if not self.is_discrete:
            raise NotDiscrete('Threshold set contains the intervals %r, it must be discrete.'
                              % self.threshold_intervals)

    def kinetic_energies(self, lam: float) -> np.ndarray:
        """
        Kinetic energies `lam - eps` available at total energy `lam`, in increasing order.
        """
        energies = self.thresholds_closed(ORIGIN)
        return np.sort(lam - energies[energies < lam])


@dataclass(eq=False)
class CompressedPoint:
    """
    Compressed covector over the sphere C'_a: direction `y` in X_a and external momentum `xi` in X_a.
    """
    cluster: int
    y: np.ndarray
    xi: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.xi = np.asarray(self.xi, dtype=float)

    @property
    def tau(self) -> float:
        return float(-self.y @ self.xi)

    @property
    def mu(self) -> np.ndarray:
        return self.xi + self.tau * self.y

    @property
    def energy(self) -> float:
        return float(self.xi @ self.xi)


@dataclass(eq=False)
class FiberPoint:
    """
    Lift of `base` to the cluster `lift_cluster` by the normal momentum `nu` in X^a cap X_b.
    """
    base: CompressedPoint
    lift_cluster: int
    nu: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.nu = np.asarray(self.nu, dtype=float)
        if self.nu.size == 0:
            self.nu = np.zeros_like(self.base.xi)

    @property
    def xi_tilde(self) -> np.ndarray:
        return self.base.xi + self.nu

    @property
    def mu_b(self) -> np.ndarray:
        return self.base.mu + self.nu

    @property
    def nu2(self) -> float:
        return float(self.nu @ self.nu)


def sc_coordinates(w: np.ndarray, xi: np.ndarray) -> Tuple[float, np.ndarray, float, np.ndarray]:
    """
    Scattering coordinates of the covector `xi` at the base point `w`.

    Parameters
    ----------
    w : array_like
        Non-zero base point.
    xi : array_like
        Covector, identified with a vector through the Euclidean metric.

    Returns
    -------
    float, array_like, float, array_like
        Boundary defining function `x = 1/|w|`, direction `y = w/|w|`, radial
        momentum `tau = -y.xi` and tangential momentum `mu = xi - (y.xi) y`.

    Examples
    --------

    >>> from brokenray.phase_space import sc_coordinates
    >>>
    >>> sc_coordinates([0, 2], [0, -3])
    (0.5, array([0., 1.]), 3.0, array([0., 0.]))
    """
    w = np.asarray(w, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if w.shape != xi.shape:
        raise ValueError('`w` and `xi` must have the same shape, %r and %r found.' % (w.shape, xi.shape))

    norm = float(np.linalg.norm(w))
    if norm == 0.0:
        raise DegenerateBasePoint('`w` must be a non-zero vector.')

    y = w / norm
    tau = float(-y @ xi)
    return 1.0 / norm, y, tau, xi + tau * y


def compress(lattice: ClusterLattice, w: np.ndarray, xi: np.ndarray, cluster: Optional[int] = None) -> CompressedPoint:
    """
    Compressed point of `(w, xi)`: keeps the external momentum of the stratum of `w / |w|`.
    """
    _, y, _, _ = sc_coordinates(w, xi)
    if cluster is None:
        cluster = lattice.stratum_of(y)
    return CompressedPoint(cluster, y, lattice.project_external(cluster, xi))


class CharVarietyResult(NamedTuple):
    inside: bool
    witnesses: List[Tuple[int, float]]


def char_variety_test(model: SpectralModel, lam: float, point: CompressedPoint,
                      tol_e: float = ENERGY_TOL) -> CharVarietyResult:
    """
    Tests whether `point` lies on the compressed characteristic variety at energy `lam`.

    Parameters
    ----------
    model : SpectralModel
        Channel table.
    lam : float
        Total energy.
    point : CompressedPoint
        Point over C'_a.
    tol_e : float, optional
        Energy tolerance, by default 1e-9.

    Returns
    -------
    CharVarietyResult
        Membership flag and the witnesses `(b, eps)`, with `b` ranging over
        clusters whose sphere contains C_a. For `b = a` the external kinetic
        energy must equal `lam - eps`, for larger spheres it must not exceed it.
    """
    if tol_e < 0:
        raise ValueError('`tol_e` must be non-negative, %r found.' % tol_e)

    a = point.cluster
    kinetic = lam - point.energy
    witnesses = []
    for b in model.lattice.clusters_containing(a):
        for eps in model.pspec(b):
            if b == a:
                ok = abs(kinetic - eps) <= tol_e
            else:
                ok = kinetic >= eps - tol_e
            if ok:
                witnesses.append((b, float(eps)))
    return CharVarietyResult(bool(witnesses), witnesses)


@dataclass
class FiberChoice:
    """
    Admissible normal momenta over a compressed point for the cluster `cluster` and eigenvalue `energy`.

    Attributes
    ----------
    nu2_min, nu2_max : float
        Bounds of the squared normal momentum.
    normal_basis : array_like
        Orthonormal basis of X^a cap X_b, the space of normal momenta.
    """
    cluster: int
    energy: float
    nu2_min: float
    nu2_max: float
    normal_basis: np.ndarray

    def lift(self, base: CompressedPoint, direction: Optional[np.ndarray] = None,
             nu2: Optional[float] = None) -> FiberPoint:
        """
        Fiber point over `base` whose normal momentum points along `direction`.
        """
        if nu2 is None:
            nu2 = self.nu2_min
        if not self.nu2_min - ENERGY_TOL <= nu2 <= self.nu2_max + ENERGY_TOL:
            raise ValueError('`nu2` must lie in [%r, %r], %r found.' % (self.nu2_min, self.nu2_max, nu2))

        nu2 = max(nu2, 0.0)
        if nu2 == 0.0:
            return FiberPoint(base, self.cluster, np.zeros_like(base.xi))

        if direction is None:
            raise ValueError('`direction` must be provided for a non-zero normal momentum.')
        proj = self.normal_basis @ (self.normal_basis.T @ np.asarray(direction, dtype=float))
        norm = float(np.linalg.norm(proj))
        if norm == 0.0:
            raise ValueError('`direction` must have a non-zero normal component.')
        return FiberPoint(base, self.cluster, np.sqrt(nu2) * proj / norm)


def _interval(interval: Interval) -> Tuple[float, float]:
    if np.isscalar(interval):
        return float(interval), float(interval)
    lo, hi = interval
    if lo > hi:
        raise ValueError('`interval` must be ordered, (%r, %r) found.' % (lo, hi))
    return float(lo), float(hi)


def fiber_preimage(model: SpectralModel, interval: Interval, point: CompressedPoint,
                   tol_e: float = ENERGY_TOL) -> List[FiberChoice]:
    """
    Admissible lifts of `point` whose total energy lies in `interval`.

    For every cluster `b` whose sphere contains C_a and every eigenvalue `eps`
    of its subsystem, the squared normal momentum ranges over
    `[max(0, inf I - eps - |xi|^2), sup I - eps - |xi|^2]`. Lifts to `a`
    itself have no normal momentum.

    Parameters
    ----------
    model : SpectralModel
        Channel table.
    interval : float or tuple
        Energy `lam` or closed interval `(lo, hi)`.
    point : CompressedPoint
        Point over C'_a.
    tol_e : float, optional
        Energy tolerance, by default 1e-9.

    Returns
    -------
    list of FiberChoice
        One entry per admissible `(b, eps)`, empty when the point is not
        on the characteristic variety.
    """
    lo, hi = _interval(interval)
    lattice = model.lattice
    a = point.cluster
    xi2 = point.energy

    choices = []
    for b in lattice.clusters_containing(a):
        normal = lattice.split_coordinates(a, b).relative
        for eps in model.pspec(b):
            top = hi - eps - xi2
            bottom = lo - eps - xi2
            if top < -tol_e:
                continue
            # energies within tolerance of the boundary count as tangential
            top = top if top > tol_e else 0.0
            bottom = bottom if bottom > tol_e else 0.0
            if b == a:
                if bottom > tol_e:
                    continue
                choices.append(FiberChoice(b, float(eps), 0.0, 0.0, normal))
            else:
                choices.append(FiberChoice(b, float(eps), bottom, max(top, bottom), normal))

    logger.debug('fiber over cluster %d has %d admissible choices', a, len(choices))
    return choices


def sample_fiber_points(model: SpectralModel, interval: Interval, point: CompressedPoint, n_samples: int = 8,
                        seed: Optional[int] = None) -> List[FiberPoint]:
    """
    Samples fiber points of every admissible choice, including the extreme normal magnitudes.
    """
    rng = np.random.default_rng(seed)
    samples = []
    for choice in fiber_preimage(model, interval, point):
        k = choice.normal_basis.shape[1]
        if k == 0 or choice.nu2_max == 0.0:
            samples.append(choice.lift(point))
            continue
        magnitudes = [choice.nu2_min, choice.nu2_max]
        magnitudes += list(rng.uniform(choice.nu2_min, choice.nu2_max, size=max(n_samples - 2, 0)))
        for nu2 in magnitudes:
            direction = choice.normal_basis @ rng.normal(size=k)
            samples.append(choice.lift(point, direction, nu2))
    return samples


def radial_set_test(model: SpectralModel, lam: float, point: CompressedPoint, sign: Union[int, str],
                    tol: float = ENERGY_TOL) -> bool:
    """
    Tests membership of `point` in the incoming (`sign=+1`) or outgoing (`sign=-1`) radial set.

    Examples
    --------

    >>> import numpy as np
    >>> from brokenray.cluster_lattice import build_lattice
    >>> from brokenray.phase_space import CompressedPoint, SpectralModel, radial_set_test
    >>>
    >>> model = SpectralModel(build_lattice([], 2), [(0, 0, 0.0)])
    >>> radial_set_test(model, 1.0, CompressedPoint(0, [1, 0], [-1, 0]), +1)
    True
    """
    if sign in ('+', '-'):
        sign = 1 if sign == '+' else -1
    if sign not in (1, -1):
        raise ValueError('`sign` must be +1 or -1, %r found.' % (sign,))

    tau = point.tau
    if np.linalg.norm(point.mu) > tol or sign * tau < -tol:
        return False

    kinetic = lam - tau * tau
    return any(abs(kinetic - eps) <= tol
               for b in model.lattice.clusters_containing(point.cluster)
               for eps in model.pspec(b))


def _gap(values: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    # d(sigma) = sigma - (largest threshold <= sigma), 0 below all thresholds
    sigma = np.asarray(sigma, dtype=float)
    if values.size == 0:
        return np.zeros_like(sigma)
    pos = np.searchsorted(values, sigma, side='right') - 1
    below = values[np.clip(pos, 0, None)]
    return np.where(pos >= 0, sigma - below, 0.0)


def gap_d(model: SpectralModel, a: int, sigma: float, method: str = 'analytic') -> float:
    """
    Mourre gap function of the subsystem of `a`.

    The gap is the distance from `sigma` down to the closest threshold of
    `a` (its own eigenvalues included) that does not exceed `sigma`, and 0
    below all of them. It is not the convention in which eigenvalues of
    the subsystem itself are excluded.

    Parameters
    ----------
    model : SpectralModel
        Channel table.
    a : int
        Cluster.
    sigma : float
        Energy of the subsystem.
    method : str, optional
        'analytic' uses the sorted thresholds, 'grid' compares against every
        threshold by brute force, by default 'analytic'.

    Returns
    -------
    float
        Non-negative gap.
    """
    values = model.thresholds_closed(a)
    if method == 'analytic':
        return float(_gap(values, sigma))
    elif method == 'grid':
        below = [sigma - v for v in values if v <= sigma]
        return float(min(below)) if below else 0.0
    else:
        raise ValueError('`method` must be `analytic` or `grid`, %r found.' % method)


def gap_d_kappa(model: SpectralModel, a: int, sigma: float, kappa: float, method: str = 'analytic',
                step: float = 1e-6) -> float:
    """
    Infimum of the gap function of `a` over the window `[sigma - kappa, sigma + kappa]`.

    Parameters
    ----------
    model : SpectralModel
        Channel table.
    a : int
        Cluster.
    sigma : float
        Window centre.
    kappa : float
        Window half width, non-negative.
    method : str, optional
        'analytic' evaluates the piecewise linear gap, 'grid' takes the
        minimum over a dense grid of spacing `step` together with the window
        end points and the thresholds inside it, by default 'analytic'.
    step : float, optional
        Grid spacing of the 'grid' method, by default 1e-6.

    Returns
    -------
    float
        Non-negative infimum, 0 when a threshold lies in the window.
    """
    if kappa < 0:
        raise ValueError('`kappa` must be non-negative, %r found.' % kappa)
    values = model.thresholds_closed(a)
    lo, hi = sigma - kappa, sigma + kappa

    if method == 'analytic':
        if values.size == 0 or hi < values[0] or np.any((values >= lo) & (values <= hi)):
            return 0.0
        # no threshold inside the window, the gap increases linearly on it
        return float(_gap(values, lo))
    elif method == 'grid':
        if step <= 0:
            raise ValueError('`step` must be positive, %r found.' % step)
        n = int(np.ceil((hi - lo) / step)) + 1
        grid = np.concatenate((np.linspace(lo, hi, n), values[(values >= lo) & (values <= hi)]))
        return float(_gap(values, grid).min())
    else:
        raise ValueError('`method` must be `analytic` or `grid`, %r found.' % method)


def eta(lattice: ClusterLattice, a: int, y: np.ndarray, xi: np.ndarray) -> float:
    """
    Test function `eta_a = (xi^a . y^a) / |y_a|` of the cluster `a`.

    Parameters
    ----------
    lattice : ClusterLattice
        Collision planes.
    a : int
        Cluster, the external part of `y` must not vanish.
    y : array_like
        Position, a configuration point or a direction.
    xi : array_like
        Momentum.

    Returns
    -------
    float
        Normal momentum of `xi` along the internal part of `y`, scaled by the external part.
    """
    y = np.asarray(y, dtype=float)
    external = float(np.linalg.norm(lattice.project_external(a, y)))
    if external == 0.0:
        raise DegenerateBasePoint('`y` must have a non-zero component in X_a.')
    return float(lattice.project_internal(a, xi) @ lattice.project_internal(a, y)) / external


def subsystem_model(model: SpectralModel, a: int) -> Tuple[ClusterLattice, SpectralModel, Dict[int, int]]:
    """
    Lattice and channel table of the subsystem of `a`, with the id map to the clusters of `model`.
    """
    sub_lattice, id_map = subsystem_lattice(model.lattice, a)
    channels = []
    for k, b in id_map.items():
        for ch in model.channels_of(b):
            channels.append(Channel(k, ch.index, ch.energy))
    return sub_lattice, SpectralModel(sub_lattice, channels), id_map
