import logging
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .broken_rays import BrokenRay, replay_chooser, shoot_ray
from .cluster_lattice import FREE, ClusterLattice
from .exceptions import ChannelClosed, DegenerateSegment, RankDeficient, TransversalityFailure
from .phase_space import Channel, SpectralModel

logger = logging.getLogger(__name__)

DEFINITE_TOL = 1e-10
SYMMETRY_TOL = 1e-12


def _scale(m: np.ndarray) -> float:
    if m.size == 0:
        return 1.0
    return max(float(np.abs(m).max()), np.finfo(float).tiny)


def _eigmin(m: np.ndarray) -> float:
    if m.size == 0:
        return np.inf
    return float(np.linalg.eigvalsh(m)[0])


@dataclass(eq=False)
class GraphLagrangian:
    """
    Lagrangian subspace given as the graph `xi = A w` of a fiber map over the plane of `cluster`.

    `A` acts on the coordinates of X_cluster in the orthonormal `basis`.

    Attributes
    ----------
    cluster : int
        Base plane.
    base_point : array_like
        Point of X_cluster where the graph is evaluated.
    A : array_like
        Symmetric matrix of shape (k, k), k the dimension of the plane.
    basis : array_like
        Orthonormal basis of X_cluster, shape (n, k).
    """
    cluster: int
    base_point: np.ndarray
    A: np.ndarray
    basis: np.ndarray

    def __post_init__(self):
        self.base_point = np.asarray(self.base_point, dtype=float)
        self.A = np.asarray(self.A, dtype=float)
        self.basis = np.asarray(self.basis, dtype=float)
        k = self.basis.shape[1]
        if self.A.shape != (k, k):
            raise ValueError('`A` must have shape (%d, %d), %r found.' % (k, k, self.A.shape))
        asymmetry = float(np.abs(self.A - self.A.T).max()) if k else 0.0
        if asymmetry > SYMMETRY_TOL * max(1.0, _scale(self.A)):
            raise ValueError('`A` must be symmetric, max asymmetry %r found.' % asymmetry)

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    @property
    def eigmin(self) -> float:
        return _eigmin(self.A)

    def is_psd(self, tol: float = DEFINITE_TOL) -> bool:
        return self.eigmin >= -tol * _scale(self.A)

    def is_pd(self, tol: float = DEFINITE_TOL) -> bool:
        return self.eigmin >= tol * _scale(self.A)

    def ambient(self) -> np.ndarray:
        """
        `A` as a map of the ambient space, zero on the orthocomplement of the plane.
        """
        return self.basis @ self.A @ self.basis.T


@dataclass(eq=False)
class ElementaryRelation:
    """
    Relation of a straight leg in X_a from `w_prime` in X_d to `w` in X_c.

    The leg momentum is `xi_tilde = sqrt(lam - eps) (w - w') / |w - w'|`, and
    the related external momenta are `xi = pi_c xi_tilde` and
    `xi' = pi_d xi_tilde`. The blocks are derivatives in plane coordinates:
    `B = d xi / dw`, `B_prime = d xi' / dw'` and `C = d xi' / dw`.
    """
    c: int
    d: int
    a: int
    channel: Channel
    lam: float
    w: np.ndarray
    w_prime: np.ndarray
    basis_c: np.ndarray
    basis_d: np.ndarray
    B: np.ndarray
    B_prime: np.ndarray
    C: np.ndarray

    @property
    def sigma(self) -> float:
        return self.lam - self.channel.energy

    @property
    def scale(self) -> float:
        """Momentum per length scale `sqrt(lam - eps) / |w - w'|` of the blocks."""
        return float(np.sqrt(self.sigma) / np.linalg.norm(self.w - self.w_prime))

    @property
    def C_prime(self) -> np.ndarray:
        """`d xi / dw'`, which is `-C^T`."""
        return -self.C.T

    @property
    def xi_tilde(self) -> np.ndarray:
        u = self.w - self.w_prime
        return np.sqrt(self.sigma) * u / np.linalg.norm(u)

    @property
    def xi(self) -> np.ndarray:
        return self.basis_c @ (self.basis_c.T @ self.xi_tilde)

    @property
    def xi_prime(self) -> np.ndarray:
        return self.basis_d @ (self.basis_d.T @ self.xi_tilde)


def elementary_relation(lattice: ClusterLattice, c: int, channel: Channel, a: int, d: int, w: np.ndarray,
                        w_prime: np.ndarray, lam: float) -> ElementaryRelation:
    """
    Block matrices of the elementary relation of a leg in X_a from `w_prime` to `w`.

    With `u = w - w'` and `k = sqrt(lam - eps) / |u|^3`:

    * `B = k Q_c^T (|u|^2 Id - u u^T) Q_c`,
    * `B' = -k Q_d^T (|u|^2 Id - u u^T) Q_d`,
    * `C = k Q_d^T (|u|^2 Id - u u^T) Q_c`,

    where `Q_c` and `Q_d` are the orthonormal bases of the planes.

    Parameters
    ----------
    lattice : ClusterLattice
        Collision planes.
    c : int
        Cluster of the end point `w`.
    channel : Channel
        Channel of the leg.
    a : int
        Propagation cluster, X_c and X_d must be subspaces of X_a.
    d : int
        Cluster of the start point `w_prime`.
    w, w_prime : array_like
        End and start points.
    lam : float
        Total energy.

    Returns
    -------
    ElementaryRelation
        Relation with its blocks.

    Raises
    ------
    DegenerateSegment
        When `w` and `w_prime` coincide.
    ChannelClosed
        When `lam <= eps`.
    """
    w = lattice._vector(w)
    w_prime = lattice._vector(w_prime)
    if not (lattice.leq(a, c) and lattice.leq(a, d)):
        raise ValueError('`X_c` and `X_d` must be subspaces of `X_a`, clusters %d, %d and %d found.' % (c, d, a))
    if not lattice.leq(channel.cluster, a):
        raise ValueError('Channel cluster %d does not contain the plane of cluster %d.' % (channel.cluster, a))
    if not lattice.subspace(c).contains(w):
        raise ValueError('`w` must lie in the plane of cluster %d.' % c)
    if not lattice.subspace(d).contains(w_prime):
        raise ValueError('`w_prime` must lie in the plane of cluster %d.' % d)

    sigma = lam - channel.energy
    if sigma <= 0.0:
        raise ChannelClosed('Channel (%d, %d) is closed at energy %r.' % (channel.cluster, channel.index, lam))
    u = w - w_prime
    norm = float(np.linalg.norm(u))
    if norm <= np.finfo(float).eps * max(1.0, float(np.linalg.norm(w))):
        raise DegenerateSegment('`w` and `w_prime` must be distinct points.')

    k = np.sqrt(sigma) / norm ** 3
    m = norm ** 2 * np.eye(lattice.ambient_dim) - np.outer(u, u)
    qc, qd = lattice.basis(c), lattice.basis(d)
    return ElementaryRelation(c, d, a, channel, float(lam), w, w_prime, qc, qd,
                              B=k * (qc.T @ m @ qc), B_prime=-k * (qd.T @ m @ qd), C=k * (qd.T @ m @ qc))


class RelationBlocks(NamedTuple):
    B: np.ndarray
    B_prime: np.ndarray
    C: np.ndarray
    C_prime: np.ndarray


def _end_momenta(rel: ElementaryRelation, w: np.ndarray, w_prime: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    u = w - w_prime
    xi_tilde = np.sqrt(rel.sigma) * u / np.linalg.norm(u)
    return rel.basis_c.T @ xi_tilde, rel.basis_d.T @ xi_tilde


def finite_difference_blocks(rel: ElementaryRelation, step: Optional[float] = None) -> RelationBlocks:
    """
    Centred finite differences of the end point momenta `(xi, xi')` with respect to `(w, w')`.

    The default step is `1e-6 |w - w'|`.
    """
    h = 1e-6 * float(np.linalg.norm(rel.w - rel.w_prime)) if step is None else step
    kc, kd = rel.basis_c.shape[1], rel.basis_d.shape[1]
    B, C = np.zeros((kc, kc)), np.zeros((kd, kc))
    B_prime, C_prime = np.zeros((kd, kd)), np.zeros((kc, kd))

    for i in range(kc):
        e = h * rel.basis_c[:, i]
        xi_p, xi_prime_p = _end_momenta(rel, rel.w + e, rel.w_prime)
        xi_m, xi_prime_m = _end_momenta(rel, rel.w - e, rel.w_prime)
        B[:, i] = (xi_p - xi_m) / (2 * h)
        C[:, i] = (xi_prime_p - xi_prime_m) / (2 * h)

    for i in range(kd):
        e = h * rel.basis_d[:, i]
        xi_p, xi_prime_p = _end_momenta(rel, rel.w, rel.w_prime + e)
        xi_m, xi_prime_m = _end_momenta(rel, rel.w, rel.w_prime - e)
        C_prime[:, i] = (xi_p - xi_m) / (2 * h)
        B_prime[:, i] = (xi_prime_p - xi_prime_m) / (2 * h)

    return RelationBlocks(B, B_prime, C, C_prime)


def radial_lagrangian(w: np.ndarray, lam: float, sigma: float, lattice: Optional[ClusterLattice] = None,
                      cluster: int = FREE) -> GraphLagrangian:
    """
    Lagrangian of the outgoing radial set through `w`, `A = sqrt(lam - sigma) / |w|^3 (|w|^2 Id - w w^T)`.

    `A` has the null space spanned by `w`. Without a lattice the base plane is the whole space.

    Raises
    ------
    ChannelClosed
        When `lam <= sigma`.
    """
    w = np.asarray(w, dtype=float)
    norm = float(np.linalg.norm(w))
    if norm == 0.0:
        raise ValueError('`w` must be a non-zero vector.')
    if lam <= sigma:
        raise ChannelClosed('Energy %r is not above the threshold %r.' % (lam, sigma))

    if lattice is None:
        basis = np.eye(w.shape[0])
    else:
        basis = lattice.basis(cluster)
        if not lattice.subspace(cluster).contains(w):
            raise ValueError('`w` must lie in the plane of cluster %d.' % cluster)
    m = norm ** 2 * np.eye(w.shape[0]) - np.outer(w, w)
    a = np.sqrt(lam - sigma) / norm ** 3 * (basis.T @ m @ basis)
    return GraphLagrangian(cluster, w, (a + a.T) / 2, basis)


def compose(lagrangian: GraphLagrangian, rel: ElementaryRelation, position: Optional[int] = None,
            tol: float = DEFINITE_TOL) -> GraphLagrangian:
    """
    Image of the graph Lagrangian `A'` on X_d under the relation, `A = B - C^T (A' - B')^{-1} C`.

    The composition is transversal when `A' - B'` is positive definite.

    Parameters
    ----------
    lagrangian : GraphLagrangian
        Positive semidefinite Lagrangian over X_d at `rel.w_prime`.
    rel : ElementaryRelation
        Relation from X_d to X_c.
    position : int, optional
        Position in a chain, reported by errors.
    tol : float, optional
        Relative floor for the eigenvalue checks.

    Returns
    -------
    GraphLagrangian
        Lagrangian over X_c at `rel.w`.

    Raises
    ------
    TransversalityFailure
        When the smallest eigenvalue of `A' - B'` is below `tol` times the scale of `A'` and the relation.
    """
    if lagrangian.cluster != rel.d:
        raise ValueError('`lagrangian` must live over cluster %d, %d found.' % (rel.d, lagrangian.cluster))
    scale_w = max(1.0, float(np.linalg.norm(rel.w_prime)))
    if np.linalg.norm(lagrangian.base_point - rel.w_prime) > 1e-9 * scale_w:
        raise ValueError('`lagrangian` base point must be the start point of the relation.')
    if not lagrangian.is_psd(tol):
        raise ValueError('`lagrangian` must be positive semidefinite, smallest eigenvalue %r found.'
                         % lagrangian.eigmin)

    gap = lagrangian.A - rel.B_prime
    margin = _eigmin(gap)
    threshold = tol * max(_scale(lagrangian.A), rel.scale)
    logger.debug('transversality margin %r against %r at position %r', margin, threshold, position)
    if margin < threshold:
        raise TransversalityFailure('Composition is not transversal, `A\' - B\'` has eigenvalue %r.' % margin,
                                    margin, position)

    a = rel.B - rel.C.T @ np.linalg.solve(gap, rel.C)
    return GraphLagrangian(rel.c, rel.w, (a + a.T) / 2, rel.basis_c)


class ChainStep(NamedTuple):
    """
    Certificate of one composition in a chain.

    `margin` is the smallest eigenvalue of `A' - B'`, `pd_expected` tells
    whether the break plane differs from the propagation plane.
    """
    position: int
    cluster: int
    margin: float
    eigmin: float
    psd: bool
    pd: bool
    pd_expected: bool
    residual: float


class ChainResult(NamedTuple):
    lagrangian: GraphLagrangian
    steps: List[ChainStep]
    relations: List[ElementaryRelation]

    @property
    def passed(self) -> bool:
        return all(s.psd and (s.pd or not s.pd_expected) and s.residual < DEFINITE_TOL for s in self.steps)


Seed = Union[None, str, GraphLagrangian]


def _chain_relations(lattice: ClusterLattice, model: SpectralModel, lam: float, string, points: Sequence[np.ndarray]
                     ) -> List[ElementaryRelation]:
    m = string.n_breaks
    if len(points) != m + 2:
        raise ValueError('Chain with %d breaks needs %d points, %d found.' % (m, m + 2, len(points)))
    planes = (string.clusters[0],) + string.breaks + (string.clusters[-1],)
    relations = []
    for j in range(1, m + 2):
        channel = model.channel(*string.channels[j - 1])
        relations.append(elementary_relation(lattice, planes[j], channel, string.clusters[j - 1], planes[j - 1],
                                             points[j], points[j - 1], lam))
    return relations


def _step(position: int, lag: GraphLagrangian, margin: float, pd_expected: bool, tol: float) -> ChainStep:
    certificate = lagrangian_certificate(graph_tangent_space(lag))
    return ChainStep(position, lag.cluster, margin, lag.eigmin, lag.is_psd(tol), lag.is_pd(tol), pd_expected,
                     certificate.residual)


def compose_chain(lattice: ClusterLattice, model: SpectralModel, lam: float, string, points: Sequence[np.ndarray],
                  seed: Seed = None, tol: float = DEFINITE_TOL) -> ChainResult:
    """
    Folds :func:`compose` over the elementary relations of a break string.

    The points are `w_0, w_1, ..., w_{m+1}`: a source point on the first
    leg, the break points, and a point on the last leg. Relation `j` maps
    `w_{j-1}` to `w_j` along leg `j`. The seed is the Lagrangian at `w_1`:

    * None or `'point_source'`: rays from `w_0`, which is `A = B` of the first relation;
    * `'plane_wave'`: `A = 0`, parallel rays;
    * `'identity'`: `A = Id`;
    * a :class:`GraphLagrangian` over the plane of `w_1` at `w_1`.

    An unbroken chain returns the seed.

    Parameters
    ----------
    lattice : ClusterLattice
        Collision planes.
    model : SpectralModel
        Channel table.
    lam : float
        Total energy.
    string : BreakString
        Break pattern of the chain.
    points : sequence of array_like
        The `m + 2` chain points.
    seed : str or GraphLagrangian, optional
        Initial Lagrangian, point source by default.
    tol : float, optional
        Relative floor of the eigenvalue checks.

    Returns
    -------
    ChainResult
        Final Lagrangian on the last leg, with one certificate per composition.

    Raises
    ------
    TransversalityFailure
        With the position of the failing relation.
    """
    problems = string.check(lattice, model, lam)
    if problems:
        raise ValueError('Break string is not admissible: %s.' % '; '.join(problems))
    points = [lattice._vector(w) for w in points]
    relations = _chain_relations(lattice, model, lam, string, points)
    first = relations[0]

    if seed is None or seed == 'point_source':
        lag = GraphLagrangian(first.c, first.w, first.B, first.basis_c)
    elif seed == 'plane_wave':
        lag = GraphLagrangian(first.c, first.w, np.zeros_like(first.B), first.basis_c)
    elif seed == 'identity':
        lag = GraphLagrangian(first.c, first.w, np.eye(first.B.shape[0]), first.basis_c)
    elif isinstance(seed, GraphLagrangian):
        if seed.cluster != first.c:
            raise ValueError('`seed` must live over cluster %d, %d found.' % (first.c, seed.cluster))
        lag = seed
    else:
        raise ValueError('`seed` must be None, \'point_source\', \'plane_wave\', \'identity\' or a '
                         'GraphLagrangian, %r found.' % (seed,))

    # only the point source seed is known to be definite off its own plane
    point_source = seed is None or seed == 'point_source'
    steps = [_step(1, lag, np.inf, point_source and first.c != first.a, tol)]
    for j, rel in enumerate(relations[1:], start=2):
        margin = _eigmin(lag.A - rel.B_prime)
        lag = compose(lag, rel, position=j, tol=tol)
        steps.append(_step(j, lag, margin, rel.c != rel.a, tol))
    logger.debug('composed a chain of %d relations, final smallest eigenvalue %r', len(relations), lag.eigmin)
    return ChainResult(lag, steps, relations)


def ray_chain_points(ray: BrokenRay, source_u: Optional[float] = None, final_u: float = 1.0) -> List[np.ndarray]:
    """
    Chain points of a ray: a source point, the break points, and a point on the last leg.

    The source point is the point at distance `source_u` before the first
    break, or the base point of the ray when `source_u` is None or the ray
    is unbroken. The last point is at distance `final_u` after the last
    break, or after the source for unbroken rays.
    """
    if final_u <= 0.0:
        raise ValueError('`final_u` must be positive, %r found.' % final_u)
    first = ray.legs[0].xi / np.linalg.norm(ray.legs[0].xi)
    if ray.n_breaks and (source_u is not None or ray.base_point is None):
        source = ray.points[0] - (1.0 if source_u is None else source_u) * first
    elif ray.base_point is not None:
        source = ray.base_point
        if ray.n_breaks and (ray.points[0] - source) @ first <= 0.0:
            raise ValueError('Base point of the ray must come before its first break.')
    else:
        raise ValueError('`ray` without breaks needs a base point.')

    last = ray.legs[-1].xi / np.linalg.norm(ray.legs[-1].xi)
    end = ray.points[-1] if ray.n_breaks else source
    return [source] + list(ray.points) + [end + final_u * last]


def ray_lagrangian(ray: BrokenRay, lattice: ClusterLattice, model: SpectralModel, seed: Seed = None,
                   source_u: Optional[float] = None, final_u: float = 1.0) -> ChainResult:
    """
    Composed Lagrangian along `ray`, see :func:`compose_chain` and :func:`ray_chain_points`.
    """
    points = ray_chain_points(ray, source_u, final_u)
    return compose_chain(lattice, model, ray.lam, ray.string, points, seed)


def relation_tangent_space(rel: ElementaryRelation) -> np.ndarray:
    """
    Spanning set of the tangent space of the relation in `(dw, dxi, dw', dxi')` coordinates.

    Columns are `(v, B v, 0, C v)` for `v` in X_c and `(0, C' v', v', B' v')` for `v'` in X_d.
    """
    kc, kd = rel.basis_c.shape[1], rel.basis_d.shape[1]
    first = np.vstack([np.eye(kc), rel.B, np.zeros((kd, kc)), rel.C])
    second = np.vstack([np.zeros((kc, kd)), rel.C_prime, np.eye(kd), rel.B_prime])
    return np.hstack([first, second])


def graph_tangent_space(lagrangian: Union[GraphLagrangian, np.ndarray]) -> np.ndarray:
    """
    Spanning set `(v, A v)` of the graph of `A`, which may be any square matrix.
    """
    a = lagrangian.A if isinstance(lagrangian, GraphLagrangian) else np.asarray(lagrangian, dtype=float)
    return np.vstack([np.eye(a.shape[0]), a])


class LagrangianCertificate(NamedTuple):
    is_lagrangian: bool
    residual: float
    rank: int
    dimension: int


def _symplectic_form(k: int) -> np.ndarray:
    return np.block([[np.zeros((k, k)), np.eye(k)], [-np.eye(k), np.zeros((k, k))]])


def lagrangian_certificate(vectors: np.ndarray, dims: Optional[Tuple[int, int]] = None,
                           tol: float = DEFINITE_TOL) -> LagrangianCertificate:
    """
    Checks that the columns of `vectors` span a Lagrangian subspace.

    Without `dims` the rows are `(dw, dxi)` and the form is the standard one,
    `omega = dw ^ dxi`. With `dims = (k_c, k_d)` the rows are
    `(dw, dxi, dw', dxi')` and the form is the twisted one,
    `omega_c - omega_d`.

    Parameters
    ----------
    vectors : array_like
        Spanning set, one vector per column.
    dims : tuple of int, optional
        Plane dimensions for the twisted form.
    tol : float, optional
        Largest form value allowed, relative to the squared scale of the vectors.

    Returns
    -------
    LagrangianCertificate
        Whether the span is Lagrangian, the largest form value on pairs of
        columns, the rank and the half dimension of the symplectic space.

    Raises
    ------
    RankDeficient
        When the spanning set has rank below the half dimension.
    """
    v = np.asarray(vectors, dtype=float)
    if v.ndim != 2:
        raise ValueError('`vectors` must be a 2-dimensional array, %d found.' % v.ndim)
    if dims is None:
        if v.shape[0] % 2:
            raise ValueError('`vectors` must have an even number of rows, %d found.' % v.shape[0])
        half = v.shape[0] // 2
        omega = _symplectic_form(half)
    else:
        kc, kd = dims
        if v.shape[0] != 2 * (kc + kd):
            raise ValueError('`vectors` must have %d rows, %d found.' % (2 * (kc + kd), v.shape[0]))
        half = kc + kd
        omega = np.zeros((2 * half, 2 * half))
        omega[:2 * kc, :2 * kc] = _symplectic_form(kc)
        omega[2 * kc:, 2 * kc:] = -_symplectic_form(kd)

    rank = int(np.linalg.matrix_rank(v)) if v.size else 0
    if rank < half:
        raise RankDeficient('Spanning set has rank %d, %d required.' % (rank, half))

    form = v.T @ omega @ v
    residual = float(np.abs(form).max()) if form.size else 0.0
    scale = max(1.0, _scale(v) ** 2)
    return LagrangianCertificate(rank == half and residual < tol * scale, residual, rank, half)


class FamilyCheck(NamedTuple):
    """
    Comparison of a ray family with the composed Lagrangian of its central ray.

    `residual` is the largest `|dxi - A dw|` over the perturbation directions,
    relative to the momentum perturbation `eps |xi|`.
    """
    ray: BrokenRay
    chain: ChainResult
    residual: float
    n_perturbations: int


def _closest_on_line(p: np.ndarray, d: np.ndarray, q: np.ndarray) -> np.ndarray:
    d = d / np.linalg.norm(d)
    return p + ((q - p) @ d) * d


def ray_family_check(lattice: ClusterLattice, model: SpectralModel, lam: float, start: np.ndarray, xi: np.ndarray,
                     channel: Channel, cluster: Optional[int] = None, max_breaks: int = 4, eps: float = 1e-6,
                     final_u: float = 1.0, seed: Optional[int] = 0, n_directions: int = 8) -> FamilyCheck:
    """
    Cross-checks the point source Lagrangian of a shot ray against perturbed rays.

    A ray is shot forward from `start`. Rays from `start` with directions
    turned by `+-eps` replay its decisions, and their final legs give
    centred differences `(dw, dxi)` near the final chain point, which must
    satisfy `dxi = A dw` for the composed `A`.

    Returns
    -------
    FamilyCheck
        The central ray, its chain and the largest relative residual.
    """
    start = np.asarray(start, dtype=float)
    xi = np.asarray(xi, dtype=float)
    ray = shoot_ray(lattice, model, lam, start, xi, channel, cluster=cluster, u_min=0.0, max_breaks=max_breaks,
                    rng=np.random.default_rng(seed), n_directions=n_directions)
    chain = ray_lagrangian(ray, lattice, model, final_u=final_u)
    target = ray_chain_points(ray, final_u=final_u)[-1]
    a1 = ray.string.clusters[0]
    qa = chain.lagrangian.basis

    basis = lattice.basis(a1)
    unit = xi / np.linalg.norm(xi)
    tangent = basis - np.outer(unit, unit @ basis)
    u, s, _ = np.linalg.svd(tangent, full_matrices=False)
    directions = u[:, s > 1e-9]

    residual = 0.0
    for k in range(directions.shape[1]):
        ends = []
        for sign in (1.0, -1.0):
            turned = xi + sign * eps * np.linalg.norm(xi) * directions[:, k]
            turned *= np.linalg.norm(xi) / np.linalg.norm(turned)
            other = shoot_ray(lattice, model, lam, start, turned, channel, cluster=a1, u_min=0.0,
                              max_breaks=max_breaks, chooser=replay_chooser(ray.decisions),
                              rng=np.random.default_rng(seed), n_directions=n_directions)
            last = other.points[-1] if other.n_breaks else start
            ends.append((_closest_on_line(last, other.legs[-1].xi, target), other.legs[-1].xi))
        dw = qa.T @ (ends[0][0] - ends[1][0]) / 2
        dxi = qa.T @ (ends[0][1] - ends[1][1]) / 2
        error = float(np.linalg.norm(dxi - chain.lagrangian.A @ dw)) / (eps * np.linalg.norm(xi))
        residual = max(residual, error)
    logger.debug('ray family residual %r over %d directions', residual, directions.shape[1])
    return FamilyCheck(ray, chain, residual, directions.shape[1])
