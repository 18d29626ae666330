import logging
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg

from .exceptions import DimensionMismatch, InvalidSubspace, NotUnitVector, UnknownCluster

logger = logging.getLogger(__name__)

BASIS_TOL = 1e-12
SUBSPACE_TOL = 1e-10
MEMBERSHIP_TOL = 1e-9

FREE = 0
ORIGIN = 1


class Subspace:
    """
    Linear subspace of the Euclidean space given by an orthonormal basis.

    Parameters
    ----------
    basis : array_like
        Matrix of shape (n, k) whose columns are an orthonormal basis.
    label : str, optional
        Name used by scenarios and reports.

    Examples
    --------

    >>> import numpy as np
    >>> from brokenray.cluster_lattice import Subspace
    >>>
    >>> line = Subspace.from_spanning([[1, 1]])
    >>> line.project([3, 1])
    """

    def __init__(self, basis: np.ndarray, label: Optional[str] = None):
        basis = np.asarray(basis, dtype=float)
        if basis.ndim != 2:
            raise InvalidSubspace('`basis` must be a 2-dimensional array, %d found.' % basis.ndim)

        gram = basis.T @ basis
        error = np.abs(gram - np.eye(basis.shape[1])).max() if basis.shape[1] else 0.0
        if error > BASIS_TOL:
            raise InvalidSubspace('`basis` columns must be orthonormal, max deviation %r found.' % error)

        self.basis = basis
        self.label = label
        self._complement = None

    @classmethod
    def from_spanning(cls, vectors: Sequence, ambient_dim: Optional[int] = None,
                      label: Optional[str] = None) -> 'Subspace':
        """
        Orthonormalizes the rows of `vectors`.
        """
        vectors = np.asarray(vectors, dtype=float)
        if vectors.size == 0:
            if ambient_dim is None:
                raise ValueError('`ambient_dim` must be provided for an empty spanning set.')
            return cls(np.zeros((ambient_dim, 0)), label)

        vectors = np.atleast_2d(vectors)
        if ambient_dim is not None and vectors.shape[1] != ambient_dim:
            raise DimensionMismatch('Spanning vectors must have length %d, %d found.'
                                    % (ambient_dim, vectors.shape[1]))

        return cls(linalg.orth(vectors.T, rcond=SUBSPACE_TOL), label)

    @classmethod
    def from_normals(cls, normals: Sequence, ambient_dim: int, label: Optional[str] = None) -> 'Subspace':
        """
        Subspace orthogonal to every row of `normals`.
        """
        normals = np.asarray(normals, dtype=float)
        if normals.size == 0:
            return cls(np.eye(ambient_dim), label)

        normals = np.atleast_2d(normals)
        if normals.shape[1] != ambient_dim:
            raise DimensionMismatch('Normal vectors must have length %d, %d found.'
                                    % (ambient_dim, normals.shape[1]))
        return cls(linalg.null_space(normals, rcond=SUBSPACE_TOL), label)

    @property
    def ambient_dim(self) -> int:
        return self.basis.shape[0]

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    @property
    def projector(self) -> np.ndarray:
        return self.basis @ self.basis.T

    @property
    def complement(self) -> np.ndarray:
        """
        Orthonormal basis of the orthocomplement, shape (n, n - k).
        """
        if self._complement is None:
            if self.dim == 0:
                self._complement = np.eye(self.ambient_dim)
            elif self.dim == self.ambient_dim:
                self._complement = np.zeros((self.ambient_dim, 0))
            else:
                self._complement = linalg.null_space(self.basis.T, rcond=SUBSPACE_TOL)
        return self._complement

    def project(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        return self.basis @ (self.basis.T @ v)

    def residual(self, v: np.ndarray) -> float:
        """
        Norm of the component of `v` orthogonal to the subspace.
        """
        v = np.asarray(v, dtype=float)
        return float(np.linalg.norm(v - self.project(v)))

    def contains(self, v: np.ndarray, tol: float = MEMBERSHIP_TOL) -> bool:
        v = np.asarray(v, dtype=float)
        return self.residual(v) <= tol * max(1.0, float(np.linalg.norm(v)))

    def includes(self, other: 'Subspace', tol: float = SUBSPACE_TOL) -> bool:
        """
        Whether `other` is a subspace of this one.
        """
        if other.dim == 0:
            return True
        if other.dim > self.dim:
            return False
        return bool(np.abs(other.basis - self.project(other.basis)).max() <= tol)

    def equals(self, other: 'Subspace', tol: float = SUBSPACE_TOL) -> bool:
        if self.ambient_dim != other.ambient_dim or self.dim != other.dim:
            return False
        if self.dim == 0:
            return True
        return bool(np.max(linalg.subspace_angles(self.basis, other.basis)) <= tol)

    def intersect(self, other: 'Subspace') -> 'Subspace':
        if self.ambient_dim != other.ambient_dim:
            raise DimensionMismatch('Subspaces live in different spaces, %d and %d found.'
                                    % (self.ambient_dim, other.ambient_dim))
        stacked = np.hstack((self.complement, other.complement)).T
        if stacked.shape[0] == 0:
            return Subspace(np.eye(self.ambient_dim))
        return Subspace(linalg.null_space(stacked, rcond=SUBSPACE_TOL))

    def __repr__(self) -> str:
        return 'Subspace(dim=%d, ambient_dim=%d, label=%r)' % (self.dim, self.ambient_dim, self.label)


class SplitCoordinates(NamedTuple):
    """
    Orthonormal blocks of the splitting X_a + (X^a cap X_b) + X^b for X_a inside X_b.
    """
    external: np.ndarray
    relative: np.ndarray
    internal: np.ndarray


class ClusterLattice:
    """
    Intersection-closed family of collision planes X_a.

    Cluster 0 is the whole space and cluster 1 is the origin. The order is
    `a <= b` when X_b is a subspace of X_a, so 0 is the least element and
    1 the greatest. Use :func:`build_lattice` to create instances.

    Attributes
    ----------
    ambient_dim : int
        Dimension n of the configuration space.
    subspaces : list of Subspace
        Collision planes indexed by cluster id.
    order : array_like
        Boolean matrix, `order[a, b]` is True when `a <= b`.
    cluster_rank : array_like
        Rank k of each cluster, i.e. `a` is a k-cluster.
    """

    def __init__(self, ambient_dim: int, subspaces: List[Subspace]):
        self.ambient_dim = ambient_dim
        self.subspaces = subspaces
        size = len(subspaces)

        self.order = np.zeros((size, size), dtype=bool)
        for a in range(size):
            for b in range(size):
                self.order[a, b] = subspaces[a].includes(subspaces[b])

        self._meet = np.full((size, size), -1, dtype=int)
        for a in range(size):
            for b in range(a, size):
                self._meet[a, b] = self._meet[b, a] = self._find(subspaces[a].intersect(subspaces[b]))

        if np.any(self._meet < 0):
            raise InvalidSubspace('Subspace family is not closed under intersection.')

        self.cluster_rank = self._peel_ranks()
        self._labels = {s.label: a for a, s in enumerate(subspaces) if s.label is not None}

    def _find(self, subspace: Subspace) -> int:
        for a, other in enumerate(self.subspaces):
            if other.equals(subspace):
                return a
        return -1

    def _peel_ranks(self) -> np.ndarray:
        # maximal elements of what is left are the next k-clusters
        size = len(self.subspaces)
        rank = np.zeros(size, dtype=int)
        rank[ORIGIN] = 1
        remaining = set(range(size)) - {ORIGIN}
        k = 1
        while remaining:
            k += 1
            maximal = [a for a in remaining
                       if not any(self.lt(a, b) for b in remaining)]
            for a in maximal:
                rank[a] = k
            remaining -= set(maximal)
        return rank

    def __len__(self) -> int:
        return len(self.subspaces)

    def _check(self, a: int) -> None:
        if not isinstance(a, (int, np.integer)) or not 0 <= a < len(self.subspaces):
            raise UnknownCluster('Cluster %r not found, lattice has %d clusters.' % (a, len(self.subspaces)))

    def subspace(self, a: int) -> Subspace:
        self._check(a)
        return self.subspaces[a]

    def basis(self, a: int) -> np.ndarray:
        return self.subspace(a).basis

    def complement(self, a: int) -> np.ndarray:
        return self.subspace(a).complement

    def dim(self, a: int) -> int:
        return self.subspace(a).dim

    def label(self, a: int) -> str:
        self._check(a)
        if a == FREE:
            return 'free'
        if a == ORIGIN:
            return 'origin'
        label = self.subspaces[a].label
        return label if label is not None else 'x%d' % a

    def find_label(self, label: str) -> int:
        if label == 'free':
            return FREE
        if label == 'origin':
            return ORIGIN
        if label in self._labels:
            return self._labels[label]
        if label.startswith('x') and label[1:].isdigit() and int(label[1:]) < len(self):
            return int(label[1:])
        raise UnknownCluster('Cluster label %r not found.' % label)

    def leq(self, a: int, b: int) -> bool:
        self._check(a)
        self._check(b)
        return bool(self.order[a, b])

    def lt(self, a: int, b: int) -> bool:
        return a != b and self.leq(a, b)

    def meet(self, a: int, b: int) -> int:
        """
        Cluster c with X_c the intersection of X_a and X_b.
        """
        self._check(a)
        self._check(b)
        return int(self._meet[a, b])

    def clusters_containing(self, a: int) -> List[int]:
        """
        Clusters b with X_a a subspace of X_b, i.e. `b <= a`.
        """
        self._check(a)
        return [b for b in range(len(self)) if self.order[b, a]]

    @property
    def n_body(self) -> int:
        return int(self.cluster_rank[FREE])

    @property
    def is_three_body(self) -> bool:
        """
        Whether every pair of distinct proper planes meets only at the origin.
        """
        proper = range(2, len(self))
        return all(self._meet[a, b] == ORIGIN for a in proper for b in proper if a != b)

    def project_external(self, a: int, v: np.ndarray) -> np.ndarray:
        v = self._vector(v)
        return self.subspace(a).project(v)

    def project_internal(self, a: int, v: np.ndarray) -> np.ndarray:
        v = self._vector(v)
        return v - self.subspace(a).project(v)

    def _vector(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape[-1] != self.ambient_dim:
            raise DimensionMismatch('`v` must have length %d, %d found.' % (self.ambient_dim, v.shape[-1]))
        return v

    def split_coordinates(self, a: int, b: int) -> SplitCoordinates:
        """
        Splitting of the space for X_a a subspace of X_b.
        """
        if not self.leq(b, a):
            raise ValueError('`X_a` must be a subspace of `X_b`, %d and %d found.' % (a, b))
        sa = self.subspaces[a]
        sb = self.subspaces[b]
        relative = Subspace(sa.complement).intersect(sb)
        return SplitCoordinates(sa.basis, relative.basis, sb.complement)

    def stratum_of(self, w: np.ndarray, tol: float = MEMBERSHIP_TOL) -> int:
        """
        Smallest collision plane containing `w`, ties broken by the smallest residual.
        """
        w = self._vector(w)
        scale = max(1.0, float(np.linalg.norm(w)))
        best = FREE
        best_key = (self.ambient_dim, 0.0)
        for a, s in enumerate(self.subspaces):
            r = s.residual(w)
            if r <= tol * scale:
                key = (s.dim, r)
                if key < best_key:
                    best, best_key = a, key
        return best


def build_lattice(generators: Sequence[Union[Subspace, np.ndarray]], ambient_dim: int) -> ClusterLattice:
    """
    Builds the intersection closure of the collision planes in `generators`.

    Parameters
    ----------
    generators : sequence of Subspace or array_like
        Collision planes, arrays are read as orthonormal basis matrices of shape (n, k).
    ambient_dim : int
        Dimension n of the configuration space.

    Returns
    -------
    ClusterLattice
        Lattice with cluster 0 the whole space, cluster 1 the origin, then
        generators and new intersections in closure order.

    Examples
    --------

    >>> import numpy as np
    >>> from brokenray.cluster_lattice import Subspace, build_lattice
    >>>
    >>> planes = [Subspace(np.eye(4)[:, [0, 1]]),
    >>>           Subspace(np.eye(4)[:, [1, 2]]),
    >>>           Subspace(np.eye(4)[:, [2, 0]])]
    >>> lattice = build_lattice(planes, 4)
    >>> len(lattice)
    8
    """
    if not isinstance(ambient_dim, (int, np.integer)) or ambient_dim < 1:
        raise ValueError('`ambient_dim` must be a positive integer, %r found.' % ambient_dim)

    subspaces = [Subspace(np.eye(ambient_dim)), Subspace(np.zeros((ambient_dim, 0)))]

    def index_of(s: Subspace) -> int:
        for k, other in enumerate(subspaces):
            if other.equals(s):
                return k
        return -1

    for g in generators:
        if not isinstance(g, Subspace):
            g = Subspace(g)
        if g.ambient_dim != ambient_dim:
            raise DimensionMismatch('Generators must live in dimension %d, %d found.' % (ambient_dim, g.ambient_dim))
        if index_of(g) < 0:
            subspaces.append(g)

    i = 2
    while i < len(subspaces):
        for j in range(2, i):
            x = subspaces[i].intersect(subspaces[j])
            if index_of(x) < 0:
                subspaces.append(x)
        i += 1

    logger.debug('lattice closure has %d clusters in dimension %d', len(subspaces), ambient_dim)
    return ClusterLattice(ambient_dim, subspaces)


def project_external(lattice: ClusterLattice, a: int, v: np.ndarray) -> np.ndarray:
    """
    Orthogonal projection of `v` onto X_a.
    """
    return lattice.project_external(a, v)


def project_internal(lattice: ClusterLattice, a: int, v: np.ndarray) -> np.ndarray:
    """
    Orthogonal projection of `v` onto the orthocomplement X^a.
    """
    return lattice.project_internal(a, v)


class SphereStrata:
    """
    Stratification of the unit sphere into the regular parts C'_a.

    Parameters
    ----------
    lattice : ClusterLattice
        Collision planes.
    tol : float, optional
        Membership tolerance on the internal component of unit vectors.
    """

    def __init__(self, lattice: ClusterLattice, tol: float = MEMBERSHIP_TOL):
        self.lattice = lattice
        self.tol = tol

    def _unit(self, y: np.ndarray) -> np.ndarray:
        y = self.lattice._vector(y)
        norm = float(np.linalg.norm(y))
        if abs(norm - 1.0) > self.tol:
            raise NotUnitVector('`y` must have unit norm, %r found.' % norm)
        return y

    def in_closure(self, a: int, y: np.ndarray) -> bool:
        """
        Whether `y` lies on the sphere C_a of X_a.
        """
        y = self._unit(y)
        return self.lattice.subspace(a).residual(y) <= self.tol

    def stratum(self, y: np.ndarray) -> int:
        """
        Unique cluster `a` with `y` in C'_a.
        """
        return self.lattice.stratum_of(self._unit(y), self.tol)

    def is_regular(self, a: int, y: np.ndarray) -> bool:
        return self.in_closure(a, y) and self.stratum(y) == a

    def is_singular(self, a: int, y: np.ndarray) -> bool:
        return self.in_closure(a, y) and self.stratum(y) != a

    def singular_parts(self, a: int) -> List[int]:
        """
        Clusters c whose spheres make up C_{a,sing}, the union of C_a cap C_b over `b` not below `a`.
        """
        lattice = self.lattice
        parts = {lattice.meet(a, b) for b in range(len(lattice)) if not lattice.leq(b, a)}
        return sorted(c for c in parts if lattice.dim(c) > 0)


def sphere_strata(lattice: ClusterLattice, tol: float = MEMBERSHIP_TOL) -> SphereStrata:
    return SphereStrata(lattice, tol)


def particle_generators(n_particles: int, dim: int = 1) -> List[Subspace]:
    """
    Pair collision planes of `n_particles` equal-mass particles in R^dim.

    The centre of mass is removed with the Helmert basis, so the planes live
    in dimension `dim * (n_particles - 1)`. Labels are `'i-j'` with 1-based
    particle indices.

    Parameters
    ----------
    n_particles : int
        Number of particles, at least 2.
    dim : int, optional
        Dimension of the physical space, by default 1.

    Returns
    -------
    list of Subspace
        One collision plane per pair of particles.
    """
    if n_particles < 2:
        raise ValueError('`n_particles` must be at least 2, %d found.' % n_particles)
    if dim < 1:
        raise ValueError('`dim` must be positive, %d found.' % dim)

    helmert = np.zeros((n_particles, n_particles - 1))
    for k in range(1, n_particles):
        helmert[:k, k - 1] = 1.0
        helmert[k, k - 1] = -k
        helmert[:, k - 1] /= np.sqrt(k * (k + 1))

    ambient_dim = dim * (n_particles - 1)
    generators = []
    for i in range(n_particles):
        for j in range(i + 1, n_particles):
            diff = helmert[i] - helmert[j]
            normals = np.kron(diff / np.linalg.norm(diff), np.eye(dim))
            generators.append(Subspace.from_normals(normals, ambient_dim, label='%d-%d' % (i + 1, j + 1)))
    return generators


def subsystem_lattice(lattice: ClusterLattice, a: int) -> Tuple[ClusterLattice, Dict[int, int]]:
    """
    Lattice of the subsystem of cluster `a` on X^a, in coordinates of `lattice.complement(a)`.

    Parameters
    ----------
    lattice : ClusterLattice
        Full lattice.
    a : int
        Cluster whose internal space hosts the subsystem, not the free cluster.

    Returns
    -------
    ClusterLattice, dict
        Subsystem lattice with planes X^a cap X_b for `b <= a`, and the map from
        subsystem ids to the cluster ids `b` of `lattice`.
    """
    if a == FREE:
        raise ValueError('The free cluster has no subsystem.')
    q = lattice.complement(a)
    size = q.shape[1]
    inside = Subspace(q)

    generators = []
    owners = []
    for b in lattice.clusters_containing(a):
        if b in (FREE, a):
            continue
        # X_b splits as X_a + (X^a cap X_b)
        inner = inside.intersect(lattice.subspaces[b])
        generators.append(Subspace(q.T @ inner.basis, label=lattice.subspaces[b].label))
        owners.append(b)

    sub = build_lattice(generators, size)
    mapping = {FREE: FREE, ORIGIN: a}
    for g, b in zip(generators, owners):
        k = sub._find(g)
        if k >= 0:
            mapping[k] = b
    return sub, mapping
