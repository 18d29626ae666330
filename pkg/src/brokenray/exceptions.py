from typing import Optional


class InvalidSubspace(ValueError):
    """Basis matrix is not orthonormal or not a 2-dimensional array."""


class DimensionMismatch(ValueError):
    """Vector or subspace lives in a space of the wrong dimension."""


class UnknownCluster(ValueError):
    """Cluster id is not part of the lattice."""


class NotUnitVector(ValueError):
    """Point on the sphere at infinity does not have unit norm."""


class DegenerateBasePoint(ValueError):
    """Base point is zero, so it has no direction at infinity."""


class ParameterOutOfRange(ValueError):
    """Arclength or time parameter lies outside the segment range."""


class EnergyMismatch(ValueError):
    """Covector does not carry the kinetic energy of its channel."""


class ZeroSpeed(ValueError):
    """Operation needs a moving segment but the kinetic energy is zero."""


class SideUnavailable(ValueError):
    """One-sided derivative requested outside the curve domain."""


class ChannelClosed(ValueError):
    """Total energy does not exceed the channel energy plus the conserved momentum."""


class DegenerateSegment(ValueError):
    """Segment endpoints coincide or the segment crosses the origin."""


class NotDiscrete(ValueError):
    """Threshold set contains intervals, enumeration is not possible."""


class RankDeficient(ValueError):
    """Spanning set does not have the required rank."""


class InfeasibleRay(ValueError):
    """
    Break points and directions do not conserve the external momentum.

    Attributes
    ----------
    defect : float
        Largest conservation defect found, in momentum units.
    position : int, optional
        Index of the offending break.
    """

    def __init__(self, message: str, defect: float = float('nan'), position: Optional[int] = None):
        super().__init__(message)
        self.defect = defect
        self.position = position


class TransversalityFailure(ValueError):
    """
    Composition failed because `A' - B'` is not positive definite.

    Attributes
    ----------
    eigenvalue : float
        Smallest eigenvalue of `A' - B'`.
    position : int, optional
        Position of the relation in the chain, starting at 1.
    """

    def __init__(self, message: str, eigenvalue: float, position: Optional[int] = None):
        super().__init__(message)
        self.eigenvalue = eigenvalue
        self.position = position


class ResolutionWarning(UserWarning):
    """Output grid is coarser than the requested accuracy."""
