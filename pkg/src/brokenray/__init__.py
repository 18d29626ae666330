from ._version import __version__
from .cluster_lattice import FREE, ORIGIN, ClusterLattice, Subspace, build_lattice, particle_generators
from .phase_space import Channel, CompressedPoint, SpectralModel
from .broken_rays import BreakString, BrokenRay, build_ray, shoot_ray, verify_ray
from .lagrangian import GraphLagrangian, compose, compose_chain, elementary_relation
from .scenario import Scenario, load_scenario
