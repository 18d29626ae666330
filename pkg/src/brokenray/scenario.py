import dataclasses
import functools
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .broken_rays import BreakString, BrokenRay, build_ray
from .cluster_lattice import ClusterLattice, Subspace, build_lattice, particle_generators
from .phase_space import Channel, SpectralModel

logger = logging.getLogger(__name__)

SCHEMA = 'brokenray.scenario/1'

ClusterRef = Union[str, List[str]]

_TOP_KEYS = {'schema', 'ambient_dim', 'generators', 'channels', 'lambda', 'run', 'threshold_intervals', 'rays',
             'chains'}
_CHAIN_SEEDS = ('point_source', 'plane_wave', 'identity')


def _require(data: Dict, key: str, where: str) -> Any:
    if key not in data:
        raise ValueError('`%s` is required in %s.' % (key, where))
    return data[key]


def _unknown(data: Dict, allowed: Sequence[str], where: str) -> None:
    extra = sorted(set(data) - set(allowed))
    if extra:
        raise ValueError('Unknown keys %r in %s.' % (extra, where))


def _decimal(value: Any, where: str) -> str:
    # basis entries are kept as their decimal text so that they round trip exactly
    if isinstance(value, bool) or not isinstance(value, (str, int, float)):
        raise TypeError('%s entries must be numbers or decimal strings, %r found.' % (where, value))
    text = value.strip() if isinstance(value, str) else repr(float(value))
    try:
        number = float(text)
    except ValueError:
        raise ValueError('%s entry %r is not a decimal number.' % (where, value)) from None
    if not np.isfinite(number):
        raise ValueError('%s entry %r must be finite.' % (where, value))
    return text


def _vector(value: Any, dim: int, where: str) -> List[float]:
    if not isinstance(value, (list, tuple)) or len(value) != dim:
        raise ValueError('`%s` must be a list of %d numbers, %r found.' % (where, dim, value))
    out = [float(v) for v in value]
    if not all(np.isfinite(out)):
        raise ValueError('`%s` must be finite, %r found.' % (where, value))
    return out


def _cluster_ref(value: Any, where: str) -> ClusterRef:
    if isinstance(value, str):
        return value
    if isinstance(value, (list, tuple)) and value and all(isinstance(v, str) for v in value):
        return list(value)
    raise TypeError('%s must be a cluster label or a list of labels, %r found.' % (where, value))


@dataclass
class RunParameters:
    """
    Run parameters of a scenario.

    Attributes
    ----------
    max_breaks : int
        Break budget of shot and enumerated rays.
    seed : int
        Seed of every random choice.
    n_rays : int
        Rays shot, or relation samples drawn, per command.
    n_directions : int
        Sampled normal directions at breaks with normal spaces of dimension 2 or more.
    grid_step : float
        Output grid of image computations.
    tolerance : float
        Geometric tolerance of the verification.
    """
    max_breaks: int = 4
    seed: int = 0
    n_rays: int = 8
    n_directions: int = 4
    grid_step: float = 1e-6
    tolerance: float = 1e-9

    @classmethod
    def from_dict(cls, data: Optional[Dict]) -> 'RunParameters':
        data = {} if data is None else data
        if not isinstance(data, dict):
            raise TypeError('`run` must be an object, %r found.' % (data,))
        names = [f.name for f in dataclasses.fields(cls)]
        _unknown(data, names, '`run`')
        params = cls(**data)
        for name in ('max_breaks', 'seed', 'n_rays', 'n_directions'):
            value = getattr(params, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 0:
                raise ValueError('`run.%s` must be a non-negative integer, %r found.' % (name, value))
        for name in ('grid_step', 'tolerance'):
            value = float(getattr(params, name))
            if not value > 0:
                raise ValueError('`run.%s` must be positive, %r found.' % (name, value))
            setattr(params, name, value)
        return params

    def to_dict(self) -> Dict:
        return dataclasses.asdict(self)


@dataclass
class Scenario:
    """
    Many-body system, energy and run parameters of a command line run.

    A scenario is a JSON object with the schema ``brokenray.scenario/1``.
    The collision planes are given either as a list of generators with a
    label and spanning rows of decimals, or as ``{"particles": N, "dim": d}``
    for the pair collisions of N equal-mass particles in R^d. Clusters are
    referred to by label, by ``"free"`` or ``"origin"``, or by a list of
    labels standing for the intersection of their planes.

    Examples
    --------

    >>> from brokenray.scenario import Scenario
    >>>
    >>> scenario = Scenario.from_dict({
    >>>     'schema': 'brokenray.scenario/1', 'ambient_dim': 2,
    >>>     'generators': {'particles': 3, 'dim': 1},
    >>>     'channels': [{'cluster': '1-2', 'index': 0, 'energy': -0.5}],
    >>>     'lambda': 1.0})
    >>> scenario.model.global_thresholds()
    array([-0.5,  0. ])
    """
    ambient_dim: int
    generators: Union[List[Dict], Dict]
    channels: List[Dict]
    lam: float
    run: RunParameters = field(default_factory=RunParameters)
    threshold_intervals: List[Tuple[float, float]] = field(default_factory=list)
    rays: List[Dict] = field(default_factory=list)
    chains: List[Dict] = field(default_factory=list)

    @classmethod
    def from_dict(cls, data: Dict) -> 'Scenario':
        if not isinstance(data, dict):
            raise TypeError('Scenario must be a JSON object, %r found.' % type(data).__name__)
        _unknown(data, _TOP_KEYS, 'the scenario')
        schema = _require(data, 'schema', 'the scenario')
        if schema != SCHEMA:
            raise ValueError('`schema` must be %r, %r found.' % (SCHEMA, schema))

        dim = _require(data, 'ambient_dim', 'the scenario')
        if isinstance(dim, bool) or not isinstance(dim, int) or dim < 1:
            raise ValueError('`ambient_dim` must be a positive integer, %r found.' % (dim,))

        generators = cls._parse_generators(_require(data, 'generators', 'the scenario'), dim)

        channels = []
        for k, ch in enumerate(data.get('channels', [])):
            where = '`channels[%d]`' % k
            if not isinstance(ch, dict):
                raise TypeError('%s must be an object, %r found.' % (where, ch))
            _unknown(ch, ('cluster', 'index', 'energy'), where)
            index = ch.get('index', 0)
            if isinstance(index, bool) or not isinstance(index, int):
                raise TypeError('%s index must be an integer, %r found.' % (where, index))
            channels.append({'cluster': _cluster_ref(_require(ch, 'cluster', where), where + ' cluster'),
                             'index': index, 'energy': float(_require(ch, 'energy', where))})

        if not any(ch['cluster'] == 'free' for ch in channels):
            channels.append({'cluster': 'free', 'index': 0, 'energy': 0.0})

        lam = float(_require(data, 'lambda', 'the scenario'))
        if not np.isfinite(lam):
            raise ValueError('`lambda` must be finite, %r found.' % lam)
        intervals = [(float(lo), float(hi)) for lo, hi in data.get('threshold_intervals', [])]

        rays = []
        for k, spec in enumerate(data.get('rays', [])):
            rays.append(cls._parse_string_spec(spec, dim, '`rays[%d]`' % k, ('points', 'initial', 'final',
                                                                                 'base_point')))
        chains = []
        for k, spec in enumerate(data.get('chains', [])):
            chains.append(cls._parse_string_spec(spec, dim, '`chains[%d]`' % k, ('points', 'seed')))

        scenario = cls(dim, generators, channels, lam, RunParameters.from_dict(data.get('run')), intervals, rays,
                       chains)
        # lattice and channel table are built eagerly so that a bad file fails here
        logger.debug('scenario thresholds %s', scenario.model.global_thresholds())
        return scenario

    @staticmethod
    def _parse_generators(value: Any, dim: int) -> Union[List[Dict], Dict]:
        if isinstance(value, dict):
            _unknown(value, ('particles', 'dim'), '`generators`')
            n = _require(value, 'particles', '`generators`')
            d = value.get('dim', 1)
            if not all(isinstance(v, int) and not isinstance(v, bool) for v in (n, d)) or n < 2 or d < 1:
                raise ValueError('`generators` needs at least 2 particles in a positive dimension, %r found.'
                                 % (value,))
            if d * (n - 1) != dim:
                raise ValueError('%d particles in dimension %d live in dimension %d, `ambient_dim` is %d.'
                                 % (n, d, d * (n - 1), dim))
            return {'particles': n, 'dim': d}

        if not isinstance(value, list):
            raise TypeError('`generators` must be a list or an object, %r found.' % (value,))
        out = []
        for k, g in enumerate(value):
            where = '`generators[%d]`' % k
            if not isinstance(g, dict):
                raise TypeError('%s must be an object, %r found.' % (where, g))
            _unknown(g, ('label', 'basis'), where)
            label = _require(g, 'label', where)
            if not isinstance(label, str) or label in ('free', 'origin') or not label:
                raise ValueError('%s label must be a non-empty string other than free or origin, %r found.'
                                 % (where, label))
            rows = _require(g, 'basis', where)
            if not isinstance(rows, list) or not rows:
                raise ValueError('%s basis must be a non-empty list of rows.' % where)
            basis = []
            for row in rows:
                if not isinstance(row, list) or len(row) != dim:
                    raise ValueError('%s basis rows must have %d entries, %r found.' % (where, dim, row))
                basis.append([_decimal(v, where) for v in row])
            out.append({'label': label, 'basis': basis})
        labels = [g['label'] for g in out]
        if len(set(labels)) != len(labels):
            raise ValueError('`generators` labels must be unique, %r found.' % labels)
        return out

    @staticmethod
    def _parse_string_spec(spec: Any, dim: int, where: str, extra: Sequence[str]) -> Dict:
        if not isinstance(spec, dict):
            raise TypeError('%s must be an object, %r found.' % (where, spec))
        _unknown(spec, ('clusters', 'channels', 'breaks') + tuple(extra), where)
        out = {'clusters': [_cluster_ref(r, where + ' cluster') for r in _require(spec, 'clusters', where)],
               'channels': [], 'breaks': [_cluster_ref(r, where + ' break') for r in spec.get('breaks', [])]}
        for ch in _require(spec, 'channels', where):
            if not isinstance(ch, (list, tuple)) or len(ch) != 2:
                raise ValueError('%s channels must be [cluster, index] pairs, %r found.' % (where, ch))
            out['channels'].append([_cluster_ref(ch[0], where + ' channel'), int(ch[1])])
        out['points'] = [_vector(w, dim, where + ' points') for w in spec.get('points', [])]
        for key in ('initial', 'final', 'base_point'):
            if key in extra and spec.get(key) is not None:
                out[key] = _vector(spec[key], dim, '%s %s' % (where, key))
        if 'seed' in extra:
            seed = spec.get('seed', 'point_source')
            if seed not in _CHAIN_SEEDS:
                raise ValueError('%s seed must be one of %r, %r found.' % (where, _CHAIN_SEEDS, seed))
            out['seed'] = seed
        return out

    def to_dict(self) -> Dict:
        """
        Normalized form of the scenario, parsed back to an equal scenario.
        """
        out = {'schema': SCHEMA, 'ambient_dim': self.ambient_dim, 'generators': self.generators,
               'channels': self.channels, 'lambda': self.lam, 'run': self.run.to_dict()}
        if self.threshold_intervals:
            out['threshold_intervals'] = [list(pair) for pair in self.threshold_intervals]
        if self.rays:
            out['rays'] = self.rays
        if self.chains:
            out['chains'] = self.chains
        return json.loads(json.dumps(out))

    def replace(self, lam: Optional[float] = None, max_breaks: Optional[int] = None,
                seed: Optional[int] = None) -> 'Scenario':
        """
        Copy with the command line overrides applied.
        """
        run = dataclasses.replace(self.run, **{k: v for k, v in (('max_breaks', max_breaks), ('seed', seed))
                                               if v is not None})
        run = RunParameters.from_dict(run.to_dict())
        return dataclasses.replace(self, lam=self.lam if lam is None else float(lam), run=run)

    @functools.cached_property
    def lattice(self) -> ClusterLattice:
        if isinstance(self.generators, dict):
            planes = particle_generators(self.generators['particles'], self.generators['dim'])
        else:
            planes = [Subspace.from_spanning([[float(v) for v in row] for row in g['basis']], self.ambient_dim,
                                             label=g['label'])
                      for g in self.generators]
        lattice = build_lattice(planes, self.ambient_dim)
        logger.info('scenario lattice has %d clusters, %d bodies', len(lattice), lattice.n_body)
        return lattice

    @functools.cached_property
    def model(self) -> SpectralModel:
        channels = [Channel(self.cluster(ch['cluster']), ch['index'], ch['energy']) for ch in self.channels]
        return SpectralModel(self.lattice, channels, threshold_intervals=self.threshold_intervals or None)

    def cluster(self, ref: ClusterRef) -> int:
        """
        Cluster of a label, of ``"free"`` or ``"origin"``, or of the intersection of a list of labels.
        """
        if isinstance(ref, str):
            return self.lattice.find_label(ref)
        return functools.reduce(self.lattice.meet, [self.lattice.find_label(r) for r in ref])

    def channel(self, ref: ClusterRef, index: int = 0) -> Channel:
        return self.model.channel(self.cluster(ref), index)

    def string(self, spec: Dict) -> BreakString:
        return BreakString(tuple(self.cluster(r) for r in spec['clusters']),
                           tuple((self.cluster(r), k) for r, k in spec['channels']),
                           tuple(self.cluster(r) for r in spec['breaks']))

    def build_rays(self) -> List[BrokenRay]:
        """
        Rays given explicitly in the scenario, validated by :func:`build_ray`.
        """
        rays = []
        for k, spec in enumerate(self.rays):
            for key in ('initial', 'final'):
                if key not in spec:
                    raise ValueError('`rays[%d]` needs `%s`.' % (k, key))
            base = np.asarray(spec['base_point']) if 'base_point' in spec else None
            rays.append(build_ray(self.lattice, self.model, self.lam, self.string(spec),
                                  [np.asarray(w) for w in spec['points']], np.asarray(spec['initial']),
                                  np.asarray(spec['final']), base_point=base))
        return rays

    def chain_specs(self) -> List[Tuple[BreakString, List[np.ndarray], str]]:
        return [(self.string(spec), [np.asarray(w) for w in spec['points']], spec['seed']) for spec in self.chains]


def load_scenario(path: str) -> Scenario:
    """
    Reads a scenario file.

    Raises
    ------
    ValueError
        When the file is not valid JSON or not a valid scenario.
    """
    with open(path, encoding='utf-8') as f:
        data = json.load(f)
    return Scenario.from_dict(data)
