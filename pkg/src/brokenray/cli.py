import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from . import broken_rays as br
from . import lagrangian as lg
from ._version import __version__
from .exceptions import ChannelClosed, DegenerateSegment, InfeasibleRay, TransversalityFailure
from .phase_space import ENERGY_TOL
from .scenario import Scenario, load_scenario

logger = logging.getLogger(__name__)

EXIT_PASS = 0
EXIT_FAILED = 1
EXIT_INPUT = 2
EXIT_INFEASIBLE = 3

LENGTH_SLACK = 1e-9
FAMILY_TOL = 1e-5
TRACE_SCHEMA = 'brokenray.trace/1'


def _clean(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if np.isfinite(obj) else None
    return obj


def dumps(obj: Any) -> str:
    """
    Canonical JSON text: sorted keys, shortest round-trip floats, `null` for non-finite numbers.
    """
    return json.dumps(_clean(obj), sort_keys=True, allow_nan=False)


def _write_json(path: Path, obj: Any) -> None:
    path.write_text(dumps(obj) + '\n', encoding='utf-8')


def _write_jsonl(path: Path, records: Iterable[Any]) -> None:
    with open(path, 'w', encoding='utf-8') as f:
        for record in records:
            f.write(dumps(record) + '\n')


def _cell(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (float, np.floating)):
        return '%.17g' % value if np.isfinite(value) else ''
    return str(value)


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])


def worker_count() -> int:
    """
    Worker threads of a command, `BROKENRAY_THREADS` or the number of CPUs.
    """
    value = os.environ.get('BROKENRAY_THREADS')
    if value is None:
        return os.cpu_count() or 1
    try:
        n = int(value)
    except ValueError:
        raise ValueError('`BROKENRAY_THREADS` must be a positive integer, %r found.' % value) from None
    if n < 1:
        raise ValueError('`BROKENRAY_THREADS` must be a positive integer, %r found.' % value)
    return n


def parallel_map(func: Callable, items: Sequence) -> List:
    """
    `func` over `items` on the worker threads, results in the order of `items`.
    """
    items = list(items)
    if not items:
        return []
    with ThreadPoolExecutor(max_workers=min(worker_count(), len(items))) as pool:
        return list(pool.map(func, items))


def string_labels(scenario: Scenario, string: br.BreakString) -> Dict:
    label = scenario.lattice.label
    return {'clusters': [label(a) for a in string.clusters],
            'channels': [[label(b), k] for b, k in string.channels],
            'breaks': [label(c) for c in string.breaks]}


def string_text(scenario: Scenario, string: br.BreakString) -> str:
    label = scenario.lattice.label
    tokens = []
    for j, (a, (b, k)) in enumerate(zip(string.clusters, string.channels)):
        tokens.append('%s[%s:%d]' % (label(a), label(b), k))
        if j < string.n_breaks:
            tokens.append('|%s|' % label(string.breaks[j]))
    return ' '.join(tokens)


@dataclass
class TraceRecord:
    """
    Serialized broken ray with its verification report.

    Attributes
    ----------
    id : str
        Ray id, numbered in canonical key order.
    string : dict
        Break string with cluster labels.
    segments : list of dict
        Cluster, channel, kinetic energy, arclength and time ranges, and an
        anchor point of every leg.
    breaks : list of dict
        Cluster, point, time and conservation defect of every break.
    length : float
        Sphere arclength of the ray.
    tau_max, tau_min : float
        Extrema of tau over the sampled points.
    """
    id: str
    string: Dict
    lam: float
    segments: List[Dict]
    breaks: List[Dict]
    length: float
    n_breaks: int
    tau_max: float
    tau_min: float
    passed: bool
    violations: List[Dict] = field(default_factory=list)

    @classmethod
    def from_ray(cls, ray_id: str, ray: br.BrokenRay, scenario: Scenario, report: br.RayReport,
                 n_samples: int = 32) -> 'TraceRecord':
        label = scenario.lattice.label
        segments = []
        for leg in ray.legs:
            anchor = next(p for p in (leg.start, leg.end, ray.base_point) if p is not None)
            segments.append({'cluster': label(leg.cluster),
                             'channel': [label(leg.channel.cluster), leg.channel.index],
                             'sigma': leg.sigma, 's_range': list(leg.segment.s_range),
                             't_range': [leg.t_start, leg.t_end], 'anchor': anchor,
                             'stationary': leg.stationary})
        breaks = [{'cluster': label(b.cluster), 'point': b.w, 'time': b.time, 'defect': b.defect}
                  for b in ray.breaks]
        taus = [s.point.tau for s in ray.samples(n_samples)]
        violations = [{'kind': v.kind, 'position': v.position, 'defect': v.defect, 'message': v.message}
                      for v in report.violations]
        return cls(ray_id, string_labels(scenario, ray.string), ray.lam, segments, breaks, br.length_of(ray),
                   ray.n_breaks, float(max(taus)), float(min(taus)), report.passed, violations)

    def to_dict(self) -> Dict:
        return _clean({'schema': TRACE_SCHEMA, 'id': self.id, 'string': self.string, 'lambda': self.lam,
                       'segments': self.segments, 'breaks': self.breaks, 'length': self.length,
                       'n_breaks': self.n_breaks, 'tau_max': self.tau_max, 'tau_min': self.tau_min,
                       'passed': self.passed, 'violations': self.violations})


def _sorted_rays(rays: Sequence[br.BrokenRay]) -> List[br.BrokenRay]:
    return sorted(rays, key=br.BrokenRay.key)


def cmd_trace(scenario: Scenario, out: Path, fmt: str = 'jsonl', mode: str = 'structural') -> Dict:
    """
    Builds or shoots the rays of a scenario, verifies them and writes their traces and tau profiles.
    """
    lattice, model, run = scenario.lattice, scenario.model, scenario.run
    if scenario.rays:
        rays = scenario.build_rays()
    else:
        rays = br.random_rays(lattice, model, scenario.lam, run.n_rays, max_breaks=run.max_breaks, seed=run.seed,
                              n_directions=run.n_directions)
    rays = _sorted_rays(rays)
    constants = br.bound_constants(lattice, model) if model.is_discrete else None

    def verify(ray):
        return br.verify_ray(ray, lattice, model, mode=mode, constants=constants, tol=run.tolerance)

    reports = parallel_map(verify, rays)
    records = [TraceRecord.from_ray('ray-%04d' % k, ray, scenario, report)
               for k, (ray, report) in enumerate(zip(rays, reports))]

    if fmt == 'jsonl':
        trace_path = out / 'traces.jsonl'
        _write_jsonl(trace_path, [r.to_dict() for r in records])
    else:
        trace_path = out / 'traces.csv'
        rows = []
        for r in records:
            for j, seg in enumerate(r.segments):
                rows.append([r.id, j, seg['cluster'], '%s:%d' % tuple(seg['channel']), seg['sigma'],
                             seg['s_range'][0], seg['s_range'][1], r.length, r.n_breaks, r.passed])
        _write_csv(trace_path, ['ray', 'leg', 'cluster', 'channel', 'sigma', 's_start', 's_end', 'length',
                                'n_breaks', 'passed'], rows)

    profile = []
    for r, ray in zip(records, rays):
        profile.extend([r.id, s.leg, s.s, s.t, s.point.tau] for s in ray.samples(32))
    _write_csv(out / 'tau_profile.csv', ['ray', 'leg', 's', 't', 'tau'], profile)

    defects = [b['defect'] for r in records for b in r.breaks]
    passed = all(r.passed for r in records)
    logger.info('traced %d rays, %d failed verification', len(records), sum(not r.passed for r in records))
    return {'command': 'trace', 'passed': passed, 'n_rays': len(records),
            'n_failed': sum(not r.passed for r in records),
            'max_defect': max(defects) if defects else 0.0,
            'outputs': [trace_path.name, 'tau_profile.csv']}


def _step_dict(scenario: Scenario, step: lg.ChainStep) -> Dict:
    return {'position': step.position, 'cluster': scenario.lattice.label(step.cluster), 'margin': step.margin,
            'eigmin': step.eigmin, 'psd': step.psd, 'pd': step.pd, 'pd_expected': step.pd_expected,
            'residual': step.residual}


def _chain_dict(scenario: Scenario, string: br.BreakString, compute: Callable[[], lg.ChainResult]) -> Dict:
    out = {'string': string_labels(scenario, string)}
    try:
        chain = compute()
    except TransversalityFailure as err:
        logger.warning('transversality failure on %s: %s', string_text(scenario, string), err)
        out.update({'passed': False, 'error': {'kind': 'TransversalityFailure', 'message': str(err),
                                              'eigenvalue': err.eigenvalue, 'position': err.position}})
        return out
    out.update({'passed': chain.passed, 'final_eigmin': chain.lagrangian.eigmin,
                'steps': [_step_dict(scenario, s) for s in chain.steps]})
    return out


def _parse_channel(scenario: Scenario, text: str):
    ref, _, index = text.rpartition(':')
    if not ref:
        ref, index = text, '0'
    try:
        index = int(index)
    except ValueError:
        raise ValueError('Channel must read `cluster:index`, %r found.' % text) from None
    return scenario.channel(ref.split('&') if '&' in ref else ref, index)


def cmd_relation(scenario: Scenario, out: Path, alpha: str = 'free:0', beta: str = 'free:0') -> Dict:
    """
    Samples the channel relation from `alpha` to `beta` and certifies the Lagrangian of every string met.

    Raises
    ------
    ValueError
        When the energy is a threshold.
    ChannelClosed
        When `alpha` or `beta` is closed at the scenario energy.
    """
    lattice, model, run, lam = scenario.lattice, scenario.model, scenario.run, scenario.lam
    model.require_discrete()
    thresholds = model.global_thresholds()
    if thresholds.size and np.min(np.abs(thresholds - lam)) <= ENERGY_TOL:
        raise ValueError('`lambda` must not be a threshold, %r found.' % lam)
    ch_alpha, ch_beta = _parse_channel(scenario, alpha), _parse_channel(scenario, beta)
    for ch in (ch_alpha, ch_beta):
        if lam - ch.energy <= 0.0:
            raise ChannelClosed('Channel %s:%d is closed at energy %r.'
                                % (lattice.label(ch.cluster), ch.index, lam))

    entries = br.channel_relation(lattice, model, lam, ch_alpha, ch_beta, n_samples=run.n_rays,
                                  max_breaks=run.max_breaks, n_directions=run.n_directions, seed=run.seed)
    dim = scenario.ambient_dim
    header = ['witness', 'string', 'n_breaks', 'length']
    for name in ('y_in', 'p', 'y_out', 'q'):
        header.extend('%s_%d' % (name, k) for k in range(dim))
    rows, groups = [], {}
    for k, entry in enumerate(entries):
        witness = 'w%04d' % k
        text = string_text(scenario, entry.ray.string)
        rows.append([witness, text, entry.ray.n_breaks, br.length_of(entry.ray)]
                    + list(entry.zeta[0]) + list(entry.zeta[1]) + list(entry.zeta_out[0]) + list(entry.zeta_out[1]))
        groups.setdefault(entry.ray.string.key(), []).append((witness, entry.ray))
    _write_csv(out / 'relation.csv', header, rows)

    def certify(key):
        witness, ray = groups[key][0]
        record = _chain_dict(scenario, ray.string,
                             lambda: lg.ray_lagrangian(ray, lattice, model, source_u=1.0))
        record.update({'witness': witness, 'n_witnesses': len(groups[key])})
        return record

    strings = parallel_map(certify, sorted(groups))
    passed = all(s['passed'] for s in strings)
    summary = {'alpha': alpha, 'beta': beta, 'lambda': lam, 'n_entries': len(entries), 'strings': strings,
               'passed': passed}
    _write_json(out / 'relation_summary.json', summary)
    logger.info('relation %s -> %s has %d entries over %d strings', alpha, beta, len(entries), len(strings))
    return {'command': 'relation', 'passed': passed, 'n_entries': len(entries), 'n_strings': len(strings),
            'outputs': ['relation.csv', 'relation_summary.json']}


def cmd_bounds(scenario: Scenario, out: Path) -> Dict:
    """
    Break bound constants of the scenario against the lengths and break counts of a ray sweep.

    Raises
    ------
    NotDiscrete
        When the thresholds are not discrete.
    """
    lattice, model, run, lam = scenario.lattice, scenario.model, scenario.run, scenario.lam
    constants = br.bound_constants(lattice, model)
    rays = br.sweep_rays(lattice, model, lam, run.max_breaks, n_rays=run.n_rays, n_directions=run.n_directions,
                         seed=run.seed)

    def measure(ray):
        tau = br.tau_arclength_bound(ray, constants.c0)
        return br.length_of(ray), max(br.length_by_energy(ray).values()), ray.n_breaks, tau

    measured = parallel_map(measure, rays)
    observed = {'n_rays': len(rays),
                'max_length': max((m[0] for m in measured), default=None),
                'max_energy_length': max((m[1] for m in measured), default=None),
                'max_breaks': max((m[2] for m in measured), default=None)}
    checks = {'energy_length': all(m[1] <= np.pi + LENGTH_SLACK for m in measured),
              'total_length': all(m[0] <= constants.c1 * np.pi + LENGTH_SLACK for m in measured),
              'breaks': all(m[2] <= constants.max_breaks for m in measured),
              'tau_arclength': all(m[3].length <= m[3].bound + LENGTH_SLACK for m in measured)}
    passed = all(checks.values())
    report = {'lambda': lam,
              'constants': {'l': constants.l, 'c0': constants.c0, 'c1': constants.c1, 'n_body': constants.n_body,
                            'max_breaks': constants.max_breaks,
                            'subsystem_max_breaks': constants.subsystem_max_breaks},
              'observed': observed, 'checks': checks, 'passed': passed}
    _write_json(out / 'bounds.json', report)
    if not passed:
        logger.warning('bound checks failed: %s', sorted(k for k, v in checks.items() if not v))
    return {'command': 'bounds', 'passed': passed, 'n_rays': len(rays), 'outputs': ['bounds.json']}


def cmd_certify(scenario: Scenario, out: Path) -> Dict:
    """
    Lagrangian certificates of the scenario chains, of its rays or of random rays, with ray family checks.
    """
    lattice, model, run, lam = scenario.lattice, scenario.model, scenario.run, scenario.lam
    jobs = []
    for string, points, seed in scenario.chain_specs():
        jobs.append((string, lambda s=string, p=points, c=seed: lg.compose_chain(lattice, model, lam, s, p, c)))
    if scenario.rays:
        for ray in scenario.build_rays():
            jobs.append((ray.string, lambda r=ray: lg.ray_lagrangian(r, lattice, model)))
    shot = [] if jobs else br.random_rays(lattice, model, lam, run.n_rays, max_breaks=run.max_breaks,
                                            seed=run.seed, n_directions=run.n_directions)
    for ray in _sorted_rays(shot):
        jobs.append((ray.string, lambda r=ray: lg.ray_lagrangian(r, lattice, model, source_u=1.0)))

    chains = parallel_map(lambda job: _chain_dict(scenario, job[0], job[1]), jobs)
    for k, chain in enumerate(chains):
        chain['id'] = 'chain-%04d' % k

    def family(k_ray):
        k, ray = k_ray
        first = ray.legs[0]
        unit = first.xi / np.linalg.norm(first.xi)
        start = ray.points[0] - unit if ray.n_breaks else ray.base_point
        try:
            check = lg.ray_family_check(lattice, model, lam, start, first.xi, first.channel, cluster=first.cluster,
                                        max_breaks=run.max_breaks, seed=run.seed + k, n_directions=run.n_directions)
        except TransversalityFailure as err:
            return {'id': 'family-%04d' % k, 'passed': False, 'error': str(err)}
        return {'id': 'family-%04d' % k, 'string': string_labels(scenario, check.ray.string),
                'residual': check.residual, 'n_perturbations': check.n_perturbations,
                'passed': bool(check.chain.passed and check.residual < FAMILY_TOL)}

    families = parallel_map(family, list(enumerate(_sorted_rays(shot))))
    passed = all(c['passed'] for c in chains) and all(f['passed'] for f in families)
    _write_json(out / 'certificates.json', {'lambda': lam, 'chains': chains, 'families': families,
                                            'passed': passed})
    return {'command': 'certify', 'passed': passed, 'n_chains': len(chains), 'n_families': len(families),
            'outputs': ['certificates.json']}


def cmd_enumerate(scenario: Scenario, out: Path) -> Dict:
    """
    Admissible break strings of the scenario, in canonical order.
    """
    strings = br.enumerate_strings(scenario.lattice, scenario.model, scenario.lam, scenario.run.max_breaks)
    _write_jsonl(out / 'strings.jsonl', [{'index': k, 'string': string_labels(scenario, s), 'ids': s.to_dict(),
                                          'n_breaks': s.n_breaks} for k, s in enumerate(strings)])
    return {'command': 'enumerate', 'passed': True, 'n_strings': len(strings), 'outputs': ['strings.jsonl']}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--scenario', required=True, help='scenario JSON file')
    common.add_argument('--lambda', dest='lam', type=float, default=None, help='total energy override')
    common.add_argument('--max-breaks', type=int, default=None, help='break budget override')
    common.add_argument('--seed', type=int, default=None, help='seed override')
    common.add_argument('--out', default='.', help='output directory')
    common.add_argument('--format', dest='fmt', choices=('jsonl', 'csv'), default='jsonl',
                        help='format of the trace records')
    common.add_argument('-v', '--verbose', action='count', default=0, help='-v for INFO, -vv for DEBUG')

    ap = argparse.ArgumentParser(prog='brokenray', description='Generalized broken rays of many-body scattering.')
    ap.add_argument('--version', action='version', version='%(prog)s ' + __version__)
    sub = ap.add_subparsers(dest='command', required=True)
    trace = sub.add_parser('trace', parents=[common], help='build, verify and trace rays')
    trace.add_argument('--mode', choices=('structural', 'dini'), default='structural', help='verification mode')
    relation = sub.add_parser('relation', parents=[common], help='sample a channel relation')
    relation.add_argument('--alpha', default='free:0', help='incoming channel `cluster:index`')
    relation.add_argument('--beta', default='free:0', help='outgoing channel `cluster:index`')
    sub.add_parser('bounds', parents=[common], help='break bound report')
    sub.add_parser('certify', parents=[common], help='Lagrangian certificates')
    sub.add_parser('enumerate', parents=[common], help='admissible break strings')
    return ap


def _run(args: argparse.Namespace) -> Dict:
    scenario = load_scenario(args.scenario).replace(lam=args.lam, max_breaks=args.max_breaks, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.command == 'trace':
        return cmd_trace(scenario, out, fmt=args.fmt, mode=args.mode)
    if args.command == 'relation':
        return cmd_relation(scenario, out, alpha=args.alpha, beta=args.beta)
    if args.command == 'bounds':
        return cmd_bounds(scenario, out)
    if args.command == 'certify':
        return cmd_certify(scenario, out)
    return cmd_enumerate(scenario, out)


def _error(kind: str, err: Exception) -> Dict:
    out = {'error': kind, 'message': str(err)}
    for name in ('defect', 'position', 'eigenvalue'):
        if hasattr(err, name):
            out[name] = getattr(err, name)
    return out


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Command line entry point, returns the exit code.

    Exit codes are 0 when every check passes, 1 on a failed verification or
    certificate, 2 on invalid input and 3 on an infeasible ray or a closed channel.
    """
    args = build_parser().parse_args(argv)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, stream=sys.stderr, format='%(name)s:%(levelname)s:%(message)s')

    try:
        summary = _run(args)
        code = EXIT_PASS if summary['passed'] else EXIT_FAILED
    except TransversalityFailure as err:
        summary, code = _error('TransversalityFailure', err), EXIT_FAILED
    except (ChannelClosed, InfeasibleRay, DegenerateSegment) as err:
        summary, code = _error(type(err).__name__, err), EXIT_INFEASIBLE
    except (OSError, ValueError, TypeError) as err:
        summary, code = _error(type(err).__name__, err), EXIT_INPUT
    if code == EXIT_INFEASIBLE or code == EXIT_INPUT:
        logger.error('%s: %s', summary['error'], summary['message'])
    print(dumps(summary))
    return code


if __name__ == '__main__':
    sys.exit(main())
