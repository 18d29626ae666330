import warnings
from typing import NamedTuple, Optional

import numpy as np
from brokenray import broken_rays as br
from brokenray import cluster_lattice as cl
from brokenray import hamilton_flow as hf
from brokenray import phase_space as ps
from brokenray.exceptions import (ChannelClosed, DegenerateSegment, InfeasibleRay, NotDiscrete,
                                  ResolutionWarning)

FREE_CHANNEL = ps.Channel(cl.FREE, 0, 0.0)
FREE_LEG = (cl.FREE, 0)


def three_body(line_energy=None):
    lattice = cl.build_lattice(cl.particle_generators(3), 2)
    line = lattice.find_label('1-2')
    channels = [FREE_CHANNEL]
    if line_energy is not None:
        channels.append(ps.Channel(line, 0, line_energy))
    return lattice, ps.SpectralModel(lattice, channels), line


def four_body(plane_energy=-0.5):
    lattice = cl.build_lattice(cl.particle_generators(4), 3)
    plane = lattice.find_label('1-2')
    model = ps.SpectralModel(lattice, [FREE_CHANNEL, ps.Channel(plane, 0, plane_energy)])
    return lattice, model, plane


def reflection(lattice, line, outgoing=None):
    # free leg hitting the line at its unit point and reflected off it
    e = lattice.basis(line)[:, 0]
    n = lattice.complement(line)[:, 0]
    xi_in = 0.6 * e - 0.8 * n
    xi_out = 0.6 * e + 0.8 * n if outgoing is None else outgoing
    string = br.BreakString((cl.FREE, cl.FREE), (FREE_LEG, FREE_LEG), (line,))
    return string, e, n, xi_in, xi_out


class TestBreakString:

    def test_enumeration_counts(self):
        lattice, model, _ = three_body()
        np.testing.assert_equal(len(br.enumerate_strings(lattice, model, 1.0, 0)), 4)

        strings = br.enumerate_strings(lattice, model, 1.0, 1)
        np.testing.assert_equal(len(strings), 13)
        np.testing.assert_equal(sum(s.n_breaks == 1 for s in strings), 9)
        keys = [s.key() for s in strings]
        np.testing.assert_(keys == sorted(keys))
        for s in strings:
            np.testing.assert_equal(s.check(lattice, model, 1.0), [])

    def test_closed_channels_left_out(self):
        lattice, model, line = three_body(line_energy=-0.5)
        strings = br.enumerate_strings(lattice, model, -0.2, 1)
        np.testing.assert_(len(strings) > 0)
        for s in strings:
            np.testing.assert_(all(ch == (line, 0) for ch in s.channels))

    def test_problems(self):
        lattice, model, line = three_body()
        other = lattice.find_label('1-3')
        at_origin = br.BreakString((cl.FREE, cl.FREE), (FREE_LEG, FREE_LEG), (cl.ORIGIN,))
        np.testing.assert_(at_origin.check(lattice, model, 1.0))

        tangent = br.BreakString((line, line), (FREE_LEG, FREE_LEG), (line,))
        np.testing.assert_(tangent.check(lattice, model, 1.0))

        disjoint = br.BreakString((other, cl.FREE), (FREE_LEG, FREE_LEG), (line,))
        np.testing.assert_(disjoint.check(lattice, model, 1.0))

        with np.testing.assert_raises(ValueError):
            br.BreakString((cl.FREE,), (FREE_LEG,), (line,))

    def test_not_discrete(self):
        lattice, model, _ = three_body()
        continuous = ps.SpectralModel(lattice, model.channels, threshold_intervals=[(-2.0, -1.5)])
        with np.testing.assert_raises(NotDiscrete):
            br.enumerate_strings(lattice, continuous, 1.0, 1)


class TestBuildRay:

    def test_reflection(self):
        lattice, model, line = three_body()
        string, e, n, xi_in, xi_out = reflection(lattice, line)
        ray = br.build_ray(lattice, model, 1.0, string, [e], xi_in, xi_out)

        np.testing.assert_equal(ray.n_breaks, 1)
        np.testing.assert_equal(ray.break_times, [0.0])
        np.testing.assert_allclose(ray.breaks[0].defect, 0.0, atol=1e-15)
        np.testing.assert_allclose(ray.point_at_time(0.0).y, e)
        np.testing.assert_allclose(ray.point_at_time(0.0).tau, -0.6)
        np.testing.assert_allclose(br.length_of(ray), np.pi, rtol=1e-12)
        np.testing.assert_(br.verify_ray(ray, lattice, model).passed)

    def test_time_continuity(self):
        lattice, model, line = three_body()
        string, e, n, xi_in, xi_out = reflection(lattice, line)
        ray = br.build_ray(lattice, model, 1.0, string, [e], xi_in, xi_out)
        before, after = ray.point_at_time(-1e-9), ray.point_at_time(1e-9)
        np.testing.assert_allclose(before.y, e, atol=1e-8)
        np.testing.assert_allclose(after.y, e, atol=1e-8)
        np.testing.assert_(before.tau > -0.6 > after.tau)

    def test_continue_momentum(self):
        lattice, model, line = three_body()
        _, e, n, xi_in, xi_out = reflection(lattice, line)
        found = br.continue_momentum(lattice, model, 1.0, xi_in, line, FREE_CHANNEL, normal_direction=n)
        np.testing.assert_allclose(found, xi_out)

    def test_tangential_rejected(self):
        lattice, model, line = three_body(line_energy=-0.5)
        e = lattice.basis(line)[:, 0]
        n = lattice.complement(line)[:, 0]
        string = br.BreakString((cl.FREE, line), (FREE_LEG, (line, 0)), (line,))
        with np.testing.assert_raises(InfeasibleRay):
            br.build_ray(lattice, model, 1.0, string, [e], 0.6 * e - 0.8 * n, e)

    def test_error_handling(self):
        lattice, model, line = three_body()
        string, e, n, xi_in, xi_out = reflection(lattice, line)

        with np.testing.assert_raises(ChannelClosed):
            br.build_ray(lattice, model, -0.7, string, [e], xi_in, xi_out)

        try:
            br.build_ray(lattice, model, 1.0, string, [e], xi_in, 0.8 * e + 0.6 * n)
        except InfeasibleRay as err:
            np.testing.assert_allclose(err.defect, 0.2, rtol=1e-12)
            np.testing.assert_equal(err.position, 0)
        else:
            raise AssertionError('InfeasibleRay not raised')

        with np.testing.assert_raises(DegenerateSegment):
            br.build_ray(lattice, model, 1.0, br.BreakString((cl.FREE,), (FREE_LEG,)), [], e, e, base_point=2 * e)

        twice = br.BreakString((cl.FREE, cl.FREE, cl.FREE), (FREE_LEG,) * 3, (line, line))
        with np.testing.assert_raises(DegenerateSegment):
            br.build_ray(lattice, model, 1.0, twice, [e, e], xi_in, xi_out)

        with np.testing.assert_raises(ValueError):
            br.build_ray(lattice, model, 1.0, br.BreakString((cl.FREE,), (FREE_LEG,)), [], e, e)

    def test_unbroken(self):
        lattice, model, line = three_body()
        e = lattice.basis(line)[:, 0]
        n = lattice.complement(line)[:, 0]
        ray = br.build_ray(lattice, model, 1.0, br.BreakString((cl.FREE,), (FREE_LEG,)), [], n, n, base_point=e)
        np.testing.assert_allclose(br.length_of(ray), np.pi)
        np.testing.assert_allclose(ray.point_at_time(0.0).y, e)
        np.testing.assert_allclose(ray.point_at_time(50.0).y, n, atol=1e-12)
        np.testing.assert_(br.verify_ray(ray, lattice, model).passed)


class TestShooting:

    def test_branches_of_three_body(self):
        lattice, model, _ = three_body()
        y, p = br.sample_incoming(lattice, cl.FREE, np.random.default_rng(5))
        rays = br.branch_rays(lattice, model, 1.0, p, -y, FREE_CHANNEL, cluster=cl.FREE, max_breaks=3)

        np.testing.assert_equal(len(rays), 8)
        np.testing.assert_equal(np.bincount([ray.n_breaks for ray in rays]), [1, 3, 3, 1])
        for ray in rays:
            np.testing.assert_(br.verify_ray(ray, lattice, model).passed)
            np.testing.assert_allclose(br.length_of(ray), np.pi, rtol=1e-9)

    def test_random_rays(self):
        lattice, model, _ = three_body()
        rays = br.random_rays(lattice, model, 1.0, 30, max_breaks=4, seed=7)
        np.testing.assert_equal(len(rays), 30)
        constants = br.bound_constants(lattice, model)
        for ray in rays:
            np.testing.assert_(ray.n_breaks <= 3)
            np.testing.assert_(all(a == cl.FREE for a in ray.string.clusters))
            np.testing.assert_(br.verify_ray(ray, lattice, model, constants=constants).passed)

        again = br.random_rays(lattice, model, 1.0, 30, max_breaks=4, seed=7)
        np.testing.assert_equal([r.key() for r in rays], [r.key() for r in again])

    def test_monotone_and_conservative(self):
        count, rise, jump, defect = 0, 0.0, 0.0, 0.0
        for (lattice, model, _), n in ((three_body(), 6000), (four_body(), 4000)):
            for ray in br.random_rays(lattice, model, 1.0, n, seed=11):
                count += 1
                taus = [sample.point.tau for sample in sorted(ray.samples(16), key=lambda sample: sample.t)]
                rise = max([rise] + list(np.diff(taus)))
                for b in ray.breaks:
                    defect = max(defect, b.defect)
                    jump = max(jump, float(b.point.y @ (b.xi_in - b.xi_out)))
        np.testing.assert_equal(count, 10000)
        np.testing.assert_(rise <= 1e-9)
        np.testing.assert_(jump <= 1e-9)
        np.testing.assert_(defect <= 1e-12)

    def test_replay(self):
        lattice, model, _ = four_body()
        rng = np.random.default_rng(3)
        y, p = br.sample_incoming(lattice, cl.FREE, rng)
        ray = br.shoot_ray(lattice, model, 1.0, p, -y, FREE_CHANNEL, cluster=cl.FREE, rng=rng)
        replayed = br.shoot_ray(lattice, model, 1.0, p, -y, FREE_CHANNEL, cluster=cl.FREE,
                                chooser=br.replay_chooser(ray.decisions))
        np.testing.assert_equal(replayed.key(), ray.key())

    def test_four_body_sweep(self):
        lattice, model, _ = four_body()
        rays = br.sweep_rays(lattice, model, 1.0, max_breaks=2, n_rays=2, max_rays=32)
        np.testing.assert_(len(rays) > 0)
        for ray in rays:
            np.testing.assert_(br.verify_ray(ray, lattice, model).passed)
            bound = br.tau_arclength_bound(ray)
            np.testing.assert_(bound.length <= bound.bound + 1e-12)

    def test_two_body(self):
        lattice = cl.build_lattice([], 2)
        model = ps.SpectralModel(lattice, [FREE_CHANNEL])
        ray = br.shoot_ray(lattice, model, 4.0, [0.0, 1.0], [2.0, 0.0], FREE_CHANNEL)
        np.testing.assert_equal(ray.n_breaks, 0)
        np.testing.assert_allclose(br.length_of(ray), np.pi)
        np.testing.assert_equal(br.length_by_energy(ray), {4.0: br.length_of(ray)})


class TestVerify:

    def test_conservation_defect(self):
        lattice, model, line = three_body()
        string, e, n, xi_in, _ = reflection(lattice, line)
        xi_out = 0.601 * e + np.sqrt(1.0 - 0.601 ** 2) * n
        ray = br.assemble_ray(lattice, model, 1.0, string, [e], [xi_in, xi_out])
        report = br.verify_ray(ray, lattice, model)
        np.testing.assert_(not report.passed)
        found = [v for v in report.violations if v.kind == 'ConservationViolation']
        np.testing.assert_equal(len(found), 1)
        np.testing.assert_allclose(found[0].defect, 1e-3, rtol=1e-9)

    def test_energy_and_monotonicity(self):
        lattice, model, line = three_body()
        string, e, n, xi_in, xi_out = reflection(lattice, line)
        ray = br.assemble_ray(lattice, model, 1.0, string, [e], [xi_in, 1.01 * xi_out])
        np.testing.assert_('EnergyViolation' in br.verify_ray(ray, lattice, model).kinds())

        ray = br.assemble_ray(lattice, model, 1.0, string, [e], [xi_in, -xi_out])
        np.testing.assert_('MonotonicityViolation' in br.verify_ray(ray, lattice, model).kinds())

    def test_forbidden_tangency(self):
        lattice, model, plane = four_body()
        line = lattice.meet(plane, lattice.find_label('3-4'))
        e = lattice.basis(line)[:, 0]
        n = lattice.split_coordinates(line, plane).relative[:, 0]
        xi_in = e - np.sqrt(0.5) * n
        string = br.BreakString((plane, cl.FREE), ((plane, 0), FREE_LEG), (line,))

        with np.testing.assert_raises(InfeasibleRay):
            br.build_ray(lattice, model, 1.0, string, [e], xi_in, e)

        ray = br.assemble_ray(lattice, model, 1.0, string, [e], [xi_in, e])
        report = br.verify_ray(ray, lattice, model)
        np.testing.assert_equal(report.kinds(), ['TangencyViolation'])

    def test_dini_mode(self):
        lattice, model, line = three_body()
        string, e, n, xi_in, xi_out = reflection(lattice, line)
        ray = br.build_ray(lattice, model, 1.0, string, [e], xi_in, xi_out)
        np.testing.assert_(br.verify_ray(ray, lattice, model, mode='dini').passed)

        lattice, model, plane = four_body()
        basis = lattice.basis(plane)
        normal = lattice.complement(plane)[:, 0]
        w = basis @ np.array([0.7, -0.4])
        xi_in = 0.5 * (basis @ np.array([0.3, 0.8])) / np.linalg.norm([0.3, 0.8]) - np.sqrt(0.75) * normal
        xi_out = xi_in + 2 * np.sqrt(0.75) * normal
        string = br.BreakString((cl.FREE, cl.FREE), (FREE_LEG, FREE_LEG), (plane,))
        ray = br.build_ray(lattice, model, 1.0, string, [w], xi_in, xi_out)
        np.testing.assert_(br.verify_ray(ray, lattice, model, mode='dini').passed)

    def test_dini_mode_off_cluster(self):
        lattice, model, line = three_body()
        string, e, n, xi_in, xi_out = reflection(lattice, line)
        ray = br.assemble_ray(lattice, model, 1.0, string, [e + 0.3 * n], [xi_in, xi_out])
        np.testing.assert_equal(br.verify_ray(ray, lattice, model).kinds(), ['ClusterViolation'])

        report = br.verify_ray(ray, lattice, model, mode='dini')
        np.testing.assert_(not report.passed)
        np.testing.assert_equal(report.kinds(), ['ClusterViolation', 'DiniViolation'])
        dini = [v for v in report.violations if v.kind == 'DiniViolation']
        np.testing.assert_equal({v.position for v in dini}, {0})
        unbounded = [v for v in dini if 'no fiber bound' in v.message]
        np.testing.assert_equal(len(unbounded), 2)
        np.testing.assert_allclose([v.defect for v in unbounded], 0.3 / np.sqrt(1.09), rtol=1e-9)

        string = br.BreakString((cl.FREE, cl.FREE), (FREE_LEG, FREE_LEG), (lattice.find_label('1-3'),))
        ray = br.assemble_ray(lattice, model, 1.0, string, [e], [xi_in, xi_out])
        np.testing.assert_equal(br.verify_ray(ray, lattice, model).kinds(),
                                ['ClusterViolation', 'ConservationViolation'])
        np.testing.assert_('DiniViolation' in br.verify_ray(ray, lattice, model, mode='dini').kinds())

    def test_break_bound(self):
        lattice, model, line = three_body()
        string, e, n, xi_in, xi_out = reflection(lattice, line)
        ray = br.build_ray(lattice, model, 1.0, string, [e], xi_in, xi_out)
        constants = br.bound_constants(lattice, model)._replace(max_breaks=0.0)
        np.testing.assert_equal(br.verify_ray(ray, lattice, model, constants=constants).kinds(),
                                ['BreakBoundViolation'])

    def test_error_handling(self):
        lattice, model, _ = three_body()
        with np.testing.assert_raises(TypeError):
            br.verify_ray('ray', lattice, model)

        ray = br.random_rays(lattice, model, 1.0, 1, seed=0)[0]
        with np.testing.assert_raises(ValueError):
            br.verify_ray(ray, lattice, model, mode='full')


class Defect(NamedTuple):
    name: str
    ray: br.BrokenRay
    lattice: cl.ClusterLattice
    model: ps.SpectralModel
    kind: str
    dini_kind: Optional[str] = None
    constants: Optional[br.BoundConstants] = None


def twice_broken(lattice, model):
    y, p = br.sample_incoming(lattice, cl.FREE, np.random.default_rng(5))
    rays = br.branch_rays(lattice, model, 1.0, p, -y, FREE_CHANNEL, cluster=cl.FREE, max_breaks=3)
    ray = next(r for r in rays if r.n_breaks == 2)
    return ray, [b.w for b in ray.breaks], [leg.xi for leg in ray.legs]


def injected_defects():
    out = []
    lattice, model, line = three_body()
    lattice_b, model_b, _ = three_body(line_energy=-0.5)
    string, e, n, xi_in, xi_out = reflection(lattice, line)

    def reflected(name, kind, momenta, point=e, s=string, dini_kind=None, lattice=lattice, model=model):
        ray = br.assemble_ray(lattice, model, 1.0, s, [point], momenta)
        out.append(Defect(name, ray, lattice, model, kind, dini_kind))

    reflected('outgoing energy', 'EnergyViolation', [xi_in, 1.01 * xi_out])
    reflected('incoming energy', 'EnergyViolation', [0.9 * xi_in, xi_out])
    reflected('both energies', 'EnergyViolation', [1.2 * xi_in, 1.2 * xi_out])
    reflected('small jump', 'ConservationViolation', [xi_in, 0.601 * e + np.sqrt(1.0 - 0.601 ** 2) * n])
    reflected('rotated outgoing', 'ConservationViolation', [xi_in, 0.8 * e + 0.6 * n])
    reflected('reversed outgoing', 'MonotonicityViolation', [xi_in, -xi_out])
    reflected('backscattered', 'MonotonicityViolation', [xi_in, -0.6 * e + 0.8 * n])
    reflected('off the line', 'ClusterViolation', [xi_in, xi_out], point=e + 0.3 * n, dini_kind='DiniViolation')
    other = br.BreakString((cl.FREE, cl.FREE), (FREE_LEG, FREE_LEG), (lattice.find_label('1-3'),))
    reflected('wrong break cluster', 'ClusterViolation', [xi_in, xi_out], s=other, dini_kind='DiniViolation')
    own = br.BreakString((cl.FREE, cl.FREE), (FREE_LEG, FREE_LEG), (cl.FREE,))
    reflected('break on its own plane', 'StringViolation', [xi_in, xi_out], s=own)
    foreign = br.BreakString((cl.FREE, cl.FREE), (FREE_LEG, (line, 0)), (line,))
    reflected('foreign channel', 'StringViolation', [xi_in, np.sqrt(1.5) * xi_out], s=foreign,
              lattice=lattice_b, model=model_b)
    bound = br.BreakString((line, cl.FREE), ((line, 0), FREE_LEG), (line,))
    reflected('leg off its plane', 'ClusterViolation', [np.sqrt(1.5) * xi_in, xi_out], s=bound,
              lattice=lattice_b, model=model_b)
    reflected('tangent outgoing', 'TangencyViolation', [xi_in, e])
    reflected('tangent incoming', 'TangencyViolation', [-e, xi_out])
    reflected('fast incoming', 'EnergyViolation', [1.5 * xi_in, xi_out], dini_kind='DiniViolation')

    lattice_4, model_4, plane = four_body()
    corner = lattice_4.meet(plane, lattice_4.find_label('3-4'))
    e4 = lattice_4.basis(corner)[:, 0]
    n4 = lattice_4.split_coordinates(corner, plane).relative[:, 0]
    s4 = br.BreakString((plane, cl.FREE), ((plane, 0), FREE_LEG), (corner,))
    ray = br.assemble_ray(lattice_4, model_4, 1.0, s4, [e4], [e4 - np.sqrt(0.5) * n4, e4])
    out.append(Defect('tangent in four bodies', ray, lattice_4, model_4, 'TangencyViolation'))

    ray = br.assemble_ray(lattice, model, 1.0, string, [e], [xi_in, xi_out])
    zero = br.bound_constants(lattice, model)._replace(max_breaks=0.0)
    out.append(Defect('one break too many', ray, lattice, model, 'BreakBoundViolation', constants=zero))

    twice, points, momenta = twice_broken(lattice, model)
    s2 = twice.string
    one = zero._replace(max_breaks=1.0)
    out.append(Defect('two breaks too many', twice, lattice, model, 'BreakBoundViolation', constants=one))
    shifted = [points[0], points[1] + 0.05 * lattice.basis(s2.breaks[1])[:, 0]]
    out.append(Defect('shifted break', br.assemble_ray(lattice, model, 1.0, s2, shifted, momenta),
                      lattice, model, 'ContinuityViolation'))
    c, s = np.cos(0.01), np.sin(0.01)
    turned = [momenta[0], np.array([[c, -s], [s, c]]) @ momenta[1], momenta[2]]
    out.append(Defect('turned middle leg', br.assemble_ray(lattice, model, 1.0, s2, points, turned),
                      lattice, model, 'ContinuityViolation'))
    backwards = [momenta[0], -momenta[1], momenta[2]]
    out.append(Defect('middle leg backwards', br.assemble_ray(lattice, model, 1.0, s2, points, backwards),
                      lattice, model, 'MonotonicityViolation'))
    return out


class TestDefects:
    defects = injected_defects()

    def test_suite(self):
        np.testing.assert_(len(self.defects) >= 20)
        kinds = {d.kind for d in self.defects} | {d.dini_kind for d in self.defects if d.dini_kind}
        np.testing.assert_equal(sorted(kinds), ['BreakBoundViolation', 'ClusterViolation', 'ConservationViolation',
                                                'ContinuityViolation', 'DiniViolation', 'EnergyViolation',
                                                'MonotonicityViolation', 'StringViolation', 'TangencyViolation'])

    def test_structural(self):
        for d in self.defects:
            report = br.verify_ray(d.ray, d.lattice, d.model, constants=d.constants)
            np.testing.assert_(not report.passed, d.name)
            np.testing.assert_(d.kind in report.kinds(), '%s: %r' % (d.name, report.kinds()))

    def test_dini(self):
        for d in self.defects:
            report = br.verify_ray(d.ray, d.lattice, d.model, mode='dini', constants=d.constants)
            np.testing.assert_(not report.passed, d.name)
            for kind in {d.kind, d.dini_kind or d.kind}:
                np.testing.assert_(kind in report.kinds(), '%s: %r' % (d.name, report.kinds()))

    def test_built_rays_pass(self):
        lattice, model, _ = three_body()
        for ray in br.random_rays(lattice, model, 1.0, 20, seed=3):
            report = br.verify_ray(ray, lattice, model, mode='dini')
            np.testing.assert_(report.passed, report.kinds())


class TestReverse:

    def test_reflection(self):
        lattice, model, line = three_body()
        string, e, n, xi_in, xi_out = reflection(lattice, line)
        ray = br.build_ray(lattice, model, 1.0, string, [e], xi_in, xi_out)
        back = br.reverse_ray(ray, lattice, model)

        np.testing.assert_equal(back.string, string.reversed())
        np.testing.assert_allclose(back.legs[0].xi, -xi_out)
        np.testing.assert_allclose(br.length_of(back), br.length_of(ray))
        np.testing.assert_(br.verify_ray(back, lattice, model).passed)


class TestBounds:

    def test_arc_constant(self):
        np.testing.assert_allclose(br.arc_constant(), np.pi / np.sqrt(2), rtol=1e-9)

    def test_local_length(self):
        lattice, _, _ = three_body()
        np.testing.assert_allclose(br.local_length(lattice), np.pi / 12, atol=1e-6)

        axes = [cl.Subspace(np.array([[1.0], [0.0]])), cl.Subspace(np.array([[0.0], [1.0]]))]
        np.testing.assert_allclose(br.local_length(cl.build_lattice(axes, 2)), np.pi / 8, atol=1e-6)

        np.testing.assert_equal(br.local_length(cl.build_lattice([], 3)), np.pi)

    def test_three_body_constants(self):
        lattice, model, _ = three_body()
        constants = br.bound_constants(lattice, model)
        np.testing.assert_equal(constants.n_body, 3)
        np.testing.assert_equal(constants.c1, 1.0)
        np.testing.assert_allclose(constants.max_breaks, 39.0, rtol=1e-5)

        continuous = ps.SpectralModel(lattice, model.channels, threshold_intervals=[(-2.0, -1.5)])
        with np.testing.assert_raises(NotDiscrete):
            br.bound_constants(lattice, continuous)

    def test_four_body_constants(self):
        lattice, model, _ = four_body()
        constants = br.bound_constants(lattice, model)
        np.testing.assert_equal(constants.n_body, 4)
        np.testing.assert_allclose(max(constants.subsystem_max_breaks.values()), 39.0, rtol=1e-5)
        np.testing.assert_(constants.max_breaks > 39.0)

    def test_not_discrete_bound(self):
        lattice, model, _ = three_body()
        constants = br.bound_constants(lattice, model)
        n = br.break_bound_not_discrete(constants, 0.5, 1, 1.0, -2.0)
        a = 2.0 * (1.0 + np.pi / constants.l)
        b = 2.0 * 2.0 * constants.c0 * 0.5 ** -0.25 * 3.0 ** 0.25 / constants.l
        np.testing.assert_allclose(n, a + b * np.sqrt(n), rtol=1e-12)

        with np.testing.assert_raises(ValueError):
            br.break_bound_not_discrete(constants, 0.0, 1, 1.0, -2.0)

    def test_tau_arclength(self):
        lattice, model, _ = three_body()
        for ray in br.random_rays(lattice, model, 1.0, 10, seed=2):
            bound = br.tau_arclength_bound(ray)
            np.testing.assert_allclose(bound.length, np.pi, rtol=1e-9)
            np.testing.assert_allclose(bound.delta_tau, 2.0, rtol=1e-9)
            np.testing.assert_(bound.length <= bound.bound + 1e-12)

    def test_tau_arclength_random(self):
        c0 = br.arc_constant()
        count = 0
        for (lattice, model, _), seed in ((three_body(), 4), (four_body(), 5)):
            for ray in br.random_rays(lattice, model, 1.0, 500, seed=seed):
                bound = br.tau_arclength_bound(ray, c0)
                np.testing.assert_(bound.length <= bound.bound + 1e-9)
                count += 1
        np.testing.assert_equal(count, 1000)

    def test_three_line_sweep(self):
        lattice = cl.build_lattice(cl.particle_generators(3), 2)
        lines = [lattice.find_label(label) for label in ('1-2', '1-3', '2-3')]
        model = ps.SpectralModel(lattice, [FREE_CHANNEL] + [ps.Channel(a, 0, -0.5) for a in lines])
        constants = br.bound_constants(lattice, model)
        np.testing.assert_equal(constants.c1, 2)

        rays = br.sweep_rays(lattice, model, 1.0, max_breaks=4)
        np.testing.assert_(len(rays) > 0)
        for ray in rays:
            np.testing.assert_(max(br.length_by_energy(ray).values()) <= np.pi + 1e-9)
            np.testing.assert_(br.length_of(ray) <= constants.c1 * np.pi + 1e-9)
            np.testing.assert_(ray.n_breaks <= constants.max_breaks)


class TestImages:

    def setup_method(self):
        self.lattice = cl.build_lattice([], 2)
        self.model = ps.SpectralModel(self.lattice, [FREE_CHANNEL])

    def test_forward_arc(self):
        point = ps.CompressedPoint(cl.FREE, np.array([0.0, 1.0]), np.array([1.0, 0.0]))
        image = br.forward_image(self.lattice, self.model, 1.0, [point])
        closures = [q for q in image if q.label == 'closure']
        np.testing.assert_equal(len(closures), 1)
        np.testing.assert_allclose(closures[0].y, [1.0, 0.0], atol=1e-6)
        for q in image:
            np.testing.assert_(q.y.min() >= -1e-6)

    def test_stationary_point(self):
        point = ps.CompressedPoint(cl.FREE, np.array([1.0, 0.0]), np.array([1.0, 0.0]))
        image = br.forward_image(self.lattice, self.model, 1.0, [point])
        np.testing.assert_equal(sorted(q.label for q in image), ['start', 'stationary'])
        for q in image:
            np.testing.assert_allclose(q.y, [1.0, 0.0])

    def test_backward_arc(self):
        point = ps.CompressedPoint(cl.FREE, np.array([0.0, 1.0]), np.array([1.0, 0.0]))
        image = br.backward_image(self.lattice, self.model, 1.0, [point])
        closure = [q for q in image if q.label == 'closure'][0]
        np.testing.assert_allclose(closure.y, [-1.0, 0.0], atol=1e-6)
        np.testing.assert_allclose(closure.xi, [1.0, 0.0], atol=1e-6)

    def test_reflected_lifts(self):
        lattice, model, line = three_body()
        e = lattice.basis(line)[:, 0]
        n = lattice.complement(line)[:, 0]
        point = ps.CompressedPoint(line, e, 0.6 * e)
        closures = [q for q in br.forward_image(lattice, model, 1.0, [point]) if q.label == 'closure']
        for target in (0.6 * e + 0.8 * n, 0.6 * e - 0.8 * n):
            np.testing.assert_(any(np.allclose(q.y, target, atol=1e-5) for q in closures))

    def test_resolution_warning(self):
        point = ps.CompressedPoint(cl.FREE, np.array([0.0, 1.0]), np.array([1.0, 0.0]))
        with np.testing.assert_warns(ResolutionWarning):
            br.forward_image(self.lattice, self.model, 1.0, [point], grid_step=1e-3)

    def test_starts_at_the_set(self):
        point = ps.CompressedPoint(cl.FREE, np.array([0.0, 1.0]), np.array([1.0, 0.0]))
        with warnings.catch_warnings():
            warnings.simplefilter('error', ResolutionWarning)
            image = br.forward_image(self.lattice, self.model, 1.0, [point], grid_step=1e-3, eps=1e-2)
        starts = [q for q in image if q.label == 'start']
        np.testing.assert_equal(len(starts), 1)
        np.testing.assert_allclose(starts[0].y, point.y)
        np.testing.assert_allclose(starts[0].xi, point.xi)


class TestRelations:

    def test_two_body(self):
        lattice = cl.build_lattice([], 3)
        model = ps.SpectralModel(lattice, [FREE_CHANNEL])
        entries = br.channel_relation(lattice, model, 1.0, FREE_CHANNEL, FREE_CHANNEL, n_samples=500, seed=4)
        np.testing.assert_equal(len(entries), 500)
        for entry in entries:
            y_in, p = entry.zeta
            y_out, q = entry.zeta_out
            np.testing.assert_allclose(hf.angle(y_in, y_out), np.pi, atol=1e-9)
            np.testing.assert_allclose(y_out, -y_in, atol=1e-9)
            np.testing.assert_allclose(q, -p, atol=1e-9)

    def test_three_body(self):
        lattice, model, _ = three_body()
        entries = br.forward_relation(lattice, model, 1.0, FREE_CHANNEL, n_samples=5, max_breaks=3, seed=1)
        np.testing.assert_equal(len(entries), 40)
        for entry in entries:
            np.testing.assert_allclose(br.length_of(entry.ray), np.pi, rtol=1e-9)
            np.testing.assert_allclose(entry.terminal.tau, -1.0)

    def test_line_channel_is_empty(self):
        lattice, model, line = three_body(line_energy=-0.5)
        np.testing.assert_equal(br.forward_relation(lattice, model, 1.0, model.channel(line, 0)), [])

    def test_error_handling(self):
        lattice, model, line = three_body(line_energy=-0.5)
        with np.testing.assert_raises(ValueError):
            br.forward_relation(lattice, model, -0.5, FREE_CHANNEL)
        with np.testing.assert_raises(ChannelClosed):
            br.forward_relation(lattice, model, -0.2, FREE_CHANNEL)


class TestSubsystemReduction:

    def test_triple_collision(self):
        lattice = cl.build_lattice(cl.particle_generators(4), 3)
        model = ps.SpectralModel(lattice, [FREE_CHANNEL])
        plane = lattice.find_label('1-2')
        triple = lattice.meet(plane, lattice.find_label('2-3'))
        e = lattice.basis(triple)[:, 0]
        inner = lattice.split_coordinates(triple, plane).relative[:, 0]
        normal = lattice.complement(plane)[:, 0]

        w = 0.3 * e + inner
        xi_in = 0.5 * e + np.sqrt(0.75) * (0.6 * inner - 0.8 * normal)
        xi_out = 0.5 * e + np.sqrt(0.75) * (0.6 * inner + 0.8 * normal)
        string = br.BreakString((cl.FREE, cl.FREE), (FREE_LEG, FREE_LEG), (plane,))
        ray = br.build_ray(lattice, model, 1.0, string, [w], xi_in, xi_out)
        np.testing.assert_(br.verify_ray(ray, lattice, model).passed)

        sub = br.reduce_to_subsystem(ray, lattice, model, triple)
        sub_lattice, sub_model, _ = ps.subsystem_model(model, triple)
        np.testing.assert_(sub_lattice.is_three_body)
        np.testing.assert_allclose(sub.lam, 0.75)
        np.testing.assert_equal(sub_lattice.label(sub.string.breaks[0]), '1-2')
        np.testing.assert_allclose(np.linalg.norm(sub.breaks[0].w), 1.0)
        np.testing.assert_allclose(br.length_of(sub), np.pi, rtol=1e-9)
        np.testing.assert_(br.verify_ray(sub, sub_lattice, sub_model).passed)

    def test_error_handling(self):
        lattice, model, line = three_body()
        string, e, n, xi_in, xi_out = reflection(lattice, line)
        ray = br.build_ray(lattice, model, 1.0, string, [e], xi_in, xi_out)
        with np.testing.assert_raises(ValueError):
            br.reduce_to_subsystem(ray, lattice, model, cl.FREE)
        with np.testing.assert_raises(ValueError):
            br.reduce_to_subsystem(ray, lattice, model, lattice.find_label('1-3'))
