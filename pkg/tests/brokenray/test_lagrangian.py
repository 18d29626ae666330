import dataclasses

import numpy as np
from brokenray import broken_rays as br
from brokenray import cluster_lattice as cl
from brokenray import lagrangian as lg
from brokenray import phase_space as ps
from brokenray.exceptions import ChannelClosed, DegenerateSegment, RankDeficient, TransversalityFailure

FREE_CHANNEL = ps.Channel(cl.FREE, 0, 0.0)
FREE_LEG = (cl.FREE, 0)


def three_body(line_energy=None):
    lattice = cl.build_lattice(cl.particle_generators(3), 2)
    line = lattice.find_label('1-2')
    channels = [FREE_CHANNEL]
    if line_energy is not None:
        channels.append(ps.Channel(line, 0, line_energy))
    return lattice, ps.SpectralModel(lattice, channels), line


def random_relation(lattice, rng):
    # random c, d below a random a, with points off the origin
    clusters = [a for a in range(len(lattice)) if a != cl.ORIGIN]
    a = clusters[int(rng.integers(len(clusters)))]
    below = [c for c in clusters if lattice.leq(a, c)]
    c = below[int(rng.integers(len(below)))]
    d = below[int(rng.integers(len(below)))]
    w = lattice.basis(c) @ rng.normal(size=lattice.dim(c))
    w_prime = lattice.basis(d) @ rng.normal(size=lattice.dim(d))
    lam = rng.uniform(0.5, 3.0)
    return lg.elementary_relation(lattice, c, FREE_CHANNEL, a, d, w, w_prime, lam)


def ambient(basis_out, block, basis_in):
    return basis_out @ block @ basis_in.T


class TestElementaryRelation:

    def test_hand_example(self):
        lattice = cl.build_lattice([], 2)
        rel = lg.elementary_relation(lattice, cl.FREE, FREE_CHANNEL, cl.FREE, cl.FREE, [1.0, 0.0], [-1.0, 0.0], 1.0)
        np.testing.assert_allclose(ambient(rel.basis_c, rel.B, rel.basis_c), np.diag([0.0, 0.5]), atol=1e-15)
        np.testing.assert_allclose(ambient(rel.basis_d, rel.B_prime, rel.basis_d), np.diag([0.0, -0.5]),
                                   atol=1e-15)
        np.testing.assert_allclose(rel.xi_tilde, [1.0, 0.0])

    def test_finite_differences(self):
        lattice = cl.build_lattice(cl.particle_generators(4), 3)
        rng = np.random.default_rng(11)
        for _ in range(200):
            rel = random_relation(lattice, rng)
            fd = lg.finite_difference_blocks(rel)
            scale = rel.scale
            np.testing.assert_allclose(fd.B, rel.B, atol=1e-6 * scale)
            np.testing.assert_allclose(fd.B_prime, rel.B_prime, atol=1e-6 * scale)
            np.testing.assert_allclose(fd.C, rel.C, atol=1e-6 * scale)
            np.testing.assert_allclose(fd.C_prime, rel.C_prime, atol=1e-6 * scale)

    def test_signs(self):
        lattice = cl.build_lattice(cl.particle_generators(4), 3)
        rng = np.random.default_rng(3)
        for _ in range(100):
            rel = random_relation(lattice, rng)
            scale = rel.scale
            np.testing.assert_allclose(rel.B, rel.B.T, atol=1e-14 * scale)
            np.testing.assert_allclose(rel.B_prime, rel.B_prime.T, atol=1e-14 * scale)
            np.testing.assert_(np.linalg.eigvalsh(rel.B)[0] >= -1e-12 * scale)
            np.testing.assert_(np.linalg.eigvalsh(rel.B_prime)[-1] <= 1e-12 * scale)

            w_prime_in_c = lattice.subspace(rel.c).residual(rel.w_prime) <= 1e-9
            np.testing.assert_equal(np.linalg.eigvalsh(rel.B)[0] > 1e-10 * scale, not w_prime_in_c)

    def test_null_space(self):
        # w' in X_c: B annihilates the leg momentum
        lattice, model, line = three_body()
        e = lattice.basis(line)[:, 0]
        rel = lg.elementary_relation(lattice, line, FREE_CHANNEL, line, line, 2 * e, e, 1.0)
        np.testing.assert_allclose(rel.B @ (rel.basis_c.T @ rel.xi), 0.0, atol=1e-15)

        lattice = cl.build_lattice(cl.particle_generators(4), 3)
        plane = lattice.find_label('1-2')
        q = lattice.basis(plane)
        rel = lg.elementary_relation(lattice, plane, FREE_CHANNEL, cl.FREE, plane, q @ [1.0, 0.5], q @ [-0.3, 0.2],
                                     2.0)
        eig, vec = np.linalg.eigh(rel.B)
        np.testing.assert_allclose(eig[0], 0.0, atol=1e-14)
        np.testing.assert_(eig[1] > 1e-3)
        xi = q.T @ rel.xi
        np.testing.assert_allclose(abs(vec[:, 0] @ xi), np.linalg.norm(xi))

    def test_conic_scaling(self):
        lattice = cl.build_lattice(cl.particle_generators(4), 3)
        rng = np.random.default_rng(8)
        for _ in range(20):
            rel = random_relation(lattice, rng)
            scaled = lg.elementary_relation(lattice, rel.c, rel.channel, rel.a, rel.d, 3 * rel.w, 3 * rel.w_prime,
                                            rel.lam)
            np.testing.assert_allclose(scaled.B, rel.B / 3, atol=1e-13 * rel.scale)
            np.testing.assert_allclose(scaled.B_prime, rel.B_prime / 3, atol=1e-13 * rel.scale)
            np.testing.assert_allclose(scaled.C, rel.C / 3, atol=1e-13 * rel.scale)

    def test_error_handling(self):
        lattice, model, line = three_body()
        e = lattice.basis(line)[:, 0]
        n = lattice.complement(line)[:, 0]
        with np.testing.assert_raises(DegenerateSegment):
            lg.elementary_relation(lattice, line, FREE_CHANNEL, cl.FREE, line, e, e, 1.0)
        with np.testing.assert_raises(ChannelClosed):
            lg.elementary_relation(lattice, line, FREE_CHANNEL, cl.FREE, cl.FREE, e, n, -1.0)
        with np.testing.assert_raises(ValueError):
            lg.elementary_relation(lattice, line, FREE_CHANNEL, cl.FREE, cl.FREE, n, e, 1.0)
        with np.testing.assert_raises(ValueError):
            lg.elementary_relation(lattice, cl.FREE, FREE_CHANNEL, line, line, n, e, 1.0)


class TestCompose:

    def test_random_compositions(self):
        lattice = cl.build_lattice(cl.particle_generators(4), 3)
        rng = np.random.default_rng(21)
        for _ in range(200):
            rel = random_relation(lattice, rng)
            k = rel.basis_d.shape[1]
            g = rng.normal(size=(k, k))
            seed = lg.GraphLagrangian(rel.d, rel.w_prime, g @ g.T + 0.1 * np.eye(k), rel.basis_d)
            out = lg.compose(seed, rel)

            np.testing.assert_equal(out.cluster, rel.c)
            np.testing.assert_allclose(out.A, out.A.T, atol=0.0)
            np.testing.assert_(out.is_psd())
            if lattice.subspace(rel.c).residual(rel.w_prime) > 1e-6:
                np.testing.assert_(out.is_pd())
            np.testing.assert_(lg.lagrangian_certificate(lg.graph_tangent_space(out)).is_lagrangian)

    def test_plane_wave(self):
        lattice, model, line = three_body()
        e = lattice.basis(line)[:, 0]
        w = np.array([0.3, 1.1])
        rel = lg.elementary_relation(lattice, cl.FREE, FREE_CHANNEL, cl.FREE, line, w, e, 1.0)
        out = lg.compose(lg.GraphLagrangian(line, e, np.zeros((1, 1)), rel.basis_d), rel)
        expected = rel.B - rel.C.T @ np.linalg.solve(-rel.B_prime, rel.C)
        np.testing.assert_allclose(out.A, expected, atol=1e-14)
        np.testing.assert_(out.is_psd())

    def test_decoupled(self):
        lattice, model, line = three_body()
        e = lattice.basis(line)[:, 0]
        rel = lg.elementary_relation(lattice, cl.FREE, FREE_CHANNEL, cl.FREE, line, [0.3, 1.1], e, 1.0)
        rel = dataclasses.replace(rel, C=np.zeros_like(rel.C))
        out = lg.compose(lg.GraphLagrangian(line, e, np.eye(1), rel.basis_d), rel)
        np.testing.assert_allclose(out.A, rel.B)

    def test_transversality(self):
        lattice = cl.build_lattice([], 2)
        rel = lg.elementary_relation(lattice, cl.FREE, FREE_CHANNEL, cl.FREE, cl.FREE, [1.0, 0.0], [-1.0, 0.0], 1.0)
        q = rel.basis_d
        along = q.T @ np.diag([1.0, 0.0]) @ q

        lg.compose(lg.GraphLagrangian(cl.FREE, [-1.0, 0.0], 1e-3 * along, q), rel)
        try:
            lg.compose(lg.GraphLagrangian(cl.FREE, [-1.0, 0.0], 1e-13 * along, q), rel, position=4)
        except TransversalityFailure as err:
            np.testing.assert_allclose(err.eigenvalue, 0.0, atol=1e-12)
            np.testing.assert_equal(err.position, 4)
        else:
            raise AssertionError('TransversalityFailure not raised')

    def test_error_handling(self):
        lattice, model, line = three_body()
        e = lattice.basis(line)[:, 0]
        rel = lg.elementary_relation(lattice, cl.FREE, FREE_CHANNEL, cl.FREE, line, [0.3, 1.1], e, 1.0)
        with np.testing.assert_raises(ValueError):
            lg.compose(lg.GraphLagrangian(cl.FREE, e, np.eye(2), np.eye(2)), rel)
        with np.testing.assert_raises(ValueError):
            lg.compose(lg.GraphLagrangian(line, 2 * e, np.eye(1), rel.basis_d), rel)
        with np.testing.assert_raises(ValueError):
            lg.compose(lg.GraphLagrangian(line, e, -np.eye(1), rel.basis_d), rel)
        with np.testing.assert_raises(ValueError):
            lg.GraphLagrangian(cl.FREE, e, [[1.0, 2.0], [0.0, 1.0]], np.eye(2))


class TestRadialLagrangian:

    def test_hand_example(self):
        lag = lg.radial_lagrangian([0.0, 0.0, 2.0], 2.0, 1.0)
        np.testing.assert_allclose(lag.A, np.diag([0.5, 0.5, 0.0]))
        np.testing.assert_equal(lag.A @ [0.0, 0.0, 2.0], [0.0, 0.0, 0.0])

    def test_spectrum(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            w = rng.normal(size=4)
            lam, sigma = 1.0 + rng.uniform(), -rng.uniform()
            lag = lg.radial_lagrangian(w, lam, sigma)
            np.testing.assert_allclose(lag.A @ w, 0.0, atol=1e-14 * np.linalg.norm(w))
            eig = np.linalg.eigvalsh(lag.A)
            np.testing.assert_allclose(eig[1:], np.sqrt(lam - sigma) / np.linalg.norm(w), rtol=1e-12)
            np.testing.assert_(lag.is_psd() and not lag.is_pd())

    def test_on_a_plane(self):
        lattice = cl.build_lattice(cl.particle_generators(4), 3)
        plane = lattice.find_label('1-2')
        w = lattice.basis(plane) @ [0.6, 0.8]
        lag = lg.radial_lagrangian(w, 1.0, 0.0, lattice=lattice, cluster=plane)
        np.testing.assert_equal(lag.A.shape, (2, 2))
        np.testing.assert_allclose(lag.ambient() @ w, 0.0, atol=1e-15)

    def test_error_handling(self):
        with np.testing.assert_raises(ChannelClosed):
            lg.radial_lagrangian([1.0, 0.0], 1.0, 1.0)
        with np.testing.assert_raises(ValueError):
            lg.radial_lagrangian([0.0, 0.0], 1.0, 0.0)
        lattice, model, line = three_body()
        with np.testing.assert_raises(ValueError):
            lg.radial_lagrangian(lattice.complement(line)[:, 0], 1.0, 0.0, lattice=lattice, cluster=line)


class TestCertificate:

    def test_relation_tangent_space(self):
        lattice = cl.build_lattice(cl.particle_generators(4), 3)
        rng = np.random.default_rng(5)
        for _ in range(100):
            rel = random_relation(lattice, rng)
            dims = (rel.basis_c.shape[1], rel.basis_d.shape[1])
            cert = lg.lagrangian_certificate(lg.relation_tangent_space(rel), dims=dims)
            np.testing.assert_(cert.is_lagrangian)
            np.testing.assert_equal(cert.rank, sum(dims))

    def test_wrong_off_diagonal_sign(self):
        lattice, model, line = three_body()
        e = lattice.basis(line)[:, 0]
        rel = lg.elementary_relation(lattice, cl.FREE, FREE_CHANNEL, cl.FREE, line, [0.3, 1.1], e, 1.0)
        v = lg.relation_tangent_space(rel)
        v[2:4, 2:] = rel.C.T
        np.testing.assert_(not lg.lagrangian_certificate(v, dims=(2, 1)).is_lagrangian)

    def test_non_symmetric_graph(self):
        cert = lg.lagrangian_certificate(lg.graph_tangent_space(np.array([[1.0, 2.0], [0.0, 1.0]])))
        np.testing.assert_(not cert.is_lagrangian)
        np.testing.assert_allclose(cert.residual, 2.0)

        cert = lg.lagrangian_certificate(lg.graph_tangent_space(np.array([[1.0, 2.0], [2.0, 1.0]])))
        np.testing.assert_(cert.is_lagrangian)
        np.testing.assert_equal(cert.residual, 0.0)

    def test_error_handling(self):
        with np.testing.assert_raises(RankDeficient):
            lg.lagrangian_certificate(np.zeros((4, 2)))
        with np.testing.assert_raises(ValueError):
            lg.lagrangian_certificate(np.zeros((3, 1)))
        with np.testing.assert_raises(ValueError):
            lg.lagrangian_certificate(np.eye(4), dims=(2, 1))


class TestChain:

    def test_unbroken_returns_seed(self):
        lattice = cl.build_lattice([], 2)
        model = ps.SpectralModel(lattice, [FREE_CHANNEL])
        string = br.BreakString((cl.FREE,), (FREE_LEG,))
        points = [np.array([0.0, 1.0]), np.array([1.0, 1.0])]
        seed = lg.GraphLagrangian(cl.FREE, points[1], np.eye(2), lattice.basis(cl.FREE))
        np.testing.assert_(lg.compose_chain(lattice, model, 1.0, string, points, seed=seed).lagrangian is seed)

    def test_double_reflection(self):
        lattice, model, _ = three_body()
        rng = np.random.default_rng(5)
        y, p = br.sample_incoming(lattice, cl.FREE, rng)
        rays = br.branch_rays(lattice, model, 1.0, p, -y, FREE_CHANNEL, cluster=cl.FREE, max_breaks=2)
        doubles = [ray for ray in rays if ray.n_breaks == 2]
        np.testing.assert_(doubles)

        for ray in doubles:
            result = lg.ray_lagrangian(ray, lattice, model, source_u=1.0)
            np.testing.assert_(result.passed)
            np.testing.assert_equal(len(result.steps), 3)
            for step in result.steps[:-1]:
                np.testing.assert_(step.pd_expected and step.pd)

            final = result.lagrangian
            xi = final.basis.T @ ray.legs[-1].xi
            np.testing.assert_(final.is_psd() and not final.is_pd())
            np.testing.assert_allclose(final.A @ xi, 0.0, atol=1e-12 * np.abs(final.A).max())

    def test_conic_scaling(self):
        lattice, model, line = three_body()
        e = lattice.basis(line)[:, 0]
        n = lattice.complement(line)[:, 0]
        ray = br.build_ray(lattice, model, 1.0, br.BreakString((cl.FREE, cl.FREE), (FREE_LEG, FREE_LEG), (line,)),
                           [e], 0.6 * e - 0.8 * n, 0.6 * e + 0.8 * n)
        points = lg.ray_chain_points(ray)
        base = lg.compose_chain(lattice, model, 1.0, ray.string, points).lagrangian
        scaled = lg.compose_chain(lattice, model, 1.0, ray.string, [2.5 * w for w in points]).lagrangian
        np.testing.assert_allclose(scaled.A, base.A / 2.5, atol=1e-14)

    def test_seeds(self):
        lattice, model, line = three_body()
        e = lattice.basis(line)[:, 0]
        n = lattice.complement(line)[:, 0]
        string = br.BreakString((cl.FREE, cl.FREE), (FREE_LEG, FREE_LEG), (line,))
        points = [e - (0.6 * e - 0.8 * n), e, e + 0.6 * e + 0.8 * n]
        for seed in (None, 'point_source', 'plane_wave', 'identity'):
            result = lg.compose_chain(lattice, model, 1.0, string, points, seed=seed)
            np.testing.assert_(result.passed)
            np.testing.assert_(result.lagrangian.is_psd())

        plane_wave = lg.compose_chain(lattice, model, 1.0, string, points, seed='plane_wave')
        np.testing.assert_allclose(plane_wave.steps[0].eigmin, 0.0)
        np.testing.assert_(not plane_wave.steps[0].pd_expected)

    def test_tangential_leg_needs_a_definite_seed(self):
        lattice, model, line = three_body(line_energy=-0.5)
        e = lattice.basis(line)[:, 0]
        string = br.BreakString((cl.FREE, line), (FREE_LEG, (line, 0)), (line,))
        points = [np.array([0.2, 1.3]), e, 2 * e]

        result = lg.compose_chain(lattice, model, 1.0, string, points)
        np.testing.assert_allclose(result.lagrangian.A, 0.0, atol=1e-14)
        try:
            lg.compose_chain(lattice, model, 1.0, string, points, seed='plane_wave')
        except TransversalityFailure as err:
            np.testing.assert_equal(err.position, 2)
        else:
            raise AssertionError('TransversalityFailure not raised')

    def test_error_handling(self):
        lattice, model, line = three_body()
        e = lattice.basis(line)[:, 0]
        n = lattice.complement(line)[:, 0]
        string = br.BreakString((cl.FREE, cl.FREE), (FREE_LEG, FREE_LEG), (line,))
        points = [e + n, e, e - n + e]
        with np.testing.assert_raises(ValueError):
            lg.compose_chain(lattice, model, 1.0, string, points[:2])
        with np.testing.assert_raises(ValueError):
            lg.compose_chain(lattice, model, 1.0, string, points, seed='spherical')
        with np.testing.assert_raises(ValueError):
            lg.compose_chain(lattice, model, 1.0, string, points,
                             seed=lg.GraphLagrangian(cl.FREE, e, np.eye(2), np.eye(2)))
        with np.testing.assert_raises(ValueError):
            lg.compose_chain(lattice, model, 1.0, br.BreakString((line,), ((line, 0),)), [e, 2 * e])


class TestRayChainPoints:

    def test_points(self):
        lattice, model, line = three_body()
        e = lattice.basis(line)[:, 0]
        n = lattice.complement(line)[:, 0]
        string = br.BreakString((cl.FREE, cl.FREE), (FREE_LEG, FREE_LEG), (line,))
        ray = br.build_ray(lattice, model, 1.0, string, [e], 0.6 * e - 0.8 * n, 0.6 * e + 0.8 * n)
        points = lg.ray_chain_points(ray, source_u=2.0, final_u=0.5)
        np.testing.assert_allclose(points[0], e - 2.0 * (0.6 * e - 0.8 * n))
        np.testing.assert_allclose(points[1], e)
        np.testing.assert_allclose(points[2], e + 0.5 * (0.6 * e + 0.8 * n))

        unbroken = br.build_ray(lattice, model, 1.0, br.BreakString((cl.FREE,), (FREE_LEG,)), [], n, n, base_point=e)
        np.testing.assert_allclose(lg.ray_chain_points(unbroken), [e, e + n])

        with np.testing.assert_raises(ValueError):
            lg.ray_chain_points(ray, final_u=0.0)


class TestRayFamily:

    def test_three_body(self):
        lattice, model, _ = three_body()
        rng = np.random.default_rng(9)
        for k in range(20):
            y, p = br.sample_incoming(lattice, cl.FREE, rng)
            check = lg.ray_family_check(lattice, model, 1.0, p - 2 * y, -y, FREE_CHANNEL, cluster=cl.FREE,
                                        max_breaks=3, seed=k)
            np.testing.assert_equal(check.n_perturbations, 1)
            np.testing.assert_(check.residual < 1e-5)

    def test_four_body_from_a_plane(self):
        lattice = cl.build_lattice(cl.particle_generators(4), 3)
        model = ps.SpectralModel(lattice, [FREE_CHANNEL])
        plane = lattice.find_label('1-2')
        rng = np.random.default_rng(13)
        n_broken = 0
        for k in range(20):
            y, p = br.sample_incoming(lattice, plane, rng)
            check = lg.ray_family_check(lattice, model, 1.0, p - 2 * y, -y, FREE_CHANNEL, cluster=plane,
                                        max_breaks=3, seed=k)
            np.testing.assert_(check.residual < 1e-5)
            np.testing.assert_(check.chain.passed)
            n_broken += check.ray.n_breaks > 0
        np.testing.assert_(n_broken > 0)
