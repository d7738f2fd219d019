import numpy as np
import pytest
from scipy import stats

from ebmlab import diffcore as dc
from ebmlab import ebm_core as ec
from ebmlab import samplers
from ebmlab.potentials import FunctionPotential, SeqEncoder


def quadratic_model(dim=1):
    """u(x) = -||x||^2 / 2, the standard normal potential."""
    pot = FunctionPotential(lambda ctx, x: dc.mul(-0.5, dc.sum(dc.mul(x, x), axis=1)))
    return ec.EnergyModel(pot, ec.ContinuousSpace(dim))


def two_mode_model(sep=2.0):
    m1 = np.array([-sep, 0.0])
    m2 = np.array([sep, 0.0])

    def build(ctx, x):
        d1 = dc.sum(dc.mul(dc.sub(x, m1), dc.sub(x, m1)), axis=1)
        d2 = dc.sum(dc.mul(dc.sub(x, m2), dc.sub(x, m2)), axis=1)
        comps = dc.stack([dc.mul(-0.5, d1), dc.mul(-0.5, d2)], axis=1)
        return dc.logsumexp(comps, axis=1)

    return ec.EnergyModel(FunctionPotential(build), ec.ContinuousSpace(2))


class TestSgldStep:
    def test_long_chain_reproduces_gaussian_moments(self):
        model = quadratic_model(dim=1)
        rng = np.random.default_rng(2024)
        particles = rng.standard_normal((4, 1))
        kept = []
        n_steps = 100_000
        for t in range(n_steps):
            particles, _ = samplers.sgld_step(model, particles, 0.01, rng)
            if t >= n_steps // 5:
                kept.append(particles[:, 0].copy())
        pool = np.concatenate(kept)
        assert abs(pool.mean()) < 0.05
        assert abs(pool.var() - 1.0) < 0.1

    def test_vanishing_step_and_noise_leave_particles_fixed(self):
        model = quadratic_model(dim=3)
        rng = np.random.default_rng(0)
        particles = rng.standard_normal((5, 3))
        out, n_bad = samplers.sgld_step(model, particles, 1e-12, rng, noise_scale=0.0)
        assert n_bad == 0
        np.testing.assert_allclose(out, particles, atol=1e-10)

    def test_deterministic_under_fixed_seed(self):
        model = quadratic_model(dim=2)
        start = np.random.default_rng(1).standard_normal((6, 2))
        outs = []
        for _ in range(2):
            rng = np.random.default_rng(99)
            p = start.copy()
            for _ in range(50):
                p, _ = samplers.sgld_step(model, p, 0.05, rng)
            outs.append(p)
        np.testing.assert_array_equal(outs[0], outs[1])

    def test_nonfinite_gradient_triggers_reinit(self):
        # a particle that already diverged to inf yields a non-finite gradient
        model = quadratic_model(dim=2)
        rng = np.random.default_rng(3)
        particles = np.array([[np.inf, 0.0], [0.1, 0.1]])
        with np.errstate(invalid="ignore", over="ignore"):
            out, n_bad = samplers.sgld_step(model, particles, 0.01, rng)
        assert n_bad == 1
        assert np.all(np.isfinite(out))

    def test_rejects_nonpositive_step(self):
        model = quadratic_model()
        with pytest.raises(ValueError, match="step"):
            samplers.sgld_step(model, np.zeros((1, 1)), 0.0, np.random.default_rng(0))


class TestSampleBatch:
    def test_full_refresh_no_steps_returns_generator_output(self):
        model = quadratic_model(dim=2)
        gen = samplers.AuxGenerator(2, 2, rng=np.random.default_rng(7))
        chain = samplers.ChainState.init(8, 2, np.random.default_rng(1),
                                         reinit_prob=1.0, steps_per_update=0)
        out = samplers.sample_batch(model, chain, gen, np.random.default_rng(55))
        replay = np.random.default_rng(55)
        replay.random(8)  # the refresh coin flips
        expected = gen.sample(replay, 8)
        np.testing.assert_array_equal(out, expected)

    def test_no_refresh_no_steps_returns_persisted_particles(self):
        model = quadratic_model(dim=2)
        chain = samplers.ChainState.init(8, 2, np.random.default_rng(2),
                                         reinit_prob=0.0, steps_per_update=0)
        before = chain.particles.copy()
        out = samplers.sample_batch(model, chain, None, np.random.default_rng(3))
        np.testing.assert_array_equal(out, before)

    def test_two_mode_coverage(self):
        model = two_mode_model(sep=2.0)
        rng = np.random.default_rng(11)
        chain = samplers.ChainState.init(64, 2, rng, step_size=0.05,
                                         steps_per_update=20, reinit_prob=0.05)
        pooled = []
        while len(pooled) * 64 < 10_000:
            pooled.append(samplers.sample_batch(model, chain, None, rng))
        xs = np.concatenate(pooled)[:10_000]
        left = (xs[:, 0] < 0).mean()
        assert left >= 0.25 and (1 - left) >= 0.25

    def test_particles_stay_finite_even_on_stiff_potential(self):
        pot = FunctionPotential(lambda ctx, x: dc.mul(-200.0, dc.sum(dc.mul(x, x), axis=1)))
        model = ec.EnergyModel(pot, ec.ContinuousSpace(2))
        rng = np.random.default_rng(13)
        chain = samplers.ChainState.init(16, 2, rng, step_size=0.5, steps_per_update=25)
        for _ in range(10):
            out = samplers.sample_batch(model, chain, None, rng)
            assert np.all(np.isfinite(out))

    def test_requires_continuous_space(self):
        enc = SeqEncoder(3, 3, rng=np.random.default_rng(0))
        model = ec.EnergyModel(enc, ec.SequenceSpace(3, 3))
        chain = samplers.ChainState.init(4, 2, np.random.default_rng(0))
        with pytest.raises(ValueError, match="continuous"):
            samplers.sample_batch(model, chain, None, np.random.default_rng(0))


class TestInclusiveGeneratorUpdate:
    def test_zero_learning_rate_is_a_no_op(self):
        gen = samplers.AuxGenerator(2, 2, rng=np.random.default_rng(5))
        before = {n: gen.store.value(n).copy() for n in gen.store.names()}
        samplers.inclusive_generator_update(gen, np.ones((4, 2)), 0.0, np.random.default_rng(1))
        for n, v in before.items():
            np.testing.assert_array_equal(gen.store.value(n), v)

    def test_collapses_to_constant_target(self):
        gen = samplers.AuxGenerator(2, 2, hidden=(16,), rng=np.random.default_rng(6))
        rng = np.random.default_rng(7)
        c = np.array([1.5, -0.5])
        samples = np.tile(c, (32, 1))
        for _ in range(400):
            samplers.inclusive_generator_update(gen, samples, 0.05, rng)
        out = gen.sample(np.random.default_rng(8), 500)
        assert np.linalg.norm(out.mean(axis=0) - c) < 0.1

    def test_objective_decreases_on_fixed_sample_set(self):
        gen = samplers.AuxGenerator(2, 2, hidden=(16,), rng=np.random.default_rng(9))
        samples = np.random.default_rng(10).normal(size=(64, 2)) + np.array([2.0, 1.0])
        rng = np.random.default_rng(11)
        losses = [samplers.inclusive_generator_update(gen, samples, 0.02, rng) for _ in range(100)]
        assert losses[-1] < losses[0]

    def test_empty_batch_rejected(self):
        gen = samplers.AuxGenerator(2, 2, rng=np.random.default_rng(0))
        with pytest.raises(ValueError, match="empty"):
            samplers.inclusive_generator_update(gen, np.zeros((0, 2)), 0.1, np.random.default_rng(0))


class TestExactDiscreteSample:
    def test_uniform_binary_frequencies(self):
        enc = SeqEncoder(2, 3, rng=np.random.default_rng(0))
        for name in enc.store.names():
            enc.store.set_value(name, np.zeros_like(enc.store.value(name)))
        model = ec.EnergyModel(enc, ec.SequenceSpace(2, 1))
        draws = samplers.exact_discrete_sample(model, np.random.default_rng(21), 10_000)
        freq0 = np.mean([s == (0,) for s in draws])
        assert abs(freq0 - 0.5) <= 0.02

    def test_chi_square_goodness_of_fit(self):
        enc = SeqEncoder(2, 3, rng=np.random.default_rng(33))
        model = ec.EnergyModel(enc, ec.SequenceSpace(2, 3))
        points, probs = ec.exact_probabilities(model)
        n = 20_000
        draws = samplers.exact_discrete_sample(model, np.random.default_rng(34), n)
        counts = np.zeros(len(points))
        index = {p: i for i, p in enumerate(points)}
        for s in draws:
            counts[index[s]] += 1
        chi2 = float((((counts - n * probs) ** 2) / (n * probs)).sum())
        crit = stats.chi2.ppf(0.99, df=len(points) - 1)
        assert chi2 < crit

    def test_total_variation_against_exact_probabilities(self):
        enc = SeqEncoder(2, 4, rng=np.random.default_rng(41))
        model = ec.EnergyModel(enc, ec.SequenceSpace(2, 3))  # |X| = 14 <= 16
        points, probs = ec.exact_probabilities(model)
        n = 100_000
        draws = samplers.exact_discrete_sample(model, np.random.default_rng(42), n)
        counts = np.zeros(len(points))
        index = {p: i for i, p in enumerate(points)}
        for s in draws:
            counts[index[s]] += 1
        tv = 0.5 * np.abs(counts / n - probs).sum()
        assert tv < 0.03

    def test_deterministic_under_fixed_seed(self):
        enc = SeqEncoder(2, 3, rng=np.random.default_rng(1))
        model = ec.EnergyModel(enc, ec.SequenceSpace(2, 2))
        a = samplers.exact_discrete_sample(model, np.random.default_rng(5), 100)
        b = samplers.exact_discrete_sample(model, np.random.default_rng(5), 100)
        assert a == b
