import numpy as np
import pytest

from ebmlab import diffcore as dc
from ebmlab import ebm_core as ec
from ebmlab import nce
from ebmlab.potentials import SeqEncoder


def binary_entropy(p):
    return -p * np.log(p) - (1 - p) * np.log(1 - p)


def central_diff_grads(loss_fn, store, h=1e-6):
    """Independent finite-difference oracle over every store coordinate."""
    out = {}
    for name in store.names():
        value = store.value(name)
        flat = value.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = loss_fn()
            flat[i] = orig - h
            f_minus = loss_fn()
            flat[i] = orig
            g[i] = (f_plus - f_minus) / (2 * h)
        out[name] = g.reshape(value.shape)
    return out


class TestNoiseFit:
    def test_single_sequence_length_distribution(self):
        lm = nce.noise_fit([(0, 1)], vocab_size=2)
        assert lm.length_probs()[1] == 1.0
        assert lm.logprob((0,)) == -np.inf  # length 1 unsupported

    def test_uniform_singleton_corpus_gives_uniform_conditionals(self):
        lm = nce.noise_fit([(0,), (1,)], vocab_size=2)
        cond = lm.conditionals()
        np.testing.assert_allclose(cond, 0.5)

    def test_training_sequences_beat_addone_uniform_baseline(self):
        corpus = [(0, 1, 1), (0, 1), (2, 1, 1), (0, 2, 1, 1), (1, 1)]
        v = 3
        lm = nce.noise_fit(corpus, vocab_size=v)
        lengths = np.bincount([len(s) for s in corpus], minlength=lm.max_len + 1)[1:]
        lp_len = np.where(lengths > 0, np.log(lengths / lengths.sum(), where=lengths > 0), -np.inf)
        for seq in corpus:
            baseline = lp_len[len(seq) - 1] + len(seq) * np.log(1.0 / v)
            assert lm.logprob(seq) >= baseline

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            nce.noise_fit([], vocab_size=2)

    def test_sampling_and_scoring_are_consistent(self):
        corpus = [(0, 1, 2, 1), (2, 2, 1), (0, 0), (1, 2, 0, 0), (2,)]
        lm = nce.noise_fit(corpus, vocab_size=3)
        rng = np.random.default_rng(17)
        n = 10_000
        lps = np.array([lm.logprob(lm.sample(rng)) for _ in range(n)])
        se = lps.std(ddof=1) / np.sqrt(n)
        assert abs((-lps.mean()) - lm.entropy()) <= 2 * se


def matched_setup(nu, seed=0, c0=1.7):
    corpus = [(0, 1), (1, 0, 1), (0, 0), (1,), (0, 1, 1)]
    noise = nce.noise_fit(corpus, vocab_size=2)
    store = dc.ParamStore()
    store.add(nce.LOG_C_NAME, np.full((), c0))
    pot = nce.FrozenScorePotential(lambda s: noise.logprob(s) - c0, store=store)
    rng = np.random.default_rng(seed)
    data = corpus
    noise_batch = noise.sample_batch(rng, nu * len(data))
    return pot, noise, data, noise_batch


class TestNceLoss:
    @pytest.mark.parametrize("nu", [1, 5])
    def test_matched_model_fixed_point_loss(self, nu):
        pot, noise, data, noise_batch = matched_setup(nu)
        loss, _ = nce.nce_loss(pot, noise, data, noise_batch, nu)
        expected = (1 + nu) * binary_entropy(1.0 / (1 + nu))
        assert loss == pytest.approx(expected, abs=1e-9)
        if nu == 1:
            assert loss == pytest.approx(2 * np.log(2.0), abs=1e-12)

    @pytest.mark.parametrize("nu", [1, 5])
    def test_matched_model_gradient_vanishes(self, nu):
        pot, noise, data, noise_batch = matched_setup(nu)
        _, grads = nce.nce_loss(pot, noise, data, noise_batch, nu)
        worst = max(np.abs(g).max() for g in grads.values())
        assert worst < 1e-6

    def test_gradients_pass_finite_differences(self):
        rng = np.random.default_rng(5)
        enc = SeqEncoder(3, 3, rng=rng)
        corpus = [tuple(rng.integers(0, 3, size=rng.integers(1, 4))) for _ in range(6)]
        noise = nce.noise_fit(corpus, vocab_size=3)
        nu = 2
        noise_batch = noise.sample_batch(rng, nu * len(corpus))
        nce.ensure_log_c(enc.store)

        def loss_fn():
            value, _ = nce.nce_loss(enc, noise, corpus, noise_batch, nu)
            return value

        _, analytic = nce.nce_loss(enc, noise, corpus, noise_batch, nu)
        fd = central_diff_grads(loss_fn, enc.store)
        for name in analytic:
            a, b = analytic[name].reshape(-1), fd[name].reshape(-1)
            rel = np.abs(a - b) / (np.abs(a) + np.abs(b) + 1e-12)
            assert rel.max() < 1e-4

    def test_batch_ratio_validated(self):
        pot, noise, data, noise_batch = matched_setup(2)
        with pytest.raises(ValueError, match="noise batch"):
            nce.nce_loss(pot, noise, data, noise_batch[:-1], 2)
        with pytest.raises(ValueError, match="nu"):
            nce.nce_loss(pot, noise, data, noise_batch, 0)

    def test_nonfinite_noise_logprob_rejected(self):
        pot, noise, data, noise_batch = matched_setup(1)
        # a length outside the noise support has probability zero
        bad = data[:-1] + [(0, 1, 1, 0, 0, 1, 1, 0)]
        with pytest.raises(ValueError, match="non-finite"):
            nce.nce_loss(pot, noise, bad, noise_batch, 1)


class TestDnceRefresh:
    def test_corpus_only_refresh_keeps_counts(self):
        corpus = [(0, 1, 2), (2, 1), (0, 0, 1)]
        noise = nce.noise_fit(corpus, vocab_size=3)
        noise.log_c = -0.75
        refreshed = nce.dnce_refresh(noise, corpus)
        np.testing.assert_array_equal(refreshed.bigram_counts, noise.bigram_counts)
        np.testing.assert_array_equal(refreshed.length_counts, noise.length_counts)
        assert refreshed.log_c == noise.log_c

    def test_refresh_tracks_model_preferred_sequences(self):
        rng = np.random.default_rng(23)
        corpus = [tuple(rng.integers(0, 2, size=3)) for _ in range(40)]
        noise = nce.noise_fit(corpus, vocab_size=2)
        # hand-built skewed model: strongly prefers sequences of zeros
        pot = nce.FrozenScorePotential(lambda s: 4.0 * sum(1 for t in s if t == 0))
        model = ec.EnergyModel(pot, ec.SequenceSpace(2, noise.max_len))
        refreshed = nce.dnce_refresh(noise, corpus, model=model, rng=rng)
        preferred = [(0, 0, 0), (0, 0, 1), (1, 0, 0)]
        before = np.mean([noise.logprob(s) for s in preferred])
        after = np.mean([refreshed.logprob(s) for s in preferred])
        assert after > before

    def test_length_distribution_stays_normalized(self):
        rng = np.random.default_rng(29)
        corpus = [tuple(rng.integers(0, 3, size=rng.integers(1, 5))) for _ in range(30)]
        noise = nce.noise_fit(corpus, vocab_size=3)
        pot = nce.FrozenScorePotential(lambda s: float(len(s)))
        model = ec.EnergyModel(pot, ec.SequenceSpace(3, noise.max_len))
        refreshed = nce.dnce_refresh(noise, corpus, model=model, rng=rng)
        assert refreshed.length_probs().sum() == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(refreshed.conditionals().sum(axis=1), 1.0, atol=1e-12)
