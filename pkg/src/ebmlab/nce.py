"""Noise-contrastive estimation for sequence EBMs.

The noise model is an add-one-smoothed bigram LM with an empirical length
distribution; it can both score sequences exactly and sample them.  The
EBM's unknown normalizer is absorbed into a single trainable scalar
("nce/log_c" in the potential's parameter store), so the discriminant is

    G(x) = u(x) + log_c - log p_noise(x)

and the objective with noise ratio nu is

    loss = -mean_data log sigmoid(G - log nu)
           - nu * mean_noise log(1 - sigmoid(G - log nu)).

The dynamic-noise refresh refits the bigram counts on a 50/50 mix of the
original corpus and noise samples kept by model score (top half by u).
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import GraphContext, ParamStore
from .potentials import _length_groups

__all__ = ["NoiseLM", "noise_fit", "nce_loss", "dnce_refresh", "FrozenScorePotential", "LOG_C_NAME"]

LOG_C_NAME = "nce/log_c"


class NoiseLM:
    """Bigram language model with add-one smoothing and an empirical length law."""

    def __init__(
        self,
        bigram_counts: np.ndarray,
        length_counts: np.ndarray,
        vocab_size: int,
        log_c: float = 0.0,
    ):
        self.vocab_size = int(vocab_size)
        counts = np.asarray(bigram_counts, dtype=np.float64)
        if counts.shape != (self.vocab_size + 1, self.vocab_size):
            raise ValueError("bigram counts must be (V+1) x V (last row is the start context)")
        self.bigram_counts = counts
        self.length_counts = np.asarray(length_counts, dtype=np.float64)
        if self.length_counts.ndim != 1 or self.length_counts.sum() <= 0:
            raise ValueError("length counts must be a non-empty 1-D histogram")
        self.log_c = float(log_c)
        # smoothed next-token conditionals; rows sum to 1
        totals = counts.sum(axis=1, keepdims=True) + self.vocab_size
        self._cond = (counts + 1.0) / totals
        self._length_probs = self.length_counts / self.length_counts.sum()
        self._cond_cdf = np.cumsum(self._cond, axis=1)
        self._len_cdf = np.cumsum(self._length_probs)

    @property
    def start_context(self) -> int:
        return self.vocab_size

    @property
    def max_len(self) -> int:
        return self.length_counts.shape[0]

    def length_probs(self) -> np.ndarray:
        return self._length_probs.copy()

    def conditionals(self) -> np.ndarray:
        return self._cond.copy()

    def logprob(self, seq) -> float:
        """Exact log-probability; -inf for lengths outside the support."""
        seq = tuple(int(t) for t in seq)
        l = len(seq)
        if l < 1 or l > self.max_len or self._length_probs[l - 1] == 0.0:
            return -np.inf
        if any(t < 0 or t >= self.vocab_size for t in seq):
            raise ValueError("token out of vocabulary")
        lp = np.log(self._length_probs[l - 1])
        prev = self.start_context
        for t in seq:
            lp += np.log(self._cond[prev, t])
            prev = t
        return float(lp)

    def sample(self, rng: np.random.Generator) -> tuple[int, ...]:
        return self.sample_batch(rng, 1)[0]

    def sample_batch(self, rng: np.random.Generator, n: int) -> list[tuple[int, ...]]:
        # inverse-CDF draws; one uniform block per batch keeps this cheap
        lens = np.searchsorted(self._len_cdf, rng.random(n), side="right") + 1
        u = rng.random((n, int(lens.max())))
        out = []
        for i in range(n):
            seq = []
            prev = self.start_context
            for j in range(lens[i]):
                t = int(np.searchsorted(self._cond_cdf[prev], u[i, j], side="right"))
                t = min(t, self.vocab_size - 1)  # guard the cdf's top edge
                seq.append(t)
                prev = t
            out.append(tuple(seq))
        return out

    def entropy(self) -> float:
        """Exact entropy in nats by dynamic programming over the chain."""
        h_len = -np.sum(
            self._length_probs[self._length_probs > 0]
            * np.log(self._length_probs[self._length_probs > 0])
        )
        # conditional token entropy accumulated over positions, weighted by
        # the probability of still being inside the sequence at that position
        h_tok = 0.0
        state = np.zeros(self.vocab_size + 1)
        state[self.start_context] = 1.0
        row_entropy = -np.sum(self._cond * np.log(self._cond), axis=1)
        for pos in range(self.max_len):
            p_reach = self._length_probs[pos:].sum()  # P(length > pos)
            h_tok += p_reach * float(state @ row_entropy)
            nxt = np.zeros(self.vocab_size + 1)
            nxt[: self.vocab_size] = state @ self._cond
            state = nxt
        return float(h_len + h_tok)


def noise_fit(corpus, vocab_size: int, max_len: int | None = None) -> NoiseLM:
    """Fit the smoothed bigram LM and empirical length distribution."""
    corpus = [tuple(int(t) for t in seq) for seq in corpus]
    if not corpus:
        raise ValueError("empty corpus")
    longest = max(len(s) for s in corpus)
    if max_len is None:
        max_len = longest
    elif longest > max_len:
        raise ValueError(f"corpus sequence longer than max_len={max_len}")
    counts = np.zeros((vocab_size + 1, vocab_size))
    lengths = np.zeros(max_len)
    for seq in corpus:
        if any(t < 0 or t >= vocab_size for t in seq):
            raise ValueError("token out of vocabulary")
        lengths[len(seq) - 1] += 1
        prev = vocab_size
        for t in seq:
            counts[prev, t] += 1
            prev = t
    return NoiseLM(counts, lengths, vocab_size)


class FrozenScorePotential:
    """Parameter-free potential scoring sequences through a fixed callable.

    Used to build exactly matched NCE configurations (u + log_c = log p_noise).
    """

    def __init__(self, score_fn, store: ParamStore | None = None):
        self.score_fn = score_fn
        self.store = store if store is not None else ParamStore()

    def batch_node(self, ctx: GraphContext, tokens):
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.intp))
        values = np.array([self.score_fn(tuple(int(t) for t in row)) for row in tokens])
        return dc.constant(values)


def ensure_log_c(store: ParamStore) -> None:
    if LOG_C_NAME not in store:
        store.add(LOG_C_NAME, np.zeros(()))


def _batched_potential_vectors(potential, ctx: GraphContext, seqs: list) -> list:
    """(u_vector_node, indices) pairs over same-length groups."""
    out = []
    for idx in _length_groups(seqs):
        tokens = np.array([seqs[i] for i in idx], dtype=np.intp)
        out.append((potential.batch_node(ctx, tokens), idx))
    return out


def nce_loss(
    potential,
    noise: NoiseLM,
    data_batch,
    noise_batch,
    nu: int,
) -> tuple[float, dict[str, np.ndarray]]:
    """Binary-logistic NCE objective and its parameter gradients.

    Requires `len(noise_batch) == nu * len(data_batch)` with integer nu >= 1.
    """
    if int(nu) != nu or nu < 1:
        raise ValueError("nu must be an integer >= 1")
    nu = int(nu)
    data_batch = [tuple(int(t) for t in s) for s in data_batch]
    noise_batch = [tuple(int(t) for t in s) for s in noise_batch]
    if not data_batch:
        raise ValueError("empty data batch")
    if len(noise_batch) != nu * len(data_batch):
        raise ValueError(
            f"noise batch size {len(noise_batch)} must equal nu * data batch size "
            f"({nu} * {len(data_batch)})"
        )
    lpn_data = np.array([noise.logprob(s) for s in data_batch])
    lpn_noise = np.array([noise.logprob(s) for s in noise_batch])
    if not (np.all(np.isfinite(lpn_data)) and np.all(np.isfinite(lpn_noise))):
        raise ValueError("non-finite noise log-probability in NCE batch")
    store = potential.store
    ensure_log_c(store)
    log_nu = np.log(float(nu))
    b = len(data_batch)

    def build(ctx: GraphContext):
        log_c = ctx.param(LOG_C_NAME)
        total = dc.constant(0.0)
        for u_vec, idx in _batched_potential_vectors(potential, ctx, data_batch):
            g = dc.sub(dc.add(u_vec, log_c), lpn_data[idx])
            total = dc.add(total, dc.mul(1.0 / b, dc.sum(dc.softplus(dc.mul(-1.0, dc.sub(g, log_nu))))))
        for u_vec, idx in _batched_potential_vectors(potential, ctx, noise_batch):
            g = dc.sub(dc.add(u_vec, log_c), lpn_noise[idx])
            total = dc.add(total, dc.mul(1.0 / b, dc.sum(dc.softplus(dc.sub(g, log_nu)))))
        return total

    loss, pgrads, _ = dc.value_and_grad(dc.Graph(build), store)
    grads = {name: pgrads.get(name, np.zeros_like(v)) for name, v in store.items()}
    return float(loss), grads


def dnce_refresh(
    noise: NoiseLM,
    corpus,
    model=None,
    rng: np.random.Generator | None = None,
) -> NoiseLM:
    """Dynamic-noise refresh; `model` scores candidate sequences via u.

    With no model the counts are simply refit on the corpus.  Otherwise the
    mix is the corpus plus an equal number of noise samples kept from the
    top half by model potential.  log_c carries over unchanged.
    """
    corpus = [tuple(int(t) for t in s) for s in corpus]
    if model is None:
        mix = corpus
    else:
        if rng is None:
            raise ValueError("model-filtered refresh needs an rng")
        candidates = noise.sample_batch(rng, 2 * len(corpus))
        u = model.potential_values(candidates)
        keep = np.argsort(-u, kind="stable")[: len(corpus)]
        mix = corpus + [candidates[i] for i in keep]
    refreshed = noise_fit(mix, noise.vocab_size, max_len=noise.max_len)
    refreshed.log_c = noise.log_c
    return refreshed
