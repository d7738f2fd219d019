"""EBM probability layer: densities, exact partition sums, likelihood gradients.

A model assigns unnormalized log-density u(x) (optionally u(x, y)) over a
sample space.  Discrete sequence spaces small enough to enumerate get an
exact log-partition and an exact maximum-likelihood gradient

    grad log p(x) = grad u(x) - E_{p(x')}[grad u(x')]

whose model expectation is computed over the full space; the sampled form
replaces that expectation with a Monte-Carlo mean.  Joint models over a
K-label slot expose the implied conditional (a plain softmax over the K
potential values) and marginal potentials for both modalities.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import crf as crf_mod
from . import diffcore as dc
from .diffcore import GraphContext, Node, ParamStore
from .potentials import ClassifierNet, SeqEncoder, _length_groups

__all__ = [
    "ContinuousSpace",
    "SequenceSpace",
    "EnergyModel",
    "JointEnergyModel",
    "log_unnorm",
    "exact_log_partition",
    "exact_ml_gradient",
    "sampled_ml_gradient",
    "joint_conditional",
    "marginal_potential_fixed",
    "marginal_potential_seq",
    "exact_loglik_graph",
    "softmax",
]

MAX_ENUMERABLE = 10**6


@dataclass(frozen=True)
class ContinuousSpace:
    dim: int


@dataclass(frozen=True)
class SequenceSpace:
    """Token sequences of length min_len..max_len over a finite vocabulary."""

    vocab_size: int
    max_len: int
    min_len: int = 1

    def __post_init__(self):
        if not (1 <= self.min_len <= self.max_len):
            raise ValueError("need 1 <= min_len <= max_len")

    def n_points(self) -> int:
        v = self.vocab_size
        return int(sum(v**l for l in self.lengths()))

    def lengths(self) -> range:
        return range(self.min_len, self.max_len + 1)


def softmax(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    p = np.exp(v - v.max())
    return p / p.sum()


def all_token_arrays(vocab_size: int, length: int) -> np.ndarray:
    """All vocab_size**length sequences of one length, lexicographic order."""
    grids = np.indices((vocab_size,) * length)
    return grids.reshape(length, -1).T.astype(np.intp)


class EnergyModel:
    """A potential function paired with its sample space."""

    def __init__(self, potential, space):
        self.potential = potential
        self.space = space

    @property
    def store(self) -> ParamStore:
        return self.potential.store

    def check_point(self, x):
        if isinstance(self.space, ContinuousSpace):
            arr = np.asarray(x, dtype=np.float64)
            if arr.shape != (self.space.dim,):
                raise ValueError(f"point shape {arr.shape} does not match R^{self.space.dim}")
            return arr
        arr = np.asarray(x, dtype=np.intp)
        if arr.ndim != 1 or not (self.space.min_len <= arr.shape[0] <= self.space.max_len):
            raise ValueError(
                f"sequence length must be in {self.space.min_len}..{self.space.max_len}"
            )
        if np.any(arr < 0) or np.any(arr >= self.space.vocab_size):
            raise ValueError("token out of vocabulary")
        return arr

    def log_unnorm(self, x) -> float:
        x = self.check_point(x)
        if hasattr(self.potential, "potential"):
            return float(self.potential.potential(x))
        ctx = GraphContext(self.store)
        if isinstance(self.space, ContinuousSpace):
            out = self.potential.batch_node(ctx, dc.constant(x[None, :]))
        else:
            out = self.potential.batch_node(ctx, x[None, :])
        return float(_value_of(out)[0])

    def potential_values(self, xs) -> np.ndarray:
        """Batched u over points of the space (sequences grouped by length)."""
        ctx = GraphContext(self.store)
        if isinstance(self.space, ContinuousSpace):
            out = self.potential.batch_node(ctx, dc.constant(np.asarray(xs, dtype=np.float64)))
            return _value_of(out).copy()
        xs = list(xs)
        out = np.zeros(len(xs))
        for idx in _length_groups(xs):
            tokens = np.array([xs[i] for i in idx], dtype=np.intp)
            node = self.potential.batch_node(ctx, tokens)
            out[idx] = _value_of(node)
        return out

    def weighted_potential_node(self, ctx: GraphContext, xs, weights: np.ndarray):
        """Scalar node sum_i weights_i * u(x_i), for gradient computations."""
        weights = np.asarray(weights, dtype=np.float64)
        if isinstance(self.space, ContinuousSpace):
            u = self.potential.batch_node(ctx, dc.constant(np.asarray(xs, dtype=np.float64)))
            return dc.sum(dc.mul(weights, u))
        xs = list(xs)
        total = dc.constant(0.0)
        for idx in _length_groups(xs):
            tokens = np.array([xs[i] for i in idx], dtype=np.intp)
            u = self.potential.batch_node(ctx, tokens)
            total = dc.add(total, dc.sum(dc.mul(weights[idx], u)))
        return total


def _value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


class _FixedMarginalPotential:
    """u(x) = logsumexp_y u(x, y) over the K label logits."""

    def __init__(self, net: ClassifierNet):
        self.net = net
        self.store = net.store

    def batch_node(self, ctx: GraphContext, x):
        return dc.logsumexp(self.net.logits_node(ctx, x), axis=1)


class _SeqMarginalPotential:
    """u(x) = log sum_y exp u(x, y) by the CRF forward recursion (cost l*K^2)."""

    def __init__(self, encoder: SeqEncoder, edge_name: str):
        self.encoder = encoder
        self.edge_name = edge_name
        self.store = encoder.store

    def batch_node(self, ctx: GraphContext, tokens: np.ndarray):
        logits = self.encoder.logits_batch_node(ctx, np.atleast_2d(tokens))
        return crf_mod.forward_logz_batch(logits, ctx.param(self.edge_name))


class JointEnergyModel:
    """Joint density over (x, y) with u(x, y) read from a K-logit network.

    Fixed-dimensional: u(x, y) = logits(x)[y].  Sequence: u(x, y) is the
    chain potential with node logits and edge matrix A, so the implied
    conditional is a linear-chain CRF and the marginal a varying-length
    sequence model normalized over all lengths up to the space bound.
    """

    def __init__(self, kind: str, space, net=None, encoder=None, edge_name: str = "crf/A"):
        if kind not in ("fixed", "sequence"):
            raise ValueError(f"unknown joint model kind {kind!r}")
        self.kind = kind
        self.space = space
        self.net = net
        self.encoder = encoder
        self.edge_name = edge_name
        if kind == "fixed" and net is None:
            raise ValueError("fixed-dimensional joint model needs a classifier net")
        if kind == "sequence":
            if encoder is None or encoder.num_labels is None:
                raise ValueError("sequence joint model needs an encoder with a label head")
            if edge_name not in encoder.store:
                encoder.store.add(edge_name, np.zeros((encoder.num_labels, encoder.num_labels)))

    @classmethod
    def fixed(cls, net: ClassifierNet, space: ContinuousSpace) -> "JointEnergyModel":
        return cls("fixed", space, net=net)

    @classmethod
    def sequence(
        cls, encoder: SeqEncoder, space: SequenceSpace, edge_name: str = "crf/A"
    ) -> "JointEnergyModel":
        return cls("sequence", space, encoder=encoder, edge_name=edge_name)

    @property
    def store(self) -> ParamStore:
        return self.net.store if self.kind == "fixed" else self.encoder.store

    @property
    def num_labels(self) -> int:
        return self.net.num_classes if self.kind == "fixed" else int(self.encoder.num_labels)

    def edge_matrix(self) -> np.ndarray:
        return self.store.value(self.edge_name)

    def log_unnorm(self, x, y) -> float:
        if self.kind == "fixed":
            return float(self.net.logits(x)[int(y)])
        logits = self.encoder.logits(x)
        ch = crf_mod.ChainPotentials(node=logits, edge=self.edge_matrix())
        return float(crf_mod.score(ch, y))

    def conditional(self, x) -> np.ndarray:
        if self.kind != "fixed":
            raise ValueError("sequence models: use the crf module for conditionals")
        return softmax(self.net.logits(x))

    def chain_potentials(self, x) -> crf_mod.ChainPotentials:
        if self.kind != "sequence":
            raise ValueError("chain potentials only exist for sequence models")
        return crf_mod.ChainPotentials(node=self.encoder.logits(x), edge=self.edge_matrix())

    def marginal_model(self) -> EnergyModel:
        """The implied unconditional EBM over x alone."""
        if self.kind == "fixed":
            return EnergyModel(_FixedMarginalPotential(self.net), self.space)
        return EnergyModel(_SeqMarginalPotential(self.encoder, self.edge_name), self.space)


# ---------------------------------------------------------------------------
# Module-level ops
# ---------------------------------------------------------------------------


def log_unnorm(model, x, y=None) -> float:
    if isinstance(model, JointEnergyModel):
        if y is None:
            raise ValueError("joint model requires a label")
        return model.log_unnorm(x, y)
    if y is not None:
        raise ValueError("unconditional model takes no label")
    return model.log_unnorm(x)


def _require_enumerable(model: EnergyModel) -> SequenceSpace:
    space = model.space
    if isinstance(space, ContinuousSpace):
        raise ValueError("continuous spaces have no enumerable partition function")
    if space.n_points() > MAX_ENUMERABLE:
        raise ValueError(f"space too large to enumerate ({space.n_points()} points)")
    return space


def enumerate_space(model: EnergyModel) -> list[tuple[int, ...]]:
    space = _require_enumerable(model)
    points: list[tuple[int, ...]] = []
    for l in space.lengths():
        points.extend(map(tuple, all_token_arrays(space.vocab_size, l)))
    return points


def exact_log_partition(model: EnergyModel) -> float:
    """log Z = log sum_x exp u(x), summed over every length of the space."""
    space = _require_enumerable(model)
    per_length = []
    for l in space.lengths():
        tokens = all_token_arrays(space.vocab_size, l)
        ctx = GraphContext(model.store)
        u = _value_of(model.potential.batch_node(ctx, tokens))
        per_length.append(dc.logsumexp(u))
    return float(dc.logsumexp(np.array(per_length)))


def exact_probabilities(model: EnergyModel) -> tuple[list[tuple[int, ...]], np.ndarray]:
    points = enumerate_space(model)
    u = model.potential_values(points)
    return points, softmax(u)


def _fill_missing(store: ParamStore, grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {
        name: grads.get(name, np.zeros_like(value)) for name, value in store.items()
    }


def _weighted_grads(model: EnergyModel, xs, weights: np.ndarray) -> dict[str, np.ndarray]:
    graph = dc.Graph(lambda ctx: model.weighted_potential_node(ctx, xs, weights))
    _, pgrads, _ = dc.value_and_grad(graph, model.store)
    return _fill_missing(model.store, pgrads)


def exact_ml_gradient(
    model: EnergyModel, data: Sequence, weights: np.ndarray | None = None
) -> dict[str, np.ndarray]:
    """Ascent direction of the exact log-likelihood (Monte-Carlo-free)."""
    data = list(data)
    if not data:
        raise ValueError("empty data batch")
    w = np.full(len(data), 1.0 / len(data)) if weights is None else np.asarray(weights, float)
    if abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("data weights must sum to 1")
    data_term = _weighted_grads(model, data, w)
    points, probs = exact_probabilities(model)
    model_term = _weighted_grads(model, points, probs)
    return {name: data_term[name] - model_term[name] for name in data_term}


def _canonical_sample_order(model: EnergyModel, samples):
    """Sort samples so the estimator is bit-identical under permutation."""
    if isinstance(model.space, ContinuousSpace):
        arr = np.asarray(samples, dtype=np.float64)
        return arr[np.lexsort(arr.T[::-1])]
    return sorted(tuple(int(t) for t in s) for s in samples)


def sampled_ml_gradient(
    model: EnergyModel, data: Sequence, samples: Sequence, weights: np.ndarray | None = None
) -> dict[str, np.ndarray]:
    """Data-term mean minus sample mean of the potential gradient."""
    data = list(data) if not isinstance(data, np.ndarray) else data
    if len(data) == 0:
        raise ValueError("empty data batch")
    if len(samples) == 0:
        raise ValueError("empty sample set")
    samples = _canonical_sample_order(model, samples)
    w = np.full(len(data), 1.0 / len(data)) if weights is None else np.asarray(weights, float)
    data_term = _weighted_grads(model, data, w)
    sw = np.full(len(samples), 1.0 / len(samples))
    model_term = _weighted_grads(model, samples, sw)
    return {name: data_term[name] - model_term[name] for name in data_term}


def exact_loglik_graph(
    model: EnergyModel, data: Sequence, weights: np.ndarray | None = None
) -> dc.Graph:
    """Differentiable mean log-likelihood: sum_i w_i u(x_i) - log Z(theta)."""
    data = list(data)
    space = _require_enumerable(model)
    w = np.full(len(data), 1.0 / len(data)) if weights is None else np.asarray(weights, float)

    def build(ctx: GraphContext):
        data_node = model.weighted_potential_node(ctx, data, w)
        per_length = []
        for l in space.lengths():
            tokens = all_token_arrays(space.vocab_size, l)
            per_length.append(model.potential.batch_node(ctx, tokens))
        logz = dc.logsumexp(dc.concat(per_length, axis=0))
        return dc.sub(data_node, logz)

    return dc.Graph(build, name="exact_loglik")


def joint_conditional(jmodel: JointEnergyModel, x) -> np.ndarray:
    """p(y|x): exactly the softmax of the classifier logits."""
    return jmodel.conditional(x)


def marginal_potential_fixed(jmodel: JointEnergyModel, x) -> float:
    if jmodel.kind != "fixed":
        raise ValueError("marginal_potential_fixed requires a fixed-dimensional model")
    return float(dc.logsumexp(jmodel.net.logits(x)))


def marginal_potential_seq(jmodel: JointEnergyModel, x) -> float:
    if jmodel.kind != "sequence":
        raise ValueError("marginal_potential_seq requires a sequence model")
    return float(crf_mod.forward_logz(jmodel.chain_potentials(x)))
