"""Concrete neural potential functions.

Three families:

* `MlpPotential` — feed-forward body with a scalar head u(x) = w.h + b,
  exposing the last hidden activation h for fine-tuning heads.
* `ClassifierNet` — feed-forward net emitting K logits.
* `SeqEncoder` — token embeddings plus forward/backward gated recurrent
  cells.  Its unconditional potential over a token sequence is the
  bidirectional next/previous-embedding inner product

      u(x) = sum_{i=1}^{l-1} hf_i . e_{i+1}  +  sum_{i=2}^{l} hb_i . e_{i-1}

  which is exactly 0 for single-token sequences.  Per-position features
  (hf_i, hb_i) and a linear K-logit head feed the CRF layer.

The recurrent cell is a standard GRU with explicit per-gate affine maps:

    z_t = sigmoid(x_t Wz + h_{t-1} Uz + bz)
    r_t = sigmoid(x_t Wr + h_{t-1} Ur + br)
    c_t = tanh(x_t Wc + (r_t * h_{t-1}) Uc + bc)
    h_t = (1 - z_t) * h_{t-1} + z_t * c_t

Weight matrices are initialized uniform(-s, s) with s = sqrt(6/(fan_in +
fan_out)); biases start at zero.  Linear layers carry biases throughout.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import GraphContext, Node, ParamStore, glorot_uniform

__all__ = ["MlpPotential", "ClassifierNet", "GruCell", "SeqEncoder", "FunctionPotential"]

_ACTIVATIONS = {"tanh": dc.tanh, "relu": dc.relu, "sigmoid": dc.sigmoid}


def _affine(ctx: GraphContext, prefix: str, x):
    return dc.add(dc.matmul(x, ctx.param(f"{prefix}/W")), ctx.param(f"{prefix}/b"))


def _register_affine(store: ParamStore, prefix: str, n_in: int, n_out: int, rng) -> None:
    store.add(f"{prefix}/W", glorot_uniform(rng, (n_in, n_out)))
    store.add(f"{prefix}/b", np.zeros(n_out))


class _FeedForward:
    """Shared body for MlpPotential / ClassifierNet: affine + activation stack."""

    def __init__(self, sizes, store, rng, prefix, activation):
        if len(sizes) < 2:
            raise ValueError("need at least input and one layer size")
        self.sizes = list(int(s) for s in sizes)
        self.store = store
        self.prefix = prefix
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        for i, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            _register_affine(store, f"{prefix}/layer{i}", n_in, n_out, rng)

    def body_node(self, ctx: GraphContext, x, stop_before_last: bool = False):
        act = _ACTIVATIONS[self.activation]
        n_layers = len(self.sizes) - 1
        h = x
        last = n_layers - 1 if stop_before_last else n_layers
        for i in range(last):
            h = act(_affine(ctx, f"{self.prefix}/layer{i}", h))
        return h

    def param_names(self) -> list[str]:
        return [n for n in self.store.names() if n.startswith(self.prefix + "/")]


class MlpPotential:
    """Scalar potential u(x) = w.h + b over R^D with retrievable hidden h."""

    def __init__(
        self,
        sizes: Sequence[int],
        store: ParamStore | None = None,
        rng: np.random.Generator | None = None,
        prefix: str = "phi",
        activation: str = "tanh",
    ):
        self.store = store if store is not None else ParamStore()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.body = _FeedForward(sizes, self.store, rng, prefix, activation)
        self.prefix = prefix
        self.hidden_dim = self.body.sizes[-1]
        self.input_dim = self.body.sizes[0]
        self.store.add(f"{prefix}/w", glorot_uniform(rng, (self.hidden_dim,)))
        self.store.add(f"{prefix}/w_bias", np.zeros(()))
        self._cache: tuple[np.ndarray, np.ndarray] | None = None  # (x, h) same-pass cache

    def hidden_node(self, ctx: GraphContext, x):
        return self.body.body_node(ctx, x)

    def batch_node(self, ctx: GraphContext, x):
        """Potential values for a (B, D) batch -> (B,) node."""
        h = self.hidden_node(ctx, x)
        return dc.add(dc.matmul(h, ctx.param(f"{self.prefix}/w")), ctx.param(f"{self.prefix}/w_bias"))

    def potential(self, x: np.ndarray) -> float:
        x = self._check_input(x)
        ctx = GraphContext(self.store)
        h = self.hidden_node(ctx, dc.constant(x))
        u = dc.add(dc.matmul(h, ctx.param(f"{self.prefix}/w")), ctx.param(f"{self.prefix}/w_bias"))
        self._cache = (x.copy(), h.value.copy())
        return float(u.value)

    def hidden(self, x: np.ndarray) -> np.ndarray:
        x = self._check_input(x)
        if self._cache is not None and np.array_equal(self._cache[0], x):
            return self._cache[1].copy()
        ctx = GraphContext(self.store)
        h = self.hidden_node(ctx, dc.constant(x)).value
        self._cache = (x.copy(), h.copy())
        return h.copy()

    def _check_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.input_dim,):
            raise ValueError(f"expected input of shape ({self.input_dim},), got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite input")
        return x

    def body_param_names(self) -> list[str]:
        return [n for n in self.body.param_names() if not n.endswith(("/w", "/w_bias"))]

    def param_names(self) -> list[str]:
        return self.body.param_names()


class ClassifierNet:
    """Feed-forward net mapping R^D to K class logits."""

    def __init__(
        self,
        sizes: Sequence[int],
        store: ParamStore | None = None,
        rng: np.random.Generator | None = None,
        prefix: str = "psi",
        activation: str = "tanh",
    ):
        self.store = store if store is not None else ParamStore()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.body = _FeedForward(sizes, self.store, rng, prefix, activation)
        self.prefix = prefix
        self.input_dim = self.body.sizes[0]
        self.num_classes = self.body.sizes[-1]

    def logits_node(self, ctx: GraphContext, x):
        """Logits for (D,) -> (K,) or (B, D) -> (B, K); no activation on the last layer."""
        n_layers = len(self.body.sizes) - 1
        h = self.body.body_node(ctx, x, stop_before_last=True)
        return _affine(ctx, f"{self.prefix}/layer{n_layers - 1}", h)

    def logits(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"expected {self.input_dim} input features, got {x.shape}")
        ctx = GraphContext(self.store)
        out = self.logits_node(ctx, dc.constant(np.atleast_2d(x))).value
        return out[0] if single else out

    def param_names(self) -> list[str]:
        return self.body.param_names()


class GruCell:
    """Gated recurrent cell; see module docstring for the update equations."""

    def __init__(self, store: ParamStore, prefix: str, dim_in: int, dim_h: int, rng):
        self.store = store
        self.prefix = prefix
        self.dim_in = dim_in
        self.dim_h = dim_h
        for gate in ("z", "r", "c"):
            store.add(f"{prefix}/W{gate}", glorot_uniform(rng, (dim_in, dim_h)))
            store.add(f"{prefix}/U{gate}", glorot_uniform(rng, (dim_h, dim_h)))
            store.add(f"{prefix}/b{gate}", np.zeros(dim_h))

    def step(self, ctx: GraphContext, x_t, h):
        p = self.prefix
        z = dc.sigmoid(dc.add(dc.add(dc.matmul(x_t, ctx.param(f"{p}/Wz")),
                                     dc.matmul(h, ctx.param(f"{p}/Uz"))), ctx.param(f"{p}/bz")))
        r = dc.sigmoid(dc.add(dc.add(dc.matmul(x_t, ctx.param(f"{p}/Wr")),
                                     dc.matmul(h, ctx.param(f"{p}/Ur"))), ctx.param(f"{p}/br")))
        c = dc.tanh(dc.add(dc.add(dc.matmul(x_t, ctx.param(f"{p}/Wc")),
                                  dc.matmul(dc.mul(r, h), ctx.param(f"{p}/Uc"))), ctx.param(f"{p}/bc")))
        one_minus_z = dc.sub(1.0, z)
        return dc.add(dc.mul(one_minus_z, h), dc.mul(z, c))

    def param_names(self) -> list[str]:
        return [n for n in self.store.names() if n.startswith(self.prefix + "/")]


class SeqEncoder:
    """Bidirectional recurrent encoder over token sequences.

    Embedding and hidden size share one dimension so the potential's inner
    products are well-typed.  The same embedding table serves lookup and
    the target-side embeddings by default (`tied=True`); `tied=False`
    allocates a separate output table.
    """

    def __init__(
        self,
        vocab_size: int,
        dim: int,
        num_labels: int | None = None,
        store: ParamStore | None = None,
        rng: np.random.Generator | None = None,
        prefix: str = "enc",
        tied: bool = True,
    ):
        self.store = store if store is not None else ParamStore()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.vocab_size = int(vocab_size)
        self.dim = int(dim)
        self.num_labels = num_labels
        self.prefix = prefix
        self.tied = tied
        self.store.add(f"{prefix}/emb", glorot_uniform(rng, (self.vocab_size, self.dim)))
        if not tied:
            self.store.add(f"{prefix}/emb_out", glorot_uniform(rng, (self.vocab_size, self.dim)))
        self.fwd = GruCell(self.store, f"{prefix}/fwd", self.dim, self.dim, rng)
        self.bwd = GruCell(self.store, f"{prefix}/bwd", self.dim, self.dim, rng)
        if num_labels is not None:
            _register_affine(self.store, f"{prefix}/head", 2 * self.dim, int(num_labels), rng)

    # -- token handling --------------------------------------------------
    def _check_tokens(self, tokens) -> np.ndarray:
        arr = np.asarray(tokens, dtype=np.intp)
        if arr.ndim == 1 and arr.shape[0] < 1:
            raise ValueError("sequence length must be >= 1")
        if np.any(arr < 0) or np.any(arr >= self.vocab_size):
            raise ValueError(f"token out of vocabulary [0, {self.vocab_size})")
        return arr

    # -- recurrent runs (batched over a same-length group) ----------------
    def _run_batch(self, ctx: GraphContext, tokens: np.ndarray):
        """tokens (B, l) -> (E, HF, HB) nodes of shape (B, l, dim)."""
        b, l = tokens.shape
        emb = ctx.param(f"{self.prefix}/emb")
        e_slices = [dc.take(emb, tokens[:, i]) for i in range(l)]  # each (B, dim)
        h = dc.constant(np.zeros((b, self.dim)))
        hf = []
        for i in range(l):
            h = self.fwd.step(ctx, e_slices[i], h)
            hf.append(h)
        h = dc.constant(np.zeros((b, self.dim)))
        hb = [None] * l
        for i in reversed(range(l)):
            h = self.bwd.step(ctx, e_slices[i], h)
            hb[i] = h
        e = dc.stack(e_slices, axis=1)
        return e, dc.stack(hf, axis=1), dc.stack(hb, axis=1)

    def _target_embeddings(self, ctx: GraphContext, tokens: np.ndarray, e_node):
        if self.tied:
            return e_node
        b, l = tokens.shape
        emb_out = ctx.param(f"{self.prefix}/emb_out")
        return dc.stack([dc.take(emb_out, tokens[:, i]) for i in range(l)], axis=1)

    # -- potential (two-directional inner-product sum) ---------------------
    def potential_batch_node(self, ctx: GraphContext, tokens: np.ndarray):
        """Unconditional potential for a same-length batch (B, l) -> (B,)."""
        tokens = self._check_tokens(np.atleast_2d(tokens))
        b, l = tokens.shape
        if l == 1:
            return dc.constant(np.zeros(b))
        e, hf, hb = self._run_batch(ctx, tokens)
        tgt = self._target_embeddings(ctx, tokens, e)
        fwd_term = dc.sum(dc.sum(dc.mul(dc.take(hf, (slice(None), slice(0, l - 1))),
                                        dc.take(tgt, (slice(None), slice(1, l)))), axis=2), axis=1)
        bwd_term = dc.sum(dc.sum(dc.mul(dc.take(hb, (slice(None), slice(1, l))),
                                        dc.take(tgt, (slice(None), slice(0, l - 1)))), axis=2), axis=1)
        return dc.add(fwd_term, bwd_term)

    # uniform potential protocol used by ebm_core
    def batch_node(self, ctx: GraphContext, tokens: np.ndarray):
        return self.potential_batch_node(ctx, tokens)

    def potential_node(self, ctx: GraphContext, tokens):
        tokens = self._check_tokens(tokens)
        return dc.take(self.potential_batch_node(ctx, tokens[None, :]), 0)

    def potential(self, tokens) -> float:
        ctx = GraphContext(self.store)
        out = self.potential_node(ctx, tokens)
        return float(out.value if isinstance(out, Node) else out)

    def potentials(self, seqs: Sequence) -> np.ndarray:
        """Potential values for arbitrary-length sequences, grouped by length."""
        out = np.zeros(len(seqs))
        ctx = GraphContext(self.store)
        for idx in _length_groups(seqs):
            tokens = np.array([seqs[i] for i in idx], dtype=np.intp)
            node = self.potential_batch_node(ctx, tokens)
            out[idx] = node.value if isinstance(node, Node) else node
        return out

    # -- per-position features and logits ----------------------------------
    def logits_batch_node(self, ctx: GraphContext, tokens: np.ndarray):
        """Per-position label logits for a same-length batch: (B, l) -> (B, l, K)."""
        if self.num_labels is None:
            raise ValueError("encoder has no label head")
        tokens = self._check_tokens(np.atleast_2d(tokens))
        _, hf, hb = self._run_batch(ctx, tokens)
        feats = dc.concat([hf, hb], axis=2)  # (B, l, 2*dim)
        b, l = tokens.shape
        flat = dc.reshape(feats, (b * l, 2 * self.dim))
        logits = _affine(ctx, f"{self.prefix}/head", flat)
        return dc.reshape(logits, (b, l, int(self.num_labels)))

    def features(self, tokens) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
        """(hf, hb, logits) for one sequence; logits is None without a head."""
        tokens = self._check_tokens(tokens)
        ctx = GraphContext(self.store)
        _, hf, hb = self._run_batch(ctx, tokens[None, :])
        hf_v, hb_v = hf.value[0], hb.value[0]
        logits = None
        if self.num_labels is not None:
            logits = self.logits_batch_node(ctx, tokens[None, :]).value[0]
        return hf_v, hb_v, logits

    def logits(self, tokens) -> np.ndarray:
        tokens = self._check_tokens(tokens)
        ctx = GraphContext(self.store)
        return self.logits_batch_node(ctx, tokens[None, :]).value[0]

    # -- parameter grouping -------------------------------------------------
    def encoder_param_names(self) -> list[str]:
        head = f"{self.prefix}/head/"
        return [
            n for n in self.store.names()
            if n.startswith(self.prefix + "/") and not n.startswith(head)
        ]

    def head_param_names(self) -> list[str]:
        head = f"{self.prefix}/head/"
        return [n for n in self.store.names() if n.startswith(head)]

    def param_names(self) -> list[str]:
        return [n for n in self.store.names() if n.startswith(self.prefix + "/")]


class FunctionPotential:
    """Potential defined by a raw graph builder `(ctx, x_node) -> (B,) node`.

    Used for analytic test potentials (quadratic wells, hand-set mixtures)
    that need no learned parameters.
    """

    def __init__(self, build, store: ParamStore | None = None):
        self.build = build
        self.store = store if store is not None else ParamStore()

    def batch_node(self, ctx: GraphContext, x):
        return self.build(ctx, x)


def _length_groups(seqs: Sequence) -> list[np.ndarray]:
    """Indices of `seqs` grouped by sequence length, each group order-preserving."""
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(seqs):
        by_len.setdefault(len(s), []).append(i)
    return [np.array(v, dtype=np.intp) for _, v in sorted(by_len.items())]
