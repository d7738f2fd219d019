"""Linear-chain CRF over per-position logits and an edge matrix.

The chain potential of a label sequence y is

    u(x, y) = sum_i node[i, y_i] + sum_{i>=2} edge[y_{i-1}, y_i]

with no edge term at the first position (equivalently, a virtual start
state with zero potential); an optional learned `start` vector covers the
other convention.  `score`, `forward_logz` and `crf_nll` accept either
plain arrays or diffcore Nodes, so the same recursion serves evaluation
and training graphs.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from . import diffcore as dc

__all__ = ["ChainPotentials", "score", "forward_logz", "crf_nll", "viterbi"]


@dataclass
class ChainPotentials:
    """Node potentials (l x K), edge potentials (K x K), optional start (K,)."""

    node: object  # ndarray or diffcore.Node
    edge: object
    start: object | None = None

    def __post_init__(self):
        node_shape = _shape(self.node)
        edge_shape = _shape(self.edge)
        if len(node_shape) != 2:
            raise ValueError(f"node potentials must be l x K, got shape {node_shape}")
        l, k = node_shape
        if l < 1:
            raise ValueError("chain length must be >= 1")
        if edge_shape != (k, k):
            raise ValueError(f"edge matrix must be {k} x {k}, got {edge_shape}")
        if self.start is not None and _shape(self.start) != (k,):
            raise ValueError("start vector length must equal K")

    @property
    def length(self) -> int:
        return _shape(self.node)[0]

    @property
    def num_labels(self) -> int:
        return _shape(self.node)[1]


def _shape(x) -> tuple[int, ...]:
    return x.shape if hasattr(x, "shape") else np.asarray(x).shape


def _check_labels(ch: ChainPotentials, y) -> np.ndarray:
    y = np.asarray(y, dtype=np.intp)
    if y.ndim != 1 or y.shape[0] != ch.length:
        raise ValueError(f"label sequence length {y.shape} does not match chain length {ch.length}")
    if np.any(y < 0) or np.any(y >= ch.num_labels):
        raise ValueError(f"label out of range [0, {ch.num_labels})")
    return y


def score(ch: ChainPotentials, y):
    """Chain potential u(x, y) of one labeling."""
    y = _check_labels(ch, y)
    l = ch.length
    total = dc.sum(dc.take(ch.node, (np.arange(l), y)))
    if l > 1:
        total = dc.add(total, dc.sum(dc.take(ch.edge, (y[:-1], y[1:]))))
    if ch.start is not None:
        total = dc.add(total, dc.take(ch.start, int(y[0])))
    return total


def forward_logz(ch: ChainPotentials):
    """log sum_y exp score(y) by the forward recursion in log space (cost l*K^2)."""
    k = ch.num_labels
    alpha = dc.take(ch.node, 0)
    if ch.start is not None:
        alpha = dc.add(alpha, ch.start)
    for i in range(1, ch.length):
        trans = dc.add(dc.reshape(alpha, (k, 1)), ch.edge)
        alpha = dc.add(dc.take(ch.node, i), dc.logsumexp(trans, axis=0))
    return dc.logsumexp(alpha)


def crf_nll(ch: ChainPotentials, y):
    """-log p(y|x) = forward_logz - score(y); always >= 0."""
    return dc.sub(forward_logz(ch), score(ch, y))


def viterbi(ch: ChainPotentials) -> tuple[np.ndarray, float]:
    """Exact MAP labeling and its score; ties break toward the lowest label index."""
    node = np.asarray(ch.node.value if isinstance(ch.node, dc.Node) else ch.node, dtype=np.float64)
    edge = np.asarray(ch.edge.value if isinstance(ch.edge, dc.Node) else ch.edge, dtype=np.float64)
    l, k = node.shape
    delta = node[0].copy()
    if ch.start is not None:
        start = np.asarray(ch.start.value if isinstance(ch.start, dc.Node) else ch.start)
        delta = delta + start
    back = np.zeros((l, k), dtype=np.intp)
    for i in range(1, l):
        cand = delta[:, None] + edge  # cand[j, k'] = delta[j] + edge[j, k']
        back[i] = np.argmax(cand, axis=0)  # argmax returns the lowest index on ties
        delta = node[i] + cand[back[i], np.arange(k)]
    best_last = int(np.argmax(delta))
    labels = np.zeros(l, dtype=np.intp)
    labels[-1] = best_last
    for i in range(l - 1, 0, -1):
        labels[i - 1] = back[i, labels[i]]
    return labels, float(delta[best_last])


# -- batched helpers (training-path only) -----------------------------------


def forward_logz_batch(node_pots, edge, start=None):
    """Vectorized forward recursion for a same-length batch.

    `node_pots` is (B, l, K) and `edge` (K, K); returns a (B,) vector.
    """
    b, l, k = _shape(node_pots)
    alpha = dc.take(node_pots, (slice(None), 0))
    if start is not None:
        alpha = dc.add(alpha, start)
    for i in range(1, l):
        trans = dc.add(dc.reshape(alpha, (b, k, 1)), edge)
        alpha = dc.add(dc.take(node_pots, (slice(None), i)), dc.logsumexp(trans, axis=1))
    return dc.logsumexp(alpha, axis=1)


def score_batch(node_pots, edge, ys: np.ndarray, start=None):
    """Vectorized chain scores for a same-length batch; `ys` is (B, l) ints."""
    b, l, k = _shape(node_pots)
    ys = np.asarray(ys, dtype=np.intp)
    rows = np.arange(b)[:, None]
    cols = np.arange(l)[None, :]
    total = dc.sum(dc.take(node_pots, (rows, cols, ys)), axis=1)
    if l > 1:
        total = dc.add(total, dc.sum(dc.take(edge, (ys[:, :-1], ys[:, 1:])), axis=1))
    if start is not None:
        total = dc.add(total, dc.take(start, ys[:, 0]))
    return total


def enumerate_labelings(l: int, k: int):
    """All K^l labelings; intended for oracle-sized problems only."""
    if k**l > 10**6:
        raise ValueError("label space too large to enumerate")
    return [np.array(y, dtype=np.intp) for y in product(range(k), repeat=l)]
