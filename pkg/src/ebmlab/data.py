"""Synthetic dataset generators and the labeled/unlabeled splitter.

Two desk-scale regimes: 2-D Gaussian mixtures with class labels (continuous,
fixed-dimensional) and HMM-emitted token sequences whose hidden states are
the gold labels (discrete, per-position labeling).  `split` carves a dataset
into a labeled subset (by labeling proportion p, at least one item per
class) and an unlabeled subset sized by the U/L ratio r, drawn from the
remainder or from a separate pool.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from math import ceil

import numpy as np

__all__ = [
    "ContinuousDataset",
    "SequenceDataset",
    "SSLSplit",
    "gen_mixture",
    "gen_hmm",
    "split",
    "dump_dataset",
    "load_dataset",
]


@dataclass
class ContinuousDataset:
    points: np.ndarray  # (N, D)
    labels: np.ndarray | None  # (N,) ints, or None once stripped
    num_classes: int
    descriptor: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.points.shape[0]

    def subset(self, idx, strip_labels: bool = False) -> "ContinuousDataset":
        idx = np.asarray(idx, dtype=np.intp)
        labels = None if (strip_labels or self.labels is None) else self.labels[idx].copy()
        return ContinuousDataset(self.points[idx].copy(), labels, self.num_classes, dict(self.descriptor))


@dataclass
class SequenceDataset:
    sequences: list[tuple[int, ...]]
    labels: list[tuple[int, ...]] | None
    vocab_size: int
    num_labels: int
    label_names: list[str] | None = None
    descriptor: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.labels is not None:
            if len(self.labels) != len(self.sequences):
                raise ValueError("sequence/label count mismatch")
            for x, y in zip(self.sequences, self.labels):
                if len(x) != len(y):
                    raise ValueError("per-item sequence/label length mismatch")

    def __len__(self) -> int:
        return len(self.sequences)

    def max_len(self) -> int:
        return max(len(s) for s in self.sequences)

    def subset(self, idx, strip_labels: bool = False) -> "SequenceDataset":
        idx = np.asarray(idx, dtype=np.intp)
        seqs = [self.sequences[i] for i in idx]
        labels = None
        if not strip_labels and self.labels is not None:
            labels = [self.labels[i] for i in idx]
        return SequenceDataset(
            seqs, labels, self.vocab_size, self.num_labels, self.label_names, dict(self.descriptor)
        )


@dataclass
class SSLSplit:
    labeled: object
    unlabeled: object
    proportion: float
    ul_ratio: float
    labeled_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    unlabeled_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    unlabeled_from_pool: bool = False


def gen_mixture(
    k: int,
    n_per_class: int,
    seed: int,
    radius: float = 4.0,
    sigma: float = 1.0,
    dim: int = 2,
) -> ContinuousDataset:
    """Gaussian mixture with K components equally spaced on a circle."""
    if k < 2:
        raise ValueError("need at least 2 classes")
    if n_per_class < 1:
        raise ValueError("need at least one point per class")
    rng = np.random.default_rng(seed)
    angles = 2.0 * np.pi * np.arange(k) / k
    means = np.zeros((k, dim))
    means[:, 0] = radius * np.cos(angles)
    means[:, 1 % dim] = radius * np.sin(angles)
    points = np.zeros((k * n_per_class, dim))
    labels = np.zeros(k * n_per_class, dtype=np.intp)
    for c in range(k):
        sl = slice(c * n_per_class, (c + 1) * n_per_class)
        points[sl] = means[c] + sigma * rng.standard_normal((n_per_class, dim))
        labels[sl] = c
    perm = rng.permutation(k * n_per_class)
    descriptor = {
        "kind": "mixture",
        "k": k,
        "n_per_class": n_per_class,
        "seed": seed,
        "radius": radius,
        "sigma": sigma,
        "dim": dim,
        "means": means.tolist(),
    }
    return ContinuousDataset(points[perm], labels[perm], k, descriptor)


def hmm_matrices(
    k: int, vocab_size: int, self_prob: float = 0.6, peak: float = 0.75
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(initial, transition, emission) for the synthetic labeling HMM.

    Transitions are diagonally dominant; each state spreads `peak` emission
    mass over its own contiguous token block.
    """
    if k < 2 or k > vocab_size:
        raise ValueError("need 2 <= K <= |V|")
    init = np.full(k, 1.0 / k)
    trans = np.full((k, k), (1.0 - self_prob) / (k - 1))
    np.fill_diagonal(trans, self_prob)
    emis = np.zeros((k, vocab_size))
    blocks = np.array_split(np.arange(vocab_size), k)
    for state, block in enumerate(blocks):
        rest = vocab_size - len(block)
        emis[state] = (1.0 - peak) / rest if rest else 0.0
        emis[state, block] = peak / len(block)
    return init, trans, emis


def gen_hmm(
    k: int,
    vocab_size: int,
    n: int,
    max_len: int,
    seed: int,
    self_prob: float = 0.6,
    peak: float = 0.75,
    length_probs: np.ndarray | None = None,
    min_len: int = 1,
) -> SequenceDataset:
    """Sequences sampled from a diagonally-dominant HMM; states are the labels."""
    if max_len > 12 or vocab_size > 32 or k > 5:
        raise ValueError("generator limits: K <= 5, |V| <= 32, L <= 12")
    rng = np.random.default_rng(seed)
    init, trans, emis = hmm_matrices(k, vocab_size, self_prob, peak)
    if length_probs is None:
        length_probs = np.zeros(max_len)
        length_probs[min_len - 1 :] = 1.0
        length_probs /= length_probs.sum()
    else:
        length_probs = np.asarray(length_probs, dtype=np.float64)
        if length_probs.shape != (max_len,) or abs(length_probs.sum() - 1.0) > 1e-9:
            raise ValueError("length_probs must have max_len entries summing to 1")
    seqs: list[tuple[int, ...]] = []
    labels: list[tuple[int, ...]] = []
    for _ in range(n):
        l = int(rng.choice(max_len, p=length_probs)) + 1
        states = np.zeros(l, dtype=np.intp)
        tokens = np.zeros(l, dtype=np.intp)
        states[0] = rng.choice(k, p=init)
        tokens[0] = rng.choice(vocab_size, p=emis[states[0]])
        for i in range(1, l):
            states[i] = rng.choice(k, p=trans[states[i - 1]])
            tokens[i] = rng.choice(vocab_size, p=emis[states[i]])
        seqs.append(tuple(int(t) for t in tokens))
        labels.append(tuple(int(s) for s in states))
    descriptor = {
        "kind": "hmm",
        "k": k,
        "vocab_size": vocab_size,
        "n": n,
        "max_len": max_len,
        "seed": seed,
        "self_prob": self_prob,
        "peak": peak,
        "initial": init.tolist(),
        "transition": trans.tolist(),
        "emission": emis.tolist(),
        "length_probs": length_probs.tolist(),
    }
    return SequenceDataset(seqs, labels, vocab_size, k, None, descriptor)


def _dataset_labels(dataset) -> np.ndarray:
    if dataset.labels is None:
        raise ValueError("dataset has no labels to split")
    if isinstance(dataset, ContinuousDataset):
        return dataset.labels
    return np.array([y[0] for y in dataset.labels])  # placeholder, unused for sequences


def _classes_covered(dataset, idx) -> bool:
    if isinstance(dataset, ContinuousDataset):
        present = set(int(c) for c in np.unique(dataset.labels[idx]))
        universe = set(int(c) for c in np.unique(dataset.labels))
    else:
        present = set(t for i in idx for t in dataset.labels[i])
        universe = set(t for y in dataset.labels for t in y)
    return present == universe


def split(dataset, p: float, r: float, seed: int, pool=None) -> SSLSplit:
    """Sample the labeled subset and the unlabeled complement.

    `p` is the labeling proportion over the dataset; `r` the U/L ratio.
    Unlabeled items come from `pool` when given (sequences mirror an
    external unlabeled corpus), otherwise from the dataset remainder.
    Raises when the requested sizes exhaust the available data.
    """
    if not (0.0 < p <= 1.0):
        raise ValueError("labeling proportion must lie in (0, 1]")
    if r < 0:
        raise ValueError("U/L ratio must be >= 0")
    n = len(dataset)
    n_lab = ceil(p * n)
    rng = np.random.default_rng(seed)
    labeled_idx = None
    for _ in range(1000):
        cand = np.sort(rng.choice(n, size=n_lab, replace=False))
        if _classes_covered(dataset, cand):
            labeled_idx = cand
            break
    if labeled_idx is None:
        raise ValueError("could not cover every class; labeled set too small")
    n_unlab = int(round(r * n_lab))
    if pool is not None:
        if n_unlab > len(pool):
            raise ValueError(f"pool exhausted: need {n_unlab} unlabeled, pool has {len(pool)}")
        unlab_idx = np.sort(rng.choice(len(pool), size=n_unlab, replace=False))
        unlabeled = pool.subset(unlab_idx, strip_labels=True)
        from_pool = True
    else:
        remainder = np.setdiff1d(np.arange(n), labeled_idx)
        if n_unlab > remainder.shape[0]:
            raise ValueError(
                f"pool exhausted: need {n_unlab} unlabeled, remainder has {remainder.shape[0]}"
            )
        unlab_idx = np.sort(rng.choice(remainder, size=n_unlab, replace=False))
        unlabeled = dataset.subset(unlab_idx, strip_labels=True)
        from_pool = False
    labeled = dataset.subset(labeled_idx)
    return SSLSplit(labeled, unlabeled, p, r, labeled_idx, unlab_idx, from_pool)


# ---------------------------------------------------------------------------
# Plain-text dump/load
# ---------------------------------------------------------------------------


def dump_dataset(path, dataset) -> None:
    lines = []
    if isinstance(dataset, ContinuousDataset):
        header = {"num_classes": dataset.num_classes, **dataset.descriptor}
        lines.append(f"# continuous {json.dumps(header)}")
        for i in range(len(dataset)):
            label = "-" if dataset.labels is None else str(int(dataset.labels[i]))
            coords = " ".join(f"{v:.17g}" for v in dataset.points[i])
            lines.append(f"{label} {coords}")
    elif isinstance(dataset, SequenceDataset):
        header = {
            "vocab_size": dataset.vocab_size,
            "num_labels": dataset.num_labels,
            "label_names": dataset.label_names,
            **dataset.descriptor,
        }
        lines.append(f"# sequence {json.dumps(header)}")
        for i, seq in enumerate(dataset.sequences):
            lines.append(" ".join(str(t) for t in seq))
            if dataset.labels is None:
                lines.append("-")
            else:
                lines.append(" ".join(str(t) for t in dataset.labels[i]))
    else:
        raise TypeError(f"cannot dump {type(dataset).__name__}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path):
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("# "):
        raise ValueError(f"missing dataset header line in {path}")
    kind, _, payload = lines[0][2:].partition(" ")
    header = json.loads(payload)
    if kind == "continuous":
        labels, points = [], []
        for ln in lines[1:]:
            parts = ln.split()
            labels.append(None if parts[0] == "-" else int(parts[0]))
            points.append([float(v) for v in parts[1:]])
        has_labels = labels and labels[0] is not None
        num_classes = int(header.pop("num_classes"))
        return ContinuousDataset(
            np.array(points),
            np.array(labels, dtype=np.intp) if has_labels else None,
            num_classes,
            header,
        )
    if kind == "sequence":
        body = lines[1:]
        if len(body) % 2:
            raise ValueError("sequence dump must hold two lines per item")
        seqs, labels = [], []
        for i in range(0, len(body), 2):
            seqs.append(tuple(int(t) for t in body[i].split()))
            labels.append(None if body[i + 1] == "-" else tuple(int(t) for t in body[i + 1].split()))
        has_labels = labels and labels[0] is not None
        return SequenceDataset(
            seqs,
            labels if has_labels else None,
            int(header.pop("vocab_size")),
            int(header.pop("num_labels")),
            header.pop("label_names", None),
            header,
        )
    raise ValueError(f"unknown dataset kind {kind!r}")
