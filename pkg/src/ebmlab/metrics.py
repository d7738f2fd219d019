"""Evaluation metrics: accuracy and exact-match BIO span F1."""

from __future__ import annotations

import re

import numpy as np

__all__ = ["accuracy", "token_accuracy", "bio_spans", "span_f1", "is_bio_label_set"]

_BIO_RE = re.compile(r"^(O|[BI]-.+)$")


def accuracy(pred, gold) -> float:
    pred = np.asarray(pred)
    gold = np.asarray(gold)
    if pred.shape != gold.shape:
        raise ValueError("prediction/gold shape mismatch")
    if pred.size == 0:
        raise ValueError("empty evaluation set")
    return float(np.mean(pred == gold))


def token_accuracy(pred_seqs, gold_seqs) -> float:
    """Micro accuracy over all positions of all sequences."""
    correct = total = 0
    if len(pred_seqs) != len(gold_seqs):
        raise ValueError("prediction/gold count mismatch")
    for p, g in zip(pred_seqs, gold_seqs):
        if len(p) != len(g):
            raise ValueError("prediction/gold length mismatch")
        correct += sum(int(a == b) for a, b in zip(p, g))
        total += len(g)
    if total == 0:
        raise ValueError("empty evaluation set")
    return correct / total


def is_bio_label_set(names) -> bool:
    """True when every name is O / B-x / I-x and at least one span can start."""
    if not names:
        return False
    return all(_BIO_RE.match(n) for n in names) and any(n.startswith("B-") for n in names)


def bio_spans(tags) -> set[tuple[int, int, str]]:
    """Exact spans (start, end_exclusive, label) decoded from BIO tags.

    An I-x continuing nothing (after O, start, or a different type) opens a
    new span, the standard CoNLL repair.
    """
    spans: set[tuple[int, int, str]] = set()
    start = None
    label = None
    for i, tag in enumerate(tags):
        if tag == "O":
            if start is not None:
                spans.add((start, i, label))
            start, label = None, None
            continue
        prefix, _, name = tag.partition("-")
        if prefix == "B" or label != name:
            if start is not None:
                spans.add((start, i, label))
            start, label = i, name
    if start is not None:
        spans.add((start, len(list(tags)), label))
    return spans


def span_f1(gold_tag_seqs, pred_tag_seqs) -> tuple[float, float, float]:
    """Micro precision/recall/F1 over exact-match spans.

    Precision is 0 when nothing is predicted, recall 0 when there is no
    gold span, and F1 is 0 whenever precision + recall is 0.
    """
    tp = n_pred = n_gold = 0
    for gold_tags, pred_tags in zip(gold_tag_seqs, pred_tag_seqs):
        g = bio_spans(gold_tags)
        p = bio_spans(pred_tags)
        tp += len(g & p)
        n_pred += len(p)
        n_gold += len(g)
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1
