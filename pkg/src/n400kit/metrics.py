"""Word-level predictors derived from language-model output.

Surprisal is ``-log P(word | context)``; semantic similarity is the cosine
between a target word's embedding and the mean embedding of the words that
precede it.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from .errors import InputError


class SimilarityScore(NamedTuple):
    similarity: float
    distance: float


def surprisal(logprob, base=math.e):
    """Surprisal of an event with natural-log probability ``logprob``.

    >>> surprisal(-math.log(2), base=2)
    1.0
    """
    if logprob is None:
        raise InputError("surprisal: missing log-probability")
    logprob = float(logprob)
    if not math.isfinite(logprob) or logprob > 0:
        raise InputError(f"surprisal: log-probability must be finite and <= 0, got {logprob}")
    if not (base > 0 and base != 1):
        raise InputError(f"surprisal: invalid log base {base}")
    value = 0.0 - logprob
    if base != math.e:
        value /= math.log(base)
    return value


def _span(record, word_index):
    try:
        return record.word_alignment[word_index]
    except IndexError:
        raise InputError(
            f"{record.model_id} {record.frame_id}/{record.condition}: word index {word_index} "
            f"out of range ({len(record.word_alignment)} aligned words)") from None


def word_surprisal(record, word_index, base=math.e):
    """Surprisal of a whole word: the sum over its subtokens (chain rule)."""
    start, end = _span(record, word_index)
    lps = record.logprobs[start:end]
    if any(lp is None for lp in lps):
        raise InputError(
            f"{record.model_id} {record.frame_id}/{record.condition}: word {word_index} "
            f"has a subtoken without a log-probability")
    return sum(surprisal(lp, base) for lp in lps)


def word_embedding(record, word_index):
    start, end = _span(record, word_index)
    return record.embeddings[start:end].mean(axis=0)


def context_mean_embedding(record, target_index):
    """Mean embedding of all words before ``target_index``.

    Each word's vector is the mean of its subtoken vectors, and every word
    then gets equal weight in the context mean.
    """
    if target_index < 1:
        raise InputError(
            f"{record.model_id} {record.frame_id}/{record.condition}: "
            f"target at position {target_index} has no preceding context")
    words = [word_embedding(record, i) for i in range(target_index)]
    return np.mean(words, axis=0)


def cosine(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise InputError(f"cosine: dimension mismatch {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise InputError("cosine: zero vector")
    sim = float(np.dot(a, b) / (na * nb))
    sim = min(1.0, max(-1.0, sim))
    return SimilarityScore(sim, 1.0 - sim)


def target_similarity(record, target_index):
    return cosine(context_mean_embedding(record, target_index), word_embedding(record, target_index))


def pearson_r(xs, ys):
    """Sample Pearson correlation coefficient."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise InputError(f"pearson_r: length mismatch {x.shape} vs {y.shape}")
    if x.size < 3:
        raise InputError(f"pearson_r needs at least 3 pairs, got {x.size}")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise InputError("pearson_r: zero variance")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))
