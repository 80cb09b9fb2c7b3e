"""Alignment module: frame-level gloss classifier, CTC loss, brute-force
alignment oracle, collapse mapping, and greedy decoding.

The loss marginalizes over every frame-level path whose collapse (merge
adjacent repeats, then drop blanks) equals the label sequence, using the
log-space forward recursion over the blank-interleaved label sequence. The
brute-force oracle enumerates all paths outright and exists purely to check
the recursion at small sizes.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .attention import FeatureSequence
from .numcore import DimensionError, Parameter, Var, as_var, linear, log_softmax_rows

BLANK = 0
BLANK_TOKEN = "<blank>"

GlossSeq = tuple[int, ...]

ORACLE_PATH_LIMIT = 10**7


class OracleScaleError(ValueError):
    """Brute-force enumeration was asked for an instance beyond its size guard."""


class InfeasibleLabelError(ValueError):
    """The label sequence cannot be aligned within the given frame count."""


class VocabularyError(ValueError):
    """Bad gloss vocabulary: duplicates or a reserved blank entry."""


@dataclass(frozen=True)
class GlossVocabulary:
    """Ordered gloss strings; index 0 is the implicit blank, glosses are 1..V."""

    glosses: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.glosses)) != len(self.glosses):
            raise VocabularyError("duplicate gloss strings")
        if BLANK_TOKEN in self.glosses:
            raise VocabularyError(f"{BLANK_TOKEN!r} is reserved and may not be listed")

    @property
    def size(self) -> int:
        return len(self.glosses)

    def index(self, gloss: str) -> int:
        try:
            return self.glosses.index(gloss) + 1
        except ValueError:
            raise VocabularyError(f"unknown gloss {gloss!r}") from None

    def to_indices(self, glosses: Iterable[str]) -> GlossSeq:
        return tuple(self.index(g) for g in glosses)

    def to_strings(self, labels: Iterable[int]) -> tuple[str, ...]:
        return tuple(self.glosses[i - 1] for i in labels)


def default_vocabulary(size: int) -> GlossVocabulary:
    return GlossVocabulary(tuple(f"g{i:02d}" for i in range(1, size + 1)))


@dataclass
class LogProbMatrix:
    """Frame-level gloss log-probabilities, (T_max x V+1), with a valid length."""

    logp: Var
    valid_len: int

    def __post_init__(self):
        self.logp = as_var(self.logp)
        rows = self.logp.value.shape[0]
        if not 0 < self.valid_len <= rows:
            raise DimensionError(f"valid_len {self.valid_len} outside 1..{rows}")
        valid = self.logp.value[:self.valid_len]
        peak = valid.max(axis=1, keepdims=True)
        lse = peak[:, 0] + np.log(np.exp(valid - peak).sum(axis=1))
        if np.abs(lse).max() > 1e-9:
            raise ValueError(f"rows are not normalized log-probabilities (max |lse| = {np.abs(lse).max():.3g})")

    @property
    def array(self) -> np.ndarray:
        return self.logp.value[:self.valid_len]

    @property
    def n_classes(self) -> int:
        return self.logp.value.shape[1]


def frame_log_probs(seq: FeatureSequence, classifier: Parameter,
                    bias: Optional[Parameter] = None) -> LogProbMatrix:
    """Per-frame log-softmax over the gloss vocabulary plus blank."""
    return LogProbMatrix(log_softmax_rows(linear(seq.features, classifier, bias)),
                         seq.valid_len)


def collapse(path: Sequence[int]) -> GlossSeq:
    """Merge adjacent equal symbols, then drop blanks."""
    out = []
    prev = None
    for sym in path:
        if sym != prev and sym != BLANK:
            out.append(int(sym))
        prev = sym
    return tuple(out)


def adjacent_repeats(labels: Sequence[int]) -> int:
    return sum(1 for a, b in zip(labels, labels[1:]) if a == b)


def min_frames(labels: Sequence[int]) -> int:
    """Shortest path length that can collapse to `labels`."""
    return len(labels) + adjacent_repeats(labels)


def _check_labels(labels: Sequence[int], n_classes: int) -> GlossSeq:
    labels = tuple(int(v) for v in labels)
    if any(not 1 <= v <= n_classes - 1 for v in labels):
        raise ValueError(f"labels must lie in 1..{n_classes - 1}, got {labels}")
    return labels


def ctc_brute_force(lp: LogProbMatrix, labels: Sequence[int]) -> float:
    """Total probability of `labels` by enumerating every alignment path."""
    frames = lp.valid_len
    n_classes = lp.n_classes
    if n_classes ** frames > ORACLE_PATH_LIMIT:
        raise OracleScaleError(
            f"{n_classes}^{frames} paths exceeds the oracle guard of {ORACLE_PATH_LIMIT}")
    labels = _check_labels(labels, n_classes)
    probs = np.exp(lp.array)
    total = 0.0
    for path in itertools.product(range(n_classes), repeat=frames):
        if collapse(path) == labels:
            p = 1.0
            for t, sym in enumerate(path):
                p *= probs[t, sym]
            total += p
    return total


def _extended(labels: GlossSeq) -> np.ndarray:
    ext = np.zeros(2 * len(labels) + 1, dtype=np.int64)
    ext[1::2] = labels
    return ext


def _skip_allowed(ext: np.ndarray) -> np.ndarray:
    """States reachable from s-2: non-blank and different from the label two back."""
    allowed = np.zeros(len(ext), dtype=bool)
    allowed[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    return allowed


def _alphas(logp: np.ndarray, ext: np.ndarray) -> np.ndarray:
    frames, states = logp.shape[0], len(ext)
    skip = _skip_allowed(ext)
    alpha = np.full((frames, states), -np.inf)
    alpha[0, 0] = logp[0, ext[0]]
    if states > 1:
        alpha[0, 1] = logp[0, ext[1]]
    for t in range(1, frames):
        prev = alpha[t - 1]
        step = np.full(states, -np.inf)
        step[1:] = prev[:-1]
        jump = np.full(states, -np.inf)
        if states > 2:
            jump[2:] = prev[:-2]
        jump = np.where(skip, jump, -np.inf)
        alpha[t] = logp[t, ext] + np.logaddexp(np.logaddexp(prev, step), jump)
    return alpha


def _betas(logp: np.ndarray, ext: np.ndarray) -> np.ndarray:
    frames, states = logp.shape[0], len(ext)
    skip = _skip_allowed(ext)
    beta = np.full((frames, states), -np.inf)
    beta[frames - 1, states - 1] = logp[frames - 1, ext[states - 1]]
    if states > 1:
        beta[frames - 1, states - 2] = logp[frames - 1, ext[states - 2]]
    jump_gate = np.zeros(states, dtype=bool)
    if states > 2:
        jump_gate[:-2] = skip[2:]
    for t in range(frames - 2, -1, -1):
        nxt = beta[t + 1]
        step = np.full(states, -np.inf)
        step[:-1] = nxt[1:]
        jump = np.full(states, -np.inf)
        if states > 2:
            jump[:-2] = nxt[2:]
        jump = np.where(jump_gate, jump, -np.inf)
        beta[t] = logp[t, ext] + np.logaddexp(np.logaddexp(nxt, step), jump)
    return beta


def _log_total(alpha: np.ndarray) -> float:
    states = alpha.shape[1]
    tail = alpha[-1, states - 1]
    if states > 1:
        tail = np.logaddexp(tail, alpha[-1, states - 2])
    return float(tail)


def _loss_and_grad(logp: np.ndarray, labels: GlossSeq,
                   want_grad: bool) -> tuple[float, Optional[np.ndarray]]:
    ext = _extended(labels)
    alpha = _alphas(logp, ext)
    log_total = _log_total(alpha)
    if not np.isfinite(log_total):
        raise InfeasibleLabelError("no alignment path has positive probability")
    if not want_grad:
        return -log_total, None
    beta = _betas(logp, ext)
    frames, n_classes = logp.shape
    occupancy = np.full((frames, n_classes), -np.inf)
    joint = alpha + beta
    for s, sym in enumerate(ext):
        occupancy[:, sym] = np.logaddexp(occupancy[:, sym], joint[:, s])
    grad = -np.exp(occupancy - logp - log_total)
    return -log_total, grad


def ctc_loss(lp: LogProbMatrix, labels: Sequence[int]) -> Var:
    """Negative log probability of `labels`, differentiable w.r.t. lp.logp.

    Raises InfeasibleLabelError when the frame count cannot host the labels
    (adjacent repeats need a separating blank); silent infinities would hide
    data bugs.
    """
    labels = _check_labels(labels, lp.n_classes)
    frames = lp.valid_len
    if frames < min_frames(labels):
        raise InfeasibleLabelError(
            f"{len(labels)} labels with {adjacent_repeats(labels)} adjacent repeats "
            f"need at least {min_frames(labels)} frames, got {frames}")
    logp = lp.array
    loss, _ = _loss_and_grad(logp, labels, want_grad=False)
    source = lp.logp

    def vjp(g):
        _, grad = _loss_and_grad(logp, labels, want_grad=True)
        full = np.zeros_like(source.value)
        full[:frames] = grad * float(g)
        return (full,)

    return Var(np.asarray(loss), (source,), vjp)


def ctc_gradient(lp: LogProbMatrix, labels: Sequence[int]) -> np.ndarray:
    """d(loss)/d(logp) over the valid rows, via the forward-backward recursion."""
    labels = _check_labels(labels, lp.n_classes)
    if lp.valid_len < min_frames(labels):
        raise InfeasibleLabelError(
            f"need at least {min_frames(labels)} frames, got {lp.valid_len}")
    _, grad = _loss_and_grad(lp.array, labels, want_grad=True)
    return grad


def greedy_decode(lp: LogProbMatrix) -> GlossSeq:
    """Best-path decode: per-frame argmax (ties to the lowest index), then collapse."""
    return collapse(np.argmax(lp.array, axis=1))
