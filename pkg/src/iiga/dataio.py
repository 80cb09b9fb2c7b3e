"""Synthetic gloss-sequence data, segmentation mask application, stochastic
frame dropping, batching, and the on-disk formats.

Each synthetic gloss owns a fixed prototype vector; sentences come from a
seeded bigram chain (so gloss co-occurrence is non-uniform and chunk-level
attention has sequential structure to pick up), and every gloss emits a short
run of noisy copies of its prototype.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .ctc import GlossSeq, GlossVocabulary, adjacent_repeats, min_frames
from .numcore import DimensionError, RngStream, as_matrix

log = logging.getLogger(__name__)


class DatasetFormatError(ValueError):
    """A dataset / vocabulary / mask file failed validation."""


class InfeasibleAfterDropError(ValueError):
    """Frame dropping would leave too few frames for the gloss sequence."""


@dataclass
class RawSample:
    """One sequence: per-frame raw features plus its weak (sentence-level) labels."""

    id: str
    frames: np.ndarray
    glosses: GlossSeq

    def __post_init__(self):
        self.frames = as_matrix(self.frames, f"frames[{self.id}]")
        self.glosses = tuple(int(g) for g in self.glosses)
        if self.frames.shape[0] < min_frames(self.glosses):
            raise DatasetFormatError(
                f"sample {self.id}: {self.frames.shape[0]} frames cannot host "
                f"{len(self.glosses)} glosses with {adjacent_repeats(self.glosses)} repeats")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class SegMask:
    """Per-frame segmentation mask with entries in [0, 1] (1 = keep)."""

    values: np.ndarray

    def __post_init__(self):
        self.values = as_matrix(self.values, "seg mask")
        if self.values.min() < 0.0 or self.values.max() > 1.0:
            raise ValueError("seg mask entries must lie in [0, 1]")


def identity_mask(shape: tuple[int, int]) -> SegMask:
    return SegMask(np.ones(shape))


def apply_seg_mask(frame: np.ndarray, mask: SegMask) -> np.ndarray:
    """Element-wise product of a frame with its segmentation mask."""
    frame = as_matrix(frame, "frame")
    if frame.shape != mask.values.shape:
        raise DimensionError(f"frame {frame.shape} vs mask {mask.values.shape}")
    return frame * mask.values


@dataclass
class Batch:
    """Sequences stacked to a common length with an explicit padding mask."""

    features: np.ndarray        # (B * T_max, frame_w), padded rows zero-filled
    lengths: tuple[int, ...]
    pad_mask: np.ndarray        # (B, T_max) bool, True on real frames
    ids: tuple[str, ...]
    glosses: tuple[GlossSeq, ...]

    @property
    def size(self) -> int:
        return len(self.lengths)

    @property
    def t_max(self) -> int:
        return self.pad_mask.shape[1]

    def sequence(self, b: int) -> np.ndarray:
        return self.features[b * self.t_max:(b + 1) * self.t_max]


def pad_batch(samples: Sequence[RawSample]) -> Batch:
    """Zero-pad every sequence to the longest one in the batch."""
    if not samples:
        raise ValueError("cannot pad an empty batch")
    t_max = max(s.n_frames for s in samples)
    width = samples[0].frames.shape[1]
    features = np.zeros((len(samples) * t_max, width))
    pad_mask = np.zeros((len(samples), t_max), dtype=bool)
    for b, s in enumerate(samples):
        if s.frames.shape[1] != width:
            raise DimensionError(f"sample {s.id}: frame width {s.frames.shape[1]} != {width}")
        features[b * t_max:b * t_max + s.n_frames] = s.frames
        pad_mask[b, :s.n_frames] = True
    return Batch(features, tuple(s.n_frames for s in samples), pad_mask,
                 tuple(s.id for s in samples), tuple(s.glosses for s in samples))


def frame_drop(sample: RawSample, ratio: float, rng: Optional[RngStream],
               mode: str) -> RawSample:
    """Keep a fraction 1-ratio of the frames, preserving order.

    Training keeps a uniformly random subset; testing keeps the deterministic
    centered-stride subset floor((i + 0.5) * T / K).
    """
    if mode not in ("train", "test"):
        raise ValueError(f"mode must be 'train' or 'test', got {mode!r}")
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"drop ratio must be in [0, 1), got {ratio}")
    total = sample.n_frames
    keep = max(1, int(total * (1.0 - ratio) + 0.5))
    if keep < min_frames(sample.glosses):
        raise InfeasibleAfterDropError(
            f"sample {sample.id}: {keep} kept frames < feasibility bound "
            f"{min_frames(sample.glosses)}")
    if keep == total:
        return sample
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode frame_drop needs an RngStream")
        idx = rng.choice_sorted(total, keep)
    else:
        idx = (np.arange(keep) + 0.5) * total // keep
        idx = idx.astype(np.int64)
    return RawSample(sample.id, sample.frames[idx], sample.glosses)


@dataclass
class SynthConfig:
    """Knobs of the synthetic gloss-sequence generator."""

    vocab_size: int = 10
    frame_w: int = 32
    frames_per_gloss: tuple[int, int] = (8, 16)
    noise_sigma: float = 0.3
    sentence_len: tuple[int, int] = (3, 8)
    bigram_temp: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("need at least 2 glosses")
        lo, hi = self.frames_per_gloss
        if not 2 <= lo <= hi:
            raise ValueError("frames_per_gloss range must satisfy 2 <= lo <= hi")
        slo, shi = self.sentence_len
        if not 1 <= slo <= shi:
            raise ValueError("sentence_len range must satisfy 1 <= lo <= hi")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.bigram_temp <= 0:
            raise ValueError("bigram_temp must be > 0")


def _bigram_table(cfg: SynthConfig, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """Seeded start distribution and transition matrix, no self-transitions.

    Forbidding g -> g keeps label sequences free of adjacent repeats, which
    guarantees feasibility even after a 0.5 frame drop (each gloss emits at
    least 2 frames, so kept frames >= sentence length).
    """
    v = cfg.vocab_size
    start_logits = rng.normal(size=(v,)) / cfg.bigram_temp
    trans_logits = rng.normal(size=(v, v)) / cfg.bigram_temp
    start = np.exp(start_logits - start_logits.max())
    start /= start.sum()
    np.fill_diagonal(trans_logits, -np.inf)
    trans = np.exp(trans_logits - trans_logits.max(axis=1, keepdims=True))
    trans /= trans.sum(axis=1, keepdims=True)
    return start, trans


def _sample_categorical(p: np.ndarray, rng: RngStream) -> int:
    return int(np.searchsorted(np.cumsum(p), rng.random()))


def gen_dataset(cfg: SynthConfig, n_samples: int) -> list[RawSample]:
    """Generate n_samples sequences; bit-identical for identical configs."""
    rng = RngStream(cfg.seed)
    prototypes = rng.normal(size=(cfg.vocab_size, cfg.frame_w))
    start, trans = _bigram_table(cfg, rng)
    lo, hi = cfg.frames_per_gloss
    slo, shi = cfg.sentence_len
    samples = []
    for n in range(n_samples):
        length = int(rng.integers(slo, shi))
        glosses = [_sample_categorical(start, rng) + 1]
        for _ in range(length - 1):
            glosses.append(_sample_categorical(trans[glosses[-1] - 1], rng) + 1)
        rows = []
        for g in glosses:
            run = int(rng.integers(lo, hi))
            noise = rng.normal(size=(run, cfg.frame_w)) * cfg.noise_sigma
            rows.append(prototypes[g - 1] + noise)
        samples.append(RawSample(f"synth-{n:05d}", np.concatenate(rows, axis=0),
                                 tuple(glosses)))
    return samples


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def save_vocabulary(vocab: GlossVocabulary, path) -> None:
    Path(path).write_text("".join(f"{g}\n" for g in vocab.glosses), encoding="utf-8")


def load_vocabulary(path) -> GlossVocabulary:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    glosses = [line.strip() for line in lines if line.strip()]
    try:
        return GlossVocabulary(tuple(glosses))
    except ValueError as exc:
        raise DatasetFormatError(f"{path}: {exc}") from exc


def save_dataset(samples: Iterable[RawSample], vocab: GlossVocabulary, path) -> None:
    """One record per line: {"id": ..., "frames": [[...]], "glosses": [...]}."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            record = {"id": s.id,
                      "frames": s.frames.tolist(),
                      "glosses": list(vocab.to_strings(s.glosses))}
            fh.write(json.dumps(record) + "\n")


def load_dataset(path, vocab: GlossVocabulary) -> list[RawSample]:
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: not valid JSON: {exc}") from exc
            for key in ("id", "frames", "glosses"):
                if key not in record:
                    raise DatasetFormatError(f"{path}:{lineno}: missing field {key!r}")
            frames = record["frames"]
            widths = {len(row) for row in frames}
            if len(widths) > 1:
                raise DatasetFormatError(
                    f"{path}:{lineno}: ragged frame rows, widths {sorted(widths)}")
            try:
                glosses = vocab.to_indices(record["glosses"])
                samples.append(RawSample(record["id"], np.asarray(frames, dtype=np.float64),
                                         glosses))
            except ValueError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: {exc}") from exc
    return samples


def load_masks(path) -> dict[str, SegMask]:
    """Optional mask file: records with "id" and "mask" fields."""
    masks = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: not valid JSON: {exc}") from exc
            if "id" not in record or "mask" not in record:
                raise DatasetFormatError(f"{path}:{lineno}: need 'id' and 'mask' fields")
            try:
                masks[record["id"]] = SegMask(np.asarray(record["mask"], dtype=np.float64))
            except ValueError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: {exc}") from exc
    return masks


def mask_for(sample: RawSample, masks: dict[str, SegMask]) -> SegMask:
    """Look up a sample's mask; unmatched ids warn and fall back to identity."""
    found = masks.get(sample.id)
    if found is None:
        log.warning("no segmentation mask for %s; using identity", sample.id)
        return identity_mask(sample.frames.shape)
    return found
