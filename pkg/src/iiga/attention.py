"""Sequential module: frame embedding, multi-head self-attention, and the
chunked intra-gloss / pooled inter-gloss attention encoder stack.

Intra-gloss attention runs self-attention inside fixed-size temporal chunks,
so each frame only mixes with frames of (roughly) the same gloss. Inter-gloss
attention average-pools each chunk to one vector, attends across chunks, and
broadcasts the result back over time as a residual increment.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .numcore import (
    DimensionError,
    Parameter,
    RngStream,
    Var,
    add,
    add_n,
    as_var,
    col_slice,
    concat_cols,
    dropout,
    feed_forward,
    gather_bias,
    layer_norm,
    linear,
    matmul,
    pad_rows,
    row_scale,
    row_slice,
    scale,
    softmax_rows,
)

MODES = ("vanilla", "intra", "intra_inter")


class ConfigurationError(ValueError):
    """Structural hyper-parameters are inconsistent."""


class EmptySequenceError(ValueError):
    """A chunk plan was requested for a zero-length sequence."""


@dataclass
class FeatureSequence:
    """A (T_max x D) feature matrix with an explicit valid length.

    Rows at index >= valid_len are padding; no operation lets them influence
    rows inside the valid range.
    """

    features: Var
    valid_len: int

    def __post_init__(self):
        self.features = as_var(self.features)
        if not 0 <= self.valid_len <= self.features.value.shape[0]:
            raise DimensionError(
                f"valid_len {self.valid_len} outside 0..{self.features.value.shape[0]}")

    @property
    def array(self) -> np.ndarray:
        return self.features.value


@dataclass(frozen=True)
class ChunkPlan:
    """Ordered half-open frame intervals covering [0, valid_len)."""

    intervals: tuple[tuple[int, int], ...]
    chunk_size: int
    stride: int

    def __post_init__(self):
        last_start = -1
        for start, stop in self.intervals:
            if not (0 <= start < stop):
                raise ConfigurationError(f"bad interval ({start}, {stop})")
            if stop - start > self.chunk_size:
                raise ConfigurationError(f"interval ({start}, {stop}) longer than {self.chunk_size}")
            if start <= last_start:
                raise ConfigurationError("intervals must be sorted by start")
            last_start = start

    def __len__(self) -> int:
        return len(self.intervals)


def make_chunks(valid_len: int, chunk_size: int, stride: int) -> ChunkPlan:
    """Tile [0, valid_len) with windows of length chunk_size every `stride` frames.

    With stride == chunk_size the windows partition the range exactly; a short
    final window is kept at its natural length rather than padded.
    """
    if valid_len <= 0:
        raise EmptySequenceError("cannot chunk an empty sequence")
    if chunk_size < 1:
        raise ConfigurationError(f"chunk_size must be >= 1, got {chunk_size}")
    if not 1 <= stride <= chunk_size:
        raise ConfigurationError(f"stride must be in 1..chunk_size, got {stride}")
    intervals = []
    start = 0
    while start < valid_len:
        intervals.append((start, min(start + chunk_size, valid_len)))
        start += stride
    return ChunkPlan(tuple(intervals), chunk_size, stride)


@dataclass
class AttentionParams:
    """Projections for one multi-head attention sublayer.

    rel_bias is a per-head additive logit bias indexed by clipped signed
    distance: row i holds head i's biases for distances -R..R.
    """

    w_q: Parameter
    w_k: Parameter
    w_v: Parameter
    w_o: Parameter
    rel_bias: Parameter

    @property
    def rel_clip(self) -> int:
        return (self.rel_bias.value.shape[1] - 1) // 2


@dataclass
class BlockParams:
    """All learnables of one encoder block; inter/norm2 absent outside intra_inter mode."""

    intra: AttentionParams
    ffn: tuple[Parameter, Parameter, Parameter, Parameter]
    norm1: tuple[Parameter, Parameter]
    norm3: tuple[Parameter, Parameter]
    inter: Optional[AttentionParams] = None
    norm2: Optional[tuple[Parameter, Parameter]] = None


@dataclass
class IIGAConfig:
    """Structural hyper-parameters of the encoder stack.

    rel_clip defaults to the chunk size. attention_mode selects the ablation
    variant: plain full-sequence attention, chunked intra only, or chunked
    intra plus pooled inter attention.
    """

    n_blocks: int = 2
    heads: int = 4
    d_model: int = 64
    d_ff: int = 128
    chunk_size: int = 12
    stride: int = 12
    dropout: float = 0.1
    rel_clip: Optional[int] = None
    attention_mode: str = "intra_inter"

    def __post_init__(self):
        if self.rel_clip is None:
            self.rel_clip = self.chunk_size
        if self.d_model % self.heads:
            raise ConfigurationError(
                f"d_model {self.d_model} not divisible by {self.heads} heads")
        if not 1 <= self.stride <= self.chunk_size:
            raise ConfigurationError(
                f"stride {self.stride} must be in 1..chunk_size {self.chunk_size}")
        if self.attention_mode not in MODES:
            raise ConfigurationError(
                f"attention_mode must be one of {MODES}, got {self.attention_mode!r}")


def full_scale_config(**overrides) -> IIGAConfig:
    """Hyper-parameters at the published operating point (hidden size 1280)."""
    base = dict(n_blocks=2, heads=8, d_model=1280, d_ff=2048, chunk_size=12, stride=12,
                dropout=0.1)
    base.update(overrides)
    return IIGAConfig(**base)


def embed_frames(raw, embed: Parameter, bias: Optional[Parameter] = None,
                 valid_len: Optional[int] = None) -> FeatureSequence:
    """Map raw per-frame features into the model width with a learned linear map."""
    features = linear(raw, embed, bias)
    rows = features.value.shape[0]
    return FeatureSequence(features, rows if valid_len is None else valid_len)


def _distance_index(n_query: int, n_key: int, clip: int) -> np.ndarray:
    rel = np.arange(n_key)[None, :] - np.arange(n_query)[:, None]
    return np.clip(rel, -clip, clip) + clip


def scaled_dot_attention(q, k, v, mask: Optional[np.ndarray] = None,
                         rel_bias_slice: Optional[Var] = None) -> Var:
    """softmax(q kT / sqrt(width) + distance bias) @ v for one head."""
    q, k, v = as_var(q), as_var(k), as_var(v)
    if q.value.shape[0] != k.value.shape[0] or k.value.shape[0] != v.value.shape[0]:
        raise DimensionError("scaled_dot_attention: q, k, v row counts differ")
    if q.value.shape[1] != k.value.shape[1]:
        raise DimensionError("scaled_dot_attention: q and k widths differ")
    width = q.value.shape[1]
    scores = scale(matmul(q, Var(k.value.T, (k,), lambda g: (g.T,))), 1.0 / np.sqrt(width))
    if rel_bias_slice is not None:
        clip = (rel_bias_slice.value.shape[1] - 1) // 2
        idx = _distance_index(q.value.shape[0], k.value.shape[0], clip)
        scores = add(scores, gather_bias(rel_bias_slice, idx))
    weights = softmax_rows(scores, mask)
    return matmul(weights, v)


def multi_head_attention(x, params: AttentionParams, heads: int,
                         mask: Optional[np.ndarray] = None) -> Var:
    """Standard MSA: per-head slices of shared q/k/v projections, concat, output map."""
    x = as_var(x)
    d = x.value.shape[1]
    if d % heads:
        raise ConfigurationError(f"width {d} not divisible by {heads} heads")
    head_w = d // heads
    q = linear(x, params.w_q)
    k = linear(x, params.w_k)
    v = linear(x, params.w_v)
    bias_table = params.rel_bias.var()
    outputs = []
    for i in range(heads):
        lo, hi = i * head_w, (i + 1) * head_w
        outputs.append(scaled_dot_attention(
            col_slice(q, lo, hi), col_slice(k, lo, hi), col_slice(v, lo, hi),
            mask=mask, rel_bias_slice=row_slice(bias_table, i, i + 1)))
    return linear(concat_cols(outputs), params.w_o)


def _coverage(plan: ChunkPlan, rows: int) -> np.ndarray:
    cover = np.zeros(rows)
    for start, stop in plan.intervals:
        cover[start:stop] += 1.0
    return cover


def intra_gloss_attention(seq: FeatureSequence, params: AttentionParams,
                          plan: ChunkPlan, heads: int) -> FeatureSequence:
    """Self-attention inside each chunk; frames never see across chunk borders.

    With overlapping chunks a frame's outputs are averaged; padding rows pass
    through unchanged.
    """
    x = seq.features
    rows = x.value.shape[0]
    cover = _coverage(plan, rows)
    if (cover[:seq.valid_len] == 0).any():
        raise ConfigurationError("chunk plan does not cover the valid range")
    pieces = []
    for start, stop in plan.intervals:
        out_c = multi_head_attention(row_slice(x, start, stop), params, heads)
        pieces.append(pad_rows(out_c, start, rows))
    averaged = row_scale(add_n(pieces), np.where(cover > 0, 1.0 / np.maximum(cover, 1.0), 0.0))
    passthrough = row_scale(x, (cover == 0).astype(float))
    return FeatureSequence(add(averaged, passthrough), seq.valid_len)


def inter_gloss_broadcast(seq: FeatureSequence, params: AttentionParams,
                          plan: ChunkPlan, heads: int) -> Var:
    """The chunk-level attention term, broadcast back over time.

    Each chunk is mean-pooled to one vector, MSA runs across the pooled
    vectors, and chunk c's output is replicated onto every frame of chunk c
    (averaged where chunks overlap). Rows outside every chunk get zeros.
    """
    if not plan.intervals:
        raise ConfigurationError("inter-gloss attention needs a non-empty chunk plan")
    x = seq.features
    rows = x.value.shape[0]
    intervals = plan.intervals

    def pool_vjp(g):
        full = np.zeros_like(x.value)
        for c, (start, stop) in enumerate(intervals):
            full[start:stop] += g[c] / (stop - start)
        return (full,)

    pooled = Var(np.stack([x.value[s:e].mean(axis=0) for s, e in intervals]), (x,), pool_vjp)
    att = multi_head_attention(pooled, params, heads)

    cover = _coverage(plan, rows)
    inv_cover = np.where(cover > 0, 1.0 / np.maximum(cover, 1.0), 0.0)

    def broadcast_vjp(g):
        gw = g * inv_cover[:, None]
        return (np.stack([gw[s:e].sum(axis=0) for s, e in intervals]),)

    spread = np.zeros_like(x.value)
    for c, (start, stop) in enumerate(intervals):
        spread[start:stop] += att.value[c]
    spread *= inv_cover[:, None]
    return Var(spread, (att,), broadcast_vjp)


def inter_gloss_attention(seq: FeatureSequence, params: AttentionParams,
                          plan: ChunkPlan, heads: int) -> FeatureSequence:
    """seq plus the broadcast chunk-attention term (element-wise residual)."""
    increment = inter_gloss_broadcast(seq, params, plan, heads)
    return FeatureSequence(add(seq.features, increment), seq.valid_len)


def _block_plans(valid_len: int, cfg: IIGAConfig) -> tuple[ChunkPlan, ChunkPlan]:
    """(plan for the first attention sublayer, plan for pooling)."""
    chunked = make_chunks(valid_len, cfg.chunk_size, cfg.stride)
    if cfg.attention_mode == "vanilla":
        whole = ChunkPlan(((0, valid_len),), valid_len, valid_len)
        return whole, chunked
    return chunked, chunked


def iiga_block(seq: FeatureSequence, bp: BlockParams, cfg: IIGAConfig,
               rng: Optional[RngStream], training: bool) -> FeatureSequence:
    """One encoder block, post-norm ordering: sublayer, dropout, add, normalize."""
    frame_plan, pool_plan = _block_plans(seq.valid_len, cfg)
    rate = cfg.dropout

    sub1 = intra_gloss_attention(seq, bp.intra, frame_plan, cfg.heads).features
    x1 = layer_norm(add(seq.features, dropout(sub1, rate, rng, training)), *bp.norm1)

    if cfg.attention_mode == "intra_inter":
        if bp.inter is None or bp.norm2 is None:
            raise ConfigurationError("intra_inter mode requires inter params and norm2")
        increment = inter_gloss_broadcast(
            FeatureSequence(x1, seq.valid_len), bp.inter, pool_plan, cfg.heads)
        x2 = layer_norm(add(x1, dropout(increment, rate, rng, training)), *bp.norm2)
    else:
        x2 = x1

    sub3 = feed_forward(x2, *bp.ffn)
    x3 = layer_norm(add(x2, dropout(sub3, rate, rng, training)), *bp.norm3)
    return FeatureSequence(x3, seq.valid_len)


def encode(seq: FeatureSequence, blocks: Sequence[BlockParams], cfg: IIGAConfig,
           rng: Optional[RngStream] = None, training: bool = False) -> FeatureSequence:
    """Fold the encoder blocks over the sequence; each block re-derives its chunk plan."""
    if len(blocks) != cfg.n_blocks:
        raise ConfigurationError(f"{len(blocks)} blocks for n_blocks={cfg.n_blocks}")
    for bp in blocks:
        seq = iiga_block(seq, bp, cfg, rng, training)
    return seq
