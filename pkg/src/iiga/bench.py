"""Exact FLOP accounting and wall-clock benchmarks for the attention variants.

FLOP counts are pure integer tallies of multiply-adds (plus the additions for
chunk pooling), so they are platform-independent and asserted hard; wall
clock is machine noise and only ever warned about.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, asdict
from typing import Optional, Sequence

import numpy as np

from .attention import MODES, FeatureSequence, IIGAConfig, encode, make_chunks
from .numcore import RngStream, Var
from .trainer import Model

log = logging.getLogger(__name__)

SOFT_GATE_CHUNK_MULTIPLE = 16


@dataclass(frozen=True)
class FlopReport:
    """Exact multiply-add tallies for one attention application over T frames."""

    mode: str
    seq_len: int
    d_model: int
    chunk_size: int
    heads: int
    score_flops: int
    weighted_sum_flops: int
    projection_flops: int
    pooling_flops: int

    @property
    def total_flops(self) -> int:
        return (self.score_flops + self.weighted_sum_flops
                + self.projection_flops + self.pooling_flops)

    def as_dict(self) -> dict:
        out = asdict(self)
        out["total_flops"] = self.total_flops
        return out


def flop_count(seq_len: int, d_model: int, chunk_size: int, heads: int,
               mode: str, stride: Optional[int] = None) -> FlopReport:
    """Tally multiply-adds for one attention sublayer in the given mode.

    Projections (q, k, v, output) cost 4*T*D^2. Scores and the weighted sum
    each cost D per query-key pair: T^2 pairs for full attention, sum of
    squared chunk lengths for chunked attention. The pooled chunk-level
    attention adds its own projections and C^2 pairs plus T*D pooling adds.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if seq_len < 1 or d_model < 1 or chunk_size < 1 or heads < 1:
        raise ValueError("all benchmark dimensions must be positive")
    if mode != "vanilla" and chunk_size > seq_len:
        raise ValueError(f"chunk_size {chunk_size} exceeds sequence length {seq_len}")
    projection = 4 * seq_len * d_model * d_model
    pooling = 0
    if mode == "vanilla":
        pairs = seq_len * seq_len
    else:
        plan = make_chunks(seq_len, chunk_size, stride if stride else chunk_size)
        pairs = sum((stop - start) ** 2 for start, stop in plan.intervals)
        if mode == "intra_inter":
            n_chunks = len(plan)
            projection += 4 * n_chunks * d_model * d_model
            pairs += n_chunks * n_chunks
            pooling = seq_len * d_model
    return FlopReport(mode, seq_len, d_model, chunk_size, heads,
                      score_flops=pairs * d_model,
                      weighted_sum_flops=pairs * d_model,
                      projection_flops=projection,
                      pooling_flops=pooling)


@dataclass(frozen=True)
class ModeTiming:
    median_s: float
    mad_s: float
    samples: tuple[float, ...]


@dataclass
class BenchEntry:
    seq_len: int
    flops: dict[str, FlopReport]
    timings: dict[str, ModeTiming]
    speedup_vs_vanilla: dict[str, float]


@dataclass
class BenchReport:
    d_model: int
    heads: int
    chunk_size: int
    n_blocks: int
    repetitions: int
    entries: list[BenchEntry]


def _median_mad(samples: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(samples)
    med = float(np.median(arr))
    return med, float(np.median(np.abs(arr - med)))


def bench_attention(cfg: IIGAConfig, sizes: Sequence[int], repetitions: int = 20,
                    warmup: int = 3, seed: int = 0) -> BenchReport:
    """Time forward-only encoding per mode and size; FLOP fields are exact.

    Asserts (softly: a warning, never a failure) that chunked attention is no
    slower than full attention once sequences reach 16 chunks.
    """
    if not sizes:
        raise ValueError("need at least one sequence length")
    if repetitions < 20:
        raise ValueError("timing contract requires >= 20 repetitions")
    rng = RngStream(seed)
    entries = []
    for seq_len in sizes:
        flops: dict[str, FlopReport] = {}
        timings: dict[str, ModeTiming] = {}
        data = rng.normal(size=(seq_len, cfg.d_model))
        for mode in MODES:
            mode_cfg = IIGAConfig(**{**asdict(cfg), "attention_mode": mode,
                                     "dropout": 0.0})
            model = Model.build(mode_cfg, cfg.d_model, 4, RngStream(seed))
            seq = FeatureSequence(Var(data), seq_len)

            def run():
                encode(seq, model.blocks, mode_cfg, None, training=False)

            for _ in range(warmup):
                run()
            samples = []
            for _ in range(repetitions):
                t0 = time.perf_counter()
                run()
                samples.append(time.perf_counter() - t0)
            med, mad = _median_mad(samples)
            timings[mode] = ModeTiming(med, mad, tuple(samples))
            flops[mode] = flop_count(seq_len, cfg.d_model, cfg.chunk_size,
                                     cfg.heads, mode)
        vanilla_med = timings["vanilla"].median_s
        speedups = {mode: vanilla_med / timings[mode].median_s for mode in MODES}
        if seq_len >= SOFT_GATE_CHUNK_MULTIPLE * cfg.chunk_size \
                and timings["intra"].median_s > vanilla_med:
            log.warning(
                "soft gate: intra median %.6fs exceeds vanilla %.6fs at T=%d",
                timings["intra"].median_s, vanilla_med, seq_len)
        entries.append(BenchEntry(seq_len, flops, timings, speedups))
    return BenchReport(cfg.d_model, cfg.heads, cfg.chunk_size, cfg.n_blocks,
                       repetitions, entries)


def format_table(report: BenchReport) -> str:
    lines = [
        f"# attention benchmark: d_model={report.d_model} heads={report.heads} "
        f"chunk_size={report.chunk_size} n_blocks={report.n_blocks} "
        f"reps={report.repetitions}",
        "T\tmode\ttotal_flops\tscore_flops\tmedian_s\tmad_s\tspeedup_vs_vanilla",
    ]
    for entry in report.entries:
        for mode in MODES:
            fl = entry.flops[mode]
            tm = entry.timings[mode]
            lines.append(
                f"{entry.seq_len}\t{mode}\t{fl.total_flops}\t{fl.score_flops}"
                f"\t{tm.median_s:.6f}\t{tm.mad_s:.6f}\t{entry.speedup_vs_vanilla[mode]:.3f}")
    return "\n".join(lines) + "\n"


def report_payload(report: BenchReport) -> dict:
    """Machine-readable form, raw timing samples included for auditability."""
    return {
        "d_model": report.d_model,
        "heads": report.heads,
        "chunk_size": report.chunk_size,
        "n_blocks": report.n_blocks,
        "repetitions": report.repetitions,
        "entries": [
            {
                "seq_len": entry.seq_len,
                "flops": {mode: fl.as_dict() for mode, fl in entry.flops.items()},
                "timings": {mode: {"median_s": tm.median_s, "mad_s": tm.mad_s,
                                   "samples": list(tm.samples)}
                            for mode, tm in entry.timings.items()},
                "speedup_vs_vanilla": entry.speedup_vs_vanilla,
            }
            for entry in report.entries
        ],
    }
