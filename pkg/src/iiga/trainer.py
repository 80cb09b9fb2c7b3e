"""Optimization loop: Xavier init, Adam with coupled weight decay, milestone
LR schedule, global-norm gradient clipping, per-epoch evaluation, and
text-format checkpoints.

The model bundles the frame embedding, the encoder blocks, and the frame
classifier; a training step (forward, backward, clip, Adam) is one logical
critical section over the parameter set.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .attention import (
    AttentionParams,
    BlockParams,
    FeatureSequence,
    IIGAConfig,
    embed_frames,
    encode,
)
from .ctc import GlossSeq, LogProbMatrix, ctc_loss, frame_log_probs, greedy_decode
from .dataio import InfeasibleAfterDropError, RawSample, frame_drop, pad_batch
from .metrics import wer
from .numcore import Parameter, RngStream, Var, backward, mean_scalars

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "iiga-ckpt-v1"

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class PoisonedStepError(RuntimeError):
    """An optimizer step saw a non-finite gradient and was refused."""


class EmptyEpochError(RuntimeError):
    """Every sample of an epoch was skipped."""


class CheckpointError(ValueError):
    """A checkpoint file failed validation."""


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    milestones: tuple[int, ...] = (15,)
    lr_factor: float = 0.1
    clip_threshold: float = 1.0
    batch_size: int = 2
    epochs: int = 30
    dropout: float = 0.1
    drop_ratio: float = 0.5
    seed: int = 0


def xavier_init(shape: tuple[int, int], rng: RngStream) -> np.ndarray:
    """Glorot uniform: U(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    fan_in, fan_out = shape
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"bad fan shape {shape}")
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Base LR decayed by lr_factor once per milestone already reached."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    passed = sum(1 for m in cfg.milestones if m <= epoch)
    return cfg.lr * cfg.lr_factor ** passed


def clip_gradients(grads: Sequence[np.ndarray], threshold: float) -> list[np.ndarray]:
    """Scale all gradients so the global L2 norm never exceeds `threshold`."""
    if threshold <= 0:
        raise ValueError("clip threshold must be > 0")
    norm = np.sqrt(sum(float((g * g).sum()) for g in grads))
    if norm > threshold:
        factor = threshold / norm
        for g in grads:
            g *= factor
    return list(grads)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Parameter]) -> "OptimizerState":
        return cls({p.name: np.zeros_like(p.value) for p in params},
                   {p.name: np.zeros_like(p.value) for p in params})


def adam_step(params: Sequence[Parameter], grads: Sequence[np.ndarray],
              state: OptimizerState, lr: float, weight_decay: float) -> None:
    """One bias-corrected Adam update; weight decay joins the gradient as L2."""
    for p, g in zip(params, grads):
        if not np.isfinite(g).all():
            raise PoisonedStepError(f"non-finite gradient for {p.name}; step refused")
    state.t += 1
    t = state.t
    for p, g in zip(params, grads):
        if weight_decay:
            g = g + weight_decay * p.value
        m = state.m[p.name]
        v = state.v[p.name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        m_hat = m / (1.0 - ADAM_BETA1 ** t)
        v_hat = v / (1.0 - ADAM_BETA2 ** t)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


# ---------------------------------------------------------------------------
# model assembly
# ---------------------------------------------------------------------------

def _attention_params(prefix: str, cfg: IIGAConfig, rng: RngStream) -> AttentionParams:
    d = cfg.d_model
    return AttentionParams(
        w_q=Parameter(f"{prefix}.w_q", xavier_init((d, d), rng)),
        w_k=Parameter(f"{prefix}.w_k", xavier_init((d, d), rng)),
        w_v=Parameter(f"{prefix}.w_v", xavier_init((d, d), rng)),
        w_o=Parameter(f"{prefix}.w_o", xavier_init((d, d), rng)),
        rel_bias=Parameter(f"{prefix}.rel_bias",
                           np.zeros((cfg.heads, 2 * cfg.rel_clip + 1))))


def _norm_params(prefix: str, d: int) -> tuple[Parameter, Parameter]:
    return (Parameter(f"{prefix}.gamma", np.ones((1, d))),
            Parameter(f"{prefix}.beta", np.zeros((1, d))))


class Model:
    """Frame embedding, encoder stack, and frame-level gloss classifier."""

    def __init__(self, cfg: IIGAConfig, frame_w: int, vocab_size: int,
                 embed_w: Parameter, embed_b: Parameter,
                 blocks: list[BlockParams], cls_w: Parameter, cls_b: Parameter):
        self.cfg = cfg
        self.frame_w = frame_w
        self.vocab_size = vocab_size
        self.embed_w = embed_w
        self.embed_b = embed_b
        self.blocks = blocks
        self.cls_w = cls_w
        self.cls_b = cls_b

    @classmethod
    def build(cls, cfg: IIGAConfig, frame_w: int, vocab_size: int,
              rng: RngStream) -> "Model":
        d = cfg.d_model
        embed_w = Parameter("embed.weight", xavier_init((frame_w, d), rng))
        embed_b = Parameter("embed.bias", np.zeros((1, d)))
        blocks = []
        for i in range(cfg.n_blocks):
            prefix = f"block{i}"
            inter = norm2 = None
            if cfg.attention_mode == "intra_inter":
                inter = _attention_params(f"{prefix}.inter", cfg, rng)
                norm2 = _norm_params(f"{prefix}.norm2", d)
            blocks.append(BlockParams(
                intra=_attention_params(f"{prefix}.intra", cfg, rng),
                ffn=(Parameter(f"{prefix}.ffn.w1", xavier_init((d, cfg.d_ff), rng)),
                     Parameter(f"{prefix}.ffn.b1", np.zeros((1, cfg.d_ff))),
                     Parameter(f"{prefix}.ffn.w2", xavier_init((cfg.d_ff, d), rng)),
                     Parameter(f"{prefix}.ffn.b2", np.zeros((1, d)))),
                norm1=_norm_params(f"{prefix}.norm1", d),
                norm3=_norm_params(f"{prefix}.norm3", d),
                inter=inter,
                norm2=norm2))
        cls_w = Parameter("classifier.weight", xavier_init((d, vocab_size + 1), rng))
        cls_b = Parameter("classifier.bias", np.zeros((1, vocab_size + 1)))
        return cls(cfg, frame_w, vocab_size, embed_w, embed_b, blocks, cls_w, cls_b)

    def parameters(self) -> list[Parameter]:
        out = [self.embed_w, self.embed_b]
        for bp in self.blocks:
            out += [bp.intra.w_q, bp.intra.w_k, bp.intra.w_v, bp.intra.w_o,
                    bp.intra.rel_bias]
            if bp.inter is not None:
                out += [bp.inter.w_q, bp.inter.w_k, bp.inter.w_v, bp.inter.w_o,
                        bp.inter.rel_bias]
            out += list(bp.ffn)
            out += list(bp.norm1)
            if bp.norm2 is not None:
                out += list(bp.norm2)
            out += list(bp.norm3)
        out += [self.cls_w, self.cls_b]
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def forward(self, frames: np.ndarray, valid_len: Optional[int] = None,
                rng: Optional[RngStream] = None, training: bool = False) -> LogProbMatrix:
        seq = embed_frames(frames, self.embed_w, self.embed_b, valid_len)
        seq = encode(seq, self.blocks, self.cfg, rng, training)
        return frame_log_probs(seq, self.cls_w, self.cls_b)


# ---------------------------------------------------------------------------
# training / evaluation
# ---------------------------------------------------------------------------

@dataclass
class EpochSummary:
    mean_loss: float
    n_samples: int
    n_skipped: int


def train_epoch(model: Model, dataset: Sequence[RawSample], cfg: TrainConfig,
                state: OptimizerState, epoch: int, rng: RngStream) -> EpochSummary:
    """One pass: shuffle, drop frames, pad, CTC loss, backward, clip, Adam."""
    if not dataset:
        raise ValueError("dataset is empty")
    shuffle_rng = rng.derive("shuffle")
    drop_rng = rng.derive("frame-drop")
    dropout_rng = rng.derive("dropout")
    order = shuffle_rng.permutation(len(dataset))
    lr = lr_at(epoch, cfg)
    params = model.parameters()

    loss_total = 0.0
    n_used = 0
    n_skipped = 0
    for lo in range(0, len(order), cfg.batch_size):
        chosen = [dataset[i] for i in order[lo:lo + cfg.batch_size]]
        kept = []
        for sample in chosen:
            try:
                kept.append(frame_drop(sample, cfg.drop_ratio, drop_rng, "train"))
            except InfeasibleAfterDropError as exc:
                n_skipped += 1
                log.warning("skipping %s: %s", sample.id, exc)
        if not kept:
            continue
        batch = pad_batch(kept)
        losses = []
        for b in range(batch.size):
            lp = model.forward(batch.sequence(b), batch.lengths[b],
                               dropout_rng, training=True)
            losses.append(ctc_loss(lp, batch.glosses[b]))
        total = mean_scalars(losses)
        model.zero_grad()
        backward(total)
        grads = clip_gradients([p.grad for p in params], cfg.clip_threshold)
        adam_step(params, grads, state, lr, cfg.weight_decay)
        loss_total += float(total.value) * batch.size
        n_used += batch.size

    if n_used == 0:
        raise EmptyEpochError(f"all {n_skipped} samples skipped in epoch {epoch}")
    return EpochSummary(loss_total / n_used, n_used, n_skipped)


def evaluate(model: Model, dataset: Sequence[RawSample],
             cfg: TrainConfig) -> tuple[float, list[tuple[str, GlossSeq, GlossSeq]]]:
    """Deterministic pass: test-mode frame drop, no dropout, greedy decode, corpus WER."""
    if not dataset:
        raise ValueError("dataset is empty")
    decodes = []
    for sample in dataset:
        kept = frame_drop(sample, cfg.drop_ratio, None, "test")
        lp = model.forward(kept.frames, training=False)
        decodes.append((sample.id, sample.glosses, greedy_decode(lp)))
    score = wer([(ref, hyp) for _, ref, hyp in decodes])
    return score, decodes


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    lr: float
    dev_wer: float
    seconds: float

    def log_line(self) -> str:
        return (f"{self.epoch}\t{self.mean_loss!r}\t{self.lr!r}"
                f"\t{self.dev_wer!r}\t{self.seconds:.3f}")


def train(model: Model, train_set: Sequence[RawSample], dev_set: Sequence[RawSample],
          cfg: TrainConfig, log_path=None, ckpt_path=None) -> list[EpochRecord]:
    """Full run; checkpoints the best-dev model, one tab-separated log line per epoch."""
    rng = RngStream(cfg.seed)
    state = OptimizerState.for_params(model.parameters())
    history: list[EpochRecord] = []
    best = np.inf
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            started = time.perf_counter()
            summary = train_epoch(model, train_set, cfg, state, epoch,
                                  rng.derive(f"epoch:{epoch}"))
            dev_wer, _ = evaluate(model, dev_set, cfg)
            record = EpochRecord(epoch, summary.mean_loss, lr_at(epoch, cfg),
                                 dev_wer, time.perf_counter() - started)
            history.append(record)
            if log_fh:
                log_fh.write(record.log_line() + "\n")
                log_fh.flush()
            log.info("epoch %d: loss %.4f, dev WER %.4f", epoch, summary.mean_loss, dev_wer)
            if dev_wer < best:
                best = dev_wer
                if ckpt_path:
                    save_checkpoint(ckpt_path, model, state, cfg, epoch, best)
    finally:
        if log_fh:
            log_fh.close()
    return history


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _pack(array: np.ndarray) -> dict:
    return {"shape": list(array.shape), "values": array.ravel().tolist()}


def _unpack(obj: dict) -> np.ndarray:
    return np.asarray(obj["values"], dtype=np.float64).reshape(obj["shape"])


def save_checkpoint(path, model: Model, state: OptimizerState, cfg: TrainConfig,
                    epoch: int, best_dev_wer: float) -> None:
    params = model.parameters()
    payload = {
        "format": CHECKPOINT_FORMAT,
        "epoch": epoch,
        "best_dev_wer": best_dev_wer,
        "model": {
            "frame_w": model.frame_w,
            "vocab_size": model.vocab_size,
            "config": asdict(model.cfg),
        },
        "train_config": {**asdict(cfg), "milestones": list(cfg.milestones)},
        "params": {p.name: _pack(p.value) for p in params},
        "opt": {
            "t": state.t,
            "m": {name: _pack(arr) for name, arr in state.m.items()},
            "v": {name: _pack(arr) for name, arr in state.v.items()},
        },
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_checkpoint(path) -> tuple[Model, OptimizerState, TrainConfig, int, float]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(
            f"{path}: format tag {payload.get('format')!r} != {CHECKPOINT_FORMAT!r}")
    model_info = payload["model"]
    cfg = IIGAConfig(**model_info["config"])
    model = Model.build(cfg, model_info["frame_w"], model_info["vocab_size"],
                        RngStream(0))
    stored = payload["params"]
    for p in model.parameters():
        if p.name not in stored:
            raise CheckpointError(f"{path}: missing parameter {p.name}")
        value = _unpack(stored[p.name])
        if value.shape != p.value.shape:
            raise CheckpointError(
                f"{path}: {p.name} shape {value.shape} != expected {p.value.shape}")
        p.value[:] = value
    opt = payload["opt"]
    state = OptimizerState(
        m={name: _unpack(obj) for name, obj in opt["m"].items()},
        v={name: _unpack(obj) for name, obj in opt["v"].items()},
        t=opt["t"])
    tc = payload["train_config"]
    tc["milestones"] = tuple(tc["milestones"])
    train_cfg = TrainConfig(**tc)
    return model, state, train_cfg, payload["epoch"], payload["best_dev_wer"]
