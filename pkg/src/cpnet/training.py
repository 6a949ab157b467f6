"""Clip sampling, L2 prediction loss, Adam + cosine schedule, training loop."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import serialize
from .models import ModelGraph, forward_predict
from .synth import FrameSequence
from .tensor import Tensor

log = logging.getLogger(__name__)

PRECISIONS = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch: int = 4
    epochs: int = 10
    seed: int = 0
    precision: str = "float32"
    loss_reduction: str = "sum"

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0 <= v < 1:
                raise ValueError(f"{name} must lie in [0, 1), got {v}")
        if self.batch < 1 or self.epochs < 1:
            raise ValueError("batch and epochs must be >= 1")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")
        if self.loss_reduction not in ("sum", "mean"):
            raise ValueError("loss_reduction must be 'sum' or 'mean'")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]


@dataclass(frozen=True)
class Clip:
    inputs: tuple[np.ndarray, ...]
    target: np.ndarray
    target_index: int


def make_clips(video: FrameSequence | np.ndarray, window: int = 4) -> list[Clip]:
    """Stride-1 sliding windows: frames ``[k, k+window)`` predict frame ``k+window``."""
    frames = video.frames if isinstance(video, FrameSequence) else np.asarray(video)
    return [
        Clip(tuple(frames[k : k + window]), frames[k + window], k + window)
        for k in range(len(frames) - window)
    ]


def stack_batch(clips: Sequence[Clip], dtype=np.float32) -> tuple[list[Tensor], Tensor]:
    window = len(clips[0].inputs)
    inputs = [Tensor(np.stack([c.inputs[i] for c in clips]).astype(dtype, copy=False)) for i in range(window)]
    target = Tensor(np.stack([c.target for c in clips]).astype(dtype, copy=False))
    return inputs, target


def loss_l2(pred: Tensor, target: Tensor, reduction: str = "sum") -> Tensor:
    """Squared L2 distance; ``sum`` is the plain norm, ``mean`` divides by element count."""
    if pred.shape != target.shape:
        raise ValueError(f"loss_l2: prediction {pred.shape} vs target {target.shape}")
    diff = pred - target
    sq = diff * diff
    if reduction == "sum":
        return sq.sum()
    if reduction == "mean":
        return sq.mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def cosine_lr(epoch: int, cfg: TrainConfig) -> float:
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return cfg.lr0 * (1 + math.cos(math.pi * epoch / cfg.epochs)) / 2


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray | None],
    state: AdamState,
    lr: float,
    cfg: TrainConfig,
) -> AdamState:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and moments must align")
    for g in grads:
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient in adam_step")
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"grad shape {g.shape} vs param {p.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)).astype(p.dtype, copy=False)
    return state


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    adam: AdamState
    epoch: int  # epochs completed
    loss_history: list[float] = field(default_factory=list)
    meta: dict[str, str] = field(default_factory=dict)

    def save(self, path: str | os.PathLike) -> None:
        arrays = {f"param/{k}": v for k, v in self.params.items()}
        names = list(self.params)
        arrays.update({f"adam_m/{k}": m for k, m in zip(names, self.adam.m)})
        arrays.update({f"adam_v/{k}": v for k, v in zip(names, self.adam.v)})
        arrays["loss_history"] = np.asarray(self.loss_history, dtype=np.float64)
        meta = dict(self.meta, epoch=str(self.epoch), adam_step=str(self.adam.step))
        serialize.save(path, arrays, meta)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Checkpoint":
        arrays, meta = serialize.load(path)
        names = [k.split("/", 1)[1] for k in arrays if k.startswith("param/")]
        params = {k: arrays[f"param/{k}"] for k in names}
        adam = AdamState([arrays[f"adam_m/{k}"] for k in names], [arrays[f"adam_v/{k}"] for k in names],
                         int(meta.pop("adam_step", 0)))
        epoch = int(meta.pop("epoch", 0))
        return cls(params, adam, epoch, [float(x) for x in arrays.get("loss_history", [])], meta)


class TrainingDiverged(RuntimeError):
    pass


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch])).permutation(n)


def train(
    model: ModelGraph,
    clips: Sequence[Clip],
    cfg: TrainConfig,
    resume: Checkpoint | None = None,
    log_path: str | os.PathLike | None = None,
    epochs: int | None = None,
) -> Checkpoint:
    """Train ``model`` in place and return the final checkpoint.

    Batch order for epoch ``e`` depends only on ``(cfg.seed, e)``, so a
    resumed run replays exactly the batches an uninterrupted run would.
    ``epochs`` caps how many epochs run in this call (the schedule still
    spans ``cfg.epochs``).
    """
    if not clips:
        raise ValueError("train: no clips")
    names = [n for n, _ in model.named_parameters()]
    params = model.parameters()
    dtype = cfg.dtype
    if any(p.dtype != dtype for p in params):
        raise ValueError(f"model parameters are not {cfg.precision}")
    if resume is not None:
        model.load_state_dict(resume.params)
        state = AdamState([m.astype(dtype) for m in resume.adam.m], [v.astype(dtype) for v in resume.adam.v],
                          resume.adam.step)
        start, history = resume.epoch, list(resume.loss_history)
    else:
        state = AdamState.zeros_like([p.data for p in params])
        start, history = 0, []
    stop = cfg.epochs if epochs is None else min(cfg.epochs, start + epochs)
    log_file = open(log_path, "a") if log_path is not None else None
    try:
        for epoch in range(start, stop):
            lr = cosine_lr(epoch, cfg)
            order = epoch_order(len(clips), cfg.seed, epoch)
            total = 0.0
            for lo in range(0, len(order), cfg.batch):
                batch = [clips[i] for i in order[lo : lo + cfg.batch]]
                inputs, target = stack_batch(batch, dtype)
                model.zero_grad()
                loss = loss_l2(forward_predict(model, inputs), target, cfg.loss_reduction)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingDiverged(
                        f"loss became {value} at epoch {epoch}, step {state.step + 1} (lr {lr:.3g})"
                    )
                loss.backward()
                adam_step([p.data for p in params], [p.grad for p in params], state, lr, cfg)
                # per-clip average: sum-reduced batches hold one term per clip
                total += value * len(batch) if cfg.loss_reduction == "mean" else value
            mean_loss = total / len(order)
            history.append(mean_loss)
            log.info("epoch %d lr %.6g loss %.6f", epoch, lr, mean_loss)
            if log_file is not None:
                log_file.write(f"epoch={epoch} lr={lr:.9g} mean_loss={mean_loss:.9g}\n")
                log_file.flush()
    finally:
        if log_file is not None:
            log_file.close()
    model.zero_grad()
    return Checkpoint({n: p.data.copy() for n, p in zip(names, params)},
                      AdamState([m.copy() for m in state.m], [v.copy() for v in state.v], state.step),
                      stop, history)
