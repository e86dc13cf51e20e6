"""Optimization loop, optimizer, schedules, evaluation."""

from .trainer import (
    AdamW,
    DivergenceError,
    TrainConfig,
    clip_gradients,
    eval_loss,
    evaluate,
    lr_at,
    pretrain,
    step,
    train_loop,
)

__all__ = [
    "AdamW",
    "DivergenceError",
    "TrainConfig",
    "clip_gradients",
    "eval_loss",
    "evaluate",
    "lr_at",
    "pretrain",
    "step",
    "train_loop",
]
