"""Adversarial matching of teacher-forced and free-running GRU dynamics.

A self-contained float64 implementation: a small reverse-mode tape, GRU
generator and bidirectional-GRU discriminator, the gated adversarial
training step, synthetic tasks, divergence diagnostics and a CLI.
"""

from .engine import (
    BehaviorSequence,
    DiscriminatorParams,
    EngineSettings,
    GateState,
    GeneratorParams,
    Mode,
    SequenceBatch,
    disc_accuracy,
    discriminate,
    gate,
    loss_discriminator,
    loss_fool_free_running,
    loss_match_teacher_forced,
    loss_nll,
    scheduled_sampling_unroll,
    train_step,
    unroll_free_running,
    unroll_teacher_forced,
)
from .optim import AdamState, adam_step
from .tensor import Tape, Tensor, backward, grad_check, stop_recording

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "Tensor",
    "Tape",
    "backward",
    "grad_check",
    "stop_recording",
    "AdamState",
    "adam_step",
    "Mode",
    "BehaviorSequence",
    "SequenceBatch",
    "GateState",
    "GeneratorParams",
    "DiscriminatorParams",
    "EngineSettings",
    "gate",
    "discriminate",
    "disc_accuracy",
    "loss_nll",
    "loss_discriminator",
    "loss_fool_free_running",
    "loss_match_teacher_forced",
    "unroll_teacher_forced",
    "unroll_free_running",
    "scheduled_sampling_unroll",
    "train_step",
]
