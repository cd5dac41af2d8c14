"""Synthetic token-sequence tasks for desk-scale training.

Both tasks produce inputs of shape (batch, seq_len, input_dim). Every batch
is a pure function of ``(seed, iteration)``.

``synthetic_classify``
    Each class owns a fixed Gaussian center sequence; samples are the center
    plus isotropic Gaussian noise of stdev ``noise``. Targets are class ids.
``synthetic_regress``
    Gaussian inputs pushed through a frozen random two-layer teacher,
    ``tanh(mean_over_tokens(x) @ A) @ B``. Targets are real vectors.

``starve_until`` zeroes the trailing ``starve_fraction`` of input channels for
every iteration before it, so the matching embedding columns receive no
gradient until the inputs shift.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import WORKING_DTYPE

TASKS = ("synthetic_classify", "synthetic_regress")

_CENTERS, _TEACHER, _BATCH = 1, 2, 3


def _rng(*key) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


@dataclass
class SyntheticTask:
    kind: str = "synthetic_classify"
    seed: int = 0
    seq_len: int = 8
    input_dim: int = 16
    num_classes: int = 10
    noise: float = 1.0
    teacher_scale: float = 1.0
    teacher_hidden: int = 32
    starve_until: int = 0
    starve_fraction: float = 0.5

    def __post_init__(self):
        if self.kind not in TASKS:
            raise ValueError(f"unknown task {self.kind!r}; expected one of {TASKS}")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        shape = (self.seq_len, self.input_dim)
        if self.kind == "synthetic_classify":
            self.centers = _rng(self.seed, _CENTERS).standard_normal((self.num_classes, *shape))
        else:
            rng = _rng(self.seed, _TEACHER)
            self.teacher_in = rng.standard_normal((self.input_dim, self.teacher_hidden)) / np.sqrt(self.input_dim)
            self.teacher_out = rng.standard_normal((self.teacher_hidden, self.num_classes)) / np.sqrt(self.teacher_hidden)
            self.teacher_in *= self.teacher_scale
            self.teacher_out *= self.teacher_scale

    @property
    def out_dim(self) -> int:
        return self.num_classes

    def batch(self, iteration: int, batch_size: int):
        rng = _rng(self.seed, _BATCH, iteration)
        shape = (batch_size, self.seq_len, self.input_dim)
        if self.kind == "synthetic_classify":
            targets = rng.integers(0, self.num_classes, size=batch_size)
            x = self.centers[targets] + self.noise * rng.standard_normal(shape)
        else:
            x = rng.standard_normal(shape)
            hidden = np.tanh(x.mean(axis=1) @ self.teacher_in)
            targets = (hidden @ self.teacher_out).astype(WORKING_DTYPE)
        if iteration < self.starve_until:
            cut = self.input_dim - int(round(self.starve_fraction * self.input_dim))
            x[..., cut:] = 0.0
        return x.astype(WORKING_DTYPE), targets


def synthetic_task(kind: str, batch_size: int, seed: int, iteration: int = 0, **options):
    """One batch ``(inputs, targets)`` of the named task."""
    return SyntheticTask(kind=kind, seed=seed, **options).batch(iteration, batch_size)
