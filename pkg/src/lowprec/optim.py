"""AdamW with optional AdaFactor-style update clipping (StableAdamW).

Moment decay rates are debiased in the AdaFactor form,
``beta_hat = beta * (1 - beta**(t-1)) / (1 - beta**t)``, which makes the
first step replace the zero-initialized moments outright.

Update clipping divides the learning rate of each tensor by
``max(1, RMS_t)`` where ``RMS_t = sqrt(mean(g**2 / max(u, eps**2)))`` is
computed from the already-updated second moment ``u``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Mapping, Union

import numpy as np

CLIPPING_MODES = ("none", "update_clip", "grad_clip")


def beta2_warmup(t: int, lam: float) -> float:
    """``1 - t**(-lam)``, kept strictly below 1."""
    if t < 1:
        raise ValueError("iteration must be >= 1")
    if lam <= 0:
        raise ValueError("lambda must be positive")
    return min(1.0 - t ** (-lam), math.nextafter(1.0, 0.0))


@dataclass(frozen=True)
class Beta2Warmup:
    lam: float

    def __call__(self, t: int) -> float:
        return beta2_warmup(t, self.lam)


def constant_lr(value: float) -> Callable[[int], float]:
    return lambda t: value


def warmup_cosine(peak: float, warmup: int, total: int, final: float = 0.0) -> Callable[[int], float]:
    """Linear warmup to ``peak`` over ``warmup`` steps, then cosine decay to ``final`` at ``total``."""
    if warmup >= total:
        raise ValueError("warmup must be shorter than the run")

    def schedule(t: int) -> float:
        if t <= warmup:
            return peak * t / warmup
        frac = min(1.0, (t - warmup) / (total - warmup))
        return final + (peak - final) * 0.5 * (1.0 + math.cos(math.pi * frac))

    return schedule


@dataclass
class OptimizerHyperparams:
    lr_schedule: Union[Callable[[int], float], float] = 1e-3
    beta1: float = 0.9
    beta2: Union[float, Beta2Warmup] = 0.99
    eps: float = 1e-6
    weight_decay: float = 0.0
    clipping: str = "update_clip"
    max_norm: float = 1.0

    def __post_init__(self):
        if self.clipping not in CLIPPING_MODES:
            raise ValueError(f"clipping must be one of {CLIPPING_MODES}, got {self.clipping!r}")
        if not 0.0 <= self.beta1 < 1.0:
            raise ValueError("beta1 must lie in [0, 1)")
        if not isinstance(self.beta2, Beta2Warmup) and not 0.0 <= self.beta2 < 1.0:
            raise ValueError("beta2 must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.max_norm <= 0:
            raise ValueError("max_norm must be positive")

    def lr_at(self, t: int) -> float:
        if callable(self.lr_schedule):
            return float(self.lr_schedule(t))
        return float(self.lr_schedule)

    def beta2_at(self, t: int) -> float:
        return self.beta2(t) if callable(self.beta2) else self.beta2


@dataclass
class TensorOptState:
    v: np.ndarray
    u: np.ndarray

    @classmethod
    def zeros_like(cls, p: np.ndarray) -> "TensorOptState":
        return cls(np.zeros_like(p), np.zeros_like(p))


def init_states(params: Mapping[str, np.ndarray]) -> Dict[str, TensorOptState]:
    return {name: TensorOptState.zeros_like(p) for name, p in params.items()}


@dataclass
class StepStats:
    """What one optimizer step did to each tensor it touched."""

    lr: float
    rms: Dict[str, float] = field(default_factory=dict)
    eta: Dict[str, float] = field(default_factory=dict)


def debiased_beta(beta: float, t: int) -> float:
    if t < 1:
        raise ValueError("iteration must be >= 1")
    return beta * (1.0 - beta ** (t - 1)) / (1.0 - beta**t)


def compute_rms(g: np.ndarray, u: np.ndarray, eps: float) -> float:
    if g.shape != u.shape:
        raise ValueError(f"shape mismatch: {g.shape} vs {u.shape}")
    g64 = np.asarray(g, dtype=np.float64)
    u64 = np.asarray(u, dtype=np.float64)
    return math.sqrt(float(np.mean(g64 * g64 / np.maximum(u64, eps * eps))))


def step(params: Dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
         states: Dict[str, TensorOptState], hp: OptimizerHyperparams, t: int) -> StepStats:
    """One StableAdamW/AdamW step at iteration ``t`` (1-based).

    Only tensors present in ``grads`` are updated; ``params`` and ``states``
    entries are replaced in place. Global-norm clipping, when configured,
    is applied to the provided gradients first.
    """
    if t < 1:
        raise ValueError("iteration must be >= 1")
    if hp.clipping == "grad_clip":
        grads = grad_clip_global_norm(grads, hp.max_norm)
    lr = hp.lr_at(t)
    b1 = debiased_beta(hp.beta1, t)
    b2 = debiased_beta(hp.beta2_at(t), t)
    eps, wd = hp.eps, hp.weight_decay
    stats = StepStats(lr)
    for name, g in grads.items():
        theta = params[name]
        st = states[name]
        if g.shape != theta.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {theta.shape}")
        v = b1 * st.v + (1.0 - b1) * g
        u = b2 * st.u + (1.0 - b2) * (g * g)
        rms = compute_rms(g, u, eps)
        eta = lr / max(1.0, rms) if hp.clipping == "update_clip" else lr
        params[name] = theta - eta * wd * theta - eta * v / (np.sqrt(u) + eps)
        states[name] = TensorOptState(v, u)
        stats.rms[name] = rms
        stats.eta[name] = eta
    return stats


def global_norm(grads: Iterable[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))


def grad_clip_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> Dict[str, np.ndarray]:
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads.values())
    if norm <= max_norm:
        return dict(grads)
    scale = max_norm / norm
    return {name: (g * scale).astype(g.dtype) for name, g in grads.items()}


@dataclass(frozen=True)
class LossScaler:
    """Fixed loss multiplier; non-finite gradients skip the update per tensor.

    With ``per_tensor_skip=False`` any non-finite tensor skips the whole step.
    """

    scale: float = 65536.0
    per_tensor_skip: bool = True

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError("loss scale must be a positive finite number")


def filter_nonfinite(grads: Mapping[str, np.ndarray], scaler: LossScaler):
    """Unscale gradients and drop tensors holding Inf/NaN.

    Returns ``(usable, skipped)`` where ``usable`` maps names to unscaled
    gradients and ``skipped`` lists the excluded names in input order.
    """
    bad = [name for name, g in grads.items() if not np.all(np.isfinite(g))]
    if bad and not scaler.per_tensor_skip:
        return {}, list(grads)
    usable = {name: g / scaler.scale for name, g in grads.items() if name not in bad}
    return usable, bad
