"""Training driver and TOML config loading.

A config file has three tables whose keys are checked strictly::

    [model]
    depth = 2
    dim = 128
    heads = 4
    mlp_ratio = 4.0
    embed_norm = true
    layer_scale = { enabled = false, init = 0.0 }
    linear_mode = { variant = "SwitchBack", numeric_format = "int8" }

    [train]
    task = "synthetic_classify"
    iterations = 2000
    warmup_iterations = 200
    batch_size = 32
    seed = 0
    trace_path = "trace.jsonl"

    [optimizer]
    lr = 1e-3
    beta1 = 0.9
    beta2 = 0.99
    clipping = "update_clip"
"""
from __future__ import annotations

import dataclasses
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .data import TASKS, SyntheticTask
from .linear import LinearMode
from .model import LayerScale, ModelConfig, backward, cross_entropy, forward, init_params, squared_error
from .optim import (
    Beta2Warmup,
    LossScaler,
    OptimizerHyperparams,
    filter_nonfinite,
    init_states,
    step,
    warmup_cosine,
)
from .stability import TrainTrace, dump_record

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimizerSettings:
    lr: float = 1e-3
    final_lr: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.99
    beta2_warmup_lambda: Optional[float] = None
    eps: float = 1e-6
    weight_decay: float = 0.0
    clipping: str = "update_clip"
    max_norm: float = 1.0

    def hyperparams(self, iterations: int, warmup: int) -> OptimizerHyperparams:
        schedule = warmup_cosine(self.lr, warmup, iterations, self.final_lr)
        beta2 = Beta2Warmup(self.beta2_warmup_lambda) if self.beta2_warmup_lambda else self.beta2
        return OptimizerHyperparams(schedule, self.beta1, beta2, self.eps, self.weight_decay,
                                    self.clipping, self.max_norm)


@dataclass(frozen=True)
class TrainConfig:
    task: str = "synthetic_classify"
    iterations: int = 2000
    warmup_iterations: int = 200
    batch_size: int = 32
    seed: int = 0
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    loss_scale: Optional[float] = None
    trace_path: Optional[str] = None
    seq_len: int = 8
    input_dim: int = 16
    num_classes: int = 10
    task_noise: float = 1.0
    starve_until: int = 0
    starve_fraction: float = 0.5

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.iterations < 1 or self.batch_size < 1:
            raise ConfigError("iterations and batch_size must be positive")
        if not 0 <= self.warmup_iterations < self.iterations:
            raise ConfigError("warmup_iterations must be in [0, iterations)")

    def make_task(self) -> SyntheticTask:
        return SyntheticTask(self.task, self.seed, self.seq_len, self.input_dim, self.num_classes,
                             self.task_noise, starve_until=self.starve_until,
                             starve_fraction=self.starve_fraction)


# -- config files ----------------------------------------------------------------

def _fields(cls) -> set:
    return {f.name for f in dataclasses.fields(cls)}


def _check_keys(table: dict, allowed: set, where: str):
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")


def _build(cls, table: dict, where: str):
    try:
        return cls(**table)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from None


def parse_config(doc: dict):
    """Build ``(ModelConfig, TrainConfig)`` from a parsed config document."""
    _check_keys(doc, {"model", "train", "optimizer"}, "top level")
    model = dict(doc.get("model", {}))
    train = dict(doc.get("train", {}))
    opt = dict(doc.get("optimizer", {}))
    _check_keys(model, _fields(ModelConfig), "model")
    _check_keys(train, _fields(TrainConfig) - {"optimizer"}, "train")
    _check_keys(opt, _fields(OptimizerSettings), "optimizer")

    ls = model.pop("layer_scale", {})
    _check_keys(ls, _fields(LayerScale), "model.layer_scale")
    lm = model.pop("linear_mode", {})
    _check_keys(lm, {"variant", "numeric_format", "fp8_forward", "fp8_backward"}, "model.linear_mode")
    try:
        mode = LinearMode.parse(**lm)
    except ValueError as exc:
        raise ConfigError(f"[model.linear_mode]: {exc}") from None
    model_cfg = _build(ModelConfig, {**model, "layer_scale": LayerScale(**ls), "linear_mode": mode}, "model")
    settings = _build(OptimizerSettings, opt, "optimizer")
    train_cfg = _build(TrainConfig, {**train, "optimizer": settings}, "train")
    try:
        settings.hyperparams(train_cfg.iterations, train_cfg.warmup_iterations)
    except ValueError as exc:
        raise ConfigError(f"[optimizer]: {exc}") from None
    return model_cfg, train_cfg


def load_config(path):
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(doc)


# -- training loop ---------------------------------------------------------------

@dataclass
class TrainResult:
    trace: TrainTrace
    params: dict
    etas: list = field(default_factory=list, repr=False)


def run_training(model_cfg: ModelConfig, train_cfg: TrainConfig,
                 grad_hook: Optional[Callable[[int, dict], dict]] = None) -> TrainResult:
    """Train and return the trace, the final parameters and per-step learning rates.

    ``grad_hook(t, grads)`` may replace the raw gradients before the loss
    scaler sees them (fault injection).
    """
    task = train_cfg.make_task()
    params = init_params(model_cfg, train_cfg.input_dim, task.out_dim, train_cfg.seed)
    names = list(params)
    states = init_states(params)
    hp = train_cfg.optimizer.hyperparams(train_cfg.iterations, train_cfg.warmup_iterations)
    scaler = LossScaler(train_cfg.loss_scale) if train_cfg.loss_scale else None
    loss_fn = cross_entropy if train_cfg.task == "synthetic_classify" else squared_error

    trace = TrainTrace()
    etas = []
    out_file = open(train_cfg.trace_path, "w") if train_cfg.trace_path else None
    try:
        for t in range(1, train_cfg.iterations + 1):
            x, y = task.batch(t, train_cfg.batch_size)
            try:
                out, cache = forward(params, x, model_cfg)
            except ValueError as exc:
                raise TrainingError(f"iteration {t}: forward pass failed: {exc}") from None
            loss, dout = loss_fn(out, y)
            if not math.isfinite(loss) and scaler is None:
                raise TrainingError(f"iteration {t}: non-finite loss {loss} and no loss scaler configured")
            if scaler is not None:
                dout = dout * np.float32(scaler.scale)
            grads = backward(params, cache, dout, model_cfg)
            if grad_hook is not None:
                grads = grad_hook(t, grads)
            if scaler is not None:
                usable, skipped = filter_nonfinite(grads, scaler)
            else:
                skipped = [n for n, g in grads.items() if not np.all(np.isfinite(g))]
                if skipped:
                    raise TrainingError(f"iteration {t}: non-finite gradients in {skipped} and no loss scaler")
                usable = grads
            stats = step(params, usable, states, hp, t)
            etas.append(stats.eta)

            rec = {"iter": t, "loss": loss}
            for n in names:
                rec[f"rms.{n}"] = stats.rms.get(n)
            for n in names:
                g = usable.get(n)
                rec[f"grad_absmax.{n}"] = None if g is None else float(np.max(np.abs(g)))
            for i, v in enumerate(cache.feat_absmean):
                rec[f"feat_absmean.{i}"] = v
            rec["skipped_tensors"] = skipped
            trace.append(rec)
            if out_file is not None:
                out_file.write(dump_record(rec))
    finally:
        if out_file is not None:
            out_file.close()
    return TrainResult(trace, params, etas)


def train(model_cfg: ModelConfig, train_cfg: TrainConfig) -> TrainTrace:
    return run_training(model_cfg, train_cfg).trace


def smoothed_final_loss(trace: TrainTrace, last: int = 100) -> float:
    return float(np.mean(trace.losses[-last:]))
