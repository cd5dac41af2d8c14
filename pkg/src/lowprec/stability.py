"""Training traces and loss/RMS spike analysis.

A trace is a sequence of flat per-iteration records::

    {"iter": 17, "loss": 2.31, "rms.embed.weight": 0.98, ...,
     "grad_absmax.embed.weight": 0.04, ..., "feat_absmean.0": 1.02, ...,
     "skipped_tensors": []}

stored one JSON object per line. Non-finite floats are written with
Python's ``NaN``/``Infinity`` tokens; a tensor skipped on some step has a
``null`` RMS.

Spike heuristics (defaults in :class:`SpikeThresholds`):

* RMS spike: ``RMS_t >= 2.3``; events closer than 10 iterations to the
  first event of a run collapse onto that first event.
* Loss spike: loss exceeds the trailing mean by 3.2 trailing standard
  deviations (trailing 100 iterations, current one excluded), after the
  first 1000 iterations; a run of exceedances counts only if it holds at
  least 2 hits within 10 iterations, and is reported at its earliest hit.
* A loss spike is *predicted* when an RMS spike precedes it by 1 to 8
  iterations.
"""
from __future__ import annotations

import bisect
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np


class TraceError(ValueError):
    pass


@dataclass
class TrainTrace:
    records: List[dict] = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self):
        keys = None
        last = None
        for rec in self.records:
            if "iter" not in rec or "loss" not in rec:
                raise TraceError("every record needs 'iter' and 'loss'")
            if keys is None:
                keys = set(rec)
            elif set(rec) != keys:
                raise TraceError(f"record at iter {rec['iter']} has a different key set")
            if last is not None and rec["iter"] <= last:
                raise TraceError("iterations must be strictly increasing")
            last = rec["iter"]

    def __len__(self):
        return len(self.records)

    @property
    def iters(self) -> np.ndarray:
        return np.array([r["iter"] for r in self.records], dtype=np.int64)

    @property
    def losses(self) -> np.ndarray:
        return _floats(r["loss"] for r in self.records)

    def tensor_names(self, prefix: str = "rms.") -> List[str]:
        if not self.records:
            return []
        return [k[len(prefix):] for k in self.records[0] if k.startswith(prefix)]

    def series(self, key: str) -> np.ndarray:
        if self.records and key not in self.records[0]:
            raise KeyError(key)
        return _floats(r[key] for r in self.records)

    def rms(self, tensor: str) -> np.ndarray:
        try:
            return self.series(f"rms.{tensor}")
        except KeyError:
            raise KeyError(f"trace has no RMS series for tensor {tensor!r}") from None

    def append(self, record: dict):
        self.records.append(record)

    def dumps(self) -> str:
        return "".join(dump_record(r) for r in self.records)

    def write(self, path):
        Path(path).write_text(self.dumps())

    @classmethod
    def read(cls, path) -> "TrainTrace":
        records = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise TraceError(f"{path}:{lineno}: {exc.msg}") from None
                if not isinstance(rec, dict):
                    raise TraceError(f"{path}:{lineno}: expected a JSON object")
                records.append(rec)
        return cls(records)


def dump_record(record: dict) -> str:
    return json.dumps(record) + "\n"


def _floats(values: Iterable) -> np.ndarray:
    return np.array([np.nan if v is None else float(v) for v in values], dtype=np.float64)


@dataclass(frozen=True)
class SpikeThresholds:
    rms_threshold: float = 2.3
    dedup_window: int = 10
    loss_z: float = 3.2
    warmup_skip: int = 1000
    loss_window: int = 100
    min_hits: int = 2
    lag_min: int = 1
    lag_max: int = 8


def _dedup(events: Sequence[int], window: int, min_hits: int = 1) -> List[int]:
    """Collapse each run of events starting within ``window`` of its first event."""
    out = []
    i = 0
    while i < len(events):
        start = events[i]
        j = i
        while j < len(events) and events[j] - start < window:
            j += 1
        if j - i >= min_hits:
            out.append(int(start))
        i = j
    return out


def _labels(n: int, iters) -> np.ndarray:
    if iters is None:
        return np.arange(n, dtype=np.int64)
    iters = np.asarray(iters, dtype=np.int64)
    if iters.shape != (n,):
        raise ValueError("iters must match the series length")
    return iters


def detect_rms_spikes(series, threshold: float = 2.3, dedup_window: int = 10, iters=None) -> List[int]:
    values = _floats(series)
    if values.size == 0:
        raise ValueError("empty RMS series")
    labels = _labels(values.size, iters)
    hits = labels[np.nan_to_num(values, nan=-np.inf) >= threshold]
    return _dedup(hits.tolist(), dedup_window)


def loss_exceedances(series, z: float = 3.2, warmup_skip: int = 1000, window: int = 100) -> np.ndarray:
    """Boolean mask of positions whose loss clears the trailing mean + z * std.

    Positions before ``max(warmup_skip, window)`` are never flagged. A zero
    trailing std disables detection at that position. Non-finite losses are
    always flagged and excluded from later trailing statistics.
    """
    x = _floats(series)
    n = x.size
    if window < 2:
        raise ValueError("window must be >= 2")
    if n < warmup_skip + window:
        raise ValueError(
            f"loss series of length {n} is shorter than warmup_skip + window = {warmup_skip + window}"
        )
    start = max(warmup_skip, window)
    mask = np.zeros(n, dtype=bool)
    if start >= n:
        return mask
    clean = np.where(np.isfinite(x), x, np.nan)
    wins = np.lib.stride_tricks.sliding_window_view(clean, window)[start - window:n - window]
    counts = np.sum(np.isfinite(wins), axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.nanmean(wins, axis=1)
        std = np.nanstd(wins, axis=1, ddof=1)
    cur = x[start:]
    finite_hit = np.isfinite(cur) & (counts >= 2) & (std > 0) & (cur > mean + z * std)
    mask[start:] = finite_hit | ~np.isfinite(cur)
    return mask


def detect_loss_spikes(series, z: float = 3.2, warmup_skip: int = 1000, window: int = 100,
                       min_hits: int = 2, dedup_window: int = 10, iters=None) -> List[int]:
    mask = loss_exceedances(series, z, warmup_skip, window)
    labels = _labels(mask.size, iters)
    return _dedup(labels[mask].tolist(), dedup_window, min_hits)


def match_spikes(loss_spikes: Sequence[int], rms_spikes: Sequence[int], lag_min: int = 1, lag_max: int = 8):
    """Pair each loss spike with the nearest RMS spike 1..8 iterations earlier.

    Returns ``(matched, unmatched)``: ``matched`` holds ``(rms_iter, loss_iter, lag)``.
    """
    rms = sorted(rms_spikes)
    matched, unmatched = [], []
    for t in sorted(loss_spikes):
        # latest RMS spike at or before t - lag_min
        i = bisect.bisect_right(rms, t - lag_min) - 1
        if i >= 0 and t - rms[i] <= lag_max:
            matched.append((int(rms[i]), int(t), int(t - rms[i])))
        else:
            unmatched.append(int(t))
    return matched, unmatched


def chance_probability(rms_spikes: Sequence[int], eligible_iterations: int, lag_min: int = 1,
                       lag_max: int = 8) -> float:
    """Fraction of eligible iterations that fall 1..8 after some RMS spike."""
    if eligible_iterations <= 0:
        raise ValueError("eligible_iterations must be positive")
    covered = 0
    reach = None  # last covered iteration so far
    for t in sorted(rms_spikes):
        lo, hi = t + lag_min, t + lag_max
        if reach is not None and lo <= reach:
            lo = reach + 1
        if hi >= lo:
            covered += hi - lo + 1
        reach = hi if reach is None else max(reach, hi)
    return min(1.0, covered / eligible_iterations)


@dataclass
class SpikeReport:
    tensor: str
    rms_spike_iters: List[int]
    loss_spike_iters: List[int]
    matched_pairs: List[tuple]
    unmatched_loss_spikes: List[int]
    chance_probability: float
    eligible_iterations: int
    rms_values: dict = field(default_factory=dict, repr=False)
    loss_values: dict = field(default_factory=dict, repr=False)

    @property
    def match_rate(self) -> float:
        n = len(self.loss_spike_iters)
        return len(self.matched_pairs) / n if n else 0.0

    def records(self) -> List[dict]:
        """One record per spike, then a summary record."""
        by_loss = {loss: (rms, lag) for rms, loss, lag in self.matched_pairs}
        by_rms: dict = {}
        for rms, loss, lag in self.matched_pairs:
            by_rms.setdefault(rms, []).append(loss)
        out = []
        for t in self.rms_spike_iters:
            hits = by_rms.get(t, [])
            out.append({"kind": "rms", "tensor": self.tensor, "iter": t,
                        "value": self.rms_values.get(t), "matched_to": hits or None,
                        "lag": [h - t for h in hits] or None})
        for t in self.loss_spike_iters:
            rms, lag = by_loss.get(t, (None, None))
            out.append({"kind": "loss", "tensor": self.tensor, "iter": t,
                        "value": self.loss_values.get(t), "matched_to": rms, "lag": lag})
        out.append({"kind": "summary", "tensor": self.tensor,
                    "rms_spikes": len(self.rms_spike_iters),
                    "loss_spikes": len(self.loss_spike_iters),
                    "matched": len(self.matched_pairs),
                    "unmatched": len(self.unmatched_loss_spikes),
                    "chance_probability": self.chance_probability,
                    "eligible_iterations": self.eligible_iterations})
        return out

    def to_text(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.records())


def spike_report(iters, losses, rms, tensor: str = "", th: SpikeThresholds = SpikeThresholds()) -> SpikeReport:
    iters = np.asarray(iters, dtype=np.int64)
    losses = _floats(losses)
    rms = _floats(rms)
    rms_spikes = detect_rms_spikes(rms, th.rms_threshold, th.dedup_window, iters)
    loss_spikes = detect_loss_spikes(losses, th.loss_z, th.warmup_skip, th.loss_window,
                                     th.min_hits, th.dedup_window, iters)
    matched, unmatched = match_spikes(loss_spikes, rms_spikes, th.lag_min, th.lag_max)
    eligible = len(losses) - max(th.warmup_skip, th.loss_window)
    pos = {int(t): i for i, t in enumerate(iters)}
    return SpikeReport(
        tensor=tensor,
        rms_spike_iters=rms_spikes,
        loss_spike_iters=loss_spikes,
        matched_pairs=matched,
        unmatched_loss_spikes=unmatched,
        chance_probability=chance_probability(rms_spikes, eligible, th.lag_min, th.lag_max),
        eligible_iterations=eligible,
        rms_values={t: _jsonable(rms[pos[t]]) for t in rms_spikes},
        loss_values={t: _jsonable(losses[pos[t]]) for t in loss_spikes},
    )


def _jsonable(v: float) -> Optional[float]:
    return float(v) if math.isfinite(v) else None


def negative_control(trace: TrainTrace, layer_name: str, th: SpikeThresholds = SpikeThresholds()) -> SpikeReport:
    """Run the same pipeline on another layer's RMS series for contrast."""
    return spike_report(trace.iters, trace.losses, trace.rms(layer_name), layer_name, th)


def analyze_trace(trace: TrainTrace, embed_tensor: Optional[str] = None, control_tensor: Optional[str] = None,
                  th: SpikeThresholds = SpikeThresholds()):
    """Spike report for the embedding tensor plus a mid-network control report.

    Defaults: the first tensor in the trace is the embedding; the control is
    the tensor in the middle of the trace's tensor list.
    """
    names = trace.tensor_names()
    if not names:
        raise TraceError("trace carries no RMS series")
    embed = embed_tensor or names[0]
    control = control_tensor or names[len(names) // 2]
    main = spike_report(trace.iters, trace.losses, trace.rms(embed), embed, th)
    return main, negative_control(trace, control, th)
