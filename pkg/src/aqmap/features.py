"""Containers for model inputs.

``FeatureSet`` holds one prediction window (the three feature blocks).
``WindowBatch`` holds many windows over shared series so that overlapping
windows reuse the same temporal convolution outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import datetime

import numpy as np

from .errors import ShapeError, ValidationError

TIME_ENC_DIM = 4


@dataclass(frozen=True)
class TimeContext:
    hour_of_day: int
    day_of_week: int  # Monday = 0

    def __post_init__(self):
        if not 0 <= self.hour_of_day <= 23:
            raise ValidationError(f"hour_of_day must be in 0..23, got {self.hour_of_day}")
        if not 0 <= self.day_of_week <= 6:
            raise ValidationError(f"day_of_week must be in 0..6, got {self.day_of_week}")

    @classmethod
    def from_datetime(cls, ts: datetime) -> "TimeContext":
        return cls(ts.hour, ts.weekday())


def time_encoding(tctx: TimeContext) -> np.ndarray:
    h = 2.0 * math.pi * tctx.hour_of_day / 24.0
    d = 2.0 * math.pi * tctx.day_of_week / 7.0
    return np.array([math.sin(h), math.cos(h), math.sin(d), math.cos(d)])


@dataclass
class FeatureSet:
    x1: np.ndarray  # (C1, T1, N) daily
    x2: np.ndarray  # (C2, N) static
    x3: np.ndarray  # (C3, T3, N) hourly

    def __post_init__(self):
        self.x1 = np.asarray(self.x1, dtype=np.float64)
        self.x2 = np.asarray(self.x2, dtype=np.float64)
        self.x3 = np.asarray(self.x3, dtype=np.float64)
        if self.x1.ndim != 3 or self.x3.ndim != 3 or self.x2.ndim != 2:
            raise ShapeError("FeatureSet expects x1 (C1,T1,N), x2 (C2,N), x3 (C3,T3,N)")
        n = {self.x1.shape[-1], self.x2.shape[-1], self.x3.shape[-1]}
        if len(n) != 1:
            raise ShapeError(f"feature blocks disagree on node count: {sorted(n)}")

    @property
    def n(self) -> int:
        return self.x2.shape[-1]

    def permuted(self, perm) -> "FeatureSet":
        return FeatureSet(self.x1[..., perm], self.x2[..., perm], self.x3[..., perm])


@dataclass
class WindowBatch:
    """B prediction windows sharing one daily series and one hourly series.

    Window b uses hourly steps ``hour_end[b] - T3 + 1 .. hour_end[b]`` of
    ``x3_series`` and daily steps ``day_end[ts_day[b]] - T1 + 1 ..
    day_end[ts_day[b]]`` of ``x1_series``.
    """

    x1_series: np.ndarray  # (C1, D, N)
    x2: np.ndarray  # (C2, N)
    x3_series: np.ndarray  # (C3, H, N)
    day_end: np.ndarray  # (U,)
    ts_day: np.ndarray  # (B,)
    hour_end: np.ndarray  # (B,)
    time_enc: np.ndarray  # (B, 4)

    @property
    def b(self) -> int:
        return len(self.hour_end)

    @property
    def n(self) -> int:
        return self.x2.shape[-1]

    @classmethod
    def from_features(cls, fs: FeatureSet, tctx: TimeContext) -> "WindowBatch":
        return cls(
            x1_series=fs.x1,
            x2=fs.x2,
            x3_series=fs.x3,
            day_end=np.array([fs.x1.shape[1] - 1]),
            ts_day=np.array([0]),
            hour_end=np.array([fs.x3.shape[1] - 1]),
            time_enc=time_encoding(tctx)[None, :],
        )

    def subset(self, idx) -> "WindowBatch":
        idx = np.atleast_1d(np.asarray(idx, dtype=np.intp))
        days, ts_day = np.unique(self.ts_day[idx], return_inverse=True)
        return WindowBatch(
            x1_series=self.x1_series,
            x2=self.x2,
            x3_series=self.x3_series,
            day_end=self.day_end[days],
            ts_day=ts_day.reshape(-1),
            hour_end=self.hour_end[idx],
            time_enc=self.time_enc[idx],
        )

    def window(self, b: int, t1: int, t3: int) -> FeatureSet:
        d = self.day_end[self.ts_day[b]]
        h = self.hour_end[b]
        return FeatureSet(
            self.x1_series[:, d - t1 + 1 : d + 1, :],
            self.x2,
            self.x3_series[:, h - t3 + 1 : h + 1, :],
        )
