"""
センサーノードが送信前にかける計測フィルター
- 線形移動平均（直近 n サンプルの平均）
- 指数移動平均
- 1 次元カルマンフィルター
"""
import logging
from collections import deque
from typing import Deque, Dict, List, Optional, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)


class FilterError(Exception):
    """フィルター設定エラーの基底クラス"""


class WindowSizeError(FilterError):
    pass


class AlphaOutOfRange(FilterError):
    pass


class InvalidNoise(FilterError):
    pass


class UnknownFilter(FilterError):
    pass


class RollingAverage:
    def __init__(self, n: int):
        if n < 1:
            raise WindowSizeError(f"window must be >= 1, got {n}")
        self.n = n
        self.window: Deque[float] = deque(maxlen=n)

    def update(self, sample: float) -> float:
        self.window.append(float(sample))
        return float(np.mean(self.window))

    @property
    def value(self) -> Optional[float]:
        if not self.window:
            return None
        return float(np.mean(self.window))


class ExponentialAverage:
    def __init__(self, alpha: float):
        if not 0.0 <= alpha <= 1.0:
            raise AlphaOutOfRange(f"alpha must be within [0, 1], got {alpha}")
        self.alpha = float(alpha)
        self.value: Optional[float] = None

    def update(self, sample: float) -> float:
        sample = float(sample)
        if self.value is None:
            # 最初のサンプルで初期化
            self.value = sample
        else:
            self.value = self.alpha * sample + (1.0 - self.alpha) * self.value
        return self.value


class Kalman1D:
    """
    スカラー用カルマンフィルター
    x0 を省略すると最初の計測値で初期化、P0 は既定で R
    """

    def __init__(self, q: float, r: float, x0: Optional[float] = None,
                 initial_variance: Optional[float] = None):
        if r <= 0:
            raise InvalidNoise(f"measurement noise R must be > 0, got {r}")
        if q < 0:
            raise InvalidNoise(f"process noise Q must be >= 0, got {q}")
        p0 = r if initial_variance is None else initial_variance
        if p0 < 0:
            raise InvalidNoise(f"initial variance must be >= 0, got {p0}")
        self.q = float(q)
        self.r = float(r)
        self.x = None if x0 is None else float(x0)
        self.p = float(p0)
        self.gain = 0.0

    def update(self, z: float) -> float:
        z = float(z)
        if self.x is None:
            self.x = z
            return self.x
        self.p += self.q
        self.gain = self.p / (self.p + self.r)
        self.x += self.gain * (z - self.x)
        self.p *= (1.0 - self.gain)
        return self.x

    @property
    def value(self) -> Optional[float]:
        return self.x


ScalarFilter = Union[RollingAverage, ExponentialAverage, Kalman1D]


def rolling_update(f: RollingAverage, sample: float) -> float:
    return f.update(sample)


def exp_update(f: ExponentialAverage, sample: float) -> float:
    return f.update(sample)


def kalman_update(f: Kalman1D, measurement: float) -> float:
    return f.update(measurement)


class VectorFilter:
    """3 軸センサー用: 成分ごとに独立したフィルター"""

    def __init__(self, filters: List[ScalarFilter]):
        self.filters = filters

    def update(self, sample: Sequence[float]) -> tuple:
        values = np.asarray(sample, dtype=float)
        return tuple(f.update(v) for f, v in zip(self.filters, values))


class PassThrough:
    def update(self, sample):
        return sample


def make_filter(config: Optional[Dict], vector: bool = False):
    """シナリオ設定の filter 項目からフィルターを作る"""
    if not config:
        return PassThrough()
    if vector:
        return VectorFilter([make_filter(config) for _ in range(3)])
    kind = config.get("type")
    if kind == "rolling":
        return RollingAverage(int(config.get("window", 4)))
    if kind == "exponential":
        return ExponentialAverage(float(config.get("alpha", 0.5)))
    if kind == "kalman":
        return Kalman1D(float(config.get("q", 0.0)), float(config.get("r", 1.0)),
                        config.get("x0"), config.get("initial_variance"))
    raise UnknownFilter(f"unknown filter type: {kind!r}")
