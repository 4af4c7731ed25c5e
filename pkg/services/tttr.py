# services/tttr.py
# 时间标签（TTTR）探测模拟与符合计数分析
#
# 装置模型：输出光经两级级联光纤分束器分到三个探测器（默认每路 1/3），
# 每个光子按通道效率被探测，时间戳 = 脉冲中心 + 指数分布的发射抖动。
# 分析流程：以通道 2 为锚点统计三重符合 (τ₁₂, τ₂₃) = (t₁−t₂, t₂−t₃)，
# 256 ps 方格直方图，5×5 ns² 积分各峰，用不相关峰平均面积归一。
#
# 时间戳全部为整数 ps，分箱用整数 floor_divide（左闭右开），不存在浮点边界歧义。

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.stats import poisson

from utils import logger, resolve_threads, InsufficientStatisticsError

CLICK_DTYPE = np.dtype([('channel', '<u1'), ('timestamp', '<u8')])
DEFAULT_BLOCK_SIZE = 1_000_000
ANCHOR_CHUNK = 20_000
MIN_MAP_PERIODS = 3


class ClickRecord(NamedTuple):
    channel: int
    timestamp: int


# ==================== 探测器配置 ====================
@dataclass(frozen=True)
class DetectorConfig:
    """
    级联分束 + 探测器参数

    arm_probabilities 长度即通道数（2 或 3），和 ≤ 1（余量视为损耗）；
    时间量全部为 ps。peak_window 为峰积分窗口全宽（5 ns）。
    """
    arm_probabilities: tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)
    efficiencies: tuple[float, ...] = (1.0, 1.0, 1.0)
    dead_time: int = 0
    emission_time: float = 125.0
    rep_period: int = 12200
    bin_width: int = 256
    peak_window: int = 5000

    def __post_init__(self):
        arms = tuple(float(p) for p in self.arm_probabilities)
        effs = tuple(float(e) for e in self.efficiencies)
        object.__setattr__(self, 'arm_probabilities', arms)
        object.__setattr__(self, 'efficiencies', effs)
        if len(arms) not in (2, 3):
            raise ValueError(f"arm_probabilities 只支持 2 或 3 个通道，当前为 {len(arms)}")
        if len(effs) != len(arms):
            raise ValueError("efficiencies 与 arm_probabilities 长度不一致")
        if any(p < 0 for p in arms) or sum(arms) > 1 + 1e-12:
            raise ValueError(f"arm_probabilities 必须非负且和 ≤ 1，当前为 {arms}")
        if any(not 0.0 <= e <= 1.0 for e in effs):
            raise ValueError(f"efficiencies 必须在 [0, 1] 内，当前为 {effs}")
        if self.rep_period <= 0:
            raise ValueError(f"rep_period 必须 > 0，当前为 {self.rep_period}")
        if self.bin_width <= 0 or self.peak_window <= 0:
            raise ValueError("bin_width 与 peak_window 必须 > 0")
        if self.dead_time < 0 or self.emission_time < 0:
            raise ValueError("dead_time 与 emission_time 不能为负")

    @classmethod
    def two_channel(cls, **overrides) -> 'DetectorConfig':
        """50:50 光纤分束器后接两个探测器"""
        values = {'arm_probabilities': (0.5, 0.5), 'efficiencies': (1.0, 1.0)}
        values.update(overrides)
        return cls(**values)

    @property
    def n_channels(self) -> int:
        return len(self.arm_probabilities)

    @property
    def pulse_offset(self) -> int:
        """脉冲中心相对周期起点的偏移（保证时间戳为正）"""
        return self.rep_period // 2


# ==================== 分布 ====================
def poisson_distribution(mean: float, k_max: int | None = None, tail: float = 1e-12) -> np.ndarray:
    """截断 Poisson 分布 P(0..k_max)，默认截到尾部概率 < tail，重新归一"""
    if mean < 0:
        raise ValueError(f"mean 不能为负，当前为 {mean}")
    if k_max is None:
        k_max = int(poisson.isf(tail, mean)) + 1 if mean > 0 else 0
    p = poisson.pmf(np.arange(k_max + 1), mean) if mean > 0 else np.eye(1, k_max + 1)[0]
    return p / p.sum()


def single_photon_distribution() -> np.ndarray:
    return np.array([0.0, 1.0])


def distribution_from_probabilities(p, tol: float = 1e-9) -> np.ndarray:
    """把重建得到的 P(0..3) 转成可采样分布：≥ −tol 的微小负值置零后归一"""
    p = np.asarray(p, dtype=float)
    if np.any(p < -tol):
        raise ValueError(f"分布含负概率: {p}")
    p = np.clip(p, 0.0, None)
    return p / p.sum()


def _validate_distribution(distribution) -> np.ndarray:
    p = np.asarray(distribution, dtype=float)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("光子数分布必须为非空一维数组")
    if np.any(p < 0):
        raise ValueError(f"光子数分布含负概率: {p}")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"光子数分布未归一: Σp = {p.sum():.12f}")
    return p


# ==================== Monte Carlo 模拟 ====================
def _simulate_block(p: np.ndarray, config: DetectorConfig, first_pulse: int, n_pulses: int,
                    seed: np.random.SeedSequence) -> np.ndarray:
    rng = np.random.default_rng(seed)
    photons = rng.choice(p.size, size=n_pulses, p=p)
    pulse_index = np.repeat(np.arange(first_pulse, first_pulse + n_pulses, dtype=np.int64), photons)

    arms = np.asarray(config.arm_probabilities)
    routing = np.append(arms, max(0.0, 1.0 - arms.sum()))
    arm = rng.choice(routing.size, size=pulse_index.size, p=routing / routing.sum())
    jitter = rng.exponential(config.emission_time, size=pulse_index.size) if config.emission_time > 0 \
        else np.zeros(pulse_index.size)
    detect_draw = rng.random(pulse_index.size)

    routed = arm < config.n_channels
    efficiency = np.asarray(config.efficiencies)[np.minimum(arm, config.n_channels - 1)]
    kept = routed & (detect_draw < efficiency)

    block = np.empty(int(kept.sum()), dtype=CLICK_DTYPE)
    block['channel'] = arm[kept] + 1
    block['timestamp'] = (pulse_index[kept] * config.rep_period + config.pulse_offset
                          + np.floor(jitter[kept]).astype(np.int64))
    return block


def _apply_dead_time(clicks: np.ndarray, dead_time: int) -> np.ndarray:
    """
    同一通道上距上一个被记录点击不足 dead_time 的点击丢弃

    与前一次点击间隔 ≥ dead_time 的点击一定被记录，只在间隔不足的冲突点上逐个判定。
    """
    if dead_time <= 0 or clicks.size == 0:
        return clicks
    keep = np.ones(clicks.size, dtype=bool)
    for channel in np.unique(clicks['channel']):
        indices = np.flatnonzero(clicks['channel'] == channel)
        times = clicks['timestamp'][indices].astype(np.int64)
        order = np.argsort(times, kind='stable')
        indices, times = indices[order], times[order]
        kept = np.ones(times.size, dtype=bool)
        last = 0
        for k in np.flatnonzero(np.diff(times) < dead_time) + 1:
            if kept[k - 1]:
                last = times[k - 1]
            kept[k] = times[k] - last >= dead_time
        keep[indices] = kept
    return clicks[keep]


def sort_clicks(clicks: np.ndarray) -> np.ndarray:
    """按 (timestamp, channel) 稳定排序"""
    order = np.lexsort((clicks['channel'], clicks['timestamp']))
    return clicks[order]


def simulate_clicks(per_pulse_distribution, config: DetectorConfig, n_pulses: int, seed: int,
                    threads: int | None = None, block_size: int = DEFAULT_BLOCK_SIZE) -> np.ndarray:
    """
    按脉冲独立同分布抽样光子数，经分束、效率、抖动、死时间生成点击流

    每个脉冲块使用 SeedSequence(seed).spawn 派生的独立随机流，结果与线程数无关。

    Args:
        per_pulse_distribution: P(0..k_max)，必须归一
        config: 探测器配置
        n_pulses: 脉冲数
        seed: 随机种子
        threads: 并发线程数（None 时按 resolve_threads 规则）
        block_size: 每块脉冲数

    Returns:
        np.ndarray: CLICK_DTYPE 结构数组，按时间戳排序

    Raises:
        ValueError: 分布未归一或含负值
    """
    p = _validate_distribution(per_pulse_distribution)
    if n_pulses < 0:
        raise ValueError(f"n_pulses 不能为负，当前为 {n_pulses}")
    n_blocks = max(1, math.ceil(n_pulses / block_size))
    seeds = np.random.SeedSequence(seed).spawn(n_blocks)
    starts = [i * block_size for i in range(n_blocks)]
    sizes = [min(block_size, n_pulses - start) for start in starts]

    workers = min(resolve_threads(threads), n_blocks)
    with ThreadPoolExecutor(max_workers=workers) as executor:
        blocks = list(executor.map(lambda args: _simulate_block(p, config, *args),
                                   zip(starts, sizes, seeds)))

    clicks = sort_clicks(np.concatenate(blocks)) if blocks else np.empty(0, dtype=CLICK_DTYPE)
    clicks = _apply_dead_time(clicks, config.dead_time)
    logger.info(f"模拟完成: {n_pulses} 个脉冲, {clicks.size} 次点击, {n_blocks} 个块, {workers} 线程")
    return clicks


def channel_times(clicks: np.ndarray, channel: int) -> np.ndarray:
    """单通道的有序时间戳（int64）"""
    times = clicks['timestamp'][clicks['channel'] == channel].astype(np.int64)
    return np.sort(times, kind='stable')


# ==================== 三重符合图 ====================
@dataclass(frozen=True)
class CoincidenceMap:
    """
    (τ₁₂, τ₂₃) 二维直方图；axis 为各箱左边界（ps），范围 [−origin, origin)
    """
    counts: np.ndarray
    bin_width: int
    origin: int
    edges: np.ndarray = field(repr=False)

    @property
    def n_bins(self) -> int:
        return self.counts.shape[0]

    @property
    def centers(self) -> np.ndarray:
        return self.edges + self.bin_width / 2

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def _map_geometry(config: DetectorConfig, max_delay: int | None) -> tuple[int, int]:
    max_delay = 5 * config.rep_period if max_delay is None else int(max_delay)
    if max_delay <= 0:
        raise ValueError(f"max_delay 必须 > 0，当前为 {max_delay}")
    half_bins = math.ceil(max_delay / config.bin_width)
    return half_bins, half_bins * config.bin_width


def _expand_pairs(lo_a, hi_a, lo_b, hi_b):
    """每个锚点的 [lo_a, hi_a) × [lo_b, hi_b) 笛卡尔积，返回 (anchor, index_a, index_b)"""
    n_a = hi_a - lo_a
    n_b = hi_b - lo_b
    per_anchor = n_a * n_b
    total = int(per_anchor.sum())
    if total == 0:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty, empty
    anchor = np.repeat(np.arange(per_anchor.size), per_anchor)
    local = np.arange(total) - np.repeat(np.cumsum(per_anchor) - per_anchor, per_anchor)
    index_a = lo_a[anchor] + local // n_b[anchor]
    index_b = lo_b[anchor] + local % n_b[anchor]
    return anchor, index_a, index_b


def coincidence_map(clicks: np.ndarray, config: DetectorConfig, max_delay: int | None = None) -> CoincidenceMap:
    """
    统计所有 τ₁₂, τ₂₃ ∈ [−origin, origin) 的三重符合

    origin = ⌈max_delay/bin_width⌉·bin_width，max_delay 默认 ±5 个重复周期。
    """
    half_bins, origin = _map_geometry(config, max_delay)
    n_bins = 2 * half_bins
    edges = np.arange(-origin, origin, config.bin_width, dtype=np.int64)
    counts = np.zeros(n_bins * n_bins, dtype=np.int64)

    t1, t2, t3 = (channel_times(clicks, ch) for ch in (1, 2, 3))
    for start in range(0, t2.size, ANCHOR_CHUNK):
        anchors = t2[start:start + ANCHOR_CHUNK]
        # t₁ − t₂ ∈ [−origin, origin)
        lo1 = np.searchsorted(t1, anchors - origin, side='left')
        hi1 = np.searchsorted(t1, anchors + origin, side='left')
        # t₂ − t₃ ∈ [−origin, origin) ⇔ t₃ ∈ (t₂ − origin, t₂ + origin]
        lo3 = np.searchsorted(t3, anchors - origin, side='right')
        hi3 = np.searchsorted(t3, anchors + origin, side='right')
        anchor, i1, i3 = _expand_pairs(lo1, hi1, lo3, hi3)
        if anchor.size == 0:
            continue
        tau12 = t1[i1] - anchors[anchor]
        tau23 = anchors[anchor] - t3[i3]
        row = np.floor_divide(tau12 + origin, config.bin_width)
        col = np.floor_divide(tau23 + origin, config.bin_width)
        counts += np.bincount(row * n_bins + col, minlength=n_bins * n_bins)

    counts = counts.reshape(n_bins, n_bins)
    counts.setflags(write=False)
    logger.info(f"三重符合图: {n_bins}×{n_bins} 箱, 共 {int(counts.sum())} 个三重符合")
    return CoincidenceMap(counts=counts, bin_width=config.bin_width, origin=origin, edges=edges)


# ==================== 峰积分与归一 ====================
@dataclass(frozen=True)
class PeakTable:
    """格点峰 (m₁₂, m₂₃) 的积分计数与归一值；correlated 标记三条反聚束线上的峰"""
    m12: np.ndarray
    m23: np.ndarray
    tau12: np.ndarray
    tau23: np.ndarray
    counts: np.ndarray
    normalized: np.ndarray
    correlated: np.ndarray
    normalization: float

    def value(self, m12: int, m23: int) -> float:
        match = np.flatnonzero((self.m12 == m12) & (self.m23 == m23))
        if match.size == 0:
            raise KeyError(f"峰 ({m12}, {m23}) 不在积分范围内")
        return float(self.normalized[match[0]])

    @property
    def g3_zero(self) -> float:
        return self.value(0, 0)

    @property
    def g3_zero_stderr(self) -> float:
        """中心峰 Poisson 计数误差（中心峰为 0 时取 1 个计数）"""
        central = float(self.counts[(self.m12 == 0) & (self.m23 == 0)][0])
        return math.sqrt(max(central, 1.0)) / self.normalization

    def side_line(self) -> np.ndarray:
        """τ₁₂ = 0、τ₂₃ ≠ 0 的峰，归一值对应双探测器 ḡ²(0)"""
        return self.normalized[(self.m12 == 0) & (self.m23 != 0)]

    def uncorrelated(self) -> np.ndarray:
        return self.normalized[~self.correlated]


def _window_mask(edges: np.ndarray, center: int, half_window: float) -> np.ndarray:
    return (edges >= center - half_window) & (edges < center + half_window)


def integrate_peaks(cmap: CoincidenceMap, config: DetectorConfig) -> PeakTable:
    """
    在每个重复周期格点上积分 peak_window × peak_window 的面积并归一

    不相关峰：τ₁₂ ≠ 0、τ₂₃ ≠ 0 且 τ₁₂ + τ₂₃ ≠ 0（1–3 探测器线在本符号约定下为 τ₁₂ = −τ₂₃）。

    Raises:
        ValueError: 符合图范围不足 ±3 个重复周期
        InsufficientStatisticsError: 不相关峰总计数为 0
    """
    half_window = config.peak_window / 2
    reach = int((cmap.origin - half_window) // config.rep_period)
    if reach < MIN_MAP_PERIODS:
        raise ValueError(f"符合图范围 ±{cmap.origin} ps 不足以覆盖 ±{MIN_MAP_PERIODS} 个重复周期的峰")

    lattice = np.arange(-reach, reach + 1)
    masks = {m: _window_mask(cmap.edges, m * config.rep_period, half_window) for m in lattice}
    m12, m23 = (grid.ravel() for grid in np.meshgrid(lattice, lattice, indexing='ij'))
    counts = np.array([cmap.counts[np.ix_(masks[a], masks[b])].sum() for a, b in zip(m12, m23)],
                      dtype=np.int64)
    correlated = (m12 == 0) | (m23 == 0) | (m12 + m23 == 0)

    normalization = float(counts[~correlated].mean()) if np.any(~correlated) else 0.0
    if normalization <= 0:
        raise InsufficientStatisticsError("不相关峰计数为 0，无法归一化三重符合图")
    return PeakTable(m12=m12, m23=m23, tau12=m12 * config.rep_period, tau23=m23 * config.rep_period,
                     counts=counts, normalized=counts / normalization, correlated=correlated,
                     normalization=normalization)


# ==================== 双探测器 ḡ² ====================
@dataclass(frozen=True)
class G2Estimate:
    g2: float
    stderr: float
    central_counts: int
    normalization: float


def g2_from_clicks(clicks: np.ndarray, config: DetectorConfig, channels: tuple[int, int] = (1, 2),
                   max_delay: int | None = None) -> G2Estimate:
    """
    双通道符合直方图的零延时峰面积 / 不相关峰平均面积（窗口 peak_window）

    Raises:
        InsufficientStatisticsError: 不相关峰计数为 0
    """
    half_bins, origin = _map_geometry(config, max_delay)
    t_a, t_b = (channel_times(clicks, ch) for ch in channels)
    edges = np.arange(-origin, origin, config.bin_width, dtype=np.int64)
    histogram = np.zeros(2 * half_bins, dtype=np.int64)
    for start in range(0, t_a.size, ANCHOR_CHUNK):
        anchors = t_a[start:start + ANCHOR_CHUNK]
        lo = np.searchsorted(t_b, anchors - origin, side='right')
        hi = np.searchsorted(t_b, anchors + origin, side='right')
        anchor = np.repeat(np.arange(anchors.size), hi - lo)
        if anchor.size == 0:
            continue
        local = np.arange(anchor.size) - np.repeat(np.cumsum(hi - lo) - (hi - lo), hi - lo)
        delay = anchors[anchor] - t_b[lo[anchor] + local]
        histogram += np.bincount(np.floor_divide(delay + origin, config.bin_width),
                                 minlength=2 * half_bins)

    half_window = config.peak_window / 2
    reach = int((origin - half_window) // config.rep_period)
    if reach < 1:
        raise ValueError(f"直方图范围 ±{origin} ps 不足以包含不相关峰")
    areas = {m: int(histogram[_window_mask(edges, m * config.rep_period, half_window)].sum())
             for m in range(-reach, reach + 1)}
    side = [areas[m] for m in areas if m != 0]
    normalization = float(np.mean(side))
    if normalization <= 0:
        raise InsufficientStatisticsError("不相关峰计数为 0，无法归一化 ḡ²")
    central = areas[0]
    g2 = central / normalization
    stderr = math.sqrt(max(central, 1)) / normalization
    logger.info(f"点击流 ḡ²(0) = {g2:.4f} ± {stderr:.4f}")
    return G2Estimate(g2=g2, stderr=stderr, central_counts=central, normalization=normalization)
