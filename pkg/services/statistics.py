# services/statistics.py
# 光子统计后处理：生成函数分解（QD 单光子 + 相干分量）、Fock 概率重建、Poisson 参考
# 全部为纯函数，线程安全

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import poisson

from utils import logger, ModelViolationError, InconsistentMomentsError

BUNCHING_TOLERANCE = 1.05
NEGATIVE_PROBABILITY_TOL = -1e-9


@dataclass(frozen=True)
class Decomposition:
    """n_out = μ_QD + μ_α"""
    mu_qd: float
    mu_alpha: float
    n_out: float
    clamped: bool = False       # g2 ∈ (1, 1.05] 被截到 1
    over_unity: bool = False    # μ_QD > 1，单光子分量平均值超过 1

    @property
    def single_photon_fraction(self) -> float:
        return self.mu_qd / self.n_out


@dataclass(frozen=True)
class PhotonStats:
    """P(0..3) 及用于重建的矩"""
    p: tuple[float, float, float, float]
    n_out: float
    g2: float
    g3: float

    @property
    def p0(self) -> float:
        return self.p[0]

    @property
    def p1(self) -> float:
        return self.p[1]

    @property
    def p2(self) -> float:
        return self.p[2]

    @property
    def p3(self) -> float:
        return self.p[3]


# ==================== 生成函数分解 ====================
def forward_g2(mu_qd: float, mu_alpha: float) -> float:
    """
    G_total(s) = [(1−μ_QD) + sμ_QD]·e^{−μ_α(1−s)}，ḡ² = G″(1)/n²

    Returns:
        (μ_α² + 2μ_QD μ_α)/(μ_QD + μ_α)²
    """
    if mu_qd < 0 or mu_alpha < 0:
        raise ValueError(f"μ_QD、μ_α 不能为负，当前为 ({mu_qd}, {mu_alpha})")
    n_out = mu_qd + mu_alpha
    if n_out == 0:
        raise ValueError("n_out = μ_QD + μ_α 不能为 0")
    return (mu_alpha ** 2 + 2 * mu_qd * mu_alpha) / n_out ** 2


def decompose_output(n_out: float, g2: float) -> Decomposition:
    """
    由 (n_out, ḡ²) 反解 μ_α = n_out(1 − √(1−g2))，μ_QD = n_out − μ_α

    g2 ∈ (1, 1.05] 视为统计噪声：截到 1（μ_QD = 0）并告警；更大则抛出 ModelViolationError。

    Raises:
        ValueError: n_out ≤ 0 或 g2 < 0
        ModelViolationError: g2 > 1.05（聚束光，本模型无法产生）
    """
    if n_out <= 0:
        raise ValueError(f"n_out 必须 > 0，当前为 {n_out}")
    if g2 < 0:
        raise ValueError(f"g2 不能为负，当前为 {g2}")
    clamped = False
    if g2 > 1:
        if g2 > BUNCHING_TOLERANCE:
            raise ModelViolationError(f"model violation: bunched light (g2 = {g2:.4f} > {BUNCHING_TOLERANCE})")
        logger.warning(f"g2 = {g2:.4f} 略大于 1，按统计噪声处理，μ_QD 取 0")
        g2, clamped = 1.0, True

    mu_alpha = n_out * (1 - math.sqrt(1 - g2))
    mu_qd = n_out - mu_alpha
    over_unity = mu_qd > 1
    if over_unity:
        logger.warning(f"μ_QD = {mu_qd:.4f} > 1，单光子分量超出物理上限，请检查输入")
    return Decomposition(mu_qd=mu_qd, mu_alpha=mu_alpha, n_out=n_out, clamped=clamped, over_unity=over_unity)


# ==================== Fock 重建 ====================
def reconstruct_fock(n_out: float, g2: float, g3: float) -> PhotonStats:
    """
    假设 P(k≥4) = 0，由 (n, g2, g3) 解出 P(0..3)

        p3 = g3·n³/6
        p2 = (g2·n² − 6p3)/2
        p1 = n − 2p2 − 3p3
        p0 = 1 − p1 − p2 − p3

    Raises:
        InconsistentMomentsError: 任一 p_k < −1e-9（不做截断）
    """
    if n_out <= 0:
        raise ValueError(f"n_out 必须 > 0，当前为 {n_out}")
    p3 = g3 * n_out ** 3 / 6
    p2 = (g2 * n_out ** 2 - 6 * p3) / 2
    p1 = n_out - 2 * p2 - 3 * p3
    p0 = 1 - p1 - p2 - p3
    probabilities = (p0, p1, p2, p3)
    negative = [k for k, p in enumerate(probabilities) if p < NEGATIVE_PROBABILITY_TOL]
    if negative:
        raise InconsistentMomentsError(
            f"inconsistent moments: (n={n_out}, g2={g2}, g3={g3}) 给出负概率 "
            + ', '.join(f'P({k})={probabilities[k]:.3e}' for k in negative))
    return PhotonStats(p=probabilities, n_out=n_out, g2=g2, g3=g3)


def poisson_reference(n: float, k_max: int = 3) -> np.ndarray:
    """p_k = e^{−n} n^k / k!，k = 0..k_max"""
    if n < 0:
        raise ValueError(f"n 不能为负，当前为 {n}")
    return poisson.pmf(np.arange(k_max + 1), n) if n > 0 else np.eye(1, k_max + 1)[0]


def moments_from_distribution(p) -> tuple[float, float, float]:
    """由显式分布 P(k) 计算 (n, g2, g3)"""
    p = np.asarray(p, dtype=float)
    k = np.arange(p.size)
    n = float(np.sum(k * p))
    if n <= 0:
        raise ValueError("分布的平均光子数为 0，g2/g3 无定义")
    pair = float(np.sum(k * (k - 1) * p))
    triple = float(np.sum(k * (k - 1) * (k - 2) * p))
    return n, pair / n ** 2, triple / n ** 3


def suppression_ratios(p_out, p_in) -> np.ndarray:
    """P_out(k)/P_in(k)，k = 1..3"""
    p_out = np.asarray(p_out, dtype=float)
    p_in = np.asarray(p_in, dtype=float)
    if p_out.size < 4 or p_in.size < 4:
        raise ValueError("需要至少 P(0..3)")
    if np.any(p_in[1:4] <= 0):
        raise ValueError("P_in(1..3) 必须 > 0")
    return p_out[1:4] / p_in[1:4]


def analysis_record(stats: PhotonStats, decomposition: Decomposition | None = None,
                    n_in: float | None = None) -> dict:
    """
    单次分析的 JSON 记录 {n_out, g2, g3, mu_qd, mu_alpha, p, poisson_ref}

    给出 n_in 时附加入射 Poisson(n_in) 分布与抑制比。
    """
    reference = poisson_reference(stats.n_out)
    record = {
        'n_out': stats.n_out,
        'g2': stats.g2,
        'g3': stats.g3,
        'mu_qd': decomposition.mu_qd if decomposition else None,
        'mu_alpha': decomposition.mu_alpha if decomposition else None,
        'p': [float(p) for p in stats.p],
        'poisson_ref': [float(p) for p in reference],
    }
    if n_in is not None and n_in > 0:
        p_in = poisson_reference(n_in)
        record['n_in'] = n_in
        record['p_in'] = [float(p) for p in p_in]
        record['suppression'] = [float(r) for r in suppression_ratios(stats.p, p_in)]
    return record
