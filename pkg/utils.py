# utils.py
# 公共工具模块：统一 logger、物理常量、异常体系、线程数解析
# 所有模块统一使用 `from utils import logger`，不要各自 getLogger

import os
import logging

logger = logging.getLogger('qfilter')
logger.setLevel(logging.INFO)

# ==================== 物理常量 ====================
# 单位约定：能量 µeV，时间 ps
HBAR_UEV_PS = 658.2119          # ħ = 658.2119 µeV·ps
EV_TO_J = 1.602176634e-19       # 1 eV 对应的焦耳数
PS_PER_S = 1e12


def uev_to_rate(value_uev: float) -> float:
    """µeV 能量/速率 → ps⁻¹（除以 ħ）"""
    return value_uev / HBAR_UEV_PS


# ==================== 异常体系 ====================
class QFilterError(Exception):
    """本项目所有业务异常的基类（app.run 统一捕获并转换为退出码 2）"""


class ConfigError(QFilterError, ValueError):
    """配置项非法：未知键、类型错误、越界（消息中必须带字段名）"""


class IntegrationError(QFilterError):
    """积分器失败（步长下溢、非有限值等），携带出错时刻"""

    def __init__(self, message: str, t: float | None = None):
        super().__init__(message if t is None else f"{message} (t = {t:.6g} ps)")
        self.t = t


class StateValidityError(QFilterError):
    """密度矩阵超出厄米性/迹/正定性阈值"""


class SteadyStateError(QFilterError):
    """稳态求解未收敛"""


class TruncationError(QFilterError):
    """Fock 截断收敛失败（超过上限）"""


class ModelViolationError(QFilterError):
    """输入统计量与模型不兼容（如 g2 > 1 的聚束光）"""


class InconsistentMomentsError(QFilterError):
    """由 (n, g2, g3) 反演出负概率"""


class InsufficientStatisticsError(QFilterError):
    """符合计数不足，无法归一化"""


# ==================== 线程数 ====================
def resolve_threads(threads: int | None = None) -> int:
    """
    解析并发线程数：命令行 > 环境变量 QFILTER_THREADS > 机器核数

    Args:
        threads: 命令行传入的线程数（None 表示未指定）

    Returns:
        int: 至少为 1 的线程数
    """
    if threads is None:
        env_value = os.environ.get('QFILTER_THREADS', '').strip()
        if env_value:
            try:
                threads = int(env_value)
            except ValueError:
                logger.warning(f"环境变量 QFILTER_THREADS 非法: {env_value}，改用机器核数")
                threads = None
    if threads is None:
        threads = os.cpu_count() or 1
    return max(1, int(threads))
