# routes/clicks.py
# 点击流子命令：clicks（Monte Carlo 生成时间标签点击流）与 g3-map（三重符合图与峰积分）
#
# 光子数分布来源 [clicks].source：
#   poisson：Poisson(mean)
#   single：纯单光子
#   simulated：器件模型的 (n_out, ḡ², ḡ³) 经 Fock 重建得到 P(0..3)
#   file：直接读取 [clicks].input 中的点击文件（仅 g3-map）

import numpy as np

from repositories.base import write_json
from repositories.click_repo import read_clicks, write_clicks, write_clicks_csv
from repositories.config_repo import RunConfig
from repositories.result_repo import write_g3_map, write_g3_peaks
from services.experiments import output_statistics
from services.statistics import moments_from_distribution, reconstruct_fock
from services.tttr import (
    coincidence_map, distribution_from_probabilities, g2_from_clicks, integrate_peaks,
    poisson_distribution, simulate_clicks, single_photon_distribution,
)
from utils import logger, ConfigError, InconsistentMomentsError


def register(subparsers, parents) -> None:
    subparsers.add_parser('clicks', parents=parents,
                          help='Monte Carlo 生成三探测器点击流（clicks.bin）')
    subparsers.add_parser('g3-map', parents=parents,
                          help='由点击流统计 ḡ³(τ₁₂, τ₂₃) 符合图并积分各峰')


# ==================== 光子数分布 ====================
def photon_distribution(config: RunConfig) -> np.ndarray:
    source = config.clicks.source
    if source == 'poisson':
        return poisson_distribution(config.clicks.mean)
    if source == 'single':
        return single_photon_distribution()
    if source == 'simulated':
        n_in = config.clicks.n_in if config.clicks.n_in is not None else config.drive.n_in
        moments, _ = output_statistics(config.device, n_in, config.drive.tau, config.numerics,
                                       laser_detuning=config.drive.laser_detuning)
        stats = reconstruct_fock(moments.n_out, moments.g2, moments.g3)
        logger.info(f"器件模型 n_in={n_in}: P(0..3) = {np.round(stats.p, 6).tolist()}")
        return distribution_from_probabilities(stats.p)
    raise ConfigError(f"clicks.source = {source} 不能用于生成点击流")


def _simulate(config: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    distribution = photon_distribution(config)
    clicks = simulate_clicks(distribution, config.detector, config.clicks.n_pulses, config.seed,
                             threads=config.threads)
    return clicks, distribution


# ==================== 子命令 ====================
def run_clicks(config: RunConfig, out_dir: str, artifacts: list[str]) -> dict:
    """写出 clicks.bin（+ clicks.csv）与 summary.json"""
    clicks, distribution = _simulate(config)
    write_clicks(out_dir, 'clicks.bin', clicks)
    artifacts.append('clicks.bin')
    if config.clicks.csv:
        write_clicks_csv(out_dir, 'clicks.csv', clicks)
        artifacts.append('clicks.csv')

    summary = {
        'source': config.clicks.source,
        'n_pulses': config.clicks.n_pulses,
        'distribution': distribution.tolist(),
        'total_clicks': int(clicks.size),
        'clicks_per_channel': {int(ch): int(np.sum(clicks['channel'] == ch))
                               for ch in range(1, config.detector.n_channels + 1)},
    }
    write_json(out_dir, 'summary.json', summary)
    artifacts.append('summary.json')
    return summary


def _reconstruction(config: RunConfig, clicks: np.ndarray, g2: float, g3: float) -> dict | None:
    """由点击率估计每脉冲光子数，再连同 ḡ²、ḡ³ 重建 P(0..3)；读文件时脉冲数未知，跳过"""
    detection = float(np.dot(config.detector.arm_probabilities, config.detector.efficiencies))
    if config.clicks.source == 'file' or config.clicks.n_pulses == 0 or detection == 0:
        return None
    n_est = clicks.size / (config.clicks.n_pulses * detection)
    if n_est <= 0:
        return None
    try:
        stats = reconstruct_fock(n_est, g2, g3)
    except InconsistentMomentsError as e:
        logger.warning(f"点击流重建失败: {e}")
        return {'n_out': n_est, 'error': str(e)}
    return {'n_out': n_est, 'p': list(stats.p)}


def run_g3_map(config: RunConfig, out_dir: str, artifacts: list[str]) -> dict:
    """写出 g3_map.csv、g3_peaks.csv 与 summary.json"""
    if config.detector.n_channels != 3:
        raise ConfigError("g3-map 需要三个探测通道（detector.arm_probabilities 长度为 3）")
    if config.clicks.source == 'file':
        clicks, distribution = read_clicks(config.clicks.input), None
    else:
        clicks, distribution = _simulate(config)

    max_delay = config.clicks.max_periods * config.detector.rep_period
    cmap = coincidence_map(clicks, config.detector, max_delay)
    write_g3_map(out_dir, cmap)
    artifacts.append('g3_map.csv')
    table = integrate_peaks(cmap, config.detector)
    write_g3_peaks(out_dir, table)
    artifacts.append('g3_peaks.csv')

    g2 = g2_from_clicks(clicks, config.detector, channels=(1, 2), max_delay=max_delay)
    summary = {
        'source': config.clicks.source,
        'total_clicks': int(clicks.size),
        'total_triples': cmap.total,
        'g3_zero': table.g3_zero,
        'g3_zero_stderr': table.g3_zero_stderr,
        'g2_zero': g2.g2,
        'g2_zero_stderr': g2.stderr,
        'side_line_mean': float(np.mean(table.side_line())),
        'peak_mean': float(np.mean(table.normalized)),
        'normalization': table.normalization,
    }
    if distribution is not None:
        n, g2_true, g3_true = moments_from_distribution(distribution)
        summary['expected'] = {'n': n, 'g2': g2_true, 'g3': g3_true}
    summary['reconstruction'] = _reconstruction(config, clicks, g2.g2, table.g3_zero)
    logger.info(f"ḡ³(0) = {table.g3_zero:.4f} ± {table.g3_zero_stderr:.4f}, ḡ²(0) = {g2.g2:.4f}")
    write_json(out_dir, 'summary.json', summary)
    artifacts.append('summary.json')
    return summary


HANDLERS = {
    'clicks': run_clicks,
    'g3-map': run_g3_map,
}
