# routes/photon_stats.py
# 光子统计子命令：decompose（单光子/相干分解）与 fock（P(0..3) 重建）
#
# 输入优先取 [analysis] 中给定的实测量；缺省时按 [drive] 的脉冲跑一次器件模型得到 (n_out, ḡ², ḡ³)

from dataclasses import asdict

from repositories.base import write_json
from repositories.config_repo import RunConfig
from services.experiments import output_statistics
from services.statistics import analysis_record, decompose_output, reconstruct_fock
from utils import logger, ConfigError, ModelViolationError


def register(subparsers, parents) -> None:
    subparsers.add_parser('decompose', parents=parents,
                          help='由 (n_out, ḡ²) 分解单光子与相干分量')
    subparsers.add_parser('fock', parents=parents,
                          help='由 (n_out, ḡ², ḡ³) 重建 P(0..3)')


def _moments(config: RunConfig, need_g3: bool) -> tuple[float, float, float | None, str]:
    """返回 (n_out, g2, g3, 来源)"""
    analysis = config.analysis
    given = [analysis.n_out, analysis.g2] + ([analysis.g3] if need_g3 else [])
    if all(value is not None for value in given):
        return analysis.n_out, analysis.g2, analysis.g3, 'analysis'
    if any(value is not None for value in given):
        missing = [name for name, value in zip(('n_out', 'g2', 'g3'), given) if value is None]
        raise ConfigError(f"[analysis] 不完整，缺少 {', '.join('analysis.' + m for m in missing)}")

    drive = config.drive
    moments, _ = output_statistics(config.device, drive.n_in, drive.tau, config.numerics,
                                   laser_detuning=drive.laser_detuning)
    return moments.n_out, moments.g2, moments.g3, 'model'


def run_decompose(config: RunConfig, out_dir: str, artifacts: list[str]) -> dict:
    n_out, g2, _, source = _moments(config, need_g3=False)
    decomposition = decompose_output(n_out, g2)
    record = dict(asdict(decomposition), g2=g2, source=source,
                  single_photon_fraction=decomposition.single_photon_fraction)
    logger.info(f"分解: μ_QD = {decomposition.mu_qd:.4e}, μ_α = {decomposition.mu_alpha:.4e}")
    write_json(out_dir, 'analysis.json', record)
    artifacts.append('analysis.json')
    return record


def run_fock(config: RunConfig, out_dir: str, artifacts: list[str]) -> dict:
    n_out, g2, g3, source = _moments(config, need_g3=True)
    stats = reconstruct_fock(n_out, g2, g3)
    try:
        decomposition = decompose_output(n_out, g2)
    except ModelViolationError as e:
        logger.warning(f"分解跳过: {e}")
        decomposition = None

    n_in = config.analysis.n_in if source == 'analysis' else config.drive.n_in
    record = analysis_record(stats, decomposition, n_in)
    record['source'] = source
    write_json(out_dir, 'analysis.json', record)
    artifacts.append('analysis.json')
    return record


HANDLERS = {
    'decompose': run_decompose,
    'fock': run_fock,
}
