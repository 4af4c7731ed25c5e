# routes/pulsed.py
# 脉冲功率扫描子命令（pulsed-sweep）
#
# [sweep].taus 非空时改做脉宽研究：每个 τ 一次完整扫描，sweep.csv 多出 tau 列

from dataclasses import asdict

from repositories.base import write_json
from repositories.config_repo import RunConfig
from repositories.result_repo import write_sweep
from services.dynamics import effective_decay_rate
from services.experiments import contrast_curve, figures_of_merit, pulse_length_study, pulsed_sweep
from utils import logger, QFilterError


def register(subparsers, parents) -> None:
    subparsers.add_parser('pulsed-sweep', parents=parents,
                          help='脉冲反射率与 ḡ²(0) 随 n_in 的扫描（[sweep] 节）')


def _device_summary(config: RunConfig) -> dict:
    try:
        decay = asdict(effective_decay_rate(config.device))
    except (ValueError, QFilterError) as e:
        logger.warning(f"激子有效衰减拟合失败: {e}")
        decay = None
    return {
        'figures_of_merit': asdict(figures_of_merit(config.device)),
        'effective_decay': decay,
    }


def run_pulsed_sweep(config: RunConfig, out_dir: str, artifacts: list[str]) -> dict:
    """写出 sweep.csv（+ sweep.xlsx）与 summary.json（R_max, R_min, threshold, contrast）"""
    sweep = config.sweep
    if sweep.taus:
        if sweep.with_g3:
            logger.warning("脉宽研究不计算 ḡ³，忽略 sweep.with_g3")
        study = pulse_length_study(config.device, sweep.taus, sweep.n_in, config.numerics, config.threads)
        results = list(study.values())
        summary = {'taus': {f"{tau:g}": dict(result.summary(), contrast_curve=contrast_curve(result).tolist())
                            for tau, result in study.items()}}
    else:
        result = pulsed_sweep(config.device, config.drive.tau, sweep.n_in, config.numerics,
                              config.threads, with_g3=sweep.with_g3)
        results = [result]
        summary = result.summary()

    artifacts.extend(write_sweep(out_dir, results, xlsx=config.output.xlsx))

    summary.update(_device_summary(config))
    summary['partial'] = any(result.partial for result in results)
    write_json(out_dir, 'summary.json', summary)
    artifacts.append('summary.json')
    return summary


HANDLERS = {
    'pulsed-sweep': run_pulsed_sweep,
}
